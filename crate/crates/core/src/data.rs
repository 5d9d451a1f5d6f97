//! Datasets, the IDX container, permuted tasks and splits.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const DATA_DIR_ENV: &str = "XKFAC_DATA_DIR";

/// Examples are the columns of `images`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.cols() != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", images.cols(), labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {y} outside [0, {classes})")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.rows()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_cols(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        let d = self.select(idx);
        (d.images, d.labels)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(Error::Data(format!(
                "{} is truncated: needs {n} more bytes at offset {}, found {have} (missing {} bytes)",
                self.what,
                self.pos,
                n - have
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Parses an IDX image file into `pixels × count` values scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Matrix, usize, usize)> {
    let mut r = Reader { bytes, pos: 0, what: "IDX image file" };
    let magic = r.u32()?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Data(format!("bad IDX image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let pixels = rows * cols;
    let raw = r.take(count * pixels)?;
    let mut m = Matrix::zeros(pixels, count);
    for n in 0..count {
        for p in 0..pixels {
            m[(p, n)] = raw[n * pixels + p] as f64 / 255.0;
        }
    }
    Ok((m, rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, pos: 0, what: "IDX label file" };
    let magic = r.u32()?;
    if magic != LABELS_MAGIC {
        return Err(Error::Data(format!("bad IDX label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let count = r.u32()? as usize;
    Ok(r.take(count)?.iter().map(|&b| b as usize).collect())
}

pub fn encode_idx_images(pixels: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len() * rows * cols);
    for v in [IMAGES_MAGIC, pixels.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in pixels {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())));
    let (images, _, _) = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    if images.cols() != labels.len() {
        return Err(Error::Data(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            images.cols(),
            labels_path.display(),
            labels.len()
        )));
    }
    Dataset::new(images, labels, 10)
}

/// Data directory: explicit flag, then `XKFAC_DATA_DIR`, then `./data`.
pub fn data_dir(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data")),
    }
}

/// Loads the MNIST training set from `dir` or `dir/mnist`.
pub fn load_mnist_train(dir: &Path) -> Result<Dataset> {
    const IMAGES: &str = "train-images-idx3-ubyte";
    const LABELS: &str = "train-labels-idx1-ubyte";
    for d in [dir.to_path_buf(), dir.join("mnist")] {
        if d.join(IMAGES).is_file() && d.join(LABELS).is_file() {
            return load_mnist_idx(&d.join(IMAGES), &d.join(LABELS));
        }
    }
    Err(Error::Data(format!("MNIST files {IMAGES} / {LABELS} not found in {} (set {DATA_DIR_ENV})", dir.display())))
}

/// The feature permutation of task `seed`; seed 0 is the identity.
pub fn task_permutation(features: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..features).collect();
    if seed != 0 {
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    perm
}

/// Applies one seeded pixel permutation to every image.
pub fn permute_task(base: &Dataset, seed: u64) -> Dataset {
    let perm = task_permutation(base.features(), seed);
    let images = Matrix::from_fn(base.features(), base.len(), |p, n| base.images[(perm[p], n)]);
    Dataset { images, labels: base.labels.clone(), classes: base.classes }
}

/// Draws `count` examples stratified by label. Returns `(taken, rest)`.
///
/// Per-class quotas use largest-remainder rounding of `count · share`, so the
/// total is exact and each class is within one example of its proportion.
pub fn stratified_take(ds: &Dataset, count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if count == 0 || count >= ds.len() {
        return Err(invalid!("cannot take {count} of {} examples leaving both parts non-empty", ds.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let exact: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * count as f64 / ds.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ds.classes).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = count - quota.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let (mut taken, mut rest) = (Vec::with_capacity(count), Vec::with_capacity(ds.len() - count));
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        taken.extend_from_slice(&idx[..quota[c]]);
        rest.extend_from_slice(&idx[quota[c]..]);
    }
    taken.sort_unstable();
    rest.sort_unstable();
    Ok((ds.select(&taken), ds.select(&rest)))
}

/// Stratified `(train, val)` split with `round(val_fraction · len)` validation examples.
pub fn split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(invalid!("validation fraction {val_fraction} outside (0, 1)"));
    }
    let n_val = (val_fraction * ds.len() as f64).round() as usize;
    let (val, train) = stratified_take(ds, n_val, seed)?;
    Ok((train, val))
}

/// Synthetic 8×8 single-channel images of three shape classes (horizontal
/// bar, vertical bar, hollow square) at random positions with uniform noise.
pub fn synthetic_shapes(count: usize, seed: u64) -> Dataset {
    const SIDE: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Matrix::zeros(SIDE * SIDE, count);
    let mut labels = Vec::with_capacity(count);
    for n in 0..count {
        let class = n % 3;
        let mut img = [0.0f64; SIDE * SIDE];
        match class {
            0 => {
                let y = rng.random_range(1..SIDE - 1);
                let x0 = rng.random_range(0..3);
                (x0..x0 + 5).for_each(|x| img[y * SIDE + x] = 1.0);
            }
            1 => {
                let x = rng.random_range(1..SIDE - 1);
                let y0 = rng.random_range(0..3);
                (y0..y0 + 5).for_each(|y| img[y * SIDE + x] = 1.0);
            }
            _ => {
                let (y0, x0) = (rng.random_range(0..4), rng.random_range(0..4));
                for k in 0..4 {
                    img[y0 * SIDE + x0 + k] = 1.0;
                    img[(y0 + 3) * SIDE + x0 + k] = 1.0;
                    img[(y0 + k) * SIDE + x0] = 1.0;
                    img[(y0 + k) * SIDE + x0 + 3] = 1.0;
                }
            }
        }
        for (p, v) in img.iter().enumerate() {
            images[(p, n)] = (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0);
        }
        labels.push(class);
    }
    Dataset { images, labels, classes: 3 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, classes: usize) -> Dataset {
        let images = Matrix::from_fn(6, n, |p, j| ((p * 31 + j * 17) % 256) as f64 / 255.0);
        let labels = (0..n).map(|j| (j * 5 + j / 7) % classes).collect();
        Dataset::new(images, labels, classes).unwrap()
    }

    #[test]
    fn idx_fixture_roundtrip() {
        let imgs = vec![vec![0, 255, 128, 7, 1, 2], vec![9, 8, 7, 6, 5, 4]];
        let (m, rows, cols) = parse_idx_images(&encode_idx_images(&imgs, 2, 3)).unwrap();
        assert_eq!((rows, cols), (2, 3));
        assert_eq!(m.shape(), (6, 2));
        assert_eq!(m[(1, 0)], 1.0);
        assert_eq!(m[(2, 0)], 128.0 / 255.0);
        assert_eq!(m[(5, 1)], 4.0 / 255.0);
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[3, 9])).unwrap(), vec![3, 9]);
    }

    #[test]
    fn truncated_file_names_missing_bytes() {
        let mut bytes = encode_idx_images(&[vec![1, 2, 3, 4]], 2, 2);
        bytes.truncate(bytes.len() - 3);
        let err = parse_idx_images(&bytes).unwrap_err().to_string();
        assert!(err.contains("missing 3 bytes"), "{err}");
    }

    #[test]
    fn bad_magic_and_count_mismatch() {
        let mut bytes = encode_idx_labels(&[1]);
        bytes[3] = 0x03;
        assert!(parse_idx_labels(&bytes).unwrap_err().to_string().contains("magic"));
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, encode_idx_images(&[vec![0; 4], vec![1; 4]], 2, 2)).unwrap();
        fs::write(&lp, encode_idx_labels(&[1])).unwrap();
        assert!(load_mnist_idx(&ip, &lp).unwrap_err().to_string().contains("labels"));
    }

    #[test]
    fn seed_zero_is_identity_task() {
        let ds = toy(10, 3);
        assert_eq!(permute_task(&ds, 0), ds);
    }

    #[test]
    fn permutation_is_deterministic_and_preserves_pixels() {
        let ds = toy(10, 3);
        let a = permute_task(&ds, 5);
        assert_eq!(a, permute_task(&ds, 5));
        assert_ne!(a.images, ds.images);
        for n in 0..ds.len() {
            let mut x = ds.images.col_vec(n);
            let mut y = a.images.col_vec(n);
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn split_is_stratified_and_exhaustive() {
        let ds = toy(600, 10);
        let (train, val) = split(&ds, 0.1, 3).unwrap();
        assert_eq!((train.len(), val.len()), (540, 60));
        let (all, tc, vc) = (ds.class_counts(), train.class_counts(), val.class_counts());
        for c in 0..10 {
            assert_eq!(tc[c] + vc[c], all[c]);
            assert!((vc[c] as f64 - 0.1 * all[c] as f64).abs() <= 1.0);
        }
        let mut cols: Vec<Vec<u64>> = (0..600).map(|j| ds.images.col_vec(j).iter().map(|v| v.to_bits()).collect()).collect();
        let mut parts: Vec<Vec<u64>> = (0..540)
            .map(|j| train.images.col_vec(j))
            .chain((0..60).map(|j| val.images.col_vec(j)))
            .map(|c| c.iter().map(|v| v.to_bits()).collect())
            .collect();
        cols.sort();
        parts.sort();
        assert_eq!(cols, parts);
    }

    #[test]
    fn degenerate_splits_rejected() {
        let ds = toy(5, 2);
        assert!(split(&ds, 0.0, 0).is_err());
        assert!(split(&ds, 1.0, 0).is_err());
        assert!(split(&ds, 0.01, 0).is_err());
    }

    #[test]
    fn synthetic_shapes_are_balanced_and_scaled() {
        let ds = synthetic_shapes(600, 1);
        assert_eq!(ds.features(), 64);
        assert_eq!(ds.class_counts(), vec![200, 200, 200]);
        assert!(ds.images.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ds, synthetic_shapes(600, 1));
    }
}
