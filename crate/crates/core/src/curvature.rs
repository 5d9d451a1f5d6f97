//! Kronecker factors of the extended (cross-example) curvature of each
//! affine block, their assembly into dense blocks, and the term list that
//! carries curvature across tasks.
//!
//! For a block with unrolled input `ā` (homogeneous row appended) over `S`
//! spatial locations and per-example output derivatives `D[n]`, a batch of
//! `N` contributes
//!
//! ```text
//! Ā   = Σ_s E_n[ā_(s,n) ā_(s,n)ᵀ]
//! Ā′  = Σ_s E_n[ā_(s,n)] E_n[ā_(s,n)]ᵀ
//! Ĥ′  = (1/S) Σ_s E_n[Σ_m D[n]_(s,m) D[n]_(s,m)ᵀ]
//! Ĥ″  = (1/S) Σ_s E_n[(Σ_m D[n]_(s,m)) (Σ_m D[n]_(s,m))ᵀ]
//! ```
//!
//! and the block is `Ā⊗Ĥ′ + (NĀ′ − Ā)⊗(Ĥ″ − Ĥ′) / max(N−1, 1)`. Fully
//! connected layers are the case `S = 1`.

use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::{gemm, kron, Matrix, Op};
use crate::net::{loss, Block, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coupling {
    /// Only `l = l′` blocks.
    Diagonal,
    /// Every `(l, l′)` pair; fully connected networks only.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// Labels drawn from the model's softmax, `draws` passes per batch.
    Sampled { draws: usize },
    /// Expectation over labels computed exactly by weighting every class.
    Exact,
}

/// Where the output derivatives are taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    /// After the norm layer: the output of the merged layer.
    BlockOutput,
    /// Directly after the affine layer, before any norm layer.
    AffineOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FisherKind {
    /// Keeps the cross-example derivative terms.
    Extended,
    /// Only the `m = n` terms; stored with `Ĥ″ = Ĥ′` so the block is `Ā⊗Ĥ`.
    Kfac,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EstimateConfig {
    pub coupling: Coupling,
    pub labels: LabelMode,
    pub tap: Tap,
    pub kind: FisherKind,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self { coupling: Coupling::Diagonal, labels: LabelMode::Sampled { draws: 1 }, tap: Tap::BlockOutput, kind: FisherKind::Extended }
    }
}

/// The four factor matrices of one `(l, l′)` block.
#[derive(Clone, Debug, PartialEq)]
pub struct Factors {
    pub a: Matrix,
    pub a_prime: Matrix,
    pub h_prime: Matrix,
    pub h_dprime: Matrix,
}

impl Factors {
    fn zeros(in_l: usize, in_r: usize, out_l: usize, out_r: usize) -> Self {
        Self {
            a: Matrix::zeros(in_l, in_r),
            a_prime: Matrix::zeros(in_l, in_r),
            h_prime: Matrix::zeros(out_l, out_r),
            h_dprime: Matrix::zeros(out_l, out_r),
        }
    }

    fn scale(&mut self, s: f64) {
        for m in [&mut self.a, &mut self.a_prime, &mut self.h_prime, &mut self.h_dprime] {
            m.scale_in_place(s);
        }
    }

    fn mix(&mut self, s: f64, other: &Factors, t: f64) -> Result<()> {
        self.scale(s);
        self.a.add_scaled(t, &other.a)?;
        self.a_prime.add_scaled(t, &other.a_prime)?;
        self.h_prime.add_scaled(t, &other.h_prime)?;
        self.h_dprime.add_scaled(t, &other.h_dprime)
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.a_prime.is_finite() && self.h_prime.is_finite() && self.h_dprime.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorSet {
    /// Batch size `N` used during estimation.
    pub batch_size: usize,
    /// Number of `(batch, example)` pairs averaged.
    pub samples: usize,
    pub coupling: Coupling,
    pub kind: FisherKind,
    /// Per block: `(C_l, fan_in + 1)`, the merged-weight shape.
    pub shapes: Vec<(usize, usize)>,
    /// Per block: spatial size `S_l`.
    pub spatial: Vec<usize>,
    /// Diagonal: entry `l`. Full: entry `l·L + l′`.
    pub blocks: Vec<Factors>,
}

impl FactorSet {
    pub fn layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_conv(&self) -> bool {
        self.spatial.iter().any(|&s| s > 1)
    }

    pub fn get(&self, l: usize, l2: usize) -> Option<&Factors> {
        let n = self.layers();
        if l >= n || l2 >= n {
            return None;
        }
        match self.coupling {
            Coupling::Diagonal => (l == l2).then(|| &self.blocks[l]),
            Coupling::Full => Some(&self.blocks[l * n + l2]),
        }
    }

    /// `(l, l′)` pairs that carry factors.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.layers();
        match self.coupling {
            Coupling::Diagonal => (0..n).map(|l| (l, l)).collect(),
            Coupling::Full => (0..n).flat_map(|l| (0..n).map(move |r| (l, r))).collect(),
        }
    }

    /// `1/max(N−1, 1)`.
    pub fn cross_coefficient(&self) -> f64 {
        1.0 / (self.batch_size.max(2) - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layers();
        let want = match self.coupling {
            Coupling::Diagonal => n,
            Coupling::Full => n * n,
        };
        if self.blocks.len() != want || self.spatial.len() != n || self.batch_size == 0 {
            return Err(shape_err!("factor set has {} blocks for {n} layers", self.blocks.len()));
        }
        for (l, r) in self.pairs() {
            let f = self.get(l, r).expect("pair exists");
            let (ins, outs) = ((self.shapes[l].1, self.shapes[r].1), (self.shapes[l].0, self.shapes[r].0));
            if f.a.shape() != ins || f.a_prime.shape() != ins || f.h_prime.shape() != outs || f.h_dprime.shape() != outs {
                return Err(shape_err!("factors of block ({l}, {r}) do not match shapes {ins:?} / {outs:?}"));
            }
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("factors of block ({l}, {r})")));
            }
        }
        Ok(())
    }
}

/// Dense block `{H}_{l,l′}` over column-major `vec(W̃_l)` × `vec(W̃_l′)`.
pub fn assemble_block(fs: &FactorSet, l: usize, l2: usize) -> Result<Matrix> {
    let f = fs.get(l, l2).ok_or_else(|| invalid!("no factors for block ({l}, {l2})"))?;
    let mut h = kron(&f.a, &f.h_prime);
    let n = fs.batch_size as f64;
    let mut outer = f.a_prime.scaled(n);
    outer.add_scaled(-1.0, &f.a)?;
    let inner = f.h_dprime.sub(&f.h_prime)?;
    h.add_scaled(fs.cross_coefficient(), &kron(&outer, &inner))?;
    Ok(h)
}

/// [`assemble_block`] for a convolutional block's diagonal factors.
pub fn assemble_block_conv(fs: &FactorSet, l: usize) -> Result<Matrix> {
    if l >= fs.layers() {
        return Err(invalid!("block {l} out of range"));
    }
    assemble_block(fs, l, l)
}

fn tap_position(b: &Block, tap: Tap) -> usize {
    match tap {
        Tap::BlockOutput => b.output(),
        Tap::AffineOutput => b.affine + 1,
    }
}

/// Running sums over batches.
pub struct FactorAccumulator {
    cfg: EstimateConfig,
    blocks: Vec<Block>,
    set: FactorSet,
    batches: usize,
}

impl FactorAccumulator {
    pub fn new(net: &Network, batch_size: usize, cfg: EstimateConfig) -> Result<Self> {
        if batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        if let LabelMode::Sampled { draws: 0 } = cfg.labels {
            return Err(invalid!("at least one label draw per batch"));
        }
        let blocks = net.blocks();
        let mut shapes = Vec::new();
        let mut spatial = Vec::new();
        for b in &blocks {
            let a = net.affine(b.affine)?;
            shapes.push((a.out_features(), a.fan_in() + 1));
            spatial.push(net.shape_at(b.affine + 1).1);
        }
        if cfg.coupling == Coupling::Full && spatial.iter().any(|&s| s > 1) {
            return Err(invalid!("full coupling is only supported for fully connected networks"));
        }
        let mut set = FactorSet {
            batch_size,
            samples: 0,
            coupling: cfg.coupling,
            kind: cfg.kind,
            shapes: shapes.clone(),
            spatial,
            blocks: Vec::new(),
        };
        set.blocks = set
            .pairs()
            .into_iter()
            .map(|(l, r)| Factors::zeros(shapes[l].1, shapes[r].1, shapes[l].0, shapes[r].0))
            .collect();
        Ok(Self { cfg, blocks, set, batches: 0 })
    }

    /// Adds one batch `x` (`features × N`).
    pub fn add_batch<R: Rng + ?Sized>(&mut self, net: &Network, x: &Matrix, rng: &mut R) -> Result<()> {
        let n = self.set.batch_size;
        if x.cols() != n {
            return Err(invalid!("batch of {} examples, estimator uses N = {n}", x.cols()));
        }
        let fwd = net.forward(x, true)?;
        let nf = n as f64;
        let abar: Vec<Matrix> = self.blocks.iter().map(|b| fwd.affine_input(b.affine).with_appended_row(1.0)).collect();
        let means: Vec<Matrix> = abar
            .iter()
            .zip(&self.set.spatial)
            .map(|(a, &s)| Matrix::from_fn(a.rows(), s, |i, j| (0..n).map(|m| a[(i, m * s + j)]).sum::<f64>() / nf))
            .collect();
        let pairs = self.set.pairs();
        for (k, &(l, r)) in pairs.iter().enumerate() {
            let f = &mut self.set.blocks[k];
            gemm(1.0 / nf, &abar[l], Op::N, &abar[r], Op::T, 1.0, &mut f.a)?;
            gemm(1.0, &means[l], Op::N, &means[r], Op::T, 1.0, &mut f.a_prime)?;
        }

        let taps: Vec<usize> = self.blocks.iter().map(|b| tap_position(b, self.cfg.tap)).collect();
        let probs = loss::softmax(fwd.logits());
        let classes = probs.rows();
        let sampled: Vec<Vec<usize>> = match self.cfg.labels {
            LabelMode::Sampled { draws } => (0..draws).map(|_| loss::sample_model_labels(fwd.logits(), rng)).collect(),
            LabelMode::Exact => Vec::new(),
        };
        for ex in 0..n {
            let p = probs.col_vec(ex);
            let seeds: Vec<(f64, usize)> = match self.cfg.labels {
                LabelMode::Sampled { draws } => sampled.iter().map(|ys| (1.0 / draws as f64, ys[ex])).collect(),
                LabelMode::Exact => (0..classes).filter(|&k| p[k] > 0.0).map(|k| (p[k], k)).collect(),
            };
            for (weight, label) in seeds {
                let mut seed = p.clone();
                seed[label] -= 1.0;
                let d = net.per_example_sweep(&fwd, ex, &seed, &taps)?;
                self.add_sweep(ex, weight, &d)?;
            }
        }
        self.batches += 1;
        self.set.samples += n;
        Ok(())
    }

    fn add_sweep(&mut self, ex: usize, weight: f64, d: &[Matrix]) -> Result<()> {
        let n = self.set.batch_size;
        let reduced: Vec<(Matrix, Matrix)> = d
            .iter()
            .zip(&self.set.spatial)
            .map(|(dl, &s)| {
                let own = dl.submatrix(0, ex * s, dl.rows(), s);
                let summed = Matrix::from_fn(dl.rows(), s, |i, j| (0..n).map(|m| dl[(i, m * s + j)]).sum());
                (own, summed)
            })
            .collect();
        let pairs = self.set.pairs();
        for (k, &(l, r)) in pairs.iter().enumerate() {
            let sc = weight / (self.set.spatial[l] * n) as f64;
            let f = &mut self.set.blocks[k];
            match self.cfg.kind {
                FisherKind::Extended => {
                    gemm(sc, &d[l], Op::N, &d[r], Op::T, 1.0, &mut f.h_prime)?;
                    gemm(sc, &reduced[l].1, Op::N, &reduced[r].1, Op::T, 1.0, &mut f.h_dprime)?;
                }
                FisherKind::Kfac => {
                    gemm(sc, &reduced[l].0, Op::N, &reduced[r].0, Op::T, 1.0, &mut f.h_prime)?;
                    gemm(sc, &reduced[l].0, Op::N, &reduced[r].0, Op::T, 1.0, &mut f.h_dprime)?;
                }
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<FactorSet> {
        if self.batches == 0 {
            return Err(invalid!("no batches were accumulated"));
        }
        let inv = 1.0 / self.batches as f64;
        for f in &mut self.set.blocks {
            f.scale(inv);
        }
        self.set.validate()?;
        Ok(self.set)
    }
}

/// Averages the factors over `batches`, each of exactly `batch_size` examples.
pub fn estimate_factors<R, I>(net: &Network, batches: I, batch_size: usize, cfg: EstimateConfig, rng: &mut R) -> Result<FactorSet>
where
    R: Rng + ?Sized,
    I: IntoIterator,
    I::Item: std::borrow::Borrow<Matrix>,
{
    let mut acc = FactorAccumulator::new(net, batch_size, cfg)?;
    for x in batches {
        acc.add_batch(net, std::borrow::Borrow::borrow(&x), rng)?;
    }
    acc.finish()
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn all_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureTerm {
    pub weight: f64,
    pub factors: FactorSet,
}

/// Weighted sum of per-task factored curvatures.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curvature {
    pub terms: Vec<CurvatureTerm>,
}

impl Curvature {
    pub fn new() -> Self {
        Self::default()
    }

    /// `H ← λ_s H + λ_t H_t`, kept as a term list. `λ_s` may be zero only
    /// while the list is empty (the first task).
    pub fn accumulate(&mut self, lambda_s: f64, new: FactorSet, lambda_t: f64) -> Result<()> {
        if !(lambda_t > 0.0) || !(lambda_s > 0.0 || (lambda_s == 0.0 && self.terms.is_empty())) {
            return Err(invalid!("importance weights must be positive (λ_s = {lambda_s}, λ_t = {lambda_t})"));
        }
        new.validate()?;
        self.check_compatible(&new)?;
        for t in &mut self.terms {
            t.weight *= lambda_s;
        }
        self.terms.push(CurvatureTerm { weight: lambda_t, factors: new });
        Ok(())
    }

    /// Like [`Curvature::accumulate`] but folds the new factors into a
    /// single term by weighted averaging of each factor matrix. A sum of
    /// Kronecker products is not a Kronecker product, so this is an
    /// additional approximation that keeps memory constant.
    pub fn accumulate_folded(&mut self, lambda_s: f64, new: FactorSet, lambda_t: f64) -> Result<()> {
        if self.terms.len() > 1 {
            return Err(invalid!("cannot fold into a curvature with {} terms", self.terms.len()));
        }
        if self.terms.is_empty() {
            return self.accumulate(lambda_s, new, lambda_t);
        }
        if !(lambda_s > 0.0 && lambda_t > 0.0) {
            return Err(invalid!("importance weights must be positive"));
        }
        new.validate()?;
        self.check_compatible(&new)?;
        let t = &mut self.terms[0];
        if t.factors.batch_size != new.batch_size || t.factors.coupling != new.coupling {
            return Err(invalid!("folded factors need the same N and coupling"));
        }
        let ws = lambda_s * t.weight;
        let total = ws + lambda_t;
        for (f, g) in t.factors.blocks.iter_mut().zip(&new.blocks) {
            f.mix(ws / total, g, lambda_t / total)?;
        }
        t.factors.samples += new.samples;
        t.weight = total;
        Ok(())
    }

    fn check_compatible(&self, new: &FactorSet) -> Result<()> {
        match self.terms.first() {
            Some(t) if t.factors.shapes != new.shapes => Err(shape_err!("new factors have shapes {:?}, existing {:?}", new.shapes, t.factors.shapes)),
            _ => Ok(()),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.weight).collect()
    }
}
