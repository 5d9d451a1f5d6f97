//! Binary files for networks, curvature and anchors.
//!
//! Every file starts with an 8-byte magic and a `u32` format version. All
//! integers are little-endian `u64` unless noted, floats are little-endian
//! IEEE-754 `f64` written bit for bit, and a matrix is `rows, cols` followed
//! by its entries in row-major order.
//!
//! Network (`XKNET`): `in_channels, in_spatial, layer count`, then per layer
//! a `u8` tag:
//! - `0` affine: `has_bias: u8`, `conv: u8`, six geometry integers when
//!   `conv = 1` (`in_channels, in_h, in_w, kernel, stride, padding`), the
//!   weight matrix and `C_out` bias values;
//! - `1` norm: `channels`, `mode: u8` (0 BN, 1 BRN), `eps, r_max, d_max,
//!   momentum`, then `γ, β, μ, σ²` with `channels` values each;
//! - `2` ReLU, `3` flatten.
//!
//! Curvature (`XKCURV`): term count, then per term its weight, `N`, sample
//! count, `coupling: u8` (0 diagonal, 1 full), `kind: u8` (0 extended,
//! 1 K-FAC), block count with `(C_l, fan_in + 1, S_l)` per block, and the
//! factor-pair count with `Ā, Ā′, Ĥ′, Ĥ″` per pair.
//!
//! Anchors (`XKANCH`): `interpretation: u8` (0 BN, 1 BRN, 2 const-stats,
//! 3 eval-stats), matrix count, matrices.

use std::fs;
use std::path::Path;

use crate::curvature::{Coupling, Curvature, CurvatureTerm, FactorSet, Factors, FisherKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{Affine, ConvGeometry, Layer, Network, NormLayer, NormMode};
use crate::penalty::Interpretation;

pub const FORMAT_VERSION: u32 = 1;
pub const NETWORK_MAGIC: [u8; 8] = *b"XKNET\0\0\0";
pub const CURVATURE_MAGIC: [u8; 8] = *b"XKCURV\0\0";
pub const ANCHOR_MAGIC: [u8; 8] = *b"XKANCH\0\0";

/// Anchors with the interpretation they were merged under.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorFile {
    pub interpretation: Interpretation,
    pub anchors: Vec<Matrix>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: [u8; 8]) -> Self {
        let mut v = magic.to_vec();
        v.extend(FORMAT_VERSION.to_le_bytes());
        Self(v)
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u64(&mut self, v: usize) {
        self.0.extend((v as u64).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_bits().to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }

    fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows());
        self.u64(m.cols());
        self.f64s(m.as_slice());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: [u8; 8], what: &str) -> Result<Self> {
        if bytes.len() < 12 || bytes[..8] != magic {
            return Err(Error::Format(format!("not a {what} file (bad magic)")));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("{what} file version {version}, expected {FORMAT_VERSION}")));
        }
        Ok(Self { bytes, pos: 12 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(Error::Format(format!("truncated at byte {}: need {n} more, {left} left", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("count {v} does not fit in memory")))
    }

    /// A count of items at least `item` bytes each, checked against the
    /// remaining length before anything is allocated.
    fn count(&mut self, item: usize) -> Result<usize> {
        let n = self.u64()?;
        if n.saturating_mul(item.max(1)) > self.bytes.len() - self.pos {
            return Err(Error::Format(format!("count {n} at byte {} exceeds the file", self.pos - 8)));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes"))))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(Error::Format(format!("truncated at byte {}: need {} bytes of values", self.pos, n.saturating_mul(8))));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()?;
        let cols = self.u64()?;
        let data = self.f64s(rows.checked_mul(cols).ok_or_else(|| Error::Format(format!("matrix of {rows}x{cols}")))?)?;
        Matrix::from_vec(rows, cols, data)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn interp_tag(i: Interpretation) -> u8 {
    match i {
        Interpretation::Bn => 0,
        Interpretation::Brn => 1,
        Interpretation::ConstStats => 2,
        Interpretation::EvalStats => 3,
    }
}

fn bad_tag(what: &str, tag: u8) -> Error {
    Error::Format(format!("unknown {what} tag {tag}"))
}

pub fn encode_network(net: &Network) -> Vec<u8> {
    let mut w = Writer::new(NETWORK_MAGIC);
    let (channels, spatial) = net.input_shape();
    w.u64(channels);
    w.u64(spatial);
    w.u64(net.len());
    for layer in &net.layers {
        match layer {
            Layer::Affine(a) => {
                w.u8(0);
                w.u8(a.has_bias as u8);
                match a.conv {
                    Some(g) => {
                        w.u8(1);
                        for v in [g.in_channels, g.in_h, g.in_w, g.kernel, g.stride, g.padding] {
                            w.u64(v);
                        }
                    }
                    None => w.u8(0),
                }
                w.matrix(&a.w);
                w.f64s(&a.b);
            }
            Layer::Norm(n) => {
                w.u8(1);
                w.u64(n.channels());
                w.u8(match n.mode {
                    NormMode::Bn => 0,
                    NormMode::Brn => 1,
                });
                for v in [n.eps, n.r_max, n.d_max, n.momentum] {
                    w.f64(v);
                }
                for v in [&n.gamma, &n.beta, &n.pop_mean, &n.pop_var] {
                    w.f64s(v);
                }
            }
            Layer::Relu => w.u8(2),
            Layer::Flatten => w.u8(3),
        }
    }
    w.0
}

pub fn decode_network(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader::new(bytes, NETWORK_MAGIC, "network")?;
    let channels = r.u64()?;
    let spatial = r.u64()?;
    let count = r.count(1)?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        layers.push(match r.u8()? {
            0 => {
                let has_bias = r.u8()? != 0;
                let conv = match r.u8()? {
                    0 => None,
                    1 => Some(ConvGeometry {
                        in_channels: r.u64()?,
                        in_h: r.u64()?,
                        in_w: r.u64()?,
                        kernel: r.u64()?,
                        stride: r.u64()?,
                        padding: r.u64()?,
                    }),
                    t => return Err(bad_tag("convolution flag", t)),
                };
                let w = r.matrix()?;
                let b = r.f64s(w.rows())?;
                Layer::Affine(Affine { w, b, has_bias, conv })
            }
            1 => {
                let c = r.count(32)?;
                let mode = match r.u8()? {
                    0 => NormMode::Bn,
                    1 => NormMode::Brn,
                    t => return Err(bad_tag("norm mode", t)),
                };
                let mut n = NormLayer::new(c, mode);
                n.eps = r.f64()?;
                n.r_max = r.f64()?;
                n.d_max = r.f64()?;
                n.momentum = r.f64()?;
                n.gamma = r.f64s(c)?;
                n.beta = r.f64s(c)?;
                n.pop_mean = r.f64s(c)?;
                n.pop_var = r.f64s(c)?;
                Layer::Norm(n)
            }
            2 => Layer::Relu,
            3 => Layer::Flatten,
            t => return Err(bad_tag("layer", t)),
        });
    }
    r.finish()?;
    Network::new(channels, spatial, layers)
}

pub fn encode_curvature(c: &Curvature) -> Vec<u8> {
    let mut w = Writer::new(CURVATURE_MAGIC);
    w.u64(c.terms.len());
    for t in &c.terms {
        let fs = &t.factors;
        w.f64(t.weight);
        w.u64(fs.batch_size);
        w.u64(fs.samples);
        w.u8(match fs.coupling {
            Coupling::Diagonal => 0,
            Coupling::Full => 1,
        });
        w.u8(match fs.kind {
            FisherKind::Extended => 0,
            FisherKind::Kfac => 1,
        });
        w.u64(fs.shapes.len());
        for (&(c, k), &s) in fs.shapes.iter().zip(&fs.spatial) {
            w.u64(c);
            w.u64(k);
            w.u64(s);
        }
        w.u64(fs.blocks.len());
        for f in &fs.blocks {
            for m in [&f.a, &f.a_prime, &f.h_prime, &f.h_dprime] {
                w.matrix(m);
            }
        }
    }
    w.0
}

pub fn decode_curvature(bytes: &[u8]) -> Result<Curvature> {
    let mut r = Reader::new(bytes, CURVATURE_MAGIC, "curvature")?;
    let count = r.count(1)?;
    let mut terms = Vec::with_capacity(count);
    for _ in 0..count {
        let weight = r.f64()?;
        let batch_size = r.u64()?;
        let samples = r.u64()?;
        let coupling = match r.u8()? {
            0 => Coupling::Diagonal,
            1 => Coupling::Full,
            t => return Err(bad_tag("coupling", t)),
        };
        let kind = match r.u8()? {
            0 => FisherKind::Extended,
            1 => FisherKind::Kfac,
            t => return Err(bad_tag("Fisher kind", t)),
        };
        let layers = r.count(24)?;
        let mut shapes = Vec::with_capacity(layers);
        let mut spatial = Vec::with_capacity(layers);
        for _ in 0..layers {
            shapes.push((r.u64()?, r.u64()?));
            spatial.push(r.u64()?);
        }
        let pairs = r.count(64)?;
        let mut blocks = Vec::with_capacity(pairs);
        for _ in 0..pairs {
            blocks.push(Factors { a: r.matrix()?, a_prime: r.matrix()?, h_prime: r.matrix()?, h_dprime: r.matrix()? });
        }
        let factors = FactorSet { batch_size, samples, coupling, kind, shapes, spatial, blocks };
        factors.validate()?;
        terms.push(CurvatureTerm { weight, factors });
    }
    r.finish()?;
    Ok(Curvature { terms })
}

pub fn encode_anchors(a: &AnchorFile) -> Vec<u8> {
    let mut w = Writer::new(ANCHOR_MAGIC);
    w.u8(interp_tag(a.interpretation));
    w.u64(a.anchors.len());
    a.anchors.iter().for_each(|m| w.matrix(m));
    w.0
}

pub fn decode_anchors(bytes: &[u8]) -> Result<AnchorFile> {
    let mut r = Reader::new(bytes, ANCHOR_MAGIC, "anchor")?;
    let interpretation = match r.u8()? {
        0 => Interpretation::Bn,
        1 => Interpretation::Brn,
        2 => Interpretation::ConstStats,
        3 => Interpretation::EvalStats,
        t => return Err(bad_tag("interpretation", t)),
    };
    let count = r.count(16)?;
    let anchors = (0..count).map(|_| r.matrix()).collect::<Result<_>>()?;
    r.finish()?;
    Ok(AnchorFile { interpretation, anchors })
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_network(net))?)
}

pub fn load_network(path: &Path) -> Result<Network> {
    decode_network(&fs::read(path)?)
}

pub fn save_curvature(c: &Curvature, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_curvature(c))?)
}

pub fn load_curvature(path: &Path) -> Result<Curvature> {
    decode_curvature(&fs::read(path)?)
}

pub fn save_anchors(a: &AnchorFile, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_anchors(a))?)
}

pub fn load_anchors(path: &Path) -> Result<AnchorFile> {
    decode_anchors(&fs::read(path)?)
}
