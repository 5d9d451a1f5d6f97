//! Brute-force reference computations for tiny networks: finite-difference
//! Hessians, the linear-layer Hessian contraction, exhaustive enumeration of
//! the curvature factors over every mini-batch of a small dataset, and the
//! dense penalty Hessian.
//!
//! Everything here is written with plain loops and deliberately avoids the
//! factor accumulation, block assembly and penalty products it is used to
//! check.

use crate::curvature::{Coupling, Factors, FactorSet, FisherKind, Tap};
use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::net::{loss, Block, Layer, Network};
use crate::penalty::PenaltyState;

/// Step for second derivatives taken as differences of exact gradients.
pub const FD_STEP: f64 = 1e-4;
/// Largest number of mini-batches [`exhaustive_factors`] will enumerate.
pub const MAX_BATCHES: u128 = 1_000_000;
/// Largest dimension [`materialize_penalty_hessian`] will build.
pub const MAX_DENSE_DIM: usize = 4096;

fn central<F>(grad: &mut F, t: &mut [f64], j: usize, s: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let x0 = t[j];
    t[j] = x0 + s;
    let gp = grad(t)?;
    t[j] = x0 - s;
    let gm = grad(t)?;
    t[j] = x0;
    if gp.len() != gm.len() {
        return Err(shape_err!("gradient length changed between evaluations"));
    }
    Ok(gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * s)).collect())
}

/// Hessian entries `∂²f/∂θ_i∂θ_j` for `i ∈ rows`, `j ∈ cols` from central
/// differences of the gradient at steps `h` and `2h`, Richardson-combined.
pub fn fd_hessian_of<F>(mut grad: F, theta: &[f64], rows: &[usize], cols: &[usize], step: f64) -> Result<Matrix>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(step > 0.0) {
        return Err(invalid!("step must be positive, got {step}"));
    }
    let mut t = theta.to_vec();
    let mut out = Matrix::zeros(rows.len(), cols.len());
    for (c, &j) in cols.iter().enumerate() {
        if j >= t.len() {
            return Err(invalid!("parameter index {j} out of range"));
        }
        let d1 = central(&mut grad, &mut t, j, step)?;
        let d2 = central(&mut grad, &mut t, j, 2.0 * step)?;
        for (r, &i) in rows.iter().enumerate() {
            if i >= d1.len() {
                return Err(invalid!("gradient index {i} out of range"));
            }
            out[(r, c)] = (4.0 * d1[i] - d2[i]) / 3.0;
        }
    }
    Ok(out)
}

/// Positions in [`Network::params_flat`] of `vec([w | b])` (column-major)
/// for the affine layer at `layer`; the bias column is present only when
/// the layer has a bias.
pub fn affine_param_indices(net: &Network, layer: usize) -> Result<Vec<usize>> {
    let mut offset = 0;
    for (i, l) in net.layers.iter().enumerate() {
        if let crate::net::Layer::Affine(a) = l {
            let (rows, fan) = a.w.shape();
            if i == layer {
                let cols = fan + usize::from(a.has_bias);
                let mut idx = Vec::with_capacity(rows * cols);
                for j in 0..cols {
                    for r in 0..rows {
                        idx.push(if j < fan { offset + r * fan + j } else { offset + rows * fan + r });
                    }
                }
                return Ok(idx);
            }
            offset += a.w.len() + if a.has_bias { a.b.len() } else { 0 };
        } else if let crate::net::Layer::Norm(n) = l {
            if i == layer {
                break;
            }
            offset += 2 * n.channels();
        }
    }
    Err(invalid!("layer {layer} is not an affine layer"))
}

fn mean_loss_grad(net: &Network, x: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    let fwd = net.forward(x, true)?;
    let (_, g) = net.backward(&fwd, labels)?;
    net.grads_flat(&g)
}

/// Train-mode Hessian of `E_n[L_n]` on one batch between `vec([w|b])` of
/// affine layer `l` (rows) and of affine layer `l2` (columns).
pub fn fd_hessian(net: &Network, x: &Matrix, labels: &[usize], l: usize, l2: usize) -> Result<Matrix> {
    let rows = affine_param_indices(net, l)?;
    let cols = affine_param_indices(net, l2)?;
    let mut probe = net.clone();
    let theta = net.params_flat();
    fd_hessian_of(
        |p| {
            probe.set_params_flat(p)?;
            mean_loss_grad(&probe, x, labels)
        },
        &theta,
        &rows,
        &cols,
        FD_STEP,
    )
}

#[derive(Clone, Debug)]
pub struct ContractionReport {
    /// Entries above the magnitude floor that were compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Finite-difference weight Hessian block.
    pub direct: Matrix,
    /// The same block from the contraction of output second derivatives.
    pub contracted: Matrix,
}

/// Compares the weight Hessian of one block with
/// `Σ_{m,m′} ā_{b,m} ā_{d,m′} ∂²E_n[L_n]/∂h_{a,m}∂h_{c,m′}`, where the
/// second derivatives with respect to the affine output `h` come from
/// differences of gradients of the network cut at `h`.
pub fn theorem1_check(net: &Network, x: &Matrix, labels: &[usize], block: &Block, floor: f64) -> Result<ContractionReport> {
    let l = block.affine;
    let aff = net.affine(l)?;
    if aff.conv.is_some() {
        return Err(invalid!("contraction check supports fully connected layers only"));
    }
    let fwd = net.forward(x, true)?;
    let n = x.cols();
    let input = fwd.affine_input(l);
    let abar = if aff.has_bias { input.with_appended_row(1.0) } else { input.clone() };
    let h0 = fwd.acts[l + 1].clone();
    let c = h0.rows();
    let pos = l + 1;

    let grad_h = |v: &[f64]| -> Result<Vec<f64>> {
        let h = Matrix::from_col_major(c, n, v)?;
        let cut = net.forward_from(pos, h, n, true)?;
        let (_, seed) = loss::mean_loss_and_grad(cut.logits(), labels)?;
        let out = net.backward_general(&cut, Some(&seed), &[], &[pos], false)?;
        Ok(out.taps[0].vec_col_major())
    };
    let all: Vec<usize> = (0..c * n).collect();
    // index a + c·m
    let hh = fd_hessian_of(grad_h, &h0.vec_col_major(), &all, &all, FD_STEP)?;

    let k = abar.rows();
    let mut contracted = Matrix::zeros(c * k, c * k);
    for b in 0..k {
        for a in 0..c {
            for d in 0..k {
                for cc in 0..c {
                    let mut s = 0.0;
                    for m in 0..n {
                        for m2 in 0..n {
                            s += abar[(b, m)] * abar[(d, m2)] * hh[(a + c * m, cc + c * m2)];
                        }
                    }
                    contracted[(a + c * b, cc + c * d)] = s;
                }
            }
        }
    }
    let direct = fd_hessian(net, x, labels, l, l)?;
    let mut checked = 0;
    let mut max_rel_err: f64 = 0.0;
    for (u, v) in direct.as_slice().iter().zip(contracted.as_slice()) {
        if u.abs() > floor {
            checked += 1;
            max_rel_err = max_rel_err.max((u - v).abs() / u.abs());
        }
    }
    Ok(ContractionReport { checked, max_rel_err, direct, contracted })
}

/// `C(n, k)` saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = match r.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    r
}

fn next_subset(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    for i in (0..k).rev() {
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Exact expectations over every unordered mini-batch of a small dataset,
/// with labels integrated out under the model's predictive distribution.
#[derive(Clone, Debug)]
pub struct Exhaustive {
    pub batch_size: usize,
    pub batches: usize,
    /// `Full` for fully connected networks, `Diagonal` when any block is
    /// convolutional.
    pub coupling: Coupling,
    pub shapes: Vec<(usize, usize)>,
    pub spatial: Vec<usize>,
    /// All per-pair matrices are indexed like [`FactorSet::blocks`].
    pub a: Vec<Matrix>,
    pub a_prime: Vec<Matrix>,
    /// `m = n` terms only.
    pub h: Vec<Matrix>,
    pub h_prime: Vec<Matrix>,
    pub h_dprime: Vec<Matrix>,
    /// `E_n[D[n]_n (Σ_m D[n]_m)ᵀ]`; not symmetric in general.
    pub h_tprime: Vec<Matrix>,
}

pub fn exhaustive_factors(net: &Network, data: &Matrix, batch_size: usize, tap: Tap) -> Result<Exhaustive> {
    let total = data.cols();
    if batch_size == 0 || batch_size > total {
        return Err(invalid!("batch size {batch_size} for a dataset of {total}"));
    }
    let count = binomial(total, batch_size);
    if count > MAX_BATCHES {
        return Err(Error::TooLarge(format!("{count} mini-batches exceed the enumeration limit of {MAX_BATCHES}")));
    }
    let blocks = net.blocks();
    let nb = blocks.len();
    let mut shapes = Vec::new();
    let mut spatial = Vec::new();
    for b in &blocks {
        let a = net.affine(b.affine)?;
        shapes.push((a.out_features(), a.fan_in() + 1));
        spatial.push(net.shape_at(b.affine + 1).1);
    }
    let coupling = if spatial.iter().all(|&s| s == 1) { Coupling::Full } else { Coupling::Diagonal };
    let pairs: Vec<(usize, usize)> = match coupling {
        Coupling::Full => (0..nb).flat_map(|l| (0..nb).map(move |r| (l, r))).collect(),
        Coupling::Diagonal => (0..nb).map(|l| (l, l)).collect(),
    };
    let zeros = |f: &dyn Fn(usize, usize) -> (usize, usize)| -> Vec<Matrix> {
        pairs
            .iter()
            .map(|&(l, r)| {
                let (p, q) = f(l, r);
                Matrix::zeros(p, q)
            })
            .collect()
    };
    let ins = |l: usize, r: usize| (shapes[l].1, shapes[r].1);
    let outs = |l: usize, r: usize| (shapes[l].0, shapes[r].0);
    let mut ex = Exhaustive {
        batch_size,
        batches: 0,
        coupling,
        shapes: shapes.clone(),
        spatial: spatial.clone(),
        a: zeros(&ins),
        a_prime: zeros(&ins),
        h: zeros(&outs),
        h_prime: zeros(&outs),
        h_dprime: zeros(&outs),
        h_tprime: zeros(&outs),
    };

    let n = batch_size;
    let nf = n as f64;
    let taps: Vec<usize> = blocks
        .iter()
        .map(|b| match tap {
            Tap::BlockOutput => b.output(),
            Tap::AffineOutput => b.affine + 1,
        })
        .collect();
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let x = data.select_cols(&idx);
        let fwd = net.forward(&x, true)?;
        let abar: Vec<Matrix> = blocks.iter().map(|b| fwd.affine_input(b.affine).with_appended_row(1.0)).collect();
        for (k, &(l, r)) in pairs.iter().enumerate() {
            let s_len = spatial[l];
            let (p, q) = ins(l, r);
            for i in 0..p {
                for j in 0..q {
                    let mut own = 0.0;
                    let mut mean = 0.0;
                    for s in 0..s_len {
                        let (mut ui, mut uj) = (0.0, 0.0);
                        for e in 0..n {
                            let (vi, vj) = (abar[l][(i, e * s_len + s)], abar[r][(j, e * s_len + s)]);
                            own += vi * vj;
                            ui += vi;
                            uj += vj;
                        }
                        mean += (ui / nf) * (uj / nf);
                    }
                    ex.a[k][(i, j)] += own / nf;
                    ex.a_prime[k][(i, j)] += mean;
                }
            }
        }

        let probs = loss::softmax(fwd.logits());
        for e in 0..n {
            for class in 0..probs.rows() {
                let w = probs[(class, e)];
                if w == 0.0 {
                    continue;
                }
                let mut seed = probs.col_vec(e);
                seed[class] -= 1.0;
                let d = net.per_example_sweep(&fwd, e, &seed, &taps)?;
                for (k, &(l, r)) in pairs.iter().enumerate() {
                    let s_len = spatial[l];
                    let sc = w / (s_len as f64 * nf);
                    let (p, q) = outs(l, r);
                    for i in 0..p {
                        for j in 0..q {
                            let (mut h, mut hp, mut hd, mut ht) = (0.0, 0.0, 0.0, 0.0);
                            for s in 0..s_len {
                                let (mut si, mut sj) = (0.0, 0.0);
                                for m in 0..n {
                                    let (vi, vj) = (d[l][(i, m * s_len + s)], d[r][(j, m * s_len + s)]);
                                    hp += vi * vj;
                                    si += vi;
                                    sj += vj;
                                }
                                let (oi, oj) = (d[l][(i, e * s_len + s)], d[r][(j, e * s_len + s)]);
                                hd += si * sj;
                                h += oi * oj;
                                ht += oi * sj;
                            }
                            ex.h[k][(i, j)] += sc * h;
                            ex.h_prime[k][(i, j)] += sc * hp;
                            ex.h_dprime[k][(i, j)] += sc * hd;
                            ex.h_tprime[k][(i, j)] += sc * ht;
                        }
                    }
                }
            }
        }
        ex.batches += 1;
        if !next_subset(&mut idx, total) {
            break;
        }
    }
    let inv = 1.0 / ex.batches as f64;
    for v in [&mut ex.a, &mut ex.a_prime, &mut ex.h, &mut ex.h_prime, &mut ex.h_dprime, &mut ex.h_tprime] {
        for m in v.iter_mut() {
            m.scale_in_place(inv);
        }
    }
    Ok(ex)
}

fn kron_naive(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = a[(i, j)] * b[(k, l)];
                }
            }
        }
    }
    out
}

fn lin(terms: &[(f64, &Matrix)]) -> Matrix {
    let (r, c) = terms[0].1.shape();
    Matrix::from_fn(r, c, |i, j| terms.iter().map(|(w, m)| w * m[(i, j)]).sum())
}

impl Exhaustive {
    pub fn layers(&self) -> usize {
        self.shapes.len()
    }

    fn index(&self, l: usize, r: usize) -> Result<usize> {
        let nb = self.layers();
        if l >= nb || r >= nb {
            return Err(invalid!("block pair ({l}, {r}) out of range"));
        }
        match self.coupling {
            Coupling::Full => Ok(l * nb + r),
            Coupling::Diagonal if l == r => Ok(l),
            Coupling::Diagonal => Err(invalid!("no cross-layer factors for convolutional networks")),
        }
    }

    /// The factors in the layout produced by the curvature estimator.
    pub fn factor_set(&self) -> FactorSet {
        FactorSet {
            batch_size: self.batch_size,
            samples: self.batches * self.batch_size,
            coupling: self.coupling,
            kind: FisherKind::Extended,
            shapes: self.shapes.clone(),
            spatial: self.spatial.clone(),
            blocks: (0..self.a.len())
                .map(|k| Factors {
                    a: self.a[k].clone(),
                    a_prime: self.a_prime[k].clone(),
                    h_prime: self.h_prime[k].clone(),
                    h_dprime: self.h_dprime[k].clone(),
                })
                .collect(),
        }
    }

    /// `Ā⊗𝓗′ + (NĀ′ − Ā)⊗(𝓗″ − 𝓗′) / max(N−1, 1)` for one block pair.
    pub fn closed_form(&self, l: usize, r: usize) -> Result<Matrix> {
        let k = self.index(l, r)?;
        let n = self.batch_size as f64;
        let coef = 1.0 / (n - 1.0).max(1.0);
        let outer = lin(&[(n, &self.a_prime[k]), (-1.0, &self.a[k])]);
        let inner = lin(&[(1.0, &self.h_dprime[k]), (-1.0, &self.h_prime[k])]);
        let first = kron_naive(&self.a[k], &self.h_prime[k]);
        let second = kron_naive(&outer, &inner);
        Ok(lin(&[(1.0, &first), (coef, &second)]))
    }

    /// `G₁ … G₅` for one block pair from their factored forms; groups with
    /// no summands at this `N` are zero.
    pub fn groups(&self, l: usize, r: usize) -> Result<[Matrix; 5]> {
        if self.coupling != Coupling::Full {
            return Err(invalid!("group decomposition is defined for fully connected networks"));
        }
        let k = self.index(l, r)?;
        let kt = self.index(r, l)?;
        let (a, h) = (&self.a[k], &self.h[k]);
        let zero = Matrix::zeros(a.rows() * h.rows(), a.cols() * h.cols());
        let g1 = kron_naive(a, h);
        let n = self.batch_size;
        if n == 1 {
            return Ok([g1, zero.clone(), zero.clone(), zero.clone(), zero]);
        }
        let nf = n as f64;
        let outer = lin(&[(nf / (nf - 1.0), &self.a_prime[k]), (-1.0 / (nf - 1.0), a)]);
        let ht = &self.h_tprime[k];
        let htt = self.h_tprime[kt].transpose();
        let g2 = kron_naive(a, &lin(&[(1.0, &self.h_prime[k]), (-1.0, h)]));
        let g3 = kron_naive(&outer, &lin(&[(1.0, ht), (-1.0, h)]));
        let g4 = kron_naive(&outer, &lin(&[(1.0, &htt), (-1.0, h)]));
        let g5 = if n >= 3 {
            let inner = lin(&[(1.0, &self.h_dprime[k]), (-1.0, ht), (-1.0, &htt), (-1.0, &self.h_prime[k]), (2.0, h)]);
            kron_naive(&outer, &inner)
        } else {
            zero
        };
        Ok([g1, g2, g3, g4, g5])
    }

    /// `‖(𝓗″ − 𝓗′) − (𝓗‴ + 𝓗‴ᵀ − 2𝓗)‖∞` for one pair; zero when `N = 2`.
    pub fn two_example_identity_gap(&self, l: usize, r: usize) -> Result<f64> {
        let k = self.index(l, r)?;
        let kt = self.index(r, l)?;
        let lhs = lin(&[(1.0, &self.h_dprime[k]), (-1.0, &self.h_prime[k])]);
        let htt = self.h_tprime[kt].transpose();
        let rhs = lin(&[(1.0, &self.h_tprime[k]), (1.0, &htt), (-2.0, &self.h[k])]);
        lhs.max_abs_diff(&rhs)
    }
}

/// Dense `Σ_terms weight·H_term + λI` over the concatenation of
/// column-major `vec(W̃_l)`.
pub fn materialize_penalty_hessian(state: &PenaltyState) -> Result<Matrix> {
    let sizes: Vec<usize> = state.anchors.iter().map(|a| a.len()).collect();
    let dim: usize = sizes.iter().sum();
    if dim > MAX_DENSE_DIM {
        return Err(Error::TooLarge(format!("dense penalty Hessian of dimension {dim} exceeds {MAX_DENSE_DIM}")));
    }
    let mut offsets = vec![0; sizes.len()];
    for i in 1..sizes.len() {
        offsets[i] = offsets[i - 1] + sizes[i - 1];
    }
    let mut h = Matrix::zeros(dim, dim);
    for i in 0..dim {
        h[(i, i)] = state.damping;
    }
    for term in &state.curvature.terms {
        let fs = &term.factors;
        let nb = fs.layers();
        if nb != sizes.len() {
            return Err(shape_err!("curvature over {nb} blocks, state has {}", sizes.len()));
        }
        let n = fs.batch_size as f64;
        let coef = 1.0 / (n - 1.0).max(1.0);
        for l in 0..nb {
            for r in 0..nb {
                let k = match fs.coupling {
                    Coupling::Full => l * nb + r,
                    Coupling::Diagonal if l == r => l,
                    Coupling::Diagonal => continue,
                };
                let f = &fs.blocks[k];
                let outer = lin(&[(n, &f.a_prime), (-1.0, &f.a)]);
                let inner = lin(&[(1.0, &f.h_dprime), (-1.0, &f.h_prime)]);
                let block = lin(&[(1.0, &kron_naive(&f.a, &f.h_prime)), (coef, &kron_naive(&outer, &inner))]);
                if block.shape() != (sizes[l], sizes[r]) {
                    return Err(shape_err!("block ({l}, {r}) is {:?}, expected {:?}", block.shape(), (sizes[l], sizes[r])));
                }
                for i in 0..sizes[l] {
                    for j in 0..sizes[r] {
                        h[(offsets[l] + i, offsets[r] + j)] += term.weight * block[(i, j)];
                    }
                }
            }
        }
    }
    Ok(h)
}

/// `H·vec(Δ)` split back into per-block matrices.
pub fn dense_penalty_grad(state: &PenaltyState, current: &[Matrix]) -> Result<Vec<Matrix>> {
    if current.len() != state.anchors.len() {
        return Err(shape_err!("{} merged weights for {} anchors", current.len(), state.anchors.len()));
    }
    let h = materialize_penalty_hessian(state)?;
    let mut delta = Vec::new();
    for (w, a) in current.iter().zip(&state.anchors) {
        if w.shape() != a.shape() {
            return Err(shape_err!("merged weight {:?} vs anchor {:?}", w.shape(), a.shape()));
        }
        delta.extend(w.sub(a)?.vec_col_major());
    }
    let hv: Vec<f64> = (0..h.rows()).map(|i| h.row(i).iter().zip(&delta).map(|(x, y)| x * y).sum()).collect();
    let mut out = Vec::new();
    let mut k = 0;
    for a in &state.anchors {
        out.push(Matrix::from_col_major(a.rows(), a.cols(), &hv[k..k + a.len()])?);
        k += a.len();
    }
    Ok(out)
}

/// One example's activations, `c·S + s` ordered, with the patch vectors
/// (homogeneous entry last) every affine layer saw.
struct Trace {
    /// Input to every layer and the final logits.
    values: Vec<Vec<f64>>,
    /// Per affine layer: `S` patch vectors of length `fan_in + 1`.
    patches: Vec<Option<Vec<Vec<f64>>>>,
}

fn patches_of(net: &Network, layer: usize, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let aff = net.affine(layer)?;
    let Some(g) = aff.conv else {
        let mut p = x.to_vec();
        p.push(1.0);
        return Ok(vec![p]);
    };
    let (k, s_in) = (g.kernel, g.in_h * g.in_w);
    let mut out = Vec::new();
    for oy in 0..g.out_h() {
        for ox in 0..g.out_w() {
            let mut p = vec![0.0; g.in_channels * k * k + 1];
            for c in 0..g.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let y = (oy * g.stride + ky) as isize - g.padding as isize;
                        let xx = (ox * g.stride + kx) as isize - g.padding as isize;
                        if y >= 0 && xx >= 0 && (y as usize) < g.in_h && (xx as usize) < g.in_w {
                            p[c * k * k + ky * k + kx] = x[c * s_in + y as usize * g.in_w + xx as usize];
                        }
                    }
                }
            }
            p[g.in_channels * k * k] = 1.0;
            out.push(p);
        }
    }
    Ok(out)
}

fn trace_example(net: &Network, x: &[f64]) -> Result<Trace> {
    let mut values = vec![x.to_vec()];
    let mut patches = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        let cur = values.last().expect("input pushed");
        let next = match layer {
            Layer::Affine(aff) => {
                let ps = patches_of(net, i, cur)?;
                let (c, s) = (aff.out_features(), ps.len());
                let mut z = vec![0.0; c * s];
                for (j, p) in ps.iter().enumerate() {
                    for o in 0..c {
                        let mut acc = aff.b[o];
                        for r in 0..aff.fan_in() {
                            acc += aff.w[(o, r)] * p[r];
                        }
                        z[o * s + j] = acc;
                    }
                }
                patches.push(Some(ps));
                z
            }
            Layer::Relu => {
                patches.push(None);
                cur.iter().map(|&v| v.max(0.0)).collect()
            }
            Layer::Flatten => {
                patches.push(None);
                cur.clone()
            }
            Layer::Norm(_) => return Err(invalid!("the K-FAC reference needs a network without norm layers")),
        };
        values.push(next);
    }
    Ok(Trace { values, patches })
}

/// Gradients with respect to every affine layer's output (`C × S`, row
/// major by channel) for one example seeded with `∂L/∂z = seed`.
fn backprop_example(net: &Network, t: &Trace, seed: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
    let mut g = seed.to_vec();
    let mut out = vec![None; net.len()];
    for i in (0..net.len()).rev() {
        g = match &net.layers[i] {
            Layer::Affine(aff) => {
                out[i] = Some(g.clone());
                let ps = t.patches[i].as_ref().expect("affine layers record patches");
                let s = ps.len();
                let mut gin = vec![0.0; t.values[i].len()];
                match aff.conv {
                    None => {
                        for r in 0..aff.fan_in() {
                            gin[r] = (0..aff.out_features()).map(|o| aff.w[(o, r)] * g[o]).sum();
                        }
                    }
                    Some(geom) => {
                        let (k, s_in) = (geom.kernel, geom.in_h * geom.in_w);
                        for oy in 0..geom.out_h() {
                            for ox in 0..geom.out_w() {
                                let j = oy * geom.out_w() + ox;
                                for c in 0..geom.in_channels {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let y = (oy * geom.stride + ky) as isize - geom.padding as isize;
                                            let xx = (ox * geom.stride + kx) as isize - geom.padding as isize;
                                            if y < 0 || xx < 0 || y as usize >= geom.in_h || xx as usize >= geom.in_w {
                                                continue;
                                            }
                                            let r = c * k * k + ky * k + kx;
                                            let src = c * s_in + y as usize * geom.in_w + xx as usize;
                                            for o in 0..aff.out_features() {
                                                gin[src] += aff.w[(o, r)] * g[o * s + j];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                gin
            }
            Layer::Relu => g.iter().zip(&t.values[i]).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect(),
            Layer::Flatten => g,
            Layer::Norm(_) => return Err(invalid!("the K-FAC reference needs a network without norm layers")),
        };
    }
    Ok(out)
}

/// Kronecker-factored Fisher blocks of a network without norm layers, one
/// per affine layer, averaged over the columns of `data` with labels
/// integrated under the model: `Ω ⊗ Γ` with `Ω = E[Σ_s ā_s ā_sᵀ]` and
/// `Γ = E[(1/S) Σ_s D_s D_sᵀ]`. Fully connected layers have `S = 1`.
pub fn kfac_reference(net: &Network, data: &Matrix) -> Result<Vec<Matrix>> {
    if data.rows() != net.input_features() || data.cols() == 0 {
        return Err(shape_err!("data is {:?}, network takes {} features", data.shape(), net.input_features()));
    }
    let affines: Vec<usize> = (0..net.len()).filter(|&i| matches!(net.layers[i], Layer::Affine(_))).collect();
    let mut omega: Vec<Matrix> = Vec::new();
    let mut gamma: Vec<Matrix> = Vec::new();
    for &i in &affines {
        let aff = net.affine(i)?;
        omega.push(Matrix::zeros(aff.fan_in() + 1, aff.fan_in() + 1));
        gamma.push(Matrix::zeros(aff.out_features(), aff.out_features()));
    }
    let count = data.cols() as f64;
    for n in 0..data.cols() {
        let t = trace_example(net, &data.col_vec(n))?;
        let logits = t.values.last().expect("logits");
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - top).exp()).collect();
        let z: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / z).collect();
        for (k, &i) in affines.iter().enumerate() {
            for patch in t.patches[i].as_ref().expect("affine") {
                for a in 0..patch.len() {
                    for b in 0..patch.len() {
                        omega[k][(a, b)] += patch[a] * patch[b] / count;
                    }
                }
            }
        }
        for y in 0..p.len() {
            let mut seed = p.clone();
            seed[y] -= 1.0;
            let grads = backprop_example(net, &t, &seed)?;
            for (k, &i) in affines.iter().enumerate() {
                let d = grads[i].as_ref().expect("affine");
                let c = gamma[k].rows();
                let s = d.len() / c;
                for a in 0..c {
                    for b in 0..c {
                        let v: f64 = (0..s).map(|j| d[a * s + j] * d[b * s + j]).sum();
                        gamma[k][(a, b)] += p[y] * v / (s as f64 * count);
                    }
                }
            }
        }
    }
    Ok(omega.iter().zip(&gamma).map(|(o, g)| kron_naive(o, g)).collect())
}
