//! Merged-weight view of `affine → norm` blocks and the factored quadratic
//! penalty over merged weights.
//!
//! For channel `i` with statistics `(μ_i, σ_i²)`, `s_i = √(σ_i² + ε)` and
//! renormalization corrections `(r_i, d_i)`,
//!
//! ```text
//! k_i = γ_i r_i / s_i
//! w̃_i = k_i w_i
//! b̃_i = β_i + γ_i d_i + k_i (b_i − μ_i)
//! ```
//!
//! and `W̃ = [w̃ | b̃]`. Blocks without a norm layer merge to `[w | b]`.
//! Weight matrices are vectorized column-major.

use crate::curvature::Curvature;
use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::{gemm, Matrix, Op};
use crate::net::{Block, Forward, Layer, Network, ParamGrads};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Interpretation {
    /// Batch statistics; gradients flow through them.
    Bn,
    /// Batch statistics with renormalization corrections held constant.
    Brn,
    /// Batch statistics held constant.
    ConstStats,
    /// Population statistics, constant.
    EvalStats,
}

impl Interpretation {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, Interpretation::EvalStats)
    }

    /// Whether `μ̄` and `σ̄²` pass gradients back to earlier layers.
    pub fn stats_carry_gradient(self) -> bool {
        matches!(self, Interpretation::Bn | Interpretation::Brn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Interpretation::Bn => "bn",
            Interpretation::Brn => "brn",
            Interpretation::ConstStats => "const-stats",
            Interpretation::EvalStats => "eval-stats",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bn" => Ok(Interpretation::Bn),
            "brn" => Ok(Interpretation::Brn),
            "const-stats" | "const_stats" => Ok(Interpretation::ConstStats),
            "eval-stats" | "eval_stats" | "eval" => Ok(Interpretation::EvalStats),
            _ => Err(invalid!("unknown interpretation {s:?}")),
        }
    }
}

/// Statistics a merged block was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub std: Vec<f64>,
    pub r: Vec<f64>,
    pub d: Vec<f64>,
    /// `γ r / s`.
    pub k: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedBlock {
    pub block: Block,
    /// `C_l × (fan_in + 1)`.
    pub w: Matrix,
    pub stats: Option<MergeStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedWeights {
    pub interpretation: Interpretation,
    pub blocks: Vec<MergedBlock>,
}

impl MergedWeights {
    pub fn matrices(&self) -> Vec<Matrix> {
        self.blocks.iter().map(|b| b.w.clone()).collect()
    }
}

/// Builds `W̃` for every block. Batch-statistic interpretations need a
/// train-mode forward pass; `EvalStats` ignores `fwd`.
pub fn merge_weights(net: &Network, fwd: Option<&Forward>, interp: Interpretation) -> Result<MergedWeights> {
    let mut blocks = Vec::new();
    for block in net.blocks() {
        let aff = net.affine(block.affine)?;
        let Some(j) = block.norm else {
            let w = aff.w.with_appended_col(&aff.b)?;
            blocks.push(MergedBlock { block, w, stats: None });
            continue;
        };
        let norm = net.norm(j)?;
        let c = norm.channels();
        let (mean, var, r, d) = if interp.uses_batch_stats() {
            let fwd = fwd.ok_or_else(|| Error::MissingState(format!("{} interpretation needs batch statistics", interp.name())))?;
            let cache = fwd.norm_cache(j)?;
            if !cache.batch_stats {
                return Err(Error::MissingState(format!("layer {j} was run without batch statistics")));
            }
            let (r, d) = match interp {
                Interpretation::Brn => norm.renorm_corrections(&cache.mean, &cache.var),
                _ => (vec![1.0; c], vec![0.0; c]),
            };
            (cache.mean.clone(), cache.var.clone(), r, d)
        } else {
            (norm.pop_mean.clone(), norm.pop_var.clone(), vec![1.0; c], vec![0.0; c])
        };
        let std: Vec<f64> = var.iter().map(|v| (v + norm.eps).sqrt()).collect();
        let k: Vec<f64> = (0..c).map(|i| norm.gamma[i] * r[i] / std[i]).collect();
        let fan = aff.fan_in();
        let mut w = Matrix::zeros(c, fan + 1);
        for i in 0..c {
            for (dst, &src) in w.row_mut(i)[..fan].iter_mut().zip(aff.w.row(i)) {
                *dst = k[i] * src;
            }
            w[(i, fan)] = norm.beta[i] + norm.gamma[i] * d[i] + k[i] * (aff.b[i] - mean[i]);
        }
        blocks.push(MergedBlock { block, w, stats: Some(MergeStats { mean, var, std, r, d, k }) });
    }
    Ok(MergedWeights { interpretation: interp, blocks })
}

/// Output of the merged layer `W̃ ā` on the unrolled block input.
pub fn merged_forward(merged: &MergedBlock, input: &Matrix) -> Result<Matrix> {
    let abar = input.with_appended_row(1.0);
    crate::linalg::matmul(&merged.w, &abar)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyState {
    /// `W̃*` per block.
    pub anchors: Vec<Matrix>,
    pub curvature: Curvature,
    /// `λ` of the damping term `½λ‖W̃ − W̃*‖²`.
    pub damping: f64,
    /// Source importance `λ_s` applied by the training loop.
    pub importance: f64,
}

impl PenaltyState {
    pub fn new(anchors: Vec<Matrix>, curvature: Curvature, damping: f64, importance: f64) -> Result<Self> {
        if !(damping >= 0.0) {
            return Err(invalid!("damping must be non-negative, got {damping}"));
        }
        let state = Self { anchors, curvature, damping, importance };
        for t in &state.curvature.terms {
            let shapes: Vec<(usize, usize)> = state.anchors.iter().map(|a| a.shape()).collect();
            if t.factors.shapes != shapes {
                return Err(shape_err!("curvature shapes {:?} vs anchors {shapes:?}", t.factors.shapes));
            }
        }
        Ok(state)
    }

    fn deltas(&self, current: &[Matrix]) -> Result<Vec<Matrix>> {
        if current.len() != self.anchors.len() {
            return Err(shape_err!("{} merged weights for {} anchors", current.len(), self.anchors.len()));
        }
        current.iter().zip(&self.anchors).map(|(w, a)| w.sub(a)).collect()
    }
}

/// `∂L_s/∂W̃_l` for every block, from factored products only.
pub fn penalty_grad(state: &PenaltyState, current: &[Matrix]) -> Result<Vec<Matrix>> {
    let delta = state.deltas(current)?;
    let mut grads: Vec<Matrix> = delta.iter().map(|d| d.scaled(state.damping)).collect();
    for term in &state.curvature.terms {
        let fs = &term.factors;
        let n = fs.batch_size as f64;
        let coef = fs.cross_coefficient();
        for (l, r) in fs.pairs() {
            let f = fs.get(l, r).expect("pair listed");
            let dr = &delta[r];
            // Ĥ′ Δ Āᵀ
            let mut t = Matrix::zeros(f.h_prime.rows(), dr.cols());
            gemm(1.0, &f.h_prime, Op::N, dr, Op::N, 0.0, &mut t)?;
            gemm(term.weight, &t, Op::N, &f.a, Op::T, 1.0, &mut grads[l])?;
            // (Ĥ″ − Ĥ′) Δ (NĀ′ − Ā)ᵀ / max(N−1, 1)
            let hd = f.h_dprime.sub(&f.h_prime)?;
            if hd.max_abs() == 0.0 {
                continue;
            }
            let mut b = f.a_prime.scaled(n);
            b.add_scaled(-1.0, &f.a)?;
            gemm(1.0, &hd, Op::N, dr, Op::N, 0.0, &mut t)?;
            gemm(term.weight * coef, &t, Op::N, &b, Op::T, 1.0, &mut grads[l])?;
        }
    }
    Ok(grads)
}

/// `L_s = ½ Σ_l vec(ΔW̃_l)ᵀ vec(∂L_s/∂W̃_l)`.
pub fn penalty_value(state: &PenaltyState, current: &[Matrix], grads: &[Matrix]) -> Result<f64> {
    let delta = state.deltas(current)?;
    if grads.len() != delta.len() {
        return Err(shape_err!("{} gradients for {} blocks", grads.len(), delta.len()));
    }
    let mut v = 0.0;
    for (d, g) in delta.iter().zip(grads) {
        v += d.dot(g)?;
    }
    Ok(0.5 * v)
}

/// Raw-parameter gradients of a function of the merged weights.
#[derive(Clone, Debug)]
pub struct RawGrads {
    /// Direct partial derivatives on `w`, `b`, `γ`, `β`.
    pub params: ParamGrads,
    /// Gradients on norm-layer inputs through `μ̄` and `σ̄²`, to be
    /// backpropagated (position, gradient).
    pub injections: Vec<(usize, Matrix)>,
}

impl RawGrads {
    /// Total raw gradients, backpropagating the injections.
    pub fn total(&self, net: &Network, fwd: &Forward) -> Result<ParamGrads> {
        let inj: Vec<(usize, &Matrix)> = self.injections.iter().map(|(p, m)| (*p, m)).collect();
        let mut out = self.params.clone();
        if !inj.is_empty() {
            let back = net.backward_general(fwd, None, &inj, &[], true)?;
            add_param_grads(&mut out, &back.params.expect("parameters requested"), 1.0)?;
        }
        Ok(out)
    }
}

/// `acc += scale · g`.
pub fn add_param_grads(acc: &mut ParamGrads, g: &ParamGrads, scale: f64) -> Result<()> {
    use crate::net::LayerGrad;
    if acc.layers.len() != g.layers.len() {
        return Err(shape_err!("gradient sets of different length"));
    }
    for (a, b) in acc.layers.iter_mut().zip(&g.layers) {
        match (a, b) {
            (LayerGrad::Affine { w, b: bias }, LayerGrad::Affine { w: w2, b: b2 }) => {
                w.add_scaled(scale, w2)?;
                bias.iter_mut().zip(b2).for_each(|(x, y)| *x += scale * y);
            }
            (LayerGrad::Norm { gamma, beta }, LayerGrad::Norm { gamma: g2, beta: b2 }) => {
                gamma.iter_mut().zip(g2).for_each(|(x, y)| *x += scale * y);
                beta.iter_mut().zip(b2).for_each(|(x, y)| *x += scale * y);
            }
            (LayerGrad::None, LayerGrad::None) => {}
            _ => return Err(shape_err!("gradient kinds differ")),
        }
    }
    Ok(())
}

/// Chain rule from `∂/∂W̃` to raw parameters, honouring the interpretation's
/// stop-gradients. `fwd` must be the pass `merged` was built from.
pub fn chain_to_raw(
    net: &Network,
    fwd: &Forward,
    merged: &MergedWeights,
    merged_grads: &[Matrix],
    interp: Interpretation,
) -> Result<RawGrads> {
    if interp != merged.interpretation {
        return Err(invalid!("merged weights were built as {}, chain rule asked for {}", merged.interpretation.name(), interp.name()));
    }
    if merged_grads.len() != merged.blocks.len() {
        return Err(shape_err!("{} gradients for {} merged blocks", merged_grads.len(), merged.blocks.len()));
    }
    let mut params = ParamGrads::zeros(net);
    let mut injections = Vec::new();
    for (mb, g) in merged.blocks.iter().zip(merged_grads) {
        if g.shape() != mb.w.shape() {
            return Err(shape_err!("merged gradient {:?} vs weight {:?}", g.shape(), mb.w.shape()));
        }
        let aff = net.affine(mb.block.affine)?;
        let fan = aff.fan_in();
        let (dw, db) = params.affine_mut(mb.block.affine)?;
        let (Some(stats), Some(j)) = (&mb.stats, mb.block.norm) else {
            for i in 0..g.rows() {
                dw.row_mut(i).copy_from_slice(&g.row(i)[..fan]);
                if aff.has_bias {
                    db[i] = g[(i, fan)];
                }
            }
            continue;
        };
        let norm = net.norm(j)?;
        let c = norm.channels();
        let mut gk = vec![0.0; c];
        for i in 0..c {
            let gw = &g.row(i)[..fan];
            let gb = g[(i, fan)];
            for (dst, &v) in dw.row_mut(i).iter_mut().zip(gw) {
                *dst = stats.k[i] * v;
            }
            if aff.has_bias {
                db[i] = stats.k[i] * gb;
            }
            gk[i] = gw.iter().zip(aff.w.row(i)).map(|(a, b)| a * b).sum::<f64>() + gb * (aff.b[i] - stats.mean[i]);
        }
        let (dgamma, dbeta) = params.norm_mut(j)?;
        for i in 0..c {
            let gb = g[(i, fan)];
            dgamma[i] = gk[i] * stats.r[i] / stats.std[i] + gb * stats.d[i];
            dbeta[i] = gb;
        }
        if interp.stats_carry_gradient() {
            let z = &fwd.acts[j];
            let m = z.cols() as f64;
            let mut dz = Matrix::zeros(c, z.cols());
            for i in 0..c {
                let g_mu = -stats.k[i] * g[(i, fan)];
                let g_var = -gk[i] * stats.k[i] / (2.0 * stats.std[i] * stats.std[i]);
                let mu = stats.mean[i];
                for (dst, &zv) in dz.row_mut(i).iter_mut().zip(z.row(i)) {
                    *dst = g_mu / m + g_var * 2.0 * (zv - mu) / m;
                }
            }
            injections.push((j, dz));
        }
    }
    Ok(RawGrads { params, injections })
}

/// Per-channel mean and biased variance of every norm layer's input over
/// `data`, evaluated in eval mode. Returned in layer order.
pub fn measure_norm_stats(net: &Network, data: &Matrix, batch: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if data.cols() == 0 || batch == 0 {
        return Err(invalid!("no data to measure statistics on"));
    }
    let norms: Vec<usize> = (0..net.len()).filter(|&i| matches!(net.layers[i], Layer::Norm(_))).collect();
    // Chan's pairwise combination of (count, mean, M2)
    let mut acc: Vec<(f64, Vec<f64>, Vec<f64>)> = norms.iter().map(|&j| (0.0, vec![0.0; net.shape_at(j).0], vec![0.0; net.shape_at(j).0])).collect();
    let idx: Vec<usize> = (0..data.cols()).collect();
    for chunk in idx.chunks(batch) {
        let fwd = net.forward(&data.select_cols(chunk), false)?;
        for (a, &j) in acc.iter_mut().zip(&norms) {
            let z = &fwd.acts[j];
            let nb = z.cols() as f64;
            let (mean_b, var_b) = crate::net::NormLayer::batch_moments(z);
            let total = a.0 + nb;
            for i in 0..mean_b.len() {
                let delta = mean_b[i] - a.1[i];
                a.1[i] += delta * nb / total;
                a.2[i] += var_b[i] * nb + delta * delta * a.0 * nb / total;
            }
            a.0 = total;
        }
    }
    Ok(acc.into_iter().map(|(n, mean, m2)| (mean, m2.into_iter().map(|v| v / n).collect())).collect())
}

/// Re-centres `γ, β` so the eval-stats merged weights are unchanged when the
/// population statistics are replaced by the target statistics `(μ, σ²)`.
pub fn preprocess_reinit(net: &mut Network, target: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
    let norms: Vec<usize> = (0..net.len()).filter(|&i| matches!(net.layers[i], Layer::Norm(_))).collect();
    if norms.len() != target.len() {
        return Err(shape_err!("{} target statistics for {} norm layers", target.len(), norms.len()));
    }
    for (&j, (mu, var)) in norms.iter().zip(target) {
        let n = net.norm_mut(j)?;
        if mu.len() != n.channels() || var.len() != n.channels() {
            return Err(shape_err!("target statistics of layer {j} have the wrong length"));
        }
        for i in 0..n.channels() {
            let (src, dst) = (n.pop_var[i] + n.eps, var[i] + n.eps);
            if !(src > 0.0 && dst > 0.0) {
                return Err(invalid!("non-positive σ² + ε in layer {j}, channel {i}"));
            }
            n.beta[i] += n.gamma[i] * (mu[i] - n.pop_mean[i]) / src.sqrt();
            n.gamma[i] *= (dst / src).sqrt();
        }
        n.pop_mean = mu.clone();
        n.pop_var = var.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{estimate_factors, EstimateConfig, LabelMode};
    use crate::net::NormMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn batch(features: usize, n: usize, seed: u64) -> Matrix {
        let mut r = rng(seed);
        Matrix::from_fn(features, n, |_, _| r.random_range(-1.0..1.0))
    }

    fn bn_net(seed: u64) -> Network {
        let mut net = Network::mlp(&[3, 4, 2], Some(NormMode::Bn), &mut rng(seed)).unwrap();
        let mut r = rng(seed + 100);
        let n = net.norm_mut(1).unwrap();
        for i in 0..4 {
            n.gamma[i] = r.random_range(0.5..1.5);
            n.beta[i] = r.random_range(-0.5..0.5);
            n.pop_mean[i] = r.random_range(-0.3..0.3);
            n.pop_var[i] = r.random_range(0.3..2.0);
        }
        n.r_max = 3.0;
        n.d_max = 5.0;
        net
    }

    #[test]
    fn bn_normalization_undone_exactly() {
        let mut net = bn_net(1);
        let x = batch(3, 6, 2);
        let fwd = net.forward(&x, true).unwrap();
        let cache = fwd.norm_cache(1).unwrap().clone();
        {
            let n = net.norm_mut(1).unwrap();
            for i in 0..4 {
                let s = (cache.var[i] + n.eps).sqrt();
                n.gamma[i] = s;
                n.beta[i] = cache.mean[i] * n.gamma[i] / s;
            }
        }
        let m = merge_weights(&net, Some(&fwd), Interpretation::Bn).unwrap();
        let w = &net.affine(0).unwrap().w;
        for i in 0..4 {
            for j in 0..3 {
                assert!((m.blocks[0].w[(i, j)] - w[(i, j)]).abs() < 1e-15);
            }
            assert!(m.blocks[0].w[(i, 3)].abs() < 1e-15);
        }
    }

    #[test]
    fn brn_with_matching_population_equals_bn() {
        let mut net = bn_net(3);
        let x = batch(3, 8, 4);
        let fwd = net.forward(&x, true).unwrap();
        let cache = fwd.norm_cache(1).unwrap().clone();
        let n = net.norm_mut(1).unwrap();
        n.pop_mean = cache.mean.clone();
        n.pop_var = cache.var.clone();
        let a = merge_weights(&net, Some(&fwd), Interpretation::Bn).unwrap();
        let b = merge_weights(&net, Some(&fwd), Interpretation::Brn).unwrap();
        assert!(a.blocks[0].w.max_abs_diff(&b.blocks[0].w).unwrap() < 1e-15);
    }

    #[test]
    fn merged_forward_matches_sequential_for_bn_and_brn_layers() {
        for (mode, interp) in [(NormMode::Bn, Interpretation::Bn), (NormMode::Brn, Interpretation::Brn)] {
            let mut net = bn_net(5);
            net.set_norm_mode(mode);
            let x = batch(3, 7, 6);
            let fwd = net.forward(&x, true).unwrap();
            let m = merge_weights(&net, Some(&fwd), interp).unwrap();
            let out = merged_forward(&m.blocks[0], &fwd.acts[0]).unwrap();
            assert!(out.max_abs_diff(&fwd.acts[2]).unwrap() < 1e-12);
            let last = merged_forward(&m.blocks[1], &fwd.acts[3]).unwrap();
            assert!(last.max_abs_diff(fwd.logits()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn eval_interpretation_needs_no_forward_and_batch_ones_do() {
        let net = bn_net(7);
        assert!(merge_weights(&net, None, Interpretation::EvalStats).is_ok());
        assert!(matches!(merge_weights(&net, None, Interpretation::Bn), Err(Error::MissingState(_))));
        let eval_fwd = net.forward(&batch(3, 4, 8), false).unwrap();
        assert!(merge_weights(&net, Some(&eval_fwd), Interpretation::ConstStats).is_err());
    }

    fn state_for(net: &Network, anchors: Vec<Matrix>, damping: f64, seed: u64) -> PenaltyState {
        let xs: Vec<Matrix> = (0..2).map(|k| batch(3, 3, seed + k)).collect();
        let cfg = EstimateConfig { labels: LabelMode::Exact, ..Default::default() };
        let fs = estimate_factors(net, &xs, 3, cfg, &mut rng(seed)).unwrap();
        let mut c = Curvature::new();
        c.accumulate(0.0, fs, 1.0).unwrap();
        PenaltyState::new(anchors, c, damping, 0.5).unwrap()
    }

    #[test]
    fn gradient_and_value_vanish_at_the_anchor() {
        let net = bn_net(9);
        let anchors = merge_weights(&net, None, Interpretation::EvalStats).unwrap().matrices();
        let st = state_for(&net, anchors.clone(), 1e-3, 10);
        let g = penalty_grad(&st, &anchors).unwrap();
        assert!(g.iter().all(|m| m.max_abs() == 0.0));
        assert_eq!(penalty_value(&st, &anchors, &g).unwrap(), 0.0);
    }

    #[test]
    fn damping_only_is_recentred_weight_decay() {
        let anchors = vec![Matrix::filled(2, 2, 1.0)];
        let st = PenaltyState::new(anchors, Curvature::new(), 0.5, 0.0).unwrap();
        let cur = vec![Matrix::filled(2, 2, 2.0)];
        let g = penalty_grad(&st, &cur).unwrap();
        assert_eq!(g[0], Matrix::filled(2, 2, 0.5));
        assert_eq!(penalty_value(&st, &cur, &g).unwrap(), 1.0);
        assert!(PenaltyState::new(vec![], Curvature::new(), -1.0, 0.0).is_err());
    }

    #[test]
    fn value_directional_derivative_matches_gradient() {
        let net = bn_net(11);
        let anchors = merge_weights(&net, None, Interpretation::EvalStats).unwrap().matrices();
        let st = state_for(&net, anchors.clone(), 1e-2, 12);
        let mut r = rng(13);
        let cur: Vec<Matrix> = anchors.iter().map(|a| Matrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] + r.random_range(-0.5..0.5))).collect();
        let dir: Vec<Matrix> = anchors.iter().map(|a| Matrix::from_fn(a.rows(), a.cols(), |_, _| r.random_range(-1.0..1.0))).collect();
        let g = penalty_grad(&st, &cur).unwrap();
        let want: f64 = g.iter().zip(&dir).map(|(a, b)| a.dot(b).unwrap()).sum();
        let h = 1e-5;
        let at = |t: f64| {
            let p: Vec<Matrix> = cur.iter().zip(&dir).map(|(c, d)| c.add(&d.scaled(t)).unwrap()).collect();
            let g = penalty_grad(&st, &p).unwrap();
            penalty_value(&st, &p, &g).unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        assert!((fd - want).abs() <= 1e-6 * want.abs().max(1e-12), "{fd} vs {want}");
    }

    #[test]
    fn const_stats_chain_rule_is_pure_scaling() {
        let net = bn_net(14);
        let fwd = net.forward(&batch(3, 5, 15), true).unwrap();
        let m = merge_weights(&net, Some(&fwd), Interpretation::ConstStats).unwrap();
        let mut r = rng(16);
        let g: Vec<Matrix> = m.blocks.iter().map(|b| Matrix::from_fn(b.w.rows(), b.w.cols(), |_, _| r.random_range(-1.0..1.0))).collect();
        let raw = chain_to_raw(&net, &fwd, &m, &g, Interpretation::ConstStats).unwrap();
        assert!(raw.injections.is_empty());
        let gamma = &net.norm(1).unwrap().gamma;
        let cache = fwd.norm_cache(1).unwrap();
        if let crate::net::LayerGrad::Affine { w, .. } = &raw.params.layers[0] {
            for i in 0..4 {
                for j in 0..3 {
                    let want = gamma[i] / (cache.var[i] + 1e-5).sqrt() * g[0][(i, j)];
                    assert_eq!(w[(i, j)], want);
                }
            }
        } else {
            unreachable!()
        }
        assert!(chain_to_raw(&net, &fwd, &m, &g, Interpretation::Bn).is_err());
    }

    #[test]
    fn reinit_with_unchanged_statistics_is_a_no_op() {
        let mut net = bn_net(17);
        let before = net.clone();
        let n = net.norm(1).unwrap();
        let stats = vec![(n.pop_mean.clone(), n.pop_var.clone())];
        preprocess_reinit(&mut net, &stats).unwrap();
        let (a, b) = (net.norm(1).unwrap(), before.norm(1).unwrap());
        for i in 0..4 {
            assert!((a.gamma[i] - b.gamma[i]).abs() < 1e-15);
            assert!((a.beta[i] - b.beta[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn reinit_preserves_eval_merged_weights() {
        let mut net = bn_net(18);
        let before = merge_weights(&net, None, Interpretation::EvalStats).unwrap();
        let data = batch(3, 50, 19).map(|v| 2.0 * v + 0.7);
        let stats = measure_norm_stats(&net, &data, 16).unwrap();
        preprocess_reinit(&mut net, &stats).unwrap();
        assert_eq!(net.norm(1).unwrap().pop_mean, stats[0].0);
        let after = merge_weights(&net, None, Interpretation::EvalStats).unwrap();
        for (a, b) in after.blocks.iter().zip(&before.blocks) {
            assert!(a.w.max_abs_diff(&b.w).unwrap() < 1e-12);
        }
        let bad = vec![(vec![0.0; 4], vec![-1.0; 4])];
        assert!(preprocess_reinit(&mut net, &bad).is_err());
    }

    #[test]
    fn measured_statistics_match_a_single_pass() {
        let net = bn_net(20);
        let data = batch(3, 37, 21);
        let chunked = measure_norm_stats(&net, &data, 5).unwrap();
        let whole = measure_norm_stats(&net, &data, 37).unwrap();
        for i in 0..4 {
            assert!((chunked[0].0[i] - whole[0].0[i]).abs() < 1e-14);
            assert!((chunked[0].1[i] - whole[0].1[i]).abs() < 1e-14);
        }
    }

    /// `L_s` as a function of the flat raw parameters, with the batch
    /// re-run at every evaluation. `frozen` pins `(r, d)` of the norm layer.
    fn penalty_of_params(net: &Network, st: &PenaltyState, x: &Matrix, p: &[f64], interp: Interpretation, frozen: Option<&(Vec<f64>, Vec<f64>)>) -> f64 {
        let mut probe = net.clone();
        probe.set_params_flat(p).unwrap();
        let fwd = probe.forward(x, true).unwrap();
        let mut m = merge_weights(&probe, Some(&fwd), interp).unwrap();
        if let Some((r, d)) = frozen {
            let n = probe.norm(1).unwrap();
            let a = probe.affine(0).unwrap();
            let st0 = m.blocks[0].stats.clone().unwrap();
            for i in 0..4 {
                let k = n.gamma[i] * r[i] / st0.std[i];
                for j in 0..3 {
                    m.blocks[0].w[(i, j)] = k * a.w[(i, j)];
                }
                m.blocks[0].w[(i, 3)] = n.beta[i] + n.gamma[i] * d[i] + k * (a.b[i] - st0.mean[i]);
            }
        }
        let cur = m.matrices();
        let g = penalty_grad(st, &cur).unwrap();
        penalty_value(st, &cur, &g).unwrap()
    }

    fn check_chain_rule(interp: Interpretation, tol: f64) {
        let mut net = bn_net(22);
        // population statistics differ from the batch, so BRN corrections are active
        let x = batch(3, 6, 23);
        let anchors = merge_weights(&net, None, Interpretation::EvalStats).unwrap().matrices();
        let st = state_for(&net, anchors, 1e-2, 24);
        let mut r = rng(25);
        let p0: Vec<f64> = net.params_flat().iter().map(|v| v + r.random_range(-0.3..0.3)).collect();
        net.set_params_flat(&p0).unwrap();
        let fwd = net.forward(&x, true).unwrap();
        let m = merge_weights(&net, Some(&fwd), interp).unwrap();
        let frozen = (interp == Interpretation::Brn).then(|| {
            let s = m.blocks[0].stats.as_ref().unwrap();
            assert!(s.r.iter().all(|&v| v > 1.0 / 3.0 && v < 3.0 && v != 1.0));
            (s.r.clone(), s.d.clone())
        });
        let cur = m.matrices();
        let g = penalty_grad(&st, &cur).unwrap();
        let raw = chain_to_raw(&net, &fwd, &m, &g, interp).unwrap();
        assert_eq!(raw.injections.is_empty(), !interp.stats_carry_gradient());
        let total = net.grads_flat(&raw.total(&net, &fwd).unwrap()).unwrap();
        let h = 1e-5;
        let scale = total.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for k in 0..p0.len() {
            let mut p = p0.clone();
            p[k] += h;
            let up = penalty_of_params(&net, &st, &x, &p, interp, frozen.as_ref());
            p[k] -= 2.0 * h;
            let dn = penalty_of_params(&net, &st, &x, &p, interp, frozen.as_ref());
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - total[k]).abs() / total[k].abs().max(1e-3 * scale);
            assert!(err < tol, "{} param {k}: fd {fd} vs {}", interp.name(), total[k]);
        }
    }

    #[test]
    fn bn_chain_rule_matches_finite_differences_through_statistics() {
        check_chain_rule(Interpretation::Bn, 1e-5);
    }

    #[test]
    fn brn_chain_rule_matches_finite_differences_with_frozen_corrections() {
        check_chain_rule(Interpretation::Brn, 1e-6);
    }

    #[test]
    fn eval_chain_rule_matches_finite_differences() {
        check_chain_rule(Interpretation::EvalStats, 1e-6);
    }
}
