//! Source-side penalties the training loop can carry, and how each is
//! rebuilt at the end of a task.

use rand::Rng;

use crate::curvature::{Coupling, Curvature, EstimateConfig, FactorAccumulator, FactorSet, FisherKind, LabelMode, Tap};
use crate::error::{invalid, shape_err, Result};
use crate::linalg::Matrix;
use crate::net::{loss, Forward, Layer, Network, ParamGrads};
use crate::penalty::{chain_to_raw, merge_weights, penalty_grad, penalty_value, Interpretation, PenaltyState, RawGrads};

use super::config::{Fold, RunConfig};

/// A continual-learning method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// No source penalty.
    FineTune,
    /// Quadratic penalty over merged weights.
    Merged { interpretation: Interpretation, kind: FisherKind },
    /// Quadratic penalty over raw `[w | b]` plus a diagonal one over each
    /// norm layer's `γ, β, μ̄, σ̄²`.
    Separate,
}

impl Method {
    pub fn name(self) -> String {
        match self {
            Method::FineTune => "finetune".into(),
            Method::Merged { interpretation, kind: FisherKind::Extended } => format!("xkfac-{}", interpretation.name()),
            Method::Merged { interpretation, kind: FisherKind::Kfac } => format!("kfac-{}", interpretation.name()),
            Method::Separate => "separate".into(),
        }
    }

    /// Baseline names accepted on the command line; `interp` fills in the
    /// interpretation for `kfac`.
    pub fn parse_baseline(s: &str, interp: Interpretation) -> Result<Self> {
        Ok(match s {
            "finetune" => Method::FineTune,
            "separate" => Method::Separate,
            "kfac" => Method::Merged { interpretation: interp, kind: FisherKind::Kfac },
            "const-stats" => Method::Merged { interpretation: Interpretation::ConstStats, kind: FisherKind::Extended },
            "eval-stats" => Method::Merged { interpretation: Interpretation::EvalStats, kind: FisherKind::Extended },
            _ => return Err(invalid!("unknown baseline {s:?}")),
        })
    }

    pub fn interpretation(self) -> Option<Interpretation> {
        match self {
            Method::Merged { interpretation, .. } => Some(interpretation),
            _ => None,
        }
    }
}

/// Anchor and diagonal curvature for one norm layer's four statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormAnchor {
    pub layer: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Diagonal Fisher of `γ, β, μ̄, σ̄²` in that order.
    pub fisher: [Vec<f64>; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparatePenalty {
    /// Curvature and anchors over raw `[w | b]`.
    pub affine: PenaltyState,
    pub norms: Vec<NormAnchor>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Penalty {
    None,
    Merged { state: PenaltyState, interpretation: Interpretation },
    Separate(SeparatePenalty),
}

/// `L_s` and its raw-parameter gradient on one batch.
#[derive(Clone, Debug)]
pub struct PenaltyEval {
    pub value: f64,
    pub grads: ParamGrads,
}

/// `[w | b]` of every block's affine layer; `b` is zero without a bias.
pub fn raw_affine(net: &Network) -> Result<Vec<Matrix>> {
    net.blocks()
        .iter()
        .map(|b| {
            let a = net.affine(b.affine)?;
            a.w.with_appended_col(&a.b)
        })
        .collect()
}

impl Penalty {
    pub fn is_none(&self) -> bool {
        matches!(self, Penalty::None)
    }

    pub fn damping(&self) -> Option<f64> {
        match self {
            Penalty::None => None,
            Penalty::Merged { state, .. } => Some(state.damping),
            Penalty::Separate(s) => Some(s.affine.damping),
        }
    }

    pub fn set_damping(&mut self, damping: f64) -> Result<()> {
        if !(damping >= 0.0) {
            return Err(invalid!("damping must be non-negative, got {damping}"));
        }
        match self {
            Penalty::None => {}
            Penalty::Merged { state, .. } => state.damping = damping,
            Penalty::Separate(s) => s.affine.damping = damping,
        }
        Ok(())
    }

    /// Evaluates the penalty on the batch `fwd` was computed from.
    pub fn evaluate(&self, net: &Network, fwd: &Forward) -> Result<Option<PenaltyEval>> {
        match self {
            Penalty::None => Ok(None),
            Penalty::Merged { state, interpretation } => {
                let merged = merge_weights(net, Some(fwd), *interpretation)?;
                let current = merged.matrices();
                let g = penalty_grad(state, &current)?;
                let value = penalty_value(state, &current, &g)?;
                let raw = chain_to_raw(net, fwd, &merged, &g, *interpretation)?;
                Ok(Some(PenaltyEval { value, grads: raw.total(net, fwd)? }))
            }
            Penalty::Separate(sep) => sep.evaluate(net, fwd).map(Some),
        }
    }
}

impl SeparatePenalty {
    fn evaluate(&self, net: &Network, fwd: &Forward) -> Result<PenaltyEval> {
        let current = raw_affine(net)?;
        let g = penalty_grad(&self.affine, &current)?;
        let mut value = penalty_value(&self.affine, &current, &g)?;
        let mut params = ParamGrads::zeros(net);
        for (b, gm) in net.blocks().iter().zip(&g) {
            let a = net.affine(b.affine)?;
            let fan = a.fan_in();
            let has_bias = a.has_bias;
            let (dw, db) = params.affine_mut(b.affine)?;
            for i in 0..gm.rows() {
                dw.row_mut(i).copy_from_slice(&gm.row(i)[..fan]);
                if has_bias {
                    db[i] = gm[(i, fan)];
                }
            }
        }
        let lambda = self.affine.damping;
        let mut injections = Vec::new();
        for na in &self.norms {
            let norm = net.norm(na.layer)?;
            let cache = fwd.norm_cache(na.layer)?;
            if !cache.batch_stats {
                return Err(invalid!("separate penalty needs a train-mode forward pass"));
            }
            let values = [&norm.gamma, &norm.beta, &cache.mean, &cache.var];
            let anchors = [&na.gamma, &na.beta, &na.mean, &na.var];
            let mut grads: [Vec<f64>; 4] = Default::default();
            for k in 0..4 {
                grads[k] = (0..norm.channels())
                    .map(|i| {
                        let h = na.fisher[k][i] + lambda;
                        let d = values[k][i] - anchors[k][i];
                        value += 0.5 * h * d * d;
                        h * d
                    })
                    .collect();
            }
            let (dg, dbeta) = params.norm_mut(na.layer)?;
            dg.copy_from_slice(&grads[0]);
            dbeta.copy_from_slice(&grads[1]);
            let z = &fwd.acts[na.layer];
            let m = z.cols() as f64;
            let mut dz = Matrix::zeros(z.rows(), z.cols());
            for i in 0..z.rows() {
                for (dst, &zv) in dz.row_mut(i).iter_mut().zip(z.row(i)) {
                    *dst = grads[2][i] / m + grads[3][i] * 2.0 * (zv - cache.mean[i]) / m;
                }
            }
            injections.push((na.layer, dz));
        }
        let raw = RawGrads { params, injections };
        Ok(PenaltyEval { value, grads: raw.total(net, fwd)? })
    }
}

/// Full mini-batches for curvature estimation: one shuffled epoch unless
/// `cfg.fisher_batches` caps it.
pub fn estimation_batches<R: Rng + ?Sized>(data: &Matrix, cfg: &RunConfig, rng: &mut R) -> Result<Vec<Matrix>> {
    let n = data.cols();
    if n < cfg.batch_size {
        return Err(invalid!("{n} examples cannot fill a batch of {}", cfg.batch_size));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
    let mut out: Vec<Matrix> = idx.chunks_exact(cfg.batch_size).map(|c| data.select_cols(c)).collect();
    if cfg.fisher_batches > 0 {
        out.truncate(cfg.fisher_batches);
    }
    Ok(out)
}

fn fold_in(curv: &mut Curvature, cfg: &RunConfig, lambda_s: f64, fs: FactorSet, lambda_t: f64) -> Result<()> {
    match cfg.fold {
        Fold::Terms => curv.accumulate(lambda_s, fs, lambda_t),
        Fold::Ema => curv.accumulate_folded(lambda_s, fs, lambda_t),
    }
}

fn estimate_config(cfg: &RunConfig, tap: Tap, kind: FisherKind) -> EstimateConfig {
    EstimateConfig { coupling: cfg.coupling, labels: LabelMode::Sampled { draws: cfg.label_draws }, tap, kind }
}

/// Diagonal Fisher of every norm layer's `γ, β, μ̄, σ̄²`, from the
/// derivatives at the norm outputs with labels drawn from the model.
fn norm_fisher<R: Rng + ?Sized>(net: &Network, batches: &[Matrix], draws: usize, rng: &mut R) -> Result<Vec<[Vec<f64>; 4]>> {
    let norms: Vec<usize> = (0..net.len()).filter(|&i| matches!(net.layers[i], Layer::Norm(_))).collect();
    let taps: Vec<usize> = norms.iter().map(|j| j + 1).collect();
    let mut acc: Vec<[Vec<f64>; 4]> = norms.iter().map(|&j| std::array::from_fn(|_| vec![0.0; net.shape_at(j).0])).collect();
    let mut count = 0usize;
    for x in batches {
        let fwd = net.forward(x, true)?;
        let probs = loss::softmax(fwd.logits());
        for _ in 0..draws {
            let labels = loss::sample_model_labels(fwd.logits(), rng);
            for (e, &y) in labels.iter().enumerate() {
                let mut seed = probs.col_vec(e);
                seed[y] -= 1.0;
                let d = net.per_example_sweep(&fwd, e, &seed, &taps)?;
                for ((a, &j), dj) in acc.iter_mut().zip(&norms).zip(&d) {
                    let norm = net.norm(j)?;
                    let cache = fwd.norm_cache(j)?;
                    for i in 0..norm.channels() {
                        let s = 1.0 / cache.inv_std[i];
                        let scale = norm.gamma[i] * cache.r[i];
                        let (mut gg, mut gb, mut gm, mut gv) = (0.0, 0.0, 0.0, 0.0);
                        for (m, &dv) in dj.row(i).iter().enumerate() {
                            let xh = cache.xhat[(i, m)];
                            gg += dv * (cache.r[i] * xh + cache.d[i]);
                            gb += dv;
                            gm -= dv * scale / s;
                            gv -= dv * 0.5 * scale * xh / (s * s);
                        }
                        for (k, g) in [gg, gb, gm, gv].into_iter().enumerate() {
                            a[k][i] += g * g;
                        }
                    }
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(invalid!("no batches for the norm-statistic Fisher"));
    }
    for a in &mut acc {
        for v in a.iter_mut() {
            v.iter_mut().for_each(|x| *x /= count as f64);
        }
    }
    Ok(acc)
}

/// Rebuilds the penalty after a task: estimates the task's curvature on
/// `net`, folds it in with weights `(λ_s, λ_t)` and snapshots new anchors.
pub fn rebuild_penalty<R: Rng + ?Sized>(
    method: Method,
    previous: &Penalty,
    net: &Network,
    train: &Matrix,
    cfg: &RunConfig,
    (lambda_s, lambda_t): (f64, f64),
    rng: &mut R,
) -> Result<Penalty> {
    if method == Method::FineTune {
        return Ok(Penalty::None);
    }
    let batches = estimation_batches(train, cfg, rng)?;
    match method {
        Method::FineTune => unreachable!(),
        Method::Merged { interpretation, kind } => {
            let mut acc = FactorAccumulator::new(net, cfg.batch_size, estimate_config(cfg, Tap::BlockOutput, kind))?;
            for x in &batches {
                acc.add_batch(net, x, rng)?;
            }
            let mut curv = match previous {
                Penalty::None => Curvature::new(),
                Penalty::Merged { state, .. } => state.curvature.clone(),
                Penalty::Separate(_) => return Err(invalid!("cannot continue a separate penalty as a merged one")),
            };
            fold_in(&mut curv, cfg, lambda_s, acc.finish()?, lambda_t)?;
            let anchors = merge_weights(net, None, Interpretation::EvalStats)?.matrices();
            let state = PenaltyState::new(anchors, curv, cfg.damping, lambda_s)?;
            Ok(Penalty::Merged { state, interpretation })
        }
        Method::Separate => {
            let ecfg = EstimateConfig { coupling: Coupling::Diagonal, ..estimate_config(cfg, Tap::AffineOutput, FisherKind::Extended) };
            let mut acc = FactorAccumulator::new(net, cfg.batch_size, ecfg)?;
            for x in &batches {
                acc.add_batch(net, x, rng)?;
            }
            let fisher = norm_fisher(net, &batches, cfg.label_draws, rng)?;
            let (mut curv, old_norms) = match previous {
                Penalty::None => (Curvature::new(), None),
                Penalty::Separate(s) => (s.affine.curvature.clone(), Some(&s.norms)),
                Penalty::Merged { .. } => return Err(invalid!("cannot continue a merged penalty as a separate one")),
            };
            fold_in(&mut curv, cfg, lambda_s, acc.finish()?, lambda_t)?;
            let affine = PenaltyState::new(raw_affine(net)?, curv, cfg.damping, lambda_s)?;
            let layers: Vec<usize> = (0..net.len()).filter(|&i| matches!(net.layers[i], Layer::Norm(_))).collect();
            let mut norms = Vec::new();
            for (k, (&j, f)) in layers.iter().zip(fisher).enumerate() {
                let n = net.norm(j)?;
                let fisher = match old_norms {
                    Some(old) => {
                        let o = old.get(k).filter(|o| o.layer == j).ok_or_else(|| shape_err!("norm anchors do not match the network"))?;
                        std::array::from_fn(|q| o.fisher[q].iter().zip(&f[q]).map(|(a, b)| lambda_s * a + lambda_t * b).collect())
                    }
                    None => f.map(|v| v.into_iter().map(|x| lambda_t * x).collect()),
                };
                norms.push(NormAnchor { layer: j, gamma: n.gamma.clone(), beta: n.beta.clone(), mean: n.pop_mean.clone(), var: n.pop_var.clone(), fisher });
            }
            Ok(Penalty::Separate(SeparatePenalty { affine, norms }))
        }
    }
}
