//! Training one task: the combined objective, early stopping, the target
//! loss floor and the per-task hyperparameter grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::net::{loss, Network};
use crate::penalty::{measure_norm_stats, preprocess_reinit};

use super::config::RunConfig;
use super::objective::{rebuild_penalty, Method, Penalty};
use super::state::{select_model, AlphaController, ContinualState, GridRun, Sgd};

/// One task of a sequence. Only the current task's data is handed to the
/// training routines.
#[derive(Clone, Debug)]
pub struct Task {
    pub index: usize,
    pub seed: u64,
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub target_val_acc: f64,
    /// Mean over the epoch's steps of `L_s` and `L_t`.
    pub l_s: f64,
    pub l_t: f64,
    pub alpha_s: u32,
    pub alpha_t: u32,
    /// Filled in by the caller's epoch hook (e.g. accuracy over all tasks
    /// seen so far); never used for training decisions.
    pub report: Option<f64>,
}

/// What one optimizer step optimized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTrace {
    pub l_s: f64,
    pub l_t: f64,
    /// Multipliers of `L_s` and `L_t` in the objective.
    pub weight_s: f64,
    pub weight_t: f64,
    pub alpha_s: u32,
    pub alpha_t: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochStats>,
    /// Mean training loss over the last epoch run.
    pub last_epoch_loss: f64,
    pub steps: usize,
}

/// Optional observers of a training run.
#[derive(Default)]
pub struct Hooks<'a> {
    pub on_epoch: Option<&'a mut dyn FnMut(&Network) -> Result<f64>>,
    pub on_step: Option<&'a mut dyn FnMut(&StepTrace)>,
}

/// Eval-mode accuracy.
pub fn accuracy(net: &Network, ds: &Dataset, batch: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(invalid!("accuracy of an empty dataset"));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = ds.batch(chunk);
        correct += loss::count_correct(&net.predict(&x)?, &y);
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn diverged(e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::Diverged(m),
        other => other,
    }
}

fn task_rng(cfg: &RunConfig, task: &Task, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ task.seed.rotate_left(17) ^ (task.index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    r.set_stream(stream);
    r
}

/// `r_max, d_max` after `step` optimizer steps: linear from `(1, 0)`, full
/// after `relax_fraction` of one task's steps.
pub fn renorm_limits(cfg: &RunConfig, steps_per_task: usize, step: usize) -> (f64, f64) {
    let ramp = (cfg.relax_fraction * steps_per_task as f64).round();
    let p = if ramp <= 0.0 { 1.0 } else { (step as f64 / ramp).min(1.0) };
    (1.0 + (cfg.r_max - 1.0) * p, cfg.d_max * p)
}

/// SGD with momentum on `λ_t/α_t · L_t + λ_s/α_s · L_s` (just `L_t` without
/// a penalty), with early stopping on the task's validation accuracy. The
/// best epoch's network is left in `net`.
pub fn train_task(
    net: &mut Network,
    penalty: &Penalty,
    cfg: &RunConfig,
    lr: f64,
    state: &mut ContinualState,
    task: &Task,
    hooks: &mut Hooks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = task.train.len();
    let per_epoch = n / cfg.batch_size;
    if per_epoch == 0 {
        return Err(invalid!("{n} training examples cannot fill a batch of {}", cfg.batch_size));
    }
    let penalized = !penalty.is_none() && state.lambda_s > 0.0;
    let (lambda_s, lambda_t) = if penalty.is_none() { (0.0, 1.0) } else { (state.lambda_s, state.lambda_t) };
    let use_alpha = cfg.alpha_scaling && penalized;
    let c_t = match (use_alpha, state.c_t) {
        (true, None) => return Err(Error::MissingState("adaptive scaling needs the target loss floor".into())),
        (_, c) => c.unwrap_or(0.0),
    };
    let mut alpha = AlphaController::new(cfg.alpha_interval);
    let mut opt = Sgd::new(cfg.momentum, net.param_count());
    let mut rng = task_rng(cfg, task, 1);
    let mut params = net.params_flat();
    let mut best: Option<(f64, usize, Network)> = None;
    let mut epochs = Vec::new();
    let mut last_epoch_loss = f64::NAN;
    let mut steps = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let rate = cfg.lr_at(lr, epoch);
        order.shuffle(&mut rng);
        let (mut sum_s, mut sum_t) = (0.0, 0.0);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let (r_max, d_max) = renorm_limits(cfg, cfg.epochs * per_epoch, state.global_step);
            net.set_renorm_limits(r_max, d_max);
            let (x, y) = task.train.batch(chunk);
            let fwd = net.forward(&x, true).map_err(diverged)?;
            let (l_t, g_t) = net.backward(&fwd, &y).map_err(diverged)?;
            if !l_t.is_finite() {
                return Err(Error::Diverged(format!("target loss {l_t} at step {steps}")));
            }
            let (weight_s, weight_t) = (lambda_s / alpha.alpha_s as f64, lambda_t / alpha.alpha_t as f64);
            let mut grad = net.grads_flat(&g_t)?;
            let mut l_s = 0.0;
            if penalized {
                let ev = penalty.evaluate(net, &fwd).map_err(diverged)?.expect("penalty present");
                l_s = ev.value;
                if !l_s.is_finite() {
                    return Err(Error::Diverged(format!("penalty {l_s} at step {steps}")));
                }
                let g_s = net.grads_flat(&ev.grads)?;
                for (g, s) in grad.iter_mut().zip(&g_s) {
                    *g = weight_t * *g + weight_s * s;
                }
            } else if weight_t != 1.0 {
                grad.iter_mut().for_each(|g| *g *= weight_t);
            }
            if let Some(h) = hooks.on_step.as_mut() {
                h(&StepTrace { l_s, l_t, weight_s, weight_t, alpha_s: alpha.alpha_s, alpha_t: alpha.alpha_t });
            }
            opt.step(&mut params, &grad, rate)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged(format!("non-finite parameters at step {steps}")));
            }
            net.set_params_flat(&params)?;
            net.update_population_stats(&fwd);
            if use_alpha {
                alpha.observe(lambda_s * l_s, lambda_t * (l_t - c_t));
            }
            sum_s += l_s;
            sum_t += l_t;
            steps += 1;
            state.global_step += 1;
        }
        let acc = accuracy(net, &task.val, cfg.batch_size.max(256)).map_err(diverged)?;
        let report = match hooks.on_epoch.as_mut() {
            Some(h) => Some(h(net)?),
            None => None,
        };
        last_epoch_loss = sum_t / per_epoch as f64;
        epochs.push(EpochStats {
            epoch,
            target_val_acc: acc,
            l_s: sum_s / per_epoch as f64,
            l_t: last_epoch_loss,
            alpha_s: alpha.alpha_s,
            alpha_t: alpha.alpha_t,
            report,
        });
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, net.clone()));
        } else if cfg.patience > 0 && epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
            break;
        }
    }
    let (best_val_acc, best_epoch, best_net) = best.expect("at least one epoch");
    *net = best_net;
    Ok(TrainOutcome { best_val_acc, best_epoch, epochs, last_epoch_loss, steps })
}

/// Target loss floor: the last-epoch training loss of plain fine-tuning on
/// a copy of `net`.
pub fn measure_ct(net: &Network, task: &Task, cfg: &RunConfig, lr: f64) -> Result<f64> {
    let mut copy = net.clone();
    let mut fresh = ContinualState::new();
    let out = train_task(&mut copy, &Penalty::None, cfg, lr, &mut fresh, task, &mut Hooks::default())?;
    if !out.last_epoch_loss.is_finite() {
        return Err(Error::Diverged("fine-tuning for the loss floor diverged".into()));
    }
    Ok(out.last_epoch_loss)
}

/// Result of learning one task over the hyperparameter grid.
#[derive(Clone, Debug)]
pub struct TaskResult {
    pub lr: f64,
    pub damping: f64,
    pub outcome: TrainOutcome,
    pub grid: Vec<GridRun<()>>,
}

/// Re-centres norm parameters on the target task (for merged-weight
/// penalties after the first task), measures `C_t` when adaptive scaling
/// is on, trains every grid point and keeps the best by target validation
/// accuracy.
pub fn learn_task(
    net: &mut Network,
    method: Method,
    penalty: &mut Penalty,
    cfg: &RunConfig,
    state: &mut ContinualState,
    task: &Task,
    mut on_epoch: Option<&mut dyn FnMut(&Network) -> Result<f64>>,
) -> Result<TaskResult> {
    if matches!(method, Method::Merged { .. }) && state.tasks_learned > 0 {
        let stats = measure_norm_stats(net, &task.train.images, cfg.batch_size.max(256))?;
        preprocess_reinit(net, &stats)?;
    }
    let grid = cfg.grid();
    if cfg.alpha_scaling && !penalty.is_none() {
        state.c_t = Some(measure_ct(net, task, cfg, grid[0].0)?);
    }
    let mut runs = Vec::new();
    let mut results = Vec::new();
    for &(lr, damping) in &grid {
        let mut candidate = net.clone();
        let mut pen = penalty.clone();
        pen.set_damping(damping)?;
        let mut st = state.clone();
        let mut hooks = Hooks { on_epoch: on_epoch.as_mut().map(|f| &mut **f as &mut dyn FnMut(&Network) -> Result<f64>), on_step: None };
        match train_task(&mut candidate, &pen, cfg, lr, &mut st, task, &mut hooks) {
            Ok(out) => {
                runs.push(GridRun { lr, damping, outcome: Ok((out.best_val_acc, ())) });
                results.push(Some((candidate, pen, st, out)));
            }
            Err(Error::Diverged(msg)) => {
                runs.push(GridRun { lr, damping, outcome: Err(msg) });
                results.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let k = select_model(&runs)?;
    let (chosen, pen, st, outcome) = results[k].take().expect("selected run succeeded");
    *net = chosen;
    *penalty = pen;
    *state = st;
    Ok(TaskResult { lr: runs[k].lr, damping: runs[k].damping, outcome, grid: runs })
}

/// Estimates the task's curvature on the selected model, folds it into
/// the penalty with the current `(λ_s, λ_t)`, snapshots anchors and moves
/// the importance weights on to `T + 1` tasks.
pub fn finish_task(net: &Network, method: Method, penalty: &Penalty, state: &mut ContinualState, cfg: &RunConfig, task: &Task) -> Result<Penalty> {
    let mut rng = task_rng(cfg, task, 2);
    let mut next = rebuild_penalty(method, penalty, net, &task.train.images, cfg, (state.lambda_s, state.lambda_t), &mut rng)?;
    state.advance();
    match &mut next {
        Penalty::None => {}
        Penalty::Merged { state: s, .. } => s.importance = state.lambda_s,
        Penalty::Separate(s) => s.affine.importance = state.lambda_s,
    }
    Ok(next)
}
