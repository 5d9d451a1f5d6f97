//! Task sequences and the continual-learning loop with per-epoch metrics.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{permute_task, split, stratified_take, Dataset};
use crate::error::{invalid, Result};
use crate::net::Network;

use super::config::RunConfig;
use super::objective::{Method, Penalty};
use super::state::ContinualState;
use super::train::{accuracy, finish_task, learn_task, Task, TaskResult};

/// Permuted-pixel tasks over one base train/validation split. Task `i`
/// uses permutation seed `i`, so task 0 is the unpermuted data.
#[derive(Clone, Debug)]
pub struct TaskSequence {
    train: Dataset,
    val: Dataset,
    len: usize,
}

impl TaskSequence {
    /// Takes `train_examples / (1 − val_fraction)` stratified examples from
    /// `base` and splits them into train and validation.
    pub fn permuted(base: &Dataset, cfg: &RunConfig) -> Result<Self> {
        let total = (cfg.train_examples as f64 / (1.0 - cfg.val_fraction)).round() as usize;
        if total > base.len() {
            return Err(invalid!("{total} examples requested from a dataset of {}", base.len()));
        }
        let (taken, _) = stratified_take(base, total, cfg.seed)?;
        let (train, val) = split(&taken, cfg.val_fraction, cfg.seed.wrapping_add(1))?;
        Ok(Self { train, val, len: cfg.tasks })
    }

    pub fn from_split(train: Dataset, val: Dataset, len: usize) -> Self {
        Self { train, val, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn task(&self, index: usize) -> Result<Task> {
        if index >= self.len {
            return Err(invalid!("task {index} of a {}-task sequence", self.len));
        }
        let seed = index as u64;
        Ok(Task { index, seed, train: permute_task(&self.train, seed), val: permute_task(&self.val, seed) })
    }
}

/// One CSV row per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub task_index: usize,
    pub epoch: usize,
    pub target_val_acc: f64,
    pub avg_val_acc_all_seen_tasks: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub alpha_s: u32,
    pub alpha_t: u32,
}

pub const CSV_HEADER: &str = "task_index,epoch,target_val_acc,avg_val_acc_all_seen_tasks,L_s,L_t,alpha_s,alpha_t";

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.task_index, r.epoch, r.target_val_acc, r.avg_val_acc_all_seen_tasks, r.l_s, r.l_t, r.alpha_s, r.alpha_t
        )?;
    }
    Ok(())
}

/// The fully connected network the configuration describes, with its
/// norm-layer settings applied.
pub fn build_network(cfg: &RunConfig, features: usize, classes: usize) -> Result<Network> {
    let mut widths = vec![features];
    widths.extend(&cfg.hidden);
    widths.push(classes);
    let mut net = Network::mlp(&widths, Some(cfg.norm), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    for n in net.norm_layers_mut() {
        n.momentum = cfg.bn_momentum;
        n.eps = cfg.eps;
    }
    Ok(net)
}

/// Network, penalty and bookkeeping of one method across a sequence.
#[derive(Clone, Debug)]
pub struct Learner {
    pub method: Method,
    pub net: Network,
    pub penalty: Penalty,
    pub state: ContinualState,
    /// Validation sets of finished tasks, kept for reporting only.
    seen: Vec<Dataset>,
    pub rows: Vec<MetricsRow>,
}

impl Learner {
    pub fn new(method: Method, net: Network) -> Self {
        Self { method, net, penalty: Penalty::None, state: ContinualState::new(), seen: Vec::new(), rows: Vec::new() }
    }

    /// Trains on `task` (grid plus selection) and records per-epoch rows.
    pub fn train_on(&mut self, task: &Task, cfg: &RunConfig) -> Result<TaskResult> {
        let seen = &self.seen;
        let current = &task.val;
        let batch = cfg.batch_size.max(256);
        let mut report = |net: &Network| -> Result<f64> {
            let mut sum = accuracy(net, current, batch)?;
            for v in seen {
                sum += accuracy(net, v, batch)?;
            }
            Ok(sum / (seen.len() + 1) as f64)
        };
        let result = learn_task(&mut self.net, self.method, &mut self.penalty, cfg, &mut self.state, task, Some(&mut report))?;
        for e in &result.outcome.epochs {
            self.rows.push(MetricsRow {
                task_index: task.index,
                epoch: e.epoch,
                target_val_acc: e.target_val_acc,
                avg_val_acc_all_seen_tasks: e.report.unwrap_or(f64::NAN),
                l_s: e.l_s,
                l_t: e.l_t,
                alpha_s: e.alpha_s,
                alpha_t: e.alpha_t,
            });
        }
        Ok(result)
    }

    /// Folds the task into the penalty and stops exposing its training data.
    pub fn finish(&mut self, task: &Task, cfg: &RunConfig) -> Result<()> {
        self.penalty = finish_task(&self.net, self.method, &self.penalty, &mut self.state, cfg, task)?;
        self.seen.push(task.val.clone());
        Ok(())
    }

    /// Accuracy on every finished task's validation set.
    pub fn seen_accuracies(&self, batch: usize) -> Result<Vec<f64>> {
        self.seen.iter().map(|v| accuracy(&self.net, v, batch)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ContinualReport {
    pub method: Method,
    pub rows: Vec<MetricsRow>,
    /// Validation accuracy on each task after the last one was learned.
    pub final_accs: Vec<f64>,
    pub average: f64,
}

fn report(l: &Learner) -> Result<ContinualReport> {
    let final_accs = l.seen_accuracies(256)?;
    let average = final_accs.iter().sum::<f64>() / final_accs.len().max(1) as f64;
    Ok(ContinualReport { method: l.method, rows: l.rows.clone(), final_accs, average })
}

/// Runs the remaining tasks of `seq` for a learner that has already
/// trained on (but not finished) task `done - 1`.
pub fn continue_sequence(mut learner: Learner, seq: &TaskSequence, cfg: &RunConfig, done: usize, log: &mut dyn FnMut(&str)) -> Result<ContinualReport> {
    if done > 0 {
        learner.finish(&seq.task(done - 1)?, cfg)?;
    }
    for i in done..seq.len() {
        let task = seq.task(i)?;
        let r = learner.train_on(&task, cfg)?;
        log(&format!(
            "{}: task {i} val acc {:.4} (epoch {}, lr {}, damping {})",
            learner.method.name(),
            r.outcome.best_val_acc,
            r.outcome.best_epoch,
            r.lr,
            r.damping
        ));
        learner.finish(&task, cfg)?;
    }
    report(&learner)
}

/// Learns the whole sequence with one method.
pub fn run_continual(method: Method, net: Network, seq: &TaskSequence, cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<ContinualReport> {
    continue_sequence(Learner::new(method, net), seq, cfg, 0, log)
}

/// Learns the sequence with several methods. The first task carries no
/// penalty for any method, so it is trained once and shared.
pub fn compare_methods(methods: &[Method], net: Network, seq: &TaskSequence, cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<Vec<ContinualReport>> {
    let first = seq.task(0)?;
    let mut shared = Learner::new(Method::FineTune, net);
    let r = shared.train_on(&first, cfg)?;
    log(&format!("task 0 val acc {:.4} (epoch {})", r.outcome.best_val_acc, r.outcome.best_epoch));
    methods
        .iter()
        .map(|&m| {
            let mut l = shared.clone();
            l.method = m;
            continue_sequence(l, seq, cfg, 1, log)
        })
        .collect()
}
