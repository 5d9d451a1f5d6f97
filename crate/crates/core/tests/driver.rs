use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xkfac::curvature::FisherKind;
use xkfac::data::{split, synthetic_shapes, Dataset};
use xkfac::driver::{
    accuracy, build_network, finish_task, measure_ct, run_continual, train_task, ContinualState, Hooks, Learner, Method, Penalty, RunConfig, Task,
    TaskSequence,
};
use xkfac::net::loss;
use xkfac::penalty::{merge_weights, Interpretation};
use xkfac::Matrix;

const BRN: Method = Method::Merged { interpretation: Interpretation::Brn, kind: FisherKind::Extended };

fn toy_cfg() -> RunConfig {
    RunConfig { hidden: vec![16], batch_size: 20, epochs: 4, lr_step_epochs: 100, lr: 0.05, tasks: 3, ..Default::default() }
}

fn toy_sequence(tasks: usize) -> TaskSequence {
    let base = synthetic_shapes(300, 3);
    let (train, val) = split(&base, 0.2, 4).unwrap();
    TaskSequence::from_split(train, val, tasks)
}

/// Two Gaussian blobs far apart along every feature.
fn separable(n: usize, seed: u64) -> Task {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Matrix::from_fn(4, n, |_, j| if labels[j] == 1 { 3.0 } else { -3.0 } + r.random_range(-0.5..0.5));
    let ds = Dataset::new(x, labels, 2).unwrap();
    let (train, val) = split(&ds, 0.25, seed).unwrap();
    Task { index: 0, seed: 0, train, val }
}

/// Train-mode loss over several random batchings of the training set.
fn mean_train_loss(net: &xkfac::net::Network, task: &Task, batch: usize) -> f64 {
    use rand::seq::SliceRandom;
    let mut r = ChaCha8Rng::seed_from_u64(99);
    let mut idx: Vec<usize> = (0..task.train.len()).collect();
    let mut sum = 0.0;
    let mut count = 0;
    let mut chunks = Vec::new();
    for _ in 0..20 {
        idx.shuffle(&mut r);
        chunks.extend(idx.chunks_exact(batch).map(|c| c.to_vec()));
    }
    for chunk in &chunks {
        let (x, y) = task.train.batch(chunk);
        let fwd = net.forward(&x, true).unwrap();
        sum += loss::cross_entropy(fwd.logits(), &y).unwrap().iter().sum::<f64>();
        count += chunk.len();
    }
    sum / count as f64
}

/// A learner that has finished the first task of the toy sequence.
fn after_first_task(cfg: &RunConfig) -> (Learner, TaskSequence) {
    let seq = toy_sequence(cfg.tasks);
    let first = seq.task(0).unwrap();
    let net = build_network(cfg, first.train.features(), first.train.classes).unwrap();
    let mut l = Learner::new(BRN, net);
    l.train_on(&first, cfg).unwrap();
    l.finish(&first, cfg).unwrap();
    (l, seq)
}

#[test]
fn zero_source_weight_is_plain_fine_tuning() {
    let cfg = toy_cfg();
    let (l, seq) = after_first_task(&cfg);
    let task = seq.task(1).unwrap();
    let mut state = l.state.clone();
    state.lambda_s = 0.0;
    state.lambda_t = 1.0;
    let (mut a, mut b) = (l.net.clone(), l.net.clone());
    let (mut sa, mut sb) = (state.clone(), state);
    let ra = train_task(&mut a, &l.penalty, &cfg, cfg.lr, &mut sa, &task, &mut Hooks::default()).unwrap();
    let rb = train_task(&mut b, &Penalty::None, &cfg, cfg.lr, &mut sb, &task, &mut Hooks::default()).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
}

#[test]
fn dominant_penalty_keeps_the_source_task() {
    let cfg = toy_cfg();
    let (l, seq) = after_first_task(&cfg);
    let source = seq.task(0).unwrap();
    let before = accuracy(&l.net, &source.val, 256).unwrap();
    let mut state = l.state.clone();
    state.lambda_s = 1.0;
    state.lambda_t = 1e-9;
    let mut net = l.net.clone();
    train_task(&mut net, &l.penalty, &cfg, cfg.lr, &mut state, &seq.task(1).unwrap(), &mut Hooks::default()).unwrap();
    let after = accuracy(&net, &source.val, 256).unwrap();
    assert!(before - after < 0.002, "source accuracy {before} -> {after}");
}

#[test]
fn loss_floor_of_a_separable_task_is_near_zero() {
    let task = separable(200, 7);
    let cfg = RunConfig { hidden: vec![8], batch_size: 10, epochs: 10, lr: 0.05, ..Default::default() };
    let net = build_network(&cfg, 4, 2).unwrap();
    let c_t = measure_ct(&net, &task, &cfg, cfg.lr).unwrap();
    assert!((0.0..0.05).contains(&c_t), "C_t = {c_t}");
}

#[test]
fn loss_floor_of_a_converged_net_is_its_training_loss() {
    let task = separable(200, 8);
    let cfg = RunConfig { hidden: vec![8], batch_size: 10, epochs: 10, lr: 0.05, ..Default::default() };
    let mut net = build_network(&cfg, 4, 2).unwrap();
    train_task(&mut net, &Penalty::None, &cfg, cfg.lr, &mut ContinualState::new(), &task, &mut Hooks::default()).unwrap();
    let current = mean_train_loss(&net, &task, cfg.batch_size);
    let slow = RunConfig { epochs: 2, ..cfg };
    let c_t = measure_ct(&net, &task, &slow, 1e-4).unwrap();
    assert!(c_t >= 0.0);
    assert!((c_t - current).abs() <= 0.05 * current, "C_t {c_t} vs current loss {current}");
}

#[test]
fn finishing_tasks_updates_weights_and_anchors() {
    let cfg = toy_cfg();
    let (mut l, seq) = after_first_task(&cfg);
    assert_eq!((l.state.tasks_learned, l.state.lambda_s, l.state.lambda_t), (1, 0.5, 0.5));
    let Penalty::Merged { state, .. } = &l.penalty else { panic!("merged penalty expected") };
    assert_eq!(state.curvature.terms.len(), 1);
    assert_eq!(state.anchors, merge_weights(&l.net, None, Interpretation::EvalStats).unwrap().matrices());
    for i in 1..3 {
        let task = seq.task(i).unwrap();
        l.train_on(&task, &cfg).unwrap();
        l.finish(&task, &cfg).unwrap();
    }
    assert_eq!((l.state.tasks_learned, l.state.lambda_s, l.state.lambda_t), (3, 0.75, 0.25));
    let Penalty::Merged { state, .. } = &l.penalty else { panic!("merged penalty expected") };
    assert_eq!(state.curvature.terms.len(), 3);
    assert_eq!(state.importance, 0.75);
    assert_eq!(state.anchors, merge_weights(&l.net, None, Interpretation::EvalStats).unwrap().matrices());
}

#[test]
fn finish_without_a_penalty_method_only_advances_the_weights() {
    let cfg = toy_cfg();
    let seq = toy_sequence(1);
    let task = seq.task(0).unwrap();
    let net = build_network(&cfg, task.train.features(), task.train.classes).unwrap();
    let mut state = ContinualState::new();
    let p = finish_task(&net, Method::FineTune, &Penalty::None, &mut state, &cfg, &task).unwrap();
    assert!(p.is_none());
    assert_eq!((state.lambda_s, state.lambda_t), (0.5, 0.5));
}

#[test]
fn metrics_are_deterministic() {
    let cfg = RunConfig { alpha_scaling: true, alpha_interval: 3, tasks: 2, ..toy_cfg() };
    let seq = toy_sequence(2);
    let first = seq.task(0).unwrap();
    let net = build_network(&cfg, first.train.features(), first.train.classes).unwrap();
    let a = run_continual(BRN, net.clone(), &seq, &cfg, &mut |_| {}).unwrap();
    let b = run_continual(BRN, net, &seq, &cfg, &mut |_| {}).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.final_accs, b.final_accs);
    assert_eq!(a.rows.len(), 2 * cfg.epochs);
    let mut csv = Vec::new();
    xkfac::driver::write_metrics_csv(&a.rows, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), xkfac::driver::CSV_HEADER);
    assert_eq!(text.lines().count(), a.rows.len() + 1);
}

#[test]
fn divergence_is_reported_not_fatal_to_the_grid() {
    let cfg = RunConfig { lr_grid: vec![1e6, 0.05], ..toy_cfg() };
    let seq = toy_sequence(1);
    let task = seq.task(0).unwrap();
    let net = build_network(&cfg, task.train.features(), task.train.classes).unwrap();
    let mut l = Learner::new(Method::FineTune, net);
    let r = l.train_on(&task, &cfg).unwrap();
    assert!(r.grid[0].outcome.is_err());
    assert_eq!(r.lr, 0.05);
}
