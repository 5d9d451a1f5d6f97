//! Task bookkeeping, adaptive loss scaling, the optimizer and model
//! selection.

use crate::error::{invalid, Error, Result};

/// Which side the adaptive scaling is currently pushing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaPhase {
    Balanced,
    /// `α_t > 1`: the source penalty dominated.
    EscalatingTarget,
    /// `α_s > 1`: the target loss dominated.
    EscalatingSource,
}

/// Integer divisors `α_s, α_t` updated from interval means of `λ_s L_s` and
/// `λ_t (L_t − C_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaController {
    pub alpha_s: u32,
    pub alpha_t: u32,
    pub interval: usize,
    sum_s: f64,
    sum_t: f64,
    count: usize,
}

impl AlphaController {
    pub fn new(interval: usize) -> Self {
        Self { alpha_s: 1, alpha_t: 1, interval: interval.max(1), sum_s: 0.0, sum_t: 0.0, count: 0 }
    }

    pub fn phase(&self) -> AlphaPhase {
        if self.alpha_t > 1 {
            AlphaPhase::EscalatingTarget
        } else if self.alpha_s > 1 {
            AlphaPhase::EscalatingSource
        } else {
            AlphaPhase::Balanced
        }
    }

    /// One interval's means. A strict comparison escalates the divisor of
    /// the weaker side by one; when the comparison flips, both reset to 1.
    pub fn update(&mut self, source: f64, target: f64) {
        if source > target {
            if self.alpha_s > 1 {
                self.alpha_s = 1;
            } else {
                self.alpha_t += 1;
            }
        } else if target > source {
            if self.alpha_t > 1 {
                self.alpha_t = 1;
            } else {
                self.alpha_s += 1;
            }
        }
    }

    /// Records one step; updates the scales when an interval completes.
    pub fn observe(&mut self, source: f64, target: f64) -> bool {
        self.sum_s += source;
        self.sum_t += target;
        self.count += 1;
        if self.count < self.interval {
            return false;
        }
        let n = self.count as f64;
        let (s, t) = (self.sum_s / n, self.sum_t / n);
        self.sum_s = 0.0;
        self.sum_t = 0.0;
        self.count = 0;
        self.update(s, t);
        true
    }
}

/// Counts and importance weights across the task sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinualState {
    /// Tasks learned so far, `T`.
    pub tasks_learned: usize,
    pub lambda_s: f64,
    pub lambda_t: f64,
    /// Target loss floor from fine-tuning, when adaptive scaling is used.
    pub c_t: Option<f64>,
    /// Optimizer steps taken over the whole sequence.
    pub global_step: usize,
}

impl Default for ContinualState {
    fn default() -> Self {
        Self::new()
    }
}

impl ContinualState {
    pub fn new() -> Self {
        Self { tasks_learned: 0, lambda_s: 0.0, lambda_t: 1.0, c_t: None, global_step: 0 }
    }

    /// Equal-importance weights after `T` tasks: `T/(T+1)` and `1/(T+1)`.
    pub fn importance(tasks: usize) -> (f64, f64) {
        let t = tasks as f64;
        (t / (t + 1.0), 1.0 / (t + 1.0))
    }

    pub fn advance(&mut self) {
        self.tasks_learned += 1;
        (self.lambda_s, self.lambda_t) = Self::importance(self.tasks_learned);
        self.c_t = None;
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64, params: usize) -> Self {
        Self { momentum, velocity: vec![0.0; params] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grad.len() != params.len() {
            return Err(invalid!("optimizer holds {} parameters, got {} and {}", self.velocity.len(), params.len(), grad.len()));
        }
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }
}

/// One grid point's result.
#[derive(Clone, Debug)]
pub struct GridRun<T> {
    pub lr: f64,
    pub damping: f64,
    /// Final target validation accuracy, or why the run failed.
    pub outcome: std::result::Result<(f64, T), String>,
}

/// Best target validation accuracy; ties go to the smaller damping, then
/// the smaller learning rate, then the earlier run.
pub fn select_model<T>(runs: &[GridRun<T>]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in runs.iter().enumerate() {
        let Ok((acc, _)) = &r.outcome else { continue };
        let better = match best {
            None => true,
            Some((j, b)) => {
                let o = &runs[j];
                *acc > b || (*acc == b && (r.damping < o.damping || (r.damping == o.damping && r.lr < o.lr)))
            }
        };
        if better {
            best = Some((i, *acc));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| Error::Diverged(format!("all {} grid runs failed", runs.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tie_keeps_both_scales_at_one() {
        let mut a = AlphaController::new(1);
        a.update(0.5, 0.5);
        assert_eq!((a.alpha_s, a.alpha_t), (1, 1));
    }

    #[test]
    fn escalation_then_reset_on_flip() {
        let mut a = AlphaController::new(1);
        let mut trace = Vec::new();
        for (s, t) in [(2.0, 1.0), (2.0, 1.0), (2.0, 1.0), (1.0, 2.0)] {
            a.update(s, t);
            trace.push(a.alpha_t);
        }
        assert_eq!(trace, vec![2, 3, 4, 1]);
        assert_eq!(a.alpha_s, 1);
        a.update(1.0, 2.0);
        assert_eq!((a.alpha_s, a.alpha_t), (2, 1));
        assert_eq!(a.phase(), AlphaPhase::EscalatingSource);
    }

    #[test]
    fn observe_averages_over_the_interval() {
        let mut a = AlphaController::new(3);
        assert!(!a.observe(3.0, 0.0));
        assert!(!a.observe(-1.0, 0.0));
        // mean source 2/3 > mean target 1/2
        assert!(a.observe(0.0, 1.5));
        assert_eq!(a.alpha_t, 2);
        for _ in 0..3 {
            a.observe(0.0, 1.0);
        }
        assert_eq!((a.alpha_s, a.alpha_t), (1, 1));
    }

    proptest! {
        #[test]
        fn alternating_dominance_never_exceeds_two(start in any::<bool>(), steps in 1usize..200) {
            let mut a = AlphaController::new(1);
            let mut src = start;
            for _ in 0..steps {
                if src { a.update(1.0, 0.0) } else { a.update(0.0, 1.0) }
                src = !src;
                prop_assert!(a.alpha_s <= 2 && a.alpha_t <= 2);
                prop_assert!(a.alpha_s == 1 || a.alpha_t == 1);
            }
        }

        #[test]
        fn at_most_one_scale_above_one(seq in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..100)) {
            let mut a = AlphaController::new(1);
            for (s, t) in seq {
                a.update(s, t);
                prop_assert!(a.alpha_s >= 1 && a.alpha_t >= 1);
                prop_assert!(a.alpha_s == 1 || a.alpha_t == 1);
            }
        }
    }

    #[test]
    fn importance_after_tasks() {
        let mut s = ContinualState::new();
        assert_eq!((s.lambda_s, s.lambda_t), (0.0, 1.0));
        s.advance();
        assert_eq!((s.tasks_learned, s.lambda_s, s.lambda_t), (1, 0.5, 0.5));
        s.advance();
        s.advance();
        assert_eq!((s.lambda_s, s.lambda_t), (0.75, 0.25));
    }

    #[test]
    fn momentum_step_arithmetic() {
        let mut opt = Sgd::new(0.9, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, 1.0], 0.1).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -1.0 - 0.1]);
        opt.step(&mut p, &[0.5, 1.0], 0.1).unwrap();
        // v = 0.9·0.5 + 0.5 = 0.95, 0.9·1 + 1 = 1.9
        assert!((p[0] - (0.95 - 0.095)).abs() < 1e-15);
        assert!((p[1] - (-1.1 - 0.19)).abs() < 1e-15);
        assert!(opt.step(&mut p, &[1.0], 0.1).is_err());
    }

    fn run(lr: f64, damping: f64, acc: Option<f64>) -> GridRun<()> {
        GridRun { lr, damping, outcome: acc.map(|a| (a, ())).ok_or_else(|| "diverged".to_string()) }
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_model(&[run(0.1, 1e-4, Some(0.5))]).unwrap(), 0);
        assert_eq!(select_model(&[run(0.1, 1e-4, Some(0.91)), run(0.1, 1e-4, Some(0.93))]).unwrap(), 1);
        assert_eq!(select_model(&[run(0.1, 1e-3, Some(0.9)), run(0.1, 1e-4, Some(0.9))]).unwrap(), 1);
        assert_eq!(select_model(&[run(0.1, 1e-4, Some(0.9)), run(0.01, 1e-4, Some(0.9))]).unwrap(), 1);
        assert_eq!(select_model(&[run(0.1, 1e-4, None), run(0.01, 1e-4, Some(0.2))]).unwrap(), 1);
        assert!(select_model(&[run(0.1, 1e-4, None)]).is_err());
    }
}
