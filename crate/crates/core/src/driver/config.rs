//! Run configuration, read from flat `key = value` text.

use std::path::Path;

use crate::curvature::Coupling;
use crate::error::{invalid, Result};
use crate::net::NormMode;
use crate::penalty::Interpretation;

/// How curvature from successive tasks is combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fold {
    /// Keep one weighted term per task.
    Terms,
    /// Weighted average of factor matrices into a single term.
    Ema,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub lr: f64,
    /// Multiplier applied every `lr_step_epochs`.
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement; 0 runs
    /// every epoch. The best epoch is restored either way.
    pub patience: usize,
    pub damping: f64,
    pub coupling: Coupling,
    pub interpretation: Interpretation,
    pub fold: Fold,
    pub alpha_scaling: bool,
    pub alpha_interval: usize,
    /// Mini-batches for curvature estimation; 0 means one epoch.
    pub fisher_batches: usize,
    pub label_draws: usize,
    /// Fraction of one task's steps over which `r_max, d_max` ramp up.
    pub relax_fraction: f64,
    pub r_max: f64,
    pub d_max: f64,
    pub bn_momentum: f64,
    pub eps: f64,
    pub tasks: usize,
    pub train_examples: usize,
    pub val_fraction: f64,
    pub hidden: Vec<usize>,
    pub norm: NormMode,
    /// Grid searched per task; empty means `[lr]` / `[damping]`.
    pub lr_grid: Vec<f64>,
    pub damping_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            lr_decay: 0.1,
            lr_step_epochs: 5,
            momentum: 0.9,
            batch_size: 128,
            epochs: 15,
            patience: 0,
            damping: 1e-4,
            coupling: Coupling::Diagonal,
            interpretation: Interpretation::Brn,
            fold: Fold::Terms,
            alpha_scaling: false,
            alpha_interval: 10,
            fisher_batches: 0,
            label_draws: 1,
            relax_fraction: 0.25,
            r_max: 3.0,
            d_max: 5.0,
            bn_momentum: 0.1,
            eps: 1e-5,
            tasks: 5,
            train_examples: 10_000,
            val_fraction: 0.1,
            hidden: vec![128, 128],
            norm: NormMode::Bn,
            lr_grid: Vec::new(),
            damping_grid: Vec::new(),
            seed: 0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid!("bad value {v:?} for {key}"))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(invalid!("bad boolean {v:?} for {key}")),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lr",
        "lr_decay",
        "lr_step_epochs",
        "momentum",
        "batch_size",
        "epochs",
        "patience",
        "damping",
        "coupling",
        "interpretation",
        "fold",
        "alpha_scaling",
        "alpha_interval",
        "fisher_batches",
        "label_draws",
        "relax_fraction",
        "r_max",
        "d_max",
        "bn_momentum",
        "eps",
        "tasks",
        "train_examples",
        "val_fraction",
        "hidden",
        "norm",
        "lr_grid",
        "damping_grid",
        "seed",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key.trim() {
            "lr" => self.lr = num(key, v)?,
            "lr_decay" => self.lr_decay = num(key, v)?,
            "lr_step_epochs" => self.lr_step_epochs = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "damping" => self.damping = num(key, v)?,
            "coupling" => {
                self.coupling = match v {
                    "diagonal" => Coupling::Diagonal,
                    "full" => Coupling::Full,
                    _ => return Err(invalid!("coupling must be diagonal or full, got {v:?}")),
                }
            }
            "interpretation" => self.interpretation = Interpretation::parse(v)?,
            "fold" => {
                self.fold = match v {
                    "terms" | "none" => Fold::Terms,
                    "ema" => Fold::Ema,
                    _ => return Err(invalid!("fold must be terms or ema, got {v:?}")),
                }
            }
            "alpha_scaling" => self.alpha_scaling = flag(key, v)?,
            "alpha_interval" => self.alpha_interval = num(key, v)?,
            "fisher_batches" => self.fisher_batches = num(key, v)?,
            "label_draws" => self.label_draws = num(key, v)?,
            "relax_fraction" => self.relax_fraction = num(key, v)?,
            "r_max" => self.r_max = num(key, v)?,
            "d_max" => self.d_max = num(key, v)?,
            "bn_momentum" => self.bn_momentum = num(key, v)?,
            "eps" => self.eps = num(key, v)?,
            "tasks" => self.tasks = num(key, v)?,
            "train_examples" => self.train_examples = num(key, v)?,
            "val_fraction" => self.val_fraction = num(key, v)?,
            "hidden" => self.hidden = list(key, v)?,
            "norm" => {
                self.norm = match v {
                    "bn" => NormMode::Bn,
                    "brn" => NormMode::Brn,
                    _ => return Err(invalid!("norm must be bn or brn, got {v:?}")),
                }
            }
            "lr_grid" => self.lr_grid = list(key, v)?,
            "damping_grid" => self.damping_grid = list(key, v)?,
            "seed" => self.seed = num(key, v)?,
            other => return Err(invalid!("unknown configuration key {other:?}")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| invalid!("line {}: expected key = value", no + 1))?;
            self.set(k, v).map_err(|e| invalid!("line {}: {e}", no + 1))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr, self.lr_decay, self.momentum, self.damping, self.bn_momentum, self.relax_fraction];
        if rates.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.lr_grid.iter().chain(&self.damping_grid).any(|v| !(*v >= 0.0)) {
            return Err(invalid!("rates and damping must be finite and non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_step_epochs == 0 || self.alpha_interval == 0 || self.label_draws == 0 {
            return Err(invalid!("epochs, batch size, lr step, alpha interval and label draws must be at least 1"));
        }
        if self.momentum >= 1.0 || self.bn_momentum > 1.0 {
            return Err(invalid!("momentum must be below 1"));
        }
        if !(self.eps > 0.0) || self.r_max < 1.0 || self.d_max < 0.0 {
            return Err(invalid!("need eps > 0, r_max ≥ 1, d_max ≥ 0"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) || self.tasks == 0 || self.train_examples == 0 {
            return Err(invalid!("need 0 < val_fraction < 1 and at least one task and example"));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, lr: f64, epoch: usize) -> f64 {
        lr * self.lr_decay.powi((epoch / self.lr_step_epochs) as i32)
    }

    /// The `(lr, damping)` pairs searched per task.
    pub fn grid(&self) -> Vec<(f64, f64)> {
        let lrs = if self.lr_grid.is_empty() { vec![self.lr] } else { self.lr_grid.clone() };
        let dms = if self.damping_grid.is_empty() { vec![self.damping] } else { self.damping_grid.clone() };
        lrs.iter().flat_map(|&l| dms.iter().map(move |&d| (l, d))).collect()
    }

    /// `key = value` text that reads back to this configuration.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let coupling = match self.coupling {
            Coupling::Diagonal => "diagonal",
            Coupling::Full => "full",
        };
        let fold = match self.fold {
            Fold::Terms => "terms",
            Fold::Ema => "ema",
        };
        let norm = match self.norm {
            NormMode::Bn => "bn",
            NormMode::Brn => "brn",
        };
        let hidden = self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
        let pairs: Vec<(&str, String)> = vec![
            ("lr", self.lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_step_epochs", self.lr_step_epochs.to_string()),
            ("momentum", self.momentum.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("damping", self.damping.to_string()),
            ("coupling", coupling.into()),
            ("interpretation", self.interpretation.name().into()),
            ("fold", fold.into()),
            ("alpha_scaling", self.alpha_scaling.to_string()),
            ("alpha_interval", self.alpha_interval.to_string()),
            ("fisher_batches", self.fisher_batches.to_string()),
            ("label_draws", self.label_draws.to_string()),
            ("relax_fraction", self.relax_fraction.to_string()),
            ("r_max", self.r_max.to_string()),
            ("d_max", self.d_max.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("eps", self.eps.to_string()),
            ("tasks", self.tasks.to_string()),
            ("train_examples", self.train_examples.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("hidden", hidden),
            ("norm", norm.into()),
            ("lr_grid", join(&self.lr_grid)),
            ("damping_grid", join(&self.damping_grid)),
            ("seed", self.seed.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_mnist_schedule() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.lr_at(c.lr, 0), 0.1);
        assert!((c.lr_at(c.lr, 5) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(c.lr, 14) - 0.001).abs() < 1e-15);
        assert_eq!(c.grid(), vec![(0.1, 1e-4)]);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nlr = 0.05\nhidden = 16, 8\ncoupling=full\nalpha_scaling = on\nlr_grid = 0.1,0.01\n").unwrap();
        assert_eq!(c.lr, 0.05);
        assert_eq!(c.hidden, vec![16, 8]);
        assert_eq!(c.coupling, Coupling::Full);
        assert!(c.alpha_scaling);
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert_eq!(RunConfig::KEYS.len(), c.to_text().lines().count());
    }

    #[test]
    fn bad_input_is_reported() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("lr 0.1").is_err());
        assert!(c.apply_text("nope = 1").is_err());
        assert!(c.apply_text("epochs = -1").is_err());
        c.epochs = 0;
        assert!(c.validate().is_err());
        let c = RunConfig { damping: -1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
