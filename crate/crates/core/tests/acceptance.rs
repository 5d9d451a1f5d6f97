//! Acceptance suite: one PASS/FAIL line per criterion. Pass criterion
//! numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 2 10`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use xkfac::curvature::FisherKind;
use xkfac::data::{data_dir, load_mnist_train, DATA_DIR_ENV};
use xkfac::driver::{build_network, compare_methods, Method, RunConfig, TaskSequence};
use xkfac::penalty::Interpretation;
use xkfac::verify::{self, Check};

fn mnist_dir() -> PathBuf {
    if std::env::var_os(DATA_DIR_ENV).is_some() {
        data_dir(None)
    } else {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
    }
}

/// Permuted MNIST, five tasks: BRN-interpreted XK-FAC against fine-tuning,
/// the separate penalty and the BN-interpreted variant.
fn permuted_mnist() -> Check {
    const NAME: &str = "permuted MNIST orderings";
    let fail = |detail: String| Check { name: NAME, passed: false, measured: f64::NAN, tolerance: f64::NAN, detail };
    let base = match load_mnist_train(&mnist_dir()) {
        Ok(b) => b,
        Err(e) => return fail(format!("error: {e}")),
    };
    let cfg = RunConfig::default();
    let run = || -> xkfac::Result<Vec<f64>> {
        let seq = TaskSequence::permuted(&base, &cfg)?;
        let net = build_network(&cfg, base.features(), base.classes)?;
        let methods = [
            Method::FineTune,
            Method::Separate,
            Method::Merged { interpretation: Interpretation::Brn, kind: FisherKind::Extended },
            Method::Merged { interpretation: Interpretation::Bn, kind: FisherKind::Extended },
        ];
        let mut log = |m: &str| eprintln!("  {m}");
        let reports = compare_methods(&methods, net, &seq, &cfg, &mut log)?;
        for r in &reports {
            let accs: Vec<String> = r.final_accs.iter().map(|a| format!("{a:.4}")).collect();
            eprintln!("  {}: average {:.4} over [{}]", r.method.name(), r.average, accs.join(", "));
        }
        Ok(reports.iter().map(|r| r.average).collect())
    };
    match run() {
        Ok(avg) => {
            let (ft, sep, brn, bn) = (avg[0], avg[1], avg[2], avg[3]);
            let a = brn - ft >= 0.10;
            let b = brn > sep;
            let c = brn >= bn - 0.02;
            Check {
                name: NAME,
                passed: a && b && c,
                measured: brn,
                tolerance: f64::NAN,
                detail: format!(
                    "average acc: brn {brn:.4}, bn {bn:.4}, separate {sep:.4}, finetune {ft:.4}; (a) +10 pts over finetune: {a}, (b) above separate: {b}, (c) within 2 pts of bn: {c}"
                ),
            }
        }
        Err(e) => fail(format!("error: {e}")),
    }
}

fn criterion(k: usize) -> Check {
    match k {
        1 => verify::merged_equivalence(100),
        2 => verify::theorem1(5),
        3 => verify::group_identity(),
        4 => verify::psd_chain(20),
        5 => verify::kfac_reduction(),
        6 => verify::penalty_engine(),
        7 => verify::preprocessing(),
        8 => verify::importance(),
        9 => permuted_mnist(),
        10 => {
            let traces = verify::alpha_traces();
            let objective = verify::alpha_objective();
            Check {
                name: "adaptive α",
                passed: traces.passed && objective.passed,
                measured: traces.measured.max(objective.measured),
                tolerance: 0.0,
                detail: format!("{}; {}", traces.detail, objective.detail),
            }
        }
        _ => unreachable!(),
    }
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).filter(|k| (1..=10).contains(k)).collect();
    let selected = if selected.is_empty() { (1..=10).collect() } else { selected };
    let mut failed = 0;
    for k in selected {
        let start = Instant::now();
        let c = criterion(k);
        let secs = start.elapsed().as_secs_f64();
        let bound = if c.tolerance.is_finite() && c.tolerance != 0.0 { format!(" [worst {:.3e}, bound {:.0e}]", c.measured, c.tolerance) } else { String::new() };
        println!("{} criterion {k:>2} {}: {}{bound} ({secs:.1}s)", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
