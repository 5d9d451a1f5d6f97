use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgMatches, Command};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xkfac::curvature::FisherKind;
use xkfac::data::{data_dir, load_mnist_train, DATA_DIR_ENV};
use xkfac::driver::{build_network, rebuild_penalty, run_continual, write_metrics_csv, Learner, Method, MetricsRow, Penalty, RunConfig, TaskSequence};
use xkfac::io::{load_network, save_anchors, save_curvature, save_network, AnchorFile};
use xkfac::penalty::Interpretation;
use xkfac::verify;

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn cli() -> Command {
    let mut cmd = Command::new("xkfac")
        .about("Extended K-FAC penalties for continual learning on permuted MNIST")
        .subcommand_required(true)
        .arg(Arg::new("config").long("config").global(true).value_name("FILE").help("Flat key = value configuration file; flags override it"))
        .arg(
            Arg::new("data-dir")
                .long("data-dir")
                .global(true)
                .value_name("DIR")
                .help(format!("Directory holding the MNIST IDX files (default: ${DATA_DIR_ENV}, then ./data)")),
        )
        .arg(Arg::new("metrics").long("metrics").global(true).value_name("CSV").help("Write per-epoch metrics to this CSV file"));
    for key in RunConfig::KEYS {
        cmd = cmd.arg(Arg::new(*key).long(flag_name(key)).global(true).value_name("VALUE").help_heading("Run configuration"));
    }
    cmd.subcommand(
        Command::new("train-first")
            .about("Train on the first task without a penalty and save the network")
            .arg(Arg::new("out").long("out").required(true).value_name("FILE")),
    )
    .subcommand(
        Command::new("estimate")
            .about("Estimate one task's curvature on a saved network; writes curvature and anchor files")
            .arg(Arg::new("network").long("network").required(true).value_name("FILE"))
            .arg(Arg::new("task").long("task").default_value("0").value_parser(clap::value_parser!(usize)))
            .arg(Arg::new("kind").long("kind").default_value("extended").value_parser(["extended", "kfac"]))
            .arg(Arg::new("curvature").long("curvature").required(true).value_name("FILE"))
            .arg(Arg::new("anchors").long("anchors").required(true).value_name("FILE")),
    )
    .subcommand(
        Command::new("continual")
            .about("Learn the task sequence with the merged-weight XK-FAC penalty")
            .arg(Arg::new("kind").long("kind").default_value("extended").value_parser(["extended", "kfac"])),
    )
    .subcommand(
        Command::new("baseline")
            .about("Learn the task sequence with a baseline method")
            .arg(Arg::new("mode").long("mode").required(true).value_parser(["finetune", "separate", "kfac", "const-stats", "eval-stats"])),
    )
    .subcommand(Command::new("verify").about("Run the oracle checks and print a pass/fail table"))
}

fn config(m: &ArgMatches, sub: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::from_file(Path::new(p)).with_context(|| format!("reading {p}"))?,
        None => RunConfig::default(),
    };
    for key in RunConfig::KEYS {
        if let Some(v) = sub.get_one::<String>(key).or_else(|| m.get_one::<String>(key)) {
            cfg.set(key, v).with_context(|| format!("--{}", flag_name(key)))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sequence(m: &ArgMatches, cfg: &RunConfig) -> Result<TaskSequence> {
    let dir = data_dir(m.get_one::<String>("data-dir").map(Path::new));
    let base = load_mnist_train(&dir)?;
    Ok(TaskSequence::permuted(&base, cfg)?)
}

fn write_metrics(m: &ArgMatches, rows: &[MetricsRow]) -> Result<()> {
    if let Some(p) = m.get_one::<String>("metrics") {
        let f = File::create(p).with_context(|| format!("creating {p}"))?;
        write_metrics_csv(rows, BufWriter::new(f))?;
        eprintln!("metrics written to {p}");
    }
    Ok(())
}

fn kind(sub: &ArgMatches) -> FisherKind {
    match sub.get_one::<String>("kind").map(String::as_str) {
        Some("kfac") => FisherKind::Kfac,
        _ => FisherKind::Extended,
    }
}

fn run_sequence(m: &ArgMatches, method: Method, cfg: &RunConfig) -> Result<()> {
    let seq = sequence(m, cfg)?;
    let first = seq.task(0)?;
    let net = build_network(cfg, first.train.features(), first.train.classes)?;
    let mut log = |s: &str| eprintln!("{s}");
    let report = run_continual(method, net, &seq, cfg, &mut log)?;
    write_metrics(m, &report.rows)?;
    for (i, a) in report.final_accs.iter().enumerate() {
        println!("task {i}: {a:.4}");
    }
    println!("{}: average validation accuracy {:.4} over {} tasks", method.name(), report.average, report.final_accs.len());
    Ok(())
}

fn run(m: &ArgMatches) -> Result<bool> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    if name == "verify" {
        let checks = verify::run_all();
        print!("{}", verify::table(&checks));
        return Ok(checks.iter().all(|c| c.passed));
    }
    let cfg = config(m, sub)?;
    match name {
        "train-first" => {
            let seq = sequence(m, &cfg)?;
            let task = seq.task(0)?;
            let net = build_network(&cfg, task.train.features(), task.train.classes)?;
            let mut learner = Learner::new(Method::FineTune, net);
            let r = learner.train_on(&task, &cfg)?;
            println!("task 0: validation accuracy {:.4} at epoch {}", r.outcome.best_val_acc, r.outcome.best_epoch);
            write_metrics(m, &learner.rows)?;
            let out = PathBuf::from(sub.get_one::<String>("out").expect("required"));
            save_network(&learner.net, &out)?;
            println!("network saved to {}", out.display());
        }
        "estimate" => {
            let net = load_network(Path::new(sub.get_one::<String>("network").expect("required")))?;
            let index = *sub.get_one::<usize>("task").expect("default");
            let seq = sequence(m, &cfg)?;
            let task = seq.task(index)?;
            let method = Method::Merged { interpretation: cfg.interpretation, kind: kind(sub) };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
            let Penalty::Merged { state, .. } = rebuild_penalty(method, &Penalty::None, &net, &task.train.images, &cfg, (0.0, 1.0), &mut rng)? else {
                bail!("estimation produced no merged penalty");
            };
            let curv = sub.get_one::<String>("curvature").expect("required");
            let anch = sub.get_one::<String>("anchors").expect("required");
            save_curvature(&state.curvature, Path::new(curv))?;
            save_anchors(&AnchorFile { interpretation: Interpretation::EvalStats, anchors: state.anchors }, Path::new(anch))?;
            println!("curvature saved to {curv}, anchors to {anch}");
        }
        "continual" => {
            let method = Method::Merged { interpretation: cfg.interpretation, kind: kind(sub) };
            run_sequence(m, method, &cfg)?;
        }
        "baseline" => {
            let method = Method::parse_baseline(sub.get_one::<String>("mode").expect("required"), cfg.interpretation)?;
            run_sequence(m, method, &cfg)?;
        }
        other => bail!("unknown subcommand {other}"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let m = cli().get_matches();
    match run(&m) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use xkfac::io::decode_network;

    #[test]
    fn every_configuration_key_is_a_flag() {
        let m = cli().try_get_matches_from(["xkfac", "verify", "--lr", "0.05", "--hidden", "32,16", "--alpha-scaling", "on"]).unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let cfg = config(&m, sub).unwrap();
        assert_eq!(cfg.lr, 0.05);
        assert_eq!(cfg.hidden, vec![32, 16]);
        assert!(cfg.alpha_scaling);
        for key in RunConfig::KEYS {
            assert!(cli().get_arguments().any(|a| a.get_id() == *key), "{key}");
        }
    }

    #[test]
    fn flags_override_the_configuration_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "epochs = 3\nlr = 0.2 # comment\n").unwrap();
        let p = path.to_str().unwrap();
        let m = cli().try_get_matches_from(["xkfac", "--config", p, "continual", "--tasks", "2", "--lr", "0.01"]).unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let cfg = config(&m, sub).unwrap();
        assert_eq!((cfg.epochs, cfg.lr, cfg.tasks), (3, 0.01, 2));
    }

    #[test]
    fn bad_values_are_reported() {
        let m = cli().try_get_matches_from(["xkfac", "verify", "--coupling", "sideways"]).unwrap();
        let (_, sub) = m.subcommand().unwrap();
        assert!(config(&m, sub).is_err());
        assert!(cli().try_get_matches_from(["xkfac", "baseline", "--mode", "nope"]).is_err());
    }

    #[test]
    fn saved_networks_decode() {
        let cfg = RunConfig { hidden: vec![4], ..Default::default() };
        let net = build_network(&cfg, 6, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.bin");
        save_network(&net, &path).unwrap();
        assert_eq!(decode_network(&std::fs::read(&path).unwrap()).unwrap(), net);
    }
}
