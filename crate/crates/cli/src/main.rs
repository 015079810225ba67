use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use mdgnn_core::experiment::{self, ExperimentConfig, SweepAxis};
use mdgnn_core::graph::{self, Relation};
use mdgnn_core::model::Model;
use mdgnn_core::train::{self, CheckpointMeta};
use mdgnn_core::{invariants, synth, Error, Result};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "mdgnn", version, about = "Multi-relational dynamic graph stock ranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config layered over its preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Top-level seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted override such as `model.d_h=16`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Window,
    Layers,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a market and write the dataset files.
    Generate(Common),
    /// Train on the first rolling fold and write a checkpoint.
    Train(Common),
    /// Rolling retrain with out-of-sample scoring.
    Backtest(Common),
    /// Component and relation ablation tables.
    Ablate(Common),
    /// Cumulative return across window sizes or layer counts.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "window")]
        axis: Axis,
    },
    /// Gradient, attention, causality, equivariance and metric self-checks.
    Check(Common),
}

fn resolve(c: &Common) -> Result<ExperimentConfig> {
    let text = match &c.config {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let cfg = ExperimentConfig::resolve(text.as_deref(), &c.sets, c.seed)?;
    info!("config {}", cfg.hash());
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn generate(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let g = synth::generate(&cfg.market())?;
    graph::save(&g, &c.out)?;
    let first = &g.snapshots[0];
    println!(
        "{} days, {} stocks, {} banks, {} industries",
        g.n_days(),
        first.n_stocks(),
        first.n_banks(),
        first.n_industries()
    );
    let days = g.n_days() as f64;
    for r in Relation::ALL {
        let total: usize = g.snapshots.iter().map(|s| s.edge_count(r)).sum();
        println!("{:>2} edges: day 0 {:>6}, mean per day {:>10.1}", r.code(), first.edge_count(r), total as f64 / days);
    }
    for f in [graph::SNAPSHOTS_FILE, graph::PRICES_FILE, graph::BENCHMARK_FILE] {
        println!("sha256 {}  {f}", sha256_hex(&fs::read(c.out.join(f))?));
    }
    Ok(())
}

fn train_first_fold(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let g = experiment::load_dataset(&cfg)?;
    let model = Model::for_graph(&cfg.model, &g)?;
    let data = model.prepare(&g)?;
    let s = &cfg.schedule;
    let schedule = train::rolling_schedule(data.labels.n_days(), s.train_len, s.val_len, s.test_len)?;
    let fold = &schedule.folds[0];
    train::leakage_guard(fold)?;
    let out = train::train(
        &model,
        &data,
        model.init_params(cfg.seed),
        fold.train.clone(),
        fold.val.clone(),
        &cfg.train,
        cfg.seed,
    )?;
    println!(
        "trained {} epochs on days {:?}, best epoch {} with validation IC {}",
        out.curve.len(),
        fold.train,
        out.best_epoch,
        out.best_val_ic.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    let meta = CheckpointMeta {
        config: serde_json::to_value(&cfg)?,
        epoch: out.best_epoch,
        val_ic: out.best_val_ic,
    };
    let (bin, side) = train::save_checkpoint(&c.out.join("model"), &out.params, &meta)?;
    println!("wrote {}\nwrote {}", bin.display(), side.display());
    write(&c.out.join("curve.json"), serde_json::to_string_pretty(&out.curve)?)?;
    let days: Vec<usize> = fold.val.clone().collect();
    write(&c.out.join("fusion.csv"), model.fusion_weights_csv(&out.params, &data, &days)?)
}

fn backtest(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let g = experiment::load_dataset(&cfg)?;
    let run = experiment::run_backtest(&cfg, &g)?;
    let a = &run.report.aggregates;
    let show = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.4}"));
    println!(
        "{} folds, {} scored days: IC {} IR {} CR {:.4} Prec@{} {}",
        run.folds.len(),
        run.report.days.len(),
        show(a.ic),
        show(a.ir),
        a.cr,
        run.report.k,
        show(a.precision)
    );
    write(&c.out.join("report.json"), run.report.to_json()?)?;
    write(&c.out.join("series.csv"), run.report.series_csv())?;
    write(&c.out.join("folds.json"), serde_json::to_string_pretty(&run.folds)?)?;
    if let Some(last) = run.folds.last() {
        let model = Model::for_graph(&cfg.model, &g)?;
        let data = model.prepare(&g)?;
        let days: Vec<usize> = last.fold.test.clone().collect();
        write(&c.out.join("fusion.csv"), model.fusion_weights_csv(&run.params, &data, &days)?)?;
        let meta = CheckpointMeta {
            config: serde_json::to_value(&cfg)?,
            epoch: last.best_epoch,
            val_ic: last.best_val_ic,
        };
        train::save_checkpoint(&c.out.join("model"), &run.params, &meta)?;
    }
    Ok(())
}

fn ablate(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let (components, relations) = experiment::run_ablation(&cfg)?;
    for (stem, table) in [("components", &components), ("relations", &relations)] {
        println!("{}", table.to_markdown());
        write(&c.out.join(format!("{stem}.md")), table.to_markdown())?;
        write(&c.out.join(format!("{stem}.csv")), table.to_csv())?;
        write(&c.out.join(format!("{stem}.json")), serde_json::to_string_pretty(table)?)?;
    }
    Ok(())
}

fn sweep(c: &Common, axis: Axis) -> Result<()> {
    let cfg = resolve(c)?;
    let axis = match axis {
        Axis::Window => SweepAxis::Window,
        Axis::Layers => SweepAxis::Layers,
    };
    let rows = experiment::run_sweep(&cfg, axis)?;
    let csv = experiment::sweep_csv(axis, &rows);
    print!("{csv}");
    write(&c.out.join(format!("sweep_{}.csv", axis.name())), csv)
}

fn check(c: &Common) -> Result<bool> {
    let cfg = resolve(c)?;
    let results = invariants::run_all(cfg.seed)?;
    for r in &results {
        println!("{:<13} {} ({})", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
    }
    Ok(results.iter().all(|r| r.passed))
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Generate(c)
        | Command::Train(c)
        | Command::Backtest(c)
        | Command::Ablate(c)
        | Command::Check(c)
        | Command::Sweep { common: c, .. } => c.clone(),
    };
    init_logging(common.verbose);
    let outcome = match &cli.command {
        Command::Generate(c) => generate(c),
        Command::Train(c) => train_first_fold(c),
        Command::Backtest(c) => backtest(c),
        Command::Ablate(c) => ablate(c),
        Command::Sweep { common, axis } => sweep(common, *axis),
        Command::Check(c) => match check(c) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Error::Numeric("self-checks failed".into())),
            Err(e) => Err(e),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
