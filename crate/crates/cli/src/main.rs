//! `drd`: command-line runner for the denoised-region distillation lab.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use drd::analysis::{
    ablation_runner, default_grids, denoised_region_experiment, hypothesis1_experiment, sweep_runner,
    Ablation, ExperimentSetup, SweepAxis, REGION_TOLERANCE,
};
use drd::checkpoint::{save_mlp, save_teacher};
use drd::config::KvConfig;
use drd::domains::{held_out, save_dataset, BenchmarkScenario, ScenarioConfig};
use drd::region::{fusion_monte_carlo, FusionStudyRecord, NoiseModel, OneHotGap};
use drd::trainer::{student_accuracy, write_metrics_csv, TrainConfig};

/// Environment variable naming the default output root.
const OUT_DIR_ENV: &str = "DRD_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "drd", version, about = "Denoised-region distillation experiments on synthetic domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the source, target and reference domains and write them as CSV.
    GenData(Common),
    /// Train a student on labeled source data and save it as a checkpoint.
    PretrainSource(Common),
    /// Build the vision-language teacher and report its zero-shot accuracy.
    PretrainTeacher(Common),
    /// Run one adaptation and write per-epoch metrics and final checkpoints.
    Train(Common),
    /// Random-start versus source-start convergence study.
    Hypothesis1(Common),
    /// Per-epoch region, teacher and student accuracy with noise divergence.
    RegionStudy(Common),
    /// Monte Carlo accuracy of two noisy oracles and of their sum.
    FusionMc(FusionArgs),
    /// Run the ablation table.
    Ablate(AblateArgs),
    /// Grid of final accuracies over two configuration keys.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Scenario file (key = value lines); defaults apply when absent.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Training configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one scenario or training key, e.g. `--set alpha=1.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory [default: $DRD_OUT_DIR or ./out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds for multi-seed experiments.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Worker threads for multi-run experiments (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct FusionArgs {
    #[arg(long, default_value_t = 1.0)]
    sigma_v: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_i: f64,
    /// Per-class correlation of the two oracles' noise.
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    /// Lead of the true-class logit.
    #[arg(long, default_value_t = 1.0)]
    gap: f64,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory [default: $DRD_OUT_DIR or ./out].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated ablation slugs; all rows when omitted. Full is always added.
    #[arg(long, value_delimiter = ',')]
    toggles: Vec<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// First axis as `key=v1,v2,...`; both default grids run when no axes are given.
    #[arg(long)]
    axis_a: Option<String>,
    /// Second axis as `key=v1,v2,...`.
    #[arg(long)]
    axis_b: Option<String>,
}

/// Effective configuration of a run.
struct Resolved {
    scenario: ScenarioConfig,
    train: TrainConfig,
    out: PathBuf,
    seeds: Vec<u64>,
}

fn out_dir(flag: Option<&PathBuf>) -> PathBuf {
    flag.cloned()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn is_scenario_key(key: &str) -> bool {
    ScenarioConfig::default().entries().iter().any(|(k, _)| *k == key)
}

fn resolve(c: &Common) -> Result<Resolved> {
    let mut scenario = ScenarioConfig::default();
    let mut train = TrainConfig::default();
    if let Some(p) = &c.scenario {
        scenario
            .apply_file(p)
            .with_context(|| format!("reading scenario {}", p.display()))?;
    }
    if let Some(p) = &c.config {
        train
            .apply_file(p)
            .with_context(|| format!("reading config {}", p.display()))?;
    }
    for o in &c.overrides {
        let key = o.split_once('=').map_or(o.as_str(), |(k, _)| k.trim());
        let target: &mut dyn KvConfig = if is_scenario_key(key) { &mut scenario } else { &mut train };
        target
            .apply_overrides(std::slice::from_ref(o))
            .with_context(|| format!("--set {o}"))?;
    }
    train.validate()?;
    if c.seeds.is_empty() {
        bail!("--seeds must name at least one seed");
    }
    Ok(Resolved {
        scenario,
        train,
        out: out_dir(c.out.as_ref()),
        seeds: c.seeds.clone(),
    })
}

fn write_resolved(out: &Path, command: &str, body: &str) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("resolved_config.txt");
    let text = format!("# drd {command}\n{body}");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn resolved_body(r: &Resolved) -> String {
    let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
    format!(
        "# scenario\n{}\n# train\n{}\n# run\nseeds = {}\n",
        r.scenario.to_kv_string(),
        r.train.to_kv_string(),
        seeds.join(",")
    )
}

fn setup(r: &Resolved) -> Result<ExperimentSetup<f64>> {
    let scenario = BenchmarkScenario::from_config(&r.scenario)?;
    let s = ExperimentSetup::new(&scenario)?;
    log::info!(
        "teacher zero-shot target accuracy {:.4} (floor {})",
        s.zero_shot.accuracy,
        s.zero_shot.floor
    );
    Ok(s)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn gen_data(r: &Resolved) -> Result<()> {
    let scenario = BenchmarkScenario::from_config(&r.scenario)?;
    let b = drd::domains::make_benchmark::<f64>(&scenario, scenario.data_seed)?;
    for (name, ds) in [("source", &b.source), ("target", &b.target), ("vil", &b.vil)] {
        let p = r.out.join(format!("{name}.csv"));
        save_dataset(ds, &p)?;
        println!("wrote {} ({} rows)", p.display(), ds.len());
    }
    let p = r.out.join("distances.txt");
    fs::write(&p, b.distance_report(&scenario))?;
    print!("{}", b.distance_report(&scenario));
    Ok(())
}

fn pretrain_source(r: &Resolved) -> Result<()> {
    let s = setup(r)?;
    let model = s.source_model(&r.train)?;
    let scenario = &s.scenario;
    let held = held_out::<f64>(&scenario.source, scenario.data_seed)?;
    let src_acc = student_accuracy(&model, &held)?;
    let tgt_acc = student_accuracy(&model, s.eval_set())?;
    let p = r.out.join("source_model.ckpt");
    save_mlp(&model, &p)?;
    println!("held-out source accuracy {src_acc:.4}");
    println!("target accuracy before adaptation {tgt_acc:.4}");
    println!("wrote {}", p.display());
    Ok(())
}

fn pretrain_teacher(r: &Resolved) -> Result<()> {
    let s = setup(r)?;
    let p = r.out.join("teacher.ckpt");
    save_teacher(&s.teacher, &p)?;
    println!(
        "teacher zero-shot target accuracy {:.4}{}",
        s.zero_shot.accuracy,
        if s.zero_shot.below_floor { " (below floor)" } else { "" }
    );
    println!("wrote {}", p.display());
    Ok(())
}

fn train(r: &Resolved) -> Result<()> {
    let s = setup(r)?;
    let outcome = s.run(&r.train)?;
    let classes = s.classes();
    let metrics = r.out.join("metrics.csv");
    write_metrics_csv(&outcome.records, classes, &metrics)?;
    save_mlp(&outcome.student, &r.out.join("student.ckpt"))?;
    save_teacher(&outcome.teacher, &r.out.join("teacher.ckpt"))?;
    if let Some(last) = outcome.records.last() {
        println!(
            "epoch {}: student {:.4}, teacher {:.4}, region {:.4} (teacher zero-shot {:.4})",
            last.epoch, last.student_acc, last.teacher_acc, last.region_acc, s.zero_shot.accuracy
        );
    }
    println!("wrote {}", metrics.display());
    Ok(())
}

fn hypothesis1(r: &Resolved) -> Result<()> {
    let s = setup(r)?;
    let report = hypothesis1_experiment(&s, &r.train, &r.seeds)?;
    let c = report.check();
    print_paths(&report.emit(&r.out)?);
    println!(
        "final gap {:.4}, final JSD {:.4}, baseline JSD {:.4}, worst count L1 fraction {:.4}: {}",
        c.mean_final_gap,
        c.mean_final_jsd,
        c.mean_baseline_jsd,
        c.max_count_l1_fraction,
        if c.passed { "converged" } else { "not converged" }
    );
    Ok(())
}

fn region_study(r: &Resolved) -> Result<()> {
    let s = setup(r)?;
    let study = denoised_region_experiment(&s, &r.train)?;
    let c = study.check(REGION_TOLERANCE);
    print_paths(&study.emit(&r.out)?);
    println!(
        "min region margin {:.4} at epoch {}, gain/JSD correlation {}: {}",
        c.min_margin,
        c.worst_epoch,
        c.gain_jsd_correlation
            .map_or("undefined".to_string(), |v| format!("{v:.4}")),
        if c.passed { "holds" } else { "does not hold" }
    );
    Ok(())
}

fn fusion_mc(a: &FusionArgs) -> Result<()> {
    let out = out_dir(a.out.as_ref());
    let noise = NoiseModel::new(a.sigma_v, a.sigma_i, a.rho)?;
    if a.classes < 2 {
        bail!("--classes must be >= 2");
    }
    let signal = OneHotGap {
        classes: a.classes,
        gap: a.gap,
    };
    let rec = fusion_monte_carlo(noise, &signal, a.trials, a.seed)?;
    let mut body = String::new();
    for (k, v) in [
        ("sigma_v", a.sigma_v.to_string()),
        ("sigma_i", a.sigma_i.to_string()),
        ("rho", a.rho.to_string()),
        ("gap", a.gap.to_string()),
        ("classes", a.classes.to_string()),
        ("trials", a.trials.to_string()),
        ("seed", a.seed.to_string()),
    ] {
        writeln!(body, "{k} = {v}")?;
    }
    write_resolved(&out, "fusion-mc", &body)?;
    let p = out.join("fusion.csv");
    fs::write(&p, format!("{}\n{}\n", FusionStudyRecord::CSV_HEADER, rec.to_csv_row()))?;
    println!(
        "acc_v {} acc_i {} acc_fused {} gain {}",
        rec.acc_v,
        rec.acc_i,
        rec.acc_fused,
        rec.gain()
    );
    println!("wrote {}", p.display());
    Ok(())
}

fn ablate(a: &AblateArgs, r: &Resolved) -> Result<()> {
    let toggles = if a.toggles.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        a.toggles
            .iter()
            .map(|t| Ablation::parse(t).with_context(|| format!("unknown ablation {t:?}")))
            .collect::<Result<Vec<_>>>()?
    };
    let s = setup(r)?;
    let report = ablation_runner(&s, &r.train, &r.seeds, &toggles)?;
    print_paths(&report.emit(&r.out)?);
    for row in &report.rows {
        println!("{:<22} {:.4} {:+.4}", row.ablation.label(), row.mean_acc, row.delta);
    }
    let c = report.check();
    println!("ordering {}", if c.passed { "holds" } else { "does not hold" });
    Ok(())
}

fn sweep(a: &SweepArgs, r: &Resolved) -> Result<()> {
    let grids = match (&a.axis_a, &a.axis_b) {
        (Some(x), Some(y)) => vec![(SweepAxis::parse(x)?, SweepAxis::parse(y)?)],
        (None, None) => default_grids().to_vec(),
        _ => bail!("--axis-a and --axis-b must be given together"),
    };
    // Reject unknown keys before the setup cost.
    for axis in grids.iter().flat_map(|(x, y)| [x, y]) {
        if let Some(v) = axis.values.first() {
            r.train
                .clone()
                .set(&axis.key, v)
                .with_context(|| format!("sweep axis {}", axis.key))?;
        }
    }
    let s = setup(r)?;
    fs::create_dir_all(&r.out)?;
    for (x, y) in &grids {
        let report = sweep_runner(&s, &r.train, x, y, &r.seeds)?;
        let p = r.out.join(format!("sweep_{}_{}.csv", x.key, y.key));
        fs::write(&p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (name, common) = match &cli.command {
        Command::FusionMc(a) => return fusion_mc(a),
        Command::GenData(c) => ("gen-data", c),
        Command::PretrainSource(c) => ("pretrain-source", c),
        Command::PretrainTeacher(c) => ("pretrain-teacher", c),
        Command::Train(c) => ("train", c),
        Command::Hypothesis1(c) => ("hypothesis1", c),
        Command::RegionStudy(c) => ("region-study", c),
        Command::Ablate(a) => ("ablate", &a.common),
        Command::Sweep(a) => ("sweep", &a.common),
    };
    let r = resolve(common)?;
    write_resolved(&r.out, name, &resolved_body(&r))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs)
        .build()
        .context("building worker pool")?;
    pool.install(|| match &cli.command {
        Command::GenData(_) => gen_data(&r),
        Command::PretrainSource(_) => pretrain_source(&r),
        Command::PretrainTeacher(_) => pretrain_teacher(&r),
        Command::Train(_) => train(&r),
        Command::Hypothesis1(_) => hypothesis1(&r),
        Command::RegionStudy(_) => region_study(&r),
        Command::Ablate(a) => ablate(a, &r),
        Command::Sweep(a) => sweep(a, &r),
        Command::FusionMc(_) => unreachable!(),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors and 0 for --help/--version.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
