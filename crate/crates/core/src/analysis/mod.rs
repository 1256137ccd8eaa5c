//! Experiment runners: dual-start convergence, region gain, ablations and sweeps.
//!
//! Every runner builds its data and teacher from a [`BenchmarkScenario`] through
//! [`ExperimentSetup`], then fans independent runs out over rayon. Results are
//! gathered in configuration order, so reports do not depend on scheduling.

pub mod report;
pub mod svg;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::domains::{make_benchmark, Benchmark, BenchmarkScenario, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{init_mlp, softmax_rows, MlpModel};
use crate::region::jsd;
use crate::scalar::{argmax, Scalar};
use crate::teacher::{pretrain_teacher, zero_shot_check, TeacherModel, ZeroShotCheck};
use crate::trainer::{
    initial_student, pretrain_source_model, run_tsdrd_from, student_accuracy, StartMode,
    TrainConfig, TrainOutcome, TsdrdRun,
};
use crate::{config::KvConfig, trainer::MetricsRecord};

pub use report::{emit_report, ReportRun};
use svg::{LineChart, Series};

/// Accuracy and prediction histogram of a model on a labeled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class_counts: Vec<usize>,
}

pub fn evaluate_logits<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let mut counts = vec![0usize; logits.ncols()];
    let mut hits = 0usize;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let k = argmax(row.iter().copied());
        counts[k] += 1;
        hits += usize::from(k == y);
    }
    Ok(Evaluation {
        accuracy: hits as f64 / labels.len() as f64,
        per_class_counts: counts,
    })
}

/// Evaluates any forward function on `eval`.
pub fn evaluate<T, F>(forward: F, eval: &LabeledDataset<T>) -> Result<Evaluation>
where
    T: Scalar,
    F: FnOnce(ArrayView2<'_, T>) -> Result<Array2<T>>,
{
    if eval.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    let logits = forward(eval.features())?;
    if logits.ncols() != eval.classes() {
        return Err(Error::Shape(format!(
            "{} outputs for {} classes",
            logits.ncols(),
            eval.classes()
        )));
    }
    evaluate_logits(logits.view(), eval.labels())
}

/// Mean base-2 JSD between the row-wise softmax of two logit batches.
pub fn prediction_jsd_logits<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::Input("empty prediction batch".into()));
    }
    let (pa, pb) = (softmax_rows(a), softmax_rows(b));
    let total: f64 = pa
        .rows()
        .into_iter()
        .zip(pb.rows())
        .map(|(x, y)| jsd(x, y).as_f64())
        .sum();
    Ok(total / a.nrows() as f64)
}

pub fn prediction_jsd<T: Scalar>(
    a: &MlpModel<T>,
    b: &MlpModel<T>,
    eval: &LabeledDataset<T>,
) -> Result<f64> {
    let x = eval.features();
    prediction_jsd_logits(a.predict(x)?.view(), b.predict(x)?.view())
}

/// Pearson correlation; `None` when either series is constant or shorter than two.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Data and teacher shared by every run of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSetup<T> {
    pub scenario: BenchmarkScenario,
    pub benchmark: Benchmark<T>,
    pub teacher: TeacherModel<T>,
    pub zero_shot: ZeroShotCheck,
}

impl<T: Scalar> ExperimentSetup<T> {
    /// Samples the benchmark and builds the teacher, both from the scenario's data seed.
    pub fn new(scenario: &BenchmarkScenario) -> Result<Self> {
        let benchmark = make_benchmark(scenario, scenario.data_seed)?;
        let teacher = pretrain_teacher(
            &benchmark.vil,
            scenario.teacher_emb,
            scenario.teacher_tau,
            scenario.data_seed,
        )?;
        let zero_shot = zero_shot_check(&teacher, &benchmark.target, scenario.teacher_floor)?;
        Ok(ExperimentSetup {
            scenario: scenario.clone(),
            benchmark,
            teacher,
            zero_shot,
        })
    }

    /// Target domain with labels, used only for metrics.
    pub fn eval_set(&self) -> &LabeledDataset<T> {
        &self.benchmark.target
    }

    pub fn classes(&self) -> usize {
        self.benchmark.target.classes()
    }

    pub fn layer_sizes(&self, cfg: &TrainConfig) -> Vec<usize> {
        cfg.layer_sizes(self.benchmark.target.dim(), self.classes())
    }

    /// Student pretrained on labeled source data with the run's seed.
    pub fn source_model(&self, cfg: &TrainConfig) -> Result<MlpModel<T>> {
        pretrain_source_model(
            &self.benchmark.source,
            &self.layer_sizes(cfg),
            &cfg.source_config(),
        )
    }

    /// One full adaptation run from `cfg.start_mode`.
    pub fn run(&self, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
        let target = &self.benchmark.target;
        let student = initial_student(cfg, target.dim(), target.classes())?;
        self.run_from(cfg, student)
    }

    pub fn run_from(&self, cfg: &TrainConfig, student: MlpModel<T>) -> Result<TrainOutcome<T>> {
        let target = &self.benchmark.target;
        run_tsdrd_from(cfg, target.unlabeled(), self.teacher.clone(), student, target)
    }
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.clone()
    }
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    Ok(())
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn final_acc(records: &[MetricsRecord]) -> f64 {
    records.last().map_or(f64::NAN, |r| r.student_acc)
}

// ---------------------------------------------------------------------------
// Dual-start convergence

/// Largest mean final accuracy gap between the two starts.
pub const H1_MAX_GAP: f64 = 0.02;
/// Largest mean final prediction JSD between the two students.
pub const H1_MAX_FINAL_JSD: f64 = 0.1;
/// Smallest mean prediction JSD before training.
pub const H1_MIN_BASELINE_JSD: f64 = 0.3;
/// Largest L1 distance between final prediction histograms, as a fraction of the eval set.
pub const H1_MAX_COUNT_L1: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct DualEpoch {
    pub epoch: usize,
    pub acc_source_start: f64,
    pub acc_random_start: f64,
    pub prediction_jsd: f64,
}

/// Random-start and source-start runs sharing a seed and batch schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DualRunReport {
    pub seed: u64,
    /// Epoch 0 is the state before any adaptation.
    pub epochs: Vec<DualEpoch>,
    pub counts_source_start: Vec<usize>,
    pub counts_random_start: Vec<usize>,
    /// `|acc_random − acc_source|` after the last epoch.
    pub final_gap: f64,
    pub random_records: Vec<MetricsRecord>,
    pub source_records: Vec<MetricsRecord>,
}

impl DualRunReport {
    pub fn baseline_jsd(&self) -> f64 {
        self.epochs[0].prediction_jsd
    }

    pub fn final_jsd(&self) -> f64 {
        self.epochs.last().expect("epoch 0 always present").prediction_jsd
    }

    pub fn count_l1(&self) -> usize {
        self.counts_source_start
            .iter()
            .zip(&self.counts_random_start)
            .map(|(a, b)| a.abs_diff(*b))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis1Report {
    pub runs: Vec<DualRunReport>,
    pub eval_size: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis1Check {
    pub mean_final_gap: f64,
    pub mean_final_jsd: f64,
    pub mean_baseline_jsd: f64,
    /// Worst seed's histogram L1 distance as a fraction of the eval set.
    pub max_count_l1_fraction: f64,
    pub passed: bool,
}

impl Hypothesis1Report {
    pub fn check(&self) -> Hypothesis1Check {
        let mean_final_gap = mean(self.runs.iter().map(|r| r.final_gap));
        let mean_final_jsd = mean(self.runs.iter().map(DualRunReport::final_jsd));
        let mean_baseline_jsd = mean(self.runs.iter().map(DualRunReport::baseline_jsd));
        let max_count_l1_fraction = self
            .runs
            .iter()
            .map(|r| r.count_l1() as f64 / self.eval_size as f64)
            .fold(0.0, f64::max);
        Hypothesis1Check {
            passed: mean_final_gap <= H1_MAX_GAP
                && mean_final_jsd < H1_MAX_FINAL_JSD
                && mean_baseline_jsd > H1_MIN_BASELINE_JSD
                && max_count_l1_fraction <= H1_MAX_COUNT_L1,
            mean_final_gap,
            mean_final_jsd,
            mean_baseline_jsd,
            max_count_l1_fraction,
        }
    }

    /// `seed,final_acc_random,final_acc_source,final_gap,baseline_jsd,final_jsd,count_l1`
    pub fn summary_csv(&self) -> String {
        let mut out =
            String::from("seed,final_acc_random,final_acc_source,final_gap,baseline_jsd,final_jsd,count_l1\n");
        for r in &self.runs {
            let last = r.epochs.last().expect("epoch 0 always present");
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.seed,
                last.acc_random_start,
                last.acc_source_start,
                r.final_gap,
                r.baseline_jsd(),
                r.final_jsd(),
                r.count_l1()
            )
            .unwrap();
        }
        out
    }

    pub fn emit(&self, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let mut runs = Vec::new();
        let mut charts = Vec::new();
        for r in &self.runs {
            runs.push(ReportRun {
                seed: r.seed,
                variant: Some("random_start"),
                classes: self.classes,
                records: &r.random_records,
            });
            runs.push(ReportRun {
                seed: r.seed,
                variant: Some("source_start"),
                classes: self.classes,
                records: &r.source_records,
            });
            let pts = |f: fn(&DualEpoch) -> f64| -> Vec<(f64, f64)> {
                r.epochs.iter().map(|e| (e.epoch as f64, f(e))).collect()
            };
            let mut c = LineChart::new(format!("dual start seed{}", r.seed), "epoch", "value")
                .with_y_range(0.0, 1.0);
            c.push(Series::new("acc random start", pts(|e| e.acc_random_start)));
            c.push(Series::new("acc source start", pts(|e| e.acc_source_start)));
            c.push(Series::new("prediction JSD", pts(|e| e.prediction_jsd)));
            charts.push((format!("dual_seed{}", r.seed), c));
        }
        emit_report(out_dir, "hypothesis1", &runs, &self.summary_csv(), &charts)
    }
}

fn dual_run<T: Scalar>(setup: &ExperimentSetup<T>, cfg: &TrainConfig) -> Result<DualRunReport> {
    let eval = setup.eval_set();
    let target = setup.benchmark.target.unlabeled();
    let random = init_mlp(&setup.layer_sizes(cfg), cfg.derived_seeds().0)?;
    let source = setup.source_model(cfg)?;
    // Same config and seed: both runs draw the identical batch schedule.
    let mut a = TsdrdRun::new(cfg.clone(), target, setup.teacher.clone(), random, eval)?;
    let mut b = TsdrdRun::new(cfg.clone(), target, setup.teacher.clone(), source, eval)?;

    let mut epochs = vec![DualEpoch {
        epoch: 0,
        acc_random_start: student_accuracy(a.student(), eval)?,
        acc_source_start: student_accuracy(b.student(), eval)?,
        prediction_jsd: prediction_jsd(a.student(), b.student(), eval)?,
    }];
    while !a.is_done() {
        let acc_random_start = a.step_epoch()?.student_acc;
        let acc_source_start = b.step_epoch()?.student_acc;
        let j = prediction_jsd(a.student(), b.student(), eval)?;
        for run in [&mut a, &mut b] {
            if let Some(r) = run.records_mut().last_mut() {
                r.prediction_jsd = Some(j);
            }
        }
        epochs.push(DualEpoch {
            epoch: a.epoch(),
            acc_source_start,
            acc_random_start,
            prediction_jsd: j,
        });
    }
    let last = epochs.last().expect("epoch 0 always present");
    let final_gap = (last.acc_random_start - last.acc_source_start).abs();
    let counts = |m: &MlpModel<T>| -> Result<Vec<usize>> {
        Ok(evaluate(|x| m.predict(x), eval)?.per_class_counts)
    };
    Ok(DualRunReport {
        seed: cfg.seed,
        counts_source_start: counts(b.student())?,
        counts_random_start: counts(a.student())?,
        final_gap,
        epochs,
        random_records: a.finish().records,
        source_records: b.finish().records,
    })
}

/// Runs random-start and source-start adaptation side by side for each seed.
pub fn hypothesis1_experiment<T: Scalar>(
    setup: &ExperimentSetup<T>,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Hypothesis1Report> {
    check_seeds(seeds)?;
    cfg.validate()?;
    let runs = seeds
        .par_iter()
        .map(|&s| dual_run(setup, &with_seed(cfg, s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Hypothesis1Report {
        runs,
        eval_size: setup.eval_set().len(),
        classes: setup.classes(),
    })
}

// ---------------------------------------------------------------------------
// Region gain

/// Allowed shortfall of the region below the better model, as a fraction.
pub const REGION_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionStudy {
    pub seed: u64,
    pub warm_up_epochs: usize,
    pub classes: usize,
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionCheck {
    /// Smallest `region − max(student, teacher)` over post-warm-up epochs.
    pub min_margin: f64,
    pub worst_epoch: usize,
    /// Pearson correlation of region gain and noise JSD over post-warm-up epochs.
    pub gain_jsd_correlation: Option<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

impl RegionStudy {
    pub fn post_warm_up(&self) -> &[MetricsRecord] {
        let start = self.warm_up_epochs.min(self.records.len());
        &self.records[start..]
    }

    pub fn check(&self, tolerance: f64) -> RegionCheck {
        let post = self.post_warm_up();
        let (worst_epoch, min_margin) = post
            .iter()
            .map(|r| (r.epoch, r.region_gain()))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        let gains: Vec<f64> = post.iter().map(MetricsRecord::region_gain).collect();
        let jsds: Vec<f64> = post.iter().map(|r| r.noise_jsd).collect();
        let gain_jsd_correlation = pearson(&gains, &jsds);
        RegionCheck {
            passed: !post.is_empty()
                && min_margin >= -tolerance
                && gain_jsd_correlation.is_some_and(|c| c > 0.0),
            min_margin,
            worst_epoch,
            gain_jsd_correlation,
            tolerance,
        }
    }

    /// `epoch,teacher_acc,student_acc,region_acc,region_gain,noise_jsd`
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("epoch,teacher_acc,student_acc,region_acc,region_gain,noise_jsd\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.teacher_acc,
                r.student_acc,
                r.region_acc,
                r.region_gain(),
                r.noise_jsd
            )
            .unwrap();
        }
        out
    }

    pub fn emit(&self, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let post = self.post_warm_up();
        let mut c = LineChart::new("region gain vs noise JSD", "epoch", "value");
        c.push(Series::new(
            "region gain",
            post.iter().map(|r| (r.epoch as f64, r.region_gain())).collect(),
        ));
        c.push(Series::new(
            "noise JSD",
            post.iter().map(|r| (r.epoch as f64, r.noise_jsd)).collect(),
        ));
        let run = ReportRun {
            seed: self.seed,
            variant: None,
            classes: self.classes,
            records: &self.records,
        };
        emit_report(
            out_dir,
            "region_study",
            &[run],
            &self.summary_csv(),
            &[("gain_vs_jsd".to_string(), c)],
        )
    }
}

/// One adaptation run with per-epoch teacher, student and region accuracy.
pub fn denoised_region_experiment<T: Scalar>(
    setup: &ExperimentSetup<T>,
    cfg: &TrainConfig,
) -> Result<RegionStudy> {
    let out = setup.run(cfg)?;
    Ok(RegionStudy {
        seed: cfg.seed,
        warm_up_epochs: cfg.warm_up_epochs,
        classes: setup.classes(),
        records: out.records,
    })
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    WithoutPseudoLabel,
    WithoutMutualInfo,
    WithoutEntropy,
    WithoutRegion,
    WithoutPromptTuning,
    WithoutWarmUp,
    UsingSourceModels,
    Full,
}

impl Ablation {
    /// All table rows, `Full` last.
    pub const ALL: [Ablation; 8] = [
        Ablation::WithoutPseudoLabel,
        Ablation::WithoutMutualInfo,
        Ablation::WithoutEntropy,
        Ablation::WithoutRegion,
        Ablation::WithoutPromptTuning,
        Ablation::WithoutWarmUp,
        Ablation::UsingSourceModels,
        Ablation::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::WithoutPseudoLabel => "w/o L_pl",
            Ablation::WithoutMutualInfo => "w/o L_mu",
            Ablation::WithoutEntropy => "w/o L_en",
            Ablation::WithoutRegion => "w/o Denoised-Region",
            Ablation::WithoutPromptTuning => "w/o prompt tuning",
            Ablation::WithoutWarmUp => "w/o warm-up",
            Ablation::UsingSourceModels => "using source models",
            Ablation::Full => "Full",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Ablation::WithoutPseudoLabel => "wo_l_pl",
            Ablation::WithoutMutualInfo => "wo_l_mu",
            Ablation::WithoutEntropy => "wo_l_en",
            Ablation::WithoutRegion => "wo_region",
            Ablation::WithoutPromptTuning => "wo_prompt_tuning",
            Ablation::WithoutWarmUp => "wo_warm_up",
            Ablation::UsingSourceModels => "source_models",
            Ablation::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Ablation> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.slug() == s || a.label() == s)
    }

    /// The run configuration for this row.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Ablation::WithoutPseudoLabel => cfg.use_l_pl = false,
            Ablation::WithoutMutualInfo => cfg.use_l_mu = false,
            Ablation::WithoutEntropy => cfg.use_l_en = false,
            Ablation::WithoutRegion => cfg.region_fusion = false,
            Ablation::WithoutPromptTuning => cfg.prompt_tuning = false,
            Ablation::WithoutWarmUp => cfg.warm_up_epochs = 0,
            Ablation::UsingSourceModels | Ablation::Full => {}
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub per_seed: Vec<(u64, f64)>,
    pub mean_acc: f64,
    /// `mean_acc − Full mean_acc`.
    pub delta: f64,
    pub records: Vec<Vec<MetricsRecord>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCheck {
    /// Near-chance bound `2/C + 0.05` for the pseudo-label removal.
    pub chance_bound: f64,
    pub without_pl_collapses: Option<bool>,
    /// Rows that must fall strictly below Full, with the outcome.
    pub underperforming: Vec<(Ablation, bool)>,
    pub source_within_one_point: Option<bool>,
    pub passed: bool,
}

impl AblationReport {
    pub fn row(&self, a: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == a)
    }

    pub fn check(&self) -> AblationCheck {
        let full = self.row(Ablation::Full).map_or(f64::NAN, |r| r.mean_acc);
        let chance_bound = 2.0 / self.classes as f64 + 0.05;
        let without_pl_collapses = self
            .row(Ablation::WithoutPseudoLabel)
            .map(|r| r.mean_acc < chance_bound);
        let underperforming: Vec<(Ablation, bool)> = [
            Ablation::WithoutMutualInfo,
            Ablation::WithoutEntropy,
            Ablation::WithoutRegion,
            Ablation::WithoutPromptTuning,
            Ablation::WithoutWarmUp,
        ]
        .into_iter()
        .filter_map(|a| self.row(a).map(|r| (a, r.mean_acc < full)))
        .collect();
        let source_within_one_point = self
            .row(Ablation::UsingSourceModels)
            .map(|r| r.delta.abs() <= 0.01);
        AblationCheck {
            passed: without_pl_collapses != Some(false)
                && underperforming.iter().all(|(_, ok)| *ok)
                && source_within_one_point != Some(false),
            chance_bound,
            without_pl_collapses,
            underperforming,
            source_within_one_point,
        }
    }

    /// `label,mean_acc,delta,acc_seed_<s>...`
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("label,mean_acc,delta");
        if let Some(first) = self.rows.first() {
            for (s, _) in &first.per_seed {
                write!(out, ",acc_seed_{s}").unwrap();
            }
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{},{}", r.ablation.label(), r.mean_acc, r.delta).unwrap();
            for (_, a) in &r.per_seed {
                write!(out, ",{a}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn emit(&self, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let mut runs = Vec::new();
        for row in &self.rows {
            for ((seed, _), records) in row.per_seed.iter().zip(&row.records) {
                runs.push(ReportRun {
                    seed: *seed,
                    variant: Some(row.ablation.slug()),
                    classes: self.classes,
                    records,
                });
            }
        }
        emit_report(out_dir, "ablation", &runs, &self.summary_csv(), &[])
    }
}

/// Runs each listed ablation (plus Full) for every seed.
pub fn ablation_runner<T: Scalar>(
    setup: &ExperimentSetup<T>,
    base: &TrainConfig,
    seeds: &[u64],
    toggles: &[Ablation],
) -> Result<AblationReport> {
    check_seeds(seeds)?;
    base.validate()?;
    let mut rows: Vec<Ablation> = toggles
        .iter()
        .copied()
        .filter(|&a| a != Ablation::Full)
        .collect();
    rows.dedup();
    rows.push(Ablation::Full);

    let jobs: Vec<(Ablation, u64)> = rows
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(a, s)| {
            let cfg = with_seed(&a.apply(base), s);
            let out = if a == Ablation::UsingSourceModels {
                setup.run_from(&cfg, setup.source_model(&cfg)?)?
            } else {
                setup.run(&cfg)?
            };
            Ok(out.records)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report_rows: Vec<AblationRow> = rows
        .iter()
        .zip(results.chunks(seeds.len()))
        .map(|(&ablation, chunk)| {
            let per_seed: Vec<(u64, f64)> = seeds
                .iter()
                .zip(chunk)
                .map(|(&s, rec)| (s, final_acc(rec)))
                .collect();
            AblationRow {
                ablation,
                mean_acc: mean(per_seed.iter().map(|p| p.1)),
                per_seed,
                delta: 0.0,
                records: chunk.to_vec(),
            }
        })
        .collect();
    let full = report_rows.last().expect("Full row always present").mean_acc;
    for r in &mut report_rows {
        r.delta = r.mean_acc - full;
    }
    Ok(AblationReport {
        rows: report_rows,
        classes: setup.classes(),
    })
}

// ---------------------------------------------------------------------------
// Sweeps

/// One swept configuration key and its values, as config text.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl SweepAxis {
    pub fn new(key: &str, values: &[&str]) -> Self {
        SweepAxis {
            key: key.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }

    /// Parses `key=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (k, vs) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep axis {spec:?} is not key=v1,v2,...")))?;
        let values: Vec<String> = vs
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(String::from)
            .collect();
        if values.is_empty() {
            return Err(Error::Config(format!("sweep axis {k:?} has no values")));
        }
        Ok(SweepAxis {
            key: k.trim().to_string(),
            values,
        })
    }
}

/// The two default grids: `{alpha, gamma}` and `{beta, warm_up_epochs}`.
pub fn default_grids() -> [(SweepAxis, SweepAxis); 2] {
    [
        (
            SweepAxis::new("alpha", &["0.5", "1.0", "1.3", "2.0", "3.0"]),
            SweepAxis::new("gamma", &["0.1", "0.5", "1.0", "2.0"]),
        ),
        (
            SweepAxis::new("beta", &["0.1", "0.2", "0.4", "0.7", "1.0"]),
            SweepAxis::new("warm_up_epochs", &["1", "2", "4", "10", "20"]),
        ),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub a: String,
    pub b: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub axis_a: String,
    pub axis_b: String,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn cell(&self, a: &str, b: &str) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.a == a && c.b == b)
    }

    /// `<key_a>,<key_b>,mean_student_acc,acc_seed_<s>...`
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{},mean_student_acc", self.axis_a, self.axis_b);
        if let Some(first) = self.cells.first() {
            for (s, _) in &first.per_seed {
                write!(out, ",acc_seed_{s}").unwrap();
            }
        }
        out.push('\n');
        for c in &self.cells {
            write!(out, "{},{},{}", c.a, c.b, c.mean_acc).unwrap();
            for (_, a) in &c.per_seed {
                write!(out, ",{a}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Final student accuracy over the grid `a × b`, averaged over seeds.
pub fn sweep_runner<T: Scalar>(
    setup: &ExperimentSetup<T>,
    base: &TrainConfig,
    a: &SweepAxis,
    b: &SweepAxis,
    seeds: &[u64],
) -> Result<SweepReport> {
    check_seeds(seeds)?;
    let mut configs = Vec::new();
    for va in &a.values {
        for vb in &b.values {
            let mut cfg = base.clone();
            cfg.set(&a.key, va)?;
            cfg.set(&b.key, vb)?;
            cfg.validate()?;
            configs.push((va.clone(), vb.clone(), cfg));
        }
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let accs = jobs
        .par_iter()
        .map(|&(i, s)| Ok(final_acc(&setup.run(&with_seed(&configs[i].2, s))?.records)))
        .collect::<Result<Vec<f64>>>()?;
    let cells = configs
        .into_iter()
        .zip(accs.chunks(seeds.len()))
        .map(|((va, vb, _), chunk)| {
            let per_seed: Vec<(u64, f64)> = seeds.iter().copied().zip(chunk.iter().copied()).collect();
            SweepCell {
                a: va,
                b: vb,
                mean_acc: mean(chunk.iter().copied()),
                per_seed,
            }
        })
        .collect();
    Ok(SweepReport {
        axis_a: a.key.clone(),
        axis_b: b.key.clone(),
        cells,
    })
}

/// Mean final accuracy at `β = 0.1` and `β = 0.4`, other settings from `base`.
pub fn beta_sensitivity<T: Scalar>(
    setup: &ExperimentSetup<T>,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<(f64, f64)> {
    let report = sweep_runner(
        setup,
        base,
        &SweepAxis::new("beta", &["0.1", "0.4"]),
        &SweepAxis {
            key: "warm_up_epochs".into(),
            values: vec![base.warm_up_epochs.to_string()],
        },
        seeds,
    )?;
    Ok((report.cells[0].mean_acc, report.cells[1].mean_acc))
}

/// Start mode of a student, for reports.
pub fn start_label(mode: &StartMode) -> &'static str {
    match mode {
        StartMode::Random => "random",
        StartMode::SourceCheckpoint(_) => "source",
    }
}
