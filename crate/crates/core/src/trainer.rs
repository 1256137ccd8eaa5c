//! Two-stage denoised-region distillation of a student under teacher guidance.
//!
//! Each epoch runs `M` iterations. Every iteration draws a batch of target
//! features, computes teacher and student logits once, tunes the teacher's
//! prompts on `−I(q_v, q_i)` and then updates the student on the composite loss
//! against the denoised region. Both updates read the same pre-update logits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::load_mlp_expecting;
use crate::config::{parse_bool, parse_list, parse_value, render_list, unknown_key, KvConfig};
use crate::domains::{split_seed, LabeledDataset, UnlabeledView};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, student_loss, teacher_loss, LossBreakdown};
use crate::nn::{init_mlp, softmax_rows, MlpModel};
use crate::region::{build_region_with, jsd, noise_distribution};
use crate::scalar::{argmax, Scalar};
use crate::teacher::TeacherModel;

#[derive(Debug, Clone, PartialEq)]
pub enum StartMode {
    /// Fresh Kaiming/Xavier initialization from the run seed.
    Random,
    /// Student loaded from a source-trained checkpoint.
    SourceCheckpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub warm_up_epochs: usize,
    /// `None` means one pass over the target set: `ceil(n / batch_size)`.
    pub iterations_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr_student: f64,
    pub lr_teacher: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Hidden widths of the student; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub start_mode: StartMode,
    pub prompt_tuning: bool,
    pub region_fusion: bool,
    pub use_l_mu: bool,
    pub use_l_en: bool,
    pub use_l_pl: bool,
    pub defer_prompts_past_warmup: bool,
    pub region_mean_center: bool,
    /// Epochs of supervised source pretraining when a source model is needed.
    pub source_epochs: usize,
    pub source_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 20,
            warm_up_epochs: 4,
            iterations_per_epoch: None,
            batch_size: 64,
            alpha: 1.3,
            beta: 0.4,
            gamma: 1.0,
            lr_student: 1e-3,
            lr_teacher: 1e-4,
            momentum: 0.9,
            seed: 1,
            hidden: vec![64, 64],
            start_mode: StartMode::Random,
            prompt_tuning: true,
            region_fusion: true,
            use_l_mu: true,
            use_l_en: true,
            use_l_pl: true,
            defer_prompts_past_warmup: false,
            region_mean_center: false,
            source_epochs: 20,
            source_lr: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warm_up_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warm_up_epochs {} exceeds total_epochs {}",
                self.warm_up_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(Error::Config("iterations_per_epoch must be >= 1".into()));
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {w}")));
            }
        }
        for (name, lr) in [("lr_student", self.lr_student), ("lr_teacher", self.lr_teacher)] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.source_lr > 0.0) {
            return Err(Error::Config(format!("source_lr must be > 0, got {}", self.source_lr)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_sizes(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(&self.hidden);
        sizes.push(classes);
        sizes
    }

    pub fn iterations(&self, n: usize) -> usize {
        self.iterations_per_epoch
            .unwrap_or_else(|| n.div_ceil(self.batch_size))
    }

    /// Effective `(α, β, γ)` after the loss switches.
    pub fn loss_weights(&self) -> (f64, f64, f64) {
        (
            if self.use_l_mu { self.alpha } else { 0.0 },
            if self.use_l_pl { self.beta } else { 0.0 },
            if self.use_l_en { self.gamma } else { 0.0 },
        )
    }

    /// Source pretraining settings tied to this run's seed, batch size and momentum.
    pub fn source_config(&self) -> SourceTrainConfig {
        SourceTrainConfig {
            epochs: self.source_epochs,
            lr: self.source_lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    /// `(student init seed, batch shuffle seed)`.
    pub fn derived_seeds(&self) -> (u64, u64) {
        let s = split_seed(self.seed, 2);
        (s[0], s[1])
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "total_epochs" => self.total_epochs = parse_value(key, value)?,
            "warm_up_epochs" => self.warm_up_epochs = parse_value(key, value)?,
            "iterations_per_epoch" => {
                let m: usize = parse_value(key, value)?;
                self.iterations_per_epoch = (m > 0).then_some(m);
            }
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "lr_student" => self.lr_student = parse_value(key, value)?,
            "lr_teacher" => self.lr_teacher = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "start_mode" => {
                self.start_mode = match value {
                    "random" => StartMode::Random,
                    v => match v.strip_prefix("source:") {
                        Some(p) if !p.is_empty() => StartMode::SourceCheckpoint(PathBuf::from(p)),
                        _ => {
                            return Err(Error::Config(format!(
                                "start_mode: expected `random` or `source:<path>`, got {v:?}"
                            )))
                        }
                    },
                }
            }
            "prompt_tuning" => self.prompt_tuning = parse_bool(key, value)?,
            "region_fusion" => self.region_fusion = parse_bool(key, value)?,
            "use_l_mu" => self.use_l_mu = parse_bool(key, value)?,
            "use_l_en" => self.use_l_en = parse_bool(key, value)?,
            "use_l_pl" => self.use_l_pl = parse_bool(key, value)?,
            "defer_prompts_past_warmup" => {
                self.defer_prompts_past_warmup = parse_bool(key, value)?
            }
            "region_mean_center" => self.region_mean_center = parse_bool(key, value)?,
            "source_epochs" => self.source_epochs = parse_value(key, value)?,
            "source_lr" => self.source_lr = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("total_epochs", self.total_epochs.to_string()),
            ("warm_up_epochs", self.warm_up_epochs.to_string()),
            (
                "iterations_per_epoch",
                self.iterations_per_epoch.unwrap_or(0).to_string(),
            ),
            ("batch_size", self.batch_size.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("gamma", self.gamma.to_string()),
            ("lr_student", self.lr_student.to_string()),
            ("lr_teacher", self.lr_teacher.to_string()),
            ("momentum", self.momentum.to_string()),
            ("seed", self.seed.to_string()),
            ("hidden", render_list(&self.hidden)),
            (
                "start_mode",
                match &self.start_mode {
                    StartMode::Random => "random".to_string(),
                    StartMode::SourceCheckpoint(p) => format!("source:{}", p.display()),
                },
            ),
            ("prompt_tuning", self.prompt_tuning.to_string()),
            ("region_fusion", self.region_fusion.to_string()),
            ("use_l_mu", self.use_l_mu.to_string()),
            ("use_l_en", self.use_l_en.to_string()),
            ("use_l_pl", self.use_l_pl.to_string()),
            (
                "defer_prompts_past_warmup",
                self.defer_prompts_past_warmup.to_string(),
            ),
            ("region_mean_center", self.region_mean_center.to_string()),
            ("source_epochs", self.source_epochs.to_string()),
            ("source_lr", self.source_lr.to_string()),
        ]
    }
}

/// Per-epoch evaluation of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub student_acc: f64,
    pub teacher_acc: f64,
    pub region_acc: f64,
    /// Mean of the per-iteration student loss terms over the epoch.
    pub loss: LossBreakdown<f64>,
    /// Mean teacher prompt loss; zero when prompts were not tuned.
    pub teacher_loss: f64,
    /// Mean noise-distribution JSD between student and teacher on the eval set.
    pub noise_jsd: f64,
    /// Prediction JSD against a paired run, when one exists.
    pub prediction_jsd: Option<f64>,
    /// Histogram of student predictions on the eval set.
    pub class_counts: Vec<usize>,
}

impl MetricsRecord {
    /// Accuracy gain of the region over the better of the two models.
    pub fn region_gain(&self) -> f64 {
        self.region_acc - self.student_acc.max(self.teacher_acc)
    }
}

pub fn metrics_csv_header(classes: usize) -> String {
    let mut h = String::from(
        "epoch,student_acc,teacher_acc,region_acc,l_mu,l_en,l_pl,l_total,l_v,noise_jsd,prediction_jsd",
    );
    for c in 0..classes {
        write!(h, ",count_{c}").unwrap();
    }
    h
}

pub fn metrics_to_csv(records: &[MetricsRecord], classes: usize) -> String {
    let mut out = metrics_csv_header(classes);
    out.push('\n');
    for r in records {
        write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},",
            r.epoch,
            r.student_acc,
            r.teacher_acc,
            r.region_acc,
            r.loss.l_mu,
            r.loss.l_en,
            r.loss.l_pl,
            r.loss.total,
            r.teacher_loss,
            r.noise_jsd
        )
        .unwrap();
        if let Some(j) = r.prediction_jsd {
            write!(out, "{j}").unwrap();
        }
        for c in &r.class_counts {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(records: &[MetricsRecord], classes: usize, path: &Path) -> Result<()> {
    fs::write(path, metrics_to_csv(records, classes)).map_err(|e| Error::io(path, e))
}

fn select_rows<T: Scalar>(x: ArrayView2<'_, T>, idx: &[usize]) -> Array2<T> {
    x.select(Axis(0), idx)
}

fn accuracy<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize]) -> f64 {
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(r, &y)| argmax(r.iter().copied()) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// One in-progress adaptation run, advanced an epoch at a time.
pub struct TsdrdRun<'a, T: Scalar> {
    cfg: TrainConfig,
    target: UnlabeledView<'a, T>,
    eval: &'a LabeledDataset<T>,
    student: MlpModel<T>,
    teacher: TeacherModel<T>,
    shuffle_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    records: Vec<MetricsRecord>,
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub student: MlpModel<T>,
    pub teacher: TeacherModel<T>,
    pub records: Vec<MetricsRecord>,
}

/// Builds the starting student named by `cfg.start_mode`.
pub fn initial_student<T: Scalar>(
    cfg: &TrainConfig,
    input: usize,
    classes: usize,
) -> Result<MlpModel<T>> {
    let sizes = cfg.layer_sizes(input, classes);
    match &cfg.start_mode {
        StartMode::Random => init_mlp(&sizes, cfg.derived_seeds().0),
        StartMode::SourceCheckpoint(path) => load_mlp_expecting(path, &sizes),
    }
}

impl<'a, T: Scalar> TsdrdRun<'a, T> {
    pub fn new(
        cfg: TrainConfig,
        target: UnlabeledView<'a, T>,
        teacher: TeacherModel<T>,
        student: MlpModel<T>,
        eval: &'a LabeledDataset<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        if target.is_empty() {
            return Err(Error::Input("target set is empty".into()));
        }
        if eval.is_empty() {
            return Err(Error::Input("evaluation set is empty".into()));
        }
        let dims = [
            ("student input", student.input_dim(), target.dim()),
            ("teacher input", teacher.input_dim(), target.dim()),
            ("eval features", eval.dim(), target.dim()),
            ("student classes", student.num_classes(), target.classes()),
            ("teacher classes", teacher.num_classes(), target.classes()),
            ("eval classes", eval.classes(), target.classes()),
        ];
        for (what, got, want) in dims {
            if got != want {
                return Err(Error::Shape(format!("{what}: {got} != {want}")));
            }
        }
        let (_, shuffle_seed) = cfg.derived_seeds();
        Ok(TsdrdRun {
            order: (0..target.len()).collect(),
            cursor: usize::MAX,
            cfg,
            target,
            eval,
            student,
            teacher,
            shuffle_rng: ChaCha8Rng::seed_from_u64(shuffle_seed),
            epoch: 0,
            records: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn student(&self) -> &MlpModel<T> {
        &self.student
    }

    pub fn teacher(&self) -> &TeacherModel<T> {
        &self.teacher
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.total_epochs
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn records_mut(&mut self) -> &mut [MetricsRecord] {
        &mut self.records
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.shuffle_rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    /// Runs one full epoch of updates followed by evaluation.
    pub fn step_epoch(&mut self) -> Result<&MetricsRecord> {
        if self.is_done() {
            return Err(Error::Contract(format!(
                "run already finished {} epochs",
                self.cfg.total_epochs
            )));
        }
        self.epoch += 1;
        let epoch = self.epoch;
        self.reshuffle();
        let (alpha, beta, gamma) = self.cfg.loss_weights();
        let (alpha, beta, gamma) = (T::lit(alpha), T::lit(beta), T::lit(gamma));
        let lr_s = T::lit(self.cfg.lr_student);
        let lr_t = T::lit(self.cfg.lr_teacher);
        let mom = T::lit(self.cfg.momentum);
        let tune_prompts = self.cfg.prompt_tuning
            && !(self.cfg.defer_prompts_past_warmup && epoch <= self.cfg.warm_up_epochs);
        let iterations = self.cfg.iterations(self.target.len());

        let mut sum = LossBreakdown::<f64>::default();
        let mut sum_lv = 0.0;
        for it in 1..=iterations {
            let ctx = |e: Error| Error::Numeric(format!("epoch {epoch}, iteration {it}: {e}"));
            let idx = self.next_batch();
            let xb = select_rows(self.target.features(), &idx);
            let (t_logits, t_cache) = self.teacher.forward(xb.view())?;
            let (s_logits, s_cache) = self.student.forward(xb.view())?;
            let region = self.region_logits(t_logits.view(), s_logits.view(), epoch)?;

            if tune_prompts {
                let q_v = softmax_rows(t_logits.view());
                let q_i = softmax_rows(s_logits.view());
                let (lv, g) = teacher_loss(q_v.view(), q_i.view()).map_err(ctx)?;
                self.teacher
                    .tune_prompts(g.view(), &t_cache, lr_t, mom)
                    .map_err(ctx)?;
                sum_lv += lv.as_f64();
            }

            let (loss, g) = student_loss(region.view(), s_logits.view(), alpha, beta, gamma)
                .map_err(ctx)?;
            let grads = self.student.backward(&s_cache, g.view())?;
            self.student
                .sgd_momentum_step(&grads, lr_s, mom)
                .map_err(ctx)?;
            sum.l_mu += loss.l_mu.as_f64();
            sum.l_en += loss.l_en.as_f64();
            sum.l_pl += loss.l_pl.as_f64();
            sum.total += loss.total.as_f64();
        }
        let n = iterations as f64;
        let mean = LossBreakdown {
            l_mu: sum.l_mu / n,
            l_en: sum.l_en / n,
            l_pl: sum.l_pl / n,
            total: sum.total / n,
            alpha: alpha.as_f64(),
            beta: beta.as_f64(),
            gamma: gamma.as_f64(),
        };
        let mut record = self.evaluate_state(epoch)?;
        record.loss = mean;
        record.teacher_loss = sum_lv / n;
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    fn region_logits(
        &self,
        teacher: ArrayView2<'_, T>,
        student: ArrayView2<'_, T>,
        epoch: usize,
    ) -> Result<Array2<T>> {
        if !self.cfg.region_fusion || epoch == 0 {
            return Ok(teacher.to_owned());
        }
        Ok(build_region_with(
            teacher,
            student,
            epoch,
            self.cfg.warm_up_epochs,
            self.cfg.region_mean_center,
        )?
        .logits)
    }

    /// Metrics of the current models on the eval set; epoch 0 is the untrained state.
    pub fn evaluate_state(&self, epoch: usize) -> Result<MetricsRecord> {
        let x = self.eval.features();
        let labels = self.eval.labels();
        let s = self.student.predict(x)?;
        let t = self.teacher.predict(x)?;
        let region = self.region_logits(t.view(), s.view(), epoch)?;
        let classes = self.eval.classes();
        let mut counts = vec![0usize; classes];
        for row in s.rows() {
            counts[argmax(row.iter().copied())] += 1;
        }
        let mut noise = 0.0;
        for ((sr, tr), &y) in s.rows().into_iter().zip(t.rows()).zip(labels) {
            let ns = noise_distribution(sr, y, classes)?;
            let nt = noise_distribution(tr, y, classes)?;
            noise += jsd(ns.view(), nt.view()).as_f64();
        }
        Ok(MetricsRecord {
            epoch,
            student_acc: accuracy(s.view(), labels),
            teacher_acc: accuracy(t.view(), labels),
            region_acc: accuracy(region.view(), labels),
            loss: LossBreakdown::default(),
            teacher_loss: 0.0,
            noise_jsd: noise / labels.len() as f64,
            prediction_jsd: None,
            class_counts: counts,
        })
    }

    pub fn run_to_end(mut self) -> Result<TrainOutcome<T>> {
        while !self.is_done() {
            self.step_epoch()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome<T> {
        TrainOutcome {
            student: self.student,
            teacher: self.teacher,
            records: self.records,
        }
    }
}

/// Full adaptation run with the student built from `cfg.start_mode`.
pub fn run_tsdrd<'a, T: Scalar>(
    cfg: &TrainConfig,
    target: UnlabeledView<'a, T>,
    teacher: TeacherModel<T>,
    eval: &'a LabeledDataset<T>,
) -> Result<TrainOutcome<T>> {
    let student = initial_student(cfg, target.dim(), target.classes())?;
    run_tsdrd_from(cfg, target, teacher, student, eval)
}

/// Full adaptation run from an explicit starting student.
pub fn run_tsdrd_from<'a, T: Scalar>(
    cfg: &TrainConfig,
    target: UnlabeledView<'a, T>,
    teacher: TeacherModel<T>,
    student: MlpModel<T>,
    eval: &'a LabeledDataset<T>,
) -> Result<TrainOutcome<T>> {
    TsdrdRun::new(cfg.clone(), target, teacher, student, eval)?.run_to_end()
}

/// Supervised pretraining on the labeled source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig {
            epochs: 20,
            lr: 1e-2,
            momentum: 0.9,
            batch_size: 64,
            seed: 1,
        }
    }
}

/// Plain cross-entropy + SGD-momentum training of a fresh student on source labels.
pub fn pretrain_source_model<T: Scalar>(
    source: &LabeledDataset<T>,
    layer_sizes: &[usize],
    cfg: &SourceTrainConfig,
) -> Result<MlpModel<T>> {
    if layer_sizes.first() != Some(&source.dim()) || layer_sizes.last() != Some(&source.classes()) {
        return Err(Error::Shape(format!(
            "architecture {layer_sizes:?} does not fit data (dim {}, classes {})",
            source.dim(),
            source.classes()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let seeds = split_seed(cfg.seed, 2);
    let mut model = init_mlp(layer_sizes, seeds[0])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds[1]);
    let mut order: Vec<usize> = (0..source.len()).collect();
    let (lr, mom) = (T::lit(cfg.lr), T::lit(cfg.momentum));
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (it, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = select_rows(source.features(), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| source.labels()[i]).collect();
            let (logits, cache) = model.forward(xb.view())?;
            let (loss, g) = cross_entropy(logits.view(), &yb)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "source pretraining diverged at epoch {epoch}, iteration {}",
                    it + 1
                )));
            }
            let grads = model.backward(&cache, g.view())?;
            model.sgd_momentum_step(&grads, lr, mom)?;
        }
    }
    Ok(model)
}

/// Accuracy of a student on a labeled set.
pub fn student_accuracy<T: Scalar>(model: &MlpModel<T>, ds: &LabeledDataset<T>) -> Result<f64> {
    Ok(accuracy(model.predict(ds.features())?.view(), ds.labels()))
}

/// Accuracy of a teacher on a labeled set.
pub fn teacher_accuracy<T: Scalar>(t: &TeacherModel<T>, ds: &LabeledDataset<T>) -> Result<f64> {
    Ok(accuracy(t.predict(ds.features())?.view(), ds.labels()))
}
