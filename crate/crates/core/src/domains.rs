//! Synthetic labeled domains: Gaussian class clusters under affine shifts.
//!
//! A benchmark holds three domains generated from the same base class means:
//! the target (identity transform), a vision-language reference that sits
//! close to the target, and a source domain that sits further away.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{parse_value, unknown_key, KvConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Affine map `x ↦ scale·R(θ)·x + translation`.
///
/// `R(θ)` rotates every coordinate plane `(0,1), (2,3), …` by the same angle; with an
/// odd dimension the last coordinate is left alone.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    pub rotation_deg: f64,
    pub translation: Array1<f64>,
    pub scale: f64,
}

impl DomainTransform {
    pub fn identity(dim: usize) -> Self {
        DomainTransform {
            rotation_deg: 0.0,
            translation: Array1::zeros(dim),
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let mut out = x.clone();
        let mut i = 0;
        while i + 1 < x.len() {
            out[i] = c * x[i] - s * x[i + 1];
            out[i + 1] = s * x[i] + c * x[i + 1];
            i += 2;
        }
        out.mapv_inplace(|v| v * self.scale);
        out + &self.translation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub classes: usize,
    pub dim: usize,
    /// `[classes × dim]`
    pub base_means: Array2<f64>,
    pub base_cov_scale: f64,
    pub transform: DomainTransform,
    pub label_noise_rate: f64,
    pub samples_per_class: usize,
    pub tag: String,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::Config(format!(
                "domain {}: need classes >= 2, dim >= 1, samples_per_class >= 1",
                self.tag
            )));
        }
        if self.base_means.dim() != (self.classes, self.dim) {
            return Err(Error::Shape(format!(
                "domain {}: base means {:?}, expected ({}, {})",
                self.tag,
                self.base_means.dim(),
                self.classes,
                self.dim
            )));
        }
        if self.transform.translation.len() != self.dim {
            return Err(Error::Shape(format!(
                "domain {}: translation length {} != dim {}",
                self.tag,
                self.transform.translation.len(),
                self.dim
            )));
        }
        if !(self.transform.scale > 0.0) || !(self.base_cov_scale >= 0.0) {
            return Err(Error::Config(format!(
                "domain {}: scale must be > 0 and cov scale >= 0",
                self.tag
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::Config(format!(
                "domain {}: label noise rate must lie in [0, 1)",
                self.tag
            )));
        }
        for a in 0..self.classes {
            for b in a + 1..self.classes {
                if self.base_means.row(a) == self.base_means.row(b) {
                    return Err(Error::Config(format!(
                        "domain {}: classes {a} and {b} share a mean",
                        self.tag
                    )));
                }
            }
        }
        Ok(())
    }

    /// Class means after the domain transform.
    pub fn transformed_means(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.classes, self.dim));
        for (k, mut row) in out.rows_mut().into_iter().enumerate() {
            row.assign(&self.transform.apply(&self.base_means.row(k).to_owned()));
        }
        out
    }
}

/// Features with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    features: Array2<T>,
    labels: Vec<usize>,
    classes: usize,
    domain_tag: String,
}

/// Features of a dataset with the labels stripped; all that training code receives.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a, T> {
    features: ArrayView2<'a, T>,
    classes: usize,
}

impl<'a, T: Scalar> UnlabeledView<'a, T> {
    pub fn new(features: ArrayView2<'a, T>, classes: usize) -> Self {
        UnlabeledView { features, classes }
    }

    pub fn features(&self) -> ArrayView2<'a, T> {
        self.features
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(
        features: Array2<T>,
        labels: Vec<usize>,
        classes: usize,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        let ds = LabeledDataset {
            features,
            labels,
            classes,
            domain_tag: domain_tag.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.labels.len() != self.features.nrows() {
            return Err(Error::Shape(format!(
                "{} labels for {} feature rows",
                self.labels.len(),
                self.features.nrows()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Input(format!(
                "label {y} outside [0, {})",
                self.classes
            )));
        }
        let counts = self.class_counts();
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Input(format!(
                "dataset {:?} has no sample of class {k}",
                self.domain_tag
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn features(&self) -> ArrayView2<'_, T> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    pub fn unlabeled(&self) -> UnlabeledView<'_, T> {
        UnlabeledView::new(self.features.view(), self.classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Same features with labels replaced; used to show that training ignores labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        LabeledDataset::new(
            self.features.clone(),
            labels,
            self.classes,
            self.domain_tag.clone(),
        )
    }

    /// Per-class feature centroids `[classes × dim]`.
    pub fn centroids(&self) -> Array2<f64> {
        let mut sums = Array2::<f64>::zeros((self.classes, self.dim()));
        let mut counts = vec![0usize; self.classes];
        for (row, &y) in self.features.axis_iter(Axis(0)).zip(&self.labels) {
            let mut s = sums.row_mut(y);
            for (acc, v) in s.iter_mut().zip(row.iter()) {
                *acc += v.as_f64();
            }
            counts[y] += 1;
        }
        for (mut row, &n) in sums.rows_mut().into_iter().zip(&counts) {
            row.mapv_inplace(|v| v / n as f64);
        }
        sums
    }
}

/// Samples a domain: `samples_per_class` draws per class around each transformed
/// mean with isotropic std `base_cov_scale·scale`, then label noise.
pub fn generate_domain<T: Scalar>(spec: &DomainSpec, seed: u64) -> Result<LabeledDataset<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = spec.transformed_means();
    let std = spec.base_cov_scale * spec.transform.scale;
    let n = spec.classes * spec.samples_per_class;
    let mut features = Array2::<T>::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    for k in 0..spec.classes {
        for s in 0..spec.samples_per_class {
            let r = k * spec.samples_per_class + s;
            for d in 0..spec.dim {
                let z: f64 = rng.sample(StandardNormal);
                features[[r, d]] = T::lit(means[[k, d]] + std * z);
            }
            labels.push(k);
        }
    }
    if spec.label_noise_rate > 0.0 {
        for y in labels.iter_mut() {
            if rng.random::<f64>() < spec.label_noise_rate {
                *y = rng.random_range(0..spec.classes);
            }
        }
    }
    LabeledDataset::new(features, labels, spec.classes, spec.tag.clone())
}

/// Mean over classes of the Euclidean distance between class centroids.
pub fn domain_distance<T: Scalar>(a: &LabeledDataset<T>, b: &LabeledDataset<T>) -> Result<f64> {
    if a.classes() != b.classes() {
        return Err(Error::Input(format!(
            "class counts differ: {} vs {}",
            a.classes(),
            b.classes()
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::Input(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(centroid_distance(&a.centroids(), &b.centroids()))
}

fn centroid_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| (&x - &y).mapv(|v| v * v).sum().sqrt())
        .sum();
    total / a.nrows() as f64
}

/// Parameters of a three-domain benchmark, readable from a flat scenario file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Norm of each base class mean.
    pub mean_radius: f64,
    pub cov_scale: f64,
    /// Seed for the base means, translation directions and all sampling.
    pub data_seed: u64,
    pub vil_rotation_deg: f64,
    pub vil_translation: f64,
    pub vil_scale: f64,
    pub vil_label_noise: f64,
    pub source_rotation_deg: f64,
    pub source_translation: f64,
    pub source_scale: f64,
    pub source_label_noise: f64,
    /// Embedding width of the simulated vision-language encoder.
    pub teacher_emb: usize,
    pub teacher_tau: f64,
    /// Minimum acceptable teacher zero-shot accuracy on the target.
    pub teacher_floor: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            classes: 10,
            dim: 16,
            samples_per_class: 1000,
            mean_radius: 4.0,
            cov_scale: 1.0,
            data_seed: 2024,
            vil_rotation_deg: 10.0,
            vil_translation: 0.0,
            vil_scale: 1.0,
            vil_label_noise: 0.0,
            source_rotation_deg: 45.0,
            source_translation: 2.0,
            source_scale: 1.0,
            source_label_noise: 0.0,
            teacher_emb: 16,
            teacher_tau: 30.0,
            teacher_floor: 0.7,
        }
    }
}

impl KvConfig for ScenarioConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "classes" => self.classes = parse_value(key, value)?,
            "dim" => self.dim = parse_value(key, value)?,
            "samples_per_class" => self.samples_per_class = parse_value(key, value)?,
            "mean_radius" => self.mean_radius = parse_value(key, value)?,
            "cov_scale" => self.cov_scale = parse_value(key, value)?,
            "data_seed" => self.data_seed = parse_value(key, value)?,
            "vil_rotation_deg" => self.vil_rotation_deg = parse_value(key, value)?,
            "vil_translation" => self.vil_translation = parse_value(key, value)?,
            "vil_scale" => self.vil_scale = parse_value(key, value)?,
            "vil_label_noise" => self.vil_label_noise = parse_value(key, value)?,
            "source_rotation_deg" => self.source_rotation_deg = parse_value(key, value)?,
            "source_translation" => self.source_translation = parse_value(key, value)?,
            "source_scale" => self.source_scale = parse_value(key, value)?,
            "source_label_noise" => self.source_label_noise = parse_value(key, value)?,
            "teacher_emb" => self.teacher_emb = parse_value(key, value)?,
            "teacher_tau" => self.teacher_tau = parse_value(key, value)?,
            "teacher_floor" => self.teacher_floor = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("classes", self.classes.to_string()),
            ("dim", self.dim.to_string()),
            ("samples_per_class", self.samples_per_class.to_string()),
            ("mean_radius", self.mean_radius.to_string()),
            ("cov_scale", self.cov_scale.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("vil_rotation_deg", self.vil_rotation_deg.to_string()),
            ("vil_translation", self.vil_translation.to_string()),
            ("vil_scale", self.vil_scale.to_string()),
            ("vil_label_noise", self.vil_label_noise.to_string()),
            ("source_rotation_deg", self.source_rotation_deg.to_string()),
            ("source_translation", self.source_translation.to_string()),
            ("source_scale", self.source_scale.to_string()),
            ("source_label_noise", self.source_label_noise.to_string()),
            ("teacher_emb", self.teacher_emb.to_string()),
            ("teacher_tau", self.teacher_tau.to_string()),
            ("teacher_floor", self.teacher_floor.to_string()),
        ]
    }
}

/// Three concrete domain specs plus the distances implied by their transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkScenario {
    pub target: DomainSpec,
    pub source: DomainSpec,
    pub vil_reference: DomainSpec,
    /// Mean centroid displacement source → target implied by the transforms.
    pub declared_source_distance: f64,
    /// Mean centroid displacement vil → target implied by the transforms.
    pub declared_vil_distance: f64,
    pub teacher_emb: usize,
    pub teacher_tau: f64,
    pub teacher_floor: f64,
    pub data_seed: u64,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let v = Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal));
    let n = v.mapv(|x| x * x).sum().sqrt();
    v / n
}

impl BenchmarkScenario {
    pub fn from_config(cfg: &ScenarioConfig) -> Result<Self> {
        if cfg.classes < 2 || cfg.dim == 0 {
            return Err(Error::Config("scenario needs classes >= 2 and dim >= 1".into()));
        }
        if !(cfg.mean_radius > 0.0) {
            return Err(Error::Config("mean_radius must be > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
        let mut base_means = Array2::zeros((cfg.classes, cfg.dim));
        for mut row in base_means.rows_mut() {
            row.assign(&(random_unit(&mut rng, cfg.dim) * cfg.mean_radius));
        }
        let vil_dir = random_unit(&mut rng, cfg.dim);
        let source_dir = random_unit(&mut rng, cfg.dim);
        let spec = |tag: &str, rot: f64, shift: Array1<f64>, scale: f64, noise: f64| DomainSpec {
            classes: cfg.classes,
            dim: cfg.dim,
            base_means: base_means.clone(),
            base_cov_scale: cfg.cov_scale,
            transform: DomainTransform {
                rotation_deg: rot,
                translation: shift,
                scale,
            },
            label_noise_rate: noise,
            samples_per_class: cfg.samples_per_class,
            tag: tag.to_string(),
        };
        let target = spec("target", 0.0, Array1::zeros(cfg.dim), 1.0, 0.0);
        let source = spec(
            "source",
            cfg.source_rotation_deg,
            source_dir * cfg.source_translation,
            cfg.source_scale,
            cfg.source_label_noise,
        );
        let vil_reference = spec(
            "vil",
            cfg.vil_rotation_deg,
            vil_dir * cfg.vil_translation,
            cfg.vil_scale,
            cfg.vil_label_noise,
        );
        let target_means = target.transformed_means();
        let scenario = BenchmarkScenario {
            declared_source_distance: centroid_distance(&source.transformed_means(), &target_means),
            declared_vil_distance: centroid_distance(
                &vil_reference.transformed_means(),
                &target_means,
            ),
            target,
            source,
            vil_reference,
            teacher_emb: cfg.teacher_emb,
            teacher_tau: cfg.teacher_tau,
            teacher_floor: cfg.teacher_floor,
            data_seed: cfg.data_seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        self.source.validate()?;
        self.vil_reference.validate()?;
        if self.target.label_noise_rate != 0.0 {
            return Err(Error::Scenario(
                "target labels are evaluation ground truth and must be noise-free".into(),
            ));
        }
        let zero_shift = self.declared_source_distance == 0.0 && self.declared_vil_distance == 0.0;
        if !zero_shift && !(self.declared_vil_distance < self.declared_source_distance) {
            return Err(Error::Scenario(format!(
                "vision-language reference must be closer to the target than the source \
                 (declared d_vt = {:.4}, d_st = {:.4})",
                self.declared_vil_distance, self.declared_source_distance
            )));
        }
        Ok(())
    }
}

/// Sampled datasets of a benchmark with their measured centroid distances.
#[derive(Debug, Clone)]
pub struct Benchmark<T> {
    pub source: LabeledDataset<T>,
    pub target: LabeledDataset<T>,
    pub vil: LabeledDataset<T>,
    pub measured_source_distance: f64,
    pub measured_vil_distance: f64,
}

impl<T: Scalar> Benchmark<T> {
    /// Flat key-value summary for reports.
    pub fn distance_report(&self, scenario: &BenchmarkScenario) -> String {
        let mut s = String::new();
        writeln!(s, "declared_source_distance = {}", scenario.declared_source_distance).unwrap();
        writeln!(s, "declared_vil_distance = {}", scenario.declared_vil_distance).unwrap();
        writeln!(s, "measured_source_distance = {}", self.measured_source_distance).unwrap();
        writeln!(s, "measured_vil_distance = {}", self.measured_vil_distance).unwrap();
        s
    }
}

/// Derives independent sub-seeds from one seed.
pub(crate) fn split_seed(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Samples all three domains and checks that the reference sits closer to the target than
/// the source does, as measured on the samples.
pub fn make_benchmark<T: Scalar>(scenario: &BenchmarkScenario, seed: u64) -> Result<Benchmark<T>> {
    scenario.validate()?;
    let seeds = split_seed(seed, 3);
    let source = generate_domain(&scenario.source, seeds[0])?;
    let target = generate_domain(&scenario.target, seeds[1])?;
    let vil = generate_domain(&scenario.vil_reference, seeds[2])?;
    let d_st = domain_distance(&source, &target)?;
    let d_vt = domain_distance(&vil, &target)?;
    let zero_shift = scenario.declared_source_distance == 0.0 && scenario.declared_vil_distance == 0.0;
    if !zero_shift && !(d_vt < d_st) {
        return Err(Error::Scenario(format!(
            "measured d(vil, target) = {d_vt:.4} is not below d(source, target) = {d_st:.4}; \
             increase samples_per_class or widen the source shift"
        )));
    }
    Ok(Benchmark {
        source,
        target,
        vil,
        measured_source_distance: d_st,
        measured_vil_distance: d_vt,
    })
}

/// Held-out draw from the same domain spec with an unrelated seed.
pub fn held_out<T: Scalar>(spec: &DomainSpec, seed: u64) -> Result<LabeledDataset<T>> {
    generate_domain(spec, split_seed(seed ^ 0x9e37_79b9_7f4a_7c15, 1)[0])
}

const CSV_HEADER_HINT: &str = "# dim,<d>,classes,<C>,domain,<tag>";

/// Writes `# dim,<d>,classes,<C>,domain,<tag>` followed by rows `f1,…,fd,label`.
///
/// Values use the shortest representation that parses back to the same float.
pub fn save_dataset<T: Scalar>(ds: &LabeledDataset<T>, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(ds.len() * ds.dim() * 12);
    writeln!(
        out,
        "# dim,{},classes,{},domain,{}",
        ds.dim(),
        ds.classes(),
        ds.domain_tag()
    )
    .unwrap();
    for (row, y) in ds.features.axis_iter(Axis(0)).zip(&ds.labels) {
        for v in row {
            write!(out, "{v:e},").unwrap();
        }
        writeln!(out, "{y}").unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<LabeledDataset<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, format!("empty file; expected header `{CSV_HEADER_HINT}`")))?;
    let fields: Vec<&str> = header
        .strip_prefix('#')
        .unwrap_or("")
        .trim()
        .split(',')
        .map(str::trim)
        .collect();
    let bad_header = || {
        Error::parse(
            path,
            1,
            format!("header {header:?} does not match `{CSV_HEADER_HINT}`"),
        )
    };
    if fields.len() != 6 || fields[0] != "dim" || fields[2] != "classes" || fields[4] != "domain" {
        return Err(bad_header());
    }
    let dim: usize = fields[1].parse().map_err(|_| bad_header())?;
    let classes: usize = fields[3].parse().map_err(|_| bad_header())?;
    let tag = fields[5].to_string();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != dim + 1 {
            return Err(Error::parse(
                path,
                line_no,
                format!(
                    "expected {} columns (f1..f{dim},label), got {}",
                    dim + 1,
                    cols.len()
                ),
            ));
        }
        for c in &cols[..dim] {
            let v: T = c
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad feature value {c:?}")))?;
            values.push(v);
        }
        let y: usize = cols[dim]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad label {:?}", cols[dim])))?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::parse(path, 2, "no data rows"));
    }
    let features = Array2::from_shape_vec((labels.len(), dim), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    LabeledDataset::new(features, labels, classes, tag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(cov: f64, noise: f64) -> DomainSpec {
        DomainSpec {
            classes: 3,
            dim: 4,
            base_means: ndarray::array![
                [3.0, 0.0, 0.0, 0.0],
                [0.0, 3.0, 0.0, 0.0],
                [0.0, 0.0, 3.0, 1.0]
            ],
            base_cov_scale: cov,
            transform: DomainTransform::identity(4),
            label_noise_rate: noise,
            samples_per_class: 50,
            tag: "t".into(),
        }
    }

    #[test]
    fn zero_covariance_samples_sit_on_means() {
        let spec = small_spec(0.0, 0.0);
        let ds: LabeledDataset<f64> = generate_domain(&spec, 1).unwrap();
        let means = spec.transformed_means();
        for (row, &y) in ds.features().axis_iter(Axis(0)).zip(ds.labels()) {
            assert_eq!(row, means.row(y));
            // Nearest centroid recovers the label.
            let nearest = (0..3)
                .min_by(|&a, &b| {
                    let da = (&row - &means.row(a)).mapv(|v| v * v).sum();
                    let db = (&row - &means.row(b)).mapv(|v| v * v).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(nearest, y);
        }
    }

    #[test]
    fn empirical_means_converge() {
        let mut spec = small_spec(1.0, 0.0);
        spec.samples_per_class = 10_000;
        let ds: LabeledDataset<f64> = generate_domain(&spec, 5).unwrap();
        let c = ds.centroids();
        let tol = 3.0 / (10_000f64).sqrt();
        for ((k, d), v) in c.indexed_iter() {
            assert!((v - spec.base_means[[k, d]]).abs() < tol, "({k},{d}) {v}");
        }
    }

    #[test]
    fn generation_is_deterministic_with_exact_counts() {
        let spec = small_spec(0.5, 0.0);
        let a: LabeledDataset<f64> = generate_domain(&spec, 9).unwrap();
        let b: LabeledDataset<f64> = generate_domain(&spec, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![50, 50, 50]);
        let c: LabeledDataset<f64> = generate_domain(&spec, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn label_noise_relabels_some_samples() {
        let spec = small_spec(0.5, 0.5);
        let ds: LabeledDataset<f64> = generate_domain(&spec, 2).unwrap();
        let moved = ds
            .labels()
            .iter()
            .enumerate()
            .filter(|(i, &y)| y != i / 50)
            .count();
        // Half the samples are redrawn, a third of those land on their own class.
        assert!(moved > 30 && moved < 70, "{moved}");
    }

    #[test]
    fn rotation_preserves_norm_and_angle() {
        let t = DomainTransform {
            rotation_deg: 30.0,
            translation: Array1::zeros(4),
            scale: 1.0,
        };
        let x = ndarray::array![1.0, 2.0, -0.5, 0.25];
        let y = t.apply(&x);
        let nx = x.dot(&x).sqrt();
        let ny = y.dot(&y).sqrt();
        assert!((nx - ny).abs() < 1e-12);
        assert!((x.dot(&y) / (nx * ny) - 30f64.to_radians().cos()).abs() < 1e-12);
    }

    #[test]
    fn distance_cases() {
        let spec = small_spec(0.3, 0.0);
        let a: LabeledDataset<f64> = generate_domain(&spec, 3).unwrap();
        assert_eq!(domain_distance(&a, &a).unwrap(), 0.0);
        let shift = ndarray::array![1.0, -2.0, 0.5, 2.0];
        let moved = LabeledDataset::new(
            &a.features().to_owned() + &shift,
            a.labels().to_vec(),
            3,
            "moved",
        )
        .unwrap();
        let d = domain_distance(&a, &moved).unwrap();
        assert!((d - shift.dot(&shift).sqrt()).abs() < 1e-9);
        assert_eq!(d, domain_distance(&moved, &a).unwrap());
    }

    #[test]
    fn distance_rejects_class_mismatch() {
        let a: LabeledDataset<f64> = generate_domain(&small_spec(0.3, 0.0), 3).unwrap();
        let mut spec = small_spec(0.3, 0.0);
        spec.classes = 2;
        spec.base_means = spec.base_means.slice(ndarray::s![..2, ..]).to_owned();
        let b: LabeledDataset<f64> = generate_domain(&spec, 3).unwrap();
        assert!(domain_distance(&a, &b).is_err());
    }

    #[test]
    fn default_benchmark_orders_distances() {
        let sc = BenchmarkScenario::from_config(&ScenarioConfig::default()).unwrap();
        let b: Benchmark<f64> = make_benchmark(&sc, 1).unwrap();
        assert!(b.measured_vil_distance < b.measured_source_distance);
    }

    #[test]
    fn zero_shift_benchmark_has_near_zero_distances() {
        let cfg = ScenarioConfig {
            vil_rotation_deg: 0.0,
            source_rotation_deg: 0.0,
            source_translation: 0.0,
            ..ScenarioConfig::default()
        };
        let sc = BenchmarkScenario::from_config(&cfg).unwrap();
        let b: Benchmark<f64> = make_benchmark(&sc, 1).unwrap();
        // Sampling error only: 10 classes × 200 draws of unit-variance 16-d noise.
        assert!(b.measured_source_distance < 0.5);
        assert!(b.measured_vil_distance < 0.5);
    }

    #[test]
    fn reference_further_than_source_is_rejected() {
        let cfg = ScenarioConfig {
            vil_rotation_deg: 90.0,
            ..ScenarioConfig::default()
        };
        assert!(matches!(
            BenchmarkScenario::from_config(&cfg),
            Err(Error::Scenario(_))
        ));
    }

    #[test]
    fn scenario_kv_round_trip() {
        let cfg = ScenarioConfig {
            vil_rotation_deg: 12.5,
            ..ScenarioConfig::default()
        };
        let mut back = ScenarioConfig::default();
        back.apply_text(&cfg.to_kv_string(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
        assert!(back.set("nonsense", "1").is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds: LabeledDataset<f64> = generate_domain(&small_spec(1.0, 0.0), 4).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back: LabeledDataset<f64> = load_dataset(&path).unwrap();
        assert_eq!(back, ds);

        fs::write(&path, "").unwrap();
        assert!(matches!(load_dataset::<f64>(&path), Err(Error::Parse { .. })));

        fs::write(&path, "# width,4,classes,3,domain,t\n1,2,3,4,0\n").unwrap();
        let err = load_dataset::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("dim,<d>,classes,<C>,domain,<tag>"), "{err}");

        fs::write(&path, "# dim,2,classes,1,domain,t\n1,2,0\n1,x,0\n").unwrap();
        let err = load_dataset::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
