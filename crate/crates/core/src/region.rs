//! Denoised-region supervision and the two-oracle noise fusion model.
//!
//! Each oracle's logit for class `c` is `o*_c + ε_c`. Summing two oracles
//! doubles the signal while independent noise partially cancels, so the
//! argmax of the sum recovers the true class more often than either oracle.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::softmax;
use crate::scalar::{argmax, Scalar, LOG_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionStage {
    WarmUp,
    Fused,
}

impl RegionStage {
    pub fn name(self) -> &'static str {
        match self {
            RegionStage::WarmUp => "warm-up",
            RegionStage::Fused => "fused",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionBatch<T> {
    pub logits: Array2<T>,
    pub stage: RegionStage,
}

/// Teacher logits for `epoch ≤ warm_up`, teacher ⊕ student afterwards.
pub fn build_region<T: Scalar>(
    teacher_logits: ArrayView2<'_, T>,
    student_logits: ArrayView2<'_, T>,
    epoch: usize,
    warm_up: usize,
) -> Result<RegionBatch<T>> {
    build_region_with(teacher_logits, student_logits, epoch, warm_up, false)
}

/// As [`build_region`], optionally subtracting each fused row's mean.
pub fn build_region_with<T: Scalar>(
    teacher_logits: ArrayView2<'_, T>,
    student_logits: ArrayView2<'_, T>,
    epoch: usize,
    warm_up: usize,
    mean_center: bool,
) -> Result<RegionBatch<T>> {
    if teacher_logits.dim() != student_logits.dim() {
        return Err(Error::Input(format!(
            "teacher logits {:?} and student logits {:?} differ in shape",
            teacher_logits.dim(),
            student_logits.dim()
        )));
    }
    if epoch == 0 {
        return Err(Error::Input("epochs are numbered from 1".into()));
    }
    if epoch <= warm_up {
        return Ok(RegionBatch {
            logits: teacher_logits.to_owned(),
            stage: RegionStage::WarmUp,
        });
    }
    let mut logits = &teacher_logits + &student_logits;
    if mean_center {
        for mut row in logits.rows_mut() {
            let mean = row.mean().expect("non-empty row");
            row.mapv_inplace(|v| v - mean);
        }
    }
    Ok(RegionBatch {
        logits,
        stage: RegionStage::Fused,
    })
}

/// Class distribution of the summed oracles: `softmax(2·o* + ε_v + ε_i)`.
pub fn fused_probability<T: Scalar>(
    o_star: ArrayView1<'_, T>,
    eps_v: ArrayView1<'_, T>,
    eps_i: ArrayView1<'_, T>,
) -> Result<Array1<T>> {
    if o_star.len() != eps_v.len() || o_star.len() != eps_i.len() {
        return Err(Error::Shape(format!(
            "lengths differ: o*={}, ε_v={}, ε_i={}",
            o_star.len(),
            eps_v.len(),
            eps_i.len()
        )));
    }
    Ok(softmax(fused_logits(o_star, eps_v, eps_i).view()))
}

/// `(o* + ε_v) + (o* + ε_i)` written as `2·o* + (ε_v + ε_i)`; symmetric in the two noises.
fn fused_logits<T: Scalar>(
    o_star: ArrayView1<'_, T>,
    eps_v: ArrayView1<'_, T>,
    eps_i: ArrayView1<'_, T>,
) -> Array1<T> {
    let two = T::lit(2.0);
    ndarray::Zip::from(o_star)
        .and(eps_v)
        .and(eps_i)
        .map_collect(|&o, &a, &b| two * o + (a + b))
}

/// Noise profile of a prediction: `softmax(|logits − onehot(label)|)`.
pub fn noise_distribution<T: Scalar>(
    logits: ArrayView1<'_, T>,
    true_label: usize,
    classes: usize,
) -> Result<Array1<T>> {
    if true_label >= classes {
        return Err(Error::Input(format!(
            "label {true_label} outside [0, {classes})"
        )));
    }
    if logits.len() != classes {
        return Err(Error::Shape(format!(
            "{} logits for {classes} classes",
            logits.len()
        )));
    }
    let diff = Array1::from_iter(logits.iter().enumerate().map(|(c, &v)| {
        let target = if c == true_label { T::one() } else { T::zero() };
        (v - target).abs()
    }));
    Ok(softmax(diff.view()))
}

/// Jensen–Shannon divergence in bits, so the value lies in `[0, 1]`.
pub fn jsd<T: Scalar>(p: ArrayView1<'_, T>, q: ArrayView1<'_, T>) -> T {
    debug_assert_eq!(p.len(), q.len());
    let eps = T::lit(LOG_EPS);
    let half = T::lit(0.5);
    let mut total = T::zero();
    for (&a, &b) in p.iter().zip(q.iter()) {
        let m = (half * (a + b)).max(eps);
        let term = |x: T| {
            if x > T::zero() {
                x * (x.max(eps) / m).log2()
            } else {
                T::zero()
            }
        };
        // Summing the pair before accumulating keeps jsd(p, q) == jsd(q, p) bitwise.
        total += half * (term(a) + term(b));
    }
    total.max(T::zero()).min(T::one())
}

/// Row-wise [`jsd`].
pub fn jsd_rows<T: Scalar>(p: ArrayView2<'_, T>, q: ArrayView2<'_, T>) -> Array1<T> {
    p.axis_iter(Axis(0))
        .zip(q.axis_iter(Axis(0)))
        .map(|(a, b)| jsd(a, b))
        .collect()
}

/// Gaussian per-class oracle noise with a shared per-class correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma_v: f64,
    pub sigma_i: f64,
    pub rho: f64,
}

impl NoiseModel {
    pub fn new(sigma_v: f64, sigma_i: f64, rho: f64) -> Result<Self> {
        let m = NoiseModel {
            sigma_v,
            sigma_i,
            rho,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_v >= 0.0 && self.sigma_i >= 0.0) {
            return Err(Error::Config("noise standard deviations must be >= 0".into()));
        }
        if !(self.rho.abs() <= 1.0) {
            return Err(Error::Config(format!(
                "correlation must lie in [-1, 1], got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

/// Source of noiseless logit vectors with a known true class.
pub trait SignalSource {
    fn classes(&self) -> usize;
    /// Returns the true class and `o*`.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (usize, Vec<f64>);
}

/// Uniformly random true class whose logit leads all others by `gap`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneHotGap {
    pub classes: usize,
    pub gap: f64,
}

impl SignalSource for OneHotGap {
    fn classes(&self) -> usize {
        self.classes
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (usize, Vec<f64>) {
        let k = rng.random_range(0..self.classes);
        let mut o = vec![0.0; self.classes];
        o[k] = self.gap;
        (k, o)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionStudyRecord {
    pub sigma_v: f64,
    pub sigma_i: f64,
    pub rho: f64,
    pub trials: usize,
    pub seed: u64,
    pub acc_v: f64,
    pub acc_i: f64,
    pub acc_fused: f64,
    pub mean_noise_jsd: f64,
}

impl FusionStudyRecord {
    pub const CSV_HEADER: &'static str =
        "sigma_v,sigma_i,rho,trials,seed,acc_v,acc_i,acc_fused,mean_noise_jsd";

    pub fn gain(&self) -> f64 {
        self.acc_fused - self.acc_v.max(self.acc_i)
    }

    pub fn to_csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            self.sigma_v,
            self.sigma_i,
            self.rho,
            self.trials,
            self.seed,
            self.acc_v,
            self.acc_i,
            self.acc_fused,
            self.mean_noise_jsd
        )
        .expect("write to string");
        s
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Input(format!(
                "expected 9 columns ({}), got {}",
                Self::CSV_HEADER,
                f.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Input(format!("column {i}: bad number {:?}", f[i])))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse()
                .map_err(|_| Error::Input(format!("column {i}: bad integer {:?}", f[i])))
        };
        Ok(FusionStudyRecord {
            sigma_v: num(0)?,
            sigma_i: num(1)?,
            rho: num(2)?,
            trials: int(3)? as usize,
            seed: int(4)?,
            acc_v: num(5)?,
            acc_i: num(6)?,
            acc_fused: num(7)?,
            mean_noise_jsd: num(8)?,
        })
    }
}

/// Monte Carlo accuracy of each oracle and of their sum under [`NoiseModel`].
///
/// Noise is drawn independently per class; within a class the two oracles'
/// noises have correlation `rho`.
pub fn fusion_monte_carlo(
    noise: NoiseModel,
    signal: &dyn SignalSource,
    trials: usize,
    seed: u64,
) -> Result<FusionStudyRecord> {
    noise.validate()?;
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let classes = signal.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = (1.0 - noise.rho * noise.rho).max(0.0).sqrt();
    let (mut hit_v, mut hit_i, mut hit_f) = (0usize, 0usize, 0usize);
    let mut jsd_sum = 0.0;
    let mut eps_v = Array1::<f64>::zeros(classes);
    let mut eps_i = Array1::<f64>::zeros(classes);
    for _ in 0..trials {
        let (truth, o) = signal.sample(&mut rng);
        let o = Array1::from(o);
        for c in 0..classes {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            eps_v[c] = noise.sigma_v * z1;
            eps_i[c] = noise.sigma_i * (noise.rho * z1 + mix * z2);
        }
        let o_v = &o + &eps_v;
        let o_i = &o + &eps_i;
        let fused = fused_logits(o.view(), eps_v.view(), eps_i.view());
        let target = argmax(o.iter().copied());
        hit_v += usize::from(argmax(o_v.iter().copied()) == target);
        hit_i += usize::from(argmax(o_i.iter().copied()) == target);
        hit_f += usize::from(argmax(fused.iter().copied()) == target);
        let nv = noise_distribution(o_v.view(), truth, classes)?;
        let ni = noise_distribution(o_i.view(), truth, classes)?;
        jsd_sum += jsd(nv.view(), ni.view());
    }
    let n = trials as f64;
    Ok(FusionStudyRecord {
        sigma_v: noise.sigma_v,
        sigma_i: noise.sigma_i,
        rho: noise.rho,
        trials,
        seed,
        acc_v: hit_v as f64 / n,
        acc_i: hit_i as f64 / n,
        acc_fused: hit_f as f64 / n,
        mean_noise_jsd: jsd_sum / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn warm_up_returns_teacher_bitwise() {
        let t = array![[1.25, -0.5], [0.1, 0.2]];
        let s = array![[9.0, 9.0], [9.0, -9.0]];
        let r = build_region(t.view(), s.view(), 1, 4).unwrap();
        assert_eq!(r.stage, RegionStage::WarmUp);
        assert_eq!(r.logits, t);
        let r = build_region(t.view(), s.view(), 4, 4).unwrap();
        assert_eq!(r.logits, t);
    }

    #[test]
    fn fused_stage_adds_elementwise() {
        let r = build_region(array![[1.0, 0.0]].view(), array![[0.0, 1.0]].view(), 5, 4).unwrap();
        assert_eq!(r.stage, RegionStage::Fused);
        assert_eq!(r.logits, array![[1.0, 1.0]]);
    }

    #[test]
    fn zero_student_leaves_teacher_distribution() {
        let t = array![[0.3, 2.0, -1.0]];
        let r = build_region(t.view(), Array2::zeros((1, 3)).view(), 5, 4).unwrap();
        assert_eq!(softmax(r.logits.row(0)), softmax(t.row(0)));
    }

    #[test]
    fn mean_centering_is_opt_in() {
        let t = array![[1.0, 3.0]];
        let s = array![[1.0, 1.0]];
        let r = build_region_with(t.view(), s.view(), 2, 0, true).unwrap();
        assert_eq!(r.logits, array![[-1.0, 1.0]]);
    }

    #[test]
    fn region_shape_mismatch() {
        let err = build_region(
            Array2::<f64>::zeros((2, 3)).view(),
            Array2::zeros((2, 4)).view(),
            1,
            0,
        );
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn noiseless_fusion_keeps_argmax() {
        let o = array![0.2, 1.5, -0.3];
        let z = Array1::zeros(3);
        let p = fused_probability(o.view(), z.view(), z.view()).unwrap();
        assert_eq!(p, softmax((&o * 2.0).view()));
        assert_eq!(argmax(p.iter().copied()), 1);
    }

    #[test]
    fn misaligned_noise_cancels() {
        let o = array![1.0, 0.0];
        let ev = array![-0.8, 0.8];
        let ei = array![0.8, -0.8];
        let p = fused_probability(o.view(), ev.view(), ei.view()).unwrap();
        assert_eq!(argmax(p.iter().copied()), 0);
        let ov = &o + &ev;
        assert_eq!(argmax(ov.iter().copied()), 1);
    }

    #[test]
    fn aligned_noise_within_signal_margin() {
        let o = array![1.0, 0.0];
        let e = array![-0.3, 0.3];
        let p = fused_probability(o.view(), e.view(), e.view()).unwrap();
        assert_eq!(argmax(p.iter().copied()), 0);
    }

    #[test]
    fn noise_distribution_cases() {
        let p = noise_distribution(array![0.0f64, 1.0, 0.0].view(), 1, 3).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = noise_distribution(array![0.0, 0.0].view(), 0, 2).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        let p = noise_distribution(array![2.0, -0.5, 0.25].view(), 2, 3).unwrap();
        let raw = [2.0f64, 0.5, 0.75];
        let z: f64 = raw.iter().map(|v| v.exp()).sum();
        for c in 0..3 {
            assert!((p[c] - raw[c].exp() / z).abs() < 1e-15);
        }
        assert!(noise_distribution(array![0.0, 0.0].view(), 2, 2).is_err());
    }

    #[test]
    fn jsd_reference_values() {
        let p = array![0.5, 0.5];
        assert_eq!(jsd(p.view(), p.view()), 0.0);
        assert!((jsd(array![1.0f64, 0.0].view(), array![0.0, 1.0].view()) - 1.0).abs() < 1e-15);
        let q = array![0.9, 0.1];
        let m = [0.7, 0.3];
        let expected = 0.5 * (0.5 * (0.5f64 / m[0]).log2() + 0.5 * (0.5f64 / m[1]).log2())
            + 0.5 * (0.9 * (0.9f64 / m[0]).log2() + 0.1 * (0.1f64 / m[1]).log2());
        assert!((jsd(p.view(), q.view()) - expected).abs() < 1e-15);
        assert!((jsd(q.view(), p.view()) - expected).abs() < 1e-15);
    }

    #[test]
    fn noiseless_monte_carlo_is_perfect() {
        let rec = fusion_monte_carlo(
            NoiseModel::new(0.0, 0.0, 0.0).unwrap(),
            &OneHotGap { classes: 5, gap: 1.0 },
            500,
            1,
        )
        .unwrap();
        assert_eq!((rec.acc_v, rec.acc_i, rec.acc_fused), (1.0, 1.0, 1.0));
    }

    #[test]
    fn fully_correlated_noise_gives_no_gain() {
        let rec = fusion_monte_carlo(
            NoiseModel::new(1.0, 1.0, 1.0).unwrap(),
            &OneHotGap { classes: 10, gap: 1.0 },
            5_000,
            4,
        )
        .unwrap();
        assert_eq!(rec.acc_fused, rec.acc_v);
        assert_eq!(rec.acc_i, rec.acc_v);
        assert!(rec.mean_noise_jsd < 1e-12);
    }

    #[test]
    fn record_csv_round_trip() {
        let rec = fusion_monte_carlo(
            NoiseModel::new(0.7, 1.1, 0.3).unwrap(),
            &OneHotGap { classes: 4, gap: 1.0 },
            200,
            9,
        )
        .unwrap();
        let row = rec.to_csv_row();
        assert_eq!(row.split(',').count(), FusionStudyRecord::CSV_HEADER.split(',').count());
        assert_eq!(FusionStudyRecord::from_csv_row(&row).unwrap(), rec);
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::new(-1.0, 0.0, 0.0).is_err());
        assert!(NoiseModel::new(1.0, 1.0, 1.5).is_err());
    }
}
