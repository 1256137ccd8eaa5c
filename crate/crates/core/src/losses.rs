//! Training objectives and their exact gradients with respect to logits.
//!
//! The student objective is
//! `α·(−I(q_d, q_i)) + γ·Σ_c q̄_c ln q̄_c + β·CE(q_i, argmax q_d)`
//! and the teacher prompt objective is `−I(q_v, q_i)`.
//! `I` is the mutual information of the symmetrized batch joint
//! `J = (1/B)·Σ_b p_b q_bᵀ`, clamped at [`LOG_EPS`] before taking logs.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::{softmax_backward, softmax_rows};
use crate::scalar::{argmax, clamped_ln, Scalar, LOG_EPS};

const ROW_SUM_TOL: f64 = 1e-6;

/// Symmetrized joint distribution of two batches of class assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMatrix<T> {
    /// `[C × C]`, symmetric, entries clamped below at `LOG_EPS`.
    pub joint: Array2<T>,
    pub row_marginal: Array1<T>,
    pub col_marginal: Array1<T>,
    /// Which entries sat above the clamp (the clamp is flat elsewhere).
    active: Array2<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown<T> {
    /// `−I(q_d, q_i)`
    pub l_mu: T,
    /// `Σ_c q̄_c ln q̄_c`
    pub l_en: T,
    /// Mean cross-entropy against the region pseudo-labels.
    pub l_pl: T,
    pub total: T,
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
}

fn validate_probs<T: Scalar>(name: &str, p: ArrayView2<'_, T>) -> Result<()> {
    if p.nrows() == 0 || p.ncols() == 0 {
        return Err(Error::Input(format!("{name}: empty probability batch")));
    }
    for (b, row) in p.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::Input(format!("{name}: row {b} has invalid entries")));
        }
        let s: T = row.sum();
        if (s - T::one()).abs() > T::lit(ROW_SUM_TOL) {
            return Err(Error::Input(format!(
                "{name}: row {b} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

fn same_shape<T>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "batch shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// IIC-style mutual information between two batches of distributions.
pub fn mutual_information<T: Scalar>(
    p: ArrayView2<'_, T>,
    q: ArrayView2<'_, T>,
) -> Result<(T, JointMatrix<T>)> {
    same_shape(p, q)?;
    validate_probs("P", p)?;
    validate_probs("Q", q)?;
    let joint = joint_matrix(p, q);
    Ok((mi_of_joint(&joint), joint))
}

fn joint_matrix<T: Scalar>(p: ArrayView2<'_, T>, q: ArrayView2<'_, T>) -> JointMatrix<T> {
    let b = T::lit(p.nrows() as f64);
    let c = p.ncols();
    // Each term p_i q_j + p_j q_i is commutative in (P, Q), so swapping the
    // arguments yields a bit-identical joint.
    let mut sym = Array2::<T>::zeros((c, c));
    for (pr, qr) in p.rows().into_iter().zip(q.rows()) {
        for i in 0..c {
            for j in 0..c {
                sym[[i, j]] += pr[i] * qr[j] + pr[j] * qr[i];
            }
        }
    }
    let half_b = T::lit(2.0) * b;
    sym.mapv_inplace(|v| v / half_b);
    let eps = T::lit(LOG_EPS);
    let active = sym.mapv(|v| v > eps);
    let joint = sym.mapv(|v| v.max(eps));
    let row_marginal = joint.sum_axis(Axis(1));
    let col_marginal = joint.sum_axis(Axis(0));
    JointMatrix {
        joint,
        row_marginal,
        col_marginal,
        active,
    }
}

fn mi_of_joint<T: Scalar>(j: &JointMatrix<T>) -> T {
    let mut total = T::zero();
    for ((r, c), &v) in j.joint.indexed_iter() {
        total += v * (v.ln() - j.row_marginal[r].ln() - j.col_marginal[c].ln());
    }
    total
}

/// Gradients of `I` with respect to the rows of `P` and `Q`.
fn mi_prob_gradients<T: Scalar>(
    p: ArrayView2<'_, T>,
    q: ArrayView2<'_, T>,
    j: &JointMatrix<T>,
) -> (Array2<T>, Array2<T>) {
    let c = j.joint.nrows();
    // dI/dS_ij on the clamped joint, zero where the clamp is flat.
    let mut ds = Array2::zeros((c, c));
    for ((r, col), g) in ds.indexed_iter_mut() {
        if j.active[[r, col]] {
            *g = j.joint[[r, col]].ln()
                - j.row_marginal[r].ln()
                - j.col_marginal[col].ln()
                - T::one();
        }
    }
    // Through the symmetrization, then the batch mean.
    let dj = (&ds + &ds.t()) / T::lit(2.0);
    let b = T::lit(p.nrows() as f64);
    let dp = q.dot(&dj.t()) / b;
    let dq = p.dot(&dj) / b;
    (dp, dq)
}

/// `Σ_c q̄_c ln q̄_c` with `q̄` the batch-mean distribution; lies in `[−ln C, 0]`.
pub fn entropy_balance<T: Scalar>(q: ArrayView2<'_, T>) -> Result<T> {
    validate_probs("Q", q)?;
    Ok(entropy_balance_unchecked(q).0)
}

fn entropy_balance_unchecked<T: Scalar>(q: ArrayView2<'_, T>) -> (T, Array1<T>) {
    let mean = q.mean_axis(Axis(0)).expect("non-empty batch");
    let value = mean
        .iter()
        .map(|&m| if m > T::zero() { m * clamped_ln(m) } else { T::zero() })
        .sum();
    (value, mean)
}

fn check_labels(labels: &[usize], classes: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some((b, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Input(format!(
            "label {y} at row {b} is outside [0, {classes})"
        )));
    }
    Ok(())
}

/// Mean of `−ln q_{b, y_b}` over the batch.
pub fn pseudo_label_ce<T: Scalar>(probs: ArrayView2<'_, T>, labels: &[usize]) -> Result<T> {
    validate_probs("student probabilities", probs)?;
    check_labels(labels, probs.ncols(), probs.nrows())?;
    Ok(ce_unchecked(probs, labels))
}

fn ce_unchecked<T: Scalar>(probs: ArrayView2<'_, T>, labels: &[usize]) -> T {
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(b, &y)| -clamped_ln(probs[[b, y]]))
        .sum();
    total / T::lit(labels.len() as f64)
}

/// Region pseudo-labels `y_b = argmax_c softmax(d_b)_c`, lowest index on ties.
pub fn region_pseudo_labels<T: Scalar>(region_probs: ArrayView2<'_, T>) -> Vec<usize> {
    region_probs
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect()
}

fn check_finite<T: Scalar>(name: &str, v: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{name} is not finite ({v})")))
    }
}

/// Composite student loss; `region_logits` are constants for the gradient.
///
/// Returns the per-term breakdown and `∂total/∂student_logits`.
pub fn student_loss<T: Scalar>(
    region_logits: ArrayView2<'_, T>,
    student_logits: ArrayView2<'_, T>,
    alpha: T,
    beta: T,
    gamma: T,
) -> Result<(LossBreakdown<T>, Array2<T>)> {
    same_shape(region_logits, student_logits)?;
    if region_logits.nrows() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if region_logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("region logits contain NaN".into()));
    }
    if student_logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("student logits contain NaN".into()));
    }
    let q_d = softmax_rows(region_logits);
    let q_i = softmax_rows(student_logits);
    let labels = region_pseudo_labels(q_d.view());
    let batch = T::lit(q_i.nrows() as f64);

    let joint = joint_matrix(q_d.view(), q_i.view());
    let mi = check_finite("L_mu", mi_of_joint(&joint))?;
    let (_, dmi_dq) = mi_prob_gradients(q_d.view(), q_i.view(), &joint);

    let (l_en, mean) = entropy_balance_unchecked(q_i.view());
    let l_en = check_finite("L_en", l_en)?;
    let l_pl = check_finite("L_pl", ce_unchecked(q_i.view(), &labels))?;

    // ∂/∂q_i of α·(−I) + γ·Σ q̄ ln q̄ + β·CE
    let mut dq = dmi_dq.mapv(|g| -alpha * g);
    let den_row = mean.mapv(|m| gamma * (clamped_ln(m) + T::one()) / batch);
    dq += &den_row;
    let eps = T::lit(LOG_EPS);
    for (b, &y) in labels.iter().enumerate() {
        let qy = q_i[[b, y]];
        if qy > eps {
            dq[[b, y]] -= beta / (batch * qy);
        }
    }

    let grad = softmax_backward(q_i.view(), dq.view());
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("student loss gradient is not finite".into()));
    }
    let l_mu = -mi;
    let total = alpha * l_mu + gamma * l_en + beta * l_pl;
    Ok((
        LossBreakdown {
            l_mu,
            l_en,
            l_pl,
            total: check_finite("total student loss", total)?,
            alpha,
            beta,
            gamma,
        },
        grad,
    ))
}

/// Supervised mean cross-entropy on logits and its gradient `(softmax − onehot)/B`.
pub fn cross_entropy<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    if logits.nrows() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    check_labels(labels, logits.ncols(), logits.nrows())?;
    let q = softmax_rows(logits);
    let value = ce_unchecked(q.view(), labels);
    let batch = T::lit(labels.len() as f64);
    let mut grad = q;
    for (b, &y) in labels.iter().enumerate() {
        grad[[b, y]] -= T::one();
    }
    grad.mapv_inplace(|g| g / batch);
    Ok((value, grad))
}

/// Prompt objective `−I(q_v, q_i)` with `q_i` held constant.
///
/// Returns the value and `∂L/∂teacher_logits`.
pub fn teacher_loss<T: Scalar>(
    teacher_probs: ArrayView2<'_, T>,
    student_probs: ArrayView2<'_, T>,
) -> Result<(T, Array2<T>)> {
    same_shape(teacher_probs, student_probs)?;
    validate_probs("teacher probabilities", teacher_probs)?;
    validate_probs("student probabilities", student_probs)?;
    let joint = joint_matrix(teacher_probs, student_probs);
    let mi = check_finite("L_v", mi_of_joint(&joint))?;
    let (dmi_dp, _) = mi_prob_gradients(teacher_probs, student_probs, &joint);
    let dp = dmi_dp.mapv(|g| -g);
    let grad = softmax_backward(teacher_probs, dp.view());
    Ok((-mi, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_hot_cycle(b: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((b, c), |(r, k)| if r % c == k { 1.0 } else { 0.0 })
    }

    #[test]
    fn independence_gives_zero_mi() {
        let u = Array2::from_elem((5, 4), 0.25f64);
        let (i, j) = mutual_information(u.view(), u.view()).unwrap();
        assert!(i.abs() < 1e-9);
        assert!((j.joint.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_agreement_gives_ln_c() {
        let p = one_hot_cycle(6, 3);
        let (i, _) = mutual_information(p.view(), p.view()).unwrap();
        assert!((i - 3f64.ln()).abs() < 1e-9, "{i}");
    }

    #[test]
    fn two_by_two_matches_scalar_recomputation() {
        let p = array![[0.9, 0.1], [0.2, 0.8]];
        let q = array![[0.8, 0.2], [0.3, 0.7]];
        // Straight-line evaluation of the symmetrized joint.
        let mut j = [[0.0f64; 2]; 2];
        for b in 0..2 {
            for r in 0..2 {
                for c in 0..2 {
                    j[r][c] += p[[b, r]] * q[[b, c]] / 2.0;
                }
            }
        }
        let s = [
            [j[0][0], (j[0][1] + j[1][0]) / 2.0],
            [(j[0][1] + j[1][0]) / 2.0, j[1][1]],
        ];
        let r = [s[0][0] + s[0][1], s[1][0] + s[1][1]];
        let mut expected = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                expected += s[a][b] * (s[a][b] / (r[a] * r[b])).ln();
            }
        }
        let (i, joint) = mutual_information(p.view(), q.view()).unwrap();
        assert!((i - expected).abs() < 1e-15, "{i} vs {expected}");
        assert_eq!(joint.joint, joint.joint.t());
    }

    #[test]
    fn mi_rejects_unnormalized_rows() {
        let p = array![[0.5, 0.6]];
        assert!(matches!(
            mutual_information(p.view(), p.view()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn entropy_balance_extremes() {
        let u = Array2::from_elem((3, 5), 0.2);
        assert!((entropy_balance(u.view()).unwrap() + 5f64.ln()).abs() < 1e-12);
        let same = Array2::from_shape_fn((4, 3), |(_, k)| if k == 1 { 1.0 } else { 0.0 });
        assert_eq!(entropy_balance(same.view()).unwrap(), 0.0);
    }

    #[test]
    fn entropy_balance_mixed_batch() {
        let q = array![[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]];
        let m = [0.4, 0.25, 0.35];
        let expected: f64 = m.iter().map(|v: &f64| v * v.ln()).sum();
        assert!((entropy_balance(q.view()).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn pseudo_label_ce_cases() {
        let hot = array![[0.0, 1.0, 0.0]];
        assert_eq!(pseudo_label_ce(hot.view(), &[1]).unwrap(), 0.0);
        let u = Array2::from_elem((2, 4), 0.25f64);
        assert!((pseudo_label_ce(u.view(), &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let p = array![[0.7f64, 0.2, 0.1]];
        let v = pseudo_label_ce(p.view(), &[1]).unwrap();
        assert!((v - 1.6094379124341003).abs() < 1e-12);
        assert!(matches!(
            pseudo_label_ce(p.view(), &[3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn student_loss_reduces_to_negative_mi() {
        // Very confident one-hot logits spread equally over 3 classes.
        let d = Array2::from_shape_fn((6, 3), |(r, k)| if r % 3 == k { 60.0 } else { 0.0 });
        let (l, _) = student_loss(d.view(), d.view(), 1.3, 0.0, 0.0).unwrap();
        assert!((l.total + 1.3 * 3f64.ln()).abs() < 1e-9, "{}", l.total);
    }

    #[test]
    fn student_loss_pl_only_matches_pseudo_label_ce() {
        let d = array![[2.0, 0.5, -1.0], [0.1, 0.2, 0.3]];
        let s = array![[0.3f64, -0.2, 0.9], [1.0, 0.0, -0.5]];
        let (l, _) = student_loss(d.view(), s.view(), 0.0, 0.4, 0.0).unwrap();
        let q = softmax_rows(s.view());
        let ce = pseudo_label_ce(q.view(), &[0, 2]).unwrap();
        assert!((l.total - 0.4 * ce).abs() < 1e-15);
    }

    #[test]
    fn student_loss_flags_nan() {
        let d = array![[f64::NAN, 0.0]];
        let s = array![[0.0, 0.0]];
        let err = student_loss(d.view(), s.view(), 1.0, 1.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("region"));
    }

    #[test]
    fn teacher_loss_extremes() {
        let p = one_hot_cycle(4, 4);
        let (l, _) = teacher_loss(p.view(), p.view()).unwrap();
        assert!((l + 4f64.ln()).abs() < 1e-9);
        let u = Array2::from_elem((3, 2), 0.5f64);
        let (l, g) = teacher_loss(u.view(), u.view()).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.iter().all(|v| v.is_finite()));
    }
}
