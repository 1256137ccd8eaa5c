//! Simulated vision-language teacher.
//!
//! A frozen orthogonal encoder maps features into an embedding space holding one
//! unit-norm prototype per class. Logits are `τ·cos(E·x, p_c + o_c)` where the
//! offsets `o_c` are the only trainable part (the prompt analogue). Offsets start
//! at zero, so an untouched teacher is exactly its zero-shot prior.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::domains::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{check_step_params, momentum_update};
use crate::scalar::{argmax, Scalar};

/// Norms below this are treated as zero.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel<T> {
    /// `[emb × dim]`, frozen.
    encoder: Array2<T>,
    /// `[classes × emb]`, unit rows, frozen.
    prototypes: Array2<T>,
    /// `[classes × emb]`, learnable.
    prompt_offsets: Array2<T>,
    prompt_velocity: Array2<T>,
    tau: T,
    seed: u64,
    generation: u64,
}

/// What [`TeacherModel::forward`] keeps for the prompt gradient.
#[derive(Debug, Clone)]
pub struct TeacherCache<T> {
    /// Unit-normalized embeddings `[batch × emb]` (zero rows stay zero).
    embeddings: Array2<T>,
    /// Normalized effective prototypes `[classes × emb]`.
    unit_prototypes: Array2<T>,
    /// Norms of `p_c + o_c`.
    norms: Array1<T>,
    generation: u64,
}

/// Random matrix with orthonormal rows (or columns when `emb > dim`), via QR.
fn orthogonal_encoder(emb: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tall, wide) = (emb.max(dim), emb.min(dim));
    let g = DMatrix::<f64>::from_fn(tall, wide, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    // q: [tall × wide] with orthonormal columns.
    Array2::from_shape_fn((emb, dim), |(r, c)| {
        if emb >= dim {
            q[(r, c)]
        } else {
            q[(c, r)]
        }
    })
}

fn normalize_rows<T: Scalar>(m: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut out = m.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        if n > T::lit(NORM_EPS) {
            row.mapv_inplace(|v| v / n);
        } else {
            row.fill(T::zero());
        }
    }
    (out, norms)
}

impl<T: Scalar> TeacherModel<T> {
    /// Assembles a teacher; prototype rows are normalized here.
    pub fn new(encoder: Array2<T>, prototypes: Array2<T>, tau: T, seed: u64) -> Result<Self> {
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
        }
        if prototypes.ncols() != encoder.nrows() {
            return Err(Error::Shape(format!(
                "prototype width {} != embedding width {}",
                prototypes.ncols(),
                encoder.nrows()
            )));
        }
        let (unit, norms) = normalize_rows(&prototypes);
        if let Some(k) = norms.iter().position(|&n| !(n > T::lit(NORM_EPS))) {
            return Err(Error::Numeric(format!("prototype {k} has zero norm")));
        }
        let shape = unit.raw_dim();
        Ok(TeacherModel {
            encoder,
            prototypes: unit,
            prompt_offsets: Array2::zeros(shape),
            prompt_velocity: Array2::zeros(shape),
            tau,
            seed,
            generation: 0,
        })
    }

    pub(crate) fn from_parts(
        encoder: Array2<T>,
        prototypes: Array2<T>,
        prompt_offsets: Array2<T>,
        prompt_velocity: Array2<T>,
        tau: T,
        seed: u64,
    ) -> Result<Self> {
        let mut t = TeacherModel::new(encoder, prototypes.clone(), tau, seed)?;
        if prompt_offsets.dim() != t.prototypes.dim() || prompt_velocity.dim() != t.prototypes.dim()
        {
            return Err(Error::Shape("prompt offsets do not match prototypes".into()));
        }
        // Stored prototypes are already unit norm; keep them bit-exact.
        t.prototypes = prototypes;
        t.prompt_offsets = prompt_offsets;
        t.prompt_velocity = prompt_velocity;
        Ok(t)
    }

    pub fn encoder(&self) -> &Array2<T> {
        &self.encoder
    }

    pub fn prototypes(&self) -> &Array2<T> {
        &self.prototypes
    }

    pub fn prompt_offsets(&self) -> &Array2<T> {
        &self.prompt_offsets
    }

    pub fn prompt_velocity(&self) -> &Array2<T> {
        &self.prompt_velocity
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.ncols()
    }

    pub fn emb_dim(&self) -> usize {
        self.encoder.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    /// Replaces the learnable offsets. Invalidates outstanding caches.
    pub fn set_prompt_offsets(&mut self, offsets: Array2<T>) -> Result<()> {
        if offsets.dim() != self.prototypes.dim() {
            return Err(Error::Shape("prompt offsets do not match prototypes".into()));
        }
        self.prompt_offsets = offsets;
        self.generation += 1;
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Result<(Array2<T>, TeacherCache<T>)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "feature dimension {} does not match teacher input {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let effective = &self.prototypes + &self.prompt_offsets;
        let (unit_prototypes, norms) = normalize_rows(&effective);
        if let Some(k) = norms.iter().position(|&n| !(n > T::lit(NORM_EPS))) {
            return Err(Error::Numeric(format!(
                "effective prototype {k} has zero norm"
            )));
        }
        let encoded = x.dot(&self.encoder.t());
        let (embeddings, _) = normalize_rows(&encoded);
        let logits = embeddings.dot(&unit_prototypes.t()) * self.tau;
        Ok((
            logits,
            TeacherCache {
                embeddings,
                unit_prototypes,
                norms,
                generation: self.generation,
            },
        ))
    }

    pub fn predict(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        Ok(self.forward(x)?.0)
    }

    /// Gradient of a loss with respect to the prompt offsets, given `∂L/∂logits`.
    pub fn prompt_gradient(
        &self,
        cache: &TeacherCache<T>,
        d_logits: ArrayView2<'_, T>,
    ) -> Result<Array2<T>> {
        if cache.generation != self.generation {
            return Err(Error::Contract(
                "teacher cache does not belong to the current prompts".into(),
            ));
        }
        if d_logits.dim() != (cache.embeddings.nrows(), self.num_classes()) {
            return Err(Error::Shape(format!(
                "teacher logit gradient shape {:?} does not match forward output",
                d_logits.dim()
            )));
        }
        // ∂L/∂û_c = τ Σ_b g_bc ẑ_b, then through û = u/‖u‖.
        let d_unit = d_logits.t().dot(&cache.embeddings) * self.tau;
        let mut grad = Array2::zeros(d_unit.raw_dim());
        for (c, mut row) in grad.rows_mut().into_iter().enumerate() {
            let u = cache.unit_prototypes.row(c);
            let v = d_unit.row(c);
            let radial = u.dot(&v);
            let inv = T::one() / cache.norms[c];
            for ((g, &vi), &ui) in row.iter_mut().zip(v.iter()).zip(u.iter()) {
                *g = (vi - ui * radial) * inv;
            }
        }
        Ok(grad)
    }

    /// One SGD-momentum step on the prompt offsets only.
    pub fn tune_prompts(
        &mut self,
        d_logits: ArrayView2<'_, T>,
        cache: &TeacherCache<T>,
        lr: T,
        momentum: T,
    ) -> Result<()> {
        check_step_params(lr, momentum)?;
        let grad = self.prompt_gradient(cache, d_logits)?;
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite prompt gradient".into()));
        }
        momentum_update(
            &mut self.prompt_offsets,
            &mut self.prompt_velocity,
            &grad,
            lr,
            momentum,
        );
        self.generation += 1;
        Ok(())
    }
}

/// Builds the teacher from a reference domain: prototypes are the normalized encoded
/// class means, offsets start at zero.
pub fn pretrain_teacher<T: Scalar>(
    vil: &LabeledDataset<T>,
    emb: usize,
    tau: f64,
    seed: u64,
) -> Result<TeacherModel<T>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    if emb == 0 {
        return Err(Error::Config("embedding width must be >= 1".into()));
    }
    if let Some(k) = vil.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::Input(format!("reference domain lacks class {k}")));
    }
    let encoder64 = orthogonal_encoder(emb, vil.dim(), seed);
    let encoded_means = vil.centroids().dot(&encoder64.t());
    let encoder = encoder64.mapv(T::lit);
    let prototypes = encoded_means.mapv(T::lit);
    TeacherModel::new(encoder, prototypes, T::lit(tau), seed)
}

/// Zero-shot accuracy against a floor; below the floor a warning is logged.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotCheck {
    pub accuracy: f64,
    pub floor: f64,
    pub below_floor: bool,
}

pub fn zero_shot_check<T: Scalar>(
    teacher: &TeacherModel<T>,
    eval: &LabeledDataset<T>,
    floor: f64,
) -> Result<ZeroShotCheck> {
    let logits = teacher.predict(eval.features())?;
    let correct = logits
        .rows()
        .into_iter()
        .zip(eval.labels())
        .filter(|(r, &y)| argmax(r.iter().copied()) == y)
        .count();
    let accuracy = correct as f64 / eval.len() as f64;
    let below_floor = accuracy <= floor;
    if below_floor {
        log::warn!(
            "teacher zero-shot accuracy {accuracy:.4} does not exceed the scenario floor {floor}"
        );
    }
    Ok(ZeroShotCheck {
        accuracy,
        floor,
        below_floor,
    })
}
