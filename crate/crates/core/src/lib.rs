//! Two-stage denoised-region distillation on synthetic domain shift.
//!
//! A randomly initialized student MLP is adapted to an unlabeled target domain
//! under the guidance of a simulated vision-language teacher. During warm-up the
//! student distills the teacher's logits; afterwards it distills the elementwise
//! sum of teacher and student logits (the denoised region), while the teacher's
//! prompt offsets are tuned to agree with the student.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the double-precision instantiation used by the runners and CLI.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod domains;
mod error;
pub mod losses;
pub mod nn;
pub mod region;
pub mod scalar;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Mlp = nn::MlpModel<f64>;
pub type Teacher = teacher::TeacherModel<f64>;
pub type Dataset = domains::LabeledDataset<f64>;
pub type Benchmark = domains::Benchmark<f64>;
pub type Loss = losses::LossBreakdown<f64>;

#[cfg(test)]
pub(crate) mod test_util {
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    pub fn normal_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).unwrap();
        Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
    }
}
