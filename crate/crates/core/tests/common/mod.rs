//! Finite-difference oracles and random fixtures shared by the integration tests.
#![allow(dead_code)]

use drd::losses::{student_loss, teacher_loss};
use drd::nn::{softmax_rows, Activation, Layer, MlpModel};
use drd::teacher::TeacherModel;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const H: f64 = 1e-5;
/// Denominator floor of the relative error, so near-zero gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

/// Central difference of `f` along every entry of `x`.
pub fn numeric_grad(x: &Array2<f64>, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xp[idx];
        xp[idx] = orig + H;
        let up = f(&xp);
        xp[idx] = orig - H;
        let down = f(&xp);
        xp[idx] = orig;
        g[idx] = (up - down) / (2.0 * H);
    }
    g
}

pub fn max_rel(a: &Array2<f64>, n: &Array2<f64>) -> f64 {
    a.iter().zip(n).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Random `(region, student, α, β, γ)` and the worst relative error of `∂L/∂student`.
pub fn student_loss_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.random_range(2..12);
    let c = r.random_range(2..7);
    let d = uniform(&mut r, b, c, 3.0);
    let s = uniform(&mut r, b, c, 3.0);
    let (alpha, beta, gamma) = (
        r.random_range(0.0..2.0),
        r.random_range(0.0..2.0),
        r.random_range(0.0..2.0),
    );
    let (_, g) = student_loss(d.view(), s.view(), alpha, beta, gamma).unwrap();
    let n = numeric_grad(&s, |sp| {
        student_loss(d.view(), sp.view(), alpha, beta, gamma).unwrap().0.total
    });
    max_rel(&g, &n)
}

/// Worst relative error of `∂(−I(q_v, q_i))/∂teacher_logits` with `q_i` fixed.
pub fn teacher_loss_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.random_range(2..12);
    let c = r.random_range(2..7);
    let t = uniform(&mut r, b, c, 3.0);
    let q_i = softmax_rows(uniform(&mut r, b, c, 3.0).view());
    let (_, g) = teacher_loss(softmax_rows(t.view()).view(), q_i.view()).unwrap();
    let n = numeric_grad(&t, |tp| {
        teacher_loss(softmax_rows(tp.view()).view(), q_i.view()).unwrap().0
    });
    max_rel(&g, &n)
}

/// Plain forward with ReLU pre-activations recorded, written independently of the crate.
fn forward_with_pre(layers: &[Layer<f64>], x: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
    let mut a = x.clone();
    let mut pres = Vec::new();
    for l in layers {
        let z = a.dot(&l.weights.t()) + &l.bias;
        a = match l.activation {
            Activation::Relu => {
                let out = z.mapv(|v| v.max(0.0));
                pres.push(z);
                out
            }
            Activation::Identity => z,
        };
    }
    (a, pres)
}

fn same_signs(a: &[Array2<f64>], b: &[Array2<f64>]) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| x.iter().zip(y).all(|(u, v)| (*u > 0.0) == (*v > 0.0)))
}

/// Result of a parameter-gradient check.
pub struct BackwardCase {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose ±h probes straddle a ReLU kink (no derivative there).
    pub skipped_kinks: usize,
}

/// Random small MLP, batch and upstream gradient `G`; checks `∂⟨G, f(x)⟩/∂θ`.
pub fn backward_case(seed: u64) -> BackwardCase {
    let mut r = rng(seed);
    let depth = r.random_range(1..4);
    let mut sizes = vec![r.random_range(2..6)];
    for _ in 0..depth {
        sizes.push(r.random_range(2..7));
    }
    let mut layers = Vec::new();
    for (k, w) in sizes.windows(2).enumerate() {
        let act = if k + 2 == sizes.len() { Activation::Identity } else { Activation::Relu };
        layers.push(Layer {
            weights: uniform(&mut r, w[1], w[0], 1.0),
            bias: Array1::from_shape_simple_fn(w[1], || r.random_range(-0.5..0.5)),
            activation: act,
        });
    }
    let model = MlpModel::from_layers(layers.clone(), seed).unwrap();
    let b = r.random_range(1..8);
    let x = uniform(&mut r, b, sizes[0], 2.0);
    let g_up = uniform(&mut r, b, *sizes.last().unwrap(), 1.0);
    let (_, cache) = model.forward(x.view()).unwrap();
    let grads = model.backward(&cache, g_up.view()).unwrap();

    let objective = |ls: &[Layer<f64>]| -> (f64, Vec<Array2<f64>>) {
        let (out, pre) = forward_with_pre(ls, &x);
        ((&out * &g_up).sum(), pre)
    };
    let (_, base_pre) = objective(&layers);
    let mut out = BackwardCase {
        max_rel: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut probe = layers.clone();
    let mut visit = |probe: &mut Vec<Layer<f64>>,
                     set: &dyn Fn(&mut Vec<Layer<f64>>, f64),
                     orig: f64,
                     analytic: f64| {
        set(probe, orig + H);
        let (up, pre_up) = objective(probe);
        set(probe, orig - H);
        let (down, pre_down) = objective(probe);
        set(probe, orig);
        if !same_signs(&pre_up, &base_pre) || !same_signs(&pre_down, &base_pre) {
            out.skipped_kinks += 1;
            return;
        }
        out.checked += 1;
        out.max_rel = out.max_rel.max(rel_err(analytic, (up - down) / (2.0 * H)));
    };
    for k in 0..layers.len() {
        let (rows, cols) = layers[k].weights.dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = layers[k].weights[[i, j]];
                visit(
                    &mut probe,
                    &|p, v| p[k].weights[[i, j]] = v,
                    orig,
                    grads.layers[k].weights[[i, j]],
                );
            }
            let orig = layers[k].bias[i];
            visit(&mut probe, &|p, v| p[k].bias[i] = v, orig, grads.layers[k].bias[i]);
        }
    }
    out
}

/// Worst relative error of the prompt-offset gradient of `⟨G, teacher(x)⟩`.
pub fn prompt_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (dim, emb, c, b) = (
        r.random_range(2..6),
        r.random_range(2..6),
        r.random_range(2..6),
        r.random_range(1..8),
    );
    let encoder = uniform(&mut r, emb, dim, 1.0);
    let protos = uniform(&mut r, c, emb, 1.0);
    let offsets = uniform(&mut r, c, emb, 0.3);
    let mut t = TeacherModel::new(encoder, protos, 5.0, seed).unwrap();
    t.set_prompt_offsets(offsets.clone()).unwrap();
    let x = uniform(&mut r, b, dim, 2.0);
    let g_up = uniform(&mut r, b, c, 1.0);
    let (_, cache) = t.forward(x.view()).unwrap();
    let analytic = t.prompt_gradient(&cache, g_up.view()).unwrap();
    let numeric = numeric_grad(&offsets, |o| {
        let mut tp = t.clone();
        tp.set_prompt_offsets(o.clone()).unwrap();
        (&tp.predict(x.view()).unwrap() * &g_up).sum()
    });
    max_rel(&analytic, &numeric)
}
