//! Text checkpoints for the student and teacher.
//!
//! Layout (one record per line, values space-separated, floats in shortest
//! round-trip exponent form):
//!
//! ```text
//! DRDCKPT mlp 1
//! scalar f64
//! seed <u64>
//! layers <n0> <n1> ... <nL>
//! activations <act1> ... <actL>
//! weights <k> <row-major fan_out×fan_in values>
//! bias <k> <values>
//! vweights <k> <values>
//! vbias <k> <values>
//! ...                      (the four lines above for every layer k)
//! end
//! ```
//!
//! ```text
//! DRDCKPT teacher 1
//! scalar f64
//! seed <u64>
//! shape <classes> <emb> <dim>
//! tau <value>
//! encoder <row-major emb×dim>
//! prototypes <row-major classes×emb>
//! offsets <row-major classes×emb>
//! velocity <row-major classes×emb>
//! end
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, LayerGrad, MlpModel};
use crate::scalar::Scalar;
use crate::teacher::TeacherModel;

pub const MAGIC: &str = "DRDCKPT";
pub const FORMAT_VERSION: u32 = 1;

fn push_values<'a, T: Scalar>(out: &mut String, key: &str, values: impl Iterator<Item = &'a T>) {
    out.push_str(key);
    for v in values {
        write!(out, " {v:e}").unwrap();
    }
    out.push('\n');
}

fn header<T: Scalar>(kind: &str, seed: u64) -> String {
    format!("{MAGIC} {kind} {FORMAT_VERSION}\nscalar {}\nseed {seed}\n", T::NAME)
}

pub fn mlp_to_string<T: Scalar>(model: &MlpModel<T>) -> String {
    let mut out = header::<T>("mlp", model.seed());
    let sizes: Vec<String> = model.layer_sizes().iter().map(ToString::to_string).collect();
    writeln!(out, "layers {}", sizes.join(" ")).unwrap();
    let acts: Vec<&str> = model.layers().iter().map(|l| l.activation.name()).collect();
    writeln!(out, "activations {}", acts.join(" ")).unwrap();
    for (k, (layer, vel)) in model.layers().iter().zip(model.velocity()).enumerate() {
        push_values(&mut out, &format!("weights {k}"), layer.weights.iter());
        push_values(&mut out, &format!("bias {k}"), layer.bias.iter());
        push_values(&mut out, &format!("vweights {k}"), vel.weights.iter());
        push_values(&mut out, &format!("vbias {k}"), vel.bias.iter());
    }
    out.push_str("end\n");
    out
}

pub fn teacher_to_string<T: Scalar>(teacher: &TeacherModel<T>) -> String {
    let mut out = header::<T>("teacher", teacher.seed());
    writeln!(
        out,
        "shape {} {} {}",
        teacher.num_classes(),
        teacher.emb_dim(),
        teacher.input_dim()
    )
    .unwrap();
    writeln!(out, "tau {:e}", teacher.tau()).unwrap();
    push_values(&mut out, "encoder", teacher.encoder().iter());
    push_values(&mut out, "prototypes", teacher.prototypes().iter());
    push_values(&mut out, "offsets", teacher.prompt_offsets().iter());
    push_values(&mut out, "velocity", teacher.prompt_velocity().iter());
    out.push_str("end\n");
    out
}

pub fn save_mlp<T: Scalar>(model: &MlpModel<T>, path: &Path) -> Result<()> {
    fs::write(path, mlp_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn save_teacher<T: Scalar>(teacher: &TeacherModel<T>, path: &Path) -> Result<()> {
    fs::write(path, teacher_to_string(teacher)).map_err(|e| Error::io(path, e))
}

pub fn load_mlp<T: Scalar>(path: &Path) -> Result<MlpModel<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    mlp_from_str(&text).map_err(|e| with_path(e, path))
}

/// Loads a student and checks it has the expected `[input, hidden..., output]` sizes.
pub fn load_mlp_expecting<T: Scalar>(path: &Path, layer_sizes: &[usize]) -> Result<MlpModel<T>> {
    let model = load_mlp(path)?;
    if model.layer_sizes() != layer_sizes {
        return Err(Error::Checkpoint(format!(
            "{}: layer sizes {:?} do not match expected {:?}",
            path.display(),
            model.layer_sizes(),
            layer_sizes
        )));
    }
    Ok(model)
}

pub fn load_teacher<T: Scalar>(path: &Path) -> Result<TeacherModel<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    teacher_from_str(&text).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate(),
        }
    }

    /// Next line, which must start with `key`; returns the remaining tokens.
    fn expect(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (i, line) = self
            .inner
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("truncated file: missing `{key}` record")))?;
        let mut tokens = line.split_ascii_whitespace();
        match tokens.next() {
            Some(k) if k == key => Ok((i + 1, tokens.collect())),
            other => Err(Error::Checkpoint(format!(
                "line {}: expected `{key}`, found {:?}",
                i + 1,
                other.unwrap_or("")
            ))),
        }
    }
}

fn check_header<'a, T: Scalar>(lines: &mut Lines<'a>, kind: &str) -> Result<u64> {
    let (_, rest) = lines.expect(MAGIC).map_err(|_| {
        Error::Checkpoint(format!("not a checkpoint: missing `{MAGIC}` magic"))
    })?;
    if rest.first() != Some(&kind) {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {:?}, expected {kind}",
            rest.first().unwrap_or(&"")
        )));
    }
    let version: u32 = rest
        .get(1)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing format version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let (_, scalar) = lines.expect("scalar")?;
    if scalar.first() != Some(&T::NAME) {
        return Err(Error::Checkpoint(format!(
            "checkpoint scalar type {:?} does not match {}",
            scalar.first().unwrap_or(&""),
            T::NAME
        )));
    }
    let (line, seed) = lines.expect("seed")?;
    single(&seed, line, "seed")
}

fn single<V: std::str::FromStr>(tokens: &[&str], line: usize, what: &str) -> Result<V> {
    match tokens {
        [v] => v
            .parse()
            .map_err(|_| Error::Checkpoint(format!("line {line}: bad {what} {v:?}"))),
        _ => Err(Error::Checkpoint(format!("line {line}: expected one {what}"))),
    }
}

fn values<T: Scalar>(tokens: &[&str], line: usize, expected: usize) -> Result<Vec<T>> {
    if tokens.len() != expected {
        return Err(Error::Checkpoint(format!(
            "line {line}: expected {expected} values, found {}",
            tokens.len()
        )));
    }
    tokens
        .iter()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Checkpoint(format!("line {line}: bad value {t:?}")))
        })
        .collect()
}

fn indexed<'a>(lines: &mut Lines<'a>, key: &str, k: usize) -> Result<(usize, Vec<&'a str>)> {
    let (line, tokens) = lines.expect(key)?;
    match tokens.split_first() {
        Some((idx, rest)) if idx.parse() == Ok(k) => Ok((line, rest.to_vec())),
        _ => Err(Error::Checkpoint(format!(
            "line {line}: expected `{key} {k}`"
        ))),
    }
}

pub fn mlp_from_str<T: Scalar>(text: &str) -> Result<MlpModel<T>> {
    let mut lines = Lines::new(text);
    let seed = check_header::<T>(&mut lines, "mlp")?;
    let (line, sizes) = lines.expect("layers")?;
    let sizes: Vec<usize> = sizes
        .iter()
        .map(|s| s.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint(format!("line {line}: bad layer sizes")))?;
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Checkpoint(format!("line {line}: degenerate layer sizes")));
    }
    let (line, acts) = lines.expect("activations")?;
    if acts.len() != sizes.len() - 1 {
        return Err(Error::Checkpoint(format!(
            "line {line}: {} activations for {} layers",
            acts.len(),
            sizes.len() - 1
        )));
    }
    let mut layers = Vec::new();
    let mut velocity = Vec::new();
    for (k, pair) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let activation = Activation::parse(acts[k])
            .ok_or_else(|| Error::Checkpoint(format!("unknown activation {:?}", acts[k])))?;
        let mut read = |key: &str, n: usize| -> Result<Vec<T>> {
            let (line, tokens) = indexed(&mut lines, key, k)?;
            values(&tokens, line, n)
        };
        let w = read("weights", fan_in * fan_out)?;
        let b = read("bias", fan_out)?;
        let vw = read("vweights", fan_in * fan_out)?;
        let vb = read("vbias", fan_out)?;
        let shape_err = |e: ndarray::ShapeError| Error::Checkpoint(e.to_string());
        layers.push(Layer {
            weights: Array2::from_shape_vec((fan_out, fan_in), w).map_err(shape_err)?,
            bias: Array1::from(b),
            activation,
        });
        velocity.push(LayerGrad {
            weights: Array2::from_shape_vec((fan_out, fan_in), vw).map_err(shape_err)?,
            bias: Array1::from(vb),
        });
    }
    lines.expect("end")?;
    MlpModel::from_parts(layers, velocity, seed)
}

pub fn teacher_from_str<T: Scalar>(text: &str) -> Result<TeacherModel<T>> {
    let mut lines = Lines::new(text);
    let seed = check_header::<T>(&mut lines, "teacher")?;
    let (line, shape) = lines.expect("shape")?;
    let shape: Vec<usize> = shape
        .iter()
        .map(|s| s.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint(format!("line {line}: bad shape")))?;
    let [classes, emb, dim] = shape[..] else {
        return Err(Error::Checkpoint(format!(
            "line {line}: shape needs classes, emb, dim"
        )));
    };
    let (line, tau) = lines.expect("tau")?;
    let tau: T = single(&tau, line, "tau")?;
    let mut matrix = |key: &str, rows: usize, cols: usize| -> Result<Array2<T>> {
        let (line, tokens) = lines.expect(key)?;
        let v = values(&tokens, line, rows * cols)?;
        Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Checkpoint(e.to_string()))
    };
    let encoder = matrix("encoder", emb, dim)?;
    let prototypes = matrix("prototypes", classes, emb)?;
    let offsets = matrix("offsets", classes, emb)?;
    let velocity = matrix("velocity", classes, emb)?;
    lines.expect("end")?;
    TeacherModel::from_parts(encoder, prototypes, offsets, velocity, tau, seed)
}

/// Path helper used by the runners: `<dir>/<name>`.
pub fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_mlp;
    use ndarray::array;

    #[test]
    fn mlp_round_trip_is_exact() {
        let mut m: MlpModel<f64> = init_mlp(&[3, 5, 4, 2], 17).unwrap();
        let x = array![[0.1, -0.2, 0.3], [1.0, 2.0, -3.0]];
        let (logits, cache) = m.forward(x.view()).unwrap();
        let g = m.backward(&cache, logits.view()).unwrap();
        m.sgd_momentum_step(&g, 0.01, 0.9).unwrap();
        let back: MlpModel<f64> = mlp_from_str(&mlp_to_string(&m)).unwrap();
        assert_eq!(back.layers(), m.layers());
        assert_eq!(back.velocity(), m.velocity());
        assert_eq!(back.seed(), 17);
    }

    #[test]
    fn f32_round_trip_and_type_check() {
        let m: MlpModel<f32> = init_mlp(&[2, 3, 2], 1).unwrap();
        let text = mlp_to_string(&m);
        let back: MlpModel<f32> = mlp_from_str(&text).unwrap();
        assert_eq!(back.layers(), m.layers());
        assert!(mlp_from_str::<f64>(&text).is_err());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let m: MlpModel<f64> = init_mlp(&[2, 3, 2], 1).unwrap();
        let text = mlp_to_string(&m).replacen("DRDCKPT", "XXDCKPT", 1);
        let err = mlp_from_str::<f64>(&text).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let m: MlpModel<f64> = init_mlp(&[2, 3, 2], 1).unwrap();
        let text = mlp_to_string(&m).replacen("mlp 1", "mlp 9", 1);
        let err = mlp_from_str::<f64>(&text).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let m: MlpModel<f64> = init_mlp(&[2, 3, 2], 1).unwrap();
        let text = mlp_to_string(&m);
        let cut = &text[..text.len() / 2];
        assert!(mlp_from_str::<f64>(cut).is_err());
        let no_end = text.replace("end\n", "");
        assert!(mlp_from_str::<f64>(&no_end).is_err());
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m: MlpModel<f64> = init_mlp(&[2, 3, 2], 1).unwrap();
        save_mlp(&m, &path).unwrap();
        assert!(load_mlp_expecting::<f64>(&path, &[2, 3, 2]).is_ok());
        assert!(matches!(
            load_mlp_expecting::<f64>(&path, &[2, 4, 2]),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn teacher_round_trip_is_exact() {
        let mut t = TeacherModel::new(
            crate::test_util::normal_matrix(4, 3, 1.0, 2),
            crate::test_util::normal_matrix(2, 4, 1.0, 3),
            30.0,
            5,
        )
        .unwrap();
        let x = array![[0.5, -1.0, 0.25]];
        let (logits, cache) = t.forward(x.view()).unwrap();
        t.tune_prompts(logits.view(), &cache, 1e-2, 0.9).unwrap();
        let back: TeacherModel<f64> = teacher_from_str(&teacher_to_string(&t)).unwrap();
        assert_eq!(back.encoder(), t.encoder());
        assert_eq!(back.prototypes(), t.prototypes());
        assert_eq!(back.prompt_offsets(), t.prompt_offsets());
        assert_eq!(back.prompt_velocity(), t.prompt_velocity());
        assert_eq!(back.tau(), t.tau());
        assert!(teacher_from_str::<f64>(&mlp_to_string(&init_mlp::<f64>(&[2, 2], 0).unwrap())).is_err());
    }
}
