//! Named-parameter plumbing: every learned module declares its weights as
//! `ParamSpec`s (name, shape, init rule); the pipeline materializes them
//! into a `WeightStore` once and binds them onto a tape per forward pass.

use mtm_tensor::{Tape, Tensor, Var, WeightStore};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("missing parameter {0}")]
    Missing(String),
    #[error("parameter {name} has shape {got:?}, expected {want:?}")]
    ShapeMismatch { name: String, got: Vec<usize>, want: Vec<usize> },
}

/// How a parameter tensor is filled at initialization time.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zeros,
    Const(f32),
    /// Exact values supplied by the declaring module — used for structured
    /// fills such as identity head mixes or direction-spread sampling biases.
    Explicit(Tensor),
    /// Uniform in ±limit.
    Uniform(f32),
    /// Gaussian with the given std-dev.
    Normal(f32),
    /// Uniform ±√(6 / fan_in) — ReLU-friendly conv/linear fill. The fan is
    /// derived from the shape: all leading extents times the second-to-last
    /// for convs ([kh, kw, cin, cout] → kh·kw·cin), first extent for 2-D
    /// linears ([in, out] → in).
    HeUniform,
    /// Uniform ±√(6 / (fan_in + fan_out)).
    XavierUniform,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), init }
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], shape[0]),
        2 => (shape[0], shape[1]),
        // conv layout [kh, kw, cin, cout]
        n => {
            let receptive: usize = shape[..n - 2].iter().product();
            (receptive * shape[n - 2], receptive * shape[n - 1])
        }
    }
}

/// Materializes one spec with the shared stream of the given rng.
pub fn init_tensor(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let (fan_in, fan_out) = fans(&spec.shape);
    match &spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Const(v) => Tensor::full(&spec.shape, *v),
        Init::Explicit(t) => {
            assert_eq!(t.shape(), spec.shape.as_slice(), "explicit init shape for {}", spec.name);
            t.clone()
        }
        Init::Uniform(limit) => {
            let limit = *limit;
            Tensor::from_fn(&spec.shape, |_| rng.gen_range(-limit..limit))
        }
        Init::Normal(std) => {
            let std = *std;
            Tensor::from_fn(&spec.shape, |_| {
                // Box–Muller transform; two uniforms per draw keeps it simple.
                let u1: f32 = rng.gen_range(1e-7..1.0);
                let u2: f32 = rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
            })
        }
        Init::HeUniform => {
            let limit = (6.0 / fan_in as f32).sqrt();
            Tensor::from_fn(&spec.shape, |_| rng.gen_range(-limit..limit))
        }
        Init::XavierUniform => {
            let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
            Tensor::from_fn(&spec.shape, |_| rng.gen_range(-limit..limit))
        }
    }
}

/// All weights of a forward pass bound onto one tape, addressed by name.
pub struct Params {
    vars: BTreeMap<String, Var>,
}

impl Params {
    /// Binds every store entry as a trainable tape parameter.
    pub fn bind_trainable(tape: &mut Tape, store: &WeightStore) -> Params {
        let vars = store.iter().map(|(name, t)| (name.clone(), tape.param(t.clone()))).collect();
        Params { vars }
    }

    /// Binds every store entry as a constant (inference; no tape growth on
    /// backward bookkeeping).
    pub fn bind_frozen(tape: &mut Tape, store: &WeightStore) -> Params {
        let vars = store.iter().map(|(name, t)| (name.clone(), tape.constant(t.clone()))).collect();
        Params { vars }
    }

    /// Builds a bank from explicit (name, var) pairs; used by tests that
    /// route parameters through a gradient-check closure.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Params {
        Params { vars: pairs.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var, ParamError> {
        self.vars.get(name).copied().ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    /// The bound (name, var) pairs in name order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Creates the tensors for `specs` inside `store`, failing on duplicates.
pub fn materialize(specs: &[ParamSpec], rng: &mut ChaCha8Rng, store: &mut WeightStore) {
    for spec in specs {
        assert!(
            store.get(&spec.name).is_none(),
            "duplicate parameter name {}",
            spec.name
        );
        store.insert(spec.name.clone(), init_tensor(spec, rng));
    }
}

/// Verifies that `store` holds exactly the named shapes `specs` declare.
pub fn check_shapes(specs: &[ParamSpec], store: &WeightStore) -> Result<(), ParamError> {
    for spec in specs {
        let t = store.get(&spec.name).ok_or_else(|| ParamError::Missing(spec.name.clone()))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(ParamError::ShapeMismatch {
                name: spec.name.clone(),
                got: t.shape().to_vec(),
                want: spec.shape.clone(),
            });
        }
    }
    Ok(())
}
