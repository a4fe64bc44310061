use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor_core::{Gradients, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `uniform(-a, a)` with `a = √(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
}

/// Declared parameter: path, shape and initializer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn xavier(path: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize) -> Self {
        ParamSpec {
            path: path.into(),
            shape: shape.to_vec(),
            init: Init::Xavier { fan_in, fan_out },
        }
    }

    pub fn zeros(path: impl Into<String>, shape: &[usize]) -> Self {
        ParamSpec {
            path: path.into(),
            shape: shape.to_vec(),
            init: Init::Zeros,
        }
    }

    /// `[in, out]` matrix and `[out]` bias pair under `prefix`.
    pub fn dense(prefix: &str, d_in: usize, d_out: usize) -> [Self; 2] {
        [
            Self::xavier(format!("{prefix}.weight"), &[d_in, d_out], d_in, d_out),
            Self::zeros(format!("{prefix}.bias"), &[d_out]),
        ]
    }
}

/// 64-bit FNV-1a, used to give every parameter its own init stream.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Named parameter tree; paths are unique and iterate in sorted order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initializes every declared parameter. Each path draws from its own
    /// stream derived from `seed`, so a parameter's initial value does not
    /// depend on which other parameters exist.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut params = ModelParams::new();
        for spec in specs {
            let value = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Xavier { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&spec.path));
                    Tensor::uniform(&spec.shape, bound, &mut rng)
                }
            };
            params.insert(spec.path.clone(), value)?;
        }
        Ok(params)
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::InvalidArgument(format!("duplicate parameter path `{path}`")));
        }
        self.entries.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::MissingParameter(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| Error::MissingParameter(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Copies every entry whose path starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ModelParams, prefix: &str) -> Result<()> {
        for (path, value) in other.iter().filter(|(p, _)| p.starts_with(prefix)) {
            let dst = self.get_mut(path)?;
            if dst.shape() != value.shape() {
                return Err(Error::ParameterShape {
                    path: path.to_string(),
                    found: value.shape().to_vec(),
                    expected: dst.shape().to_vec(),
                });
            }
            *dst = value.clone();
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        for t in self.entries.values_mut() {
            t.round_to_f32();
        }
    }

    /// Checks that the tree holds exactly the declared parameters.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        for (path, value) in self.iter() {
            let Some(spec) = specs.iter().find(|s| s.path == path) else {
                return Err(Error::UnknownParameter(path.to_string()));
            };
            if spec.shape != value.shape() {
                return Err(Error::ParameterShape {
                    path: path.to_string(),
                    found: value.shape().to_vec(),
                    expected: spec.shape.clone(),
                });
            }
        }
        if let Some(missing) = specs.iter().find(|s| !self.contains(&s.path)) {
            return Err(Error::MissingParameter(missing.path.clone()));
        }
        Ok(())
    }
}

/// Registers parameters on a tape on first use.
pub struct ParamBinder<'p> {
    params: &'p ModelParams,
    frozen: Vec<String>,
    bound: BTreeMap<String, Var>,
}

impl<'p> ParamBinder<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        ParamBinder {
            params,
            frozen: Vec::new(),
            bound: BTreeMap::new(),
        }
    }

    /// Parameters under any of `prefixes` are bound without gradients.
    pub fn frozen(params: &'p ModelParams, prefixes: &[&str]) -> Self {
        ParamBinder {
            frozen: prefixes.iter().map(|p| p.to_string()).collect(),
            ..Self::new(params)
        }
    }

    pub fn var(&mut self, tape: &mut Tape<'p>, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let value = self.params.get(path)?;
        let trainable = !self.frozen.iter().any(|p| path.starts_with(p.as_str()));
        let v = tape.param(value, trainable);
        self.bound.insert(path.to_string(), v);
        Ok(v)
    }

    /// Takes the gradient of every bound, trainable parameter.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(path, &v)| grads.take(v).map(|g| (path.clone(), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        let mut v = ParamSpec::dense("a", 3, 4).to_vec();
        v.extend(ParamSpec::dense("b", 4, 2));
        v
    }

    #[test]
    fn init_is_bounded_and_biases_are_zero() {
        let p = ModelParams::init(&specs(), 1).unwrap();
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(p.get("a.weight").unwrap().data().iter().all(|v| v.abs() < bound));
        assert!(p.get("a.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_independent_of_other_entries() {
        let full = ModelParams::init(&specs(), 7).unwrap();
        let part = ModelParams::init(&specs()[2..], 7).unwrap();
        assert_eq!(full.get("b.weight").unwrap(), part.get("b.weight").unwrap());
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("x", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn validate_names_the_problem() {
        let mut p = ModelParams::init(&specs(), 1).unwrap();
        p.validate(&specs()).unwrap();
        *p.get_mut("a.weight").unwrap() = Tensor::zeros(&[4, 4]);
        assert!(matches!(p.validate(&specs()), Err(Error::ParameterShape { .. })));
        let mut q = ModelParams::init(&specs(), 1).unwrap();
        q.insert("c.weight", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(q.validate(&specs()), Err(Error::UnknownParameter(_))));
    }
}
