use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::TrainRng;
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

use super::config::{param_specs, Init, ModelConfig};

pub const INIT_STD: f64 = 0.02;

/// Standard deviation of a unit normal truncated to [-2, 2].
const TRUNC2_STD: f64 = 0.879_625_661_034_239_8;

/// Named learnable tensors in canonical, deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T: Scalar> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.zero_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every tensor as a differentiable leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v)))
                .collect(),
        }
    }

    /// Adds the gradients of one backward pass into each tensor's stored gradient.
    pub fn accumulate_grads(
        &mut self,
        bound: &BoundParams<'_, T>,
        grads: &Gradients<T>,
    ) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let var = bound.get(name)?;
            if let Some(g) = grads.get(&var) {
                t.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    /// Checks names and shapes against what `config` requires.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let specs = param_specs(config);
        if specs.len() != self.len() {
            return Err(Error::Consistency(format!(
                "config expects {} tensors, parameter set has {}",
                specs.len(),
                self.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(self.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Consistency(format!(
                    "expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// The tape-side view of a [`ParameterSet`].
pub struct BoundParams<'t, T> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    /// Pairs names with existing tape variables.
    pub fn from_vars<'a>(pairs: impl IntoIterator<Item = (&'a str, Var<'t, T>)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std / TRUNC2_STD;
        }
    }
}

/// Deterministic initialization: weights, class token and positional table
/// drawn from a normal truncated at two standard deviations and rescaled to
/// std 0.02; biases zero; norm gains one.
///
/// Values are drawn in `f64` and then converted, so `f32` and `f64` sets
/// from one seed agree up to rounding.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut rng = TrainRng::seed_from_u64(seed);
    let mut set = ParameterSet::new();
    for spec in param_specs(config) {
        let n: usize = spec.shape.iter().product();
        let tensor = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
            Init::TruncNormal => Tensor::from_vec(
                &spec.shape,
                (0..n)
                    .map(|_| T::of(trunc_normal(&mut rng, INIT_STD)))
                    .collect(),
            )?,
        };
        set.insert(spec.name, tensor)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Preset;

    #[test]
    fn trunc_std_constant() {
        // Var of N(0,1) truncated to [-a, a] is 1 - 2aφ(a)/(2Φ(a)-1).
        let a: f64 = 2.0;
        let pdf = (-a * a / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mass = libm::erf(a / std::f64::consts::SQRT_2);
        let var = 1.0 - 2.0 * a * pdf / mass;
        assert!((var.sqrt() - TRUNC2_STD).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_params() {
        let c = Preset::Reduced.config();
        let a = init_params::<f32>(&c, 3).unwrap();
        let b = init_params::<f32>(&c, 3).unwrap();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|((_, x), (_, y))| x.bitwise_eq(y)));
        let other = init_params::<f32>(&c, 4).unwrap();
        assert_ne!(a.get("patch_embed.weight"), other.get("patch_embed.weight"));
    }

    #[test]
    fn init_kinds() {
        let c = Preset::Reduced.config();
        let p = init_params::<f64>(&c, 0).unwrap();
        assert!(p
            .get("block.0.norm1.gamma")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(p
            .get("block.1.feature_ff.b2")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let w = p.get("head.weight").unwrap();
        assert!(w
            .data()
            .iter()
            .all(|&v| v.abs() <= 2.0 * INIT_STD / TRUNC2_STD + 1e-15));
        p.check_against(&c).unwrap();
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterSet::<f32>::new();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
    }
}
