use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Graph, Scalar, Tensor, Var};

use super::NetworkError;

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every tensor as a leaf; `trainable` decides whether the
    /// leaves collect gradients.
    pub fn bind<'p>(&'p self, g: &mut Graph<T>, trainable: bool) -> Bound<'p> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound {
            names: &self.names,
            vars,
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    /// Associates already-recorded vars with this set's names, in order.
    pub fn attach(&self, vars: &[Var]) -> Result<Bound<'_>, NetworkError> {
        if vars.len() != self.tensors.len() {
            return Err(NetworkError::Config(format!(
                "expected {} vars, got {}",
                self.tensors.len(),
                vars.len()
            )));
        }
        Ok(Bound {
            names: &self.names,
            vars: vars.to_vec(),
        })
    }
}

/// A [`ParamSet`] recorded on a graph.
#[derive(Debug, Clone)]
pub struct Bound<'p> {
    names: &'p [String],
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var, NetworkError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| NetworkError::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every parameter after `Graph::backward`, zeros where the
    /// parameter was unreachable.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); g.value(v).len()])
            })
            .collect()
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// `N(0, gain / fan_in)`.
    He { gain: f64, fan_in: usize },
    StandardNormal,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }
}

pub(crate) fn init_from_specs<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> ParamSet<f32> {
    let mut set = ParamSet::new();
    for spec in specs {
        let tensor = match spec.init {
            Init::He { gain, fan_in } => {
                let std = (gain / fan_in as f64).sqrt();
                Tensor::from_fn(spec.shape.clone(), |_| {
                    (rng.sample::<f64, _>(StandardNormal) * std) as f32
                })
            }
            Init::StandardNormal => Tensor::from_fn(spec.shape.clone(), |_| {
                rng.sample::<f64, _>(StandardNormal) as f32
            }),
            Init::Zeros => Tensor::zeros(spec.shape.clone()),
        };
        set.push(spec.name.clone(), tensor);
    }
    set
}

/// Checks that `set` carries exactly the parameters in `specs`.
pub(crate) fn validate_against<T: Scalar>(
    set: &ParamSet<T>,
    specs: &[ParamSpec],
) -> Result<(), NetworkError> {
    for spec in specs {
        let t = set
            .get(&spec.name)
            .ok_or_else(|| NetworkError::MissingParam(spec.name.clone()))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(NetworkError::ParamShape {
                name: spec.name.clone(),
                expected: spec.shape.clone(),
                got: t.shape().to_vec(),
            });
        }
    }
    if set.len() != specs.len() {
        let extra = set
            .names()
            .iter()
            .find(|n| !specs.iter().any(|s| &s.name == *n))
            .cloned()
            .unwrap_or_default();
        return Err(NetworkError::UnexpectedParam(extra));
    }
    Ok(())
}
