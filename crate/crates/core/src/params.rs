//! Named learnable tensors and their binding onto a tape.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::math;
use crate::tensor::Tensor;
use crate::{Error, GradTape, Result, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameters. Registration order is the
/// canonical order for optimizers and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight drawn uniform in `[−1/√fan_in, 1/√fan_in]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / math::sqrt(fan_in as f64);
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.add(name, t)
    }

    /// LeCun-uniform, `U(±√(3/fan_in))`, which keeps the output variance of
    /// a linear map equal to its input variance.
    pub fn add_lecun_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = math::sqrt(3.0 / fan_in as f64);
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.add(name, t)
    }

    /// He-uniform, `U(±√(6/fan_in))`, for weights feeding a ReLU.
    pub fn add_he_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = math::sqrt(6.0 / fan_in as f64);
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor from `(name, tensor)` pairs, which must match
    /// this store's names, order and shapes exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(Error::Input(alloc::format!(
                "expected {} parameters, got {}",
                self.tensors.len(),
                entries.len()
            )));
        }
        for (i, (name, t)) in entries.iter().enumerate() {
            if *name != self.names[i] {
                return Err(Error::Input(alloc::format!(
                    "parameter {i} is named {name:?}, expected {:?}",
                    self.names[i]
                )));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::mismatch("load", t.shape(), self.tensors[i].shape()));
            }
        }
        self.tensors = entries.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    /// Registers every parameter on `tape` as a borrowed learnable leaf.
    pub fn bind<'a>(&'a self, tape: &mut GradTape<'a>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
        }
    }

    /// Like [`bind`](Self::bind) but with one parameter replaced by an
    /// already-recorded variable.
    pub fn bind_with<'a>(&'a self, tape: &mut GradTape<'a>, id: ParamId, var: Var) -> Bound {
        let mut bound = self.bind(tape);
        bound.vars[id.0] = var;
        bound
    }

    /// Copies every parameter onto the tape as an owned learnable leaf.
    pub fn bind_owned(&self, tape: &mut GradTape<'_>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param_owned(t.clone())).collect(),
        }
    }

    /// Like [`bind_with`](Self::bind_with) but copies the other parameters
    /// onto the tape, so the tape does not borrow the store.
    pub fn bind_owned_with(&self, tape: &mut GradTape<'_>, id: ParamId, var: Var) -> Bound {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if i == id.0 { var } else { tape.param_owned(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Tape variables for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
