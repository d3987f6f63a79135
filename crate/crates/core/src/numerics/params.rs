use alloc::string::String;
use alloc::vec::Vec;

use super::rng::Rng;
use super::tensor::Tensor;

/// Initial value distribution of a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A named tensor that an optimizer may update unless frozen.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub tensor: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Owns every parameter and non-trainable buffer (running statistics) of a model.
///
/// A *dry* store records names and shapes only; its tensors are empty. It is
/// used to account for models too large to materialize.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<(String, Tensor)>,
    dry: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dry() -> Self {
        Self { dry: true, ..Self::default() }
    }

    pub fn is_dry(&self) -> bool {
        self.dry
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let shape = tensor.shape().to_vec();
        let tensor = if self.dry { Tensor::zeros(&[0]) } else { tensor };
        self.params.push(Parameter { name, shape, tensor, frozen: false });
        ParamId(self.params.len() - 1)
    }

    /// Adds a parameter drawn from `init`. Dry stores consume no randomness.
    pub fn add_init(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut Rng) -> ParamId {
        let tensor = if self.dry {
            Tensor::zeros(&[0])
        } else {
            match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Const(v) => Tensor::full(shape, v),
                Init::Normal(std) => Tensor::randn(shape, std, rng),
            }
        };
        let name = name.into();
        let shape = shape.to_vec();
        self.params.push(Parameter { name, shape, tensor, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> BufferId {
        let tensor = if self.dry { Tensor::zeros(&[0]) } else { tensor };
        self.buffers.push((name.into(), tensor));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.buffers.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|(n, _)| n == name).map(BufferId)
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    /// Sets the frozen flag of every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(Parameter::numel).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }
}
