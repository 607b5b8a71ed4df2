//! Named parameter storage and per-forward binding onto a tape.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (running statistics) are stored and serialized but never
    /// receive gradients.
    pub trainable: bool,
}

/// Ordered collection of named tensors.
///
/// Random initializers draw from a generator keyed by `(seed, name)`, so a
/// parameter's initial value does not depend on which other parameters exist
/// or in which order they were created.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    seed: u64,
}

fn name_key(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

impl<T: Element> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self { params: Vec::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ name_key(name))
    }

    /// He-style uniform init `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`; fan-in is
    /// the product of all axes after the first.
    pub fn he_uniform(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let name = name.into();
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        let bound = (6.0 / fan_in as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> ParamId {
        let name = name.into();
        let mut rng = self.rng_for(&name);
        let dist = Uniform::new_inclusive(-bound, bound);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect();
        self.add(name, Tensor::from_vec(shape, data).expect("positive shape"), true)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape), true)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape), true)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.add(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Overwrite the value of `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.params[id.0].value.shape() {
            return Err(Error::InvalidArgument(format!(
                "parameter {} expects shape {:?}, got {:?}",
                self.params[id.0].name,
                self.params[id.0].value.shape(),
                value.shape()
            )));
        }
        self.params[id.0].value = value;
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
            seed: self.seed,
        }
    }
}

/// A tape plus the parameters bound onto it for one forward/backward pass.
pub struct Graph<'p, T: Element> {
    pub tape: Tape<T>,
    store: &'p mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new(store: &'p mut ParamStore<T>, train: bool) -> Self {
        let n = store.len();
        Self { tape: Tape::new(), store, bound: vec![None; n], train }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    /// Leaf for parameter `id`, created on first use. Buffers are constants.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let p = &self.store.params[id.0];
        let v = self.tape.leaf(p.value.clone(), p.trainable)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.tape.backward(root)
    }

    /// Gradients of every bound trainable parameter after [`Graph::backward`].
    /// Parameters that were bound but received no gradient report zeros.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let p = &self.store.params[i];
                if !p.trainable {
                    return None;
                }
                let g = self.tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                Some((ParamId(i), g))
            })
            .collect()
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }
}
