//! Named parameter storage shared by every trainable module.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Graph leaves for every entry of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Leaves created by the caller, one per store entry in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// Register every entry on `g`; trainable entries become gradient leaves.
    pub fn bind(&self, g: &Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| g.leaf(e.value.clone(), e.trainable))
            .collect();
        Bound { vars }
    }
}

/// Affine map `x @ w + b` over the last axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// How to initialize the weight of an [`Affine`]; biases always start at zero.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// He-normal, suited to a following ReLU.
    He,
    Normal(f64),
}

impl Affine {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Zeros => Tensor::zeros(&[fan_in, fan_out]),
            Init::He => Tensor::randn(&[fan_in, fan_out], (2.0 / fan_in as f64).sqrt(), rng),
            Init::Normal(std) => Tensor::randn(&[fan_in, fan_out], std, rng),
        };
        let w = store.add(format!("{name}.weight"), w, true);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), p.var(self.b))
    }
}
