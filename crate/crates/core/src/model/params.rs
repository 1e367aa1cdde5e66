use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Optimizer treatment of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Matrices and embeddings; weight decay applies.
    Weight,
    /// Biases and normalization gains; no weight decay.
    NoDecay,
    /// Attention prior scalars; no weight decay.
    Prior,
}

impl ParamGroup {
    pub fn token(self) -> &'static str {
        match self {
            ParamGroup::Weight => "weight",
            ParamGroup::NoDecay => "nodecay",
            ParamGroup::Prior => "prior",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        match s {
            "weight" => Some(ParamGroup::Weight),
            "nodecay" => Some(ParamGroup::NoDecay),
            "prior" => Some(ParamGroup::Prior),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
    /// Frozen parameters enter the tape as constants.
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Tape handles of a [`ParamSet`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor,
            group,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.set_requires_grad(p.trainable);
                tape.leaf(t)
            })
            .collect();
        Bound { vars }
    }

    /// Copies tape gradients into the parameters' accumulators, replacing
    /// previous contents. Frozen parameters get zeros.
    pub fn load_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            p.tensor.zero_grad();
            if let Some(g) = tape.grad(v) {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// All values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect()
    }

    /// All gradients concatenated in parameter order.
    pub fn flatten_grads(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.grad().iter().copied())
            .collect()
    }

    /// Overwrites all values from a flat vector in parameter order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::dim(
                "assign_flat",
                format!("expected {} values, got {}", self.numel(), flat.len()),
            ));
        }
        let mut at = 0;
        for p in &mut self.params {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}
