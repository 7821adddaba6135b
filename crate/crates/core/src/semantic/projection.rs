use rand::Rng;

use super::SemanticStore;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::params::{Bindings, ParameterStore};
use crate::rng::xavier_normal;

const W1: &str = "proj.w1";
const B1: &str = "proj.b1";
const W2: &str = "proj.w2";
const B2: &str = "proj.b2";

/// Two-layer MLP `tanh(x·W₁ + b₁)·W₂ + b₂` from `d_llm` to `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ProjectionNet {
    pub fn hidden_width(d_llm: usize) -> usize {
        d_llm.div_ceil(2)
    }

    pub fn zeros(d_llm: usize, hidden: usize, d: usize) -> Self {
        ProjectionNet {
            w1: Tensor::zeros(&[d_llm, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    /// Glorot-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(d_llm: usize, d: usize, rng: &mut R) -> Self {
        let h = Self::hidden_width(d_llm);
        ProjectionNet {
            w1: xavier_normal(rng, d_llm, h),
            b1: Tensor::zeros(&[h]),
            w2: xavier_normal(rng, h, d),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn insert_into(&self, store: &mut ParameterStore) {
        store.insert(W1, self.w1.clone());
        store.insert(B1, self.b1.clone());
        store.insert(W2, self.w2.clone());
        store.insert(B2, self.b2.clone());
    }

    pub fn from_store(store: &ParameterStore) -> Result<Self> {
        Ok(ProjectionNet {
            w1: store.require(W1)?.clone(),
            b1: store.require(B1)?.clone(),
            w2: store.require(W2)?.clone(),
            b2: store.require(B2)?.clone(),
        })
    }
}

/// Graph handles for the projection parameters.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ProjectionVars {
    pub fn from_bindings(b: &Bindings) -> Result<Self> {
        Ok(ProjectionVars {
            w1: b.var(W1)?,
            b1: b.var(B1)?,
            w2: b.var(W2)?,
            b2: b.var(B2)?,
        })
    }
}

/// Projects the semantic rows of `ids` into the model dimension. The rows
/// enter the graph as constants, so the store never receives gradient.
pub fn project_llm(g: &Graph, net: &ProjectionVars, store: &SemanticStore, ids: &[usize]) -> Result<Var> {
    let x = g.constant(store.gather(ids)?);
    let h = g.tanh(g.affine(x, net.w1, net.b1)?)?;
    g.affine(h, net.w2, net.b2)
}
