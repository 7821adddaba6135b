//! Dimension-wise gated fusion of ID and semantic item embeddings.
//!
//! The gate is `g = σ(W₂(W₁[e_id ⊕ e_llm] + b₁) + b₂)` with no activation
//! between the two affine maps. Weights are stored output-major
//! (`W₁: 2d × 2d`, `W₂: d × 2d`), so they are applied transposed.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParameterStore};
use crate::rng::normal_tensor;

const W1: &str = "gate.w1";
const B1: &str = "gate.b1";
const W2: &str = "gate.w2";
const B2: &str = "gate.b2";

/// Standard deviation of the first gate layer at initialization.
pub const GATE_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct GateNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GateNet {
    pub fn zeros(d: usize) -> Self {
        GateNet {
            w1: Tensor::zeros(&[2 * d, 2 * d]),
            b1: Tensor::zeros(&[2 * d]),
            w2: Tensor::zeros(&[d, 2 * d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    /// Small random `W₁` and zero everywhere else: the gate starts at exactly
    /// 0.5 yet every parameter receives gradient from the second step on.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        GateNet {
            w1: normal_tensor(rng, &[2 * d, 2 * d], GATE_INIT_STD),
            ..GateNet::zeros(d)
        }
    }

    pub fn insert_into(&self, store: &mut ParameterStore) {
        store.insert(W1, self.w1.clone());
        store.insert(B1, self.b1.clone());
        store.insert(W2, self.w2.clone());
        store.insert(B2, self.b2.clone());
    }

    pub fn from_store(store: &ParameterStore) -> Result<Self> {
        Ok(GateNet {
            w1: store.require(W1)?.clone(),
            b1: store.require(B1)?.clone(),
            w2: store.require(W2)?.clone(),
            b2: store.require(B2)?.clone(),
        })
    }

    pub fn is_in(store: &ParameterStore) -> bool {
        store.contains(W1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GateVars {
    pub fn from_bindings(b: &Bindings) -> Result<Self> {
        Ok(GateVars {
            w1: b.var(W1)?,
            b1: b.var(B1)?,
            w2: b.var(W2)?,
            b2: b.var(B2)?,
        })
    }
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Shape { op, lhs: sa, rhs: sb });
    }
    Ok(())
}

/// Per-dimension fusion weights in (0, 1) for a batch of items.
pub fn gate(g: &Graph, net: &GateVars, e_id: Var, e_llm: Var) -> Result<Var> {
    same_shape(g, "gate", e_id, e_llm)?;
    let x = g.concat_cols(e_id, e_llm)?;
    let h = g.affine(x, g.transpose(net.w1)?, net.b1)?;
    let z = g.affine(h, g.transpose(net.w2)?, net.b2)?;
    g.sigmoid(z)
}

/// `g ⊙ e_id + (1 − g) ⊙ e_llm`.
pub fn fuse_train(g: &Graph, gate: Var, e_id: Var, e_llm: Var) -> Result<Var> {
    same_shape(g, "fuse", e_id, e_llm)?;
    same_shape(g, "fuse", gate, e_id)?;
    let keep = g.mul(gate, e_id)?;
    let rest = g.shift(g.neg(gate)?, 1.0)?;
    g.add(keep, g.mul(rest, e_llm)?)
}

/// Equal-weight fusion used at inference and when the gate is disabled.
pub fn fuse_infer(g: &Graph, e_id: Var, e_llm: Var) -> Result<Var> {
    same_shape(g, "fuse", e_id, e_llm)?;
    g.add(g.scale(e_id, 0.5)?, g.scale(e_llm, 0.5)?)
}
