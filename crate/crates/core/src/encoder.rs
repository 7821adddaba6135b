//! Sequence encoders producing the user state from fused item embeddings.
//!
//! Sequences travel packed: the rows of all sequences in a batch are stacked
//! and described by their lengths. Positions are right-aligned so that the
//! last item of every sequence sits at position `max_len − 1`, which is where
//! it would land under left padding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParameterStore};
use crate::rng::normal_tensor;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Causal single-head self-attention blocks.
    Attn,
    /// The last item embedding itself.
    Last,
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn" => Ok(EncoderKind::Attn),
            "last" => Ok(EncoderKind::Last),
            other => Err(Error::Config(format!("unknown encoder kind {other:?}"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Attn => "attn",
            EncoderKind::Last => "last",
        })
    }
}

fn block_name(b: usize, part: &str) -> String {
    format!("enc.{b}.{part}")
}

const BLOCK_PARTS: [&str; 12] = [
    "wq", "wk", "wv", "wo", "ff1.w", "ff1.b", "ff2.w", "ff2.b", "ln1.g", "ln1.b", "ln2.g", "ln2.b",
];

/// Registers positional embeddings and `n_blocks` attention blocks.
pub fn init_attn_params<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    d: usize,
    d_ff: usize,
    n_blocks: usize,
    max_len: usize,
    rng: &mut R,
) {
    store.insert("enc.pos", normal_tensor(rng, &[max_len, d], INIT_STD));
    for b in 0..n_blocks {
        for part in ["wq", "wk", "wv", "wo"] {
            store.insert(block_name(b, part), normal_tensor(rng, &[d, d], INIT_STD));
        }
        store.insert(block_name(b, "ff1.w"), normal_tensor(rng, &[d, d_ff], INIT_STD));
        store.insert(block_name(b, "ff1.b"), Tensor::zeros(&[d_ff]));
        store.insert(block_name(b, "ff2.w"), normal_tensor(rng, &[d_ff, d], INIT_STD));
        store.insert(block_name(b, "ff2.b"), Tensor::zeros(&[d]));
        for ln in ["ln1", "ln2"] {
            store.insert(block_name(b, &format!("{ln}.g")), Tensor::filled(&[d], 1.0));
            store.insert(block_name(b, &format!("{ln}.b")), Tensor::zeros(&[d]));
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

/// Attention encoder bound to a graph.
#[derive(Clone, Debug)]
pub struct AttnEncoder {
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub max_len: usize,
    pub ln_eps: f64,
}

impl AttnEncoder {
    pub fn from_bindings(b: &Bindings, n_blocks: usize, max_len: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let v: Vec<Var> = BLOCK_PARTS
                .iter()
                .map(|p| b.var(&block_name(i, p)))
                .collect::<Result<_>>()?;
            blocks.push(BlockVars {
                wq: v[0],
                wk: v[1],
                wv: v[2],
                wo: v[3],
                ff1_w: v[4],
                ff1_b: v[5],
                ff2_w: v[6],
                ff2_b: v[7],
                ln1_g: v[8],
                ln1_b: v[9],
                ln2_g: v[10],
                ln2_b: v[11],
            });
        }
        Ok(AttnEncoder {
            pos: b.var("enc.pos")?,
            blocks,
            max_len,
            ln_eps: LN_EPS,
        })
    }

    /// Hidden states at every position of packed sequences `x` (N × d) with
    /// the given lengths.
    pub fn hidden_packed(&self, g: &Graph, x: Var, lens: &[usize]) -> Result<Var> {
        let mut segments = Vec::with_capacity(lens.len());
        let mut positions = Vec::with_capacity(lens.iter().sum());
        let mut start = 0;
        for &len in lens {
            if len == 0 || len > self.max_len {
                return Err(Error::shape("encode_attn", &[len], &[self.max_len]));
            }
            segments.push((start, len));
            positions.extend(self.max_len - len..self.max_len);
            start += len;
        }
        let mut h = g.add(x, g.gather(self.pos, &positions)?)?;
        for blk in &self.blocks {
            let q = g.matmul(h, blk.wq)?;
            let k = g.matmul(h, blk.wk)?;
            let v = g.matmul(h, blk.wv)?;
            let attn = g.matmul(g.causal_attention(q, k, v, &segments)?, blk.wo)?;
            h = self.norm(g, g.add(h, attn)?, blk.ln1_g, blk.ln1_b)?;
            let ff = g.relu(g.affine(h, blk.ff1_w, blk.ff1_b)?)?;
            let ff = g.affine(ff, blk.ff2_w, blk.ff2_b)?;
            h = self.norm(g, g.add(h, ff)?, blk.ln2_g, blk.ln2_b)?;
        }
        Ok(h)
    }

    fn norm(&self, g: &Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x, self.ln_eps)?;
        g.add_row(g.mul_row(n, gain)?, bias)
    }

    /// User state for one sequence `f_u` (L × d) whose rows flagged in `pad`
    /// are padding. Returns a 1 × d row.
    pub fn encode(&self, g: &Graph, f_u: Var, pad: &[bool]) -> Result<Var> {
        let rows = real_rows(g, f_u, pad)?;
        if g.shape(f_u)[0] > self.max_len {
            return Err(Error::shape("encode_attn", &g.shape(f_u), &[self.max_len]));
        }
        let x = g.gather(f_u, &rows)?;
        let h = self.hidden_packed(g, x, &[rows.len()])?;
        g.gather(h, &[rows.len() - 1])
    }
}

fn real_rows(g: &Graph, f_u: Var, pad: &[bool]) -> Result<Vec<usize>> {
    let shape = g.shape(f_u);
    if shape.len() != 2 || shape[0] != pad.len() {
        return Err(Error::shape("encode", &shape, &[pad.len()]));
    }
    let rows: Vec<usize> = (0..pad.len()).filter(|&i| !pad[i]).collect();
    if rows.is_empty() {
        return Err(Error::Contract("sequence has no items".into()));
    }
    Ok(rows)
}

/// The last non-padded row of `f_u`, as a 1 × d row.
pub fn encode_last(g: &Graph, f_u: Var, pad: &[bool]) -> Result<Var> {
    let rows = real_rows(g, f_u, pad)?;
    g.gather(f_u, &rows[rows.len() - 1..])
}

/// Indices of the last row of each packed sequence.
pub fn last_rows(lens: &[usize]) -> Vec<usize> {
    lens.iter()
        .scan(0, |end, &l| {
            *end += l;
            Some(*end - 1)
        })
        .collect()
}
