//! Item-level (InfoNCE) and feature-level (standardized cross-correlation)
//! alignment between ID and projected semantic embeddings, mixed by a
//! cosine curriculum over epochs.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Variance floor under the square root in [`standardize`].
const VAR_FLOOR: f64 = 1e-24;

/// Which alignment components are switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AlignMode {
    pub no_ila: bool,
    pub no_fla: bool,
    pub no_cls: bool,
    pub no_pg: bool,
}

impl AlignMode {
    pub fn full() -> Self {
        AlignMode::default()
    }

    pub fn ila_enabled(&self) -> bool {
        !self.no_ila
    }

    pub fn fla_enabled(&self) -> bool {
        !self.no_fla
    }
}

impl FromStr for AlignMode {
    type Err = Error;

    /// Parses `full` or a `+`-joined set of `no_ila`, `no_fla`, `no_cls`,
    /// `no_pg`.
    fn from_str(s: &str) -> Result<Self> {
        let mut mode = AlignMode::default();
        if s.trim() == "full" {
            return Ok(mode);
        }
        for part in s.split('+').map(str::trim) {
            let flag = match part {
                "no_ila" => &mut mode.no_ila,
                "no_fla" => &mut mode.no_fla,
                "no_cls" => &mut mode.no_cls,
                "no_pg" => &mut mode.no_pg,
                other => return Err(Error::Config(format!("unknown alignment mode {other:?}"))),
            };
            *flag = true;
        }
        Ok(mode)
    }
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.no_ila, "no_ila"),
            (self.no_fla, "no_fla"),
            (self.no_cls, "no_cls"),
            (self.no_pg, "no_pg"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|&(_, name)| name)
        .collect();
        if parts.is_empty() {
            f.write_str("full")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentConfig {
    /// InfoNCE temperature τ.
    pub tau: f64,
    /// Weight λ of the off-diagonal redundancy term.
    pub lambda: f64,
    pub w_max: f64,
    pub w_min: f64,
    /// Curriculum period T in epochs.
    pub period: usize,
    /// Split each batch at median popularity before the feature-level loss.
    pub grouping: bool,
    pub eps_std: f64,
    pub mode: AlignMode,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            tau: 0.1,
            lambda: 0.01,
            w_max: 1.0,
            w_min: 0.0,
            period: 1,
            grouping: true,
            eps_std: 1e-8,
            mode: AlignMode::full(),
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("align.tau must be positive");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("align.lambda must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.w_min) || !(0.0..=1.0).contains(&self.w_max) || self.w_min > self.w_max {
            return bad("align.w_min and align.w_max must satisfy 0 <= w_min <= w_max <= 1");
        }
        if self.period == 0 {
            return bad("align.period must be positive");
        }
        if self.eps_std.is_nan() || self.eps_std <= 0.0 {
            return bad("align eps must be positive");
        }
        Ok(())
    }

    fn grouping_active(&self) -> bool {
        self.grouping && !self.mode.no_pg
    }

    /// Weight on the item-level term at epoch `t` after applying the mode:
    /// 0 without ILA, 1 without FLA, 0.5 without the curriculum.
    pub fn mixing_weight(&self, t: usize) -> f64 {
        match (self.mode.no_ila, self.mode.no_fla) {
            (true, _) => 0.0,
            (false, true) => 1.0,
            _ if self.mode.no_cls => 0.5,
            _ => curriculum_weight(t, self),
        }
    }
}

/// `(w_max − w_min)·(1 + cos(2πt/T))/2 + w_min`.
pub fn curriculum_weight(t: usize, cfg: &AlignmentConfig) -> f64 {
    let phase = 2.0 * PI * t as f64 / cfg.period as f64;
    (cfg.w_max - cfg.w_min) * (1.0 + phase.cos()) / 2.0 + cfg.w_min
}

fn row_normalize(g: &Graph, x: Var, what: &str) -> Result<Var> {
    let norms = g.sqrt_floor(g.sum(g.square(x)?, Some(1))?, 0.0)?;
    if g.with_value(norms, |n| n.data().contains(&0.0)) {
        return Err(Error::Degenerate(format!("zero-norm row in {what}")));
    }
    g.mul_col(x, g.recip(norms)?)
}

/// InfoNCE over cosine similarities: row `i` of `e_id` is pulled towards row
/// `i` of `e_llm` and pushed from the other rows.
pub fn ila_loss(g: &Graph, e_id: Var, e_llm: Var, tau: f64) -> Result<Var> {
    let (sa, sb) = (g.shape(e_id), g.shape(e_llm));
    if sa.len() != 2 || sa != sb {
        return Err(Error::Shape {
            op: "ila_loss",
            lhs: sa,
            rhs: sb,
        });
    }
    let a = row_normalize(g, e_id, "ID embeddings")?;
    let b = row_normalize(g, e_llm, "semantic embeddings")?;
    let sims = g.scale(g.matmul(a, g.transpose(b)?)?, 1.0 / tau)?;
    let log_probs = g.log_softmax_rows(sims)?;
    g.neg(g.mean(g.diag(log_probs)?, None)?)
}

/// Batch items split at the lower median popularity; ties go high.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchGroups {
    pub high_ids: Vec<usize>,
    pub low_ids: Vec<usize>,
    pub median: u32,
}

/// `popularity` is indexed by item id.
pub fn split_by_median(item_ids: &[usize], popularity: &[u32]) -> BatchGroups {
    if item_ids.is_empty() {
        return BatchGroups::default();
    }
    let mut pops: Vec<u32> = item_ids.iter().map(|&i| popularity[i]).collect();
    pops.sort_unstable();
    let median = pops[(pops.len() - 1) / 2];
    let (high_ids, low_ids) = item_ids.iter().partition(|&&i| popularity[i] >= median);
    BatchGroups {
        high_ids,
        low_ids,
        median,
    }
}

/// Column-wise `(x − μ)/(σ + eps)` with the population standard deviation.
pub fn standardize(g: &Graph, e: Var, eps: f64) -> Result<Var> {
    let shape = g.shape(e);
    if shape.len() != 2 {
        return Err(Error::shape("standardize", &shape, &[]));
    }
    if shape[0] < 2 {
        return Err(Error::GroupTooSmall(shape[0]));
    }
    let mu = g.mean(e, Some(0))?;
    let centered = g.add_row(e, g.neg(mu)?)?;
    let var = g.mean(g.square(centered)?, Some(0))?;
    let sigma = g.sqrt_floor(var, VAR_FLOOR)?;
    g.mul_row(centered, g.recip(g.shift(sigma, eps)?)?)
}

fn column_norms(g: &Graph, z: Var, what: &str) -> Result<Var> {
    let norms = g.sqrt_floor(g.sum(g.square(z)?, Some(0))?, 0.0)?;
    if g.with_value(norms, |n| n.data().contains(&0.0)) {
        return Err(Error::Degenerate(format!("zero-norm column in {what}")));
    }
    Ok(norms)
}

/// `C_ij = Σ_s z_id[s,i]·z_llm[s,j] / (‖z_id[:,i]‖·‖z_llm[:,j]‖)`.
pub fn cross_corr(g: &Graph, z_id: Var, z_llm: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(z_id), g.shape(z_llm));
    if sa.len() != 2 || sa != sb {
        return Err(Error::Shape {
            op: "cross_corr",
            lhs: sa,
            rhs: sb,
        });
    }
    let n_id = column_norms(g, z_id, "ID embeddings")?;
    let n_llm = column_norms(g, z_llm, "semantic embeddings")?;
    let raw = g.matmul(g.transpose(z_id)?, z_llm)?;
    let c = g.mul_col(raw, g.recip(n_id)?)?;
    g.mul_row(c, g.recip(n_llm)?)
}

/// `Σᵢ(1 − Cᵢᵢ)² + λ·Σ_{i≠j} Cᵢⱼ²`.
pub fn fla_group_loss(g: &Graph, c: Var, lambda: f64) -> Result<Var> {
    let shape = g.shape(c);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape("fla_group_loss", &shape, &[]));
    }
    let d = shape[0];
    let invariance = g.sum(g.square(g.shift(g.neg(g.diag(c)?)?, 1.0)?)?, None)?;
    let mut mask = Tensor::filled(&[d, d], 1.0);
    for i in 0..d {
        mask.data_mut()[i * d + i] = 0.0;
    }
    let off = g.mul(c, g.constant(mask))?;
    let redundancy = g.sum(g.square(off)?, None)?;
    g.add(invariance, g.scale(redundancy, lambda)?)
}

fn group_loss(g: &Graph, e_id: Var, e_llm: Var, rows: &[usize], cfg: &AlignmentConfig) -> Result<Option<Var>> {
    if rows.len() < 2 {
        return Ok(None);
    }
    let z_id = standardize(g, g.gather(e_id, rows)?, cfg.eps_std)?;
    let z_llm = standardize(g, g.gather(e_llm, rows)?, cfg.eps_std)?;
    match cross_corr(g, z_id, z_llm) {
        Ok(c) => Ok(Some(fla_group_loss(g, c, cfg.lambda)?)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Feature-level loss summed over popularity groups. Row `r` of `e_id` and
/// `e_llm` belongs to item `item_ids[r]`; groups with fewer than two items
/// or a constant dimension contribute 0.
pub fn fla_loss(
    g: &Graph,
    e_id: Var,
    e_llm: Var,
    item_ids: &[usize],
    popularity: &[u32],
    cfg: &AlignmentConfig,
) -> Result<Var> {
    let (sa, sb) = (g.shape(e_id), g.shape(e_llm));
    if sa.len() != 2 || sa != sb || sa[0] != item_ids.len() {
        return Err(Error::Shape {
            op: "fla_loss",
            lhs: sa,
            rhs: sb,
        });
    }
    let all: Vec<usize> = (0..item_ids.len()).collect();
    let groups: Vec<Vec<usize>> = if cfg.grouping_active() {
        let split = split_by_median(item_ids, popularity);
        // map item ids back to row positions; ids are unique within a batch
        let row_of = |ids: &[usize]| -> Vec<usize> {
            ids.iter()
                .map(|id| item_ids.iter().position(|x| x == id).expect("id from this batch"))
                .collect()
        };
        vec![row_of(&split.high_ids), row_of(&split.low_ids)]
    } else {
        vec![all]
    };
    let mut total: Option<Var> = None;
    for rows in &groups {
        if let Some(l) = group_loss(g, e_id, e_llm, rows, cfg)? {
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
    }
    Ok(total.unwrap_or_else(|| g.scalar(0.0)))
}

/// Alignment loss with the individual terms kept for logging. Disabled terms
/// are not evaluated at all.
#[derive(Clone, Copy, Debug)]
pub struct AlignTerms {
    pub loss: Var,
    pub ila: Option<Var>,
    pub fla: Option<Var>,
    pub w: f64,
}

/// `w(t)·L_ILA + (1 − w(t))·L_FLA` with the mode's overrides on `w`.
pub fn align_loss(
    g: &Graph,
    e_id: Var,
    e_llm: Var,
    item_ids: &[usize],
    popularity: &[u32],
    t: usize,
    cfg: &AlignmentConfig,
) -> Result<AlignTerms> {
    let w = cfg.mixing_weight(t);
    let ila = if cfg.mode.ila_enabled() {
        Some(ila_loss(g, e_id, e_llm, cfg.tau)?)
    } else {
        None
    };
    let fla = if cfg.mode.fla_enabled() {
        Some(fla_loss(g, e_id, e_llm, item_ids, popularity, cfg)?)
    } else {
        None
    };
    let loss = mix(g, w, ila, fla)?;
    Ok(AlignTerms { loss, ila, fla, w })
}

/// Weighted sum of whichever terms are present.
pub fn mix(g: &Graph, w: f64, ila: Option<Var>, fla: Option<Var>) -> Result<Var> {
    match (ila, fla) {
        (Some(i), Some(f)) => g.add(g.scale(i, w)?, g.scale(f, 1.0 - w)?),
        (Some(i), None) => g.scale(i, w),
        (None, Some(f)) => g.scale(f, 1.0 - w),
        (None, None) => Ok(g.scalar(0.0)),
    }
}
