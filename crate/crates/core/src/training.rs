//! Loss assembly, Adam and the epoch loop with checkpointing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::alignment::{align_loss, AlignmentConfig};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, ModelScorer, Split};
use crate::model::{Model, Variant};
use crate::params::{read_checkpoint, write_checkpoint, ParameterStore};
use crate::rng::{derive_seed, seeded};
use crate::semantic::SemanticStore;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_NEGATIVES: u64 = 2;

pub const LAST_CHECKPOINT: &str = "last.frec";
pub const BEST_CHECKPOINT: &str = "best.frec";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,rec_loss,ila_loss,fla_loss,w_t,valid_HR10,valid_N10";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Weight of the alignment loss.
    pub alpha: f64,
    pub seed: u64,
    /// Epochs without a validation N@10 improvement before stopping; 0 never stops.
    pub patience: usize,
    /// Drop training-prefix items from the validation candidates.
    pub exclude_seen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            alpha: 0.3,
            seed: 42,
            patience: 10,
            exclude_seen: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("train.lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("train.adam_eps must be positive");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("train.alpha must be nonnegative");
        }
        Ok(())
    }
}

/// First and second moment buffers in parameter-store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Every parameter must carry a gradient.
pub fn adam_step(params: &mut ParameterStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::Contract(format!("no gradient for parameter {}", p.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.as_ref().expect("checked above");
        if grad.shape() != p.value.shape() || m.shape() != p.value.shape() {
            return Err(Error::shape("adam", p.value.shape(), grad.shape()));
        }
        let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
        for ((x, &gi), (mi, vi)) in p.value.data_mut().iter_mut().zip(grad.data()).zip(moments) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Negated binary cross-entropy with one negative per position, averaged
/// over positions: `−log σ(h·e⁺) − log σ(−h·e⁻)`.
pub fn rec_loss(g: &Graph, h: Var, e_pos: Var, e_neg: Var) -> Result<Var> {
    let pos = g.sum(g.mul(h, e_pos)?, Some(1))?;
    let neg = g.sum(g.mul(h, e_neg)?, Some(1))?;
    let per_position = g.add(g.log_sigmoid(pos)?, g.log_sigmoid(g.neg(neg)?)?)?;
    g.neg(g.mean(per_position, None)?)
}

/// Packed next-item training examples for a set of users.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub lens: Vec<usize>,
    pub inputs: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Inputs are each prefix without its last item and targets are the prefix
/// shifted by one. Prefixes shorter than two items are skipped. Negatives are
/// uniform over the catalog minus the positive.
pub fn make_batch<R: Rng + ?Sized>(prefixes: &[&[usize]], n_items: usize, rng: &mut R) -> Result<Option<Batch>> {
    if n_items < 2 {
        return Err(Error::Config("negative sampling needs at least two items".into()));
    }
    let mut b = Batch {
        lens: Vec::new(),
        inputs: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for p in prefixes.iter().filter(|p| p.len() >= 2) {
        b.lens.push(p.len() - 1);
        b.inputs.extend_from_slice(&p[..p.len() - 1]);
        b.positives.extend_from_slice(&p[1..]);
    }
    for &pos in &b.positives {
        let r = rng.random_range(0..n_items - 1);
        b.negatives.push(if r >= pos { r + 1 } else { r });
    }
    Ok((!b.lens.is_empty()).then_some(b))
}

/// Loss components of one batch. Disabled or skipped terms read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub ila: f64,
    pub fla: f64,
    pub w: f64,
    pub align: f64,
    pub total: f64,
}

fn positions(sorted: &[usize], ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .map(|i| sorted.binary_search(i).expect("id collected into the union"))
        .collect()
}

fn sorted_union<'a>(parts: impl IntoIterator<Item = &'a [usize]>) -> Vec<usize> {
    let mut all: Vec<usize> = parts.into_iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// `L_rec + α·L_align` on one batch at epoch `t`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &Graph,
    model: &Model,
    bindings: &crate::params::Bindings,
    semantic: Option<&SemanticStore>,
    batch: &Batch,
    popularity: &[u32],
    t: usize,
    cfg: &TrainConfig,
    align: &AlignmentConfig,
) -> Result<(Var, LossBreakdown)> {
    let ids = sorted_union([&batch.inputs[..], &batch.positives[..], &batch.negatives[..]]);
    let views = model.item_views(g, bindings, semantic, &ids, true)?;
    let x = g.gather(views.fused, &positions(&ids, &batch.inputs))?;
    let h = model.hidden_packed(g, bindings, x, &batch.lens)?;
    let e_pos = g.gather(views.fused, &positions(&ids, &batch.positives))?;
    let e_neg = g.gather(views.fused, &positions(&ids, &batch.negatives))?;
    let rec = rec_loss(g, h, e_pos, e_neg)?;
    let mut out = LossBreakdown {
        rec: g.item(rec)?,
        ..Default::default()
    };

    let aligning = cfg.alpha > 0.0
        && model.config().variant == Variant::Faerec
        && (align.mode.ila_enabled() || align.mode.fla_enabled());
    // A non-finite recommendation loss is reported before alignment can
    // trip over the same bad embeddings.
    let (Some(e_llm), true, true) = (views.e_llm, aligning, out.rec.is_finite()) else {
        out.total = out.rec;
        return Ok((rec, out));
    };
    let align_ids = sorted_union([&batch.inputs[..], &batch.positives[..]]);
    let rows = positions(&ids, &align_ids);
    let terms = align_loss(
        g,
        g.gather(views.e_id, &rows)?,
        g.gather(e_llm, &rows)?,
        &align_ids,
        popularity,
        t,
        align,
    )?;
    out.w = terms.w;
    out.ila = terms.ila.map(|v| g.item(v)).transpose()?.unwrap_or(0.0);
    out.fla = terms.fla.map(|v| g.item(v)).transpose()?.unwrap_or(0.0);
    out.align = g.item(terms.loss)?;
    let total = g.add(rec, g.scale(terms.loss, cfg.alpha)?)?;
    out.total = g.item(total)?;
    Ok((total, out))
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub rec: f64,
    pub ila: f64,
    pub fla: f64,
    pub w: f64,
    pub total: f64,
    pub valid_hr10: f64,
    pub valid_n10: f64,
}

impl EpochLog {
    const WIDTH: usize = 8;

    fn to_row(self) -> [f64; Self::WIDTH] {
        [
            self.epoch as f64,
            self.rec,
            self.ila,
            self.fla,
            self.w,
            self.total,
            self.valid_hr10,
            self.valid_n10,
        ]
    }

    fn from_row(r: &[f64]) -> Self {
        EpochLog {
            epoch: r[0] as usize,
            rec: r[1],
            ila: r[2],
            fla: r[3],
            w: r[4],
            total: r[5],
            valid_hr10: r[6],
            valid_n10: r[7],
        }
    }
}

pub fn write_metrics_csv<W: Write>(w: &mut W, log: &[EpochLog]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for e in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            e.epoch, e.rec, e.ila, e.fla, e.w, e.valid_hr10, e.valid_n10
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints and the metrics log.
    pub out_dir: Option<PathBuf>,
    /// Continue from `last.frec` in `out_dir` when present.
    pub resume: bool,
    /// Stop this invocation after this many epochs, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation N@10 (the initial ones if no
    /// epoch ran).
    pub best: Model,
    /// Parameters after the last completed epoch.
    pub last: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Everything needed to continue an interrupted run.
#[derive(Clone, Debug)]
struct RunState {
    params: ParameterStore,
    adam: AdamState,
    best: ParameterStore,
    best_n10: f64,
    best_epoch: Option<usize>,
    bad_epochs: usize,
    stopped: bool,
    log: Vec<EpochLog>,
}

impl RunState {
    fn save(&self, dir: &Path) -> Result<()> {
        let mut named = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            named.push((format!("param/{}", p.name), p.value.clone()));
            named.push((format!("adam.m/{}", p.name), self.adam.m[i].clone()));
            named.push((format!("adam.v/{}", p.name), self.adam.v[i].clone()));
        }
        let meta = vec![
            self.adam.step as f64,
            self.best_n10,
            self.best_epoch.map_or(-1.0, |e| e as f64),
            self.bad_epochs as f64,
            self.stopped as u8 as f64,
        ];
        named.push(("run.meta".into(), Tensor::vector(meta)));
        let rows: Vec<f64> = self.log.iter().flat_map(|e| e.to_row()).collect();
        named.push(("run.log".into(), Tensor::matrix(self.log.len(), EpochLog::WIDTH, rows)));
        write_checkpoint(&dir.join(LAST_CHECKPOINT), &named)?;
        self.best.save(&dir.join(BEST_CHECKPOINT))?;
        let mut csv = Vec::new();
        write_metrics_csv(&mut csv, &self.log)?;
        fs::write(dir.join(METRICS_FILE), csv)?;
        Ok(())
    }

    fn load(dir: &Path, template: &ParameterStore) -> Result<Self> {
        let named = read_checkpoint(&dir.join(LAST_CHECKPOINT))?;
        let find = |key: &str| {
            named
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))
        };
        let mut params = ParameterStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for p in template.iter() {
            let value = find(&format!("param/{}", p.name))?;
            if value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    value.shape(),
                    p.value.shape()
                )));
            }
            params.insert(p.name.clone(), value);
            m.push(find(&format!("adam.m/{}", p.name))?);
            v.push(find(&format!("adam.v/{}", p.name))?);
        }
        let meta = find("run.meta")?;
        let meta = meta.data();
        if meta.len() != 5 {
            return Err(Error::Format("malformed run.meta".into()));
        }
        let log_t = find("run.log")?;
        if log_t.rank() != 2 || log_t.shape()[1] != EpochLog::WIDTH {
            return Err(Error::Format("malformed run.log".into()));
        }
        let log = (0..log_t.rows()).map(|r| EpochLog::from_row(log_t.row(r))).collect();
        let best = ParameterStore::load(&dir.join(BEST_CHECKPOINT))?;
        Ok(RunState {
            params,
            adam: AdamState {
                step: meta[0] as u64,
                m,
                v,
            },
            best,
            best_n10: meta[1],
            best_epoch: (meta[2] >= 0.0).then_some(meta[2] as usize),
            bad_epochs: meta[3] as usize,
            stopped: meta[4] != 0.0,
            log,
        })
    }
}

fn check_finite(b: &LossBreakdown, epoch: usize, batch: usize) -> Result<()> {
    for (component, v) in [("rec", b.rec), ("ila", b.ila), ("fla", b.fla), ("total", b.total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: component.into(),
                epoch,
                batch,
            });
        }
    }
    Ok(())
}

/// Mean loss components over one epoch of shuffled mini-batches, updating
/// the parameters in place.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    state: &mut RunState,
    model: &Model,
    dataset: &InteractionDataset,
    semantic: Option<&SemanticStore>,
    prefixes: &[Vec<usize>],
    epoch: usize,
    cfg: &TrainConfig,
    align: &AlignmentConfig,
) -> Result<LossBreakdown> {
    let mut order: Vec<usize> = (0..prefixes.len()).collect();
    order.shuffle(&mut seeded(derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch as u64])));
    let mut sum = LossBreakdown::default();
    let mut batches = 0usize;
    let mut model = model.clone();
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let users: Vec<&[usize]> = chunk.iter().map(|&u| prefixes[u].as_slice()).collect();
        let mut rng = seeded(derive_seed(cfg.seed, &[STREAM_NEGATIVES, epoch as u64, bi as u64]));
        let Some(batch) = make_batch(&users, dataset.n_items(), &mut rng)? else {
            continue;
        };
        *model.params_mut() = std::mem::take(&mut state.params);
        let g = Graph::new();
        let bindings = model.params().bind(&g);
        let (loss, parts) = total_loss(
            &g,
            &model,
            &bindings,
            semantic,
            &batch,
            dataset.popularity(),
            epoch,
            cfg,
            align,
        )?;
        check_finite(&parts, epoch, bi)?;
        g.backward(loss)?;
        let params = model.params_mut();
        params.zero_grad();
        params.accumulate_grads(&g, &bindings);
        if let Some(p) = params.iter().find(|p| p.grad.as_ref().is_some_and(|t| !t.is_finite())) {
            return Err(Error::NonFinite {
                component: format!("gradient of {}", p.name),
                epoch,
                batch: bi,
            });
        }
        adam_step(params, &mut state.adam, cfg)?;
        params.zero_grad();
        state.params = std::mem::take(params);
        sum.rec += parts.rec;
        sum.ila += parts.ila;
        sum.fla += parts.fla;
        sum.align += parts.align;
        sum.total += parts.total;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::EmptyDataset(
            "no user has a training prefix of two or more items".into(),
        ));
    }
    let n = batches as f64;
    Ok(LossBreakdown {
        rec: sum.rec / n,
        ila: sum.ila / n,
        fla: sum.fla / n,
        w: align.mixing_weight(epoch),
        align: sum.align / n,
        total: sum.total / n,
    })
}

fn with_params(model: &Model, params: ParameterStore) -> Model {
    let mut m = model.clone();
    *m.params_mut() = params;
    m
}

/// Trains `model` for `cfg.epochs` epochs, validating after each one and
/// keeping the parameters with the best validation N@10.
pub fn train(
    model: Model,
    dataset: &InteractionDataset,
    semantic: Option<&SemanticStore>,
    cfg: &TrainConfig,
    align: &AlignmentConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    align.validate()?;
    if model.n_items() != dataset.n_items() {
        return Err(Error::Consistency(format!(
            "model has {} items, dataset has {}",
            model.n_items(),
            dataset.n_items()
        )));
    }
    if let Some(s) = semantic {
        s.check_items(dataset.n_items())?;
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let resume_dir = opts
        .out_dir
        .as_deref()
        .filter(|d| opts.resume && d.join(LAST_CHECKPOINT).exists());
    let mut state = match resume_dir {
        Some(dir) => RunState::load(dir, model.params())?,
        None => RunState {
            adam: AdamState::new(model.params()),
            best: model.params().clone(),
            params: model.params().clone(),
            best_n10: f64::NEG_INFINITY,
            best_epoch: None,
            bad_epochs: 0,
            stopped: false,
            log: Vec::new(),
        },
    };
    let prefixes: Vec<Vec<usize>> = dataset.leave_one_out().users.into_iter().map(|u| u.train).collect();
    let valid_opts = EvalOptions {
        ks: vec![10],
        exclude_seen: cfg.exclude_seen,
    };
    let mut ran = 0usize;
    let mut epoch = state.log.len();
    while epoch < cfg.epochs && !state.stopped && opts.stop_after.is_none_or(|n| ran < n) {
        let losses = run_epoch(&mut state, &model, dataset, semantic, &prefixes, epoch, cfg, align)?;
        let current = with_params(&model, state.params.clone());
        let report = evaluate(
            &ModelScorer::new(&current, semantic)?,
            dataset,
            Split::Valid,
            &valid_opts,
        )?;
        let (hr, n10) = (report.overall.hr[0], report.overall.ndcg[0]);
        state.log.push(EpochLog {
            epoch,
            rec: losses.rec,
            ila: losses.ila,
            fla: losses.fla,
            w: losses.w,
            total: losses.total,
            valid_hr10: hr,
            valid_n10: n10,
        });
        if n10 > state.best_n10 {
            state.best_n10 = n10;
            state.best_epoch = Some(epoch);
            state.best = state.params.clone();
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
            state.stopped = cfg.patience > 0 && state.bad_epochs >= cfg.patience;
        }
        if let Some(dir) = &opts.out_dir {
            state.save(dir)?;
        }
        epoch += 1;
        ran += 1;
    }
    if let Some(dir) = &opts.out_dir {
        state.save(dir)?;
    }
    Ok(TrainOutcome {
        best: with_params(&model, state.best.clone()),
        last: with_params(&model, state.params),
        log: state.log,
        best_epoch: state.best_epoch,
        stopped_early: state.stopped,
    })
}

#[cfg(test)]
mod tests;
