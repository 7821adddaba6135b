//! Full-catalog ranking evaluation.
//!
//! Every catalog item is scored for every user. Ties are pessimistic: the
//! target ranks after every candidate with an equal score.

use std::fmt::{self, Write as _};
use std::io::Write;

use crate::autodiff::Tensor;
use crate::data::{InteractionDataset, UserSplit};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::semantic::SemanticStore;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];
/// Lower bounds of the popularity buckets; the last bucket is open-ended.
pub const BUCKET_EDGES: [u32; 5] = [0, 5, 10, 20, 50];
const USER_CHUNK: usize = 512;

/// Anything that can score the whole catalog for a batch of histories.
pub trait Scorer {
    fn n_items(&self) -> usize;
    /// `histories.len() × n_items` scores.
    fn score(&self, histories: &[&[usize]]) -> Result<Tensor>;
}

/// Scores with a model, caching the inference item table.
pub struct ModelScorer<'a> {
    model: &'a Model,
    semantic: Option<&'a SemanticStore>,
    table: Tensor,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, semantic: Option<&'a SemanticStore>) -> Result<Self> {
        let table = model.item_table(semantic)?;
        Ok(ModelScorer { model, semantic, table })
    }
}

impl Scorer for ModelScorer<'_> {
    fn n_items(&self) -> usize {
        self.model.n_items()
    }

    fn score(&self, histories: &[&[usize]]) -> Result<Tensor> {
        self.model.score_with_table(self.semantic, &self.table, histories)
    }
}

/// Scores from a fixed user-state matrix and item table; handy for hand-built
/// models. Each history is mapped to a user row by its last item.
pub struct TableScorer {
    pub users: Tensor,
    pub items: Tensor,
}

impl Scorer for TableScorer {
    fn n_items(&self) -> usize {
        self.items.rows()
    }

    fn score(&self, histories: &[&[usize]]) -> Result<Tensor> {
        let n = self.n_items();
        let mut out = Vec::with_capacity(histories.len() * n);
        for h in histories {
            let last = *h.last().ok_or_else(|| Error::Contract("empty history".into()))?;
            let u = self.users.row(last);
            out.extend((0..n).map(|i| u.iter().zip(self.items.row(i)).map(|(a, b)| a * b).sum::<f64>()));
        }
        Ok(Tensor::matrix(histories.len(), n, out))
    }
}

/// 1 + number of non-excluded candidates scoring at least as high as the
/// target. The target itself is never excluded.
pub fn rank_of(scores: &[f64], target: usize, excluded: &[bool]) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| i != target && !excluded.get(i).copied().unwrap_or(false) && x >= s)
        .count()
}

/// Rank of `target` after reading `history`, excluding `seen` items.
pub fn rank_all(scorer: &dyn Scorer, history: &[usize], target: usize, seen: &[usize]) -> Result<usize> {
    let n = scorer.n_items();
    if target >= n {
        return Err(Error::Index { index: target, len: n });
    }
    let scores = scorer.score(&[history])?;
    Ok(rank_of(scores.row(0), target, &mask(n, seen)))
}

fn mask(n: usize, items: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &i in items {
        if i < n {
            m[i] = true;
        }
    }
    m
}

pub fn hr_ndcg(rank: usize, k: usize) -> (f64, f64) {
    if rank >= 1 && rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

/// Highest-scoring `k` non-excluded items, by score descending then id.
pub fn top_k(scores: &[f64], k: usize, excluded: &[bool]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len())
        .filter(|&i| !excluded.get(i).copied().unwrap_or(false))
        .collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Catalog coverage and tail coverage of a set of top-K lists.
pub fn coverage(lists: &[Vec<usize>], head_flags: &[bool], k: usize) -> Result<(f64, f64)> {
    for (u, list) in lists.iter().enumerate() {
        if list.len() != k {
            return Err(Error::Contract(format!(
                "list {u} has {} items, expected {k}",
                list.len()
            )));
        }
    }
    union_coverage(lists, head_flags)
}

fn union_coverage(lists: &[Vec<usize>], head_flags: &[bool]) -> Result<(f64, f64)> {
    let n = head_flags.len();
    let mut hit = vec![false; n];
    for &i in lists.iter().flatten() {
        *hit.get_mut(i).ok_or(Error::Index { index: i, len: n })? = true;
    }
    let n_tail = head_flags.iter().filter(|h| !**h).count();
    let covered = hit.iter().filter(|h| **h).count();
    let tail_covered = hit.iter().zip(head_flags).filter(|(h, head)| **h && !**head).count();
    let cov = if n == 0 { 0.0 } else { covered as f64 / n as f64 };
    let tcov = if n_tail == 0 {
        0.0
    } else {
        tail_covered as f64 / n_tail as f64
    };
    Ok((cov, tcov))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub exclude_seen: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: DEFAULT_KS.to_vec(),
            exclude_seen: true,
        }
    }
}

/// Mean HR and NDCG per cut-off over a group of users.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMetrics {
    pub users: usize,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
}

impl GroupMetrics {
    fn new(n_ks: usize) -> Self {
        GroupMetrics {
            users: 0,
            hr: vec![0.0; n_ks],
            ndcg: vec![0.0; n_ks],
        }
    }

    fn add(&mut self, rank: usize, ks: &[usize]) {
        self.users += 1;
        for (j, &k) in ks.iter().enumerate() {
            let (h, n) = hr_ndcg(rank, k);
            self.hr[j] += h;
            self.ndcg[j] += n;
        }
    }

    fn finish(&mut self) {
        if self.users > 0 {
            let n = self.users as f64;
            self.hr.iter_mut().chain(self.ndcg.iter_mut()).for_each(|v| *v /= n);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub n_users: usize,
    pub overall: GroupMetrics,
    pub tail: GroupMetrics,
    pub head: GroupMetrics,
    /// One entry per popularity bucket, in `BUCKET_EDGES` order.
    pub buckets: Vec<GroupMetrics>,
    pub coverage: Vec<f64>,
    pub tail_coverage: Vec<f64>,
}

pub fn bucket_of(popularity: u32) -> usize {
    BUCKET_EDGES.iter().rposition(|&lo| popularity >= lo).unwrap_or(0)
}

pub fn bucket_label(b: usize) -> String {
    match BUCKET_EDGES.get(b + 1) {
        Some(hi) => format!("pop[{},{})", BUCKET_EDGES[b], hi),
        None => format!("pop[{},inf)", BUCKET_EDGES[b]),
    }
}

impl EvalReport {
    fn index_of(&self, k: usize) -> Option<usize> {
        self.ks.iter().position(|&x| x == k)
    }

    pub fn hr(&self, group: &GroupMetrics, k: usize) -> Option<f64> {
        self.index_of(k).map(|j| group.hr[j])
    }

    pub fn ndcg(&self, group: &GroupMetrics, k: usize) -> Option<f64> {
        self.index_of(k).map(|j| group.ndcg[j])
    }

    pub fn coverage_at(&self, k: usize) -> Option<f64> {
        self.index_of(k).map(|j| self.coverage[j])
    }

    pub fn tail_coverage_at(&self, k: usize) -> Option<f64> {
        self.index_of(k).map(|j| self.tail_coverage[j])
    }

    fn groups(&self) -> Vec<(String, &GroupMetrics)> {
        let mut out = vec![
            ("overall".to_string(), &self.overall),
            ("tail".to_string(), &self.tail),
            ("head".to_string(), &self.head),
        ];
        out.extend(self.buckets.iter().enumerate().map(|(b, m)| (bucket_label(b), m)));
        out
    }

    /// Long-format CSV: `metric,group,k,value`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "metric,group,k,value")?;
        for (name, m) in self.groups() {
            writeln!(w, "users,{name},,{}", m.users)?;
            for (j, k) in self.ks.iter().enumerate() {
                writeln!(w, "HR,{name},{k},{:.6}", m.hr[j])?;
                writeln!(w, "NDCG,{name},{k},{:.6}", m.ndcg[j])?;
            }
        }
        for (j, k) in self.ks.iter().enumerate() {
            writeln!(w, "Cov,overall,{k},{:.6}", self.coverage[j])?;
            writeln!(w, "TCov,tail,{k},{:.6}", self.tail_coverage[j])?;
        }
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut header = format!("{:<14}{:>7}", "group", "users");
        for k in &self.ks {
            let _ = write!(header, "{:>9}{:>9}", format!("H@{k}"), format!("N@{k}"));
        }
        writeln!(f, "{header}")?;
        for (name, m) in self.groups() {
            write!(f, "{name:<14}{:>7}", m.users)?;
            for j in 0..self.ks.len() {
                write!(f, "{:>9.4}{:>9.4}", m.hr[j], m.ndcg[j])?;
            }
            writeln!(f)?;
        }
        write!(f, "{:<21}", "coverage")?;
        for j in 0..self.ks.len() {
            write!(f, "{:>9}{:>9.4}", format!("Cov@{}", self.ks[j]), self.coverage[j])?;
        }
        writeln!(f)?;
        write!(f, "{:<21}", "tail coverage")?;
        for j in 0..self.ks.len() {
            write!(f, "{:>9}{:>9.4}", format!("TCov@{}", self.ks[j]), self.tail_coverage[j])?;
        }
        writeln!(f)
    }
}

fn history_and_target(u: &UserSplit, split: Split) -> (Vec<usize>, usize) {
    match split {
        Split::Valid => (u.valid_history().to_vec(), u.valid),
        Split::Test => (u.test_history(), u.test),
    }
}

/// Ranks every user's held-out target over the full catalog.
pub fn evaluate(
    scorer: &dyn Scorer,
    dataset: &InteractionDataset,
    split: Split,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let n = dataset.n_items();
    if scorer.n_items() != n {
        return Err(Error::Consistency(format!(
            "model has {} items, dataset has {n}",
            scorer.n_items()
        )));
    }
    if opts.ks.is_empty() || opts.ks.contains(&0) {
        return Err(Error::Config("eval.k must list positive cut-offs".into()));
    }
    let ks = &opts.ks;
    let max_k = *ks.iter().max().expect("non-empty");
    let split_users = dataset.leave_one_out().users;
    let mut overall = GroupMetrics::new(ks.len());
    let mut tail = GroupMetrics::new(ks.len());
    let mut head = GroupMetrics::new(ks.len());
    let mut buckets = vec![GroupMetrics::new(ks.len()); BUCKET_EDGES.len()];
    let mut lists: Vec<Vec<Vec<usize>>> = vec![Vec::with_capacity(split_users.len()); ks.len()];

    for chunk in split_users.chunks(USER_CHUNK) {
        let cases: Vec<(Vec<usize>, usize)> = chunk.iter().map(|u| history_and_target(u, split)).collect();
        let histories: Vec<&[usize]> = cases.iter().map(|(h, _)| h.as_slice()).collect();
        let scores = scorer.score(&histories)?;
        for (r, (u, (_, target))) in chunk.iter().zip(&cases).enumerate() {
            let row = scores.row(r);
            if let Some(bad) = row.iter().position(|x| !x.is_finite()) {
                return Err(Error::Contract(format!("non-finite score for item {bad}")));
            }
            let excluded = if opts.exclude_seen {
                mask(n, &u.train)
            } else {
                vec![false; n]
            };
            let rank = rank_of(row, *target, &excluded);
            overall.add(rank, ks);
            if dataset.is_head(*target) {
                head.add(rank, ks);
            } else {
                tail.add(rank, ks);
            }
            buckets[bucket_of(dataset.popularity()[*target])].add(rank, ks);
            let top = top_k(row, max_k, &excluded);
            for (j, &k) in ks.iter().enumerate() {
                lists[j].push(top[..k.min(top.len())].to_vec());
            }
        }
    }
    for m in [&mut overall, &mut tail, &mut head]
        .into_iter()
        .chain(buckets.iter_mut())
    {
        m.finish();
    }
    let mut cov = Vec::with_capacity(ks.len());
    let mut tcov = Vec::with_capacity(ks.len());
    for l in &lists {
        let (c, t) = union_coverage(l, dataset.head_flags())?;
        cov.push(c);
        tcov.push(t);
    }
    Ok(EvalReport {
        ks: ks.clone(),
        n_users: overall.users,
        overall,
        tail,
        head,
        buckets,
        coverage: cov,
        tail_coverage: tcov,
    })
}
