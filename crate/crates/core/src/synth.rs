//! Synthetic long-tail interaction data with clustered item semantics.
//!
//! Item `k` (in popularity-rank order) has weight `(k + 1)^-s` and belongs
//! to cluster `k mod n_clusters`, so every cluster mixes head and tail items.
//! A user starts in a cluster drawn by cluster mass and, at each step, either
//! stays (probability `stay`) or jumps to a cluster drawn by mass. Within a
//! cluster items are drawn by weight without repeating within the sequence.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::data::{InteractionDataset, InteractionRecord};
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub zipf: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub stay: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 500,
            n_items: 200,
            n_clusters: 8,
            zipf: 1.2,
            min_len: 5,
            max_len: 20,
            stay: 0.9,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_users == 0 || self.n_items == 0 {
            return fail("synthetic data needs users and items");
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_items {
            return fail("cluster count must lie in 1..=n_items");
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return fail("sequence lengths must satisfy 3 <= min_len <= max_len");
        }
        if self.max_len > self.n_items {
            return fail("max_len cannot exceed the item count without repeats");
        }
        if !(0.0..=1.0).contains(&self.stay) || !self.zipf.is_finite() || self.zipf < 0.0 {
            return fail("stay must lie in [0, 1] and zipf must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthInteractions {
    pub records: Vec<InteractionRecord>,
    /// Cluster of each generated item, indexed by popularity rank.
    pub cluster: Vec<usize>,
}

impl SynthInteractions {
    /// Cluster of each dense item of a dataset built from these records.
    pub fn assignment(&self, dataset: &InteractionDataset) -> Result<Vec<usize>> {
        dataset
            .item_keys()
            .iter()
            .map(|k| {
                k.strip_prefix("item")
                    .and_then(|r| r.parse::<usize>().ok())
                    .and_then(|r| self.cluster.get(r).copied())
                    .ok_or_else(|| Error::Consistency(format!("item key {k:?} was not generated here")))
            })
            .collect()
    }
}

pub fn synth_interactions(cfg: &SynthConfig) -> Result<SynthInteractions> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let weight: Vec<f64> = (0..cfg.n_items).map(|k| ((k + 1) as f64).powf(-cfg.zipf)).collect();
    let cluster: Vec<usize> = (0..cfg.n_items).map(|k| k % cfg.n_clusters).collect();
    let members: Vec<Vec<usize>> = (0..cfg.n_clusters)
        .map(|c| (0..cfg.n_items).filter(|&k| cluster[k] == c).collect())
        .collect();
    let mass: Vec<f64> = members.iter().map(|m| m.iter().map(|&k| weight[k]).sum()).collect();
    let pick_cluster = WeightedIndex::new(&mass).map_err(|e| Error::Config(e.to_string()))?;

    let mut records = Vec::new();
    for u in 0..cfg.n_users {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut c = pick_cluster.sample(&mut rng);
        let mut seq: Vec<usize> = Vec::with_capacity(len);
        while seq.len() < len {
            if !seq.is_empty() && !rng.random_bool(cfg.stay) {
                c = pick_cluster.sample(&mut rng);
            }
            let free: Vec<usize> = members[c].iter().copied().filter(|k| !seq.contains(k)).collect();
            if free.is_empty() {
                c = pick_cluster.sample(&mut rng);
                continue;
            }
            let w: Vec<f64> = free.iter().map(|&k| weight[k]).collect();
            let idx = WeightedIndex::new(&w).map_err(|e| Error::Config(e.to_string()))?;
            seq.push(free[idx.sample(&mut rng)]);
        }
        for (j, &k) in seq.iter().enumerate() {
            let t = (j * cfg.n_users + u) as u64;
            records.push(InteractionRecord::new(format!("user{u}"), format!("item{k}"), t));
        }
    }
    Ok(SynthInteractions { records, cluster })
}
