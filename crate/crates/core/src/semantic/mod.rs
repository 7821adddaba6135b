//! Frozen per-item semantic embeddings, their PCA reduction and the
//! trainable projection into the model dimension.
//!
//! Embeddings are stored on disk in the `FEMB` format: magic `FEMB`, u32
//! version = 1, u32 n_items, u32 d_llm, then `n_items · d_llm` little-endian
//! f32 values, row `i` belonging to dense item `i`.

mod pca;
mod projection;

pub use pca::{fit_pca, fit_pca_with, pca_project, PcaBasis, PcaSolver};
pub use projection::{project_llm, ProjectionNet, ProjectionVars};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{read_exact, read_u32};
use crate::rng::seeded;

const FEMB_MAGIC: &[u8; 4] = b"FEMB";
const FEMB_VERSION: u32 = 1;
/// Per-coordinate noise scale of the synthetic generator.
pub const SYNTH_NOISE_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticStore {
    vectors: Tensor,
}

impl SemanticStore {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::shape("semantic store", vectors.shape(), &[]));
        }
        if !vectors.is_finite() {
            return Err(Error::Format("semantic embeddings contain non-finite values".into()));
        }
        Ok(SemanticStore { vectors })
    }

    pub fn n_items(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn d_llm(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn row(&self, item: usize) -> &[f64] {
        self.vectors.row(item)
    }

    /// Copies the rows of `ids` into a `len × d_llm` tensor.
    pub fn gather(&self, ids: &[usize]) -> Result<Tensor> {
        let d = self.d_llm();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= self.n_items() {
                return Err(Error::Index {
                    index: i,
                    len: self.n_items(),
                });
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![ids.len(), d], out)
    }

    /// Fails with a consistency error unless the store covers exactly
    /// `n_items` items.
    pub fn check_items(&self, n_items: usize) -> Result<()> {
        if self.n_items() != n_items {
            return Err(Error::Consistency(format!(
                "semantic store has {} items, dataset has {n_items}",
                self.n_items()
            )));
        }
        Ok(())
    }

    pub fn encode<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FEMB_MAGIC)?;
        for v in [FEMB_VERSION as usize, self.n_items(), self.d_llm()] {
            let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in self.vectors.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn decode<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != FEMB_MAGIC {
            return Err(Error::Format("not an FEMB embedding file".into()));
        }
        let version = read_u32(r)?;
        if version != FEMB_VERSION {
            return Err(Error::Format(format!("unsupported FEMB version {version}")));
        }
        let n = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        if n == 0 || d == 0 {
            return Err(Error::Format(format!("FEMB dimensions {n}x{d}")));
        }
        let mut data = Vec::with_capacity((n * d).min(1 << 26));
        let mut buf = [0u8; 4];
        for _ in 0..n * d {
            read_exact(r, &mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after FEMB payload".into()));
        }
        SemanticStore::new(Tensor::matrix(n, d, data))
    }

    /// Writes the store as FEMB. Values are narrowed to f32.
    pub fn write_femb(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.encode(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_femb(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::decode(&mut r)
    }
}

/// Loads an FEMB file and checks it against a catalog of `n_items` items.
pub fn load_semantic(path: &Path, n_items: usize) -> Result<SemanticStore> {
    let store = SemanticStore::read_femb(path)?;
    store.check_items(n_items)?;
    Ok(store)
}

/// Parses `item_key<TAB>f1,f2,...` lines into a store ordered by
/// `item_keys`. Keys outside the catalog are ignored; catalog items without
/// a line are a consistency error.
pub fn parse_embedding_tsv<R: BufRead>(reader: R, item_keys: &[String]) -> Result<SemanticStore> {
    let index: HashMap<&str, usize> = item_keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; item_keys.len()];
    let mut d_llm = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: n + 1, msg };
        let (key, values) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected item_key<TAB>values".into()))?;
        let values: Vec<f64> = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(format!("bad embedding value: {e}")))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite embedding value".into()));
        }
        match d_llm {
            None => d_llm = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(format!("expected {d} values, found {}", values.len())))
            }
            _ => {}
        }
        if let Some(&i) = index.get(key) {
            rows[i] = Some(values);
        }
    }
    let d = d_llm.ok_or_else(|| Error::EmptyDataset("embedding file has no rows".into()))?;
    let mut data = Vec::with_capacity(item_keys.len() * d);
    for (i, row) in rows.into_iter().enumerate() {
        let row = row.ok_or_else(|| Error::Consistency(format!("no embedding for item {:?}", item_keys[i])))?;
        data.extend(row);
    }
    SemanticStore::new(Tensor::matrix(item_keys.len(), d, data))
}

/// Cluster-structured synthetic embeddings with item `i` in cluster
/// `i mod n_clusters`.
pub fn synth_semantic(n_items: usize, d_llm: usize, n_clusters: usize, seed: u64) -> Result<SemanticStore> {
    if n_clusters == 0 || n_clusters > n_items {
        return Err(Error::Config(format!(
            "cluster count {n_clusters} must be between 1 and the item count {n_items}"
        )));
    }
    let assignment: Vec<usize> = (0..n_items).map(|i| i % n_clusters).collect();
    synth_semantic_clustered(&assignment, n_clusters, d_llm, seed)
}

/// Synthetic embeddings for an explicit item → cluster assignment.
///
/// Centroids have i.i.d. standard normal coordinates; each item adds
/// N(0, 0.1²) noise per coordinate to its centroid and is scaled to unit
/// length, so same-cluster cosine similarity stays near `1/(1 + 0.01)`
/// whatever the dimension.
pub fn synth_semantic_clustered(
    assignment: &[usize],
    n_clusters: usize,
    d_llm: usize,
    seed: u64,
) -> Result<SemanticStore> {
    if assignment.is_empty() || d_llm == 0 {
        return Err(Error::Config(
            "synthetic embeddings need items and a positive dimension".into(),
        ));
    }
    if let Some(&c) = assignment.iter().find(|&&c| c >= n_clusters) {
        return Err(Error::Config(format!(
            "cluster {c} out of range for {n_clusters} clusters"
        )));
    }
    let mut rng = seeded(seed);
    let centroids: Vec<f64> = (0..n_clusters * d_llm)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut data = Vec::with_capacity(assignment.len() * d_llm);
    for &c in assignment {
        let centre = &centroids[c * d_llm..(c + 1) * d_llm];
        let row: Vec<f64> = centre
            .iter()
            .map(|&m| m + SYNTH_NOISE_STD * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        data.extend(row.into_iter().map(|v| v / norm));
    }
    SemanticStore::new(Tensor::matrix(assignment.len(), d_llm, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn femb_roundtrip_is_byte_exact() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FEMB");
        for v in [1u32, 3, 4] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..12 {
            bytes.extend_from_slice(&(i as f32 * 0.37 - 1.1).to_le_bytes());
        }
        let store = SemanticStore::decode(&mut bytes.as_slice()).unwrap();
        assert_eq!((store.n_items(), store.d_llm()), (3, 4));
        let mut again = Vec::new();
        store.encode(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn femb_errors() {
        let store = synth_semantic(3, 4, 1, 0).unwrap();
        let mut bytes = Vec::new();
        store.encode(&mut bytes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.femb");
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(load_semantic(&path, 3).unwrap().n_items(), 3);
        assert!(matches!(load_semantic(&path, 4), Err(Error::Consistency(_))));

        let mut bad = bytes.clone();
        bad[0] = b'G';
        assert!(matches!(
            SemanticStore::decode(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        // claim d_llm = 5 while the payload holds 3×4 values
        let mut bad = bytes.clone();
        bad[12..16].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            SemanticStore::decode(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn synth_is_deterministic_and_unit_norm() {
        let a = synth_semantic(30, 16, 4, 11).unwrap();
        assert_eq!(a, synth_semantic(30, 16, 4, 11).unwrap());
        assert_ne!(a, synth_semantic(30, 16, 4, 12).unwrap());
        for i in 0..a.n_items() {
            let n: f64 = a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_cluster_items_are_similar() {
        for d_llm in [8, 64, 512] {
            let s = synth_semantic(40, d_llm, 1, 5).unwrap();
            for i in 0..40 {
                for j in i + 1..40 {
                    assert!(cosine(s.row(i), s.row(j)) > 0.5, "d_llm={d_llm} pair ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn clusters_are_round_robin() {
        let s = synth_semantic(12, 32, 3, 2).unwrap();
        // items 0 and 3 share a cluster, items 0 and 1 do not
        assert!(cosine(s.row(0), s.row(3)) > cosine(s.row(0), s.row(1)));
        assert!(matches!(synth_semantic(2, 4, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn tsv_conversion() {
        let keys: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let text = "b\t3,4\nzz\t9,9\na\t1,2\n";
        let s = parse_embedding_tsv(text.as_bytes(), &keys).unwrap();
        assert_eq!(s.vectors().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            parse_embedding_tsv("a\t1,2\n".as_bytes(), &keys),
            Err(Error::Consistency(_))
        ));
        assert!(matches!(
            parse_embedding_tsv("a\t1,2\nb\t1\n".as_bytes(), &keys),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
