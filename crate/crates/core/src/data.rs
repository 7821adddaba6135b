//! Interaction logs, per-user sequences, item popularity, the head/tail
//! split and leave-one-out splits.
//!
//! Popularity is counted over the training prefixes only (every sequence
//! minus its last two items), so validation and test targets never leak
//! into the head/tail labels.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{read_exact, read_u32};

pub const DEFAULT_MIN_SEQ_LEN: usize = 3;
pub const DEFAULT_MAX_SEQ_LEN: usize = 50;
/// Fraction of the catalog labelled head (Pareto split).
pub const HEAD_FRACTION: f64 = 0.2;

const FDAT_MAGIC: &[u8; 4] = b"FDAT";
const FDAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

impl InteractionRecord {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: u64) -> Self {
        InteractionRecord {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }
}

/// Parsed records plus the 1-based line numbers that failed to parse.
#[derive(Clone, Debug, Default)]
pub struct LoadedInteractions {
    pub records: Vec<InteractionRecord>,
    pub malformed: Vec<usize>,
}

/// Reads `user<TAB>item<TAB>timestamp` lines. Blank lines are skipped. In
/// strict mode the first malformed line is an error; otherwise malformed
/// lines are skipped and reported.
pub fn load_interactions(path: &Path, strict: bool) -> Result<LoadedInteractions> {
    let file = File::open(path)?;
    parse_interactions(BufReader::new(file), strict)
}

pub fn parse_interactions<R: BufRead>(reader: R, strict: bool) -> Result<LoadedInteractions> {
    let mut out = LoadedInteractions::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(rec) => out.records.push(rec),
            Err(msg) if strict => return Err(Error::Parse { line: line_no, msg }),
            Err(_) => out.malformed.push(line_no),
        }
    }
    Ok(out)
}

fn parse_line(line: &str) -> std::result::Result<InteractionRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(format!("expected 3 tab-separated fields, found {}", fields.len()));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err("empty user or item key".into());
    }
    let ts: i64 = fields[2]
        .trim()
        .parse()
        .map_err(|_| format!("invalid timestamp {:?}", fields[2]))?;
    if ts < 0 {
        return Err(format!("negative timestamp {ts}"));
    }
    Ok(InteractionRecord::new(fields[0], fields[1], ts as u64))
}

/// Chronological per-user item sequences over a dense catalog.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionDataset {
    sequences: Vec<Vec<usize>>,
    popularity: Vec<u32>,
    head: Vec<bool>,
    user_keys: Vec<String>,
    item_keys: Vec<String>,
}

impl InteractionDataset {
    /// Builds a dataset from dense sequences, computing popularity and the
    /// head/tail labels.
    pub fn from_sequences(sequences: Vec<Vec<usize>>, user_keys: Vec<String>, item_keys: Vec<String>) -> Result<Self> {
        if sequences.is_empty() || item_keys.is_empty() {
            return Err(Error::EmptyDataset("no users or items".into()));
        }
        if user_keys.len() != sequences.len() {
            return Err(Error::Consistency(format!(
                "{} user keys for {} sequences",
                user_keys.len(),
                sequences.len()
            )));
        }
        let n_items = item_keys.len();
        for (u, seq) in sequences.iter().enumerate() {
            if seq.len() < DEFAULT_MIN_SEQ_LEN {
                return Err(Error::Consistency(format!(
                    "user {u} has {} interactions, fewer than {DEFAULT_MIN_SEQ_LEN}",
                    seq.len()
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&i| i >= n_items) {
                return Err(Error::Consistency(format!(
                    "user {u} references item {bad} of {n_items}"
                )));
            }
        }
        let popularity = train_popularity(&sequences, n_items);
        let head = split_head_tail(&popularity);
        Ok(InteractionDataset {
            sequences,
            popularity,
            head,
            user_keys,
            item_keys,
        })
    }

    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_keys.len()
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn sequence(&self, user: usize) -> &[usize] {
        &self.sequences[user]
    }

    /// Interaction count of each item over the training prefixes.
    pub fn popularity(&self) -> &[u32] {
        &self.popularity
    }

    pub fn head_flags(&self) -> &[bool] {
        &self.head
    }

    pub fn is_head(&self, item: usize) -> bool {
        self.head[item]
    }

    pub fn n_head(&self) -> usize {
        self.head.iter().filter(|&&h| h).count()
    }

    pub fn tail_items(&self) -> Vec<usize> {
        (0..self.n_items()).filter(|&i| !self.head[i]).collect()
    }

    pub fn user_keys(&self) -> &[String] {
        &self.user_keys
    }

    pub fn item_keys(&self) -> &[String] {
        &self.item_keys
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.item_keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.as_str(), i))
            .collect()
    }

    pub fn max_seq_len(&self) -> usize {
        self.sequences.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Total number of interactions inside training prefixes.
    pub fn n_train_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.len() - 2).sum()
    }

    pub fn leave_one_out(&self) -> LeaveOneOutSplit {
        leave_one_out(self)
    }

    pub fn write_fdat(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.encode(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_fdat(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::decode(&mut r)
    }

    /// Binary layout (little-endian): magic `FDAT`, u32 version, u32 n_users,
    /// u32 n_items, per user u32 length + u32 item ids, n_items u32
    /// popularity counts, n_items u8 head flags, then the user keys and item
    /// keys as u16-length-prefixed UTF-8 strings.
    pub fn encode<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FDAT_MAGIC)?;
        put_u32(w, FDAT_VERSION as usize)?;
        put_u32(w, self.n_users())?;
        put_u32(w, self.n_items())?;
        for seq in &self.sequences {
            put_u32(w, seq.len())?;
            for &i in seq {
                put_u32(w, i)?;
            }
        }
        for &p in &self.popularity {
            w.write_all(&p.to_le_bytes())?;
        }
        for &h in &self.head {
            w.write_all(&[h as u8])?;
        }
        for key in self.user_keys.iter().chain(&self.item_keys) {
            let len =
                u16::try_from(key.len()).map_err(|_| Error::Format(format!("key {key:?} longer than 65535 bytes")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(key.as_bytes())?;
        }
        Ok(())
    }

    /// Parses an FDAT stream and checks the stored popularity and head flags
    /// against the sequences.
    pub fn decode<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != FDAT_MAGIC {
            return Err(Error::Format("not an FDAT dataset".into()));
        }
        let version = read_u32(r)?;
        if version != FDAT_VERSION {
            return Err(Error::Format(format!("unsupported FDAT version {version}")));
        }
        let n_users = read_u32(r)? as usize;
        let n_items = read_u32(r)? as usize;
        let mut sequences = Vec::with_capacity(n_users.min(1 << 20));
        for _ in 0..n_users {
            let len = read_u32(r)? as usize;
            let mut seq = Vec::with_capacity(len.min(1 << 16));
            for _ in 0..len {
                seq.push(read_u32(r)? as usize);
            }
            sequences.push(seq);
        }
        let mut popularity = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            popularity.push(read_u32(r)?);
        }
        let mut head = vec![0u8; n_items];
        read_exact(r, &mut head)?;
        let mut keys = Vec::with_capacity(n_users + n_items);
        for _ in 0..n_users + n_items {
            let mut len = [0u8; 2];
            read_exact(r, &mut len)?;
            let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(r, &mut buf)?;
            keys.push(String::from_utf8(buf).map_err(|_| Error::Format("key is not UTF-8".into()))?);
        }
        let item_keys = keys.split_off(n_users);
        let ds = InteractionDataset::from_sequences(sequences, keys, item_keys)?;
        if ds.popularity != popularity {
            return Err(Error::Consistency("stored popularity disagrees with sequences".into()));
        }
        if ds.head.iter().zip(&head).any(|(&a, &b)| a != (b != 0)) {
            return Err(Error::Consistency("stored head flags disagree with popularity".into()));
        }
        Ok(ds)
    }
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Groups records into chronological per-user sequences.
///
/// Per user, records are sorted by timestamp with ties kept in input order.
/// Users with fewer than `min_seq_len` records are dropped, the remaining
/// sequences keep their most recent `max_seq_len` items, and items absent
/// from every kept sequence disappear from the catalog. Dense user and item
/// ids follow chronological first appearance (timestamp, then input
/// position), which makes them independent of input order whenever
/// timestamps are distinct.
pub fn build_dataset(
    records: &[InteractionRecord],
    min_seq_len: usize,
    max_seq_len: usize,
) -> Result<InteractionDataset> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("no interaction records".into()));
    }
    if min_seq_len < DEFAULT_MIN_SEQ_LEN || max_seq_len < min_seq_len {
        return Err(Error::Config(format!(
            "sequence length bounds must satisfy {DEFAULT_MIN_SEQ_LEN} <= min ({min_seq_len}) <= max ({max_seq_len})"
        )));
    }

    let mut by_user: HashMap<&str, Vec<usize>> = HashMap::new();
    for (idx, rec) in records.iter().enumerate() {
        by_user.entry(rec.user.as_str()).or_default().push(idx);
    }

    let mut kept: Vec<usize> = Vec::new();
    for idxs in by_user.values_mut() {
        if idxs.len() < min_seq_len {
            continue;
        }
        // stable: equal timestamps stay in input order
        idxs.sort_by_key(|&i| records[i].timestamp);
        let start = idxs.len().saturating_sub(max_seq_len);
        kept.extend_from_slice(&idxs[start..]);
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "every user has fewer than {min_seq_len} interactions"
        )));
    }
    kept.sort_by_key(|&i| (records[i].timestamp, i));

    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut user_keys = Vec::new();
    let mut item_keys = Vec::new();
    let mut sequences: Vec<Vec<usize>> = Vec::new();
    for &i in &kept {
        let rec = &records[i];
        let u = *user_ids.entry(rec.user.as_str()).or_insert_with(|| {
            user_keys.push(rec.user.clone());
            sequences.push(Vec::new());
            user_keys.len() - 1
        });
        let it = *item_ids.entry(rec.item.as_str()).or_insert_with(|| {
            item_keys.push(rec.item.clone());
            item_keys.len() - 1
        });
        sequences[u].push(it);
    }
    InteractionDataset::from_sequences(sequences, user_keys, item_keys)
}

/// Popularity counted over training prefixes (all but the last two items).
pub fn train_popularity(sequences: &[Vec<usize>], n_items: usize) -> Vec<u32> {
    let mut pop = vec![0u32; n_items];
    for seq in sequences {
        for &i in &seq[..seq.len().saturating_sub(2)] {
            pop[i] += 1;
        }
    }
    pop
}

/// Number of head items for a catalog of `n_items`: `ceil(0.2 · n)`.
pub fn head_count(n_items: usize) -> usize {
    (HEAD_FRACTION * n_items as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Flags the `ceil(0.2 · n)` most popular items as head; ties go to the
/// smaller dense id.
pub fn split_head_tail(popularity: &[u32]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..popularity.len()).collect();
    order.sort_by(|&a, &b| popularity[b].cmp(&popularity[a]).then(a.cmp(&b)));
    let mut head = vec![false; popularity.len()];
    for &i in order.iter().take(head_count(popularity.len())) {
        head[i] = true;
    }
    head
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl UserSplit {
    /// Input history when predicting the validation target.
    pub fn valid_history(&self) -> &[usize] {
        &self.train
    }

    /// Input history when predicting the test target: the training prefix
    /// followed by the validation item.
    pub fn test_history(&self) -> Vec<usize> {
        let mut h = self.train.clone();
        h.push(self.valid);
        h
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeaveOneOutSplit {
    pub users: Vec<UserSplit>,
}

/// Last item → test target, second-to-last → validation target, the rest
/// is the training prefix.
pub fn leave_one_out(dataset: &InteractionDataset) -> LeaveOneOutSplit {
    let users = dataset
        .sequences()
        .iter()
        .map(|seq| {
            let n = seq.len();
            UserSplit {
                train: seq[..n - 2].to_vec(),
                valid: seq[n - 2],
                test: seq[n - 1],
            }
        })
        .collect();
    LeaveOneOutSplit { users }
}
