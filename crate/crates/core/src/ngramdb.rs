//! Immutable n-gram databases: context key → per-label occurrence counts.
//!
//! A database is either owned (built in memory) or mapped from a file written
//! by [`NGramDatabase::serialize`]. Both answer queries identically.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! header   112 bytes   magic "NGTYPEDB", version, bitness, vocabulary, n,
//!                      counts, section offsets, file length, section
//!                      checksums (xxh3-64) and a header checksum
//! index    24 B/key    key u64 | first pair u64 | pair count u32 | 0u32, sorted by key
//! payload  8 B/pair    label id u32 | count u32, per key by count desc, id asc
//! labels               per label: global frequency u64 | name length u32 | name bytes
//! ```

use std::fs::File;
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use memmap2::Mmap;
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::{xxh3_64, Xxh3};

use crate::corpus::{AnnotatedFunction, Bitness, Corpus, Split};
use crate::lexer::{call_key, variable_key, NGramKey, TokenStream};

pub const MAGIC: &[u8; 8] = b"NGTYPEDB";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 112;
const INDEX_ENTRY: usize = 24;
const PAIR: usize = 8;
pub const DEFAULT_K: usize = 3;
pub const DEFAULT_PORTFOLIO: [usize; 5] = [2, 4, 8, 12, 48];
pub const LEGACY_PORTFOLIO: [usize; 16] = [2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 30, 60];
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DbError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not an n-gram database (bad magic)")]
    BadMagic,
    #[error("format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("checksum mismatch in {0} section")]
    Checksum(&'static str),
    #[error("corrupt database: {0}")]
    Corrupt(String),
    #[error("parameter mismatch: {0}")]
    ParameterMismatch(String),
    #[error("no train-split functions with bitness {0}")]
    EmptyCorpus(Bitness),
    #[error("invalid portfolio: {0}")]
    Portfolio(String),
    #[error("manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, DbError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DbError + '_ {
    move |source| DbError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vocabulary {
    Types,
    Signatures,
}

impl Vocabulary {
    fn code(self) -> u8 {
        match self {
            Vocabulary::Types => 0,
            Vocabulary::Signatures => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Vocabulary::Types),
            1 => Some(Vocabulary::Signatures),
            _ => None,
        }
    }
}

impl std::fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Vocabulary::Types => "types",
            Vocabulary::Signatures => "signatures",
        })
    }
}

/// What a database indexes: window radius, bitness and label vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DbMeta {
    pub n: usize,
    pub bitness: Bitness,
    pub vocabulary: Vocabulary,
}

/// Dense label ids, assigned in ascending name order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelTable {
    names: Vec<String>,
    ids: FxHashMap<String, u32>,
}

impl LabelTable {
    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        names.sort();
        names.dedup();
        let ids = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        LabelTable { names, ids }
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Top-k answer for one key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResult {
    pub key: NGramKey,
    pub n: usize,
    /// (label id, count), count descending then id ascending
    pub candidates: Vec<(u32, u32)>,
    pub distinct_label_count: usize,
}

struct Mapped {
    mmap: Mmap,
    key_count: usize,
    index_offset: usize,
    payload_offset: usize,
    pair_count: usize,
    file_len: u64,
    index_checksum: u64,
    payload_checksum: u64,
}

impl Mapped {
    fn index_entry(&self, i: usize) -> (u64, usize, usize) {
        let at = self.index_offset + i * INDEX_ENTRY;
        let b = &self.mmap[at..at + INDEX_ENTRY];
        (
            u64::from_le_bytes(b[0..8].try_into().unwrap()),
            u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize,
            u32::from_le_bytes(b[16..20].try_into().unwrap()) as usize,
        )
    }

    fn find(&self, key: u64) -> Option<(usize, usize)> {
        let (mut lo, mut hi) = (0usize, self.key_count);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let (k, first, len) = self.index_entry(mid);
            match k.cmp(&key) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => {
                    // lazily opened files have not had their index checked
                    if first.checked_add(len).is_none_or(|end| end > self.pair_count) {
                        log::error!("index entry for key {key:#x} points outside the payload");
                        return None;
                    }
                    return Some((first, len));
                }
            }
        }
        None
    }

    fn pair(&self, i: usize) -> (u32, u32) {
        let at = self.payload_offset + i * PAIR;
        let b = &self.mmap[at..at + PAIR];
        (
            u32::from_le_bytes(b[0..4].try_into().unwrap()),
            u32::from_le_bytes(b[4..8].try_into().unwrap()),
        )
    }

    fn verify_bodies(&self) -> Result<()> {
        let index_end = self.index_offset + self.key_count * INDEX_ENTRY;
        if xxh3_64(&self.mmap[self.index_offset..index_end]) != self.index_checksum {
            return Err(DbError::Checksum("index"));
        }
        let payload_end = self.payload_offset + self.pair_count * PAIR;
        if xxh3_64(&self.mmap[self.payload_offset..payload_end]) != self.payload_checksum {
            return Err(DbError::Checksum("payload"));
        }
        Ok(())
    }
}

enum Storage {
    Owned(FxHashMap<u64, Box<[(u32, u32)]>>),
    Mapped(Mapped),
}

/// Immutable map from context key to the labels seen under it.
pub struct NGramDatabase {
    meta: DbMeta,
    labels: Arc<LabelTable>,
    global_frequency: Arc<Vec<u64>>,
    storage: Storage,
}

impl std::fmt::Debug for NGramDatabase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NGramDatabase")
            .field("meta", &self.meta)
            .field("keys", &self.key_count())
            .field("labels", &self.labels.len())
            .field("mapped", &self.is_mapped())
            .finish()
    }
}

fn sort_pairs(pairs: &mut [(u32, u32)]) {
    pairs.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
}

impl NGramDatabase {
    /// Assembles an owned database from raw (key → (label, count)) lists.
    /// Lists are merged per label and put into canonical order.
    pub fn from_entries(
        meta: DbMeta,
        labels: Arc<LabelTable>,
        global_frequency: Vec<u64>,
        entries: impl IntoIterator<Item = (NGramKey, Vec<(u32, u32)>)>,
    ) -> Result<Self> {
        if global_frequency.len() != labels.len() {
            return Err(DbError::ParameterMismatch(format!(
                "{} frequencies for {} labels",
                global_frequency.len(),
                labels.len()
            )));
        }
        let mut map: FxHashMap<u64, Vec<(u32, u32)>> = FxHashMap::default();
        for (key, pairs) in entries {
            let slot = map.entry(key.0).or_default();
            for (label, count) in pairs {
                if label as usize >= labels.len() {
                    return Err(DbError::ParameterMismatch(format!(
                        "label id {label} out of range"
                    )));
                }
                if count == 0 {
                    continue;
                }
                add_count(slot, label, count);
            }
        }
        Ok(Self::owned(meta, labels, Arc::new(global_frequency), map))
    }

    fn owned(
        meta: DbMeta,
        labels: Arc<LabelTable>,
        global_frequency: Arc<Vec<u64>>,
        map: FxHashMap<u64, Vec<(u32, u32)>>,
    ) -> Self {
        let map = map
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, mut v)| {
                sort_pairs(&mut v);
                (k, v.into_boxed_slice())
            })
            .collect();
        NGramDatabase {
            meta,
            labels,
            global_frequency,
            storage: Storage::Owned(map),
        }
    }

    pub fn empty(meta: DbMeta, labels: Arc<LabelTable>) -> Self {
        let freq = vec![0; labels.len()];
        Self::owned(meta, labels, Arc::new(freq), FxHashMap::default())
    }

    pub fn meta(&self) -> DbMeta {
        self.meta
    }

    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn labels(&self) -> &Arc<LabelTable> {
        &self.labels
    }

    pub fn global_frequency(&self, label: u32) -> u64 {
        self.global_frequency[label as usize]
    }

    pub fn global_frequencies(&self) -> &[u64] {
        &self.global_frequency
    }

    pub fn is_mapped(&self) -> bool {
        matches!(self.storage, Storage::Mapped(_))
    }

    pub fn key_count(&self) -> usize {
        match &self.storage {
            Storage::Owned(m) => m.len(),
            Storage::Mapped(m) => m.key_count,
        }
    }

    pub fn pair_count(&self) -> usize {
        match &self.storage {
            Storage::Owned(m) => m.values().map(|v| v.len()).sum(),
            Storage::Mapped(m) => m.pair_count,
        }
    }

    /// Number of distinct labels stored under `key` (0 when absent).
    pub fn distinct_labels(&self, key: NGramKey) -> usize {
        match &self.storage {
            Storage::Owned(m) => m.get(&key.0).map_or(0, |v| v.len()),
            Storage::Mapped(m) => m.find(key.0).map_or(0, |(_, len)| len),
        }
    }

    /// Top-k labels under `key`, by count descending with ties on ascending id.
    pub fn query(&self, key: NGramKey, k: usize) -> QueryResult {
        let k = k.max(1);
        let (candidates, distinct) = match &self.storage {
            Storage::Owned(m) => match m.get(&key.0) {
                Some(v) => (v[..k.min(v.len())].to_vec(), v.len()),
                None => (Vec::new(), 0),
            },
            Storage::Mapped(m) => match m.find(key.0) {
                Some((first, len)) => ((first..first + k.min(len)).map(|i| m.pair(i)).collect(), len),
                None => (Vec::new(), 0),
            },
        };
        QueryResult {
            key,
            n: self.meta.n,
            candidates,
            distinct_label_count: distinct,
        }
    }

    /// Full label list of a key.
    pub fn get(&self, key: NGramKey) -> Vec<(u32, u32)> {
        let len = self.distinct_labels(key);
        self.query(key, len.max(1)).candidates
    }

    /// All keys in ascending order.
    pub fn keys(&self) -> Vec<NGramKey> {
        match &self.storage {
            Storage::Owned(m) => {
                let mut keys: Vec<NGramKey> = m.keys().map(|&k| NGramKey(k)).collect();
                keys.sort_unstable();
                keys
            }
            Storage::Mapped(m) => (0..m.key_count).map(|i| NGramKey(m.index_entry(i).0)).collect(),
        }
    }

    /// Entries in ascending key order.
    pub fn entries(&self) -> impl Iterator<Item = (NGramKey, Vec<(u32, u32)>)> + '_ {
        self.keys().into_iter().map(move |k| (k, self.get(k)))
    }

    /// Exact byte length [`serialize`](Self::serialize) will produce.
    pub fn serialized_len(&self) -> u64 {
        let labels: usize = self.labels.names().iter().map(|n| 12 + n.len()).sum();
        (HEADER_LEN + self.key_count() * INDEX_ENTRY + self.pair_count() * PAIR + labels) as u64
    }

    pub fn serialize(&self, path: &Path) -> Result<()> {
        let mut w = DbWriter::create(path, self.meta, self.key_count())?;
        for key in self.keys() {
            w.push(key, &self.get(key))?;
        }
        w.finish(&self.labels, &self.global_frequency)
    }

    /// Maps a serialized database and verifies every checksum.
    pub fn open_mapped(path: &Path) -> Result<Self> {
        let db = Self::open_mapped_lazy(path)?;
        db.verify()?;
        Ok(db)
    }

    /// Maps a serialized database reading only the header and the label
    /// table. Index and payload pages are faulted in by queries; call
    /// [`verify`](Self::verify) to check their checksums.
    pub fn open_mapped_lazy(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        // SAFETY: the file is treated as read-only; databases are never
        // modified in place after being written.
        let mmap = unsafe { Mmap::map(&file) }.map_err(io_err(path))?;
        let actual = mmap.len() as u64;
        if mmap.len() < HEADER_LEN {
            if mmap.len() >= 8 && &mmap[..8] != MAGIC {
                return Err(DbError::BadMagic);
            }
            return Err(DbError::Truncated {
                expected: HEADER_LEN as u64,
                actual,
            });
        }
        let h = Header::decode(&mmap[..HEADER_LEN])?;
        if h.file_len != actual {
            return Err(DbError::Truncated {
                expected: h.file_len,
                actual,
            });
        }
        let labels_end = h.file_len as usize;
        let index_end = h.index_offset as usize + h.key_count as usize * INDEX_ENTRY;
        let payload_end = h.payload_offset as usize + h.pair_count as usize * PAIR;
        if h.index_offset as usize != HEADER_LEN
            || h.payload_offset as usize != index_end
            || h.labels_offset as usize != payload_end
            || payload_end > labels_end
        {
            return Err(DbError::Corrupt("inconsistent section offsets".into()));
        }
        let label_bytes = &mmap[h.labels_offset as usize..labels_end];
        if xxh3_64(label_bytes) != h.labels_checksum {
            return Err(DbError::Checksum("labels"));
        }
        let (names, freqs) = decode_labels(label_bytes, h.label_count as usize)?;
        let labels = LabelTable::from_names(names.iter().cloned());
        if labels.names() != names.as_slice() {
            return Err(DbError::Corrupt("label table not sorted".into()));
        }
        Ok(NGramDatabase {
            meta: h.meta,
            labels: Arc::new(labels),
            global_frequency: Arc::new(freqs),
            storage: Storage::Mapped(Mapped {
                mmap,
                key_count: h.key_count as usize,
                index_offset: h.index_offset as usize,
                payload_offset: h.payload_offset as usize,
                pair_count: h.pair_count as usize,
                file_len: h.file_len,
                index_checksum: h.index_checksum,
                payload_checksum: h.payload_checksum,
            }),
        })
    }

    /// Checks index and payload checksums. Owned databases always pass.
    pub fn verify(&self) -> Result<()> {
        match &self.storage {
            Storage::Owned(_) => Ok(()),
            Storage::Mapped(m) => m.verify_bodies(),
        }
    }

    /// Same database with its label table replaced by an equal shared one.
    fn with_shared_labels(mut self, labels: &Arc<LabelTable>) -> Self {
        debug_assert_eq!(*self.labels, **labels);
        self.labels = Arc::clone(labels);
        self
    }

    pub fn stats(&self) -> DbStats {
        db_stats(self)
    }
}

fn add_count(slot: &mut Vec<(u32, u32)>, label: u32, count: u32) {
    match slot.iter_mut().find(|(l, _)| *l == label) {
        Some(e) => e.1 = e.1.saturating_add(count),
        None => slot.push((label, count)),
    }
}

struct Header {
    meta: DbMeta,
    key_count: u64,
    pair_count: u64,
    label_count: u64,
    index_offset: u64,
    payload_offset: u64,
    labels_offset: u64,
    file_len: u64,
    index_checksum: u64,
    payload_checksum: u64,
    labels_checksum: u64,
}

impl Header {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..8].copy_from_slice(MAGIC);
        b[8..12].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        b[12] = self.meta.bitness.bits() as u8;
        b[13] = self.meta.vocabulary.code();
        b[16..20].copy_from_slice(&(self.meta.n as u32).to_le_bytes());
        let words = [
            self.key_count,
            self.pair_count,
            self.label_count,
            self.index_offset,
            self.payload_offset,
            self.labels_offset,
            self.file_len,
            self.index_checksum,
            self.payload_checksum,
            self.labels_checksum,
        ];
        for (i, w) in words.iter().enumerate() {
            b[24 + i * 8..32 + i * 8].copy_from_slice(&w.to_le_bytes());
        }
        let sum = xxh3_64(&b[..104]);
        b[104..112].copy_from_slice(&sum.to_le_bytes());
        b
    }

    fn decode(b: &[u8]) -> Result<Self> {
        if &b[0..8] != MAGIC {
            return Err(DbError::BadMagic);
        }
        let version = u32::from_le_bytes(b[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(DbError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let stored = u64::from_le_bytes(b[104..112].try_into().unwrap());
        if xxh3_64(&b[..104]) != stored {
            return Err(DbError::Checksum("header"));
        }
        let bitness = Bitness::from_bits(b[12] as i64)
            .ok_or_else(|| DbError::Corrupt(format!("bitness byte {}", b[12])))?;
        let vocabulary = Vocabulary::from_code(b[13])
            .ok_or_else(|| DbError::Corrupt(format!("vocabulary byte {}", b[13])))?;
        let n = u32::from_le_bytes(b[16..20].try_into().unwrap()) as usize;
        let w = |i: usize| u64::from_le_bytes(b[24 + i * 8..32 + i * 8].try_into().unwrap());
        Ok(Header {
            meta: DbMeta {
                n,
                bitness,
                vocabulary,
            },
            key_count: w(0),
            pair_count: w(1),
            label_count: w(2),
            index_offset: w(3),
            payload_offset: w(4),
            labels_offset: w(5),
            file_len: w(6),
            index_checksum: w(7),
            payload_checksum: w(8),
            labels_checksum: w(9),
        })
    }
}

fn decode_labels(mut b: &[u8], count: usize) -> Result<(Vec<String>, Vec<u64>)> {
    let short = || DbError::Corrupt("label table truncated".into());
    let mut names = Vec::with_capacity(count);
    let mut freqs = Vec::with_capacity(count);
    for _ in 0..count {
        if b.len() < 12 {
            return Err(short());
        }
        freqs.push(u64::from_le_bytes(b[0..8].try_into().unwrap()));
        let len = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        b = &b[12..];
        if b.len() < len {
            return Err(short());
        }
        let name = std::str::from_utf8(&b[..len])
            .map_err(|_| DbError::Corrupt("label name is not UTF-8".into()))?;
        names.push(name.to_string());
        b = &b[len..];
    }
    if !b.is_empty() {
        return Err(DbError::Corrupt("trailing bytes after label table".into()));
    }
    Ok((names, freqs))
}

/// Streams a database to disk in ascending key order; the key count is fixed
/// at creation.
pub struct DbWriter {
    path: PathBuf,
    out: BufWriter<File>,
    meta: DbMeta,
    key_count: usize,
    index: Vec<u8>,
    last_key: Option<u64>,
    pairs_written: u64,
    payload_hash: Xxh3,
}

impl DbWriter {
    pub fn create(path: &Path, meta: DbMeta, key_count: usize) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        out.seek(SeekFrom::Start((HEADER_LEN + key_count * INDEX_ENTRY) as u64))
            .map_err(io_err(path))?;
        Ok(DbWriter {
            path: path.to_path_buf(),
            out,
            meta,
            key_count,
            index: Vec::with_capacity(key_count * INDEX_ENTRY),
            last_key: None,
            pairs_written: 0,
            payload_hash: Xxh3::new(),
        })
    }

    /// Appends one key. `pairs` must already be in canonical order.
    pub fn push(&mut self, key: NGramKey, pairs: &[(u32, u32)]) -> Result<()> {
        if self.last_key.is_some_and(|k| k >= key.0) {
            return Err(DbError::ParameterMismatch("keys must be strictly ascending".into()));
        }
        if self.index.len() / INDEX_ENTRY >= self.key_count {
            return Err(DbError::ParameterMismatch("more keys than announced".into()));
        }
        if pairs.is_empty() || pairs.len() > u32::MAX as usize {
            return Err(DbError::ParameterMismatch("bad label list length".into()));
        }
        self.last_key = Some(key.0);
        self.index.extend_from_slice(&key.0.to_le_bytes());
        self.index.extend_from_slice(&self.pairs_written.to_le_bytes());
        self.index.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
        self.index.extend_from_slice(&0u32.to_le_bytes());
        let mut buf = Vec::with_capacity(pairs.len() * PAIR);
        for (label, count) in pairs {
            buf.extend_from_slice(&label.to_le_bytes());
            buf.extend_from_slice(&count.to_le_bytes());
        }
        self.payload_hash.update(&buf);
        self.out.write_all(&buf).map_err(io_err(&self.path))?;
        self.pairs_written += pairs.len() as u64;
        Ok(())
    }

    pub fn finish(mut self, labels: &LabelTable, global_frequency: &[u64]) -> Result<()> {
        if self.index.len() / INDEX_ENTRY != self.key_count {
            return Err(DbError::ParameterMismatch(format!(
                "announced {} keys, wrote {}",
                self.key_count,
                self.index.len() / INDEX_ENTRY
            )));
        }
        let mut label_bytes = Vec::new();
        for (name, freq) in labels.names().iter().zip(global_frequency) {
            label_bytes.extend_from_slice(&freq.to_le_bytes());
            label_bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
            label_bytes.extend_from_slice(name.as_bytes());
        }
        let io = io_err(&self.path);
        self.out.write_all(&label_bytes).map_err(io)?;
        let index_offset = HEADER_LEN as u64;
        let payload_offset = index_offset + self.index.len() as u64;
        let labels_offset = payload_offset + self.pairs_written * PAIR as u64;
        let header = Header {
            meta: self.meta,
            key_count: self.key_count as u64,
            pair_count: self.pairs_written,
            label_count: labels.len() as u64,
            index_offset,
            payload_offset,
            labels_offset,
            file_len: labels_offset + label_bytes.len() as u64,
            index_checksum: xxh3_64(&self.index),
            payload_checksum: self.payload_hash.digest(),
            labels_checksum: xxh3_64(&label_bytes),
        };
        let path = self.path.clone();
        let io = || io_err(&path);
        self.out.seek(SeekFrom::Start(0)).map_err(io())?;
        self.out.write_all(&header.encode()).map_err(io())?;
        self.out.write_all(&self.index).map_err(io())?;
        self.out.flush().map_err(io())?;
        Ok(())
    }
}

/// Accumulates counts for one radius before freezing into a database.
#[derive(Debug, Clone)]
struct Accumulator {
    counts: FxHashMap<u64, Vec<(u32, u32)>>,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator {
            counts: FxHashMap::default(),
        }
    }

    fn add(&mut self, key: NGramKey, label: u32) {
        add_count(self.counts.entry(key.0).or_default(), label, 1);
    }

    fn absorb(&mut self, other: Accumulator) {
        if self.counts.len() < other.counts.len() {
            let mine = std::mem::replace(&mut self.counts, other.counts);
            return self.absorb(Accumulator { counts: mine });
        }
        for (k, pairs) in other.counts {
            let slot = self.counts.entry(k).or_default();
            for (l, c) in pairs {
                add_count(slot, l, c);
            }
        }
    }
}

/// Annotated occurrences of one function for a vocabulary:
/// (token position, label name).
fn training_sites<'a>(
    f: &'a AnnotatedFunction,
    stream: &TokenStream,
    vocabulary: Vocabulary,
) -> Vec<(usize, &'a str)> {
    let mut sites = Vec::new();
    match vocabulary {
        Vocabulary::Types => {
            for (ident, ty) in &f.vars {
                for &pos in stream.occurrences(ident) {
                    sites.push((pos, ty.as_str()));
                }
            }
        }
        Vocabulary::Signatures => {
            for (callee, sig) in &f.calls {
                for &pos in stream.occurrences(callee) {
                    if stream.is_call_occurrence(pos) {
                        sites.push((pos, sig.as_str()));
                    }
                }
            }
        }
    }
    sites
}

/// Key for a site under a vocabulary. Call sites use the call-window rule.
pub fn site_key(
    stream: &TokenStream,
    pos: usize,
    n: usize,
    vocabulary: Vocabulary,
) -> Option<NGramKey> {
    match vocabulary {
        Vocabulary::Types => Some(variable_key(stream, pos, n)),
        Vocabulary::Signatures => call_key(stream, pos, n),
    }
}

fn label_in_vocabulary(corpus: &Corpus, f: &AnnotatedFunction, name: &str, v: Vocabulary) -> bool {
    match v {
        Vocabulary::Types => corpus.types.get(name, f.bitness).is_some(),
        Vocabulary::Signatures => corpus.signatures.get(name).is_some(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildReport {
    pub functions: usize,
    pub sites: u64,
    /// annotations whose label belongs to the other vocabulary
    pub skipped_cross_vocabulary: u64,
}

fn check_portfolio(portfolio: &[usize]) -> Result<()> {
    if portfolio.is_empty() {
        return Err(DbError::Portfolio("empty".into()));
    }
    if portfolio.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DbError::Portfolio(format!(
            "{portfolio:?} is not strictly increasing"
        )));
    }
    Ok(())
}

/// Builds one database per radius in `portfolio` from the train split,
/// sharding functions across `shards` parallel builders.
pub fn build_ensemble(
    corpus: &Corpus,
    portfolio: &[usize],
    bitness: Bitness,
    vocabulary: Vocabulary,
    shards: usize,
) -> Result<(DatabaseEnsemble, BuildReport)> {
    check_portfolio(portfolio)?;
    let functions: Vec<&AnnotatedFunction> = corpus
        .split(Split::Train)
        .filter(|f| f.bitness == bitness)
        .collect();
    if functions.is_empty() {
        return Err(DbError::EmptyCorpus(bitness));
    }

    let mut report = BuildReport {
        functions: functions.len(),
        ..Default::default()
    };
    let mut names = Vec::new();
    for f in &functions {
        let annotations = match vocabulary {
            Vocabulary::Types => &f.vars,
            Vocabulary::Signatures => &f.calls,
        };
        for label in annotations.values() {
            if label_in_vocabulary(corpus, f, label, vocabulary) {
                names.push(label.as_str());
            }
        }
    }
    let labels = Arc::new(LabelTable::from_names(names));

    let shards = shards.max(1);
    let chunk = functions.len().div_ceil(shards);
    let build_shard = |fs: &[&AnnotatedFunction]| {
        let mut accs = vec![Accumulator::new(); portfolio.len()];
        let mut freq = vec![0u64; labels.len()];
        let mut sites = 0u64;
        let mut skipped = 0u64;
        for f in fs {
            let stream = f.tokens();
            for (pos, label) in training_sites(f, &stream, vocabulary) {
                let Some(id) = labels.id(label) else {
                    skipped += 1;
                    continue;
                };
                sites += 1;
                freq[id as usize] += 1;
                for (acc, &n) in accs.iter_mut().zip(portfolio) {
                    if let Some(key) = site_key(&stream, pos, n, vocabulary) {
                        acc.add(key, id);
                    }
                }
            }
        }
        (accs, freq, sites, skipped)
    };
    let merged = functions
        .par_chunks(chunk)
        .map(build_shard)
        .reduce_with(|mut a, b| {
            for (x, y) in a.0.iter_mut().zip(b.0) {
                x.absorb(y);
            }
            for (x, y) in a.1.iter_mut().zip(b.1) {
                *x = x.saturating_add(y);
            }
            (a.0, a.1, a.2 + b.2, a.3 + b.3)
        })
        .expect("at least one shard");
    let (accs, freq, sites, skipped) = merged;
    report.sites = sites;
    report.skipped_cross_vocabulary = skipped;
    if skipped > 0 {
        log::warn!("skipped {skipped} annotations outside the {vocabulary} vocabulary");
    }

    let freq = Arc::new(freq);
    let databases = accs
        .into_iter()
        .zip(portfolio)
        .map(|(acc, &n)| {
            NGramDatabase::owned(
                DbMeta {
                    n,
                    bitness,
                    vocabulary,
                },
                Arc::clone(&labels),
                Arc::clone(&freq),
                acc.counts,
            )
        })
        .collect();
    Ok((DatabaseEnsemble::new(databases)?, report))
}

/// Single-radius build over the train split.
pub fn build_database(
    corpus: &Corpus,
    n: usize,
    bitness: Bitness,
    vocabulary: Vocabulary,
) -> Result<NGramDatabase> {
    let (ens, _) = build_ensemble(corpus, &[n], bitness, vocabulary, 1)?;
    Ok(ens.into_databases().pop().expect("one member"))
}

/// Sums two databases over the same radius, bitness and vocabulary. Label
/// tables are unioned and re-densified in name order, so the result does not
/// depend on argument order.
pub fn merge_databases(a: &NGramDatabase, b: &NGramDatabase) -> Result<NGramDatabase> {
    if a.meta != b.meta {
        return Err(DbError::ParameterMismatch(format!(
            "{:?} vs {:?}",
            a.meta, b.meta
        )));
    }
    let labels = Arc::new(LabelTable::from_names(
        a.labels.names().iter().chain(b.labels.names()).cloned(),
    ));
    let remap = |db: &NGramDatabase| -> Vec<u32> {
        db.labels
            .names()
            .iter()
            .map(|n| labels.id(n).expect("unioned"))
            .collect()
    };
    let (ra, rb) = (remap(a), remap(b));
    let mut freq = vec![0u64; labels.len()];
    for (db, remap) in [(a, &ra), (b, &rb)] {
        for (old, &f) in db.global_frequencies().iter().enumerate() {
            let slot = &mut freq[remap[old] as usize];
            *slot = slot.saturating_add(f);
        }
    }
    let mut map: FxHashMap<u64, Vec<(u32, u32)>> = FxHashMap::default();
    for (db, remap) in [(a, &ra), (b, &rb)] {
        for (key, pairs) in db.entries() {
            let slot = map.entry(key.0).or_default();
            for (l, c) in pairs {
                add_count(slot, remap[l as usize], c);
            }
        }
    }
    Ok(NGramDatabase::owned(a.meta, labels, Arc::new(freq), map))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DbStats {
    pub n: usize,
    pub key_count: usize,
    pub label_count: usize,
    pub pair_count: usize,
    pub mean_labels_per_key: f64,
    /// bytes of the serialized form (file length when mapped)
    pub on_disk_bytes: u64,
    /// approximate heap bytes held in memory; mapped databases only hold
    /// the label table
    pub resident_bytes: u64,
}

pub fn db_stats(db: &NGramDatabase) -> DbStats {
    let keys = db.key_count();
    let pairs = db.pair_count();
    let label_bytes: usize = db.labels.names().iter().map(|n| n.len() + 32).sum();
    let (on_disk, resident) = match &db.storage {
        Storage::Owned(m) => (
            db.serialized_len(),
            (m.capacity() * 24 + pairs * PAIR + label_bytes) as u64,
        ),
        Storage::Mapped(m) => (m.file_len, label_bytes as u64),
    };
    DbStats {
        n: db.meta.n,
        key_count: keys,
        label_count: db.labels.len(),
        pair_count: pairs,
        mean_labels_per_key: if keys == 0 {
            0.0
        } else {
            pairs as f64 / keys as f64
        },
        on_disk_bytes: if keys == 0 && db.labels.is_empty() && !db.is_mapped() {
            0
        } else {
            on_disk
        },
        resident_bytes: if keys == 0 && db.labels.is_empty() {
            0
        } else {
            resident
        },
    }
}

/// Databases over one bitness and vocabulary with strictly increasing radii
/// and one shared label table.
#[derive(Debug)]
pub struct DatabaseEnsemble {
    databases: Vec<NGramDatabase>,
    labels: Arc<LabelTable>,
    bitness: Bitness,
    vocabulary: Vocabulary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMember {
    pub n: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub bitness: Bitness,
    pub vocabulary: Vocabulary,
    pub members: Vec<ManifestMember>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|source| DbError::Manifest {
            path: path.to_path_buf(),
            source,
        })?;
        if m.format_version != MANIFEST_VERSION {
            return Err(DbError::VersionMismatch {
                found: m.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }
}

impl DatabaseEnsemble {
    pub fn new(databases: Vec<NGramDatabase>) -> Result<Self> {
        let first = databases
            .first()
            .ok_or_else(|| DbError::Portfolio("ensemble without databases".into()))?;
        let (bitness, vocabulary) = (first.meta.bitness, first.meta.vocabulary);
        let labels = Arc::clone(&first.labels);
        check_portfolio(&databases.iter().map(|d| d.meta.n).collect::<Vec<_>>())?;
        let mut shared = Vec::with_capacity(databases.len());
        for db in databases {
            if db.meta.bitness != bitness || db.meta.vocabulary != vocabulary {
                return Err(DbError::ParameterMismatch(format!(
                    "member n={} is {}-bit {}, ensemble is {}-bit {}",
                    db.meta.n, db.meta.bitness, db.meta.vocabulary, bitness, vocabulary
                )));
            }
            if !Arc::ptr_eq(&db.labels, &labels) && *db.labels != *labels {
                return Err(DbError::ParameterMismatch(format!(
                    "member n={} has a different label table",
                    db.meta.n
                )));
            }
            shared.push(db.with_shared_labels(&labels));
        }
        Ok(DatabaseEnsemble {
            databases: shared,
            labels,
            bitness,
            vocabulary,
        })
    }

    pub fn databases(&self) -> &[NGramDatabase] {
        &self.databases
    }

    pub fn into_databases(self) -> Vec<NGramDatabase> {
        self.databases
    }

    pub fn portfolio(&self) -> Vec<usize> {
        self.databases.iter().map(|d| d.meta.n).collect()
    }

    pub fn n_max(&self) -> usize {
        self.databases.last().map_or(0, |d| d.meta.n)
    }

    pub fn bitness(&self) -> Bitness {
        self.bitness
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.vocabulary
    }

    pub fn labels(&self) -> &LabelTable {
        &self.labels
    }

    pub fn label_name(&self, id: u32) -> &str {
        self.labels.name(id)
    }

    pub fn global_frequency(&self, id: u32) -> u64 {
        self.databases[0].global_frequency(id)
    }

    /// Writes every member next to `manifest_path` and the manifest itself.
    pub fn save(&self, manifest_path: &Path) -> Result<Manifest> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let stem = manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("ensemble");
        let mut members = Vec::new();
        for db in &self.databases {
            let file = PathBuf::from(format!("{stem}.n{}.ngdb", db.meta.n));
            db.serialize(&dir.join(&file))?;
            members.push(ManifestMember {
                n: db.meta.n,
                path: file,
            });
        }
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            bitness: self.bitness,
            vocabulary: self.vocabulary,
            members,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(manifest_path, text).map_err(io_err(manifest_path))?;
        Ok(manifest)
    }

    /// Opens every member of a manifest. With `verify` each member's
    /// checksums are checked, which reads the files in full.
    pub fn open(manifest_path: &Path, verify: bool) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut dbs = Vec::with_capacity(manifest.members.len());
        for m in &manifest.members {
            let path = dir.join(&m.path);
            let db = if verify {
                NGramDatabase::open_mapped(&path)?
            } else {
                NGramDatabase::open_mapped_lazy(&path)?
            };
            let expect = DbMeta {
                n: m.n,
                bitness: manifest.bitness,
                vocabulary: manifest.vocabulary,
            };
            if db.meta != expect {
                return Err(DbError::ParameterMismatch(format!(
                    "{} holds {:?}, manifest says {:?}",
                    path.display(),
                    db.meta,
                    expect
                )));
            }
            dbs.push(db);
        }
        Self::new(dbs)
    }
}
