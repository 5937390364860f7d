//! Preference datasets: loading, permutation sampling and expansion into
//! aligned triples of examples.
//!
//! Records are line-delimited JSON objects with the fields `id` (optional),
//! `context`, `response_w` and `response_l`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::rng_from;

/// Permutation pairs are resampled at most this many times per side.
pub const PERMUTATION_RETRY_LIMIT: usize = 10_000;

/// Files up to this size are loaded into memory by [`Dataset::open`].
pub const DEFAULT_MEMORY_BUDGET: u64 = 256 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("permutations need at least 3 examples, got {0}")]
    TooSmall(usize),
    #[error("permutation constraints not satisfied after {0} attempts")]
    RetriesExhausted(usize),
    #[error("permutations were sampled for {perms} examples but the dataset has {dataset}")]
    SizeMismatch { perms: usize, dataset: usize },
    #[error("index {index} out of range for dataset of {len}")]
    OutOfRange { index: usize, len: usize },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One (prompt, chosen, rejected) record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub id: String,
    #[serde(rename = "context")]
    pub prompt: String,
    #[serde(rename = "response_w")]
    pub chosen: String,
    #[serde(rename = "response_l")]
    pub rejected: String,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    context: String,
    response_w: String,
    response_l: String,
}

impl PreferenceExample {
    pub fn new(
        id: impl Into<String>,
        prompt: impl Into<String>,
        chosen: impl Into<String>,
        rejected: impl Into<String>,
    ) -> Self {
        PreferenceExample {
            id: id.into(),
            prompt: prompt.into(),
            chosen: chosen.into(),
            rejected: rejected.into(),
        }
    }
}

/// Synthesized id for a record without one (1-based line number).
pub fn line_id(line: usize) -> String {
    format!("line-{line}")
}

fn parse_line(text: &str, line: usize) -> Result<PreferenceExample, CorpusError> {
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        line,
        message: e.to_string(),
    })?;
    let ex = PreferenceExample {
        id: raw.id.unwrap_or_else(|| line_id(line)),
        prompt: raw.context,
        chosen: raw.response_w,
        rejected: raw.response_l,
    };
    for (field, value) in [
        ("context", &ex.prompt),
        ("response_w", &ex.chosen),
        ("response_l", &ex.rejected),
    ] {
        if value.is_empty() {
            return Err(CorpusError::Parse {
                line,
                message: format!("field {field:?} is empty"),
            });
        }
    }
    Ok(ex)
}

/// Parse line-delimited records from any reader, in order.
pub fn parse_preferences<R: BufRead>(reader: R) -> Result<Vec<PreferenceExample>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let text = line.map_err(|e| CorpusError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let ex = parse_line(&text, lineno)?;
        if !seen.insert(ex.id.clone()) {
            return Err(CorpusError::DuplicateId(ex.id));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_preferences(path: impl AsRef<Path>) -> Result<Vec<PreferenceExample>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    parse_preferences(BufReader::new(file))
}

pub fn write_preferences<W: Write>(
    mut writer: W,
    examples: &[PreferenceExample],
) -> std::io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut writer, ex)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_preferences(
    path: impl AsRef<Path>,
    examples: &[PreferenceExample],
) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_preferences(&mut w, examples).map_err(|e| CorpusError::io(path, e))?;
    w.flush().map_err(|e| CorpusError::io(path, e))
}

enum Storage {
    Memory(Vec<Arc<PreferenceExample>>),
    Indexed {
        path: PathBuf,
        file: File,
        /// Byte offset and length of every record line.
        spans: Vec<(u64, usize)>,
    },
}

/// A read-only dataset that is either held in memory or served from an
/// index of line offsets into the source file. Safe to share across threads.
pub struct Dataset {
    storage: Storage,
}

impl Dataset {
    pub fn from_examples(examples: Vec<PreferenceExample>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(CorpusError::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Dataset {
            storage: Storage::Memory(examples.into_iter().map(Arc::new).collect()),
        })
    }

    /// Open a record file, materializing it only when it fits in `memory_budget` bytes.
    pub fn open(path: impl AsRef<Path>, memory_budget: u64) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let size = std::fs::metadata(path)
            .map_err(|e| CorpusError::io(path, e))?
            .len();
        if size <= memory_budget {
            return Dataset::from_examples(load_preferences(path)?);
        }
        Dataset::index(path)
    }

    /// Single validating pass that records line offsets without keeping records.
    pub fn index(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
        let mut reader = BufReader::new(&file);
        let mut spans = Vec::new();
        let mut seen = HashSet::new();
        let mut offset = 0u64;
        let mut buf = String::new();
        loop {
            buf.clear();
            let read = reader
                .read_line(&mut buf)
                .map_err(|e| CorpusError::io(path, e))?;
            if read == 0 {
                break;
            }
            let lineno = spans.len() + 1;
            let text = buf.trim_end_matches(['\n', '\r']);
            let ex = parse_line(text, lineno)?;
            if !seen.insert(ex.id.clone()) {
                return Err(CorpusError::DuplicateId(ex.id));
            }
            spans.push((offset, text.len()));
            offset += read as u64;
        }
        drop(reader);
        Ok(Dataset {
            storage: Storage::Indexed {
                path: path.to_path_buf(),
                file,
                spans,
            },
        })
    }

    pub fn len(&self) -> usize {
        match &self.storage {
            Storage::Memory(v) => v.len(),
            Storage::Indexed { spans, .. } => spans.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_indexed(&self) -> bool {
        matches!(self.storage, Storage::Indexed { .. })
    }

    pub fn get(&self, index: usize) -> Result<Arc<PreferenceExample>, CorpusError> {
        let len = self.len();
        if index >= len {
            return Err(CorpusError::OutOfRange { index, len });
        }
        match &self.storage {
            Storage::Memory(v) => Ok(Arc::clone(&v[index])),
            Storage::Indexed { path, file, spans } => {
                let (offset, n) = spans[index];
                let mut buf = vec![0u8; n];
                read_exact_at(file, &mut buf, offset).map_err(|e| CorpusError::io(path, e))?;
                let text = String::from_utf8(buf).map_err(|e| CorpusError::Parse {
                    line: index + 1,
                    message: e.to_string(),
                })?;
                parse_line(&text, index + 1).map(Arc::new)
            }
        }
    }

    pub fn to_vec(&self) -> Result<Vec<PreferenceExample>, CorpusError> {
        (0..self.len())
            .map(|i| self.get(i).map(|e| (*e).clone()))
            .collect()
    }
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(not(unix))]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = file.try_clone()?;
    f.seek(SeekFrom::Start(offset))?;
    f.read_exact(buf)
}

/// Two derangements of `0..n` that also disagree pointwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationPair {
    pub sigma1: Vec<usize>,
    pub sigma2: Vec<usize>,
    pub seed: u64,
}

impl PermutationPair {
    pub fn len(&self) -> usize {
        self.sigma1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma1.is_empty()
    }

    /// Checks bijectivity and the no-self-pairing constraints.
    pub fn is_valid(&self) -> bool {
        let n = self.sigma1.len();
        if self.sigma2.len() != n {
            return false;
        }
        is_permutation(&self.sigma1)
            && is_permutation(&self.sigma2)
            && (0..n).all(|i| {
                self.sigma1[i] != i && self.sigma2[i] != i && self.sigma1[i] != self.sigma2[i]
            })
    }
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    for &v in p {
        if v >= p.len() || seen[v] {
            return false;
        }
        seen[v] = true;
    }
    true
}

/// Rejection-sample a valid [`PermutationPair`] for a dataset of `n` examples.
pub fn sample_permutations(n: usize, seed: u64) -> Result<PermutationPair, CorpusError> {
    if n < 3 {
        return Err(CorpusError::TooSmall(n));
    }
    let mut rng = rng_from(seed, &["permutations"]);
    let mut sigma1: Vec<usize> = (0..n).collect();
    let mut ok = false;
    for _ in 0..PERMUTATION_RETRY_LIMIT {
        sigma1.shuffle(&mut rng);
        if sigma1.iter().enumerate().all(|(i, &v)| v != i) {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(CorpusError::RetriesExhausted(PERMUTATION_RETRY_LIMIT));
    }
    let mut sigma2: Vec<usize> = (0..n).collect();
    for _ in 0..PERMUTATION_RETRY_LIMIT {
        sigma2.shuffle(&mut rng);
        if sigma2
            .iter()
            .enumerate()
            .all(|(i, &v)| v != i && v != sigma1[i])
        {
            return Ok(PermutationPair {
                sigma1,
                sigma2,
                seed,
            });
        }
    }
    Err(CorpusError::RetriesExhausted(PERMUTATION_RETRY_LIMIT))
}

/// `(t(i), t(sigma1(i)), t(sigma2(i)))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleTriple {
    pub base: Arc<PreferenceExample>,
    pub peer1: Arc<PreferenceExample>,
    pub peer2: Arc<PreferenceExample>,
}

impl ExampleTriple {
    pub fn new(base: PreferenceExample, peer1: PreferenceExample, peer2: PreferenceExample) -> Self {
        ExampleTriple {
            base: Arc::new(base),
            peer1: Arc::new(peer1),
            peer2: Arc::new(peer2),
        }
    }

    pub fn has_distinct_ids(&self) -> bool {
        self.base.id != self.peer1.id
            && self.base.id != self.peer2.id
            && self.peer1.id != self.peer2.id
    }
}

/// Triple `index` of the expansion, without materializing the rest.
pub fn triple_at(
    dataset: &Dataset,
    perms: &PermutationPair,
    index: usize,
) -> Result<ExampleTriple, CorpusError> {
    if perms.len() != dataset.len() {
        return Err(CorpusError::SizeMismatch {
            perms: perms.len(),
            dataset: dataset.len(),
        });
    }
    Ok(ExampleTriple {
        base: dataset.get(index)?,
        peer1: dataset.get(*perms.sigma1.get(index).ok_or(CorpusError::OutOfRange {
            index,
            len: perms.len(),
        })?)?,
        peer2: dataset.get(perms.sigma2[index])?,
    })
}

pub fn expand(dataset: &Dataset, perms: &PermutationPair) -> Result<Vec<ExampleTriple>, CorpusError> {
    if perms.len() != dataset.len() {
        return Err(CorpusError::SizeMismatch {
            perms: perms.len(),
            dataset: dataset.len(),
        });
    }
    (0..dataset.len())
        .map(|i| triple_at(dataset, perms, i))
        .collect()
}
