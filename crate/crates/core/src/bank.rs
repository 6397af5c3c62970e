//! Offline experience bank: context to guidance pairs.
//!
//! On disk the bank is line-delimited JSON. Line 1 is the header
//! `{"feature_dim": F, "vocab_size": V}`, every further line one entry.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceEntry {
    pub entry_id: String,
    pub context_id: String,
    #[serde(rename = "features")]
    pub context_features: Vec<f64>,
    #[serde(rename = "guidance")]
    pub guidance_tokens: Vec<u32>,
    #[serde(rename = "split")]
    pub split_tag: SplitTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankHeader {
    pub feature_dim: usize,
    /// Number of content tokens; guidance ids lie in `[0, vocab_size)`.
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceBank {
    pub header: BankHeader,
    pub entries: Vec<ExperienceEntry>,
}

impl ExperienceBank {
    /// Builds a bank, checking every invariant.
    pub fn new(header: BankHeader, entries: Vec<ExperienceEntry>) -> Result<Self> {
        let bank = Self { header, entries };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.header.feature_dim == 0 || self.header.vocab_size == 0 {
            return Err(Error::Schema(
                "feature_dim and vocab_size must be positive".into(),
            ));
        }
        let mut seen = HashSet::new();
        for entry in &self.entries {
            self.validate_entry(entry)?;
            if !seen.insert(entry.entry_id.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate entry_id `{}`",
                    entry.entry_id
                )));
            }
        }
        Ok(())
    }

    fn validate_entry(&self, entry: &ExperienceEntry) -> Result<()> {
        if entry.context_features.len() != self.header.feature_dim {
            return Err(Error::Schema(format!(
                "entry `{}` has {} features, header declares {}",
                entry.entry_id,
                entry.context_features.len(),
                self.header.feature_dim
            )));
        }
        if entry.context_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!(
                "entry `{}` has non-finite features",
                entry.entry_id
            )));
        }
        if entry.guidance_tokens.is_empty() {
            return Err(Error::Schema(format!(
                "entry `{}` has empty guidance",
                entry.entry_id
            )));
        }
        // Decision and end-of-sequence ids sit above the content range, so a
        // range check also excludes them.
        if let Some(&tok) = entry
            .guidance_tokens
            .iter()
            .find(|&&t| t as usize >= self.header.vocab_size)
        {
            return Err(Error::Schema(format!(
                "entry `{}` has token {tok} outside content vocabulary of size {}",
                entry.entry_id, self.header.vocab_size
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries tagged with `tag`, as a bank sharing this header.
    pub fn with_tag(&self, tag: SplitTag) -> ExperienceBank {
        ExperienceBank {
            header: self.header,
            entries: self
                .entries
                .iter()
                .filter(|e| e.split_tag == tag)
                .cloned()
                .collect(),
        }
    }

    pub fn context_ids(&self) -> HashSet<&str> {
        self.entries.iter().map(|e| e.context_id.as_str()).collect()
    }

    /// The entry whose features have the highest cosine similarity to
    /// `features`; ties go to the lexicographically smallest `entry_id`.
    pub fn nearest(&self, features: &[f64]) -> Option<&ExperienceEntry> {
        let mut best: Option<(&ExperienceEntry, f64)> = None;
        for e in &self.entries {
            let s = cosine(&e.context_features, features);
            best = match best {
                Some((b, bs)) if bs > s || (bs == s && b.entry_id <= e.entry_id) => Some((b, bs)),
                _ => Some((e, s)),
            };
        }
        best.map(|(e, _)| e)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let header: BankHeader = match lines.next() {
            Some((_, l)) => serde_json::from_str(l).map_err(|e| parse_err(1, e.to_string()))?,
            None => return Err(parse_err(1, "missing header line".into())),
        };
        let mut entries = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ExperienceEntry =
                serde_json::from_str(line).map_err(|e| parse_err(idx + 1, e.to_string()))?;
            entries.push(entry);
        }
        ExperienceBank::new(header, entries)
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<ExperienceBank> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    ExperienceBank::from_jsonl(&text, path)
}

pub fn save_bank(bank: &ExperienceBank, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(bank.to_jsonl()?.as_bytes())?;
    Ok(())
}

/// Splits at `context_id` granularity: the distinct contexts are shuffled
/// with `seed`, the first `ceil(n * train_fraction)` go to train. Entries keep
/// their original relative order inside each half.
pub fn split_bank(
    bank: &ExperienceBank,
    train_fraction: f64,
    seed: u64,
) -> Result<(ExperienceBank, ExperienceBank)> {
    if bank.is_empty() {
        return Err(Error::Domain("cannot split an empty bank".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Domain(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut contexts: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for e in &bank.entries {
        if seen.insert(e.context_id.as_str()) {
            contexts.push(e.context_id.as_str());
        }
    }
    let mut rng = rng::stream(seed, &[rng::hash_str("split_bank")]);
    contexts.shuffle(&mut rng);
    let n_train = ((contexts.len() as f64) * train_fraction).ceil() as usize;
    let train_set: HashMap<&str, bool> = contexts
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, i < n_train))
        .collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &bank.entries {
        let mut e = e.clone();
        if train_set[e.context_id.as_str()] {
            e.split_tag = SplitTag::Train;
            train.push(e);
        } else {
            e.split_tag = SplitTag::Test;
            test.push(e);
        }
    }
    Ok((
        ExperienceBank {
            header: bank.header,
            entries: train,
        },
        ExperienceBank {
            header: bank.header,
            entries: test,
        },
    ))
}
