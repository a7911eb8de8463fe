//! Cloze-style idiom comprehension data: ChID-compatible JSONL ingestion,
//! batching, and candidate vocabularies.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholder marking a blank inside ChID `content`.
pub const PLACEHOLDER: &str = "#idiom#";
/// Token occupying the blank the instance asks about.
pub const BLANK_TOKEN: &str = "[MASK]";
/// Token occupying the other blanks of a multi-blank document.
pub const OTHER_BLANK_TOKEN: &str = "[BLANK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    /// Unicode whitespace split; placeholders are atomic.
    #[default]
    Whitespace,
    /// Every non-whitespace character is a token; placeholders are atomic.
    Character,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeInstance {
    pub tokens: Vec<String>,
    pub blank_index: usize,
    pub candidates: Vec<String>,
    pub gold: usize,
}

impl ClozeInstance {
    pub fn new(
        tokens: Vec<String>,
        blank_index: usize,
        candidates: Vec<String>,
        gold: usize,
    ) -> Result<Self> {
        let inst = ClozeInstance {
            tokens,
            blank_index,
            candidates,
            gold,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blank_index >= self.tokens.len() {
            return Err(Error::Invalid(format!(
                "blank index {} outside passage of {} tokens",
                self.blank_index,
                self.tokens.len()
            )));
        }
        let blanks = self.tokens.iter().filter(|t| *t == BLANK_TOKEN).count();
        if self.tokens[self.blank_index] != BLANK_TOKEN || blanks != 1 {
            return Err(Error::Invalid("passage must hold exactly one blank token at blank_index".into()));
        }
        if self.candidates.len() < 2 {
            return Err(Error::Invalid("at least two candidates are required".into()));
        }
        let distinct: BTreeSet<&String> = self.candidates.iter().collect();
        if distinct.len() != self.candidates.len() {
            return Err(Error::Invalid("candidates must be distinct".into()));
        }
        if self.gold >= self.candidates.len() {
            return Err(Error::Invalid(format!(
                "gold index {} out of range for {} candidates",
                self.gold,
                self.candidates.len()
            )));
        }
        Ok(())
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }

    /// Same passage with candidates reordered so that new position `i` holds
    /// old candidate `perm[i]`.
    pub fn permute_candidates(&self, perm: &[usize]) -> ClozeInstance {
        let candidates = perm.iter().map(|&p| self.candidates[p].clone()).collect();
        let gold = perm.iter().position(|&p| p == self.gold).expect("permutation");
        ClozeInstance {
            tokens: self.tokens.clone(),
            blank_index: self.blank_index,
            candidates,
            gold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Dev,
    Test,
    Ran,
    Sim,
    Out,
    Custom(String),
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitName::Train => f.write_str("train"),
            SplitName::Dev => f.write_str("dev"),
            SplitName::Test => f.write_str("test"),
            SplitName::Ran => f.write_str("ran"),
            SplitName::Sim => f.write_str("sim"),
            SplitName::Out => f.write_str("out"),
            SplitName::Custom(name) => f.write_str(name),
        }
    }
}

impl FromStr for SplitName {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "train" => SplitName::Train,
            "dev" => SplitName::Dev,
            "test" => SplitName::Test,
            "ran" => SplitName::Ran,
            "sim" => SplitName::Sim,
            "out" => SplitName::Out,
            _ => SplitName::Custom(s.to_string()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub name: SplitName,
    pub instances: Vec<ClozeInstance>,
}

#[derive(Deserialize)]
struct RawDocument {
    content: String,
    candidates: Vec<Vec<String>>,
    #[serde(rename = "groundTruth")]
    ground_truth: Vec<String>,
}

impl CorpusSplit {
    pub fn new(name: SplitName, instances: Vec<ClozeInstance>) -> Self {
        CorpusSplit { name, instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn load_jsonl(path: impl AsRef<Path>, name: SplitName, tokenization: Tokenization) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(file), path, name, tokenization)
    }

    /// Each document with `k` placeholders expands into `k` instances.
    pub fn read_jsonl<R: BufRead>(
        reader: R,
        path: &Path,
        name: SplitName,
        tokenization: Tokenization,
    ) -> Result<Self> {
        let mut instances = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: RawDocument = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, lineno, format!("invalid document: {e}")))?;
            let expanded = expand_document(&doc, tokenization)
                .map_err(|msg| Error::parse(path, lineno, msg))?;
            instances.extend(expanded);
        }
        Ok(CorpusSplit { name, instances })
    }

    /// Union of all candidate idioms.
    pub fn vocabulary(&self) -> BTreeSet<String> {
        self.instances
            .iter()
            .flat_map(|inst| inst.candidates.iter().cloned())
            .collect()
    }
}

fn expand_document(doc: &RawDocument, tokenization: Tokenization) -> std::result::Result<Vec<ClozeInstance>, String> {
    let segments: Vec<&str> = doc.content.split(PLACEHOLDER).collect();
    let blanks = segments.len() - 1;
    if blanks == 0 {
        return Err(format!("content holds no `{PLACEHOLDER}` placeholder"));
    }
    if doc.ground_truth.len() != blanks {
        return Err(format!(
            "{blanks} placeholders but {} groundTruth entries",
            doc.ground_truth.len()
        ));
    }
    if doc.candidates.len() != blanks {
        return Err(format!(
            "{blanks} placeholders but {} candidate lists",
            doc.candidates.len()
        ));
    }

    // tokens per text segment, with the placeholder positions in between
    let mut tokens: Vec<String> = Vec::new();
    let mut blank_positions = Vec::with_capacity(blanks);
    for (k, segment) in segments.iter().enumerate() {
        tokenize_into(segment, tokenization, &mut tokens);
        if k < blanks {
            blank_positions.push(tokens.len());
            tokens.push(OTHER_BLANK_TOKEN.to_string());
        }
    }

    let mut out = Vec::with_capacity(blanks);
    for (k, &pos) in blank_positions.iter().enumerate() {
        let candidates = doc.candidates[k].clone();
        let gold = candidates
            .iter()
            .position(|c| *c == doc.ground_truth[k])
            .ok_or_else(|| format!("blank {}: gold idiom `{}` not among candidates", k + 1, doc.ground_truth[k]))?;
        let mut inst_tokens = tokens.clone();
        inst_tokens[pos] = BLANK_TOKEN.to_string();
        let inst = ClozeInstance::new(inst_tokens, pos, candidates, gold)
            .map_err(|e| format!("blank {}: {e}", k + 1))?;
        out.push(inst);
    }
    Ok(out)
}

fn tokenize_into(text: &str, tokenization: Tokenization, out: &mut Vec<String>) {
    match tokenization {
        Tokenization::Whitespace => out.extend(text.split_whitespace().map(String::from)),
        Tokenization::Character => out.extend(
            text.chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| c.to_string()),
        ),
    }
}

/// Partitions `0..len` into batches of `batch_size` (the last may be short),
/// optionally shuffled with `seed`.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}
