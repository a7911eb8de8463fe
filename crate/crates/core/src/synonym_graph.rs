//! Per-idiom star graphs built from a synonym dictionary or from embedding
//! similarity.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::{cosine, EmbeddingTable};
use crate::error::{Error, Result};
use crate::exec::Executor;

/// Threshold used when graphs come from embeddings.
pub const DEFAULT_THRESHOLD: f64 = 0.65;
pub const DEFAULT_NEIGHBOR_CAP: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    Dictionary,
    EmbeddingThreshold,
}

impl fmt::Display for GraphSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphSource::Dictionary => "dictionary",
            GraphSource::EmbeddingThreshold => "embedding_threshold",
        })
    }
}

impl FromStr for GraphSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dictionary" => Ok(GraphSource::Dictionary),
            "embedding_threshold" => Ok(GraphSource::EmbeddingThreshold),
            other => Err(Error::Invalid(format!("unknown graph source `{other}`"))),
        }
    }
}

/// A candidate idiom and its synonym group. Edges only join the center to
/// each neighbor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymGraph {
    pub center: String,
    pub neighbors: Vec<String>,
    pub source: GraphSource,
}

impl SynonymGraph {
    pub fn new(center: String, neighbors: Vec<String>, source: GraphSource) -> Result<Self> {
        let graph = SynonymGraph {
            center,
            neighbors,
            source,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.neighbors.len());
        for n in &self.neighbors {
            if *n == self.center {
                return Err(Error::Invalid(format!("`{}` listed as its own neighbor", n)));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Invalid(format!(
                    "neighbor `{}` repeated in graph of `{}`",
                    n, self.center
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SynonymDictionary {
    pub groups: Vec<Vec<String>>,
}

impl SynonymDictionary {
    /// One synonym group per non-empty line; members separated by whitespace.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file), path)
    }

    pub fn read<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let mut groups = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut group: Vec<String> = Vec::new();
            for member in line.split_whitespace() {
                if !group.iter().any(|g| g == member) {
                    group.push(member.to_string());
                }
            }
            if group.len() < 2 {
                return Err(Error::parse(
                    path,
                    i + 1,
                    "a synonym group needs at least 2 distinct idioms",
                ));
            }
            groups.push(group);
        }
        Ok(SynonymDictionary { groups })
    }

    /// Every idiom mentioned by any group, in first-appearance order.
    pub fn idioms(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.groups
            .iter()
            .flatten()
            .filter(|i| seen.insert(i.as_str()))
            .cloned()
            .collect()
    }
}

/// Neighbors are the union of every group containing `idiom`, minus the idiom.
pub fn build_from_dictionary(dict: &SynonymDictionary, idiom: &str) -> SynonymGraph {
    let mut neighbors: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for group in dict.groups.iter().filter(|g| g.iter().any(|m| m == idiom)) {
        for member in group {
            if member != idiom && seen.insert(member.as_str()) {
                neighbors.push(member.clone());
            }
        }
    }
    SynonymGraph {
        center: idiom.to_string(),
        neighbors,
        source: GraphSource::Dictionary,
    }
}

/// Neighbors are vocabulary idioms whose cosine with `idiom` is strictly
/// above `threshold`, most similar first, at most `cap` of them.
pub fn build_from_embeddings(
    table: &EmbeddingTable,
    idiom: &str,
    threshold: f64,
    cap: usize,
) -> Result<SynonymGraph> {
    if !(threshold > -1.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (-1, 1)")));
    }
    if cap == 0 {
        return Err(Error::Config("neighbor cap must be positive".into()));
    }
    let center_row = table.get(idiom)?;
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for (j, token) in table.tokens().iter().enumerate() {
        if token == idiom {
            continue;
        }
        // zero rows have no defined similarity and never become neighbors
        if let Ok(sim) = cosine(center_row, table.vectors().row(j)) {
            if sim > threshold {
                scored.push((sim, j));
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(cap);
    Ok(SynonymGraph {
        center: idiom.to_string(),
        neighbors: scored
            .into_iter()
            .map(|(_, j)| table.tokens()[j].clone())
            .collect(),
        source: GraphSource::EmbeddingThreshold,
    })
}

/// A collection of graphs keyed by center idiom.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GraphSet {
    graphs: BTreeMap<String, SynonymGraph>,
}

impl GraphSet {
    pub fn new() -> Self {
        GraphSet::default()
    }

    pub fn from_graphs(graphs: impl IntoIterator<Item = SynonymGraph>) -> Result<Self> {
        let mut set = GraphSet::new();
        for g in graphs {
            set.insert(g)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, graph: SynonymGraph) -> Result<()> {
        graph.validate()?;
        if self.graphs.contains_key(&graph.center) {
            return Err(Error::Invalid(format!("duplicate center `{}`", graph.center)));
        }
        self.graphs.insert(graph.center.clone(), graph);
        Ok(())
    }

    pub fn get(&self, idiom: &str) -> Option<&SynonymGraph> {
        self.graphs.get(idiom)
    }

    /// Neighbors of `idiom`; idioms without a graph have none.
    pub fn neighbors(&self, idiom: &str) -> &[String] {
        self.graphs
            .get(idiom)
            .map(|g| g.neighbors.as_slice())
            .unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SynonymGraph> {
        self.graphs.values()
    }

    /// Undirected edge list with each pair ordered lexicographically.
    pub fn edges(&self) -> HashSet<(String, String)> {
        self.iter()
            .flat_map(|g| {
                g.neighbors.iter().map(move |n| {
                    if g.center <= *n {
                        (g.center.clone(), n.clone())
                    } else {
                        (n.clone(), g.center.clone())
                    }
                })
            })
            .collect()
    }

    /// Dictionary graphs for every idiom in `idioms`.
    pub fn from_dictionary<'a>(
        dict: &SynonymDictionary,
        idioms: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut set = GraphSet::new();
        for idiom in idioms {
            if !set.graphs.contains_key(idiom) {
                set.insert(build_from_dictionary(dict, idiom))?;
            }
        }
        Ok(set)
    }

    /// Embedding graphs for each center, computed across `exec` workers.
    pub fn from_embeddings(
        table: &EmbeddingTable,
        centers: &[String],
        threshold: f64,
        cap: usize,
        exec: &Executor,
    ) -> Result<Self> {
        let built = exec.map(centers, |_, c| build_from_embeddings(table, c, threshold, cap));
        let mut set = GraphSet::new();
        for g in built {
            let g = g?;
            if !set.graphs.contains_key(&g.center) {
                set.insert(g)?;
            }
        }
        Ok(set)
    }

    /// Replaces every neighbor list with `cap` idioms drawn uniformly without
    /// replacement from `pool` (never the center itself). `centers` lists the
    /// idioms that need a graph.
    pub fn randomized(centers: &[String], pool: &[String], cap: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = GraphSet::new();
        for center in centers {
            if set.graphs.contains_key(center) {
                continue;
            }
            let others: Vec<&String> = pool.iter().filter(|p| *p != center).collect();
            let neighbors = others
                .choose_multiple(&mut rng, cap.min(others.len()))
                .map(|s| (*s).clone())
                .collect();
            set.insert(SynonymGraph {
                center: center.clone(),
                neighbors,
                source: GraphSource::EmbeddingThreshold,
            })?;
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// `center TAB n1 SPACE n2 ...`, one graph per line, sorted by center.
    /// Graphs whose source differs from the first are tagged by a
    /// `#source` line preceding them.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current: Option<GraphSource> = None;
        for g in self.iter() {
            if current != Some(g.source) {
                out.push_str(&format!("#source\t{}\n", g.source));
                current = Some(g.source);
            }
            out.push_str(&g.center);
            out.push('\t');
            out.push_str(&g.neighbors.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file), path)
    }

    pub fn read<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let mut set = GraphSet::new();
        let mut source = GraphSource::Dictionary;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let Some((center, rest)) = line.split_once('\t') else {
                return Err(Error::parse(path, lineno, "expected `center<TAB>neighbors`"));
            };
            if center == "#source" {
                source = rest
                    .trim()
                    .parse()
                    .map_err(|e: Error| Error::parse(path, lineno, e.to_string()))?;
                continue;
            }
            if center.is_empty() || center.contains(' ') {
                return Err(Error::parse(path, lineno, format!("malformed center `{center}`")));
            }
            if set.graphs.contains_key(center) {
                return Err(Error::parse(path, lineno, format!("duplicate center `{center}`")));
            }
            let neighbors = rest.split(' ').filter(|s| !s.is_empty()).map(String::from).collect();
            let graph = SynonymGraph::new(center.to_string(), neighbors, source)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
            set.graphs.insert(graph.center.clone(), graph);
        }
        Ok(set)
    }

    /// SHA-256 of the persisted text form.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
