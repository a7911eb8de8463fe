//! Idiom embedding tables, the shared source→hidden projection, and cosine
//! similarity.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Tensor};

/// Token → vector map. Rows are in token order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable", into = "RawTable")]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    vectors: Tensor,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    tokens: Vec<String>,
    vectors: Tensor,
}

impl TryFrom<RawTable> for EmbeddingTable {
    type Error = Error;

    fn try_from(raw: RawTable) -> Result<Self> {
        EmbeddingTable::new(raw.tokens, raw.vectors)
    }
}

impl From<EmbeddingTable> for RawTable {
    fn from(table: EmbeddingTable) -> Self {
        RawTable {
            tokens: table.tokens,
            vectors: table.vectors,
        }
    }
}

impl EmbeddingTable {
    pub fn new(tokens: Vec<String>, vectors: Tensor) -> Result<Self> {
        if tokens.len() != vectors.rows {
            return Err(Error::Dimension(format!(
                "{} tokens but {} vector rows",
                tokens.len(),
                vectors.rows
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::Invalid("embedding table contains non-finite values".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate token `{token}`")));
            }
        }
        Ok(EmbeddingTable {
            tokens,
            vectors,
            index,
        })
    }

    /// Xavier-uniform rows. Each row is treated as a `1 × dim` map, so the
    /// bound is `sqrt(6 / (1 + dim))`.
    pub fn init_random(tokens: &[String], dim: usize, seed: u64) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Invalid("cannot initialize an empty embedding table".into()));
        }
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = linalg::xavier_bound(1, dim);
        let data = (0..tokens.len() * dim)
            .map(|_| rand::Rng::gen_range(&mut rng, -bound..=bound))
            .collect();
        EmbeddingTable::new(tokens.to_vec(), Tensor::from_vec(tokens.len(), dim, data))
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Tensor {
        &mut self.vectors
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn get(&self, token: &str) -> Result<&[f64]> {
        self.index_of(token)
            .map(|i| self.vectors.row(i))
            .ok_or_else(|| Error::Lookup(token.to_string()))
    }

    /// Keeps only `keep` tokens (in the order given), skipping any absent ones.
    pub fn subset<'a>(&self, keep: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut data = Vec::new();
        for token in keep {
            if let Some(i) = self.index_of(token) {
                if tokens.iter().any(|t: &String| t == token) {
                    continue;
                }
                tokens.push(token.to_string());
                data.extend_from_slice(self.vectors.row(i));
            }
        }
        let rows = tokens.len();
        EmbeddingTable::new(tokens, Tensor::from_vec(rows, self.dim(), data))
    }

    pub fn load_word2vec_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_word2vec_text(BufReader::new(file), path)
    }

    pub fn read_word2vec_text<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(line) => line.map_err(|e| Error::io(path, e))?,
            None => return Err(Error::parse(path, 1, "missing header")),
        };
        let fields: Vec<&str> = split_fields(&header);
        let (count, dim) = match fields.as_slice() {
            [c, d] => match (c.parse::<usize>(), d.parse::<usize>()) {
                (Ok(c), Ok(d)) if d > 0 => (c, d),
                _ => return Err(Error::parse(path, 1, format!("malformed header `{header}`"))),
            },
            _ => return Err(Error::parse(path, 1, format!("malformed header `{header}`"))),
        };

        let mut tokens = Vec::with_capacity(count);
        let mut seen = HashMap::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        for (offset, line) in lines.enumerate() {
            let lineno = offset + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            let fields = split_fields(&line);
            if fields.is_empty() {
                continue;
            }
            if tokens.len() == count {
                return Err(Error::parse(path, lineno, format!("more than {count} vectors")));
            }
            let token = fields[0];
            let values = &fields[1..];
            if values.len() != dim {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected {dim} floats, got {}", values.len()),
                ));
            }
            for v in values {
                let x: f64 = v
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("invalid float `{v}`")))?;
                if !x.is_finite() {
                    return Err(Error::parse(path, lineno, format!("non-finite value `{v}`")));
                }
                data.push(x);
            }
            if seen.insert(token.to_string(), lineno).is_some() {
                return Err(Error::parse(path, lineno, format!("duplicate token `{token}`")));
            }
            tokens.push(token.to_string());
        }
        if tokens.len() != count {
            return Err(Error::parse(
                path,
                tokens.len() + 2,
                format!("header declares {count} vectors, found {}", tokens.len()),
            ));
        }
        EmbeddingTable::new(tokens, Tensor::from_vec(count, dim, data))
    }

    pub fn save_word2vec_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_word2vec_text(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_word2vec_text<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim())?;
        for (i, token) in self.tokens.iter().enumerate() {
            write!(out, "{token}")?;
            for x in self.vectors.row(i) {
                write!(out, " {x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    line.trim_end_matches(['\r', '\n'])
        .split(' ')
        .filter(|f| !f.is_empty())
        .collect()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = linalg::norm(u);
    let nv = linalg::norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero vector is undefined".into()));
    }
    Ok((linalg::dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Shared affine map from the embedding width to the model hidden size:
/// `weightᵀ · row + bias` with `weight` of shape `source_dim × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Projection {
    pub fn new(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols {
            return Err(Error::Dimension(format!(
                "projection bias has length {} but weight maps to {}",
                bias.len(),
                weight.cols
            )));
        }
        let d = bias.len();
        Ok(Projection {
            weight,
            bias: Tensor::from_vec(1, d, bias),
        })
    }

    /// Xavier weight, zero bias.
    pub fn init<R: rand::Rng + ?Sized>(source_dim: usize, d: usize, rng: &mut R) -> Self {
        Projection {
            weight: Tensor::xavier(source_dim, d, rng),
            bias: Tensor::zeros(1, d),
        }
    }

    pub fn source_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        linalg::add(&linalg::matvec_t(&self.weight, row), &self.bias.data)
    }
}

pub fn project(table: &EmbeddingTable, projection: &Projection, token: &str) -> Result<Vec<f64>> {
    if table.dim() != projection.source_dim() {
        return Err(Error::Dimension(format!(
            "table width {} but projection expects {}",
            table.dim(),
            projection.source_dim()
        )));
    }
    Ok(projection.apply(table.get(token)?))
}
