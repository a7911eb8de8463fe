//! Passage encoding. The model head only consumes the blank representation
//! `q`, so any encoder implementing [`PassageEncoder`] can feed it. The
//! bundled [`ReferenceEncoder`] is a single post-norm transformer block over
//! token and position embeddings.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClozeInstance, BLANK_TOKEN, OTHER_BLANK_TOKEN};
use crate::error::{Error, Result};
use crate::linalg::{self, axpy, dot, matvec_t, Tensor};
use crate::params::{Dropout, ParamSet};

pub const DEFAULT_MAX_LEN: usize = 128;
pub const UNK_WORD: &str = "[UNK]";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Hidden state at the blank.
    pub q: Vec<f64>,
    /// Full token representation matrix, when requested.
    pub aux: Option<Tensor>,
}

/// Encoder contract consumed by the model.
pub trait PassageEncoder {
    type Params: ParamSet;
    type Tape;

    fn hidden_size(&self) -> usize;

    /// Encodes the passage; `dropout` is `Some` only in training mode.
    fn encode(&self, instance: &ClozeInstance, dropout: Option<&mut Dropout>) -> Result<(EncoderOutput, Self::Tape)>;

    /// Adds `∂(upstreamᵀ q)/∂θ` into `grads`.
    fn accumulate_gradients(&self, tape: &Self::Tape, upstream: &[f64], grads: &mut Self::Params) -> Result<()>;
}

/// Word → id map with reserved ids for unknown words and the blank tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for WordVocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        WordVocab { words, index }
    }
}

impl From<WordVocab> for Vec<String> {
    fn from(v: WordVocab) -> Self {
        v.words
    }
}

impl WordVocab {
    /// Reserved tokens first, then `words` in first-seen order.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut list: Vec<String> = vec![UNK_WORD.into(), BLANK_TOKEN.into(), OTHER_BLANK_TOKEN.into()];
        let mut index: HashMap<String, usize> = list.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        for w in words {
            if !index.contains_key(w) {
                index.insert(w.to_string(), list.len());
                list.push(w.to_string());
            }
        }
        WordVocab { words: list, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_output: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ff_in: Tensor,
    pub ff_in_bias: Tensor,
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl ParamSet for EncoderParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
            ("w_query".into(), &self.w_query),
            ("w_key".into(), &self.w_key),
            ("w_value".into(), &self.w_value),
            ("w_output".into(), &self.w_output),
            ("ln1_gain".into(), &self.ln1_gain),
            ("ln1_bias".into(), &self.ln1_bias),
            ("ff_in".into(), &self.ff_in),
            ("ff_in_bias".into(), &self.ff_in_bias),
            ("ff_out".into(), &self.ff_out),
            ("ff_out_bias".into(), &self.ff_out_bias),
            ("ln2_gain".into(), &self.ln2_gain),
            ("ln2_bias".into(), &self.ln2_bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("token_embedding".into(), &mut self.token_embedding),
            ("position_embedding".into(), &mut self.position_embedding),
            ("w_query".into(), &mut self.w_query),
            ("w_key".into(), &mut self.w_key),
            ("w_value".into(), &mut self.w_value),
            ("w_output".into(), &mut self.w_output),
            ("ln1_gain".into(), &mut self.ln1_gain),
            ("ln1_bias".into(), &mut self.ln1_bias),
            ("ff_in".into(), &mut self.ff_in),
            ("ff_in_bias".into(), &mut self.ff_in_bias),
            ("ff_out".into(), &mut self.ff_out),
            ("ff_out_bias".into(), &mut self.ff_out_bias),
            ("ln2_gain".into(), &mut self.ln2_gain),
            ("ln2_bias".into(), &mut self.ln2_bias),
        ]
    }
}

impl EncoderParams {
    pub fn init(vocab_size: usize, max_len: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row_bound = linalg::xavier_bound(1, d);
        let mut rows = |n: usize| {
            let data = (0..n * d)
                .map(|_| rand::Rng::gen_range(&mut rng, -row_bound..=row_bound))
                .collect();
            Tensor::from_vec(n, d, data)
        };
        let token_embedding = rows(vocab_size);
        let position_embedding = rows(max_len);
        EncoderParams {
            token_embedding,
            position_embedding,
            w_query: Tensor::xavier(d, d, &mut rng),
            w_key: Tensor::xavier(d, d, &mut rng),
            w_value: Tensor::xavier(d, d, &mut rng),
            w_output: Tensor::xavier(d, d, &mut rng),
            ln1_gain: Tensor::filled(1, d, 1.0),
            ln1_bias: Tensor::zeros(1, d),
            ff_in: Tensor::xavier(d, 4 * d, &mut rng),
            ff_in_bias: Tensor::zeros(1, 4 * d),
            ff_out: Tensor::xavier(4 * d, d, &mut rng),
            ff_out_bias: Tensor::zeros(1, d),
            ln2_gain: Tensor::filled(1, d, 1.0),
            ln2_bias: Tensor::zeros(1, d),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_query.rows
    }

    pub fn max_len(&self) -> usize {
        self.position_embedding.rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEncoder {
    pub vocab: WordVocab,
    params: EncoderParams,
    #[serde(skip)]
    generation: u64,
}

/// Recorded intermediates of one [`ReferenceEncoder::encode`] call.
#[derive(Debug, Clone)]
pub struct EncoderTape {
    generation: u64,
    ids: Vec<usize>,
    blank: usize,
    x: Tensor,
    keys: Tensor,
    values: Tensor,
    row: RowCache,
}

#[derive(Debug, Clone)]
struct RowCache {
    query: Vec<f64>,
    attention: Vec<f64>,
    context: Vec<f64>,
    ln1: LayerNormCache,
    h1: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_hidden: Vec<f64>,
    mask: Vec<f64>,
    ln2: LayerNormCache,
}

#[derive(Debug, Clone)]
struct LayerNormCache {
    normalized: Vec<f64>,
    inv_std: f64,
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let normalized: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out = normalized
        .iter()
        .zip(gain)
        .zip(bias)
        .map(|((xh, g), b)| g * xh + b)
        .collect();
    (out, LayerNormCache { normalized, inv_std })
}

/// Returns `dx`, adding into the gain and bias gradients.
fn layer_norm_backward(cache: &LayerNormCache, gain: &[f64], dy: &[f64], dgain: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let n = dy.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
    for i in 0..dy.len() {
        dgain[i] += dy[i] * cache.normalized[i];
        dbias[i] += dy[i];
    }
    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
    let mean_dxhat_xhat = dot(&dxhat, &cache.normalized) / n;
    dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(dxh, xh)| cache.inv_std * (dxh - mean_dxhat - xh * mean_dxhat_xhat))
        .collect()
}

/// Window of at most `max_len` tokens that keeps the blank, centered on it
/// where possible.
pub fn truncation_window(len: usize, blank: usize, max_len: usize) -> (usize, usize) {
    if len <= max_len {
        return (0, len);
    }
    let start = blank.saturating_sub(max_len / 2).min(len - max_len);
    (start, start + max_len)
}

impl ReferenceEncoder {
    pub fn new(vocab: WordVocab, d: usize, max_len: usize, seed: u64) -> Result<Self> {
        if d == 0 || max_len == 0 {
            return Err(Error::Config("encoder width and max length must be positive".into()));
        }
        let params = EncoderParams::init(vocab.len(), max_len, d, seed);
        Ok(ReferenceEncoder {
            vocab,
            params,
            generation: 0,
        })
    }

    pub fn from_params(vocab: WordVocab, params: EncoderParams) -> Result<Self> {
        if params.token_embedding.rows != vocab.len() {
            return Err(Error::Dimension(format!(
                "vocabulary has {} words but token embedding has {} rows",
                vocab.len(),
                params.token_embedding.rows
            )));
        }
        Ok(ReferenceEncoder {
            vocab,
            params,
            generation: 0,
        })
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    /// Mutable access invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut EncoderParams {
        self.generation += 1;
        &mut self.params
    }

    pub fn max_len(&self) -> usize {
        self.params.max_len()
    }

    fn embed(&self, instance: &ClozeInstance) -> Result<(Vec<usize>, usize, Tensor)> {
        if instance.tokens.is_empty() {
            return Err(Error::Invalid("cannot encode an empty passage".into()));
        }
        if instance.blank_index >= instance.tokens.len() {
            return Err(Error::Invalid("blank index outside passage".into()));
        }
        let (start, end) = truncation_window(instance.tokens.len(), instance.blank_index, self.max_len());
        let ids: Vec<usize> = instance.tokens[start..end].iter().map(|t| self.vocab.id(t)).collect();
        let d = self.hidden_size();
        let mut x = Tensor::zeros(ids.len(), d);
        for (p, &id) in ids.iter().enumerate() {
            let row = x.row_mut(p);
            row.copy_from_slice(self.params.token_embedding.row(id));
            axpy(1.0, self.params.position_embedding.row(p), row);
        }
        Ok((ids, instance.blank_index - start, x))
    }

    fn project_rows(&self, x: &Tensor, w: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(x.rows, w.cols);
        for p in 0..x.rows {
            out.row_mut(p).copy_from_slice(&matvec_t(w, x.row(p)));
        }
        out
    }

    fn layer_row(&self, x: &Tensor, keys: &Tensor, values: &Tensor, at: usize, dropout: Option<&mut Dropout>) -> (Vec<f64>, RowCache) {
        let p = &self.params;
        let d = self.hidden_size();
        let scale = 1.0 / (d as f64).sqrt();
        let query = matvec_t(&p.w_query, x.row(at));
        let logits: Vec<f64> = (0..x.rows).map(|j| dot(&query, keys.row(j)) * scale).collect();
        let attention = linalg::softmax(&logits);
        let mut context = vec![0.0; d];
        for (j, &a) in attention.iter().enumerate() {
            axpy(a, values.row(j), &mut context);
        }
        let attended = matvec_t(&p.w_output, &context);
        let residual1 = linalg::add(x.row(at), &attended);
        let (h1, ln1) = layer_norm(&residual1, &p.ln1_gain.data, &p.ln1_bias.data);
        let ff_pre = linalg::add(&matvec_t(&p.ff_in, &h1), &p.ff_in_bias.data);
        let ff_hidden: Vec<f64> = ff_pre.iter().map(|&u| u.max(0.0)).collect();
        let ff = linalg::add(&matvec_t(&p.ff_out, &ff_hidden), &p.ff_out_bias.data);
        let mask = match dropout {
            Some(dr) => dr.mask(d),
            None => vec![1.0; d],
        };
        let residual2: Vec<f64> = h1.iter().zip(&ff).zip(&mask).map(|((h, f), m)| h + f * m).collect();
        let (out, ln2) = layer_norm(&residual2, &p.ln2_gain.data, &p.ln2_bias.data);
        (
            out,
            RowCache {
                query,
                attention,
                context,
                ln1,
                h1,
                ff_pre,
                ff_hidden,
                mask,
                ln2,
            },
        )
    }

    /// Output rows for every (post-truncation) position, in eval mode.
    pub fn encode_all_positions(&self, instance: &ClozeInstance) -> Result<Tensor> {
        let (_, _, x) = self.embed(instance)?;
        let keys = self.project_rows(&x, &self.params.w_key);
        let values = self.project_rows(&x, &self.params.w_value);
        let mut out = Tensor::zeros(x.rows, self.hidden_size());
        for p in 0..x.rows {
            let (row, _) = self.layer_row(&x, &keys, &values, p, None);
            out.row_mut(p).copy_from_slice(&row);
        }
        Ok(out)
    }

    /// Convenience: encode, then backpropagate `upstream` into fresh gradients.
    pub fn encode_gradients(&self, instance: &ClozeInstance, upstream: &[f64]) -> Result<EncoderParams> {
        let (_, tape) = self.encode(instance, None)?;
        let mut grads = self.params.zeros_like();
        self.accumulate_gradients(&tape, upstream, &mut grads)?;
        Ok(grads)
    }
}

impl PassageEncoder for ReferenceEncoder {
    type Params = EncoderParams;
    type Tape = EncoderTape;

    fn hidden_size(&self) -> usize {
        self.params.hidden_size()
    }

    fn encode(&self, instance: &ClozeInstance, dropout: Option<&mut Dropout>) -> Result<(EncoderOutput, EncoderTape)> {
        let (ids, blank, x) = self.embed(instance)?;
        let keys = self.project_rows(&x, &self.params.w_key);
        let values = self.project_rows(&x, &self.params.w_value);
        let (q, row) = self.layer_row(&x, &keys, &values, blank, dropout);
        Ok((
            EncoderOutput { q, aux: None },
            EncoderTape {
                generation: self.generation,
                ids,
                blank,
                x,
                keys,
                values,
                row,
            },
        ))
    }

    fn accumulate_gradients(&self, tape: &EncoderTape, upstream: &[f64], g: &mut EncoderParams) -> Result<()> {
        if tape.generation != self.generation {
            return Err(Error::Usage("encoder tape predates a parameter update".into()));
        }
        let d = self.hidden_size();
        if upstream.len() != d {
            return Err(Error::Dimension(format!("upstream length {} but hidden size {d}", upstream.len())));
        }
        let p = &self.params;
        let r = &tape.row;
        let scale = 1.0 / (d as f64).sqrt();

        let d_res2 = layer_norm_backward(&r.ln2, &p.ln2_gain.data, upstream, &mut g.ln2_gain.data, &mut g.ln2_bias.data);
        let mut d_h1 = d_res2.clone();
        let d_ff: Vec<f64> = d_res2.iter().zip(&r.mask).map(|(a, m)| a * m).collect();
        g.ff_out.add_outer(&r.ff_hidden, &d_ff);
        axpy(1.0, &d_ff, &mut g.ff_out_bias.data);
        let d_hidden = linalg::matvec(&p.ff_out, &d_ff);
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&r.ff_pre)
            .map(|(dh, u)| if *u > 0.0 { *dh } else { 0.0 })
            .collect();
        g.ff_in.add_outer(&r.h1, &d_pre);
        axpy(1.0, &d_pre, &mut g.ff_in_bias.data);
        axpy(1.0, &linalg::matvec(&p.ff_in, &d_pre), &mut d_h1);

        let d_res1 = layer_norm_backward(&r.ln1, &p.ln1_gain.data, &d_h1, &mut g.ln1_gain.data, &mut g.ln1_bias.data);
        let mut dx = Tensor::zeros(tape.x.rows, d);
        axpy(1.0, &d_res1, dx.row_mut(tape.blank));
        g.w_output.add_outer(&r.context, &d_res1);
        let d_context = linalg::matvec(&p.w_output, &d_res1);

        let d_attention: Vec<f64> = (0..tape.x.rows).map(|j| dot(&d_context, tape.values.row(j))).collect();
        let d_logits = linalg::softmax_backward(&r.attention, &d_attention);
        let mut d_query = vec![0.0; d];
        for j in 0..tape.x.rows {
            let xj = tape.x.row(j);
            // value path
            let dv: Vec<f64> = d_context.iter().map(|c| c * r.attention[j]).collect();
            g.w_value.add_outer(xj, &dv);
            axpy(1.0, &linalg::matvec(&p.w_value, &dv), dx.row_mut(j));
            // key path
            let ds = d_logits[j] * scale;
            axpy(ds, tape.keys.row(j), &mut d_query);
            let dk: Vec<f64> = r.query.iter().map(|q| q * ds).collect();
            g.w_key.add_outer(xj, &dk);
            axpy(1.0, &linalg::matvec(&p.w_key, &dk), dx.row_mut(j));
        }
        g.w_query.add_outer(tape.x.row(tape.blank), &d_query);
        axpy(1.0, &linalg::matvec(&p.w_query, &d_query), dx.row_mut(tape.blank));

        for (pos, &id) in tape.ids.iter().enumerate() {
            axpy(1.0, dx.row(pos), g.token_embedding.row_mut(id));
            axpy(1.0, dx.row(pos), g.position_embedding.row_mut(pos));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance(tokens: &[&str]) -> ClozeInstance {
        let tokens: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
        let blank = tokens.iter().position(|t| t == BLANK_TOKEN).unwrap();
        ClozeInstance::new(tokens, blank, vec!["x".into(), "y".into()], 0).unwrap()
    }

    fn encoder(d: usize, max_len: usize) -> ReferenceEncoder {
        let vocab = WordVocab::build(["a", "b", "c", "d", "e"]);
        ReferenceEncoder::new(vocab, d, max_len, 3).unwrap()
    }

    #[test]
    fn single_blank_passage_is_finite() {
        let enc = encoder(8, 16);
        let (out, _) = enc.encode(&instance(&[BLANK_TOKEN]), None).unwrap();
        assert_eq!(out.q.len(), 8);
        assert!(out.q.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn eval_encoding_is_bitwise_repeatable_and_matches_full_matrix() {
        let enc = encoder(8, 16);
        let inst = instance(&["a", "b", BLANK_TOKEN, "c"]);
        let (a, _) = enc.encode(&inst, None).unwrap();
        let (b, _) = enc.encode(&inst, None).unwrap();
        assert_eq!(a, b);
        let full = enc.encode_all_positions(&inst).unwrap();
        assert_eq!(full.row(2), a.q.as_slice());
    }

    #[test]
    fn context_after_blank_matters() {
        let enc = encoder(8, 16);
        let (a, _) = enc.encode(&instance(&["a", BLANK_TOKEN, "b"]), None).unwrap();
        let (b, _) = enc.encode(&instance(&["a", BLANK_TOKEN, "c"]), None).unwrap();
        assert_ne!(a.q, b.q);
    }

    #[test]
    fn truncation_keeps_blank() {
        for len in 1..40 {
            for blank in 0..len {
                let (s, e) = truncation_window(len, blank, 7);
                assert!(s <= blank && blank < e);
                assert_eq!(e - s, len.min(7));
            }
        }
        let enc = encoder(4, 4);
        let long: Vec<&str> = std::iter::repeat_n("a", 10).chain([BLANK_TOKEN]).chain(std::iter::repeat_n("b", 10)).collect();
        let (out, tape) = enc.encode(&instance(&long), None).unwrap();
        assert_eq!(tape.ids.len(), 4);
        assert_eq!(tape.ids[tape.blank], 1);
        assert!(out.q.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let enc = encoder(8, 16);
        let g = enc.encode_gradients(&instance(&["a", BLANK_TOKEN, "b"]), &[0.0; 8]).unwrap();
        assert!(g.tensors().iter().all(|(_, t)| t.data.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut enc = encoder(4, 8);
        let (_, tape) = enc.encode(&instance(&[BLANK_TOKEN, "a"]), None).unwrap();
        enc.params_mut().ln1_bias.data[0] += 0.1;
        let mut g = enc.params().zeros_like();
        assert!(matches!(enc.accumulate_gradients(&tape, &[1.0; 4], &mut g), Err(Error::Usage(_))));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = WordVocab::build(["a"]);
        assert_eq!(v.id("zzz"), 0);
        assert_eq!(v.id(BLANK_TOKEN), 1);
        assert_eq!(v.id("a"), 3);
    }
}
