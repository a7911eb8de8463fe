//! The synonym-knowledge-enhanced reader head and the full model.
//!
//! For each candidate idiom `z` with synonyms `n_1..n_l`, given the blank
//! representation `q`:
//!
//! ```text
//! z_t = q ⊙ z                                   (same for every n)
//! z̃   = W_sᵀ ReLU(W_tᵀ z_t + b_t) + b_s + z_t
//! N   = [z̃, ñ_1, …, ñ_l]
//! head_i = softmax((W_i^Q z̃⁽ⁱ⁾)ᵀ W_i^K N⁽ⁱ⁾ / √d_h) (W_i^V N⁽ⁱ⁾)ᵀ
//! ẑ   = W^O [head_1 ‖ … ‖ head_h] + b^O
//! g   = σ(W_g z̃ + b_g)
//! ž   = g ⊙ ẑ + (1 − g) ⊙ z̃
//! P(i) = softmax_i(u_oᵀ ž_i + b_o)
//! ```
//!
//! Every intermediate is kept in a [`ForwardTrace`] and [`SkerModel::backward`]
//! walks it in reverse.


use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ClozeInstance;
use crate::embeddings::{EmbeddingTable, Projection};
use crate::encoder::{EncoderParams, EncoderTape, PassageEncoder, ReferenceEncoder, WordVocab};
use crate::error::{Error, Result};
use crate::linalg::{self, axpy, dot, Tensor};
use crate::params::{prefixed, prefixed_mut, Dropout, ParamSet};
use crate::synonym_graph::GraphSet;

/// Embedding row used for idioms missing from the table.
pub const UNK_IDIOM: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_synonyms: bool,
    pub use_gate: bool,
    pub use_gat: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig::FULL
    }
}

impl AblationConfig {
    pub const FULL: AblationConfig = AblationConfig {
        use_synonyms: true,
        use_gate: true,
        use_gat: true,
    };
    pub const WITHOUT_SYNONYM: AblationConfig = AblationConfig {
        use_synonyms: false,
        use_gate: true,
        use_gat: true,
    };
    pub const WITHOUT_GATE: AblationConfig = AblationConfig {
        use_synonyms: true,
        use_gate: false,
        use_gat: true,
    };
    pub const WITHOUT_GATE_AND_GAT: AblationConfig = AblationConfig {
        use_synonyms: true,
        use_gate: false,
        use_gat: false,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.use_gat && self.use_gate {
            return Err(Error::Config("disabling graph attention requires disabling the gate".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match (self.use_synonyms, self.use_gate, self.use_gat) {
            (true, true, true) => "SKER",
            (false, true, true) => "w/o synonym",
            (true, false, true) => "w/o gate",
            (true, false, false) => "w/o gate & GAT",
            _ => "custom",
        }
    }
}

/// Trainable tensors of the head. Per-head attention maps are stacked:
/// block `i` of `w_query` is rows `i·d_h .. (i+1)·d_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_t: Tensor,
    pub b_t: Tensor,
    pub w_s: Tensor,
    pub b_s: Tensor,
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub w_gate: Tensor,
    pub b_gate: Tensor,
    pub u_score: Tensor,
    pub b_score: Tensor,
}

impl ParamSet for HeadParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w_t".into(), &self.w_t),
            ("b_t".into(), &self.b_t),
            ("w_s".into(), &self.w_s),
            ("b_s".into(), &self.b_s),
            ("w_query".into(), &self.w_query),
            ("w_key".into(), &self.w_key),
            ("w_value".into(), &self.w_value),
            ("w_out".into(), &self.w_out),
            ("b_out".into(), &self.b_out),
            ("w_gate".into(), &self.w_gate),
            ("b_gate".into(), &self.b_gate),
            ("u_score".into(), &self.u_score),
            ("b_score".into(), &self.b_score),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("w_t".into(), &mut self.w_t),
            ("b_t".into(), &mut self.b_t),
            ("w_s".into(), &mut self.w_s),
            ("b_s".into(), &mut self.b_s),
            ("w_query".into(), &mut self.w_query),
            ("w_key".into(), &mut self.w_key),
            ("w_value".into(), &mut self.w_value),
            ("w_out".into(), &mut self.w_out),
            ("b_out".into(), &mut self.b_out),
            ("w_gate".into(), &mut self.w_gate),
            ("b_gate".into(), &mut self.b_gate),
            ("u_score".into(), &mut self.u_score),
            ("b_score".into(), &mut self.b_score),
        ]
    }
}

impl HeadParams {
    /// Xavier-uniform weights, zero biases.
    pub fn init(d: usize, heads: usize, seed: u64) -> Result<Self> {
        let dh = head_width(d, heads)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stacked = || {
            let mut t = Tensor::zeros(heads * dh, dh);
            for i in 0..heads {
                let block = Tensor::xavier(dh, dh, &mut rng);
                t.data[i * dh * dh..(i + 1) * dh * dh].copy_from_slice(&block.data);
            }
            t
        };
        let w_query = stacked();
        let w_key = stacked();
        let w_value = stacked();
        Ok(HeadParams {
            w_t: Tensor::xavier(d, d, &mut rng),
            b_t: Tensor::zeros(1, d),
            w_s: Tensor::xavier(d, d, &mut rng),
            b_s: Tensor::zeros(1, d),
            w_query,
            w_key,
            w_value,
            w_out: Tensor::xavier(d, d, &mut rng),
            b_out: Tensor::zeros(1, d),
            w_gate: Tensor::xavier(d, d, &mut rng),
            b_gate: Tensor::zeros(1, d),
            u_score: Tensor::xavier(1, d, &mut rng),
            b_score: Tensor::zeros(1, 1),
        })
    }

    pub fn d(&self) -> usize {
        self.w_t.rows
    }

    pub fn heads(&self) -> usize {
        self.w_query.rows / self.w_query.cols
    }

    pub fn head_dim(&self) -> usize {
        self.w_query.cols
    }
}

pub fn head_width(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide hidden size {d}")));
    }
    Ok(d / heads)
}

/// `q ⊙ z`
pub fn interact(q: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    if q.len() != z.len() {
        return Err(Error::Dimension(format!(
            "interaction of lengths {} and {}",
            q.len(),
            z.len()
        )));
    }
    Ok(linalg::hadamard(q, z))
}

#[derive(Debug, Clone, Serialize)]
pub struct TransformCache {
    pub pre_activation: Vec<f64>,
}

/// Residual MLP; returns the output and the hidden pre-activation.
pub fn transform(z_t: &[f64], p: &HeadParams) -> (Vec<f64>, TransformCache) {
    let pre = linalg::add(&linalg::matvec_t(&p.w_t, z_t), &p.b_t.data);
    let hidden: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
    let mut out = linalg::matvec_t(&p.w_s, &hidden);
    for i in 0..out.len() {
        out[i] += p.b_s.data[i] + z_t[i];
    }
    (out, TransformCache { pre_activation: pre })
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadTrace {
    pub query: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    /// Attention over `[candidate, synonym_1, …, synonym_l]`.
    pub weights: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregation {
    pub heads: Vec<HeadTrace>,
    pub concat: Vec<f64>,
    pub z_hat: Vec<f64>,
}

/// Multi-head attention of the transformed candidate over itself and its
/// transformed synonyms, followed by the output projection.
pub fn aggregate(z_tilde: &[f64], neighbors: &[Vec<f64>], p: &HeadParams) -> Result<Aggregation> {
    let d = p.d();
    let heads = p.heads();
    let dh = head_width(d, heads)?;
    if z_tilde.len() != d || neighbors.iter().any(|n| n.len() != d) {
        return Err(Error::Dimension(format!("aggregation expects vectors of length {d}")));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let nodes: Vec<&[f64]> = std::iter::once(z_tilde).chain(neighbors.iter().map(Vec::as_slice)).collect();
    let mut traces = Vec::with_capacity(heads);
    let mut concat = Vec::with_capacity(d);
    for i in 0..heads {
        let block = |v: &[f64]| v[i * dh..(i + 1) * dh].to_vec();
        let query = linalg::block_matvec(&p.w_query, i, &block(z_tilde));
        let keys: Vec<Vec<f64>> = nodes.iter().map(|n| linalg::block_matvec(&p.w_key, i, &block(n))).collect();
        let values: Vec<Vec<f64>> = nodes.iter().map(|n| linalg::block_matvec(&p.w_value, i, &block(n))).collect();
        let logits: Vec<f64> = keys.iter().map(|k| dot(&query, k) * scale).collect();
        let weights = linalg::softmax(&logits);
        let mut output = vec![0.0; dh];
        for (w, v) in weights.iter().zip(&values) {
            axpy(*w, v, &mut output);
        }
        concat.extend_from_slice(&output);
        traces.push(HeadTrace {
            query,
            keys,
            values,
            weights,
            output,
        });
    }
    let z_hat = linalg::add(&linalg::matvec(&p.w_out, &concat), &p.b_out.data);
    Ok(Aggregation {
        heads: traces,
        concat,
        z_hat,
    })
}

/// Element-wise sigmoid gate between `ẑ` and `z̃`. Returns `(ž, g)`.
pub fn gate_fuse(z_tilde: &[f64], z_hat: &[f64], p: &HeadParams) -> (Vec<f64>, Vec<f64>) {
    let pre = linalg::add(&linalg::matvec(&p.w_gate, z_tilde), &p.b_gate.data);
    let gate: Vec<f64> = pre.iter().map(|&a| linalg::sigmoid(a)).collect();
    let fused = gate
        .iter()
        .zip(z_hat)
        .zip(z_tilde)
        .map(|((g, h), t)| g * h + (1.0 - g) * t)
        .collect();
    (fused, gate)
}

/// Candidate logits and their softmax.
pub fn score(z_checks: &[Vec<f64>], p: &HeadParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if z_checks.len() < 2 {
        return Err(Error::Invalid("scoring needs at least two candidates".into()));
    }
    let logits: Vec<f64> = z_checks
        .iter()
        .map(|z| dot(&p.u_score.data, z) + p.b_score.data[0])
        .collect();
    let probs = linalg::softmax(&logits);
    Ok((logits, probs))
}

/// Cross-entropy of the gold candidate.
pub fn loss(probabilities: &[f64], gold: usize) -> f64 {
    -probabilities[gold].ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    /// Dropout masks are drawn from a stream seeded with `seed`.
    Train { seed: u64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateTrace {
    pub idiom: String,
    pub neighbors: Vec<String>,
    /// Embedding-table rows of `[candidate, neighbors…]`.
    pub rows: Vec<usize>,
    /// Projected embeddings `z, n_1, …`.
    pub embedded: Vec<Vec<f64>>,
    /// `z_t, n_t1, …`
    pub interacted: Vec<Vec<f64>>,
    pub transform_caches: Vec<TransformCache>,
    /// `z̃, ñ_1, …` (the columns of N)
    pub transformed: Vec<Vec<f64>>,
    pub aggregation: Option<Aggregation>,
    pub dropout_mask: Option<Vec<f64>>,
    pub z_hat: Option<Vec<f64>>,
    pub gate: Option<Vec<f64>>,
    pub z_check: Vec<f64>,
}

impl CandidateTrace {
    pub fn z_tilde(&self) -> &[f64] {
        &self.transformed[0]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ForwardTrace {
    #[serde(skip)]
    generation: u64,
    #[serde(skip)]
    encoder_tape: Option<EncoderTape>,
    pub train: bool,
    pub q: Vec<f64>,
    pub candidates: Vec<CandidateTrace>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub gold: usize,
    pub loss: f64,
}

impl ForwardTrace {
    pub fn predicted(&self) -> usize {
        linalg::argmax(&self.probabilities)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub ablation: AblationConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        head_width(self.d, self.heads)?;
        self.ablation.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Gradients (and optimizer moments) for every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGrads {
    pub encoder: EncoderParams,
    pub idiom_vectors: Tensor,
    pub projection: Projection,
    pub head: HeadParams,
}

impl ParamSet for ModelGrads {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("encoder", self.encoder.tensors());
        out.push(("idiom_vectors".into(), &self.idiom_vectors));
        out.push(("projection.weight".into(), &self.projection.weight));
        out.push(("projection.bias".into(), &self.projection.bias));
        out.extend(prefixed("head", self.head.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed_mut("encoder", self.encoder.tensors_mut());
        out.push(("idiom_vectors".into(), &mut self.idiom_vectors));
        out.push(("projection.weight".into(), &mut self.projection.weight));
        out.push(("projection.bias".into(), &mut self.projection.bias));
        out.extend(prefixed_mut("head", self.head.tensors_mut()));
        out
    }
}

/// Encoder, idiom embeddings with projection, and the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkerModel {
    pub config: ModelConfig,
    encoder: ReferenceEncoder,
    idioms: EmbeddingTable,
    projection: Projection,
    head: HeadParams,
    #[serde(skip)]
    generation: u64,
}

impl SkerModel {
    /// `idioms` supplies the initial idiom vectors (pre-trained or random);
    /// an UNK row is appended when missing.
    pub fn new(config: ModelConfig, words: WordVocab, idioms: EmbeddingTable, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idioms = with_unk_row(idioms, &mut rng)?;
        let encoder = ReferenceEncoder::new(words, config.d, config.max_len, seed.wrapping_add(1))?;
        let projection = Projection::init(idioms.dim(), config.d, &mut rng);
        let head = HeadParams::init(config.d, config.heads, seed.wrapping_add(2))?;
        Ok(SkerModel {
            config,
            encoder,
            idioms,
            projection,
            head,
            generation: 0,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        encoder: ReferenceEncoder,
        idioms: EmbeddingTable,
        projection: Projection,
        head: HeadParams,
    ) -> Result<Self> {
        config.validate()?;
        let model = SkerModel {
            config,
            encoder,
            idioms,
            projection,
            head,
            generation: 0,
        };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let d = self.config.d;
        let enc_d = self.encoder.hidden_size();
        if enc_d != d {
            return Err(Error::Dimension(format!("encoder width {enc_d} but model d = {d}")));
        }
        if self.head.d() != d || self.head.heads() != self.config.heads {
            return Err(Error::Dimension(format!(
                "head parameters are d = {} with {} heads but model expects d = {d} with {} heads",
                self.head.d(),
                self.head.heads(),
                self.config.heads
            )));
        }
        if self.projection.output_dim() != d || self.projection.source_dim() != self.idioms.dim() {
            return Err(Error::Dimension(format!(
                "projection maps {} → {} but embeddings are {} wide and d = {d}",
                self.projection.source_dim(),
                self.projection.output_dim(),
                self.idioms.dim()
            )));
        }
        if !self.idioms.contains(UNK_IDIOM) {
            return Err(Error::Invalid("idiom table lacks an UNK row".into()));
        }
        Ok(())
    }

    pub fn encoder(&self) -> &ReferenceEncoder {
        &self.encoder
    }

    pub fn idioms(&self) -> &EmbeddingTable {
        &self.idioms
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn head(&self) -> &HeadParams {
        &self.head
    }

    /// Mutable access to the head invalidates outstanding traces.
    pub fn head_mut(&mut self) -> &mut HeadParams {
        self.generation += 1;
        &mut self.head
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoder: self.encoder.params().zeros_like(),
            idiom_vectors: Tensor::zeros(self.idioms.len(), self.idioms.dim()),
            projection: Projection {
                weight: Tensor::zeros(self.projection.weight.rows, self.projection.weight.cols),
                bias: Tensor::zeros(1, self.projection.bias.cols),
            },
            head: self.head.zeros_like(),
        }
    }

    /// Every trainable tensor in [`ModelGrads`] order. Invalidates outstanding
    /// traces.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.generation += 1;
        let mut out = prefixed_mut("encoder", self.encoder.params_mut().tensors_mut());
        out.push(("idiom_vectors".into(), self.idioms.vectors_mut()));
        out.push(("projection.weight".into(), &mut self.projection.weight));
        out.push(("projection.bias".into(), &mut self.projection.bias));
        out.extend(prefixed_mut("head", self.head.tensors_mut()));
        out
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("encoder", self.encoder.params().tensors());
        out.push(("idiom_vectors".into(), self.idioms.vectors()));
        out.push(("projection.weight".into(), &self.projection.weight));
        out.push(("projection.bias".into(), &self.projection.bias));
        out.extend(prefixed("head", self.head.tensors()));
        out
    }

    pub fn idiom_row(&self, idiom: &str) -> usize {
        self.idioms
            .index_of(idiom)
            .or_else(|| self.idioms.index_of(UNK_IDIOM))
            .expect("UNK row present")
    }

    fn embed_idiom(&self, row: usize) -> Vec<f64> {
        self.projection.apply(self.idioms.vectors().row(row))
    }

    pub fn forward(&self, instance: &ClozeInstance, graphs: &GraphSet, mode: Mode) -> Result<ForwardTrace> {
        instance.validate()?;
        let ablation = self.config.ablation;
        let mut dropout = match mode {
            Mode::Eval => None,
            Mode::Train { seed } => Some(Dropout::new(self.config.dropout, seed)),
        };
        let (encoded, tape) = self.encoder.encode(instance, dropout.as_mut())?;
        let q = encoded.q;

        let mut candidates = Vec::with_capacity(instance.candidates.len());
        for idiom in &instance.candidates {
            let neighbors: Vec<String> = if ablation.use_gat {
                graphs.neighbors(idiom).to_vec()
            } else {
                Vec::new()
            };
            let rows: Vec<usize> = std::iter::once(idiom.as_str())
                .chain(neighbors.iter().map(String::as_str))
                .map(|name| self.idiom_row(name))
                .collect();
            let embedded: Vec<Vec<f64>> = rows.iter().map(|&r| self.embed_idiom(r)).collect();
            let interacted = embedded
                .iter()
                .map(|e| interact(&q, e))
                .collect::<Result<Vec<_>>>()?;
            let (transformed, transform_caches): (Vec<_>, Vec<_>) =
                interacted.iter().map(|x| transform(x, &self.head)).unzip();

            let (aggregation, dropout_mask, z_hat, gate, z_check) = if ablation.use_gat {
                let agg = aggregate(&transformed[0], &transformed[1..], &self.head)?;
                let mask = dropout.as_mut().map(|dr| dr.mask(self.config.d));
                let z_hat = match &mask {
                    Some(m) => linalg::hadamard(&agg.z_hat, m),
                    None => agg.z_hat.clone(),
                };
                let (z_check, gate) = if ablation.use_gate {
                    let (fused, g) = gate_fuse(&transformed[0], &z_hat, &self.head);
                    (fused, Some(g))
                } else {
                    (z_hat.clone(), None)
                };
                (Some(agg), mask, Some(z_hat), gate, z_check)
            } else {
                (None, None, None, None, transformed[0].clone())
            };

            candidates.push(CandidateTrace {
                idiom: idiom.clone(),
                neighbors,
                rows,
                embedded,
                interacted,
                transform_caches,
                transformed,
                aggregation,
                dropout_mask,
                z_hat,
                gate,
                z_check,
            });
        }

        let z_checks: Vec<Vec<f64>> = candidates.iter().map(|c| c.z_check.clone()).collect();
        let (logits, probabilities) = score(&z_checks, &self.head)?;
        let loss = loss(&probabilities, instance.gold);
        Ok(ForwardTrace {
            generation: self.generation,
            encoder_tape: Some(tape),
            train: matches!(mode, Mode::Train { .. }),
            q,
            candidates,
            logits,
            probabilities,
            gold: instance.gold,
            loss,
        })
    }

    /// Adds `∂loss/∂θ` for the traced instance into `grads`, scaled by `weight`.
    pub fn backward(&self, trace: &ForwardTrace, weight: f64, grads: &mut ModelGrads) -> Result<()> {
        if trace.generation != self.generation {
            return Err(Error::Usage("trace predates a parameter update".into()));
        }
        let tape = trace
            .encoder_tape
            .as_ref()
            .ok_or_else(|| Error::Usage("trace carries no encoder record".into()))?;
        let p = &self.head;
        let g = &mut grads.head;
        let d = self.config.d;

        let mut d_logits = trace.probabilities.clone();
        d_logits[trace.gold] -= 1.0;
        d_logits.iter_mut().for_each(|x| *x *= weight);

        let mut d_q = vec![0.0; d];
        for (cand, &dl) in trace.candidates.iter().zip(&d_logits) {
            axpy(dl, &cand.z_check, &mut g.u_score.data);
            g.b_score.data[0] += dl;
            let d_check: Vec<f64> = p.u_score.data.iter().map(|u| u * dl).collect();

            let mut d_nodes: Vec<Vec<f64>> = vec![vec![0.0; d]; cand.transformed.len()];
            let z_tilde = cand.z_tilde();

            if let Some(agg) = &cand.aggregation {
                let z_hat = cand.z_hat.as_ref().expect("z_hat with aggregation");
                let d_hat = if let Some(gate) = &cand.gate {
                    let mut d_pre = vec![0.0; d];
                    let mut d_hat = vec![0.0; d];
                    for k in 0..d {
                        d_hat[k] = gate[k] * d_check[k];
                        d_nodes[0][k] += (1.0 - gate[k]) * d_check[k];
                        let d_gate = (z_hat[k] - z_tilde[k]) * d_check[k];
                        d_pre[k] = d_gate * gate[k] * (1.0 - gate[k]);
                    }
                    g.w_gate.add_outer(&d_pre, z_tilde);
                    axpy(1.0, &d_pre, &mut g.b_gate.data);
                    axpy(1.0, &linalg::matvec_t(&p.w_gate, &d_pre), &mut d_nodes[0]);
                    d_hat
                } else {
                    d_check.clone()
                };
                let d_proj = match &cand.dropout_mask {
                    Some(mask) => linalg::hadamard(&d_hat, mask),
                    None => d_hat,
                };
                self.aggregate_backward(agg, &cand.transformed, &d_proj, &mut d_nodes, g);
            } else {
                axpy(1.0, &d_check, &mut d_nodes[0]);
            }

            for (node, d_node) in d_nodes.iter().enumerate() {
                let d_interacted = transform_backward(
                    &cand.interacted[node],
                    &cand.transform_caches[node],
                    d_node,
                    p,
                    g,
                );
                let embedded = &cand.embedded[node];
                let d_embedded: Vec<f64> = d_interacted.iter().zip(&trace.q).map(|(a, b)| a * b).collect();
                for k in 0..d {
                    d_q[k] += d_interacted[k] * embedded[k];
                }
                let row = cand.rows[node];
                let source = self.idioms.vectors().row(row);
                grads.projection.weight.add_outer(source, &d_embedded);
                axpy(1.0, &d_embedded, &mut grads.projection.bias.data);
                let d_source = linalg::matvec(&self.projection.weight, &d_embedded);
                axpy(1.0, &d_source, grads.idiom_vectors.row_mut(row));
            }
        }
        self.encoder.accumulate_gradients(tape, &d_q, &mut grads.encoder)
    }

    fn aggregate_backward(
        &self,
        agg: &Aggregation,
        nodes: &[Vec<f64>],
        d_out: &[f64],
        d_nodes: &mut [Vec<f64>],
        g: &mut HeadParams,
    ) {
        let p = &self.head;
        let dh = p.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        g.w_out.add_outer(d_out, &agg.concat);
        axpy(1.0, d_out, &mut g.b_out.data);
        let d_concat = linalg::matvec_t(&p.w_out, d_out);
        for (i, head) in agg.heads.iter().enumerate() {
            let span = i * dh..(i + 1) * dh;
            let d_head = &d_concat[span.clone()];
            let d_weights: Vec<f64> = head.values.iter().map(|v| dot(d_head, v)).collect();
            let d_logits = linalg::softmax_backward(&head.weights, &d_weights);
            let mut d_query = vec![0.0; dh];
            for (j, node) in nodes.iter().enumerate() {
                let block = &node[span.clone()];
                let d_value: Vec<f64> = d_head.iter().map(|x| x * head.weights[j]).collect();
                linalg::block_add_outer(&mut g.w_value, i, &d_value, block);
                let ds = d_logits[j] * scale;
                axpy(ds, &head.keys[j], &mut d_query);
                let d_key: Vec<f64> = head.query.iter().map(|x| x * ds).collect();
                linalg::block_add_outer(&mut g.w_key, i, &d_key, block);
                let back = linalg::add(
                    &linalg::block_matvec_t(&p.w_value, i, &d_value),
                    &linalg::block_matvec_t(&p.w_key, i, &d_key),
                );
                axpy(1.0, &back, &mut d_nodes[j][span.clone()]);
            }
            linalg::block_add_outer(&mut g.w_query, i, &d_query, &nodes[0][span.clone()]);
            let back = linalg::block_matvec_t(&p.w_query, i, &d_query);
            axpy(1.0, &back, &mut d_nodes[0][span]);
        }
    }

    /// Fresh gradients of one traced instance.
    pub fn gradients(&self, trace: &ForwardTrace) -> Result<ModelGrads> {
        let mut grads = self.zero_grads();
        self.backward(trace, 1.0, &mut grads)?;
        Ok(grads)
    }
}

/// Returns `∂/∂z_t` of the residual MLP, adding into the weight gradients.
fn transform_backward(input: &[f64], cache: &TransformCache, d_out: &[f64], p: &HeadParams, g: &mut HeadParams) -> Vec<f64> {
    let hidden: Vec<f64> = cache.pre_activation.iter().map(|&a| a.max(0.0)).collect();
    g.w_s.add_outer(&hidden, d_out);
    axpy(1.0, d_out, &mut g.b_s.data);
    let d_hidden = linalg::matvec(&p.w_s, d_out);
    let d_pre: Vec<f64> = d_hidden
        .iter()
        .zip(&cache.pre_activation)
        .map(|(dh, a)| if *a > 0.0 { *dh } else { 0.0 })
        .collect();
    g.w_t.add_outer(input, &d_pre);
    axpy(1.0, &d_pre, &mut g.b_t.data);
    let mut d_in = linalg::matvec(&p.w_t, &d_pre);
    axpy(1.0, d_out, &mut d_in);
    d_in
}

fn with_unk_row(table: EmbeddingTable, rng: &mut ChaCha8Rng) -> Result<EmbeddingTable> {
    if table.contains(UNK_IDIOM) {
        return Ok(table);
    }
    let dim = table.dim();
    let bound = linalg::xavier_bound(1, dim);
    let mut tokens = table.tokens().to_vec();
    tokens.push(UNK_IDIOM.to_string());
    let mut data = table.vectors().data.clone();
    data.extend((0..dim).map(|_| rand::Rng::gen_range(rng, -bound..=bound)));
    let rows = tokens.len();
    EmbeddingTable::new(tokens, Tensor::from_vec(rows, dim, data))
}

/// Per-head attention of one candidate over `[itself, neighbors…]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateAttention {
    pub idiom: String,
    pub nodes: Vec<String>,
    pub heads: Vec<Vec<f64>>,
    pub gate: Option<Vec<f64>>,
    pub probability: f64,
}

/// Attention weights per head for each candidate, in candidate order.
pub fn attention_table(trace: &ForwardTrace) -> Vec<CandidateAttention> {
    trace
        .candidates
        .iter()
        .zip(&trace.probabilities)
        .map(|(c, &probability)| CandidateAttention {
            idiom: c.idiom.clone(),
            nodes: std::iter::once(c.idiom.clone()).chain(c.neighbors.iter().cloned()).collect(),
            heads: c
                .aggregation
                .as_ref()
                .map(|a| a.heads.iter().map(|h| h.weights.clone()).collect())
                .unwrap_or_default(),
            gate: c.gate.clone(),
            probability,
        })
        .collect()
}
