//! Optimization loop, evaluation, ablation runs and checkpoints.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, SplitName, Tokenization};
use crate::embeddings::EmbeddingTable;
use crate::encoder::{WordVocab, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::params::ParamSet;
use crate::sker_model::{AblationConfig, ModelConfig, ModelGrads, Mode, SkerModel, UNK_IDIOM};
use crate::synonym_graph::{GraphSet, DEFAULT_NEIGHBOR_CAP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub heads: usize,
    pub d: usize,
    pub seed: u64,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub ablation: AblationConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Width of randomly initialized idiom embeddings.
    pub embedding_dim: usize,
    pub neighbor_cap: usize,
    pub max_len: usize,
    pub tokenization: Tokenization,
    /// Global gradient-norm clip; off when `None`.
    pub clip: Option<f64>,
    /// Stop as soon as dev accuracy reaches this value.
    pub target_dev_accuracy: Option<f64>,
    pub workers: usize,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            dropout: 0.2,
            heads: 2,
            d: 32,
            seed: 0,
            patience_epochs: 1,
            max_epochs: 50,
            ablation: AblationConfig::FULL,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            embedding_dim: 200,
            neighbor_cap: DEFAULT_NEIGHBOR_CAP,
            max_len: DEFAULT_MAX_LEN,
            tokenization: Tokenization::Whitespace,
            clip: None,
            target_dev_accuracy: None,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// The published setting for a BERT-sized encoder.
    pub fn published() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 128,
            dropout: 0.2,
            heads: 2,
            d: 768,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.workers == 0 {
            return Err(Error::Config("batch size, epoch limit and workers must be positive".into()));
        }
        if self.neighbor_cap == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("neighbor cap and embedding width must be positive".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            dropout: self.dropout,
            max_len: self.max_len,
            ablation: self.ablation,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => toml::from_str(&text).map_err(|e| e.to_string()),
        };
        let config: TrainConfig = parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelGrads,
    pub v: ModelGrads,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.adam_epsilon,
        }
    }
}

impl AdamHyper {
    /// One update of a flat parameter slice at step `t` (1-based).
    pub fn update(&self, t: u64, params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64]) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

impl AdamState {
    pub fn new(model: &SkerModel) -> Self {
        AdamState {
            step: 0,
            m: model.zero_grads(),
            v: model.zero_grads(),
        }
    }
}

/// Applies one Adam step to every model tensor. Non-finite gradients abort
/// before any parameter changes.
pub fn adam_step(model: &mut SkerModel, grads: &ModelGrads, state: &mut AdamState, hyper: AdamHyper) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name));
    }
    state.step += 1;
    let t = state.step;
    let g = grads.tensors();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    for ((((_, param), (_, grad)), (_, m)), (_, v)) in model.tensors_mut().into_iter().zip(g).zip(m).zip(v) {
        hyper.update(t, &mut param.data, &grad.data, &mut m.data, &mut v.data);
    }
    Ok(())
}

fn clip_global_norm(grads: &mut ModelGrads, max_norm: f64) {
    let norm: f64 = grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
}

/// One line of the line-JSON training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitName,
    pub accuracy: f64,
    pub correct: usize,
    pub count: usize,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    fn from_predictions(split: &CorpusSplit, predictions: Vec<usize>) -> Self {
        let correct = predictions
            .iter()
            .zip(&split.instances)
            .filter(|(p, inst)| **p == inst.gold)
            .count();
        let count = split.len();
        EvalReport {
            split: split.name.clone(),
            accuracy: if count == 0 { 0.0 } else { correct as f64 / count as f64 },
            correct,
            count,
            predictions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub graph_fingerprint: String,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
    pub model: SkerModel,
}

pub const CHECKPOINT_FORMAT: &str = "sker-checkpoint/1";

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", ckpt.format)));
        }
        if ckpt.config.model_config() != ckpt.model.config {
            return Err(Error::Checkpoint("stored config disagrees with model".into()));
        }
        ckpt.model.check_shapes().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(ckpt)
    }

    /// Loads and checks against the caller's expected shape and graphs.
    pub fn load_matching(path: impl AsRef<Path>, expected: &TrainConfig, graphs: &GraphSet) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.check_compatible(expected, graphs)?;
        Ok(ckpt)
    }

    pub fn check_compatible(&self, expected: &TrainConfig, graphs: &GraphSet) -> Result<()> {
        if self.config.d != expected.d {
            return Err(Error::Dimension(format!(
                "checkpoint has d = {} but configuration requests d = {}",
                self.config.d, expected.d
            )));
        }
        if self.config.heads != expected.heads {
            return Err(Error::Dimension(format!(
                "checkpoint has {} heads but configuration requests {}",
                self.config.heads, expected.heads
            )));
        }
        self.check_graphs(graphs)
    }

    pub fn check_graphs(&self, graphs: &GraphSet) -> Result<()> {
        let fp = graphs.fingerprint();
        if fp != self.graph_fingerprint {
            return Err(Error::Checkpoint(format!(
                "graph fingerprint mismatch: checkpoint {} vs supplied {}",
                self.graph_fingerprint, fp
            )));
        }
        Ok(())
    }
}

/// Stateless 64-bit mix used to derive per-instance seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const EVAL_STREAM: u64 = 0xE7A1;

/// Graphs the model actually sees: `base` unless synonyms are ablated, in which
/// case each center gets `cap` random idioms drawn from the model vocabulary.
pub fn effective_graphs<'a>(
    model: &SkerModel,
    base: &'a GraphSet,
    centers: &[String],
    cap: usize,
    seed: u64,
) -> Result<Cow<'a, GraphSet>> {
    if model.config.ablation.use_synonyms {
        return Ok(Cow::Borrowed(base));
    }
    let pool: Vec<String> = model
        .idioms()
        .tokens()
        .iter()
        .filter(|t| *t != UNK_IDIOM)
        .cloned()
        .collect();
    Ok(Cow::Owned(GraphSet::randomized(centers, &pool, cap, seed)?))
}

fn centers_of(split: &CorpusSplit) -> Vec<String> {
    split.vocabulary().into_iter().collect()
}

/// Argmax prediction per instance, dropout off.
pub fn evaluate(model: &SkerModel, split: &CorpusSplit, graphs: &GraphSet, cap: usize, seed: u64, exec: &Executor) -> Result<EvalReport> {
    let graphs = effective_graphs(model, graphs, &centers_of(split), cap, mix_seed(&[seed, EVAL_STREAM]))?;
    let predictions = exec
        .map(&split.instances, |_, inst| model.forward(inst, &graphs, Mode::Eval).map(|t| t.predicted()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_predictions(split, predictions))
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, split: &CorpusSplit, graphs: &GraphSet, exec: &Executor) -> Result<EvalReport> {
    ckpt.check_graphs(graphs)?;
    evaluate(&ckpt.model, split, graphs, ckpt.config.neighbor_cap, ckpt.config.seed, exec)
}

/// Builds a fresh model whose idiom table covers every idiom in `splits` and
/// `graphs`. Idioms found in `pretrained` take its vectors; without a
/// pre-trained table all rows are Xavier-initialized.
pub fn build_model(
    config: &TrainConfig,
    train: &CorpusSplit,
    others: &[&CorpusSplit],
    graphs: &GraphSet,
    pretrained: Option<&EmbeddingTable>,
) -> Result<SkerModel> {
    config.validate()?;
    let words = WordVocab::build(train.instances.iter().flat_map(|i| i.tokens.iter().map(String::as_str)));
    let mut idioms: BTreeSet<String> = train.vocabulary();
    for split in others {
        idioms.extend(split.vocabulary());
    }
    for g in graphs.iter() {
        idioms.insert(g.center.clone());
        idioms.extend(g.neighbors.iter().cloned());
    }
    let idioms: Vec<String> = idioms.into_iter().collect();
    let table = match pretrained {
        Some(pre) => pre.subset(idioms.iter().map(String::as_str))?,
        None => EmbeddingTable::init_random(&idioms, config.embedding_dim, mix_seed(&[config.seed, 0xE1]))?,
    };
    SkerModel::new(config.model_config(), words, table, config.seed)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
    pub epochs_run: usize,
    pub dev_history: Vec<f64>,
}

/// Trains from `model` with shuffled mini-batches, evaluating `dev` after
/// every epoch and keeping the best-dev parameters. Stops after
/// `patience_epochs` epochs without strict improvement.
pub fn train(
    config: &TrainConfig,
    mut model: SkerModel,
    train: &CorpusSplit,
    dev: &CorpusSplit,
    graphs: &GraphSet,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Invalid("train and dev splits must be non-empty".into()));
    }
    let exec = Executor::new(config.workers)?;
    let hyper = AdamHyper::from(config);
    let mut adam = AdamState::new(&model);
    let train_centers = centers_of(train);

    let mut log = Vec::new();
    let mut dev_history = Vec::new();
    let mut best: Option<(f64, usize, SkerModel)> = None;
    let mut stale_epochs = 0;
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        let epoch_graphs = effective_graphs(&model, graphs, &train_centers, config.neighbor_cap, mix_seed(&[config.seed, epoch as u64]))?
            .into_owned();
        let batches = crate::corpus::make_batches(train.len(), config.batch_size, mix_seed(&[config.seed, epoch as u64, 0xBA7C]), true);
        let n_batches = batches.len();
        for (b, batch) in batches.iter().enumerate() {
            let weight = 1.0 / batch.len() as f64;
            let parts = exec.fold_chunks(
                batch,
                || (model.zero_grads(), 0.0f64, None::<Error>),
                |(grads, loss, err), _, &idx| {
                    if err.is_some() {
                        return;
                    }
                    let seed = mix_seed(&[config.seed, epoch as u64, b as u64, idx as u64]);
                    let step = model
                        .forward(&train.instances[idx], &epoch_graphs, Mode::Train { seed })
                        .and_then(|trace| {
                            *loss += trace.loss * weight;
                            model.backward(&trace, weight, grads)
                        });
                    if let Err(e) = step {
                        *err = Some(e);
                    }
                },
            );
            let mut grads: Option<ModelGrads> = None;
            let mut batch_loss = 0.0;
            for (g, l, err) in parts {
                if let Some(e) = err {
                    return Err(e);
                }
                batch_loss += l;
                match grads.as_mut() {
                    Some(total) => total.add_assign(&g),
                    None => grads = Some(g),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
            if let Some(max_norm) = config.clip {
                clip_global_norm(&mut grads, max_norm);
            }
            adam_step(&mut model, &grads, &mut adam, hyper)?;
            if let Some(name) = model.tensors().into_iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n) {
                return Err(Error::NonFiniteGradient(format!("{name} (parameter after update)")));
            }

            let dev_accuracy = if b + 1 == n_batches {
                Some(evaluate(&model, dev, graphs, config.neighbor_cap, config.seed, &exec)?.accuracy)
            } else {
                None
            };
            let entry = LogEntry {
                epoch,
                batch: b + 1,
                loss: batch_loss,
                dev_accuracy,
            };
            if let Some(sink) = log_sink.as_deref_mut() {
                let line = serde_json::to_string(&entry)?;
                writeln!(sink, "{line}").map_err(|e| Error::io("<training log>", e))?;
            }
            log.push(entry);
        }

        let dev_acc = log.last().and_then(|e| e.dev_accuracy).expect("epoch ends with dev accuracy");
        dev_history.push(dev_acc);
        let improved = best.as_ref().is_none_or(|(acc, _, _)| dev_acc > *acc);
        if improved {
            best = Some((dev_acc, epoch, model.clone()));
            stale_epochs = 0;
            if config.target_dev_accuracy.is_some_and(|t| dev_acc >= t) {
                break;
            }
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.patience_epochs {
                break;
            }
        }
    }

    let (dev_accuracy, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: config.clone(),
            graph_fingerprint: graphs.fingerprint(),
            best_epoch,
            dev_accuracy,
            model: best_model,
        },
        log,
        epochs_run,
        dev_history,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: AblationConfig,
    pub reports: Vec<EvalReport>,
    pub average: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Percent accuracies, one row per model, in the usual ablation layout.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.rows.first() else {
            return out;
        };
        out.push_str(&format!("{:<16}", "Model"));
        for r in &first.reports {
            out.push_str(&format!("{:>8}", r.split.to_string()));
        }
        out.push_str(&format!("{:>8}{:>8}\n", "Ave", "delta"));
        for row in &self.rows {
            out.push_str(&format!("{:<16}", row.label));
            for r in &row.reports {
                out.push_str(&format!("{:>8.1}", 100.0 * r.accuracy));
            }
            let delta = if row.label == "SKER" {
                "-".to_string()
            } else {
                format!("{:.1}", 100.0 * row.delta)
            };
            out.push_str(&format!("{:>8.1}{:>8}\n", 100.0 * row.average, delta));
        }
        out
    }
}

/// Mean accuracy over the evaluation splits other than dev (all splits when
/// only dev is present).
pub fn average_accuracy(reports: &[EvalReport]) -> f64 {
    let non_dev: Vec<f64> = reports.iter().filter(|r| r.split != SplitName::Dev).map(|r| r.accuracy).collect();
    let pool: Vec<f64> = if non_dev.is_empty() {
        reports.iter().map(|r| r.accuracy).collect()
    } else {
        non_dev
    };
    if pool.is_empty() {
        0.0
    } else {
        pool.iter().sum::<f64>() / pool.len() as f64
    }
}

/// Trains the full model and its three ablations with identical data and
/// seed, then evaluates each on `eval_splits`.
pub fn run_ablation_suite(
    config: &TrainConfig,
    train_split: &CorpusSplit,
    dev: &CorpusSplit,
    eval_splits: &[&CorpusSplit],
    graphs: &GraphSet,
    pretrained: Option<&EmbeddingTable>,
) -> Result<AblationTable> {
    let exec = Executor::new(config.workers)?;
    let mut others: Vec<&CorpusSplit> = vec![dev];
    others.extend_from_slice(eval_splits);
    let mut rows = Vec::new();
    for ablation in [
        AblationConfig::FULL,
        AblationConfig::WITHOUT_SYNONYM,
        AblationConfig::WITHOUT_GATE,
        AblationConfig::WITHOUT_GATE_AND_GAT,
    ] {
        let cfg = TrainConfig {
            ablation,
            ..config.clone()
        };
        let model = build_model(&cfg, train_split, &others, graphs, pretrained)?;
        let outcome = train(&cfg, model, train_split, dev, graphs, None)?;
        let reports = eval_splits
            .iter()
            .map(|s| evaluate_checkpoint(&outcome.checkpoint, s, graphs, &exec))
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow {
            label: ablation.label().to_string(),
            ablation,
            average: average_accuracy(&reports),
            reports,
            delta: 0.0,
        });
    }
    let full = rows[0].average;
    for row in &mut rows {
        row.delta = row.average - full;
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let hyper = AdamHyper {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut p = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 1..=10 {
            hyper.update(t, &mut p, &[0.0, 0.0], &mut m, &mut v);
        }
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::published().validate().unwrap();
        let bad = TrainConfig {
            heads: 3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn partial_toml_config_fills_defaults() {
        let cfg: TrainConfig = toml::from_str("d = 16\nseed = 4\n[ablation]\nuse_synonyms = false\nuse_gate = true\nuse_gat = true\n").unwrap();
        assert_eq!(cfg.d, 16);
        assert_eq!(cfg.heads, 2);
        assert!(!cfg.ablation.use_synonyms);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }

    #[test]
    fn average_skips_dev_when_other_splits_exist() {
        let rep = |split: SplitName, accuracy| EvalReport {
            split,
            accuracy,
            correct: 0,
            count: 0,
            predictions: vec![],
        };
        let reports = vec![rep(SplitName::Dev, 1.0), rep(SplitName::Test, 0.5), rep(SplitName::Out, 0.25)];
        assert_eq!(average_accuracy(&reports), 0.375);
        assert_eq!(average_accuracy(&reports[..1]), 1.0);
    }

    #[test]
    fn seed_mixing_separates_streams() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[7, 8, 9]), mix_seed(&[7, 8, 9]));
    }
}
