//! Small generated corpora and random model setups for checks, benches and
//! desk-scale experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ClozeInstance, CorpusSplit, SplitName, BLANK_TOKEN};
use crate::embeddings::EmbeddingTable;
use crate::encoder::WordVocab;
use crate::error::Result;
use crate::sker_model::{AblationConfig, ModelConfig, SkerModel};
use crate::synonym_graph::{GraphSet, GraphSource, SynonymGraph};

pub fn idiom_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:03}")).collect()
}

/// A random model and one instance with `m` candidates, each holding exactly
/// `l` synonyms, over a passage of `len` tokens.
pub struct RandomSetup {
    pub model: SkerModel,
    pub instance: ClozeInstance,
    pub graphs: GraphSet,
}

#[derive(Debug, Clone, Copy)]
pub struct SetupShape {
    pub d: usize,
    pub heads: usize,
    pub candidates: usize,
    pub synonyms: usize,
    pub len: usize,
    pub source_dim: usize,
    pub dropout: f64,
    pub ablation: AblationConfig,
}

impl Default for SetupShape {
    fn default() -> Self {
        SetupShape {
            d: 8,
            heads: 2,
            candidates: 3,
            synonyms: 2,
            len: 6,
            source_dim: 6,
            dropout: 0.0,
            ablation: AblationConfig::FULL,
        }
    }
}

pub fn random_setup(shape: SetupShape, seed: u64) -> Result<RandomSetup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..8).map(|i| format!("w{i}")).collect();
    let vocab = WordVocab::build(words.iter().map(String::as_str));

    let pool = idiom_names("id", shape.candidates * (shape.synonyms + 1) + 4);
    let table = EmbeddingTable::init_random(&pool, shape.source_dim, rng.gen())?;
    let config = ModelConfig {
        d: shape.d,
        heads: shape.heads,
        dropout: shape.dropout,
        max_len: shape.len.max(1) + 2,
        ablation: shape.ablation,
    };
    let mut model = SkerModel::new(config, vocab, table, rng.gen())?;
    // nonzero biases so their gradients are exercised away from the init point
    for (_, t) in model.tensors_mut() {
        if t.rows == 1 {
            for x in &mut t.data {
                *x += rng.gen_range(-0.1..0.1);
            }
        }
    }

    let blank = rng.gen_range(0..shape.len.max(1));
    let tokens: Vec<String> = (0..shape.len.max(1))
        .map(|i| {
            if i == blank {
                BLANK_TOKEN.to_string()
            } else {
                words.choose(&mut rng).unwrap().clone()
            }
        })
        .collect();
    let candidates: Vec<String> = pool[..shape.candidates].to_vec();
    let gold = rng.gen_range(0..shape.candidates);
    let instance = ClozeInstance::new(tokens, blank, candidates.clone(), gold)?;

    let mut graphs = GraphSet::new();
    for c in &candidates {
        let others: Vec<&String> = pool.iter().filter(|p| *p != c).collect();
        let neighbors = others
            .choose_multiple(&mut rng, shape.synonyms)
            .map(|s| (*s).clone())
            .collect();
        graphs.insert(SynonymGraph::new(c.clone(), neighbors, GraphSource::Dictionary)?)?;
    }
    Ok(RandomSetup {
        model,
        instance,
        graphs,
    })
}

/// Memorization task: each passage carries a cue word naming its gold idiom.
/// Returns the split and the idiom vocabulary.
pub fn overfit_corpus(instances: usize, candidates: usize, vocabulary: usize, seed: u64) -> (CorpusSplit, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idioms = idiom_names("chengyu", vocabulary);
    let fillers: Vec<String> = (0..12).map(|i| format!("filler{i}")).collect();
    let mut out = Vec::with_capacity(instances);
    for k in 0..instances {
        let gold_idiom = k % vocabulary;
        let mut tokens: Vec<String> = (0..4).map(|_| fillers.choose(&mut rng).unwrap().clone()).collect();
        tokens.insert(rng.gen_range(0..=tokens.len()), format!("cue{gold_idiom}"));
        let blank = rng.gen_range(0..=tokens.len());
        tokens.insert(blank, BLANK_TOKEN.to_string());
        let mut cands = vec![idioms[gold_idiom].clone()];
        let distractors: Vec<&String> = idioms.iter().filter(|i| **i != idioms[gold_idiom]).collect();
        cands.extend(distractors.choose_multiple(&mut rng, candidates - 1).map(|s| (*s).clone()));
        cands.shuffle(&mut rng);
        let gold = cands.iter().position(|c| *c == idioms[gold_idiom]).unwrap();
        out.push(ClozeInstance::new(tokens, blank, cands, gold).expect("valid synthetic instance"));
    }
    (CorpusSplit::new(SplitName::Train, out), idioms)
}

/// Instances whose gold index cycles through every position, with random
/// passages. Useful for checking uniform predictors.
pub fn balanced_corpus(instances: usize, candidates: usize, seed: u64) -> CorpusSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idioms = idiom_names("b", candidates * 3);
    let out = (0..instances)
        .map(|k| {
            let cands: Vec<String> = idioms.choose_multiple(&mut rng, candidates).cloned().collect();
            let tokens = vec!["w0".to_string(), BLANK_TOKEN.to_string(), format!("w{}", k % 5)];
            ClozeInstance::new(tokens, 1, cands, k % candidates).expect("valid synthetic instance")
        })
        .collect();
    CorpusSplit::new(SplitName::Test, out)
}

/// A task solvable only through synonyms.
///
/// Passages carry one of `cues` cue words. Every candidate idiom has a single
/// synonym, an anchor idiom tied to one cue; the gold candidate is the one
/// whose anchor matches the passage cue. Dev and test use candidate idioms
/// never seen in training, so their own embeddings stay at initialization and
/// only the anchor route carries signal.
pub struct SynonymTask {
    pub train: CorpusSplit,
    pub dev: CorpusSplit,
    pub test: CorpusSplit,
    pub graphs: GraphSet,
    pub idioms: Vec<String>,
    pub candidates: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SynonymTaskShape {
    pub cues: usize,
    pub candidates: usize,
    pub train_idioms: usize,
    pub heldout_idioms: usize,
    pub train_instances: usize,
    pub dev_instances: usize,
    pub test_instances: usize,
}

impl Default for SynonymTaskShape {
    fn default() -> Self {
        SynonymTaskShape {
            cues: 6,
            candidates: 4,
            train_idioms: 96,
            heldout_idioms: 48,
            train_instances: 384,
            dev_instances: 96,
            test_instances: 240,
        }
    }
}

pub fn synonym_task(shape: SynonymTaskShape, seed: u64) -> Result<SynonymTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = idiom_names("anchor", shape.cues);
    let train_pool = idiom_names("seen", shape.train_idioms);
    let dev_pool = idiom_names("dev", shape.heldout_idioms);
    let test_pool = idiom_names("unseen", shape.heldout_idioms);
    let fillers: Vec<String> = (0..10).map(|i| format!("filler{i}")).collect();

    let mut graphs = GraphSet::new();
    let mut anchor_of = std::collections::HashMap::new();
    for pool in [&train_pool, &dev_pool, &test_pool] {
        for (i, idiom) in pool.iter().enumerate() {
            let cue = i % shape.cues;
            anchor_of.insert(idiom.clone(), cue);
            graphs.insert(SynonymGraph::new(idiom.clone(), vec![anchors[cue].clone()], GraphSource::Dictionary)?)?;
        }
    }

    let make = |name: SplitName, pool: &[String], count: usize, rng: &mut ChaCha8Rng| -> Result<CorpusSplit> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let cue = rng.gen_range(0..shape.cues);
            let golds: Vec<&String> = pool.iter().filter(|i| anchor_of[*i] == cue).collect();
            let others: Vec<&String> = pool.iter().filter(|i| anchor_of[*i] != cue).collect();
            // distractors carry pairwise distinct anchors
            let mut cands = vec![(*golds.choose(rng).unwrap()).clone()];
            let mut used = vec![cue];
            for o in others.choose_multiple(rng, others.len()) {
                if cands.len() == shape.candidates {
                    break;
                }
                if !used.contains(&anchor_of[*o]) {
                    used.push(anchor_of[*o]);
                    cands.push((*o).clone());
                }
            }
            let gold_name = cands[0].clone();
            cands.shuffle(rng);
            let gold = cands.iter().position(|c| *c == gold_name).unwrap();
            let mut tokens: Vec<String> = (0..3).map(|_| fillers.choose(rng).unwrap().clone()).collect();
            tokens.insert(rng.gen_range(0..=tokens.len()), format!("cue{cue}"));
            let blank = rng.gen_range(0..=tokens.len());
            tokens.insert(blank, BLANK_TOKEN.to_string());
            out.push(ClozeInstance::new(tokens, blank, cands, gold)?);
        }
        Ok(CorpusSplit::new(name, out))
    };

    let train = make(SplitName::Train, &train_pool, shape.train_instances, &mut rng)?;
    let dev = make(SplitName::Dev, &dev_pool, shape.dev_instances, &mut rng)?;
    let test = make(SplitName::Test, &test_pool, shape.test_instances, &mut rng)?;
    let idioms = anchors
        .into_iter()
        .chain(train_pool)
        .chain(dev_pool)
        .chain(test_pool)
        .collect();
    Ok(SynonymTask {
        train,
        dev,
        test,
        graphs,
        idioms,
        candidates: shape.candidates,
    })
}
