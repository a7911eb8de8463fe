use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sker::linalg::Tensor;
use sker::sker_model::{aggregate, gate_fuse, interact, score, transform, AblationConfig, HeadParams, Mode};
use sker::synonym_graph::{GraphSet, GraphSource, SynonymGraph};
use sker::synthetic::{random_setup, SetupShape};

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

/// Dense block-diagonal matrix from the stacked per-head maps.
fn block_diagonal(stacked: &Tensor) -> Vec<Vec<f64>> {
    let dh = stacked.cols;
    let d = stacked.rows;
    let mut m = vec![vec![0.0; d]; d];
    for r in 0..d {
        let head = r / dh;
        for c in 0..dh {
            m[r][head * dh + c] = stacked.data[r * dh + c];
        }
    }
    m
}

fn dense(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Attention written against dense block-diagonal projections instead of
/// per-head slices.
fn aggregate_oracle(z: &[f64], neighbors: &[Vec<f64>], p: &HeadParams) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = p.d();
    let dh = p.head_dim();
    let (bq, bk, bv) = (block_diagonal(&p.w_query), block_diagonal(&p.w_key), block_diagonal(&p.w_value));
    let nodes: Vec<&[f64]> = std::iter::once(z).chain(neighbors.iter().map(|n| n.as_slice())).collect();
    let q = dense(&bq, z);
    let ks: Vec<Vec<f64>> = nodes.iter().map(|n| dense(&bk, n)).collect();
    let vs: Vec<Vec<f64>> = nodes.iter().map(|n| dense(&bv, n)).collect();
    let mut all_weights = Vec::new();
    let mut concat = vec![0.0; d];
    for h in 0..p.heads() {
        let r = h * dh..(h + 1) * dh;
        let logits: Vec<f64> = ks
            .iter()
            .map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / total).collect();
        for (j, wj) in w.iter().enumerate() {
            for c in r.clone() {
                concat[c] += wj * vs[j][c];
            }
        }
        all_weights.push(w);
    }
    let w_out: Vec<Vec<f64>> = (0..d).map(|r| p.w_out.row(r).to_vec()).collect();
    let z_hat = dense(&w_out, &concat).iter().zip(&p.b_out.data).map(|(a, b)| a + b).collect();
    (all_weights, z_hat)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_matches_block_diagonal_oracle(
        heads in prop::sample::select(vec![1usize, 2, 4]),
        width in 1usize..4,
        l in 0usize..5,
        seed in any::<u64>(),
        raw in vec_strategy(16 * 6),
    ) {
        let d = heads * width;
        let p = HeadParams::init(d, heads, seed).unwrap();
        let z = raw[..d].to_vec();
        let neighbors: Vec<Vec<f64>> = (0..l).map(|j| raw[(j + 1) * d..(j + 2) * d].to_vec()).collect();
        let agg = aggregate(&z, &neighbors, &p).unwrap();
        let (weights, z_hat) = aggregate_oracle(&z, &neighbors, &p);
        for (h, w) in agg.heads.iter().zip(&weights) {
            prop_assert_eq!(h.weights.len(), l + 1);
            for (a, b) in h.weights.iter().zip(w) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
        for (a, b) in agg.z_hat.iter().zip(&z_hat) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn transform_matches_explicit_loops(d in 1usize..9, seed in any::<u64>(), raw in vec_strategy(8)) {
        let p = HeadParams::init(d, 1, seed).unwrap();
        let z = &raw[..d];
        let (out, cache) = transform(z, &p);
        let hidden_len = p.w_t.cols;
        let mut hidden = vec![0.0; hidden_len];
        for j in 0..hidden_len {
            let mut a = p.b_t.data[j];
            for (i, zi) in z.iter().enumerate() {
                a += p.w_t.data[i * hidden_len + j] * zi;
            }
            prop_assert!((a - cache.pre_activation[j]).abs() < 1e-12);
            hidden[j] = a.max(0.0);
        }
        for k in 0..d {
            let mut a = p.b_s.data[k] + z[k];
            for (j, h) in hidden.iter().enumerate() {
                a += p.w_s.data[j * d + k] * h;
            }
            prop_assert!((a - out[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn interaction_is_commutative_and_has_identity(a in vec_strategy(6), b in vec_strategy(6)) {
        prop_assert_eq!(interact(&a, &b).unwrap(), interact(&b, &a).unwrap());
        prop_assert_eq!(interact(&[1.0; 6], &a).unwrap(), a.clone());
        prop_assert!(interact(&a, &b[..5]).is_err());
    }

    #[test]
    fn gate_is_a_convex_mix(d in 1usize..8, seed in any::<u64>(), raw in vec_strategy(16)) {
        let p = HeadParams::init(d, 1, seed).unwrap();
        let (zt, zh) = (&raw[..d], &raw[8..8 + d]);
        let (fused, g) = gate_fuse(zt, zh, &p);
        for k in 0..d {
            prop_assert!(g[k] > 0.0 && g[k] < 1.0);
            let (lo, hi) = (zt[k].min(zh[k]), zt[k].max(zh[k]));
            prop_assert!(fused[k] >= lo - 1e-12 && fused[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn scores_form_a_distribution(m in 2usize..8, seed in any::<u64>(), raw in vec_strategy(8 * 8)) {
        let p = HeadParams::init(8, 2, seed).unwrap();
        let zs: Vec<Vec<f64>> = (0..m).map(|i| raw[i * 8..(i + 1) * 8].to_vec()).collect();
        let (logits, probs) = score(&zs, &p).unwrap();
        prop_assert_eq!(logits.len(), m);
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(probs.iter().all(|&x| x > 0.0));
        prop_assert!(score(&zs[..1], &p).is_err());
    }

    #[test]
    fn forward_invariants(
        heads in prop::sample::select(vec![1usize, 2]),
        m in 2usize..6,
        l in 0usize..4,
        seed in any::<u64>(),
        train in any::<bool>(),
    ) {
        let shape = SetupShape { d: 4 * heads, heads, candidates: m, synonyms: l, dropout: 0.25, ..SetupShape::default() };
        let s = random_setup(shape, seed).unwrap();
        let mode = if train { Mode::Train { seed } } else { Mode::Eval };
        let t = s.model.forward(&s.instance, &s.graphs, mode).unwrap();
        prop_assert!((t.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((t.loss + t.probabilities[t.gold].ln()).abs() < 1e-12);
        prop_assert!(t.loss >= 0.0);
        for c in &t.candidates {
            prop_assert_eq!(c.neighbors.len(), l);
            prop_assert_eq!(c.dropout_mask.is_some(), train);
            for h in &c.aggregation.as_ref().unwrap().heads {
                prop_assert!((h.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        // evaluation is a pure function of parameters and inputs
        if !train {
            let again = s.model.forward(&s.instance, &s.graphs, mode).unwrap();
            prop_assert_eq!(again.probabilities, t.probabilities);
        }
    }

    #[test]
    fn candidate_permutation_is_equivariant(m in 2usize..7, seed in any::<u64>()) {
        let s = random_setup(SetupShape { candidates: m, ..SetupShape::default() }, seed).unwrap();
        let base = s.model.forward(&s.instance, &s.graphs, Mode::Eval).unwrap();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted = s.instance.permute_candidates(&perm);
        prop_assert_eq!(&permuted.candidates[permuted.gold], &s.instance.candidates[s.instance.gold]);
        let t = s.model.forward(&permuted, &s.graphs, Mode::Eval).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            prop_assert!((t.probabilities[i] - base.probabilities[j]).abs() < 1e-12);
            // per-candidate representations do not depend on the other candidates
            prop_assert_eq!(&t.candidates[i].z_check, &base.candidates[j].z_check);
        }
        prop_assert!((t.loss - base.loss).abs() < 1e-12);
    }

    #[test]
    fn synonym_order_does_not_change_z_hat(l in 2usize..6, seed in any::<u64>()) {
        let s = random_setup(SetupShape { synonyms: l, ..SetupShape::default() }, seed).unwrap();
        let base = s.model.forward(&s.instance, &s.graphs, Mode::Eval).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut shuffled = GraphSet::new();
        for g in s.graphs.iter() {
            let mut n = g.neighbors.clone();
            n.shuffle(&mut rng);
            shuffled.insert(SynonymGraph::new(g.center.clone(), n, GraphSource::Dictionary).unwrap()).unwrap();
        }
        let t = s.model.forward(&s.instance, &shuffled, Mode::Eval).unwrap();
        for (a, b) in t.candidates.iter().zip(&base.candidates) {
            for (x, y) in a.z_hat.as_ref().unwrap().iter().zip(b.z_hat.as_ref().unwrap()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ablations_are_exact_identities(seed in any::<u64>(), train in any::<bool>()) {
        let mode = if train { Mode::Train { seed } } else { Mode::Eval };
        let shape = SetupShape { dropout: 0.2, ..SetupShape::default() };
        let s = random_setup(SetupShape { ablation: AblationConfig::WITHOUT_GATE, ..shape }, seed).unwrap();
        for c in s.model.forward(&s.instance, &s.graphs, mode).unwrap().candidates {
            prop_assert_eq!(c.z_hat.as_ref(), Some(&c.z_check));
        }
        let s = random_setup(SetupShape { ablation: AblationConfig::WITHOUT_GATE_AND_GAT, ..shape }, seed).unwrap();
        for c in s.model.forward(&s.instance, &s.graphs, mode).unwrap().candidates {
            prop_assert_eq!(c.z_tilde(), c.z_check.as_slice());
        }
    }
}

#[test]
fn gat_free_model_ignores_synonyms() {
    let s = random_setup(
        SetupShape {
            ablation: AblationConfig::WITHOUT_GATE_AND_GAT,
            ..SetupShape::default()
        },
        3,
    )
    .unwrap();
    let with = s.model.forward(&s.instance, &s.graphs, Mode::Eval).unwrap();
    let without = s.model.forward(&s.instance, &GraphSet::new(), Mode::Eval).unwrap();
    assert_eq!(with.probabilities, without.probabilities);
}

#[test]
fn unknown_candidate_uses_the_unk_row() {
    let mut s = random_setup(SetupShape::default(), 4).unwrap();
    s.instance.candidates[0] = "never-seen".to_string();
    let t = s.model.forward(&s.instance, &s.graphs, Mode::Eval).unwrap();
    assert_eq!(t.candidates[0].rows[0], s.model.idiom_row(sker::sker_model::UNK_IDIOM));
    assert!(t.candidates[0].neighbors.is_empty());
}

#[test]
fn dropout_masks_follow_the_seed() {
    let s = random_setup(
        SetupShape {
            dropout: 0.5,
            ..SetupShape::default()
        },
        5,
    )
    .unwrap();
    let a = s.model.forward(&s.instance, &s.graphs, Mode::Train { seed: 1 }).unwrap();
    let b = s.model.forward(&s.instance, &s.graphs, Mode::Train { seed: 1 }).unwrap();
    let c = s.model.forward(&s.instance, &s.graphs, Mode::Train { seed: 2 }).unwrap();
    assert_eq!(a.probabilities, b.probabilities);
    assert_ne!(a.probabilities, c.probabilities);
    for x in a.candidates[0].dropout_mask.as_ref().unwrap() {
        assert!(*x == 0.0 || *x == 2.0);
    }
}
