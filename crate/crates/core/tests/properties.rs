//! Property tests for the runtime's structural invariants.

use proptest::prelude::*;

use twig_core::engine::{prefill, random_prompt};
use twig_core::model::{init_model, Latents, ModelConfig, SequenceLayout};
use twig_core::pruning::{
    avg_retained_finalwipe, layer_occupancy, prune_sequence, top_r_select, PruneConfig,
};
use twig_core::tensor::Mat;

fn round_half_up(n: usize, d: usize) -> usize {
    (2 * n + d) / (2 * d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every attention row is a probability distribution and never attends a
    /// future position, at every layer.
    #[test]
    fn attention_rows_stochastic_and_causal(
        seed in 0u64..1000,
        m in 1usize..6,
        n in 1usize..5,
    ) {
        let cfg = ModelConfig {
            num_layers: 3,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size: 13,
            max_positions: 32,
        };
        let model = init_model(&cfg, seed).unwrap();
        let layout = SequenceLayout::new(m, n).unwrap();
        let ids = random_prompt(&cfg, &layout, seed ^ 0xff);
        let out = prefill(&model, &ids, &[0, 1, 2]).unwrap();
        for map in out.attn.values() {
            for head in &map.probs {
                for i in 0..head.rows() {
                    let sum: f64 = head.row(i).iter().sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-9);
                    for j in 0..head.cols() {
                        if map.key_positions[j] > map.query_positions[i] {
                            prop_assert_eq!(head.at(i, j), 0.0);
                        }
                    }
                }
            }
        }
    }

    /// Selection matches exhaustive subset search (max score sum, ties to
    /// the lexicographically smallest index set), including tied scores.
    #[test]
    fn top_r_matches_exhaustive_search(
        raw in prop::collection::vec(0u32..8, 1..10),
        r_frac in 0.0f64..1.0,
    ) {
        // Coarse integer grid forces plenty of ties.
        let scores: Vec<f64> = raw.iter().map(|&v| v as f64 / 4.0).collect();
        let m = scores.len();
        let r = ((m + 1) as f64 * r_frac) as usize;
        let r = r.min(m);

        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 0u32..(1 << m) {
            if mask.count_ones() as usize != r {
                continue;
            }
            let subset: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
            let sum: f64 = subset.iter().map(|&i| scores[i]).sum();
            let better = match &best {
                None => true,
                Some((s, ix)) => sum > *s || (sum == *s && subset < *ix),
            };
            if better {
                best = Some((sum, subset));
            }
        }
        prop_assert_eq!(top_r_select(&scores, r).unwrap(), best.unwrap().1);
    }

    /// The rounded mean of the per-layer visual occupancy equals the
    /// closed-form layer average.
    #[test]
    fn occupancy_mean_matches_closed_form(
        m in 0usize..600,
        n in 1usize..40,
        l in 1usize..40,
        k_frac in 0.0f64..1.0,
        kf_frac in 0.0f64..1.0,
        r_frac in 0.0f64..1.0,
    ) {
        let k = (k_frac * l as f64) as usize; // 0..l
        let kf = k + 1 + (kf_frac * (l - k) as f64) as usize;
        let kf = kf.min(l);
        let r = (r_frac * (m + 1) as f64) as usize;
        let r = r.min(m);
        let cfg = PruneConfig {
            prune_layer: k,
            retained: r,
            final_wipe: Some(kf),
            selection_depth: k.max(1),
        };
        let occ = layer_occupancy(m, n, &cfg, l);
        let visual_sum: usize = occ.iter().map(|(v, _)| v).sum();
        prop_assert_eq!(
            round_half_up(visual_sum, l),
            avg_retained_finalwipe(m, k, r, kf, l).unwrap()
        );
    }

    /// Pruning keeps retained rows in order and leaves non-visual rows
    /// bitwise untouched.
    #[test]
    fn prune_preserves_non_visual_rows(
        m in 1usize..8,
        n in 1usize..5,
        extra in 0usize..3,
        r_frac in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let layout = SequenceLayout::new(m, n).unwrap();
        let total = m + n + extra;
        let mut rng = twig_core::rng::SplitMix64::new(seed);
        let mut values = Mat::zeros(total, 4);
        for v in values.data_mut() {
            *v = rng.next_symmetric(1.0);
        }
        let x = Latents::new(values.clone(), (0..total).collect()).unwrap();

        // Row-stochastic single-head map over the prompt.
        let mut head = Mat::zeros(m + n, m + n);
        for i in 0..m + n {
            for j in 0..=i {
                *head.at_mut(i, j) = rng.next_f64() + 1e-6;
            }
            let s: f64 = head.row(i).iter().sum();
            for j in 0..m + n {
                *head.at_mut(i, j) /= s;
            }
        }
        let map = twig_core::model::AttentionMap {
            probs: vec![head],
            query_positions: (0..m + n).collect(),
            key_positions: (0..m + n).collect(),
        };
        let r = ((r_frac * (m + 1) as f64) as usize).min(m);
        let (pruned, kept) = prune_sequence(&x, &map, &layout, r).unwrap();

        prop_assert_eq!(kept.len(), r);
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(pruned.positions.windows(2).all(|w| w[0] < w[1]));
        // Non-visual rows appear exactly once each, bitwise equal.
        let non_visual: Vec<usize> = (m..total).collect();
        let tail = &pruned.positions[r..];
        prop_assert_eq!(tail, &non_visual[..]);
        for (row, &pos) in pruned.positions.iter().enumerate() {
            prop_assert_eq!(pruned.values.row(row), values.row(pos));
        }
    }
}
