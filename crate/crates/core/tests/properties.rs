use hatrec::mask::{causal_mask, mask_for_scheme, LayerSchedule, Scheme};
use hatrec::model::{forward, grad_check, ModelConfig, ModelParams};
use hatrec::segmentation::{tokenize_prompt, ItemCatalog, PromptTemplate, TokenizedPrompt};
use proptest::prelude::*;

/// Catalog of `titles` over a 60-token vocabulary and a prompt for `history`.
fn build(titles: &[Vec<u32>], history: &[usize]) -> TokenizedPrompt {
    let catalog = ItemCatalog::new(titles.to_vec(), 60).unwrap();
    tokenize_prompt(history, &catalog, &PromptTemplate::standard()).unwrap()
}

fn titles_and_history() -> impl Strategy<Value = (Vec<Vec<u32>>, Vec<usize>)> {
    prop::collection::vec(prop::collection::vec(3u32..60, 1..=8), 1..=10).prop_flat_map(|titles| {
        let n = titles.len();
        (Just(titles), prop::collection::vec(0..n, 1..=7))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn non_item_positions_are_never_blocked((titles, history) in titles_and_history()) {
        let p = build(&titles, &history);
        let ann = p.annotations();
        for s in Scheme::ALL {
            let m = mask_for_scheme(s, &p);
            for j in 0..p.len() {
                for k in 0..p.len() {
                    if !ann[j].is_item_token || !ann[k].is_item_token {
                        prop_assert!(m.allowed(j, k), "{s} blocks ({j},{k})");
                    }
                }
            }
        }
    }

    #[test]
    fn masks_ignore_token_values((titles, history) in titles_and_history(), shift in 1u32..50) {
        let p = build(&titles, &history);
        let relabeled: Vec<Vec<u32>> = titles
            .iter()
            .map(|t| t.iter().map(|&x| 3 + (x - 3 + shift) % 57).collect())
            .collect();
        let q = build(&relabeled, &history);
        prop_assert_ne!(p.tokens(), q.tokens());
        for s in Scheme::ALL {
            prop_assert_eq!(mask_for_scheme(s, &p), mask_for_scheme(s, &q));
        }
    }

    #[test]
    fn composed_masks_keep_the_diagonal((titles, history) in titles_and_history()) {
        let p = build(&titles, &history);
        let causal = causal_mask(p.len()).unwrap();
        for s in Scheme::ALL {
            let m = mask_for_scheme(s, &p).compose(&causal).unwrap();
            for j in 0..p.len() {
                prop_assert!(m.allowed(j, j));
            }
        }
    }
}

fn config(schedule: LayerSchedule, n_items: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: schedule.len(),
        ffn_dim: 16,
        max_seq_len: 32,
        vocab_size: 60,
        n_items,
        schedule,
        seed: 13,
    }
}

#[test]
fn in_layer_weights_of_one_item_ignore_other_items_tokens() {
    // items 1 and 2 have equal title length but different tokens
    let titles = vec![vec![3, 4, 5], vec![6, 7], vec![8, 9], vec![10, 11, 12, 13]];
    let cfg = config(
        LayerSchedule::from_schemes(vec![Scheme::In, Scheme::Or]),
        titles.len(),
    );
    let params = ModelParams::init(&cfg).unwrap();
    for (a_slot, history_a, history_b) in [
        (0usize, vec![0, 1, 3], vec![0, 2, 3]),
        (2, vec![1, 3, 0], vec![2, 3, 0]),
    ] {
        let pa = build(&titles, &history_a);
        let pb = build(&titles, &history_b);
        let wa = forward(&pa, &params, &cfg, true).unwrap();
        let wb = forward(&pb, &params, &cfg, true).unwrap();
        let rows: Vec<usize> = (0..pa.len())
            .filter(|&j| pa.annotations()[j].item_index == Some(a_slot))
            .collect();
        assert!(!rows.is_empty());
        for h in 0..cfg.n_heads {
            let (x, y) = (wa.weights(0, h).unwrap(), wb.weights(0, h).unwrap());
            for &j in &rows {
                assert_eq!(x.row(j), y.row(j), "row {j} head {h}");
            }
        }
    }
}

#[test]
fn grad_check_every_scheme_at_every_position() {
    let titles = vec![vec![3, 4, 5], vec![6, 7], vec![8], vec![9, 10, 11]];
    let batch = vec![
        (build(&titles, &[0, 1, 2]), 3),
        (build(&titles, &[3, 2, 0, 1]), 1),
    ];
    for scheme in Scheme::ALL {
        for pos in 0..3 {
            let mut schemes = vec![Scheme::Or; 3];
            schemes[pos] = scheme;
            let cfg = config(LayerSchedule::from_schemes(schemes), titles.len());
            let params = ModelParams::init(&cfg).unwrap();
            let r = grad_check(&params, &cfg, &batch, 1e-5, 60, pos as u64).unwrap();
            assert!(
                r.max_relative_error < 1e-4,
                "{scheme} at layer {pos}: {:.3e}",
                r.max_relative_error
            );
        }
    }
}
