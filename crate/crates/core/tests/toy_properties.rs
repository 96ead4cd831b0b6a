//! Invariants of the model, hooks and experiments, checked on seeded toy models.

mod common;

use acronym_circuit::circuit::{ablate_except, compute_mean_cache, progressive_eval, CircuitSpec, HeadId};
use acronym_circuit::dataset::{CorruptedPairs, CorruptionKind};
use acronym_circuit::heads::{full_ov_circuit, qk_matrix};
use acronym_circuit::model::{BosRescale, Capture, HookPoint, Intervention, Model};
use acronym_circuit::patching::{evaluate_baseline, sweep_heads, sweep_mlps, sweep_residual, PositionFilter};
use acronym_circuit::positional::{bos_swap_sweep, combined_bos_swap, swap_pos_embeddings, WordPair};
use acronym_circuit::task::{LetterIndex, PROMPT_LEN};
use acronym_circuit::tensor::Tensor;
use acronym_circuit::toy::{make_toy_model, write_toy_assets, ToyConfig};
use common::{max_abs_diff, Toy};
use proptest::prelude::*;

fn token_strategy() -> impl Strategy<Value = (u64, Vec<u32>)> {
    (0u64..4, prop::collection::vec(0u32..100, 1..=32))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn self_patch_is_noop((seed, tokens) in token_strategy()) {
        let toy = Toy::shared(seed);
        prop_assert_eq!(common::self_patch_is_noop(&toy.model, &tokens, 1e-5), Ok(()));
    }

    #[test]
    fn attention_is_causal_and_stochastic((seed, tokens) in token_strategy()) {
        let toy = Toy::shared(seed);
        prop_assert_eq!(common::attention_is_causal_and_stochastic(&toy.model, &tokens, 1e-5), Ok(()));
    }

    #[test]
    fn residual_is_additive((seed, tokens) in token_strategy()) {
        let toy = Toy::shared(seed);
        prop_assert_eq!(common::residual_is_additive(&toy.model, &tokens, 1e-4), Ok(()));
    }

    #[test]
    fn later_tokens_do_not_affect_earlier_logits(
        (seed, tokens) in token_strategy(),
        replacement in 0u32..100,
        cut in 0usize..32,
    ) {
        let toy = Toy::shared(seed);
        let cut = cut % tokens.len();
        let mut changed = tokens.clone();
        changed[cut] = replacement;
        let a = toy.model.forward(&tokens, &[], &Capture::Nothing).unwrap().logits;
        let b = toy.model.forward(&changed, &[], &Capture::Nothing).unwrap().logits;
        let v = toy.model.config().vocab;
        prop_assert_eq!(&a.data()[..cut * v], &b.data()[..cut * v]);
    }

    #[test]
    fn patches_only_move_later_positions(
        (seed, tokens) in token_strategy(),
        layer in 0usize..2,
        head in 0usize..4,
        pos in 0usize..32,
    ) {
        let toy = Toy::shared(seed);
        let pos = pos % tokens.len();
        let d = toy.model.config().d_model;
        let iv = Intervention::PatchHeadOut {
            layer,
            head,
            positions: vec![pos],
            value: Tensor::new(vec![1, d], vec![3.0; d]).unwrap(),
        };
        let clean = toy.model.residual(&tokens, &[], &Capture::Nothing).unwrap();
        let patched = toy.model.residual(&tokens, &[iv], &Capture::Nothing).unwrap();
        prop_assert_eq!(&clean.resid_final.data()[..pos * d], &patched.resid_final.data()[..pos * d]);
        prop_assert!(max_abs_diff(clean.resid_final.row(pos), patched.resid_final.row(pos)) > 0.0);
    }

    #[test]
    fn bos_double_swap_is_identity(
        (seed, tokens) in (0u64..4, prop::collection::vec(0u32..100, 3..=32)),
        layer in 0usize..2,
        head in 0usize..4,
        a in 1usize..32,
        b in 1usize..32,
    ) {
        let toy = Toy::shared(seed);
        let n = tokens.len();
        let dst = (1 + a % (n - 1), 1 + b % (n - 1));
        prop_assert_eq!(common::bos_swap_is_involution(&toy.model, &tokens, HeadId::new(layer, head), dst, 1e-5), Ok(()));
    }

    #[test]
    fn resuming_from_a_layer_matches_the_full_run((seed, tokens) in token_strategy(), layer in 0usize..=2) {
        let toy = Toy::shared(seed);
        let full = toy.model.forward(&tokens, &[], &Capture::only([HookPoint::ResidPre(layer)])).unwrap();
        let resumed = toy
            .model
            .forward_from(layer, full.cache.resid_pre(layer).unwrap(), &[], &Capture::Nothing)
            .unwrap();
        prop_assert!(max_abs_diff(full.logits.data(), resumed.logits.data()) < 1e-5);
    }
}

#[test]
fn logits_are_tied_to_the_embedding() {
    let toy = Toy::shared(0);
    let s = &toy.samples(1, 3)[0];
    let out = toy.model.residual(&s.tokens, &[], &Capture::Nothing).unwrap();
    let full = toy.model.forward(&s.tokens, &[], &Capture::Nothing).unwrap();
    let w_e = &toy.model.weights().w_e;
    for pos in [0, 5, PROMPT_LEN - 1] {
        let normed = toy.model.final_norm(out.resid_final.row(pos));
        let row = toy.model.logits_row(&out.resid_final, pos).unwrap();
        for t in [0usize, 17, 99] {
            let expected: f32 = normed.iter().zip(w_e.row(t)).map(|(a, b)| a * b).sum();
            assert!((row[t] - expected).abs() < 1e-4);
            assert!((full.logits.row(pos)[t] - expected).abs() < 1e-4);
        }
        let picked = toy.model.logits_at(&out.resid_final, pos, &[17, 3]).unwrap();
        assert_eq!(picked, vec![row[17], row[3]]);
    }
}

#[test]
fn batches_equal_single_runs_and_are_deterministic() {
    let toy = Toy::shared(1);
    let samples = toy.samples(6, 11);
    let batch = toy.model.run_batch(&samples, &[], &Capture::Everything).unwrap();
    for (s, b) in samples.iter().zip(&batch) {
        let single = toy.model.forward(&s.tokens, &[], &Capture::Everything).unwrap();
        assert_eq!(single.logits, b.logits);
        assert_eq!(single.cache.attn_probs(1).unwrap(), b.cache.attn_probs(1).unwrap());
    }
    let again = toy.model.run_batch(&samples, &[], &Capture::Nothing).unwrap();
    assert!(batch.iter().zip(&again).all(|(a, b)| a.logits == b.logits));
    let ragged = [vec![1u32, 2, 3], vec![1, 2]];
    assert!(toy.model.run_batch(&ragged, &[], &Capture::Nothing).is_err());
}

#[test]
fn same_seed_gives_identical_models() {
    let a = make_toy_model(&ToyConfig::with_seed(7)).unwrap();
    let b = make_toy_model(&ToyConfig::with_seed(7)).unwrap();
    let tokens = [99, 5, 30, 60];
    let la = Model::new(a.weights).unwrap().forward(&tokens, &[], &Capture::Nothing).unwrap().logits;
    let lb = Model::new(b.weights).unwrap().forward(&tokens, &[], &Capture::Nothing).unwrap().logits;
    assert_eq!(la, lb);
}

#[test]
fn template_prompt_cache_is_complete() {
    let toy = Toy::shared(0);
    let s = &toy.samples(1, 0)[0];
    s.check_tokenization(&toy.tok).unwrap();
    let out = toy.model.forward(&s.tokens, &[], &Capture::Everything).unwrap();
    let cfg = toy.model.config();
    for l in 0..cfg.n_layers {
        assert_eq!(out.cache.attn_probs(l).unwrap().shape(), &[cfg.n_heads, PROMPT_LEN, PROMPT_LEN]);
        assert_eq!(out.cache.head_out(l).unwrap().shape(), &[cfg.n_heads, PROMPT_LEN, cfg.d_model]);
        assert_eq!(out.cache.mlp_out(l).unwrap().shape(), &[PROMPT_LEN, cfg.d_model]);
    }
    assert!(out.cache.contains(HookPoint::ResidPre(cfg.n_layers)));
    assert!(out.logits.is_finite());
}

#[test]
fn keeping_every_head_matches_the_clean_model() {
    let toy = Toy::shared(2);
    let samples = toy.samples(8, 4);
    let means = compute_mean_cache(&toy.model, &samples).unwrap();
    let all = CircuitSpec::all_heads(toy.model.config());
    let kept = ablate_except(&toy.model, &toy.vocab, &samples, &all, &means).unwrap();
    let baseline = evaluate_baseline(&toy.model, &toy.vocab, &samples).unwrap();
    for k in 0..3 {
        assert!((kept[k] - baseline.logit_diff[k]).abs() < 1e-5, "{kept:?} vs {:?}", baseline.logit_diff);
    }
}

#[test]
fn mean_over_one_sample_is_that_sample() {
    let toy = Toy::shared(0);
    let samples = toy.samples(1, 9);
    let means = compute_mean_cache(&toy.model, &samples).unwrap();
    assert_eq!(means.samples, 1);
    let none = ablate_except(&toy.model, &toy.vocab, &samples, &CircuitSpec::new(vec![]), &means).unwrap();
    let baseline = evaluate_baseline(&toy.model, &toy.vocab, &samples).unwrap();
    for (ablated, clean) in none.iter().zip(baseline.logit_diff) {
        assert!((ablated - clean).abs() < 1e-4);
    }
}

#[test]
fn progressive_steps_end_at_the_full_circuit() {
    let toy = Toy::shared(0);
    let samples = toy.samples(6, 1);
    let means = compute_mean_cache(&toy.model, &samples).unwrap();
    let circuit: CircuitSpec = "1.3,0.2,1.0".parse().unwrap();
    let result = progressive_eval(&toy.model, &toy.vocab, &samples, &circuit, &means).unwrap();
    assert_eq!(result.steps.len(), 4);
    assert_eq!(result.steps[0].added, None);
    assert_eq!(result.steps[3].added, Some(HeadId::new(1, 0)));
    let full = ablate_except(&toy.model, &toy.vocab, &samples, &circuit, &means).unwrap();
    assert_eq!(result.steps[3].logit_diff, full);
    let dir = tempfile::tempdir().unwrap();
    let files = result.write(dir.path()).unwrap();
    assert!(files.iter().all(|f| f.exists()));
}

#[test]
fn ov_circuit_is_linear_in_heads() {
    let toy = Toy::shared(3);
    let heads = [HeadId::new(0, 1), HeadId::new(1, 2), HeadId::new(1, 3)];
    assert_eq!(common::ov_grid_is_additive(&toy.model, &toy.vocab, &heads, 1e-4), Ok(()));

    let mut weights = toy.model.weights().clone();
    weights.layers[1].w_v = Tensor::zeros(weights.layers[1].w_v.shape());
    let grid = full_ov_circuit(&weights, &toy.vocab, &[HeadId::new(1, 2)], true, false).unwrap();
    assert!(grid.values.iter().all(|&v| v == 0.0));
    assert_eq!(grid.values.len(), 26 * 26);
}

#[test]
fn qk_matrix_is_square_in_the_model_width() {
    let toy = Toy::shared(0);
    let qk = qk_matrix(toy.model.weights(), HeadId::new(1, 3)).unwrap();
    assert_eq!(qk.shape(), &[32, 32]);
    assert!(qk_matrix(toy.model.weights(), HeadId::new(2, 0)).is_err());
}

#[test]
fn swapping_equal_positional_embeddings_changes_nothing() {
    let toy = Toy::shared(0);
    let mut weights = toy.model.weights().clone();
    let row = weights.w_pos.row(0).to_vec();
    for p in 0..weights.w_pos.rows() {
        weights.w_pos.row_mut(p).copy_from_slice(&row);
    }
    let model = Model::new(weights).unwrap();
    let s = &toy.samples(1, 2)[0];
    let clean = model.forward(&s.tokens, &[], &Capture::Nothing).unwrap();
    let swapped = model
        .forward(&s.tokens, &[Intervention::SwapPosEmbed { pos_a: 2, pos_b: 6 }], &Capture::Nothing)
        .unwrap();
    assert_eq!(clean.logits, swapped.logits);
}

fn identical_pairs(toy: &Toy, n: usize) -> CorruptedPairs {
    let clean = toy.samples(n, 21);
    CorruptedPairs {
        corrupted: clean.clone(),
        clean,
        skipped: 0,
    }
}

#[test]
fn patching_identical_runs_changes_nothing() {
    let toy = Toy::shared(0);
    let pairs = identical_pairs(toy, 3);
    let i = LetterIndex::SECOND;
    let kind = CorruptionKind::CurrentWord;
    let grids = [
        sweep_residual(&toy.model, &toy.vocab, &pairs, i, kind).unwrap(),
        sweep_heads(&toy.model, &toy.vocab, &pairs, i, kind, PositionFilter::All).unwrap(),
        sweep_mlps(&toy.model, &toy.vocab, &pairs, i, kind).unwrap(),
    ];
    for g in &grids {
        assert!(g.values.iter().all(|v| v.abs() < 1e-5), "{:?}", g.meta.kind);
        assert_eq!(g.meta.clean_logit_diff, g.meta.corrupted_logit_diff);
    }
    assert_eq!(grids[0].rows(), 2);
    assert_eq!(grids[0].cols(), PROMPT_LEN);
    assert_eq!(grids[1].cols(), 4);
}

#[test]
fn sweeps_are_deterministic() {
    let toy = Toy::shared(1);
    let clean = toy.samples(4, 5);
    let pairs = toy
        .builder()
        .corrupted_pairs(&clean, LetterIndex::THIRD, CorruptionKind::CurrentWord, 8)
        .unwrap();
    let run = || {
        sweep_heads(
            &toy.model,
            &toy.vocab,
            &pairs,
            LetterIndex::THIRD,
            CorruptionKind::CurrentWord,
            "Ci".parse().unwrap(),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.values.iter().all(|v| v.is_finite()));
    assert!(a.values.iter().any(|&v| v != 0.0));
    let dir = tempfile::tempdir().unwrap();
    let files = a.write(dir.path()).unwrap();
    let first: Vec<String> = files.iter().map(|f| std::fs::read_to_string(f).unwrap()).collect();
    b.write(dir.path()).unwrap();
    let second: Vec<String> = files.iter().map(|f| std::fs::read_to_string(f).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn bos_sweep_with_one_position_is_flat() {
    let toy = Toy::shared(0);
    let samples = toy.samples(3, 2);
    let same = WordPair::allow_same(LetterIndex::SECOND, LetterIndex::SECOND);
    let grid = bos_swap_sweep(&toy.model, &toy.vocab, &samples, same, BosRescale::Proportional).unwrap();
    assert!(grid.overall.iter().all(|v| v.abs() < 1e-5));
    assert_eq!(grid.overall.len(), 8);

    let pair = WordPair::new(LetterIndex::FIRST, LetterIndex::THIRD).unwrap();
    let grid = bos_swap_sweep(&toy.model, &toy.vocab, &samples, pair, BosRescale::Proportional).unwrap();
    assert!(grid.overall.iter().all(|v| v.is_finite()));
    let combined = combined_bos_swap(&toy.model, &samples, &grid, 0.0, HeadId::new(1, 0), BosRescale::Proportional).unwrap();
    assert_eq!(combined.conditions.len(), 4);
    for c in &combined.conditions {
        for row in c.values {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    let none = combined_bos_swap(&toy.model, &samples, &grid, f64::INFINITY, HeadId::new(1, 0), BosRescale::Proportional).unwrap();
    assert!(none.bos_heads.is_empty());
    assert_eq!(none.condition("clean").unwrap().values, none.condition("bos_swap").unwrap().values);
}

#[test]
fn pos_embed_swap_reports_both_conditions() {
    let toy = Toy::shared(0);
    let samples = toy.samples(3, 2);
    let pair = WordPair::new(LetterIndex::FIRST, LetterIndex::THIRD).unwrap();
    let cmp = swap_pos_embeddings(&toy.model, &samples, pair, HeadId::new(1, 1)).unwrap();
    assert_eq!(cmp.conditions.len(), 2);
    assert_ne!(cmp.conditions[0].values, cmp.conditions[1].values);
    assert_eq!(cmp.to_csv().lines().count(), 1 + 2 * 9);
}

#[test]
fn toy_assets_reload_through_the_public_loaders() {
    let toy = make_toy_model(&ToyConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let assets = write_toy_assets(&toy, dir.path()).unwrap();
    let cfg: acronym_circuit::model::ModelConfig =
        serde_json::from_str(&std::fs::read_to_string(&assets.config).unwrap()).unwrap();
    let weights = acronym_circuit::model::load_weights(&assets.weights, &cfg, None).unwrap();
    assert_eq!(weights.w_e, toy.weights.w_e);
    assert_eq!(weights.layers[1].w_q, toy.weights.layers[1].w_q);
    let tok = acronym_circuit::tokenizer::load_tokenizer(&assets.vocab, &assets.merges).unwrap();
    assert_eq!(tok.encode("The Can Bot (CB").unwrap(), toy.tokenizer.encode("The Can Bot (CB").unwrap());
    let words = acronym_circuit::dataset::read_word_list(&assets.words).unwrap();
    assert_eq!(words, toy.words);
}
