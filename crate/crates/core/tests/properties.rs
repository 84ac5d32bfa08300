mod support;

use std::sync::OnceLock;

use langadapt::corpus::{decode_shard, plan_mixture, read_shard, write_shard, LanguageSlice};
use langadapt::eval::{estimate_flops, perplexity, EvalCorpus};
use langadapt::finetune::{completion_batch, lora_attach, lora_merge, FinetuneMode, PromptCompletionExample};
use langadapt::linalg::matmul_nt;
use langadapt::model::{AttentionMode, Checkpoint, ModelConfig, ParamGroup, Projection};
use langadapt::objectives::{draw_mask_positions, mntp_batch, HybridSchedule, ObjectiveKind};
use langadapt::pipeline::{
    load_checkpoint, save_checkpoint, swap_tokenizer, trapezoidal_lr, AdamWConfig, OptimizerState, ScheduleSpec,
};
use langadapt::tokenizer::{is_whitespace, train_bpe, BpeModel, DEFAULT_SPECIALS};
use proptest::prelude::*;
use rand::Rng;
use support::*;

fn shared_corpus() -> &'static Vec<Vec<u8>> {
    static CORPUS: OnceLock<Vec<Vec<u8>>> = OnceLock::new();
    CORPUS.get_or_init(|| random_corpus(&mut rng(1), 8_000))
}

fn shared_tokenizer() -> &'static BpeModel {
    static TOK: OnceLock<BpeModel> = OnceLock::new();
    TOK.get_or_init(|| train_bpe(shared_corpus(), 400, &DEFAULT_SPECIALS).unwrap())
}

fn small_ckpt(vocab: usize, seed: u64) -> Checkpoint {
    Checkpoint::init(tiny_config(vocab, 16, 2, 4, 2, 4), seed, "fp").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenizer_round_trips_any_text(s in any::<String>()) {
        let tok = shared_tokenizer();
        prop_assert_eq!(tok.decode(&tok.encode(s.as_bytes())).unwrap(), s.as_bytes());
    }

    #[test]
    fn tokenizer_round_trips_any_bytes(b in proptest::collection::vec(any::<u8>(), 0..200)) {
        let tok = shared_tokenizer();
        prop_assert_eq!(tok.decode(&tok.encode(&b)).unwrap(), b);
    }

    #[test]
    fn training_is_deterministic_and_vocab_monotone(seed in 0u64..1000, v in 270usize..360, extra in 1usize..60) {
        let corpus = random_corpus(&mut rng(seed), 3_000);
        let small = train_bpe(&corpus, v, &DEFAULT_SPECIALS).unwrap();
        let again = train_bpe(&corpus, v, &DEFAULT_SPECIALS).unwrap();
        prop_assert_eq!(small.fingerprint(), again.fingerprint());
        let large = train_bpe(&corpus, v + extra, &DEFAULT_SPECIALS).unwrap();
        prop_assert_eq!(&large.merges()[..small.merges().len()], small.merges());
        for doc in &corpus {
            prop_assert!(large.encode(doc).len() <= small.encode(doc).len());
        }
    }

    #[test]
    fn merged_tokens_never_span_a_word_boundary(seed in 0u64..1000) {
        let corpus = random_corpus(&mut rng(seed), 4_000);
        let tok = train_bpe(&corpus, 360, &DEFAULT_SPECIALS).unwrap();
        for id in 256..(256 + tok.merges().len()) as u32 {
            let bytes = tok.token_bytes(id).unwrap();
            let word_start = bytes.iter().position(|&b| !is_whitespace(b)).unwrap_or(bytes.len());
            prop_assert!(bytes[word_start..].iter().all(|&b| !is_whitespace(b)), "token {:?}", bytes);
        }
    }

    #[test]
    fn mixture_respects_budget_cap_and_priority(
        raws in proptest::collection::vec(1u64..100_000, 1..6),
        budget in 1u64..5_000_000,
        cap in 1u32..20,
    ) {
        let slices: Vec<LanguageSlice> = raws
            .iter()
            .enumerate()
            .map(|(i, &r)| LanguageSlice::new(format!("l{i}"), r, i as u32))
            .collect();
        let plan = plan_mixture(&slices, budget, cap).unwrap();
        let mut remaining = budget;
        for s in &plan.slices {
            prop_assert_eq!(s.effective_tokens, remaining.min(s.raw_tokens * cap as u64));
            prop_assert!(s.upsample_factor <= cap as f64);
            remaining -= s.effective_tokens;
        }
        prop_assert_eq!(plan.unmet_tokens, remaining);
        let total: f64 = plan.slices.iter().map(|s| s.proportion).sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn shards_round_trip(ids in proptest::collection::vec(any::<u32>(), 0..500), cut in 1usize..64) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tok");
        write_shard(&path, &ids).unwrap();
        prop_assert_eq!(read_shard(&path).unwrap(), ids.clone());
        let bytes = std::fs::read(&path).unwrap();
        if !ids.is_empty() {
            prop_assert!(decode_shard(&bytes[..bytes.len() - cut.min(bytes.len())]).is_err());
        }
    }

    #[test]
    fn hybrid_schedule_spreads_mntp_evenly(n in 2u64..50, seed in any::<u64>(), offset in 0u64..1_000_000) {
        let schedule = HybridSchedule::new(1.0 - 1.0 / n as f64, seed).unwrap();
        let count = |lo: u64, hi: u64| (lo..hi).filter(|&s| schedule.objective_at(s) == ObjectiveKind::Mntp).count();
        for k in 0..5 {
            prop_assert_eq!(count(offset + k * n, offset + (k + 1) * n), 1);
        }
    }

    #[test]
    fn hybrid_schedule_count_is_within_one(cf in 0.0f64..=1.0, seed in any::<u64>(), len in 1u64..5000) {
        let schedule = HybridSchedule::new(cf, seed).unwrap();
        let count = (0..len).filter(|&s| schedule.objective_at(s) == ObjectiveKind::Mntp).count() as f64;
        let expected = len as f64 * (1.0 - schedule.causal_fraction());
        prop_assert!((count - expected).abs() <= 1.0, "{count} vs {expected}");
    }

    #[test]
    fn mntp_never_masks_the_first_position(
        seqs in proptest::collection::vec(proptest::collection::vec(0u32..50, 2..40), 1..5),
        rate in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let mask_id = 99;
        let batch = mntp_batch(&seqs, rate, mask_id, seed).unwrap();
        prop_assert!(batch.modes.iter().all(|&m| m == AttentionMode::Bidirectional));
        for (s, seq) in seqs.iter().enumerate() {
            prop_assert_eq!(batch.input_ids[s][0], seq[0]);
        }
        for t in &batch.targets {
            prop_assert_eq!(batch.input_ids[t.seq][t.pos + 1], mask_id);
            prop_assert_eq!(t.token, seqs[t.seq][t.pos + 1]);
        }
        for (s, seq) in seqs.iter().enumerate() {
            let masked = batch.targets.iter().filter(|t| t.seq == s).count();
            let replaced = batch.input_ids[s].iter().filter(|&&id| id == mask_id).count();
            prop_assert_eq!(masked, replaced);
            prop_assert!(masked >= 1 && masked < seq.len());
        }
    }

    #[test]
    fn mask_positions_are_sorted_and_in_range(len in 0usize..100, rate in 0.01f64..0.99, seed in any::<u64>()) {
        let picked = draw_mask_positions(len, rate, seed);
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(picked.iter().all(|&i| i >= 1 && i < len));
        prop_assert_eq!(picked.is_empty(), len < 2);
    }

    #[test]
    fn trapezoid_shape(peak in 1e-6f64..1.0, warmup in 0usize..200, decay in 0usize..200, plateau in 0usize..200) {
        let spec = ScheduleSpec { peak_lr: peak, warmup_steps: warmup, decay_steps: decay, total_steps: warmup + plateau + decay };
        let lrs: Vec<f64> = (0..=spec.total_steps).map(|s| trapezoidal_lr(s, &spec).unwrap()).collect();
        prop_assert_eq!(lrs[0], if warmup == 0 { peak } else { 0.0 });
        prop_assert_eq!(*lrs.last().unwrap(), if decay == 0 { peak } else { 0.0 });
        prop_assert!(lrs.iter().all(|&lr| (0.0..=peak).contains(&lr)));
        prop_assert!(lrs[..=warmup].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[warmup..=warmup + plateau].iter().all(|&lr| lr == peak));
        prop_assert!(lrs[warmup + plateau..].windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(trapezoidal_lr(spec.total_steps + 1, &spec).is_err());
    }

    #[test]
    fn flops_are_linear(p in 1.0f64..1e12, t in 1.0f64..1e13, k in 1.0f64..100.0) {
        let base = estimate_flops(p, t).unwrap().total_flops;
        prop_assert_eq!(base, 6.0 * p * t);
        let scaled = estimate_flops(p, t * k).unwrap().total_flops;
        prop_assert!((scaled / base - k).abs() <= 1e-12 * k);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_bitwise(seed in any::<u64>(), tied in any::<bool>(), step in 0u64..1000) {
        let mut cfg = tiny_config(30, 16, 2, 4, 2, 4);
        cfg.tie_embeddings = tied;
        let ckpt = Checkpoint::<f32>::init(cfg.clone(), seed, "abc").unwrap();
        let mut opt = OptimizerState::new(&cfg, AdamWConfig::default());
        opt.step = step;
        let mut r = rng(seed);
        for moments in [&mut opt.m, &mut opt.v] {
            for (_, t) in moments.tensors_mut() {
                t.iter_mut().for_each(|x| *x = r.random_range(-1.0..1.0));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ckpt, Some(&opt)).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        prop_assert_eq!(&loaded.ckpt.config, &cfg);
        prop_assert_eq!(&loaded.ckpt.tokenizer_fingerprint, "abc");
        prop_assert_eq!(param_bits(&loaded.ckpt.params), param_bits(&ckpt.params));
        let lo = loaded.optimizer.unwrap();
        prop_assert_eq!(lo.step, step);
        prop_assert_eq!(param_bits(&lo.m), param_bits(&opt.m));
        prop_assert_eq!(param_bits(&lo.v), param_bits(&opt.v));
    }

    #[test]
    fn lora_starts_as_identity_and_merges_like_the_unmerged_sum(seed in any::<u64>(), rank in 1usize..6, alpha in 1.0f64..32.0) {
        let base = small_ckpt(20, seed);
        let mut model = lora_attach(&base, rank, alpha, &Projection::ALL, seed).unwrap();
        prop_assert_eq!(param_bits(&model.effective().params), param_bits(&base.params));

        let mut r = rng(seed ^ 1);
        for a in model.adapters_mut().adapters.iter_mut() {
            for x in a.b.data.iter_mut() {
                *x = r.random_range(-0.1..0.1);
            }
        }
        let s = model.adapters().scaling() as f32;
        let adapters = model.adapters().clone();
        let merged = lora_merge(&mut model).unwrap();
        prop_assert!(lora_merge(&mut model).is_err());
        for ad in &adapters.adapters {
            let w = base.params.layers[ad.layer].weight(ad.target);
            let w_eff = merged.params.layers[ad.layer].weight(ad.target);
            let x: Vec<f32> = (0..w.cols).map(|_| r.random_range(-1.0..1.0)).collect();
            let wx = matmul_nt(&x, 1, w);
            let ax = matmul_nt(&x, 1, &ad.a);
            let bax = matmul_nt(&ax, 1, &ad.b);
            let merged_out = matmul_nt(&x, 1, w_eff);
            for o in 0..w.rows {
                let oracle = wx[o] + s * bax[o];
                prop_assert!((merged_out[o] - oracle).abs() <= 1e-4 * (1.0 + oracle.abs()), "{} vs {}", merged_out[o], oracle);
            }
        }
        let untouched = merged.params.group_bits_equal(&base.params, ParamGroup::Embedding);
        prop_assert!(untouched);
    }

    #[test]
    fn completion_batches_score_only_completions(
        prompt in proptest::collection::vec(0u32..20, 0..8),
        completion in proptest::collection::vec(0u32..20, 1..8),
        prefix in any::<bool>(),
    ) {
        prop_assume!(prompt.len() + completion.len() >= 2);
        let ex = PromptCompletionExample { prompt: prompt.clone(), completion: completion.clone() };
        let mode = if prefix { FinetuneMode::Prefix } else { FinetuneMode::Causal };
        let batch = completion_batch(&[&ex], mode).unwrap();
        let p = prompt.len();
        let expected: Vec<usize> = (p.max(1) - 1..p + completion.len() - 1).collect();
        let got: Vec<usize> = batch.targets.iter().map(|t| t.pos).collect();
        prop_assert_eq!(got, expected);
        for t in &batch.targets {
            prop_assert_eq!(t.token, ex.tokens()[t.pos + 1]);
            prop_assert!(t.pos + 1 >= p);
        }
        prop_assert_eq!(batch.modes[0], if prefix { AttentionMode::Prefix(p) } else { AttentionMode::Causal });
    }

    #[test]
    fn prefix_rows_see_the_whole_prompt(seed in any::<u64>(), p in 2usize..6) {
        // Under prefix attention the first prompt position sees the whole
        // prompt; under causal attention it sees only itself.
        let ckpt = small_ckpt(20, seed);
        let mut r = rng(seed);
        let ids = random_ids(&mut r, p + 3, 20);
        let mut edited = ids.clone();
        edited[p - 1] = (ids[p - 1] + 1) % 20;
        let causal_a = logits_of(&ckpt, &ids, AttentionMode::Causal);
        let causal_b = logits_of(&ckpt, &edited, AttentionMode::Causal);
        prop_assert_eq!(&causal_a[0], &causal_b[0]);
        let prefix_a = logits_of(&ckpt, &ids, AttentionMode::Prefix(p));
        let prefix_b = logits_of(&ckpt, &edited, AttentionMode::Prefix(p));
        prop_assert_ne!(&prefix_a[0], &prefix_b[0]);
    }

    #[test]
    fn uniform_model_has_perplexity_equal_to_vocab(vocab in 5usize..60, seed in any::<u64>()) {
        let mut ckpt = small_ckpt(vocab, seed);
        if let Some(h) = ckpt.params.head.as_mut() {
            h.data.fill(0.0);
        }
        let mut r = rng(seed);
        let mut languages = std::collections::BTreeMap::new();
        languages.insert("x".to_string(), (0..3).map(|_| random_ids(&mut r, 9, vocab)).collect::<Vec<_>>());
        let corpus = EvalCorpus { tokenizer_fingerprint: "fp".into(), languages };
        let report = perplexity(&ckpt, &corpus, AttentionMode::Causal).unwrap();
        let ppl = report.languages["x"].perplexity;
        prop_assert!((ppl - vocab as f64).abs() <= 1e-4 * vocab as f64, "{ppl} vs {vocab}");
    }

    #[test]
    fn swapping_to_the_same_tokenizer_changes_nothing(seed in any::<u64>()) {
        let tok = shared_tokenizer();
        let ckpt = Checkpoint::init(ModelConfig { vocab_size: tok.vocab_size(), ..tiny_config(0, 16, 1, 2, 1, 8) }, seed, tok.fingerprint()).unwrap();
        let swapped = swap_tokenizer(&ckpt, tok, tok, seed).unwrap();
        prop_assert_eq!(param_bits(&swapped.params), param_bits(&ckpt.params));
        prop_assert_eq!(&swapped.tokenizer_fingerprint, &ckpt.tokenizer_fingerprint);
    }

    #[test]
    fn swap_copies_rows_with_identical_bytes(seed in 0u64..200) {
        let old = shared_tokenizer();
        let new = train_bpe(&random_corpus(&mut rng(seed + 10), 4_000), 330, &DEFAULT_SPECIALS).unwrap();
        let cfg = ModelConfig { vocab_size: old.vocab_size(), ..tiny_config(0, 16, 1, 2, 1, 8) };
        let ckpt = Checkpoint::init(cfg, seed, old.fingerprint()).unwrap();
        let swapped = swap_tokenizer(&ckpt, old, &new, seed).unwrap();
        prop_assert_eq!(swapped.config.vocab_size, new.vocab_size());
        prop_assert_eq!(&swapped.tokenizer_fingerprint, &new.fingerprint());
        prop_assert!(swapped.params.group_bits_equal(&ckpt.params, ParamGroup::Body));
        for id in 0..new.vocab_size() as u32 {
            let old_id = match new.special_name(id) {
                Some(name) => old.special_id(name),
                None => old.id_of_bytes(new.token_bytes(id).unwrap()),
            };
            if let Some(o) = old_id {
                prop_assert_eq!(swapped.params.embed.row(id as usize), ckpt.params.embed.row(o as usize));
                prop_assert_eq!(swapped.params.head().row(id as usize), ckpt.params.head().row(o as usize));
            }
        }
    }
}
