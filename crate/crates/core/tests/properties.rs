use std::sync::OnceLock;

use pivot_refine::data::{build_decoder_corpus, read_jsonl, write_jsonl, DecoderExample};
use pivot_refine::models::{decode, decoder_all_logits, DecodeMode, DecoderParams, ModelConfig, ModelDims, PivotRep};
use pivot_refine::oracles::DiscreteInstance;
use pivot_refine::tensor::Tensor;
use pivot_refine::train::mse_loss;
use pivot_refine::world::{sample_log, InteractionRecord, Prompt, World, WorldConfig};
use proptest::prelude::*;

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| World::new(WorldConfig::default()).unwrap())
}

fn decoder() -> &'static DecoderParams {
    static D: OnceLock<DecoderParams> = OnceLock::new();
    D.get_or_init(|| DecoderParams::init(&ModelConfig::default(), ModelDims::from_world(world().config()), 21).unwrap())
}

fn log() -> &'static [InteractionRecord] {
    static L: OnceLock<Vec<InteractionRecord>> = OnceLock::new();
    L.get_or_init(|| sample_log(world(), 150, 4, 0.5, 13).unwrap())
}

fn prompt(max: usize) -> impl Strategy<Value = Prompt> {
    prop::collection::vec(0u32..12, 1..=max).prop_map(|t| Prompt::new(t, world().vocab(), world().max_len()).unwrap())
}

fn pivot() -> impl Strategy<Value = PivotRep> {
    prop::collection::vec(-2.0f64..2.0, 32).prop_map(|v| PivotRep::new(Tensor::from_vec(4, 8, v)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preference_stays_in_unit_interval(p in prompt(12), u in prompt(12), noise in any::<u64>()) {
        let w = world();
        for img in w.generate(&p, 3, noise).unwrap() {
            prop_assert_eq!(img.dim(), 16);
            prop_assert!(img.is_finite());
            let s = w.preference(&img, &u);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!((0.0..=1.0).contains(&w.relevance(&img, &u)));
        }
    }

    #[test]
    fn generation_is_a_function_of_the_seed(p in prompt(12), noise in any::<u64>()) {
        let w = world();
        prop_assert_eq!(w.generate(&p, 2, noise).unwrap(), w.generate(&p, 2, noise).unwrap());
        prop_assert_eq!(w.encode_image(&w.render(&p).unwrap()).unwrap().shape(), (4, 8));
    }

    #[test]
    fn bound_and_decomposition_hold(seed in any::<u64>(), index in 0u64..1000, lambda in 0.0f64..=1.0) {
        let inst = DiscreteInstance::random(seed, index);
        let t = inst.objective_value().unwrap();
        prop_assert!(t.objective >= t.lower_bound - 1e-12);
        prop_assert!((t.lower_bound - (t.preference_term * t.decoding_term + t.covariance)).abs() < 1e-12);
        let s = inst.scale_satisfaction(lambda).objective_value().unwrap();
        for (a, b) in [(s.objective, t.objective), (s.lower_bound, t.lower_bound), (s.preference_term, t.preference_term), (s.covariance, t.covariance)] {
            prop_assert!((a - lambda * b).abs() < 1e-12);
        }
        prop_assert!((s.decoding_term - t.decoding_term).abs() < 1e-15);
    }

    #[test]
    fn pivot_marginal_is_a_distribution(seed in any::<u64>(), index in 0u64..1000) {
        let inst = DiscreteInstance::random(seed, index);
        for u in 0..inst.n_users {
            let r = inst.pivot_marginal(u).unwrap();
            prop_assert!(r.iter().all(|&x| x >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(inst.pivot_marginal(inst.n_users).is_err());
    }

    #[test]
    fn mse_is_symmetric_and_nonnegative(a in pivot(), b in pivot()) {
        let ab = mse_loss(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, mse_loss(&b, &a).unwrap());
        prop_assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn admission_shrinks_with_thresholds(r0 in 0.0f64..0.5, q0 in 0.0f64..0.5, dr in 0.0f64..0.5, dq in 0.0f64..0.5) {
        let w = world();
        let loose = build_decoder_corpus(log(), r0, q0, w).unwrap();
        let tight = build_decoder_corpus(log(), r0 + dr, q0 + dq, w).unwrap();
        prop_assert!(tight.len() <= loose.len());
        prop_assert!(tight.iter().all(|e| loose.contains(e)));
        prop_assert!(tight.iter().all(|e| e.relevance >= r0 + dr && e.quality >= q0 + dq));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decoded_prompts_extend_the_prefix(prefix in prompt(6), v in pivot(), seed in any::<u64>(), greedy in any::<bool>()) {
        let mode = if greedy { DecodeMode::Greedy } else { DecodeMode::Sample { temperature: 1.0, seed } };
        let out = decode(decoder(), &v, &prefix, mode, 12).unwrap();
        prop_assert!(out.starts_with(&prefix));
        prop_assert!(out.len() <= 12);
        prop_assert!(out.validate(world().vocab(), 12).is_ok());
    }

    #[test]
    fn logits_are_causal(p in prompt(8), v in pivot(), replacement in 0u32..12) {
        let tokens = p.tokens();
        let rows = decoder_all_logits(decoder(), &v, tokens).unwrap();
        prop_assert_eq!(rows.len(), tokens.len() + 1);
        prop_assert!(rows.iter().all(|r| r.len() == 15));
        let mut changed = tokens.to_vec();
        *changed.last_mut().unwrap() = replacement;
        let other = decoder_all_logits(decoder(), &v, &changed).unwrap();
        let n = tokens.len();
        prop_assert_eq!(&rows[..n], &other[..n]);
    }

    #[test]
    fn corpus_round_trips(start in 0usize..100) {
        let w = world();
        let items: Vec<DecoderExample> = build_decoder_corpus(log(), 0.0, 0.0, w).unwrap().into_iter().skip(start).take(5).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_jsonl(&path, &items).unwrap();
        let back: Vec<DecoderExample> = read_jsonl(&path, |e: &DecoderExample| e.validate(w, 0.0, 0.0)).unwrap();
        prop_assert_eq!(back, items);
    }
}
