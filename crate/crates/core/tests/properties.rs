mod common;

use std::sync::OnceLock;

use geoprog::beam::{hbeam_decode, BeamConfig};
use geoprog::data::{checkpoint_bytes, checkpoint_from_bytes, synth_generate, SynthProfile};
use geoprog::encoder::PreprocessedProblem;
use geoprog::generator::greedy_decode;
use geoprog::numerics::{masked_softmax, MaskMode, Tape};
use geoprog::program::{attribute_program_error, ParseMode, ProgramText, SolutionProgram};
use geoprog::registry::{DslRegistry, TypeId};
use geoprog::trainer::{default_schedule, example_loss, tf_prob};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture() -> &'static (DslRegistry, Vec<PreprocessedProblem>) {
    static F: OnceLock<(DslRegistry, Vec<PreprocessedProblem>)> = OnceLock::new();
    F.get_or_init(|| common::synth_problems(40, 5, 0.5))
}

fn problem_and_type(i: usize) -> (&'static DslRegistry, &'static PreprocessedProblem, TypeId) {
    let (reg, probs) = fixture();
    let p = &probs[i % probs.len()];
    (reg, p, p.problem_type.unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flat_round_trip(i in 0usize..40, seed in any::<u64>()) {
        let (reg, p, t) = problem_and_type(i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prog = common::random_program(&mut rng, reg, p, t);
        let flat = prog.to_flat(reg, p);
        let back = SolutionProgram::from_flat(&flat, reg, p, t, ParseMode::Strict).unwrap();
        prop_assert_eq!(&back, &prog);
        let nested = ProgramText::Nested(prog.to_nested(reg, p));
        prop_assert_eq!(SolutionProgram::from_text(&nested, reg, p, t).unwrap(), prog);
    }

    #[test]
    fn attribution_is_none_only_for_equal(i in 0usize..40, a in any::<u64>(), b in any::<u64>()) {
        let (reg, p, t) = problem_and_type(i);
        let x = common::random_program(&mut ChaCha8Rng::seed_from_u64(a), reg, p, t);
        let y = common::random_program(&mut ChaCha8Rng::seed_from_u64(b), reg, p, t);
        prop_assert_eq!(attribute_program_error(&x, &y).is_none(), x.canonical_equal(&y));
        prop_assert!(attribute_program_error(&x, &x).is_none());
    }

    #[test]
    fn masked_softmax_respects_mask(
        logits in prop::collection::vec(-30.0f64..30.0, 1..40),
        bits in any::<u64>(),
    ) {
        let mut mask: Vec<bool> = (0..logits.len()).map(|i| bits >> (i % 64) & 1 == 1).collect();
        mask[0] = true;
        let q = masked_softmax(&logits, &mask, MaskMode::Normalized).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (p, m) in q.iter().zip(&mask) {
            if !m { prop_assert_eq!(*p, 0.0); }
        }
        let lit = masked_softmax(&logits, &mask, MaskMode::Literal).unwrap();
        prop_assert!(lit.iter().sum::<f64>() <= 1.0 + 1e-12);
        for (p, m) in lit.iter().zip(&mask) {
            if !m { prop_assert_eq!(*p, 0.0); }
        }
    }

    #[test]
    fn tf_prob_is_a_clamped_step_function(epoch in 0usize..1000) {
        let s = default_schedule();
        let p = tf_prob(epoch, &s);
        let expected = s.iter().find(|e| epoch < e.below).unwrap_or(s.last().unwrap()).prob;
        prop_assert_eq!(p, expected);
        prop_assert!((0.0..=1.0).contains(&p));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sampled_decodes_never_leave_the_grammar(i in 0usize..40, seed in any::<u64>()) {
        let (reg, p, t) = problem_and_type(i);
        let model = common::random_model(reg, &fixture().1, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for rec in common::sampled_steps(&model, p, t, 30, &mut rng) {
            if let Some(v) = common::mask_violation(reg, p, t, &rec, true) {
                prop_assert!(false, "{}", v);
            }
        }
    }

    #[test]
    fn loss_is_non_negative(i in 0usize..40, seed in any::<u64>(), tf in 0.0f64..=1.0) {
        let (reg, p, _) = problem_and_type(i);
        let model = common::random_model(reg, &fixture().1, 8, seed);
        let mut tape = Tape::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, parts) = example_loss(&mut tape, &model, p, tf, &mut rng).unwrap();
        prop_assert!(parts.total >= 0.0 && parts.type_loss >= 0.0 && parts.op_loss >= 0.0 && parts.oe_loss >= 0.0);
        prop_assert!((parts.total - parts.type_loss - parts.op_loss - parts.oe_loss).abs() < 1e-9);
    }

    #[test]
    fn beam_candidates_are_valid_and_sorted(i in 0usize..40, seed in any::<u64>(), bs in 1usize..5) {
        let (reg, p, _) = problem_and_type(i);
        let model = common::random_model(reg, &fixture().1, 8, seed);
        let ranked = hbeam_decode(&model, p, None, &BeamConfig::with_width(bs)).unwrap();
        prop_assert!(!ranked.is_empty() && ranked.len() <= bs);
        for w in ranked.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for r in &ranked {
            prop_assert!(r.program.validate(reg, p).is_ok());
        }
        if bs == 1 {
            let g = greedy_decode(&model, p, None).unwrap();
            prop_assert_eq!(&ranked[0].symbols, &g.symbols());
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), half in 1usize..8) {
        let (reg, probs) = fixture();
        let model = common::random_model(reg, probs, 2 * half, seed);
        let bytes = checkpoint_bytes(&model).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.params, &model.params);
        prop_assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn synth_is_pure(n in 1usize..30, seed in any::<u64>()) {
        let reg = DslRegistry::default_registry();
        let profile = SynthProfile::default();
        let a = synth_generate(n, seed, &reg, &profile).unwrap();
        let b = synth_generate(n, seed, &reg, &profile).unwrap();
        prop_assert_eq!(a, b);
    }
}
