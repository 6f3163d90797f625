#![allow(dead_code)]

use geoprog::data::{record_to_problem, synth_generate, SynthProfile};
use geoprog::encoder::{preprocess, PreprocessedProblem, TextVocab};
use geoprog::generator::CacheStrategy;
use geoprog::model::{ModelConfig, ModelState};
use geoprog::program::{SolutionProgram, SubProgram};
use geoprog::registry::{DslRegistry, RegistryDoc, SymbolId, SymbolKind, TypeId};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn synth_problems(n: usize, seed: u64, cal_fraction: f64) -> (DslRegistry, Vec<PreprocessedProblem>) {
    let registry = DslRegistry::default_registry();
    let profile = SynthProfile {
        cal_fraction,
        ..SynthProfile::default()
    };
    let problems = synth_generate(n, seed, &registry, &profile)
        .unwrap()
        .iter()
        .map(|r| record_to_problem(r, &registry).unwrap())
        .collect();
    (registry, problems)
}

pub fn random_model(registry: &DslRegistry, problems: &[PreprocessedProblem], hidden: usize, seed: u64) -> ModelState {
    let config = ModelConfig {
        hidden,
        layers: 1,
        patch_dim: 16,
        cache_strategy: CacheStrategy::default(),
        ..ModelConfig::default()
    };
    ModelState::new(config, registry.clone(), TextVocab::build(problems), seed).unwrap()
}

/// Two operators plus `eop`; two numbers plus `#0` and `eos_operand` as
/// operands; at most two sub-programs of at most two operands.
pub fn tiny_setup() -> (DslRegistry, PreprocessedProblem) {
    let doc = RegistryDoc::from_json(
        r#"{
            "types": ["cal"],
            "operators": [
                {"surface": "add", "types": ["cal"], "min_args": 1, "max_args": 2},
                {"surface": "mul", "types": ["cal"], "min_args": 1, "max_args": 2}
            ],
            "constants": [],
            "limits": {"max_op": 2, "max_oe": 2}
        }"#,
    )
    .unwrap();
    let registry = DslRegistry::build(doc).unwrap();
    let mut problem = preprocess("add 3 to 4 or multiply them", &[]);
    problem.problem_type = Some(TypeId(0));
    (registry, problem)
}

/// Random program valid under `registry` for `problem` and type `t`.
pub fn random_program<R: Rng>(rng: &mut R, registry: &DslRegistry, problem: &PreprocessedProblem, t: TypeId) -> SolutionProgram {
    let mask = registry.type_mask(t, problem).unwrap();
    let limits = registry.limits();
    let allowed: Vec<SymbolId> = mask.allowed_ids().collect();
    let ops: Vec<SymbolId> = allowed
        .iter()
        .copied()
        .filter(|&id| registry.kind(id, problem) == Some(SymbolKind::Operator))
        .collect();
    let n_subs = rng.gen_range(1..=limits.max_op);
    let mut subs = Vec::with_capacity(n_subs);
    for i in 0..n_subs {
        let operands: Vec<SymbolId> = allowed
            .iter()
            .copied()
            .filter(|&id| {
                registry.kind(id, problem).is_some_and(|k| k.is_operand())
                    && registry.cache_index(id).is_none_or(|j| j < i)
            })
            .collect();
        let n_args = rng.gen_range(1..=limits.max_oe);
        let args = (0..n_args).map(|_| *operands.choose(rng).unwrap()).collect();
        subs.push(SubProgram {
            op: *ops.choose(rng).unwrap(),
            args,
        });
    }
    SolutionProgram { subs, problem_type: t }
}

pub struct StepRecord {
    pub mode: geoprog::generator::Mode,
    pub sub_index: usize,
    pub probs: Vec<f64>,
}

/// Runs `steps` decode steps, sampling every emitted symbol from the step
/// distribution and restarting whenever a program finishes.
pub fn sampled_steps<R: Rng>(
    model: &ModelState,
    problem: &PreprocessedProblem,
    t: TypeId,
    steps: usize,
    rng: &mut R,
) -> Vec<StepRecord> {
    use geoprog::generator::{advance, prepare, step, step_probabilities, DecoderState};
    use geoprog::numerics::Tape;

    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        let mut tape = Tape::inference(&model.params);
        let ctx = prepare(&mut tape, model, problem, Some(t)).unwrap();
        let mut state = DecoderState::initial(&mut tape, &ctx, model.hidden());
        while !state.finished && out.len() < steps {
            let o = step(&mut tape, &model.layout.generator, &ctx, &state).unwrap();
            let probs = step_probabilities(&tape, &ctx, &o);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    pick = Some(i);
                    acc += p;
                    if u < acc {
                        break;
                    }
                }
            }
            let sym = SymbolId(pick.expect("some symbol allowed"));
            out.push(StepRecord {
                mode: state.mode,
                sub_index: state.sub_index,
                probs,
            });
            state = advance(&mut tape, &model.layout.generator, &ctx, &state, &o, sym, sym).unwrap();
        }
    }
    out
}

/// First violation of the decoding grammar in one step distribution, judged
/// from the registry alone.
pub fn mask_violation(
    registry: &DslRegistry,
    problem: &PreprocessedProblem,
    t: TypeId,
    rec: &StepRecord,
    normalized: bool,
) -> Option<String> {
    use geoprog::generator::Mode;
    let type_mask = registry.type_mask(t, problem).unwrap();
    for (i, &p) in rec.probs.iter().enumerate() {
        let id = SymbolId(i);
        let kind = registry.kind(id, problem).unwrap();
        let surface = registry.surface(id, problem).unwrap();
        if !type_mask.allows(id) && p != 0.0 {
            return Some(format!("{surface} outside the type vocabulary has mass {p}"));
        }
        if rec.mode == Mode::Operator && kind.is_operand() && p != 0.0 {
            return Some(format!("operand {surface} in operator mode has mass {p}"));
        }
        if rec.mode == Mode::Operand && kind == SymbolKind::Operator && p != 0.0 {
            return Some(format!("operator {surface} in operand mode has mass {p}"));
        }
        if let Some(j) = registry.cache_index(id) {
            if j >= rec.sub_index && p != 0.0 {
                return Some(format!("forward cache token {surface} at sub-program {} has mass {p}", rec.sub_index));
            }
        }
        if !(0.0..=1.0).contains(&p) {
            return Some(format!("{surface} has probability {p}"));
        }
    }
    let sum: f64 = rec.probs.iter().sum();
    if normalized && (sum - 1.0).abs() > 1e-6 {
        return Some(format!("distribution sums to {sum}"));
    }
    None
}
