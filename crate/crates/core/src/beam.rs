//! Two-level beam search over operators and operand sequences, and an
//! exhaustive enumerator used as its reference.

use serde::{Deserialize, Serialize};

use crate::encoder::PreprocessedProblem;
use crate::generator::{
    advance, prepare, step, step_log_scores, DecodeContext, DecodeError, DecoderState, DetachedState,
    GeneratorParams, Mode,
};
use crate::model::ModelState;
use crate::numerics::Tape;
use crate::program::SolutionProgram;
use crate::registry::{SymbolId, SymbolKind, TypeId};

/// Largest search space the exhaustive enumerator accepts.
pub const MAX_ORACLE_SPACE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    /// Sum of per-step log-probabilities.
    #[default]
    SumLogProb,
    /// Sum of per-step raw probabilities.
    SumProb,
}

impl ScoreRule {
    pub fn extend(self, acc: f64, log_p: f64) -> f64 {
        match self {
            Self::SumLogProb => acc + log_p,
            Self::SumProb => acc + log_p.exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub bs: usize,
    /// Caps below the registry limits; `None` keeps the registry's.
    pub max_op: Option<usize>,
    pub max_oe: Option<usize>,
    pub score_rule: ScoreRule,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            bs: 10,
            max_op: None,
            max_oe: None,
            score_rule: ScoreRule::default(),
        }
    }
}

impl BeamConfig {
    pub fn with_width(bs: usize) -> Self {
        Self {
            bs,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BeamError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error("step limits must be positive")]
    ZeroLimit,
    #[error("search space bound {0:e} exceeds {MAX_ORACLE_SPACE:e}")]
    SpaceTooLarge(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub program: SolutionProgram,
    pub score: f64,
    /// Emitted symbols, terminators included.
    pub symbols: Vec<SymbolId>,
}

struct Hyp {
    state: DetachedState,
    score: f64,
    symbols: Vec<SymbolId>,
}

struct Live {
    state: DecoderState,
    score: f64,
    symbols: Vec<SymbolId>,
}

/// Allowed ids ordered by score, ties to the lower id, at most `k`.
fn top_k(scores: &[f64], mask: &[bool], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    ids.truncate(k);
    ids
}

fn by_score_desc<T>(items: &mut [T], score: impl Fn(&T) -> f64) {
    items.sort_by(|a, b| score(b).total_cmp(&score(a)));
}

fn context<'p>(
    tape: &mut Tape<'p>,
    model: &ModelState,
    problem: &PreprocessedProblem,
    override_type: Option<TypeId>,
    cfg: &BeamConfig,
) -> Result<DecodeContext, BeamError> {
    let mut ctx = prepare(tape, model, problem, override_type)?;
    if let Some(m) = cfg.max_op {
        ctx.limits.max_op = ctx.limits.max_op.min(m);
    }
    if let Some(m) = cfg.max_oe {
        ctx.limits.max_oe = ctx.limits.max_oe.min(m);
    }
    if ctx.limits.max_op == 0 || ctx.limits.max_oe == 0 {
        return Err(BeamError::ZeroLimit);
    }
    Ok(ctx)
}

/// Beam over operand sequences of one sub-program, starting right after its
/// operator. Sequences that close the sub-program leave the beam for a pool;
/// the best `bs` of the pool are returned.
fn operand_beam(
    tape: &mut Tape<'_>,
    params: &GeneratorParams,
    ctx: &DecodeContext,
    start: Live,
    cfg: &BeamConfig,
) -> Result<Vec<Hyp>, DecodeError> {
    let mut live = vec![start];
    let mut pool: Vec<Live> = Vec::new();
    while !live.is_empty() {
        let mut next = Vec::new();
        for hyp in &live {
            let out = step(tape, params, ctx, &hyp.state)?;
            let scores = step_log_scores(tape, ctx, &out);
            for oe in top_k(&scores, &out.mask, cfg.bs) {
                let sym = SymbolId(oe);
                let state = advance(tape, params, ctx, &hyp.state, &out, sym, sym)?;
                let mut symbols = hyp.symbols.clone();
                symbols.push(sym);
                let item = Live {
                    score: cfg.score_rule.extend(hyp.score, scores[oe]),
                    symbols,
                    state,
                };
                if item.state.mode == Mode::Operator {
                    pool.push(item);
                } else {
                    next.push(item);
                }
            }
        }
        by_score_desc(&mut next, |h| h.score);
        next.truncate(cfg.bs);
        live = next;
    }
    by_score_desc(&mut pool, |h| h.score);
    pool.truncate(cfg.bs);
    Ok(pool
        .into_iter()
        .map(|h| Hyp {
            state: h.state.detach(tape),
            score: h.score,
            symbols: h.symbols,
        })
        .collect())
}

/// Ranked programs, best first, at most `cfg.bs` of them.
///
/// Each outer step expands the top `bs` operators of every surviving
/// hypothesis; every non-terminal operator runs its own operand beam. The
/// resulting (operator, operand sequence) combinations compete for `bs`
/// slots. Hypotheses closed by `eop` go straight to the final pool, as do
/// those that reach the sub-program limit.
pub fn hbeam_decode(
    model: &ModelState,
    problem: &PreprocessedProblem,
    override_type: Option<TypeId>,
    cfg: &BeamConfig,
) -> Result<Vec<Ranked>, BeamError> {
    if cfg.bs == 0 {
        return Err(BeamError::ZeroBeam);
    }
    let mut tape = Tape::inference(&model.params);
    let ctx = context(&mut tape, model, problem, override_type, cfg)?;
    let params = &model.layout.generator;
    let base = tape.len();
    let init = DecoderState::initial(&mut tape, &ctx, model.hidden()).detach(&tape);
    let mut live = vec![Hyp {
        state: init,
        score: 0.0,
        symbols: Vec::new(),
    }];
    let mut pool: Vec<Hyp> = Vec::new();
    while !live.is_empty() {
        let mut candidates: Vec<Hyp> = Vec::new();
        for hyp in &live {
            tape.truncate(base);
            let state = hyp.state.attach(&mut tape);
            let out = step(&mut tape, params, &ctx, &state)?;
            let scores = step_log_scores(&tape, &ctx, &out);
            for op in top_k(&scores, &out.mask, cfg.bs) {
                let sym = SymbolId(op);
                let mark = tape.len();
                let next = advance(&mut tape, params, &ctx, &state, &out, sym, sym)?;
                let score = cfg.score_rule.extend(hyp.score, scores[op]);
                let mut symbols = hyp.symbols.clone();
                symbols.push(sym);
                if next.finished {
                    pool.push(Hyp {
                        state: next.detach(&tape),
                        score,
                        symbols,
                    });
                } else {
                    let start = Live {
                        state: next,
                        score,
                        symbols,
                    };
                    candidates.extend(operand_beam(&mut tape, params, &ctx, start, cfg)?);
                }
                tape.truncate(mark);
            }
        }
        by_score_desc(&mut candidates, |h| h.score);
        candidates.truncate(cfg.bs);
        live = Vec::with_capacity(candidates.len());
        for c in candidates {
            if c.state.finished {
                pool.push(c);
            } else {
                live.push(c);
            }
        }
    }
    by_score_desc(&mut pool, |h| h.score);
    pool.truncate(cfg.bs);
    Ok(pool
        .into_iter()
        .map(|h| Ranked {
            program: SolutionProgram {
                subs: h.state.subs,
                problem_type: ctx.problem_type,
            },
            score: h.score,
            symbols: h.symbols,
        })
        .collect())
}

/// Upper bound `|ops|^max_op · |operands|^(max_op · max_oe)` on the number of
/// complete programs, counting `eop` and `eos_operand` as choices.
pub fn search_space_bound(ctx: &DecodeContext, model: &ModelState, problem: &PreprocessedProblem) -> f64 {
    let mut ops = 1usize;
    let mut oes = 1usize;
    for i in 0..ctx.vocab_size() {
        let id = SymbolId(i);
        if !ctx.type_mask.allows(id) {
            continue;
        }
        match model.registry.kind(id, problem) {
            Some(SymbolKind::Operator) => ops += 1,
            Some(k) if k.is_operand() => {
                if model.registry.cache_index(id).is_none_or(|j| j + 1 < ctx.limits.max_op) {
                    oes += 1;
                }
            }
            _ => {}
        }
    }
    let l = ctx.limits;
    (ops as f64).powi(l.max_op as i32) * (oes as f64).powi((l.max_op * l.max_oe) as i32)
}

/// Every complete program reachable under the masks, scored exactly as the
/// beam scores them, best first (ties in enumeration order).
pub fn exhaustive_oracle(
    model: &ModelState,
    problem: &PreprocessedProblem,
    override_type: Option<TypeId>,
    cfg: &BeamConfig,
) -> Result<Vec<Ranked>, BeamError> {
    let mut tape = Tape::inference(&model.params);
    let ctx = context(&mut tape, model, problem, override_type, cfg)?;
    let bound = search_space_bound(&ctx, model, problem);
    if bound > MAX_ORACLE_SPACE {
        return Err(BeamError::SpaceTooLarge(bound));
    }
    let params = &model.layout.generator;
    let init = DecoderState::initial(&mut tape, &ctx, model.hidden());
    let mut out = Vec::new();
    let mut symbols = Vec::new();
    dfs(&mut tape, params, &ctx, &init, 0.0, &mut symbols, cfg, &mut out)?;
    by_score_desc(&mut out, |r| r.score);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    tape: &mut Tape<'_>,
    params: &GeneratorParams,
    ctx: &DecodeContext,
    state: &DecoderState,
    score: f64,
    symbols: &mut Vec<SymbolId>,
    cfg: &BeamConfig,
    out: &mut Vec<Ranked>,
) -> Result<(), DecodeError> {
    if state.finished {
        out.push(Ranked {
            program: state.program(ctx.problem_type),
            score,
            symbols: symbols.clone(),
        });
        return Ok(());
    }
    let step_out = step(tape, params, ctx, state)?;
    let scores = step_log_scores(tape, ctx, &step_out);
    for (i, &allowed) in step_out.mask.iter().enumerate() {
        if !allowed {
            continue;
        }
        let mark = tape.len();
        let sym = SymbolId(i);
        let next = advance(tape, params, ctx, state, &step_out, sym, sym)?;
        symbols.push(sym);
        dfs(tape, params, ctx, &next, cfg.score_rule.extend(score, scores[i]), symbols, cfg, out)?;
        symbols.pop();
        tape.truncate(mark);
    }
    Ok(())
}
