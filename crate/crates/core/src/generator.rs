//! Decoupled operator/operand decoder.
//!
//! Every decodable symbol owns a row of the value table `V`. A step builds a
//! query from attention over `H` and the previous symbol's value row, scores
//! every row of `V`, and masks the scores down to what the current mode, the
//! problem type and the cache state allow.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, type_logits};
use crate::encoder::{self, EncodeError, JointRepresentation, PreprocessedProblem};
use crate::model::ModelState;
use crate::numerics::{
    argmax, masked_softmax, GruCell, MaskMode, NumericsError, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::program::{SolutionProgram, SubProgram};
use crate::registry::{DslRegistry, Limits, RegistryError, SymbolId, SymbolKind, SymbolMask, TypeId};

/// What a finished sub-program writes into its cache token's value row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStrategy {
    /// Query of the sub-program's last operand-mode step.
    #[default]
    LastOperandQuery,
    /// Query of the sub-program's operator step.
    OperatorQuery,
    /// Static embedding of the emitted operator.
    OperatorEmbedding,
}

impl CacheStrategy {
    pub const ALL: [CacheStrategy; 3] = [
        CacheStrategy::LastOperandQuery,
        CacheStrategy::OperatorQuery,
        CacheStrategy::OperatorEmbedding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::LastOperandQuery => "last_operand_query",
            Self::OperatorQuery => "operator_query",
            Self::OperatorEmbedding => "operator_embedding",
        }
    }
}

impl fmt::Display for CacheStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CacheStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown cache strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Operator,
    Operand,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// `2h × h`, applied to `[P_aware ; v_prev]`.
    pub w2: ParamId,
    pub w3: ParamId,
    pub w4: ParamId,
    pub w5: ParamId,
    pub w_v: ParamId,
    /// One row per static symbol.
    pub embeddings: ParamId,
    /// Shared initial row for cache tokens not yet written.
    pub unfilled_cache: ParamId,
    pub cell_op: GruCell,
    pub cell_oe: GruCell,
    pub hidden: usize,
    pub num_static: usize,
}

impl GeneratorParams {
    pub fn register<R: Rng>(store: &mut ParamStore, num_static: usize, hidden: usize, rng: &mut R) -> Self {
        let s = (1.0 / hidden as f64).sqrt();
        let w2 = store.add(
            "generator.w2",
            Tensor::uniform(2 * hidden, hidden, (1.0 / (2 * hidden) as f64).sqrt(), rng),
        );
        let w3 = store.add("generator.w3", Tensor::uniform(hidden, hidden, s, rng));
        let w4 = store.add("generator.w4", Tensor::uniform(hidden, hidden, s, rng));
        let w5 = store.add("generator.w5", Tensor::uniform(hidden, hidden, s, rng));
        let w_v = store.add("generator.w_v", Tensor::uniform(hidden, hidden, s, rng));
        let embeddings = store.add(
            "generator.symbol_embedding",
            Tensor::uniform(num_static, hidden, 0.5, rng),
        );
        let unfilled_cache = store.add(
            "generator.unfilled_cache",
            Tensor::uniform(1, hidden, 0.5, rng),
        );
        let cell_op = GruCell::register(store, "generator.cell_op", hidden, hidden, rng);
        let cell_oe = GruCell::register(store, "generator.cell_oe", hidden, hidden, rng);
        Self {
            w2,
            w3,
            w4,
            w5,
            w_v,
            embeddings,
            unfilled_cache,
            cell_op,
            cell_oe,
            hidden,
            num_static,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecodeError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("no symbol allowed at {mode:?} step (sub-program {sub_index})")]
    AllMasked { mode: Mode, sub_index: usize },
    #[error("cache index {index} outside {max_op} sub-programs")]
    CacheIndex { index: usize, max_op: usize },
}

/// Value table: static rows from the symbol embeddings (cache tokens from the
/// shared unfilled row), dynamic rows from `dynamic_vectors`, all projected by
/// `W_v`. Row order is static ids then dynamic ids.
pub fn build_values(
    tape: &mut Tape<'_>,
    params: &GeneratorParams,
    registry: &DslRegistry,
    dynamic_vectors: &[Var],
) -> Var {
    let n = params.num_static;
    let emb = tape.param(params.embeddings);
    let unfilled = tape.param(params.unfilled_cache);
    let table = tape.vconcat(emb, unfilled);
    let rows: Vec<usize> = (0..n)
        .map(|i| match registry.cache_index(SymbolId(i)) {
            Some(_) => n,
            None => i,
        })
        .collect();
    let mut all = tape.gather_rows(table, &rows);
    if !dynamic_vectors.is_empty() {
        let dynamic = tape.stack_rows(dynamic_vectors);
        all = tape.vconcat(all, dynamic);
    }
    let w_v = tape.param(params.w_v);
    tape.matmul(all, w_v)
}

/// `H · W4`, shared by every attention step of one problem.
pub fn attention_keys(tape: &mut Tape<'_>, params: &GeneratorParams, rep: &JointRepresentation) -> Var {
    let w4 = tape.param(params.w4);
    tape.matmul(rep.h, w4)
}

/// Returns `(P_aware, weights)` with `score_i = (v_prev · W3) · (H_i · W4)`.
pub fn attention_pool(
    tape: &mut Tape<'_>,
    params: &GeneratorParams,
    prev_value: Var,
    rep: &JointRepresentation,
    keys: Var,
) -> (Var, Var) {
    let w3 = tape.param(params.w3);
    let a = tape.matmul(prev_value, w3);
    let scores = tape.matmul_t(a, keys);
    let weights = tape.softmax(scores);
    (tape.matmul(weights, rep.h), weights)
}

/// Unnormalised scores `(q · W5) · V_jᵀ` for every symbol.
pub fn symbol_logits(tape: &mut Tape<'_>, params: &GeneratorParams, q: Var, values: Var) -> Var {
    let w5 = tape.param(params.w5);
    let qw = tape.matmul(q, w5);
    tape.matmul_t(qw, values)
}

/// Masked distribution over the decode vocabulary.
pub fn symbol_distribution(logits: &[f64], mask: &[bool], mode: MaskMode) -> Result<Vec<f64>, DecodeError> {
    Ok(masked_softmax(logits, mask, mode)?)
}

/// Everything about one problem that stays fixed while decoding it.
#[derive(Debug, Clone)]
pub struct DecodeContext {
    pub problem_type: TypeId,
    pub type_logits: Var,
    pub rep: JointRepresentation,
    pub keys: Var,
    pub values: Var,
    pub type_mask: SymbolMask,
    pub limits: Limits,
    pub strategy: CacheStrategy,
    pub mask_mode: MaskMode,
    kinds: Vec<SymbolKind>,
    cache_ids: Vec<SymbolId>,
    cache_of: Vec<Option<usize>>,
    sos: SymbolId,
    eos: SymbolId,
    eop: SymbolId,
}

impl DecodeContext {
    pub fn vocab_size(&self) -> usize {
        self.kinds.len()
    }

    pub fn eos(&self) -> SymbolId {
        self.eos
    }

    pub fn eop(&self) -> SymbolId {
        self.eop
    }
}

/// Encodes `problem`, picks the problem type (the override when given,
/// otherwise the classifier's argmax) and builds the value table.
pub fn prepare(
    tape: &mut Tape<'_>,
    model: &ModelState,
    problem: &PreprocessedProblem,
    override_type: Option<TypeId>,
) -> Result<DecodeContext, DecodeError> {
    let layout = &model.layout;
    let registry = &model.registry;
    let rep = encoder::encode(tape, &layout.encoder, &model.vocab, problem)?;
    let logits = type_logits(tape, &layout.classifier, &rep);
    let problem_type = match override_type {
        Some(t) => t,
        None => {
            let probs = tape.softmax(logits);
            classifier::predict_type(tape.value(probs).data())
        }
    };
    let type_mask = registry.type_mask(problem_type, problem)?;
    let dynamic = encoder::element_value_vectors(tape, &rep, problem)?;
    let values = build_values(tape, &layout.generator, registry, &dynamic);
    let keys = attention_keys(tape, &layout.generator, &rep);
    let m = registry.vocab_size(problem);
    let kinds: Vec<SymbolKind> = (0..m)
        .map(|i| registry.kind(SymbolId(i), problem).expect("in range"))
        .collect();
    let limits = registry.limits();
    let cache_ids: Vec<SymbolId> = (0..limits.max_op)
        .map(|j| registry.cache_token(j).expect("one cache token per sub-program"))
        .collect();
    let cache_of = (0..m).map(|i| registry.cache_index(SymbolId(i))).collect();
    Ok(DecodeContext {
        problem_type,
        type_logits: logits,
        rep,
        keys,
        values,
        type_mask,
        limits,
        strategy: model.config.cache_strategy,
        mask_mode: model.config.mask_mode,
        kinds,
        cache_ids,
        cache_of,
        sos: registry.sos(),
        eos: registry.eos_operand(),
        eop: registry.eop(),
    })
}

/// Decoder position plus the partial program emitted so far.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h_op: Var,
    pub h_oe: Var,
    pub values: Var,
    /// Symbol whose value row feeds the next query.
    pub prev: SymbolId,
    pub mode: Mode,
    pub sub_index: usize,
    pub op: Option<SymbolId>,
    pub args: Vec<SymbolId>,
    pub subs: Vec<SubProgram>,
    pub finished: bool,
    op_query: Option<Var>,
    last_oe_query: Option<Var>,
}

impl DecoderState {
    pub fn initial(tape: &mut Tape<'_>, ctx: &DecodeContext, hidden: usize) -> Self {
        let h0 = tape.constant(Tensor::zeros(1, hidden));
        Self {
            h_op: h0,
            h_oe: h0,
            values: ctx.values,
            prev: ctx.sos,
            mode: Mode::Operator,
            sub_index: 0,
            op: None,
            args: Vec::new(),
            subs: Vec::new(),
            finished: false,
            op_query: None,
            last_oe_query: None,
        }
    }

    pub fn operand_index(&self) -> usize {
        self.args.len()
    }

    pub fn program(&self, problem_type: TypeId) -> SolutionProgram {
        SolutionProgram {
            subs: self.subs.clone(),
            problem_type,
        }
    }

    /// Copies the tensors out of the tape so the tape can be truncated.
    pub fn detach(&self, tape: &Tape<'_>) -> DetachedState {
        DetachedState {
            h_op: tape.value(self.h_op).clone(),
            h_oe: tape.value(self.h_oe).clone(),
            values: tape.value(self.values).clone(),
            op_query: self.op_query.map(|v| tape.value(v).clone()),
            last_oe_query: self.last_oe_query.map(|v| tape.value(v).clone()),
            prev: self.prev,
            mode: self.mode,
            sub_index: self.sub_index,
            op: self.op,
            args: self.args.clone(),
            subs: self.subs.clone(),
            finished: self.finished,
        }
    }
}

/// A [`DecoderState`] holding owned tensors instead of tape handles.
#[derive(Debug, Clone)]
pub struct DetachedState {
    h_op: Tensor,
    h_oe: Tensor,
    values: Tensor,
    op_query: Option<Tensor>,
    last_oe_query: Option<Tensor>,
    pub prev: SymbolId,
    pub mode: Mode,
    pub sub_index: usize,
    pub op: Option<SymbolId>,
    pub args: Vec<SymbolId>,
    pub subs: Vec<SubProgram>,
    pub finished: bool,
}

impl DetachedState {
    pub fn attach(&self, tape: &mut Tape<'_>) -> DecoderState {
        DecoderState {
            h_op: tape.constant(self.h_op.clone()),
            h_oe: tape.constant(self.h_oe.clone()),
            values: tape.constant(self.values.clone()),
            op_query: self.op_query.clone().map(|t| tape.constant(t)),
            last_oe_query: self.last_oe_query.clone().map(|t| tape.constant(t)),
            prev: self.prev,
            mode: self.mode,
            sub_index: self.sub_index,
            op: self.op,
            args: self.args.clone(),
            subs: self.subs.clone(),
            finished: self.finished,
        }
    }
}

/// Allowed symbols for the next step: the type mask intersected with the
/// mode rule. Operator mode admits operators, and `eop` once a sub-program
/// exists. Operand mode admits operands, cache tokens `#j` only for
/// `j < sub_index`, and `eos_operand` once an operand exists.
pub fn step_mask(ctx: &DecodeContext, state: &DecoderState) -> Vec<bool> {
    (0..ctx.kinds.len())
        .map(|i| {
            if !ctx.type_mask.allows(SymbolId(i)) {
                return false;
            }
            let kind = ctx.kinds[i];
            match state.mode {
                Mode::Operator => {
                    kind == SymbolKind::Operator || (i == ctx.eop.0 && state.sub_index >= 1)
                }
                Mode::Operand => {
                    if let Some(j) = ctx.cache_of[i] {
                        j < state.sub_index
                    } else if kind.is_operand() {
                        true
                    } else {
                        i == ctx.eos.0 && !state.args.is_empty()
                    }
                }
            }
        })
        .collect()
}

/// One decode step before a symbol is chosen.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub mode: Mode,
    /// Query vector, which is also the advanced hidden state of the mode's cell.
    pub q: Var,
    pub attention: Var,
    pub logits: Var,
    /// Log-probabilities renormalised over `mask`.
    pub log_probs: Var,
    pub mask: Vec<bool>,
}

/// `x = relu([P_aware ; v_prev] · W2)`, then one step of the mode's cell.
pub fn query_step(
    tape: &mut Tape<'_>,
    params: &GeneratorParams,
    ctx: &DecodeContext,
    state: &DecoderState,
) -> (Var, Var) {
    let prev_value = tape.row(state.values, state.prev.0);
    let (pooled, weights) = attention_pool(tape, params, prev_value, &ctx.rep, ctx.keys);
    let joined = tape.concat(pooled, prev_value);
    let w2 = tape.param(params.w2);
    let pre = tape.matmul(joined, w2);
    let x = tape.relu(pre);
    let (cell, h) = match state.mode {
        Mode::Operator => (&params.cell_op, state.h_op),
        Mode::Operand => (&params.cell_oe, state.h_oe),
    };
    let gx = cell.project(tape, x);
    (cell.step_projected(tape, gx, h), weights)
}

pub fn step(
    tape: &mut Tape<'_>,
    params: &GeneratorParams,
    ctx: &DecodeContext,
    state: &DecoderState,
) -> Result<StepOutput, DecodeError> {
    let mask = step_mask(ctx, state);
    if !mask.iter().any(|&m| m) {
        return Err(DecodeError::AllMasked {
            mode: state.mode,
            sub_index: state.sub_index,
        });
    }
    let (q, attention) = query_step(tape, params, ctx, state);
    let logits = symbol_logits(tape, params, q, state.values);
    let log_probs = tape.masked_log_softmax(logits, &mask);
    Ok(StepOutput {
        mode: state.mode,
        q,
        attention,
        logits,
        log_probs,
        mask,
    })
}

/// Post-mask probabilities under the context's mask mode.
pub fn step_probabilities(tape: &Tape<'_>, ctx: &DecodeContext, out: &StepOutput) -> Vec<f64> {
    match ctx.mask_mode {
        MaskMode::Normalized => tape
            .value(out.log_probs)
            .data()
            .iter()
            .map(|l| l.exp())
            .collect(),
        MaskMode::Literal => masked_softmax(tape.value(out.logits).data(), &out.mask, MaskMode::Literal)
            .expect("mask checked in step"),
    }
}

/// Log-scores used for ranking: normalized log-probabilities, or the log of
/// the literal masked probabilities.
pub fn step_log_scores(tape: &Tape<'_>, ctx: &DecodeContext, out: &StepOutput) -> Vec<f64> {
    match ctx.mask_mode {
        MaskMode::Normalized => tape.value(out.log_probs).data().to_vec(),
        MaskMode::Literal => step_probabilities(tape, ctx, out)
            .into_iter()
            .map(|p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect(),
    }
}

/// Applies `target` to the program structure while `fed` becomes the next
/// previous-symbol input (they differ only under teacher forcing). Completing
/// a sub-program rewrites its cache row.
pub fn advance(
    tape: &mut Tape<'_>,
    params: &GeneratorParams,
    ctx: &DecodeContext,
    state: &DecoderState,
    out: &StepOutput,
    target: SymbolId,
    fed: SymbolId,
) -> Result<DecoderState, DecodeError> {
    let mut s = state.clone();
    s.prev = fed;
    match state.mode {
        Mode::Operator => {
            s.h_op = out.q;
            if target == ctx.eop {
                s.finished = true;
            } else {
                s.op = Some(target);
                s.op_query = Some(out.q);
                s.mode = Mode::Operand;
                s.args.clear();
            }
        }
        Mode::Operand => {
            s.h_oe = out.q;
            s.last_oe_query = Some(out.q);
            if target == ctx.eos {
                complete_sub(tape, params, ctx, &mut s)?;
            } else {
                s.args.push(target);
                if s.args.len() == ctx.limits.max_oe {
                    complete_sub(tape, params, ctx, &mut s)?;
                }
            }
        }
    }
    Ok(s)
}

fn complete_sub(
    tape: &mut Tape<'_>,
    params: &GeneratorParams,
    ctx: &DecodeContext,
    s: &mut DecoderState,
) -> Result<(), DecodeError> {
    let op = s.op.take().expect("operand mode follows an operator");
    let source = match ctx.strategy {
        CacheStrategy::LastOperandQuery => s.last_oe_query.expect("set by the operand step"),
        CacheStrategy::OperatorQuery => s.op_query.expect("set by the operator step"),
        CacheStrategy::OperatorEmbedding => {
            let emb = tape.param(params.embeddings);
            tape.row(emb, op.0)
        }
    };
    s.values = update_cache(tape, params, ctx, s.values, s.sub_index, source)?;
    s.subs.push(SubProgram {
        op,
        args: std::mem::take(&mut s.args),
    });
    s.sub_index += 1;
    s.mode = Mode::Operator;
    s.op_query = None;
    s.last_oe_query = None;
    if s.sub_index == ctx.limits.max_op {
        s.finished = true;
    }
    Ok(())
}

/// Replaces the value row of cache token `#t` with `source · W_v`.
pub fn update_cache(
    tape: &mut Tape<'_>,
    params: &GeneratorParams,
    ctx: &DecodeContext,
    values: Var,
    t: usize,
    source: Var,
) -> Result<Var, DecodeError> {
    let id = *ctx.cache_ids.get(t).ok_or(DecodeError::CacheIndex {
        index: t,
        max_op: ctx.limits.max_op,
    })?;
    let w_v = tape.param(params.w_v);
    let row = tape.matmul(source, w_v);
    Ok(tape.replace_row(values, id.0, row))
}

/// Choice and full post-mask distribution of one greedy step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub mode: Mode,
    pub symbol: SymbolId,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyDecode {
    pub program: SolutionProgram,
    pub type_probs: Vec<f64>,
    pub trace: Vec<StepTrace>,
}

impl GreedyDecode {
    /// Emitted symbols in order, terminators included.
    pub fn symbols(&self) -> Vec<SymbolId> {
        self.trace.iter().map(|s| s.symbol).collect()
    }
}

/// Argmax at every step until `eop` or `max_op` sub-programs.
pub fn greedy_decode(
    model: &ModelState,
    problem: &PreprocessedProblem,
    override_type: Option<TypeId>,
) -> Result<GreedyDecode, DecodeError> {
    let mut tape = Tape::inference(&model.params);
    let ctx = prepare(&mut tape, model, problem, override_type)?;
    let type_probs = {
        let p = tape.softmax(ctx.type_logits);
        tape.value(p).data().to_vec()
    };
    let params = &model.layout.generator;
    let mut state = DecoderState::initial(&mut tape, &ctx, model.hidden());
    let mut trace = Vec::new();
    while !state.finished {
        let out = step(&mut tape, params, &ctx, &state)?;
        let probs = step_probabilities(&tape, &ctx, &out);
        let symbol = SymbolId(argmax(&step_log_scores(&tape, &ctx, &out)).expect("non-empty"));
        state = advance(&mut tape, params, &ctx, &state, &out, symbol, symbol)?;
        trace.push(StepTrace {
            mode: out.mode,
            symbol,
            probs,
        });
    }
    Ok(GreedyDecode {
        program: state.program(ctx.problem_type),
        type_probs,
        trace,
    })
}

/// Feeds `symbols` through the decoder and returns each step's log-score
/// (under the model's mask mode). Fails when a symbol is masked off.
pub fn forced_log_scores(
    model: &ModelState,
    problem: &PreprocessedProblem,
    override_type: Option<TypeId>,
    symbols: &[SymbolId],
) -> Result<Vec<f64>, DecodeError> {
    let mut tape = Tape::inference(&model.params);
    let ctx = prepare(&mut tape, model, problem, override_type)?;
    let params = &model.layout.generator;
    let mut state = DecoderState::initial(&mut tape, &ctx, model.hidden());
    let mut out_scores = Vec::with_capacity(symbols.len());
    for &sym in symbols {
        if state.finished {
            break;
        }
        let out = step(&mut tape, params, &ctx, &state)?;
        if !out.mask.get(sym.0).copied().unwrap_or(false) {
            return Err(DecodeError::AllMasked {
                mode: out.mode,
                sub_index: state.sub_index,
            });
        }
        out_scores.push(step_log_scores(&tape, &ctx, &out)[sym.0]);
        state = advance(&mut tape, params, &ctx, &state, &out, sym, sym)?;
    }
    Ok(out_scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{preprocess, TextVocab};
    use crate::model::ModelConfig;
    use crate::numerics::masked_log_softmax;
    use crate::registry::RegistryDoc;

    fn model(hidden: usize, seed: u64, problems: &[&PreprocessedProblem]) -> ModelState {
        let vocab = TextVocab::build(problems.iter().copied());
        ModelState::new(
            ModelConfig {
                hidden,
                layers: 1,
                patch_dim: 4,
                ..ModelConfig::default()
            },
            DslRegistry::default_registry(),
            vocab,
            seed,
        )
        .unwrap()
    }

    fn cal_problem() -> PreprocessedProblem {
        preprocess("find the area of circle O with radius 3 and chord 4", &[vec![0.1; 4]])
    }

    #[test]
    fn static_rows_do_not_depend_on_h() {
        let p = cal_problem();
        let m = model(8, 1, &[&p]);
        let g = &m.layout.generator;
        let mut tape = Tape::inference(&m.params);
        let a = tape.constant(Tensor::from_rows(&[vec![1.0; 8]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![-2.0; 8]]).unwrap());
        let va = build_values(&mut tape, g, &m.registry, &[a]);
        let vb = build_values(&mut tape, g, &m.registry, &[b]);
        let n = m.registry.num_static();
        let (ta, tb) = (tape.value(va).clone(), tape.value(vb).clone());
        assert_eq!(ta.rows(), n + 1);
        for r in 0..n {
            assert_eq!(ta.row(r), tb.row(r));
        }
        assert_ne!(ta.row(n), tb.row(n));
        let v0 = build_values(&mut tape, g, &m.registry, &[]);
        assert_eq!(tape.shape(v0).0, n);
    }

    #[test]
    fn identity_projection_exposes_embeddings() {
        let p = cal_problem();
        let mut m = model(4, 2, &[&p]);
        let g = m.layout.generator.clone();
        *m.params.get_mut(g.w_v) = Tensor::identity(4);
        let n = m.registry.num_static();
        let mut emb = Tensor::zeros(n, 4);
        for i in 0..n {
            emb.set(i, i % 4, 1.0 + i as f64);
        }
        *m.params.get_mut(g.embeddings) = emb.clone();
        let mut tape = Tape::inference(&m.params);
        let v = build_values(&mut tape, &g, &m.registry, &[]);
        let unfilled = m.params.get(g.unfilled_cache).row(0).to_vec();
        for i in 0..n {
            let expected = match m.registry.cache_index(SymbolId(i)) {
                Some(_) => unfilled.as_slice(),
                None => emb.row(i),
            };
            assert_eq!(tape.value(v).row(i), expected);
        }
    }

    #[test]
    fn attention_single_row_and_zero_scores() {
        let p = cal_problem();
        let mut m = model(4, 3, &[&p]);
        let g = m.layout.generator.clone();
        let row = vec![0.3, -0.1, 0.7, 0.2];
        {
            let mut tape = Tape::inference(&m.params);
            let h = tape.constant(Tensor::from_rows(&[row.clone()]).unwrap());
            let rep = JointRepresentation {
                h,
                text_len: 1,
                patch_len: 0,
            };
            let keys = attention_keys(&mut tape, &g, &rep);
            let prev = tape.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0, 4.0]));
            let (pooled, w) = attention_pool(&mut tape, &g, prev, &rep, keys);
            assert_eq!(tape.value(w).data(), &[1.0]);
            assert_eq!(tape.value(pooled).data(), row.as_slice());
        }
        *m.params.get_mut(g.w3) = Tensor::zeros(4, 4);
        let mut tape = Tape::inference(&m.params);
        let rows = vec![row.clone(), vec![1.0, 1.0, 1.0, 1.0], vec![-1.0, 0.0, 2.0, 0.5]];
        let h = tape.constant(Tensor::from_rows(&rows).unwrap());
        let rep = JointRepresentation {
            h,
            text_len: 3,
            patch_len: 0,
        };
        let keys = attention_keys(&mut tape, &g, &rep);
        let prev = tape.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0, 4.0]));
        let (pooled, w) = attention_pool(&mut tape, &g, prev, &rep, keys);
        for &a in tape.value(w).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        for c in 0..4 {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / 3.0;
            assert!((tape.value(pooled).get(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_direct_computation() {
        let p = cal_problem();
        let m = model(4, 4, &[&p]);
        let g = &m.layout.generator;
        let rows = vec![
            vec![0.3, -0.1, 0.7, 0.2],
            vec![0.9, 0.4, -0.6, 0.1],
            vec![-0.5, 0.8, 0.0, -0.3],
            vec![0.2, 0.2, 0.2, 0.9],
        ];
        let prev_v = vec![0.5, -1.0, 0.25, 2.0];
        let mut tape = Tape::inference(&m.params);
        let h = tape.constant(Tensor::from_rows(&rows).unwrap());
        let rep = JointRepresentation {
            h,
            text_len: 3,
            patch_len: 1,
        };
        let keys = attention_keys(&mut tape, g, &rep);
        let prev = tape.constant(Tensor::row_vector(prev_v.clone()));
        let (pooled, w) = attention_pool(&mut tape, g, prev, &rep, keys);

        let w3 = m.params.get(g.w3);
        let w4 = m.params.get(g.w4);
        let a: Vec<f64> = (0..4)
            .map(|j| (0..4).map(|k| prev_v[k] * w3.get(k, j)).sum())
            .collect();
        let scores: Vec<f64> = rows
            .iter()
            .map(|r| {
                (0..4)
                    .map(|j| a[j] * (0..4).map(|k| r[k] * w4.get(k, j)).sum::<f64>())
                    .sum()
            })
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let weights: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
        let total: f64 = tape.value(w).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        for (x, y) in tape.value(w).data().iter().zip(&weights) {
            assert!((x - y).abs() < 1e-12);
        }
        for c in 0..4 {
            let direct: f64 = rows.iter().zip(&weights).map(|(r, a)| a * r[c]).sum();
            assert!((tape.value(pooled).get(0, c) - direct).abs() < 1e-12);
        }
    }

    fn setup<'a>(m: &'a ModelState, p: &PreprocessedProblem, t: TypeId) -> (Tape<'a>, DecodeContext) {
        let mut tape = Tape::inference(&m.params);
        let ctx = prepare(&mut tape, m, p, Some(t)).unwrap();
        (tape, ctx)
    }

    #[test]
    fn first_step_uses_sos_and_zero_state() {
        let p = cal_problem();
        let m = model(8, 5, &[&p]);
        let cal = m.registry.type_by_name("cal").unwrap();
        let (mut tape, ctx) = setup(&m, &p, cal);
        let s = DecoderState::initial(&mut tape, &ctx, 8);
        assert_eq!(s.prev, m.registry.sos());
        assert!(tape.value(s.h_op).data().iter().all(|&x| x == 0.0));
        assert_eq!(s.mode, Mode::Operator);
    }

    #[test]
    fn operand_steps_leave_operator_state() {
        let p = cal_problem();
        let m = model(8, 6, &[&p]);
        let g = &m.layout.generator;
        let cal = m.registry.type_by_name("cal").unwrap();
        let (mut tape, ctx) = setup(&m, &p, cal);
        let s0 = DecoderState::initial(&mut tape, &ctx, 8);
        let add = m.registry.lookup("add").unwrap();
        let n0 = m.registry.resolve("N_0", &p).unwrap();
        let out = step(&mut tape, g, &ctx, &s0).unwrap();
        let s1 = advance(&mut tape, g, &ctx, &s0, &out, add, add).unwrap();
        let out = step(&mut tape, g, &ctx, &s1).unwrap();
        let s2 = advance(&mut tape, g, &ctx, &s1, &out, n0, n0).unwrap();
        let out = step(&mut tape, g, &ctx, &s2).unwrap();
        let s3 = advance(&mut tape, g, &ctx, &s2, &out, n0, n0).unwrap();
        assert_eq!(s3.h_op, s1.h_op);
        assert_ne!(tape.value(s3.h_oe), tape.value(s2.h_oe));
        assert_ne!(tape.value(s2.h_oe), tape.value(s1.h_oe));
    }

    #[test]
    fn operator_mode_masks_operands_and_type() {
        let p = cal_problem();
        let m = model(8, 7, &[&p]);
        let g = &m.layout.generator;
        let prv = m.registry.type_by_name("prv").unwrap();
        let (mut tape, ctx) = setup(&m, &p, prv);
        let s = DecoderState::initial(&mut tape, &ctx, 8);
        let out = step(&mut tape, g, &ctx, &s).unwrap();
        let probs = step_probabilities(&tape, &ctx, &out);
        for (i, &q) in probs.iter().enumerate() {
            let kind = m.registry.kind(SymbolId(i), &p).unwrap();
            let e = m.registry.entry(SymbolId(i));
            let cal_only = e.is_some_and(|e| !e.types.is_empty() && !e.types.contains(&prv));
            if kind.is_operand() || cal_only || i == m.registry.eop().0 {
                assert_eq!(q, 0.0, "{}", m.registry.surface(SymbolId(i), &p).unwrap());
            }
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_sub_program_masks_all_cache_tokens() {
        let p = cal_problem();
        let m = model(8, 8, &[&p]);
        let g = &m.layout.generator;
        let cal = m.registry.type_by_name("cal").unwrap();
        let (mut tape, ctx) = setup(&m, &p, cal);
        let s0 = DecoderState::initial(&mut tape, &ctx, 8);
        let add = m.registry.lookup("add").unwrap();
        let out = step(&mut tape, g, &ctx, &s0).unwrap();
        let s1 = advance(&mut tape, g, &ctx, &s0, &out, add, add).unwrap();
        let out = step(&mut tape, g, &ctx, &s1).unwrap();
        let probs = step_probabilities(&tape, &ctx, &out);
        for j in 0..ctx.limits.max_op {
            assert_eq!(probs[m.registry.cache_token(j).unwrap().0], 0.0);
        }
        assert_eq!(probs[m.registry.eos_operand().0], 0.0);
    }

    #[test]
    fn cache_update_rewrites_only_own_row() {
        let p = cal_problem();
        let base = model(8, 9, &[&p]);
        let cal = base.registry.type_by_name("cal").unwrap();
        let add = base.registry.lookup("add").unwrap();
        let n0 = base.registry.resolve("N_0", &p).unwrap();
        let eos = base.registry.eos_operand();
        let mut rows = Vec::new();
        for strategy in CacheStrategy::ALL {
            let mut m = base.clone();
            m.config.cache_strategy = strategy;
            let g = m.layout.generator.clone();
            let (mut tape, ctx) = setup(&m, &p, cal);
            let mut s = DecoderState::initial(&mut tape, &ctx, 8);
            let mut last_q = None;
            let mut op_q = None;
            for sym in [add, n0, eos] {
                let out = step(&mut tape, &g, &ctx, &s).unwrap();
                if sym == add {
                    op_q = Some(out.q);
                }
                last_q = Some(out.q);
                s = advance(&mut tape, &g, &ctx, &s, &out, sym, sym).unwrap();
            }
            assert_eq!(s.sub_index, 1);
            let before = tape.value(ctx.values).clone();
            let after = tape.value(s.values).clone();
            let c0 = m.registry.cache_token(0).unwrap().0;
            let source = match strategy {
                CacheStrategy::LastOperandQuery => tape.value(last_q.unwrap()).clone(),
                CacheStrategy::OperatorQuery => tape.value(op_q.unwrap()).clone(),
                CacheStrategy::OperatorEmbedding => {
                    Tensor::row_vector(m.params.get(g.embeddings).row(add.0).to_vec())
                }
            };
            let expected = source.matmul(m.params.get(g.w_v)).unwrap();
            assert_eq!(after.row(c0), expected.data());
            assert_ne!(after.row(c0), before.row(c0));
            for r in 0..after.rows() {
                if r != c0 {
                    assert_eq!(after.row(r), before.row(r));
                }
            }
            rows.push(after.row(c0).to_vec());
        }
        assert_ne!(rows[0], rows[1]);
        assert_ne!(rows[1], rows[2]);
        assert_ne!(rows[0], rows[2]);
    }

    #[test]
    fn cache_index_past_limit_is_error() {
        let p = cal_problem();
        let m = model(8, 10, &[&p]);
        let g = &m.layout.generator;
        let cal = m.registry.type_by_name("cal").unwrap();
        let (mut tape, ctx) = setup(&m, &p, cal);
        let src = tape.constant(Tensor::zeros(1, 8));
        let err = update_cache(&mut tape, g, &ctx, ctx.values, ctx.limits.max_op, src).unwrap_err();
        assert!(matches!(err, DecodeError::CacheIndex { .. }));
    }

    #[test]
    fn greedy_respects_limits_and_validates() {
        let p = cal_problem();
        for seed in 0..10 {
            let m = model(8, seed, &[&p]);
            let d = greedy_decode(&m, &p, None).unwrap();
            let l = m.registry.limits();
            assert!(d.trace.len() <= l.max_op * (1 + l.max_oe) + 1);
            d.program.validate(&m.registry, &p).unwrap();
            for t in &d.trace {
                assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(t.probs[t.symbol.0] > 0.0);
            }
        }
    }

    #[test]
    fn single_sub_program_limit() {
        let mut doc = RegistryDoc::default_doc();
        doc.limits.max_op = 1;
        let registry = DslRegistry::build(doc).unwrap();
        let p = cal_problem();
        let vocab = TextVocab::build([&p]);
        for seed in 0..5 {
            let m = ModelState::new(
                ModelConfig {
                    hidden: 8,
                    layers: 1,
                    patch_dim: 4,
                    ..ModelConfig::default()
                },
                registry.clone(),
                vocab.clone(),
                seed,
            )
            .unwrap();
            let d = greedy_decode(&m, &p, None).unwrap();
            assert_eq!(d.program.subs.len(), 1);
            assert!(!d.symbols().contains(&m.registry.eop()));
        }
    }

    #[test]
    fn literal_and_normalized_argmax_agree() {
        let p = cal_problem();
        for seed in 0..5 {
            let m = model(8, 20 + seed, &[&p]);
            let mut lit = m.clone();
            lit.config.mask_mode = MaskMode::Literal;
            let a = greedy_decode(&m, &p, None).unwrap();
            let b = greedy_decode(&lit, &p, None).unwrap();
            assert_eq!(a.symbols(), b.symbols());
            for (x, y) in a.trace.iter().zip(&b.trace) {
                assert!(y.probs.iter().sum::<f64>() <= 1.0 + 1e-12);
                for (px, py) in x.probs.iter().zip(&y.probs) {
                    assert_eq!(*px == 0.0, *py == 0.0);
                }
            }
        }
    }

    #[test]
    fn step_log_probs_match_reference_softmax() {
        let p = cal_problem();
        let m = model(8, 11, &[&p]);
        let g = &m.layout.generator;
        let cal = m.registry.type_by_name("cal").unwrap();
        let (mut tape, ctx) = setup(&m, &p, cal);
        let s = DecoderState::initial(&mut tape, &ctx, 8);
        let out = step(&mut tape, g, &ctx, &s).unwrap();
        let reference = masked_log_softmax(tape.value(out.logits).data(), &out.mask).unwrap();
        assert_eq!(tape.value(out.log_probs).data(), reference.as_slice());
    }
}
