//! Training objective, optimisation loop and top-k evaluation.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::{hbeam_decode, BeamConfig, BeamError, Ranked};
use crate::encoder::{PreprocessedProblem, TextVocab};
use crate::generator::{advance, greedy_decode, prepare, step, CacheStrategy, DecodeError, DecoderState};
use crate::model::{ModelConfig, ModelError, ModelState};
use crate::numerics::{argmax, Gradients, MaskMode, ParamStore, Tape, Var};
use crate::program::{attribute_program_error, ErrorKind, SolutionProgram};
use crate::registry::{DslRegistry, SymbolId};

/// Teacher-forcing probability for every epoch below `below`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub below: usize,
    pub prob: f64,
}

pub fn default_schedule() -> Vec<ScheduleEntry> {
    [(10, 0.0), (20, 0.1), (30, 0.5), (40, 0.8), (100, 0.9)]
        .into_iter()
        .map(|(below, prob)| ScheduleEntry { below, prob })
        .collect()
}

/// Probability of feeding the gold symbol at `epoch`. Epochs past the last
/// threshold use the last entry.
pub fn tf_prob(epoch: usize, schedule: &[ScheduleEntry]) -> f64 {
    schedule
        .iter()
        .find(|e| epoch < e.below)
        .or(schedule.last())
        .map_or(1.0, |e| e.prob)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub layers: usize,
    pub patch_dim: usize,
    pub cache_strategy: CacheStrategy,
    pub mask_mode: MaskMode,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Vec<ScheduleEntry>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub beam: BeamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            hidden: model.hidden,
            layers: model.layers,
            patch_dim: model.patch_dim,
            cache_strategy: model.cache_strategy,
            mask_mode: model.mask_mode,
            lr: 2e-4,
            epochs: 100,
            batch_size: 8,
            seed: 0,
            schedule: default_schedule(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            beam: BeamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            layers: self.layers,
            patch_dim: self.patch_dim,
            cache_strategy: self.cache_strategy,
            mask_mode: self.mask_mode,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        self.model_config().validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps be positive");
        }
        if self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if self.beam.bs == 0 {
            return bad("beam size must be positive");
        }
        if self.schedule.is_empty() {
            return bad("teacher-forcing schedule is empty");
        }
        for w in self.schedule.windows(2) {
            if w[1].below <= w[0].below {
                return bad("schedule thresholds must increase");
            }
        }
        if self.schedule.iter().any(|e| !(0.0..=1.0).contains(&e.prob)) {
            return bad("schedule probabilities must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("problem `{0}` has no gold type or program")]
    MissingGold(String),
    #[error("gold symbol `{surface}` is masked off in problem `{id}`")]
    GoldMasked { id: String, surface: String },
    #[error("non-finite loss {value} at epoch {epoch} (problem `{id}`)")]
    NonFiniteLoss { epoch: usize, id: String, value: f64 },
    #[error("empty dataset")]
    EmptyDataset,
}

/// Loss of one example (or a batch mean), split into its three terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub type_loss: f64,
    pub op_loss: f64,
    pub oe_loss: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.type_loss += o.type_loss;
        self.op_loss += o.op_loss;
        self.oe_loss += o.oe_loss;
    }

    fn scale(&mut self, c: f64) {
        self.total *= c;
        self.type_loss *= c;
        self.op_loss *= c;
        self.oe_loss *= c;
    }
}

fn sum_vars(tape: &mut Tape<'_>, vars: &[Var]) -> Option<Var> {
    let (&first, rest) = vars.split_first()?;
    Some(rest.iter().fold(first, |acc, &v| tape.add(acc, v)))
}

/// Negative log-likelihood of the gold type and program for one problem,
/// recorded on `tape`.
///
/// Operator terms (the closing `eop` included) are averaged over the number
/// of sub-programs; each sub-program's operand terms (its closing
/// `eos_operand` included) are averaged over its operand count and then over
/// the number of sub-programs. Terminators are not scored where the limits
/// close a sequence implicitly. At every step the next input is the gold
/// symbol with probability `tf`, otherwise the model's argmax; targets stay
/// those of the gold program.
pub fn example_loss<R: Rng>(
    tape: &mut Tape<'_>,
    model: &ModelState,
    problem: &PreprocessedProblem,
    tf: f64,
    rng: &mut R,
) -> Result<(Var, LossParts), TrainError> {
    let (Some(gold_type), Some(gold)) = (problem.problem_type, problem.gold.as_ref()) else {
        return Err(TrainError::MissingGold(problem.id.clone()));
    };
    let registry = &model.registry;
    let params = &model.layout.generator;
    let ctx = prepare(tape, model, problem, Some(gold_type))?;

    let all = vec![true; registry.types().len()];
    let type_lp = tape.masked_log_softmax(ctx.type_logits, &all);
    let type_term = tape.pick(type_lp, gold_type.0);

    let mut state = DecoderState::initial(tape, &ctx, model.hidden());
    let scored_step = |tape: &mut Tape<'_>, state: &mut DecoderState, target: SymbolId, rng: &mut R| {
        let out = step(tape, params, &ctx, state)?;
        if !out.mask[target.0] {
            return Err(TrainError::GoldMasked {
                id: problem.id.clone(),
                surface: registry.surface(target, problem).unwrap_or_default(),
            });
        }
        let lp = tape.pick(out.log_probs, target.0);
        let fed = if tf >= 1.0 || (tf > 0.0 && rng.gen::<f64>() < tf) {
            target
        } else {
            SymbolId(argmax(tape.value(out.log_probs).data()).expect("non-empty"))
        };
        *state = advance(tape, params, &ctx, state, &out, target, fed)?;
        Ok::<Var, TrainError>(lp)
    };

    let limits = ctx.limits;
    let mut op_terms = Vec::new();
    let mut oe_terms = Vec::new();
    for sub in &gold.subs {
        op_terms.push(scored_step(tape, &mut state, sub.op, rng)?);
        let mut targets = sub.args.clone();
        if targets.len() < limits.max_oe {
            targets.push(ctx.eos());
        }
        let mut terms = Vec::with_capacity(targets.len());
        for t in targets {
            terms.push(scored_step(tape, &mut state, t, rng)?);
        }
        let s = sum_vars(tape, &terms).expect("at least one operand");
        oe_terms.push(tape.scale(s, 1.0 / sub.args.len() as f64));
    }
    if gold.subs.len() < limits.max_op {
        op_terms.push(scored_step(tape, &mut state, ctx.eop(), rng)?);
    }

    let l_prog = gold.subs.len() as f64;
    let type_loss = tape.scale(type_term, -1.0);
    let op_sum = sum_vars(tape, &op_terms).expect("non-empty program");
    let op_loss = tape.scale(op_sum, -1.0 / l_prog);
    let oe_sum = sum_vars(tape, &oe_terms).expect("non-empty program");
    let oe_loss = tape.scale(oe_sum, -1.0 / l_prog);
    let partial = tape.add(type_loss, op_loss);
    let total = tape.add(partial, oe_loss);
    let parts = LossParts {
        total: tape.scalar(total),
        type_loss: tape.scalar(type_loss),
        op_loss: tape.scalar(op_loss),
        oe_loss: tape.scalar(oe_loss),
    };
    Ok((total, parts))
}

fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Mean loss over `batch` and its gradient. Examples are evaluated in
/// parallel; gradients are summed in batch order.
pub fn batch_loss(
    model: &ModelState,
    batch: &[&PreprocessedProblem],
    tf: f64,
    seed: u64,
    epoch: usize,
) -> Result<(LossParts, Gradients), TrainError> {
    let results: Vec<Result<(LossParts, Gradients), TrainError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = example_rng(seed, epoch, i);
            let mut tape = Tape::new(&model.params);
            let (total, parts) = example_loss(&mut tape, model, p, tf, &mut rng)?;
            if !parts.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    id: p.id.clone(),
                    value: parts.total,
                });
            }
            let mut grads = model.params.zeros_like();
            tape.backward(total).accumulate(&mut grads, 1.0);
            Ok((parts, grads))
        })
        .collect();
    let mut parts = LossParts::default();
    let mut grads = model.params.zeros_like();
    for r in results {
        let (p, g) = r?;
        parts.add(&p);
        grads.add_assign(&g);
    }
    let c = 1.0 / batch.len() as f64;
    parts.scale(c);
    grads.scale(c);
    Ok((parts, grads))
}

/// Adaptive-moment optimiser. Parameters are rounded to `f32` after each
/// update so that checkpoints hold them exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            for (m, &g) in m.iter_mut().zip(g) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            }
            let v = self.v.get_mut(id).data_mut();
            for (v, &g) in v.iter_mut().zip(g) {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            }
            let (m, v) = (self.m.get(id).data(), self.v.get(id).data());
            let p = params.get_mut(id);
            for ((w, &m), &v) in p.data_mut().iter_mut().zip(m).zip(v) {
                *w -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            }
            p.round_to_f32();
        }
    }
}

/// Scales `grads` down to global norm `max_norm` when it is larger.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub tf_prob: f64,
    #[serde(flatten)]
    pub loss: LossParts,
}

/// Append-only CSV of per-epoch losses.
pub struct LossCsv {
    file: std::fs::File,
}

impl LossCsv {
    pub const HEADER: &'static str = "epoch,total,type_loss,op_loss,oe_loss";

    pub fn open(path: &Path) -> io::Result<Self> {
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            writeln!(file, "{}", Self::HEADER)?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, log: &EpochLog) -> io::Result<()> {
        let l = &log.loss;
        writeln!(
            self.file,
            "{},{},{},{},{}",
            log.epoch, l.total, l.type_loss, l.op_loss, l.oe_loss
        )
    }
}

pub struct TrainOutcome {
    pub model: ModelState,
    pub log: Vec<EpochLog>,
}

/// Fresh model for `cfg` with a vocabulary built from `data`.
pub fn init_model(cfg: &TrainConfig, registry: DslRegistry, data: &[PreprocessedProblem]) -> Result<ModelState, TrainError> {
    Ok(ModelState::new(
        cfg.model_config(),
        registry,
        TextVocab::build(data),
        cfg.seed,
    )?)
}

pub fn train(
    cfg: &TrainConfig,
    registry: DslRegistry,
    data: &[PreprocessedProblem],
) -> Result<TrainOutcome, TrainError> {
    train_with(cfg, init_model(cfg, registry, data)?, data, |_, _| ControlFlow::Continue(()))
}

/// Runs up to `cfg.epochs` epochs of seeded-shuffle mini-batch updates from
/// `model`. `observer` sees each finished epoch and may stop the run.
pub fn train_with<F>(
    cfg: &TrainConfig,
    mut model: ModelState,
    data: &[PreprocessedProblem],
    mut observer: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&EpochLog, &ModelState) -> ControlFlow<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(p) = data.iter().find(|p| p.problem_type.is_none() || p.gold.is_none()) {
        return Err(TrainError::MissingGold(p.id.clone()));
    }
    let mut adam = Adam::new(&model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let tf = tf_prob(epoch, &cfg.schedule);
        order.shuffle(&mut shuffle);
        let mut epoch_loss = LossParts::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreprocessedProblem> = chunk.iter().map(|&i| &data[i]).collect();
            let batch_seed = cfg.seed ^ ((b as u64) << 40);
            let (parts, mut grads) = batch_loss(&model, &batch, tf, batch_seed, epoch)?;
            let mut weighted = parts;
            weighted.scale(batch.len() as f64);
            epoch_loss.add(&weighted);
            clip_gradients(&mut grads, cfg.clip_norm);
            adam.step(&mut model.params, &grads);
        }
        epoch_loss.scale(1.0 / data.len() as f64);
        let entry = EpochLog {
            epoch,
            tf_prob: tf,
            loss: epoch_loss,
        };
        log.push(entry);
        if observer(&entry, &model).is_break() {
            break;
        }
    }
    Ok(TrainOutcome { model, log })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub wrong_operator: usize,
    pub wrong_operand: usize,
}

impl Attribution {
    pub fn record(&mut self, kind: ErrorKind) {
        match kind {
            ErrorKind::WrongOperator => self.wrong_operator += 1,
            ErrorKind::WrongOperand => self.wrong_operand += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.wrong_operator + self.wrong_operand
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeBreakdown {
    pub n: usize,
    pub top1: f64,
    pub topk: f64,
    pub type_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKReport {
    pub n: usize,
    pub k: usize,
    pub beam: usize,
    pub top1: f64,
    pub topk: f64,
    /// Classifier accuracy against the gold types.
    pub type_accuracy: f64,
    pub per_type: BTreeMap<String, TypeBreakdown>,
    /// Rank of the gold program among the candidates, for problems where it
    /// appears at all.
    pub rank_histogram: BTreeMap<usize, usize>,
    pub not_found: usize,
    pub attribution: Attribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemResult {
    pub id: String,
    pub gold_rank: Option<usize>,
    pub type_correct: bool,
    pub candidates: Vec<Ranked>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("k = {k} exceeds beam size {bs}")]
    KExceedsBeam { k: usize, bs: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("problem `{0}` has no gold type or program")]
    MissingGold(String),
    #[error("problem `{id}`: {source}")]
    Beam { id: String, source: BeamError },
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Beam-decodes every problem with the classifier's type and reports
/// top-1/top-k exact match, the gold rank histogram and an attribution of
/// every wrong top-1 prediction. Problems are decoded in parallel.
pub fn evaluate(
    model: &ModelState,
    data: &[PreprocessedProblem],
    k: usize,
    beam: &BeamConfig,
) -> Result<(TopKReport, Vec<ProblemResult>), EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if k > beam.bs {
        return Err(EvalError::KExceedsBeam { k, bs: beam.bs });
    }
    let results: Vec<Result<ProblemResult, EvalError>> = data
        .par_iter()
        .map(|p| {
            let (Some(gold_type), Some(gold)) = (p.problem_type, p.gold.as_ref()) else {
                return Err(EvalError::MissingGold(p.id.clone()));
            };
            let candidates = hbeam_decode(model, p, None, beam).map_err(|source| EvalError::Beam {
                id: p.id.clone(),
                source,
            })?;
            let gold_rank = candidates.iter().position(|c| c.program.canonical_equal(gold));
            let type_correct = candidates
                .first()
                .map_or(false, |c| c.program.problem_type == gold_type);
            Ok(ProblemResult {
                id: p.id.clone(),
                gold_rank,
                type_correct,
                candidates,
            })
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok((summarize(model, data, k, beam.bs, &results), results))
}

fn summarize(
    model: &ModelState,
    data: &[PreprocessedProblem],
    k: usize,
    bs: usize,
    results: &[ProblemResult],
) -> TopKReport {
    let mut rank_histogram = BTreeMap::new();
    let mut attribution = Attribution::default();
    let mut not_found = 0;
    let mut counts: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    let (mut top1, mut topk, mut types) = (0, 0, 0);
    for (p, r) in data.iter().zip(results) {
        let gold = p.gold.as_ref().expect("checked");
        let name = model
            .registry
            .type_name(p.problem_type.expect("checked"))
            .to_string();
        let c = counts.entry(name).or_default();
        c[0] += 1;
        match r.gold_rank {
            Some(rank) => *rank_histogram.entry(rank).or_insert(0) += 1,
            None => not_found += 1,
        }
        let hit1 = r.gold_rank == Some(0);
        let hitk = r.gold_rank.is_some_and(|x| x < k);
        top1 += hit1 as usize;
        topk += hitk as usize;
        types += r.type_correct as usize;
        c[1] += hit1 as usize;
        c[2] += hitk as usize;
        c[3] += r.type_correct as usize;
        if !hit1 {
            let empty = SolutionProgram {
                subs: Vec::new(),
                problem_type: gold.problem_type,
            };
            let pred = r.candidates.first().map_or(&empty, |c| &c.program);
            attribution.record(attribute_program_error(pred, gold).unwrap_or(ErrorKind::WrongOperator));
        }
    }
    let n = data.len();
    TopKReport {
        n,
        k,
        beam: bs,
        top1: ratio(top1, n),
        topk: ratio(topk, n),
        type_accuracy: ratio(types, n),
        per_type: counts
            .into_iter()
            .map(|(name, c)| {
                (
                    name,
                    TypeBreakdown {
                        n: c[0],
                        top1: ratio(c[1], c[0]),
                        topk: ratio(c[2], c[0]),
                        type_accuracy: ratio(c[3], c[0]),
                    },
                )
            })
            .collect(),
        rank_histogram,
        not_found,
        attribution,
    }
}

/// Greedy top-1 exact match and classifier accuracy over `data`.
pub fn greedy_accuracy(model: &ModelState, data: &[PreprocessedProblem]) -> Result<(f64, f64), DecodeError> {
    let hits: Vec<Result<(bool, bool), DecodeError>> = data
        .par_iter()
        .map(|p| {
            let d = greedy_decode(model, p, None)?;
            let ok = p.gold.as_ref().is_some_and(|g| d.program.canonical_equal(g));
            Ok((ok, Some(d.program.problem_type) == p.problem_type))
        })
        .collect();
    let hits = hits.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = data.len();
    Ok((
        ratio(hits.iter().filter(|h| h.0).count(), n),
        ratio(hits.iter().filter(|h| h.1).count(), n),
    ))
}
