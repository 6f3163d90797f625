//! Solution programs: sub-program structure, flat/nested serialisation,
//! exact-match comparison, arithmetic execution and corpus statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::PreprocessedProblem;
use crate::registry::{DslRegistry, SymbolId, SymbolKind, TypeId, EOP, EOS_OPERAND};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubProgram {
    pub op: SymbolId,
    pub args: Vec<SymbolId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SolutionProgram {
    pub subs: Vec<SubProgram>,
    pub problem_type: TypeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestedSub {
    pub op: String,
    pub args: Vec<String>,
}

/// Surface-level program as it appears in files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProgramText {
    Nested(Vec<NestedSub>),
    Flat(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    /// Also accepts legacy sequences without `eos_operand`, cutting a new
    /// sub-program at each operator token; a trailing `eop` is optional.
    Tolerant,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProgramError {
    #[error("empty program")]
    Empty,
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("operator `{0}` in operand position")]
    OperatorInArgPosition(String),
    #[error("expected an operator, found `{0}`")]
    ExpectedOperator(String),
    #[error("control token `{0}` out of place")]
    MisplacedControl(String),
    #[error("cache token `{token}` referenced in sub-program {index}")]
    CacheTokenForwardReference { token: String, index: usize },
    #[error("sub-program {0} has no operands")]
    NoOperands(usize),
    #[error("sub-program {index} has {count} operands, limit {limit}")]
    TooManyOperands {
        index: usize,
        count: usize,
        limit: usize,
    },
    #[error("{count} sub-programs exceed limit {limit}")]
    TooManySubPrograms { count: usize, limit: usize },
    #[error("symbol `{0}` is outside the problem type's vocabulary")]
    OutsideTypeVocabulary(String),
    #[error("program truncated: missing `eop`")]
    Truncated,
    #[error("tokens after `eop`")]
    TrailingTokens,
}

impl SolutionProgram {
    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    /// Checks every structural invariant against the registry and the problem's
    /// dynamic symbols.
    pub fn validate(&self, registry: &DslRegistry, problem: &PreprocessedProblem) -> Result<(), ProgramError> {
        let limits = registry.limits();
        if self.subs.is_empty() {
            return Err(ProgramError::Empty);
        }
        if self.subs.len() > limits.max_op {
            return Err(ProgramError::TooManySubPrograms {
                count: self.subs.len(),
                limit: limits.max_op,
            });
        }
        let mask = registry
            .type_mask(self.problem_type, problem)
            .map_err(|e| ProgramError::UnknownSymbol(e.to_string()))?;
        let surface = |id: SymbolId| registry.surface(id, problem).unwrap_or_else(|| format!("{id}"));
        for (t, sub) in self.subs.iter().enumerate() {
            match registry.kind(sub.op, problem) {
                Some(SymbolKind::Operator) => {}
                Some(_) => return Err(ProgramError::ExpectedOperator(surface(sub.op))),
                None => return Err(ProgramError::UnknownSymbol(surface(sub.op))),
            }
            if !mask.allows(sub.op) {
                return Err(ProgramError::OutsideTypeVocabulary(surface(sub.op)));
            }
            if sub.args.is_empty() {
                return Err(ProgramError::NoOperands(t));
            }
            if sub.args.len() > limits.max_oe {
                return Err(ProgramError::TooManyOperands {
                    index: t,
                    count: sub.args.len(),
                    limit: limits.max_oe,
                });
            }
            for &a in &sub.args {
                match registry.kind(a, problem) {
                    Some(k) if k.is_operand() => {}
                    Some(SymbolKind::Operator) => {
                        return Err(ProgramError::OperatorInArgPosition(surface(a)))
                    }
                    Some(_) => return Err(ProgramError::MisplacedControl(surface(a))),
                    None => return Err(ProgramError::UnknownSymbol(surface(a))),
                }
                if let Some(j) = registry.cache_index(a) {
                    if j >= t {
                        return Err(ProgramError::CacheTokenForwardReference {
                            token: surface(a),
                            index: t,
                        });
                    }
                }
                if !mask.allows(a) {
                    return Err(ProgramError::OutsideTypeVocabulary(surface(a)));
                }
            }
        }
        Ok(())
    }

    /// Flat token form: per sub-program the operator, its operands and
    /// `eos_operand`; the whole program closes with `eop`.
    pub fn to_flat(&self, registry: &DslRegistry, problem: &PreprocessedProblem) -> Vec<String> {
        let name = |id: SymbolId| registry.surface(id, problem).unwrap_or_else(|| format!("{id}"));
        let mut out = Vec::new();
        for sub in &self.subs {
            out.push(name(sub.op));
            out.extend(sub.args.iter().map(|&a| name(a)));
            out.push(EOS_OPERAND.to_string());
        }
        out.push(EOP.to_string());
        out
    }

    pub fn to_nested(&self, registry: &DslRegistry, problem: &PreprocessedProblem) -> Vec<NestedSub> {
        let name = |id: SymbolId| registry.surface(id, problem).unwrap_or_else(|| format!("{id}"));
        self.subs
            .iter()
            .map(|s| NestedSub {
                op: name(s.op),
                args: s.args.iter().map(|&a| name(a)).collect(),
            })
            .collect()
    }

    pub fn from_flat<S: AsRef<str>>(
        tokens: &[S],
        registry: &DslRegistry,
        problem: &PreprocessedProblem,
        problem_type: TypeId,
        mode: ParseMode,
    ) -> Result<Self, ProgramError> {
        if tokens.is_empty() {
            return Err(ProgramError::Empty);
        }
        let resolve = |s: &str| {
            registry
                .resolve(s, problem)
                .ok_or_else(|| ProgramError::UnknownSymbol(s.to_string()))
        };
        let mut subs: Vec<SubProgram> = Vec::new();
        let mut current: Option<SubProgram> = None;
        let mut finished = false;
        for tok in tokens {
            let tok = tok.as_ref();
            if finished {
                return Err(ProgramError::TrailingTokens);
            }
            let id = resolve(tok)?;
            let kind = registry.kind(id, problem).expect("resolved");
            let open = current.is_some();
            if kind == SymbolKind::Operator {
                if open {
                    if mode == ParseMode::Strict {
                        return Err(ProgramError::OperatorInArgPosition(tok.to_string()));
                    }
                    subs.extend(current.take());
                }
                current = Some(SubProgram { op: id, args: Vec::new() });
            } else if kind.is_operand() {
                match current.as_mut() {
                    Some(sub) => sub.args.push(id),
                    None => return Err(ProgramError::ExpectedOperator(tok.to_string())),
                }
            } else if id == registry.eos_operand() && open {
                subs.extend(current.take());
            } else if id == registry.eop() {
                if open {
                    if mode == ParseMode::Strict {
                        return Err(ProgramError::MisplacedControl(tok.to_string()));
                    }
                    subs.extend(current.take());
                }
                finished = true;
            } else {
                return Err(ProgramError::MisplacedControl(tok.to_string()));
            }
        }
        if let Some(sub) = current.take() {
            if mode == ParseMode::Strict {
                return Err(ProgramError::Truncated);
            }
            subs.push(sub);
        }
        if !finished && mode == ParseMode::Strict {
            return Err(ProgramError::Truncated);
        }
        let program = SolutionProgram { subs, problem_type };
        program.validate(registry, problem)?;
        Ok(program)
    }

    pub fn from_text(
        text: &ProgramText,
        registry: &DslRegistry,
        problem: &PreprocessedProblem,
        problem_type: TypeId,
    ) -> Result<Self, ProgramError> {
        match text {
            ProgramText::Flat(tokens) => {
                Self::from_flat(tokens, registry, problem, problem_type, ParseMode::Tolerant)
            }
            ProgramText::Nested(subs) => {
                let mut tokens = Vec::new();
                for s in subs {
                    tokens.push(s.op.as_str());
                    tokens.extend(s.args.iter().map(String::as_str));
                    tokens.push(EOS_OPERAND);
                }
                tokens.push(EOP);
                Self::from_flat(&tokens, registry, problem, problem_type, ParseMode::Strict)
            }
        }
    }

    /// Exact match over sub-program lists. Aliases are already normalised when
    /// programs are parsed, so this is structural equality.
    pub fn canonical_equal(&self, other: &SolutionProgram) -> bool {
        self.subs == other.subs
    }

    pub fn operand_counts(&self) -> impl Iterator<Item = usize> + '_ {
        self.subs.iter().map(|s| s.args.len())
    }
}

pub fn canonical_equal(a: &SolutionProgram, b: &SolutionProgram) -> bool {
    a.canonical_equal(b)
}

/// Normalises cache-token aliases (`V_i` → `#i`) in a surface form.
pub fn normalize_surface(s: &str) -> String {
    match s.strip_prefix("V_") {
        Some(rest) if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) => format!("#{rest}"),
        _ => s.to_string(),
    }
}

impl ProgramText {
    /// Nested surface form with aliases normalised; flat input is segmented
    /// at operator-position tokens using `is_operator`.
    pub fn to_nested(&self, is_operator: impl Fn(&str) -> bool) -> Vec<NestedSub> {
        match self {
            ProgramText::Nested(subs) => subs
                .iter()
                .map(|s| NestedSub {
                    op: normalize_surface(&s.op),
                    args: s.args.iter().map(|a| normalize_surface(a)).collect(),
                })
                .collect(),
            ProgramText::Flat(tokens) => {
                let mut out: Vec<NestedSub> = Vec::new();
                let mut open = false;
                for t in tokens {
                    let t = normalize_surface(t);
                    if t == EOP {
                        break;
                    } else if t == EOS_OPERAND {
                        open = false;
                    } else if !open || is_operator(&t) {
                        out.push(NestedSub { op: t, args: Vec::new() });
                        open = true;
                    } else if let Some(last) = out.last_mut() {
                        last.args.push(t);
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    WrongOperator,
    WrongOperand,
}

#[derive(PartialEq)]
enum Slot<'a, T> {
    Op(&'a T),
    Arg(&'a T),
    EndArgs,
    End,
}

fn slots<'a, T>(subs: impl Iterator<Item = (&'a T, &'a [T])>) -> Vec<Slot<'a, T>> {
    let mut out = Vec::new();
    for (op, args) in subs {
        out.push(Slot::Op(op));
        out.extend(args.iter().map(Slot::Arg));
        out.push(Slot::EndArgs);
    }
    out.push(Slot::End);
    out
}

/// Classifies the first divergence between a prediction and the gold program:
/// an operator position (including program end) gives `WrongOperator`,
/// anything inside an operand list gives `WrongOperand`. `None` when equal.
pub fn attribute_error<'a, T: PartialEq + 'a>(
    pred: impl Iterator<Item = (&'a T, &'a [T])>,
    gold: impl Iterator<Item = (&'a T, &'a [T])>,
) -> Option<ErrorKind> {
    let (p, g) = (slots(pred), slots(gold));
    let idx = p.iter().zip(&g).position(|(a, b)| a != b)?;
    Some(match g[idx] {
        Slot::Op(_) | Slot::End => ErrorKind::WrongOperator,
        Slot::Arg(_) | Slot::EndArgs => ErrorKind::WrongOperand,
    })
}

pub fn attribute_program_error(pred: &SolutionProgram, gold: &SolutionProgram) -> Option<ErrorKind> {
    attribute_error(
        pred.subs.iter().map(|s| (&s.op, s.args.as_slice())),
        gold.subs.iter().map(|s| (&s.op, s.args.as_slice())),
    )
}

pub fn attribute_nested_error(pred: &[NestedSub], gold: &[NestedSub]) -> Option<ErrorKind> {
    attribute_error(
        pred.iter().map(|s| (&s.op, s.args.as_slice())),
        gold.iter().map(|s| (&s.op, s.args.as_slice())),
    )
}

/// Number of operands following each operator occurrence, aggregated.
pub fn operand_count_histogram<I>(counts: I) -> BTreeMap<usize, usize>
where
    I: IntoIterator<Item = usize>,
{
    let mut hist = BTreeMap::new();
    for c in counts {
        *hist.entry(c).or_insert(0) += 1;
    }
    hist
}

pub fn program_operand_histogram<'a>(
    corpus: impl IntoIterator<Item = &'a SolutionProgram>,
) -> BTreeMap<usize, usize> {
    operand_count_histogram(corpus.into_iter().flat_map(|p| p.operand_counts()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecValue {
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecError {
    #[error("division by zero in sub-program {0}")]
    DivisionByZero(usize),
    #[error("operand {0} has no bound value")]
    UnboundOperand(SymbolId),
    #[error("operator `{0}` has no arithmetic semantics")]
    NonExecutableOperator(String),
    #[error("operator `{surface}` applied to {got} operands")]
    ArityMismatch { surface: String, got: usize },
    #[error("sub-program {0} produced a non-finite value")]
    NonFinite(usize),
    #[error("empty program")]
    Empty,
}

/// Evaluates a CAL program in order, binding `#t` to the t-th result.
/// `numbers[k]` is the value of `N_k`.
pub fn execute_cal(
    program: &SolutionProgram,
    registry: &DslRegistry,
    numbers: &[f64],
) -> Result<ExecValue, ExecError> {
    let pi = registry
        .lookup("C_pi")
        .and_then(|id| registry.entry(id))
        .and_then(|e| e.constant_value)
        .unwrap_or(std::f64::consts::PI);
    let n_static = registry.num_static();
    let mut results: Vec<f64> = Vec::with_capacity(program.subs.len());
    for (t, sub) in program.subs.iter().enumerate() {
        let args = sub
            .args
            .iter()
            .map(|&a| {
                if let Some(j) = registry.cache_index(a) {
                    return results.get(j).copied().ok_or(ExecError::UnboundOperand(a));
                }
                if a.0 >= n_static {
                    return numbers.get(a.0 - n_static).copied().ok_or(ExecError::UnboundOperand(a));
                }
                registry
                    .entry(a)
                    .and_then(|e| e.constant_value)
                    .ok_or(ExecError::UnboundOperand(a))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let surface = registry
            .entry(sub.op)
            .map(|e| e.surface.as_str())
            .unwrap_or("?");
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(ExecError::ArityMismatch {
                    surface: surface.to_string(),
                    got: args.len(),
                })
            }
        };
        let v = match surface {
            "add" => {
                arity(2)?;
                args[0] + args[1]
            }
            "sub" => {
                arity(2)?;
                args[0] - args[1]
            }
            "mul" => {
                arity(2)?;
                args[0] * args[1]
            }
            "div" => {
                arity(2)?;
                if args[1] == 0.0 {
                    return Err(ExecError::DivisionByZero(t));
                }
                args[0] / args[1]
            }
            "pow" => {
                arity(2)?;
                args[0].powf(args[1])
            }
            "Circle_R_Area" => {
                arity(1)?;
                pi * args[0] * args[0]
            }
            "sin_deg" => {
                arity(1)?;
                args[0].to_radians().sin()
            }
            "cos_deg" => {
                arity(1)?;
                args[0].to_radians().cos()
            }
            other => return Err(ExecError::NonExecutableOperator(other.to_string())),
        };
        if !v.is_finite() {
            return Err(ExecError::NonFinite(t));
        }
        results.push(v);
    }
    results
        .last()
        .map(|&value| ExecValue { value })
        .ok_or(ExecError::Empty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::preprocess;
    use crate::registry::RegistryDoc;

    fn setup(text: &str) -> (DslRegistry, PreprocessedProblem, TypeId) {
        let reg = DslRegistry::default_registry();
        let p = preprocess(text, &[]);
        let cal = reg.type_by_name("cal").unwrap();
        (reg, p, cal)
    }

    fn flat(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn to_flat_two_sub_programs() {
        let (reg, p, cal) = setup("a 3 b 5");
        let id = |s: &str| reg.resolve(s, &p).unwrap();
        let prog = SolutionProgram {
            subs: vec![
                SubProgram { op: id("add"), args: vec![id("N_0"), id("N_1")] },
                SubProgram { op: id("mul"), args: vec![id("#0"), id("C_pi")] },
            ],
            problem_type: cal,
        };
        let f = prog.to_flat(&reg, &p);
        assert_eq!(
            f,
            flat(&["add", "N_0", "N_1", "eos_operand", "mul", "#0", "C_pi", "eos_operand", "eop"])
        );
        let back = SolutionProgram::from_flat(&f, &reg, &p, cal, ParseMode::Strict).unwrap();
        assert_eq!(back, prog);
    }

    #[test]
    fn single_element_sub_program() {
        let reg = DslRegistry::default_registry();
        let p = preprocess("in triangle A B C and angle A B C", &[]);
        let prv = reg.type_by_name("prv").unwrap();
        let prog = SolutionProgram::from_flat(
            &["R_4", "E_1", "eos_operand", "eop"],
            &reg,
            &p,
            prv,
            ParseMode::Strict,
        )
        .unwrap();
        assert_eq!(prog.to_flat(&reg, &p), flat(&["R_4", "E_1", "eos_operand", "eop"]));
    }

    #[test]
    fn legacy_theorem_sequence_segments_per_operator() {
        let mut doc = RegistryDoc::default_doc();
        doc.operators.push(crate::registry::OperatorDoc {
            surface: "R_15".into(),
            types: vec!["prv".into()],
            min_args: 1,
            max_args: 3,
        });
        let reg = DslRegistry::build(doc).unwrap();
        let p = preprocess("∠ABC, △ABC, ∠BCD, △BCD", &[]);
        assert_eq!(p.num_elements(), 4);
        let prv = reg.type_by_name("prv").unwrap();
        let toks = ["R_4", "E_1", "congruent", "E_3", "R_15", "E_3", "similar", "E_2"];
        let prog = SolutionProgram::from_flat(&toks, &reg, &p, prv, ParseMode::Tolerant).unwrap();
        let nested = prog.to_nested(&reg, &p);
        let got: Vec<(&str, Vec<&str>)> = nested
            .iter()
            .map(|s| (s.op.as_str(), s.args.iter().map(String::as_str).collect()))
            .collect();
        assert_eq!(
            got,
            vec![
                ("R_4", vec!["E_1"]),
                ("congruent", vec!["E_3"]),
                ("R_15", vec!["E_3"]),
                ("similar", vec!["E_2"])
            ]
        );
        assert_eq!(program_operand_histogram([&prog]), BTreeMap::from([(1, 4)]));
    }

    #[test]
    fn strict_parse_errors() {
        let (reg, p, cal) = setup("a 3 b 5");
        let err = SolutionProgram::from_flat(&["add", "mul", "N_0"], &reg, &p, cal, ParseMode::Strict);
        assert!(matches!(err, Err(ProgramError::OperatorInArgPosition(_))));
        let err = SolutionProgram::from_flat(
            &["mul", "#2", "N_0", "eos_operand", "eop"],
            &reg,
            &p,
            cal,
            ParseMode::Strict,
        );
        assert!(matches!(err, Err(ProgramError::CacheTokenForwardReference { .. })));
        let err = SolutionProgram::from_flat(&["add", "N_0", "eos_operand"], &reg, &p, cal, ParseMode::Strict);
        assert_eq!(err, Err(ProgramError::Truncated));
        let err = SolutionProgram::from_flat(&["add", "N_7", "eos_operand", "eop"], &reg, &p, cal, ParseMode::Strict);
        assert!(matches!(err, Err(ProgramError::UnknownSymbol(_))));
        let err = SolutionProgram::from_flat(&["congruent", "N_0", "eos_operand", "eop"], &reg, &p, cal, ParseMode::Strict);
        assert!(matches!(err, Err(ProgramError::OutsideTypeVocabulary(_))));
        let err = SolutionProgram::from_flat(&["add", "eos_operand", "eop"], &reg, &p, cal, ParseMode::Strict);
        assert_eq!(err, Err(ProgramError::NoOperands(0)));
        let empty: [&str; 0] = [];
        assert_eq!(
            SolutionProgram::from_flat(&empty, &reg, &p, cal, ParseMode::Strict),
            Err(ProgramError::Empty)
        );
    }

    #[test]
    fn canonical_equality() {
        let (reg, p, cal) = setup("a 3 b 5");
        let parse = |t: &[&str]| SolutionProgram::from_flat(t, &reg, &p, cal, ParseMode::Strict).unwrap();
        let a = parse(&["add", "N_0", "N_1", "eos_operand", "mul", "#0", "N_0", "eos_operand", "eop"]);
        let alias = parse(&["add", "N_0", "N_1", "eos_operand", "mul", "V_0", "N_0", "eos_operand", "eop"]);
        assert!(canonical_equal(&a, &a));
        assert!(canonical_equal(&a, &alias));
        let x = parse(&["add", "N_0", "N_1", "eos_operand", "eop"]);
        let y = parse(&["add", "N_1", "N_0", "eos_operand", "eop"]);
        assert!(!canonical_equal(&x, &y));
    }

    #[test]
    fn execution_examples() {
        let (reg, p, cal) = setup("r 3 s 5");
        let parse = |t: &[&str]| SolutionProgram::from_flat(t, &reg, &p, cal, ParseMode::Strict).unwrap();
        let sq = parse(&["mul", "N_0", "N_0", "eos_operand", "eop"]);
        assert_eq!(execute_cal(&sq, &reg, &[3.0]).unwrap().value, 9.0);

        let area = parse(&["Circle_R_Area", "N_0", "eos_operand", "eop"]);
        let v = execute_cal(&area, &reg, &[2.0]).unwrap().value;
        assert!((v - 3.141593 * 4.0).abs() < 1e-12);
        assert!((v - 12.566372).abs() < 1e-9);

        let mean = parse(&["add", "N_0", "N_1", "eos_operand", "div", "#0", "C_2", "eos_operand", "eop"]);
        assert_eq!(execute_cal(&mean, &reg, &[3.0, 5.0]).unwrap().value, 4.0);
    }

    #[test]
    fn execution_errors() {
        let reg = DslRegistry::default_registry();
        let p = preprocess("x 3 y 0 in triangle A B C", &[]);
        let cal = reg.type_by_name("cal").unwrap();
        let prv = reg.type_by_name("prv").unwrap();
        let parse = |t: &[&str], ty| SolutionProgram::from_flat(t, &reg, &p, ty, ParseMode::Strict).unwrap();
        let dz = parse(&["div", "N_0", "N_1", "eos_operand", "eop"], cal);
        assert_eq!(execute_cal(&dz, &reg, &[3.0, 0.0]), Err(ExecError::DivisionByZero(0)));
        assert!(matches!(execute_cal(&dz, &reg, &[3.0]), Err(ExecError::UnboundOperand(_))));
        let thm = parse(&["R_1", "E_0", "eos_operand", "eop"], prv);
        assert!(matches!(
            execute_cal(&thm, &reg, &[3.0, 0.0]),
            Err(ExecError::UnboundOperand(_)) | Err(ExecError::NonExecutableOperator(_))
        ));
    }

    #[test]
    fn theorem_tags_are_not_executable() {
        let reg = DslRegistry::default_registry();
        let p = preprocess("the value is 3", &[]);
        let prv = reg.type_by_name("prv").unwrap();
        let prog = SolutionProgram {
            subs: vec![SubProgram { op: reg.lookup("R_1").unwrap(), args: vec![SymbolId(reg.num_static())] }],
            problem_type: prv,
        };
        assert_eq!(prog.validate(&reg, &p), Ok(()));
        assert_eq!(
            execute_cal(&prog, &reg, &[3.0]),
            Err(ExecError::NonExecutableOperator("R_1".into()))
        );
    }

    #[test]
    fn histograms() {
        let (reg, p, cal) = setup("a 3 b 5");
        let prog = SolutionProgram::from_flat(&["add", "N_0", "N_1", "eos_operand", "eop"], &reg, &p, cal, ParseMode::Strict)
            .unwrap();
        assert_eq!(program_operand_histogram([&prog]), BTreeMap::from([(2, 1)]));
        assert!(program_operand_histogram(std::iter::empty()).is_empty());
    }

    #[test]
    fn error_attribution() {
        let g = vec![
            NestedSub { op: "add".into(), args: vec!["N_0".into(), "N_1".into()] },
            NestedSub { op: "mul".into(), args: vec!["#0".into(), "N_2".into()] },
        ];
        let mut p = g.clone();
        p[1].args[1] = "N_0".into();
        assert_eq!(attribute_nested_error(&p, &g), Some(ErrorKind::WrongOperand));
        let mut p = g.clone();
        p[1].op = "div".into();
        assert_eq!(attribute_nested_error(&p, &g), Some(ErrorKind::WrongOperator));
        let p = vec![g[0].clone()];
        assert_eq!(attribute_nested_error(&p, &g), Some(ErrorKind::WrongOperator));
        let mut p = g.clone();
        p[0].args.pop();
        assert_eq!(attribute_nested_error(&p, &g), Some(ErrorKind::WrongOperand));
        assert_eq!(attribute_nested_error(&g, &g), None);
    }

    #[test]
    fn flat_text_segmentation() {
        let t = ProgramText::Flat(flat(&["add", "N_0", "V_0", "eos_operand", "eop"]));
        let n = t.to_nested(|s| s == "add");
        assert_eq!(n, vec![NestedSub { op: "add".into(), args: vec!["N_0".into(), "#0".into()] }]);
    }
}
