//! Decoding vocabulary: operators, constants, cache tokens and control tokens,
//! partitioned by problem type, plus per-problem dynamic symbols.
//!
//! Static symbols occupy ids `0..num_static()` in the order operators,
//! constants, cache tokens, controls. Dynamic symbols of a problem follow:
//! numbers `N_0..` first, then elements `E_0..`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::PreprocessedProblem;

pub const SOS: &str = "sos";
pub const EOS_OPERAND: &str = "eos_operand";
pub const EOP: &str = "eop";

static DEFAULT_REGISTRY: &str = include_str!("../assets/default_registry.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SymbolId(pub usize);

impl fmt::Display for SymbolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TypeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolKind {
    Operator,
    Constant,
    CacheToken,
    Control,
    DynamicNumber,
    DynamicElement,
}

impl SymbolKind {
    pub fn is_operand(self) -> bool {
        matches!(
            self,
            Self::Constant | Self::CacheToken | Self::DynamicNumber | Self::DynamicElement
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolEntry {
    pub surface: String,
    pub kind: SymbolKind,
    /// Problem types the symbol belongs to; empty for type-agnostic symbols
    /// (controls, cache tokens, dynamics).
    pub types: Vec<TypeId>,
    pub constant_value: Option<f64>,
    /// Arity bounds, operators only.
    pub arity: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProblemType {
    pub name: String,
    pub id: TypeId,
}

/// Allowed-symbol vector over the static table plus the problem's dynamic slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolMask {
    allowed: Vec<bool>,
}

impl SymbolMask {
    pub fn new(allowed: Vec<bool>) -> Self {
        Self { allowed }
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn allows(&self, id: SymbolId) -> bool {
        self.allowed.get(id.0).copied().unwrap_or(false)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn allowed_ids(&self) -> impl Iterator<Item = SymbolId> + '_ {
        self.allowed
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| SymbolId(i))
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorDoc {
    pub surface: String,
    pub types: Vec<String>,
    pub min_args: usize,
    pub max_args: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantDoc {
    pub surface: String,
    pub value: f64,
    /// Defaults to every type when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub types: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_op: usize,
    pub max_oe: usize,
}

/// The registry document as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryDoc {
    pub types: Vec<String>,
    pub operators: Vec<OperatorDoc>,
    #[serde(default)]
    pub constants: Vec<ConstantDoc>,
    pub limits: Limits,
}

impl RegistryDoc {
    pub fn default_doc() -> Self {
        serde_json::from_str(DEFAULT_REGISTRY).expect("bundled registry parses")
    }

    pub fn from_json(text: &str) -> Result<Self, RegistryError> {
        serde_json::from_str(text).map_err(|e| RegistryError::Malformed(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RegistryError::Malformed(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("malformed registry document: {0}")]
    Malformed(String),
    #[error("duplicate symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("operator `{0}` has an empty type set")]
    EmptyTypeSet(String),
    #[error("operator `{surface}` has invalid arity bounds {min}..={max}")]
    InvalidArity {
        surface: String,
        min: usize,
        max: usize,
    },
    #[error("unknown problem type `{0}`")]
    UnknownType(String),
    #[error("surface `{0}` is reserved")]
    ReservedSurface(String),
    #[error("limits must be positive")]
    InvalidLimits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DslRegistry {
    doc: RegistryDoc,
    types: Vec<ProblemType>,
    symbols: Vec<SymbolEntry>,
    by_surface: HashMap<String, SymbolId>,
    operators_by_type: Vec<Vec<SymbolId>>,
    cache: Vec<SymbolId>,
    sos: SymbolId,
    eos_operand: SymbolId,
    eop: SymbolId,
}

fn is_reserved(surface: &str) -> bool {
    let indexed = |prefix: &str| {
        surface
            .strip_prefix(prefix)
            .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
    };
    [SOS, EOS_OPERAND, EOP].contains(&surface)
        || indexed("#")
        || indexed("V_")
        || indexed("N_")
        || indexed("E_")
}

impl DslRegistry {
    pub fn build(doc: RegistryDoc) -> Result<Self, RegistryError> {
        if doc.limits.max_op == 0 || doc.limits.max_oe == 0 {
            return Err(RegistryError::InvalidLimits);
        }
        let mut types = Vec::with_capacity(doc.types.len());
        for (i, name) in doc.types.iter().enumerate() {
            if types.iter().any(|t: &ProblemType| &t.name == name) {
                return Err(RegistryError::DuplicateSymbol(name.clone()));
            }
            types.push(ProblemType {
                name: name.clone(),
                id: TypeId(i),
            });
        }
        let type_id = |name: &str| {
            types
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.id)
                .ok_or_else(|| RegistryError::UnknownType(name.to_string()))
        };

        let mut symbols = Vec::new();
        for op in &doc.operators {
            if op.types.is_empty() {
                return Err(RegistryError::EmptyTypeSet(op.surface.clone()));
            }
            if op.min_args < 1 || op.max_args < op.min_args {
                return Err(RegistryError::InvalidArity {
                    surface: op.surface.clone(),
                    min: op.min_args,
                    max: op.max_args,
                });
            }
            let mut ts = op.types.iter().map(|t| type_id(t)).collect::<Result<Vec<_>, _>>()?;
            ts.sort();
            ts.dedup();
            symbols.push(SymbolEntry {
                surface: op.surface.clone(),
                kind: SymbolKind::Operator,
                types: ts,
                constant_value: None,
                arity: Some((op.min_args, op.max_args)),
            });
        }
        for c in &doc.constants {
            let mut ts = match &c.types {
                Some(names) if names.is_empty() => {
                    return Err(RegistryError::EmptyTypeSet(c.surface.clone()))
                }
                Some(names) => names.iter().map(|t| type_id(t)).collect::<Result<Vec<_>, _>>()?,
                None => types.iter().map(|t| t.id).collect(),
            };
            ts.sort();
            ts.dedup();
            symbols.push(SymbolEntry {
                surface: c.surface.clone(),
                kind: SymbolKind::Constant,
                types: ts,
                constant_value: Some(c.value),
                arity: None,
            });
        }
        for s in &symbols {
            if is_reserved(&s.surface) {
                return Err(RegistryError::ReservedSurface(s.surface.clone()));
            }
        }
        let cache_start = symbols.len();
        for j in 0..doc.limits.max_op {
            symbols.push(SymbolEntry {
                surface: format!("#{j}"),
                kind: SymbolKind::CacheToken,
                types: Vec::new(),
                constant_value: None,
                arity: None,
            });
        }
        for surface in [SOS, EOS_OPERAND, EOP] {
            symbols.push(SymbolEntry {
                surface: surface.to_string(),
                kind: SymbolKind::Control,
                types: Vec::new(),
                constant_value: None,
                arity: None,
            });
        }

        let mut by_surface = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if by_surface.insert(s.surface.clone(), SymbolId(i)).is_some() {
                return Err(RegistryError::DuplicateSymbol(s.surface.clone()));
            }
        }
        let mut operators_by_type = vec![Vec::new(); types.len()];
        for (i, s) in symbols.iter().enumerate() {
            if s.kind == SymbolKind::Operator {
                for t in &s.types {
                    operators_by_type[t.0].push(SymbolId(i));
                }
            }
        }
        let cache = (cache_start..cache_start + doc.limits.max_op).map(SymbolId).collect();
        let n = symbols.len();
        Ok(Self {
            doc,
            types,
            symbols,
            by_surface,
            operators_by_type,
            cache,
            sos: SymbolId(n - 3),
            eos_operand: SymbolId(n - 2),
            eop: SymbolId(n - 1),
        })
    }

    pub fn default_registry() -> Self {
        Self::build(RegistryDoc::default_doc()).expect("bundled registry is valid")
    }

    pub fn doc(&self) -> &RegistryDoc {
        &self.doc
    }

    pub fn limits(&self) -> Limits {
        self.doc.limits
    }

    pub fn types(&self) -> &[ProblemType] {
        &self.types
    }

    pub fn type_by_name(&self, name: &str) -> Result<TypeId, RegistryError> {
        self.types
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.id)
            .ok_or_else(|| RegistryError::UnknownType(name.to_string()))
    }

    pub fn type_name(&self, t: TypeId) -> &str {
        &self.types[t.0].name
    }

    pub fn num_static(&self) -> usize {
        self.symbols.len()
    }

    pub fn entry(&self, id: SymbolId) -> Option<&SymbolEntry> {
        self.symbols.get(id.0)
    }

    pub fn statics(&self) -> &[SymbolEntry] {
        &self.symbols
    }

    pub fn operators_of(&self, t: TypeId) -> &[SymbolId] {
        &self.operators_by_type[t.0]
    }

    pub fn operators(&self) -> impl Iterator<Item = SymbolId> + '_ {
        self.symbols
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == SymbolKind::Operator)
            .map(|(i, _)| SymbolId(i))
    }

    pub fn constants(&self) -> impl Iterator<Item = SymbolId> + '_ {
        self.symbols
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == SymbolKind::Constant)
            .map(|(i, _)| SymbolId(i))
    }

    pub fn cache_token(&self, j: usize) -> Option<SymbolId> {
        self.cache.get(j).copied()
    }

    /// Index `j` when `id` is the cache token `#j`.
    pub fn cache_index(&self, id: SymbolId) -> Option<usize> {
        let first = self.cache.first()?.0;
        (id.0 >= first && id.0 < first + self.cache.len()).then(|| id.0 - first)
    }

    pub fn sos(&self) -> SymbolId {
        self.sos
    }

    pub fn eos_operand(&self) -> SymbolId {
        self.eos_operand
    }

    pub fn eop(&self) -> SymbolId {
        self.eop
    }

    /// Static lookup. `V_i` is accepted as an alias for the cache token `#i`.
    pub fn lookup(&self, surface: &str) -> Option<SymbolId> {
        if let Some(id) = self.by_surface.get(surface) {
            return Some(*id);
        }
        let j: usize = surface.strip_prefix("V_")?.parse().ok()?;
        self.cache_token(j)
    }

    /// Lookup including the problem's dynamic symbols.
    pub fn resolve(&self, surface: &str, problem: &PreprocessedProblem) -> Option<SymbolId> {
        if let Some(id) = self.lookup(surface) {
            return Some(id);
        }
        let n = self.num_static();
        let (nums, elems) = (problem.num_numbers(), problem.num_elements());
        if let Some(k) = surface.strip_prefix("N_").and_then(|s| s.parse::<usize>().ok()) {
            return (k < nums).then_some(SymbolId(n + k));
        }
        if let Some(k) = surface.strip_prefix("E_").and_then(|s| s.parse::<usize>().ok()) {
            return (k < elems).then_some(SymbolId(n + nums + k));
        }
        None
    }

    pub fn kind(&self, id: SymbolId, problem: &PreprocessedProblem) -> Option<SymbolKind> {
        if let Some(e) = self.symbols.get(id.0) {
            return Some(e.kind);
        }
        let k = id.0 - self.num_static();
        let nums = problem.num_numbers();
        if k < nums {
            Some(SymbolKind::DynamicNumber)
        } else if k < nums + problem.num_elements() {
            Some(SymbolKind::DynamicElement)
        } else {
            None
        }
    }

    pub fn surface(&self, id: SymbolId, problem: &PreprocessedProblem) -> Option<String> {
        if let Some(e) = self.symbols.get(id.0) {
            return Some(e.surface.clone());
        }
        let k = id.0 - self.num_static();
        let nums = problem.num_numbers();
        if k < nums {
            Some(format!("N_{k}"))
        } else if k < nums + problem.num_elements() {
            Some(format!("E_{}", k - nums))
        } else {
            None
        }
    }

    /// Every surface of the decode vocabulary for `problem`, in id order.
    pub fn surfaces(&self, problem: &PreprocessedProblem) -> Vec<String> {
        (0..self.vocab_size(problem))
            .map(|i| self.surface(SymbolId(i), problem).expect("in range"))
            .collect()
    }

    pub fn vocab_size(&self, problem: &PreprocessedProblem) -> usize {
        self.num_static() + problem.num_dynamic()
    }

    /// Per-problem symbols: one per extracted number, then one per element.
    pub fn dynamic_symbols(&self, problem: &PreprocessedProblem) -> Vec<SymbolEntry> {
        let numbers = problem.number_spans.iter().enumerate().map(|(k, &(_, v))| SymbolEntry {
            surface: format!("N_{k}"),
            kind: SymbolKind::DynamicNumber,
            types: Vec::new(),
            constant_value: Some(v),
            arity: None,
        });
        let elements = (0..problem.num_elements()).map(|k| SymbolEntry {
            surface: format!("E_{k}"),
            kind: SymbolKind::DynamicElement,
            types: Vec::new(),
            constant_value: None,
            arity: None,
        });
        numbers.chain(elements).collect()
    }

    /// Allows the type's own symbols, controls, cache tokens and every dynamic
    /// symbol of the problem.
    pub fn type_mask(&self, t: TypeId, problem: &PreprocessedProblem) -> Result<SymbolMask, RegistryError> {
        if t.0 >= self.types.len() {
            return Err(RegistryError::UnknownType(format!("id {}", t.0)));
        }
        let mut allowed: Vec<bool> = self
            .symbols
            .iter()
            .map(|s| match s.kind {
                SymbolKind::Control | SymbolKind::CacheToken => true,
                _ => s.types.contains(&t),
            })
            .collect();
        allowed.extend(std::iter::repeat(true).take(problem.num_dynamic()));
        Ok(SymbolMask::new(allowed))
    }
}
