//! Line-delimited JSON problem records.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{preprocess, PreprocessedProblem};
use crate::program::{ProgramError, ProgramText, SolutionProgram};
use crate::registry::DslRegistry;

/// One problem per line:
///
/// ```json
/// {"id": "p1", "type": "cal", "text": "the sum of 3 and 5",
///  "patches": [[0.1, 0.2]], "program": [{"op": "add", "args": ["N_0", "N_1"]}]}
/// ```
///
/// `program` may also be a flat token list; `patches` may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    #[serde(rename = "type")]
    pub problem_type: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub patches: Vec<Vec<f64>>,
    pub program: ProgramText,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("record `{id}`: unknown problem type `{name}`")]
    UnknownType { id: String, name: String },
    #[error("record `{id}`: unresolvable symbol `{surface}`")]
    UnresolvableSymbol { id: String, surface: String },
    #[error("record `{id}`: invalid program: {source}")]
    InvalidProgram { id: String, source: ProgramError },
    #[error("record `{id}`: empty text")]
    EmptyText { id: String },
}

/// Parses JSONL text; blank lines are skipped, line numbers are 1-based.
pub fn parse_records(text: &str) -> Result<Vec<DatasetRecord>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DataError::MalformedRecord {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_records(&text)
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialise");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&out).map_err(io_err)
}

/// Preprocesses the record and resolves its gold program against the
/// registry and the record's own dynamic symbols.
pub fn record_to_problem(record: &DatasetRecord, registry: &DslRegistry) -> Result<PreprocessedProblem, DataError> {
    if record.text.trim().is_empty() {
        return Err(DataError::EmptyText { id: record.id.clone() });
    }
    let t = registry
        .type_by_name(&record.problem_type)
        .map_err(|_| DataError::UnknownType {
            id: record.id.clone(),
            name: record.problem_type.clone(),
        })?;
    let mut problem = preprocess(&record.text, &record.patches);
    problem.id = record.id.clone();
    problem.problem_type = Some(t);
    let program = SolutionProgram::from_text(&record.program, registry, &problem, t).map_err(|e| match e {
        ProgramError::UnknownSymbol(surface) => DataError::UnresolvableSymbol {
            id: record.id.clone(),
            surface,
        },
        source => DataError::InvalidProgram {
            id: record.id.clone(),
            source,
        },
    })?;
    problem.gold = Some(program);
    Ok(problem)
}

pub fn load_dataset(path: &Path, registry: &DslRegistry) -> Result<Vec<PreprocessedProblem>, DataError> {
    read_records(path)?
        .iter()
        .map(|r| record_to_problem(r, registry))
        .collect()
}
