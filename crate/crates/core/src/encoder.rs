//! Problem preprocessing and the joint text/diagram encoder.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{GruCell, ParamId, ParamStore, Tape, Tensor, Var};
use crate::program::SolutionProgram;
use crate::registry::TypeId;

pub const SEP: &str = "<sep>";
pub const UNK: &str = "<unk>";
pub const NUM: &str = "<num>";

const GLYPHS: [(char, &str); 4] = [
    ('△', "triangle"),
    ('∠', "angle"),
    ('⊙', "circle"),
    ('∥', "parallel"),
];

const TERMINOLOGY: [&str; 7] = [
    "triangle",
    "angle",
    "circle",
    "parallel",
    "line",
    "arc",
    "quadrilateral",
];

const MAX_ELEMENT_POINTS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedProblem {
    pub id: String,
    pub tokens: Vec<String>,
    /// `(token index, value)` per number, in order of appearance.
    pub number_spans: Vec<(usize, f64)>,
    /// Half-open token ranges over the appended element phrases.
    pub element_spans: Vec<(usize, usize)>,
    pub patches: Vec<Vec<f64>>,
    pub problem_type: Option<TypeId>,
    pub gold: Option<SolutionProgram>,
}

impl PreprocessedProblem {
    pub fn num_numbers(&self) -> usize {
        self.number_spans.len()
    }

    pub fn num_elements(&self) -> usize {
        self.element_spans.len()
    }

    pub fn num_dynamic(&self) -> usize {
        self.num_numbers() + self.num_elements()
    }

    pub fn number_values(&self) -> Vec<f64> {
        self.number_spans.iter().map(|&(_, v)| v).collect()
    }

    /// Tokens before the separator.
    pub fn main_tokens(&self) -> &[String] {
        let end = self
            .tokens
            .iter()
            .position(|t| t == SEP)
            .unwrap_or(self.tokens.len());
        &self.tokens[..end]
    }
}

pub fn parse_number(token: &str) -> Option<f64> {
    let mut chars = token.chars();
    if !chars.next().is_some_and(|c| c.is_ascii_digit()) {
        return None;
    }
    token.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn is_point(token: &str) -> bool {
    token.len() == 1 && token.bytes().all(|b| b.is_ascii_uppercase())
}

fn tokenize(text: &str) -> Vec<String> {
    let mut expanded = String::with_capacity(text.len() + 16);
    for c in text.chars() {
        match GLYPHS.iter().find(|(g, _)| *g == c) {
            Some((_, word)) => {
                expanded.push(' ');
                expanded.push_str(word);
                expanded.push(' ');
            }
            None => expanded.push(c),
        }
    }

    let chars: Vec<char> = expanded.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            tokens.push(chars[start..i].iter().collect());
        } else if c.is_alphabetic() {
            let start = i;
            while i < chars.len() && (chars[i].is_alphabetic() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            let points = word.chars().count();
            if (2..=MAX_ELEMENT_POINTS).contains(&points) && word.chars().all(|c| c.is_ascii_uppercase()) {
                tokens.extend(word.chars().map(String::from));
            } else {
                tokens.push(word);
            }
        } else {
            tokens.push(c.to_string());
            i += 1;
        }
    }
    tokens
}

/// Glyph replacement, tokenisation with isolated numbers, and element
/// enhancement: every distinct element phrase (terminology word plus 1–4 point
/// letters) is appended once after `<sep>`, in order of first appearance.
pub fn preprocess(raw_text: &str, raw_patches: &[Vec<f64>]) -> PreprocessedProblem {
    let mut tokens = tokenize(raw_text);

    let number_spans = tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| parse_number(t).map(|v| (i, v)))
        .collect();

    let mut phrases: Vec<Vec<String>> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let word = tokens[i].to_lowercase();
        if TERMINOLOGY.contains(&word.as_str()) {
            let pts = tokens[i + 1..]
                .iter()
                .take(MAX_ELEMENT_POINTS)
                .take_while(|t| is_point(t))
                .count();
            if pts > 0 {
                let mut phrase = vec![word];
                phrase.extend(tokens[i + 1..i + 1 + pts].iter().cloned());
                if !phrases.contains(&phrase) {
                    phrases.push(phrase);
                }
                i += 1 + pts;
                continue;
            }
        }
        i += 1;
    }

    let mut element_spans = Vec::with_capacity(phrases.len());
    if !phrases.is_empty() {
        tokens.push(SEP.to_string());
        for phrase in phrases {
            let start = tokens.len();
            tokens.extend(phrase);
            element_spans.push((start, tokens.len()));
        }
    }

    PreprocessedProblem {
        id: String::new(),
        tokens,
        number_spans,
        element_spans,
        patches: raw_patches.to_vec(),
        problem_type: None,
        gold: None,
    }
}

/// Token vocabulary. Numeric tokens share the `<num>` entry; unseen tokens map
/// to `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TextVocab {
    pub fn new() -> Self {
        Self::from_tokens(vec![UNK.into(), SEP.into(), NUM.into()])
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Vocabulary over every token in `problems`, in order of first appearance.
    pub fn build<'a>(problems: impl IntoIterator<Item = &'a PreprocessedProblem>) -> Self {
        let mut v = Self::new();
        for p in problems {
            for t in &p.tokens {
                let key = Self::key(t);
                if !v.index.contains_key(key) {
                    v.index.insert(key.to_string(), v.tokens.len());
                    v.tokens.push(key.to_string());
                }
            }
        }
        v
    }

    fn key(token: &str) -> &str {
        if parse_number(token).is_some() {
            NUM
        } else {
            token
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(Self::key(token)).copied().unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

impl Default for TextVocab {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: ParamId,
    pub patch_projection: ParamId,
    pub patch_bias: ParamId,
    /// `(forward, backward)` cells per layer, each with hidden size h/2.
    pub layers: Vec<(GruCell, GruCell)>,
    pub hidden: usize,
    pub patch_dim: usize,
}

impl EncoderParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        hidden: usize,
        layers: usize,
        patch_dim: usize,
        rng: &mut R,
    ) -> Self {
        let token_embedding = store.add(
            "encoder.token_embedding",
            Tensor::uniform(vocab_size, hidden, 0.5, rng),
        );
        let patch_projection = store.add(
            "encoder.patch_projection",
            Tensor::uniform(patch_dim, hidden, (1.0 / patch_dim as f64).sqrt(), rng),
        );
        let patch_bias = store.add("encoder.patch_bias", Tensor::zeros(1, hidden));
        let half = hidden / 2;
        let layers = (0..layers)
            .map(|l| {
                let f = GruCell::register(store, &format!("encoder.layer{l}.fwd"), hidden, half, rng);
                let b = GruCell::register(store, &format!("encoder.layer{l}.bwd"), hidden, half, rng);
                (f, b)
            })
            .collect();
        Self {
            token_embedding,
            patch_projection,
            patch_bias,
            layers,
            hidden,
            patch_dim,
        }
    }
}

/// Contextual rows: text positions first, then diagram patches.
#[derive(Debug, Clone, Copy)]
pub struct JointRepresentation {
    pub h: Var,
    pub text_len: usize,
    pub patch_len: usize,
}

impl JointRepresentation {
    pub fn rows(&self) -> usize {
        self.text_len + self.patch_len
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncodeError {
    #[error("patch {index} has dimension {got}, expected {expected}")]
    PatchDimension {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("problem has no text tokens")]
    EmptyText,
    #[error("span {start}..{end} outside {rows} rows")]
    SpanOutOfRange { start: usize, end: usize, rows: usize },
}

/// Embedding inputs before contextualisation: token rows then projected patches.
pub fn embed_inputs(
    tape: &mut Tape<'_>,
    params: &EncoderParams,
    vocab: &TextVocab,
    problem: &PreprocessedProblem,
) -> Result<Var, EncodeError> {
    if problem.tokens.is_empty() {
        return Err(EncodeError::EmptyText);
    }
    for (index, p) in problem.patches.iter().enumerate() {
        if p.len() != params.patch_dim {
            return Err(EncodeError::PatchDimension {
                index,
                got: p.len(),
                expected: params.patch_dim,
            });
        }
    }
    let table = tape.param(params.token_embedding);
    let text = tape.gather_rows(table, &vocab.encode(&problem.tokens));
    if problem.patches.is_empty() {
        return Ok(text);
    }
    let raw = Tensor::from_rows(&problem.patches).expect("checked dims");
    let raw = tape.constant(raw);
    let w = tape.param(params.patch_projection);
    let b = tape.param(params.patch_bias);
    let proj = tape.matmul(raw, w);
    let patches = tape.add_row(proj, b);
    Ok(tape.vconcat(text, patches))
}

/// Contextualises text and patch embeddings with stacked bidirectional
/// recurrent layers over the joint sequence.
pub fn encode(
    tape: &mut Tape<'_>,
    params: &EncoderParams,
    vocab: &TextVocab,
    problem: &PreprocessedProblem,
) -> Result<JointRepresentation, EncodeError> {
    let mut x = embed_inputs(tape, params, vocab, problem)?;
    for (fwd, bwd) in &params.layers {
        let f = fwd.run(tape, x, false);
        let b = bwd.run(tape, x, true);
        x = tape.concat(f, b);
    }
    Ok(JointRepresentation {
        h: x,
        text_len: problem.tokens.len(),
        patch_len: problem.patches.len(),
    })
}

/// One vector per dynamic symbol: the H row of each number token, then the
/// mean of H over each appended element span.
pub fn element_value_vectors(
    tape: &mut Tape<'_>,
    rep: &JointRepresentation,
    problem: &PreprocessedProblem,
) -> Result<Vec<Var>, EncodeError> {
    let rows = rep.text_len;
    let mut out = Vec::with_capacity(problem.num_dynamic());
    for &(idx, _) in &problem.number_spans {
        if idx >= rows {
            return Err(EncodeError::SpanOutOfRange { start: idx, end: idx + 1, rows });
        }
        out.push(tape.row(rep.h, idx));
    }
    for &(start, end) in &problem.element_spans {
        if start >= end || end > rows {
            return Err(EncodeError::SpanOutOfRange { start, end, rows });
        }
        out.push(tape.mean_rows(rep.h, start, end));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(p: &PreprocessedProblem) -> Vec<&str> {
        p.tokens.iter().map(String::as_str).collect()
    }

    #[test]
    fn glyphs_and_enhancement() {
        let p = preprocess("In △SUW, ∠SUW = 30", &[]);
        assert_eq!(
            toks(&p),
            [
                "In", "triangle", "S", "U", "W", ",", "angle", "S", "U", "W", "=", "30", SEP,
                "triangle", "S", "U", "W", "angle", "S", "U", "W"
            ]
        );
        assert_eq!(p.number_spans, vec![(11, 30.0)]);
        assert_eq!(p.element_spans, vec![(13, 17), (17, 21)]);
    }

    #[test]
    fn numbers_without_elements() {
        let p = preprocess("the radius is 5 and the arc is 30", &[]);
        let values: Vec<f64> = p.number_values();
        assert_eq!(values, vec![5.0, 30.0]);
        assert!(p.element_spans.is_empty());
        assert!(!p.tokens.iter().any(|t| t == SEP));
    }

    #[test]
    fn decimals_stay_single_tokens() {
        let p = preprocess("side 2.5 cm, angle 30°.", &[]);
        assert_eq!(p.number_values(), vec![2.5, 30.0]);
        assert!(p.tokens.contains(&"°".to_string()));
    }

    #[test]
    fn repeated_elements_appended_once() {
        let p = preprocess("△ABC and △ABC and line AB", &[]);
        assert_eq!(p.element_spans.len(), 2);
    }

    #[test]
    fn idempotent_on_main_text() {
        let p = preprocess("In △SUW, ∠SUW = 30 and 4.5", &[]);
        let again = preprocess(&p.main_tokens().join(" "), &[]);
        assert_eq!(again.tokens, p.tokens);
        assert_eq!(again.number_spans, p.number_spans);
        assert_eq!(again.element_spans, p.element_spans);
    }

    #[test]
    fn vocab_maps_numbers_and_unknowns() {
        let p = preprocess("find 3 and 4", &[]);
        let v = TextVocab::build([&p]);
        assert_eq!(v.id("17"), v.id(NUM));
        assert_eq!(v.id("never-seen"), 0);
        assert_eq!(v.id("find"), 3);
    }

    fn setup(patch_dim: usize) -> (ParamStore, EncoderParams, TextVocab) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = preprocess("In △ABC, AB = 3 and BC = 4.5", &[]);
        let vocab = TextVocab::build([&p]);
        let enc = EncoderParams::register(&mut store, vocab.len(), 6, 2, patch_dim, &mut rng);
        (store, enc, vocab)
    }

    #[test]
    fn no_patches_gives_text_rows_only() {
        let (store, enc, vocab) = setup(4);
        let p = preprocess("In △ABC, AB = 3", &[]);
        let mut tape = Tape::new(&store);
        let rep = encode(&mut tape, &enc, &vocab, &p).unwrap();
        assert_eq!(tape.shape(rep.h), (p.tokens.len(), 6));
        assert_eq!(rep.patch_len, 0);
    }

    #[test]
    fn patch_dimension_checked() {
        let (store, enc, vocab) = setup(4);
        let p = preprocess("AB = 3", &[vec![0.0; 3]]);
        let mut tape = Tape::new(&store);
        assert!(matches!(
            encode(&mut tape, &enc, &vocab, &p),
            Err(EncodeError::PatchDimension { got: 3, expected: 4, .. })
        ));
    }

    #[test]
    fn patch_projection_is_position_independent() {
        let (store, enc, vocab) = setup(3);
        let a = vec![0.1, -0.5, 0.7];
        let b = vec![1.0, 0.2, -0.3];
        let p1 = preprocess("AB = 3", &[a.clone(), b.clone()]);
        let p2 = preprocess("AB = 3", &[b, a]);
        let mut tape = Tape::new(&store);
        let x1 = embed_inputs(&mut tape, &enc, &vocab, &p1).unwrap();
        let x2 = embed_inputs(&mut tape, &enc, &vocab, &p2).unwrap();
        let n = p1.tokens.len();
        let (t1, t2) = (tape.value(x1), tape.value(x2));
        assert_eq!(t1.row(n), t2.row(n + 1));
        assert_eq!(t1.row(n + 1), t2.row(n));
    }

    #[test]
    fn element_vectors_are_rows_and_span_means() {
        let (store, enc, vocab) = setup(4);
        let p = preprocess("In △ABC , AB = 3", &[vec![0.0; 4]]);
        let mut tape = Tape::new(&store);
        let rep = encode(&mut tape, &enc, &vocab, &p).unwrap();
        let vs = element_value_vectors(&mut tape, &rep, &p).unwrap();
        assert_eq!(vs.len(), 2);
        let h = tape.value(rep.h).clone();
        let (idx, _) = p.number_spans[0];
        assert_eq!(tape.value(vs[0]).data(), h.row(idx));
        let (s, e) = p.element_spans[0];
        assert_eq!(e - s, 4);
        for c in 0..6 {
            let direct = (s..e).map(|r| h.get(r, c)).sum::<f64>() / 4.0;
            assert!((tape.value(vs[1]).get(0, c) - direct).abs() < 1e-12);
        }
    }
}
