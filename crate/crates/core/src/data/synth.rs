//! Seeded synthetic corpus of templated calculation and proving problems.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{record_to_problem, DatasetRecord};
use crate::program::{execute_cal, NestedSub, ProgramText};
use crate::registry::DslRegistry;

pub const CAL_MARKERS: [&str; 3] = ["find", "compute", "calculate"];
pub const PRV_MARKERS: [&str; 2] = ["prove", "show"];

const ORDINALS: [&str; 4] = ["first", "second", "third", "fourth"];
const LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthProfile {
    pub cal_fraction: f64,
    /// Relative weights of 1, 2, 3 sub-programs.
    pub cal_lengths: Vec<f64>,
    /// Relative weights of 1..=4 sub-programs.
    pub prv_lengths: Vec<f64>,
    pub min_numbers: usize,
    pub max_numbers: usize,
    pub min_elements: usize,
    pub max_elements: usize,
    pub patches: usize,
    pub patch_dim: usize,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            cal_fraction: 0.5,
            cal_lengths: vec![1.0, 1.0, 1.0],
            prv_lengths: vec![1.0, 1.0, 1.0, 1.0],
            min_numbers: 2,
            max_numbers: 4,
            min_elements: 2,
            max_elements: 4,
            patches: 4,
            patch_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("n must be at least 1")]
    ZeroCount,
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("registry lacks type `{0}`")]
    MissingType(String),
    #[error("no templated operators for type `{0}` in the registry")]
    NoTemplates(String),
    #[error("could not draw a valid {0} problem")]
    Exhausted(String),
}

impl SynthProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidProfile(m.into()));
        if !(0.0..=1.0).contains(&self.cal_fraction) {
            return bad("cal_fraction must lie in [0, 1]");
        }
        for (name, w, cap) in [("cal_lengths", &self.cal_lengths, 3), ("prv_lengths", &self.prv_lengths, 4)] {
            if w.is_empty() || w.len() > cap || w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0
            {
                return bad(&format!("{name} needs 1..={cap} non-negative weights with a positive sum"));
            }
        }
        if self.min_numbers < 1 || self.min_numbers > self.max_numbers {
            return bad("number range is empty");
        }
        if self.min_elements < 1 || self.min_elements > self.max_elements || self.max_elements > 6 {
            return bad("element range must lie within 1..=6");
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum CalTemplate {
    Binary(&'static str),
    Square,
    CircleArea,
    Trig(&'static str),
}

fn cal_template(surface: &str) -> Option<CalTemplate> {
    Some(match surface {
        "add" => CalTemplate::Binary("sum"),
        "sub" => CalTemplate::Binary("difference"),
        "mul" => CalTemplate::Binary("product"),
        "div" => CalTemplate::Binary("quotient"),
        "pow" => CalTemplate::Square,
        "Circle_R_Area" => CalTemplate::CircleArea,
        "sin_deg" => CalTemplate::Trig("sine"),
        "cos_deg" => CalTemplate::Trig("cosine"),
        _ => return None,
    })
}

fn prv_phrase(surface: &str) -> Option<&'static str> {
    Some(match surface {
        "R_0" => "the midpoint rule",
        "R_1" => "vertical angles",
        "R_2" => "the angle sum",
        "R_3" => "alternate angles",
        "R_4" => "the isosceles rule",
        "R_5" => "inscribed angles",
        "R_6" => "the tangent rule",
        "R_7" => "pythagoras",
        "congruent" => "congruence",
        "similar" => "similarity",
        _ => return None,
    })
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

struct Vocabulary {
    cal: Vec<(String, CalTemplate)>,
    prv: Vec<(String, &'static str)>,
    has_two: bool,
}

fn vocabulary(registry: &DslRegistry) -> Result<Vocabulary, SynthError> {
    let ty = |n: &str| registry.type_by_name(n).map_err(|_| SynthError::MissingType(n.into()));
    let (cal_t, prv_t) = (ty("cal")?, ty("prv")?);
    let has_two = registry
        .lookup("C_2")
        .and_then(|id| registry.entry(id))
        .is_some_and(|e| e.types.contains(&cal_t));
    let surface = |id| registry.entry(id).map(|e| e.surface.clone()).unwrap_or_default();
    let cal: Vec<_> = registry
        .operators_of(cal_t)
        .iter()
        .map(|&id| surface(id))
        .filter_map(|s| cal_template(&s).map(|t| (s, t)))
        .filter(|(_, t)| has_two || !matches!(t, CalTemplate::Square))
        .collect();
    let prv: Vec<_> = registry
        .operators_of(prv_t)
        .iter()
        .map(|&id| surface(id))
        .filter_map(|s| prv_phrase(&s).map(|p| (s, p)))
        .collect();
    if cal.is_empty() {
        return Err(SynthError::NoTemplates("cal".into()));
    }
    if prv.is_empty() {
        return Err(SynthError::NoTemplates("prv".into()));
    }
    Ok(Vocabulary { cal, prv, has_two })
}

fn draw_value<R: Rng>(rng: &mut R, angle: bool) -> f64 {
    if angle {
        *[15.0, 30.0, 45.0, 60.0, 75.0, 90.0, 120.0].choose(rng).unwrap()
    } else if rng.gen_bool(0.2) {
        rng.gen_range(1..20) as f64 + 0.5
    } else {
        rng.gen_range(1..=20) as f64
    }
}

/// One CAL draw; `None` when the number count falls outside the profile.
fn draw_cal<R: Rng>(rng: &mut R, voc: &Vocabulary, profile: &SynthProfile) -> Option<(String, Vec<NestedSub>)> {
    let lengths = WeightedIndex::new(&profile.cal_lengths).ok()?;
    let subs = lengths.sample(rng) + 1;
    let mut numbers = 0usize;
    let mut phrases = Vec::with_capacity(subs);
    let mut program = Vec::with_capacity(subs);

    for t in 0..subs {
        let (surface, template) = voc.cal.choose(rng)?.clone();
        let slots = match template {
            CalTemplate::Binary(_) => 2,
            _ => 1,
        };
        let mut args = Vec::with_capacity(2);
        let mut words = Vec::with_capacity(2);
        for _ in 0..slots {
            if t > 0 && rng.gen_bool(0.5) {
                let j = rng.gen_range(0..t);
                args.push(format!("#{j}"));
                words.push(format!("the {} result", ORDINALS[j]));
            } else {
                let v = draw_value(rng, matches!(template, CalTemplate::Trig(_)));
                args.push(format!("N_{numbers}"));
                words.push(format_number(v));
                numbers += 1;
            }
        }
        let phrase = match template {
            CalTemplate::Binary(noun) => format!("the {noun} of {} and {}", words[0], words[1]),
            CalTemplate::Square => {
                args.push("C_2".into());
                format!("the square of {}", words[0])
            }
            CalTemplate::CircleArea => format!("the area of a circle with radius {}", words[0]),
            CalTemplate::Trig(f) => format!("the {f} of {} degrees", words[0]),
        };
        debug_assert!(voc.has_two || !matches!(template, CalTemplate::Square));
        phrases.push(phrase);
        program.push(NestedSub { op: surface, args });
    }
    if !(profile.min_numbers..=profile.max_numbers).contains(&numbers) {
        return None;
    }
    let marker = CAL_MARKERS.choose(rng)?;
    let text = format!("{marker} {} .", phrases.join(" , then "));
    Some((text, program))
}

fn draw_element<R: Rng>(rng: &mut R) -> String {
    let (word, points) = *[
        ("triangle", 3),
        ("angle", 3),
        ("line", 2),
        ("circle", 1),
        ("arc", 2),
        ("quadrilateral", 4),
    ]
    .choose(rng)
    .unwrap();
    let letters: Vec<char> = LETTERS
        .choose_multiple(rng, points)
        .map(|&b| b as char)
        .collect();
    // single-letter circles stay separated so they are not merged into a word
    let joined: String = letters.iter().collect();
    if points == 1 {
        format!("{word} {joined}")
    } else if word == "triangle" && rng.gen_bool(0.5) {
        format!("△{joined}")
    } else {
        format!("{word} {joined}")
    }
}

fn draw_prv<R: Rng>(rng: &mut R, voc: &Vocabulary, profile: &SynthProfile) -> Option<(String, Vec<NestedSub>)> {
    let count = rng.gen_range(profile.min_elements..=profile.max_elements);
    let mut elements: Vec<String> = Vec::with_capacity(count);
    let mut canonical: Vec<String> = Vec::with_capacity(count);
    while elements.len() < count {
        let e = draw_element(rng);
        let key = e.replace('△', "triangle ");
        if !canonical.contains(&key) {
            canonical.push(key);
            elements.push(e);
        }
    }
    let lengths = WeightedIndex::new(&profile.prv_lengths).ok()?;
    let steps = lengths.sample(rng) + 1;
    let mut phrases = Vec::with_capacity(steps);
    let mut program = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (surface, phrase) = voc.prv.choose(rng)?.clone();
        let k = rng.gen_range(0..count);
        phrases.push(format!("by {phrase} on {}", canonical[k]));
        program.push(NestedSub {
            op: surface,
            args: vec![format!("E_{k}")],
        });
    }
    let listed = match elements.split_last() {
        Some((last, rest)) if !rest.is_empty() => format!("{} and {last}", rest.join(" , ")),
        _ => elements.join(""),
    };
    let marker = PRV_MARKERS.choose(rng)?;
    let text = format!("given {listed} , {marker} the claim {} .", phrases.join(" , "));
    Some((text, program))
}

fn draw_patches<R: Rng>(rng: &mut R, type_index: usize, num_types: usize, profile: &SynthProfile) -> Vec<Vec<f64>> {
    (0..profile.patches)
        .map(|_| {
            (0..profile.patch_dim)
                .map(|d| {
                    let bias = if d % num_types.max(1) == type_index { 1.0 } else { 0.0 };
                    let v: f64 = bias + rng.gen_range(-0.5..0.5);
                    (v * 1e4).round() / 1e4
                })
                .collect()
        })
        .collect()
}

/// Deterministic in `(n, seed, registry, profile)`. The first
/// `round(n * cal_fraction)` slots are CAL before a seeded shuffle.
pub fn synth_generate(
    n: usize,
    seed: u64,
    registry: &DslRegistry,
    profile: &SynthProfile,
) -> Result<Vec<DatasetRecord>, SynthError> {
    if n == 0 {
        return Err(SynthError::ZeroCount);
    }
    profile.validate()?;
    let voc = vocabulary(registry)?;
    let cal_t = registry.type_by_name("cal").map_err(|_| SynthError::MissingType("cal".into()))?;
    let prv_t = registry.type_by_name("prv").map_err(|_| SynthError::MissingType("prv".into()))?;
    let num_types = registry.types().len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cal = (n as f64 * profile.cal_fraction).round() as usize;
    let mut kinds: Vec<bool> = (0..n).map(|i| i < n_cal).collect();
    kinds.shuffle(&mut rng);

    let mut out = Vec::with_capacity(n);
    for (i, is_cal) in kinds.into_iter().enumerate() {
        let id = format!("synth-{seed}-{i:05}");
        let (type_name, type_id) = if is_cal { ("cal", cal_t) } else { ("prv", prv_t) };
        let mut record = None;
        for _ in 0..MAX_ATTEMPTS {
            let drawn = if is_cal {
                draw_cal(&mut rng, &voc, profile)
            } else {
                draw_prv(&mut rng, &voc, profile)
            };
            let Some((text, program)) = drawn else { continue };
            let candidate = DatasetRecord {
                id: id.clone(),
                problem_type: type_name.into(),
                text,
                patches: Vec::new(),
                program: ProgramText::Nested(program),
            };
            let Ok(problem) = record_to_problem(&candidate, registry) else { continue };
            if is_cal {
                let gold = problem.gold.as_ref().expect("gold set by record_to_problem");
                if execute_cal(gold, registry, &problem.number_values()).is_err() {
                    continue;
                }
            }
            record = Some(candidate);
            break;
        }
        let mut record = record.ok_or_else(|| SynthError::Exhausted(type_name.into()))?;
        record.patches = draw_patches(&mut rng, type_id.0, num_types, profile);
        out.push(record);
    }
    Ok(out)
}
