//! Problem-type classifier over pooled text representations.

use rand::Rng;

use crate::encoder::{JointRepresentation, PreprocessedProblem};
use crate::numerics::{argmax, ParamId, ParamStore, Tape, Tensor, Var};
use crate::registry::{DslRegistry, RegistryError, SymbolMask, TypeId};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `c × h`
    pub w1: ParamId,
    pub num_types: usize,
}

impl ClassifierParams {
    pub fn register<R: Rng>(store: &mut ParamStore, num_types: usize, hidden: usize, rng: &mut R) -> Self {
        let w1 = store.add(
            "classifier.w1",
            Tensor::uniform(num_types, hidden, (1.0 / hidden as f64).sqrt(), rng),
        );
        Self { w1, num_types }
    }
}

/// One logit per problem type from the sum of the text rows of `H`; patch rows
/// do not take part.
pub fn type_logits(tape: &mut Tape<'_>, params: &ClassifierParams, rep: &JointRepresentation) -> Var {
    let pooled = tape.sum_rows(rep.h, 0, rep.text_len);
    let w1 = tape.param(params.w1);
    tape.matmul_t(pooled, w1)
}

/// Type distribution, one probability per type id.
pub fn classify(tape: &mut Tape<'_>, params: &ClassifierParams, rep: &JointRepresentation) -> Vec<f64> {
    let logits = type_logits(tape, params, rep);
    let probs = tape.softmax(logits);
    tape.value(probs).data().to_vec()
}

/// Most probable type; exact ties go to the lowest type id.
pub fn predict_type(probs: &[f64]) -> TypeId {
    TypeId(argmax(probs).unwrap_or(0))
}

/// Decoding mask for the override type when given, otherwise for the
/// classifier's prediction.
pub fn predict_mask(
    tape: &mut Tape<'_>,
    params: &ClassifierParams,
    rep: &JointRepresentation,
    registry: &DslRegistry,
    problem: &PreprocessedProblem,
    override_type: Option<TypeId>,
) -> Result<(TypeId, SymbolMask), RegistryError> {
    let t = match override_type {
        Some(t) => t,
        None => predict_type(&classify(tape, params, rep)),
    };
    Ok((t, registry.type_mask(t, problem)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::preprocess;

    fn rep_from(tape: &mut Tape<'_>, rows: Vec<Vec<f64>>, text_len: usize) -> JointRepresentation {
        let patch_len = rows.len() - text_len;
        let h = tape.constant(Tensor::from_rows(&rows).unwrap());
        JointRepresentation {
            h,
            text_len,
            patch_len,
        }
    }

    fn params_with(store: &mut ParamStore, w1: Tensor) -> ClassifierParams {
        let num_types = w1.rows();
        ClassifierParams {
            w1: store.add("classifier.w1", w1),
            num_types,
        }
    }

    #[test]
    fn zero_weights_give_uniform() {
        let mut store = ParamStore::new();
        let p = params_with(&mut store, Tensor::zeros(3, 2));
        let mut tape = Tape::inference(&store);
        let rep = rep_from(&mut tape, vec![vec![1.0, 2.0], vec![-3.0, 0.5]], 2);
        for q in classify(&mut tape, &p, &rep) {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_softmax() {
        // pooled text = [1, 0]; logits = [0, ln 3]
        let mut store = ParamStore::new();
        let w1 = Tensor::from_rows(&[vec![0.0, 0.0], vec![3f64.ln(), 0.0]]).unwrap();
        let p = params_with(&mut store, w1);
        let mut tape = Tape::inference(&store);
        let rep = rep_from(&mut tape, vec![vec![0.25, 0.0], vec![0.75, 0.0], vec![100.0, 9.0]], 2);
        let probs = classify(&mut tape, &p, &rep);
        assert!((probs[0] - 0.25).abs() < 1e-12);
        assert!((probs[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn doubling_text_rows_keeps_argmax() {
        let mut store = ParamStore::new();
        let w1 = Tensor::from_rows(&[vec![0.3, -0.2], vec![-0.1, 0.4]]).unwrap();
        let p = params_with(&mut store, w1);
        let mut tape = Tape::inference(&store);
        let rows = vec![vec![0.5, 1.0], vec![-0.2, 0.3]];
        let doubled: Vec<Vec<f64>> = rows.iter().chain(rows.iter()).cloned().collect();
        let a = rep_from(&mut tape, rows, 2);
        let b = rep_from(&mut tape, doubled, 4);
        let pa = classify(&mut tape, &p, &a);
        let pb = classify(&mut tape, &p, &b);
        assert_eq!(predict_type(&pa), predict_type(&pb));
    }

    #[test]
    fn ties_go_to_lowest_id() {
        assert_eq!(predict_type(&[0.5, 0.5]), TypeId(0));
    }

    #[test]
    fn override_beats_classifier() {
        let registry = DslRegistry::default_registry();
        let prv = registry.type_by_name("prv").unwrap();
        let cal = registry.type_by_name("cal").unwrap();
        let problem = preprocess("find 3 and 4", &[]);
        let mut store = ParamStore::new();
        // strongly favours cal
        let w1 = Tensor::from_rows(&[vec![50.0], vec![-50.0]]).unwrap();
        let p = params_with(&mut store, w1);
        let mut tape = Tape::inference(&store);
        let rep = rep_from(&mut tape, vec![vec![1.0]], 1);
        let (t, mask) = predict_mask(&mut tape, &p, &rep, &registry, &problem, Some(prv)).unwrap();
        assert_eq!(t, prv);
        assert_eq!(mask, registry.type_mask(prv, &problem).unwrap());
        let (t, mask) = predict_mask(&mut tape, &p, &rep, &registry, &problem, None).unwrap();
        assert_eq!(t, cal);
        assert_eq!(mask, registry.type_mask(cal, &problem).unwrap());
    }
}
