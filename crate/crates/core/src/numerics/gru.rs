use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use super::NumericsError;

/// Gated recurrent cell.
///
/// Column blocks of `w_x`, `bias` are ordered `[update z | reset r | candidate]`.
/// `u_zr` holds the recurrent weights for z and r, `u_n` the candidate's.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruCell {
    pub w_x: ParamId,
    pub bias: ParamId,
    pub u_zr: ParamId,
    pub u_n: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let sx = (1.0 / input_dim as f64).sqrt();
        let sh = (1.0 / hidden as f64).sqrt();
        let w_x = store.add(
            format!("{prefix}.w_x"),
            Tensor::uniform(input_dim, 3 * hidden, sx, rng),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(1, 3 * hidden));
        let u_zr = store.add(
            format!("{prefix}.u_zr"),
            Tensor::uniform(hidden, 2 * hidden, sh, rng),
        );
        let u_n = store.add(format!("{prefix}.u_n"), Tensor::uniform(hidden, hidden, sh, rng));
        Self {
            w_x,
            bias,
            u_zr,
            u_n,
            input_dim,
            hidden,
        }
    }

    /// Input projections `x · w_x + bias` for every row of `xs` at once.
    pub fn project(&self, tape: &mut Tape<'_>, xs: Var) -> Var {
        let w = tape.param(self.w_x);
        let b = tape.param(self.bias);
        let p = tape.matmul(xs, w);
        tape.add_row(p, b)
    }

    /// One step from a precomputed input projection row.
    pub fn step_projected(&self, tape: &mut Tape<'_>, gx: Var, h: Var) -> Var {
        let n = self.hidden;
        let u_zr = tape.param(self.u_zr);
        let u_n = tape.param(self.u_n);
        let gh = tape.matmul(h, u_zr);
        let gx_zr = tape.slice_cols(gx, 0, 2 * n);
        let pre_zr = tape.add(gx_zr, gh);
        let zr = tape.sigmoid(pre_zr);
        let z = tape.slice_cols(zr, 0, n);
        let r = tape.slice_cols(zr, n, n);
        let rh = tape.mul(r, h);
        let cand_h = tape.matmul(rh, u_n);
        let gx_n = tape.slice_cols(gx, 2 * n, n);
        let pre_n = tape.add(gx_n, cand_h);
        let cand = tape.tanh(pre_n);
        let keep = tape.one_minus(z);
        let kept = tape.mul(keep, h);
        let fresh = tape.mul(z, cand);
        tape.add(kept, fresh)
    }

    /// `h' = (1 − z) ⊙ h + z ⊙ h̃`
    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var, NumericsError> {
        let (xs, hs) = (tape.shape(x), tape.shape(h));
        if xs != (1, self.input_dim) {
            return Err(NumericsError::ShapeMismatch {
                op: "gru_step input",
                left: xs,
                right: (1, self.input_dim),
            });
        }
        if hs != (1, self.hidden) {
            return Err(NumericsError::ShapeMismatch {
                op: "gru_step hidden",
                left: hs,
                right: (1, self.hidden),
            });
        }
        let gx = self.project(tape, x);
        Ok(self.step_projected(tape, gx, h))
    }

    /// Runs the cell over every row of `xs` (forward or reversed), returning the
    /// hidden states stacked in original row order.
    pub fn run(&self, tape: &mut Tape<'_>, xs: Var, reverse: bool) -> Var {
        let len = tape.shape(xs).0;
        let proj = self.project(tape, xs);
        let mut h = tape.constant(Tensor::zeros(1, self.hidden));
        let mut outs = vec![h; len];
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let gx = tape.row(proj, t);
            h = self.step_projected(tape, gx, h);
            outs[t] = h;
        }
        tape.stack_rows(&outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell(force_z: Option<f64>) -> (ParamStore, GruCell) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let c = GruCell::register(&mut store, "c", 3, 4, &mut rng);
        if let Some(b) = force_z {
            let bias = store.get_mut(c.bias);
            for j in 0..4 {
                bias.set(0, j, b);
            }
        }
        (store, c)
    }

    fn inputs(tape: &mut Tape<'_>) -> (Var, Var) {
        let x = tape.constant(Tensor::row_vector(vec![0.3, -0.7, 1.1]));
        let h = tape.constant(Tensor::row_vector(vec![0.2, -0.4, 0.9, 0.05]));
        (x, h)
    }

    #[test]
    fn closed_update_gate_keeps_state() {
        let (store, c) = cell(Some(-1e4));
        let mut tape = Tape::new(&store);
        let (x, h) = inputs(&mut tape);
        let out = c.step(&mut tape, x, h).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn open_update_gate_takes_candidate() {
        let (store, c) = cell(Some(1e4));
        let mut tape = Tape::new(&store);
        let (x, h) = inputs(&mut tape);
        let out = c.step(&mut tape, x, h).unwrap();
        // Recompute the candidate directly.
        let xv = tape.value(x).clone();
        let hv = tape.value(h).clone();
        let gx = xv.matmul(store.get(c.w_x)).unwrap();
        let gh = hv.matmul(store.get(c.u_zr)).unwrap();
        let bias = store.get(c.bias);
        let r: Vec<f64> = (0..4)
            .map(|j| super::super::tape::sigmoid(gx.get(0, 4 + j) + bias.get(0, 4 + j) + gh.get(0, 4 + j)))
            .collect();
        let rh = Tensor::row_vector(r.iter().zip(hv.data()).map(|(a, b)| a * b).collect());
        let un = rh.matmul(store.get(c.u_n)).unwrap();
        for j in 0..4 {
            let cand = (gx.get(0, 8 + j) + bias.get(0, 8 + j) + un.get(0, j)).tanh();
            assert_eq!(tape.value(out).get(0, j), cand);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (store, c) = cell(None);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(1, 5));
        let h = tape.constant(Tensor::zeros(1, 4));
        assert!(c.step(&mut tape, x, h).is_err());
    }
}
