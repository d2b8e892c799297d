//! Training losses: L1 prediction error, gram-matrix error and pooling entropy.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Entries below this are clamped before taking logs in the entropy term.
pub const ENTROPY_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.01,
            gamma: 0.03,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

/// Sum of absolute differences.
pub fn l1_prediction_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    same_shape(tape, "l1_prediction_loss", pred, truth)?;
    let d = tape.sub(pred, truth)?;
    let a = tape.abs(d)?;
    tape.sum(a)
}

/// Flattened per-joint gram matrices `x^{t-1} x^{t-1}ᵀ + x^t x^tᵀ`, one row per
/// (frame, joint), for a sequence whose frame before the first is `last`.
fn pair_grams(tape: &mut Tape, seq: Var, last: Var) -> Result<Var> {
    let [frames, m, c] = match *tape.shape(seq) {
        [a, b, c] => [a, b, c],
        ref s => {
            return Err(Error::dim(
                "gram_matrix_loss",
                format!("rank-3 expected, got {s:?}"),
            ))
        }
    };
    let mut prev = vec![last];
    for t in 0..frames - 1 {
        prev.push(tape.select0(seq, t)?);
    }
    let prev = tape.stack(&prev)?;
    let prev = tape.reshape(prev, &[frames * m, c])?;
    let cur = tape.reshape(seq, &[frames * m, c])?;
    let gp = tape.row_outer(prev)?;
    let gc = tape.row_outer(cur)?;
    tape.add(gp, gc)
}

/// `(1/ΔT) Σ_t Σ_i ‖V_i − V̂_i‖_F²` with `V_i = [x_i^{t-1} x_i^t][x_i^{t-1} x_i^t]ᵀ`.
/// The frame before the first prediction is the shared last observed pose.
pub fn gram_matrix_loss(tape: &mut Tape, pred: Var, truth: Var, last_observed: Var) -> Result<Var> {
    same_shape(tape, "gram_matrix_loss", pred, truth)?;
    let s = tape.shape(pred).to_vec();
    if s.len() != 3 || s[0] == 0 || tape.shape(last_observed) != &s[1..] {
        return Err(Error::dim(
            "gram_matrix_loss",
            format!("pred {s:?} with last frame {:?}", tape.shape(last_observed)),
        ));
    }
    let gp = pair_grams(tape, pred, last_observed)?;
    let gt = pair_grams(tape, truth, last_observed)?;
    let d = tape.sub(gp, gt)?;
    let sq = tape.square(d)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / s[0] as f64)
}

/// Mean over operators of the average row entropy `-(1/M) Σ_i Σ_j Ψ_ij ln Ψ_ij`.
/// An empty list contributes zero.
pub fn entropy_loss(tape: &mut Tape, psis: &[Var]) -> Result<Var> {
    if psis.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::with_capacity(psis.len());
    for &psi in psis {
        let v = tape.value(psi);
        if v.rank() != 2 {
            return Err(Error::dim("entropy_loss", format!("rank {}", v.rank())));
        }
        if v.data().iter().any(|&x| x < 0.0) {
            return Err(Error::Config(
                "entropy_loss: negative entry in pooling operator".into(),
            ));
        }
        let rows = v.rows();
        let logs = tape.log_clamped(psi, ENTROPY_FLOOR)?;
        let prod = tape.mul(psi, logs)?;
        let s = tape.sum(prod)?;
        terms.push(tape.scale(s, -1.0 / rows as f64)?);
    }
    let total = tape.add_all(&terms)?;
    tape.scale(total, 1.0 / psis.len() as f64)
}

/// Mean Shannon entropy of the rows of a row-stochastic matrix.
pub fn mean_row_entropy(psi: &Tensor) -> f64 {
    let h: f64 = psi
        .data()
        .iter()
        .map(|&p| -p * p.max(ENTROPY_FLOOR).ln())
        .sum();
    h / psi.rows() as f64
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub pred: Var,
    pub gram: Var,
    pub ent: Var,
}

/// `α·L_pred + β·L_gram + γ·L_ent`.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(terms.pred, w.alpha)?;
    let b = tape.scale(terms.gram, w.beta)?;
    let c = tape.scale(terms.ent, w.gamma)?;
    tape.add_all(&[a, b, c])
}
