//! Central finite-difference gradient checking.

use crate::error::{Error, Result, ResultExt};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// Largest discrepancy seen for one input tensor.
#[derive(Clone, Debug)]
pub struct WorstEntry {
    pub param: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<WorstEntry>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// `|analytic - numeric| / max(1, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_loss<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss);
    if value.len() != 1 {
        return Err(Error::dim("grad_check", "loss is not scalar"));
    }
    Ok(value.item())
}

/// Compares tape gradients of the scalar `f(params)` with central differences,
/// entry by entry, over every input tensor.
pub fn grad_check<F>(params: &[Tensor], f: F, config: GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars).context(|| "grad_check: base evaluation")?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.wrt_or_zeros(v, p))
        .collect();
    drop(tape);

    let mut work = params.to_vec();
    let mut report = GradReport {
        entries_checked: 0,
        max_rel_err: 0.0,
        worst: None,
        tolerance: config.tolerance,
    };
    let h = config.step;
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            let orig = params[p].data()[e];
            work[p].data_mut()[e] = orig + h;
            let plus =
                eval_loss(&f, &work).context(|| format!("grad_check: param {p} entry {e} (+h)"))?;
            work[p].data_mut()[e] = orig - h;
            let minus =
                eval_loss(&f, &work).context(|| format!("grad_check: param {p} entry {e} (-h)"))?;
            work[p].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[e];
            let rel = relative_error(a, numeric);
            report.entries_checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(WorstEntry {
                    param: p,
                    entry: e,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let report = grad_check(
            &[x],
            |t, v| {
                let s = t.square(v[0])?;
                t.sum(s)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert_eq!(report.entries_checked, 4);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at exactly 0 has one-sided slopes 0 and 1; the numeric estimate is 0.5
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let report = grad_check(
            &[x],
            |t, v| {
                let r = t.relu(v[0])?;
                t.sum(r)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let x = Tensor::new(vec![1], vec![1e200]).unwrap();
        let err = grad_check(
            &[x],
            |t, v| {
                let s = t.square(v[0])?;
                t.sum(s)
            },
            GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err.root(), Error::NonFinite { .. }));
    }
}
