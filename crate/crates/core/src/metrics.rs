//! Evaluation metrics and number formatting for reports.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MaeReport {
    /// One value per predicted frame.
    pub per_horizon: Vec<f64>,
    pub mean: f64,
}

/// Mean angle error: for each frame, the mean over joints of the Euclidean
/// norm of the per-joint difference vector.
pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<MaeReport> {
    if pred.shape() != truth.shape() || pred.rank() != 3 || pred.is_empty() {
        return Err(Error::dim(
            "mae",
            format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        ));
    }
    let [frames, joints, c] = [pred.shape()[0], pred.shape()[1], pred.shape()[2]];
    let per_horizon: Vec<f64> = pred
        .data()
        .chunks(joints * c)
        .zip(truth.data().chunks(joints * c))
        .map(|(p, t)| {
            let total: f64 = p
                .chunks(c)
                .zip(t.chunks(c))
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum();
            total / joints as f64
        })
        .collect();
    let mean = per_horizon.iter().sum::<f64>() / frames as f64;
    Ok(MaeReport { per_horizon, mean })
}

/// Formats with six significant digits, like C's `%g`.
pub fn fmt6(x: f64) -> String {
    fmt_sig(x, 6)
}

pub fn fmt_sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let p = digits.max(1);
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -4 || exp >= p as i32 {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
