//! Central-difference validation of tape gradients.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{GradTape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor on the denominator of the relative error.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Central-difference formula used to estimate each partial derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error O(h²).
    #[default]
    ThreePoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error O(h⁴). Lets the
    /// step grow, which shrinks roundoff on small partials.
    FivePoint,
    /// Three-point differences at `h, 4h, 16h, 64h`; keeps the estimate that
    /// agrees best (relatively) with its neighbour on the ladder. Small partials pick a
    /// long step (less roundoff), partials near a kink pick a short one.
    Adaptive,
}

impl Stencil {
    fn taps(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::ThreePoint => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::FivePoint => &[
                (2.0, -1.0 / 12.0),
                (1.0, 8.0 / 12.0),
                (-1.0, -8.0 / 12.0),
                (-2.0, 1.0 / 12.0),
            ],
            Stencil::Adaptive => unreachable!("adaptive estimates use the three-point ladder"),
        }
    }
}

const LADDER: [f64; 4] = [1.0, 4.0, 16.0, 64.0];

fn pick_from_ladder(estimates: &[f64]) -> f64 {
    let mut best = (f64::INFINITY, estimates[0]);
    for w in estimates.windows(2) {
        let gap = (w[0] - w[1]).abs() / w[0].abs().max(w[1].abs()).max(f64::MIN_POSITIVE);
        if gap < best.0 {
            best = (gap, w[0]);
        }
    }
    best.1
}

/// Compares tape gradients of `forward` against three-point central
/// differences of step `step`, entry by entry over all `params`.
///
/// `forward` receives a fresh tape with the parameters already registered
/// (in the given order) and must return a 1x1 loss node.
pub fn finite_diff_check<F>(params: &[(String, Matrix)], step: f64, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(params, step, Stencil::ThreePoint, forward)
}

pub fn finite_diff_check_with<F>(
    params: &[(String, Matrix)],
    step: f64,
    stencil: Stencil,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |values: &[(String, Matrix)]| -> Result<f64> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|(n, m)| tape.param(n.clone(), m.clone()))
            .collect();
        let loss = forward(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = GradTape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(n, m)| tape.param(n.clone(), m.clone()))
        .collect();
    let loss = forward(&mut tape, &vars)?;
    let grads = tape.backward(loss)?.into_matrices();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<(String, Matrix)> = params.to_vec();
    for (p, (name, _)) in params.iter().enumerate() {
        for k in 0..work[p].1.data().len() {
            let orig = work[p].1.data()[k];
            let mut probe = |delta: f64| -> Result<f64> {
                work[p].1.data_mut()[k] = orig + delta;
                let value = eval(&work);
                work[p].1.data_mut()[k] = orig;
                match value {
                    Ok(v) if v.is_finite() => Ok(v),
                    Err(Error::NumericInstability(msg)) => {
                        Err(Error::NumericInstability(format!("perturbing {name}[{k}]: {msg}")))
                    }
                    Err(e) => Err(e),
                    Ok(_) => Err(Error::NumericInstability(format!(
                        "non-finite loss perturbing {name}[{k}]"
                    ))),
                }
            };
            let numeric = if stencil == Stencil::Adaptive {
                let mut estimates = Vec::with_capacity(LADDER.len());
                for m in LADDER {
                    let h = m * step;
                    estimates.push((probe(h)? - probe(-h)?) / (2.0 * h));
                }
                pick_from_ladder(&estimates)
            } else {
                let mut acc = 0.0;
                for &(offset, weight) in stencil.taps() {
                    acc += weight * probe(offset * step)?;
                }
                acc / step
            };
            let analytic = grads[p].data()[k];
            let rel = (analytic - numeric).abs() / numeric.abs().max(REL_FLOOR);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = k;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_is_exact() {
        let w = Matrix::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0], vec![3.0], vec![-2.0]]).unwrap();
        let report = finite_diff_check(&[("w".into(), w)], DEFAULT_STEP, |t, p| {
            let xv = t.input(x.clone());
            let y = t.matmul(p[0], xv)?;
            t.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
        assert_eq!(report.entries_checked, 3);
    }

    #[test]
    fn quadratic_loss_is_exact_up_to_roundoff() {
        let w = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.75]]).unwrap();
        let report = finite_diff_check(&[("w".into(), w)], DEFAULT_STEP, |t, p| {
            let s = t.square(p[0])?;
            t.sum(s)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
    }

    #[test]
    fn five_point_is_exact_on_cubics() {
        let w = Matrix::from_rows(&[vec![0.5, -1.5]]).unwrap();
        let report = finite_diff_check_with(&[("w".into(), w)], 1e-2, Stencil::FivePoint, |t, p| {
            let c = t.powf(p[0], 3.0)?;
            t.sum(c)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-10, "{report:?}");
    }

    #[test]
    fn adaptive_handles_small_partials_and_kinks() {
        // Tiny slope on one entry, a kink close to the other.
        let w = Matrix::from_rows(&[vec![0.3, 3e-5]]).unwrap();
        let report = finite_diff_check_with(&[("w".into(), w)], DEFAULT_STEP, Stencil::Adaptive, |t, p| {
            let scale = t.input(Matrix::from_rows(&[vec![1e-7, 1.0]]).unwrap());
            let s = t.mul(p[0], scale)?;
            let sq = t.square(s)?;
            let a = t.abs(p[0])?;
            let tot = t.add(sq, a)?;
            t.sum(tot)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn bad_step_rejected() {
        let w = Matrix::scalar(1.0);
        assert!(finite_diff_check(&[("w".into(), w)], 0.0, |t, p| t.sum(p[0])).is_err());
    }

    #[test]
    fn blow_up_is_numeric_instability() {
        let w = Matrix::scalar(709.78);
        let err = finite_diff_check(&[("w".into(), w)], 1.0, |t, p| {
            let e = t.exp(p[0])?;
            t.sum(e)
        })
        .unwrap_err();
        assert!(matches!(err, Error::NumericInstability(_)), "{err}");
    }
}
