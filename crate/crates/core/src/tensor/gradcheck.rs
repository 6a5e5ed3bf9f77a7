//! Central finite-difference checks of tape gradients.
//!
//! The relative error of one coordinate is
//! `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
//!
//! Coordinates whose `±eps` perturbation flips a ReLU sign or a pooling argmax
//! are skipped and counted: at such points the function is not differentiable
//! on the scale of `eps` and the central difference measures the kink, not the
//! derivative.

use super::{Real, Tape, Tensor, Var};
use crate::error::{OffError, Result};

const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate, if any coordinate was checked.
    pub worst_index: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / DENOM_FLOOR.max(analytic.abs() + numeric.abs())
}

fn eval<T: Real, F>(forward: &F, x: &Tensor<T>, with_grad: bool) -> Result<(Tape<T>, Var, Var)>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), with_grad);
    let out = forward(&mut tape, xv)?;
    if tape.shape(out).numel() != 1 {
        return Err(OffError::shape(format!(
            "finite-difference target must be scalar, got {}",
            tape.shape(out)
        )));
    }
    Ok((tape, xv, out))
}

/// Full report of a central-difference check of `forward` at `x`.
pub fn finite_diff_report<T: Real, F>(forward: F, x: &Tensor<T>, eps: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(OffError::arg(format!("eps must be positive, got {eps}")));
    }
    let (mut tape, xv, out) = eval(&forward, x, true)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad(xv) {
        Some(g) => g.to_f64_vec(),
        None => vec![0.0; x.numel()],
    };
    let pattern = tape.activation_pattern();

    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst_index: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let plus = T::from_f64(orig.to_f64() + eps);
        let minus = T::from_f64(orig.to_f64() - eps);

        probe.data_mut()[i] = plus;
        let (tp, _, op) = eval(&forward, &probe, false)?;
        probe.data_mut()[i] = minus;
        let (tm, _, om) = eval(&forward, &probe, false)?;
        probe.data_mut()[i] = orig;

        if tp.activation_pattern() != pattern || tm.activation_pattern() != pattern {
            report.skipped += 1;
            continue;
        }
        let fp = tp.value(op).data()[0].to_f64();
        let fm = tm.value(om).data()[0].to_f64();
        // the actual step after rounding to storage precision
        let step = plus.to_f64() - minus.to_f64();
        let numeric = (fp - fm) / step;
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Maximum relative error between the tape gradient of the scalar `forward`
/// and central differences with step `eps`.
pub fn finite_diff_check<T: Real, F>(forward: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    finite_diff_report(forward, x, eps).map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 2, 2), |_, c, y, x| {
            0.1 * (c + 2 * y + 3 * x) as f64 - 0.4
        });
        let err = finite_diff_check(
            |t, v| {
                let s = t.scale(v, 3.0);
                Ok(t.sum(s))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn wrong_rule_is_caught() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 2, 3), |_, _, y, x| 0.3 + (y + x) as f64);
        // d/dx x^2 reported as x instead of 2x
        let err = finite_diff_check(
            |t, v| {
                let sq = t.elementwise(
                    v,
                    |a| a * a,
                    Box::new(|x, g| x.iter().zip(g).map(|(a, g)| a * g).collect()),
                );
                Ok(t.sum(sq))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err > 0.3, "{err}");
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Tensor::<f64>::zeros(Shape::scalar());
        assert!(finite_diff_check(|_, v| Ok(v), &x, 0.0).is_err());
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![1e-4, 0.5]).unwrap();
        let r = finite_diff_report(
            |t, v| {
                let r = t.relu(v);
                Ok(t.sum(r))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
        assert!(r.max_rel_error < 1e-9);
    }
}
