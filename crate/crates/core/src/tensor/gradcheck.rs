use crate::error::{Result, RftfError};

/// Step used for central differences throughout the crate.
pub const FD_STEP: f64 = 1e-5;

/// Absolute floor in the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param_index: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Compares the analytic gradient returned by `loss` at `point` against
/// central differences of the loss value.
pub fn grad_check<F>(point: &[f64], mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (value, analytic) = loss(point);
    if !value.is_finite() {
        return Err(RftfError::numerical("grad_check", format!("loss is {value}")));
    }
    if analytic.len() != point.len() {
        return Err(RftfError::Config(format!(
            "analytic gradient has length {} for {} parameters",
            analytic.len(),
            point.len()
        )));
    }
    let mut non_finite = None;
    let numeric = central_difference(
        |x| {
            let v = loss(x).0;
            if !v.is_finite() {
                non_finite = Some(v);
            }
            v
        },
        point,
        FD_STEP,
    );
    if let Some(v) = non_finite {
        return Err(RftfError::numerical(
            "grad_check",
            format!("perturbed loss is {v}"),
        ));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param_index: 0,
    };
    for (i, (a, b)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *b);
        if e > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: e,
                worst_param_index: i,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_single_parameter() {
        let r = grad_check(&[1.7], |x| (3.0 * x[0] * x[0], vec![6.0 * x[0]])).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn constant_loss_reports_zero() {
        let r = grad_check(&[0.2, -3.0], |_| (4.0, vec![0.0, 0.0])).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let r = grad_check(&[1.0, 2.0], |x| (x[0] * x[1], vec![x[1], 0.0])).unwrap();
        assert_eq!(r.worst_param_index, 1);
        assert!(r.max_rel_error > 0.99);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        assert!(grad_check(&[0.0], |x| (1.0 / x[0].abs().max(0.0), vec![0.0])).is_err());
    }
}
