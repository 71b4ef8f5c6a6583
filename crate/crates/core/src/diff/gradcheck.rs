//! Central-difference gradient verification.

use serde::Serialize;

use crate::diff::matrix::Matrix;
use crate::error::{Error, Result};

/// Denominator floor in the relative error, so coordinates whose true
/// gradient is essentially zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate within the group.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub groups: Vec<GroupReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing_groups(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !g.passed)
    }
}

/// Compares the analytic gradient of `f` with `(f(x+h) - f(x-h)) / 2h` on
/// every coordinate of every named parameter group.
///
/// `f` returns the scalar and its analytic gradient, one matrix per group in
/// the order of `params`.
pub fn grad_check<F>(
    f: F,
    params: &[(String, Matrix)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let mut point: Vec<Matrix> = params.iter().map(|(_, m)| m.clone()).collect();
    let (value, analytic) = f(&point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss at base point".into()));
    }
    if analytic.len() != point.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} gradients for {} groups", analytic.len(), point.len()),
        ));
    }

    let mut groups = Vec::with_capacity(params.len());
    for (g, (name, _)) in params.iter().enumerate() {
        if analytic[g].shape() != point[g].shape() {
            return Err(Error::shape(
                "grad_check",
                format!("gradient for {name} has shape {:?}", analytic[g].shape()),
            ));
        }
        let mut worst = 0.0;
        let mut worst_index = 0;
        for i in 0..point[g].len() {
            let original = point[g].data()[i];
            point[g].data_mut()[i] = original + step;
            let (plus, _) = f(&point)?;
            point[g].data_mut()[i] = original - step;
            let (minus, _) = f(&point)?;
            point[g].data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss with {name}[{i}] perturbed")));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[g].data()[i], numeric);
            if err > worst {
                worst = err;
                worst_index = i;
            }
        }
        groups.push(GroupReport {
            name: name.clone(),
            coordinates: point[g].len(),
            max_rel_error: worst,
            worst_index,
            passed: worst < tolerance,
        });
    }

    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step,
        tolerance,
        max_rel_error,
        passed: groups.iter().all(|g| g.passed),
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::tape::Tape;

    #[test]
    fn sum_of_squares() {
        let params = vec![("x".to_string(), Matrix::from_rows(&[[1.0, 2.0]]).unwrap())];
        let report = grad_check(
            |p| {
                let x = &p[0];
                let value = x.data().iter().map(|v| v * v).sum();
                Ok((value, vec![x.scale(2.0)]))
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn softmax_cross_entropy_three_logits() {
        let params = vec![(
            "logits".to_string(),
            Matrix::from_rows(&[[0.3, -1.2, 2.0]]).unwrap(),
        )];
        let report = grad_check(
            |p| {
                let mut t = Tape::new();
                let x = t.param(p[0].clone())?;
                let l = t.cross_entropy(x, &[1])?;
                let g = t.backward(l)?;
                Ok((t.value(l).get(0, 0), vec![g.of(x)]))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_names_the_group() {
        let params = vec![
            ("good".to_string(), Matrix::filled(1, 2, 0.5)),
            ("bad".to_string(), Matrix::filled(2, 1, -0.25)),
        ];
        let report = grad_check(
            |p| {
                let value = p.iter().flat_map(|m| m.data()).map(|v| v * v).sum();
                Ok((value, vec![p[0].scale(2.0), p[1].scale(2.5)]))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        let failing: Vec<_> = report.failing_groups().map(|g| g.name.as_str()).collect();
        assert_eq!(failing, vec!["bad"]);
    }

    #[test]
    fn non_positive_step_rejected() {
        let params = vec![("x".to_string(), Matrix::zeros(1, 1))];
        let r = grad_check(|p| Ok((0.0, vec![p[0].clone()])), &params, 0.0, 1e-4);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_perturbed_loss_is_an_error() {
        let params = vec![("x".to_string(), Matrix::zeros(1, 1))];
        let r = grad_check(
            |p| {
                let v = if p[0].get(0, 0) > 0.0 { f64::NAN } else { 0.0 };
                Ok((v, vec![Matrix::zeros(1, 1)]))
            },
            &params,
            1e-5,
            1e-4,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
