//! Finite-difference verification of analytic gradients.
//!
//! The checker is the crate's ground truth for backward correctness: any
//! scalar-valued function of a parameter set can be probed element by
//! element with central differences and compared against the gradients the
//! tape produced. It is deliberately independent of the tape internals — it
//! only sees function values — so a bug in a backward rule cannot hide.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Default pass/fail tolerance on the max relative error.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Anything exposing an ordered collection of named parameter tensors.
///
/// The order must be deterministic: it defines checkpoint layout, optimizer
/// moment alignment, and initialization draw order.
pub trait Parameters {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Clears every gradient slot.
    fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }
}

/// Outcome of a [`grad_check`] sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over all scalar parameters of |analytic − numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_err: f64,
    /// `name[flat_index]` of the worst parameter element.
    pub worst_parameter: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Total scalar parameters probed.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    /// Converts a failing report into the error the CLI maps to exit 4.
    pub fn into_result(self, tol: f64) -> Result<Self> {
        if self.passes(tol) {
            Ok(self)
        } else {
            Err(Error::GradCheck {
                parameter: self.worst_parameter,
                rel_err: self.max_rel_err,
                tol,
            })
        }
    }
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f(params, compute_grad)` returns the scalar value; when `compute_grad`
/// is true it must also leave `df/dθ` in each tensor's gradient slot
/// (slots are cleared beforehand). Probes every scalar parameter with
/// `(f(θ+h) − f(θ−h)) / 2h`, restoring the original bits exactly afterwards.
///
/// Errors with [`Error::NonFinite`] naming the offending parameter if any
/// probe produces a non-finite value.
pub fn grad_check<P, F>(params: &mut P, mut f: F, h: f64) -> Result<GradCheckReport>
where
    P: Parameters,
    F: FnMut(&mut P, bool) -> Result<f64>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Argument(format!("step h must be positive, got {h}")));
    }
    params.zero_grads();
    let base = f(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("f at the unperturbed point".into()));
    }

    // Snapshot analytic gradients (missing slot = zero gradient).
    let analytic: Vec<(String, Vec<f64>)> = params
        .named_tensors()
        .iter()
        .map(|(name, t)| {
            let g = t
                .grad()
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
            (name.clone(), g)
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_parameter: String::from("<none>"),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };

    let n_tensors = analytic.len();
    for ti in 0..n_tensors {
        let numel = analytic[ti].1.len();
        for e in 0..numel {
            let orig = params.named_tensors()[ti].1.data()[e];

            set_element(params, ti, e, orig + h);
            let fp = f(params, false)?;
            set_element(params, ti, e, orig - h);
            let fm = f(params, false)?;
            set_element(params, ti, e, orig);

            let label = || format!("{}[{}]", analytic[ti].0, e);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(label()));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].1[e];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_parameter = label();
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn set_element<P: Parameters>(params: &mut P, ti: usize, e: usize, v: f64) {
    let mut named = params.named_tensors_mut();
    named[ti].1.set_flat(e, v);
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One scalar parameter, for closed-form checks.
    struct Scalar(Tensor);

    impl Parameters for Scalar {
        fn named_tensors(&self) -> Vec<(String, &Tensor)> {
            vec![("theta".into(), &self.0)]
        }
        fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("theta".into(), &mut self.0)]
        }
    }

    fn theta(v: f64) -> Scalar {
        Scalar(Tensor::new(vec![1], vec![v]).unwrap())
    }

    #[test]
    fn quadratic_matches_closed_form() {
        // f = θ² at θ = 3: numeric derivative ≈ 6 within O(h²).
        let mut p = theta(3.0);
        let report = grad_check(
            &mut p,
            |p, wants_grad| {
                let x = p.0.data()[0];
                if wants_grad {
                    p.0.zero_grad();
                    p.0.accumulate_grad(&[2.0 * x], 1.0)?;
                }
                Ok(x * x)
            },
            1e-3,
        )
        .unwrap();
        assert!((report.worst_numeric - 6.0).abs() < 1e-6 || report.max_rel_err < 1e-6);
        assert!(report.max_rel_err < 1e-9, "rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn linear_function_is_exact_even_with_large_step() {
        let mut p = theta(0.7);
        let report = grad_check(
            &mut p,
            |p, wants_grad| {
                let x = p.0.data()[0];
                if wants_grad {
                    p.0.zero_grad();
                    p.0.accumulate_grad(&[4.0], 1.0)?;
                }
                Ok(4.0 * x - 1.0)
            },
            0.1,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-12, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn wrong_analytic_gradient_is_flagged() {
        let mut p = theta(2.0);
        let report = grad_check(
            &mut p,
            |p, wants_grad| {
                let x = p.0.data()[0];
                if wants_grad {
                    p.0.zero_grad();
                    p.0.accumulate_grad(&[3.0 * x], 1.0)?; // should be 2x
                }
                Ok(x * x)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.1);
        assert_eq!(report.worst_parameter, "theta[0]");
        assert!(report.into_result(1e-4).is_err());
    }

    #[test]
    fn non_finite_probe_names_the_parameter() {
        let mut p = theta(0.0);
        let err = grad_check(
            &mut p,
            |p, wants_grad| {
                let x = p.0.data()[0];
                if wants_grad {
                    p.0.zero_grad();
                    p.0.accumulate_grad(&[0.0], 1.0)?;
                }
                // Blows up for any x != 0, i.e. exactly at the probes.
                Ok(if x == 0.0 { 0.0 } else { f64::NAN })
            },
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("theta[0]"), "{err}");
    }

    #[test]
    fn perturbation_restores_original_bits() {
        let mut p = theta(0.1); // 0.1 is not exactly representable; restore must be bitwise
        let before = p.0.data()[0].to_bits();
        grad_check(
            &mut p,
            |p, wants_grad| {
                if wants_grad {
                    p.0.zero_grad();
                    p.0.accumulate_grad(&[1.0], 1.0)?;
                }
                Ok(p.0.data()[0])
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(p.0.data()[0].to_bits(), before);
    }
}
