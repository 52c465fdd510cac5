//! Central-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::{Purpose, RngStream, StreamKey};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per tensor (sampled); `None` = all.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(tensor index, flat coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `backward()` of the scalar `f(params)` against central
/// differences `(f(p+eps) − f(p−eps)) / 2eps`, coordinate by coordinate.
///
/// `f` must be deterministic. Every tensor in `params` is bound as a tracked
/// leaf, in order.
pub fn finite_diff_check<F>(f: F, params: &mut [Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let out = f(&tape, &leaves)?;
        tape.backward(out)?;
        leaves.iter().map(Var::grad_or_zeros).collect()
    };

    let eval = |params: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        Ok(f(&tape, &leaves)?.value().item())
    };

    let mut report = GradCheckReport::default();
    for t in 0..params.len() {
        let n = params[t].len();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(limit) = opts.max_coords_per_tensor {
            if limit < n {
                let mut rng = RngStream::new(opts.seed, StreamKey::once(Purpose::Check(t as u32)));
                rng.shuffle(&mut coords);
                coords.truncate(limit);
                coords.sort_unstable();
            }
        }
        for c in coords {
            let orig = params[t].data()[c];
            params[t].data_mut()[c] = orig + opts.eps;
            let plus = eval(params)?;
            params[t].data_mut()[c] = orig - opts.eps;
            let minus = eval(params)?;
            params[t].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[t].data()[c];
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((t, c));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = xᵀ A x with a non-symmetric A
        let a = Tensor::from_rows(&[vec![2.0, -1.0, 0.5], vec![0.3, 1.0, 0.0], vec![-0.7, 0.2, 3.0]]).unwrap();
        let mut params = vec![Tensor::row_vector(vec![0.4, -0.9, 0.25])];
        let report = finite_diff_check(
            |tape, p| {
                let am = tape.constant(a.clone());
                let ax = p[0].matmul(&am)?;
                Ok(ax.mul(&p[0])?.sum())
            },
            &mut params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn params_restored_after_check() {
        let mut params = vec![Tensor::row_vector(vec![0.1, 0.2])];
        let before = params.clone();
        finite_diff_check(|_, p| Ok(p[0].tanh().sum()), &mut params, &GradCheckOptions::default()).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn coordinate_sampling_limits_work() {
        let mut params = vec![Tensor::zeros(&[10, 10])];
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(7),
            ..Default::default()
        };
        let r = finite_diff_check(|_, p| Ok(p[0].tanh().sum()), &mut params, &opts).unwrap();
        assert_eq!(r.checked, 7);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
        assert!((relative_error(1.0, 0.5) - 0.5).abs() < 1e-15);
    }
}
