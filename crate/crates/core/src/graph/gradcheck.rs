//! Central finite-difference verification of backward rules.
//!
//! The harness perturbs each parameter element by +/- eps, rebuilds the
//! graph through a caller-supplied closure, and compares the numeric
//! gradient against what `backward()` produced. The closure must be a
//! deterministic function of the parameter values (dropout closures fix
//! their RNG seed internally).

use super::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst disagreement.
    pub worst: (usize, usize),
    pub tol: f64,
    /// Elements whose perturbation crossed an activation kink, making the
    /// central difference ill-defined there; only nonzero for the
    /// kink-aware variant.
    pub skipped_kink_crossings: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

/// Central finite differences of `f` w.r.t. every element of `params`.
pub fn finite_diff_grads<T: Scalar>(
    f: &mut dyn FnMut(&[Tensor<T>]) -> Tensor<T>,
    params: &[Tensor<T>],
    eps: f64,
) -> Vec<Vec<f64>> {
    let eps_t = T::from_f64(eps).expect("eps fits the scalar type");
    params
        .iter()
        .map(|p| {
            let n = p.numel();
            let mut grads = Vec::with_capacity(n);
            for j in 0..n {
                let orig = p.data()[j];
                p.data_mut()[j] = orig + eps_t;
                let plus = f(params).item().to_f64().expect("finite loss");
                p.data_mut()[j] = orig - eps_t;
                let minus = f(params).item().to_f64().expect("finite loss");
                p.data_mut()[j] = orig;
                grads.push((plus - minus) / (2.0 * eps));
            }
            grads
        })
        .collect()
}

/// Max relative error between analytic and numeric gradients.
///
/// The denominator is floored at 1e-6 so that near-zero gradients are
/// compared absolutely instead of dividing by noise.
pub fn compare_grads(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tol: f64) -> GradCheckReport {
    let mut max_rel_err = 0.0f64;
    let mut worst = (0, 0);
    for (pi, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        assert_eq!(a.len(), n.len(), "gradient length mismatch");
        for (j, (&av, &nv)) in a.iter().zip(n.iter()).enumerate() {
            let denom = av.abs().max(nv.abs()).max(1e-6);
            let rel = (av - nv).abs() / denom;
            if !rel.is_finite() || rel > max_rel_err {
                max_rel_err = rel;
                worst = (pi, j);
            }
        }
    }
    GradCheckReport {
        max_rel_err,
        worst,
        tol,
        skipped_kink_crossings: 0,
    }
}

/// Run backward through `f` and verify the parameter gradients against
/// central finite differences.
pub fn grad_check<T: Scalar>(
    f: &mut dyn FnMut(&[Tensor<T>]) -> Tensor<T>,
    params: &[Tensor<T>],
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    for p in params {
        p.zero_grad();
    }
    let loss = f(params);
    loss.backward().expect("loss must be scalar");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.iter().map(|v| v.to_f64().expect("finite grad")).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    for p in params {
        p.zero_grad();
    }
    let numeric = finite_diff_grads(f, params, eps);
    compare_grads(&analytic, &numeric, tol)
}

/// Like [`grad_check`], but skips parameter elements whose +/- eps
/// evaluations land on different sides of a leaky-ReLU kink.
///
/// Piecewise-linear activations make the loss non-differentiable on a
/// measure-zero set; a deep graph evaluated at a random point almost
/// always has some pre-activation within eps-reach of zero, where the
/// central difference measures an average of two slopes instead of the
/// derivative. Those elements are counted, not compared, mirroring the
/// away-from-the-kink convention used for the L1 loss term.
pub fn grad_check_kink_aware<T: Scalar>(
    f: &mut dyn FnMut(&[Tensor<T>]) -> Tensor<T>,
    params: &[Tensor<T>],
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    use super::leaky_relu_preact_signs;

    for p in params {
        p.zero_grad();
    }
    let loss = f(params);
    loss.backward().expect("loss must be scalar");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.iter().map(|v| v.to_f64().expect("finite grad")).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    for p in params {
        p.zero_grad();
    }

    let eps_t = T::from_f64(eps).expect("eps fits the scalar type");
    let mut max_rel_err = 0.0f64;
    let mut worst = (0, 0);
    let mut skipped = 0usize;
    for (pi, p) in params.iter().enumerate() {
        #[allow(clippy::needless_range_loop)]
        for j in 0..p.numel() {
            let orig = p.data()[j];
            p.data_mut()[j] = orig + eps_t;
            let loss_plus = f(params);
            let plus = loss_plus.item().to_f64().expect("finite loss");
            let signs_plus = leaky_relu_preact_signs(&loss_plus);
            p.data_mut()[j] = orig - eps_t;
            let loss_minus = f(params);
            let minus = loss_minus.item().to_f64().expect("finite loss");
            let signs_minus = leaky_relu_preact_signs(&loss_minus);
            p.data_mut()[j] = orig;
            if signs_plus != signs_minus {
                skipped += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * eps);
            let av = analytic[pi][j];
            let denom = av.abs().max(fd.abs()).max(1e-6);
            let rel = (av - fd).abs() / denom;
            if !rel.is_finite() || rel > max_rel_err {
                max_rel_err = rel;
                worst = (pi, j);
            }
        }
    }
    GradCheckReport {
        max_rel_err,
        worst,
        tol,
        skipped_kink_crossings: skipped,
    }
}
