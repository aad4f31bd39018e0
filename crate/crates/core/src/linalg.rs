//! Small dense-vector helpers and a conjugate gradient solver shared by
//! the training and influence code. Vectors are plain `Vec<f64>`; the
//! parameter counts here are small enough that anything fancier would be
//! overhead.

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y += alpha * x
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CgOutcome {
    Converged { iterations: usize },
    MaxIterations,
    /// Hit a direction of nonpositive curvature; the returned iterate is
    /// the best one found so far (possibly zero).
    NegativeCurvature,
}

/// Solve A x = b for symmetric positive definite A given only the
/// matrix-vector product, stopping when the recurrence residual norm
/// drops below `tol`.
pub(crate) fn cg_solve<F>(
    matvec: F,
    b: &[f64],
    tol: f64,
    max_iters: usize,
) -> (Vec<f64>, CgOutcome)
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    if rs.sqrt() <= tol {
        return (x, CgOutcome::Converged { iterations: 0 });
    }
    for iter in 0..max_iters {
        let ap = matvec(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return (x, CgOutcome::NegativeCurvature);
        }
        let alpha = rs / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rs_new = dot(&r, &r);
        if rs_new.sqrt() <= tol {
            return (x, CgOutcome::Converged { iterations: iter + 1 });
        }
        let beta = rs_new / rs;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs = rs_new;
    }
    (x, CgOutcome::MaxIterations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_solves_diagonal_system() {
        let d = [1.0, 2.0, 4.0, 8.0];
        let matvec = |v: &[f64]| v.iter().zip(&d).map(|(vi, di)| vi * di).collect::<Vec<_>>();
        let b = vec![1.0, 1.0, 1.0, 1.0];
        let (x, outcome) = cg_solve(matvec, &b, 1e-12, 100);
        assert!(matches!(outcome, CgOutcome::Converged { .. }));
        for (xi, di) in x.iter().zip(&d) {
            assert!((xi - 1.0 / di).abs() < 1e-10);
        }
    }

    #[test]
    fn cg_reports_negative_curvature() {
        let matvec = |v: &[f64]| v.iter().map(|vi| -vi).collect::<Vec<_>>();
        let b = vec![1.0, 0.0];
        let (_, outcome) = cg_solve(matvec, &b, 1e-12, 10);
        assert_eq!(outcome, CgOutcome::NegativeCurvature);
    }
}
