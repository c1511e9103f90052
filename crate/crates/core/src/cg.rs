//! Conjugate gradients for symmetric positive (semi)definite operators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    /// Target relative residual `|b - Ax| / |b|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CgReport {
    pub iterations: usize,
    pub rel_residual: f64,
    /// Relative residual before the first and after every iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Runs CG from `x0` (zero if `None`) and returns the last iterate either way.
pub fn conjugate_gradient<F>(
    apply: F,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: &CgOptions,
) -> (Vec<f64>, CgReport)
where
    F: FnMut(&[f64], &mut [f64]),
{
    preconditioned_cg(
        apply,
        |r: &[f64], z: &mut [f64]| z.copy_from_slice(r),
        b,
        x0,
        opts,
    )
}

/// CG with a symmetric positive definite preconditioner `precond(r, z)`
/// computing `z = M^{-1} r`. Convergence is judged on the true residual
/// `|b - Ax| / |b|`, not the preconditioned one.
pub fn preconditioned_cg<F, M>(
    mut apply: F,
    mut precond: M,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: &CgOptions,
) -> (Vec<f64>, CgReport)
where
    F: FnMut(&[f64], &mut [f64]),
    M: FnMut(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = norm(b);
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let mut report = CgReport::default();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        report.history.push(0.0);
        report.converged = true;
        return (x, report);
    }
    let mut ax = vec![0.0; n];
    let mut r = b.to_vec();
    if x0.is_some() {
        apply(&x, &mut ax);
        axpy(&mut r, -1.0, &ax);
    }
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut rel = norm(&r) / bnorm;
    report.history.push(rel);
    let mut ap = vec![0.0; n];
    while rel > opts.tol && report.iterations < opts.max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            log::warn!("CG stopped on non-positive curvature {pap:.3e}");
            break;
        }
        let alpha = rz / pap;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        report.iterations += 1;
        rel = norm(&r) / bnorm;
        report.history.push(rel);
        if rel <= opts.tol {
            break;
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    report.rel_residual = rel;
    report.converged = rel <= opts.tol;
    (x, report)
}

/// Like [`conjugate_gradient`] but fails when the tolerance is not reached.
pub fn solve<F>(
    apply: F,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: &CgOptions,
) -> Result<(Vec<f64>, CgReport)>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let (x, rep) = conjugate_gradient(apply, b, x0, opts);
    if !rep.converged {
        return Err(Error::CgNoConvergence {
            iterations: rep.iterations,
            residual: rep.rel_residual,
        });
    }
    Ok((x, rep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spd(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| g[k * n + i] * g[k * n + j]).sum::<f64>();
            }
            a[i * n + i] += 0.5;
        }
        a
    }

    fn matvec(a: &[f64], x: &[f64], y: &mut [f64]) {
        let n = x.len();
        for i in 0..n {
            y[i] = dot(&a[i * n..(i + 1) * n], x);
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let (x, rep) = conjugate_gradient(
            |v, out| out.copy_from_slice(v),
            &[0.0; 4],
            Some(&[1.0; 4]),
            &CgOptions::default(),
        );
        assert_eq!(x, vec![0.0; 4]);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn reports_nonconvergence() {
        let a = spd(20, 1);
        let b = vec![1.0; 20];
        let opts = CgOptions {
            tol: 1e-14,
            max_iter: 2,
        };
        let err = solve(|v, o| matvec(&a, v, o), &b, None, &opts).unwrap_err();
        assert!(matches!(err, Error::CgNoConvergence { iterations: 2, .. }));
    }

    #[test]
    fn jacobi_preconditioning_helps_a_badly_scaled_system() {
        let d: Vec<f64> = (0..200)
            .map(|i| 10f64.powf(4.0 * i as f64 / 199.0))
            .collect();
        let b = vec![1.0; 200];
        let opts = CgOptions {
            tol: 1e-10,
            max_iter: 1000,
        };
        let mul = |v: &[f64], o: &mut [f64]| {
            o.iter_mut()
                .zip(v)
                .zip(&d)
                .for_each(|((o, x), di)| *o = di * x)
        };
        let (_, plain) = conjugate_gradient(mul, &b, None, &opts);
        let (x, pre) = preconditioned_cg(
            mul,
            |r: &[f64], z: &mut [f64]| {
                z.iter_mut()
                    .zip(r)
                    .zip(&d)
                    .for_each(|((z, r), di)| *z = r / di)
            },
            &b,
            None,
            &opts,
        );
        assert!(pre.converged);
        assert!(pre.iterations <= 2, "{}", pre.iterations);
        assert!(plain.iterations > 20 * pre.iterations);
        for (xi, di) in x.iter().zip(&d) {
            assert!((xi * di - 1.0).abs() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn solves_spd_systems(seed in any::<u64>(), n in 2usize..24) {
            let a = spd(n, seed);
            let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
            let opts = CgOptions { tol: 1e-10, max_iter: 10 * n };
            let (x, rep) = solve(|v, o| matvec(&a, v, o), &b, None, &opts).unwrap();
            let mut ax = vec![0.0; n];
            matvec(&a, &x, &mut ax);
            prop_assert!(crate::linalg::rel_err(&ax, &b) <= 1e-9);
            prop_assert_eq!(rep.history.len(), rep.iterations + 1);
        }
    }
}
