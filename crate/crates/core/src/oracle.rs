//! Closed-form solutions of the max-entropy LQR problem.
//!
//! For a Gaussian policy `N(−Kx, Σ_u)` the soft value is `−xᵀPx − c` with `P`
//! the discounted Lyapunov fixed point of the closed loop. Policy improvement
//! maps `P` to a new Gaussian policy, and iterating from `P₀ = Q` without a
//! policy in between is Riccati value iteration.

use alloc::vec::Vec;

use crate::linalg::{cholesky, dot, inverse_spd, matmul, spectral_radius, Matrix};
use crate::lqr::{gaussian_entropy, GaussianPolicy, LqrSystem};
use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_SPI_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100_000;

const RADIUS_TOL: f64 = 1e-12;

/// Value matrix `P`, the policy it was paired with, and the constant `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: Matrix,
    pub k: Matrix,
    pub sigma: Matrix,
    pub c: f64,
    pub iterations: usize,
}

impl RiccatiSolution {
    pub fn policy(&self) -> Result<GaussianPolicy> {
        GaussianPolicy::new(self.k.clone(), self.sigma.clone())
    }

    /// Soft value `−xᵀPx − c`.
    pub fn value(&self, x: &[f64]) -> f64 {
        -quad(&self.p, x) - self.c
    }
}

/// `Q(x,u) = −xᵀ M_xx x − uᵀ M_uu u − 2 xᵀ M_xu u − constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftQCoefficients {
    pub m_xx: Matrix,
    pub m_uu: Matrix,
    pub m_xu: Matrix,
    pub constant: f64,
}

impl SoftQCoefficients {
    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        let cross: f64 = (0..x.len()).map(|i| x[i] * dot(self.m_xu.row(i), u)).sum();
        -quad(&self.m_xx, x) - quad(&self.m_uu, u) - 2.0 * cross - self.constant
    }
}

fn quad(m: &Matrix, v: &[f64]) -> f64 {
    (0..m.rows()).map(|i| v[i] * dot(m.row(i), v)).sum()
}

/// `A − BK`
pub fn closed_loop(sys: &LqrSystem, k: &Matrix) -> Result<Matrix> {
    sys.a().sub(&matmul(sys.b(), k)?)
}

/// `√γ · ρ(A − BK)`; the discounted closed loop is stable iff this is below 1.
pub fn discounted_closed_loop_radius(sys: &LqrSystem, k: &Matrix) -> Result<f64> {
    Ok(libm::sqrt(sys.gamma()) * spectral_radius(&closed_loop(sys, k)?, RADIUS_TOL)?)
}

/// `R + γBᵀPB`
fn action_curvature(sys: &LqrSystem, p: &Matrix) -> Result<Matrix> {
    let bt = sys.b().transpose();
    let bpb = matmul(&matmul(&bt, p)?, sys.b())?;
    Ok(sys.r().add(&bpb.scale(sys.gamma()))?.symmetrize())
}

/// Constant term of the soft value for a Gaussian policy with covariance `Σ_u`.
pub fn value_constant(sys: &LqrSystem, p: &Matrix, sigma_u: &Matrix) -> Result<f64> {
    let h = action_curvature(sys, p)?;
    let entropy = gaussian_entropy(sigma_u)?;
    let control = matmul(&h, sigma_u)?.trace();
    let noise = matmul(p, sys.sigma_w())?.trace();
    Ok((control - sys.alpha() * entropy + sys.gamma() * noise) / (1.0 - sys.gamma()))
}

/// Iterates `P ← Q + γAᵀPA − γ²AᵀPB(R+γBᵀPB)⁻¹BᵀPA` from `P₀ = Q` until
/// `‖ΔP‖_F < tol`, then reads off the optimal gain, covariance and constant.
pub fn riccati_value_iteration(sys: &LqrSystem, tol: f64, max_iter: usize) -> Result<RiccatiSolution> {
    let a = sys.a();
    let at = a.transpose();
    let bt = sys.b().transpose();
    let gamma = sys.gamma();
    let mut p = sys.q().clone();
    let mut delta = f64::INFINITY;
    for it in 1..=max_iter {
        let h = action_curvature(sys, &p)?;
        let bpa = matmul(&matmul(&bt, &p)?, a)?;
        let apa = matmul(&matmul(&at, &p)?, a)?;
        let gain_term = matmul(&bpa.transpose(), &crate::linalg::solve_spd(&h, &bpa)?)?;
        let next = sys
            .q()
            .add(&apa.scale(gamma))?
            .sub(&gain_term.scale(gamma * gamma))?
            .symmetrize();
        if !next.is_finite() {
            return Err(Error::non_finite("Riccati iterate"));
        }
        delta = next.sub(&p)?.frobenius_norm();
        p = next;
        if delta < tol {
            let (k, sigma) = improve_from(sys, &p)?;
            let c = value_constant(sys, &p, &sigma)?;
            return Ok(RiccatiSolution {
                p,
                k,
                sigma,
                c,
                iterations: it,
            });
        }
    }
    Err(Error::NoConvergence {
        what: "Riccati value iteration",
        iterations: max_iter,
        residual: delta,
    })
}

/// A fixed number of value-iteration sweeps from `P₀ = Q`, returning the
/// greedy policy of the last iterate. Used to warm-start policy iteration.
pub fn riccati_sweeps(sys: &LqrSystem, sweeps: usize) -> Result<GaussianPolicy> {
    let a = sys.a();
    let at = a.transpose();
    let bt = sys.b().transpose();
    let gamma = sys.gamma();
    let mut p = sys.q().clone();
    for _ in 0..sweeps {
        let h = action_curvature(sys, &p)?;
        let bpa = matmul(&matmul(&bt, &p)?, a)?;
        let apa = matmul(&matmul(&at, &p)?, a)?;
        let gain_term = matmul(&bpa.transpose(), &crate::linalg::solve_spd(&h, &bpa)?)?;
        p = sys
            .q()
            .add(&apa.scale(gamma))?
            .sub(&gain_term.scale(gamma * gamma))?
            .symmetrize();
    }
    policy_improve_exact(sys, &p)
}

/// Frobenius norm of `P − (Q + KᵀRK + γ(A−BK)ᵀP(A−BK))`.
pub fn riccati_residual(sys: &LqrSystem, p: &Matrix, k: &Matrix) -> Result<f64> {
    let rhs = lyapunov_rhs(sys, p, k, &closed_loop(sys, k)?)?;
    Ok(p.sub(&rhs)?.frobenius_norm())
}

fn lyapunov_rhs(sys: &LqrSystem, p: &Matrix, k: &Matrix, cl: &Matrix) -> Result<Matrix> {
    let krk = matmul(&matmul(&k.transpose(), sys.r())?, k)?;
    let prop = matmul(&matmul(&cl.transpose(), p)?, cl)?;
    Ok(sys.q().add(&krk)?.add(&prop.scale(sys.gamma()))?.symmetrize())
}

fn check_policy(sys: &LqrSystem, policy: &GaussianPolicy) -> Result<()> {
    let k = policy.k();
    if k.rows() != sys.action_dim() || k.cols() != sys.state_dim() {
        return Err(Error::dims(
            "policy gain",
            alloc::format!("{}x{}", sys.action_dim(), sys.state_dim()),
            alloc::format!("{}x{}", k.rows(), k.cols()),
        ));
    }
    Ok(())
}

/// Value of a fixed Gaussian policy: iterates
/// `P ← Q + KᵀRK + γ(A−BK)ᵀP(A−BK)` from `P₀ = Q`.
pub fn lyapunov_fixed_gain(
    sys: &LqrSystem,
    policy: &GaussianPolicy,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution> {
    check_policy(sys, policy)?;
    let k = policy.k();
    let radius = discounted_closed_loop_radius(sys, k)?;
    if !(radius < 1.0) {
        return Err(Error::UnstableClosedLoop { radius });
    }
    let cl = closed_loop(sys, k)?;
    let mut p = sys.q().clone();
    let mut delta = f64::INFINITY;
    for it in 1..=max_iter {
        let next = lyapunov_rhs(sys, &p, k, &cl)?;
        if !next.is_finite() {
            return Err(Error::non_finite("Lyapunov iterate"));
        }
        delta = next.sub(&p)?.frobenius_norm();
        p = next;
        if delta < tol {
            let c = value_constant(sys, &p, policy.sigma())?;
            return Ok(RiccatiSolution {
                p,
                k: k.clone(),
                sigma: policy.sigma().clone(),
                c,
                iterations: it,
            });
        }
    }
    Err(Error::NoConvergence {
        what: "Lyapunov iteration",
        iterations: max_iter,
        residual: delta,
    })
}

/// Soft-Q coefficients of a policy whose value `(P, c)` is already known.
pub fn soft_q_from_value(sys: &LqrSystem, p: &Matrix, c: f64) -> Result<SoftQCoefficients> {
    let gamma = sys.gamma();
    let at = sys.a().transpose();
    let apa = matmul(&matmul(&at, p)?, sys.a())?;
    let apb = matmul(&matmul(&at, p)?, sys.b())?;
    let noise = matmul(p, sys.sigma_w())?.trace();
    Ok(SoftQCoefficients {
        m_xx: sys.q().add(&apa.scale(gamma))?.symmetrize(),
        m_uu: action_curvature(sys, p)?,
        m_xu: apb.scale(gamma),
        constant: gamma * (c + noise),
    })
}

pub fn soft_q_coefficients(sys: &LqrSystem, policy: &GaussianPolicy) -> Result<SoftQCoefficients> {
    let sol = lyapunov_fixed_gain(sys, policy, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    soft_q_from_value(sys, &sol.p, sol.c)
}

pub fn soft_q(sys: &LqrSystem, policy: &GaussianPolicy, x: &[f64], u: &[f64]) -> Result<f64> {
    if x.len() != sys.state_dim() || u.len() != sys.action_dim() {
        return Err(Error::dims(
            "soft_q",
            alloc::format!("({}, {})", sys.state_dim(), sys.action_dim()),
            alloc::format!("({}, {})", x.len(), u.len()),
        ));
    }
    Ok(soft_q_coefficients(sys, policy)?.eval(x, u))
}

fn improve_from(sys: &LqrSystem, p: &Matrix) -> Result<(Matrix, Matrix)> {
    let h = action_curvature(sys, p)?;
    let bpa = matmul(&matmul(&sys.b().transpose(), p)?, sys.a())?;
    let k = crate::linalg::solve_spd(&h, &bpa)?.scale(sys.gamma());
    let sigma = inverse_spd(&h)?.scale(0.5 * sys.alpha()).symmetrize();
    Ok((k, sigma))
}

/// Greedy max-entropy policy against the value matrix `P`:
/// `K⁺ = γ(R+γBᵀPB)⁻¹BᵀPA`, `Σ⁺ = (α/2)(R+γBᵀPB)⁻¹`.
pub fn policy_improve_exact(sys: &LqrSystem, p: &Matrix) -> Result<GaussianPolicy> {
    if p.rows() != sys.state_dim() || !p.is_square() {
        return Err(Error::dims("policy_improve_exact", sys.state_dim(), p.rows()));
    }
    cholesky(p).map_err(|_| Error::NotPositiveDefinite { what: "value matrix P" })?;
    let (k, sigma) = improve_from(sys, p)?;
    GaussianPolicy::new(k, sigma)
}

/// One round of soft policy iteration: the evaluated policy and its value.
#[derive(Debug, Clone, PartialEq)]
pub struct SpiStep {
    pub policy: GaussianPolicy,
    pub value: RiccatiSolution,
}

/// Exact soft policy iteration. Returns one entry per evaluated policy,
/// starting with `policy0`.
pub fn spi_exact(sys: &LqrSystem, policy0: &GaussianPolicy, iters: usize, tol: f64) -> Result<Vec<SpiStep>> {
    check_policy(sys, policy0)?;
    let radius = discounted_closed_loop_radius(sys, policy0.k())?;
    if !(radius < 1.0) {
        return Err(Error::UnstableClosedLoop { radius });
    }
    let mut steps = Vec::new();
    let mut policy = policy0.clone();
    for _ in 0..iters {
        let value = lyapunov_fixed_gain(sys, &policy, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        let next = policy_improve_exact(sys, &value.p)?;
        let change = next.k().sub(policy.k())?.frobenius_norm();
        steps.push(SpiStep { policy, value });
        let radius = discounted_closed_loop_radius(sys, next.k())?;
        if !(radius < 1.0) {
            return Err(Error::UnstableClosedLoop { radius });
        }
        policy = next;
        if change < tol {
            break;
        }
    }
    let value = lyapunov_fixed_gain(sys, &policy, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    steps.push(SpiStep { policy, value });
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;
    use crate::lqr::InitialState;

    fn scalar(sigma_w: f64, alpha: f64) -> LqrSystem {
        let one = Matrix::identity(1);
        LqrSystem::new(
            one.clone(),
            one.clone(),
            one.clone(),
            one.clone(),
            0.9,
            one.scale(sigma_w),
            alpha,
            InitialState::Fixed(Vector::new(alloc::vec![1.0]).unwrap()),
        )
        .unwrap()
    }

    // Positive root of 0.9 P² − 0.8 P − 1 = 0.
    fn scalar_p_star() -> f64 {
        (0.8 + libm::sqrt(0.64 + 3.6)) / 1.8
    }

    #[test]
    fn scalar_riccati() {
        let sys = scalar(0.0, 1.0);
        let sol = riccati_value_iteration(&sys, 1e-12, DEFAULT_MAX_ITER).unwrap();
        let p = scalar_p_star();
        assert!((sol.p.get(0, 0) - p).abs() < 1e-10);
        assert!((sol.p.get(0, 0) - 1.58840).abs() < 1e-5);
        assert!((sol.k.get(0, 0) - 0.9 * p / (1.0 + 0.9 * p)).abs() < 1e-10);
        assert!((sol.sigma.get(0, 0) - 0.5 / (1.0 + 0.9 * p)).abs() < 1e-10);
        assert!(riccati_residual(&sys, &sol.p, &sol.k).unwrap() < 1e-10);
    }

    #[test]
    fn zero_dynamics() {
        let i = Matrix::identity(2);
        for gamma in [0.1, 0.5, 0.95] {
            let sys = LqrSystem::new(
                Matrix::zeros(2, 2),
                i.clone(),
                i.clone(),
                i.clone(),
                gamma,
                Matrix::zeros(2, 2),
                2.0,
                InitialState::Fixed(Vector::zeros(2)),
            )
            .unwrap();
            let sol = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            assert!(sol.p.sub(&i).unwrap().frobenius_norm() < 1e-14);
            assert!(sol.k.frobenius_norm() < 1e-14);
            let expect = 2.0 / (2.0 * (1.0 + gamma));
            assert!(sol.sigma.sub(&i.scale(expect)).unwrap().frobenius_norm() < 1e-14);
        }
    }

    #[test]
    fn lyapunov_scalar_gain() {
        let sys = scalar(0.0, 1.0);
        let pol = GaussianPolicy::new(Matrix::diag(&[0.8]).unwrap(), Matrix::identity(1)).unwrap();
        let sol = lyapunov_fixed_gain(&sys, &pol, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((sol.p.get(0, 0) - 1.64 / 0.964).abs() < 1e-9);
    }

    #[test]
    fn lyapunov_rejects_unstable_gain() {
        let sys = scalar(0.0, 1.0);
        let pol = GaussianPolicy::new(Matrix::diag(&[-0.5]).unwrap(), Matrix::identity(1)).unwrap();
        let err = lyapunov_fixed_gain(&sys, &pol, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap_err();
        assert!(matches!(err, Error::UnstableClosedLoop { radius } if (radius - libm::sqrt(0.9) * 1.5).abs() < 1e-9));
    }

    #[test]
    fn soft_q_constant_at_origin() {
        let sys = scalar(1.0, 1.0);
        let opt = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let pol = opt.policy().unwrap();
        let sol = lyapunov_fixed_gain(&sys, &pol, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let q0 = soft_q(&sys, &pol, &[0.0], &[0.0]).unwrap();
        assert!((q0 + 0.9 * (sol.c + sol.p.get(0, 0))).abs() < 1e-12);
    }

    #[test]
    fn improvement_scales_with_alpha() {
        let sys = scalar(0.0, 1.0);
        let sys2 = sys.with_alpha(2.0).unwrap();
        let p = Matrix::diag(&[1.3]).unwrap();
        let a = policy_improve_exact(&sys, &p).unwrap();
        let b = policy_improve_exact(&sys2, &p).unwrap();
        assert_eq!(a.k(), b.k());
        assert!((b.sigma().get(0, 0) - 2.0 * a.sigma().get(0, 0)).abs() < 1e-15);
    }
}
