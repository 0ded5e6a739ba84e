mod common;

use std::time::Instant;

use common::v;
use flowsac_core::linalg::{solve_spd, sym_eigen};
use flowsac_core::lqr::{
    diag_gaussian_log_pdf, discounted_return, gaussian_entropy, renyi4_mc, GaussianPolicy, InitialState, LqrSystem,
};
use flowsac_core::oracle::{
    discounted_closed_loop_radius, lyapunov_fixed_gain, policy_improve_exact, riccati_residual, riccati_sweeps,
    riccati_value_iteration, soft_q, spi_exact, DEFAULT_MAX_ITER, DEFAULT_SPI_TOL, DEFAULT_TOL,
};
use flowsac_core::rng::{standard_normal, stream_rng, Stream};
use flowsac_core::{Error, Matrix, Vector};
use proptest::prelude::*;
use rand::Rng;

fn m1(v: f64) -> Matrix {
    Matrix::new(1, 1, vec![v]).unwrap()
}

fn scalar(sigma_w: f64, alpha: f64, x0: f64) -> LqrSystem {
    LqrSystem::new(
        m1(1.0),
        m1(1.0),
        m1(1.0),
        m1(1.0),
        0.9,
        m1(sigma_w),
        alpha,
        InitialState::Fixed(v(&[x0])),
    )
    .unwrap()
}

fn ring5_a() -> Matrix {
    let mut a = Matrix::identity(5).scale(0.55).to_rows();
    for (i, row) in a.iter_mut().enumerate() {
        row[(i + 1) % 5] = 0.55;
    }
    Matrix::from_rows(&a).unwrap()
}

fn ring5(alpha: f64) -> LqrSystem {
    let i5 = Matrix::identity(5);
    LqrSystem::new(
        ring5_a(),
        i5.clone(),
        i5.clone(),
        i5.clone(),
        0.9,
        i5,
        alpha,
        InitialState::Fixed(Vector::zeros(5)),
    )
    .unwrap()
}

/// Scalar Riccati map `P ← 1 + γP − γ²P²/(1 + γP)` iterated from `P = 1`.
fn brute_force_scalar_p() -> f64 {
    let g = 0.9;
    let mut p = 1.0f64;
    loop {
        let next = 1.0 + g * p - g * g * p * p / (1.0 + g * p);
        if (next - p).abs() < 1e-14 {
            return next;
        }
        p = next;
    }
}

/// Dense Gaussian elimination with partial pivoting for a general square system.
fn solve_general(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Discounted Lyapunov solve through the vectorized linear system
/// `(I − γ Lᵀ⊗Lᵀ) vec P = vec(Q + KᵀRK)` with `L = A − BK`.
fn lyapunov_direct(sys: &LqrSystem, k: &Matrix) -> Matrix {
    let n = sys.state_dim();
    let l = sys.a().sub(&sys.b().matmul(k).unwrap()).unwrap();
    let rhs = sys
        .q()
        .add(&k.transpose().matmul(sys.r()).unwrap().matmul(k).unwrap())
        .unwrap();
    let mut a = vec![vec![0.0; n * n]; n * n];
    // P_ij − γ Σ_{pq} L_pi L_qj P_pq
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            a[row][row] += 1.0;
            for p in 0..n {
                for q in 0..n {
                    a[row][p * n + q] -= sys.gamma() * l.get(p, i) * l.get(q, j);
                }
            }
        }
    }
    let b: Vec<f64> = rhs.as_slice().to_vec();
    Matrix::new(n, n, solve_general(a, b)).unwrap().symmetrize()
}

/// Classic (risk-neutral) LQR policy iteration gains, starting from `k0`.
fn classic_pi(sys: &LqrSystem, k0: &Matrix, iters: usize) -> Vec<Matrix> {
    let mut gains = vec![k0.clone()];
    let mut k = k0.clone();
    for _ in 0..iters {
        let p = lyapunov_direct(sys, &k);
        let bt = sys.b().transpose();
        let h = sys
            .r()
            .add(&bt.matmul(&p).unwrap().matmul(sys.b()).unwrap().scale(sys.gamma()))
            .unwrap();
        let rhs = bt.matmul(&p).unwrap().matmul(sys.a()).unwrap().scale(sys.gamma());
        k = solve_spd(&h, &rhs).unwrap();
        gains.push(k.clone());
    }
    gains
}

fn min_eigenvalue(m: &Matrix) -> f64 {
    sym_eigen(&m.symmetrize()).unwrap().0[0]
}

#[test]
fn scalar_riccati_matches_brute_force() {
    let start = Instant::now();
    let sys = scalar(1.0, 1.0, 0.0);
    let sol = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let p = brute_force_scalar_p();
    assert!((sol.p.get(0, 0) - p).abs() < 1e-4);
    assert!((sol.p.get(0, 0) - 1.58840).abs() < 1e-4);
    assert!((sol.k.get(0, 0) - 0.9 * p / (1.0 + 0.9 * p)).abs() < 1e-8);
    assert!((sol.sigma.get(0, 0) - 1.0 / (2.0 * (1.0 + 0.9 * p))).abs() < 1e-8);
    assert!(riccati_residual(&sys, &sol.p, &sol.k).unwrap() < 1e-10);
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn ring5_riccati_is_stabilizing() {
    let sys = ring5(1.0);
    let sol = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    assert!(riccati_residual(&sys, &sol.p, &sol.k).unwrap() < 1e-8);
    assert!(discounted_closed_loop_radius(&sys, &sol.k).unwrap() < 1.0);
    assert!(sol.p.max_abs_asymmetry() < 1e-10);
    // Open loop is not stable in the discounted sense.
    assert!(discounted_closed_loop_radius(&sys, &Matrix::zeros(5, 5)).unwrap() > 1.0);
}

/// Entropy-regularized return of the policy after a fixed first action:
/// `r(x, u) + Σ_{t≥1} γᵗ [r_t + α H]`.
fn soft_q_monte_carlo(
    sys: &LqrSystem,
    pol: &GaussianPolicy,
    x: f64,
    u: f64,
    n: usize,
    horizon: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = stream_rng(seed, Stream::Rollout, 0);
    let h = pol.entropy();
    let mut returns = Vec::with_capacity(n);
    for _ in 0..n {
        let mut state = v(&[x]);
        let mut action = v(&[u]);
        let mut total = 0.0;
        let mut discount = 1.0;
        for t in 0..horizon {
            if t > 0 {
                action = pol.sample(&state, &mut rng).unwrap();
            }
            let tr = sys.env_step(&state, &action, &mut rng).unwrap();
            total += discount * (tr.r + if t > 0 { sys.alpha() * h } else { 0.0 });
            discount *= sys.gamma();
            state = tr.x_next;
        }
        returns.push(total);
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

#[test]
fn soft_q_matches_monte_carlo() {
    let start = Instant::now();
    let sys = scalar(1.0, 1.0, 0.0);
    let pol = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER)
        .unwrap()
        .policy()
        .unwrap();
    let mut rng = stream_rng(21, Stream::Samples, 0);
    let mut points = vec![(1.0, 0.0)];
    points.extend((0..3).map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))));
    for (i, (x, u)) in points.into_iter().enumerate() {
        let exact = soft_q(&sys, &pol, &[x], &[u]).unwrap();
        let (mc, se) = soft_q_monte_carlo(&sys, &pol, x, u, 2000, 200, i as u64);
        let rel = (mc - exact).abs() / exact.abs();
        assert!(
            rel < 0.02,
            "(x, u) = ({x}, {u}): closed form {exact}, Monte Carlo {mc} ± {se}"
        );
    }
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn deterministic_optimal_return_is_minus_p() {
    let sys = scalar(0.0, 1.0, 1.0);
    let sol = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let k = sol.k.get(0, 0);
    let mut rng = stream_rng(0, Stream::Evaluation, 0);
    let ret = discounted_return(&sys, |x, _| Ok(v(&[-k * x[0]])), 200, 1, None, &mut rng).unwrap();
    assert!((ret.mean + sol.p.get(0, 0)).abs() < 0.01 * sol.p.get(0, 0));
}

#[test]
fn gaussian_optimal_soft_return_matches_value() {
    let sys = scalar(1.0, 1.0, 1.0);
    let sol = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let pol = sol.policy().unwrap();
    let h = pol.entropy();
    let entropy = move |_: &Vector| Ok(h);
    let mut rng = stream_rng(1, Stream::Evaluation, 0);
    let ret = discounted_return(&sys, |x, r| pol.sample(x, r), 200, 2000, Some(&entropy), &mut rng).unwrap();
    let exact = sol.value(&[1.0]);
    assert!((ret.mean - exact).abs() < 0.02 * exact.abs(), "{ret:?} vs {exact}");
}

#[test]
fn return_standard_error_shrinks_with_root_n() {
    let sys = scalar(1.0, 1.0, 0.0);
    let pol = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER)
        .unwrap()
        .policy()
        .unwrap();
    let est = |n: usize| {
        let mut rng = stream_rng(n as u64, Stream::Evaluation, 0);
        discounted_return(&sys, |x, r| pol.sample(x, r), 100, n, None, &mut rng).unwrap()
    };
    let ratio = est(400).std_err / est(100).std_err;
    assert!((0.4..=0.6).contains(&ratio), "ratio {ratio}");
}

#[test]
fn noiseless_steps_are_deterministic() {
    let sys = LqrSystem::new(
        ring5_a(),
        Matrix::identity(5),
        Matrix::identity(5),
        Matrix::identity(5),
        0.9,
        Matrix::zeros(5, 5),
        1.0,
        InitialState::Fixed(Vector::zeros(5)),
    )
    .unwrap();
    let x = v(&[1.0, 0.0, 0.0, 0.0, 0.0]);
    let u = Vector::zeros(5);
    let a = sys.env_step(&x, &u, &mut stream_rng(1, Stream::Rollout, 0)).unwrap();
    let b = sys.env_step(&x, &u, &mut stream_rng(2, Stream::Rollout, 0)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.x_next.as_slice(), &[0.55, 0.0, 0.0, 0.0, 0.55]);
    assert_eq!(a.r, -1.0);
}

fn check_spi(sys: &LqrSystem, k0: &Matrix, label: &str) {
    let opt = riccati_value_iteration(sys, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let p0 = GaussianPolicy::new(k0.clone(), opt.sigma.scale(3.0)).unwrap();
    let steps = spi_exact(sys, &p0, 50, DEFAULT_SPI_TOL).unwrap();
    assert!(steps.len() <= 51, "{label}: {} policies", steps.len());
    let last = steps.last().unwrap();
    let gap = last.policy.k().sub(&opt.k).unwrap().frobenius_norm();
    assert!(gap < 1e-6, "{label}: gain gap {gap}");
    for (i, w) in steps.windows(2).enumerate() {
        // Values are −xᵀPx − c, so improvement means P shrinks.
        let diff = w[1].value.p.sub(&w[0].value.p).unwrap();
        assert!(min_eigenvalue(&diff.scale(-1.0)) >= -1e-9, "{label}: step {i} raised P");
    }
    let classic = classic_pi(sys, k0, steps.len() - 1);
    for (i, (s, k)) in steps.iter().zip(&classic).enumerate() {
        let d = s.policy.k().sub(k).unwrap().frobenius_norm();
        assert!(
            d < 1e-9,
            "{label}: iteration {i} gain differs from classic policy iteration by {d}"
        );
    }
    // The gain sequence does not depend on α.
    let other = spi_exact(&sys.with_alpha(5.0 * sys.alpha()).unwrap(), &p0, 50, DEFAULT_SPI_TOL).unwrap();
    assert_eq!(other.len(), steps.len());
    for (a, b) in steps.iter().zip(&other) {
        assert!(a.policy.k().sub(b.policy.k()).unwrap().frobenius_norm() < 1e-10);
    }
}

#[test]
fn scalar_spi_converges_from_stabilizing_gain() {
    let start = Instant::now();
    let sys = scalar(1.0, 1.0, 0.0);
    check_spi(&sys, &m1(0.9), "scalar");
    let opt = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let steps = spi_exact(&sys, &GaussianPolicy::new(m1(0.9), m1(1.0)).unwrap(), 30, 1e-12).unwrap();
    assert!((steps.last().unwrap().policy.k().get(0, 0) - opt.k.get(0, 0)).abs() < 1e-8);
    assert!(steps.len() <= 31);
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn ring5_spi_converges_from_warm_start() {
    let start = Instant::now();
    let sys = ring5(1.0);
    let warm = riccati_sweeps(&sys, 3).unwrap();
    assert!(discounted_closed_loop_radius(&sys, warm.k()).unwrap() < 1.0);
    check_spi(&sys, warm.k(), "ring5");
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn spi_from_optimum_is_a_fixed_point() {
    let sys = ring5(1.0);
    let opt = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let steps = spi_exact(&sys, &opt.policy().unwrap(), 50, DEFAULT_SPI_TOL).unwrap();
    assert!(steps[1].policy.k().sub(&opt.k).unwrap().frobenius_norm() < 1e-10);
}

#[test]
fn spi_rejects_destabilizing_start() {
    let sys = ring5(1.0);
    let p0 = GaussianPolicy::new(Matrix::zeros(5, 5), Matrix::identity(5)).unwrap();
    assert!(matches!(
        spi_exact(&sys, &p0, 10, DEFAULT_SPI_TOL),
        Err(Error::UnstableClosedLoop { .. })
    ));
}

#[test]
fn lyapunov_at_optimum_matches_riccati() {
    let sys = scalar(1.0, 1.0, 0.0);
    let opt = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let lyap = lyapunov_fixed_gain(&sys, &opt.policy().unwrap(), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    assert!((lyap.p.get(0, 0) - opt.p.get(0, 0)).abs() < 1e-9);
    assert!((lyap.c - opt.c).abs() < 1e-8);
    assert!((lyapunov_direct(&sys, &m1(0.8)).get(0, 0) - 1.64 / 0.964).abs() < 1e-12);
}

#[test]
fn renyi_matches_grid_integral() {
    // p = N(0, 1), q = N(0, 4): D₄ = (1/3) log ∫ p⁴ q⁻³.
    let nodes = 100_000;
    let (lo, hi) = (-12.0f64, 12.0f64);
    let h = (hi - lo) / (nodes - 1) as f64;
    let f = |u: f64| {
        (4.0 * diag_gaussian_log_pdf(&[u], &[0.0], &[1.0]) - 3.0 * diag_gaussian_log_pdf(&[u], &[0.0], &[4.0])).exp()
    };
    let integral: f64 = (0..nodes - 1)
        .map(|i| 0.5 * h * (f(lo + i as f64 * h) + f(lo + (i + 1) as f64 * h)))
        .sum();
    let grid = integral.ln() / 3.0;
    let mut rng = stream_rng(8, Stream::Samples, 0);
    let est = renyi4_mc(
        |u| diag_gaussian_log_pdf(u, &[0.0], &[1.0]),
        |u| diag_gaussian_log_pdf(u, &[0.0], &[4.0]),
        |r| vec![2.0 * standard_normal(r)],
        100_000,
        &mut rng,
    )
    .unwrap();
    assert!(!est.divergent);
    assert!((est.value - grid).abs() < 0.02 * grid.abs(), "{est:?} vs {grid}");
}

#[test]
fn renyi_of_identical_laws_is_zero_within_noise() {
    let mut rng = stream_rng(9, Stream::Samples, 0);
    let lp = |u: &[f64]| diag_gaussian_log_pdf(u, &[0.5], &[2.0]);
    let est = renyi4_mc(
        lp,
        lp,
        |r| vec![0.5 + 2f64.sqrt() * standard_normal(r)],
        100_000,
        &mut rng,
    )
    .unwrap();
    assert!(est.value.abs() <= 3.0 * est.std_err.max(1e-12));
}

fn random_system() -> impl Strategy<Value = LqrSystem> {
    (
        prop::collection::vec(-1.5f64..1.5, 4),
        prop::collection::vec(-0.3f64..0.3, 4),
        prop::collection::vec(-1.0f64..1.0, 4),
        0.1f64..2.0,
        0.5f64..0.95,
        0.1f64..3.0,
    )
        .prop_map(|(a, b, q, r, gamma, alpha)| {
            let a = Matrix::new(2, 2, a).unwrap();
            let b = Matrix::identity(2).add(&Matrix::new(2, 2, b).unwrap()).unwrap();
            let qm = Matrix::new(2, 2, q).unwrap();
            let q = qm
                .transpose()
                .matmul(&qm)
                .unwrap()
                .add(&Matrix::identity(2).scale(0.1))
                .unwrap();
            let r = Matrix::identity(2).scale(r);
            LqrSystem::new(
                a,
                b,
                q,
                r,
                gamma,
                Matrix::identity(2).scale(0.1),
                alpha,
                InitialState::Fixed(Vector::zeros(2)),
            )
            .unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn riccati_solutions_satisfy_their_equations(sys in random_system()) {
        let sol = riccati_value_iteration(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        prop_assert!(riccati_residual(&sys, &sol.p, &sol.k).unwrap() < 10.0 * DEFAULT_TOL * sol.p.frobenius_norm().max(1.0));
        let bt = sys.b().transpose();
        let h = sys.r().add(&bt.matmul(&sol.p).unwrap().matmul(sys.b()).unwrap().scale(sys.gamma())).unwrap();
        let ident = sol.sigma.matmul(&h).unwrap().scale(2.0 / sys.alpha());
        prop_assert!(ident.sub(&Matrix::identity(2)).unwrap().frobenius_norm() < 1e-8);
        prop_assert!(discounted_closed_loop_radius(&sys, &sol.k).unwrap() < 1.0);
        // The optimum is a fixed point of exact improvement.
        let improved = policy_improve_exact(&sys, &sol.p).unwrap();
        prop_assert!(improved.k().sub(&sol.k).unwrap().frobenius_norm() < 1e-8);
        prop_assert!((gaussian_entropy(improved.sigma()).unwrap() - gaussian_entropy(&sol.sigma).unwrap()).abs() < 1e-8);
    }
}
