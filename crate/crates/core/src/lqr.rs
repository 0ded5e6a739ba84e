//! Max-entropy linear quadratic regulator.
//!
//! Dynamics `x' = A x + B u + w` with `w ~ N(0, Σ_w)`, reward
//! `r = −(xᵀQx + uᵀRu)`, discount `γ`, and entropy temperature `α`.
//! Also hosts the Gaussian analytics used to score learned policies.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::{dot, logdet_spd, matmul, sym_psd_sqrt, Matrix, Vector};
use crate::oracle;
use crate::rng::fill_standard_normal;
use crate::{Error, Result};

const LN_2PI_E: f64 = 2.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Fixed(Vector),
    Gaussian { mean: Vector, cov: Matrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrSystem {
    a: Matrix,
    b: Matrix,
    q: Matrix,
    r: Matrix,
    gamma: f64,
    sigma_w: Matrix,
    alpha: f64,
    init: InitialState,
    noise_root: Matrix,
    init_root: Option<Matrix>,
}

/// Budget for the stabilizability check run at construction.
const CONSTRUCTION_TOL: f64 = 1e-10;
const CONSTRUCTION_MAX_ITER: usize = 100_000;

impl LqrSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: Matrix,
        b: Matrix,
        q: Matrix,
        r: Matrix,
        gamma: f64,
        sigma_w: Matrix,
        alpha: f64,
        init: InitialState,
    ) -> Result<Self> {
        let n = a.rows();
        if !a.is_square() {
            return Err(Error::dims(
                "LqrSystem A",
                "square",
                format!("{}x{}", a.rows(), a.cols()),
            ));
        }
        if b.rows() != n {
            return Err(Error::dims("LqrSystem B rows", n, b.rows()));
        }
        let m = b.cols();
        if q.rows() != n || q.cols() != n {
            return Err(Error::dims(
                "LqrSystem Q",
                format!("{n}x{n}"),
                format!("{}x{}", q.rows(), q.cols()),
            ));
        }
        if r.rows() != m || r.cols() != m {
            return Err(Error::dims(
                "LqrSystem R",
                format!("{m}x{m}"),
                format!("{}x{}", r.rows(), r.cols()),
            ));
        }
        if sigma_w.rows() != n || sigma_w.cols() != n {
            return Err(Error::dims(
                "LqrSystem sigma_w",
                format!("{n}x{n}"),
                format!("{}x{}", sigma_w.rows(), sigma_w.cols()),
            ));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid("gamma", format!("{gamma} is outside (0, 1)")));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid("alpha", format!("{alpha} is not positive")));
        }
        crate::linalg::cholesky(&q).map_err(|_| Error::NotPositiveDefinite { what: "Q" })?;
        crate::linalg::cholesky(&r).map_err(|_| Error::NotPositiveDefinite { what: "R" })?;
        let noise_root = sym_psd_sqrt(&sigma_w)?;
        let init_root = match &init {
            InitialState::Fixed(x) => {
                if x.dim() != n {
                    return Err(Error::dims("initial state", n, x.dim()));
                }
                None
            }
            InitialState::Gaussian { mean, cov } => {
                if mean.dim() != n || cov.rows() != n || cov.cols() != n {
                    return Err(Error::dims("initial state distribution", n, mean.dim()));
                }
                Some(sym_psd_sqrt(cov)?)
            }
        };
        let sys = LqrSystem {
            a,
            b,
            q,
            r,
            gamma,
            sigma_w,
            alpha,
            init,
            noise_root,
            init_root,
        };
        oracle::riccati_value_iteration(&sys, CONSTRUCTION_TOL, CONSTRUCTION_MAX_ITER)?;
        Ok(sys)
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }
    pub fn b(&self) -> &Matrix {
        &self.b
    }
    pub fn q(&self) -> &Matrix {
        &self.q
    }
    pub fn r(&self) -> &Matrix {
        &self.r
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn sigma_w(&self) -> &Matrix {
        &self.sigma_w
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn initial_state(&self) -> &InitialState {
        &self.init
    }
    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }
    pub fn action_dim(&self) -> usize {
        self.b.cols()
    }

    /// Same system with a different entropy temperature.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid("alpha", format!("{alpha} is not positive")));
        }
        Ok(LqrSystem { alpha, ..self.clone() })
    }

    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        match (&self.init, &self.init_root) {
            (InitialState::Fixed(x), _) => x.clone(),
            (InitialState::Gaussian { mean, .. }, Some(root)) => {
                let n = mean.dim();
                let mut z = vec![0.0; n];
                fill_standard_normal(rng, &mut z);
                let x = (0..n).map(|i| mean[i] + dot(root.row(i), &z)).collect();
                Vector::from_vec_unchecked(x)
            }
            (InitialState::Gaussian { mean, .. }, None) => mean.clone(),
        }
    }

    /// `−(xᵀQx + uᵀRu)`
    pub fn reward(&self, x: &[f64], u: &[f64]) -> f64 {
        -(quad(&self.q, x) + quad(&self.r, u))
    }

    fn check(&self, x: usize, u: usize) -> Result<()> {
        if x != self.state_dim() {
            return Err(Error::dims("env_step state", self.state_dim(), x));
        }
        if u != self.action_dim() {
            return Err(Error::dims("env_step action", self.action_dim(), u));
        }
        Ok(())
    }

    /// Deterministic transition with an explicit noise realization `w`.
    pub fn step_with_noise(&self, x: &Vector, u: &Vector, w: &[f64]) -> Result<Transition> {
        self.check(x.dim(), u.dim())?;
        if w.len() != self.state_dim() {
            return Err(Error::dims("env_step noise", self.state_dim(), w.len()));
        }
        let (xs, us) = (x.as_slice(), u.as_slice());
        let n = self.state_dim();
        let next: Vec<f64> = (0..n)
            .map(|i| dot(self.a.row(i), xs) + dot(self.b.row(i), us) + w[i])
            .collect();
        let r = self.reward(xs, us);
        if !r.is_finite() || next.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("environment state"));
        }
        Ok(Transition {
            x: x.clone(),
            u: u.clone(),
            r,
            x_next: Vector::from_vec_unchecked(next),
        })
    }

    pub fn env_step<R: Rng + ?Sized>(&self, x: &Vector, u: &Vector, rng: &mut R) -> Result<Transition> {
        let n = self.state_dim();
        let mut z = vec![0.0; n];
        fill_standard_normal(rng, &mut z);
        let w: Vec<f64> = (0..n).map(|i| dot(self.noise_root.row(i), &z)).collect();
        self.step_with_noise(x, u, &w)
    }
}

fn quad(m: &Matrix, v: &[f64]) -> f64 {
    (0..m.rows()).map(|i| v[i] * dot(m.row(i), v)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub x: Vector,
    pub u: Vector,
    pub r: f64,
    pub x_next: Vector,
}

/// `π(·|x) = N(−Kx, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    k: Matrix,
    sigma: Matrix,
    sigma_root: Matrix,
}

impl GaussianPolicy {
    pub fn new(k: Matrix, sigma: Matrix) -> Result<Self> {
        if sigma.rows() != k.rows() || sigma.cols() != k.rows() {
            return Err(Error::dims(
                "GaussianPolicy",
                format!("{0}x{0} covariance", k.rows()),
                format!("{}x{}", sigma.rows(), sigma.cols()),
            ));
        }
        crate::linalg::cholesky(&sigma).map_err(|_| Error::NotPositiveDefinite {
            what: "policy covariance",
        })?;
        let sigma_root = sym_psd_sqrt(&sigma)?;
        Ok(GaussianPolicy { k, sigma, sigma_root })
    }

    pub fn k(&self) -> &Matrix {
        &self.k
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    pub fn mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.k.matvec(x)?.into_iter().map(|v| -v).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &Vector, rng: &mut R) -> Result<Vector> {
        let mean = self.mean(x.as_slice())?;
        let m = mean.len();
        let mut z = vec![0.0; m];
        fill_standard_normal(rng, &mut z);
        let u = (0..m).map(|i| mean[i] + dot(self.sigma_root.row(i), &z)).collect();
        Ok(Vector::from_vec_unchecked(u))
    }

    pub fn entropy(&self) -> f64 {
        gaussian_entropy(&self.sigma).expect("policy covariance is SPD by construction")
    }
}

/// `(d/2) log(2πe) + ½ log|Σ|`
pub fn gaussian_entropy(sigma: &Matrix) -> Result<f64> {
    let d = sigma.rows() as f64;
    Ok(0.5 * d * LN_2PI_E + 0.5 * logdet_spd(sigma)?)
}

/// 2-Wasserstein distance between `N(μ₁, Σ₁)` and `N(μ₂, Σ₂)`.
pub fn w2_gaussians(mu1: &Vector, sigma1: &Matrix, mu2: &Vector, sigma2: &Matrix) -> Result<f64> {
    let d = mu1.dim();
    if mu2.dim() != d || sigma1.rows() != d || sigma2.rows() != d || !sigma1.is_square() || !sigma2.is_square() {
        return Err(Error::dims(
            "w2_gaussians",
            d,
            format!("{} / {}", mu2.dim(), sigma2.rows()),
        ));
    }
    crate::linalg::cholesky(sigma1).map_err(|_| Error::NotPositiveDefinite { what: "sigma1" })?;
    crate::linalg::cholesky(sigma2).map_err(|_| Error::NotPositiveDefinite { what: "sigma2" })?;
    let root2 = sym_psd_sqrt(sigma2)?;
    let inner = matmul(&matmul(&root2, sigma1)?, &root2)?.symmetrize();
    let cross = sym_psd_sqrt(&inner)?;
    let mean_sq = mu1.sub(mu2)?.as_slice().iter().map(|v| v * v).sum::<f64>();
    let bures = sigma1.trace() + sigma2.trace() - 2.0 * cross.trace();
    Ok(libm::sqrt((mean_sq + bures).max(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Monte-Carlo discounted return `Σ_{t<horizon} γᵗ [r_t + α H(x_t)]` from the
/// system's initial state law. The entropy term is included only when
/// `entropy_fn` is given.
pub fn discounted_return<R, A>(
    sys: &LqrSystem,
    mut act: A,
    horizon: usize,
    n_traj: usize,
    entropy_fn: Option<&dyn Fn(&Vector) -> Result<f64>>,
    rng: &mut R,
) -> Result<ReturnEstimate>
where
    R: Rng + ?Sized,
    A: FnMut(&Vector, &mut R) -> Result<Vector>,
{
    if horizon == 0 || n_traj == 0 {
        return Err(Error::invalid("horizon/n_traj", "must both be at least 1"));
    }
    let mut returns = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let mut x = sys.sample_initial_state(rng);
        let mut total = 0.0;
        let mut discount = 1.0;
        for _ in 0..horizon {
            let u = act(&x, rng)?;
            if u.dim() != sys.action_dim() {
                return Err(Error::dims("action sampler", sys.action_dim(), u.dim()));
            }
            let t = sys.env_step(&x, &u, rng)?;
            let mut reward = t.r;
            if let Some(h) = entropy_fn {
                reward += sys.alpha() * h(&x)?;
            }
            total += discount * reward;
            discount *= sys.gamma();
            x = t.x_next;
        }
        returns.push(total);
    }
    Ok(mean_and_stderr(&returns))
}

pub(crate) fn mean_and_stderr(values: &[f64]) -> ReturnEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    ReturnEstimate {
        mean,
        std_err: libm::sqrt(var / n),
    }
}

/// Monte-Carlo fourth-order Rényi divergence estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Renyi4Estimate {
    /// `(1/3) log mean exp(4 (log p − log q))`
    pub value: f64,
    /// Delta-method standard error of `value`.
    pub std_err: f64,
    /// Relative standard error of the mean of the fourth-power ratios.
    pub ratio_rel_std_err: f64,
    /// Set when the ratio moments look infinite: the estimate is dominated by a
    /// few samples and should not be trusted.
    pub divergent: bool,
}

/// Relative standard error above which [`renyi4_mc`] flags divergence.
pub const RENYI_DIVERGENCE_THRESHOLD: f64 = 0.1;

/// `D₄(p‖q) = (1/3) log E_q[(p/q)⁴]` by Monte Carlo over `n` draws from `q`,
/// accumulated in log-sum-exp form.
pub fn renyi4_mc<R, P, Q, S>(log_p: P, log_q: Q, mut sample_q: S, n: usize, rng: &mut R) -> Result<Renyi4Estimate>
where
    R: Rng + ?Sized,
    P: Fn(&[f64]) -> f64,
    Q: Fn(&[f64]) -> f64,
    S: FnMut(&mut R) -> Vec<f64>,
{
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let u = sample_q(rng);
        let lr = log_p(&u) - log_q(&u);
        if !lr.is_finite() {
            return Err(Error::non_finite(format!("log density ratio at sample {i}")));
        }
        terms.push(4.0 * lr);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = terms.iter().map(|t| libm::exp(t - max)).collect();
    let nf = n as f64;
    let mean = scaled.iter().sum::<f64>() / nf;
    let var = if n > 1 {
        scaled.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (nf - 1.0)
    } else {
        0.0
    };
    let rel = libm::sqrt(var / nf) / mean;
    Ok(Renyi4Estimate {
        value: (libm::log(mean) + max) / 3.0,
        std_err: rel / 3.0,
        ratio_rel_std_err: rel,
        divergent: rel > RENYI_DIVERGENCE_THRESHOLD,
    })
}

/// Log-density of `N(mean, diag(var))`.
pub fn diag_gaussian_log_pdf(u: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    u.iter()
        .zip(mean)
        .zip(var)
        .map(|((u, m), v)| -0.5 * ((u - m) * (u - m) / v + libm::log(2.0 * core::f64::consts::PI * v)))
        .sum()
}
