//! Distance of a trained policy to the closed-form optimum along its own
//! trajectories.

use flowsac_core::linalg::sym_spectral_norm;
use flowsac_core::lqr::LqrSystem;
use flowsac_core::oracle::RiccatiSolution;
use flowsac_core::rng::{fill_standard_normal, stream_rng, Stream};
use flowsac_core::{Matrix, Vector};
use rand::Rng;

use crate::bench::moments;
use crate::checkpoint::LoadedPolicy;
use crate::{parallel_map, CliError};

impl LoadedPolicy {
    pub fn state_dim(&self) -> usize {
        match self {
            LoadedPolicy::Flow(f) => f.state_dim(),
            LoadedPolicy::Gaussian(g) => g.k().cols(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            LoadedPolicy::Flow(f) => f.action_dim(),
            LoadedPolicy::Gaussian(g) => g.k().rows(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &Vector, rng: &mut R) -> Result<Vector, CliError> {
        match self {
            LoadedPolicy::Flow(f) => {
                let mut u = vec![0.0; f.action_dim()];
                fill_standard_normal(rng, &mut u);
                let mut scratch = Default::default();
                f.push_forward(x.as_slice(), &mut u, false, &mut scratch)?;
                Ok(Vector::new(u)?)
            }
            LoadedPolicy::Gaussian(g) => Ok(g.sample(x, rng)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub n_traj: usize,
    pub traj_len: usize,
    pub n_action_samples: usize,
}

/// Statistics at one visited state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRow {
    pub traj: usize,
    pub t: usize,
    pub x: Vec<f64>,
    pub mu_hat: Vec<f64>,
    pub dist_mu: f64,
    pub dist_sigma: f64,
}

/// Mean and standard deviation of the distances over all visited states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub alpha: f64,
    pub n_states: usize,
    pub mean_dist_mu: f64,
    pub std_dist_mu: f64,
    pub mean_dist_sigma: f64,
    pub std_dist_sigma: f64,
}

pub const SUMMARY_HEADER: &str = "alpha,n_states,mean_dist_mu,std_dist_mu,mean_dist_sigma,std_dist_sigma";

impl EvalSummary {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.alpha, self.n_states, self.mean_dist_mu, self.std_dist_mu, self.mean_dist_sigma, self.std_dist_sigma
        )
    }
}

pub fn states_header(state_dim: usize, action_dim: usize) -> String {
    let mut cols = vec!["traj".to_string(), "t".to_string()];
    cols.extend((0..state_dim).map(|i| format!("x{i}")));
    cols.extend((0..action_dim).map(|i| format!("mu_hat{i}")));
    cols.push("dist_mu".to_string());
    cols.push("dist_sigma".to_string());
    cols.join(",")
}

impl StateRow {
    pub fn csv_line(&self) -> String {
        let mut cols = vec![self.traj.to_string(), self.t.to_string()];
        cols.extend(self.x.iter().map(|v| v.to_string()));
        cols.extend(self.mu_hat.iter().map(|v| v.to_string()));
        cols.push(self.dist_mu.to_string());
        cols.push(self.dist_sigma.to_string());
        cols.join(",")
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Rolls the policy out `n_traj` times for `traj_len` steps from the system's
/// initial state law. At every visited state, `n_action_samples` actions give
/// `μ̂` and `Σ̂`, compared with `−K*x` and `Σ*` in the Euclidean and spectral
/// norms. Trajectory `i` uses its own random streams, so results do not depend
/// on the thread count.
pub fn evaluate_policy(
    sys: &LqrSystem,
    policy: &LoadedPolicy,
    optimum: &RiccatiSolution,
    settings: EvalSettings,
    seed: u64,
    threads: usize,
) -> Result<(Vec<StateRow>, EvalSummary), CliError> {
    if settings.n_action_samples < 2 {
        return Err(CliError::Config(
            "evaluate: n_action_samples must be at least 2 to estimate a covariance".to_string(),
        ));
    }
    if settings.n_traj == 0 || settings.traj_len == 0 {
        return Err(CliError::Config(
            "evaluate: n_traj and traj_len must be at least 1".to_string(),
        ));
    }
    if policy.state_dim() != sys.state_dim() || policy.action_dim() != sys.action_dim() {
        return Err(CliError::Config(format!(
            "evaluate: checkpoint dimensions ({}, {}) do not match the configured system ({}, {})",
            policy.state_dim(),
            policy.action_dim(),
            sys.state_dim(),
            sys.action_dim()
        )));
    }
    let trajectories: Vec<usize> = (0..settings.n_traj).collect();
    let per_traj = parallel_map(&trajectories, threads, |&traj| {
        rollout_rows(sys, policy, optimum, settings, seed, traj)
    });
    let mut rows = Vec::with_capacity(settings.n_traj * settings.traj_len);
    for r in per_traj {
        rows.extend(r?);
    }
    let dist_mu: Vec<f64> = rows.iter().map(|r| r.dist_mu).collect();
    let dist_sigma: Vec<f64> = rows.iter().map(|r| r.dist_sigma).collect();
    let (mean_dist_mu, std_dist_mu) = mean_std(&dist_mu);
    let (mean_dist_sigma, std_dist_sigma) = mean_std(&dist_sigma);
    Ok((
        rows,
        EvalSummary {
            alpha: sys.alpha(),
            n_states: dist_mu.len(),
            mean_dist_mu,
            std_dist_mu,
            mean_dist_sigma,
            std_dist_sigma,
        },
    ))
}

fn rollout_rows(
    sys: &LqrSystem,
    policy: &LoadedPolicy,
    optimum: &RiccatiSolution,
    settings: EvalSettings,
    seed: u64,
    traj: usize,
) -> Result<Vec<StateRow>, CliError> {
    let mut env_rng = stream_rng(seed, Stream::Evaluation, traj as u64);
    let mut action_rng = stream_rng(seed, Stream::Samples, traj as u64);
    let mut x = sys.sample_initial_state(&mut env_rng);
    let mut rows = Vec::with_capacity(settings.traj_len);
    for t in 0..settings.traj_len {
        let draws: Vec<Vec<f64>> = (0..settings.n_action_samples)
            .map(|_| policy.sample(&x, &mut action_rng).map(Vector::into_vec))
            .collect::<Result<_, _>>()?;
        let (mu_hat, sigma_hat) = moments(&draws);
        let mu_star: Vec<f64> = optimum.k.matvec(x.as_slice())?.into_iter().map(|v| -v).collect();
        let dist_mu = mu_hat
            .as_slice()
            .iter()
            .zip(&mu_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let diff: Matrix = sigma_hat.sub(&optimum.sigma)?.symmetrize();
        let dist_sigma = sym_spectral_norm(&diff)?;
        rows.push(StateRow {
            traj,
            t,
            x: x.as_slice().to_vec(),
            mu_hat: mu_hat.into_vec(),
            dist_mu,
            dist_sigma,
        });
        let u = policy.sample(&x, &mut env_rng)?;
        x = sys.env_step(&x, &u, &mut env_rng)?.x_next;
    }
    Ok(rows)
}
