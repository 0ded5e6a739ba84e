//! Static importance-sampling flow-matching benchmark.
//!
//! A flow with no state input is fit to a Gaussian target using samples from
//! a zero-mean isotropic Gaussian, reweighted by the density ratio. Each cell
//! of the sweep (sample size × sampling width) is trained once per seed; the
//! error is the squared 2-Wasserstein distance between the moments of the
//! trained flow and the target.
//!
//! Seeds share random numbers across cells: for seed `s`, the sampling draws
//! are `σ·zᵢ` with the same `zᵢ` for every width, smaller sample sizes use a
//! prefix of the same sequence, and initialization, CondOT draws and
//! evaluation noise are common too. Cell comparisons are therefore paired.

use flowsac_core::flow_matching::{accumulate_weighted_loss, draw_pairs, importance_weights, LossScratch};
use flowsac_core::flow_policy::FlowPolicy;
use flowsac_core::linalg::{cholesky, inverse_spd, logdet_spd};
use flowsac_core::lqr::{renyi4_mc, w2_gaussians, Renyi4Estimate};
use flowsac_core::nn::{cosine_learning_rate, AdamConfig, AdamState, GradientBundle};
use flowsac_core::rng::{fill_standard_normal, stream_rng, Stream};
use flowsac_core::{Matrix, Vector};

use crate::config::BenchSection;
use crate::{parallel_map, CliError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Offset of the stream indices used for the divergence estimates, far from
/// the per-seed indices.
const D4_STREAM_OFFSET: u64 = 1 << 32;

/// A validated benchmark description.
#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub target_mean: Vector,
    pub target_cov: Matrix,
    target_precision: Matrix,
    target_logdet: f64,
    pub sample_sizes: Vec<usize>,
    pub sampling_sigmas: Vec<f64>,
    pub seeds: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub hidden: Vec<usize>,
    pub mc_pairs: usize,
    pub ode_steps: usize,
    pub eval_samples: usize,
    pub d4_samples: usize,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(format!("isfm_bench: {}", msg.into()))
}

impl BenchSpec {
    pub fn from_section(s: &BenchSection) -> Result<Self, CliError> {
        let d = s.target_mean.len();
        if d != 1 && d != 2 {
            return Err(bad(format!("target_mean must have 1 or 2 entries, found {d}")));
        }
        let target_mean = Vector::new(s.target_mean.clone()).map_err(|e| bad(format!("target_mean: {e}")))?;
        let target_cov = Matrix::from_rows(&s.target_cov).map_err(|e| bad(format!("target_cov: {e}")))?;
        if target_cov.rows() != d || target_cov.cols() != d {
            return Err(bad(format!("target_cov must be {d}x{d}")));
        }
        cholesky(&target_cov).map_err(|_| bad("target_cov is not symmetric positive definite"))?;
        if s.sample_sizes.is_empty() || s.sample_sizes.contains(&0) {
            return Err(bad("sample_sizes must be non-empty and positive"));
        }
        if s.sampling_sigmas.is_empty() || s.sampling_sigmas.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(bad("sampling_sigmas must be non-empty and positive"));
        }
        for (name, v) in [
            ("seeds", s.seeds),
            ("steps", s.steps),
            ("mc_pairs", s.mc_pairs),
            ("ode_steps", s.ode_steps),
            ("d4_samples", s.d4_samples),
        ] {
            if v == 0 {
                return Err(bad(format!("{name} must be at least 1")));
            }
        }
        if s.eval_samples < 2 {
            return Err(bad("eval_samples must be at least 2"));
        }
        if !(s.learning_rate > 0.0) || !(s.final_learning_rate > 0.0) {
            return Err(bad("learning rates must be positive"));
        }
        if s.hidden.contains(&0) {
            return Err(bad("hidden widths must be positive"));
        }
        Ok(BenchSpec {
            target_precision: inverse_spd(&target_cov).map_err(|e| bad(e.to_string()))?,
            target_logdet: logdet_spd(&target_cov).map_err(|e| bad(e.to_string()))?,
            target_mean,
            target_cov,
            sample_sizes: s.sample_sizes.clone(),
            sampling_sigmas: s.sampling_sigmas.clone(),
            seeds: s.seeds,
            steps: s.steps,
            learning_rate: s.learning_rate,
            final_learning_rate: s.final_learning_rate,
            hidden: s.hidden.clone(),
            mc_pairs: s.mc_pairs,
            ode_steps: s.ode_steps,
            eval_samples: s.eval_samples,
            d4_samples: s.d4_samples,
        })
    }

    pub fn dim(&self) -> usize {
        self.target_mean.dim()
    }

    pub fn target_log_pdf(&self, u: &[f64]) -> f64 {
        let d = self.dim();
        let diff: Vec<f64> = u.iter().zip(self.target_mean.as_slice()).map(|(a, m)| a - m).collect();
        let mut quad = 0.0;
        for (i, di) in diff.iter().enumerate() {
            for (j, dj) in diff.iter().enumerate() {
                quad += di * self.target_precision.get(i, j) * dj;
            }
        }
        -0.5 * (quad + self.target_logdet + d as f64 * LN_2PI)
    }
}

fn sampling_log_pdf(u: &[f64], sigma: f64) -> f64 {
    let v = sigma * sigma;
    u.iter()
        .map(|x| -0.5 * (x * x / v + (2.0 * std::f64::consts::PI * v).ln()))
        .sum()
}

/// Result of training one cell for one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellRun {
    pub final_loss: f64,
    pub w2: f64,
}

/// Trains a fresh flow on `n` reweighted samples from `N(0, σ²I)`.
pub fn run_cell(spec: &BenchSpec, n: usize, sigma: f64, seed_index: u64, base_seed: u64) -> Result<CellRun, CliError> {
    let d = spec.dim();
    let mut sample_rng = stream_rng(base_seed, Stream::Samples, seed_index);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut z = vec![0.0; d];
        fill_standard_normal(&mut sample_rng, &mut z);
        samples.push(Vector::new(z.iter().map(|v| sigma * v).collect()).map_err(CliError::Numerical)?);
    }
    let log_p: Vec<f64> = samples.iter().map(|u| spec.target_log_pdf(u.as_slice())).collect();
    let log_q: Vec<f64> = samples.iter().map(|u| sampling_log_pdf(u.as_slice(), sigma)).collect();
    let weights = importance_weights(&log_p, &log_q, 1.0)?;
    let weighted: Vec<(Vector, f64)> = samples.into_iter().zip(weights).collect();

    let mut init_rng = stream_rng(base_seed, Stream::Init, seed_index);
    let mut policy = FlowPolicy::init(0, d, &spec.hidden, spec.ode_steps, &mut init_rng)?;
    let mut adam = AdamState::new(
        policy.net(),
        AdamConfig {
            learning_rate: spec.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut condot_rng = stream_rng(base_seed, Stream::CondOt, seed_index);
    let mut grad = GradientBundle::zeros_like(policy.net());
    let mut scratch = LossScratch::default();
    let mut final_loss = f64::NAN;
    for step in 0..spec.steps {
        adam.config.learning_rate =
            cosine_learning_rate(spec.learning_rate, spec.final_learning_rate, step, spec.steps);
        let pairs = draw_pairs(n, d, spec.mc_pairs, &mut condot_rng);
        grad.fill_zero();
        final_loss = accumulate_weighted_loss(policy.net(), &[], &weighted, &pairs, 1.0, &mut grad, &mut scratch)?;
        adam.step(policy.net_mut(), &grad)?;
    }

    let (mean, cov) = flow_moments(&policy, spec.eval_samples, base_seed, seed_index)?;
    let w2 = w2_gaussians(&mean, &cov, &spec.target_mean, &spec.target_cov)?;
    Ok(CellRun { final_loss, w2 })
}

/// Sample mean and (unbiased) covariance of a state-free flow.
pub fn flow_moments(
    policy: &FlowPolicy,
    n: usize,
    base_seed: u64,
    seed_index: u64,
) -> Result<(Vector, Matrix), CliError> {
    let d = policy.action_dim();
    let mut rng = stream_rng(base_seed, Stream::Evaluation, seed_index);
    let mut scratch = Default::default();
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = vec![0.0; d];
        fill_standard_normal(&mut rng, &mut u);
        policy.push_forward(&[], &mut u, false, &mut scratch)?;
        draws.push(u);
    }
    Ok(moments(&draws))
}

/// Sample mean and unbiased covariance of a set of points.
pub fn moments(draws: &[Vec<f64>]) -> (Vector, Matrix) {
    let d = draws.first().map_or(0, Vec::len);
    let n = draws.len() as f64;
    let mut mean = vec![0.0; d];
    for u in draws {
        for (m, v) in mean.iter_mut().zip(u) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    for u in draws {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (u[i] - mean[i]) * (u[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n - 1.0);
    (
        Vector::new(mean).expect("finite sample mean"),
        Matrix::new(d, d, cov).expect("finite sample covariance"),
    )
}

/// `D₄(target ‖ N(0, σ²I))` by Monte Carlo.
pub fn d4_estimate(
    spec: &BenchSpec,
    sigma: f64,
    sigma_index: usize,
    base_seed: u64,
) -> Result<Renyi4Estimate, CliError> {
    let d = spec.dim();
    let mut rng = stream_rng(base_seed, Stream::Samples, D4_STREAM_OFFSET + sigma_index as u64);
    Ok(renyi4_mc(
        |u| spec.target_log_pdf(u),
        |u| sampling_log_pdf(u, sigma),
        |r| {
            let mut z = vec![0.0; d];
            fill_standard_normal(r, &mut z);
            z.iter().map(|v| sigma * v).collect()
        },
        spec.d4_samples,
        &mut rng,
    )?)
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub sampling_sigma: f64,
    pub d4: Renyi4Estimate,
    pub w2sq: Vec<f64>,
    pub mean_w2sq: f64,
    pub std_w2sq: f64,
}

impl BenchRow {
    pub fn status(&self) -> &'static str {
        if self.d4.divergent {
            "divergent"
        } else {
            "ok"
        }
    }
}

pub const CSV_HEADER: &str = "N,sampling_sigma,D4_estimate,mean_W2sq,std_W2sq,status";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.n,
            self.sampling_sigma,
            self.d4.value,
            self.mean_w2sq,
            self.std_w2sq,
            self.status()
        )
    }
}

/// Runs the full sweep; rows are ordered by sample size, then width.
pub fn run_bench(spec: &BenchSpec, base_seed: u64, threads: usize) -> Result<Vec<BenchRow>, CliError> {
    let mut units = Vec::new();
    for &n in &spec.sample_sizes {
        for &sigma in &spec.sampling_sigmas {
            for s in 0..spec.seeds {
                units.push((n, sigma, s as u64));
            }
        }
    }
    let runs = parallel_map(&units, threads, |&(n, sigma, s)| run_cell(spec, n, sigma, s, base_seed));
    let d4: Vec<Renyi4Estimate> = spec
        .sampling_sigmas
        .iter()
        .enumerate()
        .map(|(k, &sigma)| d4_estimate(spec, sigma, k, base_seed))
        .collect::<Result<_, _>>()?;
    let mut runs = runs.into_iter();
    let mut rows = Vec::new();
    for &n in &spec.sample_sizes {
        for (k, &sigma) in spec.sampling_sigmas.iter().enumerate() {
            let mut w2sq = Vec::with_capacity(spec.seeds);
            for _ in 0..spec.seeds {
                let run = runs.next().expect("one run per unit")?;
                w2sq.push(run.w2 * run.w2);
            }
            let m = w2sq.len() as f64;
            let mean = w2sq.iter().sum::<f64>() / m;
            let std = if w2sq.len() > 1 {
                (w2sq.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                0.0
            };
            rows.push(BenchRow {
                n,
                sampling_sigma: sigma,
                d4: d4[k],
                w2sq,
                mean_w2sq: mean,
                std_w2sq: std,
            });
        }
    }
    Ok(rows)
}
