//! CondOT flow matching and its importance-weighted variant.
//!
//! For a data point `u₁`, noise `ε` and flow time `τ`, the CondOT path point is
//! `u_τ = τ u₁ + (1 − τ) ε` and the regression target is `u₁ − ε`. The weighted
//! loss is `Σᵢ wᵢ · mean_pairs ‖v(x, τ, u_τ) − (u₁ − ε)‖²`; uniform weights give
//! plain flow matching.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::Vector;
use crate::nn::{GradientBundle, MlpParams, Workspace};
use crate::rng::fill_standard_normal;
use crate::{Error, Result};

/// Flow times are drawn from `Uniform[0, 1 − TAU_MARGIN]`.
pub const TAU_MARGIN: f64 = 1e-3;

/// Log-weights are clamped to `[max − LOG_WEIGHT_CLAMP, max]`.
pub const LOG_WEIGHT_CLAMP: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CondOtSample {
    pub u1: Vector,
    pub eps: Vector,
    pub tau: f64,
    pub u_tau: Vector,
    pub target_velocity: Vector,
}

pub fn condot_pair(u1: &Vector, eps: &Vector, tau: f64) -> Result<CondOtSample> {
    if u1.dim() != eps.dim() {
        return Err(Error::dims("condot_pair", u1.dim(), eps.dim()));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::invalid("tau", format!("{tau} is outside [0, 1)")));
    }
    let (a, e) = (u1.as_slice(), eps.as_slice());
    let u_tau = a.iter().zip(e).map(|(a, e)| tau * a + (1.0 - tau) * e).collect();
    let target = a.iter().zip(e).map(|(a, e)| a - e).collect();
    Ok(CondOtSample {
        u1: u1.clone(),
        eps: eps.clone(),
        tau,
        u_tau: Vector::from_vec_unchecked(u_tau),
        target_velocity: Vector::from_vec_unchecked(target),
    })
}

/// Self-normalized weights `wᵢ ∝ exp(Qᵢ/α − log πᵢ)`.
pub fn importance_weights(q_values: &[f64], log_pi: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if q_values.is_empty() {
        return Err(Error::invalid("q_values", "need at least one sample"));
    }
    if q_values.len() != log_pi.len() {
        return Err(Error::dims("importance_weights", q_values.len(), log_pi.len()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid("alpha", format!("{alpha} is not positive")));
    }
    let mut logw = Vec::with_capacity(q_values.len());
    for (i, (q, lp)) in q_values.iter().zip(log_pi).enumerate() {
        let l = q / alpha - lp;
        if !l.is_finite() {
            return Err(Error::non_finite(format!("log-weight of sample {i}")));
        }
        logw.push(l);
    }
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logw
        .iter()
        .map(|l| libm::exp((l - max).max(-LOG_WEIGHT_CLAMP)))
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Shannon entropy of a normalized weight vector, a degeneracy diagnostic.
pub fn weight_entropy(w: &[f64]) -> f64 {
    -w.iter().filter(|v| **v > 0.0).map(|v| v * libm::log(*v)).sum::<f64>()
}

/// Samples for one state with self-normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBatch {
    x: Vector,
    samples: Vec<(Vector, f64)>,
}

impl WeightedBatch {
    pub fn new(x: Vector, samples: Vec<(Vector, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("samples", "batch is empty"));
        }
        let d = samples[0].0.dim();
        let mut total = 0.0;
        for (u, w) in &samples {
            if u.dim() != d {
                return Err(Error::dims("WeightedBatch::new", d, u.dim()));
            }
            if !(*w >= 0.0) || !w.is_finite() {
                return Err(Error::invalid("weights", format!("{w} is not a non-negative number")));
            }
            total += w;
        }
        if libm::fabs(total - 1.0) > 1e-12 {
            return Err(Error::invalid("weights", format!("sum to {total}, not 1")));
        }
        if !samples.iter().any(|(_, w)| *w > 0.0) {
            return Err(Error::invalid("weights", "no positive weight"));
        }
        Ok(WeightedBatch { x, samples })
    }

    pub fn uniform(x: Vector, samples: Vec<Vector>) -> Result<Self> {
        let w = 1.0 / samples.len().max(1) as f64;
        let samples = samples.into_iter().map(|u| (u, w)).collect();
        WeightedBatch::new(x, samples)
    }

    pub fn x(&self) -> &Vector {
        &self.x
    }

    pub fn samples(&self) -> &[(Vector, f64)] {
        &self.samples
    }

    pub fn action_dim(&self) -> usize {
        self.samples[0].0.dim()
    }
}

/// Noise and flow time for one CondOT regression pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDraw {
    pub eps: Vec<f64>,
    pub tau: f64,
}

/// Draws `mc_pairs` `(ε, τ)` pairs per sample, sample-major, noise before time.
pub fn draw_pairs<R: Rng + ?Sized>(n_samples: usize, action_dim: usize, mc_pairs: usize, rng: &mut R) -> Vec<PairDraw> {
    let mut out = Vec::with_capacity(n_samples * mc_pairs);
    for _ in 0..n_samples * mc_pairs {
        let mut eps = vec![0.0; action_dim];
        fill_standard_normal(rng, &mut eps);
        let tau = rng.random::<f64>() * (1.0 - TAU_MARGIN);
        out.push(PairDraw { eps, tau });
    }
    out
}

/// Reusable buffers for [`accumulate_weighted_loss`].
#[derive(Debug, Default, Clone)]
pub struct LossScratch {
    input: Vec<f64>,
    residual: Vec<f64>,
    ws: Workspace,
}

/// Adds `scale · Σᵢ wᵢ mean_p ‖v(x, τ, u_τ) − (u₁ − ε)‖²` to the returned loss and its
/// gradient into `grad`. `pairs` holds `mc_pairs` draws per sample, sample-major.
pub fn accumulate_weighted_loss(
    theta: &MlpParams,
    x: &[f64],
    samples: &[(Vector, f64)],
    pairs: &[PairDraw],
    scale: f64,
    grad: &mut GradientBundle,
    scratch: &mut LossScratch,
) -> Result<f64> {
    let d = samples.first().map_or(0, |s| s.0.dim());
    if theta.input_dim() != x.len() + 1 + d || theta.output_dim() != d {
        return Err(Error::dims(
            "flow matching loss",
            format!("velocity net with input {} and output {}", x.len() + 1 + d, d),
            format!("input {} and output {}", theta.input_dim(), theta.output_dim()),
        ));
    }
    if samples.is_empty() || pairs.len() % samples.len() != 0 || pairs.is_empty() {
        return Err(Error::invalid(
            "pairs",
            "need the same positive number of draws per sample",
        ));
    }
    let mc = pairs.len() / samples.len();
    let LossScratch { input, residual, ws } = scratch;
    residual.resize(d, 0.0);
    let mut loss = 0.0;
    for (i, (u1, w)) in samples.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let coef = scale * w / mc as f64;
        let u1 = u1.as_slice();
        for pair in &pairs[i * mc..(i + 1) * mc] {
            input.clear();
            input.extend_from_slice(x);
            input.push(pair.tau);
            input.extend(
                u1.iter()
                    .zip(&pair.eps)
                    .map(|(a, e)| pair.tau * a + (1.0 - pair.tau) * e),
            );
            let out = theta.forward_ws(input, ws);
            let mut sq = 0.0;
            for j in 0..d {
                let r = out[j] - (u1[j] - pair.eps[j]);
                residual[j] = 2.0 * r;
                sq += r * r;
            }
            loss += coef * sq;
            theta.backward_ws(ws, residual, coef, grad, None);
        }
    }
    if !loss.is_finite() {
        return Err(Error::non_finite("flow matching loss"));
    }
    Ok(loss)
}

/// Importance-weighted flow-matching loss and gradient for one state.
pub fn isfm_loss_and_grad<R: Rng + ?Sized>(
    theta: &MlpParams,
    batch: &WeightedBatch,
    mc_pairs: usize,
    rng: &mut R,
) -> Result<(f64, GradientBundle)> {
    if mc_pairs == 0 {
        return Err(Error::invalid("mc_pairs", "must be at least 1"));
    }
    let pairs = draw_pairs(batch.samples.len(), batch.action_dim(), mc_pairs, rng);
    let mut grad = GradientBundle::zeros_like(theta);
    let mut scratch = LossScratch::default();
    let loss = accumulate_weighted_loss(
        theta,
        batch.x.as_slice(),
        &batch.samples,
        &pairs,
        1.0,
        &mut grad,
        &mut scratch,
    )?;
    Ok((loss, grad))
}

/// Plain flow-matching loss: the weighted loss with uniform weights.
pub fn fm_loss_and_grad<R: Rng + ?Sized>(
    theta: &MlpParams,
    x: &Vector,
    samples: &[Vector],
    mc_pairs: usize,
    rng: &mut R,
) -> Result<(f64, GradientBundle)> {
    let batch = WeightedBatch::uniform(x.clone(), samples.to_vec())?;
    isfm_loss_and_grad(theta, &batch, mc_pairs, rng)
}
