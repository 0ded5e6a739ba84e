//! Flow-based action distributions.
//!
//! An action is produced by integrating `du/dτ = v(x, τ, u)` from `u₀ ~ N(0, I)`
//! at `τ = 0` to `τ = 1` with the explicit midpoint rule. Along the way the
//! log-density follows `d log p/dτ = −tr(∂v/∂u)`, integrated at the same midpoint
//! nodes, so the returned log-probability is exact up to quadrature error.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::Vector;
use crate::nn::{MlpParams, Workspace};
use crate::rng::fill_standard_normal;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A time-dependent, state-conditioned velocity field over actions.
pub trait VelocityField {
    type Scratch: Default;

    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;

    /// Writes `v(x, τ, u)` into `out`.
    fn velocity(&self, x: &[f64], tau: f64, u: &[f64], scratch: &mut Self::Scratch, out: &mut [f64]);

    /// Writes `v(x, τ, u)` into `out` and returns `tr(∂v/∂u)`.
    fn velocity_divergence(&self, x: &[f64], tau: f64, u: &[f64], scratch: &mut Self::Scratch, out: &mut [f64]) -> f64;
}

/// Log-density of the standard normal base distribution.
pub fn standard_normal_log_pdf(u: &[f64]) -> f64 {
    -0.5 * u.iter().map(|v| v * v).sum::<f64>() - 0.5 * u.len() as f64 * LN_2PI
}

/// Scratch buffers for [`integrate`].
#[derive(Debug, Default, Clone)]
pub struct IntegratorScratch<S> {
    pub field: S,
    k1: Vec<f64>,
    mid: Vec<f64>,
    k2: Vec<f64>,
}

/// Integrates the flow in place (`u` holds `u₀` on entry and `u₁` on exit) with
/// `steps` midpoint steps. With `log_prob` set, returns
/// `log N(u₀; 0, I) − Σ h · tr(∂v/∂u)(mid node)`; otherwise returns 0.
/// When `nodes` is given, every grid point `(τₙ, uₙ)` is recorded.
pub fn integrate<F: VelocityField>(
    field: &F,
    x: &[f64],
    u: &mut [f64],
    steps: usize,
    log_prob: bool,
    scratch: &mut IntegratorScratch<F::Scratch>,
    mut nodes: Option<&mut Vec<(f64, Vector)>>,
) -> Result<f64> {
    let d = u.len();
    let h = 1.0 / steps as f64;
    let mut logp = if log_prob { standard_normal_log_pdf(u) } else { 0.0 };
    scratch.k1.resize(d, 0.0);
    scratch.mid.resize(d, 0.0);
    scratch.k2.resize(d, 0.0);
    for n in 0..steps {
        let tau = n as f64 / steps as f64;
        if let Some(nodes) = nodes.as_deref_mut() {
            nodes.push((tau, Vector::from_vec_unchecked(u.to_vec())));
        }
        field.velocity(x, tau, u, &mut scratch.field, &mut scratch.k1);
        for i in 0..d {
            scratch.mid[i] = u[i] + 0.5 * h * scratch.k1[i];
        }
        let tau_mid = tau + 0.5 * h;
        if log_prob {
            let div = field.velocity_divergence(x, tau_mid, &scratch.mid, &mut scratch.field, &mut scratch.k2);
            logp -= h * div;
        } else {
            field.velocity(x, tau_mid, &scratch.mid, &mut scratch.field, &mut scratch.k2);
        }
        for i in 0..d {
            u[i] += h * scratch.k2[i];
        }
        if u.iter().any(|v| !v.is_finite()) || !logp.is_finite() {
            return Err(Error::non_finite(alloc::format!(
                "flow state at tau = {}",
                (n + 1) as f64 / steps as f64
            )));
        }
    }
    if let Some(nodes) = nodes {
        nodes.push((1.0, Vector::from_vec_unchecked(u.to_vec())));
    }
    Ok(logp)
}

/// A flow policy: a tanh MLP velocity field with input `[x, τ, u]` and output
/// of dimension `d_u`, integrated with a fixed number of midpoint steps.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPolicy {
    net: MlpParams,
    state_dim: usize,
    action_dim: usize,
    ode_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub u0: Vector,
    pub u1: Vector,
    pub log_prob: f64,
    pub path_nodes: Vec<(f64, Vector)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Scratch for the MLP velocity field: the packed input and network buffers.
#[derive(Debug, Default, Clone)]
pub struct NetScratch {
    input: Vec<f64>,
    ws: Workspace,
}

/// Adapter exposing an MLP with input `[x, τ, u]` as a [`VelocityField`].
#[derive(Debug, Clone, Copy)]
pub struct NetField<'a> {
    pub net: &'a MlpParams,
    pub state_dim: usize,
}

impl NetField<'_> {
    fn pack(&self, x: &[f64], tau: f64, u: &[f64], scratch: &mut NetScratch) {
        scratch.input.clear();
        scratch.input.extend_from_slice(x);
        scratch.input.push(tau);
        scratch.input.extend_from_slice(u);
    }
}

impl VelocityField for NetField<'_> {
    type Scratch = NetScratch;

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn velocity(&self, x: &[f64], tau: f64, u: &[f64], scratch: &mut NetScratch, out: &mut [f64]) {
        self.pack(x, tau, u, scratch);
        let NetScratch { input, ws } = scratch;
        self.net.eval_into(input, ws, out);
    }

    fn velocity_divergence(&self, x: &[f64], tau: f64, u: &[f64], scratch: &mut NetScratch, out: &mut [f64]) -> f64 {
        self.pack(x, tau, u, scratch);
        let NetScratch { input, ws } = scratch;
        self.net.forward_divergence(input, self.state_dim + 1, ws, out)
    }
}

impl FlowPolicy {
    pub fn new(net: MlpParams, state_dim: usize, action_dim: usize, ode_steps: usize) -> Result<Self> {
        if net.input_dim() != state_dim + 1 + action_dim {
            return Err(Error::dims(
                "FlowPolicy::new",
                state_dim + 1 + action_dim,
                net.input_dim(),
            ));
        }
        if net.output_dim() != action_dim {
            return Err(Error::dims("FlowPolicy::new", action_dim, net.output_dim()));
        }
        if ode_steps == 0 {
            return Err(Error::invalid("ode_steps", "must be at least 1"));
        }
        Ok(FlowPolicy {
            net,
            state_dim,
            action_dim,
            ode_steps,
        })
    }

    /// Randomly initialized policy with the given hidden widths. The last layer
    /// is scaled by 0.01 so the initial policy is close to `N(0, I)`.
    pub fn init<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        ode_steps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![state_dim + 1 + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        let net = MlpParams::init(&sizes, 0.01, rng)?;
        FlowPolicy::new(net, state_dim, action_dim, ode_steps)
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpParams {
        &mut self.net
    }

    pub fn into_net(self) -> MlpParams {
        self.net
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn ode_steps(&self) -> usize {
        self.ode_steps
    }

    pub fn with_ode_steps(mut self, ode_steps: usize) -> Result<Self> {
        if ode_steps == 0 {
            return Err(Error::invalid("ode_steps", "must be at least 1"));
        }
        self.ode_steps = ode_steps;
        Ok(self)
    }

    pub fn field(&self) -> NetField<'_> {
        NetField {
            net: &self.net,
            state_dim: self.state_dim,
        }
    }

    fn check(&self, x: usize, u: usize) -> Result<()> {
        if x != self.state_dim {
            return Err(Error::dims("flow policy state", self.state_dim, x));
        }
        if u != self.action_dim {
            return Err(Error::dims("flow policy action", self.action_dim, u));
        }
        Ok(())
    }

    /// Pushes `u0` through the flow, recording the integrator nodes and the
    /// log-probability of the resulting action.
    pub fn sample_action(&self, x: &Vector, u0: &Vector) -> Result<FlowSample> {
        self.check(x.dim(), u0.dim())?;
        let mut u = u0.as_slice().to_vec();
        let mut nodes = Vec::with_capacity(self.ode_steps + 1);
        let mut scratch = IntegratorScratch::default();
        let log_prob = integrate(
            &self.field(),
            x.as_slice(),
            &mut u,
            self.ode_steps,
            true,
            &mut scratch,
            Some(&mut nodes),
        )?;
        Ok(FlowSample {
            u0: u0.clone(),
            u1: Vector::from_vec_unchecked(u),
            log_prob,
            path_nodes: nodes,
        })
    }

    /// Recomputes the log-probability of `sample` by re-integrating from its
    /// base noise; errors if the sample was produced by different parameters.
    pub fn log_prob_of_sample(&self, x: &Vector, sample: &FlowSample) -> Result<f64> {
        self.check(x.dim(), sample.u0.dim())?;
        self.check(x.dim(), sample.u1.dim())?;
        let mut u = sample.u0.as_slice().to_vec();
        let mut scratch = IntegratorScratch::default();
        let logp = integrate(
            &self.field(),
            x.as_slice(),
            &mut u,
            self.ode_steps,
            true,
            &mut scratch,
            None,
        )?;
        if u.as_slice() != sample.u1.as_slice() || logp.to_bits() != sample.log_prob.to_bits() {
            return Err(Error::invalid(
                "sample",
                "was not produced by this policy (re-integration disagrees)",
            ));
        }
        Ok(logp)
    }

    /// Hot-path sampling: overwrites `u` (base noise in, action out) and returns
    /// the log-probability when requested.
    pub fn push_forward(
        &self,
        x: &[f64],
        u: &mut [f64],
        log_prob: bool,
        scratch: &mut IntegratorScratch<NetScratch>,
    ) -> Result<f64> {
        integrate(&self.field(), x, u, self.ode_steps, log_prob, scratch, None)
    }

    /// Draws an action with its log-probability.
    pub fn sample<R: Rng + ?Sized>(&self, x: &Vector, rng: &mut R) -> Result<(Vector, f64)> {
        self.check(x.dim(), self.action_dim)?;
        let mut u = vec![0.0; self.action_dim];
        fill_standard_normal(rng, &mut u);
        let mut scratch = IntegratorScratch::default();
        let lp = self.push_forward(x.as_slice(), &mut u, true, &mut scratch)?;
        Ok((Vector::from_vec_unchecked(u), lp))
    }

    /// Monte-Carlo entropy `−mean log π(u|x)` over `n` fresh samples, with its
    /// standard error.
    pub fn entropy_estimate<R: Rng + ?Sized>(&self, x: &Vector, n: usize, rng: &mut R) -> Result<EntropyEstimate> {
        entropy_estimate(&self.field(), x, self.ode_steps, n, rng)
    }
}

/// Entropy estimate for any velocity field; see [`FlowPolicy::entropy_estimate`].
pub fn entropy_estimate<F: VelocityField, R: Rng + ?Sized>(
    field: &F,
    x: &Vector,
    ode_steps: usize,
    n: usize,
    rng: &mut R,
) -> Result<EntropyEstimate> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    if x.dim() != field.state_dim() {
        return Err(Error::dims("entropy_estimate", field.state_dim(), x.dim()));
    }
    let mut scratch = IntegratorScratch::default();
    let mut u = vec![0.0; field.action_dim()];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        fill_standard_normal(rng, &mut u);
        let lp = integrate(field, x.as_slice(), &mut u, ode_steps, true, &mut scratch, None)?;
        sum -= lp;
        sum_sq += lp * lp;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 {
        ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(EntropyEstimate {
        mean,
        std_err: libm::sqrt(var / nf),
    })
}
