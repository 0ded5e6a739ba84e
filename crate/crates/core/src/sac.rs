//! Soft actor-critic with a flow policy trained by importance-sampling flow
//! matching.
//!
//! Each episode rolls the current policy forward for a short segment, then
//! takes one gradient step on the soft Q network `ψ` and one on the velocity
//! network `θ`. The policy step regresses `θ` onto the Boltzmann policy
//! `exp(Q^ψ/α)` using the sampled actions themselves, reweighted by
//! `exp(Q^ψ/α) / π_θ`.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::flow_matching::{accumulate_weighted_loss, draw_pairs, importance_weights, weight_entropy, LossScratch};
use crate::flow_policy::{integrate, FlowPolicy, IntegratorScratch, NetField, NetScratch};
use crate::linalg::Vector;
use crate::lqr::{discounted_return, LqrSystem, ReturnEstimate, Transition};
use crate::nn::{cosine_learning_rate, AdamConfig, AdamState, GradientBundle, MlpParams, Workspace};
use crate::rng::{fill_standard_normal, stream_rng, Stream};
use crate::{Error, Result};

/// FIFO transition store with bounded capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer_capacity", "must be at least 1"));
        }
        Ok(ReplayBuffer {
            capacity,
            items: VecDeque::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Appends `t`, evicting the oldest transition when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// `batch` distinct indices drawn uniformly (Floyd's algorithm).
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        let n = self.items.len();
        if batch > n {
            return Err(Error::invalid(
                "batch_size",
                format!("{batch} exceeds the {n} stored transitions"),
            ));
        }
        let mut chosen: Vec<usize> = Vec::with_capacity(batch);
        for j in n - batch..n {
            let t = rng.random_range(0..=j);
            if chosen.contains(&t) {
                chosen.push(j);
            } else {
                chosen.push(t);
            }
        }
        Ok(chosen)
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<Transition>> {
        Ok(self
            .sample_indices(batch, rng)?
            .into_iter()
            .map(|i| self.items[i].clone())
            .collect())
    }
}

/// Hyperparameters of the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SacConfig {
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Actions sampled per next state, `N`.
    pub n_actions: usize,
    pub lr_q: f64,
    pub lr_pi: f64,
    pub polyak_tau: f64,
    /// Environment steps per episode.
    pub segment_len: usize,
    /// States with a larger Euclidean norm trigger a reset.
    pub state_clip: f64,
    /// Trajectory length after which the environment is reset.
    pub reset_every: usize,
    pub ode_steps_train: usize,
    pub ode_steps_eval: usize,
    pub mc_pairs: usize,
    pub hidden_pi: Vec<usize>,
    pub hidden_q: Vec<usize>,
    pub eval_every: usize,
    pub eval_n_traj: usize,
    pub eval_horizon: usize,
    /// Draw the `N` next-state actions from `θ̄` instead of `θ`.
    pub use_target_policy_for_eval_actions: bool,
    /// Episodes at the start during which only the Q network is updated.
    pub q_warmup_episodes: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            buffer_capacity: 100_000,
            batch_size: 64,
            n_actions: 16,
            lr_q: 3e-4,
            lr_pi: 3e-4,
            polyak_tau: 0.005,
            segment_len: 10,
            state_clip: 100.0,
            reset_every: 100,
            ode_steps_train: 16,
            ode_steps_eval: 64,
            mc_pairs: 4,
            hidden_pi: vec![64, 64],
            hidden_q: vec![64, 64],
            eval_every: 500,
            eval_n_traj: 100,
            eval_horizon: 100,
            use_target_policy_for_eval_actions: false,
            q_warmup_episodes: 0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("buffer_capacity", self.buffer_capacity),
            ("batch_size", self.batch_size),
            ("n_actions", self.n_actions),
            ("segment_len", self.segment_len),
            ("reset_every", self.reset_every),
            ("ode_steps_train", self.ode_steps_train),
            ("ode_steps_eval", self.ode_steps_eval),
            ("mc_pairs", self.mc_pairs),
            ("eval_every", self.eval_every),
            ("eval_n_traj", self.eval_n_traj),
            ("eval_horizon", self.eval_horizon),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        if self.batch_size > self.buffer_capacity {
            return Err(Error::invalid("batch_size", "exceeds buffer_capacity"));
        }
        if !(self.polyak_tau > 0.0 && self.polyak_tau <= 1.0) {
            return Err(Error::invalid(
                "polyak_tau",
                format!("{} is outside (0, 1]", self.polyak_tau),
            ));
        }
        for (name, lr) in [("lr_q", self.lr_q), ("lr_pi", self.lr_pi)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::invalid(name, format!("{lr} is not a positive learning rate")));
            }
        }
        if !(self.state_clip > 0.0) {
            return Err(Error::invalid("state_clip", "must be positive"));
        }
        if self.hidden_pi.iter().chain(&self.hidden_q).any(|&w| w == 0) {
            return Err(Error::invalid("hidden", "layer widths must be positive"));
        }
        Ok(())
    }
}

/// The four parameter sets and the two optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct SacState {
    pub theta: MlpParams,
    pub theta_bar: MlpParams,
    pub psi: MlpParams,
    pub psi_bar: MlpParams,
    pub adam_theta: AdamState,
    pub adam_psi: AdamState,
    pub state_dim: usize,
    pub action_dim: usize,
    pub episode: usize,
}

impl SacState {
    pub fn init(state_dim: usize, action_dim: usize, config: &SacConfig, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let theta = FlowPolicy::init(
            state_dim,
            action_dim,
            &config.hidden_pi,
            config.ode_steps_train,
            &mut rng,
        )?
        .into_net();
        let mut q_sizes = vec![state_dim + action_dim];
        q_sizes.extend_from_slice(&config.hidden_q);
        q_sizes.push(1);
        let psi = MlpParams::init(&q_sizes, 1.0, &mut rng)?;
        let adam = |lr| AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        };
        Ok(SacState {
            adam_theta: AdamState::new(&theta, adam(config.lr_pi)),
            adam_psi: AdamState::new(&psi, adam(config.lr_q)),
            theta_bar: theta.clone(),
            psi_bar: psi.clone(),
            theta,
            psi,
            state_dim,
            action_dim,
            episode: 0,
        })
    }

    /// The online policy as a flow with the given step count.
    pub fn policy(&self, ode_steps: usize) -> Result<FlowPolicy> {
        FlowPolicy::new(self.theta.clone(), self.state_dim, self.action_dim, ode_steps)
    }
}

/// `N` actions drawn at one state with their log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSamples {
    pub actions: Vec<Vector>,
    pub log_probs: Vec<f64>,
}

impl ActionSamples {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Draws `n` actions from the flow `net` at state `x`, with log-probabilities.
pub fn sample_actions<R: Rng + ?Sized>(
    net: &MlpParams,
    x: &[f64],
    n: usize,
    ode_steps: usize,
    rng: &mut R,
    scratch: &mut IntegratorScratch<NetScratch>,
) -> Result<ActionSamples> {
    let field = NetField {
        net,
        state_dim: x.len(),
    };
    let d = net.output_dim();
    let mut actions = Vec::with_capacity(n);
    let mut log_probs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = vec![0.0; d];
        fill_standard_normal(rng, &mut u);
        log_probs.push(integrate(&field, x, &mut u, ode_steps, true, scratch, None)?);
        actions.push(Vector::from_vec_unchecked(u));
    }
    Ok(ActionSamples { actions, log_probs })
}

fn q_value(psi: &MlpParams, x: &[f64], u: &[f64], input: &mut Vec<f64>, ws: &mut Workspace) -> f64 {
    input.clear();
    input.extend_from_slice(x);
    input.extend_from_slice(u);
    psi.forward_ws(input, ws)[0]
}

/// `Q^ψ(x, uᵢ)` for each sampled action.
pub fn q_values(psi: &MlpParams, x: &[f64], samples: &ActionSamples) -> Vec<f64> {
    let mut input = Vec::new();
    let mut ws = Workspace::default();
    samples
        .actions
        .iter()
        .map(|u| q_value(psi, x, u.as_slice(), &mut input, &mut ws))
        .collect()
}

fn check_q_net(psi: &MlpParams, batch: &[Transition]) -> Result<()> {
    if let Some(t) = batch.first() {
        let want = t.x.dim() + t.u.dim();
        if psi.input_dim() != want || psi.output_dim() != 1 {
            return Err(Error::dims(
                "Q network",
                format!("input {want}, output 1"),
                format!("input {}, output {}", psi.input_dim(), psi.output_dim()),
            ));
        }
    }
    Ok(())
}

/// Soft Bellman targets `r + γ · mean_i [Q^ψ̄(x', uᵢ) − α log πᵢ]`.
pub fn soft_targets(
    psi_bar: &MlpParams,
    batch: &[Transition],
    next_actions: &[ActionSamples],
    alpha: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    if batch.len() != next_actions.len() {
        return Err(Error::dims("soft_targets", batch.len(), next_actions.len()));
    }
    check_q_net(psi_bar, batch)?;
    let mut input = Vec::new();
    let mut ws = Workspace::default();
    let mut targets = Vec::with_capacity(batch.len());
    for (j, (t, s)) in batch.iter().zip(next_actions).enumerate() {
        if s.is_empty() || s.log_probs.len() != s.actions.len() {
            return Err(Error::invalid(
                "next_actions",
                format!("transition {j} has no usable action samples"),
            ));
        }
        let mut acc = 0.0;
        for (u, lp) in s.actions.iter().zip(&s.log_probs) {
            acc += q_value(psi_bar, t.x_next.as_slice(), u.as_slice(), &mut input, &mut ws) - alpha * lp;
        }
        let y = t.r + gamma * acc / s.len() as f64;
        if !y.is_finite() {
            return Err(Error::non_finite(format!(
                "soft target of transition {j} (x = {:?}, u = {:?}, r = {}, x' = {:?})",
                t.x.as_slice(),
                t.u.as_slice(),
                t.r,
                t.x_next.as_slice()
            )));
        }
        targets.push(y);
    }
    Ok(targets)
}

/// `Σ_batch (Q^ψ(x, u) − yⱼ)²` and its gradient with respect to `ψ`.
pub fn q_regression_loss(psi: &MlpParams, batch: &[Transition], targets: &[f64]) -> Result<(f64, GradientBundle)> {
    if batch.len() != targets.len() {
        return Err(Error::dims("q_regression_loss", batch.len(), targets.len()));
    }
    check_q_net(psi, batch)?;
    let mut grad = GradientBundle::zeros_like(psi);
    let mut input = Vec::new();
    let mut ws = Workspace::default();
    let mut loss = 0.0;
    for (t, y) in batch.iter().zip(targets) {
        let q = q_value(psi, t.x.as_slice(), t.u.as_slice(), &mut input, &mut ws);
        let r = q - y;
        loss += r * r;
        psi.backward_ws(&mut ws, &[2.0 * r], 1.0, &mut grad, None);
    }
    if !loss.is_finite() {
        return Err(Error::non_finite("policy evaluation loss"));
    }
    Ok((loss, grad))
}

/// Policy-evaluation loss: regression of `Q^ψ` onto soft targets built from
/// `ψ̄` and the sampled next actions. Targets carry no gradient.
pub fn policy_eval_loss(
    psi: &MlpParams,
    psi_bar: &MlpParams,
    batch: &[Transition],
    next_actions: &[ActionSamples],
    alpha: f64,
    gamma: f64,
) -> Result<(f64, GradientBundle)> {
    let targets = soft_targets(psi_bar, batch, next_actions, alpha, gamma)?;
    q_regression_loss(psi, batch, &targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImproveLoss {
    pub loss: f64,
    pub grad: GradientBundle,
    /// Mean over states of the Shannon entropy of the normalized weights.
    pub weight_entropy: f64,
    /// Mean over states of the largest normalized weight.
    pub max_weight: f64,
}

/// Importance-sampling flow-matching loss summed over states, with weights
/// `∝ exp(qᵢ/α) / πᵢ` computed from the supplied action values.
pub fn policy_improve_loss_with_values<R: Rng + ?Sized>(
    theta: &MlpParams,
    states: &[Vector],
    samples: &[ActionSamples],
    values: &[Vec<f64>],
    alpha: f64,
    mc_pairs: usize,
    rng: &mut R,
) -> Result<ImproveLoss> {
    if states.len() != samples.len() || states.len() != values.len() {
        return Err(Error::dims(
            "policy_improve_loss",
            states.len(),
            samples.len().min(values.len()),
        ));
    }
    if mc_pairs == 0 {
        return Err(Error::invalid("mc_pairs", "must be at least 1"));
    }
    let mut grad = GradientBundle::zeros_like(theta);
    let mut scratch = LossScratch::default();
    let mut loss = 0.0;
    let mut entropy = 0.0;
    let mut max_weight = 0.0;
    let d = theta.output_dim();
    let mut weighted: Vec<(Vector, f64)> = Vec::new();
    for (j, ((x, s), q)) in states.iter().zip(samples).zip(values).enumerate() {
        let w = importance_weights(q, &s.log_probs, alpha).map_err(|e| match e {
            Error::NonFinite { what } => Error::non_finite(format!("{what} at state {j}")),
            other => other,
        })?;
        entropy += weight_entropy(&w);
        max_weight += w.iter().cloned().fold(0.0, f64::max);
        weighted.clear();
        weighted.extend(s.actions.iter().cloned().zip(w));
        let pairs = draw_pairs(weighted.len(), d, mc_pairs, rng);
        loss += accumulate_weighted_loss(theta, x.as_slice(), &weighted, &pairs, 1.0, &mut grad, &mut scratch)?;
    }
    let n = states.len().max(1) as f64;
    Ok(ImproveLoss {
        loss,
        grad,
        weight_entropy: entropy / n,
        max_weight: max_weight / n,
    })
}

/// Policy-improvement loss with action values from the Q network `ψ`.
pub fn policy_improve_loss<R: Rng + ?Sized>(
    theta: &MlpParams,
    psi: &MlpParams,
    states: &[Vector],
    samples: &[ActionSamples],
    alpha: f64,
    mc_pairs: usize,
    rng: &mut R,
) -> Result<ImproveLoss> {
    let values: Vec<Vec<f64>> = states
        .iter()
        .zip(samples)
        .map(|(x, s)| q_values(psi, x.as_slice(), s))
        .collect();
    policy_improve_loss_with_values(theta, states, samples, &values, alpha, mc_pairs, rng)
}

/// `target ← τ · online + (1 − τ) · target`, elementwise.
pub fn polyak_update(target: &mut MlpParams, online: &MlpParams, tau: f64) -> Result<()> {
    if !target.same_shape(online) {
        return Err(Error::dims(
            "polyak_update",
            format!("{:?}", online.sizes()),
            format!("{:?}", target.sizes()),
        ));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid("tau", format!("{tau} is outside (0, 1]")));
    }
    for (t, o) in target.tensors_mut().zip(online.tensors()) {
        for (a, b) in t.iter_mut().zip(o) {
            *a = tau * b + (1.0 - tau) * *a;
        }
    }
    Ok(())
}

/// Diagnostics of one gradient update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub loss_q: f64,
    pub loss_pi: f64,
    pub weight_entropy: f64,
    pub max_weight: f64,
    pub grad_norm_q: f64,
    pub grad_norm_pi: f64,
}

/// One row of the training log, written at each evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    pub eval_return_mean: f64,
    pub eval_return_stderr: f64,
    /// Means over the updates since the previous row (NaN if there were none).
    pub loss_q: f64,
    pub loss_pi: f64,
    pub weight_entropy: f64,
    pub grad_norm_q: f64,
    pub grad_norm_pi: f64,
}

#[derive(Debug, Default, Clone, Copy)]
struct Accumulator {
    count: usize,
    sum: [f64; 5],
}

impl Accumulator {
    fn add(&mut self, s: &UpdateStats) {
        self.count += 1;
        for (acc, v) in self
            .sum
            .iter_mut()
            .zip([s.loss_q, s.loss_pi, s.weight_entropy, s.grad_norm_q, s.grad_norm_pi])
        {
            *acc += v;
        }
    }

    fn means(&self) -> [f64; 5] {
        let n = self.count as f64;
        self.sum.map(|s| if self.count == 0 { f64::NAN } else { s / n })
    }
}

/// Online training driver. All randomness derives from the seed through
/// separate streams, so runs are reproducible bit for bit.
#[derive(Debug, Clone)]
pub struct Trainer {
    sys: LqrSystem,
    config: SacConfig,
    seed: u64,
    state: SacState,
    buffer: ReplayBuffer,
    x: Vector,
    steps_in_trajectory: usize,
    rollout_rng: ChaCha8Rng,
    minibatch_rng: ChaCha8Rng,
    actions_rng: ChaCha8Rng,
    condot_rng: ChaCha8Rng,
    evaluations: u64,
    interval: Accumulator,
    scratch: IntegratorScratch<NetScratch>,
    last_update: Option<UpdateStats>,
}

impl Trainer {
    pub fn new(sys: LqrSystem, config: SacConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let state = SacState::init(sys.state_dim(), sys.action_dim(), &config, seed)?;
        let mut rollout_rng = stream_rng(seed, Stream::Rollout, 0);
        let x = sys.sample_initial_state(&mut rollout_rng);
        Ok(Trainer {
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            sys,
            config,
            seed,
            state,
            x,
            steps_in_trajectory: 0,
            rollout_rng,
            minibatch_rng: stream_rng(seed, Stream::Minibatch, 0),
            actions_rng: stream_rng(seed, Stream::EvalActions, 0),
            condot_rng: stream_rng(seed, Stream::CondOt, 0),
            evaluations: 0,
            interval: Accumulator::default(),
            scratch: IntegratorScratch::default(),
            last_update: None,
        })
    }

    pub fn state(&self) -> &SacState {
        &self.state
    }

    pub fn system(&self) -> &LqrSystem {
        &self.sys
    }

    pub fn config(&self) -> &SacConfig {
        &self.config
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn last_update(&self) -> Option<UpdateStats> {
        self.last_update
    }

    fn rollout_segment(&mut self) -> Result<()> {
        let field = NetField {
            net: &self.state.theta,
            state_dim: self.state.state_dim,
        };
        let d = self.state.action_dim;
        for _ in 0..self.config.segment_len {
            let mut u = vec![0.0; d];
            fill_standard_normal(&mut self.rollout_rng, &mut u);
            integrate(
                &field,
                self.x.as_slice(),
                &mut u,
                self.config.ode_steps_train,
                false,
                &mut self.scratch,
                None,
            )?;
            let t = self
                .sys
                .env_step(&self.x, &Vector::from_vec_unchecked(u), &mut self.rollout_rng)?;
            self.x = t.x_next.clone();
            self.buffer.push(t);
            self.steps_in_trajectory += 1;
            if self.x.norm() > self.config.state_clip || self.steps_in_trajectory >= self.config.reset_every {
                self.x = self.sys.sample_initial_state(&mut self.rollout_rng);
                self.steps_in_trajectory = 0;
            }
        }
        Ok(())
    }

    fn update(&mut self) -> Result<UpdateStats> {
        let cfg = &self.config;
        let alpha = self.sys.alpha();
        let batch = self.buffer.sample(cfg.batch_size, &mut self.minibatch_rng)?;
        let actor = if cfg.use_target_policy_for_eval_actions {
            &self.state.theta_bar
        } else {
            &self.state.theta
        };
        let mut next_actions = Vec::with_capacity(batch.len());
        for t in &batch {
            next_actions.push(sample_actions(
                actor,
                t.x_next.as_slice(),
                cfg.n_actions,
                cfg.ode_steps_train,
                &mut self.actions_rng,
                &mut self.scratch,
            )?);
        }

        let (loss_q, grad_q) = policy_eval_loss(
            &self.state.psi,
            &self.state.psi_bar,
            &batch,
            &next_actions,
            alpha,
            self.sys.gamma(),
        )?;
        let grad_norm_q = grad_q.norm();
        self.state.adam_psi.step(&mut self.state.psi, &grad_q)?;
        polyak_update(&mut self.state.psi_bar, &self.state.psi, cfg.polyak_tau)?;

        if self.state.episode < cfg.q_warmup_episodes {
            return Ok(UpdateStats {
                loss_q,
                loss_pi: 0.0,
                weight_entropy: 0.0,
                max_weight: 0.0,
                grad_norm_q,
                grad_norm_pi: 0.0,
            });
        }
        let states: Vec<Vector> = batch.iter().map(|t| t.x_next.clone()).collect();
        let improve = policy_improve_loss(
            &self.state.theta,
            &self.state.psi,
            &states,
            &next_actions,
            alpha,
            cfg.mc_pairs,
            &mut self.condot_rng,
        )?;
        let grad_norm_pi = improve.grad.norm();
        self.state.adam_theta.step(&mut self.state.theta, &improve.grad)?;
        polyak_update(&mut self.state.theta_bar, &self.state.theta, cfg.polyak_tau)?;

        Ok(UpdateStats {
            loss_q,
            loss_pi: improve.loss,
            weight_entropy: improve.weight_entropy,
            max_weight: improve.max_weight,
            grad_norm_q,
            grad_norm_pi,
        })
    }

    fn diverged(&self, detail: String) -> Error {
        let mut detail = detail;
        if let Some(s) = self.last_update {
            detail.push_str(&format!(
                "; previous update: loss_q = {}, loss_pi = {}, weight_entropy = {}, max_weight = {}, grad_norm_q = {}, grad_norm_pi = {}",
                s.loss_q, s.loss_pi, s.weight_entropy, s.max_weight, s.grad_norm_q, s.grad_norm_pi
            ));
        }
        Error::TrainingDiverged {
            episode: self.state.episode,
            detail,
        }
    }

    /// Runs one episode: a rollout segment followed by one update of each
    /// network once the buffer holds a full batch. Returns a log row when an
    /// evaluation is due.
    pub fn step(&mut self) -> Result<Option<LogRow>> {
        self.rollout_segment()
            .map_err(|e| self.diverged(format!("rollout failed: {e}")))?;
        if self.buffer.len() >= self.config.batch_size {
            let stats = self.update().map_err(|e| self.diverged(format!("{e}")))?;
            let finite = [stats.loss_q, stats.loss_pi, stats.grad_norm_q, stats.grad_norm_pi]
                .iter()
                .all(|v| v.is_finite());
            self.last_update = Some(stats);
            if !finite || !self.state.theta.is_finite() || !self.state.psi.is_finite() {
                return Err(self.diverged(String::from("non-finite loss, gradient or parameters")));
            }
            self.interval.add(&stats);
        }
        self.state.episode += 1;
        if self.state.episode % self.config.eval_every != 0 {
            return Ok(None);
        }
        let ret = self.evaluate_return()?;
        let [loss_q, loss_pi, weight_entropy, grad_norm_q, grad_norm_pi] = self.interval.means();
        self.interval = Accumulator::default();
        Ok(Some(LogRow {
            episode: self.state.episode,
            eval_return_mean: ret.mean,
            eval_return_stderr: ret.std_err,
            loss_q,
            loss_pi,
            weight_entropy,
            grad_norm_q,
            grad_norm_pi,
        }))
    }

    /// Unregularized discounted return of the online policy, each call on its
    /// own evaluation stream.
    pub fn evaluate_return(&mut self) -> Result<ReturnEstimate> {
        let mut rng = stream_rng(self.seed, Stream::Evaluation, self.evaluations);
        self.evaluations += 1;
        let policy = self.state.policy(self.config.ode_steps_eval)?;
        evaluate_flow_return(
            &self.sys,
            &policy,
            self.config.eval_horizon,
            self.config.eval_n_traj,
            &mut rng,
        )
    }

    pub fn into_state(self) -> SacState {
        self.state
    }
}

/// Unregularized discounted return of a flow policy.
pub fn evaluate_flow_return<R: Rng + ?Sized>(
    sys: &LqrSystem,
    policy: &FlowPolicy,
    horizon: usize,
    n_traj: usize,
    rng: &mut R,
) -> Result<ReturnEstimate> {
    let mut scratch = IntegratorScratch::default();
    let d = policy.action_dim();
    discounted_return(
        sys,
        |x, rng| {
            let mut u = vec![0.0; d];
            fill_standard_normal(rng, &mut u);
            policy.push_forward(x.as_slice(), &mut u, false, &mut scratch)?;
            Ok(Vector::from_vec_unchecked(u))
        },
        horizon,
        n_traj,
        None,
        rng,
    )
}

/// Runs `episodes` episodes and collects the log rows.
pub fn train(sys: LqrSystem, config: SacConfig, episodes: usize, seed: u64) -> Result<(Vec<LogRow>, SacState)> {
    let mut trainer = Trainer::new(sys, config, seed)?;
    let mut log = Vec::new();
    for _ in 0..episodes {
        if let Some(row) = trainer.step()? {
            log.push(row);
        }
    }
    Ok((log, trainer.into_state()))
}

/// Settings for [`fit_boltzmann`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoltzmannFitConfig {
    pub n_actions: usize,
    pub steps: usize,
    /// Adam step size at the first step; it follows a cosine down to
    /// `final_learning_rate` at the last one.
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub hidden: Vec<usize>,
    pub ode_steps: usize,
    pub mc_pairs: usize,
}

impl Default for BoltzmannFitConfig {
    fn default() -> Self {
        BoltzmannFitConfig {
            n_actions: 128,
            steps: 3000,
            learning_rate: 2e-3,
            final_learning_rate: 2e-5,
            hidden: vec![32, 32],
            ode_steps: 8,
            mc_pairs: 4,
        }
    }
}

/// Trains a state-free flow towards `exp(q(u)/α)` with a frozen action value:
/// every step samples `n_actions` actions from the current flow and takes one
/// Adam step on the importance-weighted flow-matching loss.
pub fn fit_boltzmann<Q: Fn(&[f64]) -> f64>(
    q: Q,
    action_dim: usize,
    alpha: f64,
    config: &BoltzmannFitConfig,
    seed: u64,
) -> Result<FlowPolicy> {
    if config.n_actions == 0 || config.steps == 0 || config.mc_pairs == 0 || config.ode_steps == 0 {
        return Err(Error::invalid("config", "counts must be at least 1"));
    }
    let mut init_rng = stream_rng(seed, Stream::Init, 0);
    let mut policy = FlowPolicy::init(0, action_dim, &config.hidden, config.ode_steps, &mut init_rng)?;
    let mut adam = AdamState::new(
        policy.net(),
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut actions_rng = stream_rng(seed, Stream::EvalActions, 0);
    let mut condot_rng = stream_rng(seed, Stream::CondOt, 0);
    let mut scratch = IntegratorScratch::default();
    let states = [Vector::zeros(0)];
    for step in 0..config.steps {
        adam.config.learning_rate =
            cosine_learning_rate(config.learning_rate, config.final_learning_rate, step, config.steps);
        let samples = sample_actions(
            policy.net(),
            &[],
            config.n_actions,
            config.ode_steps,
            &mut actions_rng,
            &mut scratch,
        )?;
        let values: Vec<f64> = samples.actions.iter().map(|u| q(u.as_slice())).collect();
        let improve = policy_improve_loss_with_values(
            policy.net(),
            &states,
            core::slice::from_ref(&samples),
            core::slice::from_ref(&values),
            alpha,
            config.mc_pairs,
            &mut condot_rng,
        )?;
        adam.step(policy.net_mut(), &improve.grad)?;
    }
    Ok(policy)
}
