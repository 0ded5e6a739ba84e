//! JSON run configuration.
//!
//! Parsing is strict: unknown keys are rejected, and every optional key has a
//! documented default (see the README).

use std::path::{Path, PathBuf};

use flowsac_core::lqr::{InitialState, LqrSystem};
use flowsac_core::sac::SacConfig;
use flowsac_core::{Matrix, Vector};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Named systems available through `"system": {"preset": ...}`.
pub const PRESETS: &[&str] = &["paper_eq12", "quickstart_2d", "scalar", "zero_a_toy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub system: SystemSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub episodes: usize,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub sac: SacSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub isfm_bench: BenchSection,
}

fn default_alpha() -> f64 {
    1.0
}

/// Either a preset name or explicit matrices (row-major nested arrays).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, rename = "A", skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default, rename = "B", skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default, rename = "Q", skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default, rename = "R", skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_w: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_state: Option<InitStateSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum InitStateSpec {
    Fixed(Vec<f64>),
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacSection {
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub n_actions: usize,
    pub lr_q: f64,
    pub lr_pi: f64,
    pub polyak_tau: f64,
    pub segment_len: usize,
    pub state_clip: f64,
    pub reset_every: usize,
    pub ode_steps_train: usize,
    pub ode_steps_eval: usize,
    pub mc_pairs: usize,
    pub hidden_pi: Vec<usize>,
    pub hidden_q: Vec<usize>,
    pub eval_every: usize,
    pub eval_n_traj: usize,
    pub eval_horizon: usize,
    pub use_target_policy_for_eval_actions: bool,
    pub q_warmup_episodes: usize,
}

impl Default for SacSection {
    fn default() -> Self {
        SacSection::from(&SacConfig::default())
    }
}

impl From<&SacConfig> for SacSection {
    fn from(c: &SacConfig) -> Self {
        SacSection {
            buffer_capacity: c.buffer_capacity,
            batch_size: c.batch_size,
            n_actions: c.n_actions,
            lr_q: c.lr_q,
            lr_pi: c.lr_pi,
            polyak_tau: c.polyak_tau,
            segment_len: c.segment_len,
            state_clip: c.state_clip,
            reset_every: c.reset_every,
            ode_steps_train: c.ode_steps_train,
            ode_steps_eval: c.ode_steps_eval,
            mc_pairs: c.mc_pairs,
            hidden_pi: c.hidden_pi.clone(),
            hidden_q: c.hidden_q.clone(),
            eval_every: c.eval_every,
            eval_n_traj: c.eval_n_traj,
            eval_horizon: c.eval_horizon,
            use_target_policy_for_eval_actions: c.use_target_policy_for_eval_actions,
            q_warmup_episodes: c.q_warmup_episodes,
        }
    }
}

impl SacSection {
    pub fn to_sac_config(&self) -> SacConfig {
        SacConfig {
            buffer_capacity: self.buffer_capacity,
            batch_size: self.batch_size,
            n_actions: self.n_actions,
            lr_q: self.lr_q,
            lr_pi: self.lr_pi,
            polyak_tau: self.polyak_tau,
            segment_len: self.segment_len,
            state_clip: self.state_clip,
            reset_every: self.reset_every,
            ode_steps_train: self.ode_steps_train,
            ode_steps_eval: self.ode_steps_eval,
            mc_pairs: self.mc_pairs,
            hidden_pi: self.hidden_pi.clone(),
            hidden_q: self.hidden_q.clone(),
            eval_every: self.eval_every,
            eval_n_traj: self.eval_n_traj,
            eval_horizon: self.eval_horizon,
            use_target_policy_for_eval_actions: self.use_target_policy_for_eval_actions,
            q_warmup_episodes: self.q_warmup_episodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub n_traj: usize,
    pub traj_len: usize,
    pub n_action_samples: usize,
    /// Integration steps when sampling a flow checkpoint; `None` uses the
    /// step count stored in the checkpoint.
    pub ode_steps: Option<usize>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            n_traj: 50,
            traj_len: 100,
            n_action_samples: 12_800,
            ode_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub return_n_traj: usize,
    pub return_horizon: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            return_n_traj: 100,
            return_horizon: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub target_mean: Vec<f64>,
    pub target_cov: Vec<Vec<f64>>,
    pub sample_sizes: Vec<usize>,
    /// Standard deviations of the zero-mean isotropic sampling distributions.
    pub sampling_sigmas: Vec<f64>,
    pub seeds: usize,
    pub steps: usize,
    /// Adam step size at the first step, decayed on a half-cosine to
    /// `final_learning_rate`.
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub hidden: Vec<usize>,
    pub mc_pairs: usize,
    pub ode_steps: usize,
    pub eval_samples: usize,
    pub d4_samples: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            target_mean: vec![1.0],
            target_cov: vec![vec![0.25]],
            sample_sizes: vec![64, 256, 1024],
            sampling_sigmas: vec![1.0, 2.0, 4.0],
            seeds: 5,
            steps: 2000,
            learning_rate: 3e-3,
            final_learning_rate: 3e-5,
            hidden: vec![16, 16],
            mc_pairs: 4,
            ode_steps: 16,
            eval_samples: 10_000,
            d4_samples: 100_000,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn matrix(key: &str, rows: &[Vec<f64>]) -> Result<Matrix, CliError> {
    Matrix::from_rows(rows).map_err(|e| config_err(format!("system.{key}: {e}")))
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Config::from_json(&text)
    }

    /// Checks everything that can be checked without running a command.
    pub fn validate(&self) -> Result<(), CliError> {
        self.build_system()?;
        self.sac
            .to_sac_config()
            .validate()
            .map_err(|e| config_err(format!("sac: {e}")))?;
        let ev = &self.evaluate;
        if ev.n_traj == 0 || ev.traj_len == 0 {
            return Err(config_err("evaluate.n_traj and evaluate.traj_len must be at least 1"));
        }
        if ev.ode_steps == Some(0) {
            return Err(config_err("evaluate.ode_steps must be at least 1"));
        }
        if self.oracle.return_n_traj == 0 || self.oracle.return_horizon == 0 {
            return Err(config_err(
                "oracle.return_n_traj and oracle.return_horizon must be at least 1",
            ));
        }
        crate::bench::BenchSpec::from_section(&self.isfm_bench)?;
        Ok(())
    }

    /// The LQR system this configuration describes, at temperature `alpha`.
    pub fn build_system(&self) -> Result<LqrSystem, CliError> {
        let s = &self.system;
        let explicit = s.a.is_some() || s.b.is_some() || s.q.is_some() || s.r.is_some();
        let (a, b, q, r, gamma, sigma_w, init) = match &s.preset {
            Some(name) => {
                if explicit || s.sigma_w.is_some() {
                    return Err(config_err(
                        "system: give either `preset` or explicit matrices, not both",
                    ));
                }
                let p = preset(name)?;
                let gamma = s.gamma.unwrap_or(p.4);
                let init = match &s.init_state {
                    Some(spec) => init_state(spec)?,
                    None => p.6,
                };
                (p.0, p.1, p.2, p.3, gamma, p.5, init)
            }
            None => {
                let need = |key: &str, m: &Option<Vec<Vec<f64>>>| {
                    m.as_ref()
                        .ok_or_else(|| config_err(format!("system.{key} is required without a preset")))
                        .and_then(|rows| matrix(key, rows))
                };
                let a = need("A", &s.a)?;
                let b = need("B", &s.b)?;
                let q = need("Q", &s.q)?;
                let r = need("R", &s.r)?;
                let gamma = s
                    .gamma
                    .ok_or_else(|| config_err("system.gamma is required without a preset"))?;
                let n = a.rows();
                let sigma_w = match &s.sigma_w {
                    Some(rows) => matrix("sigma_w", rows)?,
                    None => Matrix::zeros(n, n),
                };
                let init = match &s.init_state {
                    Some(spec) => init_state(spec)?,
                    None => InitialState::Fixed(Vector::zeros(n)),
                };
                (a, b, q, r, gamma, sigma_w, init)
            }
        };
        LqrSystem::new(a, b, q, r, gamma, sigma_w, self.alpha, init).map_err(|e| config_err(format!("system: {e}")))
    }
}

fn init_state(spec: &InitStateSpec) -> Result<InitialState, CliError> {
    let vector =
        |key: &str, v: &[f64]| Vector::new(v.to_vec()).map_err(|e| config_err(format!("system.init_state.{key}: {e}")));
    Ok(match spec {
        InitStateSpec::Fixed(x) => InitialState::Fixed(vector("fixed", x)?),
        InitStateSpec::Gaussian { mean, cov } => InitialState::Gaussian {
            mean: vector("mean", mean)?,
            cov: Matrix::from_rows(cov).map_err(|e| config_err(format!("system.init_state.cov: {e}")))?,
        },
    })
}

type PresetParts = (Matrix, Matrix, Matrix, Matrix, f64, Matrix, InitialState);

fn preset(name: &str) -> Result<PresetParts, CliError> {
    let i = |n| Matrix::identity(n);
    let zero = |n| InitialState::Fixed(Vector::zeros(n));
    Ok(match name {
        "paper_eq12" => {
            let mut rows = vec![vec![0.0; 5]; 5];
            for (k, row) in rows.iter_mut().enumerate() {
                row[k] = 0.55;
                row[(k + 1) % 5] = 0.55;
            }
            let a = Matrix::from_rows(&rows).expect("static preset");
            (a, i(5), i(5), i(5), 0.9, i(5), zero(5))
        }
        "quickstart_2d" => (i(2).scale(0.5), i(2), i(2), i(2), 0.9, i(2).scale(0.01), zero(2)),
        "scalar" => (i(1), i(1), i(1), i(1), 0.9, i(1), zero(1)),
        "zero_a_toy" => (Matrix::zeros(2, 2), i(2), i(2), i(2), 0.9, i(2).scale(0.01), zero(2)),
        other => {
            return Err(config_err(format!(
                "system.preset: unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            )))
        }
    })
}
