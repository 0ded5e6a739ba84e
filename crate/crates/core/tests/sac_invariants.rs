mod common;

use std::collections::VecDeque;

use common::{flatten, v};
use flowsac_core::lqr::{InitialState, LqrSystem, Transition};
use flowsac_core::nn::MlpParams;
use flowsac_core::rng::{stream_rng, Stream};
use flowsac_core::sac::{
    policy_eval_loss, polyak_update, q_regression_loss, soft_targets, train, ActionSamples, LogRow, ReplayBuffer,
    SacConfig, SacState,
};
use flowsac_core::{Matrix, Vector};
use rand::Rng;

fn transition(id: f64) -> Transition {
    Transition {
        x: v(&[id]),
        u: v(&[-id]),
        r: -id,
        x_next: v(&[id + 0.5]),
    }
}

#[test]
fn buffer_tracks_a_reference_queue_exhaustively() {
    // Every push/sample sequence of length 8 at capacity 4.
    for pattern in 0u32..256 {
        let mut buffer = ReplayBuffer::new(4).unwrap();
        let mut model: VecDeque<f64> = VecDeque::new();
        let mut rng = stream_rng(pattern as u64, Stream::Minibatch, 0);
        let mut next = 0.0;
        for op in 0..8 {
            if pattern >> op & 1 == 1 || model.is_empty() {
                buffer.push(transition(next));
                model.push_back(next);
                if model.len() > 4 {
                    model.pop_front();
                }
                next += 1.0;
            } else {
                let k = rng.random_range(1..=model.len());
                let batch = buffer.sample(k, &mut rng).unwrap();
                let mut ids: Vec<f64> = batch.iter().map(|t| t.x[0]).collect();
                assert!(ids.iter().all(|id| model.contains(id)));
                ids.sort_by(f64::total_cmp);
                ids.dedup();
                assert_eq!(ids.len(), k, "sampled a transition twice");
            }
            let stored: Vec<f64> = buffer.iter().map(|t| t.x[0]).collect();
            assert_eq!(stored, model.iter().copied().collect::<Vec<_>>());
            for (t, id) in buffer.iter().zip(&model) {
                assert_eq!(t, &transition(*id));
            }
        }
    }
}

fn q_net(seed: u64) -> MlpParams {
    MlpParams::init(&[2 + 1, 8, 8, 1], 1.0, &mut stream_rng(seed, Stream::Init, 0)).unwrap()
}

fn eval_fixture() -> (Vec<Transition>, Vec<ActionSamples>) {
    let mut rng = stream_rng(1, Stream::Samples, 0);
    let mut draw = || rng.random_range(-1.0..1.0);
    let batch: Vec<Transition> = (0..5)
        .map(|_| Transition {
            x: v(&[draw(), draw()]),
            u: v(&[draw()]),
            r: -draw().abs(),
            x_next: v(&[draw(), draw()]),
        })
        .collect();
    let next: Vec<ActionSamples> = (0..5)
        .map(|_| ActionSamples {
            actions: (0..3).map(|_| v(&[draw()])).collect(),
            log_probs: (0..3).map(|_| -1.0 + draw()).collect(),
        })
        .collect();
    (batch, next)
}

#[test]
fn targets_carry_no_gradient() {
    let (batch, next) = eval_fixture();
    let psi = q_net(1);
    let psi_bar = q_net(2);
    let targets = soft_targets(&psi_bar, &batch, &next, 0.7, 0.9).unwrap();
    let (_, before) = q_regression_loss(&psi, &batch, &targets).unwrap();
    // Perturbing ψ̄ after the targets are fixed leaves ∂L/∂ψ untouched.
    let mut perturbed = psi_bar.clone();
    polyak_update(&mut perturbed, &q_net(3), 0.5).unwrap();
    assert_ne!(flatten(&perturbed), flatten(&psi_bar));
    let (_, after) = q_regression_loss(&psi, &batch, &targets).unwrap();
    assert_eq!(before, after);
    // The full loss equals regression onto targets recomputed from the new ψ̄.
    let (loss, grad) = policy_eval_loss(&psi, &perturbed, &batch, &next, 0.7, 0.9).unwrap();
    let fresh = soft_targets(&perturbed, &batch, &next, 0.7, 0.9).unwrap();
    let (loss2, grad2) = q_regression_loss(&psi, &batch, &fresh).unwrap();
    assert_eq!(loss.to_bits(), loss2.to_bits());
    assert_eq!(grad, grad2);
}

#[test]
fn lower_log_probability_raises_the_target() {
    let (batch, next) = eval_fixture();
    let psi_bar = q_net(4);
    let (alpha, gamma) = (0.7, 0.9);
    let base = soft_targets(&psi_bar, &batch, &next, alpha, gamma).unwrap();
    let lowered: Vec<ActionSamples> = next
        .iter()
        .map(|s| ActionSamples {
            actions: s.actions.clone(),
            log_probs: s.log_probs.iter().map(|l| l - 0.5).collect(),
        })
        .collect();
    let raised = soft_targets(&psi_bar, &batch, &lowered, alpha, gamma).unwrap();
    for (a, b) in base.iter().zip(&raised) {
        assert!(b > a);
        assert!((b - a - gamma * alpha * 0.5).abs() < 1e-12);
    }
}

#[test]
fn polyak_contracts_geometrically() {
    let online = q_net(5);
    let start = q_net(6);
    let mut target = start.clone();
    let tau = 0.2;
    for _ in 0..10 {
        polyak_update(&mut target, &online, tau).unwrap();
    }
    let factor = (1.0f64 - tau).powi(10);
    for ((t, o), s) in flatten(&target).iter().zip(flatten(&online)).zip(flatten(&start)) {
        assert!((t - o - factor * (s - o)).abs() < 1e-12);
    }
}

fn tiny_config() -> SacConfig {
    SacConfig {
        batch_size: 16,
        n_actions: 4,
        hidden_pi: vec![8, 8],
        hidden_q: vec![8, 8],
        ode_steps_train: 4,
        ode_steps_eval: 4,
        eval_every: 20,
        eval_n_traj: 5,
        eval_horizon: 20,
        q_warmup_episodes: 10,
        ..SacConfig::default()
    }
}

fn quickstart() -> LqrSystem {
    let i2 = Matrix::identity(2);
    LqrSystem::new(
        i2.scale(0.5),
        i2.clone(),
        i2.clone(),
        i2.clone(),
        0.9,
        i2.scale(0.01),
        1.0,
        InitialState::Fixed(Vector::zeros(2)),
    )
    .unwrap()
}

fn row_bits(r: &LogRow) -> Vec<u64> {
    [
        r.eval_return_mean,
        r.eval_return_stderr,
        r.loss_q,
        r.loss_pi,
        r.weight_entropy,
        r.grad_norm_q,
        r.grad_norm_pi,
    ]
    .iter()
    .map(|v| v.to_bits())
    .collect()
}

#[test]
fn training_is_bitwise_reproducible() {
    let (log_a, state_a) = train(quickstart(), tiny_config(), 60, 17).unwrap();
    let (log_b, state_b) = train(quickstart(), tiny_config(), 60, 17).unwrap();
    assert_eq!(log_a.len(), 3);
    assert_eq!(log_a.len(), log_b.len());
    for (a, b) in log_a.iter().zip(&log_b) {
        assert_eq!(a.episode, b.episode);
        assert_eq!(row_bits(a), row_bits(b));
    }
    assert_eq!(state_a, state_b);
    let (log_c, _) = train(quickstart(), tiny_config(), 60, 18).unwrap();
    assert_ne!(row_bits(&log_a[2]), row_bits(&log_c[2]));
}

#[test]
fn initial_policy_is_near_standard_normal() {
    let (log, state) = train(quickstart(), SacConfig::default(), 0, 3).unwrap();
    assert!(log.is_empty());
    assert_eq!(state, SacState::init(2, 2, &SacConfig::default(), 3).unwrap());
    let policy = state.policy(16).unwrap();
    let mut rng = stream_rng(3, Stream::Samples, 0);
    let n = 4000;
    let draws: Vec<Vector> = (0..n)
        .map(|_| policy.sample(&v(&[0.3, -0.2]), &mut rng).unwrap().0)
        .collect();
    for i in 0..2 {
        let mean = draws.iter().map(|u| u[i]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|u| (u[i] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }
}
