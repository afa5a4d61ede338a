use std::sync::OnceLock;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rodiff_core::benchmark::simulate_split;
use rodiff_core::diffusion::denoiser::DenoiserConfig;
use rodiff_core::diffusion::{Policy, TrainConfig, TrainingSet};
use rodiff_core::dynamics::Dynamics;
use rodiff_core::eval::{finetune_to, train_il, trajectory_optimize, FinetuneConfig, Strategy};
use rodiff_core::model::RodModel;
use rodiff_core::pita::{guided_sample_from, AdaptConfig, AdaptMode, Surrogate};

struct Fixture {
    model: RodModel,
    config: TrainConfig,
    data: TrainingSet,
    goals: Vec<Vector3<f64>>,
    policy: Policy,
    il_history: Vec<f64>,
}

/// Wide enough to memorize twenty trajectories in a couple of thousand steps.
fn small_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        ema_decay: 0.99,
        batch: 32,
        diffusion_steps: 256,
        denoiser: DenoiserConfig {
            d_model: 64,
            blocks: 2,
            heads: 2,
            goal_tokens: 2,
            ffn_mult: 2,
            ..DenoiserConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let model = RodModel::default();
        let (mut train, _) = simulate_split(&Dynamics::new(&model).unwrap(), 24, 5).unwrap();
        train.truncate(20);
        assert_eq!(train.len(), 20);
        let config = small_config();
        let data = TrainingSet::from_trajectories(&train, &config).unwrap();
        let (policy, trainer) = train_il(&data, &config, 2000).unwrap();
        Fixture {
            goals: train.iter().map(|t| t.goal).collect(),
            il_history: trainer.history.iter().map(|l| l.total).collect(),
            model,
            config,
            data,
            policy,
        }
    })
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn two_thousand_imitation_steps_cut_the_loss_by_ninety_percent() {
    let h = &fixture().il_history;
    let (first, last) = (window_mean(&h[..25]), window_mean(&h[h.len() - 200..]));
    assert!(last <= 0.1 * first, "loss {first:.4} -> {last:.4}");
}

#[test]
fn trajectory_optimization_lowers_the_surrogate() {
    let f = fixture();
    let cfg = FinetuneConfig {
        to_iterations: 30,
        to_batch: 4,
        ddim_steps: 8,
        ..FinetuneConfig::default()
    };
    let (_, history) = trajectory_optimize(&f.model, &f.policy, &f.goals, 1e-3, &cfg).unwrap();
    assert_eq!(history.len(), 30);
    assert!(window_mean(&history[20..]) < window_mean(&history[..10]), "{history:?}");

    let to = finetune_to(&f.model, &f.data, &f.goals, Strategy::To, &f.config, &cfg).unwrap();
    assert!(to.il_history.is_empty() && to.to_history.len() == 30);
    assert_eq!(to.policy.normalizer, f.data.normalizer);
}

#[test]
fn small_step_projection_guidance_rarely_raises_the_surrogate() {
    let f = fixture();
    let adapt = AdaptConfig {
        mode: AdaptMode::ProjFinetune,
        lr_tta: 1e-4,
        ddim_steps: 16,
        ..AdaptConfig::default()
    };
    let dt = f.config.token_dt();
    let mut kept = 0;
    for (k, goal) in f.goals.iter().take(10).enumerate() {
        let x = f.policy.initial_noise(&mut ChaCha8Rng::seed_from_u64(k as u64));
        let plain = f.policy.ddim_from(goal, adapt.ddim_steps, x.clone()).unwrap();
        let sur = Surrogate::new(&f.model, goal, dt, &adapt).unwrap();
        let (p0, k0) = sur.losses(&plain).unwrap();
        let g = guided_sample_from(&f.policy, &f.model, goal, &adapt, x).unwrap();
        let (p1, k1) = sur.losses(&g.q).unwrap();
        kept += usize::from(p1 + k1 <= p0 + k0);
    }
    assert!(kept >= 8, "guided <= unguided on {kept}/10");
}

#[test]
fn every_mode_samples_without_fallbacks() {
    let f = fixture();
    for mode in AdaptMode::ALL {
        let adapt = AdaptConfig {
            mode,
            ddim_steps: 16,
            ..AdaptConfig::default()
        };
        for (k, goal) in f.goals.iter().take(3).enumerate() {
            let x = f.policy.initial_noise(&mut ChaCha8Rng::seed_from_u64(k as u64));
            let g = guided_sample_from(&f.policy, &f.model, goal, &adapt, x).unwrap();
            assert_eq!(g.fallbacks(), 0, "{mode} goal {k}");
            assert!(g.q.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn full_finetuning_costs_more_than_projection_finetuning() {
    let f = fixture();
    let goal = f.goals[0];
    let x = f.policy.initial_noise(&mut ChaCha8Rng::seed_from_u64(9));
    let time = |mode| {
        let cfg = AdaptConfig {
            mode,
            ddim_steps: 16,
            ..AdaptConfig::default()
        };
        (0..3)
            .map(|_| guided_sample_from(&f.policy, &f.model, &goal, &cfg, x.clone()).unwrap().seconds)
            .fold(f64::INFINITY, f64::min)
    };
    let (proj, full) = (time(AdaptMode::ProjFinetune), time(AdaptMode::FullFinetune));
    assert!(full > proj, "full {full:.4} s vs proj {proj:.4} s");
}
