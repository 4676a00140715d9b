//! Learning updates against hand-rolled reference trajectories.

use derl::foml::{Foml, FomlConfig, ParamBundle};
use derl::synth::LinearGaussianTask;
use derl::wae::{Reduction, Wae, WaeConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (Wae, derl::wae::TransitionBatch) {
    let task = LinearGaussianTask::new(seed, 8, 2, 3, 0.1).unwrap();
    let cfg = WaeConfig {
        dim_z: 2,
        hidden: vec![16],
        init_std: 0.1,
        ..WaeConfig::default()
    };
    let wae = Wae::new(8, 3, &cfg, seed).unwrap();
    let stream = task.sample(42, false, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    (wae, stream)
}

/// Without the proximal pull the online epochs are plain gradient descent
/// on the training part of the stream.
#[test]
fn unregularized_online_steps_are_gradient_descent() {
    for seed in 0..3 {
        let (mut wae, stream) = setup(seed);
        let cfg = FomlConfig {
            beta1: 0.0,
            alpha1: 0.01,
            ..FomlConfig::default()
        };
        let mut foml = Foml::new(cfg.clone(), &wae, seed).unwrap();

        let mut reference = wae.clone();
        let train = stream.slice(0, cfg.train_len());
        for e in 0..cfg.epochs {
            let noise = foml.noise_for(0, e, train.len(), reference.dim_z);
            let eval = reference.objective(&train, &noise, Reduction::Mean).unwrap();
            for (net, g) in [(&mut reference.encoder, &eval.encoder), (&mut reference.decoder, &eval.decoder)] {
                let p: Vec<f64> = net.flat_params().iter().zip(g.flat()).map(|(p, g)| p - cfg.alpha1 * g).collect();
                net.set_flat_params(&p).unwrap();
            }
        }

        foml.run_window_update(&mut wae, &stream).unwrap();
        let gap = ParamBundle::of(&wae).distance_sq(&ParamBundle::of(&reference)).unwrap().sqrt();
        assert!(gap <= 1e-15, "seed {seed}: {gap}");
    }
}

/// With every rate at zero nothing moves.
#[test]
fn zero_rates_freeze_everything() {
    let (mut wae, stream) = setup(4);
    let cfg = FomlConfig {
        alpha1: 0.0,
        beta1: 0.0,
        alpha2: 0.0,
        beta2: 0.0,
        ..FomlConfig::default()
    };
    let before = ParamBundle::of(&wae);
    let mut foml = Foml::new(cfg, &wae, 4).unwrap();
    let row = foml.run_window_update(&mut wae, &stream).unwrap();
    assert_eq!(ParamBundle::of(&wae), before);
    assert_eq!(foml.anchor, before);
    assert_eq!(row.param_delta_norm, 0.0);
    assert_eq!(row.loss_before, row.loss_after);
}

/// The anchor trails the live parameters: after many windows on a fixed
/// stream it sits between its start and the live parameters.
#[test]
fn anchor_follows_live_parameters() {
    let (mut wae, stream) = setup(5);
    let cfg = FomlConfig {
        alpha1: 0.01,
        beta1: 0.5,
        alpha2: 0.05,
        beta2: 0.5,
        ..FomlConfig::default()
    };
    let start = ParamBundle::of(&wae);
    let mut foml = Foml::new(cfg, &wae, 5).unwrap();
    let mut rows = Vec::new();
    for _ in 0..30 {
        rows.push(foml.run_window_update(&mut wae, &stream).unwrap());
    }
    let live = ParamBundle::of(&wae);
    let moved = foml.anchor.distance_sq(&start).unwrap();
    assert!(moved > 0.0);
    assert!(foml.anchor.distance_sq(&live).unwrap() < start.distance_sq(&live).unwrap());
    assert!(rows.last().unwrap().loss_after < rows[0].loss_before);
    assert_eq!(foml.history.len(), 6);
}
