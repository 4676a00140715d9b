//! Analytic-versus-numeric gradient comparisons. Each check returns the
//! largest relative error it saw.
//!
//! Fixtures are redrawn until every ReLU pre-activation on the evaluated
//! graph sits at least [`KINK_MARGIN`] from zero, so the stencil never
//! straddles a kink.

use derl::foml::{regularizer, regularizer_grad, ParamBundle};
use derl::nn::{Activation, DenseNet, Gradients};
use derl::td3::{actor_objective, critic_objective, softmax_rows};
use derl::wae::{Reduction, TransitionBatch, Wae, WaeConfig, WaeNoise};
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::max_rel_err;

/// Weight scale of the networks under test. At the production default of
/// 1e-3 every gradient sits below the comparison floor.
pub const CHECK_INIT_STD: f64 = 0.5;
pub const KINK_MARGIN: f64 = 1e-2;
const MAX_DRAWS: u64 = 1000;

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Redraws every parameter, biases included, from N(0, CHECK_INIT_STD^2).
fn randomize(net: &mut DenseNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let p: Vec<f64> = (0..net.num_params()).map(|_| CHECK_INIT_STD * rng.sample::<f64, _>(StandardNormal)).collect();
    net.set_flat_params(&p).unwrap();
}

/// Smallest |pre-activation| over the ReLU units of `net` on inputs `x`.
pub fn relu_margin(net: &DenseNet, x: ArrayView2<f64>) -> f64 {
    let mut h = x.to_owned();
    let mut margin = f64::INFINITY;
    for layer in net.layers() {
        let mut z = h.dot(&layer.weights.t()) + &layer.bias;
        match layer.activation {
            Activation::Relu => {
                margin = margin.min(z.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
                z.mapv_inplace(|v| v.max(0.0));
            }
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Linear => {}
        }
        h = z;
    }
    margin
}

fn with_params(net: &DenseNet, p: &[f64]) -> DenseNet {
    let mut n = net.clone();
    n.set_flat_params(p).unwrap();
    n
}

/// A random network of 1 to 4 layers with at most 32 units per layer and
/// mixed activations, checked on `sum_i <u_i, f(x_i)>` for its parameters
/// and its input. Returns (max error, number of layers, widest layer).
pub fn random_net(seed: u64) -> (f64, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.random_range(1..=4usize);
    let sizes: Vec<usize> = (0..=layers).map(|_| rng.random_range(1..=32usize)).collect();
    let acts: Vec<Activation> = (0..layers)
        .map(|_| match rng.random_range(0..3) {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            _ => Activation::Linear,
        })
        .collect();
    let mut net = DenseNet::init_with_std(&sizes, &acts, seed, CHECK_INIT_STD).unwrap();
    randomize(&mut net, seed);
    let batch = 3;
    let x = (0..MAX_DRAWS)
        .map(|_| normal(&mut rng, batch, sizes[0]))
        .find(|x| relu_margin(&net, x.view()) >= KINK_MARGIN)
        .expect("no kink-free input found");
    let u = normal(&mut rng, batch, sizes[layers]);
    let loss = |n: &DenseNet, x: &Array2<f64>| (n.forward_batch(x.view()).unwrap() * &u).sum();

    let trace = net.forward_trace(x.view()).unwrap();
    let bp = net.backward_batch(&trace, u.view()).unwrap();
    let e_params = max_rel_err(|p| loss(&with_params(&net, p), &x), &net.flat_params(), &bp.params.flat());
    let x0: Vec<f64> = x.iter().copied().collect();
    let e_input = max_rel_err(
        |v| loss(&net, &Array2::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap()),
        &x0,
        &bp.input.iter().copied().collect::<Vec<_>>(),
    );
    (e_params.max(e_input), layers, *sizes.iter().max().unwrap())
}

/// Small autoencoder, a batch and fixed noise whose encoder and decoder
/// passes stay clear of ReLU kinks. `noise.eps` doubles as the variational
/// noise.
pub fn wae_fixture(seed: u64) -> (Wae, TransitionBatch, WaeNoise) {
    let cfg = WaeConfig {
        dim_z: 3,
        hidden: vec![8, 8],
        lambda: 2.0,
        init_std: CHECK_INIT_STD,
        ..WaeConfig::default()
    };
    let (ds, da, n) = (6, 3, 5);
    let mut wae = Wae::new(ds, da, &cfg, seed).unwrap();
    randomize(&mut wae.encoder, seed);
    randomize(&mut wae.decoder, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for _ in 0..MAX_DRAWS {
        let s = normal(&mut rng, n, ds);
        let a = softmax_rows(&normal(&mut rng, n, da)).unwrap();
        let sn = normal(&mut rng, n, ds);
        let noise = WaeNoise::sample(n, cfg.dim_z, &mut rng);
        let head = wae.encoder.forward_batch(s.view()).unwrap();
        let mu = head.slice(s![.., ..cfg.dim_z]);
        let sigma = head.slice(s![.., cfg.dim_z..]).mapv(|v| (0.5 * v.clamp(-10.0, 10.0)).exp());
        let z = &mu + &(&sigma * &noise.eps);
        let dec_in = concatenate(Axis(1), &[z.view(), a.view()]).unwrap();
        if relu_margin(&wae.encoder, s.view()) >= KINK_MARGIN && relu_margin(&wae.decoder, dec_in.view()) >= KINK_MARGIN {
            return (wae, TransitionBatch::new(s, a, sn).unwrap(), noise);
        }
    }
    panic!("no kink-free autoencoder fixture for seed {seed}");
}

fn both_halves(wae: &Wae, loss: impl Fn(&Wae) -> f64, g_enc: &Gradients, g_dec: &Gradients) -> f64 {
    let e_enc = max_rel_err(
        |p| {
            let mut w = wae.clone();
            w.encoder.set_flat_params(p).unwrap();
            loss(&w)
        },
        &wae.encoder.flat_params(),
        &g_enc.flat(),
    );
    let e_dec = max_rel_err(
        |p| {
            let mut w = wae.clone();
            w.decoder.set_flat_params(p).unwrap();
            loss(&w)
        },
        &wae.decoder.flat_params(),
        &g_dec.flat(),
    );
    e_enc.max(e_dec)
}

/// Full autoencoder objective (reconstruction plus weighted MMD) with fixed
/// noise, encoder and decoder parameters.
pub fn wae_objective(seed: u64, reduction: Reduction) -> f64 {
    let (wae, batch, noise) = wae_fixture(seed);
    let eval = wae.objective(&batch, &noise, reduction).unwrap();
    both_halves(
        &wae,
        |w| w.objective(&batch, &noise, reduction).unwrap().loss,
        &eval.encoder,
        &eval.decoder,
    )
}

/// Reconstruction plus KL objective of the variational variant.
pub fn vae_objective(seed: u64) -> f64 {
    let (wae, batch, noise) = wae_fixture(seed);
    let eval = wae.vae_objective(&batch, &noise.eps).unwrap();
    both_halves(
        &wae,
        |w| w.vae_objective(&batch, &noise.eps).unwrap().loss,
        &eval.encoder,
        &eval.decoder,
    )
}

/// Squared distance to an anchor obtained by perturbing the live parameters.
pub fn foml_regularizer(seed: u64) -> f64 {
    let (wae, _, _) = wae_fixture(seed);
    let mut anchor = ParamBundle::of(&wae);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 11);
    for net in [&mut anchor.encoder, &mut anchor.decoder] {
        let p: Vec<f64> = net.flat_params().iter().map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        net.set_flat_params(&p).unwrap();
    }
    let (ge, gd) = regularizer_grad(&wae, &anchor).unwrap();
    both_halves(&wae, |w| regularizer(w, &anchor).unwrap(), &ge, &gd)
}

fn relu_net(sizes: &[usize], seed: u64) -> DenseNet {
    let mut acts = vec![Activation::Relu; sizes.len() - 2];
    acts.push(Activation::Linear);
    let mut net = DenseNet::init_with_std(sizes, &acts, seed, CHECK_INIT_STD).unwrap();
    randomize(&mut net, seed);
    net
}

const DZ: usize = 4;
const DA: usize = 3;
const BATCH: usize = 6;

/// Mean squared TD error of a critic against fixed targets.
pub fn critic(seed: u64) -> f64 {
    let net = relu_net(&[DZ + DA, 16, 16, 1], seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 13);
    let (z, a) = (0..MAX_DRAWS)
        .map(|_| (normal(&mut rng, BATCH, DZ), softmax_rows(&normal(&mut rng, BATCH, DA)).unwrap()))
        .find(|(z, a)| relu_margin(&net, concatenate(Axis(1), &[z.view(), a.view()]).unwrap().view()) >= KINK_MARGIN)
        .expect("no kink-free critic fixture");
    let y: Vec<f64> = (0..BATCH).map(|_| rng.sample(StandardNormal)).collect();
    let (_, g) = critic_objective(&net, z.view(), a.view(), &y).unwrap();
    max_rel_err(
        |p| critic_objective(&with_params(&net, p), z.view(), a.view(), &y).unwrap().0,
        &net.flat_params(),
        &g.flat(),
    )
}

/// Negative mean critic value of the actor's softmax allocation.
pub fn actor(seed: u64) -> f64 {
    let act = relu_net(&[DZ, 16, 16, DA], seed);
    let crit = relu_net(&[DZ + DA, 16, 16, 1], seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 17);
    let z = (0..MAX_DRAWS)
        .map(|_| normal(&mut rng, BATCH, DZ))
        .find(|z| {
            let probs = softmax_rows(&act.forward_batch(z.view()).unwrap()).unwrap();
            let x = concatenate(Axis(1), &[z.view(), probs.view()]).unwrap();
            relu_margin(&act, z.view()) >= KINK_MARGIN && relu_margin(&crit, x.view()) >= KINK_MARGIN
        })
        .expect("no kink-free actor fixture");
    let (_, g) = actor_objective(&act, &crit, z.view()).unwrap();
    max_rel_err(
        |p| actor_objective(&with_params(&act, p), &crit, z.view()).unwrap().0,
        &act.flat_params(),
        &g.flat(),
    )
}
