//! Next-state reconstructing autoencoder trained with the WAE-MMD objective.
//!
//! The encoder maps a state to a diagonal Gaussian over the latent space via
//! a doubled output head `[mu; logvar]` (logvar clamped to [-10, 10]). The
//! decoder maps `[z; a]` to the predicted next state. The training objective
//! for a batch of `n` transitions is
//!
//! ```text
//! L = (1/n) sum_i |s'_i - G([z~_i; a_i])|^2 + lambda * MMD(prior draws, z~)
//! ```
//!
//! with the inverse multiquadratic kernel `k(x, y) = c / (c + |x - y|^2)`,
//! `c = scale^2`.

use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, Gradients, Optimizer};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Rows are transitions `(s, a, s')`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_states: Array2<f64>,
}

impl TransitionBatch {
    pub fn new(states: Array2<f64>, actions: Array2<f64>, next_states: Array2<f64>) -> Result<Self> {
        let n = states.nrows();
        if actions.nrows() != n || next_states.nrows() != n {
            return Err(Error::Shape("transition batch rows disagree".into()));
        }
        if states.ncols() != next_states.ncols() {
            return Err(Error::Shape("state and next-state widths differ".into()));
        }
        Ok(Self {
            states,
            actions,
            next_states,
        })
    }

    pub fn empty(dim_s: usize, dim_a: usize) -> Self {
        Self {
            states: Array2::zeros((0, dim_s)),
            actions: Array2::zeros((0, dim_a)),
            next_states: Array2::zeros((0, dim_s)),
        }
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim_s(&self) -> usize {
        self.states.ncols()
    }

    pub fn dim_a(&self) -> usize {
        self.actions.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            states: self.states.select(Axis(0), rows),
            actions: self.actions.select(Axis(0), rows),
            next_states: self.next_states.select(Axis(0), rows),
        }
    }

    pub fn slice(&self, from: usize, to: usize) -> Self {
        Self {
            states: self.states.slice(s![from..to, ..]).to_owned(),
            actions: self.actions.slice(s![from..to, ..]).to_owned(),
            next_states: self.next_states.slice(s![from..to, ..]).to_owned(),
        }
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        let cat = |a: &Array2<f64>, b: &Array2<f64>| {
            concatenate(Axis(0), &[a.view(), b.view()]).map_err(|e| Error::Shape(e.to_string()))
        };
        Self::new(
            cat(&self.states, &other.states)?,
            cat(&self.actions, &other.actions)?,
            cat(&self.next_states, &other.next_states)?,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImqKernel {
    pub scale: f64,
}

impl ImqKernel {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("kernel scale must be positive, got {scale}")));
        }
        Ok(Self { scale })
    }

    fn c(&self) -> f64 {
        self.scale * self.scale
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.c() / (self.c() + r2)
    }
}

fn row(a: &ArrayView2<f64>, i: usize) -> Vec<f64> {
    a.row(i).to_vec()
}

fn check_pair(z: &ArrayView2<f64>, zt: &ArrayView2<f64>) -> Result<usize> {
    let n = z.nrows();
    if zt.nrows() != n || z.ncols() != zt.ncols() {
        return Err(Error::Shape("MMD samples must have equal shapes".into()));
    }
    if n < 2 {
        return Err(Error::Estimator("MMD needs at least two samples".into()));
    }
    Ok(n)
}

/// `(1/(n(n-1))) sum_{l != j} [k(z_l, z_j) + k(zt_l, zt_j)] - (2/n^2) sum_{l,j} k(z_l, zt_j)`.
pub fn mmd(z: ArrayView2<f64>, zt: ArrayView2<f64>, kernel: &ImqKernel) -> Result<f64> {
    let n = check_pair(&z, &zt)?;
    let (mut within, mut cross) = (0.0, 0.0);
    for l in 0..n {
        let (zl, ztl) = (row(&z, l), row(&zt, l));
        for j in 0..n {
            let (zj, ztj) = (row(&z, j), row(&zt, j));
            if l != j {
                within += kernel.eval(&zl, &zj) + kernel.eval(&ztl, &ztj);
            }
            cross += kernel.eval(&zl, &ztj);
        }
    }
    let nf = n as f64;
    Ok(within / (nf * (nf - 1.0)) - 2.0 * cross / (nf * nf))
}

/// Gradient of [`mmd`] with respect to the second sample set.
pub fn mmd_grad_second(z: ArrayView2<f64>, zt: ArrayView2<f64>, kernel: &ImqKernel) -> Result<Array2<f64>> {
    let n = check_pair(&z, &zt)?;
    let c = kernel.c();
    let nf = n as f64;
    let w_within = 1.0 / (nf * (nf - 1.0));
    let w_cross = 2.0 / (nf * nf);
    let mut g = Array2::zeros(zt.raw_dim());
    // d k(x, y) / dx = -2 (x - y) k^2 / c
    for m in 0..n {
        let zm = row(&zt, m);
        for j in 0..n {
            if j != m {
                let zj = row(&zt, j);
                let k = kernel.eval(&zm, &zj);
                let f = -2.0 * k * k / c * 2.0 * w_within;
                for d in 0..zm.len() {
                    g[[m, d]] += f * (zm[d] - zj[d]);
                }
            }
            let pl = row(&z, j);
            let k = kernel.eval(&pl, &zm);
            let f = -2.0 * k * k / c * (-w_cross);
            for d in 0..zm.len() {
                g[[m, d]] += f * (zm[d] - pl[d]);
            }
        }
    }
    Ok(g)
}

/// `(1/2) sum_j (mu_j^2 + sigma_j^2 - 1 - log sigma_j^2)`.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaeConfig {
    pub dim_z: usize,
    pub hidden: Vec<usize>,
    pub lambda: f64,
    /// Kernel scale; the latent dimension when absent.
    pub kernel_scale: Option<f64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
}

impl Default for WaeConfig {
    fn default() -> Self {
        Self {
            dim_z: 500,
            hidden: vec![512, 512],
            lambda: 2.0,
            kernel_scale: None,
            batch_size: 40,
            learning_rate: 1e-3,
            steps: 50_000,
            init_std: crate::nn::INIT_STD,
        }
    }
}

impl WaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim_z == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("latent and hidden sizes must be positive".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init std must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.learning_rate > 0.0) {
            return Err(Error::Config("lambda must be >= 0 and learning rate > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<ImqKernel> {
        ImqKernel::new(self.kernel_scale.unwrap_or(self.dim_z as f64))
    }
}

/// Randomness consumed by one objective evaluation.
#[derive(Clone, Debug)]
pub struct WaeNoise {
    /// Reparameterization noise, `n x dim_z`.
    pub eps: Array2<f64>,
    /// Prior draws, `n x dim_z`.
    pub prior: Array2<f64>,
}

impl WaeNoise {
    pub fn sample(n: usize, dim_z: usize, rng: &mut impl Rng) -> Self {
        let mut draw = || Array2::from_shape_simple_fn((n, dim_z), || StandardNormal.sample(&mut *rng));
        let eps = draw();
        let prior = draw();
        Self { eps, prior }
    }

    pub fn zeros(n: usize, dim_z: usize) -> Self {
        Self {
            eps: Array2::zeros((n, dim_z)),
            prior: Array2::zeros((n, dim_z)),
        }
    }
}

/// How the reconstruction term aggregates over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Objective value and exact gradients for one batch.
#[derive(Clone, Debug)]
pub struct WaeEval {
    pub loss: f64,
    pub recon: f64,
    pub mmd: f64,
    pub encoder: Gradients,
    pub decoder: Gradients,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wae {
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    pub dim_z: usize,
    pub lambda: f64,
    pub kernel: ImqKernel,
}

impl Wae {
    pub fn new(dim_s: usize, dim_a: usize, config: &WaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut enc_sizes = vec![dim_s];
        enc_sizes.extend(&config.hidden);
        enc_sizes.push(2 * config.dim_z);
        let mut dec_sizes = vec![config.dim_z + dim_a];
        dec_sizes.extend(&config.hidden);
        dec_sizes.push(dim_s);
        let acts = |n: usize| {
            let mut a = vec![Activation::Relu; n - 2];
            a.push(Activation::Linear);
            a
        };
        let encoder = DenseNet::init_with_std(&enc_sizes, &acts(enc_sizes.len()), seed, config.init_std)?;
        let decoder = DenseNet::init_with_std(
            &dec_sizes,
            &acts(dec_sizes.len()),
            seed.wrapping_add(1),
            config.init_std,
        )?;
        Self::from_nets(encoder, decoder, config.lambda, config.kernel()?)
    }

    pub fn from_nets(encoder: DenseNet, decoder: DenseNet, lambda: f64, kernel: ImqKernel) -> Result<Self> {
        if encoder.output_dim() % 2 != 0 {
            return Err(Error::Shape("encoder head must have even width".into()));
        }
        let dim_z = encoder.output_dim() / 2;
        if decoder.input_dim() <= dim_z || decoder.output_dim() != encoder.input_dim() {
            return Err(Error::Shape("decoder does not match encoder".into()));
        }
        Ok(Self {
            encoder,
            decoder,
            dim_z,
            lambda,
            kernel,
        })
    }

    pub fn dim_s(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn dim_a(&self) -> usize {
        self.decoder.input_dim() - self.dim_z
    }

    /// Mean and clamped log-variance for each row of `states`.
    pub fn encode_distribution(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.encoder.forward_batch(states)?;
        let mu = out.slice(s![.., ..self.dim_z]).to_owned();
        let lv = out
            .slice(s![.., self.dim_z..])
            .mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok((mu, lv))
    }

    /// Inference-mode embedding (the mean).
    pub fn encode_mean(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.encode_distribution(states)?.0)
    }

    /// One embedding; samples `mu + sigma * eps` unless `deterministic`.
    pub fn encode(&self, s: &[f64], rng: &mut impl Rng, deterministic: bool) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, s.len()), s).map_err(|e| Error::Shape(e.to_string()))?;
        let (mu, lv) = self.encode_distribution(x)?;
        if deterministic {
            return Ok(mu.row(0).to_vec());
        }
        Ok(mu
            .row(0)
            .iter()
            .zip(lv.row(0))
            .map(|(m, l)| {
                let e: f64 = StandardNormal.sample(rng);
                m + (0.5 * l).exp() * e
            })
            .collect())
    }

    pub fn decode(&self, z: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim_z || a.len() != self.dim_a() {
            return Err(Error::Shape(format!(
                "decode expects z of {} and a of {}",
                self.dim_z,
                self.dim_a()
            )));
        }
        let mut x = z.to_vec();
        x.extend_from_slice(a);
        self.decoder.forward(&x)
    }

    pub fn decode_batch(&self, z: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = concatenate(Axis(1), &[z, a]).map_err(|e| Error::Shape(e.to_string()))?;
        self.decoder.forward_batch(x.view())
    }

    fn check_batch(&self, batch: &TransitionBatch) -> Result<()> {
        if batch.dim_s() != self.dim_s() || batch.dim_a() != self.dim_a() {
            return Err(Error::Shape(format!(
                "batch dims ({}, {}) do not match autoencoder ({}, {})",
                batch.dim_s(),
                batch.dim_a(),
                self.dim_s(),
                self.dim_a()
            )));
        }
        Ok(())
    }

    /// Objective and gradients for fixed noise. With [`Reduction::Sum`] the
    /// reconstruction term is summed instead of averaged over the batch.
    pub fn objective(&self, batch: &TransitionBatch, noise: &WaeNoise, reduction: Reduction) -> Result<WaeEval> {
        self.check_batch(batch)?;
        let n = batch.len();
        if noise.eps.dim() != (n, self.dim_z) || noise.prior.dim() != (n, self.dim_z) {
            return Err(Error::Shape("noise does not match batch".into()));
        }
        let dz = self.dim_z;
        let enc_trace = self.encoder.forward_trace(batch.states.view())?;
        let head = enc_trace.output();
        let mu = head.slice(s![.., ..dz]);
        let raw_lv = head.slice(s![.., dz..]);
        let sigma = raw_lv.mapv(|v| (0.5 * v.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp());
        let zt = &mu + &(&sigma * &noise.eps);

        let dec_in = concatenate(Axis(1), &[zt.view(), batch.actions.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let dec_trace = self.decoder.forward_trace(dec_in.view())?;
        let diff = dec_trace.output() - &batch.next_states;
        let weight = match reduction {
            Reduction::Mean => 1.0 / n as f64,
            Reduction::Sum => 1.0,
        };
        let recon = weight * diff.iter().map(|v| v * v).sum::<f64>();
        let upstream = diff.mapv(|v| 2.0 * weight * v);
        let dec_bp = self.decoder.backward_batch(&dec_trace, upstream.view())?;

        let (mmd_val, mut dz_total) = if self.lambda != 0.0 && n >= 2 {
            let m = mmd(noise.prior.view(), zt.view(), &self.kernel)?;
            let mut g = mmd_grad_second(noise.prior.view(), zt.view(), &self.kernel)?;
            g.mapv_inplace(|v| v * self.lambda);
            (m, g)
        } else {
            (0.0, Array2::zeros((n, dz)))
        };
        dz_total += &dec_bp.input.slice(s![.., ..dz]);

        let mut enc_up = Array2::zeros((n, 2 * dz));
        enc_up.slice_mut(s![.., ..dz]).assign(&dz_total);
        for i in 0..n {
            for d in 0..dz {
                let lv = raw_lv[[i, d]];
                if (LOGVAR_MIN..=LOGVAR_MAX).contains(&lv) {
                    enc_up[[i, dz + d]] = dz_total[[i, d]] * noise.eps[[i, d]] * sigma[[i, d]] * 0.5;
                }
            }
        }
        let enc_bp = self.encoder.backward_batch(&enc_trace, enc_up.view())?;
        let loss = recon + self.lambda * mmd_val;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("autoencoder loss became {loss}")));
        }
        Ok(WaeEval {
            loss,
            recon,
            mmd: mmd_val,
            encoder: enc_bp.params,
            decoder: dec_bp.params,
        })
    }

    /// `(1/n) sum |s' - s^'|^2 + mean KL(N(mu, sigma^2) || N(0, I))` and its
    /// gradients, for fixed reparameterization noise.
    pub fn vae_objective(&self, batch: &TransitionBatch, eps: &Array2<f64>) -> Result<WaeEval> {
        self.check_batch(batch)?;
        let n = batch.len();
        let dz = self.dim_z;
        if n == 0 || eps.dim() != (n, dz) {
            return Err(Error::Shape("noise does not match batch".into()));
        }
        let nf = n as f64;
        let enc_trace = self.encoder.forward_trace(batch.states.view())?;
        let head = enc_trace.output();
        let mu = head.slice(s![.., ..dz]);
        let raw_lv = head.slice(s![.., dz..]);
        let lv = raw_lv.mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        let sigma = lv.mapv(|v| (0.5 * v).exp());
        let zt = &mu + &(&sigma * eps);
        let dec_in = concatenate(Axis(1), &[zt.view(), batch.actions.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let dec_trace = self.decoder.forward_trace(dec_in.view())?;
        let diff = dec_trace.output() - &batch.next_states;
        let recon = diff.iter().map(|v| v * v).sum::<f64>() / nf;
        let dec_bp = self.decoder.backward_batch(&dec_trace, diff.mapv(|v| 2.0 * v / nf).view())?;
        let kl: f64 = (0..n)
            .map(|i| gaussian_kl(&mu.row(i).to_vec(), &lv.row(i).to_vec()))
            .sum::<f64>()
            / nf;
        let gz = dec_bp.input.slice(s![.., ..dz]);
        let mut enc_up = Array2::zeros((n, 2 * dz));
        for i in 0..n {
            for d in 0..dz {
                enc_up[[i, d]] = gz[[i, d]] + mu[[i, d]] / nf;
                if (LOGVAR_MIN..=LOGVAR_MAX).contains(&raw_lv[[i, d]]) {
                    enc_up[[i, dz + d]] =
                        gz[[i, d]] * eps[[i, d]] * sigma[[i, d]] * 0.5 + 0.5 * (lv[[i, d]].exp() - 1.0) / nf;
                }
            }
        }
        let enc_bp = self.encoder.backward_batch(&enc_trace, enc_up.view())?;
        let loss = recon + kl;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("VAE loss became {loss}")));
        }
        Ok(WaeEval {
            loss,
            recon,
            mmd: kl,
            encoder: enc_bp.params,
            decoder: dec_bp.params,
        })
    }

    /// Mean squared next-state error per coordinate, decoding the encoder mean.
    pub fn reconstruction_mse(&self, batch: &TransitionBatch) -> Result<f64> {
        self.check_batch(batch)?;
        let z = self.encode_mean(batch.states.view())?;
        let pred = self.decode_batch(z.view(), batch.actions.view())?;
        let diff = pred - &batch.next_states;
        Ok(diff.iter().map(|v| v * v).sum::<f64>() / diff.len().max(1) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub recon: f64,
    pub mmd: f64,
}

/// Adam-driven minibatch training of a [`Wae`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WaeTrainer {
    pub wae: Wae,
    pub encoder_opt: Optimizer,
    pub decoder_opt: Optimizer,
    pub step: u64,
    /// When set, only the decoder is updated.
    pub freeze_encoder: bool,
    #[serde(skip, default = "default_rng")]
    rng: ChaCha8Rng,
    pub seed: u64,
}

fn default_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl WaeTrainer {
    pub fn new(wae: Wae, learning_rate: f64, seed: u64) -> Self {
        Self {
            wae,
            encoder_opt: Optimizer::adam(learning_rate),
            decoder_opt: Optimizer::adam(learning_rate),
            step: 0,
            freeze_encoder: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    /// Reseeds the sampling stream from `(seed, step)` so that a resumed run
    /// continues deterministically.
    pub fn resync_rng(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }

    pub fn train_step(&mut self, batch: &TransitionBatch) -> Result<TrainRecord> {
        let noise = WaeNoise::sample(batch.len(), self.wae.dim_z, &mut self.rng);
        let eval = self.wae.objective(batch, &noise, Reduction::Mean)?;
        if !self.freeze_encoder {
            self.encoder_opt.apply(&mut self.wae.encoder, &eval.encoder)?;
        }
        self.decoder_opt.apply(&mut self.wae.decoder, &eval.decoder)?;
        self.step += 1;
        Ok(TrainRecord {
            step: self.step,
            loss: eval.loss,
            recon: eval.recon,
            mmd: eval.mmd,
        })
    }

    /// `steps` updates on minibatches drawn without replacement from `data`.
    pub fn train(&mut self, data: &TransitionBatch, steps: usize, batch_size: usize) -> Result<Vec<TrainRecord>> {
        if data.len() < 2 {
            return Err(Error::InsufficientHistory {
                needed: 2,
                available: data.len(),
            });
        }
        let b = batch_size.min(data.len()).max(2);
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx = sample_indices(&mut self.rng, data.len(), b).into_vec();
            let batch = data.select(&idx);
            log.push(self.train_step(&batch)?);
        }
        Ok(log)
    }
}

pub fn write_training_curve(records: &[TrainRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "recon", "mmd"])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.recon.to_string(),
            r.mmd.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Versioned checkpoint of the autoencoder, optimizer state and the anchor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub trainer: WaeTrainer,
    #[serde(default)]
    pub anchor: Option<crate::foml::Anchor>,
}

pub const CHECKPOINT_FORMAT: &str = "derl-checkpoint/1";

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {}", ck.format)));
        }
        ck.trainer.resync_rng();
        Ok(ck)
    }
}
