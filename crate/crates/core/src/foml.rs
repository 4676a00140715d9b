//! Fully online meta-learning of the autoencoder.
//!
//! Live parameters `(phi, theta)` are fine-tuned on each new stream of `|U|`
//! transitions while being pulled toward an anchor `zeta`:
//!
//! ```text
//! phi   <- phi - a1 grad L(phi, theta; D_tr) + 2 a1 b1 (zeta_phi - phi)
//! zeta  <- zeta - a2 grad_zeta L(phi^j, theta^j; D_val) - 2 a2 b2 sum_{k=0..J} (zeta - p^{j-k})
//! ```
//!
//! `theta` follows the same rule with the same rates. The live parameters
//! depend on `zeta` only through the pull term; after `E` online steps that
//! dependence is `d p^j / d zeta = kappa I` with `kappa = 1 - (1 - 2 a1 b1)^E`
//! (holding the data gradient's Jacobian fixed), so `grad_zeta L` is taken as
//! `kappa * grad_p L(p^j; D_val)`.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DenseNet, Gradients};
use crate::wae::{Reduction, TransitionBatch, Wae, WaeNoise};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FomlConfig {
    pub alpha1: f64,
    pub beta1: f64,
    pub alpha2: f64,
    pub beta2: f64,
    /// Stream length `|U|`.
    pub stream_len: usize,
    /// Number of past updates `J` in the anchor pull (history keeps `J + 1`).
    pub history: usize,
    pub epochs: usize,
    pub train_fraction: f64,
    /// Transitions drawn from the memory buffer into each validation set.
    pub buffer_sample: usize,
    pub buffer_capacity: usize,
}

impl Default for FomlConfig {
    fn default() -> Self {
        Self {
            alpha1: 1e-4,
            beta1: 1e-3,
            alpha2: 5e-4,
            beta2: 5e-3,
            stream_len: 42,
            history: 5,
            epochs: 5,
            train_fraction: 0.8,
            buffer_sample: 8,
            buffer_capacity: 100_000,
        }
    }
}

impl FomlConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.alpha1, self.beta1, self.alpha2, self.beta2];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config("meta-learning rates must be >= 0".into()));
        }
        if self.stream_len < 2 || self.epochs == 0 {
            return Err(Error::Config("stream length >= 2 and epochs >= 1 required".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train fraction must lie in (0, 1)".into()));
        }
        let tr = self.train_len();
        if tr < 2 || self.stream_len - tr < 1 {
            return Err(Error::Config("stream too short for the train/validation split".into()));
        }
        Ok(())
    }

    pub fn train_len(&self) -> usize {
        ((self.stream_len as f64) * self.train_fraction).round() as usize
    }

    /// `1 - (1 - 2 a1 b1)^E`.
    pub fn coupling(&self) -> f64 {
        1.0 - (1.0 - 2.0 * self.alpha1 * self.beta1).powi(self.epochs as i32)
    }
}

/// Encoder and decoder parameters held together, e.g. the anchor `zeta` or
/// a history snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBundle {
    pub encoder: DenseNet,
    pub decoder: DenseNet,
}

pub type Anchor = ParamBundle;

impl ParamBundle {
    pub fn of(wae: &Wae) -> Self {
        Self {
            encoder: wae.encoder.clone(),
            decoder: wae.decoder.clone(),
        }
    }

    fn check(&self, wae: &Wae) -> Result<()> {
        if !self.encoder.same_shape(&wae.encoder) || !self.decoder.same_shape(&wae.decoder) {
            return Err(Error::Shape("parameter bundle is not congruent with the autoencoder".into()));
        }
        Ok(())
    }

    pub fn distance_sq(&self, other: &ParamBundle) -> Result<f64> {
        Ok(self.encoder.distance_sq(&other.encoder)? + self.decoder.distance_sq(&other.decoder)?)
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.encoder.flat_params();
        v.extend(self.decoder.flat_params());
        v
    }
}

/// `|(phi, theta) - zeta|^2`.
pub fn regularizer(wae: &Wae, anchor: &Anchor) -> Result<f64> {
    anchor.check(wae)?;
    Ok(wae.encoder.distance_sq(&anchor.encoder)? + wae.decoder.distance_sq(&anchor.decoder)?)
}

/// `2 (p - zeta)` for encoder and decoder.
pub fn regularizer_grad(wae: &Wae, anchor: &Anchor) -> Result<(Gradients, Gradients)> {
    anchor.check(wae)?;
    let diff = |net: &DenseNet, z: &DenseNet| {
        let mut g = net.zero_gradients();
        for ((g, p), a) in g.tensors_mut().zip(net.tensors()).zip(z.tensors()) {
            for i in 0..g.len() {
                g[i] = 2.0 * (p[i] - a[i]);
            }
        }
        g
    };
    Ok((diff(&wae.encoder, &anchor.encoder), diff(&wae.decoder, &anchor.decoder)))
}

fn check_finite(g: &Gradients) -> Result<()> {
    if let Some(layer) = g.first_non_finite_layer() {
        return Err(Error::NonFinite {
            layer,
            what: "meta-learning gradient".into(),
        });
    }
    Ok(())
}

fn pull(net: &mut DenseNet, grad: &Gradients, anchor: &DenseNet, alpha: f64, beta: f64) {
    let k = 2.0 * alpha * beta;
    for ((p, g), z) in net.tensors_mut().zip(grad.tensors()).zip(anchor.tensors()) {
        for i in 0..p.len() {
            p[i] = p[i] - alpha * g[i] + k * (z[i] - p[i]);
        }
    }
}

/// One online step given the data-loss gradients `(grad_phi, grad_theta)`.
pub fn online_update(
    wae: &mut Wae,
    anchor: &Anchor,
    grads: (&Gradients, &Gradients),
    alpha1: f64,
    beta1: f64,
) -> Result<()> {
    anchor.check(wae)?;
    check_finite(grads.0)?;
    check_finite(grads.1)?;
    pull(&mut wae.encoder, grads.0, &anchor.encoder, alpha1, beta1);
    pull(&mut wae.decoder, grads.1, &anchor.decoder, alpha1, beta1);
    Ok(())
}

/// Anchor step. `grads` is `grad_zeta L` (already multiplied by the
/// coupling); `None` means a zero loss gradient.
pub fn anchor_update(
    anchor: &mut Anchor,
    history: &[ParamBundle],
    grads: Option<(&Gradients, &Gradients)>,
    alpha2: f64,
    beta2: f64,
) -> Result<()> {
    if history.is_empty() {
        return Err(Error::State("anchor update needs at least one past parameter set".into()));
    }
    for h in history {
        if !h.encoder.same_shape(&anchor.encoder) || !h.decoder.same_shape(&anchor.decoder) {
            return Err(Error::Shape("history entry is not congruent with the anchor".into()));
        }
    }
    if let Some((ge, gd)) = grads {
        check_finite(ge)?;
        check_finite(gd)?;
    }
    let k = 2.0 * alpha2 * beta2;
    let step = |z: &mut DenseNet, g: Option<&Gradients>, parts: Vec<&DenseNet>| {
        let old = z.clone();
        let gt: Vec<&[f64]> = g.map(|g| g.tensors().collect()).unwrap_or_default();
        let hist: Vec<Vec<&[f64]>> = parts.iter().map(|p| p.tensors().collect()).collect();
        for (ti, (zt, ot)) in z.tensors_mut().zip(old.tensors()).enumerate() {
            for i in 0..zt.len() {
                let pull: f64 = hist.iter().map(|h| ot[i] - h[ti][i]).sum();
                let gi = if gt.is_empty() { 0.0 } else { gt[ti][i] };
                zt[i] = ot[i] - alpha2 * gi - k * pull;
            }
        }
    };
    step(
        &mut anchor.encoder,
        grads.map(|g| g.0),
        history.iter().map(|h| &h.encoder).collect(),
    );
    step(
        &mut anchor.decoder,
        grads.map(|g| g.1),
        history.iter().map(|h| &h.decoder).collect(),
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FomlLogRow {
    pub window: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub param_delta_norm: f64,
    pub anchor_delta_norm: f64,
}

/// Stream buffer, history and anchor of the online learner.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Foml {
    pub config: FomlConfig,
    pub anchor: Anchor,
    pub history: VecDeque<ParamBundle>,
    pub seed: u64,
    pub windows: usize,
    pub log: Vec<FomlLogRow>,
    #[serde(skip)]
    memory: Option<TransitionBatch>,
}

impl Foml {
    /// Anchored at the current autoencoder parameters.
    pub fn new(config: FomlConfig, wae: &Wae, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            anchor: ParamBundle::of(wae),
            history: VecDeque::new(),
            seed,
            windows: 0,
            log: Vec::new(),
            memory: None,
        })
    }

    pub fn memory_len(&self) -> usize {
        self.memory.as_ref().map_or(0, |m| m.len())
    }

    /// Reparameterization and prior noise for epoch `epoch` of window
    /// `window`; `epoch == epochs` is the validation evaluation.
    pub fn noise_for(&self, window: usize, epoch: usize, n: usize, dim_z: usize) -> WaeNoise {
        let s = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((window as u64) << 20)
            .wrapping_add(epoch as u64);
        WaeNoise::sample(n, dim_z, &mut ChaCha8Rng::seed_from_u64(s))
    }

    fn remember(&mut self, stream: &TransitionBatch) -> Result<()> {
        let merged = match self.memory.take() {
            None => stream.clone(),
            Some(m) => m.concat(stream)?,
        };
        let cap = self.config.buffer_capacity.max(stream.len());
        self.memory = Some(if merged.len() > cap {
            merged.slice(merged.len() - cap, merged.len())
        } else {
            merged
        });
        Ok(())
    }

    /// Processes one complete stream: online steps on its training part,
    /// anchor step on its validation part plus a buffer sample, history
    /// append. Returns the log row for the window.
    pub fn run_window_update(&mut self, wae: &mut Wae, stream: &TransitionBatch) -> Result<FomlLogRow> {
        let cfg = self.config.clone();
        if stream.len() != cfg.stream_len {
            return Err(Error::State(format!(
                "stream holds {} transitions, expected {}",
                stream.len(),
                cfg.stream_len
            )));
        }
        self.anchor.check(wae)?;
        let j = self.windows;
        let n_tr = cfg.train_len();
        let d_tr = stream.slice(0, n_tr);
        let mut d_val = stream.slice(n_tr, stream.len());
        if let Some(mem) = &self.memory {
            let k = cfg.buffer_sample.min(mem.len());
            if k > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (j as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
                let idx = sample_indices(&mut rng, mem.len(), k).into_vec();
                d_val = d_val.concat(&mem.select(&idx))?;
            }
        }
        let dz = wae.dim_z;
        let eval_noise = self.noise_for(j, cfg.epochs, stream.len(), dz);
        let loss_before = wae.objective(stream, &eval_noise, Reduction::Mean)?.loss;
        let before = ParamBundle::of(wae);

        for e in 0..cfg.epochs {
            let noise = self.noise_for(j, e, d_tr.len(), dz);
            let eval = wae.objective(&d_tr, &noise, Reduction::Mean)?;
            online_update(wae, &self.anchor, (&eval.encoder, &eval.decoder), cfg.alpha1, cfg.beta1)?;
        }

        self.history.push_back(ParamBundle::of(wae));
        while self.history.len() > cfg.history + 1 {
            self.history.pop_front();
        }

        let kappa = cfg.coupling();
        let old_anchor = self.anchor.clone();
        let history: Vec<ParamBundle> = self.history.iter().cloned().collect();
        if kappa != 0.0 && cfg.alpha2 != 0.0 {
            let noise = self.noise_for(j, cfg.epochs + 1, d_val.len(), dz);
            let mut val = wae.objective(&d_val, &noise, Reduction::Mean)?;
            val.encoder.scale(kappa);
            val.decoder.scale(kappa);
            anchor_update(&mut self.anchor, &history, Some((&val.encoder, &val.decoder)), cfg.alpha2, cfg.beta2)?;
        } else {
            anchor_update(&mut self.anchor, &history, None, cfg.alpha2, cfg.beta2)?;
        }

        self.remember(stream)?;
        let loss_after = wae.objective(stream, &eval_noise, Reduction::Mean)?.loss;
        let row = FomlLogRow {
            window: j,
            loss_before,
            loss_after,
            param_delta_norm: ParamBundle::of(wae).distance_sq(&before)?.sqrt(),
            anchor_delta_norm: self.anchor.distance_sq(&old_anchor)?.sqrt(),
        };
        self.windows += 1;
        self.log.push(row);
        Ok(row)
    }
}

pub fn write_foml_log(rows: &[FomlLogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["window", "loss_before", "loss_after", "param_delta_norm", "anchor_delta_norm"])?;
    for r in rows {
        w.write_record([
            r.window.to_string(),
            r.loss_before.to_string(),
            r.loss_after.to_string(),
            r.param_delta_norm.to_string(),
            r.anchor_delta_norm.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
