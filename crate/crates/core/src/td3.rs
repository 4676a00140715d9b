//! Twin delayed deep deterministic policy gradient on embedded states.
//!
//! The actor outputs logits; actions are `softmax(logits + noise)`, so every
//! emitted action lies on the simplex. Critics score `[z; a]`. Targets use
//! the minimum of the two target critics at a smoothed target action.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{PortfolioAction, PortfolioEnv, StateScaler};
use crate::nn::{softmax, softmax_vjp, Activation, DenseNet, Gradients, Optimizer};
use crate::wae::{TransitionBatch, Wae};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Td3Config {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    /// Actor and target updates happen every `policy_delay` critic updates.
    pub policy_delay: usize,
    /// Exploration noise std in logit units.
    pub explore_sigma: f64,
    /// Target smoothing noise std; `0.2 * explore_sigma` when absent.
    pub smooth_sigma: Option<f64>,
    pub noise_clip: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    /// Uniform-random actions before the first update.
    pub warmup_steps: usize,
    pub init_std: f64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 0.999,
            actor_lr: 2e-4,
            critic_lr: 1e-3,
            tau: 0.005,
            policy_delay: 5,
            explore_sigma: 0.5,
            smooth_sigma: None,
            noise_clip: 0.5,
            batch_size: 40,
            hidden: vec![256, 256, 256],
            buffer_capacity: 100_000,
            warmup_steps: 40,
            init_std: crate::nn::INIT_STD,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.policy_delay == 0 || self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("policy delay, batch size and capacity must be >= 1".into()));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.explore_sigma < 0.0 || self.noise_clip < 0.0 || self.smooth_sigma.is_some_and(|s| s < 0.0) {
            return Err(Error::Config("noise scales must be >= 0".into()));
        }
        if !(self.init_std > 0.0) || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("init std and hidden sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn smoothing_sigma(&self) -> f64 {
        self.smooth_sigma.unwrap_or(0.2 * self.explore_sigma)
    }
}

/// Stored transition; states are raw (unembedded) observation vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    /// Total number of pushes; identifies slots across evictions.
    pushed: u64,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::new(),
            pushed: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.pushed += 1;
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Global id of the item currently at position `i`.
    pub fn id(&self, i: usize) -> u64 {
        self.pushed - self.items.len() as u64 + i as u64
    }

    /// `n` positions drawn uniformly with replacement.
    pub fn sample_indices(&mut self, n: usize) -> Vec<usize> {
        let len = self.items.len();
        (0..n).map(|_| self.rng.random_range(0..len)).collect()
    }

    /// The most recent `n` transitions in order.
    pub fn recent(&self, n: usize) -> Vec<&Transition> {
        let k = n.min(self.items.len());
        self.items.iter().skip(self.items.len() - k).collect()
    }
}

/// Maps observations to the agent's input space.
#[derive(Clone, Debug)]
pub enum Embedding {
    /// Observations are used as they are.
    Raw { dim: usize },
    /// Encoder mean of an autoencoder.
    Encoder(Box<Wae>),
}

impl Embedding {
    pub fn dim(&self) -> usize {
        match self {
            Embedding::Raw { dim } => *dim,
            Embedding::Encoder(w) => w.dim_z,
        }
    }

    pub fn embed_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Embedding::Raw { dim } => {
                if x.ncols() != *dim {
                    return Err(Error::Shape(format!("expected {dim} columns, got {}", x.ncols())));
                }
                Ok(x.to_owned())
            }
            Embedding::Encoder(w) => w.encode_mean(x),
        }
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.embed_batch(v)?.row(0).to_vec())
    }
}

/// Embeddings of buffered observations under the current encoder, keyed by
/// the buffer's global ids. Cleared whenever the encoder changes.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingCache {
    map: std::collections::HashMap<(u64, bool), Vec<f64>>,
}

impl EmbeddingCache {
    pub fn clear(&mut self) {
        self.map.clear();
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Embedded `(state, next_state)` rows for the given buffer positions.
    fn lookup(
        &mut self,
        buffer: &ReplayBuffer,
        idx: &[usize],
        embedding: &Embedding,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if let Embedding::Raw { .. } = embedding {
            let rows = |next: bool| {
                let dim = embedding.dim();
                let mut m = Array2::zeros((idx.len(), dim));
                for (r, &i) in idx.iter().enumerate() {
                    let t = buffer.get(i);
                    let v = if next { &t.next_state } else { &t.state };
                    m.row_mut(r).assign(&ndarray::ArrayView1::from(v));
                }
                m
            };
            return Ok((rows(false), rows(true)));
        }
        let mut missing: Vec<(u64, bool, usize)> = Vec::new();
        for &i in idx {
            let id = buffer.id(i);
            for next in [false, true] {
                if !self.map.contains_key(&(id, next)) && !missing.iter().any(|m| m.0 == id && m.1 == next) {
                    missing.push((id, next, i));
                }
            }
        }
        if !missing.is_empty() {
            let width = buffer.get(missing[0].2).state.len();
            let mut x = Array2::zeros((missing.len(), width));
            for (r, (_, next, i)) in missing.iter().enumerate() {
                let t = buffer.get(*i);
                let v = if *next { &t.next_state } else { &t.state };
                x.row_mut(r).assign(&ndarray::ArrayView1::from(v));
            }
            let z = embedding.embed_batch(x.view())?;
            for (r, (id, next, _)) in missing.iter().enumerate() {
                self.map.insert((*id, *next), z.row(r).to_vec());
            }
        }
        let dim = embedding.dim();
        let mut zs = Array2::zeros((idx.len(), dim));
        let mut zn = Array2::zeros((idx.len(), dim));
        for (r, &i) in idx.iter().enumerate() {
            let id = buffer.id(i);
            zs.row_mut(r).assign(&ndarray::ArrayView1::from(&self.map[&(id, false)]));
            zn.row_mut(r).assign(&ndarray::ArrayView1::from(&self.map[&(id, true)]));
        }
        // bound memory: entries for evicted items are dropped lazily
        if self.map.len() > 4 * buffer.capacity() {
            let oldest = buffer.id(0);
            self.map.retain(|k, _| k.0 >= oldest);
        }
        Ok((zs, zn))
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (i, r) in logits.rows().into_iter().enumerate() {
        let p = softmax(&r.to_vec())?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&p));
    }
    Ok(out)
}

fn critic_input(z: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
    concatenate(Axis(1), &[z, a]).map_err(|e| Error::Shape(e.to_string()))
}

/// `(1/n) sum (Q(z, a) - y)^2` and its parameter gradients.
pub fn critic_objective(
    critic: &DenseNet,
    z: ArrayView2<f64>,
    a: ArrayView2<f64>,
    y: &[f64],
) -> Result<(f64, Gradients)> {
    let n = z.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::Shape("critic batch and targets disagree".into()));
    }
    let x = critic_input(z, a)?;
    let trace = critic.forward_trace(x.view())?;
    let q = trace.output();
    let mut up = Array2::zeros((n, 1));
    let mut loss = 0.0;
    for i in 0..n {
        let d = q[[i, 0]] - y[i];
        loss += d * d;
        up[[i, 0]] = 2.0 * d / n as f64;
    }
    let bp = critic.backward_batch(&trace, up.view())?;
    Ok((loss / n as f64, bp.params))
}

/// `-(1/n) sum Q(z, softmax(pi(z)))` and its gradients with respect to the
/// actor's parameters.
pub fn actor_objective(actor: &DenseNet, critic: &DenseNet, z: ArrayView2<f64>) -> Result<(f64, Gradients)> {
    let n = z.nrows();
    if n == 0 {
        return Err(Error::Shape("empty actor batch".into()));
    }
    let dz = z.ncols();
    let trace = actor.forward_trace(z)?;
    let probs = softmax_rows(trace.output())?;
    let x = critic_input(z, probs.view())?;
    let ctrace = critic.forward_trace(x.view())?;
    let q = ctrace.output();
    let value = q.sum() / n as f64;
    let up = Array2::from_elem((n, 1), -1.0 / n as f64);
    let cbp = critic.backward_batch(&ctrace, up.view())?;
    let dq_da = cbp.input.slice(s![.., dz..]);
    let mut dlogits = Array2::zeros(probs.raw_dim());
    for i in 0..n {
        let g = softmax_vjp(&probs.row(i).to_vec(), &dq_da.row(i).to_vec());
        dlogits.row_mut(i).assign(&ndarray::ArrayView1::from(&g));
    }
    let abp = actor.backward_batch(&trace, dlogits.view())?;
    Ok((-value, abp.params))
}

/// `r + gamma * min(Q1'(z', a~), Q2'(z', a~))`.
pub fn td_targets(
    rewards: &[f64],
    q1: &[f64],
    q2: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    let y: Vec<f64> = rewards
        .iter()
        .zip(q1.iter().zip(q2))
        .map(|(r, (a, b))| r + gamma * a.min(*b))
        .collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite TD target".into()));
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub td_loss: f64,
    pub actor_loss: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Td3Agent {
    pub config: Td3Config,
    pub actor: DenseNet,
    pub actor_target: DenseNet,
    pub critic1: DenseNet,
    pub critic2: DenseNet,
    pub critic1_target: DenseNet,
    pub critic2_target: DenseNet,
    pub actor_opt: Optimizer,
    pub critic1_opt: Optimizer,
    pub critic2_opt: Optimizer,
    pub updates: u64,
    pub seed: u64,
    #[serde(skip, default = "default_rng")]
    rng: ChaCha8Rng,
}

fn default_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl Td3Agent {
    pub fn new(dim_z: usize, num_assets: usize, config: Td3Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let acts = |n: usize| {
            let mut a = vec![Activation::Relu; n - 2];
            a.push(Activation::Linear);
            a
        };
        let mut a_sizes = vec![dim_z];
        a_sizes.extend(&config.hidden);
        a_sizes.push(num_assets);
        let mut c_sizes = vec![dim_z + num_assets];
        c_sizes.extend(&config.hidden);
        c_sizes.push(1);
        let actor = DenseNet::init_with_std(&a_sizes, &acts(a_sizes.len()), seed, config.init_std)?;
        let critic1 = DenseNet::init_with_std(&c_sizes, &acts(c_sizes.len()), seed.wrapping_add(1), config.init_std)?;
        let critic2 = DenseNet::init_with_std(&c_sizes, &acts(c_sizes.len()), seed.wrapping_add(2), config.init_std)?;
        Ok(Self {
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor_opt: Optimizer::adam(config.actor_lr),
            critic1_opt: Optimizer::adam(config.critic_lr),
            critic2_opt: Optimizer::adam(config.critic_lr),
            actor,
            critic1,
            critic2,
            updates: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(3)),
            config,
        })
    }

    pub fn num_assets(&self) -> usize {
        self.actor.output_dim()
    }

    /// Re-derives the sampling stream from `(seed, updates)` after a reload.
    pub fn resync_rng(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.updates.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }

    /// `softmax(actor(z) + N(0, sigma^2 I))`.
    pub fn select_action(&mut self, z: &[f64], sigma: f64) -> Result<PortfolioAction> {
        select_action(&self.actor, z, sigma, &mut self.rng)
    }

    pub fn act_deterministic(&self, z: &[f64]) -> Result<PortfolioAction> {
        let logits = self.actor.forward(z)?;
        crate::market::project_long_only(&logits)
    }

    fn target_actions(&mut self, zn: &Array2<f64>) -> Result<Array2<f64>> {
        let mut logits = self.actor_target.forward_batch(zn.view())?;
        let sigma = self.config.smoothing_sigma();
        let c = self.config.noise_clip;
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            logits.mapv_inplace(|v| v + normal.sample(&mut self.rng).clamp(-c, c));
        }
        softmax_rows(&logits)
    }

    /// One TD step for both critics on embedded `(z, a, r, z')`.
    pub fn critic_update(
        &mut self,
        z: ArrayView2<f64>,
        a: ArrayView2<f64>,
        r: &[f64],
        zn: &Array2<f64>,
    ) -> Result<f64> {
        let a_next = self.target_actions(zn)?;
        let xn = critic_input(zn.view(), a_next.view())?;
        let q1 = self.critic1_target.forward_batch(xn.view())?;
        let q2 = self.critic2_target.forward_batch(xn.view())?;
        let y = td_targets(r, &q1.column(0).to_vec(), &q2.column(0).to_vec(), self.config.gamma)?;
        let (l1, g1) = critic_objective(&self.critic1, z, a, &y)?;
        let (l2, g2) = critic_objective(&self.critic2, z, a, &y)?;
        self.critic1_opt.apply(&mut self.critic1, &g1)?;
        self.critic2_opt.apply(&mut self.critic2, &g2)?;
        Ok(0.5 * (l1 + l2))
    }

    /// Policy step on `-mean Q1`.
    pub fn actor_update(&mut self, z: ArrayView2<f64>) -> Result<f64> {
        let (loss, g) = actor_objective(&self.actor, &self.critic1, z)?;
        self.actor_opt.apply(&mut self.actor, &g)?;
        Ok(loss)
    }

    pub fn soft_update_targets(&mut self) -> Result<()> {
        let tau = self.config.tau;
        self.actor_target.soft_update_from(&self.actor, tau)?;
        self.critic1_target.soft_update_from(&self.critic1, tau)?;
        self.critic2_target.soft_update_from(&self.critic2, tau)?;
        Ok(())
    }

    /// Critic step; every `policy_delay`-th call also updates the actor and
    /// soft-updates all targets.
    pub fn update(
        &mut self,
        z: ArrayView2<f64>,
        a: ArrayView2<f64>,
        r: &[f64],
        zn: &Array2<f64>,
    ) -> Result<UpdateStats> {
        let td_loss = self.critic_update(z, a, r, zn)?;
        self.updates += 1;
        let mut actor_loss = None;
        if self.updates % self.config.policy_delay as u64 == 0 {
            actor_loss = Some(self.actor_update(z)?);
            self.soft_update_targets()?;
        }
        Ok(UpdateStats { td_loss, actor_loss })
    }
}

pub fn select_action(actor: &DenseNet, z: &[f64], sigma: f64, rng: &mut impl Rng) -> Result<PortfolioAction> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding".into()));
    }
    let mut logits = actor.forward(z)?;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in logits.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    crate::market::project_long_only(&logits)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub reward: f64,
    pub td_loss: f64,
    pub actor_loss: f64,
    pub buffer_size: usize,
}

pub fn write_training_log(rows: &[TrainLogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "reward", "td_loss", "actor_loss", "buffer_size"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.reward.to_string(),
            r.td_loss.to_string(),
            r.actor_loss.to_string(),
            r.buffer_size.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Called every `interval` steps with the latest `interval` transitions; may
/// replace the embedding. Returns whether it did.
pub trait EncoderRefresh {
    fn interval(&self) -> usize;
    fn refresh(&mut self, embedding: &mut Embedding, recent: &TransitionBatch) -> Result<bool>;
}

/// Everything the loop mutates, kept together so that training can resume
/// across windows.
pub struct Learner {
    pub agent: Td3Agent,
    pub buffer: ReplayBuffer,
    pub embedding: Embedding,
    pub cache: EmbeddingCache,
    pub steps: u64,
}

impl Learner {
    pub fn new(agent: Td3Agent, embedding: Embedding, seed: u64) -> Self {
        let cap = agent.config.buffer_capacity;
        Self {
            agent,
            buffer: ReplayBuffer::new(cap, seed),
            embedding,
            cache: EmbeddingCache::default(),
            steps: 0,
        }
    }

    pub fn policy_action(&self, obs: &[f64]) -> Result<PortfolioAction> {
        let z = self.embedding.embed(obs)?;
        self.agent.act_deterministic(&z)
    }
}

fn recent_batch(buffer: &ReplayBuffer, n: usize) -> Result<TransitionBatch> {
    let items = buffer.recent(n);
    let (ds, da) = (items[0].state.len(), items[0].action.len());
    let mut s = Array2::zeros((items.len(), ds));
    let mut a = Array2::zeros((items.len(), da));
    let mut s2 = Array2::zeros((items.len(), ds));
    for (i, t) in items.iter().enumerate() {
        s.row_mut(i).assign(&ndarray::ArrayView1::from(&t.state));
        a.row_mut(i).assign(&ndarray::ArrayView1::from(&t.action));
        s2.row_mut(i).assign(&ndarray::ArrayView1::from(&t.next_state));
    }
    TransitionBatch::new(s, a, s2)
}

/// Runs `steps` environment steps, restarting episodes at `episode_start`.
/// Each step acts with exploration noise, stores the transition and, once
/// the buffer holds a batch (and warm-up has passed), performs one update.
pub fn train_loop(
    env: &mut PortfolioEnv<'_>,
    episode_start: usize,
    scaler: &StateScaler,
    learner: &mut Learner,
    steps: usize,
    mut refresh: Option<&mut dyn EncoderRefresh>,
) -> Result<Vec<TrainLogRow>> {
    let mut log = Vec::with_capacity(steps);
    let cfg = learner.agent.config.clone();
    let d = learner.agent.num_assets();
    for _ in 0..steps {
        let obs = scaler.observe(env.state());
        let action = if (learner.steps as usize) < cfg.warmup_steps {
            let logits: Vec<f64> = (0..d)
                .map(|_| learner.agent.rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            crate::market::project_long_only(&logits)?
        } else {
            let z = learner.embedding.embed(&obs)?;
            learner.agent.select_action(&z, cfg.explore_sigma)?
        };
        let outcome = env.step(&action)?;
        let next_obs = scaler.observe(&outcome.next_state);
        learner.buffer.push(Transition {
            state: obs,
            action: outcome.next_state.holdings.clone(),
            reward: outcome.reward,
            next_state: next_obs,
        });
        learner.steps += 1;

        let mut stats = UpdateStats::default();
        if learner.buffer.len() >= cfg.batch_size && learner.steps as usize > cfg.warmup_steps {
            let idx = learner.buffer.sample_indices(cfg.batch_size);
            let (zs, zn) = learner.cache.lookup(&learner.buffer, &idx, &learner.embedding)?;
            let mut a = Array2::zeros((idx.len(), d));
            let mut r = Vec::with_capacity(idx.len());
            for (row, &i) in idx.iter().enumerate() {
                let t = learner.buffer.get(i);
                a.row_mut(row).assign(&ndarray::ArrayView1::from(&t.action));
                r.push(t.reward);
            }
            stats = learner.agent.update(zs.view(), a.view(), &r, &zn)?;
        }
        if let Some(h) = refresh.as_deref_mut() {
            let k = h.interval();
            if k > 0 && learner.steps % k as u64 == 0 && learner.buffer.len() >= k {
                let recent = recent_batch(&learner.buffer, k)?;
                if h.refresh(&mut learner.embedding, &recent)? {
                    learner.cache.clear();
                }
            }
        }
        log.push(TrainLogRow {
            step: learner.steps,
            reward: outcome.reward,
            td_loss: stats.td_loss,
            actor_loss: stats.actor_loss.unwrap_or(f64::NAN),
            buffer_size: learner.buffer.len(),
        });
        if outcome.done {
            env.reset(episode_start)?;
        }
    }
    Ok(log)
}
