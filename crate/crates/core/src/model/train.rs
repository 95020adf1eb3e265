//! Example construction and the optimisation loop.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tape::{Graph, Mat};
use super::{Example, Model, ModelConfig, SceneInit, TokenGrid};
use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::geometry::AgentState;
use crate::sampling::{derive_seed, stream_rng, SimRng};
use crate::tokenizer::{tokenize_trajectory, tokenize_trajectory_noisy, TemplateSet};

/// Noisy tokenization of decoder inputs; targets stay deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub p_top: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub noise: Option<NoiseConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 5e-4,
            warmup_steps: 100,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 1.0,
            seed: 0,
            noise: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.steps and train.batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if let Some(n) = self.noise {
            if n.sigma < 0.0 || !(n.p_top > 0.0 && n.p_top <= 1.0) {
                return Err(Error::Config(format!(
                    "train.noise sigma {} must be >= 0 and p_top {} in (0, 1]",
                    n.sigma, n.p_top
                )));
            }
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then linear decay to zero at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            let rest = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
            self.lr * (self.steps.saturating_sub(step) as f64 / rest).clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean cross-entropy of the batch, nats.
    pub loss: f64,
    pub lr: f64,
    pub tokens_seen: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogEntry>,
}

/// Valid agents at one timestep, nearest to `center` first (ties by index),
/// at most `max`.
pub fn default_order(states: &[AgentState], center: usize, max: usize) -> Vec<usize> {
    let c = states[center];
    let mut idx: Vec<usize> = (0..states.len()).filter(|&i| states[i].valid && i != center).collect();
    idx.sort_by(|&a, &b| {
        states[a].center_distance(&c).total_cmp(&states[b].center_distance(&c)).then(a.cmp(&b))
    });
    let mut out = Vec::with_capacity(max);
    if c.valid {
        out.push(center);
    }
    out.extend(idx);
    out.truncate(max);
    out
}

/// Example covering timesteps `t0..=t0 + n_tokens` for scenario agents
/// `order` (in acting order), in the coordinate frame `frame`.
#[allow(clippy::too_many_arguments)]
pub fn build_example<R: Rng + ?Sized>(
    scenario: &Scenario,
    ts: &TemplateSet,
    cfg: &ModelConfig,
    t0: usize,
    n_tokens: usize,
    frame: &AgentState,
    order: &[usize],
    noise: Option<(&NoiseConfig, &mut R)>,
) -> Result<Example> {
    if t0 + n_tokens >= scenario.n_steps() {
        return Err(Error::Shape(format!(
            "window {t0}..={} exceeds {} steps",
            t0 + n_tokens,
            scenario.n_steps()
        )));
    }
    let pairs: Vec<_> = order
        .iter()
        .map(|&i| (scenario.agents[i].meta, scenario.agents[i].states[t0]))
        .collect();
    let init = SceneInit::in_frame(frame, &pairs, &scenario.map, cfg.max_map_objects);
    let mut inputs = Vec::with_capacity(order.len());
    let mut targets = Vec::with_capacity(order.len());
    let mut noise = noise;
    for &i in order {
        let a = &scenario.agents[i];
        let window = &a.states[t0..=t0 + n_tokens];
        match noise.as_mut() {
            Some((nc, rng)) => {
                let nt = tokenize_trajectory_noisy(window, &a.meta, ts, nc.sigma, nc.p_top, &mut **rng)?;
                inputs.push(nt.inputs);
                targets.push(nt.targets);
            }
            None => {
                let tt = tokenize_trajectory(window, &a.meta, ts);
                inputs.push(tt.tokens.clone());
                targets.push(tt.tokens);
            }
        }
    }
    Ok(Example {
        init,
        inputs: TokenGrid::from_rows(&inputs)?,
        targets: TokenGrid::from_rows(&targets)?,
    })
}

/// Random crop, random frame agent and random agent order. `None` when the
/// scenario has no usable window.
pub fn random_example<R: Rng + ?Sized>(
    scenario: &Scenario,
    ts: &TemplateSet,
    cfg: &ModelConfig,
    noise: Option<&NoiseConfig>,
    rng: &mut R,
) -> Result<Option<Example>> {
    let steps = scenario.n_steps();
    if steps < 2 || scenario.agents.is_empty() {
        return Ok(None);
    }
    let n_tokens = cfg.max_timesteps.min(steps - 1);
    let t0 = rng.random_range(0..=steps - 1 - n_tokens);
    let states = scenario.states_at(t0);
    let candidates: Vec<usize> = (0..states.len()).filter(|&i| states[i].valid).collect();
    let Some(&center) = candidates.choose(rng) else {
        return Ok(None);
    };
    let mut order = default_order(&states, center, cfg.max_agents);
    order.shuffle(rng);
    let frame = states[center];
    let ex = build_example(scenario, ts, cfg, t0, n_tokens, &frame, &order, noise.map(|n| (n, rng)))?;
    Ok(Some(ex))
}

/// Summed cross-entropy and its gradient for one example.
fn example_grads(model: &Model, ex: &Example, dropout: Option<&mut SimRng>) -> Result<(f64, HashMap<usize, Mat>)> {
    let mut g = Graph::new();
    let net = model.net();
    let mut rng = dropout;
    let mem = net.encode(&mut g, &ex.init, &mut rng)?;
    let logits = net.decode(&mut g, mem, &ex.inputs, None, &mut rng)?;
    let out = g.cross_entropy_sum(logits, ex.targets.flattened());
    let loss = g.value(out)[[0, 0]];
    Ok((loss, g.backward(out)))
}

/// Optimises `model` on crops of `data`. `on_step` sees every log entry as
/// it is produced. Single-writer: gradients of the batch are computed in
/// parallel and summed in a fixed order, so results do not depend on the
/// worker count.
pub fn train(
    mut model: Model,
    data: &[Scenario],
    ts: &TemplateSet,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = model.config().clone();
    if ts.len() != mcfg.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} templates, model expects {}",
            ts.len(),
            mcfg.vocab_size
        )));
    }
    if !data.iter().any(|s| s.n_steps() >= 2 && !s.agents.is_empty()) {
        return Err(Error::Empty("no scenario with at least two timesteps".into()));
    }
    let mut data_rng = stream_rng(cfg.seed, 0);
    let dropout_seed = derive_seed(cfg.seed, 1);
    let n_params = model.params().len();
    let mut m1: Vec<Mat> = model.params().values().iter().map(|v| Mat::zeros(v.dim())).collect();
    let mut m2 = m1.clone();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut tokens_seen = 0u64;

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            let s = &data[data_rng.random_range(0..data.len())];
            if let Some(ex) = random_example(s, ts, &mcfg, cfg.noise.as_ref(), &mut data_rng)? {
                if ex.targets.n_valid() > 0 {
                    batch.push(ex);
                }
            }
        }
        let count: usize = batch.iter().map(|e| e.targets.n_valid()).sum();
        tokens_seen += count as u64;
        let results: Vec<Result<(f64, HashMap<usize, Mat>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(b, ex)| {
                let mut rng = stream_rng(dropout_seed, (step * cfg.batch_size + b) as u64);
                example_grads(&model, ex, Some(&mut rng))
            })
            .collect();
        let mut loss_sum = 0.0;
        let mut grads: Vec<Mat> = model.params().values().iter().map(|v| Mat::zeros(v.dim())).collect();
        for r in results {
            let (l, gmap) = r?;
            loss_sum += l;
            for (idx, gr) in gmap {
                grads[idx] += &gr;
            }
        }
        let loss = loss_sum / count as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let inv = 1.0 / count as f64;
        let mut norm_sq = 0.0;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * inv);
            norm_sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        let norm = norm_sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: norm });
        }
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let lr = cfg.lr_at(step);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for idx in 0..n_params {
            let decay = if model.params().decays(idx) { cfg.weight_decay } else { 0.0 };
            let p = &mut model.params_mut().values_mut()[idx];
            let g = &grads[idx];
            let (a, b) = (&mut m1[idx], &mut m2[idx]);
            ndarray::Zip::from(p).and(g).and(a).and(b).for_each(|p, &g, m, v| {
                let g = g * clip;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + 1e-8);
                *p -= lr * (update + decay * *p);
            });
        }
        let entry = LogEntry { step, loss, lr, tokens_seen };
        on_step(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}
