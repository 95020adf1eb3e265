//! Closed-loop multi-agent sampling.
//!
//! Every timestep, agents act one after another: replayed and externally
//! driven agents first, then model agents, each conditioned on all earlier
//! timesteps and on the actions already chosen this timestep. Large scenes
//! are split into windows of at most `max_agents` agents.

mod window;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use window::{nearest_subset, select_windows, Window};

use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::geometry::{to_global_raw, to_local_raw, AgentState};
use crate::model::{DecodeCache, Model, SceneInit, TokenGrid};
use crate::sampling::{argmax, derive_seed, log_softmax, name_stream, sample_categorical, stream_rng, tempered_nucleus, SimRng};
use crate::tokenizer::{tokenize_trajectory, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterPolicy {
    /// A window is the `max_agents` agents nearest to its center agent.
    #[default]
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub max_agents: usize,
    /// Rollout steps (0-based, relative to the first sampled step) at which
    /// windows are recomputed and decoder caches rebuilt.
    pub recompute_timesteps: Vec<usize>,
    pub center_policy: CenterPolicy,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            max_agents: 8,
            recompute_timesteps: Vec::new(),
            center_policy: CenterPolicy::Nearest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub temperature: f64,
    pub p_top: f64,
    /// Sampled timesteps after the history.
    pub horizon: usize,
    pub n_rollouts: usize,
    pub seed: u64,
    pub window: WindowConfig,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            temperature: 1.0,
            p_top: 1.0,
            horizon: 30,
            n_rollouts: 8,
            seed: 0,
            window: WindowConfig::default(),
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("rollout.temperature {} must be > 0", self.temperature)));
        }
        if !(self.p_top > 0.0 && self.p_top <= 1.0) {
            return Err(Error::Config(format!("rollout.p_top {} must lie in (0, 1]", self.p_top)));
        }
        if self.window.max_agents == 0 {
            return Err(Error::Config("rollout.window.max_agents must be at least 1".into()));
        }
        let r = &self.window.recompute_timesteps;
        if r.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("rollout.window.recompute_timesteps must be strictly increasing".into()));
        }
        if r.last().is_some_and(|&l| l >= self.horizon.max(1)) {
            return Err(Error::Config(format!(
                "rollout.window.recompute_timesteps must lie within the horizon {}",
                self.horizon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    Model,
    /// Follows the logged states, chain-tokenized online.
    Replay,
    /// Driven by an [`ExternalPolicy`].
    External,
}

/// Black-box driver for externally controlled agents.
pub trait ExternalPolicy: Sync {
    /// Raw state of `agent` at timestep `t + 1`. `states[i][k]` holds the
    /// rendered state of agent `i` for every `k <= t`.
    fn next_state(&self, agent: usize, t: usize, states: &[Vec<AgentState>]) -> Result<AgentState>;
}

#[derive(Clone, Copy)]
pub struct ControlAssignment<'p> {
    pub controllers: &'p [Controller],
    pub external: Option<&'p dyn ExternalPolicy>,
}

impl<'p> ControlAssignment<'p> {
    pub fn new(controllers: &'p [Controller]) -> Self {
        ControlAssignment { controllers, external: None }
    }

    pub fn with_policy(controllers: &'p [Controller], policy: &'p dyn ExternalPolicy) -> Self {
        ControlAssignment {
            controllers,
            external: Some(policy),
        }
    }
}

/// Tempered nucleus draw. A nucleus holding only the argmax is
/// deterministic.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, p_top: f64, rng: &mut R) -> usize {
    let probs = tempered_nucleus(logits, temperature, p_top);
    let support = probs.iter().filter(|&&p| p > 0.0).count();
    if support == 1 {
        return argmax(&probs);
    }
    sample_categorical(&probs, rng)
}

/// What one acting slot contributes this timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Already decided: replayed, external or acted in an earlier window.
    Fixed(usize),
    Sample,
}

/// One timestep for the agents of `cache`, in slot order. Returns each
/// slot's token and, for sampled slots, its log-probability under the
/// untempered model distribution.
pub fn step_scene<R: Rng + ?Sized>(
    cache: &mut DecodeCache,
    slots: &[Slot],
    temperature: f64,
    p_top: f64,
    rng: &mut R,
) -> Result<Vec<(usize, Option<f64>)>> {
    if slots.len() != cache.n_agents() {
        return Err(Error::Shape(format!("{} slots for {} agents", slots.len(), cache.n_agents())));
    }
    if !cache.position().is_multiple_of(cache.n_agents()) {
        return Err(Error::Shape("decoder is mid-timestep".into()));
    }
    let mut out = Vec::with_capacity(slots.len());
    for slot in slots {
        match *slot {
            Slot::Fixed(tok) => {
                cache.push(Some(tok))?;
                out.push((tok, None));
            }
            Slot::Sample => {
                let logits = cache.logits()?;
                let tok = sample_token(&logits, temperature, p_top, rng);
                let lp = log_softmax(&logits)[tok];
                cache.push(Some(tok))?;
                out.push((tok, Some(lp)));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    /// Token index at which these windows take over.
    pub step: usize,
    /// Earliest token index inside the rebuilt decoder context.
    pub anchor: usize,
    pub windows: Vec<Window>,
}

/// One sampled future. Agent-indexed grids follow the scenario's agent order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub scenario_id: String,
    pub index: usize,
    /// Base seed; the sampling stream is derived from it, the scenario id
    /// and `index`.
    pub seed: u64,
    /// Logged timesteps used as context; sampling starts after them.
    pub history: usize,
    /// `tokens[i][k]` moves `states[i][k]` to `states[i][k + 1]`.
    pub tokens: TokenGrid,
    pub states: Vec<Vec<AgentState>>,
    /// Untempered model log-probability of each sampled token.
    pub log_probs: Vec<Vec<Option<f64>>>,
    pub controllers: Vec<Controller>,
    pub windows: Vec<WindowRecord>,
    pub config: RolloutConfig,
}

impl Rollout {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().flatten().flatten().sum()
    }

    /// Rendered states rebuilt from the first state and the token ids.
    pub fn rerender(&self, ts: &TemplateSet) -> Result<Vec<Vec<AgentState>>> {
        let mut out = Vec::with_capacity(self.states.len());
        for (i, row) in self.states.iter().enumerate() {
            let mut r = vec![row[0]];
            for k in 0..self.tokens.n_steps() {
                let prev = r[k];
                r.push(match self.tokens.get(i, k) {
                    Some(id) if prev.valid => to_global_raw(&prev, &ts.get(id)?.as_state()),
                    _ => row[k + 1],
                });
            }
            out.push(r);
        }
        Ok(out)
    }
}

fn default_sdc(scenario: &Scenario) -> usize {
    scenario.sdc_index().unwrap_or(0)
}

/// Non-model agents act before model agents that are new to the window;
/// agents covered by an earlier window keep their leading place.
fn acting_order(w: &Window, controllers: &[Controller], earlier: &[bool]) -> Window {
    let (pre, new): (Vec<usize>, Vec<usize>) = w.members.iter().partition(|&&m| earlier[m]);
    let (fixed, model): (Vec<usize>, Vec<usize>) = new.into_iter().partition(|&m| controllers[m] != Controller::Model);
    let mut members = pre;
    members.extend(fixed);
    members.extend(model);
    Window { center: w.center, members }
}

fn same_membership(a: &[Window], b: &[Window]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let mut p = x.members.clone();
            let mut q = y.members.clone();
            p.sort_unstable();
            q.sort_unstable();
            p == q
        })
}

struct Run<'a> {
    scenario: &'a Scenario,
    history: usize,
    model: &'a Model,
    ts: &'a TemplateSet,
    control: ControlAssignment<'a>,
    cfg: &'a RolloutConfig,
    windowed: bool,
}

impl Run<'_> {
    fn check(&self) -> Result<()> {
        self.cfg.validate()?;
        let n = self.scenario.n_agents();
        if self.control.controllers.len() != n {
            return Err(Error::Shape(format!(
                "{} controllers for {n} agents",
                self.control.controllers.len()
            )));
        }
        if self.ts.len() != self.model.config().vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} templates, model expects {}",
                self.ts.len(),
                self.model.config().vocab_size
            )));
        }
        if self.history == 0 || self.history > self.scenario.n_steps() {
            return Err(Error::InvalidArgument(format!(
                "history of {} steps for a scenario of {}",
                self.history,
                self.scenario.n_steps()
            )));
        }
        if let Some(i) = self.scenario.agents.iter().position(|a| a.states[..self.history].iter().any(|s| !s.valid)) {
            return Err(Error::InvalidArgument(format!("agent {i} is not valid throughout the history")));
        }
        if self.control.external.is_none() && self.control.controllers.contains(&Controller::External) {
            return Err(Error::Config("external controller without a policy".into()));
        }
        Ok(())
    }

    fn run(&self, index: usize) -> Result<Rollout> {
        let n = self.scenario.n_agents();
        let h = self.history;
        let total_tokens = h - 1 + self.cfg.horizon;
        let t_max = self.model.config().max_timesteps;
        let controllers = self.control.controllers;
        let seed = self.cfg.seed;
        let mut rng: SimRng = stream_rng(derive_seed(seed, name_stream(&self.scenario.id)), index as u64);

        let mut tokens = TokenGrid::new(n, total_tokens);
        let mut states = vec![vec![AgentState::invalid(); total_tokens + 1]; n];
        let mut log_probs = vec![vec![None; total_tokens]; n];
        for (i, a) in self.scenario.agents.iter().enumerate() {
            let tt = tokenize_trajectory(&a.states[..h], &a.meta, self.ts);
            states[i][..h].copy_from_slice(&tt.snapped);
            for (k, tok) in tt.tokens.iter().enumerate() {
                tokens.set(i, k, *tok);
            }
        }

        let mut bounds = vec![h - 1];
        if self.windowed {
            bounds.extend(self.cfg.window.recompute_timesteps.iter().filter(|&&k| k > 0).map(|&k| h - 1 + k));
        }
        bounds.push(total_tokens);
        bounds.dedup();
        let sdc = default_sdc(self.scenario);
        let mut records: Vec<WindowRecord> = Vec::new();
        let mut prev: Option<Vec<Window>> = None;

        for seg in bounds.windows(2) {
            let (js, je) = (seg[0], seg[1]);
            let now: Vec<AgentState> = (0..n).map(|i| states[i][js]).collect();
            let selected = if self.windowed {
                select_windows(&now, self.cfg.window.max_agents, sdc)
            } else {
                vec![Window {
                    center: sdc,
                    members: nearest_subset(&now, sdc, n),
                }]
            };
            let windows = match &prev {
                Some(p) if same_membership(p, &selected) => p.clone(),
                _ => {
                    let mut earlier = vec![false; n];
                    selected
                        .iter()
                        .map(|w| {
                            let ordered = acting_order(w, controllers, &earlier);
                            for &m in &w.members {
                                earlier[m] = true;
                            }
                            ordered
                        })
                        .collect()
                }
            };
            if je - js > t_max {
                return Err(Error::Config(format!(
                    "a segment of {} steps exceeds the model's {t_max} timesteps; add recompute steps",
                    je - js
                )));
            }
            let anchor = if self.windowed { je.saturating_sub(t_max) } else { 0 };
            if je - anchor > t_max {
                return Err(Error::Config(format!(
                    "{} tokens of context exceed the model's {t_max} timesteps",
                    je - anchor
                )));
            }
            let mut caches = Vec::with_capacity(windows.len());
            for w in &windows {
                let frame = states[w.center][anchor];
                let pairs: Vec<_> = w
                    .members
                    .iter()
                    .map(|&m| (self.scenario.agents[m].meta, states[m][anchor]))
                    .collect();
                let init = SceneInit::in_frame(&frame, &pairs, &self.scenario.map, self.model.config().max_map_objects);
                let mut cache = DecodeCache::new(self.model, &init)?;
                for t in anchor..js {
                    for &m in &w.members {
                        cache.push(tokens.get(m, t))?;
                    }
                }
                caches.push(cache);
            }
            records.push(WindowRecord {
                step: js,
                anchor,
                windows: windows.clone(),
            });

            for j in js..je {
                for i in 0..n {
                    let raw = match controllers[i] {
                        Controller::Model => continue,
                        Controller::Replay => {
                            let s = self.scenario.agents[i].states.get(j + 1).copied().unwrap_or(AgentState::invalid());
                            if !s.valid {
                                return Err(Error::MissingReplayState { agent: i, timestep: j + 1 });
                            }
                            s
                        }
                        Controller::External => {
                            let policy = self.control.external.expect("checked");
                            policy.next_state(i, j, &states)?
                        }
                    };
                    let meta = &self.scenario.agents[i].meta;
                    let tok = self.ts.nearest(&to_local_raw(&states[i][j], &raw), meta.length, meta.width).0;
                    tokens.set(i, j, Some(tok));
                }
                let mut acted: Vec<bool> = controllers.iter().map(|c| *c != Controller::Model).collect();
                for (w, cache) in windows.iter().zip(caches.iter_mut()) {
                    let slots: Vec<Slot> = w
                        .members
                        .iter()
                        .map(|&m| if acted[m] { Slot::Fixed(tokens.get(m, j).expect("acted")) } else { Slot::Sample })
                        .collect();
                    let out = step_scene(cache, &slots, self.cfg.temperature, self.cfg.p_top, &mut rng)?;
                    for (&m, (tok, lp)) in w.members.iter().zip(out) {
                        if let Some(lp) = lp {
                            tokens.set(m, j, Some(tok));
                            log_probs[m][j] = Some(lp);
                            acted[m] = true;
                        }
                    }
                }
                for i in 0..n {
                    let tok = tokens.get(i, j).expect("every agent acts");
                    states[i][j + 1] = to_global_raw(&states[i][j], &self.ts.get(tok)?.as_state());
                }
            }
            prev = Some(windows);
        }
        if records.is_empty() {
            // zero horizon: record the context ordering anyway
            let now: Vec<AgentState> = (0..n).map(|i| states[i][h - 1]).collect();
            records.push(WindowRecord {
                step: h - 1,
                anchor: 0,
                windows: vec![Window {
                    center: sdc,
                    members: nearest_subset(&now, sdc, n),
                }],
            });
        }
        Ok(Rollout {
            scenario_id: self.scenario.id.clone(),
            index,
            seed,
            history: h,
            tokens,
            states,
            log_probs,
            controllers: controllers.to_vec(),
            windows: records,
            config: self.cfg.clone(),
        })
    }

    fn run_all(&self) -> Result<Vec<Rollout>> {
        self.check()?;
        if self.scenario.agents.is_empty() {
            return Err(Error::Empty(format!("scenario {} has no agents", self.scenario.id)));
        }
        (0..self.cfg.n_rollouts).into_par_iter().map(|r| self.run(r)).collect()
    }
}

/// `cfg.n_rollouts` samples of `cfg.horizon` steps after the first
/// `history` logged states, all agents in one decoder context.
pub fn rollout(
    scenario: &Scenario,
    history: usize,
    model: &Model,
    ts: &TemplateSet,
    control: ControlAssignment,
    cfg: &RolloutConfig,
) -> Result<Vec<Rollout>> {
    Run {
        scenario,
        history,
        model,
        ts,
        control,
        cfg,
        windowed: false,
    }
    .run_all()
}

/// As [`rollout`], with agents split into windows of at most
/// `cfg.window.max_agents`, recomputed at `cfg.window.recompute_timesteps`.
pub fn windowed_rollout(
    scenario: &Scenario,
    history: usize,
    model: &Model,
    ts: &TemplateSet,
    control: ControlAssignment,
    cfg: &RolloutConfig,
) -> Result<Vec<Rollout>> {
    Run {
        scenario,
        history,
        model,
        ts,
        control,
        cfg,
        windowed: true,
    }
    .run_all()
}

/// Teacher-forced log-probability of the sampled tokens of a single-window
/// rollout: same frame, order and context as during sampling.
pub fn teacher_forced_log_prob(model: &Model, scenario: &Scenario, r: &Rollout) -> Result<f64> {
    let [rec] = r.windows.as_slice() else {
        return Err(Error::InvalidArgument("rollout used more than one decoder context".into()));
    };
    let [w] = rec.windows.as_slice() else {
        return Err(Error::InvalidArgument("rollout used more than one window".into()));
    };
    let frame = r.states[w.center][rec.anchor];
    let pairs: Vec<_> = w.members.iter().map(|&m| (scenario.agents[m].meta, r.states[m][rec.anchor])).collect();
    let init = SceneInit::in_frame(&frame, &pairs, &scenario.map, model.config().max_map_objects);
    let steps = r.tokens.n_steps() - rec.anchor;
    let rows: Vec<Vec<Option<usize>>> = w
        .members
        .iter()
        .map(|&m| (rec.anchor..r.tokens.n_steps()).map(|t| r.tokens.get(m, t)).collect())
        .collect();
    let grid = TokenGrid::from_rows(&rows)?;
    let logits = model.forward(&init, &grid)?;
    let n = w.members.len();
    let mut total = 0.0;
    for t in 0..steps {
        for (slot, &m) in w.members.iter().enumerate() {
            if r.log_probs[m][rec.anchor + t].is_some() {
                let tok = grid.get(slot, t).expect("sampled token");
                total += log_softmax(logits.row(t * n + slot).as_slice().expect("row-major"))[tok];
            }
        }
    }
    Ok(total)
}

pub fn write_rollouts_jsonl<W: Write>(mut w: W, rollouts: &[Rollout]) -> std::io::Result<()> {
    for r in rollouts {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_rollouts(path: impl AsRef<Path>, rollouts: &[Rollout]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_rollouts_jsonl(&mut w, rollouts).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_rollouts(path: impl AsRef<Path>) -> Result<Vec<Rollout>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let len = line.len() as u64 + 1;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                offset: offset + e.column().saturating_sub(1) as u64,
                message: e.to_string(),
            })?);
        }
        offset += len;
    }
    Ok(out)
}
