//! Scene encoder plus token decoder over flattened multi-agent sequences.
//!
//! A scene is encoded once from the agents' initial boxes and the map; the
//! decoder then predicts one token per agent per timestep, flattened
//! timestep-major (`t * N + i`). Which earlier tokens each prediction sees is
//! set by the [`Regime`].

mod check;
mod checkpoint;
mod eval;
mod infer;
mod mask;
mod net;
mod params;
pub mod tape;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use check::{gradient_check, loss_and_grads, GradCheck};
pub use checkpoint::CHECKPOINT_VERSION;
pub use eval::{
    eval_examples, nll_eval, teacher_forced_accuracy, ClassNll, NllQuery, NllTable,
};
pub use infer::DecodeCache;
pub use mask::{build_mask, visible, AttentionMask};
pub use params::Params;
pub use train::{
    build_example, default_order, random_example, train, LogEntry, NoiseConfig, TrainConfig, TrainOutcome,
};

use crate::data::MapObject;
use crate::error::{Error, Result};
use crate::geometry::{to_local_raw, AgentMeta, AgentState};
use crate::sampling::stream_rng;
use net::Net;
use params::Layout;
use tape::{Graph, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Each prediction sees every earlier flattened position.
    FullIntra,
    /// Same-timestep actions of other agents are hidden.
    NoIntra,
    /// Only the agent's own earlier actions are visible.
    Marginal,
    /// As [`Regime::Marginal`], without any map input.
    MarginalNoMap,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::FullIntra, Regime::NoIntra, Regime::Marginal, Regime::MarginalNoMap];

    pub fn name(self) -> &'static str {
        match self {
            Regime::FullIntra => "full_intra",
            Regime::NoIntra => "no_intra",
            Regime::Marginal => "marginal",
            Regime::MarginalNoMap => "marginal_no_map",
        }
    }

    pub fn uses_map(self) -> bool {
        self != Regime::MarginalNoMap
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown masking regime {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_map_layers: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub max_agents: usize,
    pub max_timesteps: usize,
    pub max_map_objects: usize,
    pub n_latent_queries: usize,
    pub masking_regime: Regime,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 384,
            hidden_dim: 64,
            n_map_layers: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            max_agents: 8,
            max_timesteps: 32,
            max_map_objects: 32,
            n_latent_queries: 8,
            masking_regime: Regime::FullIntra,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Smallest useful network, for tests and quick experiments.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden_dim: 32,
            n_map_layers: 1,
            n_enc_layers: 1,
            n_dec_layers: 2,
            n_heads: 2,
            max_agents: 4,
            max_timesteps: 16,
            max_map_objects: 8,
            n_latent_queries: 4,
            masking_regime: Regime::FullIntra,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("n_map_layers", self.n_map_layers),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("max_agents", self.max_agents),
            ("max_timesteps", self.max_timesteps),
            ("max_map_objects", self.max_map_objects),
            ("n_latent_queries", self.n_latent_queries),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitAgent {
    pub meta: AgentMeta,
    pub state: AgentState,
}

/// Model input context. `agents[i]` has order index `i`, which is also the
/// order agents act in within a timestep. Coordinates are in the scene frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneInit {
    pub agents: Vec<InitAgent>,
    pub map: Vec<MapObject>,
}

impl SceneInit {
    /// Expresses global agents and map in `frame`, keeping the `max_map`
    /// polylines closest to the frame origin.
    pub fn in_frame(frame: &AgentState, agents: &[(AgentMeta, AgentState)], map: &[MapObject], max_map: usize) -> Self {
        let agents = agents
            .iter()
            .map(|(meta, s)| InitAgent {
                meta: *meta,
                state: if s.valid { to_local_raw(frame, s) } else { AgentState::invalid() },
            })
            .collect();
        let mut local: Vec<(f64, MapObject)> = map
            .iter()
            .filter(|m| !m.points.is_empty())
            .map(|m| {
                let points: Vec<[f64; 2]> = m
                    .points
                    .iter()
                    .map(|p| {
                        let l = to_local_raw(frame, &AgentState { x: p[0], y: p[1], h: 0.0, valid: true });
                        [l.x, l.y]
                    })
                    .collect();
                let d = points.iter().map(|p| p[0].hypot(p[1])).fold(f64::INFINITY, f64::min);
                (d, MapObject { kind: m.kind, points })
            })
            .collect();
        local.sort_by(|a, b| a.0.total_cmp(&b.0));
        local.truncate(max_map);
        SceneInit {
            agents,
            map: local.into_iter().map(|(_, m)| m).collect(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }
}

/// Token ids per agent per timestep, with a validity mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    /// `ids[i][t]`; meaningful only where `valid[i][t]`.
    pub ids: Vec<Vec<usize>>,
    pub valid: Vec<Vec<bool>>,
}

impl TokenGrid {
    /// All-invalid grid.
    pub fn new(n_agents: usize, n_steps: usize) -> Self {
        TokenGrid {
            ids: vec![vec![0; n_steps]; n_agents],
            valid: vec![vec![false; n_steps]; n_agents],
        }
    }

    pub fn from_rows(rows: &[Vec<Option<usize>>]) -> Result<Self> {
        let t = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::Shape("token rows have unequal lengths".into()));
        }
        let mut g = TokenGrid::new(rows.len(), t);
        for (i, row) in rows.iter().enumerate() {
            for (k, id) in row.iter().enumerate() {
                g.set(i, k, *id);
            }
        }
        Ok(g)
    }

    pub fn n_agents(&self) -> usize {
        self.ids.len()
    }

    pub fn n_steps(&self) -> usize {
        self.ids.first().map_or(0, |r| r.len())
    }

    pub fn get(&self, agent: usize, t: usize) -> Option<usize> {
        self.valid[agent][t].then_some(self.ids[agent][t])
    }

    pub fn set(&mut self, agent: usize, t: usize, id: Option<usize>) {
        self.ids[agent][t] = id.unwrap_or(0);
        self.valid[agent][t] = id.is_some();
    }

    pub fn row(&self, agent: usize) -> Vec<Option<usize>> {
        (0..self.n_steps()).map(|t| self.get(agent, t)).collect()
    }

    /// Timestep-major flattening: `(t=0, agents 0..N), (t=1, …), …`.
    pub fn flattened(&self) -> Vec<Option<usize>> {
        let n = self.n_agents();
        (0..n * self.n_steps()).map(|p| self.get(p % n, p / n)).collect()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().flatten().filter(|v| **v).count()
    }

    /// Timesteps `range` of every agent.
    pub fn window(&self, range: std::ops::Range<usize>) -> TokenGrid {
        TokenGrid {
            ids: self.ids.iter().map(|r| r[range.clone()].to_vec()).collect(),
            valid: self.valid.iter().map(|r| r[range.clone()].to_vec()).collect(),
        }
    }
}

/// One training or evaluation sequence. `inputs` feed the decoder; `targets`
/// are what each position must predict. They differ only under noisy
/// tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub init: SceneInit,
    pub inputs: TokenGrid,
    pub targets: TokenGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: Params,
    layout: Layout,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, 0);
        let (params, layout) = params::init_params(&cfg, &mut rng);
        Ok(Model { cfg, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn regime(&self) -> Regime {
        self.cfg.masking_regime
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Parameter index of the (|V|+1)×C token embedding table.
    pub fn token_embedding_param(&self) -> usize {
        self.layout.tok_emb
    }

    /// Parameter index the output projection reads: rows `0..|V|` of the
    /// embedding table.
    pub fn output_projection_param(&self) -> usize {
        self.layout.tok_emb
    }

    pub(crate) fn net(&self) -> Net<'_> {
        Net {
            params: &self.params,
            layout: &self.layout,
            cfg: &self.cfg,
        }
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn encode(&self, init: &SceneInit) -> Result<Mat> {
        let mut g = Graph::new();
        let v = self.net().encode(&mut g, init, &mut None)?;
        Ok(g.value(v).clone())
    }

    /// (N·T)×|V| logits under the model's regime.
    pub fn forward(&self, init: &SceneInit, tokens: &TokenGrid) -> Result<Mat> {
        self.forward_capped(init, tokens, None)
    }

    /// As [`Model::forward`], with same-timestep context further limited to
    /// agents with order index below `intra_cap`.
    pub fn forward_capped(&self, init: &SceneInit, tokens: &TokenGrid, intra_cap: Option<usize>) -> Result<Mat> {
        if tokens.n_agents() != init.n_agents() {
            return Err(Error::Shape(format!(
                "token grid has {} agents, scene has {}",
                tokens.n_agents(),
                init.n_agents()
            )));
        }
        let mut g = Graph::new();
        let net = self.net();
        let mem = net.encode(&mut g, init, &mut None)?;
        let logits = net.decode(&mut g, mem, tokens, intra_cap, &mut None)?;
        Ok(g.value(logits).clone())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint::save(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        checkpoint::load(path.as_ref())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::from_bytes(bytes)
    }
}

/// Mean cross-entropy in nats over valid targets.
pub fn loss(logits: &Mat, targets: &TokenGrid) -> Result<f64> {
    let flat = targets.flattened();
    if logits.nrows() != flat.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} target positions",
            logits.nrows(),
            flat.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (r, t) in flat.iter().enumerate() {
        if let Some(t) = t {
            if *t >= logits.ncols() {
                return Err(Error::TokenOutOfRange { id: *t, size: logits.ncols() });
            }
            let lp = crate::sampling::log_softmax(logits.row(r).as_slice().expect("row-major logits"));
            sum -= lp[*t];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("no valid target positions".into()));
    }
    Ok(sum / count as f64)
}
