//! Named parameter storage and the index layout the network reads from.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::Mat;
use super::ModelConfig;

/// Feature width of one agent at initialisation.
pub(crate) const AGENT_FEATURES: usize = 10;
/// Feature width of one polyline point.
pub(crate) const POINT_FEATURES: usize = 4 + crate::data::MapObjectKind::COUNT;
pub(crate) const MLP_RATIO: usize = 4;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Mat>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl Params {
    fn empty() -> Self {
        Params {
            names: Vec::new(),
            values: Vec::new(),
            decay: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: String, value: Mat, decay: bool) -> usize {
        let idx = self.values.len();
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
        idx
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    /// Whether weight decay applies to parameter `idx`.
    pub fn decays(&self, idx: usize) -> bool {
        self.decay[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.values[i])
    }

    /// Total number of scalars.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Norm {
    pub gain: usize,
    pub bias: usize,
}

/// Projections of one multi-head attention; only the output has a bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Attn {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub out: Linear,
}

/// Pre-norm transformer block, optionally with cross-attention to a memory.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Block {
    pub ln_self: Norm,
    pub self_attn: Attn,
    pub cross: Option<(Norm, Attn)>,
    pub ln_mlp: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MapEncoder {
    pub point_fc1: Linear,
    pub point_fc2: Linear,
    pub blocks: Vec<Block>,
    pub latents: usize,
    pub ln_latent: Norm,
    pub ln_context: Norm,
    pub latent_attn: Attn,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    /// (|V|+1)×C; row |V| is the start token, rows 0..|V| double as the
    /// output projection.
    pub tok_emb: usize,
    pub agent_pos: usize,
    pub time_pos: usize,
    pub query: usize,
    pub agent_fc1: Linear,
    pub agent_fc2: Linear,
    pub map: Option<MapEncoder>,
    pub enc_blocks: Vec<Block>,
    pub enc_ln: Norm,
    pub dec_blocks: Vec<Block>,
    pub dec_ln: Norm,
}

struct Builder<'r, R: Rng> {
    params: Params,
    rng: &'r mut R,
    normal: Normal<f64>,
}

impl<R: Rng> Builder<'_, R> {
    fn random(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let v = Mat::from_shape_fn((rows, cols), |_| self.normal.sample(self.rng));
        self.params.push(name, v, true)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let w = self.random(format!("{name}.weight"), din, dout);
        let b = self.params.push(format!("{name}.bias"), Mat::zeros((1, dout)), false);
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gain = self.params.push(format!("{name}.gain"), Mat::ones((1, c)), false);
        let bias = self.params.push(format!("{name}.bias"), Mat::zeros((1, c)), false);
        Norm { gain, bias }
    }

    fn attn(&mut self, name: &str, c: usize) -> Attn {
        Attn {
            q: self.random(format!("{name}.q"), c, c),
            k: self.random(format!("{name}.k"), c, c),
            v: self.random(format!("{name}.v"), c, c),
            out: self.linear(&format!("{name}.out"), c, c),
        }
    }

    fn block(&mut self, name: &str, c: usize, cross: bool) -> Block {
        Block {
            ln_self: self.norm(&format!("{name}.ln_self"), c),
            self_attn: self.attn(&format!("{name}.self_attn"), c),
            cross: cross.then(|| {
                (
                    self.norm(&format!("{name}.ln_cross"), c),
                    self.attn(&format!("{name}.cross_attn"), c),
                )
            }),
            ln_mlp: self.norm(&format!("{name}.ln_mlp"), c),
            fc1: self.linear(&format!("{name}.fc1"), c, MLP_RATIO * c),
            fc2: self.linear(&format!("{name}.fc2"), MLP_RATIO * c, c),
        }
    }
}

/// Fresh parameters: normal(0, 0.02) weights, zero biases, unit gains.
pub(crate) fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> (Params, Layout) {
    let c = cfg.hidden_dim;
    let mut b = Builder {
        params: Params::empty(),
        rng,
        normal: Normal::new(0.0, INIT_STD).expect("finite std"),
    };
    let tok_emb = b.random("token_embedding".into(), cfg.vocab_size + 1, c);
    let agent_pos = b.random("agent_position".into(), cfg.max_agents, c);
    let time_pos = b.random("time_position".into(), cfg.max_timesteps, c);
    let query = b.random("query".into(), 1, c);
    let agent_fc1 = b.linear("agent.fc1", AGENT_FEATURES, c);
    let agent_fc2 = b.linear("agent.fc2", c, c);
    let map = cfg.masking_regime.uses_map().then(|| MapEncoder {
        point_fc1: b.linear("map.point_fc1", POINT_FEATURES, c),
        point_fc2: b.linear("map.point_fc2", c, c),
        blocks: (0..cfg.n_map_layers).map(|l| b.block(&format!("map.block{l}"), c, false)).collect(),
        latents: b.random("latent.queries".into(), cfg.n_latent_queries, c),
        ln_latent: b.norm("latent.ln_query", c),
        ln_context: b.norm("latent.ln_context", c),
        latent_attn: b.attn("latent.attn", c),
    });
    let enc_blocks = (0..cfg.n_enc_layers).map(|l| b.block(&format!("encoder.block{l}"), c, false)).collect();
    let enc_ln = b.norm("encoder.ln_final", c);
    let dec_blocks = (0..cfg.n_dec_layers).map(|l| b.block(&format!("decoder.block{l}"), c, true)).collect();
    let dec_ln = b.norm("decoder.ln_final", c);
    let layout = Layout {
        tok_emb,
        agent_pos,
        time_pos,
        query,
        agent_fc1,
        agent_fc2,
        map,
        enc_blocks,
        enc_ln,
        dec_blocks,
        dec_ln,
    };
    (b.params, layout)
}
