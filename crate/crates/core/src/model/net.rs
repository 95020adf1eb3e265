//! Encoder and two-stream decoder expressed on the autodiff tape.
//!
//! The decoder runs one matrix of `2S + 1` rows: the start row, `S` content
//! rows (embedded input tokens) and `S` query rows (position only). Keys and
//! values come from the first `S + 1` rows. Query row `p` produces the logits
//! for position `p`; because the visible-set relation is transitive, content
//! rows never leak anything a query row may not see.

use std::ops::Range;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use super::mask::decoder_mask;
use super::params::{Attn, Block, Layout, Linear, Norm, Params, AGENT_FEATURES, POINT_FEATURES};
use super::tape::{Graph, Mat, Var};
use super::{ModelConfig, SceneInit, TokenGrid};
use crate::data::MapObject;
use crate::error::{Error, Result};
use crate::geometry::AgentClass;
use crate::sampling::SimRng;

pub(crate) const POS_SCALE: f64 = 1.0 / 50.0;
pub(crate) const DIM_SCALE: f64 = 0.2;

pub(crate) fn agent_features(init: &SceneInit) -> Mat {
    let mut f = Mat::zeros((init.agents.len(), AGENT_FEATURES));
    for (r, a) in init.agents.iter().enumerate() {
        f[[r, 0]] = a.meta.length * DIM_SCALE;
        f[[r, 1]] = a.meta.width * DIM_SCALE;
        if a.state.valid {
            f[[r, 2]] = a.state.x * POS_SCALE;
            f[[r, 3]] = a.state.y * POS_SCALE;
            f[[r, 4]] = a.state.h.cos();
            f[[r, 5]] = a.state.h.sin();
            f[[r, 6]] = 1.0;
        }
        f[[r, 7 + a.meta.class.index()]] = 1.0;
    }
    debug_assert_eq!(7 + AgentClass::ALL.len(), AGENT_FEATURES);
    f
}

/// Point features of every polyline stacked, plus the row range of each.
pub(crate) fn point_features(map: &[MapObject]) -> (Mat, Vec<Range<usize>>) {
    let total: usize = map.iter().map(|m| m.points.len()).sum();
    let mut f = Mat::zeros((total, POINT_FEATURES));
    let mut groups = Vec::with_capacity(map.len());
    let mut r = 0;
    for obj in map {
        let start = r;
        let pts = &obj.points;
        for k in 0..pts.len() {
            let (a, b) = match pts.len() {
                1 => (pts[0], pts[0]),
                _ if k + 1 < pts.len() => (pts[k], pts[k + 1]),
                _ => (pts[k - 1], pts[k]),
            };
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = dx.hypot(dy);
            f[[r, 0]] = pts[k][0] * POS_SCALE;
            f[[r, 1]] = pts[k][1] * POS_SCALE;
            if len > 0.0 {
                f[[r, 2]] = dx / len;
                f[[r, 3]] = dy / len;
            }
            f[[r, 4 + obj.kind.index()]] = 1.0;
            r += 1;
        }
        groups.push(start..r);
    }
    (f, groups)
}

pub(crate) struct Net<'a> {
    pub params: &'a Params,
    pub layout: &'a Layout,
    pub cfg: &'a ModelConfig,
}

/// Training-time dropout source; absent at evaluation.
pub(crate) type DropoutRng<'r> = Option<&'r mut SimRng>;

impl Net<'_> {
    fn param(&self, g: &mut Graph, idx: usize) -> Var {
        g.param(idx, &self.params.values()[idx])
    }

    fn linear(&self, g: &mut Graph, x: Var, lin: Linear) -> Var {
        let w = self.param(g, lin.w);
        let b = self.param(g, lin.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Var {
        let gain = self.param(g, n.gain);
        let bias = self.param(g, n.bias);
        g.layer_norm(x, gain, bias)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut DropoutRng) -> Var {
        let p = self.cfg.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let dim = g.value(x).dim();
                let m = Mat::from_shape_fn(dim, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
                g.mul_const(x, Rc::new(m))
            }
            _ => x,
        }
    }

    fn attention(&self, g: &mut Graph, a: &Attn, xq: Var, xkv: Var, mask: Option<&Rc<Array2<bool>>>) -> Var {
        let wq = self.param(g, a.q);
        let wk = self.param(g, a.k);
        let wv = self.param(g, a.v);
        let q = g.matmul(xq, wq);
        let k = g.matmul(xkv, wk);
        let v = g.matmul(xkv, wv);
        let heads = self.cfg.n_heads;
        let d = self.cfg.hidden_dim / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, cols.clone()), g.slice_cols(k, cols.clone()), g.slice_cols(v, cols))
            };
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.masked_softmax(scores, mask.cloned());
            outs.push(g.matmul(probs, vh));
        }
        let o = if heads == 1 { outs[0] } else { g.concat_cols(outs) };
        self.linear(g, o, a.out)
    }

    fn mlp(&self, g: &mut Graph, x: Var, fc1: Linear, fc2: Linear) -> Var {
        let h = self.linear(g, x, fc1);
        let h = g.gelu(h);
        self.linear(g, h, fc2)
    }

    /// One pre-norm block. Keys and values come from the first `kv_rows`
    /// rows of the normalised input when given.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph,
        b: &Block,
        x: Var,
        kv_rows: Option<usize>,
        mask: Option<&Rc<Array2<bool>>>,
        memory: Option<Var>,
        rng: &mut DropoutRng,
    ) -> Var {
        let h = self.norm(g, x, b.ln_self);
        let kv = match kv_rows {
            Some(n) => g.slice_rows(h, 0..n),
            None => h,
        };
        let a = self.attention(g, &b.self_attn, h, kv, mask);
        let a = self.dropout(g, a, rng);
        let mut x = g.add(x, a);
        if let (Some((ln, attn)), Some(mem)) = (&b.cross, memory) {
            let h = self.norm(g, x, *ln);
            let a = self.attention(g, attn, h, mem, None);
            let a = self.dropout(g, a, rng);
            x = g.add(x, a);
        }
        let h = self.norm(g, x, b.ln_mlp);
        let m = self.mlp(g, h, b.fc1, b.fc2);
        let m = self.dropout(g, m, rng);
        g.add(x, m)
    }

    /// Scene embedding: latent rows (when the map is used) followed by one
    /// row per agent.
    pub fn encode(&self, g: &mut Graph, init: &SceneInit, rng: &mut DropoutRng) -> Result<Var> {
        let n = init.agents.len();
        if n == 0 {
            return Err(Error::Shape("scene has no agents".into()));
        }
        if n > self.cfg.max_agents {
            return Err(Error::Shape(format!("{n} agents exceed capacity {}", self.cfg.max_agents)));
        }
        if init.map.len() > self.cfg.max_map_objects {
            return Err(Error::Shape(format!(
                "{} map objects exceed capacity {}",
                init.map.len(),
                self.cfg.max_map_objects
            )));
        }
        let feats = g.constant(agent_features(init));
        let agents = self.mlp(g, feats, self.layout.agent_fc1, self.layout.agent_fc2);
        let pos_table = self.param(g, self.layout.agent_pos);
        let pos = g.slice_rows(pos_table, 0..n);
        let agents = g.add(agents, pos);
        let mut seq = agents;
        if let Some(me) = &self.layout.map {
            let mut context = agents;
            let objects: Vec<&MapObject> = init.map.iter().filter(|m| !m.points.is_empty()).collect();
            if !objects.is_empty() {
                let owned: Vec<MapObject> = objects.into_iter().cloned().collect();
                let (pf, groups) = point_features(&owned);
                let pts = g.constant(pf);
                let pts = self.mlp(g, pts, me.point_fc1, me.point_fc2);
                let mut polys = g.max_pool(pts, &groups);
                for b in &me.blocks {
                    polys = self.block(g, b, polys, None, None, None, rng);
                }
                context = g.concat_rows(vec![polys, agents]);
            }
            let latents = self.param(g, me.latents);
            let lq = self.norm(g, latents, me.ln_latent);
            let kv = self.norm(g, context, me.ln_context);
            let a = self.attention(g, &me.latent_attn, lq, kv, None);
            let latents = g.add(latents, a);
            seq = g.concat_rows(vec![latents, agents]);
        }
        for b in &self.layout.enc_blocks {
            seq = self.block(g, b, seq, None, None, None, rng);
        }
        Ok(self.norm(g, seq, self.layout.enc_ln))
    }

    /// Logits, one row per flattened position, over the first |V| embeddings.
    pub fn decode(
        &self,
        g: &mut Graph,
        memory: Var,
        tokens: &TokenGrid,
        intra_cap: Option<usize>,
        rng: &mut DropoutRng,
    ) -> Result<Var> {
        let (n, t) = (tokens.n_agents(), tokens.n_steps());
        let v = self.cfg.vocab_size;
        if t == 0 {
            return Err(Error::Shape("token grid has no timesteps".into()));
        }
        if t > self.cfg.max_timesteps {
            return Err(Error::Shape(format!("{t} timesteps exceed capacity {}", self.cfg.max_timesteps)));
        }
        let s = n * t;
        let flat = tokens.flattened();
        if let Some(id) = flat.iter().flatten().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id: *id, size: v });
        }
        let emb = self.param(g, self.layout.tok_emb);
        let mut ids = Vec::with_capacity(s + 1);
        ids.push(Some(v));
        ids.extend(flat.iter().copied());
        let content = g.gather(emb, ids);
        let agent_ids: Vec<Option<usize>> = (0..s).map(|p| Some(p % n)).collect();
        let time_ids: Vec<Option<usize>> = (0..s).map(|p| Some(p / n)).collect();
        let agent_pos = self.param(g, self.layout.agent_pos);
        let time_pos = self.param(g, self.layout.time_pos);
        let ap = g.gather(agent_pos, agent_ids);
        let tp = g.gather(time_pos, time_ids);
        let pos = g.add(ap, tp);
        let zero = g.constant(Mat::zeros((1, self.cfg.hidden_dim)));
        let pos_with_start = g.concat_rows(vec![zero, pos]);
        let content = g.add(content, pos_with_start);
        let qv = self.param(g, self.layout.query);
        let queries = g.add_row(pos, qv);
        let mut x = g.concat_rows(vec![content, queries]);
        let mask = decoder_mask(self.cfg.masking_regime, n, t, intra_cap);
        for b in &self.layout.dec_blocks {
            x = self.block(g, b, x, Some(s + 1), Some(&mask), Some(memory), rng);
        }
        let q = g.slice_rows(x, s + 1..2 * s + 1);
        let q = self.norm(g, q, self.layout.dec_ln);
        let out = g.slice_rows(emb, 0..v);
        Ok(g.matmul_bt(q, out))
    }
}
