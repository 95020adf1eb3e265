//! Incremental decoding with per-layer key/value caches.
//!
//! Mirrors the tape decoder row by row: pushing a token computes its content
//! row once and caches its keys and values at every layer; the logits of the
//! next position come from a fresh query row over the cache.

use ndarray::{s, Array1, ArrayView1};

use super::mask::visible;
use super::net::Net;
use super::params::{Attn, Block, Linear, Norm};
use super::tape::{gelu, layer_norm_rows, Graph, Mat};
use super::{Model, SceneInit};
use crate::error::{Error, Result};

pub struct DecodeCache<'m> {
    model: &'m Model,
    n_agents: usize,
    intra_cap: Option<usize>,
    /// Per decoder layer: cross-attention keys and values of the scene.
    memory: Vec<(Mat, Mat)>,
    /// Per decoder layer: self-attention keys and values; row 0 is the start
    /// token, row `1 + p` is position `p`.
    keys: Vec<Mat>,
    values: Vec<Mat>,
    len: usize,
}

fn row_linear(net: &Net, x: ArrayView1<f64>, lin: Linear) -> Array1<f64> {
    let p = net.params.values();
    x.dot(&p[lin.w]) + p[lin.b].row(0)
}

fn row_norm(net: &Net, x: ArrayView1<f64>, n: Norm) -> Array1<f64> {
    let p = net.params.values();
    let m = x.to_owned().insert_axis(ndarray::Axis(0));
    let (y, _, _) = layer_norm_rows(m.view(), p[n.gain].view(), p[n.bias].view());
    y.row(0).to_owned()
}

type OwnKv<'a> = Option<(usize, &'a Array1<f64>, &'a Array1<f64>)>;

/// Multi-head attention of one query row over key/value rows `cols`. Row
/// `own.0`, if given, reads its key and value from `own` instead.
fn row_attention(net: &Net, q: &Array1<f64>, keys: &Mat, values: &Mat, cols: &[usize], own: OwnKv, a: Attn) -> Array1<f64> {
    let heads = net.cfg.n_heads;
    let d = net.cfg.hidden_dim / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Array1::zeros(net.cfg.hidden_dim);
    let mut scores = vec![0.0; cols.len()];
    for h in 0..heads {
        let r = h * d..(h + 1) * d;
        let qh = q.slice(s![r.clone()]);
        let mut max = f64::NEG_INFINITY;
        for (j, &c) in cols.iter().enumerate() {
            let k = match own {
                Some((o, k, _)) if o == c => k.slice(s![r.clone()]),
                _ => keys.slice(s![c, r.clone()]),
            };
            scores[j] = qh.dot(&k) * scale;
            max = max.max(scores[j]);
        }
        let mut sum = 0.0;
        for sc in scores.iter_mut() {
            *sc = (*sc - max).exp();
            sum += *sc;
        }
        let mut oh = out.slice_mut(s![r.clone()]);
        for (j, &c) in cols.iter().enumerate() {
            let v = match own {
                Some((o, _, v)) if o == c => v.slice(s![r.clone()]),
                _ => values.slice(s![c, r.clone()]),
            };
            oh.scaled_add(scores[j] / sum, &v);
        }
    }
    row_linear(net, out.view(), a.out)
}

impl<'m> DecodeCache<'m> {
    pub fn new(model: &'m Model, init: &SceneInit) -> Result<Self> {
        Self::with_intra_cap(model, init, None)
    }

    /// Cache whose predictions see same-timestep predecessors only below
    /// order index `intra_cap`.
    pub fn with_intra_cap(model: &'m Model, init: &SceneInit, intra_cap: Option<usize>) -> Result<Self> {
        let net = model.net();
        let mut g = Graph::new();
        let mem_var = net.encode(&mut g, init, &mut None)?;
        let mem = g.value(mem_var);
        let p = model.params().values();
        let cfg = model.config();
        let rows = 1 + init.n_agents() * cfg.max_timesteps;
        let memory = model
            .layout()
            .dec_blocks
            .iter()
            .map(|b| {
                let (_, a) = b.cross.as_ref().expect("decoder blocks cross-attend");
                (mem.dot(&p[a.k]), mem.dot(&p[a.v]))
            })
            .collect();
        let layers = cfg.n_dec_layers;
        let mut cache = DecodeCache {
            model,
            n_agents: init.n_agents(),
            intra_cap,
            memory,
            keys: vec![Mat::zeros((rows, cfg.hidden_dim)); layers],
            values: vec![Mat::zeros((rows, cfg.hidden_dim)); layers],
            len: 0,
        };
        let start = p[model.layout().tok_emb].row(cfg.vocab_size).to_owned();
        cache.run_row(start, Some(0), &[0]);
        Ok(cache)
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    /// Flattened position the next call to [`DecodeCache::logits`] predicts.
    pub fn position(&self) -> usize {
        self.len
    }

    pub fn capacity(&self) -> usize {
        self.n_agents * self.model.config().max_timesteps
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        net: &Net,
        b: &Block,
        l: usize,
        mut x: Array1<f64>,
        own: Option<usize>,
        cols: &[usize],
        kv: &mut Option<(Array1<f64>, Array1<f64>)>,
    ) -> Array1<f64> {
        let p = net.params.values();
        let h = row_norm(net, x.view(), b.ln_self);
        let q = h.dot(&p[b.self_attn.q]);
        let a = match own {
            Some(r) => {
                let k = h.dot(&p[b.self_attn.k]);
                let v = h.dot(&p[b.self_attn.v]);
                let a = row_attention(net, &q, &self.keys[l], &self.values[l], cols, Some((r, &k, &v)), b.self_attn);
                *kv = Some((k, v));
                a
            }
            None => row_attention(net, &q, &self.keys[l], &self.values[l], cols, None, b.self_attn),
        };
        x += &a;
        if let Some((ln, attn)) = &b.cross {
            let h = row_norm(net, x.view(), *ln);
            let q = h.dot(&p[attn.q]);
            let (mk, mv) = &self.memory[l];
            let all: Vec<usize> = (0..mk.nrows()).collect();
            x += &row_attention(net, &q, mk, mv, &all, None, *attn);
        }
        let h = row_norm(net, x.view(), b.ln_mlp);
        let m = row_linear(net, h.view(), b.fc1).mapv(gelu);
        x += &row_linear(net, m.view(), b.fc2);
        x
    }

    /// Runs one row through every layer. A row with a cache slot `own`
    /// stores its keys and values there.
    fn run_row(&mut self, mut x: Array1<f64>, own: Option<usize>, cols: &[usize]) -> Array1<f64> {
        let model = self.model;
        let net = model.net();
        for (l, b) in model.layout().dec_blocks.iter().enumerate() {
            let mut kv = None;
            x = self.block(&net, b, l, x, own, cols, &mut kv);
            if let (Some(r), Some((k, v))) = (own, kv) {
                self.keys[l].row_mut(r).assign(&k);
                self.values[l].row_mut(r).assign(&v);
            }
        }
        x
    }

    fn position_embedding(&self, p: usize) -> Array1<f64> {
        let vals = self.model.params().values();
        let lay = self.model.layout();
        let (t, i) = (p / self.n_agents, p % self.n_agents);
        &vals[lay.agent_pos].row(i) + &vals[lay.time_pos].row(t)
    }

    fn visible_cols(&self, p: usize) -> Vec<usize> {
        let regime = self.model.regime();
        let mut cols = vec![0];
        cols.extend((0..p).filter(|&q| visible(regime, self.n_agents, q, p, self.intra_cap)).map(|q| 1 + q));
        cols
    }

    fn check_room(&self) -> Result<()> {
        if self.len >= self.capacity() {
            return Err(Error::Shape(format!(
                "decoder context full: {} positions for {} agents",
                self.capacity(),
                self.n_agents
            )));
        }
        Ok(())
    }

    /// Logits over the vocabulary for the next position.
    pub fn logits(&self) -> Result<Vec<f64>> {
        self.check_room()?;
        let p = self.len;
        let vals = self.model.params().values();
        let lay = self.model.layout();
        let x = self.position_embedding(p) + vals[lay.query].row(0);
        let cols = self.visible_cols(p);
        let net = self.model.net();
        let mut x = x;
        for (l, b) in lay.dec_blocks.iter().enumerate() {
            let mut kv = None;
            x = self.block(&net, b, l, x, None, &cols, &mut kv);
        }
        let x = row_norm(&net, x.view(), lay.dec_ln);
        let v = self.model.config().vocab_size;
        let emb = vals[lay.tok_emb].slice(s![0..v, ..]);
        Ok(emb.dot(&x).to_vec())
    }

    /// Appends the token chosen at the next position; `None` for a missing
    /// step.
    pub fn push(&mut self, token: Option<usize>) -> Result<()> {
        self.check_room()?;
        let v = self.model.config().vocab_size;
        if let Some(id) = token.filter(|&id| id >= v) {
            return Err(Error::TokenOutOfRange { id, size: v });
        }
        let p = self.len;
        let vals = self.model.params().values();
        let mut x = self.position_embedding(p);
        if let Some(id) = token {
            x += &vals[self.model.layout().tok_emb].row(id);
        }
        let mut cols = self.visible_cols(p);
        cols.push(1 + p);
        self.run_row(x, Some(1 + p), &cols);
        self.len += 1;
        Ok(())
    }
}
