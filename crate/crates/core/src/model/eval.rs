//! Teacher-forced evaluation: accuracy and negative log-likelihood tables.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{build_example, default_order};
use super::{Example, Model, ModelConfig, SceneInit};
use crate::data::Scenario;
use crate::error::Result;
use crate::geometry::{to_global_raw, AgentClass, AgentState};
use crate::sampling::{argmax, log_softmax, SimRng};
use crate::tokenizer::TemplateSet;

/// Deterministic evaluation windows: the first `min(T_max, steps − 1)`
/// tokens of each scenario, in the frame of the SDC (or the first valid
/// agent), agents ordered by distance to it.
pub fn eval_examples(corpus: &[Scenario], ts: &TemplateSet, cfg: &ModelConfig) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(corpus.len());
    for s in corpus {
        if s.n_steps() < 2 {
            continue;
        }
        let states = s.states_at(0);
        let center = match s.sdc_index().filter(|&i| states[i].valid) {
            Some(i) => i,
            None => match states.iter().position(|st| st.valid) {
                Some(i) => i,
                None => continue,
            },
        };
        let order = default_order(&states, center, cfg.max_agents);
        let n_tokens = cfg.max_timesteps.min(s.n_steps() - 1);
        out.push(build_example::<SimRng>(s, ts, cfg, 0, n_tokens, &states[center], &order, None)?);
    }
    Ok(out)
}

/// Fraction of valid targets whose argmax logit is correct.
pub fn teacher_forced_accuracy(model: &Model, examples: &[Example]) -> Result<f64> {
    let per: Vec<Result<(usize, usize)>> = examples
        .par_iter()
        .map(|ex| {
            let logits = model.forward(&ex.init, &ex.inputs)?;
            let mut hit = 0;
            let mut n = 0;
            for (r, t) in ex.targets.flattened().iter().enumerate() {
                if let Some(t) = t {
                    n += 1;
                    if argmax(logits.row(r).as_slice().expect("row-major")) == *t {
                        hit += 1;
                    }
                }
            }
            Ok((hit, n))
        })
        .collect();
    let (mut hit, mut n) = (0, 0);
    for r in per {
        let (h, c) = r?;
        hit += h;
        n += c;
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

/// Which context each scored prediction gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NllQuery {
    /// Earlier timesteps visible to a prediction; `None` is everything in
    /// the window.
    pub context_limit: Option<usize>,
    /// Same-timestep predecessors visible, on top of the regime.
    pub intra_cap: Option<usize>,
    /// Only agents with order index at least this are scored.
    pub min_order: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassNll {
    /// Mean negative log-likelihood, nats per token.
    pub nll: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NllTable {
    pub query: NllQuery,
    pub overall: ClassNll,
    pub per_class: BTreeMap<AgentClass, ClassNll>,
}

#[derive(Default)]
struct Sums {
    total: (f64, usize),
    classes: BTreeMap<AgentClass, (f64, usize)>,
}

impl Sums {
    fn add(&mut self, class: AgentClass, nll: f64) {
        self.total.0 += nll;
        self.total.1 += 1;
        let c = self.classes.entry(class).or_default();
        c.0 += nll;
        c.1 += 1;
    }

    fn merge(&mut self, other: Sums) {
        self.total.0 += other.total.0;
        self.total.1 += other.total.1;
        for (k, (s, n)) in other.classes {
            let c = self.classes.entry(k).or_default();
            c.0 += s;
            c.1 += n;
        }
    }
}

fn mean((s, n): (f64, usize)) -> ClassNll {
    ClassNll {
        nll: if n == 0 { 0.0 } else { s / n as f64 },
        count: n,
    }
}

/// States along each agent's input chain, in the example's frame. After a
/// missing token the agent's state is unknown (invalid).
fn chain_states(ex: &Example, ts: &TemplateSet) -> Vec<Vec<AgentState>> {
    ex.init
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut out = vec![a.state];
            for t in 0..ex.inputs.n_steps() {
                let prev = out[t];
                out.push(match ex.inputs.get(i, t) {
                    Some(id) if prev.valid => to_global_raw(&prev, &ts.templates()[id].as_state()),
                    _ => AgentState::invalid(),
                });
            }
            out
        })
        .collect()
}

fn score_rows(
    sums: &mut Sums,
    ex: &Example,
    logits: &ndarray::Array2<f64>,
    t_window: std::ops::Range<usize>,
    target_t: Option<usize>,
    min_order: usize,
) {
    let n = ex.init.n_agents();
    for (row, t) in t_window.enumerate() {
        if target_t.is_some_and(|tt| tt != t) {
            continue;
        }
        for i in min_order..n {
            if let Some(target) = ex.targets.get(i, t) {
                let r = row * n + i;
                let lp = log_softmax(logits.row(r).as_slice().expect("row-major"));
                sums.add(ex.init.agents[i].meta.class, -lp[target]);
            }
        }
    }
}

/// Mean per-token NLL over `examples`, stratified by agent class.
///
/// With a context limit `c`, the prediction at timestep `t` is made from a
/// scene re-initialised at `max(0, t − c)` on the input chain.
pub fn nll_eval(model: &Model, examples: &[Example], ts: &TemplateSet, query: NllQuery) -> Result<NllTable> {
    let per: Vec<Result<Sums>> = examples
        .par_iter()
        .map(|ex| {
            let mut sums = Sums::default();
            let steps = ex.inputs.n_steps();
            match query.context_limit {
                None => {
                    let logits = model.forward_capped(&ex.init, &ex.inputs, query.intra_cap)?;
                    score_rows(&mut sums, ex, &logits, 0..steps, None, query.min_order);
                }
                Some(c) => {
                    let states = chain_states(ex, ts);
                    for t in 0..steps {
                        let t0 = t.saturating_sub(c);
                        let init = SceneInit {
                            agents: ex
                                .init
                                .agents
                                .iter()
                                .enumerate()
                                .map(|(i, a)| super::InitAgent { meta: a.meta, state: states[i][t0] })
                                .collect(),
                            map: ex.init.map.clone(),
                        };
                        let window = ex.inputs.window(t0..t + 1);
                        let logits = model.forward_capped(&init, &window, query.intra_cap)?;
                        score_rows(&mut sums, ex, &logits, t0..t + 1, Some(t), query.min_order);
                    }
                }
            }
            Ok(sums)
        })
        .collect();
    let mut all = Sums::default();
    for s in per {
        all.merge(s?);
    }
    Ok(NllTable {
        query,
        overall: mean(all.total),
        per_class: all.classes.into_iter().map(|(k, v)| (k, mean(v))).collect(),
    })
}
