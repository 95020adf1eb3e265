//! Discretization quality over a corpus.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{tokenize_trajectory, TemplateSet};
use crate::data::Scenario;
use crate::geometry::{overlap_flags, AgentClass, AgentState};

/// Curves are indexed by timestep; entry `t` covers state `t` of every
/// scenario that long.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiscretizationReport {
    pub tick: f64,
    /// Mean corner distance between raw and tokenized states, per timestep.
    pub error: Vec<f64>,
    pub error_per_class: BTreeMap<AgentClass, Vec<f64>>,
    /// Fraction of valid agents overlapping another agent, per timestep.
    pub collision_raw: Vec<f64>,
    pub collision_tokenized: Vec<f64>,
    /// Valid agent-states per timestep.
    pub counts: Vec<usize>,
}

#[derive(Default, Clone)]
struct Acc {
    err: Vec<f64>,
    n: Vec<usize>,
    class_err: BTreeMap<AgentClass, (Vec<f64>, Vec<usize>)>,
    col_raw: Vec<f64>,
    col_tok: Vec<f64>,
}

impl Acc {
    fn grow(&mut self, t: usize) {
        if self.err.len() < t {
            self.err.resize(t, 0.0);
            self.n.resize(t, 0);
            self.col_raw.resize(t, 0.0);
            self.col_tok.resize(t, 0.0);
        }
    }

    fn merge(mut self, other: Acc) -> Acc {
        self.grow(other.err.len());
        for t in 0..other.err.len() {
            self.err[t] += other.err[t];
            self.n[t] += other.n[t];
            self.col_raw[t] += other.col_raw[t];
            self.col_tok[t] += other.col_tok[t];
        }
        for (c, (e, n)) in other.class_err {
            let slot = self.class_err.entry(c).or_default();
            if slot.0.len() < e.len() {
                slot.0.resize(e.len(), 0.0);
                slot.1.resize(e.len(), 0);
            }
            for t in 0..e.len() {
                slot.0[t] += e[t];
                slot.1[t] += n[t];
            }
        }
        self
    }
}

pub fn discretization_report(scenarios: &[Scenario], ts: &TemplateSet) -> DiscretizationReport {
    let acc = scenarios
        .par_iter()
        .map(|s| {
            let n_t = s.n_steps();
            let mut acc = Acc::default();
            acc.grow(n_t);
            let metas = s.metas();
            let tokenized: Vec<Vec<AgentState>> = s
                .agents
                .iter()
                .map(|a| {
                    let tt = tokenize_trajectory(&a.states, &a.meta, ts);
                    let slot = acc.class_err.entry(a.meta.class).or_insert_with(|| (vec![0.0; n_t], vec![0; n_t]));
                    for (t, e) in tt.errors.iter().enumerate() {
                        if let Some(e) = e {
                            acc.err[t] += e;
                            acc.n[t] += 1;
                            slot.0[t] += e;
                            slot.1[t] += 1;
                        }
                    }
                    tt.snapped
                })
                .collect();
            for t in 0..n_t {
                let raw = s.states_at(t);
                let tok: Vec<AgentState> = tokenized.iter().map(|tr| tr[t]).collect();
                acc.col_raw[t] += overlap_flags(&raw, &metas).0.iter().filter(|&&f| f).count() as f64;
                acc.col_tok[t] += overlap_flags(&tok, &metas).0.iter().filter(|&&f| f).count() as f64;
            }
            acc
        })
        .reduce(Acc::default, Acc::merge);
    let div = |v: &[f64], n: &[usize]| v.iter().zip(n).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect();
    DiscretizationReport {
        tick: scenarios.first().map_or(crate::data::DEFAULT_TICK_S, |s| s.tick),
        error: div(&acc.err, &acc.n),
        error_per_class: acc.class_err.iter().map(|(c, (e, n))| (*c, div(e, n))).collect(),
        collision_raw: div(&acc.col_raw, &acc.n),
        collision_tokenized: div(&acc.col_tok, &acc.n),
        counts: acc.n,
    }
}

impl DiscretizationReport {
    /// Flat CSV: one row per timestep.
    pub fn to_csv(&self) -> String {
        let classes: Vec<&AgentClass> = self.error_per_class.keys().collect();
        let mut out = String::from("timestep,time_s,count,error_m");
        for c in &classes {
            out.push_str(&format!(",error_{c}_m"));
        }
        out.push_str(",collision_raw,collision_tokenized\n");
        for t in 0..self.error.len() {
            out.push_str(&format!("{t},{},{},{}", t as f64 * self.tick, self.counts[t], self.error[t]));
            for c in &classes {
                out.push_str(&format!(",{}", self.error_per_class[c].get(t).copied().unwrap_or(0.0)));
            }
            out.push_str(&format!(",{},{}\n", self.collision_raw[t], self.collision_tokenized[t]));
        }
        out
    }
}
