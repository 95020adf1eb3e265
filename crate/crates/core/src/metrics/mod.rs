//! Rollout and model quality metrics, and a flat report container for them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::geometry::{corner_distance_raw, overlap_flags, AgentClass, AgentMeta, AgentState};
use crate::model::{nll_eval, Example, Model, NllQuery, NllTable, TokenGrid};
use crate::rollout::Rollout;
use crate::tokenizer::{tokenize_trajectory, TemplateSet};

/// Mean centre distance over the steps valid in both tracks.
pub fn ade(pred: &[AgentState], log: &[AgentState]) -> Result<f64> {
    if pred.len() != log.len() {
        return Err(Error::Shape(format!("track lengths {} and {}", pred.len(), log.len())));
    }
    let (sum, n) = pred
        .iter()
        .zip(log)
        .filter(|(a, b)| a.valid && b.valid)
        .fold((0.0, 0usize), |(s, n), (a, b)| (s + a.center_distance(b), n + 1));
    if n == 0 {
        return Err(Error::Empty("no step is valid in both tracks".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAde {
    /// `None` where the agent shares no valid step with its log.
    pub per_agent: Vec<Option<f64>>,
    /// Mean over all jointly valid (agent, step) pairs.
    pub mean: f64,
}

pub fn scene_ade(pred: &[Vec<AgentState>], log: &[Vec<AgentState>]) -> Result<SceneAde> {
    if pred.len() != log.len() {
        return Err(Error::Shape(format!("{} predicted and {} logged agents", pred.len(), log.len())));
    }
    let mut per_agent = Vec::with_capacity(pred.len());
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, l) in pred.iter().zip(log) {
        match ade(p, l) {
            Ok(v) => {
                let k = p.iter().zip(l).filter(|(a, b)| a.valid && b.valid).count();
                sum += v * k as f64;
                n += k;
                per_agent.push(Some(v));
            }
            Err(Error::Empty(_)) => per_agent.push(None),
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::Empty("no agent shares a valid step with its log".into()));
    }
    Ok(SceneAde { per_agent, mean: sum / n as f64 })
}

/// Mean corner distance over agents and jointly valid steps.
pub fn scene_corner_distance(pred: &[Vec<AgentState>], log: &[Vec<AgentState>], metas: &[AgentMeta]) -> Result<f64> {
    if pred.len() != log.len() || pred.len() != metas.len() {
        return Err(Error::Shape(format!(
            "{} predicted, {} logged agents, {} metas",
            pred.len(),
            log.len(),
            metas.len()
        )));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, l), m) in pred.iter().zip(log).zip(metas) {
        if p.len() != l.len() {
            return Err(Error::Shape(format!("track lengths {} and {}", p.len(), l.len())));
        }
        for (a, b) in p.iter().zip(l).filter(|(a, b)| a.valid && b.valid) {
            sum += corner_distance_raw(a, b, m.length, m.width);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no jointly valid steps".into()));
    }
    Ok(sum / n as f64)
}

/// Smallest scene corner distance among `samples`.
pub fn min_scenario_distance(samples: &[Vec<Vec<AgentState>>], log: &[Vec<AgentState>], metas: &[AgentMeta]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples".into()));
    }
    let mut best = f64::INFINITY;
    for s in samples {
        best = best.min(scene_corner_distance(s, log, metas)?);
    }
    Ok(best)
}

/// Sampled future states and the logged states over the same steps.
pub fn future_tracks(r: &Rollout, scenario: &Scenario) -> (Vec<Vec<AgentState>>, Vec<Vec<AgentState>>) {
    let end = r.states.first().map_or(0, Vec::len);
    let pred = r.states.iter().map(|row| row[r.history..].to_vec()).collect();
    let log = scenario
        .agents
        .iter()
        .map(|a| (r.history..end).map(|k| a.states.get(k).copied().unwrap_or(AgentState::invalid())).collect())
        .collect();
    (pred, log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FutureErrors {
    /// Mean over rollouts of the scene ADE.
    pub ade: f64,
    /// Best scene ADE among rollouts.
    pub min_ade: f64,
    pub min_scenario_distance: f64,
    pub n_rollouts: usize,
}

/// Future-only errors of a scenario's rollouts against its log.
pub fn future_errors(rollouts: &[&Rollout], scenario: &Scenario) -> Result<FutureErrors> {
    if rollouts.is_empty() {
        return Err(Error::Empty(format!("no rollouts for scenario {}", scenario.id)));
    }
    let metas = scenario.metas();
    let mut ades = Vec::with_capacity(rollouts.len());
    let mut samples = Vec::with_capacity(rollouts.len());
    let mut log = Vec::new();
    for r in rollouts {
        let (p, l) = future_tracks(r, scenario);
        ades.push(scene_ade(&p, &l)?.mean);
        samples.push(p);
        log = l;
    }
    Ok(FutureErrors {
        ade: ades.iter().sum::<f64>() / ades.len() as f64,
        min_ade: ades.iter().copied().fold(f64::INFINITY, f64::min),
        min_scenario_distance: min_scenario_distance(&samples, &log, &metas)?,
        n_rollouts: rollouts.len(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollisionCounts {
    /// Agents in overlap at each step.
    pub colliding: Vec<usize>,
    /// Valid agents at each step.
    pub valid: Vec<usize>,
    /// Agents overlapping at any step.
    pub ever: usize,
    /// Agents valid at any step.
    pub agents: usize,
}

impl CollisionCounts {
    fn grow(&mut self, steps: usize) {
        if self.colliding.len() < steps {
            self.colliding.resize(steps, 0);
            self.valid.resize(steps, 0);
        }
    }

    fn merge(&mut self, o: &CollisionCounts) {
        self.grow(o.colliding.len());
        for k in 0..o.colliding.len() {
            self.colliding[k] += o.colliding[k];
            self.valid[k] += o.valid[k];
        }
        self.ever += o.ever;
        self.agents += o.agents;
    }

    /// Fraction of valid agents in overlap, per step.
    pub fn curve(&self) -> Vec<f64> {
        self.colliding
            .iter()
            .zip(&self.valid)
            .map(|(&c, &v)| if v == 0 { 0.0 } else { c as f64 / v as f64 })
            .collect()
    }

    /// Fraction of agents that overlap another agent at some step.
    pub fn any_rate(&self) -> f64 {
        if self.agents == 0 {
            0.0
        } else {
            self.ever as f64 / self.agents as f64
        }
    }
}

/// Agent-level overlap statistics, summed over scenes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub overall: CollisionCounts,
    pub per_class: BTreeMap<AgentClass, CollisionCounts>,
    /// Overlapping pairs per step.
    pub pairs: Vec<usize>,
    pub scenes: usize,
}

impl CollisionReport {
    pub fn merge(&mut self, o: &CollisionReport) {
        self.overall.merge(&o.overall);
        for (k, v) in &o.per_class {
            self.per_class.entry(*k).or_default().merge(v);
        }
        if self.pairs.len() < o.pairs.len() {
            self.pairs.resize(o.pairs.len(), 0);
        }
        for (a, b) in self.pairs.iter_mut().zip(&o.pairs) {
            *a += b;
        }
        self.scenes += o.scenes;
    }
}

/// Overlap statistics of one scene; `states[i][k]` is agent `i` at step `k`.
pub fn collision_rate(states: &[Vec<AgentState>], metas: &[AgentMeta]) -> Result<CollisionReport> {
    if states.len() != metas.len() {
        return Err(Error::Shape(format!("{} tracks for {} metas", states.len(), metas.len())));
    }
    let steps = states.iter().map(Vec::len).max().unwrap_or(0);
    if states.iter().any(|s| s.len() != steps) {
        return Err(Error::Shape("tracks differ in length".into()));
    }
    let n = states.len();
    let mut rep = CollisionReport {
        scenes: 1,
        pairs: vec![0; steps],
        ..Default::default()
    };
    rep.overall.grow(steps);
    let mut ever = vec![false; n];
    let mut seen = vec![false; n];
    let mut snapshot = vec![AgentState::invalid(); n];
    for k in 0..steps {
        for i in 0..n {
            snapshot[i] = states[i][k];
        }
        let (flags, pairs) = overlap_flags(&snapshot, metas);
        rep.pairs[k] = pairs;
        for i in 0..n {
            if !snapshot[i].valid {
                continue;
            }
            seen[i] = true;
            ever[i] |= flags[i];
            let class = rep.per_class.entry(metas[i].class).or_default();
            class.grow(steps);
            for c in [&mut rep.overall, class] {
                c.valid[k] += 1;
                c.colliding[k] += flags[i] as usize;
            }
        }
    }
    for i in 0..n {
        if seen[i] {
            let class = rep.per_class.get_mut(&metas[i].class).expect("seen agents have a class entry");
            for c in [&mut rep.overall, class] {
                c.agents += 1;
                c.ever += ever[i] as usize;
            }
        }
    }
    Ok(rep)
}

/// Collision statistics over the sampled steps of rollouts, which start at
/// the last history state.
pub fn rollout_collisions(rollouts: &[Rollout], scenarios: &[Scenario]) -> Result<CollisionReport> {
    let by_id: BTreeMap<&str, &Scenario> = scenarios.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut out = CollisionReport::default();
    for r in rollouts {
        let s = by_id
            .get(r.scenario_id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("rollout for unknown scenario {}", r.scenario_id)))?;
        let future: Vec<Vec<AgentState>> = r.states.iter().map(|row| row[r.history..].to_vec()).collect();
        out.merge(&collision_rate(&future, &s.metas())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: usize,
    pub table: NllTable,
    /// Overall NLL minus the reference NLL.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllSweeps {
    pub full: NllTable,
    /// NLL against the number of earlier timesteps visible.
    pub context: Vec<SweepPoint>,
    /// NLL against the number of same-timestep predecessors visible, scored
    /// on agents with at least that many predecessors.
    pub intra: Vec<SweepPoint>,
}

/// Context sweep over `contexts` (relative to full context) and intra sweep
/// over `0..=max_predecessors`.
pub fn nll_sweeps(
    model: &Model,
    examples: &[Example],
    ts: &TemplateSet,
    contexts: &[usize],
    max_predecessors: usize,
) -> Result<NllSweeps> {
    let full = nll_eval(model, examples, ts, NllQuery::default())?;
    let mut context = Vec::with_capacity(contexts.len());
    for &c in contexts {
        let table = nll_eval(model, examples, ts, NllQuery { context_limit: Some(c), ..Default::default() })?;
        context.push(SweepPoint { x: c, delta: table.overall.nll - full.overall.nll, table });
    }
    let reference = nll_eval(model, examples, ts, NllQuery { min_order: max_predecessors, ..Default::default() })?;
    let mut intra = Vec::with_capacity(max_predecessors + 1);
    for k in 0..=max_predecessors {
        let q = NllQuery {
            intra_cap: Some(k),
            min_order: max_predecessors,
            ..Default::default()
        };
        let table = nll_eval(model, examples, ts, q)?;
        intra.push(SweepPoint { x: k, delta: table.overall.nll - reference.overall.nll, table });
    }
    Ok(NllSweeps { full, context, intra })
}

/// Token id histograms per agent class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub vocab_size: usize,
    pub per_class: BTreeMap<AgentClass, Vec<u64>>,
}

impl TokenCounts {
    pub fn new(vocab_size: usize) -> Self {
        TokenCounts {
            vocab_size,
            per_class: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, class: AgentClass, token: usize) -> Result<()> {
        if token >= self.vocab_size {
            return Err(Error::TokenOutOfRange { id: token, size: self.vocab_size });
        }
        self.per_class.entry(class).or_insert_with(|| vec![0; self.vocab_size])[token] += 1;
        Ok(())
    }

    /// Every valid token of `grid`; row `i` belongs to an agent of `classes[i]`.
    pub fn add_grid(&mut self, grid: &TokenGrid, classes: &[AgentClass]) -> Result<()> {
        if classes.len() != grid.n_agents() {
            return Err(Error::Shape(format!("{} classes for {} agents", classes.len(), grid.n_agents())));
        }
        for (i, &c) in classes.iter().enumerate() {
            for t in 0..grid.n_steps() {
                if let Some(id) = grid.get(i, t) {
                    self.add(c, id)?;
                }
            }
        }
        Ok(())
    }

    /// Chain tokens of every agent in `corpus`.
    pub fn from_corpus(corpus: &[Scenario], ts: &TemplateSet) -> Result<Self> {
        let mut out = TokenCounts::new(ts.len());
        for s in corpus {
            for a in &s.agents {
                for id in tokenize_trajectory(&a.states, &a.meta, ts).tokens.into_iter().flatten() {
                    out.add(a.meta.class, id)?;
                }
            }
        }
        Ok(out)
    }

    fn totals(&self) -> Vec<u64> {
        let mut t = vec![0; self.vocab_size];
        for c in self.per_class.values() {
            for (a, b) in t.iter_mut().zip(c) {
                *a += b;
            }
        }
        t
    }
}

fn normalize(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// `(token, frequency)` sorted by descending frequency, ties by id.
pub fn sorted_frequencies(counts: &[u64]) -> Vec<(usize, f64)> {
    let mut f: Vec<(usize, f64)> = normalize(counts).into_iter().enumerate().collect();
    f.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    f
}

pub fn total_variation(a: &[u64], b: &[u64]) -> f64 {
    let (pa, pb) = (normalize(a), normalize(b));
    0.5 * pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub train: BTreeMap<AgentClass, Vec<(usize, f64)>>,
    pub val: BTreeMap<AgentClass, Vec<(usize, f64)>>,
    /// Total variation between the splits, per class present in both.
    pub tv: BTreeMap<AgentClass, f64>,
    pub tv_overall: f64,
}

pub fn token_frequency(train: &TokenCounts, val: &TokenCounts) -> Result<FrequencyReport> {
    if train.vocab_size != val.vocab_size {
        return Err(Error::Shape(format!("vocabularies of {} and {} tokens", train.vocab_size, val.vocab_size)));
    }
    let curves = |c: &TokenCounts| c.per_class.iter().map(|(k, v)| (*k, sorted_frequencies(v))).collect();
    let tv = train
        .per_class
        .iter()
        .filter_map(|(k, a)| val.per_class.get(k).map(|b| (*k, total_variation(a, b))))
        .collect();
    Ok(FrequencyReport {
        train: curves(train),
        val: curves(val),
        tv,
        tv_overall: total_variation(&train.totals(), &val.totals()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalar {
    pub name: String,
    pub unit: String,
    pub condition: String,
    pub class: Option<AgentClass>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub unit: String,
    pub condition: String,
    pub class: Option<AgentClass>,
    /// What `x` counts, e.g. "timestep (0.1 s)".
    pub x_axis: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Named scalars and curves, stratified by class and experiment condition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scalars: Vec<Scalar>,
    pub curves: Vec<Curve>,
}

impl MetricReport {
    pub fn scalar(&mut self, name: &str, unit: &str, condition: &str, class: Option<AgentClass>, value: f64) {
        self.scalars.push(Scalar {
            name: name.into(),
            unit: unit.into(),
            condition: condition.into(),
            class,
            value,
        });
    }

    #[allow(clippy::too_many_arguments)]
    pub fn curve(&mut self, name: &str, unit: &str, condition: &str, class: Option<AgentClass>, x_axis: &str, x: Vec<f64>, y: Vec<f64>) {
        debug_assert_eq!(x.len(), y.len());
        self.curves.push(Curve {
            name: name.into(),
            unit: unit.into(),
            condition: condition.into(),
            class,
            x_axis: x_axis.into(),
            x,
            y,
        });
    }

    pub fn get(&self, name: &str, condition: &str, class: Option<AgentClass>) -> Option<f64> {
        self.scalars
            .iter()
            .find(|s| s.name == name && s.condition == condition && s.class == class)
            .map(|s| s.value)
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.scalars.extend(other.scalars);
        self.curves.extend(other.curves);
    }

    pub fn add_collisions(&mut self, c: &CollisionReport, condition: &str, tick_s: f64) {
        let axis = format!("timestep ({tick_s} s)");
        let classes = std::iter::once((None, &c.overall)).chain(c.per_class.iter().map(|(k, v)| (Some(*k), v)));
        for (class, counts) in classes {
            self.scalar("collision_any", "fraction", condition, class, counts.any_rate());
            let curve = counts.curve();
            let x = (0..curve.len()).map(|k| k as f64).collect();
            self.curve("collision", "fraction", condition, class, &axis, x, curve);
        }
        let x = (0..c.pairs.len()).map(|k| k as f64).collect();
        self.curve("collision_pairs", "pairs", condition, None, &axis, x, c.pairs.iter().map(|&p| p as f64).collect());
    }

    pub fn add_nll(&mut self, t: &NllTable, name: &str, condition: &str) {
        self.scalar(name, "nats/token", condition, None, t.overall.nll);
        for (k, v) in &t.per_class {
            self.scalar(name, "nats/token", condition, Some(*k), v.nll);
        }
    }

    pub fn add_sweeps(&mut self, s: &NllSweeps, condition: &str, tick_s: f64) {
        self.add_nll(&s.full, "nll", condition);
        let mut classes: Vec<Option<AgentClass>> = vec![None];
        classes.extend(s.full.per_class.keys().copied().map(Some));
        let pick = |t: &NllTable, c: Option<AgentClass>| match c {
            None => t.overall.nll,
            Some(k) => t.per_class.get(&k).map_or(f64::NAN, |v| v.nll),
        };
        for &c in &classes {
            let base = pick(&s.full, c);
            let x = s.context.iter().map(|p| p.x as f64).collect();
            let y = s.context.iter().map(|p| pick(&p.table, c) - base).collect();
            self.curve("nll_vs_context", "nats/token", condition, c, &format!("context timesteps ({tick_s} s)"), x, y);
            let x = s.intra.iter().map(|p| p.x as f64).collect();
            let y = s.intra.iter().map(|p| pick(&p.table, c)).collect();
            self.curve("nll_vs_predecessors", "nats/token", condition, c, "same-timestep predecessors", x, y);
        }
    }

    pub fn add_frequencies(&mut self, f: &FrequencyReport, condition: &str) {
        for (split, curves) in [("train", &f.train), ("val", &f.val)] {
            for (k, c) in curves {
                let x = (0..c.len()).map(|r| r as f64).collect();
                let y = c.iter().map(|p| p.1).collect();
                self.curve(&format!("token_frequency_{split}"), "fraction", condition, Some(*k), "token rank", x, y);
            }
        }
        for (k, v) in &f.tv {
            self.scalar("token_tv", "fraction", condition, Some(*k), *v);
        }
        self.scalar("token_tv", "fraction", condition, None, f.tv_overall);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per scalar and per curve point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,name,condition,class,unit,x_axis,x,y\n");
        let class = |c: Option<AgentClass>| c.map_or("all", AgentClass::name);
        for s in &self.scalars {
            let _ = writeln!(out, "scalar,{},{},{},{},,,{}", s.name, s.condition, class(s.class), s.unit, s.value);
        }
        for c in &self.curves {
            for (x, y) in c.x.iter().zip(&c.y) {
                let _ = writeln!(
                    out,
                    "curve,{},{},{},{},{},{x},{y}",
                    c.name,
                    c.condition,
                    class(c.class),
                    c.unit,
                    c.x_axis
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
