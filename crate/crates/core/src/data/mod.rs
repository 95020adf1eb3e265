//! Scenario representation, on-disk formats, synthetic corpora and token
//! accounting.

mod census;
mod format;
mod synth;

pub use census::{token_census, tokens_per_hour, TokenCensus, MOVING_THRESHOLD_M};
pub use format::{
    read_scenarios, read_scenarios_packed, read_scenarios_packed_from, read_scenarios_from_str,
    write_scenarios, write_scenarios_packed, write_scenarios_packed_to, write_scenarios_to_string,
    FORMAT_VERSION,
};
pub use synth::{generate_synthetic, BehaviorMix, ClassLimits, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AgentMeta, AgentState};
use crate::sampling::{rng_from_seed, SimRng};

/// WOMD records at 10 Hz.
pub const DEFAULT_TICK_S: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapObjectKind {
    Lane,
    RoadEdge,
    Crosswalk,
    Sidewalk,
}

impl MapObjectKind {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A typed polyline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapObject {
    pub kind: MapObjectKind,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: u64,
    pub meta: AgentMeta,
    pub sdc: bool,
    pub states: Vec<AgentState>,
}

impl Agent {
    pub fn valid_steps(&self) -> usize {
        self.states.iter().filter(|s| s.valid).count()
    }
}

/// A driving scene: map, agents and an N×T grid of states.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub tick: f64,
    pub map: Vec<MapObject>,
    pub agents: Vec<Agent>,
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn n_steps(&self) -> usize {
        self.agents.first().map_or(0, |a| a.states.len())
    }

    pub fn sdc_index(&self) -> Option<usize> {
        self.agents.iter().position(|a| a.sdc)
    }

    pub fn metas(&self) -> Vec<AgentMeta> {
        self.agents.iter().map(|a| a.meta).collect()
    }

    /// States at one timestep, one entry per agent.
    pub fn states_at(&self, t: usize) -> Vec<AgentState> {
        self.agents.iter().map(|a| a.states[t]).collect()
    }

    /// Checks the rectangular grid and the single SDC flag.
    pub fn validate(&self) -> Result<()> {
        let t = self.n_steps();
        if let Some(a) = self.agents.iter().find(|a| a.states.len() != t) {
            return Err(Error::Shape(format!(
                "scenario {}: agent {} has {} states, expected {t}",
                self.id,
                a.id,
                a.states.len()
            )));
        }
        let sdc = self.agents.iter().filter(|a| a.sdc).count();
        if !self.agents.is_empty() && sdc != 1 {
            return Err(Error::InvalidArgument(format!(
                "scenario {}: expected exactly one sdc agent, found {sdc}",
                self.id
            )));
        }
        if !(self.tick > 0.0) {
            return Err(Error::InvalidArgument(format!("scenario {}: tick must be > 0", self.id)));
        }
        Ok(())
    }
}

/// Disjoint train/validation split by scenario id.
pub fn split_corpus(corpus: &[Scenario], val_fraction: f64, seed: u64) -> (Vec<Scenario>, Vec<Scenario>) {
    use rand::seq::SliceRandom;
    let mut ids: Vec<&str> = corpus.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rng: SimRng = rng_from_seed(seed);
    ids.shuffle(&mut rng);
    let n_val = ((ids.len() as f64) * val_fraction).round() as usize;
    let val_ids: std::collections::HashSet<&str> = ids[..n_val.min(ids.len())].iter().copied().collect();
    let (val, train): (Vec<&Scenario>, Vec<&Scenario>) = corpus.iter().partition(|s| val_ids.contains(s.id.as_str()));
    (train.into_iter().cloned().collect(), val.into_iter().cloned().collect())
}
