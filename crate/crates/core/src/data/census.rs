//! Token accounting over a corpus.

use serde::{Deserialize, Serialize};

use super::Scenario;

/// An agent is moving when its first and last valid centres differ by more
/// than this (metres).
pub const MOVING_THRESHOLD_M: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenCensus {
    pub scenarios: usize,
    pub agents: usize,
    pub moving_agents: usize,
    /// One token per consecutive valid state pair.
    pub tokens: u64,
    pub moving_tokens: u64,
    /// Sum over scenarios of (steps − 1) · tick.
    pub duration_s: f64,
    pub tokens_per_hour: f64,
    pub moving_tokens_per_hour: f64,
}

pub fn tokens_per_hour(tokens: f64, duration_s: f64) -> f64 {
    if duration_s <= 0.0 {
        0.0
    } else {
        tokens / (duration_s / 3600.0)
    }
}

pub fn token_census(corpus: &[Scenario]) -> TokenCensus {
    let mut c = TokenCensus {
        scenarios: corpus.len(),
        ..TokenCensus::default()
    };
    for s in corpus {
        c.duration_s += s.n_steps().saturating_sub(1) as f64 * s.tick;
        for a in &s.agents {
            c.agents += 1;
            let tokens = a.states.windows(2).filter(|w| w[0].valid && w[1].valid).count() as u64;
            c.tokens += tokens;
            let mut valid = a.states.iter().filter(|s| s.valid);
            let moving = match (valid.next(), a.states.iter().rev().find(|s| s.valid)) {
                (Some(first), Some(last)) => first.center_distance(last) > MOVING_THRESHOLD_M,
                _ => false,
            };
            if moving {
                c.moving_agents += 1;
                c.moving_tokens += tokens;
            }
        }
    }
    c.tokens_per_hour = tokens_per_hour(c.tokens as f64, c.duration_s);
    c.moving_tokens_per_hour = tokens_per_hour(c.moving_tokens as f64, c.duration_s);
    c
}
