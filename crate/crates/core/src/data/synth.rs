//! Synthetic driving scenes.
//!
//! Each scene has two opposing straight lanes, a left-turn arc, road edges, a
//! crosswalk and a sidewalk, placed under a random rigid transform. Agents
//! are spawned in behaviour groups; the platoon group is the coupled one: a
//! follower copies its leader's same-tick speed choice or, failing that,
//! repeats the leader's previous choice unless that would move the gap out
//! of `[nominal, nominal + (fast - slow) * tick]`.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Agent, MapObject, MapObjectKind, Scenario, DEFAULT_TICK_S};
use crate::geometry::{boxes_overlap_raw, wrap_angle, AgentClass, AgentMeta, AgentState};
use crate::sampling::{stream_rng, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorMix {
    pub lane_follow: f64,
    pub turn: f64,
    pub stop_and_go: f64,
    pub pedestrian_cluster: f64,
    pub platoon: f64,
}

impl Default for BehaviorMix {
    fn default() -> Self {
        BehaviorMix {
            lane_follow: 0.35,
            turn: 0.2,
            stop_and_go: 0.15,
            pedestrian_cluster: 0.2,
            platoon: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassLimits {
    /// m/s
    pub max_speed: f64,
    /// rad/s
    pub max_yaw_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlatoonConfig {
    pub slow_speed: f64,
    pub fast_speed: f64,
    /// Probability that the leader picks the fast speed at a tick.
    pub leader_fast_prob: f64,
    /// Probability that the follower copies the leader's same-tick choice.
    pub copy_prob: f64,
    /// Nominal bumper-to-bumper gap in metres.
    pub clearance: f64,
}

impl Default for PlatoonConfig {
    fn default() -> Self {
        PlatoonConfig {
            slow_speed: 3.0,
            fast_speed: 9.0,
            leader_fast_prob: 0.5,
            copy_prob: 0.15,
            clearance: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_scenarios: usize,
    pub min_agents: usize,
    pub max_agents: usize,
    /// States per agent.
    pub n_steps: usize,
    pub tick: f64,
    pub behaviors: BehaviorMix,
    /// Std of per-step position jitter (m).
    pub position_noise: f64,
    /// Std of per-step heading jitter (rad).
    pub heading_noise: f64,
    /// Per-step probability that an observation is missing (never the first).
    pub dropout_prob: f64,
    pub randomize_frame: bool,
    pub vehicle: ClassLimits,
    pub pedestrian: ClassLimits,
    pub cyclist: ClassLimits,
    pub platoon: PlatoonConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_scenarios: 64,
            min_agents: 4,
            max_agents: 8,
            n_steps: 41,
            tick: DEFAULT_TICK_S,
            behaviors: BehaviorMix::default(),
            position_noise: 0.02,
            heading_noise: 0.01,
            dropout_prob: 0.0,
            randomize_frame: true,
            vehicle: ClassLimits {
                max_speed: 15.0,
                max_yaw_rate: 0.8,
            },
            pedestrian: ClassLimits {
                max_speed: 2.5,
                max_yaw_rate: 1.5,
            },
            cyclist: ClassLimits {
                max_speed: 7.0,
                max_yaw_rate: 1.0,
            },
            platoon: PlatoonConfig::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Two-agent leader/follower scenes with exact kinematics.
    pub fn coupled(n_scenarios: usize, n_steps: usize, seed: u64) -> Self {
        SynthConfig {
            n_scenarios,
            min_agents: 2,
            max_agents: 2,
            n_steps,
            behaviors: BehaviorMix {
                lane_follow: 0.0,
                turn: 0.0,
                stop_and_go: 0.0,
                pedestrian_cluster: 0.0,
                platoon: 1.0,
            },
            position_noise: 0.0,
            heading_noise: 0.0,
            seed,
            ..SynthConfig::default()
        }
    }

    pub fn limits(&self, class: AgentClass) -> ClassLimits {
        match class {
            AgentClass::Vehicle => self.vehicle,
            AgentClass::Pedestrian => self.pedestrian,
            AgentClass::Cyclist => self.cyclist,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Behavior {
    LaneFollow,
    Turn,
    StopAndGo,
    PedestrianCluster,
    Platoon,
}

const LANE_HALF_LENGTH: f64 = 100.0;
const LANE_SEPARATION: f64 = 3.5;
const CROSSWALK_X: f64 = 20.0;
const SIDEWALK_Y: f64 = 8.0;

/// Scene layout in the local (untransformed) frame.
struct Layout {
    arc_radius: f64,
}

impl Layout {
    fn arc_center(&self) -> [f64; 2] {
        [-10.0, self.arc_radius]
    }

    fn map(&self) -> Vec<MapObject> {
        let line = |y: f64, reverse: bool| {
            let mut pts: Vec<[f64; 2]> = (0..=40).map(|k| [-LANE_HALF_LENGTH + 5.0 * k as f64, y]).collect();
            if reverse {
                pts.reverse();
            }
            pts
        };
        let c = self.arc_center();
        let arc = (0..=18)
            .map(|k| {
                let phi = FRAC_PI_2 * k as f64 / 18.0;
                [c[0] + self.arc_radius * phi.sin(), c[1] - self.arc_radius * phi.cos()]
            })
            .collect();
        vec![
            MapObject { kind: MapObjectKind::Lane, points: line(0.0, false) },
            MapObject { kind: MapObjectKind::Lane, points: line(LANE_SEPARATION, true) },
            MapObject { kind: MapObjectKind::Lane, points: arc },
            MapObject { kind: MapObjectKind::RoadEdge, points: line(-0.5 * LANE_SEPARATION, false) },
            MapObject { kind: MapObjectKind::RoadEdge, points: line(1.5 * LANE_SEPARATION, false) },
            MapObject {
                kind: MapObjectKind::Crosswalk,
                points: vec![[CROSSWALK_X, -3.0], [CROSSWALK_X, SIDEWALK_Y]],
            },
            MapObject { kind: MapObjectKind::Sidewalk, points: line(SIDEWALK_Y, false) },
        ]
    }
}

struct Track {
    meta: AgentMeta,
    states: Vec<AgentState>,
}

fn sample_meta(rng: &mut SimRng, class: AgentClass) -> AgentMeta {
    let (l, w) = match class {
        AgentClass::Vehicle => (rng.random_range(4.0..5.2), rng.random_range(1.8..2.1)),
        AgentClass::Pedestrian => {
            let s = rng.random_range(0.5..0.9);
            (s, s)
        }
        AgentClass::Cyclist => (rng.random_range(1.7..2.0), rng.random_range(0.6..0.8)),
    };
    AgentMeta::new(l, w, class).expect("positive dimensions")
}

/// Straight-lane motion with a per-step speed profile.
fn along_lane(lane: usize, s0: f64, speeds: impl Iterator<Item = f64>, tick: f64) -> Vec<AgentState> {
    let (y, dir) = if lane == 0 { (0.0, 1.0) } else { (LANE_SEPARATION, -1.0) };
    let h = if lane == 0 { 0.0 } else { PI };
    let mut s = s0;
    let mut out = Vec::new();
    for v in speeds {
        out.push(AgentState::new(dir * (s - LANE_HALF_LENGTH * 0.5), y, h));
        s += v * tick;
    }
    out
}

impl SynthConfig {
    fn pick_behavior(&self, rng: &mut SimRng) -> Behavior {
        let b = &self.behaviors;
        let weights = [b.lane_follow, b.turn, b.stop_and_go, b.pedestrian_cluster, b.platoon];
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let all = [
            Behavior::LaneFollow,
            Behavior::Turn,
            Behavior::StopAndGo,
            Behavior::PedestrianCluster,
            Behavior::Platoon,
        ];
        for (w, beh) in weights.iter().zip(all) {
            if u < *w {
                return beh;
            }
            u -= w;
        }
        Behavior::LaneFollow
    }

    fn spawn(&self, rng: &mut SimRng, layout: &Layout, beh: Behavior) -> Vec<Track> {
        let n = self.n_steps;
        let tick = self.tick;
        match beh {
            Behavior::LaneFollow => {
                let class = if rng.random::<f64>() < 0.8 { AgentClass::Vehicle } else { AgentClass::Cyclist };
                let lim = self.limits(class);
                let v = rng.random_range(0.3 * lim.max_speed..lim.max_speed);
                let lane = rng.random_range(0..2);
                let s0 = rng.random_range(0.0..40.0);
                vec![Track {
                    meta: sample_meta(rng, class),
                    states: along_lane(lane, s0, std::iter::repeat_n(v, n), tick),
                }]
            }
            Behavior::StopAndGo => {
                let lim = self.vehicle;
                let vmax = rng.random_range(0.4 * lim.max_speed..lim.max_speed);
                let period = rng.random_range(2.0..5.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let lane = rng.random_range(0..2);
                let s0 = rng.random_range(0.0..40.0);
                let speeds = (0..n).map(move |k| vmax * (0.5 - 0.5 * (2.0 * PI * k as f64 * tick / period + phase).cos()));
                vec![Track {
                    meta: sample_meta(rng, AgentClass::Vehicle),
                    states: along_lane(lane, s0, speeds, tick),
                }]
            }
            Behavior::Turn => {
                let class = if rng.random::<f64>() < 0.85 { AgentClass::Vehicle } else { AgentClass::Cyclist };
                let lim = self.limits(class);
                let r = layout.arc_radius;
                let vcap = lim.max_speed.min(0.95 * lim.max_yaw_rate * r);
                let v = rng.random_range(0.4 * vcap..vcap);
                let omega = v / r;
                let phi0 = rng.random_range(-0.3..0.6);
                let c = layout.arc_center();
                // Negative angles run along the approach straight.
                let states = (0..n)
                    .map(|k| {
                        let phi = phi0 + omega * k as f64 * tick;
                        if phi < 0.0 {
                            AgentState::new(c[0] + r * phi, 0.0, 0.0)
                        } else {
                            AgentState::new(c[0] + r * phi.sin(), c[1] - r * phi.cos(), phi)
                        }
                    })
                    .collect();
                vec![Track {
                    meta: sample_meta(rng, class),
                    states,
                }]
            }
            Behavior::PedestrianCluster => {
                let lim = self.pedestrian;
                let members = rng.random_range(2..=4);
                let start = if rng.random::<bool>() {
                    [CROSSWALK_X + rng.random_range(-1.0..1.0), rng.random_range(-3.0..SIDEWALK_Y)]
                } else {
                    [rng.random_range(-40.0..40.0), SIDEWALK_Y + rng.random_range(-0.5..0.5)]
                };
                let mut heading = rng.random_range(-PI..PI);
                let speed = rng.random_range(0.8..1.6f64).min(lim.max_speed);
                let turn = Normal::new(0.0, 0.6 * lim.max_yaw_rate).unwrap();
                let mut centre = start;
                let mut path = Vec::with_capacity(n);
                for _ in 0..n {
                    path.push((centre, heading));
                    let dh = (turn.sample(rng) * tick).clamp(-0.9 * lim.max_yaw_rate * tick, 0.9 * lim.max_yaw_rate * tick);
                    heading = wrap_angle(heading + dh);
                    centre = [centre[0] + speed * tick * heading.cos(), centre[1] + speed * tick * heading.sin()];
                }
                (0..members)
                    .map(|m| {
                        let lateral = 0.8 * (m as f64 - 0.5 * (members - 1) as f64);
                        let back = rng.random_range(-0.3..0.3);
                        let states = path
                            .iter()
                            .map(|&(c, h)| {
                                let (s, k) = h.sin_cos();
                                AgentState::new(c[0] - s * lateral + k * back, c[1] + k * lateral + s * back, h)
                            })
                            .collect();
                        Track {
                            meta: sample_meta(rng, AgentClass::Pedestrian),
                            states,
                        }
                    })
                    .collect()
            }
            Behavior::Platoon => {
                let p = self.platoon;
                let lead_meta = sample_meta(rng, AgentClass::Vehicle);
                let foll_meta = sample_meta(rng, AgentClass::Vehicle);
                let nominal = 0.5 * (lead_meta.length + foll_meta.length) + p.clearance;
                let lane = rng.random_range(0..2);
                let s_lead0 = rng.random_range(10.0..40.0);
                let (mut s_lead, mut s_foll) = (s_lead0, s_lead0 - nominal);
                let (mut lead, mut foll) = (Vec::with_capacity(n), Vec::with_capacity(n));
                let widest = nominal + (p.fast_speed - p.slow_speed) * tick + 1e-6;
                let mut lead_prev = rng.random::<f64>() < p.leader_fast_prob;
                let (y, dir, h) = if lane == 0 { (0.0, 1.0, 0.0) } else { (LANE_SEPARATION, -1.0, PI) };
                let at = |s: f64| AgentState::new(dir * (s - LANE_HALF_LENGTH * 0.5), y, h);
                for _ in 0..n {
                    lead.push(at(s_lead));
                    foll.push(at(s_foll));
                    let lead_fast = rng.random::<f64>() < p.leader_fast_prob;
                    let speed = |fast: bool| if fast { p.fast_speed } else { p.slow_speed };
                    let gap_after = |foll_fast: bool| s_lead - s_foll + (speed(lead_fast) - speed(foll_fast)) * tick;
                    let foll_fast = if rng.random::<f64>() < p.copy_prob {
                        lead_fast
                    } else {
                        let g = gap_after(lead_prev);
                        if g < nominal - 1e-6 || g > widest {
                            lead_fast
                        } else {
                            lead_prev
                        }
                    };
                    lead_prev = lead_fast;
                    s_lead += speed(lead_fast) * tick;
                    s_foll += speed(foll_fast) * tick;
                }
                vec![
                    Track { meta: lead_meta, states: lead },
                    Track { meta: foll_meta, states: foll },
                ]
            }
        }
    }

    fn perturb(&self, rng: &mut SimRng, track: &mut Track) {
        let lim = self.limits(track.meta.class);
        if self.position_noise > 0.0 || self.heading_noise > 0.0 {
            let pn = Normal::new(0.0, self.position_noise.max(1e-300)).unwrap();
            let hn = Normal::new(0.0, self.heading_noise.max(1e-300)).unwrap();
            for s in &mut track.states {
                *s = AgentState::new(s.x + pn.sample(rng), s.y + pn.sample(rng), s.h + hn.sample(rng));
            }
        }
        // Enforce the per-class kinematic bounds step by step.
        let max_step = lim.max_speed * self.tick;
        let max_turn = lim.max_yaw_rate * self.tick;
        for k in 1..track.states.len() {
            let prev = track.states[k - 1];
            let cur = track.states[k];
            let (dx, dy) = (cur.x - prev.x, cur.y - prev.y);
            let d = dx.hypot(dy);
            let scale = if d > max_step { max_step / d } else { 1.0 };
            let dh = wrap_angle(cur.h - prev.h).clamp(-max_turn, max_turn);
            track.states[k] = AgentState::new(prev.x + dx * scale, prev.y + dy * scale, prev.h + dh);
        }
    }

    fn scenario(&self, index: usize) -> Scenario {
        let mut rng = stream_rng(self.seed, index as u64);
        let layout = Layout {
            arc_radius: rng.random_range(12.0..25.0),
        };
        let target = rng.random_range(self.min_agents.max(1)..=self.max_agents.max(self.min_agents).max(1));
        let mut tracks: Vec<Track> = Vec::new();
        let mut attempts = 0;
        while tracks.len() < target && attempts < 50 {
            attempts += 1;
            let mut beh = self.pick_behavior(&mut rng);
            if tracks.is_empty() && matches!(beh, Behavior::PedestrianCluster) && self.has_vehicle_behavior() {
                beh = Behavior::LaneFollow;
            }
            let group = self.spawn(&mut rng, &layout, beh);
            if tracks.len() + group.len() > target && !tracks.is_empty() {
                continue;
            }
            let clashes = group.iter().any(|g| {
                tracks.iter().any(|t| boxes_overlap_raw(&g.states[0], &g.meta, &t.states[0], &t.meta))
            });
            if clashes {
                continue;
            }
            tracks.extend(group);
        }
        for t in &mut tracks {
            self.perturb(&mut rng, t);
        }
        if self.dropout_prob > 0.0 {
            for t in &mut tracks {
                for s in t.states.iter_mut().skip(1) {
                    if rng.random::<f64>() < self.dropout_prob {
                        *s = AgentState::invalid();
                    }
                }
            }
        }
        if self.randomize_frame {
            let rot = rng.random_range(-PI..PI);
            let (sr, cr) = rot.sin_cos();
            let (tx, ty) = (rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let xf = |p: [f64; 2]| [tx + cr * p[0] - sr * p[1], ty + sr * p[0] + cr * p[1]];
            let mut map = layout.map();
            for m in &mut map {
                m.points.iter_mut().for_each(|p| *p = xf(*p));
            }
            for t in &mut tracks {
                for s in t.states.iter_mut().filter(|s| s.valid) {
                    let [x, y] = xf([s.x, s.y]);
                    *s = AgentState::new(x, y, s.h + rot);
                }
            }
            return self.finish(index, map, tracks);
        }
        self.finish(index, layout.map(), tracks)
    }

    fn has_vehicle_behavior(&self) -> bool {
        let b = &self.behaviors;
        b.lane_follow + b.turn + b.stop_and_go + b.platoon > 0.0
    }

    fn finish(&self, index: usize, map: Vec<MapObject>, tracks: Vec<Track>) -> Scenario {
        let sdc = tracks
            .iter()
            .position(|t| t.meta.class == AgentClass::Vehicle)
            .unwrap_or(0);
        Scenario {
            id: format!("synth-{}-{index:06}", self.seed),
            tick: self.tick,
            map,
            agents: tracks
                .into_iter()
                .enumerate()
                .map(|(i, t)| Agent {
                    id: i as u64,
                    meta: t.meta,
                    sdc: i == sdc,
                    states: t.states,
                })
                .collect(),
        }
    }
}

/// Generates `cfg.n_scenarios` scenes; identical config and seed give an
/// identical corpus.
pub fn generate_synthetic(cfg: &SynthConfig) -> Vec<Scenario> {
    (0..cfg.n_scenarios).into_par_iter().map(|i| cfg.scenario(i)).collect()
}
