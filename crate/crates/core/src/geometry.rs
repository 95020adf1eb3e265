//! Planar pose algebra and oriented bounding boxes.
//!
//! Headings are wrapped into `(-π, π]` after every transform. Boxes are
//! described by a centre pose plus an [`AgentMeta`]; their corners are always
//! listed front-left, front-right, rear-right, rear-left so that two boxes can
//! be compared corner by corner.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    // Exact identity inside the range keeps wrapping idempotent.
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Pose of one agent at one timestep.
///
/// Invalid states carry `x = y = h = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub valid: bool,
}

impl AgentState {
    pub fn new(x: f64, y: f64, h: f64) -> Self {
        AgentState {
            x,
            y,
            h: wrap_angle(h),
            valid: true,
        }
    }

    pub const fn invalid() -> Self {
        AgentState {
            x: 0.0,
            y: 0.0,
            h: 0.0,
            valid: false,
        }
    }

    pub fn origin() -> Self {
        AgentState::new(0.0, 0.0, 0.0)
    }

    fn check(&self) -> Result<()> {
        if self.valid {
            Ok(())
        } else {
            Err(Error::InvalidState)
        }
    }

    /// Euclidean distance between the two centres.
    pub fn center_distance(&self, other: &AgentState) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentClass {
    pub const ALL: [AgentClass; 3] = [AgentClass::Vehicle, AgentClass::Pedestrian, AgentClass::Cyclist];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentClass::Vehicle => "vehicle",
            AgentClass::Pedestrian => "pedestrian",
            AgentClass::Cyclist => "cyclist",
        }
    }
}

impl std::fmt::Display for AgentClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Static attributes of an agent. Dimensions are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AgentMeta {
    pub length: f64,
    pub width: f64,
    pub class: AgentClass,
}

impl AgentMeta {
    pub fn new(length: f64, width: f64, class: AgentClass) -> Result<Self> {
        if !(length > 0.0 && width > 0.0 && length.is_finite() && width.is_finite()) {
            return Err(Error::InvalidDimensions { length, width });
        }
        Ok(AgentMeta {
            length,
            width,
            class,
        })
    }

    /// The 1 m × 1 m box used to compare templates with each other.
    pub fn unit_box() -> Self {
        AgentMeta {
            length: 1.0,
            width: 1.0,
            class: AgentClass::Vehicle,
        }
    }
}

impl<'de> Deserialize<'de> for AgentMeta {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            length: f64,
            width: f64,
            class: AgentClass,
        }
        let raw = Raw::deserialize(d)?;
        AgentMeta::new(raw.length, raw.width, raw.class).map_err(serde::de::Error::custom)
    }
}

/// Four box corners ordered front-left, front-right, rear-right, rear-left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCorners(pub [[f64; 2]; 4]);

/// Half-extent offsets in the FL, FR, RR, RL order.
#[inline]
fn corner_offsets(length: f64, width: f64) -> [[f64; 2]; 4] {
    let (hl, hw) = (0.5 * length, 0.5 * width);
    [[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]]
}

#[inline]
pub(crate) fn corners_raw(x: f64, y: f64, h: f64, length: f64, width: f64) -> [[f64; 2]; 4] {
    let (s, c) = h.sin_cos();
    corner_offsets(length, width).map(|[ox, oy]| [x + c * ox - s * oy, y + s * ox + c * oy])
}

pub fn corners(s: &AgentState, m: &AgentMeta) -> Result<BoxCorners> {
    s.check()?;
    Ok(BoxCorners(corners_raw(s.x, s.y, s.h, m.length, m.width)))
}

/// Mean corner distance without validity checks; hot path for tokenization.
#[inline]
pub(crate) fn corner_distance_raw(a: &AgentState, b: &AgentState, length: f64, width: f64) -> f64 {
    let ca = corners_raw(a.x, a.y, a.h, length, width);
    let cb = corners_raw(b.x, b.y, b.h, length, width);
    let mut sum = 0.0;
    for k in 0..4 {
        sum += (ca[k][0] - cb[k][0]).hypot(ca[k][1] - cb[k][1]);
    }
    0.25 * sum
}

/// Mean L2 distance between corresponding corners of two equally sized boxes.
pub fn corner_distance(a: &AgentState, b: &AgentState, m: &AgentMeta) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(corner_distance_raw(a, b, m.length, m.width))
}

#[inline]
pub(crate) fn to_local_raw(frame: &AgentState, s: &AgentState) -> AgentState {
    let (sn, c) = frame.h.sin_cos();
    let (dx, dy) = (s.x - frame.x, s.y - frame.y);
    AgentState {
        x: c * dx + sn * dy,
        y: -sn * dx + c * dy,
        h: wrap_angle(s.h - frame.h),
        valid: s.valid,
    }
}

#[inline]
pub(crate) fn to_global_raw(frame: &AgentState, s: &AgentState) -> AgentState {
    let (sn, c) = frame.h.sin_cos();
    AgentState {
        x: frame.x + c * s.x - sn * s.y,
        y: frame.y + sn * s.x + c * s.y,
        h: wrap_angle(frame.h + s.h),
        valid: s.valid,
    }
}

/// Expresses `s` in the coordinate frame of `frame`.
pub fn to_local(frame: &AgentState, s: &AgentState) -> Result<AgentState> {
    frame.check()?;
    if !s.valid {
        return Ok(AgentState::invalid());
    }
    Ok(to_local_raw(frame, s))
}

/// Inverse of [`to_local`].
pub fn to_global(frame: &AgentState, s_local: &AgentState) -> Result<AgentState> {
    frame.check()?;
    if !s_local.valid {
        return Ok(AgentState::invalid());
    }
    Ok(to_global_raw(frame, s_local))
}

/// Oriented-rectangle overlap by the separating axis test.
///
/// Touching boxes (zero-area contact) do not overlap.
pub fn boxes_overlap(a: &AgentState, ma: &AgentMeta, b: &AgentState, mb: &AgentMeta) -> Result<bool> {
    a.check()?;
    b.check()?;
    Ok(boxes_overlap_raw(a, ma, b, mb))
}

pub(crate) fn boxes_overlap_raw(a: &AgentState, ma: &AgentMeta, b: &AgentState, mb: &AgentMeta) -> bool {
    // Bounding-circle rejection first.
    let ra = 0.5 * ma.length.hypot(ma.width);
    let rb = 0.5 * mb.length.hypot(mb.width);
    if a.center_distance(b) >= ra + rb {
        return false;
    }
    let ca = corners_raw(a.x, a.y, a.h, ma.length, ma.width);
    let cb = corners_raw(b.x, b.y, b.h, mb.length, mb.width);
    let axes = {
        let (sa, ka) = a.h.sin_cos();
        let (sb, kb) = b.h.sin_cos();
        [[ka, sa], [-sa, ka], [kb, sb], [-sb, kb]]
    };
    axes.iter().all(|axis| {
        let (amin, amax) = project(&ca, axis);
        let (bmin, bmax) = project(&cb, axis);
        amax > bmin && bmax > amin
    })
}

/// Per-agent overlap flags for one timestep plus the number of overlapping
/// pairs. Invalid states never collide.
pub fn overlap_flags(states: &[AgentState], metas: &[AgentMeta]) -> (Vec<bool>, usize) {
    let n = states.len().min(metas.len());
    let mut flags = vec![false; n];
    let mut pairs = 0;
    for i in 0..n {
        if !states[i].valid {
            continue;
        }
        for j in i + 1..n {
            if states[j].valid && boxes_overlap_raw(&states[i], &metas[i], &states[j], &metas[j]) {
                flags[i] = true;
                flags[j] = true;
                pairs += 1;
            }
        }
    }
    (flags, pairs)
}

fn project(corners: &[[f64; 2]; 4], axis: &[f64; 2]) -> (f64, f64) {
    corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p[0] * axis[0] + p[1] * axis[1];
        (lo.min(d), hi.max(d))
    })
}

/// Whether the point lies strictly inside the box.
pub fn box_contains(s: &AgentState, m: &AgentMeta, p: [f64; 2]) -> bool {
    let local = to_local_raw(s, &AgentState::new(p[0], p[1], 0.0));
    local.x.abs() < 0.5 * m.length && local.y.abs() < 0.5 * m.width
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn meta(l: f64, w: f64) -> AgentMeta {
        AgentMeta::new(l, w, AgentClass::Vehicle).unwrap()
    }

    fn close(a: [f64; 2], b: [f64; 2]) -> bool {
        (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12
    }

    #[test]
    fn wrap_convention() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
        assert!((wrap_angle(2.0 * PI + 0.25) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn corners_axis_aligned() {
        let c = corners(&AgentState::origin(), &meta(2.0, 1.0)).unwrap().0;
        let expected = [[1.0, 0.5], [1.0, -0.5], [-1.0, -0.5], [-1.0, 0.5]];
        for k in 0..4 {
            assert!(close(c[k], expected[k]), "{k}: {:?}", c[k]);
        }
    }

    #[test]
    fn corners_rotated_half_turn() {
        let c = corners(&AgentState::new(0.0, 0.0, PI), &meta(2.0, 1.0)).unwrap().0;
        let expected = [[-1.0, -0.5], [-1.0, 0.5], [1.0, 0.5], [1.0, -0.5]];
        for k in 0..4 {
            assert!(close(c[k], expected[k]), "{k}: {:?}", c[k]);
        }
    }

    #[test]
    fn corners_match_rotation_matrix_oracle() {
        let (x, y, h) = (1.0, 2.0, PI / 4.0);
        let c = corners(&AgentState::new(x, y, h), &meta(1.0, 1.0)).unwrap().0;
        // Rotation matrix applied to the FL, FR, RR, RL offsets of a unit box.
        let rot = [[h.cos(), -h.sin()], [h.sin(), h.cos()]];
        let offsets = [[0.5, 0.5], [0.5, -0.5], [-0.5, -0.5], [-0.5, 0.5]];
        for k in 0..4 {
            let o = offsets[k];
            let p = [
                x + rot[0][0] * o[0] + rot[0][1] * o[1],
                y + rot[1][0] * o[0] + rot[1][1] * o[1],
            ];
            assert!(close(c[k], p));
        }
        // FL of a unit box at 45 degrees points straight up from the centre.
        assert!(close(c[0], [1.0, 2.0 + 0.5f64.sqrt()]));
    }

    #[test]
    fn invalid_state_rejected() {
        assert!(matches!(corners(&AgentState::invalid(), &meta(1.0, 1.0)), Err(Error::InvalidState)));
        assert!(corner_distance(&AgentState::invalid(), &AgentState::origin(), &meta(1.0, 1.0)).is_err());
        assert!(to_local(&AgentState::invalid(), &AgentState::origin()).is_err());
        assert!(AgentMeta::new(0.0, 1.0, AgentClass::Vehicle).is_err());
        assert!(AgentMeta::new(1.0, -1.0, AgentClass::Cyclist).is_err());
    }

    #[test]
    fn corner_distance_examples() {
        let m = meta(4.5, 1.9);
        let a = AgentState::origin();
        assert_eq!(corner_distance(&a, &a, &m).unwrap(), 0.0);
        let b = AgentState::new(1.0, 0.0, 0.0);
        assert!((corner_distance(&a, &b, &m).unwrap() - 1.0).abs() < 1e-12);
        // Quarter turn of a unit box: every corner moves along a chord of
        // length 2 r sin(θ/2) with r = √0.5, θ = π/2, i.e. exactly 1.
        let q = AgentState::new(0.0, 0.0, FRAC_PI_2);
        let d = corner_distance(&a, &q, &meta(1.0, 1.0)).unwrap();
        let ca = corners(&a, &meta(1.0, 1.0)).unwrap().0;
        let cq = corners(&q, &meta(1.0, 1.0)).unwrap().0;
        let enumerated: f64 = (0..4)
            .map(|k| ((ca[k][0] - cq[k][0]).powi(2) + (ca[k][1] - cq[k][1]).powi(2)).sqrt())
            .sum::<f64>()
            / 4.0;
        assert!((d - 1.0).abs() < 1e-12);
        assert!((d - enumerated).abs() < 1e-15);
    }

    #[test]
    fn local_global_examples() {
        let s = AgentState::new(3.0, -2.0, 0.7);
        let l = to_local(&s, &s).unwrap();
        assert!(l.x.abs() < 1e-12 && l.y.abs() < 1e-12 && l.h.abs() < 1e-12);
        assert_eq!(to_local(&AgentState::origin(), &s).unwrap(), s);

        let frame = AgentState::new(1.0, 1.0, FRAC_PI_2);
        let l = to_local(&frame, &AgentState::new(1.0, 2.0, FRAC_PI_2)).unwrap();
        assert!((l.x - 1.0).abs() < 1e-12 && l.y.abs() < 1e-12 && l.h.abs() < 1e-12);

        let g = to_global(&frame, &AgentState::new(1.0, 0.0, 0.0)).unwrap();
        assert!((g.x - 1.0).abs() < 1e-12 && (g.y - 2.0).abs() < 1e-12 && (g.h - FRAC_PI_2).abs() < 1e-12);
        assert_eq!(to_global(&frame, &AgentState::origin()).unwrap(), frame);
    }

    #[test]
    fn overlap_examples() {
        let m = meta(1.0, 1.0);
        let a = AgentState::origin();
        assert!(boxes_overlap(&a, &m, &a, &m).unwrap());
        assert!(!boxes_overlap(&a, &m, &AgentState::new(10.0, 0.0, 0.0), &m).unwrap());
        // Touching edges only.
        assert!(!boxes_overlap(&a, &m, &AgentState::new(1.0, 0.0, 0.0), &m).unwrap());
        // Rotated box whose corner pokes into the other one.
        let b = AgentState::new(1.2, 0.0, PI / 4.0);
        assert!(boxes_overlap(&a, &m, &b, &m).unwrap());
        // Circles overlap, but the SAT finds a separating axis.
        let c = AgentState::new(1.3, 1.3, PI / 4.0);
        assert!(!boxes_overlap(&a, &m, &c, &m).unwrap());
    }

    fn state() -> impl Strategy<Value = AgentState> {
        (-50.0..50.0f64, -50.0..50.0f64, -4.0..4.0f64).prop_map(|(x, y, h)| AgentState::new(x, y, h))
    }

    proptest! {
        #[test]
        fn local_global_round_trip(frame in state(), s in state()) {
            let back = to_global(&frame, &to_local(&frame, &s).unwrap()).unwrap();
            prop_assert!((back.x - s.x).abs() < 1e-9);
            prop_assert!((back.y - s.y).abs() < 1e-9);
            prop_assert!(wrap_angle(back.h - s.h).abs() < 1e-9);
            prop_assert!(back.h > -PI && back.h <= PI);
        }

        #[test]
        fn corner_distance_is_metric(a in state(), b in state(), c in state(), l in 0.2..6.0f64, w in 0.2..3.0f64) {
            let m = meta(l, w);
            let ab = corner_distance(&a, &b, &m).unwrap();
            let ba = corner_distance(&b, &a, &m).unwrap();
            let bc = corner_distance(&b, &c, &m).unwrap();
            let ac = corner_distance(&a, &c, &m).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn translation_distance_is_exact(a in state(), tx in -5.0..5.0f64, ty in -5.0..5.0f64, l in 0.2..6.0f64, w in 0.2..3.0f64) {
            let b = AgentState::new(a.x + tx, a.y + ty, a.h);
            let d = corner_distance(&a, &b, &meta(l, w)).unwrap();
            prop_assert!((d - tx.hypot(ty)).abs() < 1e-9);
        }
    }
}
