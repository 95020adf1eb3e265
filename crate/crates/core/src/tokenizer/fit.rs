//! Vocabulary fitting: k-disks, k-means and two grid baselines.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Method, Template, TemplateSet, Transition};
use crate::error::{Error, Result};
use crate::geometry::{corners_raw, AgentClass};
use crate::sampling::stream_rng;

pub const GRID_X_RANGE: (f64, f64) = (-0.3, 3.5);
pub const GRID_Y_RANGE: (f64, f64) = (-0.2, 0.2);
pub const GRID_H_RANGE: (f64, f64) = (-0.1, 0.1);

/// Separation radius used for a given vocabulary size.
pub fn kdisks_default_epsilon(n: usize) -> f64 {
    if n > 384 {
        0.030
    } else {
        0.035
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KDisksOptions {
    pub n: usize,
    pub epsilon: f64,
    pub restarts: usize,
    /// Transitions drawn to score restarts against each other.
    pub score_slice: usize,
    pub seed: u64,
}

impl Default for KDisksOptions {
    fn default() -> Self {
        KDisksOptions {
            n: 384,
            epsilon: 0.035,
            restarts: 16,
            score_slice: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansOptions {
    pub n: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub score_slice: usize,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            n: 384,
            restarts: 4,
            max_iter: 30,
            score_slice: 10_000,
            seed: 0,
        }
    }
}

fn classes_of(transitions: &[Transition]) -> Vec<AgentClass> {
    let mut c: Vec<AgentClass> = transitions.iter().map(|t| t.class).collect::<HashSet<_>>().into_iter().collect();
    c.sort();
    c
}

/// Seeded scoring subset, shared by every restart. Stream 0 of the seed.
fn score_subset(transitions: &[Transition], size: usize, seed: u64) -> Vec<Transition> {
    let mut rng = stream_rng(seed, 0);
    if size >= transitions.len() {
        return transitions.to_vec();
    }
    let mut idx = sample(&mut rng, transitions.len(), size).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| transitions[i]).collect()
}

/// Picks the lowest-error candidate; earlier candidates win ties.
fn select(candidates: Vec<TemplateSet>, slice: &[Transition]) -> TemplateSet {
    let scored: Vec<(f64, TemplateSet)> = candidates
        .into_iter()
        .map(|ts| (ts.expected_error(slice).expected_error, ts))
        .collect();
    let mut best = 0;
    for (i, (e, _)) in scored.iter().enumerate() {
        if *e < scored[best].0 {
            best = i;
        }
    }
    scored.into_iter().nth(best).expect("non-empty").1
}

#[inline]
fn unit_corner_distance(a: &[f64; 8], b: &[f64; 8]) -> f64 {
    let mut s = 0.0;
    for k in 0..4 {
        let (dx, dy) = (a[2 * k] - b[2 * k], a[2 * k + 1] - b[2 * k + 1]);
        s += (dx * dx + dy * dy).sqrt();
    }
    0.25 * s
}

/// Greedy disk sampling over the transition pool.
///
/// Each restart draws a template uniformly from the surviving pool and
/// removes every transition within `epsilon` (unit-box corner distance);
/// restart `r` uses stream `r + 1` of the seed, so more restarts only add
/// candidates.
pub fn fit_kdisks(transitions: &[Transition], opts: &KDisksOptions) -> Result<TemplateSet> {
    if transitions.is_empty() {
        return Err(Error::Empty("no transitions to fit a vocabulary on".into()));
    }
    if opts.n == 0 || opts.restarts == 0 || !(opts.epsilon >= 0.0) {
        return Err(Error::InvalidArgument("k-disks needs n >= 1, restarts >= 1 and epsilon >= 0".into()));
    }
    let corners: Vec<[f64; 8]> = transitions
        .iter()
        .map(|t| {
            let c = corners_raw(t.delta.dx, t.delta.dy, t.delta.dh, 1.0, 1.0);
            [c[0][0], c[0][1], c[1][0], c[1][1], c[2][0], c[2][1], c[3][0], c[3][1]]
        })
        .collect();
    let runs: Vec<std::result::Result<Vec<usize>, usize>> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(opts.seed, r as u64 + 1);
            let mut pool: Vec<u32> = (0..transitions.len() as u32).collect();
            let mut picks = Vec::with_capacity(opts.n);
            while picks.len() < opts.n {
                if pool.is_empty() {
                    return Err(picks.len());
                }
                let j = pool[rng.random_range(0..pool.len())] as usize;
                picks.push(j);
                let cj = &corners[j];
                pool.retain(|&x| unit_corner_distance(cj, &corners[x as usize]) > opts.epsilon);
            }
            Ok(picks)
        })
        .collect();
    let mut candidates = Vec::new();
    let mut most_found = 0;
    for run in runs {
        match run {
            Ok(picks) => {
                let templates = picks.iter().map(|&j| transitions[j].delta).collect();
                candidates.push(TemplateSet::new(templates, Method::Kdisks)?);
            }
            Err(found) => most_found = most_found.max(found),
        }
    }
    if candidates.is_empty() {
        return Err(Error::InsufficientDiversity {
            found: most_found,
            requested: opts.n,
            epsilon: opts.epsilon,
        });
    }
    let slice = score_subset(transitions, opts.score_slice, opts.seed);
    let mut ts = select(candidates, &slice);
    ts.epsilon = Some(opts.epsilon);
    ts.seed = Some(opts.seed);
    ts.fit_stats = ts.expected_error(transitions);
    ts.classes = classes_of(transitions);
    Ok(ts)
}

fn sq(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest_center(p: [f64; 2], centers: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq(p, *c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means on `(dx, dy)` with k-means++ seeding. Heading per cluster is the
/// circular mean of its members.
pub fn fit_kmeans(transitions: &[Transition], opts: &KMeansOptions) -> Result<TemplateSet> {
    let points: Vec<[f64; 2]> = transitions.iter().map(|t| [t.delta.dx, t.delta.dy]).collect();
    let distinct = points
        .iter()
        .map(|p| (p[0].to_bits(), p[1].to_bits()))
        .collect::<HashSet<_>>()
        .len();
    if opts.n == 0 || opts.n > distinct {
        return Err(Error::InvalidArgument(format!(
            "k-means with n = {} needs at least that many distinct (dx, dy) points, found {distinct}",
            opts.n
        )));
    }
    let k = opts.n;
    let candidates: Vec<TemplateSet> = (0..opts.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(opts.seed, r as u64 + 1);
            // k-means++ seeding.
            let mut centers = vec![points[rng.random_range(0..points.len())]];
            let mut d2: Vec<f64> = points.iter().map(|p| sq(*p, centers[0])).collect();
            while centers.len() < k {
                let total: f64 = d2.iter().sum();
                let next = if total > 0.0 {
                    let u = rng.random::<f64>() * total;
                    let mut acc = 0.0;
                    let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
                    for (i, &d) in d2.iter().enumerate() {
                        acc += d;
                        if u < acc && d > 0.0 {
                            pick = i;
                            break;
                        }
                    }
                    pick
                } else {
                    rng.random_range(0..points.len())
                };
                let c = points[next];
                centers.push(c);
                for (p, d) in points.iter().zip(d2.iter_mut()) {
                    *d = d.min(sq(*p, c));
                }
            }
            // Lloyd iterations.
            let mut assign = vec![usize::MAX; points.len()];
            for _ in 0..opts.max_iter {
                let next: Vec<(usize, f64)> = points.par_iter().map(|p| nearest_center(*p, &centers)).collect();
                let changed = next.iter().zip(&assign).any(|(n, a)| n.0 != *a);
                for (a, n) in assign.iter_mut().zip(&next) {
                    *a = n.0;
                }
                let mut sums = vec![[0.0f64; 3]; k];
                for (p, &a) in points.iter().zip(&assign) {
                    sums[a][0] += p[0];
                    sums[a][1] += p[1];
                    sums[a][2] += 1.0;
                }
                let mut taken = HashSet::new();
                for c in 0..k {
                    if sums[c][2] > 0.0 {
                        centers[c] = [sums[c][0] / sums[c][2], sums[c][1] / sums[c][2]];
                    } else {
                        // Re-seed an empty cluster at the worst-served point.
                        let far = next
                            .iter()
                            .enumerate()
                            .filter(|(i, _)| !taken.contains(i))
                            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                            .map(|(i, _)| i)
                            .unwrap_or(0);
                        taken.insert(far);
                        centers[c] = points[far];
                    }
                }
                if !changed {
                    break;
                }
            }
            let assign: Vec<usize> = points.par_iter().map(|p| nearest_center(*p, &centers).0).collect();
            let mut trig = vec![[0.0f64; 2]; k];
            for (t, &a) in transitions.iter().zip(&assign) {
                trig[a][0] += t.delta.dh.cos();
                trig[a][1] += t.delta.dh.sin();
            }
            let templates = centers
                .iter()
                .zip(&trig)
                .map(|(c, tr)| {
                    let dh = if tr[0] == 0.0 && tr[1] == 0.0 { 0.0 } else { tr[1].atan2(tr[0]) };
                    Template::new(c[0], c[1], dh)
                })
                .collect();
            TemplateSet::new(templates, Method::Kmeans).expect("k >= 1")
        })
        .collect();
    let slice = score_subset(transitions, opts.score_slice, opts.seed);
    let mut ts = select(candidates, &slice);
    ts.seed = Some(opts.seed);
    ts.fit_stats = ts.expected_error(transitions);
    ts.classes = classes_of(transitions);
    Ok(ts)
}

/// `n` evenly spaced values with both endpoints included.
pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect()
}

/// Product grid over `(dx, dy, dh)`, ordered x-major then y then h.
pub fn fit_grid_xyh(n_x: usize, n_y: usize, n_h: usize) -> Result<TemplateSet> {
    if n_x < 2 || n_y < 2 || n_h < 2 {
        return Err(Error::InvalidArgument("grid axes need at least 2 values each".into()));
    }
    let xs = linspace(GRID_X_RANGE.0, GRID_X_RANGE.1, n_x);
    let ys = linspace(GRID_Y_RANGE.0, GRID_Y_RANGE.1, n_y);
    let hs = linspace(GRID_H_RANGE.0, GRID_H_RANGE.1, n_h);
    let mut templates = Vec::with_capacity(n_x * n_y * n_h);
    for &x in &xs {
        for &y in &ys {
            for &h in &hs {
                templates.push(Template::new(x, y, h));
            }
        }
    }
    TemplateSet::new(templates, Method::GridXyh)
}

/// Grid over `(dx, dy)`; each template takes the heading change of the data
/// transition nearest its grid point (lowest index on ties).
pub fn fit_grid_xy(n_x: usize, n_y: usize, transitions: &[Transition]) -> Result<TemplateSet> {
    if transitions.is_empty() {
        return Err(Error::Empty("grid_xy needs transitions to borrow headings from".into()));
    }
    if n_x < 2 || n_y < 2 {
        return Err(Error::InvalidArgument("grid axes need at least 2 values each".into()));
    }
    let xs = linspace(GRID_X_RANGE.0, GRID_X_RANGE.1, n_x);
    let ys = linspace(GRID_Y_RANGE.0, GRID_Y_RANGE.1, n_y);
    let grid: Vec<[f64; 2]> = xs.iter().flat_map(|&x| ys.iter().map(move |&y| [x, y])).collect();
    let templates = grid
        .par_iter()
        .map(|&g| {
            let mut best = (0, f64::INFINITY);
            for (i, t) in transitions.iter().enumerate() {
                let d = sq(g, [t.delta.dx, t.delta.dy]);
                if d < best.1 {
                    best = (i, d);
                }
            }
            Template::new(g[0], g[1], transitions[best.0].delta.dh)
        })
        .collect();
    let mut ts = TemplateSet::new(templates, Method::GridXy)?;
    ts.classes = classes_of(transitions);
    Ok(ts)
}

/// Axis counts for the nominal (x, y, h) grid sizes 128/256/384/512.
pub fn grid_xyh_preset(nominal: usize) -> Result<(usize, usize, usize)> {
    match nominal {
        128 => Ok((6, 6, 4)),
        256 => Ok((7, 7, 6)),
        384 => Ok((8, 8, 7)),
        512 => Ok((9, 9, 8)),
        _ => Err(Error::InvalidArgument(format!("no grid_xyh preset for size {nominal} (use 128, 256, 384 or 512)"))),
    }
}

/// Per-axis count for the nominal (x, y) grid sizes 128/256/384/512.
pub fn grid_xy_preset(nominal: usize) -> Result<usize> {
    match nominal {
        128 => Ok(12),
        256 => Ok(16),
        384 => Ok(20),
        512 => Ok(23),
        _ => Err(Error::InvalidArgument(format!("no grid_xy preset for size {nominal} (use 128, 256, 384 or 512)"))),
    }
}
