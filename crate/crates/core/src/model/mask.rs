//! Which earlier tokens a prediction may see.
//!
//! Positions are flattened timestep-major: position `t * n + i` is agent `i`
//! at timestep `t`. Every relation here is strict (no position sees itself)
//! and transitive, which is what lets the decoder reuse content rows as keys.

use std::rc::Rc;

use ndarray::Array2;

use super::Regime;

/// Boolean S×S grid; `mask[[p, q]]` is true when the prediction at `p` may
/// attend to the token at `q`.
pub type AttentionMask = Array2<bool>;

/// Visibility of token `q` to the prediction at `p` among `n` agents.
///
/// `intra_cap = Some(k)` further limits same-timestep context to agents with
/// order index below `k`, on top of the regime.
pub fn visible(regime: Regime, n: usize, q: usize, p: usize, intra_cap: Option<usize>) -> bool {
    if q >= p {
        return false;
    }
    let (tq, iq) = (q / n, q % n);
    let (tp, ip) = (p / n, p % n);
    let base = match regime {
        Regime::FullIntra => true,
        Regime::NoIntra => tq < tp,
        Regime::Marginal | Regime::MarginalNoMap => iq == ip && tq < tp,
    };
    base && (tq < tp || intra_cap.is_none_or(|k| iq < k.min(ip)))
}

pub fn build_mask(regime: Regime, n: usize, t: usize) -> AttentionMask {
    let s = n * t;
    Array2::from_shape_fn((s, s), |(p, q)| visible(regime, n, q, p, None))
}

/// Self-attention mask of the combined decoder matrix.
///
/// Rows are `[start; S content; S query]`, columns `[start; S content]`.
/// A content row sees the start row, itself and its visible set; a query row
/// sees the start row and its visible set.
pub(crate) fn decoder_mask(regime: Regime, n: usize, t: usize, intra_cap: Option<usize>) -> Rc<Array2<bool>> {
    let s = n * t;
    let mut m = Array2::from_elem((2 * s + 1, s + 1), false);
    m[[0, 0]] = true;
    for p in 0..s {
        let content = 1 + p;
        let query = 1 + s + p;
        m[[content, 0]] = true;
        m[[content, 1 + p]] = true;
        m[[query, 0]] = true;
        for q in 0..p {
            if visible(regime, n, q, p, intra_cap) {
                m[[content, 1 + q]] = true;
                m[[query, 1 + q]] = true;
            }
        }
    }
    Rc::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    const REGIMES: [Regime; 3] = [Regime::FullIntra, Regime::NoIntra, Regime::Marginal];

    #[test]
    fn single_agent_regimes_coincide() {
        for t in 1..6 {
            let full = build_mask(Regime::FullIntra, 1, t);
            assert_eq!(full, build_mask(Regime::NoIntra, 1, t));
            assert_eq!(full, build_mask(Regime::Marginal, 1, t));
        }
    }

    #[test]
    fn same_timestep_predecessor() {
        // position (t=0, agent 1) is flattened index 1
        assert!(build_mask(Regime::FullIntra, 2, 2)[[1, 0]]);
        assert!(!build_mask(Regime::NoIntra, 2, 2)[[1, 0]]);
        assert!(!build_mask(Regime::Marginal, 2, 2)[[1, 0]]);
        // (t=1, agent 0) sees (t=0, agent 1) unless marginal
        assert!(build_mask(Regime::NoIntra, 2, 2)[[2, 1]]);
        assert!(!build_mask(Regime::Marginal, 2, 2)[[2, 1]]);
    }

    #[test]
    fn masks_nest_and_are_causal() {
        for n in 1..=4 {
            for t in 1..=8 {
                let full = build_mask(Regime::FullIntra, n, t);
                let no = build_mask(Regime::NoIntra, n, t);
                let marg = build_mask(Regime::Marginal, n, t);
                for p in 0..n * t {
                    for q in 0..n * t {
                        assert!(!marg[[p, q]] || no[[p, q]]);
                        assert!(!no[[p, q]] || full[[p, q]]);
                        assert_eq!(full[[p, q]], q < p);
                        // independent statement of each regime
                        let (tp, ip, tq, iq) = (p / n, p % n, q / n, q % n);
                        assert_eq!(no[[p, q]], tq < tp);
                        assert_eq!(marg[[p, q]], iq == ip && tq < tp);
                    }
                }
            }
        }
    }

    #[test]
    fn relations_are_transitive() {
        for regime in REGIMES {
            for cap in [None, Some(0), Some(1), Some(2)] {
                let n = 3;
                let s = n * 4;
                for p in 0..s {
                    for q in 0..s {
                        for r in 0..s {
                            if visible(regime, n, q, p, cap) && visible(regime, n, r, q, cap) {
                                assert!(visible(regime, n, r, p, cap), "{regime:?} {cap:?} {r}->{q}->{p}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn intra_cap_bounds_predecessors() {
        let n = 4;
        for k in 0..=n {
            for i in 0..n {
                let p = 2 * n + i;
                let same: usize = (0..n).filter(|&j| visible(Regime::FullIntra, n, 2 * n + j, p, Some(k))).count();
                assert_eq!(same, i.min(k));
                let earlier = (0..2 * n).filter(|&q| visible(Regime::FullIntra, n, q, p, Some(k))).count();
                assert_eq!(earlier, 2 * n);
            }
        }
        assert_eq!(build_mask(Regime::NoIntra, 3, 3), {
            Array2::from_shape_fn((9, 9), |(p, q)| visible(Regime::FullIntra, 3, q, p, Some(0)))
        });
    }
}
