use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::data::{generate_synthetic, split_corpus, SynthConfig};
use crate::geometry::{boxes_overlap, corner_distance};
use crate::model::{eval_examples, ModelConfig, Regime};
use crate::sampling::rng_from_seed;
use crate::tokenizer::{extract_transitions, fit_kdisks, KDisksOptions};

fn track(points: &[(f64, f64)]) -> Vec<AgentState> {
    points.iter().map(|&(x, y)| AgentState::new(x, y, 0.0)).collect()
}

fn car() -> AgentMeta {
    AgentMeta::new(4.0, 2.0, AgentClass::Vehicle).unwrap()
}

#[test]
fn ade_simple_cases() {
    let a = track(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
    assert_eq!(ade(&a, &a).unwrap(), 0.0);
    let b = track(&[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)]);
    assert!((ade(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    let mut c = b.clone();
    c[1] = AgentState::invalid();
    assert!((ade(&a, &c).unwrap() - 1.0).abs() < 1e-12);
    let none = vec![AgentState::invalid(); 3];
    assert!(matches!(ade(&a, &none), Err(Error::Empty(_))));
    assert!(matches!(ade(&a, &a[..2]), Err(Error::Shape(_))));
}

#[test]
fn ade_matches_loop_oracle() {
    let mut rng = rng_from_seed(1);
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let mk = |rng: &mut crate::sampling::SimRng| -> Vec<AgentState> {
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < 0.2 {
                        AgentState::invalid()
                    } else {
                        AgentState::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), 0.0)
                    }
                })
                .collect()
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let mut sum = 0.0;
        let mut k = 0;
        for i in 0..n {
            if a[i].valid && b[i].valid {
                sum += ((a[i].x - b[i].x).powi(2) + (a[i].y - b[i].y).powi(2)).sqrt();
                k += 1;
            }
        }
        match ade(&a, &b) {
            Ok(v) => assert!((v - sum / k as f64).abs() < 1e-9),
            Err(_) => assert_eq!(k, 0),
        }
    }
}

#[test]
fn scene_ade_is_step_weighted() {
    let log = vec![track(&[(0.0, 0.0), (1.0, 0.0)]), track(&[(5.0, 0.0), (6.0, 0.0)])];
    let mut pred = vec![track(&[(0.0, 3.0), (1.0, 3.0)]), track(&[(5.0, 0.0), (6.0, 0.0)])];
    pred[1][1] = AgentState::invalid();
    let s = scene_ade(&pred, &log).unwrap();
    assert_eq!(s.per_agent, vec![Some(3.0), Some(0.0)]);
    assert!((s.mean - 2.0).abs() < 1e-12);
}

#[test]
fn min_scenario_distance_cases() {
    let metas = vec![car(), car()];
    let log = vec![track(&[(0.0, 0.0), (1.0, 0.0)]), track(&[(5.0, 0.0), (6.0, 0.0)])];
    let off = vec![track(&[(0.0, 1.0), (1.0, 1.0)]), track(&[(5.0, 1.0), (6.0, 1.0)])];
    assert!((min_scenario_distance(std::slice::from_ref(&off), &log, &metas).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(min_scenario_distance(&[off.clone(), log.clone()], &log, &metas).unwrap(), 0.0);
    assert!(min_scenario_distance(&[], &log, &metas).is_err());

    // prefix minimum is non-increasing in the number of samples
    let mut rng = rng_from_seed(2);
    let samples: Vec<Vec<Vec<AgentState>>> = (0..20)
        .map(|_| {
            log.iter()
                .map(|t| t.iter().map(|s| AgentState::new(s.x + rng.random_range(-2.0..2.0), s.y, s.h)).collect())
                .collect()
        })
        .collect();
    let mut prev = f64::INFINITY;
    for k in 1..=samples.len() {
        let m = min_scenario_distance(&samples[..k], &log, &metas).unwrap();
        assert!(m <= prev);
        let own = scene_corner_distance(&samples[k - 1], &log, &metas).unwrap();
        assert!((m - prev.min(own)).abs() < 1e-12);
        prev = m;
    }
    let single = scene_corner_distance(&samples[0], &log, &metas).unwrap();
    let mut oracle = 0.0;
    for i in 0..2 {
        for k in 0..2 {
            oracle += corner_distance(&samples[0][i][k], &log[i][k], &metas[i]).unwrap();
        }
    }
    assert!((single - oracle / 4.0).abs() < 1e-12);
}

#[test]
fn collision_simple_cases() {
    let one = collision_rate(&[track(&[(0.0, 0.0), (1.0, 0.0)])], &[car()]).unwrap();
    assert_eq!(one.overall.curve(), vec![0.0, 0.0]);
    assert_eq!(one.overall.any_rate(), 0.0);

    let both = collision_rate(&[track(&[(0.0, 0.0); 3]), track(&[(1.0, 0.5); 3])], &[car(), car()]).unwrap();
    assert_eq!(both.overall.curve(), vec![1.0; 3]);
    assert_eq!(both.overall.any_rate(), 1.0);
    assert_eq!(both.pairs, vec![1; 3]);
    assert_eq!(both.per_class[&AgentClass::Vehicle].any_rate(), 1.0);
}

#[test]
fn collision_matches_pairwise_oracle() {
    let mut rng = rng_from_seed(3);
    let classes = AgentClass::ALL;
    for _ in 0..40 {
        let n = rng.random_range(1..8);
        let steps = rng.random_range(1..6);
        let metas: Vec<AgentMeta> = (0..n)
            .map(|_| AgentMeta::new(rng.random_range(0.5..5.0), rng.random_range(0.5..2.5), classes[rng.random_range(0..3)]).unwrap())
            .collect();
        let states: Vec<Vec<AgentState>> = (0..n)
            .map(|_| {
                (0..steps)
                    .map(|_| {
                        if rng.random::<f64>() < 0.1 {
                            AgentState::invalid()
                        } else {
                            AgentState::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-3.0..3.0))
                        }
                    })
                    .collect()
            })
            .collect();
        let rep = collision_rate(&states, &metas).unwrap();
        let mut ever = vec![false; n];
        for k in 0..steps {
            let mut hit = vec![false; n];
            let mut pairs = 0;
            for i in 0..n {
                for j in 0..n {
                    if i < j && states[i][k].valid && states[j][k].valid && boxes_overlap(&states[i][k], &metas[i], &states[j][k], &metas[j]).unwrap() {
                        hit[i] = true;
                        hit[j] = true;
                        pairs += 1;
                    }
                }
            }
            let valid = (0..n).filter(|&i| states[i][k].valid).count();
            let colliding = (0..n).filter(|&i| hit[i]).count();
            assert_eq!(rep.overall.valid[k], valid);
            assert_eq!(rep.overall.colliding[k], colliding);
            assert_eq!(rep.pairs[k], pairs);
            for i in 0..n {
                ever[i] |= hit[i];
            }
        }
        assert_eq!(rep.overall.ever, ever.iter().filter(|&&e| e).count());
        let class_total: usize = rep.per_class.values().map(|c| c.ever).sum();
        assert_eq!(class_total, rep.overall.ever);
    }
}

#[test]
fn token_frequency_cases() {
    let mut a = TokenCounts::new(4);
    for _ in 0..5 {
        a.add(AgentClass::Vehicle, 2).unwrap();
    }
    let f = sorted_frequencies(&a.per_class[&AgentClass::Vehicle]);
    assert_eq!(f[0], (2, 1.0));
    assert!(f[1..].iter().all(|p| p.1 == 0.0));
    assert!(a.add(AgentClass::Vehicle, 4).is_err());
    let mut b = TokenCounts::new(4);
    b.add(AgentClass::Vehicle, 1).unwrap();
    let rep = token_frequency(&a, &b).unwrap();
    assert_eq!(rep.tv[&AgentClass::Vehicle], 1.0);
    assert_eq!(token_frequency(&a, &a).unwrap().tv_overall, 0.0);
}

#[test]
fn synthetic_splits_have_matching_token_frequencies() {
    let corpus = generate_synthetic(&SynthConfig { n_scenarios: 800, seed: 4, ..SynthConfig::default() });
    let (train, val) = split_corpus(&corpus, 0.5, 1);
    let tr = extract_transitions(&train);
    let ts = fit_kdisks(&tr, &KDisksOptions { n: 64, seed: 1, ..Default::default() }).unwrap();
    let rep = token_frequency(&TokenCounts::from_corpus(&train, &ts).unwrap(), &TokenCounts::from_corpus(&val, &ts).unwrap()).unwrap();
    for curves in rep.train.values().chain(rep.val.values()) {
        assert!((curves.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(curves.windows(2).all(|w| w[0].1 >= w[1].1));
    }
    assert!(rep.tv_overall < 0.05, "tv {}", rep.tv_overall);
}

#[test]
fn nll_sweeps_reference_points() {
    let corpus = generate_synthetic(&SynthConfig { n_scenarios: 4, n_steps: 10, max_agents: 3, seed: 5, ..SynthConfig::default() });
    let ts = fit_kdisks(&extract_transitions(&corpus), &KDisksOptions { n: 10, epsilon: 0.05, restarts: 1, ..Default::default() }).unwrap();
    for regime in [Regime::FullIntra, Regime::Marginal] {
        let cfg = ModelConfig { masking_regime: regime, ..ModelConfig::tiny(ts.len()) };
        let model = Model::new(cfg.clone(), 1).unwrap();
        let ex = eval_examples(&corpus, &ts, &cfg).unwrap();
        let s = nll_sweeps(&model, &ex, &ts, &[2, 100], 2).unwrap();
        // a limit longer than every example is full context
        assert!(s.context[1].delta.abs() < 1e-9);
        if regime == Regime::Marginal {
            let base = s.intra[0].table.overall.nll;
            assert!(s.intra.iter().all(|p| (p.table.overall.nll - base).abs() < 1e-6));
        }
        let mut rep = MetricReport::default();
        rep.add_sweeps(&s, regime.name(), 0.1);
        assert_eq!(rep.get("nll", regime.name(), None), Some(s.full.overall.nll));
        assert!(rep.curves.iter().all(|c| c.x.len() == c.y.len()));
    }
}

#[test]
fn report_serializes() {
    let mut rep = MetricReport::default();
    rep.scalar("ade", "m", "a", None, 1.5);
    let both = collision_rate(&[track(&[(0.0, 0.0); 2]), track(&[(1.0, 0.5); 2])], &[car(), car()]).unwrap();
    rep.add_collisions(&both, "a", 0.1);
    let back: MetricReport = serde_json::from_str(&rep.to_json()).unwrap();
    assert_eq!(back, rep);
    let csv = rep.to_csv();
    assert!(csv.starts_with("kind,name,condition,class,unit,x_axis,x,y\n"));
    assert!(csv.contains("scalar,ade,a,all,m,,,1.5"));
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 8));
}

proptest! {
    #[test]
    fn ade_is_nonnegative_and_zero_on_self(xs in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..20), dx in -5.0f64..5.0) {
        let a = track(&xs);
        prop_assert_eq!(ade(&a, &a).unwrap(), 0.0);
        let b: Vec<AgentState> = a.iter().map(|s| AgentState::new(s.x + dx, s.y, s.h)).collect();
        let v = ade(&a, &b).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert!((v - dx.abs()).abs() < 1e-9);
    }
}
