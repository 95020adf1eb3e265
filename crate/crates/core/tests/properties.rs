//! Cross-module invariants over random inputs.

use proptest::prelude::*;
use trajeglish_core::data::{generate_synthetic, split_corpus, SynthConfig};
use trajeglish_core::geometry::{boxes_overlap, corner_distance, to_global, to_local};
use trajeglish_core::model::{build_mask, Regime};
use trajeglish_core::rollout::select_windows;
use trajeglish_core::tokenizer::{render, tokenize_step, tokenize_trajectory, Method, Template, TemplateSet};
use trajeglish_core::{AgentClass, AgentMeta, AgentState};

fn state() -> impl Strategy<Value = AgentState> {
    (-200.0..200.0f64, -200.0..200.0f64, -3.2..3.2f64).prop_map(|(x, y, h)| AgentState::new(x, y, h))
}

fn meta() -> impl Strategy<Value = AgentMeta> {
    (0.4..6.0f64, 0.4..2.5f64).prop_map(|(l, w)| AgentMeta::new(l, w, AgentClass::Vehicle).unwrap())
}

fn grid_vocab() -> TemplateSet {
    let mut t = Vec::new();
    for i in 0..6 {
        for j in 0..5 {
            for k in 0..3 {
                t.push(Template::new(0.5 * i as f64, 0.2 * (j as f64 - 2.0), 0.1 * (k as f64 - 1.0)));
            }
        }
    }
    TemplateSet::new(t, Method::GridXyh).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn local_global_round_trip(frame in state(), s in state()) {
        let back = to_global(&frame, &to_local(&frame, &s).unwrap()).unwrap();
        prop_assert!((back.x - s.x).abs() < 1e-9 && (back.y - s.y).abs() < 1e-9);
        prop_assert!(trajeglish_core::geometry::wrap_angle(back.h - s.h).abs() < 1e-12);
    }

    #[test]
    fn rendered_templates_tokenize_to_themselves(s0 in state(), m in meta(), id in 0usize..90) {
        let ts = grid_vocab();
        let s = render(&s0, id, &ts).unwrap();
        prop_assert_eq!(tokenize_step(&s0, &s, &m, &ts).unwrap(), id);
    }

    #[test]
    fn chains_rerender_exactly(start in state(), m in meta(), steps in prop::collection::vec((0.0..2.5f64, -0.3..0.3f64, -0.15..0.15f64), 1..30)) {
        let ts = grid_vocab();
        let mut s = start;
        let mut states = vec![s];
        for (dx, dy, dh) in steps {
            s = to_global(&s, &AgentState::new(dx, dy, dh)).unwrap();
            states.push(s);
        }
        let tt = tokenize_trajectory(&states, &m, &ts);
        prop_assert_eq!(tt.rerender(&ts).unwrap(), tt.snapped.clone());
        prop_assert!(tt.tokens.iter().all(Option::is_some));
    }

    #[test]
    fn overlap_is_symmetric_and_rigid(a in state(), b in state(), ma in meta(), mb in meta(), frame in state()) {
        let b = AgentState::new(a.x + (b.x - a.x) * 0.02, a.y + (b.y - a.y) * 0.02, b.h);
        let o = boxes_overlap(&a, &ma, &b, &mb).unwrap();
        prop_assert_eq!(o, boxes_overlap(&b, &mb, &a, &ma).unwrap());
        let (ga, gb) = (to_global(&frame, &a).unwrap(), to_global(&frame, &b).unwrap());
        prop_assert_eq!(o, boxes_overlap(&ga, &ma, &gb, &mb).unwrap());
        prop_assert!(boxes_overlap(&a, &ma, &a, &mb).unwrap());
    }

    #[test]
    fn corner_distance_is_a_symmetric_rigid_metric(a in state(), b in state(), m in meta(), frame in state()) {
        let d = corner_distance(&a, &b, &m).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - corner_distance(&b, &a, &m).unwrap()).abs() < 1e-9);
        let (ga, gb) = (to_global(&frame, &a).unwrap(), to_global(&frame, &b).unwrap());
        prop_assert!((d - corner_distance(&ga, &gb, &m).unwrap()).abs() < 1e-7);
        prop_assert!(corner_distance(&a, &a, &m).unwrap() < 1e-12);
    }

    #[test]
    fn windows_cover_every_valid_agent(
        pos in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64, any::<bool>()), 1..60),
        max_agents in 1usize..16,
        sdc_pick in any::<prop::sample::Index>(),
    ) {
        let states: Vec<AgentState> = pos
            .iter()
            .map(|&(x, y, keep)| if keep { AgentState::new(x, y, 0.0) } else { AgentState::invalid() })
            .collect();
        let sdc = sdc_pick.index(states.len());
        let windows = select_windows(&states, max_agents, sdc);
        let n_valid = states.iter().filter(|s| s.valid).count();
        let mut seen = vec![false; states.len()];
        for w in &windows {
            prop_assert_eq!(w.members.len(), n_valid.min(max_agents));
            for &m in &w.members {
                prop_assert!(states[m].valid);
                seen[m] = true;
            }
        }
        for (i, s) in states.iter().enumerate() {
            prop_assert_eq!(seen[i], s.valid);
        }
        if states[sdc].valid {
            prop_assert_eq!(windows[0].members[0], sdc);
        }
    }

    #[test]
    fn masks_nest(n in 1usize..6, t in 1usize..7) {
        let full = build_mask(Regime::FullIntra, n, t);
        let no = build_mask(Regime::NoIntra, n, t);
        let marg = build_mask(Regime::Marginal, n, t);
        prop_assert_eq!(&marg, &build_mask(Regime::MarginalNoMap, n, t));
        for ((f, o), g) in full.iter().zip(no.iter()).zip(marg.iter()) {
            prop_assert!(!*g || *o);
            prop_assert!(!*o || *f);
        }
    }
}

#[test]
fn corpus_and_split_are_deterministic_and_disjoint() {
    let cfg = SynthConfig { n_scenarios: 40, seed: 17, ..SynthConfig::default() };
    let a = generate_synthetic(&cfg);
    assert_eq!(a, generate_synthetic(&cfg));
    let (train, val) = split_corpus(&a, 0.25, 3);
    assert_eq!(split_corpus(&a, 0.25, 3), (train.clone(), val.clone()));
    assert_eq!(train.len() + val.len(), a.len());
    for v in &val {
        assert!(train.iter().all(|t| t.id != v.id));
    }
    assert_ne!(generate_synthetic(&SynthConfig { seed: 18, ..cfg }), a);
}
