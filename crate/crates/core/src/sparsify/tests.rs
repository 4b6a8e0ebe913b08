use super::*;
use crate::chain::{ChainActivation, MlpChain};
use crate::model::{ModelConfig, ToyModel};
use crate::network::LayerUnits;
use proptest::prelude::*;

fn report_from(scores: Vec<(Vec<f64>, Vec<f64>)>) -> AttributionReport {
    // gxo = x * g with g = 1 reproduces the given scores exactly.
    let layers = scores
        .iter()
        .map(|(h, m)| UnitRow {
            heads: h.clone(),
            mlp: m.clone(),
        })
        .collect();
    let x = UnitMap { layers };
    let g = x.map(|_| 1.0);
    AttributionReport::from_vectors(&x, &g, 0.0, 0, 0).unwrap()
}

fn small_toy(n_layers: usize) -> ToyModel {
    ToyModel::init(ModelConfig {
        d_model: 8,
        n_layers,
        n_heads: 2,
        d_ff: 6,
        max_seq_len: 24,
        seed: 21,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn ar_to_count_examples() {
    assert_eq!(ar_to_count(0.5, 10).unwrap(), 5);
    assert_eq!(ar_to_count(0.25, 10).unwrap(), 3);
    assert_eq!(ar_to_count(0.35, 10).unwrap(), 4);
    assert_eq!(ar_to_count(0.01, 10).unwrap(), 1);
    assert_eq!(ar_to_count(1.0, 7).unwrap(), 7);
    assert_eq!(ar_to_count(0.5, 1).unwrap(), 1);
    assert_eq!(ar_to_count(0.3, 4).unwrap(), 1);
    for bad in [0.0, -0.1, 1.01, f64::NAN] {
        assert!(ar_to_count(bad, 4).is_err());
    }
    assert!(ar_to_count(0.5, 0).is_err());
}

#[test]
fn top_k_ties_keep_lower_index() {
    assert_eq!(top_k_mask(&[1.0, 1.0, 1.0], 2), vec![true, true, false]);
    assert_eq!(top_k_mask(&[0.0, -0.0, 5.0], 2), vec![true, false, true]);
    assert_eq!(top_k_mask(&[-0.0, 0.0], 1), vec![true, false]);
    assert_eq!(top_k_mask(&[3.0, 1.0], 0), vec![false, false]);
}

#[test]
fn select_plan_examples() {
    let report = report_from(vec![(vec![0.3, 0.9], vec![5.0, -1.0, 2.0, 4.0])]);
    let plan = select_plan(&report, Metric::Gxo, 0.5, Scope::All).unwrap();
    assert_eq!(plan.mask.layers[0].heads, vec![false, true]);
    assert_eq!(plan.mask.layers[0].mlp, vec![true, false, false, true]);

    let mlp = select_plan(&report, Metric::Gxo, 0.5, Scope::MlpOnly).unwrap();
    assert_eq!(mlp.mask.layers[0].heads, vec![true, true]);
    assert_eq!(mlp.realized_ar(), 0.5);
    let att = select_plan(&report, Metric::Gxo, 0.5, Scope::AttentionOnly).unwrap();
    assert!(att.mask.layers[0].mlp.iter().all(|k| *k));

    let full = select_plan(&report, Metric::Gxo, 1.0, Scope::All).unwrap();
    assert_eq!(full.mask, UnitMap::filled(&report.outputs().layout(), true));
    assert!(select_plan(&report, Metric::Ig, 0.5, Scope::All).is_err());
}

#[test]
fn layers_with_different_scales_keep_their_quota() {
    let report = report_from(vec![
        (vec![], vec![1e-6, 3e-6, 2e-6, 4e-6]),
        (vec![], vec![1e3, 4e3, 3e3, 2e3]),
    ]);
    let plan = select_plan(&report, Metric::Gxo, 0.5, Scope::All).unwrap();
    assert_eq!(plan.mask.layers[0].mlp, vec![false, true, false, true]);
    assert_eq!(plan.mask.layers[1].mlp, vec![false, true, true, false]);
    // A single global threshold would empty the first layer instead.
    let uni = select_plan_uniform(&report, Metric::Gxo, 2.5e3, Scope::All).unwrap();
    assert_eq!(uni.kept(GroupRef::new(0, UnitKind::Mlp)), 1);
    assert_eq!(uni.kept(GroupRef::new(1, UnitKind::Mlp)), 2);
}

#[test]
fn uniform_threshold_cases() {
    let report = report_from(vec![(vec![], vec![1.0, 2.0, 3.0, 4.0, 5.0])]);
    let g = GroupRef::new(0, UnitKind::Mlp);
    let median = select_plan_uniform(&report, Metric::Gxo, 3.0, Scope::All).unwrap();
    assert_eq!(median.mask.group(g), &[false, false, true, true, true]);
    assert_eq!(median.target_ar, 0.6);
    assert_eq!(median.tau, Some(3.0));
    let low = select_plan_uniform(&report, Metric::Gxo, f64::NEG_INFINITY, Scope::All).unwrap();
    assert_eq!(low.realized_ar(), 1.0);
    let high = select_plan_uniform(&report, Metric::Gxo, 100.0, Scope::All).unwrap();
    assert_eq!(high.mask.group(g), &[false, false, false, false, true]);
}

fn random_report(seed: u64) -> AttributionReport {
    let net = MlpChain::random(&[3, 7, 5, 4], ChainActivation::Gelu, true, 2, seed).unwrap();
    crate::attribution::attribute(&net, &[seed as usize % 2], Metric::Gxo).unwrap()
}

#[test]
fn quotas_and_nesting_across_ratios() {
    let ars: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
    for seed in 0..20 {
        let report = random_report(seed);
        for metric in [Metric::Gxo, Metric::CorrectedGxo, Metric::Magnitude] {
            let mut prev: Option<ActivationPlan> = None;
            for &ar in &ars {
                let plan = select_plan(&report, metric, ar, Scope::All).unwrap();
                for g in plan.mask.layout().groups() {
                    let n = plan.mask.group(g).len();
                    assert_eq!(plan.kept(g), ar_to_count(ar, n).unwrap());
                    if let Some(p) = &prev {
                        for (a, b) in p.mask.group(g).iter().zip(plan.mask.group(g)) {
                            assert!(!a || *b, "kept set shrank from {} to {ar}", p.target_ar);
                        }
                    }
                }
                prev = Some(plan);
            }
        }
    }
}

proptest! {
    #[test]
    fn scaling_a_layer_does_not_change_its_plan(
        scores in proptest::collection::vec(-100.0f64..100.0, 1..12),
        factor in 1e-3f64..1e3,
        ar in 0.05f64..1.0,
    ) {
        let scaled: Vec<f64> = scores.iter().map(|s| s * factor).collect();
        let a = select_plan(&report_from(vec![(vec![], scores)]), Metric::Gxo, ar, Scope::All).unwrap();
        let b = select_plan(&report_from(vec![(vec![], scaled)]), Metric::Gxo, ar, Scope::All).unwrap();
        prop_assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn kept_units_outscore_dropped_ones(
        scores in proptest::collection::vec(-10.0f64..10.0, 1..16),
        ar in 0.05f64..1.0,
    ) {
        let plan = select_plan(&report_from(vec![(vec![], scores.clone())]), Metric::Gxo, ar, Scope::All).unwrap();
        let keep = &plan.mask.layers[0].mlp;
        let min_kept = scores.iter().zip(keep).filter(|(_, k)| **k).map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
        let max_dropped = scores.iter().zip(keep).filter(|(_, k)| !**k).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_kept >= max_dropped);
    }
}

#[test]
fn iterative_matches_one_shot_on_single_layer() {
    let net = MlpChain::random(&[3, 9], ChainActivation::Relu, true, 2, 5).unwrap();
    for ar in [0.2, 0.5, 0.9] {
        let report = crate::attribution::attribute(&net, &[0], Metric::Gxo).unwrap();
        let one = select_plan(&report, Metric::Gxo, ar, Scope::All).unwrap();
        let it = select_plan_iterative(&net, &[0], Metric::Gxo, ar, Scope::All, 8).unwrap();
        assert_eq!(one.mask, it.mask);
        assert_eq!(it.mode, PlanMode::Iterative);
    }
}

#[test]
fn iterative_pass_consumption() {
    let model = small_toy(4);
    let tokens = [7, 8, 9];
    let c = model.counter().snapshot();
    select_plan_iterative(&model, &tokens, Metric::Gxo, 1.0, Scope::All, 8).unwrap();
    let d = model.counter().snapshot().since(c);
    assert_eq!((d.forward, d.backward), (1, 1));

    let c = model.counter().snapshot();
    let plan = select_plan_iterative(&model, &tokens, Metric::Gxo, 0.5, Scope::All, 8).unwrap();
    let d = model.counter().snapshot().since(c);
    assert_eq!((d.forward, d.backward), (4, 4));
    for g in plan.mask.layout().groups() {
        assert_eq!(plan.kept(g), ar_to_count(0.5, plan.mask.group(g).len()).unwrap());
    }

    let c = model.counter().snapshot();
    select_plan_iterative(&model, &tokens, Metric::Magnitude, 0.5, Scope::All, 8).unwrap();
    let d = model.counter().snapshot().since(c);
    assert_eq!((d.forward, d.backward), (4, 0));
}

#[test]
fn plan_json_round_trip() {
    let report = random_report(3);
    for (plan, file) in [
        (select_plan(&report, Metric::CorrectedGxo, 0.4, Scope::MlpOnly).unwrap(), "a.json"),
        (select_plan_uniform(&report, Metric::Gxo, 0.0, Scope::All).unwrap(), "b.json"),
    ] {
        let back = ActivationPlan::from_json(&plan.to_json().unwrap()).unwrap();
        assert_eq!(back, plan);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(file);
        plan.save(&path).unwrap();
        assert_eq!(ActivationPlan::load(&path).unwrap(), plan);
    }
    let bad = r#"{"metric":"gxo","ar":0.5,"scope":"all","mode":"iterative","realized_ar":1.0,"layers":[{"heads":"1x","mlp":"1"}]}"#;
    assert!(matches!(ActivationPlan::from_json(bad), Err(Error::PlanMismatch { layer: 0, .. })));
}

#[test]
fn all_active_plan() {
    let layout = UnitLayout {
        layers: vec![LayerUnits { heads: 2, mlp: 3 }; 2],
    };
    let plan = ActivationPlan::all_active(&layout, Metric::Gxo, Scope::All);
    assert_eq!(plan.realized_ar(), 1.0);
    assert_eq!(plan.kept(GroupRef::new(1, UnitKind::Head)), 2);
    assert_eq!("mlp_only".parse::<Scope>().unwrap(), Scope::MlpOnly);
    assert_eq!("iterative".parse::<PlanMode>().unwrap(), PlanMode::Iterative);
    assert!("some".parse::<Scope>().is_err());
}
