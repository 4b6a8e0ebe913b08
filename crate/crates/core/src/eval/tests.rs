use super::*;
use crate::model::ModelConfig;

/// Scores from an independent BLEU implementation with the same settings.
const REFERENCE_SCORES: [(&str, &str, f64); 12] = [
    ("the sky is blue", "the sky is blue", 100.00000000000004),
    ("the sky is green", "the sky is blue", 65.80370064762461),
    ("the cow says moo", "the dog says woof", 37.99178428257963),
    ("the capital is paris", "the capital is rome", 65.80370064762461),
    ("the plural is", "the plural is feet", 71.65313105737896),
    ("it lives in a nest", "it lives in a den", 75.21206186172783),
    ("you use a pen to write", "you use a pen", 60.427507947135354),
    ("blue", "the sky is blue", 4.9787068367863965),
    ("The Next Number Is Two", "the next number is two", 100.00000000000004),
    ("opposite the is cold", "the opposite is cold", 53.7284965911771),
    ("the the the the", "the cat is here", 31.947155212313625),
    ("a b c d e f", "a b c d e g", 80.34284189446517),
];

fn small_model() -> ToyModel {
    ToyModel::init(ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 48,
        seed: 77,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn items() -> Vec<QaItem> {
    vec![QaItem::new("sky?", "blue"), QaItem::new("cow?", "moo")]
}

#[test]
fn bleu_matches_reference_scorer() {
    for (c, r, expected) in REFERENCE_SCORES {
        let got = bleu(c, r);
        assert!((got - expected).abs() < 0.1, "{c:?} vs {r:?}: {got} != {expected}");
        assert!((got - expected.min(100.0)).abs() < 1e-9);
    }
}

#[test]
fn bleu_edge_cases() {
    for s in ["a", "the sky is blue", "x y"] {
        assert_eq!(bleu(s, s), 100.0);
    }
    assert_eq!(bleu("", "the sky"), 0.0);
    assert_eq!(bleu("   ", "the sky"), 0.0);
    assert_eq!(bleu("green", "the sky is blue"), 0.0);
    assert_eq!(bleu("blue", ""), 0.0);
    assert_eq!(bleu("", " "), 100.0);
    let v = bleu("the sky", "the sky is very blue today");
    assert!(v > 0.0 && v < 100.0);
}

#[test]
fn references_reproduce_at_full_ratio() {
    let model = small_model();
    let mut items = items();
    generate_references(&model, &mut items, 6).unwrap();
    let config = SweepConfig {
        metrics: vec![Metric::Magnitude, Metric::Gxo, Metric::Ig],
        ars: vec![1.0],
        ig_steps: 4,
        max_new: 6,
        ..SweepConfig::default()
    };
    let rows = sweep(&model, &items, &config).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r.bleu_mean, 100.0);
        assert!(r.passes_consumed > 0);
    }
}

#[test]
fn sweep_needs_references() {
    let model = small_model();
    let mut items = items();
    items[0].reference_output = Some("x".into());
    let err = sweep(&model, &items, &SweepConfig::default());
    assert!(matches!(err, Err(Error::MissingReference { index: 1 })));
}

#[test]
fn sweep_rows_are_sorted_and_bounded() {
    let model = small_model();
    let mut items = items();
    generate_references(&model, &mut items, 4).unwrap();
    let config = SweepConfig {
        metrics: vec![Metric::CorrectedGxo, Metric::Magnitude],
        ars: vec![0.8, 0.3],
        max_new: 4,
        ..SweepConfig::default()
    };
    let rows = sweep(&model, &items, &config).unwrap();
    let keys: Vec<(Metric, f64)> = rows.iter().map(|r| (r.metric, r.ar)).collect();
    assert_eq!(
        keys,
        vec![
            (Metric::Magnitude, 0.3),
            (Metric::Magnitude, 0.8),
            (Metric::CorrectedGxo, 0.3),
            (Metric::CorrectedGxo, 0.8)
        ]
    );
    assert!(rows.iter().all(|r| (0.0..=100.0).contains(&r.bleu_mean) && r.n_items == 2));
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("metric,ar,scope,mode,bleu_mean,n_items,passes_consumed\n"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn passes_per_token_follow_metric_cost() {
    let model = small_model();
    let mut items = items();
    generate_references(&model, &mut items, 5).unwrap();
    let config = SweepConfig {
        metrics: vec![Metric::Magnitude, Metric::Gxo, Metric::CorrectedGxo, Metric::Ig],
        ars: vec![0.5],
        ig_steps: 6,
        max_new: 5,
        ..SweepConfig::default()
    };
    let rows = sweep(&model, &items, &config).unwrap();
    let per: Vec<f64> = rows.iter().map(SweepRecord::passes_per_token).collect();
    assert_eq!(per, vec![2.0, 3.0, 13.0, 3.0]);
}

#[test]
fn mask_map_has_one_row_per_token() {
    let model = small_model();
    let map = mask_map(&model, "sky?", Metric::Gxo, 0.5, Scope::MlpOnly, 5).unwrap();
    assert_eq!(map.rows.len(), map.tokens.len());
    assert_eq!(map.columns.len(), 2 * (2 + 8));
    for row in &map.rows {
        assert_eq!(row.len(), map.columns.len());
        // Heads stay on under an MLP-only scope; half the neurons are off.
        assert_eq!(row.matches('0').count(), 2 * 4);
    }
    let pgm = map.to_pgm();
    assert!(pgm.starts_with(&format!("P2\n20 {}\n255\n", map.rows.len())));
    let back: MaskMap = serde_json::from_str(&serde_json::to_string(&map).unwrap()).unwrap();
    assert_eq!(back, map);
}
