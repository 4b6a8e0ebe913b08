use super::*;
use crate::chain::{ChainActivation, DenseLayer, MlpChain, Readout};
use crate::model::{BlockLayout, ModelConfig, ToyModel};
use crate::network::{LayerNodes, LayerUnits, PassCounter, UnitLayout, UnitRow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(seed: u64, layout: BlockLayout) -> ToyModel {
    ToyModel::init(ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 24,
        block_layout: layout,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn probe(x: Vec<f64>, r: Vec<f64>) -> MlpChain {
    let n = x.len();
    let mut weight = vec![0.0; n * n];
    for i in 0..n {
        weight[i * n + i] = 1.0;
    }
    let layer = DenseLayer {
        n_in: n,
        n_out: n,
        weight,
        bias: None,
        activation: ChainActivation::Identity,
    };
    MlpChain::new(vec![x], vec![layer], Readout::Linear(r)).unwrap()
}

/// `F = sum z_i^2` where `z` is the gated, masked input vector.
struct Square {
    x: Vec<f64>,
    counter: PassCounter,
}

impl UnitNetwork for Square {
    fn layout(&self) -> UnitLayout {
        UnitLayout {
            layers: vec![LayerUnits {
                heads: 0,
                mlp: self.x.len(),
            }],
        }
    }

    fn counter(&self) -> &PassCounter {
        &self.counter
    }

    fn forward_pass(&self, _tokens: &[usize], opts: &PassOptions<'_>) -> Result<Pass> {
        let n = self.x.len();
        let x = Tensor::leaf(&[1, n], self.x.clone())?;
        let mult: Vec<f64> = (0..n)
            .map(|i| match opts.mask {
                Some(m) if !m.layers[0].mlp[i] => 0.0,
                _ => opts.gate,
            })
            .collect();
        let z = x.mul(&Tensor::new(&[n], mult)?)?;
        let objective = z.mul(&z)?.sum();
        self.counter.record_forward();
        Ok(Pass {
            objective,
            logits: Vec::new(),
            units: UnitMap {
                layers: vec![UnitRow {
                    heads: Vec::new(),
                    mlp: self.x.clone(),
                }],
            },
            nodes: vec![LayerNodes {
                heads: Vec::new(),
                mlp: Some(x),
            }],
            gate: opts.gate,
        })
    }
}

#[test]
fn scalar_objective_examples() {
    let f = scalar_objective(&Tensor::new(&[2], vec![0.0, 0.0]).unwrap()).unwrap();
    assert!((f.item() - 0.5f64.ln()).abs() < 1e-15);
    let f = scalar_objective(&Tensor::new(&[1, 2], vec![10.0, -10.0]).unwrap()).unwrap();
    assert!(f.item() <= 0.0 && f.item() > -1e-8);
    assert!(scalar_objective(&Tensor::new(&[2, 2], vec![0.0; 4]).unwrap()).is_err());
}

#[test]
fn scalar_objective_matches_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let v: Vec<f64> = (0..13).map(|_| rng.random_range(-20.0..20.0)).collect();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
        let f = scalar_objective(&Tensor::new(&[13], v.clone()).unwrap()).unwrap();
        assert!((f.item() - (max - lse)).abs() < 1e-12);
        let t = target_objective(&Tensor::new(&[13], v.clone()).unwrap(), Some(4)).unwrap();
        assert!((t.item() - (v[4] - lse)).abs() < 1e-12);
    }
}

#[test]
fn gxo_on_linear_probe_is_weight_times_output() {
    let x = vec![1.5, -2.0, 0.25, 3.0];
    let r = vec![0.5, 2.0, -1.0, 0.0];
    let report = attribute(&probe(x.clone(), r.clone()), &[0], Metric::Gxo).unwrap();
    let gxo = report.scores(Metric::Gxo).unwrap();
    for i in 0..4 {
        assert_eq!(gxo.layers[0].mlp[i], x[i] * r[i]);
        assert_eq!(report.layers[0].mlp.gradients[i], r[i]);
    }
    let f: f64 = x.iter().zip(&r).map(|(a, b)| a * b).sum();
    assert!((report.objective_value - f).abs() < 1e-15);
}

#[test]
fn zero_outputs_give_zero_scores() {
    let report = attribute(&probe(vec![0.0; 3], vec![1.0, -2.0, 3.0]), &[0], Metric::Gxo).unwrap();
    for m in [Metric::Magnitude, Metric::Gxo, Metric::Snip, Metric::Fisher, Metric::CorrectedGxo] {
        assert!(report.scores(m).unwrap().layers[0].mlp.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn gxo_equals_deactivation_effect_on_linear_probe() {
    let x = vec![0.7, -1.1, 2.3];
    let r = vec![1.3, 0.4, -0.9];
    let net = probe(x, r);
    let layout = UnitNetwork::layout(&net);
    let report = attribute(&net, &[0], Metric::Gxo).unwrap();
    let full = net.forward_pass(&[0], &PassOptions::default()).unwrap().objective.item();
    for i in 0..3 {
        let mut mask = UnitMap::filled(&layout, true);
        mask.layers[0].mlp[i] = false;
        let f = net
            .forward_pass(&[0], &PassOptions::masked(Some(&mask)))
            .unwrap()
            .objective
            .item();
        let gxo = report.scores(Metric::Gxo).unwrap().layers[0].mlp[i];
        assert!((full - f - gxo).abs() < 1e-14);
    }
}

#[test]
fn gxo_is_first_order_deactivation_effect() {
    // Scaling unit i of the first layer by s is the same as scaling row i of
    // the second layer's weight.
    let net = MlpChain::random(&[3, 5, 4], ChainActivation::Gelu, true, 2, 4).unwrap();
    let report = attribute(&net, &[1], Metric::Gxo).unwrap();
    let f = |i: usize, s: f64| {
        let mut layers = net.layers.clone();
        let n_out = layers[1].n_out;
        for j in 0..n_out {
            layers[1].weight[i * n_out + j] *= s;
        }
        let n = MlpChain::new(net.inputs.clone(), layers, net.readout.clone()).unwrap();
        n.forward_pass(&[1], &PassOptions::default()).unwrap().objective.item()
    };
    for i in 0..5 {
        let d = |t: f64| (f(i, 1.0) - f(i, 1.0 - t)) / t;
        let richardson = 2.0 * d(1e-4) - d(2e-4);
        let gxo = report.scores(Metric::Gxo).unwrap().layers[0].mlp[i];
        assert!((richardson - gxo).abs() < 1e-7, "unit {i}: {richardson} vs {gxo}");
    }
}

#[test]
fn ig_of_squares_has_closed_form() {
    let net = Square {
        x: vec![1.0, 2.0],
        counter: PassCounter::default(),
    };
    for n in [1usize, 4, 100, 1000] {
        let report = attribute_ig(&net, &[0], n).unwrap();
        let ig = report.scores(Metric::Ig).unwrap();
        let total: f64 = ig.layers[0].mlp.iter().sum();
        // Right Riemann sum of 2 t |x|^2 over [0, 1].
        let exact = 5.0 * (n as f64 + 1.0) / n as f64;
        assert!((total - exact).abs() < 1e-12, "n = {n}");
        assert!((ig.layers[0].mlp[0] - exact / 5.0).abs() < 1e-12);
    }
    let report = attribute_ig(&net, &[0], 100_000).unwrap();
    let total: f64 = report.scores(Metric::Ig).unwrap().layers[0].mlp.iter().sum();
    assert!((total - 5.0).abs() < 1e-4);
}

#[test]
fn ig_equals_gxo_on_linear_probe() {
    let net = probe(vec![0.3, -1.7, 2.0, 0.9], vec![-0.5, 0.25, 1.5, 2.0]);
    let gxo = attribute(&net, &[0], Metric::Gxo).unwrap().scores(Metric::Gxo).unwrap();
    for n in [1, 2, 7, 50] {
        let ig = attribute_ig(&net, &[0], n).unwrap().scores(Metric::Ig).unwrap();
        for (a, b) in ig.layers[0].mlp.iter().zip(&gxo.layers[0].mlp) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

fn completeness_gap(model: &ToyModel, tokens: &[usize], n: usize) -> f64 {
    let report = attribute_ig(model, tokens, n).unwrap();
    let ig = report.scores(Metric::Ig).unwrap();
    let total: f64 = ig.layers.iter().flat_map(|r| r.heads.iter().chain(&r.mlp)).sum();
    let base = model
        .forward_pass(
            tokens,
            &PassOptions {
                gate: 0.0,
                target: Some(report.target_token),
                ..Default::default()
            },
        )
        .unwrap()
        .objective
        .item();
    let delta = report.objective_value - base;
    (total - delta).abs() / delta.abs()
}

#[test]
fn ig_completeness_on_toy_model() {
    for (seed, layout) in [(3, BlockLayout::Parallel), (4, BlockLayout::Sequential)] {
        let model = toy(seed, layout);
        let tokens = [5, 40, 41, 17, 66];
        let coarse = completeness_gap(&model, &tokens, 8);
        let fine = completeness_gap(&model, &tokens, 512);
        assert!(fine < 0.02, "seed {seed}: gap {fine}");
        assert!(fine <= coarse, "seed {seed}: {fine} > {coarse}");
    }
}

#[test]
fn corrective_term_examples() {
    let c = corrective_term(&[3.0, 4.0], &[1.0, 2.0]).unwrap();
    assert!((c[0] - 1.5 * 5f64.sqrt()).abs() < 1e-12);
    assert!((c[1] - 2.0 * 5f64.sqrt()).abs() < 1e-12);
    assert!((c[0] - 3.3541).abs() < 1e-4 && (c[1] - 4.4721).abs() < 1e-4);
    assert_eq!(corrective_term(&[-2.0], &[0.0]).unwrap(), vec![0.0]);
    assert!(corrective_term(&[1.0, 2.0], &[1.0]).is_err());
    assert!(corrective_term(&[], &[]).unwrap().is_empty());
}

#[test]
fn corrective_term_scales_with_outputs_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (a, b) = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
        let c = corrective_term(&x, &g).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * a).collect();
        let gs: Vec<f64> = g.iter().map(|v| v * b).collect();
        let cs = corrective_term(&xs, &gs).unwrap();
        for (u, v) in c.iter().zip(&cs) {
            assert!((u * (a * b).abs() - v).abs() < 1e-12 * (1.0 + v.abs()));
        }
    }
}

#[test]
fn corrected_scores_add_the_corrective_term() {
    let model = toy(5, BlockLayout::Parallel);
    for tokens in [vec![1, 2, 3], vec![60, 7, 33, 33, 12]] {
        let report = attribute_corrected(&model, &tokens).unwrap();
        for layer in &report.layers {
            for kind in UnitKind::ALL {
                let g = layer.get(kind);
                let c = corrective_term(&g.outputs, &g.gradients).unwrap();
                let gxo = g.score(Metric::Gxo).unwrap();
                let cor = g.score(Metric::CorrectedGxo).unwrap();
                let abs = g.score(Metric::CorrectedAbsGxo).unwrap();
                for i in 0..c.len() {
                    assert_eq!(cor[i], gxo[i] + c[i]);
                    assert!((cor[i] - gxo[i] - c[i]).abs() <= 1e-15 * (1.0 + cor[i].abs()));
                    assert_eq!(abs[i], gxo[i].abs() + c[i]);
                }
            }
        }
    }
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

#[test]
fn snip_and_fisher_rank_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layout = UnitLayout {
        layers: vec![LayerUnits { heads: 3, mlp: 9 }; 2],
    };
    for _ in 0..1000 {
        let mut draw = || {
            let mut m = UnitMap::filled(&layout, 0.0);
            for row in &mut m.layers {
                for v in row.heads.iter_mut().chain(row.mlp.iter_mut()) {
                    *v = rng.random_range(-2.0..2.0);
                }
            }
            m
        };
        let (x, g) = (draw(), draw());
        let report = AttributionReport::from_vectors(&x, &g, 0.0, 0, 0).unwrap();
        let snip = report.scores(Metric::Snip).unwrap();
        let fisher = report.scores(Metric::Fisher).unwrap();
        for grp in layout.groups() {
            assert_eq!(argsort(snip.group(grp)), argsort(fisher.group(grp)));
        }
    }
}

#[test]
fn score_definitions() {
    let layout = UnitLayout {
        layers: vec![LayerUnits { heads: 1, mlp: 2 }],
    };
    let mut x = UnitMap::filled(&layout, 0.0);
    let mut g = UnitMap::filled(&layout, 0.0);
    x.layers[0].heads = vec![2.0];
    g.layers[0].heads = vec![-3.0];
    x.layers[0].mlp = vec![-1.0, 0.5];
    g.layers[0].mlp = vec![4.0, 2.0];
    let r = AttributionReport::from_vectors(&x, &g, 0.0, 0, 0).unwrap();
    let get = |m: Metric| r.scores(m).unwrap();
    assert_eq!(get(Metric::Magnitude).layers[0].mlp, vec![1.0, 0.5]);
    assert_eq!(get(Metric::Gradient).layers[0].heads, vec![3.0]);
    assert_eq!(get(Metric::Gxo).layers[0].mlp, vec![-4.0, 1.0]);
    assert_eq!(get(Metric::Snip).layers[0].mlp, vec![4.0, 1.0]);
    assert_eq!(get(Metric::Fisher).layers[0].heads, vec![36.0]);
    // The head group has its own gradient norm.
    assert_eq!(get(Metric::CorrectedGxo).layers[0].heads, vec![-6.0 + 3.0]);
    assert!(matches!(r.scores(Metric::Ig), Err(Error::MissingMetric(_))));
}

#[test]
fn pass_costs() {
    let model = toy(6, BlockLayout::Parallel);
    let tokens = [9, 10, 11];
    let c = model.counter().snapshot();
    attribute(&model, &tokens, Metric::Gxo).unwrap();
    let d = model.counter().snapshot().since(c);
    assert_eq!((d.forward, d.backward), (1, 1));

    let c = model.counter().snapshot();
    attribute_metric(&model, &tokens, Metric::Magnitude, &AttributeOptions::default()).unwrap();
    let d = model.counter().snapshot().since(c);
    assert_eq!((d.forward, d.backward), (1, 0));

    let c = model.counter().snapshot();
    attribute_ig(&model, &tokens, 7).unwrap();
    let d = model.counter().snapshot().since(c);
    assert_eq!((d.forward, d.backward), (7, 7));
}

#[test]
fn magnitude_paths_agree() {
    let model = toy(7, BlockLayout::Sequential);
    let tokens = [3, 4, 5, 6];
    let full = attribute(&model, &tokens, Metric::Magnitude).unwrap();
    let fwd = attribute_magnitude(&model, &tokens, None, None).unwrap();
    assert_eq!(
        full.scores(Metric::Magnitude).unwrap(),
        fwd.scores(Metric::Magnitude).unwrap()
    );
    assert_eq!(full.target_token, fwd.target_token);
    assert!(fwd.scores(Metric::Gxo).is_err());
}

#[test]
fn unknown_and_unsupported_metrics() {
    assert!(matches!("saliency".parse::<Metric>(), Err(Error::UnknownMetric(_))));
    for m in Metric::ALL {
        assert_eq!(m.as_str().parse::<Metric>().unwrap(), m);
    }
    let model = toy(8, BlockLayout::Parallel);
    assert!(attribute(&model, &[1, 2], Metric::Ig).is_err());
    assert!(attribute_ig(&model, &[1, 2], 0).is_err());
}

#[test]
fn report_serializes() {
    let model = toy(9, BlockLayout::Parallel);
    let report = attribute(&model, &[1, 2, 3], Metric::Gxo).unwrap();
    let back: AttributionReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    // 2 layers x (2 heads + 12 neurons) x 7 metrics, plus the header.
    assert_eq!(text.lines().count(), 2 * 14 * 7 + 1);
    assert_eq!(report.token_position, 2);
}

#[test]
fn fixed_target_changes_objective() {
    let model = toy(10, BlockLayout::Parallel);
    let tokens = [4, 8, 15];
    let free = attribute(&model, &tokens, Metric::Gxo).unwrap();
    let other = (free.target_token + 1) % model.config.vocab_size;
    let fixed = attribute_with(&model, &tokens, Metric::Gxo, None, Some(other)).unwrap();
    assert_eq!(fixed.target_token, other);
    assert!(fixed.objective_value < free.objective_value);
}

/// Fraction of units whose gxo is within 10% of the exact effect of
/// removing that unit alone.
fn deactivation_agreement<N: UnitNetwork>(net: &N, tokens: &[usize]) -> (usize, usize) {
    let layout = net.layout();
    let report = attribute(net, tokens, Metric::Gxo).unwrap();
    let gxo = report.scores(Metric::Gxo).unwrap();
    let target = Some(report.target_token);
    let full = net
        .forward_pass(tokens, &PassOptions { target, ..Default::default() })
        .unwrap()
        .objective
        .item();
    let (mut close, mut total) = (0, 0);
    for g in layout.groups() {
        for i in 0..layout.count(g) {
            let mut mask = UnitMap::filled(&layout, true);
            mask.group_mut(g)[i] = false;
            let opts = PassOptions {
                mask: Some(&mask),
                target,
                ..Default::default()
            };
            let f = net.forward_pass(tokens, &opts).unwrap().objective.item();
            let exact = full - f;
            total += 1;
            close += usize::from((gxo.group(g)[i] - exact).abs() <= 0.1 * exact.abs().max(1e-9));
        }
    }
    (close, total)
}

#[test]
#[ignore = "fails: about 79% of units on random 4-unit gelu chains fall within 10%"]
fn gxo_tracks_exact_deactivation_on_tiny_net() {
    let (mut close, mut total) = (0, 0);
    for seed in 0..10 {
        let net = MlpChain::random(&[3, 4, 4], ChainActivation::Gelu, true, 1, seed).unwrap();
        let (c, t) = deactivation_agreement(&net, &[0]);
        close += c;
        total += t;
    }
    assert!(close * 10 >= total * 9, "{close}/{total} units within 10%");
}

#[test]
fn gxo_is_first_order_removal_effect_on_toy_model() {
    // With a single token, scaling a unit's output at every position is the
    // same as scaling the weights that produce it.
    for layout in [BlockLayout::Parallel, BlockLayout::Sequential] {
        let model = toy(14, layout);
        let tokens = [33];
        let report = attribute(&model, &tokens, Metric::Gxo).unwrap();
        let gxo = report.scores(Metric::Gxo).unwrap();
        let (d, dh) = (model.config.d_model, model.config.d_head());
        let objective = |m: &ToyModel| {
            m.forward_pass(
                &tokens,
                &PassOptions {
                    target: Some(report.target_token),
                    ..Default::default()
                },
            )
            .unwrap()
            .objective
            .item()
        };
        let base = objective(&model);
        for l in 0..model.config.n_layers {
            for kind in UnitKind::ALL {
                let g = GroupRef::new(l, kind);
                for i in 0..model.layout().count(g) {
                    let scaled = |s: f64| {
                        let mut m = model.clone();
                        match kind {
                            UnitKind::Head => {
                                let wv = m.params.get_mut(&format!("blocks.{l}.attn.wv")).unwrap();
                                for r in 0..d {
                                    for c in i * dh..(i + 1) * dh {
                                        wv.data[r * d + c] *= s;
                                    }
                                }
                                let bv = m.params.get_mut(&format!("blocks.{l}.attn.bv")).unwrap();
                                for c in i * dh..(i + 1) * dh {
                                    bv.data[c] *= s;
                                }
                            }
                            UnitKind::Mlp => {
                                let w = m.params.get_mut(&format!("blocks.{l}.mlp.w_out")).unwrap();
                                for c in 0..d {
                                    w.data[i * d + c] *= s;
                                }
                            }
                        }
                        objective(&m)
                    };
                    let diff = |t: f64| (base - scaled(1.0 - t)) / t;
                    let richardson = 2.0 * diff(1e-4) - diff(2e-4);
                    let s = gxo.group(g)[i];
                    assert!(
                        (richardson - s).abs() < 1e-6 * (1.0 + s.abs()),
                        "{layout} {g} unit {i}: {richardson} vs {s}"
                    );
                }
            }
        }
    }
}

#[test]
fn ig_sums_converge_as_steps_double() {
    for (seed, layout) in [(12, BlockLayout::Parallel), (13, BlockLayout::Sequential)] {
        let model = toy(seed, layout);
        let tokens = [22, 9, 41, 5];
        let sum = |n: usize| -> f64 {
            let r = attribute_ig(&model, &tokens, n).unwrap().scores(Metric::Ig).unwrap();
            r.layers.iter().flat_map(|l| l.heads.iter().chain(&l.mlp)).sum()
        };
        let sums: Vec<f64> = [8, 16, 32, 64, 128].into_iter().map(sum).collect();
        let diffs: Vec<f64> = sums.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        for w in diffs.windows(2) {
            assert!(w[1] <= w[0], "seed {seed}: {diffs:?}");
        }
    }
}

#[test]
fn correction_edge_cases() {
    // A zero gradient leaves gxo unchanged.
    let x = vec![1.5, -2.0, 0.25];
    assert_eq!(corrective_term(&x, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    // Equal magnitudes shift every score by the same amount.
    let layout = UnitLayout {
        layers: vec![LayerUnits { heads: 0, mlp: 5 }],
    };
    let mut xs = UnitMap::filled(&layout, 0.0);
    let mut gs = UnitMap::filled(&layout, 0.0);
    xs.layers[0].mlp = vec![2.0, -2.0, 2.0, -2.0, 2.0];
    gs.layers[0].mlp = vec![0.3, 0.1, -0.4, -0.2, 0.05];
    let r = AttributionReport::from_vectors(&xs, &gs, 0.0, 0, 0).unwrap();
    let gxo = r.scores(Metric::Gxo).unwrap();
    let cor = r.scores(Metric::CorrectedGxo).unwrap();
    assert_eq!(argsort(&gxo.layers[0].mlp), argsort(&cor.layers[0].mlp));
}
