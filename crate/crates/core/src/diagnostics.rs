//! Measurements of how masking a unit in one layer disturbs the attribution
//! scores of deeper layers, and of the bounds that limit that disturbance.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::attribution::{attribute_metric, AttributeOptions, AttributionReport, Metric};
use crate::error::{Error, Result};
use crate::network::{GroupRef, UnitKind, UnitMap, UnitNetwork};
use crate::sparsify::{ar_to_count, select_plan, select_plan_iterative, top_k_mask, Scope};

/// One measurement of the inter-layer error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub layer_l1: usize,
    pub kind_l1: UnitKind,
    pub unit_i: usize,
    pub downstream_layer_l2: usize,
    pub kind_l2: UnitKind,
    pub m_deactivated: usize,
    pub error: f64,
    /// `grad . (X - X~)` over the first group, i.e. `x_i * dF/dx_i`.
    pub linearized_change: f64,
    /// `|x_i| * ||grad||_2` over the first group.
    pub upper_bound: f64,
    pub rank_overlap: f64,
}

impl ErrorSample {
    /// `error / upper_bound`, or `None` when the bound is zero.
    pub fn normalized(&self) -> Option<f64> {
        (self.upper_bound > 0.0).then(|| self.error / self.upper_bound)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lower_ok: bool,
    pub linearized_ok: bool,
    pub empirical_ok: bool,
}

pub fn bound_check(sample: &ErrorSample) -> BoundCheck {
    BoundCheck {
        lower_ok: sample.error >= -1e-12,
        linearized_ok: sample.linearized_change.abs() <= sample.upper_bound + 1e-12,
        empirical_ok: sample.error <= sample.upper_bound + 1e-12,
    }
}

/// Number of units in `report` violating `|x_i g_i| <= |x_i| ||g||`, and the
/// number checked.
pub fn linearized_bound_violations(report: &AttributionReport) -> (usize, usize) {
    let (mut bad, mut total) = (0, 0);
    for layer in &report.layers {
        for kind in UnitKind::ALL {
            let g = layer.get(kind);
            let norm = g.gradients.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (x, d) in g.outputs.iter().zip(&g.gradients) {
                total += 1;
                if (x * d).abs() > x.abs() * norm + 1e-12 {
                    bad += 1;
                }
            }
        }
    }
    (bad, total)
}

/// Units of a group deactivated when keeping all but `m`: the complement of
/// the top `n - m` (so ties deactivate the higher index first).
pub fn bottom_m(scores: &[f64], m: usize) -> Vec<usize> {
    let keep = top_k_mask(scores, scores.len().saturating_sub(m));
    (0..scores.len()).filter(|&j| !keep[j]).collect()
}

fn check_pair(l1: GroupRef, l2: GroupRef) -> Result<()> {
    if l2.layer <= l1.layer {
        return Err(Error::LayerOrder {
            l1: l1.to_string(),
            l2: l2.to_string(),
        });
    }
    Ok(())
}

/// Error of the bottom-`m` selection in `l2` caused by deactivating unit
/// `unit_i` of `l1`, given the unmasked report `base`.
fn error_from_base<N: UnitNetwork + ?Sized>(
    net: &N,
    tokens: &[usize],
    base: &AttributionReport,
    l1: GroupRef,
    unit_i: usize,
    l2: GroupRef,
    m: usize,
    metric: Metric,
) -> Result<ErrorSample> {
    check_pair(l1, l2)?;
    let layout = net.layout();
    let n1 = layout.count(l1);
    let n2 = layout.count(l2);
    if unit_i >= n1 {
        return Err(Error::Invalid(format!("unit {unit_i} outside group {l1} of {n1}")));
    }
    if m > n2 {
        return Err(Error::Invalid(format!("m = {m} exceeds {n2} units in {l2}")));
    }
    let mut mask = UnitMap::filled(&layout, true);
    mask.group_mut(l1)[unit_i] = false;
    let masked = attribute_metric(
        net,
        tokens,
        metric,
        &AttributeOptions {
            mask: Some(&mask),
            target: Some(base.target_token),
            ..Default::default()
        },
    )?;
    let before = base.scores(metric)?;
    let after = masked.scores(metric)?;
    let s = before.group(l2);
    let s_tilde = after.group(l2);
    let i_x = bottom_m(s, m);
    let i_xt = bottom_m(s_tilde, m);
    let sum = |set: &[usize]| set.iter().map(|&j| s_tilde[j]).sum::<f64>();
    let error = sum(&i_x) - sum(&i_xt);
    let overlap = if m == 0 {
        1.0
    } else {
        let a: HashSet<_> = i_x.iter().collect();
        i_xt.iter().filter(|j| a.contains(j)).count() as f64 / m as f64
    };
    let g1 = base.group(l1);
    let x = g1.outputs[unit_i];
    let norm = g1.gradients.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(ErrorSample {
        layer_l1: l1.layer,
        kind_l1: l1.kind,
        unit_i,
        downstream_layer_l2: l2.layer,
        kind_l2: l2.kind,
        m_deactivated: m,
        error,
        linearized_change: x * g1.gradients[unit_i],
        upper_bound: x.abs() * norm,
        rank_overlap: overlap,
    })
}

/// Inter-layer attribution error for one deactivation.
///
/// Scores of `l2` are computed with and without unit `unit_i` of `l1`
/// deactivated (objective token fixed to the unmasked greedy token). With
/// `I` the bottom-`m` set under the original scores and `I~` the bottom-`m`
/// set under the new ones, the error is `sum_{I} S~ - sum_{I~} S~`.
#[allow(clippy::too_many_arguments)]
pub fn interlayer_error<N: UnitNetwork + ?Sized>(
    net: &N,
    tokens: &[usize],
    l1: GroupRef,
    unit_i: usize,
    l2: GroupRef,
    m: usize,
    metric: Metric,
) -> Result<ErrorSample> {
    check_pair(l1, l2)?;
    let base = attribute_metric(net, tokens, metric, &AttributeOptions::default())?;
    error_from_base(net, tokens, &base, l1, unit_i, l2, m, metric)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conservation {
    pub l1: GroupRef,
    pub l2: GroupRef,
    pub s_l1: f64,
    pub s_l2: f64,
    pub rel_gap: f64,
}

/// Sums of GxO scores over two groups from a single attribution.
pub fn conservation_check<N: UnitNetwork + ?Sized>(
    net: &N,
    tokens: &[usize],
    l1: GroupRef,
    l2: GroupRef,
) -> Result<Conservation> {
    let report = attribute_metric(net, tokens, Metric::Gxo, &AttributeOptions::default())?;
    conservation_from_report(&report, l1, l2)
}

pub fn conservation_from_report(
    report: &AttributionReport,
    l1: GroupRef,
    l2: GroupRef,
) -> Result<Conservation> {
    let scores = report.scores(Metric::Gxo)?;
    if l1.layer >= scores.layers.len() || l2.layer >= scores.layers.len() {
        return Err(Error::Invalid(format!("group {l1} or {l2} outside the network")));
    }
    let s_l1: f64 = scores.group(l1).iter().sum();
    let s_l2: f64 = scores.group(l2).iter().sum();
    Ok(Conservation {
        l1,
        l2,
        s_l1,
        s_l2,
        rel_gap: (s_l1 - s_l2).abs() / s_l1.abs().max(1e-12),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignConsistency {
    pub ar: f64,
    pub decreased: usize,
    pub increased: usize,
    pub unchanged: usize,
}

impl SignConsistency {
    /// Decreased over changed units; `None` when nothing changed.
    pub fn fraction_decreased(&self) -> Option<f64> {
        let changed = self.decreased + self.increased;
        (changed > 0).then(|| self.decreased as f64 / changed as f64)
    }
}

/// For every prompt and every layer but the last, deactivates that layer's
/// low-scoring units at ratio `ar` and counts how the GxO scores of all
/// deeper units move.
pub fn sign_consistency<N: UnitNetwork + ?Sized>(
    net: &N,
    prompts: &[Vec<usize>],
    ar: f64,
) -> Result<SignConsistency> {
    if prompts.is_empty() {
        return Err(Error::Invalid("sign consistency needs at least one prompt".into()));
    }
    let layout = net.layout();
    let mut out = SignConsistency {
        ar,
        decreased: 0,
        increased: 0,
        unchanged: 0,
    };
    for tokens in prompts {
        let base = attribute_metric(net, tokens, Metric::Gxo, &AttributeOptions::default())?;
        let plan = select_plan(&base, Metric::Gxo, ar, Scope::All)?;
        let before = base.scores(Metric::Gxo)?;
        for l in 0..layout.n_layers().saturating_sub(1) {
            let mut mask = UnitMap::filled(&layout, true);
            mask.layers[l] = plan.mask.layers[l].clone();
            if mask.layers[l].heads.iter().chain(&mask.layers[l].mlp).all(|k| *k) {
                continue;
            }
            let after = attribute_metric(
                net,
                tokens,
                Metric::Gxo,
                &AttributeOptions {
                    mask: Some(&mask),
                    target: Some(base.target_token),
                    ..Default::default()
                },
            )?
            .scores(Metric::Gxo)?;
            for l2 in l + 1..layout.n_layers() {
                for kind in UnitKind::ALL {
                    let g = GroupRef::new(l2, kind);
                    for (a, b) in before.group(g).iter().zip(after.group(g)) {
                        let tol = 1e-12 * a.abs().max(1.0);
                        if b < &(a - tol) {
                            out.decreased += 1;
                        } else if b > &(a + tol) {
                            out.increased += 1;
                        } else {
                            out.unchanged += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Values above the last edge.
    pub overflow: usize,
    /// Values below the first edge.
    pub underflow: usize,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize, lo: f64, hi: f64) -> Self {
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
        let mut counts = vec![0; bins];
        let (mut overflow, mut underflow) = (0, 0);
        for &v in values {
            if v < lo {
                underflow += 1;
            } else if v > hi {
                overflow += 1;
            } else {
                let k = (((v - lo) / width) as usize).min(bins - 1);
                counts[k] += 1;
            }
        }
        Histogram {
            edges,
            counts,
            overflow,
            underflow,
        }
    }
}

/// Normal distribution truncated to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncNormalFit {
    pub mu: f64,
    pub sigma: f64,
    pub mean: f64,
    pub variance: f64,
    /// Relative mismatch of the matched moments.
    pub residual: f64,
}

/// Mean and variance of `N(mu, sigma^2)` truncated to `[0, 1]`.
pub fn truncnorm_moments(mu: f64, sigma: f64) -> (f64, f64) {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let (a, b) = ((0.0 - mu) / sigma, (1.0 - mu) / sigma);
    let z = n.cdf(b) - n.cdf(a);
    if !(z > 1e-300) {
        let edge = if mu > 1.0 { 1.0 } else { 0.0 };
        return (edge, 0.0);
    }
    let (pa, pb) = (n.pdf(a), n.pdf(b));
    let d = (pa - pb) / z;
    let mean = mu + sigma * d;
    let var = sigma * sigma * (1.0 + (a * pa - b * pb) / z - d * d);
    (mean, var.max(0.0))
}

/// Moment-matching fit of a `[0, 1]`-truncated normal (Nelder-Mead over
/// `(mu, ln sigma)`). `None` for fewer than two values or zero variance.
pub fn fit_truncated_normal(values: &[f64]) -> Option<TruncNormalFit> {
    let inside: Vec<f64> = values.iter().copied().filter(|v| (0.0..=1.0).contains(v)).collect();
    if inside.len() < 2 {
        return None;
    }
    let n = inside.len() as f64;
    let mean = inside.iter().sum::<f64>() / n;
    let var = inside.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return None;
    }
    let loss = |p: &[f64; 2]| {
        let (m, v) = truncnorm_moments(p[0], p[1].exp());
        ((m - mean) / mean.abs().max(1e-3)).powi(2) + ((v - var) / var).powi(2)
    };
    let best = nelder_mead(loss, [mean, var.sqrt().ln()], 0.2, 2000);
    let (mu, sigma) = (best[0], best[1].exp());
    Some(TruncNormalFit {
        mu,
        sigma,
        mean,
        variance: var,
        residual: loss(&best).sqrt(),
    })
}

fn nelder_mead(f: impl Fn(&[f64; 2]) -> f64, start: [f64; 2], step: f64, iters: usize) -> [f64; 2] {
    let mut s = [
        start,
        [start[0] + step, start[1]],
        [start[0], start[1] + step],
    ];
    let mut fs = s.map(|p| f(&p));
    for _ in 0..iters {
        let mut idx = [0, 1, 2];
        idx.sort_by(|&a, &b| fs[a].total_cmp(&fs[b]));
        s = idx.map(|i| s[i]);
        fs = idx.map(|i| fs[i]);
        if (fs[2] - fs[0]).abs() < 1e-16 {
            break;
        }
        let c = [(s[0][0] + s[1][0]) / 2.0, (s[0][1] + s[1][1]) / 2.0];
        let at = |t: f64| [c[0] + t * (s[2][0] - c[0]), c[1] + t * (s[2][1] - c[1])];
        let r = at(-1.0);
        let fr = f(&r);
        if fr < fs[0] {
            let e = at(-2.0);
            let fe = f(&e);
            (s[2], fs[2]) = if fe < fr { (e, fe) } else { (r, fr) };
        } else if fr < fs[1] {
            (s[2], fs[2]) = (r, fr);
        } else {
            let k = if fr < fs[2] { at(-0.5) } else { at(0.5) };
            let fk = f(&k);
            if fk < fs[2].min(fr) {
                (s[2], fs[2]) = (k, fk);
            } else {
                for j in 1..3 {
                    s[j] = [(s[j][0] + s[0][0]) / 2.0, (s[j][1] + s[0][1]) / 2.0];
                    fs[j] = f(&s[j]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&a, &b| fs[a].total_cmp(&fs[b])).unwrap();
    s[best]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDistribution {
    pub samples: Vec<ErrorSample>,
    pub histogram: Histogram,
    /// Mean raw error.
    pub mean: f64,
    /// Mean of `upper_bound / 2`.
    pub half_upper_mean: f64,
    /// Mean normalized error (samples with a zero bound excluded).
    pub normalized_mean: Option<f64>,
    pub fit: Option<TruncNormalFit>,
    /// Set when every error is zero.
    pub degenerate: bool,
    pub lower_ok: usize,
    pub linearized_ok: usize,
    pub empirical_ok: usize,
}

/// Activation ratios from which the deactivation count `m` is drawn.
pub const SAMPLE_ARS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Monte Carlo over (prompt, first group, unit, deeper group, AR) with a
/// fixed seed; `m` is the number of units the AR deactivates in the deeper
/// group.
pub fn error_distribution<N: UnitNetwork + ?Sized>(
    net: &N,
    prompts: &[Vec<usize>],
    samples: usize,
    seed: u64,
    metric: Metric,
) -> Result<ErrorDistribution> {
    if samples < 1 || prompts.is_empty() {
        return Err(Error::Invalid(
            "error distribution needs prompts and at least one sample".into(),
        ));
    }
    let layout = net.layout();
    let groups = layout.groups();
    let pairs: Vec<(GroupRef, GroupRef)> = groups
        .iter()
        .flat_map(|&a| groups.iter().filter(move |b| b.layer > a.layer).map(move |&b| (a, b)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Invalid("need at least two layers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bases: Vec<Option<AttributionReport>> = vec![None; prompts.len()];
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let p = rng.random_range(0..prompts.len());
        let &(l1, l2) = pairs.choose(&mut rng).expect("non-empty");
        let unit = rng.random_range(0..layout.count(l1));
        let ar = *SAMPLE_ARS.choose(&mut rng).expect("non-empty");
        let n2 = layout.count(l2);
        let m = n2 - ar_to_count(ar, n2)?;
        if bases[p].is_none() {
            bases[p] = Some(attribute_metric(
                net,
                &prompts[p],
                metric,
                &AttributeOptions::default(),
            )?);
        }
        let base = bases[p].as_ref().expect("filled");
        out.push(error_from_base(net, &prompts[p], base, l1, unit, l2, m, metric)?);
    }
    Ok(summarize(out))
}

pub fn summarize(samples: Vec<ErrorSample>) -> ErrorDistribution {
    let n = samples.len().max(1) as f64;
    let normalized: Vec<f64> = samples.iter().filter_map(ErrorSample::normalized).collect();
    let checks: Vec<BoundCheck> = samples.iter().map(bound_check).collect();
    ErrorDistribution {
        histogram: Histogram::new(&normalized, 20, 0.0, 1.0),
        mean: samples.iter().map(|s| s.error).sum::<f64>() / n,
        half_upper_mean: samples.iter().map(|s| 0.5 * s.upper_bound).sum::<f64>() / n,
        normalized_mean: (!normalized.is_empty())
            .then(|| normalized.iter().sum::<f64>() / normalized.len() as f64),
        fit: fit_truncated_normal(&normalized),
        degenerate: samples.iter().all(|s| s.error == 0.0),
        lower_ok: checks.iter().filter(|c| c.lower_ok).count(),
        linearized_ok: checks.iter().filter(|c| c.linearized_ok).count(),
        empirical_ok: checks.iter().filter(|c| c.empirical_ok).count(),
        samples,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreChange {
    pub ar: f64,
    pub kind: UnitKind,
    /// Mean `|S_after - S_before|` over units the one-shot plan keeps.
    pub mean_abs_change: f64,
    /// The same change relative to the mean `|S_before|` of those units.
    pub mean_rel_change: f64,
    /// Jaccard similarity of the deactivated sets of the one-shot and the
    /// iterative plan.
    pub jaccard: f64,
}

impl ScoreChange {
    /// Share of deactivation decisions that recomputation changes.
    pub fn impact(&self) -> f64 {
        1.0 - self.jaccard
    }
}

/// Jaccard similarity; two empty sets are identical.
pub fn jaccard<T: Eq + std::hash::Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// Stale versus recomputed scores across an AR grid, per unit kind.
pub fn score_change_vs_ar<N: UnitNetwork + ?Sized>(
    net: &N,
    prompts: &[Vec<usize>],
    ar_grid: &[f64],
    metric: Metric,
) -> Result<Vec<ScoreChange>> {
    if prompts.is_empty() {
        return Err(Error::Invalid("score change needs at least one prompt".into()));
    }
    let layout = net.layout();
    let mut rows = Vec::new();
    for &ar in ar_grid {
        ar_to_count(ar, 1)?;
        let kinds: Vec<UnitKind> = UnitKind::ALL
            .into_iter()
            .filter(|k| layout.groups().iter().any(|g| g.kind == *k))
            .collect();
        let mut abs_sum = vec![0.0; kinds.len()];
        let mut base_sum = vec![0.0; kinds.len()];
        let mut count = vec![0usize; kinds.len()];
        let mut jac = vec![0.0; kinds.len()];
        for tokens in prompts {
            let base = attribute_metric(net, tokens, metric, &AttributeOptions::default())?;
            let plan = select_plan(&base, metric, ar, Scope::All)?;
            let after = attribute_metric(
                net,
                tokens,
                metric,
                &AttributeOptions {
                    mask: Some(&plan.mask),
                    target: Some(base.target_token),
                    ..Default::default()
                },
            )?;
            let iter = select_plan_iterative(net, tokens, metric, ar, Scope::All, crate::attribution::DEFAULT_IG_STEPS)?;
            let (s0, s1) = (base.scores(metric)?, after.scores(metric)?);
            for (k, kind) in kinds.iter().enumerate() {
                let mut stale = HashSet::new();
                let mut fresh = HashSet::new();
                for g in layout.groups().into_iter().filter(|g| g.kind == *kind) {
                    for (j, keep) in plan.mask.group(g).iter().enumerate() {
                        if *keep {
                            abs_sum[k] += (s1.group(g)[j] - s0.group(g)[j]).abs();
                            base_sum[k] += s0.group(g)[j].abs();
                            count[k] += 1;
                        } else {
                            stale.insert((g.layer, j));
                        }
                        if !iter.mask.group(g)[j] {
                            fresh.insert((g.layer, j));
                        }
                    }
                }
                jac[k] += jaccard(&stale, &fresh);
            }
        }
        for (k, kind) in kinds.iter().enumerate() {
            let c = count[k].max(1) as f64;
            rows.push(ScoreChange {
                ar,
                kind: *kind,
                mean_abs_change: abs_sum[k] / c,
                mean_rel_change: if base_sum[k] > 0.0 {
                    abs_sum[k] / base_sum[k]
                } else {
                    0.0
                },
                jaccard: jac[k] / prompts.len() as f64,
            });
        }
    }
    Ok(rows)
}

pub fn write_error_samples_csv<W: Write>(samples: &[ErrorSample], mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "layer_l1,kind_l1,unit_i,layer_l2,kind_l2,m,error,linearized_change,upper_bound,rank_overlap,lower_ok,linearized_ok,empirical_ok"
    )?;
    for s in samples {
        let c = bound_check(s);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.layer_l1,
            s.kind_l1,
            s.unit_i,
            s.downstream_layer_l2,
            s.kind_l2,
            s.m_deactivated,
            s.error,
            s.linearized_change,
            s.upper_bound,
            s.rank_overlap,
            c.lower_ok,
            c.linearized_ok,
            c.empirical_ok
        )?;
    }
    Ok(())
}

pub fn write_conservation_csv<W: Write>(rows: &[Conservation], mut w: W) -> std::io::Result<()> {
    writeln!(w, "l1,l2,s_l1,s_l2,rel_gap")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.l1, r.l2, r.s_l1, r.s_l2, r.rel_gap)?;
    }
    Ok(())
}

pub fn write_sign_consistency_csv<W: Write>(
    rows: &[SignConsistency],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "ar,decreased,increased,unchanged,fraction_decreased")?;
    for r in rows {
        let f = r
            .fraction_decreased()
            .map_or_else(|| "nan".to_string(), |v| v.to_string());
        writeln!(w, "{},{},{},{},{f}", r.ar, r.decreased, r.increased, r.unchanged)?;
    }
    Ok(())
}

pub fn write_score_change_csv<W: Write>(rows: &[ScoreChange], mut w: W) -> std::io::Result<()> {
    writeln!(w, "ar,kind,mean_abs_change,mean_rel_change,jaccard,impact")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.ar,
            r.kind,
            r.mean_abs_change,
            r.mean_rel_change,
            r.jaccard,
            r.impact()
        )?;
    }
    Ok(())
}
