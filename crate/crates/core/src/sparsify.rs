//! Activation plans: which units stay active for one decoding step.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_metric, AttributeOptions, AttributionReport, Metric};
use crate::error::{Error, Result};
use crate::network::{GroupRef, UnitKind, UnitLayout, UnitMap, UnitNetwork, UnitRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    All,
    MlpOnly,
    AttentionOnly,
}

impl Scope {
    pub fn includes(&self, kind: UnitKind) -> bool {
        match self {
            Scope::All => true,
            Scope::MlpOnly => kind == UnitKind::Mlp,
            Scope::AttentionOnly => kind == UnitKind::Head,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::MlpOnly => "mlp_only",
            Scope::AttentionOnly => "attention_only",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scope::All),
            "mlp_only" | "mlp" => Ok(Scope::MlpOnly),
            "attention_only" | "attention" => Ok(Scope::AttentionOnly),
            o => Err(Error::Invalid(format!("unknown scope `{o}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    PerLayerRatio,
    UniformThreshold,
    Iterative,
}

impl PlanMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlanMode::PerLayerRatio => "per_layer_ratio",
            PlanMode::UniformThreshold => "uniform_threshold",
            PlanMode::Iterative => "iterative",
        }
    }
}

impl fmt::Display for PlanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_layer_ratio" => Ok(PlanMode::PerLayerRatio),
            "uniform_threshold" => Ok(PlanMode::UniformThreshold),
            "iterative" => Ok(PlanMode::Iterative),
            o => Err(Error::Invalid(format!("unknown plan mode `{o}`"))),
        }
    }
}

/// Keep-masks for every (layer, kind) plus how they were chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPlan {
    pub mask: UnitMap<bool>,
    pub metric: Metric,
    pub target_ar: f64,
    pub scope: Scope,
    pub mode: PlanMode,
    /// Threshold used by the uniform mode.
    pub tau: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    metric: Metric,
    ar: f64,
    scope: Scope,
    mode: PlanMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    realized_ar: f64,
    layers: Vec<PlanRow>,
}

#[derive(Serialize, Deserialize)]
struct PlanRow {
    heads: String,
    mlp: String,
}

fn bits(mask: &[bool]) -> String {
    mask.iter().map(|&k| if k { '1' } else { '0' }).collect()
}

fn parse_bits(s: &str, layer: usize) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            o => Err(Error::PlanMismatch {
                layer,
                msg: format!("invalid mask character {o:?}"),
            }),
        })
        .collect()
}

impl ActivationPlan {
    pub fn all_active(layout: &UnitLayout, metric: Metric, scope: Scope) -> Self {
        ActivationPlan {
            mask: UnitMap::filled(layout, true),
            metric,
            target_ar: 1.0,
            scope,
            mode: PlanMode::PerLayerRatio,
            tau: None,
        }
    }

    pub fn kept(&self, g: GroupRef) -> usize {
        self.mask.group(g).iter().filter(|k| **k).count()
    }

    /// Fraction of in-scope units kept.
    pub fn realized_ar(&self) -> f64 {
        let (mut kept, mut total) = (0usize, 0usize);
        for g in self.mask.layout().groups() {
            if self.scope.includes(g.kind) {
                kept += self.kept(g);
                total += self.mask.group(g).len();
            }
        }
        if total == 0 {
            1.0
        } else {
            kept as f64 / total as f64
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PlanFile {
            metric: self.metric,
            ar: self.target_ar,
            scope: self.scope,
            mode: self.mode,
            tau: self.tau,
            realized_ar: self.realized_ar(),
            layers: self
                .mask
                .layers
                .iter()
                .map(|r| PlanRow {
                    heads: bits(&r.heads),
                    mlp: bits(&r.mlp),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: PlanFile = serde_json::from_str(s)?;
        let mut mask = UnitMap {
            layers: Vec::with_capacity(file.layers.len()),
        };
        for (l, row) in file.layers.iter().enumerate() {
            mask.layers.push(UnitRow {
                heads: parse_bits(&row.heads, l)?,
                mlp: parse_bits(&row.mlp, l)?,
            });
        }
        Ok(ActivationPlan {
            mask,
            metric: file.metric,
            target_ar: file.ar,
            scope: file.scope,
            mode: file.mode,
            tau: file.tau,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ActivationPlan::from_json(&s)
    }
}

/// Units kept at activation ratio `ar` out of `n`: round half up, at least one.
pub fn ar_to_count(ar: f64, n: usize) -> Result<usize> {
    if !(ar > 0.0 && ar <= 1.0) {
        return Err(Error::Invalid(format!("activation ratio {ar} outside (0, 1]")));
    }
    if n == 0 {
        return Err(Error::Invalid("cannot plan an empty unit group".into()));
    }
    let k = (ar * n as f64 + 0.5 + 1e-9).floor() as usize;
    Ok(k.clamp(1, n))
}

/// Keeps the `k` highest scores; among equal scores the lower index is kept.
pub fn top_k_mask(scores: &[f64], k: usize) -> Vec<bool> {
    // -0.0 and 0.0 compare equal here so the index tie rule applies.
    let key = |i: usize| if scores[i] == 0.0 { 0.0 } else { scores[i] };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    let mut keep = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    keep
}

fn check_ar(ar: f64) -> Result<()> {
    ar_to_count(ar, 1).map(|_| ())
}

/// Same fraction of units in every in-scope (layer, kind) group.
pub fn select_plan(
    report: &AttributionReport,
    metric: Metric,
    ar: f64,
    scope: Scope,
) -> Result<ActivationPlan> {
    check_ar(ar)?;
    let scores = report.scores(metric)?;
    let layout = scores.layout();
    let mut mask = UnitMap::filled(&layout, true);
    for g in layout.groups() {
        if scope.includes(g.kind) {
            let s = scores.group(g);
            *mask.group_mut(g) = top_k_mask(s, ar_to_count(ar, s.len())?);
        }
    }
    Ok(ActivationPlan {
        mask,
        metric,
        target_ar: ar,
        scope,
        mode: PlanMode::PerLayerRatio,
        tau: None,
    })
}

/// Keeps every in-scope unit whose score is at least `tau`; a group left
/// empty keeps its single best unit.
pub fn select_plan_uniform(
    report: &AttributionReport,
    metric: Metric,
    tau: f64,
    scope: Scope,
) -> Result<ActivationPlan> {
    let scores = report.scores(metric)?;
    let layout = scores.layout();
    let mut mask = UnitMap::filled(&layout, true);
    for g in layout.groups() {
        if scope.includes(g.kind) {
            let s = scores.group(g);
            let mut keep: Vec<bool> = s.iter().map(|v| *v >= tau).collect();
            if !keep.iter().any(|k| *k) {
                keep = top_k_mask(s, 1);
            }
            *mask.group_mut(g) = keep;
        }
    }
    let mut plan = ActivationPlan {
        mask,
        metric,
        target_ar: 1.0,
        scope,
        mode: PlanMode::UniformThreshold,
        tau: Some(tau),
    };
    plan.target_ar = plan.realized_ar();
    Ok(plan)
}

/// Uniform threshold calibrated so that about `ar` of all in-scope units
/// pass it: `tau` is the `ar_to_count(ar, total)`-th largest score.
pub fn select_plan_global(
    report: &AttributionReport,
    metric: Metric,
    ar: f64,
    scope: Scope,
) -> Result<ActivationPlan> {
    check_ar(ar)?;
    let scores = report.scores(metric)?;
    let mut pool: Vec<f64> = scores
        .layout()
        .groups()
        .into_iter()
        .filter(|g| scope.includes(g.kind))
        .flat_map(|g| scores.group(g).to_vec())
        .collect();
    if pool.is_empty() {
        return Ok(ActivationPlan {
            mode: PlanMode::UniformThreshold,
            ..ActivationPlan::all_active(&scores.layout(), metric, scope)
        });
    }
    pool.sort_by(|a, b| b.total_cmp(a));
    let tau = pool[ar_to_count(ar, pool.len())? - 1];
    select_plan_uniform(report, metric, tau, scope)
}

/// Layer-by-layer selection, recomputing deeper attributions after each
/// layer's mask is applied.
///
/// The objective token is fixed to the unmasked greedy token. Attribution is
/// re-run only when an earlier layer actually lost units, so at `ar = 1` a
/// single attribution is consumed.
pub fn select_plan_iterative<N: UnitNetwork + ?Sized>(
    net: &N,
    tokens: &[usize],
    metric: Metric,
    ar: f64,
    scope: Scope,
    ig_steps: usize,
) -> Result<ActivationPlan> {
    check_ar(ar)?;
    let layout = net.layout();
    let mut mask = UnitMap::filled(&layout, true);
    let mut report = attribute_metric(
        net,
        tokens,
        metric,
        &AttributeOptions {
            ig_steps,
            ..Default::default()
        },
    )?;
    let target = Some(report.target_token);
    let mut stale = false;
    for l in 0..layout.n_layers() {
        if stale {
            report = attribute_metric(
                net,
                tokens,
                metric,
                &AttributeOptions {
                    mask: Some(&mask),
                    target,
                    ig_steps,
                },
            )?;
            stale = false;
        }
        let scores = report.scores(metric)?;
        for kind in UnitKind::ALL {
            let g = GroupRef::new(l, kind);
            let s = scores.group(g);
            if s.is_empty() || !scope.includes(kind) {
                continue;
            }
            let keep = top_k_mask(s, ar_to_count(ar, s.len())?);
            stale |= keep.iter().any(|k| !k);
            *mask.group_mut(g) = keep;
        }
    }
    Ok(ActivationPlan {
        mask,
        metric,
        target_ar: ar,
        scope,
        mode: PlanMode::Iterative,
        tau: None,
    })
}

#[cfg(test)]
mod tests;
