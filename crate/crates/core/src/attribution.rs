//! Per-unit attribution scores.
//!
//! The objective F is the log-probability of the greedy token at the current
//! position. Scores are computed per (layer, kind) vector from unit outputs
//! `x` and gradients `dF/dx` read at that position.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{argmax, GroupRef, Pass, PassOptions, UnitKind, UnitMap, UnitNetwork};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Magnitude,
    Gradient,
    Gxo,
    Snip,
    Fisher,
    Ig,
    CorrectedGxo,
    /// `|gxo| + C`, offered for sensitivity studies.
    CorrectedAbsGxo,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Magnitude,
        Metric::Gradient,
        Metric::Gxo,
        Metric::Snip,
        Metric::Fisher,
        Metric::Ig,
        Metric::CorrectedGxo,
        Metric::CorrectedAbsGxo,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Magnitude => "magnitude",
            Metric::Gradient => "gradient",
            Metric::Gxo => "gxo",
            Metric::Snip => "snip",
            Metric::Fisher => "fisher",
            Metric::Ig => "ig",
            Metric::CorrectedGxo => "corrected_gxo",
            Metric::CorrectedAbsGxo => "corrected_abs_gxo",
        }
    }

    /// Whether the metric needs unit gradients.
    pub fn needs_gradient(&self) -> bool {
        !matches!(self, Metric::Magnitude)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMetric(s.to_string()))
    }
}

/// Outputs, gradients and scores of one (layer, kind) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GroupScores {
    pub outputs: Vec<f64>,
    pub gradients: Vec<f64>,
    pub scores: BTreeMap<String, Vec<f64>>,
}

impl GroupScores {
    pub fn score(&self, metric: Metric) -> Option<&[f64]> {
        self.scores.get(metric.as_str()).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LayerReport {
    pub heads: GroupScores,
    pub mlp: GroupScores,
}

impl LayerReport {
    pub fn get(&self, kind: UnitKind) -> &GroupScores {
        match kind {
            UnitKind::Head => &self.heads,
            UnitKind::Mlp => &self.mlp,
        }
    }

    pub fn get_mut(&mut self, kind: UnitKind) -> &mut GroupScores {
        match kind {
            UnitKind::Head => &mut self.heads,
            UnitKind::Mlp => &mut self.mlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub layers: Vec<LayerReport>,
    pub objective_value: f64,
    pub token_position: usize,
    /// Greedy token whose log-probability is the objective.
    pub target_token: usize,
}

impl AttributionReport {
    /// Builds a report from outputs and gradients, filling every metric that
    /// derives from them.
    pub fn from_vectors(
        outputs: &UnitMap<f64>,
        gradients: &UnitMap<f64>,
        objective_value: f64,
        token_position: usize,
        target_token: usize,
    ) -> Result<Self> {
        outputs.layout().check(gradients)?;
        let mut layers = Vec::with_capacity(outputs.layers.len());
        for (o, g) in outputs.layers.iter().zip(&gradients.layers) {
            layers.push(LayerReport {
                heads: group_scores(&o.heads, &g.heads)?,
                mlp: group_scores(&o.mlp, &g.mlp)?,
            });
        }
        Ok(AttributionReport {
            layers,
            objective_value,
            token_position,
            target_token,
        })
    }

    pub fn group(&self, g: GroupRef) -> &GroupScores {
        self.layers[g.layer].get(g.kind)
    }

    pub fn outputs(&self) -> UnitMap<f64> {
        self.collect(|g| Some(&g.outputs)).expect("outputs present")
    }

    pub fn gradients(&self) -> UnitMap<f64> {
        self.collect(|g| Some(&g.gradients)).expect("gradients present")
    }

    /// Score map for `metric`, or `MissingMetric` if any group lacks it.
    pub fn scores(&self, metric: Metric) -> Result<UnitMap<f64>> {
        self.collect(|g| g.scores.get(metric.as_str()))
            .ok_or_else(|| Error::MissingMetric(metric.to_string()))
    }

    fn collect<'a>(&'a self, f: impl Fn(&'a GroupScores) -> Option<&'a Vec<f64>>) -> Option<UnitMap<f64>> {
        let mut out = UnitMap { layers: Vec::new() };
        for l in &self.layers {
            out.layers.push(crate::network::UnitRow {
                heads: f(&l.heads).cloned()?,
                mlp: f(&l.mlp).cloned()?,
            });
        }
        Some(out)
    }

    pub fn insert_scores(&mut self, metric: Metric, scores: &UnitMap<f64>) -> Result<()> {
        self.outputs().layout().check(scores)?;
        for (l, row) in scores.layers.iter().enumerate() {
            for kind in UnitKind::ALL {
                self.layers[l]
                    .get_mut(kind)
                    .scores
                    .insert(metric.to_string(), row.get(kind).to_vec());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CSV rows `layer,kind,unit,output,grad,metric,score`, one per score.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "layer,kind,unit,output,grad,metric,score")?;
        for (l, layer) in self.layers.iter().enumerate() {
            for kind in UnitKind::ALL {
                let g = layer.get(kind);
                for (metric, scores) in &g.scores {
                    for (i, s) in scores.iter().enumerate() {
                        writeln!(
                            w,
                            "{l},{kind},{i},{},{},{metric},{s}",
                            g.outputs[i], g.gradients[i]
                        )?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn group_scores(x: &[f64], g: &[f64]) -> Result<GroupScores> {
    let gxo: Vec<f64> = x.iter().zip(g).map(|(a, b)| a * b).collect();
    let c = corrective_term(x, g)?;
    let mut scores = BTreeMap::new();
    scores.insert(
        Metric::Magnitude.to_string(),
        x.iter().map(|v| v.abs()).collect(),
    );
    scores.insert(
        Metric::Gradient.to_string(),
        g.iter().map(|v| v.abs()).collect(),
    );
    scores.insert(
        Metric::Snip.to_string(),
        gxo.iter().map(|v| v.abs()).collect(),
    );
    scores.insert(Metric::Fisher.to_string(), gxo.iter().map(|v| v * v).collect());
    scores.insert(
        Metric::CorrectedGxo.to_string(),
        gxo.iter().zip(&c).map(|(a, b)| a + b).collect(),
    );
    scores.insert(
        Metric::CorrectedAbsGxo.to_string(),
        gxo.iter().zip(&c).map(|(a, b)| a.abs() + b).collect(),
    );
    scores.insert(Metric::Gxo.to_string(), gxo);
    Ok(GroupScores {
        outputs: x.to_vec(),
        gradients: g.to_vec(),
        scores,
    })
}

/// Log-probability of the argmax entry of a single row of logits.
pub fn scalar_objective(logits: &Tensor) -> Result<Tensor> {
    target_objective(logits, None)
}

/// Log-probability of `target` (the argmax when `None`) in a single row of
/// logits.
pub fn target_objective(logits: &Tensor, target: Option<usize>) -> Result<Tensor> {
    let rows = match logits.shape() {
        [_] => 1,
        [r, _] => *r,
        s => s.iter().rev().skip(1).product(),
    };
    if rows != 1 {
        return Err(Error::Tensor(TensorError::Invalid {
            op: crate::tensor::OpKind::LogSoftmaxPick,
            msg: format!("objective needs one row of logits, got shape {:?}", logits.shape()),
        }));
    }
    let target = match target {
        Some(t) => t,
        None => argmax(logits.values()).ok_or_else(|| Error::Invalid("empty logits".into()))?,
    };
    Ok(logits.log_softmax_pick(&[target])?)
}

/// `C(i) = 0.5 * |x_i| * ||grad||_2` for one unit vector.
pub fn corrective_term(outputs: &[f64], gradients: &[f64]) -> Result<Vec<f64>> {
    if outputs.len() != gradients.len() {
        return Err(Error::Invalid(format!(
            "{} outputs but {} gradients",
            outputs.len(),
            gradients.len()
        )));
    }
    let norm = gradients.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok(outputs.iter().map(|x| 0.5 * x.abs() * norm).collect())
}

fn report_from_pass(pass: &Pass, grads: &UnitMap<f64>, tokens: &[usize], target: Option<usize>) -> Result<AttributionReport> {
    AttributionReport::from_vectors(
        &pass.units,
        grads,
        pass.objective.item(),
        tokens.len().saturating_sub(1),
        target.or_else(|| pass.argmax()).unwrap_or(0),
    )
}

/// One forward and one backward pass; every non-IG metric is populated.
pub fn attribute<N: UnitNetwork + ?Sized>(
    net: &N,
    tokens: &[usize],
    metric: Metric,
) -> Result<AttributionReport> {
    attribute_with(net, tokens, metric, None, None)
}

/// As [`attribute`], with some units already deactivated and optionally a
/// fixed objective token.
pub fn attribute_with<N: UnitNetwork + ?Sized>(
    net: &N,
    tokens: &[usize],
    metric: Metric,
    mask: Option<&UnitMap<bool>>,
    target: Option<usize>,
) -> Result<AttributionReport> {
    if metric == Metric::Ig {
        return Err(Error::Invalid(
            "ig needs an interpolation count; use attribute_ig".into(),
        ));
    }
    let opts = PassOptions {
        target,
        ..PassOptions::tracked(mask)
    };
    let pass = net.forward_pass(tokens, &opts)?;
    net.backward_pass(&pass)?;
    report_from_pass(&pass, &pass.unit_gradients(), tokens, target)
}

/// Corrected GxO report (same cost as [`attribute`]).
pub fn attribute_corrected<N: UnitNetwork + ?Sized>(
    net: &N,
    tokens: &[usize],
) -> Result<AttributionReport> {
    attribute(net, tokens, Metric::CorrectedGxo)
}

/// Unit outputs only, from a single untracked forward pass. Only the
/// magnitude score is filled; gradients are reported as zero.
pub fn attribute_magnitude<N: UnitNetwork + ?Sized>(
    net: &N,
    tokens: &[usize],
    mask: Option<&UnitMap<bool>>,
    target: Option<usize>,
) -> Result<AttributionReport> {
    let opts = PassOptions {
        target,
        ..PassOptions::masked(mask)
    };
    let pass = net.forward_pass(tokens, &opts)?;
    let zeros = pass.units.map(|_| 0.0);
    let mut report = report_from_pass(&pass, &zeros, tokens, target)?;
    for layer in &mut report.layers {
        for kind in UnitKind::ALL {
            layer
                .get_mut(kind)
                .scores
                .retain(|k, _| k == Metric::Magnitude.as_str());
        }
    }
    Ok(report)
}

/// Integrated gradients with `n` right-Riemann steps along a path that
/// scales every unit output at the current position by `k/n`.
///
/// The score of unit `i` is `(1/n) * sum_k x_i(k/n) * dF/dz_i(k/n)` where
/// `z_i` is the scaled output. Exactly `n` forward/backward pairs; outputs and
/// gradients of the report come from the unscaled step, which runs first and
/// fixes the objective token for the rest of the path.
pub fn attribute_ig<N: UnitNetwork + ?Sized>(
    net: &N,
    tokens: &[usize],
    n: usize,
) -> Result<AttributionReport> {
    attribute_ig_with(net, tokens, n, None, None)
}

pub fn attribute_ig_with<N: UnitNetwork + ?Sized>(
    net: &N,
    tokens: &[usize],
    n: usize,
    mask: Option<&UnitMap<bool>>,
    target: Option<usize>,
) -> Result<AttributionReport> {
    if n < 1 {
        return Err(Error::Invalid("ig needs at least one interpolation step".into()));
    }
    let mut acc: Option<UnitMap<f64>> = None;
    let mut first: Option<(Pass, UnitMap<f64>)> = None;
    let mut target = target;
    for k in (1..=n).rev() {
        let gate = k as f64 / n as f64;
        let opts = PassOptions {
            mask,
            gate,
            track: true,
            target,
        };
        let pass = net.forward_pass(tokens, &opts)?;
        net.backward_pass(&pass)?;
        let grads = pass.unit_gradients();
        let acc = acc.get_or_insert_with(|| pass.units.map(|_| 0.0));
        for (a, (x, g)) in acc
            .layers
            .iter_mut()
            .zip(pass.units.layers.iter().zip(&grads.layers))
        {
            for kind in UnitKind::ALL {
                for ((s, xi), gi) in a.get_mut(kind).iter_mut().zip(x.get(kind)).zip(g.get(kind)) {
                    *s += xi * gi / gate / n as f64;
                }
            }
        }
        if first.is_none() {
            target = target.or_else(|| pass.argmax());
            first = Some((pass, grads));
        }
    }
    let (pass, grads) = first.expect("n >= 1");
    let mut report = report_from_pass(&pass, &grads, tokens, target)?;
    report.insert_scores(Metric::Ig, &acc.expect("n >= 1"))?;
    Ok(report)
}

/// Interpolation steps used for IG when none is given.
pub const DEFAULT_IG_STEPS: usize = 50;

/// Optional inputs to [`attribute_metric`].
#[derive(Debug, Clone, Copy)]
pub struct AttributeOptions<'a> {
    pub mask: Option<&'a UnitMap<bool>>,
    pub target: Option<usize>,
    pub ig_steps: usize,
}

impl Default for AttributeOptions<'_> {
    fn default() -> Self {
        AttributeOptions {
            mask: None,
            target: None,
            ig_steps: DEFAULT_IG_STEPS,
        }
    }
}

/// Cheapest attribution that yields `metric`: one forward pass for
/// magnitude, `ig_steps` forward/backward pairs for IG, one pair otherwise.
pub fn attribute_metric<N: UnitNetwork + ?Sized>(
    net: &N,
    tokens: &[usize],
    metric: Metric,
    opts: &AttributeOptions<'_>,
) -> Result<AttributionReport> {
    match metric {
        Metric::Magnitude => attribute_magnitude(net, tokens, opts.mask, opts.target),
        Metric::Ig => attribute_ig_with(net, tokens, opts.ig_steps, opts.mask, opts.target),
        m => attribute_with(net, tokens, m, opts.mask, opts.target),
    }
}

#[cfg(test)]
mod tests;
