//! Shared vocabulary for networks whose units can be masked and attributed.
//!
//! Both the toy transformer and the dense chain networks used to check the
//! attribution identities implement [`UnitNetwork`]. Every layer owns two unit
//! groups: attention heads and MLP neurons (either may be empty).

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Head,
    Mlp,
}

impl UnitKind {
    pub const ALL: [UnitKind; 2] = [UnitKind::Head, UnitKind::Mlp];

    pub fn as_str(&self) -> &'static str {
        match self {
            UnitKind::Head => "head",
            UnitKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UnitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" | "heads" | "attention" => Ok(UnitKind::Head),
            "mlp" => Ok(UnitKind::Mlp),
            other => Err(Error::Invalid(format!("unknown unit kind `{other}`"))),
        }
    }
}

/// One layer's worth of per-unit values, split by kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct UnitRow<T> {
    pub heads: Vec<T>,
    pub mlp: Vec<T>,
}

impl<T> UnitRow<T> {
    pub fn get(&self, kind: UnitKind) -> &[T] {
        match kind {
            UnitKind::Head => &self.heads,
            UnitKind::Mlp => &self.mlp,
        }
    }

    pub fn get_mut(&mut self, kind: UnitKind) -> &mut Vec<T> {
        match kind {
            UnitKind::Head => &mut self.heads,
            UnitKind::Mlp => &mut self.mlp,
        }
    }
}

/// Per-layer, per-kind vectors (unit outputs, gradients, scores, masks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct UnitMap<T> {
    pub layers: Vec<UnitRow<T>>,
}

impl<T: Clone> UnitMap<T> {
    pub fn filled(layout: &UnitLayout, value: T) -> Self {
        UnitMap {
            layers: layout
                .layers
                .iter()
                .map(|l| UnitRow {
                    heads: vec![value.clone(); l.heads],
                    mlp: vec![value.clone(); l.mlp],
                })
                .collect(),
        }
    }
}

impl<T> UnitMap<T> {
    pub fn group(&self, g: GroupRef) -> &[T] {
        self.layers[g.layer].get(g.kind)
    }

    pub fn group_mut(&mut self, g: GroupRef) -> &mut Vec<T> {
        self.layers[g.layer].get_mut(g.kind)
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> UnitMap<U> {
        UnitMap {
            layers: self
                .layers
                .iter()
                .map(|r| UnitRow {
                    heads: r.heads.iter().map(&mut f).collect(),
                    mlp: r.mlp.iter().map(&mut f).collect(),
                })
                .collect(),
        }
    }

    /// Shape of this map as a layout.
    pub fn layout(&self) -> UnitLayout {
        UnitLayout {
            layers: self
                .layers
                .iter()
                .map(|r| LayerUnits {
                    heads: r.heads.len(),
                    mlp: r.mlp.len(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerUnits {
    pub heads: usize,
    pub mlp: usize,
}

impl LayerUnits {
    pub fn count(&self, kind: UnitKind) -> usize {
        match kind {
            UnitKind::Head => self.heads,
            UnitKind::Mlp => self.mlp,
        }
    }
}

/// A `(layer, kind)` unit group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupRef {
    pub layer: usize,
    pub kind: UnitKind,
}

impl GroupRef {
    pub fn new(layer: usize, kind: UnitKind) -> Self {
        GroupRef { layer, kind }
    }
}

impl fmt::Display for GroupRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitLayout {
    pub layers: Vec<LayerUnits>,
}

impl UnitLayout {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Non-empty groups in evaluation order (heads before MLP within a layer).
    pub fn groups(&self) -> Vec<GroupRef> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, units)| {
                UnitKind::ALL
                    .into_iter()
                    .filter(move |k| units.count(*k) > 0)
                    .map(move |k| GroupRef::new(l, k))
            })
            .collect()
    }

    pub fn count(&self, g: GroupRef) -> usize {
        self.layers.get(g.layer).map_or(0, |l| l.count(g.kind))
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.heads + l.mlp).sum()
    }

    /// Checks that `map` has exactly this layout, naming the first bad layer.
    pub fn check<T>(&self, map: &UnitMap<T>) -> Result<()> {
        if map.layers.len() != self.layers.len() {
            return Err(Error::PlanMismatch {
                layer: map.layers.len().min(self.layers.len()),
                msg: format!(
                    "plan has {} layers, model has {}",
                    map.layers.len(),
                    self.layers.len()
                ),
            });
        }
        for (l, (want, row)) in self.layers.iter().zip(&map.layers).enumerate() {
            if row.heads.len() != want.heads || row.mlp.len() != want.mlp {
                return Err(Error::PlanMismatch {
                    layer: l,
                    msg: format!(
                        "expected {} heads / {} mlp units, got {} / {}",
                        want.heads,
                        want.mlp,
                        row.heads.len(),
                        row.mlp.len()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Forward/backward pass counts. Monotone; shared across threads.
#[derive(Debug, Default)]
pub struct PassCounter {
    forward: AtomicU64,
    backward: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PassCount {
    pub forward: u64,
    pub backward: u64,
}

impl PassCount {
    pub fn total(&self) -> u64 {
        self.forward + self.backward
    }

    pub fn since(&self, earlier: PassCount) -> PassCount {
        PassCount {
            forward: self.forward - earlier.forward,
            backward: self.backward - earlier.backward,
        }
    }
}

impl PassCounter {
    pub fn record_forward(&self) {
        self.forward.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_backward(&self) {
        self.backward.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> PassCount {
        PassCount {
            forward: self.forward.load(Ordering::Relaxed),
            backward: self.backward.load(Ordering::Relaxed),
        }
    }
}

impl Clone for PassCounter {
    fn clone(&self) -> Self {
        let s = self.snapshot();
        PassCounter {
            forward: AtomicU64::new(s.forward),
            backward: AtomicU64::new(s.backward),
        }
    }
}

/// How a single forward pass is gated.
#[derive(Debug, Clone, Copy)]
pub struct PassOptions<'a> {
    /// Keep-mask; masked units are zeroed at every position.
    pub mask: Option<&'a UnitMap<bool>>,
    /// Scales every unit output at the current (last) position. Used for the
    /// integrated-gradients path; 1.0 otherwise.
    pub gate: f64,
    /// Record the graph so that unit gradients can be read after backward.
    pub track: bool,
    /// Token whose log-probability is the objective; the argmax when unset.
    pub target: Option<usize>,
}

impl Default for PassOptions<'_> {
    fn default() -> Self {
        PassOptions {
            mask: None,
            gate: 1.0,
            track: false,
            target: None,
        }
    }
}

impl<'a> PassOptions<'a> {
    pub fn masked(mask: Option<&'a UnitMap<bool>>) -> Self {
        PassOptions {
            mask,
            ..Default::default()
        }
    }

    pub fn tracked(mask: Option<&'a UnitMap<bool>>) -> Self {
        PassOptions {
            mask,
            track: true,
            ..Default::default()
        }
    }
}

/// Graph handles of one layer's unit outputs (pre-mask, pre-gate).
///
/// Head tensors are `[T, d_head]`, the MLP tensor `[T, d_ff]`; the current
/// position is the last row.
#[derive(Debug, Clone, Default)]
pub struct LayerNodes {
    pub heads: Vec<Tensor>,
    pub mlp: Option<Tensor>,
}

/// Result of one forward pass.
pub struct Pass {
    /// Scalar objective F.
    pub objective: Tensor,
    /// Logits at the current position (empty for scalar readouts).
    pub logits: Vec<f64>,
    /// Pre-mask unit outputs at the current position.
    pub units: UnitMap<f64>,
    pub nodes: Vec<LayerNodes>,
    pub gate: f64,
}

impl Pass {
    /// Greedy token at the current position.
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.logits)
    }

    /// `dF/dx_i` for every unit, after `objective.backward()`.
    ///
    /// For heads the scalar output is the L2 norm of the head vector, so the
    /// derivative is taken along the head's direction: `∇_v F · v / |v|`.
    pub fn unit_gradients(&self) -> UnitMap<f64> {
        let mut out = UnitMap {
            layers: Vec::with_capacity(self.nodes.len()),
        };
        for nodes in &self.nodes {
            let heads = nodes
                .heads
                .iter()
                .map(|h| {
                    let (v, g) = last_row(h);
                    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        0.0
                    } else {
                        v.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / norm
                    }
                })
                .collect();
            let mlp = nodes.mlp.as_ref().map(|m| last_row(m).1).unwrap_or_default();
            out.layers.push(UnitRow { heads, mlp });
        }
        out
    }
}

fn last_row(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let cols = *t.shape().last().unwrap();
    let n = t.numel();
    let g = t.grad();
    (
        t.values()[n - cols..].to_vec(),
        g[n - cols..].to_vec(),
    )
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in v.iter().enumerate() {
        match best {
            Some(b) if v[b] >= *x => {}
            _ => best = Some(i),
        }
    }
    best
}

/// A network whose units can be masked, gated and attributed.
pub trait UnitNetwork {
    fn layout(&self) -> UnitLayout;

    fn counter(&self) -> &PassCounter;

    /// One forward pass; increments the forward counter.
    fn forward_pass(&self, tokens: &[usize], opts: &PassOptions<'_>) -> Result<Pass>;

    /// Backward from the pass objective; increments the backward counter.
    fn backward_pass(&self, pass: &Pass) -> Result<()> {
        pass.objective.backward()?;
        self.counter().record_backward();
        Ok(())
    }
}
