//! Dense feed-forward chains exposing every hidden layer as a unit group.
//!
//! These small networks make the attribution identities checkable exactly:
//! with a linear readout and bias-free ReLU (or identity) layers the
//! objective is positively homogeneous in every layer's outputs. The input is
//! looked up from a table by the last token id.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attribution::target_objective;
use crate::error::{Error, Result};
use crate::network::{
    LayerNodes, LayerUnits, Pass, PassCounter, PassOptions, UnitLayout, UnitMap, UnitNetwork,
    UnitRow,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainActivation {
    Identity,
    Relu,
    Gelu,
}

/// How the last hidden layer is turned into the scalar objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Readout {
    /// `F = r · x_last`.
    Linear(Vec<f64>),
    /// Logits `x_last · W (+ b)`, `F` = log-probability of the argmax class.
    LogProb {
        weight: Vec<f64>,
        bias: Option<Vec<f64>>,
        classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `[n_in, n_out]`.
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub activation: ChainActivation,
}

#[derive(Debug, Clone)]
pub struct MlpChain {
    pub inputs: Vec<Vec<f64>>,
    pub layers: Vec<DenseLayer>,
    pub readout: Readout,
    counter: PassCounter,
}

impl MlpChain {
    pub fn new(
        inputs: Vec<Vec<f64>>,
        layers: Vec<DenseLayer>,
        readout: Readout,
    ) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Invalid("chain needs at least one layer".into()))?;
        if inputs.is_empty() || inputs.iter().any(|x| x.len() != first.n_in) {
            return Err(Error::Invalid(format!(
                "every input must have {} features",
                first.n_in
            )));
        }
        let mut width = first.n_in;
        for (l, layer) in layers.iter().enumerate() {
            let bias_ok = layer.bias.as_ref().map_or(true, |b| b.len() == layer.n_out);
            if layer.n_in != width || layer.weight.len() != layer.n_in * layer.n_out || !bias_ok {
                return Err(Error::PlanMismatch {
                    layer: l,
                    msg: "dense layer dimensions are inconsistent".into(),
                });
            }
            width = layer.n_out;
        }
        let ok = match &readout {
            Readout::Linear(r) => r.len() == width,
            Readout::LogProb {
                weight,
                bias,
                classes,
            } => {
                weight.len() == width * classes
                    && bias.as_ref().map_or(true, |b| b.len() == *classes)
            }
        };
        if !ok {
            return Err(Error::Invalid("readout does not match the last layer".into()));
        }
        Ok(MlpChain {
            inputs,
            layers,
            readout,
            counter: PassCounter::default(),
        })
    }

    /// Random chain with Gaussian weights scaled by `1/sqrt(fan_in)`.
    pub fn random(
        widths: &[usize],
        activation: ChainActivation,
        bias: bool,
        n_inputs: usize,
        seed: u64,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Invalid("need an input width and at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| scale * std_normal.sample(&mut rng)).collect()
        };
        let inputs = (0..n_inputs).map(|_| draw(widths[0], 1.0)).collect();
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer {
                n_in: w[0],
                n_out: w[1],
                weight: draw(w[0] * w[1], 1.0 / (w[0] as f64).sqrt()),
                bias: bias.then(|| draw(w[1], 0.1)),
                activation,
            })
            .collect();
        let last = *widths.last().unwrap();
        let readout = Readout::Linear(draw(last, 1.0 / (last as f64).sqrt()));
        MlpChain::new(inputs, layers, readout)
    }

    pub fn with_readout(self, readout: Readout) -> Result<Self> {
        MlpChain::new(self.inputs, self.layers, readout)
    }

    fn input(&self, tokens: &[usize]) -> Result<&[f64]> {
        let id = *tokens
            .last()
            .ok_or_else(|| Error::Invalid("empty token sequence".into()))?;
        self.inputs
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Invalid(format!("input id {id} out of range")))
    }
}

impl UnitNetwork for MlpChain {
    fn layout(&self) -> UnitLayout {
        UnitLayout {
            layers: self
                .layers
                .iter()
                .map(|l| LayerUnits {
                    heads: 0,
                    mlp: l.n_out,
                })
                .collect(),
        }
    }

    fn counter(&self) -> &PassCounter {
        &self.counter
    }

    fn forward_pass(&self, tokens: &[usize], opts: &PassOptions<'_>) -> Result<Pass> {
        let layout = UnitNetwork::layout(self);
        if let Some(mask) = opts.mask {
            layout.check(mask)?;
        }
        let x0 = self.input(tokens)?;
        let mut x = if opts.track {
            Tensor::leaf(&[1, x0.len()], x0.to_vec())?
        } else {
            Tensor::new(&[1, x0.len()], x0.to_vec())?
        };
        let mut units = UnitMap {
            layers: Vec::with_capacity(self.layers.len()),
        };
        let mut nodes = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let w = Tensor::new(&[layer.n_in, layer.n_out], layer.weight.clone())?;
            let mut pre = x.matmul(&w)?;
            if let Some(b) = &layer.bias {
                pre = pre.add(&Tensor::new(&[layer.n_out], b.clone())?)?;
            }
            let act = match layer.activation {
                ChainActivation::Identity => pre,
                ChainActivation::Relu => pre.relu(),
                ChainActivation::Gelu => pre.gelu(),
            };
            let keep = opts.mask.map(|m| &m.layers[l].mlp);
            let mult: Vec<f64> = (0..layer.n_out)
                .map(|i| if keep.map_or(true, |k| k[i]) { opts.gate } else { 0.0 })
                .collect();
            x = if mult.iter().all(|&m| m == 1.0) {
                act.clone()
            } else {
                act.mul(&Tensor::new(&[layer.n_out], mult)?)?
            };
            units.layers.push(UnitRow {
                heads: Vec::new(),
                mlp: act.values().to_vec(),
            });
            nodes.push(LayerNodes {
                heads: Vec::new(),
                mlp: Some(act),
            });
        }
        let (objective, logits) = match &self.readout {
            Readout::Linear(r) => {
                let r = Tensor::new(&[r.len(), 1], r.clone())?;
                (x.matmul(&r)?.sum(), Vec::new())
            }
            Readout::LogProb {
                weight,
                bias,
                classes,
            } => {
                let width = weight.len() / classes;
                let mut logits = x.matmul(&Tensor::new(&[width, *classes], weight.clone())?)?;
                if let Some(b) = bias {
                    logits = logits.add(&Tensor::new(&[*classes], b.clone())?)?;
                }
                let values = logits.values().to_vec();
                (target_objective(&logits, opts.target)?, values)
            }
        };
        self.counter.record_forward();
        Ok(Pass {
            objective,
            logits,
            units,
            nodes,
            gate: opts.gate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_layers() {
        let layers = vec![DenseLayer {
            n_in: 2,
            n_out: 3,
            weight: vec![0.0; 5],
            bias: None,
            activation: ChainActivation::Relu,
        }];
        assert!(MlpChain::new(
            vec![vec![0.0; 2]],
            layers,
            Readout::Linear(vec![0.0; 3])
        )
        .is_err());
    }

    #[test]
    fn masked_unit_is_zero_downstream() {
        let net = MlpChain::random(&[3, 4, 4], ChainActivation::Identity, false, 1, 7).unwrap();
        let mut mask = UnitMap::filled(&UnitNetwork::layout(&net), true);
        mask.layers[0].mlp = vec![false; 4];
        let pass = net.forward_pass(&[0], &PassOptions::masked(Some(&mask))).unwrap();
        assert_eq!(pass.objective.item(), 0.0);
        assert!(pass.units.layers[1].mlp.iter().all(|v| *v == 0.0));
        assert!(pass.units.layers[0].mlp.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn linear_readout_is_dot_product() {
        let layers = vec![DenseLayer {
            n_in: 2,
            n_out: 2,
            weight: vec![2.0, 0.0, 0.0, 3.0],
            bias: None,
            activation: ChainActivation::Identity,
        }];
        let net = MlpChain::new(
            vec![vec![1.0, -2.0]],
            layers,
            Readout::Linear(vec![1.0, 1.0]),
        )
        .unwrap();
        let pass = net.forward_pass(&[0], &PassOptions::default()).unwrap();
        assert_eq!(pass.objective.item(), 2.0 - 6.0);
        assert_eq!(pass.units.layers[0].mlp, vec![2.0, -6.0]);
    }
}
