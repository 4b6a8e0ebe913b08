//! Decoder-only toy transformer with maskable attention heads and MLP neurons.

mod checkpoint;
mod train;

pub use checkpoint::{
    bundled_model, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
};
pub use train::{train_toy, TrainOptions, TrainReport};

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attribution::target_objective;
use crate::error::{Error, Result};
use crate::network::{
    argmax, LayerNodes, LayerUnits, Pass, PassCounter, PassOptions, UnitLayout, UnitMap,
    UnitNetwork, UnitRow,
};
use crate::tensor::Tensor;
use crate::tokenizer::{self, EOS};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockLayout {
    /// Attention and MLP read the same normalized input and are summed.
    Parallel,
    /// MLP reads the residual stream after the attention update.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl FromStr for BlockLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(BlockLayout::Parallel),
            "sequential" => Ok(BlockLayout::Sequential),
            o => Err(Error::Invalid(format!("unknown block layout `{o}`"))),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            o => Err(Error::Invalid(format!("unknown activation `{o}`"))),
        }
    }
}

impl fmt::Display for BlockLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockLayout::Parallel => "parallel",
            BlockLayout::Sequential => "sequential",
        })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub block_layout: BlockLayout,
    pub activation: Activation,
    pub use_bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model: 32,
            n_layers: 3,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 80,
            block_layout: BlockLayout::Parallel,
            activation: Activation::Gelu,
            use_bias: true,
            seed: 1234,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn layout(&self) -> UnitLayout {
        UnitLayout {
            layers: vec![
                LayerUnits {
                    heads: self.n_heads,
                    mlp: self.d_ff,
                };
                self.n_layers
            ],
        }
    }

    /// Expected `(name, shape)` of every parameter, in a stable order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        let ln = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.gain"), vec![d]));
            if self.use_bias {
                out.push((format!("{p}.bias"), vec![d]));
            }
        };
        for l in 0..self.n_layers {
            let b = format!("blocks.{l}");
            ln(&mut out, &format!("{b}.ln1"));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{b}.attn.{w}"), vec![d, d]));
            }
            if self.use_bias {
                for w in ["bq", "bk", "bv", "bo"] {
                    out.push((format!("{b}.attn.{w}"), vec![d]));
                }
            }
            if self.block_layout == BlockLayout::Sequential {
                ln(&mut out, &format!("{b}.ln2"));
            }
            out.push((format!("{b}.mlp.w_in"), vec![d, f]));
            out.push((format!("{b}.mlp.w_out"), vec![f, d]));
            if self.use_bias {
                out.push((format!("{b}.mlp.b_in"), vec![f]));
                out.push((format!("{b}.mlp.b_out"), vec![d]));
            }
        }
        ln(&mut out, "ln_f");
        out.push(("unembed".to_string(), vec![d, v]));
        if self.use_bias {
            out.push(("unembed_bias".to_string(), vec![v]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Toy decoder-only transformer: configuration, parameters and pass counter.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub params: BTreeMap<String, ParamArray>,
    counter: PassCounter,
}

/// Tensors backing one pass, looked up by parameter name.
pub(crate) struct Weights(HashMap<String, Tensor>);

impl Weights {
    fn get(&self, name: &str) -> &Tensor {
        &self.0[name]
    }

    fn opt(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}

/// Where the residual stream of a pass starts.
#[derive(Clone, Copy)]
pub(crate) enum Input<'a> {
    /// Token plus position embeddings.
    Embed,
    /// Embeddings copied into a fresh leaf so the graph is recorded.
    EmbedLeaf,
    /// A caller-supplied `[T, d_model]` tensor.
    Given(&'a Tensor),
}

pub(crate) struct Built {
    pub logits: Tensor,
    pub units: UnitMap<f64>,
    pub nodes: Vec<LayerNodes>,
}

impl ToyModel {
    /// Seeded initialization.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let depth_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let std = if name.ends_with("emb") {
                    0.1
                } else {
                    let fan_in = shape[0] as f64;
                    let s = 1.0 / fan_in.sqrt();
                    if name.ends_with(".wo") || name.ends_with(".w_out") {
                        s * depth_scale
                    } else {
                        s
                    }
                };
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            params.insert(name, ParamArray { shape, data });
        }
        Ok(ToyModel {
            config,
            params,
            counter: PassCounter::default(),
        })
    }

    pub fn from_parts(config: ModelConfig, params: BTreeMap<String, ParamArray>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(p) if &p.shape == shape && p.data.len() == shape.iter().product::<usize>() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        p.shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(ToyModel {
            config,
            params,
            counter: PassCounter::default(),
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub(crate) fn weights(&self, trainable: bool) -> Result<Weights> {
        let mut map = HashMap::with_capacity(self.params.len());
        for (name, p) in &self.params {
            let t = if trainable {
                Tensor::leaf(&p.shape, p.data.clone())?
            } else {
                Tensor::new(&p.shape, p.data.clone())?
            };
            map.insert(name.clone(), t);
        }
        Ok(Weights(map))
    }

    /// Summed token and position embeddings of `tokens`, `[T, d_model]`.
    pub fn embeddings(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let w = self.weights(false)?;
        let e = w
            .get("tok_emb")
            .embed_lookup(tokens)?
            .add(&w.get("pos_emb").slice(0, 0, tokens.len())?)?;
        Ok(e.values().to_vec())
    }

    /// Objective at the last position as a function of the residual-stream
    /// input `x` (`[T, d_model]`), with all parameters held constant.
    pub fn objective_from_input(
        &self,
        x: &Tensor,
        tokens: &[usize],
        target: Option<usize>,
    ) -> Result<Tensor> {
        let w = self.weights(false)?;
        let t = tokens.len().max(1);
        let built = self.build(&w, tokens, &PassOptions::default(), t - 1..t, Input::Given(x))?;
        target_objective(&built.logits, target)
    }

    /// Objective at the last position as a function of parameter `name`,
    /// with every other parameter held constant.
    pub fn objective_from_param(
        &self,
        name: &str,
        value: &Tensor,
        tokens: &[usize],
        target: Option<usize>,
    ) -> Result<Tensor> {
        let mut w = self.weights(false)?;
        match w.0.get(name) {
            Some(old) if old.shape() == value.shape() => {}
            Some(old) => {
                return Err(Error::Invalid(format!(
                    "parameter {name} has shape {:?}, got {:?}",
                    old.shape(),
                    value.shape()
                )))
            }
            None => return Err(Error::Invalid(format!("unknown parameter {name}"))),
        }
        w.0.insert(name.to_string(), value.clone());
        let t = tokens.len().max(1);
        let built = self.build(&w, tokens, &PassOptions::default(), t - 1..t, Input::Embed)?;
        target_objective(&built.logits, target)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Invalid(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }

    fn layer_norm(&self, w: &Weights, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let y = x.layernorm(LN_EPS)?.mul(w.get(&format!("{prefix}.gain")))?;
        match w.opt(&format!("{prefix}.bias")) {
            Some(b) => Ok(y.add(b)?),
            None => Ok(y),
        }
    }

    fn linear(&self, w: &Weights, x: &Tensor, weight: &str, bias: &str) -> Result<Tensor> {
        let y = x.matmul(w.get(weight))?;
        match w.opt(bias) {
            Some(b) => Ok(y.add(b)?),
            None => Ok(y),
        }
    }

    /// Builds the computation for `tokens`.
    ///
    /// `logit_rows` selects which positions get unembedded (a contiguous
    /// range).
    pub(crate) fn build(
        &self,
        w: &Weights,
        tokens: &[usize],
        opts: &PassOptions<'_>,
        logit_rows: std::ops::Range<usize>,
        input: Input<'_>,
    ) -> Result<Built> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let layout = cfg.layout();
        if let Some(mask) = opts.mask {
            layout.check(mask)?;
        }
        let t = tokens.len();
        let (d, dh) = (cfg.d_model, cfg.d_head());

        let mut x = match input {
            Input::Given(x) => {
                if x.shape() != [t, d] {
                    return Err(Error::Invalid(format!(
                        "input of shape {:?}, expected [{t}, {d}]",
                        x.shape()
                    )));
                }
                x.clone()
            }
            _ => {
                let e = w
                    .get("tok_emb")
                    .embed_lookup(tokens)?
                    .add(&w.get("pos_emb").slice(0, 0, t)?)?;
                match input {
                    Input::EmbedLeaf => Tensor::leaf(&[t, d], e.values().to_vec())?,
                    _ => e,
                }
            }
        };

        let mut causal = vec![0.0; t * t];
        for i in 0..t {
            for j in i + 1..t {
                causal[i * t + j] = f64::NEG_INFINITY;
            }
        }
        let causal = Tensor::new(&[t, t], causal)?;
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

        let mut units = UnitMap {
            layers: Vec::with_capacity(cfg.n_layers),
        };
        let mut nodes = Vec::with_capacity(cfg.n_layers);

        for l in 0..cfg.n_layers {
            let b = format!("blocks.{l}");
            let mask_row = opts.mask.map(|m| &m.layers[l]);
            let a = self.layer_norm(w, &x, &format!("{b}.ln1"))?;

            // attention
            let q = self.linear(w, &a, &format!("{b}.attn.wq"), &format!("{b}.attn.bq"))?;
            let k = self.linear(w, &a, &format!("{b}.attn.wk"), &format!("{b}.attn.bk"))?;
            let v = self.linear(w, &a, &format!("{b}.attn.wv"), &format!("{b}.attn.bv"))?;
            let wo = w.get(&format!("{b}.attn.wo"));
            let mut attn: Option<Tensor> = None;
            let mut head_nodes = Vec::with_capacity(cfg.n_heads);
            let mut head_norms = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = q.slice(1, h * dh, dh)?;
                let kh = k.slice(1, h * dh, dh)?;
                let vh = v.slice(1, h * dh, dh)?;
                let p = qh
                    .matmul(&kh.transpose()?)?
                    .scale(inv_sqrt_dh)
                    .add(&causal)?
                    .softmax();
                let out = p.matmul(&vh)?;
                let last = &out.values()[(t - 1) * dh..];
                head_norms.push(last.iter().map(|z| z * z).sum::<f64>().sqrt());
                let keep = mask_row.map_or(true, |m| m.heads[h]);
                let gated = match multiplier(t, dh, |_| keep, opts.gate)? {
                    Some(m) => out.mul(&m)?,
                    None => out.clone(),
                };
                head_nodes.push(out);
                let contrib = gated.matmul(&wo.slice(0, h * dh, dh)?)?;
                attn = Some(match attn {
                    Some(acc) => acc.add(&contrib)?,
                    None => contrib,
                });
            }
            let mut attn = attn.expect("n_heads >= 1");
            if let Some(bo) = w.opt(&format!("{b}.attn.bo")) {
                attn = attn.add(bo)?;
            }

            let mlp_in = match cfg.block_layout {
                BlockLayout::Parallel => a,
                BlockLayout::Sequential => {
                    x = x.add(&attn)?;
                    self.layer_norm(w, &x, &format!("{b}.ln2"))?
                }
            };
            let pre = self.linear(
                w,
                &mlp_in,
                &format!("{b}.mlp.w_in"),
                &format!("{b}.mlp.b_in"),
            )?;
            let act = match cfg.activation {
                Activation::Relu => pre.relu(),
                Activation::Gelu => pre.gelu(),
            };
            let f = cfg.d_ff;
            let mlp_units = act.values()[(t - 1) * f..].to_vec();
            let gated = match multiplier(t, f, |i| mask_row.map_or(true, |m| m.mlp[i]), opts.gate)?
            {
                Some(m) => act.mul(&m)?,
                None => act.clone(),
            };
            let mlp_out = self.linear(
                w,
                &gated,
                &format!("{b}.mlp.w_out"),
                &format!("{b}.mlp.b_out"),
            )?;
            x = match cfg.block_layout {
                BlockLayout::Parallel => x.add(&attn)?.add(&mlp_out)?,
                BlockLayout::Sequential => x.add(&mlp_out)?,
            };

            units.layers.push(UnitRow {
                heads: head_norms,
                mlp: mlp_units,
            });
            nodes.push(LayerNodes {
                heads: head_nodes,
                mlp: Some(act),
            });
        }

        let hf = self.layer_norm(w, &x, "ln_f")?;
        let rows = hf.slice(0, logit_rows.start, logit_rows.len())?;
        let logits = self.linear(w, &rows, "unembed", "unembed_bias")?;
        Ok(Built {
            logits,
            units,
            nodes,
        })
    }

    /// Logits at the last position plus the pre-mask unit outputs there.
    pub fn forward(
        &self,
        tokens: &[usize],
        mask: Option<&UnitMap<bool>>,
    ) -> Result<(Vec<f64>, UnitMap<f64>)> {
        let pass = self.forward_pass(tokens, &PassOptions::masked(mask))?;
        Ok((pass.logits, pass.units))
    }

    /// Greedy decoding. `plan_for` is consulted once per generated token with
    /// the current context and may return a keep-mask for that step.
    pub fn greedy_decode<P>(&self, prompt: &[usize], max_new: usize, mut plan_for: P) -> Result<Vec<usize>>
    where
        P: FnMut(&Self, &[usize]) -> Result<Option<UnitMap<bool>>>,
    {
        if max_new == 0 {
            return Err(Error::Invalid("max_new must be at least 1".into()));
        }
        let mut ctx = prompt.to_vec();
        let mut generated = Vec::new();
        for _ in 0..max_new {
            if ctx.len() > self.config.max_seq_len {
                break;
            }
            let mask = plan_for(self, &ctx)?;
            let (logits, _) = self.forward(&ctx, mask.as_ref())?;
            let next = argmax(&logits).ok_or_else(|| Error::Invalid("empty logits".into()))?;
            generated.push(next);
            if next == EOS {
                break;
            }
            ctx.push(next);
        }
        Ok(generated)
    }

    /// Greedy answer text for a question with every unit active.
    pub fn answer(&self, question: &str, max_new: usize) -> Result<String> {
        let prompt = tokenizer::encode(&tokenizer::prompt_text(question))?;
        let out = self.greedy_decode(&prompt, max_new, |_, _| Ok(None))?;
        Ok(tokenizer::decode(&out).trim().to_string())
    }
}

/// Multiplier zeroing masked columns at every row and scaling the last row by
/// `gate`; `None` when it would be all ones.
fn multiplier(
    rows: usize,
    cols: usize,
    keep: impl Fn(usize) -> bool,
    gate: f64,
) -> Result<Option<Tensor>> {
    let keeps: Vec<bool> = (0..cols).map(keep).collect();
    if gate == 1.0 && keeps.iter().all(|k| *k) {
        return Ok(None);
    }
    let mut m = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let g = if r + 1 == rows { gate } else { 1.0 };
        m.extend(keeps.iter().map(|&k| if k { g } else { 0.0 }));
    }
    Ok(Some(Tensor::new(&[rows, cols], m)?))
}

impl UnitNetwork for ToyModel {
    fn layout(&self) -> UnitLayout {
        self.config.layout()
    }

    fn counter(&self) -> &PassCounter {
        &self.counter
    }

    fn forward_pass(&self, tokens: &[usize], opts: &PassOptions<'_>) -> Result<Pass> {
        let w = self.weights(false)?;
        let t = tokens.len().max(1);
        let input = if opts.track { Input::EmbedLeaf } else { Input::Embed };
        let built = self.build(&w, tokens, opts, t - 1..t, input)?;
        self.counter.record_forward();
        let logits = built.logits.values().to_vec();
        let objective = target_objective(&built.logits, opts.target)?;
        Ok(Pass {
            objective,
            logits,
            units: built.units,
            nodes: built.nodes,
            gate: opts.gate,
        })
    }
}
