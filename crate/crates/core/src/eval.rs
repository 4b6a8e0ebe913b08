//! BLEU scoring, reference generation, activation-ratio sweeps and
//! per-token deactivation maps.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_metric, AttributeOptions, Metric, DEFAULT_IG_STEPS};
use crate::corpus::QaItem;
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::network::{UnitMap, UnitNetwork};
use crate::sparsify::{
    select_plan, select_plan_global, select_plan_iterative, PlanMode, Scope,
};
use crate::tokenizer;

fn ngrams(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU-4 in percent.
///
/// Lowercased whitespace tokens, clipped n-gram precision, add-one smoothing
/// on orders 2 to 4 and the usual brevity penalty. A candidate without any
/// unigram match scores 0, except that two empty texts agree perfectly.
pub fn bleu(candidate: &str, reference: &str) -> f64 {
    let cand_lc = candidate.to_lowercase();
    let ref_lc = reference.to_lowercase();
    let c: Vec<&str> = cand_lc.split_whitespace().collect();
    let r: Vec<&str> = ref_lc.split_whitespace().collect();
    if c.is_empty() {
        return if r.is_empty() { 100.0 } else { 0.0 };
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cn = ngrams(&c, n);
        let rn = ngrams(&r, n);
        let total: usize = cn.values().sum();
        let matched: usize = cn
            .iter()
            .map(|(g, k)| (*k).min(rn.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln();
    }
    let bp = if c.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    (100.0 * bp * (log_sum / 4.0).exp()).clamp(0.0, 100.0)
}

/// Decoding budget used when none is given.
pub const DEFAULT_MAX_NEW: usize = 40;

/// Fills `reference_output` with the fully activated greedy answer.
pub fn generate_references(model: &ToyModel, items: &mut [QaItem], max_new: usize) -> Result<()> {
    for item in items.iter_mut() {
        item.reference_output = Some(model.answer(&item.question, max_new)?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub metrics: Vec<Metric>,
    pub ars: Vec<f64>,
    pub scope: Scope,
    pub mode: PlanMode,
    pub ig_steps: usize,
    pub max_new: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            metrics: vec![Metric::Magnitude, Metric::Gxo, Metric::CorrectedGxo],
            ars: vec![0.2, 0.5, 0.8],
            scope: Scope::All,
            mode: PlanMode::PerLayerRatio,
            ig_steps: DEFAULT_IG_STEPS,
            max_new: DEFAULT_MAX_NEW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub metric: Metric,
    pub ar: f64,
    pub scope: Scope,
    pub mode: PlanMode,
    pub bleu_mean: f64,
    pub n_items: usize,
    /// Forward plus backward passes, attribution and decoding together.
    pub passes_consumed: u64,
    pub tokens_generated: usize,
}

impl SweepRecord {
    pub fn passes_per_token(&self) -> f64 {
        self.passes_consumed as f64 / self.tokens_generated.max(1) as f64
    }
}

/// Keep-mask for one decoding step. At `ar = 1` every mode keeps every unit,
/// so no attribution is run.
pub fn plan_step(
    model: &ToyModel,
    ctx: &[usize],
    metric: Metric,
    ar: f64,
    scope: Scope,
    mode: PlanMode,
    ig_steps: usize,
) -> Result<UnitMap<bool>> {
    if ar == 1.0 {
        return Ok(UnitMap::filled(&model.layout(), true));
    }
    let opts = AttributeOptions {
        ig_steps,
        ..Default::default()
    };
    let plan = match mode {
        PlanMode::Iterative => select_plan_iterative(model, ctx, metric, ar, scope, ig_steps)?,
        PlanMode::PerLayerRatio => {
            select_plan(&attribute_metric(model, ctx, metric, &opts)?, metric, ar, scope)?
        }
        PlanMode::UniformThreshold => {
            select_plan_global(&attribute_metric(model, ctx, metric, &opts)?, metric, ar, scope)?
        }
    };
    Ok(plan.mask)
}

/// Greedy answer with the plan recomputed before every generated token.
/// Returns the answer text and the masks used, one per token.
pub fn sparse_answer(
    model: &ToyModel,
    question: &str,
    metric: Metric,
    ar: f64,
    scope: Scope,
    mode: PlanMode,
    ig_steps: usize,
    max_new: usize,
) -> Result<(Vec<usize>, Vec<UnitMap<bool>>)> {
    let prompt = tokenizer::encode(&tokenizer::prompt_text(question))?;
    let mut masks = Vec::new();
    let out = model.greedy_decode(&prompt, max_new, |m, ctx| {
        let mask = plan_step(m, ctx, metric, ar, scope, mode, ig_steps)?;
        masks.push(mask.clone());
        Ok(Some(mask))
    })?;
    Ok((out, masks))
}

/// BLEU of per-token re-planned decoding against each item's reference, for
/// every (metric, ar). Rows are sorted by (metric, ar).
pub fn sweep(model: &ToyModel, items: &[QaItem], config: &SweepConfig) -> Result<Vec<SweepRecord>> {
    if items.is_empty() {
        return Err(Error::Invalid("sweep needs at least one item".into()));
    }
    if let Some(index) = items.iter().position(|i| i.reference_output.is_none()) {
        return Err(Error::MissingReference { index });
    }
    for &ar in &config.ars {
        crate::sparsify::ar_to_count(ar, 1)?;
    }
    let mut rows = Vec::new();
    for &metric in &config.metrics {
        for &ar in &config.ars {
            let before = model.counter().snapshot();
            let mut total = 0.0;
            let mut tokens = 0;
            for item in items {
                let (out, _) = sparse_answer(
                    model,
                    &item.question,
                    metric,
                    ar,
                    config.scope,
                    config.mode,
                    config.ig_steps,
                    config.max_new,
                )?;
                tokens += out.len();
                let text = tokenizer::decode(&out);
                total += bleu(text.trim(), item.reference_output.as_deref().unwrap_or_default());
            }
            rows.push(SweepRecord {
                metric,
                ar,
                scope: config.scope,
                mode: config.mode,
                bleu_mean: total / items.len() as f64,
                n_items: items.len(),
                passes_consumed: model.counter().snapshot().since(before).total(),
                tokens_generated: tokens,
            });
        }
    }
    rows.sort_by(|a, b| a.metric.cmp(&b.metric).then(a.ar.total_cmp(&b.ar)));
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "metric,ar,scope,mode,bleu_mean,n_items,passes_consumed")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.metric, r.ar, r.scope, r.mode, r.bleu_mean, r.n_items, r.passes_consumed
        )?;
    }
    Ok(())
}

/// Which units were active for each generated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMap {
    pub question: String,
    pub metric: Metric,
    pub ar: f64,
    pub scope: Scope,
    /// Generated characters, one per row (`<eos>` for the end token).
    pub tokens: Vec<String>,
    /// Units per row in order: layer by layer, heads before neurons.
    pub columns: Vec<String>,
    /// One `0`/`1` string per generated token.
    pub rows: Vec<String>,
}

pub fn mask_map(
    model: &ToyModel,
    question: &str,
    metric: Metric,
    ar: f64,
    scope: Scope,
    max_new: usize,
) -> Result<MaskMap> {
    let (out, masks) = sparse_answer(
        model,
        question,
        metric,
        ar,
        scope,
        PlanMode::PerLayerRatio,
        DEFAULT_IG_STEPS,
        max_new,
    )?;
    let layout = model.layout();
    let columns = layout
        .groups()
        .into_iter()
        .flat_map(|g| (0..layout.count(g)).map(move |i| format!("{}.{}{}", g.layer, g.kind, i)))
        .collect();
    let rows = masks
        .iter()
        .map(|m| {
            m.layers
                .iter()
                .flat_map(|r| r.heads.iter().chain(&r.mlp))
                .map(|&k| if k { '1' } else { '0' })
                .collect()
        })
        .collect();
    let tokens = out
        .iter()
        .map(|&t| {
            if t == tokenizer::EOS {
                "<eos>".to_string()
            } else {
                tokenizer::decode(&[t])
            }
        })
        .collect();
    Ok(MaskMap {
        question: question.to_string(),
        metric,
        ar,
        scope,
        tokens,
        columns,
        rows,
    })
}

impl MaskMap {
    /// Plain PGM (P2): one row per token, one column per unit, white = active.
    pub fn to_pgm(&self) -> String {
        let width = self.columns.len();
        let mut s = format!("P2\n{} {}\n255\n", width, self.rows.len());
        for row in &self.rows {
            let line: Vec<&str> = row.chars().map(|c| if c == '1' { "255" } else { "0" }).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests;
