//! Evaluation: logit fidelity against FullKV, needle retention, per-layer
//! retention profiles, KV memory accounting, and multi-policy comparison.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policies::{apply_plan, select, PolicyConfig, RetentionPlan};
use crate::tensor::{rank_cmp, select_best};
use crate::toy_model::{argmax, Model};
use crate::trace::AttentionTrace;

/// What one cached token costs: `n_kv_heads * head_dim * 2 (K and V) * bytes_per_elem`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryGeometry {
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub bytes_per_elem: usize,
}

impl Default for MemoryGeometry {
    fn default() -> Self {
        Self { n_kv_heads: 8, head_dim: 128, bytes_per_elem: 2 }
    }
}

impl MemoryGeometry {
    pub fn bytes_per_token(&self) -> u64 {
        (self.n_kv_heads * self.head_dim * 2 * self.bytes_per_elem) as u64
    }
}

pub fn memory_bytes(tokens_per_layer: &[usize], geometry: &MemoryGeometry) -> u64 {
    tokens_per_layer.iter().map(|&t| t as u64).sum::<u64>() * geometry.bytes_per_token()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fidelity {
    pub max_abs_diff: f32,
    pub top1_agreement: f64,
    pub steps: usize,
}

/// Teacher-forced comparison of FullKV and compressed decoding: both caches
/// are fed the FullKV greedy continuation for `steps` tokens and their
/// logits compared at every step.
pub fn logit_fidelity(model: &Model, tokens: &[u32], plan: &RetentionPlan, steps: usize) -> Result<Fidelity> {
    if steps == 0 {
        return Err(Error::InvalidConfig("fidelity needs at least one step".into()));
    }
    let out = model.prefill(tokens, plan.window.clamp(1, tokens.len().max(1)))?;
    let mut full = out.cache;
    let mut compressed = apply_plan(&full, plan)?;
    let mut next = argmax(&out.logits) as u32;
    let mut max_abs_diff = 0.0f32;
    let mut agree = 0usize;
    for _ in 0..steps {
        let a = model.decode_step(&mut full, next)?;
        let b = model.decode_step(&mut compressed, next)?;
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        max_abs_diff = max_abs_diff.max(diff);
        let top = argmax(&a);
        if top == argmax(&b) {
            agree += 1;
        }
        next = top as u32;
    }
    Ok(Fidelity { max_abs_diff, top1_agreement: agree as f64 / steps as f64, steps })
}

/// Mean over layers of the fraction of needle positions a plan keeps.
pub fn needle_retention(plan: &RetentionPlan, trace: &AttentionTrace) -> Result<f64> {
    let needles = &trace.needle_positions;
    if needles.is_empty() {
        return Err(Error::NoNeedle);
    }
    if plan.layers.is_empty() {
        return Ok(0.0);
    }
    let per_layer = plan.layers.iter().map(|kept| {
        let hit = needles.iter().filter(|p| kept.binary_search(p).is_ok()).count();
        hit as f64 / needles.len() as f64
    });
    Ok(per_layer.sum::<f64>() / plan.n_layers() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    /// Linear-interpolation quantiles (the usual "type 7" definition).
    pub fn of(values: &[f64]) -> Quartiles {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = (v.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Quartiles { min: v[0], q1: q(0.25), median: q(0.5), q3: q(0.75), max: v[v.len() - 1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRates {
    pub label: String,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerProfile {
    pub per_layer_k: usize,
    pub per_trace: Vec<TraceRates>,
    /// Per layer, spread of the rate across traces.
    pub aggregate: Vec<Quartiles>,
}

/// Share of the global top `per_layer_k * L` (layer, position) scores that
/// falls in each layer. Scores are averaged over heads, and only positions
/// before the trace's window are ranked.
pub fn retention_rates(trace: &AttentionTrace, per_layer_k: usize) -> Vec<f64> {
    let n = trace.n_layers;
    let prefix = trace.seq_len - trace.window;
    let mean: Vec<f32> = (0..n)
        .flat_map(|l| {
            (0..prefix).map(move |p| trace.heads(l).map(|h| h[p]).sum::<f32>() / trace.n_heads as f32)
        })
        .collect();
    let k = (per_layer_k * n).min(n * prefix);
    let mut counts = vec![0usize; n];
    let key = |f: usize| (f % prefix) * n + f / prefix;
    for f in select_best(n * prefix, k, |a, b| rank_cmp(mean[a], key(a), mean[b], key(b))) {
        counts[f / prefix] += 1;
    }
    counts.iter().map(|&c| c as f64 / k.max(1) as f64).collect()
}

pub fn layer_profile(traces: &[AttentionTrace], per_layer_k: usize) -> Result<LayerProfile> {
    let first = traces.first().ok_or(Error::EmptyInput)?;
    if let Some(t) = traces.iter().find(|t| t.n_layers != first.n_layers) {
        return Err(Error::IncompatibleTraces(format!(
            "`{}` has {} layers, `{}` has {}",
            t.task_label, t.n_layers, first.task_label, first.n_layers
        )));
    }
    if per_layer_k == 0 {
        return Err(Error::InvalidConfig("per_layer_k must be positive".into()));
    }
    let per_trace: Vec<TraceRates> = traces
        .iter()
        .map(|t| TraceRates { label: t.task_label.clone(), rates: retention_rates(t, per_layer_k) })
        .collect();
    let aggregate = (0..first.n_layers)
        .map(|l| Quartiles::of(&per_trace.iter().map(|r| r.rates[l]).collect::<Vec<_>>()))
        .collect();
    Ok(LayerProfile { per_layer_k, per_trace, aggregate })
}

impl LayerProfile {
    /// One row per (trace, layer) plus one `aggregate` row per layer with the
    /// quartiles.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["format_version", "per_layer_k", "trace", "layer", "rate", "min", "q1", "median", "q3", "max"])?;
        let k = self.per_layer_k.to_string();
        for tr in &self.per_trace {
            for (l, r) in tr.rates.iter().enumerate() {
                w.write_record([crate::FORMAT_VERSION, &k, &tr.label, &l.to_string(), &r.to_string(), "", "", "", "", ""])?;
            }
        }
        for (l, q) in self.aggregate.iter().enumerate() {
            w.write_record([
                crate::FORMAT_VERSION,
                &k,
                "aggregate",
                &l.to_string(),
                "",
                &q.min.to_string(),
                &q.q1.to_string(),
                &q.median.to_string(),
                &q.q3.to_string(),
                &q.max.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A trace to evaluate, optionally with the prompt that produced it on the
/// toy model (needed for logit fidelity).
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub name: String,
    pub trace: AttentionTrace,
    pub tokens: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub case: String,
    pub policy: String,
    pub config: PolicyConfig,
    pub seq_len: usize,
    pub n_layers: usize,
    pub logit_max_abs_diff: Option<f32>,
    pub top1_agreement: Option<f64>,
    pub needle_retention: Option<f64>,
    pub retained_tokens: usize,
    pub cache_bytes: u64,
    pub compression_ratio: f64,
    pub per_layer_budget: Vec<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompareOptions {
    pub geometry: MemoryGeometry,
    pub fidelity_steps: usize,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self { geometry: MemoryGeometry::default(), fidelity_steps: 8 }
    }
}

/// Evaluate one (case, policy) cell.
pub fn evaluate(case: &EvalCase, cfg: &PolicyConfig, model: Option<&Model>, opts: &CompareOptions) -> EvalReport {
    let mut report = EvalReport {
        case: case.name.clone(),
        policy: cfg.policy.to_string(),
        config: cfg.clone(),
        seq_len: case.trace.seq_len,
        n_layers: case.trace.n_layers,
        logit_max_abs_diff: None,
        top1_agreement: None,
        needle_retention: None,
        retained_tokens: 0,
        cache_bytes: 0,
        compression_ratio: 0.0,
        per_layer_budget: Vec::new(),
        error: None,
    };
    let result = (|| -> Result<()> {
        let plan = select(&case.trace, cfg)?;
        report.per_layer_budget = plan.budgets();
        report.retained_tokens = plan.retained_tokens();
        report.cache_bytes = memory_bytes(&report.per_layer_budget, &opts.geometry);
        report.compression_ratio = plan.compression_ratio();
        if !case.trace.needle_positions.is_empty() {
            report.needle_retention = Some(needle_retention(&plan, &case.trace)?);
        }
        if let (Some(model), Some(tokens)) = (model, case.tokens.as_deref()) {
            let f = logit_fidelity(model, tokens, &plan, opts.fidelity_steps)?;
            report.logit_max_abs_diff = Some(f.max_abs_diff);
            report.top1_agreement = Some(f.top1_agreement);
        }
        Ok(())
    })();
    if let Err(e) = result {
        report.error = Some(e.to_string());
    }
    report
}

/// Every (case, policy) pair, case-major, evaluated in parallel. Order of
/// the output follows the input order regardless of thread count.
pub fn compare_run(
    cases: &[EvalCase],
    policies: &[PolicyConfig],
    model: Option<&Model>,
    opts: &CompareOptions,
) -> Result<Vec<EvalReport>> {
    if cases.is_empty() || policies.is_empty() {
        return Err(Error::EmptyInput);
    }
    let cells: Vec<(usize, usize)> =
        (0..cases.len()).flat_map(|c| (0..policies.len()).map(move |p| (c, p))).collect();
    Ok(cells
        .par_iter()
        .map(|&(c, p)| evaluate(&cases[c], &policies[p], model, opts))
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareDocument<'a> {
    pub format_version: &'static str,
    pub options: CompareOptions,
    pub reports: &'a [EvalReport],
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

pub fn write_reports_csv<W: Write>(reports: &[EvalReport], opts: &CompareOptions, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "format_version",
        "case",
        "policy",
        "wt",
        "ws",
        "r_max",
        "m",
        "pool_kernel",
        "sink",
        "pyramid_min",
        "topk_includes_heads",
        "n_kv_heads",
        "head_dim",
        "bytes_per_elem",
        "seq_len",
        "n_layers",
        "logit_max_abs_diff",
        "top1_agreement",
        "needle_retention",
        "retained_tokens",
        "cache_bytes",
        "compression_ratio",
        "per_layer_budget",
        "error",
    ])?;
    for r in reports {
        let c = &r.config;
        let budgets = r.per_layer_budget.iter().map(ToString::to_string).collect::<Vec<_>>().join(";");
        w.write_record([
            crate::FORMAT_VERSION.to_string(),
            r.case.clone(),
            r.policy.clone(),
            c.wt.to_string(),
            c.ws.to_string(),
            c.r_max.to_string(),
            c.m.to_string(),
            c.pool_kernel.to_string(),
            c.sink.to_string(),
            c.resolved_pyramid_min().to_string(),
            c.topk_includes_heads.to_string(),
            opts.geometry.n_kv_heads.to_string(),
            opts.geometry.head_dim.to_string(),
            opts.geometry.bytes_per_elem.to_string(),
            r.seq_len.to_string(),
            r.n_layers.to_string(),
            opt_str(&r.logit_max_abs_diff),
            opt_str(&r.top1_agreement),
            opt_str(&r.needle_retention),
            r.retained_tokens.to_string(),
            r.cache_bytes.to_string(),
            r.compression_ratio.to_string(),
            budgets,
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
