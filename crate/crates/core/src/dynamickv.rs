//! DynamicKV prefill compression: layer-adaptive budgets with progressive
//! cache updates.
//!
//! Layers are processed in order. Each layer first buffers up to
//! `B^l = floor((wt - ws) * r_max)` prefix positions ranked by pooled window
//! attention. Every `m` layers (and once more after the last layer when `L`
//! is not a multiple of `m`), the pooled scores of all processed layers are
//! pooled into one global top-k; the share of that top-k landing in each
//! layer sets the layer's new budget `Z'`, rescaled so the processed layers
//! together keep `(wt - ws) * n` non-window tokens. Buffers are then cut to
//! their budgets. Buffers are score-descending, so cutting keeps the best
//! entries, and a budget never exceeds the current buffer length, so a layer
//! can only shrink.

use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{memory_bytes, MemoryGeometry};
use crate::policies::{apply_plan, pooled_prefix, PolicyConfig, PolicyKind, RetentionPlan};
use crate::tensor::{rank_cmp, select_best};
use crate::toy_model::{KVState, Model};
use crate::trace::{AttentionTrace, TraceHeader};

/// Pooled prefix scores of one layer, `[head][position]`.
pub type PooledLayer = Vec<Vec<f32>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BufferedEntry {
    pub position: usize,
    pub score: f32,
}

/// Provisional retention of one layer: ranked prefix entries (best first),
/// then the window.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferedLayer {
    ranked: Vec<BufferedEntry>,
    window: Range<usize>,
}

impl BufferedLayer {
    pub fn ranked(&self) -> &[BufferedEntry] {
        &self.ranked
    }

    pub fn window(&self) -> Range<usize> {
        self.window.clone()
    }

    /// Non-window entries currently held.
    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    /// Positions in buffer order: ranked entries, then window.
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranked.iter().map(|e| e.position).chain(self.window.clone())
    }

    fn truncate(&mut self, keep: usize) {
        assert!(keep <= self.ranked.len(), "budget {keep} would grow a buffer of {}", self.ranked.len());
        self.ranked.truncate(keep);
    }

    fn check(&self, cap: usize) {
        debug_assert!(self.ranked.len() <= cap);
        debug_assert!(self.ranked.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

/// Per-layer non-window budgets `Z'`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct LayerBudgets(pub Vec<usize>);

impl LayerBudgets {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Budgets assigned at one update step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UpdateStep {
    pub layers_processed: usize,
    pub budgets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicOutcome {
    pub plan: RetentionPlan,
    pub budgets: LayerBudgets,
    pub steps: Vec<UpdateStep>,
}

/// Max-pool every head of `layer` over the prefix `0..S-ws`.
pub fn pool_layer(trace: &AttentionTrace, layer: usize, cfg: &PolicyConfig) -> Result<PooledLayer> {
    let prefix = trace.seq_len - cfg.ws;
    trace.heads(layer).map(|h| pooled_prefix(h, prefix, cfg.pool_kernel)).collect()
}

/// Buffer one layer: reduce pooled heads by max, keep the best
/// `min(B^l, prefix)` prefix positions in descending score order, then the
/// window.
pub fn layer_buffer(pooled: &PooledLayer, seq_len: usize, cfg: &PolicyConfig) -> BufferedLayer {
    let prefix = pooled.first().map_or(0, Vec::len);
    let best: Vec<f32> = (0..prefix)
        .map(|p| pooled.iter().map(|h| h[p]).fold(f32::NEG_INFINITY, f32::max))
        .collect();
    let ranked = select_best(prefix, cfg.per_layer_cap(), |a, b| rank_cmp(best[a], a, best[b], b))
        .into_iter()
        .map(|p| BufferedEntry { position: p, score: best[p] })
        .collect();
    BufferedLayer { ranked, window: seq_len - cfg.ws..seq_len }
}

/// Entries of the global top-k over all processed layers that fall in each
/// layer. Ties break by position, then layer, then head, so equal scores
/// spread evenly over layers.
pub fn topk_layer_counts(pooled: &[PooledLayer], k: usize) -> Vec<usize> {
    let n = pooled.len();
    let heads = pooled.first().map_or(0, Vec::len);
    let prefix = pooled.first().and_then(|l| l.first()).map_or(0, Vec::len);
    let per_layer = heads * prefix;
    let score = |f: usize| pooled[f / per_layer][(f / prefix) % heads][f % prefix];
    // position-major key for tie-breaking
    let key = |f: usize| ((f % prefix) * n + f / per_layer) * heads + (f / prefix) % heads;
    let mut counts = vec![0usize; n];
    for f in select_best(n * per_layer, k, |a, b| rank_cmp(score(a), key(a), score(b), key(b))) {
        counts[f / per_layer] += 1;
    }
    counts
}

/// Proportional integer allocation of `target` over weights `z`, each share
/// bounded to `[1, caps[i]]`. Without binding bounds the result is
/// `floor(z_i * target / sum(z))`. Bounded layers are pinned and the rest
/// re-split; if only zero-weight layers are left they share the remainder
/// equally. A final pass trims the largest budgets if pinning at the lower
/// bound overshot `target`.
pub fn bounded_allocation(z: &[u64], caps: &[usize], target: usize) -> Vec<usize> {
    let n = z.len();
    let mut z = z.to_vec();
    let mut pinned: Vec<Option<usize>> = vec![None; n];
    loop {
        let free: Vec<usize> = (0..n).filter(|&i| pinned[i].is_none()).collect();
        if free.is_empty() {
            break;
        }
        let pinned_total: usize = pinned.iter().flatten().sum();
        let rem = target.saturating_sub(pinned_total) as u128;
        let weight: u128 = free.iter().map(|&i| u128::from(z[i])).sum();
        if weight == 0 {
            // only layers without hits remain: they split what is left evenly
            for &i in &free {
                z[i] = 1;
            }
            continue;
        }
        let share_num = |i: usize| u128::from(z[i]) * rem;
        let over: Vec<usize> = free.iter().copied().filter(|&i| share_num(i) > caps[i] as u128 * weight).collect();
        if !over.is_empty() {
            for i in over {
                pinned[i] = Some(caps[i]);
            }
            continue;
        }
        let under: Vec<usize> = free.iter().copied().filter(|&i| share_num(i) < weight).collect();
        if !under.is_empty() {
            for i in under {
                pinned[i] = Some(1.min(caps[i]));
            }
            continue;
        }
        for &i in &free {
            pinned[i] = Some((share_num(i) / weight) as usize);
        }
        break;
    }
    let mut out: Vec<usize> = pinned.into_iter().map(|v| v.unwrap_or(0)).collect();
    let mut total: usize = out.iter().sum();
    while total > target {
        // largest budget above the floor, lowest index on ties
        let Some(i) = (0..n).filter(|&i| out[i] > 1).max_by(|&a, &b| out[a].cmp(&out[b]).then(b.cmp(&a))) else {
            break;
        };
        out[i] -= 1;
        total -= 1;
    }
    out
}

/// Budgets `Z'` for the processed layers from their pooled scores, with each
/// layer capped at `caps[i]` (its current buffer length).
pub fn update_buffer_length_capped(pooled: &[PooledLayer], cfg: &PolicyConfig, caps: &[usize]) -> Result<Vec<usize>> {
    let n = pooled.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    assert_eq!(caps.len(), n);
    let all_zero = pooled.iter().flatten().flatten().all(|&s| s == 0.0);
    if all_zero {
        return Err(Error::DegenerateTrace);
    }
    let heads = pooled[0].len();
    let quota = cfg.per_layer_quota();
    let k = if cfg.topk_includes_heads { quota * heads * n } else { quota * n };
    let counts = topk_layer_counts(pooled, k);
    Ok(budgets_from_counts(&counts, cfg.per_layer_cap(), caps, quota * n))
}

/// `Z_i = floor(B^l * C_i / max(C))`, then rescaled to `target` within `[1, caps_i]`.
pub fn budgets_from_counts(counts: &[usize], per_layer_cap: usize, caps: &[usize], target: usize) -> Vec<usize> {
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as u64;
    let z: Vec<u64> = counts.iter().map(|&c| per_layer_cap as u64 * c as u64 / max).collect();
    bounded_allocation(&z, caps, target)
}

/// Budgets for the processed layers when every buffer is still full
/// (`min(B^l, prefix)` entries).
pub fn update_buffer_length(pooled: &[PooledLayer], cfg: &PolicyConfig) -> Result<LayerBudgets> {
    let prefix = pooled.first().and_then(|l| l.first()).map_or(0, Vec::len);
    let caps = vec![cfg.per_layer_cap().min(prefix); pooled.len()];
    update_buffer_length_capped(pooled, cfg, &caps).map(LayerBudgets)
}

/// The full prefill loop over a trace.
pub fn run_prefill_compression(trace: &AttentionTrace, cfg: &PolicyConfig) -> Result<DynamicOutcome> {
    cfg.validate()?;
    trace.validate()?;
    let (s, n_layers) = (trace.seq_len, trace.n_layers);
    if cfg.ws > s {
        return Err(Error::WindowExceedsSequence { ws: cfg.ws, seq_len: s });
    }
    if s <= cfg.wt {
        return Ok(DynamicOutcome {
            plan: RetentionPlan::identity(PolicyKind::Dynamic, n_layers, s, cfg.ws),
            budgets: LayerBudgets(vec![s - cfg.ws; n_layers]),
            steps: Vec::new(),
        });
    }

    let mut pooled: Vec<PooledLayer> = Vec::with_capacity(n_layers);
    let mut buffers: Vec<BufferedLayer> = Vec::with_capacity(n_layers);
    let mut steps = Vec::new();
    for l in 0..n_layers {
        pooled.push(pool_layer(trace, l, cfg)?);
        buffers.push(layer_buffer(&pooled[l], s, cfg));
        let processed = l + 1;
        if processed % cfg.m == 0 || processed == n_layers {
            let caps: Vec<usize> = buffers.iter().map(BufferedLayer::len).collect();
            let budgets = update_buffer_length_capped(&pooled, cfg, &caps)?;
            for (buf, &z) in buffers.iter_mut().zip(&budgets) {
                buf.truncate(z);
                buf.check(cfg.per_layer_cap());
            }
            steps.push(UpdateStep { layers_processed: processed, budgets });
        }
    }
    check_shrink(&steps);

    let budgets = LayerBudgets(buffers.iter().map(BufferedLayer::len).collect());
    let selections = buffers.iter().map(|b| b.ranked.iter().map(|e| e.position).collect()).collect();
    Ok(DynamicOutcome {
        plan: RetentionPlan::from_selections(PolicyKind::Dynamic, s, cfg.ws, selections),
        budgets,
        steps,
    })
}

/// Per layer, budgets never grow from one update step to the next.
fn check_shrink(steps: &[UpdateStep]) {
    for pair in steps.windows(2) {
        for (i, (a, b)) in pair[0].budgets.iter().zip(&pair[1].budgets).enumerate() {
            assert!(b <= a, "layer {i} grew from {a} to {b} between update steps");
        }
    }
}

/// Prefill `tokens` on `model`, derive the trace from its window attention,
/// and return the compressed cache together with the allocation.
pub fn compress_prefill(model: &Model, tokens: &[u32], cfg: &PolicyConfig) -> Result<(KVState, DynamicOutcome)> {
    let out = model.prefill(tokens, cfg.ws)?;
    let trace = AttentionTrace::from_window_attention(&out.window_attention, "toy-model");
    let outcome = run_prefill_compression(&trace, cfg)?;
    let cache = apply_plan(&out.cache, &outcome.plan)?;
    Ok((cache, outcome))
}

/// JSON budget report written by `allocate`.
#[derive(Debug, Clone, Serialize)]
pub struct BudgetReport {
    pub format_version: &'static str,
    pub config: PolicyConfig,
    pub geometry: MemoryGeometry,
    pub trace: TraceHeader,
    /// Non-window budget `Z'` per layer.
    pub per_layer_budget: Vec<usize>,
    /// Retained tokens per layer (budget plus window).
    pub per_layer_tokens: Vec<usize>,
    pub per_layer_bytes: Vec<u64>,
    pub total_bytes: u64,
    pub full_bytes: u64,
    pub compression_ratio: f64,
    pub update_steps: Vec<UpdateStep>,
}

impl BudgetReport {
    pub fn new(trace: &AttentionTrace, cfg: &PolicyConfig, geometry: MemoryGeometry, outcome: &DynamicOutcome) -> Self {
        let tokens = outcome.plan.budgets();
        let per_layer_bytes: Vec<u64> = tokens.iter().map(|&t| memory_bytes(&[t], &geometry)).collect();
        BudgetReport {
            format_version: crate::FORMAT_VERSION,
            config: cfg.clone(),
            geometry,
            trace: trace.header(),
            per_layer_budget: outcome.budgets.0.clone(),
            total_bytes: per_layer_bytes.iter().sum(),
            full_bytes: memory_bytes(&vec![trace.seq_len; trace.n_layers], &geometry),
            per_layer_bytes,
            per_layer_tokens: tokens,
            compression_ratio: outcome.plan.compression_ratio(),
            update_steps: outcome.steps.clone(),
        }
    }
}
