//! Policy configuration, retention plans, and the fixed-pattern baselines
//! (FullKV, StreamingLLM, H2O, SnapKV, PyramidKV).
//!
//! A selector maps a trace and a per-layer budget to the positions each layer
//! keeps. Every plan keeps the last `ws` positions (the observation window) in
//! every layer, and when the sequence already fits the budget (`S <= wt`) every
//! selector returns the identity plan.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamickv;
use crate::error::{Error, Result};
use crate::tensor::{pool1d_max, rank_cmp, select_best};
use crate::toy_model::KVState;
use crate::trace::AttentionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Full,
    Streaming,
    H2o,
    Snapkv,
    Pyramid,
    Dynamic,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Full,
        PolicyKind::Streaming,
        PolicyKind::H2o,
        PolicyKind::Snapkv,
        PolicyKind::Pyramid,
        PolicyKind::Dynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Full => "full",
            PolicyKind::Streaming => "streaming",
            PolicyKind::H2o => "h2o",
            PolicyKind::Snapkv => "snapkv",
            PolicyKind::Pyramid => "pyramid",
            PolicyKind::Dynamic => "dynamic",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s || (s == "fullkv" && *p == PolicyKind::Full))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown policy `{s}`")))
    }
}

/// Every knob of the selectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub policy: PolicyKind,
    /// Target tokens per layer, window included.
    pub wt: usize,
    /// Observation window; always retained.
    pub ws: usize,
    /// Per-layer buffer cap multiplier, `B^l = floor((wt - ws) * r_max)`.
    pub r_max: f64,
    /// Budget update interval in layers.
    pub m: usize,
    pub pool_kernel: usize,
    /// Attention-sink tokens kept by the streaming policy.
    pub sink: usize,
    /// Smallest per-layer budget of the pyramid schedule; `None` resolves to
    /// `ws + (wt - ws) / 4`.
    pub pyramid_min: Option<usize>,
    /// Global top-k size includes the head count: `k = (wt - ws) * H * n`.
    /// When false, `k = (wt - ws) * n`.
    pub topk_includes_heads: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Dynamic,
            wt: 512,
            ws: 32,
            r_max: 2.0,
            m: 4,
            pool_kernel: 7,
            sink: 4,
            pyramid_min: None,
            topk_includes_heads: true,
        }
    }
}

impl PolicyConfig {
    pub fn with_policy(&self, policy: PolicyKind) -> PolicyConfig {
        PolicyConfig { policy, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ws == 0 {
            return Err(Error::InvalidConfig("ws must be at least 1".into()));
        }
        if self.ws >= self.wt {
            return Err(Error::InvalidConfig(format!("ws ({}) must be below wt ({})", self.ws, self.wt)));
        }
        if !(self.r_max.is_finite() && self.r_max >= 1.0) {
            return Err(Error::InvalidConfig(format!("r_max ({}) must be >= 1", self.r_max)));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        if self.pool_kernel == 0 || self.pool_kernel.is_multiple_of(2) {
            return Err(Error::InvalidKernel(self.pool_kernel));
        }
        Ok(())
    }

    /// Non-window tokens per layer on average, `wt - ws`.
    pub fn per_layer_quota(&self) -> usize {
        self.wt - self.ws
    }

    /// `B^l`, the most non-window entries a layer may buffer.
    pub fn per_layer_cap(&self) -> usize {
        (self.per_layer_quota() as f64 * self.r_max).floor() as usize
    }

    pub fn resolved_pyramid_min(&self) -> usize {
        self.pyramid_min.unwrap_or(self.ws + (self.wt - self.ws) / 4)
    }
}

/// Positions each layer keeps, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RetentionPlan {
    pub policy: PolicyKind,
    pub seq_len: usize,
    pub window: usize,
    pub layers: Vec<Vec<usize>>,
}

impl RetentionPlan {
    pub fn identity(policy: PolicyKind, n_layers: usize, seq_len: usize, window: usize) -> Self {
        Self {
            policy,
            seq_len,
            window,
            layers: vec![(0..seq_len).collect(); n_layers],
        }
    }

    /// Assemble a plan from per-layer non-window selections (any order).
    pub fn from_selections(
        policy: PolicyKind,
        seq_len: usize,
        window: usize,
        selections: Vec<Vec<usize>>,
    ) -> Self {
        let layers = selections
            .into_iter()
            .map(|mut sel| {
                sel.sort_unstable();
                sel.extend(seq_len - window..seq_len);
                sel
            })
            .collect();
        Self { policy, seq_len, window, layers }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Tokens retained per layer.
    pub fn budgets(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn retained_tokens(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Retained tokens over `S * L`.
    pub fn compression_ratio(&self) -> f64 {
        self.retained_tokens() as f64 / (self.seq_len * self.n_layers()) as f64
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|l| l.len() == self.seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::PlanCacheMismatch(format!("layer {i} positions not strictly ascending")));
            }
            if layer.last().is_some_and(|&p| p >= self.seq_len) {
                return Err(Error::PlanCacheMismatch(format!("layer {i} position beyond sequence")));
            }
            let tail = &layer[layer.len().saturating_sub(self.window)..];
            if tail.len() != self.window || tail.first() != Some(&(self.seq_len - self.window)) {
                return Err(Error::PlanCacheMismatch(format!("layer {i} is missing window positions")));
            }
        }
        Ok(())
    }
}

/// Max-pooled scores of one head over the non-window prefix `0..prefix`.
pub fn pooled_prefix(head: &[f32], prefix: usize, kernel: usize) -> Result<Vec<f32>> {
    pool1d_max(&head[..prefix], kernel)
}

fn top_positions(scores: &[f32], k: usize) -> Vec<usize> {
    select_best(scores.len(), k, |a, b| rank_cmp(scores[a], a, scores[b], b))
}

fn check_trace(trace: &AttentionTrace, cfg: &PolicyConfig) -> Result<()> {
    cfg.validate()?;
    trace.validate()?;
    if cfg.ws > trace.seq_len {
        return Err(Error::WindowExceedsSequence { ws: cfg.ws, seq_len: trace.seq_len });
    }
    Ok(())
}

/// Attention sinks plus the most recent `wt - sink` positions, in every layer.
pub fn streaming_select(seq_len: usize, n_layers: usize, cfg: &PolicyConfig) -> Result<RetentionPlan> {
    cfg.validate()?;
    if cfg.sink >= cfg.wt || cfg.sink + cfg.ws > cfg.wt {
        return Err(Error::SinkExceedsBudget { sink: cfg.sink, ws: cfg.ws, wt: cfg.wt });
    }
    if seq_len <= cfg.wt {
        return Ok(RetentionPlan::identity(PolicyKind::Streaming, n_layers, seq_len, cfg.ws.min(seq_len)));
    }
    let layer: Vec<usize> = (0..cfg.sink).chain(seq_len - (cfg.wt - cfg.sink)..seq_len).collect();
    Ok(RetentionPlan {
        policy: PolicyKind::Streaming,
        seq_len,
        window: cfg.ws,
        layers: vec![layer; n_layers],
    })
}

/// Heavy hitters, one-shot: per layer, rank prefix positions by head-summed
/// score and keep the best `wt - ws`.
pub fn h2o_select(trace: &AttentionTrace, cfg: &PolicyConfig) -> Result<RetentionPlan> {
    check_trace(trace, cfg)?;
    let s = trace.seq_len;
    if s <= cfg.wt {
        return Ok(RetentionPlan::identity(PolicyKind::H2o, trace.n_layers, s, cfg.ws));
    }
    let prefix = s - cfg.ws;
    let selections = (0..trace.n_layers)
        .map(|l| {
            let mut acc = vec![0.0f32; prefix];
            for head in trace.heads(l) {
                for (a, &x) in acc.iter_mut().zip(head) {
                    *a += x;
                }
            }
            top_positions(&acc, cfg.per_layer_quota())
        })
        .collect();
    Ok(RetentionPlan::from_selections(PolicyKind::H2o, s, cfg.ws, selections))
}

/// SnapKV selection for one layer: each head nominates its top `quota`
/// pooled positions; the layer keeps the best `quota` of the union ranked by
/// max-over-heads pooled score.
fn snapkv_layer(pooled_heads: &[Vec<f32>], quota: usize) -> Vec<usize> {
    let prefix = pooled_heads[0].len();
    let mut best = vec![f32::NEG_INFINITY; prefix];
    let mut nominated = vec![false; prefix];
    for head in pooled_heads {
        for p in top_positions(head, quota) {
            nominated[p] = true;
            best[p] = best[p].max(head[p]);
        }
    }
    let candidates: Vec<usize> = (0..prefix).filter(|&p| nominated[p]).collect();
    select_best(candidates.len(), quota, |a, b| {
        let (pa, pb) = (candidates[a], candidates[b]);
        rank_cmp(best[pa], pa, best[pb], pb)
    })
    .into_iter()
    .map(|i| candidates[i])
    .collect()
}

fn pooled_layer(trace: &AttentionTrace, layer: usize, prefix: usize, kernel: usize) -> Result<Vec<Vec<f32>>> {
    trace.heads(layer).map(|h| pooled_prefix(h, prefix, kernel)).collect()
}

fn snapkv_with_budgets(
    trace: &AttentionTrace,
    cfg: &PolicyConfig,
    policy: PolicyKind,
    budgets: &[usize],
) -> Result<RetentionPlan> {
    let s = trace.seq_len;
    let prefix = s - cfg.ws;
    let selections = budgets
        .iter()
        .enumerate()
        .map(|(l, &budget)| {
            let quota = budget.saturating_sub(cfg.ws).min(prefix);
            Ok(snapkv_layer(&pooled_layer(trace, l, prefix, cfg.pool_kernel)?, quota))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetentionPlan::from_selections(policy, s, cfg.ws, selections))
}

pub fn snapkv_select(trace: &AttentionTrace, cfg: &PolicyConfig) -> Result<RetentionPlan> {
    check_trace(trace, cfg)?;
    if trace.seq_len <= cfg.wt {
        return Ok(RetentionPlan::identity(PolicyKind::Snapkv, trace.n_layers, trace.seq_len, cfg.ws));
    }
    snapkv_with_budgets(trace, cfg, PolicyKind::Snapkv, &vec![cfg.wt; trace.n_layers])
}

/// Linear budget schedule from `2*wt - min` (first layer) to `min` (last
/// layer), totalling exactly `wt * L` and non-increasing.
pub fn pyramid_budgets(n_layers: usize, cfg: &PolicyConfig) -> Result<Vec<usize>> {
    let floor = cfg.resolved_pyramid_min();
    if floor > cfg.wt {
        return Err(Error::InvalidPyramid(format!("pyramid_min ({floor}) exceeds wt ({})", cfg.wt)));
    }
    if floor < cfg.ws {
        return Err(Error::InvalidPyramid(format!("pyramid_min ({floor}) below ws ({})", cfg.ws)));
    }
    if n_layers == 0 {
        return Ok(Vec::new());
    }
    if n_layers == 1 {
        return Ok(vec![cfg.wt]);
    }
    let top = 2 * cfg.wt - floor;
    let span = top - floor;
    let steps = n_layers - 1;
    // round(top - span * l / steps), half up
    let mut budgets: Vec<usize> = (0..n_layers)
        .map(|l| {
            let num = top * steps - span * l;
            (2 * num + steps) / (2 * steps)
        })
        .collect();
    let target = cfg.wt * n_layers;
    let mut total: usize = budgets.iter().sum();
    while total > target {
        let mut changed = false;
        for i in 0..n_layers {
            if total == target {
                break;
            }
            let next = budgets.get(i + 1).copied().unwrap_or(0);
            if budgets[i] > next && budgets[i] > floor {
                budgets[i] -= 1;
                total -= 1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut i = 0;
    while total < target {
        budgets[i] += 1;
        total += 1;
        i = (i + 1) % n_layers;
    }
    Ok(budgets)
}

pub fn pyramid_select(trace: &AttentionTrace, cfg: &PolicyConfig) -> Result<RetentionPlan> {
    check_trace(trace, cfg)?;
    let budgets = pyramid_budgets(trace.n_layers, cfg)?;
    if trace.seq_len <= cfg.wt {
        return Ok(RetentionPlan::identity(PolicyKind::Pyramid, trace.n_layers, trace.seq_len, cfg.ws));
    }
    snapkv_with_budgets(trace, cfg, PolicyKind::Pyramid, &budgets)
}

/// Run the policy named in `cfg.policy`.
pub fn select(trace: &AttentionTrace, cfg: &PolicyConfig) -> Result<RetentionPlan> {
    match cfg.policy {
        PolicyKind::Full => {
            check_trace(trace, cfg)?;
            Ok(RetentionPlan::identity(PolicyKind::Full, trace.n_layers, trace.seq_len, cfg.ws))
        }
        PolicyKind::Streaming => {
            check_trace(trace, cfg)?;
            streaming_select(trace.seq_len, trace.n_layers, cfg)
        }
        PolicyKind::H2o => h2o_select(trace, cfg),
        PolicyKind::Snapkv => snapkv_select(trace, cfg),
        PolicyKind::Pyramid => pyramid_select(trace, cfg),
        PolicyKind::Dynamic => Ok(dynamickv::run_prefill_compression(trace, cfg)?.plan),
    }
}

/// Narrow every layer of `cache` to the plan's positions, ascending.
pub fn apply_plan(cache: &KVState, plan: &RetentionPlan) -> Result<KVState> {
    if cache.n_layers() != plan.n_layers() {
        return Err(Error::PlanCacheMismatch(format!(
            "plan has {} layers, cache has {}",
            plan.n_layers(),
            cache.n_layers()
        )));
    }
    let layers = cache
        .layers()
        .iter()
        .zip(&plan.layers)
        .enumerate()
        .map(|(l, (lc, keep))| {
            let positions = lc.positions();
            let mut slots: Vec<usize> = keep
                .iter()
                .map(|p| {
                    positions.iter().position(|q| q == p).ok_or_else(|| {
                        Error::PlanCacheMismatch(format!("layer {l}: position {p} not in cache"))
                    })
                })
                .collect::<Result<_>>()?;
            slots.sort_unstable_by_key(|&s| positions[s]);
            slots.dedup();
            Ok(lc.gather(&slots))
        })
        .collect::<Result<Vec<_>>>()?;
    cache.with_layers(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_model::{Model, ModelConfig};
    use crate::trace::{synth_trace, Profile};
    use proptest::prelude::*;

    fn cfg(wt: usize, ws: usize) -> PolicyConfig {
        PolicyConfig { wt, ws, ..PolicyConfig::default() }
    }

    fn trace_from(n_layers: usize, n_heads: usize, seq_len: usize, scores: Vec<f32>) -> AttentionTrace {
        AttentionTrace {
            n_layers,
            n_heads,
            seq_len,
            window: 1,
            task_label: "t".into(),
            needle_positions: vec![],
            scores,
        }
    }

    #[test]
    fn streaming_examples() {
        let c = PolicyConfig { sink: 4, ..cfg(10, 4) };
        let plan = streaming_select(100, 2, &c).unwrap();
        let expect: Vec<usize> = (0..4).chain(94..100).collect();
        assert_eq!(plan.layers, vec![expect.clone(), expect]);
        plan.validate().unwrap();

        assert!(streaming_select(10, 2, &c).unwrap().is_identity());

        let recency = streaming_select(100, 1, &PolicyConfig { sink: 0, ..c.clone() }).unwrap();
        assert_eq!(recency.layers[0], (90..100).collect::<Vec<_>>());

        let err = streaming_select(100, 1, &PolicyConfig { sink: 10, ..c.clone() }).unwrap_err();
        assert!(err.to_string().starts_with("sink exceeds budget"));
        assert!(streaming_select(100, 1, &PolicyConfig { sink: 7, ..c }).is_err());
    }

    #[test]
    fn h2o_keeps_dominant_position() {
        let (l, h, s) = (3, 2, 40);
        let mut scores = vec![0.01f32; l * h * s];
        for layer in 0..l {
            scores[(layer * h) * s + 11 + layer] = 5.0;
        }
        let t = trace_from(l, h, s, scores);
        let plan = h2o_select(&t, &cfg(10, 4)).unwrap();
        for (layer, kept) in plan.layers.iter().enumerate() {
            assert!(kept.contains(&(11 + layer)));
            assert_eq!(kept.len(), 10);
        }
    }

    #[test]
    fn h2o_uniform_takes_lowest_indices() {
        let t = synth_trace(2, 3, 50, 4, Profile::Uniform, 0).unwrap();
        let plan = h2o_select(&t, &cfg(10, 4)).unwrap();
        let expect: Vec<usize> = (0..6).chain(46..50).collect();
        assert!(plan.layers.iter().all(|l| *l == expect));
    }

    fn brute_force_h2o(t: &AttentionTrace, c: &PolicyConfig) -> Vec<Vec<usize>> {
        let prefix = t.seq_len - c.ws;
        (0..t.n_layers)
            .map(|l| {
                let acc: Vec<f32> = (0..prefix).map(|p| t.heads(l).map(|h| h[p]).sum()).collect();
                let mut order: Vec<usize> = (0..prefix).collect();
                order.sort_by(|&a, &b| acc[b].partial_cmp(&acc[a]).unwrap().then(a.cmp(&b)));
                let mut keep = order[..c.wt - c.ws].to_vec();
                keep.sort();
                keep.extend(t.seq_len - c.ws..t.seq_len);
                keep
            })
            .collect()
    }

    #[test]
    fn h2o_matches_sort_oracle() {
        for seed in 0..20 {
            let t = synth_trace(3, 2, 80, 8, Profile::Wave, seed).unwrap();
            let c = cfg(20, 8);
            assert_eq!(h2o_select(&t, &c).unwrap().layers, brute_force_h2o(&t, &c));
        }
    }

    #[test]
    fn snapkv_single_head_is_h2o_on_pooled_scores() {
        let t = synth_trace(3, 1, 64, 8, Profile::EarlyHeavy, 5).unwrap();
        let c = cfg(24, 8);
        let prefix = t.seq_len - c.ws;
        let mut pooled = t.clone();
        for l in 0..t.n_layers {
            let p = pooled_prefix(t.head(l, 0), prefix, c.pool_kernel).unwrap();
            let start = l * t.seq_len;
            pooled.scores[start..start + prefix].copy_from_slice(&p);
        }
        assert_eq!(snapkv_select(&t, &c).unwrap().layers, h2o_select(&pooled, &c).unwrap().layers);
    }

    #[test]
    fn snapkv_keeps_needle_and_exact_budget() {
        let t = synth_trace(4, 2, 200, 8, Profile::NeedleAt { position: 50, mass: 0.9 }, 2).unwrap();
        let plan = snapkv_select(&t, &cfg(24, 8)).unwrap();
        assert!(plan.layers.iter().all(|l| l.contains(&50) && l.len() == 24));

        let u = synth_trace(4, 2, 200, 8, Profile::Uniform, 2).unwrap();
        let plan = snapkv_select(&u, &cfg(24, 8)).unwrap();
        assert!(plan.layers.iter().all(|l| l.len() == 24));
        plan.validate().unwrap();
    }

    #[test]
    fn snapkv_union_equals_max_over_heads_ranking() {
        for seed in 0..10 {
            let t = synth_trace(2, 4, 90, 6, Profile::Wave, seed).unwrap();
            let c = cfg(20, 6);
            let prefix = t.seq_len - c.ws;
            let plan = snapkv_select(&t, &c).unwrap();
            for l in 0..2 {
                let pooled: Vec<Vec<f32>> =
                    t.heads(l).map(|h| pooled_prefix(h, prefix, c.pool_kernel).unwrap()).collect();
                let best: Vec<f32> = (0..prefix).map(|p| pooled.iter().map(|h| h[p]).fold(0.0, f32::max)).collect();
                let mut keep = crate::tensor::top_k_indices(&best, c.wt - c.ws).unwrap();
                keep.extend(t.seq_len - c.ws..t.seq_len);
                assert_eq!(plan.layers[l], keep);
            }
        }
    }

    #[test]
    fn pyramid_examples() {
        let c = PolicyConfig { pyramid_min: Some(4), ..cfg(10, 4) };
        assert_eq!(pyramid_budgets(2, &c).unwrap(), vec![16, 4]);
        assert_eq!(pyramid_budgets(1, &c).unwrap(), vec![10]);
        let err = pyramid_budgets(4, &PolicyConfig { pyramid_min: Some(11), ..c.clone() }).unwrap_err();
        assert!(err.to_string().starts_with("invalid pyramid"));
        assert!(pyramid_budgets(4, &PolicyConfig { pyramid_min: Some(3), ..c }).is_err());
    }

    #[test]
    fn pyramid_plan_uses_schedule() {
        let t = synth_trace(4, 2, 300, 8, Profile::Wave, 1).unwrap();
        let c = PolicyConfig { pyramid_min: Some(12), ..cfg(32, 8) };
        let plan = pyramid_select(&t, &c).unwrap();
        assert_eq!(plan.budgets(), pyramid_budgets(4, &c).unwrap());
        assert_eq!(plan.retained_tokens(), 32 * 4);
        plan.validate().unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn pyramid_total_and_monotone(n_layers in 1usize..40, ws in 1usize..16, extra in 1usize..200, frac in 0.0f64..=1.0) {
            let wt = ws + extra;
            let floor = ws + ((extra as f64) * frac).floor() as usize;
            let c = PolicyConfig { pyramid_min: Some(floor), ..cfg(wt, ws) };
            let b = pyramid_budgets(n_layers, &c).unwrap();
            prop_assert_eq!(b.iter().sum::<usize>(), wt * n_layers);
            prop_assert!(b.windows(2).all(|w| w[0] >= w[1]), "{:?}", b);
            prop_assert!(b.iter().all(|&x| x >= floor));
        }

        #[test]
        fn fixed_budget_policies_keep_window_and_exact_count(
            seed in 0u64..1000, n_layers in 1usize..5, n_heads in 1usize..4, s in 20usize..120,
            ws in 1usize..8, extra in 1usize..30,
        ) {
            let wt = ws + extra;
            let t = synth_trace(n_layers, n_heads, s, ws, Profile::Wave, seed).unwrap();
            let c = PolicyConfig { sink: 0, ..cfg(wt, ws) };
            for kind in [PolicyKind::Streaming, PolicyKind::H2o, PolicyKind::Snapkv] {
                let plan = select(&t, &c.with_policy(kind)).unwrap();
                plan.validate().unwrap();
                prop_assert!(plan.layers.iter().all(|l| l.len() == wt.min(s)));
                prop_assert_eq!(&plan, &select(&t, &c.with_policy(kind)).unwrap());
            }
            for kind in [PolicyKind::Pyramid, PolicyKind::Dynamic, PolicyKind::Full] {
                let plan = select(&t, &c.with_policy(kind)).unwrap();
                plan.validate().unwrap();
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(10, 10).validate().is_err());
        assert!(cfg(10, 0).validate().is_err());
        assert!(PolicyConfig { r_max: 0.5, ..cfg(10, 4) }.validate().is_err());
        assert!(PolicyConfig { m: 0, ..cfg(10, 4) }.validate().is_err());
        assert!(matches!(PolicyConfig { pool_kernel: 4, ..cfg(10, 4) }.validate(), Err(Error::InvalidKernel(4))));
        assert_eq!("SnapKV".parse::<PolicyKind>().unwrap(), PolicyKind::Snapkv);
        assert!("fastgen".parse::<PolicyKind>().is_err());
    }

    fn model_and_tokens() -> (Model, Vec<u32>) {
        let m = Model::init_deterministic(ModelConfig {
            n_layers: 2,
            n_query_heads: 2,
            n_kv_heads: 1,
            head_dim: 8,
            hidden: 16,
            vocab: 32,
            max_seq: 128,
            seed: 3,
            rope_base: 10_000.0,
        })
        .unwrap();
        (m, (0..40).map(|i| (i * 7 % 32) as u32).collect())
    }

    #[test]
    fn apply_plan_identity_and_window_only() {
        let (m, toks) = model_and_tokens();
        let out = m.prefill(&toks, 4).unwrap();
        let id = RetentionPlan::identity(PolicyKind::Full, 2, 40, 4);
        assert_eq!(apply_plan(&out.cache, &id).unwrap(), out.cache);

        let window_only = RetentionPlan::from_selections(PolicyKind::Streaming, 40, 4, vec![vec![], vec![]]);
        let narrowed = apply_plan(&out.cache, &window_only).unwrap();
        assert!(narrowed.layers().iter().all(|l| l.seq_len() == 4));

        let bad = RetentionPlan { layers: vec![vec![41], vec![0]], ..id.clone() };
        let err = apply_plan(&out.cache, &bad).unwrap_err();
        assert!(err.to_string().starts_with("plan/cache mismatch"));
    }

    #[test]
    fn apply_plan_then_decode() {
        let (m, toks) = model_and_tokens();
        let out = m.prefill(&toks, 4).unwrap();
        let trace = AttentionTrace::from_window_attention(&out.window_attention, "toy");
        let plan = snapkv_select(&trace, &PolicyConfig { pool_kernel: 3, ..cfg(12, 4) }).unwrap();
        let mut cache = apply_plan(&out.cache, &plan).unwrap();
        for l in cache.layers() {
            assert!(l.positions().windows(2).all(|w| w[0] < w[1]));
        }
        let logits = m.decode_step(&mut cache, 1).unwrap();
        assert_eq!(logits.len(), 32);
        assert_eq!(cache.layer(0).seq_len(), 13);
        assert_eq!(*cache.layer(0).positions().last().unwrap(), 40);
    }
}
