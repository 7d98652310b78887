//! WebAssembly bindings for the demo page in `www/`. Each export takes plain
//! numbers and strings and returns a JSON document.

use dynkv::harness::{layer_profile, needle_retention};
use dynkv::policies::{pyramid_budgets, select, PolicyConfig, PolicyKind};
use dynkv::trace::{synth_trace, AttentionTrace, Profile};
use dynkv::{run_prefill_compression, Error};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest trace the page will build, in scores.
const MAX_SCORES: usize = 4 << 20;

#[derive(Serialize)]
pub struct Allocation {
    pub dynamic: Vec<usize>,
    pub steps: Vec<Vec<usize>>,
    pub pyramid: Vec<usize>,
    pub uniform: usize,
    pub compression_ratio: f64,
}

#[derive(Serialize)]
pub struct ProfileCurves {
    pub q1: Vec<f64>,
    pub median: Vec<f64>,
    pub q3: Vec<f64>,
}

#[derive(Serialize)]
pub struct NeedleRow {
    pub policy: &'static str,
    pub retention: f64,
    pub kept_layers: usize,
}

fn trace(profile: &str, layers: usize, heads: usize, seq_len: usize, ws: usize, seed: u64) -> Result<AttentionTrace, Error> {
    if layers * heads * seq_len > MAX_SCORES {
        return Err(Error::InvalidConfig(format!("trace too large for the page ({} scores)", layers * heads * seq_len)));
    }
    synth_trace(layers, heads, seq_len, ws, profile.parse::<Profile>()?, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn allocation(
    profile: &str,
    layers: usize,
    heads: usize,
    seq_len: usize,
    wt: usize,
    ws: usize,
    r_max: f64,
    m: usize,
    seed: u64,
) -> Result<Allocation, Error> {
    let t = trace(profile, layers, heads, seq_len, ws, seed)?;
    let cfg = PolicyConfig { wt, ws, r_max, m, ..PolicyConfig::default() };
    let out = run_prefill_compression(&t, &cfg)?;
    let pyramid = pyramid_budgets(layers, &cfg)?.into_iter().map(|b| b - ws).collect();
    Ok(Allocation {
        dynamic: out.budgets.0,
        steps: out.steps.into_iter().map(|s| s.budgets).collect(),
        pyramid,
        uniform: cfg.per_layer_quota(),
        compression_ratio: out.plan.compression_ratio(),
    })
}

pub fn profile_curves(
    profile: &str,
    layers: usize,
    heads: usize,
    seq_len: usize,
    per_layer_k: usize,
    n_traces: usize,
) -> Result<ProfileCurves, Error> {
    let traces = (0..n_traces.max(1) as u64)
        .map(|seed| trace(profile, layers, heads, seq_len, 32.min(seq_len - 1), seed))
        .collect::<Result<Vec<_>, _>>()?;
    let agg = layer_profile(&traces, per_layer_k)?.aggregate;
    Ok(ProfileCurves {
        q1: agg.iter().map(|q| q.q1).collect(),
        median: agg.iter().map(|q| q.median).collect(),
        q3: agg.iter().map(|q| q.q3).collect(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn needle_rows(
    layers: usize,
    heads: usize,
    seq_len: usize,
    wt: usize,
    ws: usize,
    position: usize,
    mass: f32,
    seed: u64,
) -> Result<Vec<NeedleRow>, Error> {
    let t = trace(&format!("needle-at({position},{mass})"), layers, heads, seq_len, ws, seed)?;
    let base = PolicyConfig { wt, ws, ..PolicyConfig::default() };
    PolicyKind::ALL
        .iter()
        .map(|&kind| {
            let plan = select(&t, &base.with_policy(kind))?;
            let kept_layers = plan.layers.iter().filter(|l| l.binary_search(&position).is_ok()).count();
            Ok(NeedleRow { policy: kind.name(), retention: needle_retention(&plan, &t)?, kept_layers })
        })
        .collect()
}

fn to_js<T: Serialize>(r: Result<T, Error>) -> Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn allocate(
    profile: &str,
    layers: usize,
    heads: usize,
    seq_len: usize,
    wt: usize,
    ws: usize,
    r_max: f64,
    m: usize,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(allocation(profile, layers, heads, seq_len, wt, ws, r_max, m, seed.into()))
}

#[wasm_bindgen]
pub fn profile(
    profile: &str,
    layers: usize,
    heads: usize,
    seq_len: usize,
    per_layer_k: usize,
    n_traces: usize,
) -> Result<String, JsValue> {
    to_js(profile_curves(profile, layers, heads, seq_len, per_layer_k, n_traces))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn needle(
    layers: usize,
    heads: usize,
    seq_len: usize,
    wt: usize,
    ws: usize,
    position: usize,
    mass: f32,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(needle_rows(layers, heads, seq_len, wt, ws, position, mass, seed.into()))
}
