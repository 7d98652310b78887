//! Seeded decoder-only transformer used as a fidelity oracle.
//!
//! Pre-norm blocks (RMSNorm, grouped-query attention with rotary positions,
//! SiLU MLP), untied LM head. Rotary embedding is applied to keys before they
//! are cached, so a cache slot carries its own position and evicting slots
//! never requires re-encoding the survivors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, softmax_in_place, vec_mat_into, Matrix2D};

const RMS_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
    pub rope_base: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            n_query_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            hidden: 64,
            vocab: 256,
            max_seq: 2048,
            seed: 0,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_query_heads", self.n_query_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("hidden", self.hidden),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.n_query_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::InvalidConfig(format!(
                "n_query_heads ({}) not divisible by n_kv_heads ({})",
                self.n_query_heads, self.n_kv_heads
            )));
        }
        if self.hidden != self.n_query_heads * self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "hidden ({}) != n_query_heads * head_dim ({})",
                self.hidden,
                self.n_query_heads * self.head_dim
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig("head_dim must be even for rotary embedding".into()));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(Error::InvalidConfig("rope_base must be finite and > 1".into()));
        }
        Ok(())
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    fn ffn(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Matrix2D,
    wk: Matrix2D,
    wv: Matrix2D,
    wo: Matrix2D,
    w_up: Matrix2D,
    w_down: Matrix2D,
}

/// Immutable model weights plus rotary tables.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    embed: Matrix2D,
    layers: Vec<LayerWeights>,
    lm_head: Matrix2D,
    rope_cos: Vec<f32>,
    rope_sin: Vec<f32>,
}

/// Cached keys and values of one layer, slot-major: slot `i` occupies
/// `[i * kv_width, (i + 1) * kv_width)` with heads laid out contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    kv_width: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    positions: Vec<usize>,
}

impl LayerCache {
    fn with_capacity(kv_width: usize, slots: usize) -> Self {
        Self {
            kv_width,
            keys: Vec::with_capacity(kv_width * slots),
            values: Vec::with_capacity(kv_width * slots),
            positions: Vec::with_capacity(slots),
        }
    }

    fn push(&mut self, key: &[f32], value: &[f32], position: usize) {
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.positions.push(position);
    }

    pub fn seq_len(&self) -> usize {
        self.positions.len()
    }

    /// Original token index of every slot.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn key(&self, slot: usize) -> &[f32] {
        &self.keys[slot * self.kv_width..(slot + 1) * self.kv_width]
    }

    pub fn value(&self, slot: usize) -> &[f32] {
        &self.values[slot * self.kv_width..(slot + 1) * self.kv_width]
    }

    /// New cache holding the given slots, in the given order.
    pub fn gather(&self, slots: &[usize]) -> LayerCache {
        let mut out = LayerCache::with_capacity(self.kv_width, slots.len());
        for &s in slots {
            out.push(self.key(s), self.value(s), self.positions[s]);
        }
        out
    }
}

/// Per-layer KV cache of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct KVState {
    layers: Vec<LayerCache>,
    n_kv_heads: usize,
    head_dim: usize,
    next_position: usize,
}

impl KVState {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Position the next decoded token will occupy.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn total_slots(&self) -> usize {
        self.layers.iter().map(LayerCache::seq_len).sum()
    }

    /// Replace every layer, keeping head geometry and the position counter.
    pub fn with_layers(&self, layers: Vec<LayerCache>) -> Result<KVState> {
        if layers.len() != self.layers.len() {
            return Err(Error::PlanCacheMismatch(format!(
                "{} layers for a {}-layer cache",
                layers.len(),
                self.layers.len()
            )));
        }
        Ok(KVState {
            layers,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            next_position: self.next_position,
        })
    }
}

/// Mean over the last `window` query rows of causal attention probabilities,
/// per layer and query head, flat `[layer][head][key position]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowAttention {
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub window: usize,
    pub scores: Vec<f32>,
}

impl WindowAttention {
    pub fn head(&self, layer: usize, head: usize) -> &[f32] {
        let start = (layer * self.n_heads + head) * self.seq_len;
        &self.scores[start..start + self.seq_len]
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub cache: KVState,
    pub window_attention: WindowAttention,
    /// Logits at the final prompt position.
    pub logits: Vec<f32>,
}

fn rms_norm(x: &[f32], out: &mut [f32]) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v * inv;
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix2D {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Matrix2D::new(rows, cols, data).expect("shape by construction")
}

/// Scratch buffers for a forward pass over one token.
struct Scratch {
    normed: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    attn: Vec<f32>,
    proj: Vec<f32>,
    up: Vec<f32>,
    probs: Vec<f32>,
}

impl Scratch {
    fn new(cfg: &ModelConfig) -> Self {
        Self {
            normed: vec![0.0; cfg.hidden],
            q: vec![0.0; cfg.n_query_heads * cfg.head_dim],
            k: vec![0.0; cfg.kv_width()],
            v: vec![0.0; cfg.kv_width()],
            attn: vec![0.0; cfg.n_query_heads * cfg.head_dim],
            proj: vec![0.0; cfg.hidden],
            up: vec![0.0; cfg.ffn()],
            probs: Vec::new(),
        }
    }
}

impl Model {
    /// Build a model whose weights are a pure function of `cfg`.
    pub fn init_deterministic(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / (cfg.hidden as f32).sqrt();
        let embed = random_matrix(&mut rng, cfg.vocab, cfg.hidden, scale);
        let qw = cfg.n_query_heads * cfg.head_dim;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                wq: random_matrix(&mut rng, cfg.hidden, qw, scale),
                wk: random_matrix(&mut rng, cfg.hidden, cfg.kv_width(), scale),
                wv: random_matrix(&mut rng, cfg.hidden, cfg.kv_width(), scale),
                wo: random_matrix(&mut rng, qw, cfg.hidden, scale),
                w_up: random_matrix(&mut rng, cfg.hidden, cfg.ffn(), scale),
                w_down: random_matrix(&mut rng, cfg.ffn(), cfg.hidden, scale),
            })
            .collect();
        let lm_head = random_matrix(&mut rng, cfg.hidden, cfg.vocab, scale);

        let half = cfg.head_dim / 2;
        let mut rope_cos = Vec::with_capacity(cfg.max_seq * half);
        let mut rope_sin = Vec::with_capacity(cfg.max_seq * half);
        for pos in 0..cfg.max_seq {
            for i in 0..half {
                let freq = (cfg.rope_base as f64).powf(-2.0 * i as f64 / cfg.head_dim as f64);
                let angle = pos as f64 * freq;
                rope_cos.push(angle.cos() as f32);
                rope_sin.push(angle.sin() as f32);
            }
        }
        Ok(Model { cfg, embed, layers, lm_head, rope_cos, rope_sin })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// FNV-1a over the bit patterns of every weight, in a fixed order.
    pub fn weights_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |m: &Matrix2D| {
            for &x in m.data() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        };
        feed(&self.embed);
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_up, &l.w_down] {
                feed(m);
            }
        }
        feed(&self.lm_head);
        h
    }

    pub fn empty_cache(&self) -> KVState {
        KVState {
            layers: (0..self.cfg.n_layers)
                .map(|_| LayerCache::with_capacity(self.cfg.kv_width(), 0))
                .collect(),
            n_kv_heads: self.cfg.n_kv_heads,
            head_dim: self.cfg.head_dim,
            next_position: 0,
        }
    }

    fn apply_rope(&self, x: &mut [f32], n_heads: usize, position: usize) {
        let d = self.cfg.head_dim;
        let half = d / 2;
        let cos = &self.rope_cos[position * half..(position + 1) * half];
        let sin = &self.rope_sin[position * half..(position + 1) * half];
        for h in 0..n_heads {
            let head = &mut x[h * d..(h + 1) * d];
            for i in 0..half {
                let (a, b) = (head[i], head[i + half]);
                head[i] = a * cos[i] - b * sin[i];
                head[i + half] = a * sin[i] + b * cos[i];
            }
        }
    }

    fn check_token(&self, token: u32) -> Result<()> {
        if token as usize >= self.cfg.vocab {
            return Err(Error::TokenOutOfRange { token, vocab: self.cfg.vocab });
        }
        Ok(())
    }

    /// Attention of every query head in `q` over the first `n_slots` slots of
    /// `cache`, written into `out`. When `window_acc` is given, each head's
    /// probabilities scaled by `weight` are added into it (`[head][slot]`).
    fn attend(
        &self,
        q: &[f32],
        cache: &LayerCache,
        n_slots: usize,
        probs: &mut Vec<f32>,
        out: &mut [f32],
        mut window_acc: Option<(&mut [f32], usize, f32)>,
    ) {
        let d = self.cfg.head_dim;
        let group = self.cfg.group_size();
        let scale = 1.0 / (d as f32).sqrt();
        probs.resize(n_slots, 0.0);
        for h in 0..self.cfg.n_query_heads {
            let g = h / group;
            let qh = &q[h * d..(h + 1) * d];
            for (s, p) in probs.iter_mut().enumerate() {
                *p = dot(qh, &cache.key(s)[g * d..(g + 1) * d]);
            }
            softmax_in_place(probs, scale);
            let oh = &mut out[h * d..(h + 1) * d];
            oh.iter_mut().for_each(|o| *o = 0.0);
            for (s, &p) in probs.iter().enumerate() {
                let vs = &cache.value(s)[g * d..(g + 1) * d];
                for (o, &v) in oh.iter_mut().zip(vs) {
                    *o += p * v;
                }
            }
            if let Some((acc, stride, weight)) = window_acc.as_mut() {
                let row = &mut acc[h * *stride..h * *stride + n_slots];
                for (a, &p) in row.iter_mut().zip(probs.iter()) {
                    *a += p * *weight;
                }
            }
        }
    }

    /// MLP sub-block with residual, in place on one hidden row.
    fn mlp(&self, lw: &LayerWeights, x: &mut [f32], sc: &mut Scratch) {
        rms_norm(x, &mut sc.normed);
        vec_mat_into(&sc.normed, &lw.w_up, &mut sc.up);
        sc.up.iter_mut().for_each(|u| *u = silu(*u));
        vec_mat_into(&sc.up, &lw.w_down, &mut sc.proj);
        for (xi, p) in x.iter_mut().zip(&sc.proj) {
            *xi += p;
        }
    }

    fn logits(&self, x: &[f32], sc: &mut Scratch) -> Vec<f32> {
        rms_norm(x, &mut sc.normed);
        let mut logits = vec![0.0; self.cfg.vocab];
        vec_mat_into(&sc.normed, &self.lm_head, &mut logits);
        logits
    }

    /// Full causal prefill over `tokens`, recording window attention for the
    /// last `ws` query rows.
    pub fn prefill(&self, tokens: &[u32], ws: usize) -> Result<PrefillOutput> {
        let cfg = &self.cfg;
        let seq_len = tokens.len();
        if seq_len == 0 {
            return Err(Error::EmptyInput);
        }
        if ws == 0 || ws > seq_len {
            return Err(Error::WindowExceedsSequence { ws, seq_len });
        }
        if seq_len > cfg.max_seq {
            return Err(Error::ContextOverflow { position: seq_len - 1, max_seq: cfg.max_seq });
        }
        for &t in tokens {
            self.check_token(t)?;
        }

        let hidden = cfg.hidden;
        let mut xs: Vec<f32> = Vec::with_capacity(seq_len * hidden);
        for &t in tokens {
            xs.extend_from_slice(self.embed.row(t as usize));
        }
        let mut sc = Scratch::new(cfg);
        let mut cache = self.empty_cache();
        let mut window_scores = vec![0.0f32; cfg.n_layers * cfg.n_query_heads * seq_len];
        let window_start = seq_len - ws;
        let window_weight = 1.0 / ws as f32;

        for (l, lw) in self.layers.iter().enumerate() {
            let layer_cache = &mut cache.layers[l];
            *layer_cache = LayerCache::with_capacity(cfg.kv_width(), seq_len);
            // keys/values of the whole prompt first, so every query sees a complete prefix
            let mut queries = vec![0.0f32; seq_len * cfg.n_query_heads * cfg.head_dim];
            for t in 0..seq_len {
                let x = &xs[t * hidden..(t + 1) * hidden];
                rms_norm(x, &mut sc.normed);
                let q = &mut queries[t * sc.q.len()..(t + 1) * sc.q.len()];
                vec_mat_into(&sc.normed, &lw.wq, q);
                vec_mat_into(&sc.normed, &lw.wk, &mut sc.k);
                vec_mat_into(&sc.normed, &lw.wv, &mut sc.v);
                self.apply_rope(q, cfg.n_query_heads, t);
                self.apply_rope(&mut sc.k, cfg.n_kv_heads, t);
                layer_cache.push(&sc.k, &sc.v, t);
            }
            let layer_window =
                &mut window_scores[l * cfg.n_query_heads * seq_len..(l + 1) * cfg.n_query_heads * seq_len];
            for t in 0..seq_len {
                let q = &queries[t * sc.q.len()..(t + 1) * sc.q.len()];
                let acc = (t >= window_start).then_some((&mut *layer_window, seq_len, window_weight));
                let mut attn = std::mem::take(&mut sc.attn);
                self.attend(q, layer_cache, t + 1, &mut sc.probs, &mut attn, acc);
                vec_mat_into(&attn, &lw.wo, &mut sc.proj);
                sc.attn = attn;
                let x = &mut xs[t * hidden..(t + 1) * hidden];
                for (xi, p) in x.iter_mut().zip(&sc.proj) {
                    *xi += p;
                }
                self.mlp(lw, x, &mut sc);
            }
        }
        cache.next_position = seq_len;
        let logits = self.logits(&xs[(seq_len - 1) * hidden..], &mut sc);
        Ok(PrefillOutput {
            cache,
            window_attention: WindowAttention {
                n_layers: cfg.n_layers,
                n_heads: cfg.n_query_heads,
                seq_len,
                window: ws,
                scores: window_scores,
            },
            logits,
        })
    }

    /// One autoregressive step against `cache` (full or compressed). Appends
    /// the new token's key/value to every layer and returns its logits.
    pub fn decode_step(&self, cache: &mut KVState, token: u32) -> Result<Vec<f32>> {
        let cfg = &self.cfg;
        if cache.n_layers() != cfg.n_layers {
            return Err(Error::PlanCacheMismatch(format!(
                "{}-layer cache for a {}-layer model",
                cache.n_layers(),
                cfg.n_layers
            )));
        }
        if cache.n_kv_heads != cfg.n_kv_heads || cache.head_dim != cfg.head_dim {
            return Err(Error::PlanCacheMismatch("cache head geometry differs from model".into()));
        }
        let position = cache.next_position;
        if position >= cfg.max_seq {
            return Err(Error::ContextOverflow { position, max_seq: cfg.max_seq });
        }
        self.check_token(token)?;

        let mut sc = Scratch::new(cfg);
        let mut x = self.embed.row(token as usize).to_vec();
        for (lw, layer_cache) in self.layers.iter().zip(cache.layers.iter_mut()) {
            rms_norm(&x, &mut sc.normed);
            vec_mat_into(&sc.normed, &lw.wq, &mut sc.q);
            vec_mat_into(&sc.normed, &lw.wk, &mut sc.k);
            vec_mat_into(&sc.normed, &lw.wv, &mut sc.v);
            let mut q = std::mem::take(&mut sc.q);
            self.apply_rope(&mut q, cfg.n_query_heads, position);
            self.apply_rope(&mut sc.k, cfg.n_kv_heads, position);
            layer_cache.push(&sc.k, &sc.v, position);
            let mut attn = std::mem::take(&mut sc.attn);
            self.attend(&q, layer_cache, layer_cache.seq_len(), &mut sc.probs, &mut attn, None);
            vec_mat_into(&attn, &lw.wo, &mut sc.proj);
            sc.attn = attn;
            sc.q = q;
            for (xi, p) in x.iter_mut().zip(&sc.proj) {
                *xi += p;
            }
            self.mlp(lw, &mut x, &mut sc);
        }
        cache.next_position += 1;
        Ok(self.logits(&x, &mut sc))
    }
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// `len` uniformly random token ids below `vocab`, reproducible from `seed`.
pub fn seeded_prompt(len: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}
