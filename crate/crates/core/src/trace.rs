//! `KVTRACE1` attention traces: window-attention scores per layer, head and
//! key position, plus synthetic generators with controllable layer skew.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! "KVTRACE1" | L | H | S | ws | label_len | label (UTF-8) | n_needles | needle* | f32 scores[L*H*S]
//! ```
//!
//! Scores are stored layer-major, then head, then key position.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::toy_model::WindowAttention;

pub const MAGIC: &[u8; 8] = b"KVTRACE1";

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub window: usize,
    pub task_label: String,
    /// Empty when the trace carries no needle.
    pub needle_positions: Vec<usize>,
    pub scores: Vec<f32>,
}

/// Header fields, as dumped by `inspect`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceHeader {
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub window: usize,
    pub task_label: String,
    pub needle_positions: Vec<usize>,
}

impl AttentionTrace {
    pub fn validate(&self) -> Result<()> {
        let expect = self
            .n_layers
            .checked_mul(self.n_heads)
            .and_then(|x| x.checked_mul(self.seq_len))
            .ok_or_else(|| Error::MalformedTrace("dimension overflow".into()))?;
        if self.scores.len() != expect {
            return Err(Error::MalformedTrace(format!(
                "{} scores for L*H*S = {expect}",
                self.scores.len()
            )));
        }
        if self.window > self.seq_len {
            return Err(Error::MalformedTrace(format!(
                "window {} longer than sequence {}",
                self.window, self.seq_len
            )));
        }
        if let Some((i, s)) = self.scores.iter().enumerate().find(|(_, s)| !s.is_finite() || **s < 0.0) {
            return Err(Error::MalformedTrace(format!("score {s} at flat index {i}")));
        }
        if let Some(p) = self.needle_positions.iter().find(|&&p| p >= self.seq_len) {
            return Err(Error::MalformedTrace(format!("needle {p} outside sequence {}", self.seq_len)));
        }
        Ok(())
    }

    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            seq_len: self.seq_len,
            window: self.window,
            task_label: self.task_label.clone(),
            needle_positions: self.needle_positions.clone(),
        }
    }

    pub fn head(&self, layer: usize, head: usize) -> &[f32] {
        let start = (layer * self.n_heads + head) * self.seq_len;
        &self.scores[start..start + self.seq_len]
    }

    /// All heads of one layer, `[head][position]` flat.
    pub fn layer(&self, layer: usize) -> &[f32] {
        let w = self.n_heads * self.seq_len;
        &self.scores[layer * w..(layer + 1) * w]
    }

    pub fn heads(&self, layer: usize) -> impl Iterator<Item = &[f32]> {
        self.layer(layer).chunks_exact(self.seq_len.max(1))
    }

    pub fn from_window_attention(wa: &WindowAttention, label: impl Into<String>) -> AttentionTrace {
        AttentionTrace {
            n_layers: wa.n_layers,
            n_heads: wa.n_heads,
            seq_len: wa.seq_len,
            window: wa.window,
            task_label: label.into(),
            needle_positions: Vec::new(),
            scores: wa.scores.clone(),
        }
    }

    /// Length of the header plus score block in bytes.
    pub fn encoded_len(&self) -> usize {
        8 + 4 * 5 + self.task_label.len() + 4 + 4 * self.needle_positions.len() + 4 * self.scores.len()
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::MalformedTrace(format!("{what} {v} does not fit in u32")))
}

/// Serialize `t`; returns the number of bytes written.
pub fn write_trace<W: Write>(t: &AttentionTrace, sink: &mut W) -> Result<usize> {
    t.validate()?;
    let mut buf = Vec::with_capacity(t.encoded_len());
    buf.extend_from_slice(MAGIC);
    for (v, what) in [
        (t.n_layers, "n_layers"),
        (t.n_heads, "n_heads"),
        (t.seq_len, "seq_len"),
        (t.window, "window"),
        (t.task_label.len(), "label length"),
    ] {
        buf.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    buf.extend_from_slice(t.task_label.as_bytes());
    buf.extend_from_slice(&to_u32(t.needle_positions.len(), "needle count")?.to_le_bytes());
    for &p in &t.needle_positions {
        buf.extend_from_slice(&to_u32(p, "needle")?.to_le_bytes());
    }
    for &s in &t.scores {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or(Error::Truncated)?;
        let out = self.bytes.get(self.at..end).ok_or(Error::Truncated)?;
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }
}

pub fn decode_trace(bytes: &[u8]) -> Result<AttentionTrace> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) && !bytes.is_empty() { Error::Truncated } else { Error::NotATrace });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::NotATrace);
    }
    let mut cur = Cursor { bytes, at: 8 };
    let n_layers = cur.u32()?;
    let n_heads = cur.u32()?;
    let seq_len = cur.u32()?;
    let window = cur.u32()?;
    let label_len = cur.u32()?;
    let task_label = std::str::from_utf8(cur.take(label_len)?)
        .map_err(|e| Error::MalformedTrace(format!("label is not UTF-8: {e}")))?
        .to_owned();
    let n_needles = cur.u32()?;
    let needle_positions = (0..n_needles).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
    let n_scores = n_layers
        .checked_mul(n_heads)
        .and_then(|x| x.checked_mul(seq_len))
        .ok_or_else(|| Error::MalformedTrace("dimension overflow".into()))?;
    let score_bytes = n_scores
        .checked_mul(4)
        .ok_or_else(|| Error::MalformedTrace("dimension overflow".into()))?;
    if cur.remaining() < score_bytes {
        return Err(Error::Truncated);
    }
    if cur.remaining() > score_bytes {
        return Err(Error::MalformedTrace(format!("{} trailing bytes", cur.remaining() - score_bytes)));
    }
    let scores = cur
        .take(score_bytes)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let t = AttentionTrace { n_layers, n_heads, seq_len, window, task_label, needle_positions, scores };
    t.validate()?;
    Ok(t)
}

pub fn read_trace<R: Read>(source: &mut R) -> Result<AttentionTrace> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_trace(&bytes)
}

/// Shape of a synthetic trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile {
    Uniform,
    /// Per-layer mass decreasing with depth.
    EarlyHeavy,
    /// Per-layer mass increasing with depth.
    LateHeavy,
    /// Mass follows one cosine period over depth (high at both ends).
    Wave,
    /// Every head puts `mass` of its score on `position`.
    NeedleAt { position: usize, mass: f32 },
}

impl FromStr for Profile {
    type Err = Error;

    /// Accepts `uniform`, `early-heavy`, `late-heavy`, `wave`,
    /// `needle-at(p,mass)` and `needle-at:p:mass`.
    fn from_str(s: &str) -> Result<Profile> {
        let s = s.trim();
        match s {
            "uniform" => return Ok(Profile::Uniform),
            "early-heavy" => return Ok(Profile::EarlyHeavy),
            "late-heavy" => return Ok(Profile::LateHeavy),
            "wave" => return Ok(Profile::Wave),
            _ => {}
        }
        let unknown = || Error::UnknownProfile(s.to_owned());
        let args = s
            .strip_prefix("needle-at(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("needle-at:"))
            .ok_or_else(unknown)?;
        let mut parts = args.split([',', ':']).map(str::trim);
        let position = parts.next().and_then(|p| p.parse().ok()).ok_or_else(unknown)?;
        let mass: f32 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(unknown)?;
        if parts.next().is_some() || !(mass > 0.0 && mass <= 1.0) {
            return Err(unknown());
        }
        Ok(Profile::NeedleAt { position, mass })
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Profile::Uniform => f.write_str("uniform"),
            Profile::EarlyHeavy => f.write_str("early-heavy"),
            Profile::LateHeavy => f.write_str("late-heavy"),
            Profile::Wave => f.write_str("wave"),
            Profile::NeedleAt { position, mass } => write!(f, "needle-at({position},{mass})"),
        }
    }
}

impl Profile {
    /// Relative score mass of each layer.
    fn layer_mass(&self, n_layers: usize) -> Vec<f32> {
        let depth = |l: usize| l as f32;
        (0..n_layers)
            .map(|l| match self {
                Profile::Uniform | Profile::NeedleAt { .. } => 1.0,
                Profile::EarlyHeavy => 1.0 / (1.0 + 0.25 * depth(l)),
                Profile::LateHeavy => 1.0 / (1.0 + 0.25 * depth(n_layers - 1 - l)),
                Profile::Wave => {
                    let phase = std::f32::consts::TAU * depth(l) / n_layers as f32;
                    0.55 + 0.45 * phase.cos()
                }
            })
            .collect()
    }
}

/// Deterministic synthetic trace. Each head's scores are exponential noise
/// normalized so the head sums to its layer's mass (at most 1), so the trace
/// looks like the window mean of probability rows.
pub fn synth_trace(
    n_layers: usize,
    n_heads: usize,
    seq_len: usize,
    window: usize,
    profile: Profile,
    seed: u64,
) -> Result<AttentionTrace> {
    if n_layers == 0 || n_heads == 0 {
        return Err(Error::InvalidConfig("trace needs at least one layer and head".into()));
    }
    if seq_len <= window {
        return Err(Error::WindowExceedsSequence { ws: window, seq_len });
    }
    if let Profile::NeedleAt { position, .. } = profile {
        if position >= seq_len {
            return Err(Error::InvalidConfig(format!("needle {position} outside sequence {seq_len}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masses = profile.layer_mass(n_layers);
    let mut scores = Vec::with_capacity(n_layers * n_heads * seq_len);
    let mut noise = vec![0.0f64; seq_len];
    for &mass in &masses {
        for _ in 0..n_heads {
            match profile {
                Profile::Uniform => {
                    scores.extend(std::iter::repeat_n(1.0 / seq_len as f32, seq_len));
                }
                Profile::NeedleAt { position, mass: needle } => {
                    fill_exponential(&mut rng, &mut noise);
                    noise[position] = 0.0;
                    let total: f64 = noise.iter().sum();
                    let rest = f64::from(1.0 - needle);
                    scores.extend(noise.iter().enumerate().map(|(i, &x)| {
                        if i == position { needle } else { (x / total * rest) as f32 }
                    }));
                }
                _ => {
                    fill_exponential(&mut rng, &mut noise);
                    let total: f64 = noise.iter().sum();
                    scores.extend(noise.iter().map(|&x| (x / total * f64::from(mass)) as f32));
                }
            }
        }
    }
    let needle_positions = match profile {
        Profile::NeedleAt { position, .. } => vec![position],
        _ => Vec::new(),
    };
    let t = AttentionTrace {
        n_layers,
        n_heads,
        seq_len,
        window,
        task_label: profile.to_string(),
        needle_positions,
        scores,
    };
    t.validate()?;
    Ok(t)
}

fn fill_exponential(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for x in out.iter_mut() {
        // 1 - u lies in (0, 1]
        let u: f64 = rng.random();
        *x = -(1.0 - u).ln();
    }
}
