//! Independent reference allocator and random case generators shared by the
//! integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use dynkv::policies::PolicyConfig;
use dynkv::trace::{synth_trace, AttentionTrace, Profile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight-line DynamicKV: full sorts, f64 scores, no shared helpers.
/// Returns the retained positions of every layer, ascending.
pub fn reference_plan(t: &AttentionTrace, cfg: &PolicyConfig) -> Option<Vec<Vec<usize>>> {
    let (nl, nh, s, ws, wt) = (t.n_layers, t.n_heads, t.seq_len, cfg.ws, cfg.wt);
    if s <= wt {
        return Some(vec![(0..s).collect(); nl]);
    }
    let prefix = s - ws;
    let half = cfg.pool_kernel / 2;
    let quota = wt - ws;
    let cap = (quota as f64 * cfg.r_max).floor() as usize;

    // pooled[l][h][p]
    let mut pooled = vec![vec![vec![0.0f64; prefix]; nh]; nl];
    for l in 0..nl {
        for h in 0..nh {
            let row = &t.scores[(l * nh + h) * s..(l * nh + h + 1) * s];
            for p in 0..prefix {
                let lo = p.saturating_sub(half);
                let hi = (p + half).min(prefix - 1);
                let mut m = f64::NEG_INFINITY;
                for q in lo..=hi {
                    m = m.max(row[q] as f64);
                }
                pooled[l][h][p] = m;
            }
        }
    }
    if pooled.iter().flatten().flatten().all(|&v| v == 0.0) {
        return None;
    }

    let mut buffers: Vec<Vec<usize>> = Vec::new();
    for l in 0..nl {
        let best: Vec<f64> = (0..prefix)
            .map(|p| (0..nh).map(|h| pooled[l][h][p]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut order: Vec<usize> = (0..prefix).collect();
        order.sort_by(|&a, &b| best[b].partial_cmp(&best[a]).unwrap().then(a.cmp(&b)));
        order.truncate(cap);
        buffers.push(order);

        let n = l + 1;
        if n % cfg.m != 0 && n != nl {
            continue;
        }
        let k = if cfg.topk_includes_heads { quota * nh * n } else { quota * n };
        let mut entries = Vec::new();
        for (li, layer) in pooled.iter().enumerate().take(n) {
            for (h, head) in layer.iter().enumerate() {
                for (p, &v) in head.iter().enumerate() {
                    entries.push((v, p, li, h));
                }
            }
        }
        entries.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3))
        });
        let mut counts = vec![0u64; n];
        for e in entries.iter().take(k) {
            counts[e.2] += 1;
        }
        let cmax = (*counts.iter().max().unwrap()).max(1);
        let z: Vec<u64> = counts.iter().map(|&c| cap as u64 * c / cmax).collect();
        let bounds: Vec<usize> = buffers.iter().map(Vec::len).collect();
        let budgets = reference_waterfill(&z, &bounds, quota * n);
        for (buf, &b) in buffers.iter_mut().zip(&budgets) {
            assert!(b <= buf.len());
            buf.truncate(b);
        }
    }

    Some(
        buffers
            .into_iter()
            .map(|mut b| {
                b.sort_unstable();
                b.extend(prefix..s);
                b
            })
            .collect(),
    )
}

/// Integer proportional split of `target` by `z`, each share within
/// `[min(1, hi), hi]`; shares that hit a bound are fixed and the remainder is
/// re-split among the rest, over-cap layers first. Zero-weight leftovers
/// count as weight one. Overshoot from the floor
/// is taken off the largest shares.
pub fn reference_waterfill(z: &[u64], hi: &[usize], target: usize) -> Vec<usize> {
    let n = z.len();
    let mut z = z.to_vec();
    let mut fixed: Vec<Option<u128>> = vec![None; n];
    'outer: loop {
        let rest: u128 = target as u128 - fixed.iter().flatten().sum::<u128>().min(target as u128);
        let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
        if free.is_empty() {
            break;
        }
        let w: u128 = free.iter().map(|&i| z[i] as u128).sum();
        if w == 0 {
            for i in free {
                z[i] = 1;
            }
            continue;
        }
        let mut hit = false;
        for &i in &free {
            if z[i] as u128 * rest > hi[i] as u128 * w {
                fixed[i] = Some(hi[i] as u128);
                hit = true;
            }
        }
        if hit {
            continue 'outer;
        }
        for &i in &free {
            if (z[i] as u128 * rest) < w {
                fixed[i] = Some(1.min(hi[i]) as u128);
                hit = true;
            }
        }
        if hit {
            continue 'outer;
        }
        for &i in &free {
            fixed[i] = Some(z[i] as u128 * rest / w);
        }
    }
    let mut out: Vec<usize> = fixed.into_iter().map(|v| v.unwrap() as usize).collect();
    while out.iter().sum::<usize>() > target {
        let mut pick = None;
        for i in 0..n {
            if out[i] > 1 && pick.is_none_or(|j: usize| out[i] > out[j]) {
                pick = Some(i);
            }
        }
        match pick {
            Some(i) => out[i] -= 1,
            None => break,
        }
    }
    out
}

pub const PROFILES: [&str; 5] = ["uniform", "early-heavy", "late-heavy", "wave", "needle"];

/// A random synthetic trace; `coarse` quantizes scores to eighths so ties
/// are common.
pub fn random_trace(rng: &mut ChaCha8Rng, nl: usize, nh: usize, s: usize, ws: usize, coarse: bool) -> AttentionTrace {
    let profile = match rng.random_range(0..PROFILES.len()) {
        0 => Profile::Uniform,
        1 => Profile::EarlyHeavy,
        2 => Profile::LateHeavy,
        3 => Profile::Wave,
        _ => Profile::NeedleAt { position: rng.random_range(0..s), mass: rng.random_range(0.2..0.95) },
    };
    let mut t = synth_trace(nl, nh, s, ws, profile, rng.random()).unwrap();
    if coarse {
        for v in &mut t.scores {
            *v = (rng.random_range(0..8u32) as f32) / 8.0;
        }
        t.scores[0] = 1.0;
    }
    t
}

/// A random valid configuration for a sequence of length `s`, with `s > wt`.
pub fn random_config(rng: &mut ChaCha8Rng, s: usize, n_layers: usize) -> PolicyConfig {
    let wt = rng.random_range(2..s.min(1024));
    let ws = rng.random_range(1..wt.min(64));
    PolicyConfig {
        wt,
        ws,
        r_max: [1.0, 1.5, 2.0, 3.0][rng.random_range(0..4)],
        m: rng.random_range(1..=(2 * n_layers).max(1)),
        pool_kernel: [1, 3, 5, 7][rng.random_range(0..4)],
        topk_includes_heads: rng.random_bool(0.7),
        ..PolicyConfig::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
