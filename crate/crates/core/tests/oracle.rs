mod common;

use common::{random_config, random_trace, reference_plan, reference_waterfill, rng};
use dynkv::dynamickv::{bounded_allocation, run_prefill_compression};
use rand::Rng;

#[test]
fn matches_reference_on_small_traces() {
    let mut r = rng(7);
    for case in 0..200 {
        let nl = r.random_range(1..=4);
        let nh = r.random_range(1..=2);
        let s = r.random_range(8..=64);
        let cfg = random_config(&mut r, s, nl);
        let t = random_trace(&mut r, nl, nh, s, cfg.ws, case % 2 == 0);
        let got = run_prefill_compression(&t, &cfg).unwrap();
        let want = reference_plan(&t, &cfg).unwrap();
        assert_eq!(got.plan.layers, want, "case {case}: {cfg:?}");
    }
}

#[test]
fn matches_reference_on_larger_traces() {
    let mut r = rng(11);
    for case in 0..40 {
        let nl = r.random_range(1..=8);
        let nh = r.random_range(1..=4);
        let s = r.random_range(64..=512);
        let cfg = random_config(&mut r, s, nl);
        let t = random_trace(&mut r, nl, nh, s, cfg.ws, case % 3 == 0);
        let got = run_prefill_compression(&t, &cfg).unwrap();
        assert_eq!(got.plan.layers, reference_plan(&t, &cfg).unwrap(), "case {case}: {cfg:?}");
    }
}

#[test]
fn waterfill_matches_reference() {
    let mut r = rng(3);
    for _ in 0..2000 {
        let n = r.random_range(1..=12);
        let z: Vec<u64> = (0..n).map(|_| if r.random_bool(0.2) { 0 } else { r.random_range(0..500) }).collect();
        let caps: Vec<usize> = (0..n).map(|_| r.random_range(0..80)).collect();
        let target = r.random_range(0..=caps.iter().sum::<usize>() + 20);
        assert_eq!(bounded_allocation(&z, &caps, target), reference_waterfill(&z, &caps, target), "{z:?} {caps:?} {target}");
    }
}
