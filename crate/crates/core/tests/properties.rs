use std::collections::BTreeSet;

use crn_core::alloc::{draw_candidates, find_free_bands};
use crn_core::analysis::{
    expected_free_per_attempt_fdm, markov_closed_form_1ch, markov_solve, MarkovParams, TheoryInputs,
};
use crn_core::codec::{assemble, reconstruct, split, SampleFrame, SubPacket};
use crn_core::spectrum::{ChannelId, UsageAction, UsageDb};
use crn_core::topology::Topology;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn codec_round_trip_many_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let len = rng.gen_range(0..600);
        let n = rng.gen_range(1..=16);
        let bits: Vec<bool> = (0..len).map(|_| rng.gen()).collect();
        let pn = rng.gen();
        let mut sps = assemble(
            &split(&SampleFrame::from_bits(bits.clone(), 1e-4), n).unwrap(),
            pn,
        );
        sps.shuffle(&mut rng);
        let wire: Vec<SubPacket> = sps
            .iter()
            .map(|s| SubPacket::decode(&s.encode().unwrap()).unwrap())
            .collect();
        assert_eq!(wire, sps);
        assert_eq!(reconstruct(n, &wire).unwrap(), bits);
    }
}

/// Checks `find_free_bands` against what any correct answer must satisfy,
/// for every 16-channel mask and demand.
#[test]
fn find_free_bands_exhaustive() {
    for mask in 0u32..1 << 16 {
        let free: BTreeSet<ChannelId> = (0..16).filter(|c| mask >> c & 1 == 1).collect();
        let mut runs: Vec<(u32, u32)> = Vec::new();
        let mut c = 0;
        while c < 16 {
            if free.contains(&c) {
                let s = c;
                while free.contains(&c) {
                    c += 1;
                }
                runs.push((s, c - s));
            }
            c += 1;
        }
        let capacity: u32 = runs.iter().filter(|r| r.1 > 3).map(|r| r.1 - 2).sum();
        for required in 1..=8 {
            let mut got = Vec::new();
            let left = find_free_bands(&free, required, &mut got);
            assert_eq!(left, required.saturating_sub(capacity), "mask {mask:016b}");
            assert_eq!(got.len() as u32, required - left);
            let set: BTreeSet<_> = got.iter().copied().collect();
            assert_eq!(set.len(), got.len());
            for &(s, len) in &runs {
                let used: Vec<_> = got
                    .iter()
                    .copied()
                    .filter(|&g| g >= s && g < s + len)
                    .collect();
                if len <= 3 {
                    assert!(used.is_empty());
                    continue;
                }
                // Interior prefix: endpoints stay free as guards.
                let want: Vec<_> = (s + 1..s + 1 + used.len() as u32).collect();
                assert_eq!(used, want, "mask {mask:016b}");
                assert!(used.len() as u32 <= len - 2);
                // A partially used run means no shorter or later equal run was used.
                if (used.len() as u32) < len - 2 {
                    for &(s2, len2) in &runs {
                        let lower = len2 < len || (len2 == len && s2 > s);
                        if lower && len2 > 3 {
                            assert!(
                                !got.iter().any(|&g| g >= s2 && g < s2 + len2),
                                "mask {mask:016b}"
                            );
                        }
                    }
                }
            }
        }
    }
}

fn binom(n: u32, k: u32) -> u128 {
    if k > n {
        return 0;
    }
    (0..k as u128).fold(1, |acc, i| acc * (n as u128 - i) / (i + 1))
}

/// Sum over k of k * C(F,k) C(C-F,n-k) equals (nF/C) C(C,n), in integers.
#[test]
fn hypergeometric_mean_exact() {
    for c in 1..=60u32 {
        for f in 0..=c {
            for n in 1..=8.min(c) {
                let lhs: u128 = (0..=n)
                    .map(|k| k as u128 * binom(f, k) * binom(c - f, n - k))
                    .sum();
                assert_eq!(lhs * c as u128, n as u128 * f as u128 * binom(c, n));
                let ti = TheoryInputs::new(c, f, n).unwrap();
                let mean = lhs as f64 / binom(c, n) as f64;
                assert!((expected_free_per_attempt_fdm(&ti) - mean).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn hypergeometric_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, f, n) = (1000u32, 697u32, 8u32);
    let mut mask = vec![false; c as usize];
    for i in rand::seq::index::sample(&mut rng, c as usize, f as usize) {
        mask[i] = true;
    }
    let reps = 200_000;
    let mut hits = 0u64;
    for _ in 0..reps {
        hits += draw_candidates(&mut rng, c, n, &|_| false)
            .iter()
            .filter(|&&x| mask[x as usize])
            .count() as u64;
    }
    let mean = hits as f64 / reps as f64;
    let exact = n as f64 * f as f64 / c as f64;
    let var = n as f64 * (f as f64 / c as f64) * (1.0 - f as f64 / c as f64) * (c - n) as f64
        / (c - 1) as f64;
    assert!(
        (mean - exact).abs() < 5.0 * (var / reps as f64).sqrt(),
        "{mean} vs {exact}"
    );
}

#[test]
fn markov_one_channel_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let p = MarkovParams::uniform(
            rng.gen_range(0.0..2.0),
            rng.gen_range(0.0..2.0),
            rng.gen_range(0.01..5.0),
            1,
            rng.gen_range(0.1..20.0),
            rng.gen_range(0..40),
            rng.gen_range(1..40),
        );
        let a = markov_solve(&p, 1).unwrap();
        let b = markov_closed_form_1ch(&p).unwrap();
        for (s, v) in &b.p {
            assert!((a.p[s] - v).abs() < 1e-9, "{p:?}");
        }
        assert!((a.p_n - b.p_n).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn markov_distribution_is_stochastic(
        lambda in 0.0f64..2.0, sigma in 0.0f64..2.0, mu in 0.05f64..5.0, t in 0.1f64..20.0,
        fp in 0u32..30, fs in 1u32..30, n in 1usize..=6,
    ) {
        let sol = markov_solve(&MarkovParams::uniform(lambda, sigma, mu, n, t, fp, fs), n).unwrap();
        let total: f64 = sol.p.values().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(sol.p.values().all(|&v| v > -1e-12));
    }

    #[test]
    fn completion_falls_with_reclaim_and_rises_with_reservation(
        lambda in 0.0f64..1.0, dl in 0.01f64..1.0, mu in 0.1f64..3.0, dm in 0.01f64..1.0,
        fp in 1u32..30, fs in 1u32..30, n in 1usize..=5,
    ) {
        let base = MarkovParams::uniform(lambda, 0.1, mu, n, 2.0, fp, fs);
        let p0 = markov_solve(&base, n).unwrap().p_n;
        let more_reclaim = MarkovParams { lambda: lambda + dl, ..base.clone() };
        prop_assert!(markov_solve(&more_reclaim, n).unwrap().p_n <= p0 + 1e-12);
        let faster = MarkovParams::uniform(lambda, 0.1, mu + dm, n, 2.0, fp, fs);
        prop_assert!(markov_solve(&faster, n).unwrap().p_n >= p0 - 1e-12);
    }

    #[test]
    fn usage_db_matches_linear_scan(ops in prop::collection::vec((0u8..3, 0u32..64, 0u32..100), 1..400)) {
        let mut db: UsageDb = UsageDb::new();
        let mut oracle: Vec<(ChannelId, u32)> = Vec::new();
        for (op, c, v) in ops {
            let pos = oracle.iter().position(|e| e.0 == c);
            match op {
                0 => {
                    let r = db.apply(UsageAction::Insert(c, v));
                    prop_assert_eq!(r.is_ok(), pos.is_none());
                    if pos.is_none() {
                        oracle.push((c, v));
                    }
                }
                1 => {
                    let r = db.apply(UsageAction::Delete(c));
                    match pos {
                        Some(i) => prop_assert_eq!(r.unwrap(), Some(oracle.remove(i).1)),
                        None => prop_assert!(r.is_err()),
                    }
                }
                _ => prop_assert_eq!(db.apply(UsageAction::Find(c)).unwrap(), pos.map(|i| oracle[i].1)),
            }
            prop_assert_eq!(db.len(), oracle.len());
        }
        let mut sorted = oracle.clone();
        sorted.sort();
        prop_assert_eq!(db.iter().collect::<Vec<_>>(), sorted);
    }

    #[test]
    fn topology_matches_brute_force(n in 2usize..120, range in 5.0f64..40.0, seed in any::<u64>()) {
        let topo = Topology::generate(n, range, seed).unwrap();
        let near = |a: u32, b: u32| {
            let (p, q) = (topo.position(a), topo.position(b));
            (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) <= range * range
        };
        for u in 0..n as u32 {
            let one: BTreeSet<u32> = (0..n as u32).filter(|&v| v != u && near(u, v)).collect();
            prop_assert_eq!(&topo.neighbors(u, 1).unwrap(), &one);
            let mut two = one.clone();
            for &v in &one {
                two.extend((0..n as u32).filter(|&w| w != u && near(v, w)));
            }
            prop_assert_eq!(topo.neighbors(u, 2).unwrap(), two);
        }
    }
}
