//! Channel selection: randomized FDM-FDMA and OFDM-FDMA allocation plus the
//! contiguous first-fit and best-fit baselines.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::spectrum::ChannelId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AllocMode {
    FdmFdma,
    OfdmFdma,
}

/// How many random candidates one attempt draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DrawPolicy {
    /// Every attempt draws DN candidates (bases in OFDM mode); `j` is set to
    /// DN once before the loop and never shrinks.
    FullDemand,
    /// Every attempt draws only `DN - |channel_set|` candidates.
    Remaining,
}

/// How OFDM guard channels are accounted for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GuardPolicy {
    /// The free predicate already excludes guard channels of other pairs, so
    /// every probed free channel is allocatable.
    Precharged,
    /// Probed free channels are grouped into runs and only interiors of runs
    /// longer than three channels are taken (see [`find_free_bands`]).
    Probed,
}

/// Inputs to one allocation. `is_free` encapsulates 2-distance usage,
/// temporary blocks and primary-user activity.
pub struct AllocContext<'a> {
    pub channel_count: u32,
    pub is_free: &'a dyn Fn(ChannelId) -> bool,
    pub rng_seed: u64,
    pub attempt_budget: u32,
    pub mode: AllocMode,
    pub draw: DrawPolicy,
    pub guard: GuardPolicy,
}

impl<'a> AllocContext<'a> {
    pub fn new(
        channel_count: u32,
        is_free: &'a dyn Fn(ChannelId) -> bool,
        mode: AllocMode,
    ) -> Self {
        Self {
            channel_count,
            is_free,
            rng_seed: 0,
            attempt_budget: 1000,
            mode,
            draw: DrawPolicy::FullDemand,
            guard: GuardPolicy::Precharged,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_budget(mut self, budget: u32) -> Self {
        self.attempt_budget = budget;
        self
    }

    pub fn with_guard(mut self, guard: GuardPolicy) -> Self {
        self.guard = guard;
        self
    }

    pub fn with_draw(mut self, draw: DrawPolicy) -> Self {
        self.draw = draw;
        self
    }

    fn check(&self, dn: u32) -> Result<()> {
        if self.attempt_budget == 0 {
            return Err(param("attempt budget must be at least 1"));
        }
        if dn == 0 || dn > self.channel_count {
            return Err(param(format!("DN={dn} outside 1..={}", self.channel_count)));
        }
        if self.mode == AllocMode::OfdmFdma && self.channel_count < dn + 2 {
            return Err(param(format!(
                "OFDM needs at least DN+2 channels, have {}",
                self.channel_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocOutcome {
    /// Selected channels in selection order; position is the sub-packet number.
    pub channel_set: Vec<ChannelId>,
    pub attempts: u32,
    pub success: bool,
}

/// Maximal run of consecutive free channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Band {
    pub length: u32,
    pub start: ChannelId,
}

/// Runs sorted by non-increasing length, ties by ascending start.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BandSet(pub Vec<Band>);

impl BandSet {
    pub fn from_channels(channels: &BTreeSet<ChannelId>) -> Self {
        let mut bands: Vec<Band> = Vec::new();
        for &c in channels {
            match bands.last_mut() {
                Some(b) if b.start + b.length == c => b.length += 1,
                _ => bands.push(Band {
                    length: 1,
                    start: c,
                }),
            }
        }
        bands.sort_by(|a, b| b.length.cmp(&a.length).then(a.start.cmp(&b.start)));
        Self(bands)
    }
}

/// Draws up to `j` distinct channels in `0..channel_count` that `excluded`
/// rejects. Returns every admissible channel when fewer than `j` exist.
pub fn draw_candidates<R: Rng + ?Sized>(
    rng: &mut R,
    channel_count: u32,
    j: u32,
    excluded: &dyn Fn(ChannelId) -> bool,
) -> Vec<ChannelId> {
    let admissible = |c: ChannelId| !excluded(c);
    let mut out: Vec<ChannelId> = Vec::with_capacity(j as usize);
    if (j as u64) * 4 >= channel_count as u64 {
        let mut pool: Vec<ChannelId> = (0..channel_count).filter(|&c| admissible(c)).collect();
        let take = (j as usize).min(pool.len());
        for i in 0..take {
            let k = rng.gen_range(i..pool.len());
            pool.swap(i, k);
        }
        pool.truncate(take);
        return pool;
    }
    let mut misses = 0u32;
    while out.len() < j as usize {
        let c = rng.gen_range(0..channel_count);
        if admissible(c) && !out.contains(&c) {
            out.push(c);
            misses = 0;
        } else {
            misses += 1;
            if misses > 64 * channel_count {
                break;
            }
        }
    }
    out
}

fn draw_size(policy: DrawPolicy, dn: u32, held: usize) -> u32 {
    match policy {
        DrawPolicy::FullDemand => dn,
        DrawPolicy::Remaining => dn - held as u32,
    }
}

/// Randomized FDM-FDMA: each attempt draws random channels not yet selected,
/// senses them in parallel and keeps the free ones until DN are held.
pub fn allocate_fdm_fdma(ctx: &AllocContext, dn: u32) -> Result<AllocOutcome> {
    ctx.check(dn)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.rng_seed);
    Ok(fdm_fdma_with(ctx, dn, &mut rng))
}

pub fn fdm_fdma_with<R: Rng + ?Sized>(ctx: &AllocContext, dn: u32, rng: &mut R) -> AllocOutcome {
    let mut set: Vec<ChannelId> = Vec::with_capacity(dn as usize);
    let mut attempts = 0;
    while attempts < ctx.attempt_budget && set.len() < dn as usize {
        attempts += 1;
        let j = draw_size(ctx.draw, dn, set.len());
        let held = set.clone();
        let candidates = draw_candidates(rng, ctx.channel_count, j, &|c| held.contains(&c));
        for c in candidates {
            if set.len() == dn as usize {
                break;
            }
            if (ctx.is_free)(c) {
                set.push(c);
            }
        }
    }
    let success = set.len() == dn as usize;
    AllocOutcome {
        channel_set: set,
        attempts,
        success,
    }
}

/// Randomized OFDM-FDMA: each attempt draws base channels `c` and probes the
/// triples `c, c+1, c+2`; guard handling follows `ctx.guard`.
pub fn allocate_ofdm_fdma(ctx: &AllocContext, dn: u32) -> Result<AllocOutcome> {
    ctx.check(dn)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.rng_seed);
    Ok(ofdm_fdma_with(ctx, dn, &mut rng))
}

/// Probe triples for the given bases, skipping channels already selected.
pub fn ofdm_probes(bases: &[ChannelId], selected: &[ChannelId]) -> BTreeSet<ChannelId> {
    bases
        .iter()
        .flat_map(|&c| [c, c + 1, c + 2])
        .filter(|c| !selected.contains(c))
        .collect()
}

pub fn ofdm_fdma_with<R: Rng + ?Sized>(ctx: &AllocContext, dn: u32, rng: &mut R) -> AllocOutcome {
    let mut set: Vec<ChannelId> = Vec::with_capacity(dn as usize);
    let mut attempts = 0;
    let base_range = ctx.channel_count - 2;
    while attempts < ctx.attempt_budget && set.len() < dn as usize {
        attempts += 1;
        let j = draw_size(ctx.draw, dn, set.len());
        let held = set.clone();
        let bases = draw_candidates(rng, base_range, j, &|c| held.contains(&c));
        let free: BTreeSet<ChannelId> = ofdm_probes(&bases, &set)
            .into_iter()
            .filter(|&c| (ctx.is_free)(c))
            .collect();
        match ctx.guard {
            GuardPolicy::Precharged => {
                // Keep the probe order of the draw so selection stays random.
                for c in bases.iter().flat_map(|&c| [c, c + 1, c + 2]) {
                    if set.len() == dn as usize {
                        break;
                    }
                    if free.contains(&c) && !set.contains(&c) {
                        set.push(c);
                    }
                }
            }
            GuardPolicy::Probed => {
                let required = dn - set.len() as u32;
                find_free_bands(&free, required, &mut set);
            }
        }
    }
    let success = set.len() == dn as usize;
    AllocOutcome {
        channel_set: set,
        attempts,
        success,
    }
}

/// Takes interior channels of the free runs in `temp_set`, largest run first.
/// Only runs longer than three channels qualify; each contributes
/// `min(remaining, length - 2)` channels starting one past its first channel,
/// so both run endpoints stay free as guards. Returns the unmet requirement.
pub fn find_free_bands(
    temp_set: &BTreeSet<ChannelId>,
    required: u32,
    channel_set: &mut Vec<ChannelId>,
) -> u32 {
    let mut remaining = required;
    for band in BandSet::from_channels(temp_set).0 {
        if remaining == 0 {
            break;
        }
        if band.length <= 3 {
            continue;
        }
        let take = remaining.min(band.length - 2);
        for c in band.start + 1..band.start + 1 + take {
            if !channel_set.contains(&c) {
                channel_set.push(c);
                remaining -= 1;
            }
        }
    }
    remaining
}

fn free_mask(ctx: &AllocContext) -> Vec<bool> {
    (0..ctx.channel_count).map(|c| (ctx.is_free)(c)).collect()
}

/// Maximal free runs of a mask, in index order.
pub fn free_runs(mask: &[bool]) -> Vec<Band> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &f) in mask.iter().chain(std::iter::once(&false)).enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push(Band {
                    length: (i - s) as u32,
                    start: s as ChannelId,
                });
                start = None;
            }
            _ => {}
        }
    }
    runs
}

/// Contiguous first-fit: scans windows of DN channels from channel 0 and
/// takes the first all-free window. Each window examined is one attempt.
pub fn allocate_first_fit(ctx: &AllocContext, dn: u32) -> Result<AllocOutcome> {
    ctx.check(dn)?;
    let mask = free_mask(ctx);
    let mut prefix = vec![0u32; mask.len() + 1];
    for (i, &f) in mask.iter().enumerate() {
        prefix[i + 1] = prefix[i] + f as u32;
    }
    let dnu = dn as usize;
    let mut attempts = 0;
    for s in 0..=mask.len() - dnu {
        if attempts == ctx.attempt_budget {
            break;
        }
        attempts += 1;
        if prefix[s + dnu] - prefix[s] == dn {
            let channel_set = (s as ChannelId..(s + dnu) as ChannelId).collect();
            return Ok(AllocOutcome {
                channel_set,
                attempts,
                success: true,
            });
        }
    }
    Ok(AllocOutcome {
        channel_set: Vec::new(),
        attempts,
        success: false,
    })
}

/// Contiguous best-fit: scans every window, then takes the first DN
/// channels of the smallest free run that can hold DN (ties to the lowest
/// start). Attempts count every window examined during the full scan.
pub fn allocate_best_fit(ctx: &AllocContext, dn: u32) -> Result<AllocOutcome> {
    ctx.check(dn)?;
    let mask = free_mask(ctx);
    let windows = (mask.len() + 1 - dn as usize) as u32;
    let attempts = windows.min(ctx.attempt_budget);
    let scanned = (attempts as usize + dn as usize - 1).min(mask.len());
    let best = free_runs(&mask[..scanned])
        .into_iter()
        .filter(|b| b.length >= dn)
        .min_by(|a, b| a.length.cmp(&b.length).then(a.start.cmp(&b.start)));
    Ok(match best {
        Some(b) => AllocOutcome {
            channel_set: (b.start..b.start + dn).collect(),
            attempts,
            success: true,
        },
        None => AllocOutcome {
            channel_set: Vec::new(),
            attempts,
            success: false,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_fn(mask: Vec<bool>) -> impl Fn(ChannelId) -> bool {
        move |c| mask[c as usize]
    }

    fn runs_mask(c: u32, runs: &[(u32, u32)]) -> Vec<bool> {
        let mut m = vec![false; c as usize];
        for &(a, b) in runs {
            for i in a..=b {
                m[i as usize] = true;
            }
        }
        m
    }

    #[test]
    fn all_free_is_one_attempt() {
        let free = |_: ChannelId| true;
        let ctx = AllocContext::new(1000, &free, AllocMode::FdmFdma).with_seed(3);
        let out = allocate_fdm_fdma(&ctx, 8).unwrap();
        assert_eq!(
            (out.attempts, out.success, out.channel_set.len()),
            (1, true, 8)
        );
        let ctx = AllocContext::new(2000, &free, AllocMode::OfdmFdma).with_seed(3);
        let out = allocate_ofdm_fdma(&ctx, 8).unwrap();
        assert_eq!((out.attempts, out.success), (1, true));
    }

    #[test]
    fn probed_guard_keeps_endpoints() {
        let free = |_: ChannelId| true;
        let ctx = AllocContext::new(2000, &free, AllocMode::OfdmFdma)
            .with_seed(5)
            .with_guard(GuardPolicy::Probed)
            .with_budget(100_000);
        let out = allocate_ofdm_fdma(&ctx, 8).unwrap();
        assert!(out.success);
        let mut sorted = out.channel_set.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
    }

    #[test]
    fn parameter_errors() {
        let free = |_: ChannelId| true;
        let ctx = AllocContext::new(10, &free, AllocMode::FdmFdma);
        assert!(allocate_fdm_fdma(&ctx, 11).is_err());
        assert!(allocate_fdm_fdma(&ctx, 0).is_err());
        let ctx = AllocContext::new(9, &free, AllocMode::OfdmFdma);
        assert!(allocate_ofdm_fdma(&ctx, 8).is_err());
        let ctx = AllocContext::new(10, &free, AllocMode::FdmFdma).with_budget(0);
        assert!(allocate_fdm_fdma(&ctx, 1).is_err());
    }

    #[test]
    fn no_free_channels_exhausts_budget() {
        let busy = |_: ChannelId| false;
        let ctx = AllocContext::new(100, &busy, AllocMode::FdmFdma).with_budget(17);
        let out = allocate_fdm_fdma(&ctx, 2).unwrap();
        assert_eq!((out.attempts, out.success), (17, false));
    }

    #[test]
    fn find_free_bands_examples() {
        let mut set = Vec::new();
        let temp: BTreeSet<ChannelId> = [5, 6, 7, 8, 9, 12, 13].into();
        assert_eq!(find_free_bands(&temp, 4, &mut set), 1);
        assert_eq!(set, vec![6, 7, 8]);
        let mut set = vec![1];
        assert_eq!(find_free_bands(&BTreeSet::new(), 3, &mut set), 3);
        assert_eq!(set, vec![1]);
        let mut set = Vec::new();
        assert_eq!(find_free_bands(&[1, 2, 3].into(), 2, &mut set), 2);
        assert!(set.is_empty());
    }

    #[test]
    fn first_fit_example() {
        let f = mask_fn(runs_mask(100, &[(10, 12), (40, 47), (60, 64)]));
        let ctx = AllocContext::new(100, &f, AllocMode::FdmFdma);
        let out = allocate_first_fit(&ctx, 4).unwrap();
        assert_eq!(out.channel_set, vec![40, 41, 42, 43]);
        assert_eq!(out.attempts, 41);
        let all = |_: ChannelId| true;
        let ctx = AllocContext::new(10, &all, AllocMode::FdmFdma);
        let out = allocate_first_fit(&ctx, 3).unwrap();
        assert_eq!((out.channel_set, out.attempts), (vec![0, 1, 2], 1));
    }

    #[test]
    fn best_fit_examples() {
        let f = mask_fn(runs_mask(40, &[(0, 2), (5, 12), (20, 24)]));
        let ctx = AllocContext::new(40, &f, AllocMode::FdmFdma);
        let best = allocate_best_fit(&ctx, 4).unwrap();
        assert_eq!(best.channel_set, vec![20, 21, 22, 23]);
        let first = allocate_first_fit(&ctx, 4).unwrap();
        assert!(best.attempts >= first.attempts);
        let f = mask_fn(runs_mask(40, &[(7, 9)]));
        let ctx = AllocContext::new(40, &f, AllocMode::FdmFdma);
        assert_eq!(
            allocate_best_fit(&ctx, 3).unwrap().channel_set,
            vec![7, 8, 9]
        );
        assert!(!allocate_best_fit(&ctx, 4).unwrap().success);
        assert!(!allocate_first_fit(&ctx, 4).unwrap().success);
    }

    #[test]
    fn band_set_sorting() {
        let bs = BandSet::from_channels(&[1, 2, 5, 6, 7, 9, 10].into());
        assert_eq!(
            bs.0,
            vec![
                Band {
                    length: 3,
                    start: 5
                },
                Band {
                    length: 2,
                    start: 1
                },
                Band {
                    length: 2,
                    start: 9
                }
            ]
        );
    }
}
