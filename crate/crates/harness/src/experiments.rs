//! Experiment runners. Trials run in parallel and are reduced in trial
//! order, so every result is a pure function of the configuration.

use std::collections::BTreeMap;

use crn_core::alloc::{
    allocate_best_fit, allocate_fdm_fdma, allocate_first_fit, allocate_ofdm_fdma, AllocContext,
    AllocMode, AllocOutcome,
};
use crn_core::analysis::{attempts_fdm, attempts_ofdm, markov_solve, MarkovParams};
use crn_core::error::{Error, Result};
use crn_core::protocol::transfer::JitterStats;
use crn_core::protocol::{
    tam_bytes, ticks_from_secs, transmit_data, DataPlane, NodeRuntime, Ticks,
};
use crn_core::spectrum::{Band, ChannelId, SpectrumModel};
use crn_core::topology::{blocked_by_2dist, Topology, TrafficAssignment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BlockedSource, Experiment, ExperimentConfig};
use crate::report::{Cell, Report};

/// 2-distance blocked channels per node count at a 25 m range, excluding
/// broadcast-occupied channels.
pub const INJECTED_BLOCKED: [(usize, u32); 11] = [
    (100, 96),
    (200, 212),
    (300, 334),
    (400, 453),
    (500, 571),
    (600, 689),
    (700, 811),
    (800, 927),
    (900, 1048),
    (1000, 1166),
    (1100, 1283),
];

/// Free overlapping channels (of 2000) against blocked non-overlapping
/// channels including broadcasters. Guard channels around every neighbor
/// allocation are charged here, so F falls much faster than C minus the
/// blocked count.
pub const OFDM_FREE_CURVE: [(u32, u32); 8] = [
    (303, 1185),
    (379, 1015),
    (490, 798),
    (647, 546),
    (715, 456),
    (961, 211),
    (969, 205),
    (1316, 21),
];

/// Seconds of control traffic for an allocation: one message of
/// `msg_bytes` per probe, `probes_per_channel` probes for each of `dn`
/// channels in each of `attempts` attempts.
pub fn overhead_calculator(
    attempts: u32,
    dn: u32,
    msg_bytes: u32,
    ccc_rate: f64,
    probes_per_channel: u32,
) -> f64 {
    (attempts as u64 * dn as u64 * probes_per_channel as u64 * 8 * msg_bytes as u64) as f64
        / ccc_rate
}

fn trial_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 4);
    rng.gen()
}

fn allocate(ctx: &AllocContext, dn: u32) -> Result<AllocOutcome> {
    match ctx.mode {
        AllocMode::FdmFdma => allocate_fdm_fdma(ctx, dn),
        AllocMode::OfdmFdma => allocate_ofdm_fdma(ctx, dn),
    }
}

fn probes_per_channel(mode: AllocMode) -> u32 {
    match mode {
        AllocMode::FdmFdma => 1,
        AllocMode::OfdmFdma => 3,
    }
}

fn context<'a>(
    cfg: &ExperimentConfig,
    is_free: &'a dyn Fn(ChannelId) -> bool,
    seed: u64,
) -> AllocContext<'a> {
    AllocContext::new(cfg.channels, is_free, cfg.mode)
        .with_seed(seed)
        .with_budget(cfg.attempt_budget)
        .with_draw(cfg.protocol.draw)
        .with_guard(cfg.protocol.guard)
}

fn split(cfg: &ExperimentConfig, spectrum: &SpectrumModel, f: u32) -> (u32, u32) {
    match cfg.free_primary {
        Some(p) => (p, f - p),
        None => spectrum.split_free(f),
    }
}

/// Broadcast-occupied channels in non-overlapping units. Overlapping
/// channels are half as wide, so OFDM counts are halved.
fn broadcast_blocked(cfg: &ExperimentConfig) -> u32 {
    let b = (cfg.broadcast_fraction * cfg.pi as f64).round() as u32;
    match cfg.mode {
        AllocMode::FdmFdma => b,
        AllocMode::OfdmFdma => b / 2,
    }
}

/// Free channels left for a transmitter whose 2-distance neighbors block
/// `blocked` channels.
pub fn free_for_blocked(cfg: &ExperimentConfig, blocked: u32) -> u32 {
    let total = blocked + broadcast_blocked(cfg);
    match cfg.mode {
        AllocMode::FdmFdma => cfg.channels.saturating_sub(total),
        AllocMode::OfdmFdma => interpolate(&OFDM_FREE_CURVE, total).min(cfg.channels),
    }
}

fn interpolate(points: &[(u32, u32)], x: u32) -> u32 {
    let seg = points
        .windows(2)
        .position(|w| x <= w[1].0)
        .unwrap_or(points.len() - 2);
    let ((x0, y0), (x1, y1)) = (points[seg], points[seg + 1]);
    let y = y0 as f64 + (y1 as f64 - y0 as f64) * (x as f64 - x0 as f64) / (x1 as f64 - x0 as f64);
    y.round().max(0.0) as u32
}

/// Mean 2-distance blockage over all nodes of a generated topology.
pub fn emergent_blocked(cfg: &ExperimentConfig, nodes: usize) -> Result<f64> {
    let spectrum = cfg.spectrum()?;
    let topo = Topology::generate(nodes, cfg.range, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, 7, nodes as u64));
    let load =
        TrafficAssignment::generate(&topo, &spectrum, cfg.activity, &cfg.traffic_mix, &mut rng);
    let mut total = 0usize;
    for u in 0..nodes as u32 {
        total += blocked_by_2dist(&topo, &spectrum, u, &load)?.len();
    }
    Ok(total as f64 / nodes.max(1) as f64)
}

fn free_count(cfg: &ExperimentConfig) -> Result<u32> {
    match cfg.free_override {
        Some(f) => Ok(f),
        None => {
            let blocked = emergent_blocked(cfg, cfg.nodes)?.round() as u32;
            Ok(free_for_blocked(cfg, blocked))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRow {
    pub f: u32,
    pub dn: u32,
    pub mean_attempts: f64,
    /// `None` when no channel is free and the expectation diverges.
    pub theory_attempts: Option<u32>,
    pub primary_sel: f64,
    pub secondary_sel: f64,
    /// Percent of trials that obtained all DN channels.
    pub success_rate: f64,
}

/// Monte Carlo of `cfg.trials` allocations of `dn` channels with exactly
/// `f` free, each over a fresh random free mask.
pub fn attempt_row(
    cfg: &ExperimentConfig,
    spectrum: &SpectrumModel,
    f: u32,
    dn: u32,
) -> Result<AttemptRow> {
    let (f_p, f_s) = split(cfg, spectrum, f);
    let outcomes: Vec<Result<(u32, bool, u32, u32)>> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, dn as u64, t));
            let mask = spectrum.sample_free_mask(f_p, f_s, &mut rng)?;
            let is_free = |c: ChannelId| mask[c as usize];
            let out = allocate(&context(cfg, &is_free, rng.gen()), dn)?;
            let prim = out
                .channel_set
                .iter()
                .filter(|&&c| spectrum.band(c) == Band::Primary)
                .count() as u32;
            Ok((
                out.attempts,
                out.success,
                prim,
                out.channel_set.len() as u32 - prim,
            ))
        })
        .collect();
    let (mut attempts, mut ok, mut prim, mut sec) = (0u64, 0u64, 0u64, 0u64);
    for o in outcomes {
        let (a, s, p, q) = o?;
        attempts += a as u64;
        ok += s as u64;
        prim += p as u64;
        sec += q as u64;
    }
    let n = cfg.trials as f64;
    let frac = f as f64 / cfg.channels as f64;
    let theory = match cfg.mode {
        AllocMode::FdmFdma => attempts_fdm(frac),
        AllocMode::OfdmFdma => attempts_ofdm(frac),
    };
    let theory_attempts = match theory {
        Ok(k) => Some(k),
        Err(Error::Divergent) => None,
        Err(e) => return Err(e),
    };
    Ok(AttemptRow {
        f,
        dn,
        mean_attempts: attempts as f64 / n,
        theory_attempts,
        primary_sel: prim as f64 / n,
        secondary_sel: sec as f64 / n,
        success_rate: 100.0 * ok as f64 / n,
    })
}

pub fn run_attempts(cfg: &ExperimentConfig) -> Result<Report> {
    expect(cfg, Experiment::Attempts)?;
    let spectrum = cfg.spectrum()?;
    let f = free_count(cfg)?;
    let mut report = Report::new(
        cfg,
        &[
            "F",
            "DN",
            "mean_attempts",
            "theory_attempts",
            "primary_sel",
            "secondary_sel",
            "success_rate",
        ],
    );
    for dn in cfg.demands() {
        let r = attempt_row(cfg, &spectrum, f, dn)?;
        report.push(vec![
            Cell::Int(r.f as i64),
            Cell::Int(r.dn as i64),
            Cell::Num(r.mean_attempts),
            r.theory_attempts
                .map_or(Cell::Text("inf".into()), |k| Cell::Int(k as i64)),
            Cell::Num(r.primary_sel),
            Cell::Num(r.secondary_sel),
            Cell::Num(r.success_rate),
        ]);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub nodes: usize,
    pub blocked: u32,
    pub f: u32,
    pub dn: u32,
    /// Success percentages.
    pub proposed: f64,
    pub first_fit: f64,
    pub best_fit: f64,
}

/// Success rates of the randomized allocator and both contiguous baselines
/// across the node sweep.
pub fn success_grid(cfg: &ExperimentConfig) -> Result<Vec<SuccessRow>> {
    let spectrum = cfg.spectrum()?;
    let table: BTreeMap<usize, u32> = INJECTED_BLOCKED.into_iter().collect();
    let mut rows = Vec::new();
    for &nodes in &cfg.node_sweep {
        let blocked = match cfg.blocked_source {
            BlockedSource::Injected => {
                if cfg.range != 25.0 {
                    return Err(Error::Parameter(
                        "injected blocked counts exist only for a 25 m range".into(),
                    ));
                }
                *table.get(&nodes).ok_or_else(|| {
                    Error::Parameter(format!("no injected blocked count for {nodes} nodes"))
                })?
            }
            BlockedSource::Topology => emergent_blocked(cfg, nodes)?.round() as u32,
        };
        let f = free_for_blocked(cfg, blocked);
        let (f_p, f_s) = split(cfg, &spectrum, f);
        for dn in cfg.demands() {
            let wins: Vec<Result<[bool; 3]>> = (0..cfg.trials as u64)
                .into_par_iter()
                .map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(
                        cfg.seed,
                        (nodes as u64) << 8 | dn as u64,
                        t,
                    ));
                    let mask = spectrum.sample_free_mask(f_p, f_s, &mut rng)?;
                    let is_free = |c: ChannelId| mask[c as usize];
                    let ctx = context(cfg, &is_free, rng.gen());
                    Ok([
                        allocate(&ctx, dn)?.success,
                        allocate_first_fit(&ctx, dn)?.success,
                        allocate_best_fit(&ctx, dn)?.success,
                    ])
                })
                .collect();
            let mut counts = [0u32; 3];
            for w in wins {
                for (c, ok) in counts.iter_mut().zip(w?) {
                    *c += ok as u32;
                }
            }
            let pct = |k: u32| 100.0 * k as f64 / cfg.trials as f64;
            rows.push(SuccessRow {
                nodes,
                blocked,
                f,
                dn,
                proposed: pct(counts[0]),
                first_fit: pct(counts[1]),
                best_fit: pct(counts[2]),
            });
        }
    }
    Ok(rows)
}

pub fn run_success_rate(cfg: &ExperimentConfig) -> Result<Report> {
    expect(cfg, Experiment::Success)?;
    let mut report = Report::new(
        cfg,
        &[
            "nodes",
            "blocked",
            "F",
            "DN",
            "proposed",
            "first_fit",
            "best_fit",
        ],
    );
    for r in success_grid(cfg)? {
        report.push(vec![
            Cell::Int(r.nodes as i64),
            Cell::Int(r.blocked as i64),
            Cell::Int(r.f as i64),
            Cell::Int(r.dn as i64),
            Cell::Num(r.proposed),
            Cell::Num(r.first_fit),
            Cell::Num(r.best_fit),
        ]);
    }
    Ok(report)
}

/// Free-mask environment of one simulated transfer. Primary users arrive
/// independently on each primary channel in use, once per packet, and stay
/// for the rest of the transfer. Replacement channels come from the same
/// allocator, charged at one control message per probe.
struct MaskPlane<'a> {
    cfg: &'a ExperimentConfig,
    spectrum: &'a SpectrumModel,
    free: Vec<bool>,
    busy: Vec<bool>,
    rng: ChaCha8Rng,
    cr_secs: f64,
}

impl DataPlane for MaskPlane<'_> {
    fn pu_arrives(&mut self, channel: ChannelId, _pn: u32) -> bool {
        let p = self.cfg.protocol.pu_arrival_prob;
        if self.spectrum.band(channel) == Band::Primary && p > 0.0 && self.rng.gen_bool(p) {
            self.busy[channel as usize] = true;
            return true;
        }
        false
    }

    fn pu_present(&self, channel: ChannelId) -> bool {
        self.busy[channel as usize]
    }

    fn release(&mut self, channel: ChannelId) {
        self.free[channel as usize] = false;
    }

    fn reallocate(&mut self, held: &[ChannelId]) -> Option<(ChannelId, Ticks)> {
        let seed = self.rng.gen();
        let out = {
            let is_free = |c: ChannelId| {
                self.free[c as usize] && !self.busy[c as usize] && !held.contains(&c)
            };
            allocate(&context(self.cfg, &is_free, seed), 1).ok()?
        };
        if !out.success {
            return None;
        }
        let c = out.channel_set[0];
        self.free[c as usize] = false;
        let p = &self.cfg.protocol;
        let cost = overhead_calculator(
            out.attempts,
            1,
            tam_bytes(p.addr_mode) as u32,
            p.ccc_rate,
            probes_per_channel(self.cfg.mode),
        );
        self.cr_secs += cost;
        Some((c, ticks_from_secs(cost)))
    }
}

/// Averages over the repetitions of one file transfer. Times in the units
/// the field names carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub size_bits: f64,
    pub dn: u32,
    pub reps: u32,
    /// Repetitions whose allocation or transfer failed.
    pub failed: u32,
    pub pu_deallocs: f64,
    pub it_s: f64,
    pub ica_ms: f64,
    pub cr_ms: f64,
    pub at_s: f64,
    pub max_jitter_ms: f64,
    pub mean_jitter_ms: f64,
    pub std_jitter_ms: f64,
}

impl TransferSummary {
    /// Actual transmission time from its parts.
    pub fn actual(it_s: f64, ica_ms: f64, cr_ms: f64) -> f64 {
        it_s + ica_ms / 1000.0 + cr_ms / 1000.0
    }
}

struct Rep {
    ok: bool,
    ica_s: f64,
    cr_s: f64,
    deallocs: u32,
    jitter: JitterStats,
}

/// Ideal transmission time: the file split evenly over `dn` channels.
pub fn ideal_time(size_bits: f64, dn: u32, data_rate: f64) -> f64 {
    size_bits / (dn as f64 * data_rate)
}

pub fn transfer_summary(cfg: &ExperimentConfig) -> Result<TransferSummary> {
    let fs = cfg
        .file_spec
        .ok_or_else(|| Error::Parameter("transfer needs a file spec".into()))?;
    let spectrum = cfg.spectrum()?;
    let f = free_count(cfg)?;
    let (f_p, f_s) = split(cfg, &spectrum, f);
    let p = &cfg.protocol;
    let packet_bits = fs.dn as f64 * p.subpacket_bytes as f64 * 8.0;
    let packets = (fs.size_bits / packet_bits).ceil() as u32;
    let it_s = ideal_time(fs.size_bits, fs.dn, p.data_rate);
    let reps: Vec<Result<Rep>> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, 0x7a, t));
            if packets == 0 {
                return Ok(Rep {
                    ok: true,
                    ica_s: 0.0,
                    cr_s: 0.0,
                    deallocs: 0,
                    jitter: JitterStats::default(),
                });
            }
            let mask = spectrum.sample_free_mask(f_p, f_s, &mut rng)?;
            let out = {
                let is_free = |c: ChannelId| mask[c as usize];
                allocate(&context(cfg, &is_free, rng.gen()), fs.dn)?
            };
            if !out.success {
                return Ok(Rep {
                    ok: false,
                    ica_s: 0.0,
                    cr_s: 0.0,
                    deallocs: 0,
                    jitter: JitterStats::default(),
                });
            }
            let ica_s = overhead_calculator(
                out.attempts,
                fs.dn,
                tam_bytes(p.addr_mode) as u32,
                p.ccc_rate,
                probes_per_channel(cfg.mode),
            );
            let mut channels = out.channel_set;
            let mut free = mask;
            for &c in &channels {
                free[c as usize] = false;
            }
            let mut rx = NodeRuntime::new(1, fs.dn.max(p.dn_max));
            for (spn, &c) in channels.iter().enumerate() {
                rx.reservation_db.insert((0, spn as u8), c);
            }
            let mut plane = MaskPlane {
                cfg,
                spectrum: &spectrum,
                free,
                busy: vec![false; cfg.channels as usize],
                rng: ChaCha8Rng::seed_from_u64(rng.gen()),
                cr_secs: 0.0,
            };
            let stats = transmit_data(p, 0, &mut rx, &mut channels, packets, &mut plane);
            Ok(Rep {
                ok: !stats.aborted,
                ica_s,
                cr_s: plane.cr_secs,
                deallocs: stats.reallocations,
                jitter: stats.jitter,
            })
        })
        .collect();

    let (mut n, mut failed) = (0u32, 0u32);
    let (mut ica, mut cr, mut deallocs, mut max_j) = (0.0, 0.0, 0.0, 0.0);
    let mut pooled = JitterStats::default();
    for r in reps {
        let r = r?;
        if !r.ok {
            failed += 1;
            continue;
        }
        n += 1;
        ica += r.ica_s;
        cr += r.cr_s;
        deallocs += r.deallocs as f64;
        max_j += r.jitter.max;
        pooled.gaps += r.jitter.gaps;
        pooled.sum += r.jitter.sum;
        pooled.sum_sq += r.jitter.sum_sq;
    }
    let per = |x: f64| if n == 0 { f64::NAN } else { x / n as f64 };
    // Jitter is accumulated in microsecond ticks.
    let ms = |ticks: f64| ticks / 1000.0;
    let ica_ms = per(ica) * 1000.0;
    let cr_ms = per(cr) * 1000.0;
    Ok(TransferSummary {
        size_bits: fs.size_bits,
        dn: fs.dn,
        reps: cfg.trials,
        failed,
        pu_deallocs: per(deallocs),
        it_s,
        ica_ms,
        cr_ms,
        at_s: TransferSummary::actual(it_s, ica_ms, cr_ms),
        max_jitter_ms: ms(per(max_j)),
        mean_jitter_ms: ms(pooled.mean()),
        std_jitter_ms: ms(pooled.std_dev()),
    })
}

pub fn run_transfer(cfg: &ExperimentConfig) -> Result<Report> {
    expect(cfg, Experiment::Transfer)?;
    let s = transfer_summary(cfg)?;
    let mut report = Report::new(
        cfg,
        &[
            "size_bits",
            "pu_deallocs",
            "IT_s",
            "ICA_ms",
            "CR_ms",
            "AT_s",
            "max_jitter_ms",
            "mean_jitter_ms",
            "std_jitter_ms",
            "failed",
        ],
    );
    report.push(vec![
        Cell::Num(s.size_bits),
        Cell::Num(s.pu_deallocs),
        Cell::Num(s.it_s),
        Cell::Num(s.ica_ms),
        Cell::Num(s.cr_ms),
        Cell::Num(s.at_s),
        Cell::Num(s.max_jitter_ms),
        Cell::Num(s.mean_jitter_ms),
        Cell::Num(s.std_jitter_ms),
        Cell::Int(s.failed as i64),
    ]);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovCell {
    pub n: usize,
    pub inv_t: f64,
    pub p_n: Option<f64>,
    pub gamma_n: Option<f64>,
    pub error: Option<String>,
}

pub fn markov_grid(cfg: &ExperimentConfig) -> Vec<MarkovCell> {
    let g = &cfg.markov;
    let mut cells = Vec::new();
    for n in 1..=g.n_max {
        for &inv_t in &g.inv_t {
            let params =
                MarkovParams::uniform(g.lambda, g.sigma, g.mu, g.n_max, 1.0 / inv_t, g.f_p, g.f_s);
            let cell = match markov_solve(&params, n) {
                Ok(s) => MarkovCell {
                    n,
                    inv_t,
                    p_n: Some(s.p_n),
                    gamma_n: Some(s.gamma_n),
                    error: None,
                },
                Err(e) => MarkovCell {
                    n,
                    inv_t,
                    p_n: None,
                    gamma_n: None,
                    error: Some(e.to_string()),
                },
            };
            cells.push(cell);
        }
    }
    cells
}

pub fn run_markov(cfg: &ExperimentConfig) -> Result<Report> {
    expect(cfg, Experiment::Markov)?;
    let mut report = Report::new(cfg, &["n", "inv_T", "P_n", "Gamma_n"]);
    for c in markov_grid(cfg) {
        let num = |v: Option<f64>| v.map_or(Cell::Missing, Cell::Num);
        report.push(vec![
            Cell::Int(c.n as i64),
            Cell::Num(c.inv_t),
            num(c.p_n),
            num(c.gamma_n),
        ]);
        if let Some(e) = c.error {
            report
                .notes
                .push(format!("n={} inv_T={}: {e}", c.n, c.inv_t));
        }
    }
    Ok(report)
}

pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    match cfg.experiment {
        Experiment::Attempts => run_attempts(cfg),
        Experiment::Markov => run_markov(cfg),
        Experiment::Transfer => run_transfer(cfg),
        Experiment::Success => run_success_rate(cfg),
    }
}

fn expect(cfg: &ExperimentConfig, e: Experiment) -> Result<()> {
    if cfg.experiment != e {
        return Err(Error::Precondition(format!(
            "config is for {:?}, not {e:?}",
            cfg.experiment
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overhead_examples() {
        assert_eq!(overhead_calculator(4, 8, 10, 64_000.0, 1), 0.040);
        assert_eq!(overhead_calculator(2, 8, 10, 64_000.0, 3), 0.060);
        assert_eq!(overhead_calculator(4, 8, 34, 64_000.0, 1), 0.136);
    }

    #[test]
    fn free_counts_from_blocked() {
        let fdm = ExperimentConfig::new(Experiment::Success, AllocMode::FdmFdma);
        assert_eq!(free_for_blocked(&fdm, 811), 39);
        assert_eq!(free_for_blocked(&fdm, 927), 0);
        let ofdm = ExperimentConfig::new(Experiment::Success, AllocMode::OfdmFdma);
        assert_eq!(free_for_blocked(&ofdm, 1166), 21);
        assert_eq!(free_for_blocked(&ofdm, 565), 456);
        assert_eq!(free_for_blocked(&ofdm, 1283), 0);
        assert!(free_for_blocked(&ofdm, 96) > 1185);
    }

    #[test]
    fn empty_cases() {
        let mut cfg = ExperimentConfig::new(Experiment::Attempts, AllocMode::FdmFdma);
        cfg.free_override = Some(0);
        cfg.trials = 20;
        cfg.dn = Some(4);
        let r = attempt_row(&cfg, &cfg.spectrum().unwrap(), 0, 4).unwrap();
        assert_eq!(
            (r.success_rate, r.mean_attempts, r.theory_attempts),
            (0.0, 1000.0, None)
        );

        let mut cfg = ExperimentConfig::new(Experiment::Transfer, AllocMode::FdmFdma);
        cfg.free_override = Some(697);
        cfg.trials = 3;
        cfg.file_spec = Some(crate::config::FileSpec {
            size_bits: 0.0,
            dn: 8,
        });
        let s = transfer_summary(&cfg).unwrap();
        assert_eq!(
            (s.it_s, s.ica_ms, s.cr_ms, s.at_s, s.pu_deallocs),
            (0.0, 0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn reports_are_reproducible() {
        let mut cfg = ExperimentConfig::new(Experiment::Attempts, AllocMode::OfdmFdma);
        cfg.free_override = Some(456);
        cfg.trials = 300;
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        cfg.seed += 1;
        assert_ne!(run(&cfg).unwrap().to_csv().unwrap(), a.to_csv().unwrap());
    }
}
