//! Experiment configuration and its flat key-value file format.

use std::path::Path;

use crn_core::alloc::{AllocMode, DrawPolicy, GuardPolicy};
use crn_core::error::{Error, Result};
use crn_core::protocol::{AddrMode, ProtocolConfig};
use crn_core::spectrum::{SpectrumMode, SpectrumModel};
use crn_core::topology::TrafficMix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Attempts,
    Markov,
    Transfer,
    Success,
}

/// Where the success grid takes its blocked-channel counts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockedSource {
    /// Fixed counts measured for a 25 m range, 100 to 1100 nodes.
    Injected,
    /// Mean 2-distance blockage of a generated topology.
    Topology,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FileSpec {
    pub size_bits: f64,
    pub dn: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovGrid {
    pub lambda: f64,
    pub sigma: f64,
    pub mu: f64,
    pub f_p: u32,
    pub f_s: u32,
    pub inv_t: Vec<f64>,
    pub n_max: usize,
}

impl Default for MarkovGrid {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            sigma: 0.0,
            mu: 0.7,
            f_p: 16,
            f_s: 23,
            inv_t: vec![0.01, 0.25, 0.5, 0.75, 0.99],
            n_max: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub mode: AllocMode,
    pub channels: u32,
    pub pi: u32,
    pub broadcast_fraction: f64,
    pub nodes: usize,
    pub range: f64,
    /// Probability that a node holds channels in the emergent load model.
    pub activity: f64,
    pub trials: u32,
    pub seed: u64,
    pub traffic_mix: TrafficMix,
    pub free_override: Option<u32>,
    /// Free primary channels; split proportionally when unset.
    pub free_primary: Option<u32>,
    /// Restrict a run to one DN instead of every DN in the mix.
    pub dn: Option<u32>,
    pub attempt_budget: u32,
    pub node_sweep: Vec<usize>,
    pub blocked_source: BlockedSource,
    pub protocol: ProtocolConfig,
    pub file_spec: Option<FileSpec>,
    pub markov: MarkovGrid,
}

impl ExperimentConfig {
    /// Defaults for `mode`: 1000 non-overlapping channels for FDM, 2000
    /// overlapping ones for OFDM, half of them primary and 30% of the
    /// primaries taken by broadcasters.
    pub fn new(experiment: Experiment, mode: AllocMode) -> Self {
        let channels = match mode {
            AllocMode::FdmFdma => 1000,
            AllocMode::OfdmFdma => 2000,
        };
        Self {
            experiment,
            mode,
            channels,
            pi: channels / 2,
            broadcast_fraction: 0.3,
            nodes: 700,
            range: 25.0,
            activity: 0.7,
            trials: match experiment {
                Experiment::Transfer => 1000,
                Experiment::Success => 200,
                _ => 10_000,
            },
            seed: 1,
            traffic_mix: TrafficMix::default(),
            free_override: None,
            free_primary: None,
            dn: None,
            attempt_budget: 1000,
            node_sweep: (1..=11).map(|k| k * 100).collect(),
            blocked_source: BlockedSource::Injected,
            protocol: ProtocolConfig {
                mode,
                ..ProtocolConfig::default()
            },
            file_spec: None,
            markov: MarkovGrid::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        self.traffic_mix.validate()?;
        self.protocol.validate()?;
        if self.trials == 0 || self.attempt_budget == 0 {
            return bad("trials and attempt budget must be at least 1".into());
        }
        if self.pi > self.channels || !(0.0..=1.0).contains(&self.broadcast_fraction) {
            return bad(format!(
                "bad spectrum: C={} pi={} broadcast={}",
                self.channels, self.pi, self.broadcast_fraction
            ));
        }
        if let Some(f) = self.free_override {
            if f > self.channels {
                return bad(format!("F={f} exceeds C={}", self.channels));
            }
            if self.free_primary.is_some_and(|p| p > f) {
                return bad("free primary count exceeds F".into());
            }
        }
        if self.dn == Some(0) {
            return bad("DN must be at least 1".into());
        }
        if let Some(fs) = self.file_spec {
            if !(fs.size_bits >= 0.0) || fs.dn == 0 {
                return bad(format!("bad file spec {fs:?}"));
            }
        }
        if self.protocol.mode != self.mode {
            return bad("protocol mode differs from experiment mode".into());
        }
        Ok(())
    }

    pub fn spectrum(&self) -> Result<SpectrumModel> {
        let mode = match self.mode {
            AllocMode::FdmFdma => SpectrumMode::NonOverlapping,
            AllocMode::OfdmFdma => SpectrumMode::OverlappingOrthogonal,
        };
        SpectrumModel::new(
            self.channels,
            self.pi,
            self.broadcast_fraction,
            mode,
            self.seed,
        )
    }

    /// DN values to sweep.
    pub fn demands(&self) -> Vec<u32> {
        match self.dn {
            Some(dn) => vec![dn],
            None => self.traffic_mix.0.iter().map(|&(dn, _)| dn).collect(),
        }
    }

    /// Reads a flat key-value file on top of the defaults for its
    /// `experiment` and `mode` keys.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parameter(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Parameter(e.to_string()))?;
        let experiment = file
            .experiment
            .ok_or_else(|| Error::Parameter("missing key `experiment`".into()))?;
        let mut cfg = Self::new(
            experiment,
            file.mode.map(ModeArg::into).unwrap_or(AllocMode::FdmFdma),
        );
        file.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Fdm,
    Ofdm,
}

impl From<ModeArg> for AllocMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fdm => AllocMode::FdmFdma,
            ModeArg::Ofdm => AllocMode::OfdmFdma,
        }
    }
}

/// On-disk form: every key optional, unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: Option<Experiment>,
    pub mode: Option<ModeArg>,
    pub channels: Option<u32>,
    pub primary: Option<u32>,
    pub broadcast_fraction: Option<f64>,
    pub nodes: Option<usize>,
    pub range: Option<f64>,
    pub activity: Option<f64>,
    pub trials: Option<u32>,
    pub seed: Option<u64>,
    /// `"1:0.5,2:0.2,..."`
    pub traffic_mix: Option<String>,
    pub free: Option<u32>,
    pub free_primary: Option<u32>,
    pub dn: Option<u32>,
    pub attempt_budget: Option<u32>,
    pub node_sweep: Option<Vec<usize>>,
    pub blocked_source: Option<BlockedSource>,
    pub file_bits: Option<f64>,
    pub file_dn: Option<u32>,
    pub lambda: Option<f64>,
    pub sigma: Option<f64>,
    pub mu: Option<f64>,
    pub f_p: Option<u32>,
    pub f_s: Option<u32>,
    pub inv_t: Option<Vec<f64>>,
    pub n_max: Option<usize>,
    pub data_rate: Option<f64>,
    pub ccc_rate: Option<f64>,
    pub pu_arrival_prob: Option<f64>,
    pub delta_t_us: Option<u64>,
    pub maxtrial: Option<u32>,
    pub ipv6: Option<bool>,
    pub draw: Option<DrawPolicy>,
    pub guard: Option<GuardPolicy>,
}

macro_rules! set {
    ($src:expr => $dst:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl ConfigFile {
    pub fn apply(self, cfg: &mut ExperimentConfig) -> Result<()> {
        set!(self.channels => cfg.channels);
        set!(self.primary => cfg.pi);
        set!(self.broadcast_fraction => cfg.broadcast_fraction);
        set!(self.nodes => cfg.nodes);
        set!(self.range => cfg.range);
        set!(self.activity => cfg.activity);
        set!(self.trials => cfg.trials);
        set!(self.seed => cfg.seed);
        if let Some(mix) = self.traffic_mix {
            cfg.traffic_mix = parse_mix(&mix)?;
        }
        cfg.free_override = self.free.or(cfg.free_override);
        cfg.free_primary = self.free_primary.or(cfg.free_primary);
        cfg.dn = self.dn.or(cfg.dn);
        set!(self.attempt_budget => cfg.attempt_budget);
        set!(self.node_sweep => cfg.node_sweep);
        set!(self.blocked_source => cfg.blocked_source);
        match (self.file_bits, self.file_dn) {
            (Some(size_bits), Some(dn)) => cfg.file_spec = Some(FileSpec { size_bits, dn }),
            (None, None) => {}
            _ => return Err(Error::Parameter("file_bits and file_dn go together".into())),
        }
        set!(self.lambda => cfg.markov.lambda);
        set!(self.sigma => cfg.markov.sigma);
        set!(self.mu => cfg.markov.mu);
        set!(self.f_p => cfg.markov.f_p);
        set!(self.f_s => cfg.markov.f_s);
        set!(self.inv_t => cfg.markov.inv_t);
        set!(self.n_max => cfg.markov.n_max);
        let p = &mut cfg.protocol;
        set!(self.data_rate => p.data_rate);
        set!(self.ccc_rate => p.ccc_rate);
        set!(self.pu_arrival_prob => p.pu_arrival_prob);
        set!(self.delta_t_us => p.delta_t);
        set!(self.maxtrial => p.maxtrial);
        set!(self.draw => p.draw);
        set!(self.guard => p.guard);
        if let Some(v6) = self.ipv6 {
            p.addr_mode = if v6 { AddrMode::Ipv6 } else { AddrMode::Ipv4 };
        }
        Ok(())
    }
}

/// Parses `"DN:proportion"` pairs separated by commas.
pub fn parse_mix(text: &str) -> Result<TrafficMix> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (dn, p) = part
            .split_once(':')
            .ok_or_else(|| Error::Parameter(format!("bad mix entry `{part}`")))?;
        let dn = dn
            .trim()
            .parse()
            .map_err(|_| Error::Parameter(format!("bad DN in `{part}`")))?;
        let p = p
            .trim()
            .parse()
            .map_err(|_| Error::Parameter(format!("bad proportion in `{part}`")))?;
        out.push((dn, p));
    }
    let mix = TrafficMix(out);
    mix.validate()?;
    Ok(mix)
}
