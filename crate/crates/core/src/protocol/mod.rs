//! Control-channel protocol: message layouts, per-node runtime and state
//! machine, the per-link data plane and the discrete-event network engine.

pub mod engine;
pub mod message;
pub mod node;
pub mod transfer;

use serde::{Deserialize, Serialize};

use crate::alloc::{AllocMode, DrawPolicy, GuardPolicy};
use crate::error::{param, Result};

pub use engine::{Network, NetworkStats, SessionOutcome, SessionRequest};
pub use message::{AddrMode, ControlMessage, MessageKind};
pub use node::{Claim, FsmInput, NodePhase, NodeRuntime, QueuedRequest};
pub use transfer::{transmit_data, DataPlane, TransferStats};

/// Simulation time in microseconds.
pub type Ticks = u64;

pub const TICKS_PER_SECOND: f64 = 1_000_000.0;

pub fn ticks_from_secs(s: f64) -> Ticks {
    (s * TICKS_PER_SECOND).round() as Ticks
}

pub fn secs_from_ticks(t: Ticks) -> f64 {
    t as f64 / TICKS_PER_SECOND
}

/// Per-unit probability of a primary user reclaiming an allocated primary
/// channel during one packet interval. Reclaimed channels are replaced from
/// the whole free pool, so a long transfer drifts towards secondary channels
/// and the reclaim count saturates: with a primary share `q` of the free
/// pool, `N` packets and `DN` channels it is about
/// `DN q / (1 - q) * (1 - exp(-N p (1 - q)))`. For a 402,684,220.8-bit file
/// over 8 channels with 287 of 697 free channels primary, 3.5e-4 gives about
/// four reclaims.
pub const DEFAULT_PU_ARRIVAL_PROB: f64 = 3.5e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Reply timeout after a CM, TAM or data sub-packet.
    pub delta_t: Ticks,
    /// Allocation time-out measured on the node's timing register.
    pub t_timeout: Ticks,
    /// Retransmissions of a data packet before the transfer aborts.
    pub maxtrial: u32,
    /// TAM retransmissions on silence.
    pub max_trial_tam: u32,
    /// Control-channel rate in bits per second.
    pub ccc_rate: f64,
    /// Data rate of one channel in bits per second.
    pub data_rate: f64,
    pub pu_arrival_prob: f64,
    /// How long a reclaiming primary user keeps its channel.
    pub pu_hold: Ticks,
    /// Per-message loss probability on the control channel.
    pub ccc_loss_prob: f64,
    pub addr_mode: AddrMode,
    /// Age, in ticks, that lowers a queued request's priority by one DN.
    pub aging_factor: Ticks,
    /// Receive capacity of every node.
    pub dn_max: u32,
    pub subpacket_bytes: u32,
    /// Time to sense one batch of candidate channels.
    pub sense_ticks: Ticks,
    /// Upper bound on attempts within one allocation.
    pub attempt_cap: u32,
    /// Time-outs tolerated before a sender gives up on a session.
    pub max_timeouts: u32,
    pub mode: AllocMode,
    pub draw: DrawPolicy,
    pub guard: GuardPolicy,
    /// Record an event trace.
    pub trace: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let ccc_rate = 64_000.0;
        let addr_mode = AddrMode::Ipv4;
        let tam = message_ticks(tam_bytes(addr_mode), ccc_rate);
        let mut cfg = Self {
            delta_t: 2 * tam,
            t_timeout: 0,
            maxtrial: 5,
            max_trial_tam: 5,
            ccc_rate,
            data_rate: 64_000.0,
            pu_arrival_prob: DEFAULT_PU_ARRIVAL_PROB,
            pu_hold: ticks_from_secs(10.0),
            ccc_loss_prob: 0.0,
            addr_mode,
            aging_factor: 1_000_000,
            dn_max: 8,
            subpacket_bytes: 1024,
            sense_ticks: tam,
            attempt_cap: 1000,
            max_timeouts: 5,
            mode: AllocMode::FdmFdma,
            draw: DrawPolicy::FullDemand,
            guard: GuardPolicy::Precharged,
            trace: false,
        };
        cfg.t_timeout = cfg.timeout_for_fraction(0.5);
        cfg
    }
}

/// Bytes of one TAM for the address mode.
pub fn tam_bytes(mode: AddrMode) -> usize {
    2 * mode.addr_bytes() + 2
}

/// Control-channel airtime of a message of `bytes` bytes.
pub fn message_ticks(bytes: usize, ccc_rate: f64) -> Ticks {
    ((bytes as f64 * 8.0 / ccc_rate) * TICKS_PER_SECOND).ceil() as Ticks
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta_t >= self.t_timeout {
            return Err(param(format!(
                "delta_T ({}) must be below T_timeout ({})",
                self.delta_t, self.t_timeout
            )));
        }
        if self.maxtrial == 0
            || self.max_trial_tam == 0
            || self.attempt_cap == 0
            || self.dn_max == 0
        {
            return Err(param("protocol counts must be at least 1"));
        }
        if !(self.ccc_rate > 0.0 && self.data_rate > 0.0) {
            return Err(param("rates must be positive"));
        }
        for p in [self.pu_arrival_prob, self.ccc_loss_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(param(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.subpacket_bytes == 0 || self.aging_factor == 0 {
            return Err(param("sub-packet size and aging factor must be positive"));
        }
        Ok(())
    }

    pub fn tam_ticks(&self) -> Ticks {
        message_ticks(tam_bytes(self.addr_mode), self.ccc_rate)
    }

    pub fn message_ticks(&self, msg: &ControlMessage) -> Ticks {
        message_ticks(msg.wire_len(self.addr_mode), self.ccc_rate)
    }

    /// Airtime of one data sub-packet on one channel.
    pub fn subpacket_ticks(&self) -> Ticks {
        ((self.subpacket_bytes as f64 * 8.0 / self.data_rate) * TICKS_PER_SECOND).round() as Ticks
    }

    /// Duration of one allocation attempt in the worst case: sensing plus a
    /// TAM round for each of `dn_max` candidates.
    pub fn attempt_ticks(&self) -> Ticks {
        self.sense_ticks + self.dn_max as Ticks * self.delta_t
    }

    /// Time-out worth twice the expected attempt count at free fraction `f`.
    pub fn timeout_for_fraction(&self, f: f64) -> Ticks {
        let attempts = if f > 0.0 {
            (1.0 / f - 1e-9).ceil().max(1.0)
        } else {
            self.attempt_cap as f64
        };
        2 * attempts as Ticks * self.attempt_ticks()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_timing() {
        let cfg = ProtocolConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tam_ticks(), 1250);
        assert_eq!(cfg.delta_t, 2500);
        assert_eq!(cfg.subpacket_ticks(), 128_000);
        assert!(cfg.delta_t < cfg.t_timeout);
        let mut v6 = cfg.clone();
        v6.addr_mode = AddrMode::Ipv6;
        assert_eq!(v6.tam_ticks(), 4250);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = ProtocolConfig::default();
        cfg.t_timeout = cfg.delta_t;
        assert!(cfg.validate().is_err());
        let mut cfg = ProtocolConfig::default();
        cfg.maxtrial = 0;
        assert!(cfg.validate().is_err());
    }
}
