//! Data plane of one established link: parallel sub-packets per packet,
//! acknowledgement time-outs, primary-user preemption and reallocation.

use serde::{Deserialize, Serialize};

use super::message::ControlMessage;
use super::node::NodeRuntime;
use super::{ProtocolConfig, Ticks};
use crate::spectrum::ChannelId;
use crate::topology::NodeId;

/// Environment of a transfer: primary-user activity, channel corruption and
/// replacement-channel allocation.
pub trait DataPlane {
    /// Whether a primary user takes `channel` during packet `pn`'s interval.
    fn pu_arrives(&mut self, channel: ChannelId, pn: u32) -> bool;

    /// Whether sensing finds a primary user on `channel`.
    fn pu_present(&self, channel: ChannelId) -> bool;

    /// Whether the sub-packet sent on `channel` arrives corrupted.
    fn corrupted(&mut self, _channel: ChannelId, _pn: u32, _spn: u8) -> bool {
        false
    }

    /// Gives `channel` up after a primary user reclaimed it.
    fn release(&mut self, _channel: ChannelId) {}

    /// Finds one replacement channel not in `held`, returning it with the
    /// time the allocation took.
    fn reallocate(&mut self, held: &[ChannelId]) -> Option<(ChannelId, Ticks)>;
}

/// Running statistics of inter-packet completion jitter, in ticks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JitterStats {
    pub gaps: u64,
    pub max: f64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl JitterStats {
    pub fn push(&mut self, jitter: f64) {
        self.gaps += 1;
        self.max = self.max.max(jitter);
        self.sum += jitter;
        self.sum_sq += jitter * jitter;
    }

    pub fn mean(&self) -> f64 {
        if self.gaps == 0 {
            0.0
        } else {
            self.sum / self.gaps as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        if self.gaps == 0 {
            return 0.0;
        }
        let m = self.mean();
        (self.sum_sq / self.gaps as f64 - m * m).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferStats {
    /// Packets fully acknowledged.
    pub packets: u32,
    pub subpackets_sent: u64,
    pub subpackets_acked: u64,
    pub reallocations: u32,
    /// Total time spent reallocating channels.
    pub realloc_ticks: Ticks,
    pub retransmissions: u64,
    pub aborted: bool,
    /// Time from the first sub-packet to the last acknowledgement.
    pub elapsed: Ticks,
    pub jitter: JitterStats,
    /// Receiver-side frame completions observed during the transfer.
    pub frames_completed: u64,
}

/// Sends `packets` packets from `sender` to `receiver` over `channels`, one
/// sub-packet per channel. A sub-packet whose acknowledgement does not
/// arrive within `delta_T` triggers sensing: a primary user on the channel
/// causes a release and a one-channel reallocation (resetting the trial
/// counter); otherwise the packet is retried, aborting after `maxtrial`
/// consecutive retries. `PN` advances only once every sub-packet is
/// acknowledged.
pub fn transmit_data<P: DataPlane + ?Sized>(
    cfg: &ProtocolConfig,
    sender: NodeId,
    receiver: &mut NodeRuntime,
    channels: &mut [ChannelId],
    packets: u32,
    plane: &mut P,
) -> TransferStats {
    let dn = channels.len() as u32;
    let airtime = cfg.subpacket_ticks();
    let mut stats = TransferStats::default();
    let mut now: Ticks = 0;
    let mut last_completion: Option<Ticks> = None;
    let mut pending: Vec<u8> = Vec::with_capacity(channels.len());
    let mut lost: Vec<u8> = Vec::with_capacity(channels.len());
    let frames_before = receiver.completed_frames;

    'packets: for pn in 0..packets {
        pending.clear();
        pending.extend(0..dn as u8);
        let mut trial = 0u32;
        let mut first = true;
        loop {
            lost.clear();
            for &spn in &pending {
                let ch = channels[spn as usize];
                stats.subpackets_sent += 1;
                let pu = if first {
                    plane.pu_arrives(ch, pn)
                } else {
                    false
                } || plane.pu_present(ch);
                let corrupted = pu || plane.corrupted(ch, pn, spn);
                let (ack, _) = receiver.receive_data(sender, pn, spn, ch, dn, corrupted);
                match ack {
                    Some(ControlMessage::DataAck { .. }) => stats.subpackets_acked += 1,
                    _ => lost.push(spn),
                }
            }
            first = false;
            now += airtime;
            if lost.is_empty() {
                break;
            }
            now += cfg.delta_t;
            let mut preempted = false;
            for &spn in &lost {
                let ch = channels[spn as usize];
                if !plane.pu_present(ch) {
                    continue;
                }
                preempted = true;
                plane.release(ch);
                match plane.reallocate(channels) {
                    Some((new, cost)) => {
                        now += cost;
                        stats.realloc_ticks += cost;
                        stats.reallocations += 1;
                        channels[spn as usize] = new;
                        let challoc = ControlMessage::Challoc {
                            sa: sender,
                            da: receiver.id,
                            pairs: vec![(spn, new)],
                        };
                        let _ = receiver.on_control_message(
                            &challoc,
                            now,
                            &|_| false,
                            false,
                            cfg.aging_factor,
                        );
                    }
                    None => {
                        stats.aborted = true;
                        break 'packets;
                    }
                }
            }
            if preempted {
                trial = 0;
            } else {
                trial += 1;
                if trial > cfg.maxtrial {
                    stats.aborted = true;
                    break 'packets;
                }
            }
            stats.retransmissions += lost.len() as u64;
            std::mem::swap(&mut pending, &mut lost);
        }
        if let Some(prev) = last_completion {
            stats.jitter.push((now - prev).abs_diff(airtime) as f64);
        }
        last_completion = Some(now);
        stats.packets += 1;
    }
    stats.elapsed = now;
    stats.frames_completed = receiver.completed_frames - frames_before;
    stats
}
