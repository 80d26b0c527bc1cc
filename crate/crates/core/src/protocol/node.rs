//! Per-node protocol state: the transmit-side state machine, receive-side
//! reservation bookkeeping and the neighbor handling of control messages.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::message::ControlMessage;
use super::Ticks;
use crate::error::{Error, Result};
use crate::spectrum::{ChannelId, Occupancy, UsageDb};
use crate::topology::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodePhase {
    Idle,
    Sensing,
    Allocate,
    Transmit,
    Deallocate,
    TimedOut,
}

impl fmt::Display for NodePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Inputs driving the transmit-side state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FsmInput {
    /// Data is buffered (`B_Tx = 1`).
    DataBuffered,
    /// Candidate channels were found free and TAMs went out.
    ProbesSent,
    /// The TAM round ended with channels still missing.
    NeedMore,
    /// All DN channels are held and CHALLOC was broadcast.
    AllAcquired,
    /// The timing register passed the allocation time-out.
    Timeout,
    /// A primary user reclaimed a channel in use.
    PuArrival,
    /// The transfer finished or aborted.
    TransferDone,
    /// CLS went out and all channels were released.
    Released,
    /// Temporary blocks were released after a time-out.
    Recovered,
}

/// Usage-database entry: the node that claims the channel and whether the
/// claim is still a temporary block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub owner: NodeId,
    pub committed: bool,
}

impl Claim {
    fn occupancy(self) -> Occupancy {
        if self.committed {
            Occupancy::SuAllocated(self.owner)
        } else {
            Occupancy::TempBlocked(self.owner)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedRequest {
    pub sa: NodeId,
    pub dn: u32,
    pub enqueued: Ticks,
}

#[derive(Debug, Clone)]
pub struct NodeRuntime {
    pub id: NodeId,
    pub phase: NodePhase,
    pub b_tx: bool,
    /// Available receive capacity.
    pub an: u32,
    pub dn_max: u32,
    pub usage_db: UsageDb<Claim>,
    /// `(sender, SPN) -> channel` for inbound transfers.
    pub reservation_db: BTreeMap<(NodeId, u8), ChannelId>,
    /// Channels granted to each inbound sender.
    pub granted: BTreeMap<NodeId, u32>,
    pub waiting_queue: Vec<QueuedRequest>,
    /// Time at which the timing register was last zeroed.
    pub clock_start: Ticks,
    /// Received SPN bitmask per `(sender, PN)` awaiting completion.
    pub partial_frames: BTreeMap<(NodeId, u32), u64>,
    pub completed_frames: u64,
    pub diagnostics: Vec<String>,
}

impl NodeRuntime {
    pub fn new(id: NodeId, dn_max: u32) -> Self {
        Self {
            id,
            phase: NodePhase::Idle,
            b_tx: false,
            an: dn_max,
            dn_max,
            usage_db: UsageDb::new(),
            reservation_db: BTreeMap::new(),
            granted: BTreeMap::new(),
            waiting_queue: Vec::new(),
            clock_start: 0,
            partial_frames: BTreeMap::new(),
            completed_frames: 0,
            diagnostics: Vec::new(),
        }
    }

    /// Elapsed time on the timing register.
    pub fn clock(&self, now: Ticks) -> Ticks {
        now.saturating_sub(self.clock_start)
    }

    /// Advances the transmit-side state machine.
    pub fn step(&mut self, input: FsmInput, now: Ticks) -> Result<NodePhase> {
        use FsmInput::*;
        use NodePhase::*;
        let next = match (self.phase, input) {
            (Idle, DataBuffered) if self.b_tx => Sensing,
            (Sensing, ProbesSent) => Allocate,
            (Allocate, NeedMore) => Sensing,
            (Allocate, AllAcquired) => Transmit,
            (Sensing | Allocate, Timeout) => TimedOut,
            (TimedOut, Recovered) => Idle,
            (Transmit, PuArrival) => Sensing,
            (Transmit | Sensing | Allocate, TransferDone) => Deallocate,
            (Deallocate, Released) => Idle,
            (from, input) => {
                return Err(Error::IllegalTransition {
                    from: from.to_string(),
                    to: format!("{input:?}"),
                });
            }
        };
        match (self.phase, next) {
            (Idle, Sensing) | (Transmit, Sensing) => self.clock_start = now,
            (TimedOut, Idle) => {
                let me = self.id;
                self.usage_db
                    .remove_where(|_, c| c.owner == me && !c.committed);
            }
            _ => {}
        }
        self.phase = next;
        Ok(next)
    }

    fn note(&mut self, msg: String) {
        self.diagnostics.push(msg);
    }

    /// Local view of a channel derived from the usage database.
    pub fn local_occupancy(&self, c: ChannelId) -> Occupancy {
        self.usage_db
            .find(c)
            .map_or(Occupancy::Free, Claim::occupancy)
    }

    fn set_claim(&mut self, c: ChannelId, next: Option<Claim>) -> Result<()> {
        let cur = self.local_occupancy(c);
        let target = next.map_or(Occupancy::Free, Claim::occupancy);
        if !cur.can_become(target) {
            return Err(Error::Precondition(format!(
                "node {}: channel {c} cannot go {cur:?} -> {target:?}",
                self.id
            )));
        }
        match next {
            Some(claim) => {
                self.usage_db.replace(c, claim);
            }
            None => {
                self.usage_db.delete(c)?;
            }
        }
        Ok(())
    }

    /// Places a temporary block on `c` for `owner`.
    pub fn temp_block(&mut self, c: ChannelId, owner: NodeId) -> Result<()> {
        self.set_claim(
            c,
            Some(Claim {
                owner,
                committed: false,
            }),
        )
    }

    /// Turns `owner`'s temporary block on `c` into an allocation, blocking
    /// first if no block was recorded.
    pub fn commit(&mut self, c: ChannelId, owner: NodeId) -> Result<()> {
        match self.usage_db.find(c) {
            None => self.temp_block(c, owner)?,
            Some(Claim { owner: o, .. }) if o != owner => {
                return Err(Error::Precondition(format!(
                    "node {}: channel {c} held by {o}, not {owner}",
                    self.id
                )))
            }
            Some(Claim {
                committed: true, ..
            }) => return Ok(()),
            Some(_) => {}
        }
        self.set_claim(
            c,
            Some(Claim {
                owner,
                committed: true,
            }),
        )
    }

    /// Drops `owner`'s claim on `c`. Returns whether anything was removed.
    pub fn release(&mut self, c: ChannelId, owner: NodeId) -> Result<bool> {
        match self.usage_db.find(c) {
            Some(claim) if claim.owner == owner => {
                self.set_claim(c, None)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    /// Whether a TAM from `sa` for `c` must be refused. With `guard` set,
    /// channels adjacent to another owner's claim are refused as well.
    pub fn refuses(&self, sa: NodeId, c: ChannelId, pu_busy: bool, guard: bool) -> bool {
        if pu_busy {
            return true;
        }
        if let Some(claim) = self.usage_db.find(c) {
            if claim.owner != sa || claim.committed {
                return true;
            }
        }
        guard
            && [c.checked_sub(1), c.checked_add(1)]
                .into_iter()
                .flatten()
                .any(|n| self.usage_db.find(n).is_some_and(|cl| cl.owner != sa))
    }

    /// Receiver side of the reservation exchange: grant when capacity
    /// allows, otherwise queue the request. Returns `true` for WAIT.
    pub fn reserve_channels_receiver(&mut self, sa: NodeId, dn: u32, now: Ticks) -> bool {
        if self.granted.contains_key(&sa) {
            return false;
        }
        if self.waiting_queue.iter().any(|q| q.sa == sa) {
            return true;
        }
        if self.an >= dn {
            self.an -= dn;
            self.granted.insert(sa, dn);
            false
        } else {
            self.waiting_queue.push(QueuedRequest {
                sa,
                dn,
                enqueued: now,
            });
            true
        }
    }

    /// Index of the queued request to serve next: shortest demand first,
    /// with each `aging_factor` ticks of waiting worth one channel.
    pub fn next_request(&self, now: Ticks, aging_factor: Ticks) -> Option<usize> {
        let priority = |q: &QueuedRequest| {
            q.dn as f64 - now.saturating_sub(q.enqueued) as f64 / aging_factor as f64
        };
        (0..self.waiting_queue.len()).min_by(|&a, &b| {
            priority(&self.waiting_queue[a])
                .total_cmp(&priority(&self.waiting_queue[b]))
                .then(
                    self.waiting_queue[a]
                        .enqueued
                        .cmp(&self.waiting_queue[b].enqueued),
                )
        })
    }

    /// Grants queued requests in priority order while the head fits.
    pub fn service_queue(&mut self, now: Ticks, aging_factor: Ticks) -> Vec<QueuedRequest> {
        let mut served = Vec::new();
        while let Some(i) = self.next_request(now, aging_factor) {
            let q = self.waiting_queue[i];
            if q.dn > self.an {
                break;
            }
            self.waiting_queue.remove(i);
            self.an -= q.dn;
            self.granted.insert(q.sa, q.dn);
            served.push(q);
        }
        served
    }

    /// Ends an inbound transfer from `sa`: restores capacity, forgets its
    /// sub-packet mapping and serves the waiting queue.
    pub fn release_inbound(
        &mut self,
        sa: NodeId,
        now: Ticks,
        aging_factor: Ticks,
    ) -> Vec<QueuedRequest> {
        if let Some(dn) = self.granted.remove(&sa) {
            self.an += dn;
        }
        self.reservation_db.retain(|&(s, _), _| s != sa);
        self.partial_frames.retain(|&(s, _), _| s != sa);
        self.service_queue(now, aging_factor)
    }

    /// Neighbor handling of a control message delivered to this node.
    /// Returns the replies to send back to the message's `sa`.
    pub fn on_control_message(
        &mut self,
        msg: &ControlMessage,
        now: Ticks,
        pu_busy: &dyn Fn(ChannelId) -> bool,
        guard: bool,
        aging_factor: Ticks,
    ) -> Result<Vec<ControlMessage>> {
        let me = self.id;
        let mut out = Vec::new();
        match *msg {
            ControlMessage::Cm { sa, da, dn } if da == me => {
                let wait = self.reserve_channels_receiver(sa, dn as u32, now);
                out.push(ControlMessage::AckOrWait { sa, da: me, wait });
            }
            ControlMessage::TamOrCcb {
                sa, cn, ccb: false, ..
            } => {
                let refuse = self.refuses(sa, cn, pu_busy(cn), guard);
                if !refuse && self.usage_db.find(cn).is_none() {
                    self.temp_block(cn, sa)?;
                }
                out.push(ControlMessage::TamReply {
                    sa,
                    da: me,
                    ack: !refuse,
                });
            }
            ControlMessage::TamOrCcb {
                sa, cn, ccb: true, ..
            } => match self.usage_db.find(cn) {
                Some(Claim {
                    owner,
                    committed: false,
                }) if owner == sa => self.set_claim(cn, None)?,
                _ => self.note(format!("CCB from {sa} for unmarked channel {cn}")),
            },
            ControlMessage::Challoc { sa, da, ref pairs } => {
                for &(spn, cn) in pairs {
                    if da == me {
                        self.reservation_db.insert((sa, spn), cn);
                    }
                    if let Err(e) = self.commit(cn, sa) {
                        self.note(format!("CHALLOC from {sa}: {e}"));
                    }
                }
            }
            ControlMessage::Crm {
                sa, ref channels, ..
            } => {
                for &cn in channels {
                    if !self.release(cn, sa)? {
                        self.note(format!("CRM from {sa} for unknown channel {cn}"));
                    }
                }
            }
            ControlMessage::Cls { sa, da } => {
                self.usage_db.remove_where(|_, c| c.owner == sa);
                if da == me {
                    for q in self.release_inbound(sa, now, aging_factor) {
                        out.push(ControlMessage::AckOrWait {
                            sa: q.sa,
                            da: me,
                            wait: false,
                        });
                    }
                }
            }
            _ => {}
        }
        Ok(out)
    }

    /// Receiver side of the data plane. Acknowledges a correctly received
    /// sub-packet on its reserved channel; returns whether the frame became
    /// complete alongside the acknowledgement.
    #[allow(clippy::too_many_arguments)]
    pub fn receive_data(
        &mut self,
        sa: NodeId,
        pn: u32,
        spn: u8,
        channel: ChannelId,
        dn: u32,
        corrupted: bool,
    ) -> (Option<ControlMessage>, bool) {
        match self.reservation_db.get(&(sa, spn)) {
            Some(&cn) if cn == channel => {}
            other => {
                self.note(format!(
                    "sub-packet ({pn},{spn}) from {sa} on {channel}, reserved {other:?}"
                ));
                return (None, false);
            }
        }
        if corrupted {
            return (None, false);
        }
        let ack = ControlMessage::DataAck {
            sa,
            da: self.id,
            pn,
            spn,
        };
        let full = if dn >= 64 { u64::MAX } else { (1u64 << dn) - 1 };
        let mask = self.partial_frames.entry((sa, pn)).or_insert(0);
        if *mask & (1 << spn) != 0 {
            return (Some(ack), false);
        }
        *mask |= 1 << spn;
        let complete = *mask == full;
        if complete {
            self.partial_frames.remove(&(sa, pn));
            self.completed_frames += 1;
        }
        (Some(ack), complete)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const AGING: Ticks = 1_000_000;

    fn no_pu(_: ChannelId) -> bool {
        false
    }

    #[test]
    fn receiver_grants_and_waits() {
        let mut n = NodeRuntime::new(1, 10);
        assert!(!n.reserve_channels_receiver(2, 8, 0));
        assert_eq!(n.an, 2);
        let mut n = NodeRuntime::new(1, 0);
        assert!(n.reserve_channels_receiver(2, 1, 0));
        assert_eq!(n.waiting_queue.len(), 1);
        let mut n = NodeRuntime::new(1, 10);
        assert!(!n.reserve_channels_receiver(2, 4, 0));
        assert!(n.reserve_channels_receiver(3, 8, 1));
        assert_eq!(n.an, 6);
    }

    #[test]
    fn sjf_and_aging() {
        let mut n = NodeRuntime::new(1, 8);
        n.reserve_channels_receiver(9, 4, 0);
        n.an = 0;
        n.waiting_queue.push(QueuedRequest {
            sa: 2,
            dn: 6,
            enqueued: 0,
        });
        n.waiting_queue.push(QueuedRequest {
            sa: 3,
            dn: 2,
            enqueued: 0,
        });
        let served = n.release_inbound(9, 10, AGING);
        assert_eq!(served.iter().map(|q| q.sa).collect::<Vec<_>>(), vec![3]);
        assert_eq!(n.an, 2);

        let mut n = NodeRuntime::new(1, 8);
        n.waiting_queue.push(QueuedRequest {
            sa: 2,
            dn: 6,
            enqueued: 0,
        });
        n.waiting_queue.push(QueuedRequest {
            sa: 3,
            dn: 2,
            enqueued: 5 * AGING,
        });
        assert_eq!(n.next_request(5 * AGING, AGING), Some(0));
    }

    #[test]
    fn tam_handling() {
        let mut n = NodeRuntime::new(1, 8);
        let tam = ControlMessage::TamOrCcb {
            sa: 4,
            da: 5,
            cn: 9,
            ccb: false,
        };
        let r = n.on_control_message(&tam, 0, &no_pu, false, AGING).unwrap();
        assert_eq!(
            r,
            vec![ControlMessage::TamReply {
                sa: 4,
                da: 1,
                ack: true
            }]
        );
        assert_eq!(
            n.usage_db.find(9),
            Some(Claim {
                owner: 4,
                committed: false
            })
        );

        let mut rx = NodeRuntime::new(1, 8);
        rx.on_control_message(
            &ControlMessage::Challoc {
                sa: 6,
                da: 1,
                pairs: vec![(0, 9)],
            },
            0,
            &no_pu,
            false,
            AGING,
        )
        .unwrap();
        let r = rx
            .on_control_message(&tam, 0, &no_pu, false, AGING)
            .unwrap();
        assert_eq!(
            r,
            vec![ControlMessage::TamReply {
                sa: 4,
                da: 1,
                ack: false
            }]
        );

        let ccb = ControlMessage::TamOrCcb {
            sa: 4,
            da: 5,
            cn: 9,
            ccb: true,
        };
        n.on_control_message(&ccb, 0, &no_pu, false, AGING).unwrap();
        assert!(n.usage_db.is_empty());
        n.on_control_message(&ccb, 0, &no_pu, false, AGING).unwrap();
        assert_eq!(n.diagnostics.len(), 1);
    }

    #[test]
    fn guard_refuses_adjacent() {
        let mut n = NodeRuntime::new(1, 8);
        n.commit(10, 7).unwrap();
        assert!(n.refuses(4, 11, false, true));
        assert!(!n.refuses(4, 11, false, false));
        assert!(!n.refuses(7, 11, false, true));
        assert!(n.refuses(4, 12, true, false));
    }

    #[test]
    fn challoc_to_self_records_pairs() {
        let mut n = NodeRuntime::new(1, 8);
        let msg = ControlMessage::Challoc {
            sa: 3,
            da: 1,
            pairs: vec![(0, 4), (1, 7)],
        };
        n.on_control_message(&msg, 0, &no_pu, false, AGING).unwrap();
        assert_eq!(n.reservation_db, BTreeMap::from([((3, 0), 4), ((3, 1), 7)]));
        assert_eq!(n.local_occupancy(4), Occupancy::SuAllocated(3));
    }

    #[test]
    fn receive_data_acks_and_completes() {
        let mut n = NodeRuntime::new(1, 8);
        n.reservation_db.insert((3, 0), 4);
        n.reservation_db.insert((3, 1), 7);
        let (ack, done) = n.receive_data(3, 0, 0, 4, 2, false);
        assert_eq!(
            ack,
            Some(ControlMessage::DataAck {
                sa: 3,
                da: 1,
                pn: 0,
                spn: 0
            })
        );
        assert!(!done);
        assert_eq!(n.receive_data(3, 0, 1, 7, 2, true), (None, false));
        assert!(n.receive_data(3, 0, 1, 7, 2, false).1);
        assert!(!n.receive_data(3, 0, 1, 7, 2, false).1);
        assert_eq!(n.completed_frames, 1);
        assert_eq!(n.receive_data(3, 1, 5, 7, 2, false), (None, false));
    }

    #[test]
    fn state_machine_arcs() {
        let mut n = NodeRuntime::new(1, 8);
        assert!(n.step(FsmInput::DataBuffered, 0).is_err());
        n.b_tx = true;
        assert_eq!(
            n.step(FsmInput::DataBuffered, 5).unwrap(),
            NodePhase::Sensing
        );
        assert_eq!(n.clock_start, 5);
        n.step(FsmInput::ProbesSent, 6).unwrap();
        n.step(FsmInput::NeedMore, 7).unwrap();
        assert_eq!(n.clock_start, 5);
        n.temp_block(3, 1).unwrap();
        assert_eq!(n.step(FsmInput::Timeout, 100).unwrap(), NodePhase::TimedOut);
        assert_eq!(n.step(FsmInput::Recovered, 100).unwrap(), NodePhase::Idle);
        assert!(n.usage_db.is_empty());
        n.step(FsmInput::DataBuffered, 200).unwrap();
        n.step(FsmInput::ProbesSent, 201).unwrap();
        n.step(FsmInput::AllAcquired, 202).unwrap();
        assert_eq!(
            n.step(FsmInput::PuArrival, 300).unwrap(),
            NodePhase::Sensing
        );
        assert_eq!(n.clock(300), 0);
        assert!(n.step(FsmInput::AllAcquired, 301).is_err());
    }

    #[test]
    fn occupancy_discipline() {
        let mut n = NodeRuntime::new(1, 8);
        n.temp_block(3, 2).unwrap();
        assert!(n.temp_block(3, 2).is_err());
        n.commit(3, 2).unwrap();
        assert!(n.commit(3, 5).is_err());
        assert!(n.release(3, 2).unwrap());
        assert!(!n.release(3, 2).unwrap());
    }
}
