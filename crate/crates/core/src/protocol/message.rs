//! Control-channel messages and their byte layouts.
//!
//! Layouts carry no type tag: the control-channel frame header identifies
//! the message kind, so decoding takes the kind as context.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::ChannelId;
use crate::topology::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AddrMode {
    Ipv4,
    Ipv6,
}

impl AddrMode {
    pub fn addr_bytes(self) -> usize {
        match self {
            AddrMode::Ipv4 => 4,
            AddrMode::Ipv6 => 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    Cm,
    AckOrWait,
    TamOrCcb,
    TamReply,
    Challoc,
    Crm,
    DataAck,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlMessage {
    Cm {
        sa: NodeId,
        da: NodeId,
        dn: u8,
    },
    AckOrWait {
        sa: NodeId,
        da: NodeId,
        wait: bool,
    },
    TamOrCcb {
        sa: NodeId,
        da: NodeId,
        cn: ChannelId,
        ccb: bool,
    },
    TamReply {
        sa: NodeId,
        da: NodeId,
        ack: bool,
    },
    Challoc {
        sa: NodeId,
        da: NodeId,
        pairs: Vec<(u8, ChannelId)>,
    },
    Crm {
        sa: NodeId,
        da: NodeId,
        channels: Vec<ChannelId>,
    },
    DataAck {
        sa: NodeId,
        da: NodeId,
        pn: u32,
        spn: u8,
    },
    Cls {
        sa: NodeId,
        da: NodeId,
    },
}

/// Largest channel number expressible in the 15-bit CN field.
pub const MAX_WIRE_CHANNEL: ChannelId = (1 << 15) - 1;

impl ControlMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            ControlMessage::Cm { .. } => MessageKind::Cm,
            ControlMessage::AckOrWait { .. } => MessageKind::AckOrWait,
            ControlMessage::TamOrCcb { .. } => MessageKind::TamOrCcb,
            ControlMessage::TamReply { .. } => MessageKind::TamReply,
            ControlMessage::Challoc { .. } => MessageKind::Challoc,
            ControlMessage::Crm { .. } => MessageKind::Crm,
            ControlMessage::DataAck { .. } => MessageKind::DataAck,
            ControlMessage::Cls { .. } => MessageKind::Cls,
        }
    }

    pub fn endpoints(&self) -> (NodeId, NodeId) {
        match *self {
            ControlMessage::Cm { sa, da, .. }
            | ControlMessage::AckOrWait { sa, da, .. }
            | ControlMessage::TamOrCcb { sa, da, .. }
            | ControlMessage::TamReply { sa, da, .. }
            | ControlMessage::Challoc { sa, da, .. }
            | ControlMessage::Crm { sa, da, .. }
            | ControlMessage::DataAck { sa, da, .. }
            | ControlMessage::Cls { sa, da } => (sa, da),
        }
    }

    /// Serialized size in bytes.
    pub fn wire_len(&self, mode: AddrMode) -> usize {
        let addrs = 2 * mode.addr_bytes();
        addrs
            + match self {
                ControlMessage::Cm { .. }
                | ControlMessage::AckOrWait { .. }
                | ControlMessage::TamReply { .. } => 1,
                ControlMessage::TamOrCcb { .. } => 2,
                ControlMessage::Challoc { pairs, .. } => 1 + 3 * pairs.len(),
                ControlMessage::Crm { channels, .. } => 1 + 2 * channels.len(),
                ControlMessage::DataAck { .. } => 5,
                ControlMessage::Cls { .. } => 0,
            }
    }

    pub fn encode(&self, mode: AddrMode) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.wire_len(mode));
        let (sa, da) = self.endpoints();
        put_addr(&mut out, sa, mode);
        put_addr(&mut out, da, mode);
        match self {
            ControlMessage::Cm { dn, .. } => out.push(*dn),
            ControlMessage::AckOrWait { wait, .. } => out.push(*wait as u8),
            ControlMessage::TamOrCcb { cn, ccb, .. } => {
                let cn = wire_channel(*cn)?;
                out.extend_from_slice(&((cn << 1) | *ccb as u16).to_be_bytes());
            }
            ControlMessage::TamReply { ack, .. } => out.push(*ack as u8),
            ControlMessage::Challoc { pairs, .. } => {
                out.push(count_byte(pairs.len())?);
                for &(spn, cn) in pairs {
                    out.push(spn);
                    out.extend_from_slice(&wire_channel(cn)?.to_be_bytes());
                }
            }
            ControlMessage::Crm { channels, .. } => {
                out.push(count_byte(channels.len())?);
                for &cn in channels {
                    out.extend_from_slice(&wire_channel(cn)?.to_be_bytes());
                }
            }
            ControlMessage::DataAck { pn, spn, .. } => {
                out.extend_from_slice(&pn.to_be_bytes());
                out.push(*spn);
            }
            ControlMessage::Cls { .. } => {}
        }
        Ok(out)
    }

    pub fn decode(kind: MessageKind, bytes: &[u8], mode: AddrMode) -> Result<Self> {
        let a = mode.addr_bytes();
        if bytes.len() < 2 * a {
            return Err(malformed(kind, bytes.len()));
        }
        let sa = get_addr(&bytes[..a])?;
        let da = get_addr(&bytes[a..2 * a])?;
        let body = &bytes[2 * a..];
        let need = |n: usize| {
            if body.len() == n {
                Ok(())
            } else {
                Err(malformed(kind, bytes.len()))
            }
        };
        Ok(match kind {
            MessageKind::Cm => {
                need(1)?;
                ControlMessage::Cm {
                    sa,
                    da,
                    dn: body[0],
                }
            }
            MessageKind::AckOrWait => {
                need(1)?;
                ControlMessage::AckOrWait {
                    sa,
                    da,
                    wait: body[0] & 1 == 1,
                }
            }
            MessageKind::TamOrCcb => {
                need(2)?;
                let v = u16::from_be_bytes([body[0], body[1]]);
                ControlMessage::TamOrCcb {
                    sa,
                    da,
                    cn: (v >> 1) as ChannelId,
                    ccb: v & 1 == 1,
                }
            }
            MessageKind::TamReply => {
                need(1)?;
                match body[0] & 0b11 {
                    0b00 => ControlMessage::TamReply { sa, da, ack: false },
                    0b01 => ControlMessage::TamReply { sa, da, ack: true },
                    t => return Err(Error::Malformed(format!("unknown TAM reply tag {t:02b}"))),
                }
            }
            MessageKind::Challoc => {
                let count = *body.first().ok_or_else(|| malformed(kind, bytes.len()))? as usize;
                need(1 + 3 * count)?;
                let pairs = body[1..]
                    .chunks(3)
                    .map(|c| (c[0], u16::from_be_bytes([c[1], c[2]]) as ChannelId))
                    .collect();
                ControlMessage::Challoc { sa, da, pairs }
            }
            MessageKind::Crm => {
                let d = *body.first().ok_or_else(|| malformed(kind, bytes.len()))? as usize;
                need(1 + 2 * d)?;
                let channels = body[1..]
                    .chunks(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as ChannelId)
                    .collect();
                ControlMessage::Crm { sa, da, channels }
            }
            MessageKind::DataAck => {
                need(5)?;
                let pn = u32::from_be_bytes(body[..4].try_into().unwrap());
                ControlMessage::DataAck {
                    sa,
                    da,
                    pn,
                    spn: body[4],
                }
            }
            MessageKind::Cls => {
                need(0)?;
                ControlMessage::Cls { sa, da }
            }
        })
    }
}

fn malformed(kind: MessageKind, len: usize) -> Error {
    Error::Malformed(format!("{kind:?} of {len} bytes"))
}

fn wire_channel(cn: ChannelId) -> Result<u16> {
    if cn > MAX_WIRE_CHANNEL {
        return Err(Error::Malformed(format!(
            "channel {cn} exceeds the 15-bit CN field"
        )));
    }
    Ok(cn as u16)
}

fn count_byte(n: usize) -> Result<u8> {
    u8::try_from(n).map_err(|_| Error::Malformed(format!("{n} entries exceed the count field")))
}

fn put_addr(out: &mut Vec<u8>, id: NodeId, mode: AddrMode) {
    match mode {
        AddrMode::Ipv4 => out.extend_from_slice(&id.to_be_bytes()),
        AddrMode::Ipv6 => out.extend_from_slice(&(id as u128).to_be_bytes()),
    }
}

fn get_addr(b: &[u8]) -> Result<NodeId> {
    match b.len() {
        4 => Ok(u32::from_be_bytes(b.try_into().unwrap())),
        16 => NodeId::try_from(u128::from_be_bytes(b.try_into().unwrap()))
            .map_err(|_| Error::Malformed("address outside the node id range".into())),
        n => Err(Error::Malformed(format!("{n}-byte address"))),
    }
}
