//! Decomposition of a sampled frame into `n` interleaved bit-sets, one per
//! channel, and the sub-packet framing used on the data channels.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

/// One frame of `samples` samples at `bits_per_sample` bits each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFrame {
    pub bits: Vec<bool>,
    pub samples: usize,
    pub bits_per_sample: usize,
    /// Sampling interval in seconds.
    pub tau: f64,
}

impl SampleFrame {
    pub fn new(bits: Vec<bool>, samples: usize, bits_per_sample: usize, tau: f64) -> Result<Self> {
        if bits.len() != samples * bits_per_sample {
            return Err(param(format!(
                "{} bits do not match {samples} samples of {bits_per_sample} bits",
                bits.len()
            )));
        }
        Ok(Self {
            bits,
            samples,
            bits_per_sample,
            tau,
        })
    }

    /// Frame of raw bits treated as one-bit samples.
    pub fn from_bits(bits: Vec<bool>, tau: f64) -> Self {
        let samples = bits.len();
        Self {
            bits,
            samples,
            bits_per_sample: 1,
            tau,
        }
    }

    pub fn frame_duration(&self) -> f64 {
        self.samples as f64 * self.tau
    }
}

/// Bit-set `i` holds the bits whose index is congruent to `i` modulo `n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitSet {
    pub indices: Vec<usize>,
    pub bits: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitSetPartition {
    pub n: usize,
    pub total_bits: usize,
    pub sets: Vec<BitSet>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubPacket {
    pub pn: u32,
    pub spn: u8,
    pub payload: Vec<bool>,
}

/// Header bytes of a serialized sub-packet: PN(4) SPN(1) length(2).
pub const SUBPACKET_HEADER_BYTES: usize = 7;

pub fn split(frame: &SampleFrame, n: usize) -> Result<BitSetPartition> {
    if n == 0 {
        return Err(param("bit-set count must be at least 1"));
    }
    let mut sets: Vec<BitSet> = (0..n)
        .map(|_| BitSet {
            indices: Vec::new(),
            bits: Vec::new(),
        })
        .collect();
    for (j, &b) in frame.bits.iter().enumerate() {
        let set = &mut sets[j % n];
        set.indices.push(j);
        set.bits.push(b);
    }
    Ok(BitSetPartition {
        n,
        total_bits: frame.bits.len(),
        sets,
    })
}

pub fn assemble(partition: &BitSetPartition, pn: u32) -> Vec<SubPacket> {
    partition
        .sets
        .iter()
        .enumerate()
        .map(|(i, s)| SubPacket {
            pn,
            spn: i as u8,
            payload: s.bits.clone(),
        })
        .collect()
}

/// Interleaves the payloads of one frame's `n` sub-packets back into the
/// original bit order. Sub-packets may arrive in any order.
pub fn reconstruct(n: usize, subpackets: &[SubPacket]) -> Result<Vec<bool>> {
    if n == 0 {
        return Err(param("bit-set count must be at least 1"));
    }
    let mut slots: Vec<Option<&SubPacket>> = vec![None; n];
    let pn = subpackets.first().map(|s| s.pn);
    for sp in subpackets {
        if Some(sp.pn) != pn {
            return Err(param(format!("mixed packet numbers {pn:?} and {}", sp.pn)));
        }
        let slot = slots
            .get_mut(sp.spn as usize)
            .ok_or_else(|| param(format!("SPN {} outside 0..{n}", sp.spn)))?;
        if slot.is_some() {
            return Err(param(format!("duplicate SPN {}", sp.spn)));
        }
        *slot = Some(sp);
    }
    let missing: Vec<u8> = (0..n)
        .filter(|&i| slots[i].is_none())
        .map(|i| i as u8)
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteFrame { missing });
    }
    let parts: Vec<&SubPacket> = slots.into_iter().flatten().collect();
    let total: usize = parts.iter().map(|p| p.payload.len()).sum();
    for (i, p) in parts.iter().enumerate() {
        let expected = total / n + usize::from(i < total % n);
        if p.payload.len() != expected {
            return Err(param(format!(
                "SPN {i} carries {} bits, expected {expected}",
                p.payload.len()
            )));
        }
    }
    Ok((0..total).map(|j| parts[j % n].payload[j / n]).collect())
}

impl SubPacket {
    /// Serializes as PN(4) SPN(1) length-in-bits(2) followed by the payload
    /// packed most-significant bit first.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let len = u16::try_from(self.payload.len()).map_err(|_| {
            param(format!(
                "payload of {} bits exceeds 65535",
                self.payload.len()
            ))
        })?;
        let mut out = Vec::with_capacity(SUBPACKET_HEADER_BYTES + self.payload.len().div_ceil(8));
        out.extend_from_slice(&self.pn.to_be_bytes());
        out.push(self.spn);
        out.extend_from_slice(&len.to_be_bytes());
        for chunk in self.payload.chunks(8) {
            let mut byte = 0u8;
            for (k, &b) in chunk.iter().enumerate() {
                byte |= (b as u8) << (7 - k);
            }
            out.push(byte);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < SUBPACKET_HEADER_BYTES {
            return Err(Error::Malformed(format!(
                "sub-packet of {} bytes",
                bytes.len()
            )));
        }
        let pn = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let spn = bytes[4];
        let len = u16::from_be_bytes([bytes[5], bytes[6]]) as usize;
        let body = &bytes[SUBPACKET_HEADER_BYTES..];
        if body.len() != len.div_ceil(8) {
            return Err(Error::Malformed(format!(
                "payload of {} bytes for {len} bits",
                body.len()
            )));
        }
        let payload = (0..len)
            .map(|j| body[j / 8] >> (7 - j % 8) & 1 == 1)
            .collect();
        Ok(Self { pn, spn, payload })
    }
}

/// Whether packet number `a` comes before `b` under 32-bit wrapping, judged
/// within a half-range window.
pub fn pn_precedes(a: u32, b: u32) -> bool {
    a != b && b.wrapping_sub(a) < 1 << 31
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(n: usize) -> Vec<bool> {
        (0..n).map(|i| (i * 7 + 3) % 5 < 2).collect()
    }

    #[test]
    fn split_examples() {
        let p = split(&SampleFrame::from_bits(bits(16), 1e-3), 8).unwrap();
        assert_eq!(p.sets[0].indices, vec![0, 8]);
        assert_eq!(p.sets[7].indices, vec![7, 15]);
        let one = split(&SampleFrame::from_bits(bits(16), 1e-3), 1).unwrap();
        assert_eq!(one.sets[0].indices, (0..16).collect::<Vec<_>>());
        let five = split(&SampleFrame::from_bits(bits(24), 1e-3), 5).unwrap();
        let sizes: Vec<usize> = five.sets.iter().map(|s| s.indices.len()).collect();
        assert_eq!(sizes, vec![5, 5, 5, 5, 4]);
        assert!(split(&SampleFrame::from_bits(bits(4), 1e-3), 0).is_err());
    }

    #[test]
    fn assemble_examples() {
        let p = split(&SampleFrame::from_bits(bits(40), 1e-3), 8).unwrap();
        let sps = assemble(&p, 0);
        assert_eq!(
            sps.iter().map(|s| s.spn).collect::<Vec<_>>(),
            (0..8).collect::<Vec<u8>>()
        );
        assert_eq!(sps.iter().map(|s| s.payload.len()).sum::<usize>(), 40);
        let empty = assemble(
            &split(&SampleFrame::from_bits(Vec::new(), 1e-3), 3).unwrap(),
            9,
        );
        assert_eq!(empty.len(), 3);
        assert!(empty.iter().all(|s| s.payload.is_empty()));
        assert_eq!(reconstruct(3, &empty).unwrap(), Vec::<bool>::new());
    }

    #[test]
    fn reconstruct_out_of_order_and_missing() {
        let original = bits(37);
        let mut sps = assemble(
            &split(&SampleFrame::from_bits(original.clone(), 1e-3), 6).unwrap(),
            4,
        );
        sps.reverse();
        assert_eq!(reconstruct(6, &sps).unwrap(), original);
        sps.retain(|s| s.spn != 2);
        assert_eq!(
            reconstruct(6, &sps),
            Err(Error::IncompleteFrame { missing: vec![2] })
        );
    }

    #[test]
    fn wire_round_trip() {
        let sp = SubPacket {
            pn: 0xDEAD_BEEF,
            spn: 3,
            payload: bits(13),
        };
        let bytes = sp.encode().unwrap();
        assert_eq!(bytes.len(), 7 + 2);
        assert_eq!(&bytes[..7], &[0xDE, 0xAD, 0xBE, 0xEF, 3, 0, 13]);
        assert_eq!(SubPacket::decode(&bytes).unwrap(), sp);
        assert!(SubPacket::decode(&bytes[..8]).is_err());
    }

    #[test]
    fn packet_number_wrap() {
        assert!(pn_precedes(u32::MAX, 0));
        assert!(pn_precedes(5, 6));
        assert!(!pn_precedes(6, 5));
        assert!(!pn_precedes(7, 7));
    }

    #[test]
    fn sample_frame_shape() {
        assert!(SampleFrame::new(bits(12), 4, 3, 1e-4).is_ok());
        assert!(SampleFrame::new(bits(11), 4, 3, 1e-4).is_err());
        let f = SampleFrame::new(bits(12), 4, 3, 0.5).unwrap();
        assert_eq!(f.frame_duration(), 2.0);
    }
}
