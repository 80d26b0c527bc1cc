//! Divided spectrum, channel occupancy and the per-node channel-usage database.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::topology::NodeId;

/// Channel number, `0 <= id < C`.
pub type ChannelId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Band {
    Primary,
    Secondary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Occupancy {
    Free,
    PuBroadcast,
    SuAllocated(NodeId),
    TempBlocked(NodeId),
}

impl Occupancy {
    /// Whether `self -> next` is one of the permitted occupancy transitions.
    pub fn can_become(self, next: Occupancy) -> bool {
        use Occupancy::*;
        matches!(
            (self, next),
            (Free, TempBlocked(_))
                | (TempBlocked(_), Free)
                | (TempBlocked(_), SuAllocated(_))
                | (SuAllocated(_), Free)
                | (Free, PuBroadcast)
                | (PuBroadcast, Free)
        )
    }
}

/// `NonOverlapping` counts full-width channels; `OverlappingOrthogonal`
/// counts half-width channels, two per non-overlapping channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpectrumMode {
    NonOverlapping,
    OverlappingOrthogonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeCounts {
    pub f_p: u32,
    pub f_s: u32,
    pub f_total: u32,
    pub fraction: f64,
}

#[derive(Debug, Clone)]
pub struct SpectrumModel {
    channels: u32,
    pi: u32,
    mode: SpectrumMode,
    bands: Vec<Band>,
    occupancy: Vec<Occupancy>,
}

impl SpectrumModel {
    /// Builds a spectrum of `channels` channels, `pi` of which are primary
    /// (spread evenly over the index range), with `round(fraction * pi)`
    /// primary channels taken by broadcast licensees.
    pub fn new(
        channels: u32,
        pi: u32,
        pu_broadcast_fraction: f64,
        mode: SpectrumMode,
        seed: u64,
    ) -> Result<Self> {
        if pi > channels {
            return Err(param(format!(
                "pi ({pi}) exceeds channel count ({channels})"
            )));
        }
        if !(0.0..=1.0).contains(&pu_broadcast_fraction) {
            return Err(param(format!(
                "broadcast fraction {pu_broadcast_fraction} outside [0, 1]"
            )));
        }
        let mut bands = vec![Band::Secondary; channels as usize];
        let primaries: Vec<ChannelId> = (0..pi)
            .map(|k| ((k as u64 * channels as u64) / pi as u64) as ChannelId)
            .collect();
        for &c in &primaries {
            bands[c as usize] = Band::Primary;
        }
        let mut occupancy = vec![Occupancy::Free; channels as usize];
        let broadcast = (pu_broadcast_fraction * pi as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in sample(&mut rng, primaries.len(), broadcast.min(primaries.len())) {
            occupancy[primaries[i] as usize] = Occupancy::PuBroadcast;
        }
        Ok(Self {
            channels,
            pi,
            mode,
            bands,
            occupancy,
        })
    }

    pub fn channel_count(&self) -> u32 {
        self.channels
    }

    pub fn primary_count(&self) -> u32 {
        self.pi
    }

    pub fn mode(&self) -> SpectrumMode {
        self.mode
    }

    pub fn band(&self, c: ChannelId) -> Band {
        self.bands[c as usize]
    }

    pub fn occupancy(&self, c: ChannelId) -> Occupancy {
        self.occupancy[c as usize]
    }

    pub fn is_free(&self, c: ChannelId) -> bool {
        self.occupancy[c as usize] == Occupancy::Free
    }

    /// Applies an occupancy transition, rejecting anything outside the
    /// permitted set.
    pub fn transition(&mut self, c: ChannelId, next: Occupancy) -> Result<()> {
        let slot = self
            .occupancy
            .get_mut(c as usize)
            .ok_or_else(|| param(format!("channel {c} out of range")))?;
        if let Occupancy::PuBroadcast = next {
            if self.bands[c as usize] != Band::Primary {
                return Err(Error::Precondition(format!(
                    "PU broadcast on secondary channel {c}"
                )));
            }
        }
        if !slot.can_become(next) {
            return Err(Error::Precondition(format!(
                "channel {c}: illegal transition {slot:?} -> {next:?}"
            )));
        }
        *slot = next;
        Ok(())
    }

    /// Counts channels that are neither in `blocked` nor occupied, by band.
    pub fn free_counts(&self, blocked: &BTreeSet<ChannelId>) -> FreeCounts {
        let (mut f_p, mut f_s) = (0, 0);
        for c in 0..self.channels {
            if self.occupancy[c as usize] != Occupancy::Free || blocked.contains(&c) {
                continue;
            }
            match self.bands[c as usize] {
                Band::Primary => f_p += 1,
                Band::Secondary => f_s += 1,
            }
        }
        let f_total = f_p + f_s;
        let fraction = if self.channels == 0 {
            0.0
        } else {
            f_total as f64 / self.channels as f64
        };
        FreeCounts {
            f_p,
            f_s,
            f_total,
            fraction,
        }
    }

    /// Channels of `band` that are currently `Free`.
    pub fn free_in_band(&self, band: Band) -> Vec<ChannelId> {
        (0..self.channels)
            .filter(|&c| self.bands[c as usize] == band && self.is_free(c))
            .collect()
    }

    /// Draws a free-channel mask with exactly `f_p` free primary and `f_s`
    /// free secondary channels, chosen uniformly among the channels that are
    /// `Free` in this model. Everything else is treated as blocked.
    pub fn sample_free_mask<R: Rng + ?Sized>(
        &self,
        f_p: u32,
        f_s: u32,
        rng: &mut R,
    ) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.channels as usize];
        for (band, want) in [(Band::Primary, f_p), (Band::Secondary, f_s)] {
            let pool = self.free_in_band(band);
            if want as usize > pool.len() {
                return Err(param(format!(
                    "{want} free {band:?} channels requested, only {} available",
                    pool.len()
                )));
            }
            for i in sample(rng, pool.len(), want as usize) {
                mask[pool[i] as usize] = true;
            }
        }
        Ok(mask)
    }

    /// Splits a total free count across the bands in proportion to the
    /// channels each band still has available.
    pub fn split_free(&self, f_total: u32) -> (u32, u32) {
        let avail_p = self.free_in_band(Band::Primary).len() as u32;
        let avail_s = self.free_in_band(Band::Secondary).len() as u32;
        if avail_p + avail_s == 0 {
            return (0, 0);
        }
        let f_p = ((f_total as f64 * avail_p as f64) / (avail_p + avail_s) as f64).round() as u32;
        let f_p = f_p.min(avail_p).max(f_total.saturating_sub(avail_s));
        (f_p, f_total - f_p)
    }

    /// Writes a snapshot as CSV with columns `channel,band,status,owner`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "channel,band,status,owner")?;
        for c in 0..self.channels {
            let band = match self.bands[c as usize] {
                Band::Primary => "primary",
                Band::Secondary => "secondary",
            };
            let (status, owner) = match self.occupancy[c as usize] {
                Occupancy::Free => ("free", String::new()),
                Occupancy::PuBroadcast => ("pu_broadcast", String::new()),
                Occupancy::SuAllocated(n) => ("su_allocated", n.to_string()),
                Occupancy::TempBlocked(n) => ("temp_blocked", n.to_string()),
            };
            writeln!(out, "{c},{band},{status},{owner}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UsageAction<V> {
    Insert(ChannelId, V),
    Delete(ChannelId),
    Find(ChannelId),
}

/// Ordered channel-usage database keyed by channel number. Backed by a
/// B-tree, so lookup, insertion and deletion are logarithmic in its size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageDb<V = NodeId> {
    entries: BTreeMap<ChannelId, V>,
}

impl<V> Default for UsageDb<V> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<V: Copy + fmt::Debug> UsageDb<V> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one action. `Insert` and `Delete` return the affected value;
    /// `Find` returns the owner if present.
    pub fn apply(&mut self, action: UsageAction<V>) -> Result<Option<V>> {
        match action {
            UsageAction::Insert(c, v) => self.insert(c, v).map(|()| Some(v)),
            UsageAction::Delete(c) => self.delete(c).map(Some),
            UsageAction::Find(c) => Ok(self.find(c)),
        }
    }

    pub fn insert(&mut self, c: ChannelId, v: V) -> Result<()> {
        if let Some(old) = self.entries.get(&c) {
            return Err(Error::Precondition(format!(
                "channel {c} already recorded for {old:?}"
            )));
        }
        self.entries.insert(c, v);
        Ok(())
    }

    pub fn delete(&mut self, c: ChannelId) -> Result<V> {
        self.entries
            .remove(&c)
            .ok_or_else(|| Error::Precondition(format!("channel {c} not recorded")))
    }

    pub fn find(&self, c: ChannelId) -> Option<V> {
        self.entries.get(&c).copied()
    }

    pub fn replace(&mut self, c: ChannelId, v: V) -> Option<V> {
        self.entries.insert(c, v)
    }

    pub fn contains(&self, c: ChannelId) -> bool {
        self.entries.contains_key(&c)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ChannelId, V)> + '_ {
        self.entries.iter().map(|(&c, &v)| (c, v))
    }

    /// Removes every entry matching `pred`, returning the removed channels.
    pub fn remove_where(&mut self, mut pred: impl FnMut(ChannelId, V) -> bool) -> Vec<ChannelId> {
        let gone: Vec<ChannelId> = self
            .entries
            .iter()
            .filter(|(&c, &v)| pred(c, v))
            .map(|(&c, _)| c)
            .collect();
        for c in &gone {
            self.entries.remove(c);
        }
        gone
    }
}
