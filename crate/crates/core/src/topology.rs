//! Random node placement over a square field and neighbor queries.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::spectrum::{ChannelId, SpectrumModel};

pub type NodeId = u32;

/// Side length of the square deployment field in meters.
pub const FIELD_SIDE: f64 = 100.0;

/// Node positions plus a precomputed 1-hop adjacency built through a uniform
/// grid whose cell edge equals the range.
#[derive(Debug, Clone)]
pub struct Topology {
    positions: Vec<(f64, f64)>,
    range: f64,
    adjacency: Vec<Vec<NodeId>>,
}

impl Topology {
    /// Places `n_nodes` nodes uniformly at random over the field.
    pub fn generate(n_nodes: usize, range: f64, seed: u64) -> Result<Self> {
        if n_nodes == 0 {
            return Err(param("topology needs at least one node"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = (0..n_nodes)
            .map(|_| {
                (
                    rng.gen_range(0.0..=FIELD_SIDE),
                    rng.gen_range(0.0..=FIELD_SIDE),
                )
            })
            .collect();
        Self::from_positions(positions, range)
    }

    pub fn from_positions(positions: Vec<(f64, f64)>, range: f64) -> Result<Self> {
        if !(range > 0.0) {
            return Err(param(format!("range must be positive, got {range}")));
        }
        if let Some(p) = positions
            .iter()
            .find(|(x, y)| !(0.0..=FIELD_SIDE).contains(x) || !(0.0..=FIELD_SIDE).contains(y))
        {
            return Err(param(format!("position {p:?} outside the field")));
        }
        let adjacency = build_adjacency(&positions, range);
        Ok(Self {
            positions,
            range,
            adjacency,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn position(&self, u: NodeId) -> (f64, f64) {
        self.positions[u as usize]
    }

    pub fn distance(&self, u: NodeId, v: NodeId) -> f64 {
        let (a, b) = (self.positions[u as usize], self.positions[v as usize]);
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }

    /// Sorted 1-hop neighbors of `u` (distance ≤ range, excluding `u`).
    pub fn one_hop(&self, u: NodeId) -> &[NodeId] {
        &self.adjacency[u as usize]
    }

    pub fn are_neighbors(&self, u: NodeId, v: NodeId) -> bool {
        self.adjacency[u as usize].binary_search(&v).is_ok()
    }

    /// Neighbors within `hops` (1 or 2) hops of `u`, excluding `u`.
    pub fn neighbors(&self, u: NodeId, hops: u8) -> Result<BTreeSet<NodeId>> {
        if u as usize >= self.positions.len() {
            return Err(param(format!("unknown node {u}")));
        }
        let mut out: BTreeSet<NodeId> = self.one_hop(u).iter().copied().collect();
        match hops {
            1 => {}
            2 => {
                for &v in self.one_hop(u) {
                    out.extend(self.one_hop(v).iter().copied());
                }
                out.remove(&u);
            }
            _ => return Err(param(format!("hops must be 1 or 2, got {hops}"))),
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "node,x,y")?;
        for (i, (x, y)) in self.positions.iter().enumerate() {
            writeln!(out, "{i},{x},{y}")?;
        }
        Ok(())
    }

    /// Loads a topology written by [`Topology::write_csv`]. Node ids must be
    /// `0..n` in order.
    pub fn read_csv<R: BufRead>(input: R, range: f64) -> Result<Self> {
        let mut positions = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| param(e.to_string()))?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || param(format!("line {}: malformed record {line:?}", lineno + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let id: usize = fields[0].parse().map_err(|_| bad())?;
            if id != positions.len() {
                return Err(param(format!(
                    "line {}: node ids must be sequential",
                    lineno + 1
                )));
            }
            let x: f64 = fields[1].parse().map_err(|_| bad())?;
            let y: f64 = fields[2].parse().map_err(|_| bad())?;
            positions.push((x, y));
        }
        Self::from_positions(positions, range)
    }
}

fn build_adjacency(positions: &[(f64, f64)], range: f64) -> Vec<Vec<NodeId>> {
    let cells = ((FIELD_SIDE / range).floor() as i64).max(1) + 1;
    let cell_of = |(x, y): (f64, f64)| {
        (
            ((x / range) as i64).min(cells - 1),
            ((y / range) as i64).min(cells - 1),
        )
    };
    let mut grid: BTreeMap<(i64, i64), Vec<NodeId>> = BTreeMap::new();
    for (i, &p) in positions.iter().enumerate() {
        grid.entry(cell_of(p)).or_default().push(i as NodeId);
    }
    let r2 = range * range;
    positions
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let (cx, cy) = cell_of(p);
            let mut adj = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else {
                        continue;
                    };
                    for &j in bucket {
                        if j as usize == i {
                            continue;
                        }
                        let q = positions[j as usize];
                        if (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) <= r2 {
                            adj.push(j);
                        }
                    }
                }
            }
            adj.sort_unstable();
            adj
        })
        .collect()
}

/// Demand mix: `(DN, proportion)` pairs summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficMix(pub Vec<(u32, f64)>);

impl Default for TrafficMix {
    fn default() -> Self {
        Self(vec![(1, 0.50), (2, 0.20), (4, 0.15), (6, 0.10), (8, 0.05)])
    }
}

impl TrafficMix {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.0.iter().map(|&(_, p)| p).sum();
        if self.0.is_empty()
            || (total - 1.0).abs() > 1e-9
            || self.0.iter().any(|&(dn, p)| dn == 0 || p < 0.0)
        {
            return Err(param(format!(
                "traffic mix {:?} must be non-empty with proportions summing to 1",
                self.0
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let mut u: f64 = rng.gen();
        for &(dn, p) in &self.0 {
            if u < p {
                return dn;
            }
            u -= p;
        }
        self.0.last().map(|&(dn, _)| dn).unwrap_or(1)
    }

    pub fn mean_demand(&self) -> f64 {
        self.0.iter().map(|&(dn, p)| dn as f64 * p).sum()
    }
}

/// Channels currently held by each active node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficAssignment {
    pub held: BTreeMap<NodeId, Vec<ChannelId>>,
}

impl TrafficAssignment {
    /// Activates each node with probability `activity`; an active node holds
    /// DN distinct channels (DN drawn from `mix`) taken uniformly from the
    /// channels that are not broadcast-occupied.
    pub fn generate<R: Rng + ?Sized>(
        topology: &Topology,
        spectrum: &SpectrumModel,
        activity: f64,
        mix: &TrafficMix,
        rng: &mut R,
    ) -> Self {
        let pool: Vec<ChannelId> = (0..spectrum.channel_count())
            .filter(|&c| spectrum.is_free(c))
            .collect();
        let mut held = BTreeMap::new();
        for u in 0..topology.len() as NodeId {
            if !rng.gen_bool(activity.clamp(0.0, 1.0)) {
                continue;
            }
            let dn = (mix.sample(rng) as usize).min(pool.len());
            let chans = sample(rng, pool.len(), dn)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            held.insert(u, chans);
        }
        Self { held }
    }
}

/// Union of the channel sets held by the 2-distance neighbors of `u`.
pub fn blocked_by_2dist(
    topology: &Topology,
    spectrum: &SpectrumModel,
    u: NodeId,
    load: &TrafficAssignment,
) -> Result<BTreeSet<ChannelId>> {
    let mut out = BTreeSet::new();
    for v in topology.neighbors(u, 2)? {
        if let Some(chans) = load.held.get(&v) {
            out.extend(
                chans
                    .iter()
                    .copied()
                    .filter(|&c| c < spectrum.channel_count()),
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::SpectrumMode;

    #[test]
    fn hidden_node_line() {
        let t = Topology::from_positions(vec![(0.0, 0.0), (8.0, 0.0), (16.0, 0.0)], 10.0).unwrap();
        assert_eq!(t.neighbors(0, 1).unwrap(), BTreeSet::from([1]));
        assert_eq!(t.neighbors(0, 2).unwrap(), BTreeSet::from([1, 2]));
    }

    #[test]
    fn boundary_is_inclusive() {
        let t = Topology::from_positions(vec![(10.0, 10.0), (35.0, 10.0)], 25.0).unwrap();
        assert!(t.are_neighbors(0, 1) && t.are_neighbors(1, 0));
    }

    #[test]
    fn single_node_and_determinism() {
        let t = Topology::generate(1, 25.0, 3).unwrap();
        assert!(t.neighbors(0, 2).unwrap().is_empty());
        let a = Topology::generate(700, 25.0, 9).unwrap();
        let b = Topology::generate(700, 25.0, 9).unwrap();
        assert_eq!(a.positions, b.positions);
        assert!(a
            .positions
            .iter()
            .all(|&(x, y)| (0.0..=100.0).contains(&x) && (0.0..=100.0).contains(&y)));
        assert!(t.neighbors(5, 1).is_err());
        assert!(Topology::generate(0, 25.0, 0).is_err());
    }

    #[test]
    fn blocked_examples() {
        let t = Topology::from_positions(vec![(0.0, 0.0), (5.0, 0.0), (50.0, 50.0)], 10.0).unwrap();
        let s = SpectrumModel::new(10, 0, 0.0, SpectrumMode::NonOverlapping, 0).unwrap();
        let mut load = TrafficAssignment::default();
        assert!(blocked_by_2dist(&t, &s, 0, &load).unwrap().is_empty());
        load.held.insert(1, vec![3, 4]);
        load.held.insert(2, vec![7]);
        assert_eq!(
            blocked_by_2dist(&t, &s, 0, &load).unwrap(),
            BTreeSet::from([3, 4])
        );
    }

    #[test]
    fn csv_round_trip() {
        let t = Topology::generate(20, 25.0, 4).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = Topology::read_csv(buf.as_slice(), 25.0).unwrap();
        assert_eq!(back.positions, t.positions);
    }

    #[test]
    fn mix_sampling() {
        let mix = TrafficMix::default();
        mix.validate().unwrap();
        assert!((mix.mean_demand() - 2.5).abs() < 1e-12);
        assert!(TrafficMix(vec![(1, 0.5)]).validate().is_err());
    }
}
