//! Static routing schedules for the output-multiplexed crossbar.
//!
//! Every cycle each source block broadcasts at most one activation and each
//! destination PE latches at most one broadcast line, so a cycle is a
//! partial matching between sources and destinations. The scheduler serves
//! the heaviest remaining (source, dest) queues first with a rotating
//! priority among ties, then completes the cycle to a maximum matching with
//! augmenting paths. Maximum per-cycle matchings make the schedule length
//! meet the lower bound `L* = max(max sends, max receives)` on balanced
//! demands: a balanced demand is a regular bipartite multigraph, removing a
//! perfect matching keeps it regular, so induction gives exactly `L*` cycles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One delivery: source block `source` sends activation `activation` to
/// destination PE `dest`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Transfer {
    pub source: u32,
    pub dest: u32,
    pub activation: u32,
}

/// The set of deliveries a layer requires. Triples must be unique; within
/// one (source, dest) pair their order is the order the destination PE
/// consumes them (input-latch fill order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDemand {
    pub num_sources: usize,
    pub num_dests: usize,
    pub transfers: Vec<Transfer>,
}

impl RoutingDemand {
    pub fn new(num_sources: usize, num_dests: usize, transfers: Vec<Transfer>) -> Result<Self> {
        let d = RoutingDemand {
            num_sources,
            num_dests,
            transfers,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sources == 0 || self.num_dests == 0 {
            return Err(Error::Demand("source and dest counts must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.transfers {
            if t.source as usize >= self.num_sources {
                return Err(Error::Demand(format!(
                    "source {} out of range (num_sources {})",
                    t.source, self.num_sources
                )));
            }
            if t.dest as usize >= self.num_dests {
                return Err(Error::Demand(format!(
                    "dest {} out of range (num_dests {})",
                    t.dest, self.num_dests
                )));
            }
            if !seen.insert(*t) {
                return Err(Error::Demand(format!(
                    "duplicate transfer ({}, {}, {})",
                    t.source, t.dest, t.activation
                )));
            }
        }
        Ok(())
    }

    /// Schedule length lower bound: no source can send more than one value
    /// per cycle and no destination can receive more than one.
    pub fn lower_bound(&self) -> u64 {
        let mut sends = vec![0u64; self.num_sources];
        let mut recvs = vec![0u64; self.num_dests];
        for t in &self.transfers {
            sends[t.source as usize] += 1;
            recvs[t.dest as usize] += 1;
        }
        sends
            .iter()
            .chain(recvs.iter())
            .copied()
            .max()
            .unwrap_or(0)
    }
}

/// A per-cycle list of crossbar transfers covering a demand exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingSchedule {
    pub num_sources: usize,
    pub num_dests: usize,
    pub cycles: Vec<Vec<Transfer>>,
}

impl RoutingSchedule {
    pub fn len(&self) -> u64 {
        self.cycles.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }
}

/// Build a conflict-free static schedule for `demand`.
///
/// Deterministic: identical demands produce identical schedules.
pub fn build_schedule(demand: &RoutingDemand) -> RoutingSchedule {
    let ns = demand.num_sources;
    let nd = demand.num_dests;

    // Per-pair FIFO queues preserving consumption order.
    let mut queues: Vec<Vec<std::collections::VecDeque<u32>>> =
        vec![vec![std::collections::VecDeque::new(); nd]; ns];
    let mut pending = vec![vec![0u32; nd]; ns];
    let mut send_left = vec![0u64; ns];
    let mut recv_left = vec![0u64; nd];
    for t in &demand.transfers {
        queues[t.source as usize][t.dest as usize].push_back(t.activation);
        pending[t.source as usize][t.dest as usize] += 1;
        send_left[t.source as usize] += 1;
        recv_left[t.dest as usize] += 1;
    }
    let mut remaining: u64 = demand.transfers.len() as u64;

    let mut cycles = Vec::new();
    let mut cycle_idx: usize = 0;
    // match_of[d] = Some(s) when dest d latches source s this cycle.
    let mut match_of: Vec<Option<usize>> = vec![None; nd];
    let mut source_used: Vec<bool> = vec![false; ns];

    while remaining > 0 {
        for m in match_of.iter_mut() {
            *m = None;
        }
        for s in source_used.iter_mut() {
            *s = false;
        }

        // Greedy pass: sources in descending remaining-send order, rotating
        // priority among equal counts; each picks the neediest free dest.
        let rot = |i: usize, n: usize| (i + n - cycle_idx % n) % n;
        let mut src_order: Vec<usize> = (0..ns).filter(|&s| send_left[s] > 0).collect();
        src_order.sort_by_key(|&s| (std::cmp::Reverse(send_left[s]), rot(s, ns)));
        for &s in &src_order {
            let mut best: Option<usize> = None;
            for d in 0..nd {
                if pending[s][d] == 0 || match_of[d].is_some() {
                    continue;
                }
                best = match best {
                    None => Some(d),
                    Some(b) => {
                        let key = (recv_left[d], std::cmp::Reverse(rot(d, nd)));
                        let bkey = (recv_left[b], std::cmp::Reverse(rot(b, nd)));
                        if key > bkey {
                            Some(d)
                        } else {
                            Some(b)
                        }
                    }
                };
            }
            if let Some(d) = best {
                match_of[d] = Some(s);
                source_used[s] = true;
            }
        }

        // Completion pass: augmenting paths from every still-idle source so
        // the cycle carries a maximum matching.
        for s in 0..ns {
            if source_used[s] || send_left[s] == 0 {
                continue;
            }
            let mut visited = vec![false; nd];
            if augment(s, &pending, &mut match_of, &mut visited) {
                source_used[s] = true;
                // Reassignment may have bumped sources around; recompute.
                for f in source_used.iter_mut() {
                    *f = false;
                }
                for d in 0..nd {
                    if let Some(ms) = match_of[d] {
                        source_used[ms] = true;
                    }
                }
            }
        }

        let mut cycle = Vec::new();
        for d in 0..nd {
            if let Some(s) = match_of[d] {
                let act = queues[s][d].pop_front().expect("queue tracked by pending");
                pending[s][d] -= 1;
                send_left[s] -= 1;
                recv_left[d] -= 1;
                remaining -= 1;
                cycle.push(Transfer {
                    source: s as u32,
                    dest: d as u32,
                    activation: act,
                });
            }
        }
        debug_assert!(!cycle.is_empty(), "a nonempty demand always admits a transfer");
        cycle.sort();
        cycles.push(cycle);
        cycle_idx += 1;
    }

    RoutingSchedule {
        num_sources: ns,
        num_dests: nd,
        cycles,
    }
}

/// Kuhn augmenting step: try to match source `s` to some dest, displacing
/// already-matched sources along alternating paths.
fn augment(
    s: usize,
    pending: &[Vec<u32>],
    match_of: &mut Vec<Option<usize>>,
    visited: &mut [bool],
) -> bool {
    for d in 0..match_of.len() {
        if pending[s][d] == 0 || visited[d] {
            continue;
        }
        visited[d] = true;
        match match_of[d] {
            None => {
                match_of[d] = Some(s);
                return true;
            }
            Some(other) => {
                if augment(other, pending, match_of, visited) {
                    match_of[d] = Some(s);
                    return true;
                }
            }
        }
    }
    false
}

/// A violation found by [`verify_schedule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub cycle: Option<u64>,
    pub message: String,
}

/// Independently re-check a schedule against its demand by exhaustive scan:
/// per-cycle crossbar legality (each source and each destination at most
/// once) and exact demand coverage (every triple delivered exactly once).
/// Returns all violations found, empty when the schedule is valid.
pub fn verify_schedule(demand: &RoutingDemand, sched: &RoutingSchedule) -> Vec<Violation> {
    let mut violations = Vec::new();

    for (i, cycle) in sched.cycles.iter().enumerate() {
        // Pairwise scans, deliberately naive.
        for a in 0..cycle.len() {
            for b in (a + 1)..cycle.len() {
                if cycle[a].source == cycle[b].source {
                    violations.push(Violation {
                        cycle: Some(i as u64),
                        message: format!(
                            "source {} broadcasts twice in one cycle",
                            cycle[a].source
                        ),
                    });
                }
                if cycle[a].dest == cycle[b].dest {
                    violations.push(Violation {
                        cycle: Some(i as u64),
                        message: format!("dest {} latches twice in one cycle", cycle[a].dest),
                    });
                }
            }
        }
    }

    // Exact coverage: sort both sides and walk them together.
    let mut want: Vec<Transfer> = demand.transfers.clone();
    want.sort();
    let mut got: Vec<(Transfer, u64)> = Vec::new();
    for (i, cycle) in sched.cycles.iter().enumerate() {
        for t in cycle {
            got.push((*t, i as u64));
        }
    }
    got.sort();
    for w in got.windows(2) {
        if w[0].0 == w[1].0 {
            violations.push(Violation {
                cycle: Some(w[1].1),
                message: format!(
                    "transfer ({}, {}, {}) delivered twice",
                    w[0].0.source, w[0].0.dest, w[0].0.activation
                ),
            });
        }
    }
    let got_set: Vec<Transfer> = got.iter().map(|(t, _)| *t).collect();
    for t in &want {
        if got_set.binary_search(t).is_err() {
            violations.push(Violation {
                cycle: None,
                message: format!(
                    "transfer ({}, {}, {}) undelivered",
                    t.source, t.dest, t.activation
                ),
            });
        }
    }
    for (t, cyc) in &got {
        if want.binary_search(t).is_err() {
            violations.push(Violation {
                cycle: Some(*cyc),
                message: format!(
                    "transfer ({}, {}, {}) not in demand",
                    t.source, t.dest, t.activation
                ),
            });
        }
    }

    violations
}

/// Per-PE, per-cycle select codes for the output-multiplexed crossbar.
///
/// An entry of `None` is an idle slot; the binary dump encodes it as the
/// reserved sentinel `num_sources`. Hardware select SRAM width is
/// `ceil(log2(num_sources))` bits per entry (idle slots are dead entries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectTable {
    pub num_sources: usize,
    /// `entries[pe][cycle]`.
    pub entries: Vec<Vec<Option<u32>>>,
}

impl SelectTable {
    /// Bits per select entry.
    pub fn width_bits(&self) -> u32 {
        crate::costmodel::ceil_log2(self.num_sources as u64)
    }

    pub fn num_cycles(&self) -> u64 {
        self.entries.first().map(|e| e.len() as u64).unwrap_or(0)
    }

    /// Total select SRAM storage: dests * cycles * width.
    pub fn storage_bits(&self) -> u64 {
        self.entries.len() as u64 * self.num_cycles() * self.width_bits() as u64
    }

    pub fn idle_count(&self) -> u64 {
        self.entries
            .iter()
            .flat_map(|row| row.iter())
            .filter(|e| e.is_none())
            .count() as u64
    }
}

/// Derive the select table from a schedule.
pub fn emit_selects(sched: &RoutingSchedule, num_sources: usize) -> SelectTable {
    let cycles = sched.cycles.len();
    let mut entries = vec![vec![None; cycles]; sched.num_dests];
    for (i, cycle) in sched.cycles.iter().enumerate() {
        for t in cycle {
            entries[t.dest as usize][i] = Some(t.source);
        }
    }
    SelectTable {
        num_sources,
        entries,
    }
}
