//! Agent orderings (chain, binary tree, star, custom DAGs), level queries,
//! and the per-round communication cost model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Chain,
    #[serde(alias = "tree")]
    BinaryTree,
    Star,
    Custom,
}

impl std::fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            TopologyKind::Chain => "chain",
            TopologyKind::BinaryTree => "tree",
            TopologyKind::Star => "star",
            TopologyKind::Custom => "custom",
        };
        f.write_str(name)
    }
}

/// Smallest `p` with `2^p >= k`.
fn ceil_log2(k: usize) -> usize {
    let mut power = 0;
    let mut reach = 1usize;
    while reach < k {
        reach <<= 1;
        power += 1;
    }
    power
}

/// An immutable agent ordering. Levels partition the agents; an agent's
/// successors sit exactly one level below it in breadth-first order.
#[derive(Debug, Clone)]
pub struct Topology {
    kind: TopologyKind,
    num_agents: usize,
    successors: Vec<Vec<usize>>,
    predecessors: Vec<Vec<usize>>,
    level_of: Vec<usize>,
    levels: Vec<Vec<usize>>,
}

impl Topology {
    /// Build one of the canonical orderings over agents `0..k`.
    pub fn build(kind: TopologyKind, k: usize) -> Result<Topology> {
        if k == 0 {
            return Err(Error::Topology("at least one agent is required".into()));
        }
        match kind {
            TopologyKind::Chain => {
                let successors: Vec<Vec<usize>> = (0..k)
                    .map(|a| if a + 1 < k { vec![a + 1] } else { vec![] })
                    .collect();
                Self::assemble(TopologyKind::Chain, k, successors)
            }
            TopologyKind::Star => Self::assemble(TopologyKind::Star, k, vec![Vec::new(); k]),
            TopologyKind::BinaryTree => {
                if k < 2 {
                    return Err(Error::Topology("a tree needs at least 2 agents".into()));
                }
                // Heap shape: agent a's children are 2a+1 and 2a+2.
                let successors: Vec<Vec<usize>> = (0..k)
                    .map(|a| {
                        [2 * a + 1, 2 * a + 2]
                            .into_iter()
                            .filter(|&c| c < k)
                            .collect()
                    })
                    .collect();
                Self::assemble(TopologyKind::BinaryTree, k, successors)
            }
            TopologyKind::Custom => Err(Error::Topology(
                "custom topologies are built from an edge list".into(),
            )),
        }
    }

    /// Build a custom DAG from `(parent, child)` edges. Agent count is
    /// inferred from the largest id; levels come from longest root paths.
    pub fn from_edges(edges: &[(usize, usize)]) -> Result<Topology> {
        if edges.is_empty() {
            return Err(Error::Topology("edge list is empty".into()));
        }
        let k = edges.iter().map(|&(p, c)| p.max(c)).max().unwrap() + 1;
        let mut successors = vec![Vec::new(); k];
        for &(parent, child) in edges {
            if parent == child {
                return Err(Error::Topology(format!("self-loop on agent {parent}")));
            }
            if !successors[parent].contains(&child) {
                successors[parent].push(child);
            }
        }
        for succ in successors.iter_mut() {
            succ.sort_unstable();
        }
        Self::assemble(TopologyKind::Custom, k, successors)
    }

    /// Parse a `parent child` pair per line; `#` starts a comment.
    pub fn from_edge_file(path: &Path) -> Result<Topology> {
        let text = std::fs::read_to_string(path)?;
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<usize> {
                tok.ok_or_else(|| {
                    Error::Topology(format!("line {}: expected 'parent child'", lineno + 1))
                })?
                .parse()
                .map_err(|_| Error::Topology(format!("line {}: invalid agent id", lineno + 1)))
            };
            let parent = parse(parts.next())?;
            let child = parse(parts.next())?;
            if parts.next().is_some() {
                return Err(Error::Topology(format!(
                    "line {}: trailing tokens after 'parent child'",
                    lineno + 1
                )));
            }
            edges.push((parent, child));
        }
        Self::from_edges(&edges)
    }

    fn assemble(kind: TopologyKind, k: usize, successors: Vec<Vec<usize>>) -> Result<Topology> {
        let mut predecessors = vec![Vec::new(); k];
        for (parent, succ) in successors.iter().enumerate() {
            for &child in succ {
                if child >= k {
                    return Err(Error::Topology(format!("agent id {child} out of range")));
                }
                predecessors[child].push(parent);
            }
        }
        for preds in predecessors.iter_mut() {
            preds.sort_unstable();
        }

        // Longest-path layering from the roots; also detects cycles.
        let mut level_of = vec![0usize; k];
        let mut indegree: Vec<usize> = predecessors.iter().map(Vec::len).collect();
        let mut queue: Vec<usize> = (0..k).filter(|&a| indegree[a] == 0).collect();
        if queue.is_empty() {
            return Err(Error::Topology(
                "no roots: the ordering contains a cycle".into(),
            ));
        }
        let mut visited = 0usize;
        let mut head = 0usize;
        while head < queue.len() {
            let a = queue[head];
            head += 1;
            visited += 1;
            for &child in &successors[a] {
                level_of[child] = level_of[child].max(level_of[a] + 1);
                indegree[child] -= 1;
                if indegree[child] == 0 {
                    queue.push(child);
                }
            }
        }
        if visited != k {
            return Err(Error::Topology("the ordering contains a cycle".into()));
        }

        let num_levels = level_of.iter().max().copied().unwrap_or(0) + 1;
        let mut levels = vec![Vec::new(); num_levels];
        for a in 0..k {
            levels[level_of[a]].push(a);
        }
        Ok(Topology {
            kind,
            num_agents: k,
            successors,
            predecessors,
            level_of,
            levels,
        })
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_of(&self, agent: usize) -> usize {
        self.level_of[agent]
    }

    /// Agents at a level, ascending by id.
    pub fn level_agents(&self, level: usize) -> &[usize] {
        &self.levels[level]
    }

    pub fn successors(&self, agent: usize) -> &[usize] {
        &self.successors[agent]
    }

    pub fn predecessors(&self, agent: usize) -> &[usize] {
        &self.predecessors[agent]
    }

    pub fn roots(&self) -> Vec<usize> {
        (0..self.num_agents)
            .filter(|&a| self.predecessors[a].is_empty())
            .collect()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.num_agents)
            .filter(|&a| self.successors[a].is_empty())
            .collect()
    }

    /// Parallel exchange waves needed to complete one round: `K` on a chain,
    /// `ceil(log2 K)` on a tree, 1 on a star, the level count on custom DAGs.
    pub fn acrs_per_round(&self) -> usize {
        match self.kind {
            TopologyKind::Chain => self.num_agents,
            TopologyKind::BinaryTree => ceil_log2(self.num_agents),
            TopologyKind::Star => 1,
            TopologyKind::Custom => self.num_levels(),
        }
    }
}

/// Bytes moved per round, as a function of the topology shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandwidthModel {
    /// Bytes of one model exchange.
    pub transfer_bytes: u64,
}

impl BandwidthModel {
    /// The per-exchange payload that reproduces the published table.
    pub const PAPER_TRANSFER_BYTES: u64 = 10_200_000;

    /// Model transfers in one round. The tree count is `ceil(1.5 K) - 2`:
    /// one download per non-root edge plus the leaf uploads that feed the
    /// aggregation, which matches the published bandwidth cells for
    /// K = 10, 100, and 1000.
    pub fn transfers_per_round(kind: TopologyKind, k: usize) -> Result<u64> {
        if k == 0 {
            return Err(Error::Topology("at least one agent is required".into()));
        }
        let k64 = k as u64;
        match kind {
            TopologyKind::Chain => Ok(k64),
            TopologyKind::Star => Ok(2 * k64),
            TopologyKind::BinaryTree => {
                if k < 2 {
                    return Err(Error::Topology("a tree needs at least 2 agents".into()));
                }
                Ok(((3 * k64).div_ceil(2) - 2).max(1))
            }
            TopologyKind::Custom => Err(Error::Topology(
                "no transfer model for custom topologies".into(),
            )),
        }
    }

    /// Reference transfer count for round-synchronized averaged SGD:
    /// `ceil(n / (K b))` aggregations per round, each moving `2K` models.
    pub fn fedavg_reference_transfers(k: usize, n: usize, batch_size: usize) -> u64 {
        (n as u64).div_ceil(k as u64 * batch_size as u64) * 2 * k as u64
    }

    pub fn bandwidth_per_round(&self, kind: TopologyKind, k: usize) -> Result<u64> {
        Ok(Self::transfers_per_round(kind, k)? * self.transfer_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_is_a_single_path() {
        let t = Topology::build(TopologyKind::Chain, 3).unwrap();
        assert_eq!(t.num_levels(), 3);
        assert_eq!(t.roots(), vec![0]);
        assert_eq!(t.leaves(), vec![2]);
        assert_eq!(t.successors(0), &[1]);
        assert_eq!(t.successors(2), &[] as &[usize]);
        assert_eq!(t.level_of(2), 2);
    }

    #[test]
    fn star_is_flat() {
        let t = Topology::build(TopologyKind::Star, 100).unwrap();
        assert_eq!(t.num_levels(), 1);
        assert_eq!(t.roots().len(), 100);
        assert_eq!(t.leaves().len(), 100);
        assert_eq!(t.acrs_per_round(), 1);
    }

    #[test]
    fn seven_agent_tree_has_depth_two_and_four_leaves() {
        let t = Topology::build(TopologyKind::BinaryTree, 7).unwrap();
        assert_eq!(t.num_levels(), 3);
        assert_eq!(t.leaves(), vec![3, 4, 5, 6]);
        assert_eq!(t.successors(1), &[3, 4]);
        assert_eq!(t.predecessors(6), &[2]);
        assert_eq!(t.level_of(6), 2);
    }

    #[test]
    fn acr_counts_match_the_formulas() {
        assert_eq!(
            Topology::build(TopologyKind::Chain, 100)
                .unwrap()
                .acrs_per_round(),
            100
        );
        assert_eq!(
            Topology::build(TopologyKind::BinaryTree, 8)
                .unwrap()
                .acrs_per_round(),
            3
        );
        assert_eq!(
            Topology::build(TopologyKind::Star, 1000)
                .unwrap()
                .acrs_per_round(),
            1
        );
        assert_eq!(
            Topology::build(TopologyKind::BinaryTree, 9)
                .unwrap()
                .acrs_per_round(),
            4
        );
    }

    #[test]
    fn levels_partition_agents_in_breadth_first_order() {
        for (kind, k) in [
            (TopologyKind::Chain, 5),
            (TopologyKind::BinaryTree, 12),
            (TopologyKind::Star, 9),
        ] {
            let t = Topology::build(kind, k).unwrap();
            let mut seen = vec![false; k];
            for level in 0..t.num_levels() {
                for &a in t.level_agents(level) {
                    assert!(!seen[a]);
                    seen[a] = true;
                    assert_eq!(t.level_of(a), level);
                }
            }
            assert!(seen.iter().all(|&s| s));
            // Non-roots always have a predecessor one level up.
            for a in 0..k {
                if t.level_of(a) > 0 {
                    assert!(t
                        .predecessors(a)
                        .iter()
                        .any(|&p| t.level_of(p) + 1 == t.level_of(a)));
                }
            }
        }
    }

    #[test]
    fn level_count_tracks_acrs_off_powers_of_two() {
        for k in [3, 5, 6, 7, 9, 10, 100] {
            let t = Topology::build(TopologyKind::BinaryTree, k).unwrap();
            assert_eq!(t.num_levels(), t.acrs_per_round(), "k = {k}");
        }
        // At exact powers of two the heap shape needs one extra level.
        for k in [2, 4, 8, 16] {
            let t = Topology::build(TopologyKind::BinaryTree, k).unwrap();
            assert_eq!(t.num_levels(), t.acrs_per_round() + 1, "k = {k}");
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Topology::build(TopologyKind::BinaryTree, 11).unwrap();
        let b = Topology::build(TopologyKind::BinaryTree, 11).unwrap();
        assert_eq!(a.successors, b.successors);
        assert_eq!(a.level_of, b.level_of);
    }

    #[test]
    fn bandwidth_reproduces_the_published_cells() {
        let model = BandwidthModel {
            transfer_bytes: BandwidthModel::PAPER_TRANSFER_BYTES,
        };
        let gb = |bytes: u64| bytes as f64 / 1e9;
        let cells = [
            (TopologyKind::Chain, 10, 0.102),
            (TopologyKind::BinaryTree, 10, 0.132),
            (TopologyKind::Star, 10, 0.204),
            (TopologyKind::Chain, 100, 1.020),
            (TopologyKind::BinaryTree, 100, 1.510),
            (TopologyKind::Star, 100, 2.040),
            (TopologyKind::Chain, 1000, 10.20),
            (TopologyKind::BinaryTree, 1000, 15.28),
            (TopologyKind::Star, 1000, 20.40),
        ];
        for (kind, k, expected_gb) in cells {
            let got = gb(model.bandwidth_per_round(kind, k).unwrap());
            let tolerance = if kind == TopologyKind::BinaryTree {
                0.02
            } else {
                1e-9
            };
            assert!(
                (got - expected_gb).abs() / expected_gb <= tolerance,
                "{kind} K={k}: {got} GB vs {expected_gb} GB"
            );
        }
    }

    #[test]
    fn chain_bandwidth_is_linear_in_k() {
        let model = BandwidthModel {
            transfer_bytes: BandwidthModel::PAPER_TRANSFER_BYTES,
        };
        let k10 = model.bandwidth_per_round(TopologyKind::Chain, 10).unwrap();
        let k100 = model.bandwidth_per_round(TopologyKind::Chain, 100).unwrap();
        assert_eq!(k100, 10 * k10);
    }

    #[test]
    fn bandwidth_ordering_holds_from_five_agents_up() {
        for k in 5..200 {
            let chain = BandwidthModel::transfers_per_round(TopologyKind::Chain, k).unwrap();
            let tree = BandwidthModel::transfers_per_round(TopologyKind::BinaryTree, k).unwrap();
            let star = BandwidthModel::transfers_per_round(TopologyKind::Star, k).unwrap();
            assert!(chain < tree && tree < star, "ordering broken at k = {k}");
        }
    }

    #[test]
    fn custom_topology_loads_from_edge_list() {
        let edges = [(0, 2), (1, 2), (2, 3)];
        let t = Topology::from_edges(&edges).unwrap();
        assert_eq!(t.kind(), TopologyKind::Custom);
        assert_eq!(t.num_agents(), 4);
        assert_eq!(t.roots(), vec![0, 1]);
        assert_eq!(t.leaves(), vec![3]);
        assert_eq!(t.level_of(2), 1);
        assert_eq!(t.level_of(3), 2);
        assert_eq!(t.acrs_per_round(), 3);
        assert_eq!(t.predecessors(2), &[0, 1]);
    }

    #[test]
    fn custom_topology_rejects_cycles_and_self_loops() {
        assert!(Topology::from_edges(&[(0, 1), (1, 0)]).is_err());
        assert!(Topology::from_edges(&[(0, 0)]).is_err());
        assert!(Topology::from_edges(&[(0, 1), (1, 2), (2, 1)]).is_err());
    }

    #[test]
    fn edge_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("topo.txt");
        std::fs::write(&path, "# a diamond\n0 1\n0 2\n1 3\n2 3\n").unwrap();
        let t = Topology::from_edge_file(&path).unwrap();
        assert_eq!(t.num_agents(), 4);
        assert_eq!(t.level_of(3), 2);

        std::fs::write(&path, "0 1\n1\n").unwrap();
        assert!(Topology::from_edge_file(&path).is_err());
    }

    #[test]
    fn invalid_builds_are_rejected() {
        assert!(Topology::build(TopologyKind::Chain, 0).is_err());
        assert!(Topology::build(TopologyKind::BinaryTree, 1).is_err());
        assert!(Topology::build(TopologyKind::Custom, 3).is_err());
    }
}
