//! Communication graphs: Barabási–Albert trees for the decentralized setting
//! and star graphs for the federated one.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("invalid graph parameter: {0}")]
    Parameter(String),
    #[error("node id {id} out of range for graph with {n} nodes")]
    NodeOutOfRange { id: usize, n: usize },
    #[error("malformed edge list at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Undirected simple graph over node ids `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    adjacency: Vec<BTreeSet<usize>>,
}

impl Graph {
    /// A graph with `n` nodes and no edges.
    pub fn empty(n: usize) -> Self {
        Graph {
            adjacency: vec![BTreeSet::new(); n],
        }
    }

    /// Every pair of distinct nodes connected.
    pub fn complete(n: usize) -> Self {
        let mut g = Graph::empty(n);
        for i in 0..n {
            for j in (i + 1)..n {
                g.add_edge(i, j);
            }
        }
        g
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, TopologyError> {
        let mut g = Graph::empty(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(TopologyError::NodeOutOfRange { id: i.max(j), n });
            }
            if i == j {
                return Err(TopologyError::Parameter(format!("self-loop on node {i}")));
            }
            g.add_edge(i, j);
        }
        Ok(g)
    }

    fn add_edge(&mut self, i: usize, j: usize) {
        debug_assert_ne!(i, j);
        self.adjacency[i].insert(j);
        self.adjacency[j].insert(i);
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn neighbors(&self, i: usize) -> &BTreeSet<usize> {
        &self.adjacency[i]
    }

    /// Edges as `(i, j)` pairs with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.range(i + 1..).map(move |&j| (i, j)))
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.node_count();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &self.adjacency[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Edge-list text form: `# nodes=N` header then one `i j` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("# nodes={}\n", self.node_count());
        for (i, j) in self.edges() {
            writeln!(out, "{i} {j}").unwrap();
        }
        out
    }
}

impl FromStr for Graph {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut lines = s.lines().enumerate();
        let n = match lines.next() {
            Some((_, header)) => header
                .strip_prefix("# nodes=")
                .and_then(|v| v.trim().parse::<usize>().ok())
                .ok_or_else(|| TopologyError::Parse {
                    line: 1,
                    msg: "expected `# nodes=N` header".into(),
                })?,
            None => {
                return Err(TopologyError::Parse {
                    line: 1,
                    msg: "empty input".into(),
                })
            }
        };
        let mut edges = Vec::new();
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: &str| TopologyError::Parse {
                line: idx + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split_whitespace();
            let i = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err("bad first endpoint"))?;
            let j = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err("bad second endpoint"))?;
            if parts.next().is_some() {
                return Err(parse_err("trailing tokens"));
            }
            edges.push((i, j));
        }
        Graph::from_edges(n, &edges)
    }
}

/// Barabási–Albert preferential attachment with `m` edges per new node.
///
/// Growth starts from the single edge `{0, 1}`. Attachment targets are drawn
/// from an urn holding each node once per incident edge, which makes the
/// draw exactly degree-proportional. For `m > 1` the `m` targets of a new node
/// are distinct and drawn without replacement from the urn.
pub fn generate_ba<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    rng: &mut R,
) -> Result<Graph, TopologyError> {
    if n < 2 {
        return Err(TopologyError::Parameter(format!(
            "BA graph needs n >= 2, got {n}"
        )));
    }
    if m == 0 || n < m + 1 {
        return Err(TopologyError::Parameter(format!(
            "BA graph needs 1 <= m <= n - 1, got m={m}, n={n}"
        )));
    }
    let mut g = Graph::empty(n);
    g.add_edge(0, 1);
    let mut urn: Vec<usize> = vec![0, 1];
    for new in 2..n {
        let k = m.min(new);
        let mut targets = BTreeSet::new();
        while targets.len() < k {
            let pick = urn[rng.random_range(0..urn.len())];
            targets.insert(pick);
        }
        for t in targets {
            g.add_edge(new, t);
            urn.push(new);
            urn.push(t);
        }
    }
    Ok(g)
}

/// Star with hub `n - 1` and leaves `0..n-1`.
pub fn generate_star(n: usize) -> Result<Graph, TopologyError> {
    if n < 2 {
        return Err(TopologyError::Parameter(format!(
            "star needs n >= 2, got {n}"
        )));
    }
    let hub = n - 1;
    let mut g = Graph::empty(n);
    for leaf in 0..hub {
        g.add_edge(leaf, hub);
    }
    Ok(g)
}

/// The closed neighborhood of `i`: its neighbors plus `i` itself.
pub fn neighborhood(g: &Graph, i: usize) -> Result<BTreeSet<usize>, TopologyError> {
    if i >= g.node_count() {
        return Err(TopologyError::NodeOutOfRange {
            id: i,
            n: g.node_count(),
        });
    }
    let mut set = g.neighbors(i).clone();
    set.insert(i);
    Ok(set)
}

/// Which centrality drives the "most central" ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CentralityMetric {
    #[default]
    Degree,
}

/// Node ids sorted by centrality, most central first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CentralityRanking {
    ordered: Vec<usize>,
}

impl CentralityRanking {
    pub fn ordered(&self) -> &[usize] {
        &self.ordered
    }

    pub fn top(&self) -> usize {
        self.ordered[0]
    }

    pub fn len(&self) -> usize {
        self.ordered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered.is_empty()
    }

    /// Ranking in the given order; must be a permutation of `0..n`.
    pub fn from_order(ordered: Vec<usize>) -> Result<Self, TopologyError> {
        let mut seen = vec![false; ordered.len()];
        for &v in &ordered {
            if v >= ordered.len() || std::mem::replace(&mut seen[v], true) {
                return Err(TopologyError::Parameter(
                    "ranking is not a permutation".into(),
                ));
            }
        }
        Ok(CentralityRanking { ordered })
    }
}

/// Degree descending, ties broken by ascending id.
pub fn centrality_ranking(g: &Graph) -> CentralityRanking {
    centrality_ranking_with(g, CentralityMetric::Degree)
}

pub fn centrality_ranking_with(g: &Graph, metric: CentralityMetric) -> CentralityRanking {
    let mut ordered: Vec<usize> = (0..g.node_count()).collect();
    match metric {
        CentralityMetric::Degree => {
            ordered.sort_by(|&a, &b| g.degree(b).cmp(&g.degree(a)).then(a.cmp(&b)));
        }
    }
    CentralityRanking { ordered }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use proptest::prelude::*;

    fn ba(n: usize, seed: u64) -> Graph {
        generate_ba(n, 1, &mut derive(seed, Stream::Graph, &[])).unwrap()
    }

    fn check_invariants(g: &Graph) {
        for i in 0..g.node_count() {
            assert!(!g.neighbors(i).contains(&i));
            for &j in g.neighbors(i) {
                assert!(g.neighbors(j).contains(&i));
            }
        }
    }

    #[test]
    fn ba_two_nodes_is_single_edge() {
        let g = ba(2, 0);
        assert_eq!(g.edges(), vec![(0, 1)]);
    }

    #[test]
    fn ba_fifty_nodes_is_tree() {
        let g = ba(50, 3);
        assert_eq!(g.edge_count(), 49);
        assert!(g.is_connected());
        check_invariants(&g);
    }

    #[test]
    fn ba_rejects_small_n() {
        assert!(generate_ba(1, 1, &mut derive(0, Stream::Graph, &[])).is_err());
        assert!(generate_ba(0, 1, &mut derive(0, Stream::Graph, &[])).is_err());
    }

    #[test]
    fn ba_degree_is_heavy_tailed() {
        for seed in 0..30 {
            let g = ba(50, seed);
            let mut degrees: Vec<usize> = (0..50).map(|i| g.degree(i)).collect();
            degrees.sort_unstable();
            let median = (degrees[24] + degrees[25]) as f64 / 2.0;
            let max = *degrees.last().unwrap() as f64;
            assert!(max > median, "seed {seed}: max {max} median {median}");
        }
    }

    #[test]
    fn ba_larger_m_has_expected_edges() {
        let g = generate_ba(30, 2, &mut derive(1, Stream::Graph, &[])).unwrap();
        // seed edge plus two per added node
        assert_eq!(g.edge_count(), 1 + 2 * 28);
        check_invariants(&g);
    }

    #[test]
    fn star_shapes() {
        let g = generate_star(2).unwrap();
        assert_eq!(g.edges(), vec![(0, 1)]);
        let g = generate_star(51).unwrap();
        assert_eq!(g.degree(50), 50);
        assert!((0..50).all(|i| g.degree(i) == 1));
        assert_eq!(g.edge_count(), 50);
        assert!(generate_star(1).is_err());
    }

    #[test]
    fn neighborhood_includes_self() {
        let g = generate_star(3).unwrap();
        assert_eq!(neighborhood(&g, 0).unwrap(), BTreeSet::from([0, 2]));
        assert_eq!(neighborhood(&g, 2).unwrap(), BTreeSet::from([0, 1, 2]));
        assert!(matches!(
            neighborhood(&g, 3),
            Err(TopologyError::NodeOutOfRange { id: 3, n: 3 })
        ));
        let t = ba(50, 9);
        for i in 0..50 {
            assert_eq!(neighborhood(&t, i).unwrap().len(), t.degree(i) + 1);
        }
    }

    #[test]
    fn ranking_examples() {
        let star = generate_star(3).unwrap();
        assert_eq!(centrality_ranking(&star).ordered(), &[2, 0, 1]);
        let path = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(centrality_ranking(&path).ordered(), &[1, 0, 2]);
    }

    #[test]
    fn edge_list_roundtrip_and_format() {
        let g = Graph::from_edges(4, &[(2, 1), (0, 3), (1, 0)]).unwrap();
        let text = g.to_edge_list();
        assert_eq!(text, "# nodes=4\n0 1\n0 3\n1 2\n");
        assert_eq!(text.parse::<Graph>().unwrap(), g);
        assert!("0 1\n".parse::<Graph>().is_err());
        assert!("# nodes=2\n0 5\n".parse::<Graph>().is_err());
    }

    proptest! {
        #[test]
        fn ba_tree_invariants(n in 2usize..120, seed in any::<u64>()) {
            let g = ba(n, seed);
            prop_assert_eq!(g.edge_count(), n - 1);
            prop_assert!(g.is_connected());
            check_invariants(&g);
            // determinism, byte for byte
            prop_assert_eq!(g.to_edge_list(), ba(n, seed).to_edge_list());
        }

        #[test]
        fn ranking_is_degree_monotone_permutation(n in 2usize..80, seed in any::<u64>()) {
            let g = ba(n, seed);
            let r = centrality_ranking(&g);
            let mut sorted = r.ordered().to_vec();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            for w in r.ordered().windows(2) {
                prop_assert!(g.degree(w[0]) >= g.degree(w[1]));
            }
            let max = (0..n).map(|i| g.degree(i)).max().unwrap();
            prop_assert_eq!(g.degree(r.top()), max);
        }
    }
}
