//! Cell-style architecture DAGs: validation, BFS ordering, canonical ids,
//! serialization and seeded generation.

mod generate;

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use generate::{count_forward_space, generate_space, ENUMERATION_LIMIT, REJECTION_BUDGET};

/// Node operation. Ordinals (declaration order) drive BFS tie-breaking and
/// the one-hot node features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpCode {
    Input,
    Output,
    /// Dense layer followed by ReLU.
    OpA,
    /// Dense linear layer.
    OpB,
    /// Parameter-free 1-D max pool.
    OpC,
}

impl OpCode {
    pub const ALL: [OpCode; 5] = [
        OpCode::Input,
        OpCode::Output,
        OpCode::OpA,
        OpCode::OpB,
        OpCode::OpC,
    ];
    pub const HIDDEN: [OpCode; 3] = [OpCode::OpA, OpCode::OpB, OpCode::OpC];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpCode::Input => "input",
            OpCode::Output => "output",
            OpCode::OpA => "op_a",
            OpCode::OpB => "op_b",
            OpCode::OpC => "op_c",
        }
    }
}

impl fmt::Display for OpCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraints {
    pub max_nodes: usize,
    pub max_edges: usize,
}

impl Default for Constraints {
    fn default() -> Self {
        Self {
            max_nodes: 7,
            max_edges: 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub nodes: Vec<OpCode>,
    pub edges: Vec<(usize, usize)>,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    TooFewNodes(usize),
    MaxNodesExceeded {
        nodes: usize,
        max: usize,
    },
    MaxEdgesExceeded {
        edges: usize,
        max: usize,
    },
    FirstNotInput,
    LastNotOutput,
    MisplacedTerminal(usize),
    EdgeOutOfRange(usize, usize),
    SelfLoop(usize),
    DuplicateEdge(usize, usize),
    Cycle,
    /// Node with no path to the output.
    DanglingNode(usize),
    /// Node with no path from the input.
    UnreachableNode(usize),
    IdMismatch,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewNodes(n) => write!(f, "too few nodes ({n})"),
            Violation::MaxNodesExceeded { nodes, max } => {
                write!(f, "max_nodes exceeded ({nodes} > {max})")
            }
            Violation::MaxEdgesExceeded { edges, max } => {
                write!(f, "max_edges exceeded ({edges} > {max})")
            }
            Violation::FirstNotInput => f.write_str("node 0 is not input"),
            Violation::LastNotOutput => f.write_str("last node is not output"),
            Violation::MisplacedTerminal(u) => write!(f, "input/output op at interior node {u}"),
            Violation::EdgeOutOfRange(s, d) => write!(f, "edge ({s},{d}) out of range"),
            Violation::SelfLoop(u) => write!(f, "self loop at {u}"),
            Violation::DuplicateEdge(s, d) => write!(f, "duplicate edge ({s},{d})"),
            Violation::Cycle => f.write_str("cycle"),
            Violation::DanglingNode(u) => write!(f, "dangling node {u}"),
            Violation::UnreachableNode(u) => write!(f, "unreachable node {u}"),
            Violation::IdMismatch => f.write_str("id does not match canonical hash"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("invalid architecture: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("constraints admit only {available} distinct architectures, {requested} requested")]
    SpaceTooSmall { available: usize, requested: usize },
    #[error("rejection budget exhausted after {produced} of {requested} architectures")]
    BudgetExhausted { produced: usize, requested: usize },
    #[error("bad constraints: {0}")]
    Constraints(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// BFS permutation of node indices: `order[k]` is the k-th visited node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BfsOrder {
    pub order: Vec<usize>,
}

impl Architecture {
    /// Builds an architecture and stamps its canonical id.
    pub fn new(nodes: Vec<OpCode>, edges: Vec<(usize, usize)>) -> Self {
        let mut a = Self {
            nodes,
            edges,
            id: String::new(),
        };
        a.id = a.canonical_hash();
        a
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn output_index(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Hash of the op list and sorted edge list; independent of edge order.
    pub fn canonical_hash(&self) -> String {
        let mut edges = self.edges.clone();
        edges.sort_unstable();
        let mut h = Sha256::new();
        for op in &self.nodes {
            h.update([op.ordinal() as u8]);
        }
        h.update([0xff]);
        for (s, d) in edges {
            h.update((s as u32).to_le_bytes());
            h.update((d as u32).to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn in_neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.edges.iter().filter(|e| e.1 == v).map(|e| e.0).collect();
        out.sort_unstable();
        out
    }

    pub fn out_neighbors(&self, u: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.edges.iter().filter(|e| e.0 == u).map(|e| e.1).collect();
        out.sort_unstable();
        out
    }

    /// Relabels node `u` as `perm[u]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Architecture {
        let n = self.nodes.len();
        assert_eq!(perm.len(), n);
        let mut nodes = vec![OpCode::Input; n];
        for (u, &p) in perm.iter().enumerate() {
            nodes[p] = self.nodes[u];
        }
        let edges = self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        Architecture::new(nodes, edges)
    }

    /// Violations that make the graph unusable regardless of size limits.
    pub fn structural_violations(&self) -> Vec<Violation> {
        let n = self.nodes.len();
        let mut out = Vec::new();
        if n < 2 {
            out.push(Violation::TooFewNodes(n));
            return out;
        }
        if self.nodes[0] != OpCode::Input {
            out.push(Violation::FirstNotInput);
        }
        if self.nodes[n - 1] != OpCode::Output {
            out.push(Violation::LastNotOutput);
        }
        for (u, op) in self.nodes.iter().enumerate().take(n - 1).skip(1) {
            if matches!(op, OpCode::Input | OpCode::Output) {
                out.push(Violation::MisplacedTerminal(u));
            }
        }
        let mut seen = std::collections::HashSet::new();
        let mut adj = vec![Vec::new(); n];
        let mut radj = vec![Vec::new(); n];
        for &(s, d) in &self.edges {
            if s >= n || d >= n {
                out.push(Violation::EdgeOutOfRange(s, d));
                continue;
            }
            if s == d {
                out.push(Violation::SelfLoop(s));
                continue;
            }
            if !seen.insert((s, d)) {
                out.push(Violation::DuplicateEdge(s, d));
                continue;
            }
            adj[s].push(d);
            radj[d].push(s);
        }
        // Kahn's algorithm
        let mut indeg: Vec<usize> = radj.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&u| indeg[u] == 0).collect();
        let mut visited = 0;
        while let Some(u) = queue.pop_front() {
            visited += 1;
            for &v in &adj[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    queue.push_back(v);
                }
            }
        }
        if visited < n {
            out.push(Violation::Cycle);
        }
        let from_input = reach(&adj, 0);
        let to_output = reach(&radj, n - 1);
        for u in 0..n {
            if !to_output[u] {
                out.push(Violation::DanglingNode(u));
            }
            if !from_input[u] {
                out.push(Violation::UnreachableNode(u));
            }
        }
        out
    }

    /// Every violated invariant, not just the first.
    pub fn validate(&self, constraints: &Constraints) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.nodes.len() > constraints.max_nodes {
            out.push(Violation::MaxNodesExceeded {
                nodes: self.nodes.len(),
                max: constraints.max_nodes,
            });
        }
        if self.edges.len() > constraints.max_edges {
            out.push(Violation::MaxEdgesExceeded {
                edges: self.edges.len(),
                max: constraints.max_edges,
            });
        }
        out.extend(self.structural_violations());
        if !self.id.is_empty() && self.id != self.canonical_hash() {
            out.push(Violation::IdMismatch);
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<(), ArchError> {
        let v = self.structural_violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ArchError::Invalid(v))
        }
    }

    /// Level-by-level BFS from the input. Each newly discovered frontier is
    /// sorted by `(op ordinal, node index)` before it is enqueued.
    pub fn bfs_order(&self) -> Result<BfsOrder, ArchError> {
        self.ensure_valid()?;
        let n = self.nodes.len();
        let mut visited = vec![false; n];
        visited[0] = true;
        let mut order = vec![0];
        let mut level = vec![0];
        while !level.is_empty() {
            let mut next = Vec::new();
            for &u in &level {
                for v in self.out_neighbors(u) {
                    if !visited[v] {
                        visited[v] = true;
                        next.push(v);
                    }
                }
            }
            next.sort_by_key(|&v| (self.nodes[v].ordinal(), v));
            order.extend_from_slice(&next);
            level = next;
        }
        debug_assert_eq!(order.len(), n);
        Ok(BfsOrder { order })
    }

    /// Nodes in an order where every edge points forward; ties by index.
    pub fn topological_order(&self) -> Result<Vec<usize>, ArchError> {
        self.ensure_valid()?;
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for &(_, d) in &self.edges {
            indeg[d] += 1;
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&u| indeg[u] == 0).collect();
        let mut out = Vec::with_capacity(n);
        while let Some(u) = ready.pop_first() {
            out.push(u);
            for v in self.out_neighbors(u) {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    ready.insert(v);
                }
            }
        }
        Ok(out)
    }

    pub fn serialize(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("architecture serializes")
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Architecture, ArchError> {
        serde_json::from_slice(bytes).map_err(|e| parse_error(bytes, &e))
    }
}

fn reach(adj: &[Vec<usize>], start: usize) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    seen[start] = true;
    let mut stack = vec![start];
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

/// Converts serde_json's line/column into a byte offset.
fn parse_error(bytes: &[u8], e: &serde_json::Error) -> ArchError {
    let (line, col) = (e.line(), e.column());
    let mut offset = 0;
    if line > 0 {
        for (i, l) in bytes.split(|&b| b == b'\n').enumerate() {
            if i + 1 == line {
                offset += col.saturating_sub(1).min(l.len());
                break;
            }
            offset += l.len() + 1;
        }
    }
    ArchError::Parse {
        offset: offset.min(bytes.len()),
        message: e.to_string(),
    }
}

pub fn save_space(path: &Path, space: &[Architecture]) -> Result<(), ArchError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(space).expect("space serializes"))?;
    Ok(())
}

pub fn load_space(path: &Path) -> Result<Vec<Architecture>, ArchError> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| parse_error(&bytes, &e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use OpCode::*;

    fn diamond() -> Architecture {
        Architecture::new(
            vec![Input, OpB, OpA, Output],
            vec![(0, 1), (0, 2), (1, 3), (2, 3)],
        )
    }

    #[test]
    fn bfs_examples() {
        let chain = Architecture::new(vec![Input, OpA, Output], vec![(0, 1), (1, 2)]);
        assert_eq!(chain.bfs_order().unwrap().order, vec![0, 1, 2]);
        let single = Architecture::new(vec![Input, Output], vec![(0, 1)]);
        assert_eq!(single.bfs_order().unwrap().order, vec![0, 1]);
        assert_eq!(diamond().bfs_order().unwrap().order, vec![0, 2, 1, 3]);
    }

    #[test]
    fn validation_reports_all_violations() {
        let c = Constraints::default();
        let cyc = Architecture::new(
            vec![Input, OpA, OpB, OpC, Output],
            vec![(0, 1), (1, 2), (2, 3), (3, 1), (3, 4)],
        );
        assert!(cyc.validate(&c).contains(&Violation::Cycle));

        let dangling = Architecture::new(vec![Input, OpA, OpB, Output], vec![(0, 1), (0, 2), (1, 3)]);
        let v = dangling.validate(&c);
        assert!(v.contains(&Violation::DanglingNode(2)));
        assert_eq!(
            v.iter()
                .filter(|x| x.to_string().starts_with("dangling node"))
                .count(),
            1
        );

        let mut nodes = vec![Input];
        nodes.extend([OpA; 6]);
        nodes.push(Output);
        let edges: Vec<_> = (0..7).map(|u| (u, u + 1)).collect();
        let big = Architecture::new(nodes, edges);
        let v = big.validate(&c);
        assert!(v.iter().any(|x| x.to_string().starts_with("max_nodes exceeded")));

        let both = Architecture::new(
            vec![Input, OpA, OpB, Output],
            vec![(0, 1), (1, 1), (0, 1), (1, 3)],
        );
        let v = both.validate(&c);
        assert!(v.contains(&Violation::SelfLoop(1)));
        assert!(v.contains(&Violation::DuplicateEdge(0, 1)));
        assert!(v.contains(&Violation::UnreachableNode(2)));
        assert!(v.contains(&Violation::DanglingNode(2)));
    }

    #[test]
    fn hash_ignores_edge_order_but_not_ops() {
        let a = diamond();
        let mut shuffled = a.clone();
        shuffled.edges.reverse();
        assert_eq!(a.canonical_hash(), shuffled.canonical_hash());
        let mut other = a.clone();
        other.nodes[1] = OpC;
        assert_ne!(a.canonical_hash(), other.canonical_hash());
    }

    #[test]
    fn round_trip_and_parse_offsets() {
        let a = diamond();
        let back = Architecture::deserialize(&a.serialize()).unwrap();
        assert_eq!(a, back);
        let bad = br#"{"nodes": ["input", "bogus"], "edges": [], "id": ""}"#;
        match Architecture::deserialize(bad) {
            Err(ArchError::Parse { offset, .. }) => {
                assert!(offset > 10 && offset <= bad.len(), "offset {offset}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let multi = b"{\n  \"nodes\": [\"input\"],\n  \"edges\": 7\n}";
        match Architecture::deserialize(multi) {
            Err(ArchError::Parse { offset, .. }) => assert_eq!(multi[offset], b'7'),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn topological_order_respects_edges() {
        let a = Architecture::new(vec![Input, OpA, OpB, Output], vec![(0, 2), (2, 1), (1, 3)]);
        assert_eq!(a.topological_order().unwrap(), vec![0, 2, 1, 3]);
    }

    #[test]
    fn permuted_interior_stays_valid() {
        let a = diamond();
        let p = a.permute_nodes(&[0, 2, 1, 3]);
        assert!(p.validate(&Constraints::default()).is_empty());
        assert_eq!(p.nodes, vec![Input, OpA, OpB, Output]);
    }
}
