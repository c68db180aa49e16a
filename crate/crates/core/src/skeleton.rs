//! Skeleton topology: joint tree, bone segments, symmetry pairs, limb
//! subsets, and the all-pairs shortest-path-distance matrix used as the
//! graph energy net's attention-bias index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A joint tree with named joints, bone segments (edges), left/right
/// symmetry pairs over segments, and a limb-segment subset. Immutable once
/// validated; safe to share across threads.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    /// (parent, child) joint index pairs; segment i is `edges[i]`.
    pub edges: Vec<(usize, usize)>,
    /// (left segment index, right segment index) pairs.
    pub symmetry_pairs: Vec<(usize, usize)>,
    /// Segment indices counted as limbs (arms and legs).
    pub limb_segments: Vec<usize>,
    pub root: usize,
}

/// First violation found when validating a skeleton.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SkeletonDiagnostic {
    EmptySkeleton,
    WrongEdgeCount { joints: usize, edges: usize },
    JointIndexOutOfBounds { edge: usize, joint: usize },
    RootOutOfBounds { root: usize },
    CycleOrDisconnected,
    SelfLoop { edge: usize },
    SymmetryIndexOutOfBounds { pair: usize, segment: usize },
    SymmetrySelfPair { pair: usize },
    LimbIndexOutOfBounds { segment: usize },
}

impl std::fmt::Display for SkeletonDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SkeletonDiagnostic::EmptySkeleton => write!(f, "skeleton has no joints"),
            SkeletonDiagnostic::WrongEdgeCount { joints, edges } => {
                write!(f, "{joints} joints require {} edges, found {edges}", joints - 1)
            }
            SkeletonDiagnostic::JointIndexOutOfBounds { edge, joint } => {
                write!(f, "edge {edge} references joint {joint} out of bounds")
            }
            SkeletonDiagnostic::RootOutOfBounds { root } => {
                write!(f, "root joint {root} out of bounds")
            }
            SkeletonDiagnostic::CycleOrDisconnected => {
                write!(f, "edges contain a cycle or do not span all joints")
            }
            SkeletonDiagnostic::SelfLoop { edge } => write!(f, "edge {edge} is a self-loop"),
            SkeletonDiagnostic::SymmetryIndexOutOfBounds { pair, segment } => {
                write!(f, "symmetry pair {pair} references segment {segment} out of bounds")
            }
            SkeletonDiagnostic::SymmetrySelfPair { pair } => {
                write!(f, "symmetry pair {pair} references the same segment twice")
            }
            SkeletonDiagnostic::LimbIndexOutOfBounds { segment } => {
                write!(f, "limb subset references segment {segment} out of bounds")
            }
        }
    }
}

impl SkeletonSpec {
    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn segment_count(&self) -> usize {
        self.edges.len()
    }

    /// Check the tree property, index bounds and symmetry-pair
    /// well-formedness; returns the first violation found.
    pub fn validate(&self) -> std::result::Result<(), SkeletonDiagnostic> {
        let j = self.joint_count();
        if j == 0 {
            return Err(SkeletonDiagnostic::EmptySkeleton);
        }
        if self.root >= j {
            return Err(SkeletonDiagnostic::RootOutOfBounds { root: self.root });
        }
        if self.edges.len() != j - 1 {
            return Err(SkeletonDiagnostic::WrongEdgeCount { joints: j, edges: self.edges.len() });
        }
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            if a >= j {
                return Err(SkeletonDiagnostic::JointIndexOutOfBounds { edge: e, joint: a });
            }
            if b >= j {
                return Err(SkeletonDiagnostic::JointIndexOutOfBounds { edge: e, joint: b });
            }
            if a == b {
                return Err(SkeletonDiagnostic::SelfLoop { edge: e });
            }
        }
        // J-1 edges span all J joints iff the graph is a connected tree;
        // a BFS from the root reaching everything rules out cycles.
        let adj = self.adjacency();
        let mut seen = vec![false; j];
        let mut queue = std::collections::VecDeque::from([self.root]);
        seen[self.root] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        if count != j {
            return Err(SkeletonDiagnostic::CycleOrDisconnected);
        }
        let s = self.segment_count();
        for (p, &(l, r)) in self.symmetry_pairs.iter().enumerate() {
            if l >= s {
                return Err(SkeletonDiagnostic::SymmetryIndexOutOfBounds { pair: p, segment: l });
            }
            if r >= s {
                return Err(SkeletonDiagnostic::SymmetryIndexOutOfBounds { pair: p, segment: r });
            }
            if l == r {
                return Err(SkeletonDiagnostic::SymmetrySelfPair { pair: p });
            }
        }
        for &l in &self.limb_segments {
            if l >= s {
                return Err(SkeletonDiagnostic::LimbIndexOutOfBounds { segment: l });
            }
        }
        Ok(())
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.joint_count()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Human-readable structured-text (TOML) serialization.
    pub fn to_toml(&self) -> String {
        let names = self
            .joint_names
            .iter()
            .map(|n| format!("{n:?}"))
            .collect::<Vec<_>>()
            .join(", ");
        let fmt_pairs = |ps: &[(usize, usize)]| {
            ps.iter().map(|(a, b)| format!("[{a}, {b}]")).collect::<Vec<_>>().join(", ")
        };
        let limbs =
            self.limb_segments.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ");
        format!(
            "joint_names = [{names}]\nroot = {}\nedges = [{}]\nsymmetry_pairs = [{}]\nlimb_segments = [{limbs}]\n",
            self.root,
            fmt_pairs(&self.edges),
            fmt_pairs(&self.symmetry_pairs),
        )
    }
}

/// All-pairs shortest-path hop distances on the skeleton tree, with a cap
/// used when indexing attention-bias tables.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    j: usize,
    dist: Vec<u32>,
    pub max_distance: u32,
}

pub const DEFAULT_SPD_CAP: u32 = 8;

impl SpdMatrix {
    pub fn joints(&self) -> usize {
        self.j
    }

    /// Exact hop distance between two joints.
    pub fn distance(&self, a: usize, b: usize) -> u32 {
        self.dist[a * self.j + b]
    }

    /// Distance clamped to `max_distance` for bias-table lookup.
    pub fn bucket(&self, a: usize, b: usize) -> u32 {
        self.distance(a, b).min(self.max_distance)
    }
}

/// Number of bones on the unique tree path between every pair of joints,
/// via breadth-first search from each joint.
pub fn compute_spd(spec: &SkeletonSpec) -> Result<SpdMatrix> {
    compute_spd_with_cap(spec, DEFAULT_SPD_CAP)
}

pub fn compute_spd_with_cap(spec: &SkeletonSpec, max_distance: u32) -> Result<SpdMatrix> {
    spec.validate().map_err(|d| Error::Structural(d.to_string()))?;
    let j = spec.joint_count();
    let adj = spec.adjacency();
    let mut dist = vec![u32::MAX; j * j];
    for s in 0..j {
        dist[s * j + s] = 0;
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            let du = dist[s * j + u];
            for &v in &adj[u] {
                if dist[s * j + v] == u32::MAX {
                    dist[s * j + v] = du + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    Ok(SpdMatrix { j, dist, max_distance })
}

/// The built-in 17-joint skeleton: pelvis-rooted tree with legs, spine/head
/// chain and arms hanging off the thorax.
///
/// Joint order: 0 pelvis, 1-3 right leg (hip, knee, ankle), 4-6 left leg,
/// 7-10 spine/thorax/neck/head, 11-13 left arm (shoulder, elbow, wrist),
/// 14-16 right arm.
pub fn canonical_17() -> SkeletonSpec {
    let joint_names = [
        "pelvis",
        "right_hip",
        "right_knee",
        "right_ankle",
        "left_hip",
        "left_knee",
        "left_ankle",
        "spine",
        "thorax",
        "neck",
        "head",
        "left_shoulder",
        "left_elbow",
        "left_wrist",
        "right_shoulder",
        "right_elbow",
        "right_wrist",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let edges = vec![
        (0, 1),
        (1, 2),
        (2, 3),
        (0, 4),
        (4, 5),
        (5, 6),
        (0, 7),
        (7, 8),
        (8, 9),
        (9, 10),
        (8, 11),
        (11, 12),
        (12, 13),
        (8, 14),
        (14, 15),
        (15, 16),
    ];
    // (left segment, right segment)
    let symmetry_pairs = vec![(3, 0), (4, 1), (5, 2), (10, 13), (11, 14), (12, 15)];
    // upper/lower legs and arms
    let limb_segments = vec![1, 2, 4, 5, 11, 12, 14, 15];
    SkeletonSpec { joint_names, edges, symmetry_pairs, limb_segments, root: 0 }
}
