//! Bubble diagrams, shortest-path adjacency matrices, exact graph edit
//! distance, and bubble-diagram extraction from rectangle layouts.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{GtganError, Result};

/// Pixel gap (per axis) up to which two disjoint rectangles still count as
/// spatially adjacent.
pub const ADJACENCY_GAP: i64 = 2;
/// Minimum projected overlap on the perpendicular axis for adjacency.
pub const ADJACENCY_OVERLAP: i64 = 4;
/// Largest graph the exact edit-distance search accepts.
pub const MAX_GED_NODES: usize = 13;

/// The ten room categories, with stable codes 0-9 used for one-hot layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomType {
    LivingRoom = 0,
    Kitchen = 1,
    Bedroom = 2,
    Bathroom = 3,
    Closet = 4,
    Balcony = 5,
    Corridor = 6,
    DiningRoom = 7,
    LaundryRoom = 8,
    Unknown = 9,
}

pub const ROOM_TYPE_COUNT: usize = 10;

pub const ALL_ROOM_TYPES: [RoomType; ROOM_TYPE_COUNT] = [
    RoomType::LivingRoom,
    RoomType::Kitchen,
    RoomType::Bedroom,
    RoomType::Bathroom,
    RoomType::Closet,
    RoomType::Balcony,
    RoomType::Corridor,
    RoomType::DiningRoom,
    RoomType::LaundryRoom,
    RoomType::Unknown,
];

impl RoomType {
    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        ALL_ROOM_TYPES.get(code).copied()
    }
}

/// One-hot encoding over the ten room categories.
pub fn one_hot(t: RoomType) -> Vec<f64> {
    let mut v = vec![0.0; ROOM_TYPE_COUNT];
    v[t.code()] = 1.0;
    v
}

#[derive(Serialize, Deserialize)]
struct DiagramRepr {
    nodes: Vec<RoomType>,
    edges: Vec<[usize; 2]>,
}

/// Undirected typed graph of rooms: nodes carry room types, edges mark
/// required spatial adjacency. Edges are stored normalized (i < j).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DiagramRepr", into = "DiagramRepr")]
pub struct BubbleDiagram {
    nodes: Vec<RoomType>,
    edges: BTreeSet<(usize, usize)>,
}

impl BubbleDiagram {
    pub fn new(nodes: Vec<RoomType>, edge_list: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self {
            nodes,
            edges: BTreeSet::new(),
        };
        for &(a, b) in edge_list {
            g.add_edge(a, b)?;
        }
        Ok(g)
    }

    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<()> {
        if a == b {
            return Err(GtganError::InvalidInput(format!("self-loop on node {a}")));
        }
        let n = self.nodes.len();
        if a >= n || b >= n {
            return Err(GtganError::InvalidInput(format!(
                "edge ({a}, {b}) out of bounds for {n} nodes"
            )));
        }
        self.edges.insert((a.min(b), a.max(b)));
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_types(&self) -> &[RoomType] {
        &self.nodes
    }

    pub fn node_type(&self, i: usize) -> RoomType {
        self.nodes[i]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a != b && self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Connected neighbors of `r`, ascending.
    pub fn neighbors(&self, r: usize) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&s| s != r && self.has_edge(r, s))
            .collect()
    }

    /// Nodes not connected to `r` (excluding `r` itself), ascending.
    pub fn non_neighbors(&self, r: usize) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&s| s != r && !self.has_edge(r, s))
            .collect()
    }

    /// Relabels nodes by `perm`, where `perm[i]` is the new index of node `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.nodes.len() {
            return Err(GtganError::InvalidInput("permutation length mismatch".into()));
        }
        let mut nodes = vec![RoomType::Unknown; self.nodes.len()];
        for (i, &p) in perm.iter().enumerate() {
            nodes[p] = self.nodes[i];
        }
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        Self::new(nodes, &edges)
    }
}

impl TryFrom<DiagramRepr> for BubbleDiagram {
    type Error = GtganError;

    fn try_from(repr: DiagramRepr) -> Result<Self> {
        let edges: Vec<(usize, usize)> = repr.edges.iter().map(|e| (e[0], e[1])).collect();
        Self::new(repr.nodes, &edges)
    }
}

impl From<BubbleDiagram> for DiagramRepr {
    fn from(g: BubbleDiagram) -> Self {
        Self {
            nodes: g.nodes,
            edges: g.edges.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }
}

/// M x M shortest-distance matrix: zero diagonal, symmetric, -1 for
/// unreachable pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightedAdjMatrix {
    size: usize,
    entries: Vec<i32>,
}

impl WeightedAdjMatrix {
    /// Constant matrix, mainly for loss fixed-point tests.
    pub fn filled(size: usize, value: i32) -> Self {
        Self {
            size,
            entries: vec![value; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> i32 {
        self.entries[i * self.size + j]
    }

    pub fn entries(&self) -> &[i32] {
        &self.entries
    }

    /// Dense f64 buffer in row-major order, for loss targets.
    pub fn to_f64(&self) -> Vec<f64> {
        self.entries.iter().map(|&v| v as f64).collect()
    }
}

/// BFS hop-count matrix of a diagram. Diagonal entries are 0; pairs with no
/// connecting path get -1.
pub fn shortest_distance_matrix(g: &BubbleDiagram) -> WeightedAdjMatrix {
    let n = g.node_count();
    let mut entries = vec![-1i32; n * n];
    for start in 0..n {
        entries[start * n + start] = 0;
        let mut queue = VecDeque::new();
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            let d = entries[start * n + u];
            for v in g.neighbors(u) {
                if entries[start * n + v] < 0 {
                    entries[start * n + v] = d + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    WeightedAdjMatrix { size: n, entries }
}

// ── Exact graph edit distance ───────────────────────────────────────────

struct GedSearch<'a> {
    a: &'a BubbleDiagram,
    b: &'a BubbleDiagram,
    best: u32,
    assignment: Vec<Option<usize>>,
    used_b: Vec<bool>,
}

impl<'a> GedSearch<'a> {
    /// Edge costs between node `i` (being placed) and all previously placed
    /// nodes `j < i`. A-edges touching a deleted endpoint are counted at the
    /// later endpoint's turn.
    fn edge_cost_for(&self, i: usize, choice: Option<usize>) -> u32 {
        let mut cost = 0;
        for j in 0..i {
            let a_edge = self.a.has_edge(i, j);
            match (choice, self.assignment[j]) {
                (Some(bi), Some(bj)) => {
                    if a_edge != self.b.has_edge(bi, bj) {
                        cost += 1;
                    }
                }
                _ => {
                    // One endpoint deleted: every A-edge into it is deleted.
                    if a_edge {
                        cost += 1;
                    }
                }
            }
        }
        cost
    }

    /// Insertions owed for unused B nodes and B edges not fully covered by
    /// the mapping image.
    fn completion_cost(&self) -> u32 {
        let mut cost = 0;
        for (used, _) in self.used_b.iter().zip(0..) {
            if !used {
                cost += 1;
            }
        }
        for (u, v) in self.b.edges() {
            if !self.used_b[u] || !self.used_b[v] {
                cost += 1;
            }
        }
        cost
    }

    /// Admissible lower bound from label multisets plus the imbalance of
    /// edges entirely among still-unplaced nodes.
    fn lower_bound(&self, next: usize) -> u32 {
        let n_a = self.a.node_count();
        let rem_a = n_a - next;
        let unused_b: Vec<usize> = (0..self.b.node_count())
            .filter(|&j| !self.used_b[j])
            .collect();

        let mut count_a = [0usize; ROOM_TYPE_COUNT];
        for i in next..n_a {
            count_a[self.a.node_type(i).code()] += 1;
        }
        let mut count_b = [0usize; ROOM_TYPE_COUNT];
        for &j in &unused_b {
            count_b[self.b.node_type(j).code()] += 1;
        }
        let common: usize = (0..ROOM_TYPE_COUNT)
            .map(|t| count_a[t].min(count_b[t]))
            .sum();
        let node_lb = rem_a.max(unused_b.len()) - common;

        let rem_edges_a = self
            .a
            .edges()
            .filter(|&(u, v)| u >= next && v >= next)
            .count() as i64;
        let rem_edges_b = self
            .b
            .edges()
            .filter(|&(u, v)| !self.used_b[u] && !self.used_b[v])
            .count() as i64;
        node_lb as u32 + (rem_edges_a - rem_edges_b).unsigned_abs() as u32
    }

    fn dfs(&mut self, i: usize, cost: u32) {
        if cost >= self.best {
            return;
        }
        if i == self.a.node_count() {
            let total = cost + self.completion_cost();
            if total < self.best {
                self.best = total;
            }
            return;
        }
        if cost + self.lower_bound(i) >= self.best {
            return;
        }
        // Same-label candidates first so good solutions tighten the bound
        // early.
        let label = self.a.node_type(i);
        let mut candidates: Vec<usize> = (0..self.b.node_count())
            .filter(|&j| !self.used_b[j])
            .collect();
        candidates.sort_by_key(|&j| (self.b.node_type(j) != label, j));
        for j in candidates {
            let relabel = u32::from(self.b.node_type(j) != label);
            let step = relabel + self.edge_cost_for(i, Some(j));
            self.assignment[i] = Some(j);
            self.used_b[j] = true;
            self.dfs(i + 1, cost + step);
            self.used_b[j] = false;
            self.assignment[i] = None;
        }
        // Deletion branch.
        let step = 1 + self.edge_cost_for(i, None);
        self.assignment[i] = None;
        self.dfs(i + 1, cost + step);
    }
}

/// Minimum number of node insertions/deletions/relabelings and edge
/// insertions/deletions transforming one diagram into the other, at unit
/// cost per operation. Exact branch-and-bound over node mappings; graphs
/// above [`MAX_GED_NODES`] nodes are rejected.
pub fn graph_edit_distance(a: &BubbleDiagram, b: &BubbleDiagram) -> Result<u32> {
    for g in [a, b] {
        if g.node_count() > MAX_GED_NODES {
            return Err(GtganError::GedBound {
                nodes: g.node_count(),
                max: MAX_GED_NODES,
            });
        }
    }
    // Trivial upper bound: delete everything in a, insert everything in b.
    let trivial =
        (a.node_count() + a.edge_count() + b.node_count() + b.edge_count()) as u32;
    let mut search = GedSearch {
        a,
        b,
        best: trivial,
        assignment: vec![None; a.node_count()],
        used_b: vec![false; b.node_count()],
    };
    search.dfs(0, 0);
    Ok(search.best)
}

// ── Rectangles and layouts ──────────────────────────────────────────────

/// Axis-aligned room rectangle with inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    pub room_type: RoomType,
}

impl Rect {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32, room_type: RoomType) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(GtganError::InvalidInput(format!(
                "degenerate rectangle [{x_min},{y_min},{x_max},{y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
            room_type,
        })
    }

    pub fn within_canvas(&self, canvas: u32) -> bool {
        self.x_max < canvas && self.y_max < canvas
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Signed overlap length of two inclusive ranges; when negative, its
/// magnitude is the pixel gap between them.
fn overlap_len(a_min: u32, a_max: u32, b_min: u32, b_max: u32) -> i64 {
    (a_max.min(b_max) as i64) - (a_min.max(b_min) as i64) + 1
}

/// Spatial adjacency: overlapping rectangles are adjacent; otherwise the gap
/// along one axis must be at most [`ADJACENCY_GAP`] while the projection
/// overlap along the other is at least [`ADJACENCY_OVERLAP`].
pub fn rects_adjacent(a: &Rect, b: &Rect) -> bool {
    let ox = overlap_len(a.x_min, a.x_max, b.x_min, b.x_max);
    let oy = overlap_len(a.y_min, a.y_max, b.y_min, b.y_max);
    if ox > 0 && oy > 0 {
        return true;
    }
    if ox <= 0 && oy <= 0 {
        return false;
    }
    if ox <= 0 {
        -ox <= ADJACENCY_GAP && oy >= ADJACENCY_OVERLAP
    } else {
        -oy <= ADJACENCY_GAP && ox >= ADJACENCY_OVERLAP
    }
}

#[derive(Serialize, Deserialize)]
struct RoomRepr {
    #[serde(rename = "type")]
    room_type: RoomType,
    rect: [u32; 4],
}

#[derive(Serialize, Deserialize)]
struct LayoutRepr {
    rooms: Vec<RoomRepr>,
}

/// Generated or ground-truth house layout: one rectangle per room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct Layout {
    pub rooms: Vec<Rect>,
}

impl Layout {
    pub fn new(rooms: Vec<Rect>) -> Self {
        Self { rooms }
    }

    pub fn room_types(&self) -> Vec<RoomType> {
        self.rooms.iter().map(|r| r.room_type).collect()
    }
}

impl TryFrom<LayoutRepr> for Layout {
    type Error = GtganError;

    fn try_from(repr: LayoutRepr) -> Result<Self> {
        let rooms = repr
            .rooms
            .into_iter()
            .map(|r| Rect::new(r.rect[0], r.rect[1], r.rect[2], r.rect[3], r.room_type))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rooms })
    }
}

impl From<Layout> for LayoutRepr {
    fn from(layout: Layout) -> Self {
        Self {
            rooms: layout
                .rooms
                .iter()
                .map(|r| RoomRepr {
                    room_type: r.room_type,
                    rect: [r.x_min, r.y_min, r.x_max, r.y_max],
                })
                .collect(),
        }
    }
}

/// Reads a bubble diagram back off a rectangle layout: one node per room,
/// edges where [`rects_adjacent`] holds.
pub fn extract_bubble_diagram(layout: &Layout) -> BubbleDiagram {
    let nodes = layout.room_types();
    let mut g = BubbleDiagram {
        nodes,
        edges: BTreeSet::new(),
    };
    for i in 0..layout.rooms.len() {
        for j in i + 1..layout.rooms.len() {
            if rects_adjacent(&layout.rooms[i], &layout.rooms[j]) {
                g.edges.insert((i, j));
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diagram(nodes: Vec<RoomType>, edges: &[(usize, usize)]) -> BubbleDiagram {
        BubbleDiagram::new(nodes, edges).unwrap()
    }

    #[test]
    fn one_hot_is_exact() {
        let v = one_hot(RoomType::LivingRoom);
        assert_eq!(v[0], 1.0);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        let u = one_hot(RoomType::Unknown);
        assert_eq!(u[9], 1.0);
        assert_eq!(u.iter().sum::<f64>(), 1.0);
        for t in ALL_ROOM_TYPES {
            assert_eq!(one_hot(t).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn self_loops_and_out_of_bounds_edges_are_rejected() {
        assert!(BubbleDiagram::new(vec![RoomType::Kitchen], &[(0, 0)]).is_err());
        assert!(BubbleDiagram::new(vec![RoomType::Kitchen], &[(0, 1)]).is_err());
    }

    #[test]
    fn diagram_json_round_trips() {
        let g = diagram(
            vec![RoomType::Bedroom, RoomType::Kitchen, RoomType::Balcony],
            &[(0, 1), (2, 1)],
        );
        let json = serde_json::to_string(&g).unwrap();
        assert!(json.contains("\"bedroom\""), "{json}");
        let back: BubbleDiagram = serde_json::from_str(&json).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn distance_matrix_matches_figure_walkthrough() {
        // dining(0)-living(1), living(1)-closet(2), dining(0)-bedroom(3):
        // d(dining,living)=1, d(dining,closet)=2, d(bedroom,closet)=3.
        let g = diagram(
            vec![
                RoomType::DiningRoom,
                RoomType::LivingRoom,
                RoomType::Closet,
                RoomType::Bedroom,
            ],
            &[(0, 1), (1, 2), (0, 3)],
        );
        let m = shortest_distance_matrix(&g);
        assert_eq!(m.get(0, 1), 1);
        assert_eq!(m.get(0, 2), 2);
        assert_eq!(m.get(3, 2), 3);
    }

    #[test]
    fn distance_matrix_single_node() {
        let g = diagram(vec![RoomType::Kitchen], &[]);
        let m = shortest_distance_matrix(&g);
        assert_eq!(m.size(), 1);
        assert_eq!(m.get(0, 0), 0);
    }

    #[test]
    fn distance_matrix_marks_unreachable_pairs() {
        let g = diagram(vec![RoomType::Kitchen, RoomType::Bedroom], &[]);
        let m = shortest_distance_matrix(&g);
        assert_eq!(m.get(0, 1), -1);
        assert_eq!(m.get(1, 0), -1);
        assert_eq!(m.get(0, 0), 0);
    }

    #[test]
    fn ged_identity_is_zero() {
        let g = diagram(
            vec![RoomType::Bedroom, RoomType::Kitchen, RoomType::Closet],
            &[(0, 1), (1, 2)],
        );
        assert_eq!(graph_edit_distance(&g, &g).unwrap(), 0);
    }

    #[test]
    fn ged_single_edge_deletion_costs_one() {
        let a = diagram(vec![RoomType::Bedroom, RoomType::Kitchen], &[(0, 1)]);
        let b = diagram(vec![RoomType::Bedroom, RoomType::Kitchen], &[]);
        assert_eq!(graph_edit_distance(&a, &b).unwrap(), 1);
    }

    #[test]
    fn ged_relabel_costs_one() {
        let a = diagram(vec![RoomType::Bedroom, RoomType::Kitchen], &[(0, 1)]);
        let b = diagram(vec![RoomType::Bedroom, RoomType::Bathroom], &[(0, 1)]);
        assert_eq!(graph_edit_distance(&a, &b).unwrap(), 1);
    }

    #[test]
    fn ged_rejects_oversized_graphs() {
        let big = diagram(vec![RoomType::Unknown; 14], &[]);
        let small = diagram(vec![RoomType::Unknown], &[]);
        assert!(matches!(
            graph_edit_distance(&big, &small),
            Err(GtganError::GedBound { .. })
        ));
    }

    #[test]
    fn touching_rectangles_are_adjacent() {
        let a = Rect::new(0, 0, 5, 9, RoomType::Kitchen).unwrap();
        let b = Rect::new(6, 0, 10, 9, RoomType::Bedroom).unwrap();
        assert!(rects_adjacent(&a, &b));
    }

    #[test]
    fn distant_rectangles_are_not_adjacent() {
        let a = Rect::new(0, 0, 3, 3, RoomType::Kitchen).unwrap();
        let b = Rect::new(9, 9, 12, 12, RoomType::Bedroom).unwrap();
        assert!(!rects_adjacent(&a, &b));
    }

    #[test]
    fn extraction_matches_hand_built_layout() {
        // Four rooms: left column split in two, right column split in two,
        // with a known adjacency cross.
        let layout = Layout::new(vec![
            Rect::new(0, 0, 15, 15, RoomType::LivingRoom).unwrap(),
            Rect::new(0, 16, 15, 31, RoomType::Kitchen).unwrap(),
            Rect::new(16, 0, 31, 15, RoomType::Bedroom).unwrap(),
            Rect::new(16, 16, 31, 31, RoomType::Bathroom).unwrap(),
        ]);
        let g = extract_bubble_diagram(&layout);
        let edges: Vec<(usize, usize)> = g.edges().collect();
        assert_eq!(edges, vec![(0, 1), (0, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn extraction_edge_set_is_order_independent() {
        let rooms = vec![
            Rect::new(0, 0, 15, 15, RoomType::LivingRoom).unwrap(),
            Rect::new(0, 16, 15, 31, RoomType::Kitchen).unwrap(),
            Rect::new(16, 0, 31, 15, RoomType::Bedroom).unwrap(),
        ];
        let g1 = extract_bubble_diagram(&Layout::new(rooms.clone()));
        let mut rev = rooms;
        rev.reverse();
        let g2 = extract_bubble_diagram(&Layout::new(rev));
        // Node 0 in g1 is node 2 in g2; compare via relabeling.
        let perm = vec![2, 1, 0];
        assert_eq!(g1.permuted(&perm).unwrap(), g2);
    }

    #[test]
    fn layout_json_round_trips() {
        let layout = Layout::new(vec![
            Rect::new(0, 0, 15, 15, RoomType::Kitchen).unwrap(),
            Rect::new(16, 0, 31, 31, RoomType::Unknown).unwrap(),
        ]);
        let json = serde_json::to_string(&layout).unwrap();
        assert!(json.contains("\"kitchen\""), "{json}");
        assert!(json.contains("\"rect\":[0,0,15,15]"), "{json}");
        let back: Layout = serde_json::from_str(&json).unwrap();
        assert_eq!(layout, back);
    }
}
