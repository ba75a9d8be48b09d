//! Graph algorithms checked against independent oracles: Floyd-Warshall for
//! the shortest-distance matrix and exhaustive mapping enumeration for the
//! exact edit distance.

use gtgan::graph::{
    extract_bubble_diagram, graph_edit_distance, shortest_distance_matrix, BubbleDiagram, Layout,
    Rect, RoomType, ALL_ROOM_TYPES,
};
use gtgan_autodiff::Rng;

fn random_diagram(n: usize, edge_prob: f64, rng: &mut Rng) -> BubbleDiagram {
    let nodes: Vec<RoomType> = (0..n).map(|_| ALL_ROOM_TYPES[rng.below(10)]).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.chance(edge_prob) {
                edges.push((i, j));
            }
        }
    }
    BubbleDiagram::new(nodes, &edges).unwrap()
}

fn floyd_warshall(g: &BubbleDiagram) -> Vec<i32> {
    let n = g.node_count();
    const INF: i64 = 1 << 40;
    let mut d = vec![INF; n * n];
    for i in 0..n {
        d[i * n + i] = 0;
    }
    for (u, v) in g.edges() {
        d[u * n + v] = 1;
        d[v * n + u] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i * n + k] + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    d.iter().map(|&v| if v >= INF { -1 } else { v as i32 }).collect()
}

/// Exhaustive edit-distance oracle: tries every way of mapping each node of
/// `a` to an unused node of `b` or deleting it, evaluating the full cost at
/// each leaf with no pruning or incremental bookkeeping.
fn ged_oracle(a: &BubbleDiagram, b: &BubbleDiagram) -> u32 {
    fn full_cost(a: &BubbleDiagram, b: &BubbleDiagram, assignment: &[Option<usize>]) -> u32 {
        let mut cost = 0u32;
        for (i, choice) in assignment.iter().enumerate() {
            match choice {
                Some(j) => {
                    if a.node_type(i) != b.node_type(*j) {
                        cost += 1;
                    }
                }
                None => cost += 1,
            }
        }
        let used: Vec<bool> = {
            let mut used = vec![false; b.node_count()];
            for choice in assignment.iter().flatten() {
                used[*choice] = true;
            }
            used
        };
        cost += used.iter().filter(|&&u| !u).count() as u32;
        for (i, j) in a.edges() {
            match (assignment[i], assignment[j]) {
                (Some(bi), Some(bj)) => {
                    if !b.has_edge(bi, bj) {
                        cost += 1;
                    }
                }
                _ => cost += 1,
            }
        }
        for (u, v) in b.edges() {
            let covered = used[u]
                && used[v]
                && assignment.iter().enumerate().any(|(i, &ci)| {
                    ci == Some(u)
                        && assignment
                            .iter()
                            .enumerate()
                            .any(|(j, &cj)| cj == Some(v) && a.has_edge(i, j))
                });
            if !covered {
                cost += 1;
            }
        }
        cost
    }

    fn enumerate(
        a: &BubbleDiagram,
        b: &BubbleDiagram,
        i: usize,
        assignment: &mut Vec<Option<usize>>,
        best: &mut u32,
    ) {
        if i == a.node_count() {
            *best = (*best).min(full_cost(a, b, assignment));
            return;
        }
        for j in 0..b.node_count() {
            if assignment[..i].contains(&Some(j)) {
                continue;
            }
            assignment[i] = Some(j);
            enumerate(a, b, i + 1, assignment, best);
        }
        assignment[i] = None;
        enumerate(a, b, i + 1, assignment, best);
    }

    let mut best = u32::MAX;
    let mut assignment = vec![None; a.node_count()];
    enumerate(a, b, 0, &mut assignment, &mut best);
    best
}

#[test]
fn distance_matrix_matches_floyd_warshall_on_200_random_graphs() {
    let mut rng = Rng::new(101);
    for trial in 0..200 {
        let n = rng.range_inclusive(1, 8);
        let g = random_diagram(n, rng.uniform_in(0.1, 0.7), &mut rng);
        let got = shortest_distance_matrix(&g);
        let want = floyd_warshall(&g);
        assert_eq!(got.entries(), &want[..], "trial {trial}");
    }
}

#[test]
fn distance_matrix_is_symmetric_with_zero_diagonal() {
    let mut rng = Rng::new(102);
    for _ in 0..100 {
        let n = rng.range_inclusive(1, 8);
        let g = random_diagram(n, rng.uniform_in(0.0, 1.0), &mut rng);
        let m = shortest_distance_matrix(&g);
        for i in 0..n {
            assert_eq!(m.get(i, i), 0);
            for j in 0..n {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }
}

#[test]
fn ged_matches_exhaustive_enumeration_on_50_random_pairs() {
    let mut rng = Rng::new(103);
    for trial in 0..50 {
        let a = random_diagram(rng.range_inclusive(1, 5), rng.uniform_in(0.1, 0.8), &mut rng);
        let b = random_diagram(rng.range_inclusive(1, 5), rng.uniform_in(0.1, 0.8), &mut rng);
        let fast = graph_edit_distance(&a, &b).unwrap();
        let slow = ged_oracle(&a, &b);
        assert_eq!(fast, slow, "trial {trial}: {a:?} vs {b:?}");
    }
}

#[test]
fn ged_is_symmetric_on_random_pairs() {
    let mut rng = Rng::new(104);
    for _ in 0..30 {
        let a = random_diagram(rng.range_inclusive(1, 6), 0.4, &mut rng);
        let b = random_diagram(rng.range_inclusive(1, 6), 0.4, &mut rng);
        assert_eq!(
            graph_edit_distance(&a, &b).unwrap(),
            graph_edit_distance(&b, &a).unwrap()
        );
    }
}

#[test]
fn ged_zero_for_extracted_self() {
    let layout = Layout::new(vec![
        Rect::new(0, 0, 10, 31, RoomType::LivingRoom).unwrap(),
        Rect::new(11, 0, 31, 15, RoomType::Bedroom).unwrap(),
        Rect::new(11, 16, 31, 31, RoomType::Closet).unwrap(),
    ]);
    let g1 = extract_bubble_diagram(&layout);
    let g2 = extract_bubble_diagram(&layout);
    assert_eq!(graph_edit_distance(&g1, &g2).unwrap(), 0);
}
