use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::grid::{Cell, CellState, OccupancyGrid};
use crate::geometry::Vec2;

pub const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub cells: Vec<Cell>,
    pub waypoints: Vec<Vec2>,
    /// Cost in cell units (unit straight moves, √2 diagonals).
    pub cost: f64,
}

impl Path {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Length in meters.
    pub fn length(&self, resolution: f64) -> f64 {
        self.cost * resolution
    }
}

#[derive(PartialEq)]
struct Node {
    f: f64,
    g: f64,
    cell: Cell,
}

impl Eq for Node {}

impl Ord for Node {
    // min-heap on f, then g descending, then cell ascending
    fn cmp(&self, o: &Self) -> Ordering {
        o.f.total_cmp(&self.f)
            .then_with(|| self.g.total_cmp(&o.g))
            .then_with(|| o.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

pub(crate) fn passable(grid: &OccupancyGrid, c: Cell, unknown_passable: bool) -> bool {
    match grid.get(c) {
        CellState::Free => true,
        CellState::Occupied => false,
        CellState::Unknown => unknown_passable,
    }
}

/// 8-connected moves from `c`; diagonals may not cut blocked corners.
pub(crate) fn moves(grid: &OccupancyGrid, c: Cell, unknown_passable: bool) -> Vec<(Cell, f64)> {
    let mut out = Vec::with_capacity(8);
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (nr, nc) = (c.0 as i64 + dr, c.1 as i64 + dc);
            if !grid.in_bounds(nr, nc) {
                continue;
            }
            let n = (nr as usize, nc as usize);
            if !passable(grid, n, unknown_passable) {
                continue;
            }
            if dr != 0 && dc != 0 {
                let a = (nr as usize, c.1);
                let b = (c.0, nc as usize);
                if !passable(grid, a, unknown_passable) || !passable(grid, b, unknown_passable) {
                    continue;
                }
                out.push((n, SQRT2));
            } else {
                out.push((n, 1.0));
            }
        }
    }
    out
}

fn heuristic(a: Cell, b: Cell) -> f64 {
    let dr = a.0 as f64 - b.0 as f64;
    let dc = a.1 as f64 - b.1 as f64;
    (dr * dr + dc * dc).sqrt()
}

/// Shortest 8-connected path from `start` to `goal`. The endpoints themselves are
/// always admitted; other cells must be free (or unknown when `unknown_passable`).
/// Returns `None` when the goal is unreachable.
pub fn astar(grid: &OccupancyGrid, start: Cell, goal: Cell, unknown_passable: bool) -> Option<Path> {
    let n = grid.rows * grid.cols;
    let idx = |c: Cell| c.0 * grid.cols + c.1;
    let mut g_cost = vec![f64::INFINITY; n];
    let mut parent: Vec<Option<Cell>> = vec![None; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    g_cost[idx(start)] = 0.0;
    open.push(Node {
        f: heuristic(start, goal),
        g: 0.0,
        cell: start,
    });
    while let Some(Node { g, cell, .. }) = open.pop() {
        if closed[idx(cell)] {
            continue;
        }
        closed[idx(cell)] = true;
        if cell == goal {
            let mut cells = vec![goal];
            let mut cur = goal;
            while let Some(p) = parent[idx(cur)] {
                cells.push(p);
                cur = p;
            }
            cells.reverse();
            let waypoints = cells.iter().map(|&c| grid.center(c)).collect();
            return Some(Path { cells, waypoints, cost: g });
        }
        for (nb, w) in moves(grid, cell, unknown_passable) {
            let ng = g + w;
            if ng < g_cost[idx(nb)] {
                g_cost[idx(nb)] = ng;
                parent[idx(nb)] = Some(cell);
                open.push(Node {
                    f: ng + heuristic(nb, goal),
                    g: ng,
                    cell: nb,
                });
            }
        }
        // the goal may sit on a blocked cell (e.g. an inflated target)
        if !passable(grid, goal, unknown_passable) {
            let (dr, dc) = (goal.0 as i64 - cell.0 as i64, goal.1 as i64 - cell.1 as i64);
            if dr.abs() <= 1 && dc.abs() <= 1 {
                let ng = g + if dr != 0 && dc != 0 { SQRT2 } else { 1.0 };
                if ng < g_cost[idx(goal)] {
                    g_cost[idx(goal)] = ng;
                    parent[idx(goal)] = Some(cell);
                    open.push(Node { f: ng, g: ng, cell: goal });
                }
            }
        }
    }
    None
}

/// Single-source shortest costs over the same move model (infinity when unreachable).
pub fn dijkstra_costs(grid: &OccupancyGrid, start: Cell, unknown_passable: bool) -> Vec<f64> {
    let n = grid.rows * grid.cols;
    let idx = |c: Cell| c.0 * grid.cols + c.1;
    let mut dist = vec![f64::INFINITY; n];
    let mut open = BinaryHeap::new();
    dist[idx(start)] = 0.0;
    open.push(Node { f: 0.0, g: 0.0, cell: start });
    while let Some(Node { g, cell, .. }) = open.pop() {
        if g > dist[idx(cell)] {
            continue;
        }
        for (nb, w) in moves(grid, cell, unknown_passable) {
            let ng = g + w;
            if ng < dist[idx(nb)] {
                dist[idx(nb)] = ng;
                open.push(Node { f: ng, g: ng, cell: nb });
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_on_empty_grid() {
        let g = OccupancyGrid::from_mask(3, 3, 1.0, &[false; 9]);
        let p = astar(&g, (0, 0), (2, 2), false).unwrap();
        assert!((p.cost - 2.0 * SQRT2).abs() < 1e-12);
        assert_eq!(p.cells, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn start_equals_goal() {
        let g = OccupancyGrid::from_mask(3, 3, 1.0, &[false; 9]);
        let p = astar(&g, (1, 1), (1, 1), false).unwrap();
        assert_eq!(p.cells, vec![(1, 1)]);
        assert_eq!(p.cost, 0.0);
    }

    #[test]
    fn unreachable_goal() {
        let mut mask = vec![false; 9];
        mask[3] = true;
        mask[4] = true;
        mask[5] = true;
        let g = OccupancyGrid::from_mask(3, 3, 1.0, &mask);
        assert!(astar(&g, (0, 0), (2, 2), false).is_none());
    }

    #[test]
    fn no_corner_cutting() {
        // . #
        // # .
        let g = OccupancyGrid::from_mask(2, 2, 1.0, &[false, true, true, false]);
        assert!(astar(&g, (0, 0), (1, 1), false).is_none());
    }
}
