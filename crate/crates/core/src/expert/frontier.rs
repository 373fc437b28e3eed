use super::astar::dijkstra_costs;
use super::grid::{Cell, CellState, OccupancyGrid};
use crate::geometry::Vec2;

/// A free cell with at least one 4-adjacent unknown cell.
pub fn is_frontier(grid: &OccupancyGrid, c: Cell) -> bool {
    grid.get(c) == CellState::Free && grid.neighbors4(c).any(|n| grid.get(n) == CellState::Unknown)
}

/// All frontier cells in row-major order.
pub fn frontier_cells(grid: &OccupancyGrid) -> Vec<Cell> {
    (0..grid.rows)
        .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
        .filter(|&c| is_frontier(grid, c))
        .collect()
}

/// Reachable frontier cell with the smallest path cost from `from`, moving through
/// free cells of `plan_grid` (typically the inflated map). Equal costs go to the
/// lexicographically smallest (row, col). Frontiers are detected on `grid`.
pub fn select_nearest_frontier(grid: &OccupancyGrid, plan_grid: &OccupancyGrid, from: Vec2) -> Option<(Cell, Vec2)> {
    select_nearest_frontier_excluding(grid, plan_grid, from, &[])
}

/// As [`select_nearest_frontier`], skipping the cells in `exclude`.
pub fn select_nearest_frontier_excluding(
    grid: &OccupancyGrid,
    plan_grid: &OccupancyGrid,
    from: Vec2,
    exclude: &[Cell],
) -> Option<(Cell, Vec2)> {
    let start = grid.clamp_cell(from);
    let costs = dijkstra_costs(plan_grid, start, false);
    let mut best: Option<(f64, Cell)> = None;
    for c in frontier_cells(grid) {
        let d = costs[c.0 * grid.cols + c.1];
        if !d.is_finite() || exclude.contains(&c) {
            continue;
        }
        match best {
            Some((bd, _)) if d >= bd - 1e-9 => {}
            _ => best = Some((d, c)),
        }
    }
    best.map(|(_, c)| (c, grid.center(c)))
}
