use crate::geometry::{Rect, Vec2};
use crate::worldsim::{Pose2D, WorldScenario};

pub const GRID_RESOLUTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellState {
    Free,
    Occupied,
    Unknown,
}

/// Grid index as (row, col); rows run along +y, columns along +x.
pub type Cell = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: f64,
    pub origin: Vec2,
    pub rows: usize,
    pub cols: usize,
    cells: Vec<CellState>,
}

impl OccupancyGrid {
    pub fn new(rows: usize, cols: usize, resolution: f64, origin: Vec2, fill: CellState) -> Self {
        Self {
            resolution,
            origin,
            rows,
            cols,
            cells: vec![fill; rows * cols],
        }
    }

    /// Builds a grid from an explicit row-major occupancy mask (`true` = occupied).
    pub fn from_mask(rows: usize, cols: usize, resolution: f64, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), rows * cols);
        let mut g = Self::new(rows, cols, resolution, Vec2::ZERO, CellState::Free);
        for (c, &m) in g.cells.iter_mut().zip(mask) {
            if m {
                *c = CellState::Occupied;
            }
        }
        g
    }

    fn blank_for(scenario: &WorldScenario, fill: CellState) -> Self {
        let n = (scenario.size / GRID_RESOLUTION).ceil() as usize;
        Self::new(n, n, GRID_RESOLUTION, Vec2::ZERO, fill)
    }

    /// Ground-truth grid: a cell is occupied iff some wall overlaps it with positive
    /// area.
    pub fn rasterize(scenario: &WorldScenario) -> Self {
        let mut g = Self::blank_for(scenario, CellState::Free);
        for w in &scenario.walls {
            let c0 = ((w.min_x - g.origin.x) / g.resolution).floor().max(0.0) as usize;
            let r0 = ((w.min_y - g.origin.y) / g.resolution).floor().max(0.0) as usize;
            let c1 = (((w.max_x - g.origin.x) / g.resolution).ceil() as usize).min(g.cols);
            let r1 = (((w.max_y - g.origin.y) / g.resolution).ceil() as usize).min(g.rows);
            for r in r0..r1 {
                for c in c0..c1 {
                    if w.overlap_area(&g.cell_rect((r, c))) > 0.0 {
                        g.set((r, c), CellState::Occupied);
                    }
                }
            }
        }
        g
    }

    /// An all-unknown grid covering the scenario, for exploration.
    pub fn unknown_for(scenario: &WorldScenario) -> Self {
        Self::blank_for(scenario, CellState::Unknown)
    }

    pub fn get(&self, (r, c): Cell) -> CellState {
        self.cells[r * self.cols + c]
    }

    pub fn set(&mut self, (r, c): Cell, s: CellState) {
        self.cells[r * self.cols + c] = s;
    }

    pub fn states(&self) -> &[CellState] {
        &self.cells
    }

    pub fn count(&self, s: CellState) -> usize {
        self.cells.iter().filter(|&&c| c == s).count()
    }

    pub fn in_bounds(&self, r: i64, c: i64) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols
    }

    pub fn cell_of(&self, p: Vec2) -> Option<Cell> {
        let c = ((p.x - self.origin.x) / self.resolution).floor();
        let r = ((p.y - self.origin.y) / self.resolution).floor();
        self.in_bounds(r as i64, c as i64).then_some((r as usize, c as usize))
    }

    /// Nearest cell to `p`, clamped into the grid.
    pub fn clamp_cell(&self, p: Vec2) -> Cell {
        let c = ((p.x - self.origin.x) / self.resolution).floor().clamp(0.0, (self.cols - 1) as f64);
        let r = ((p.y - self.origin.y) / self.resolution).floor().clamp(0.0, (self.rows - 1) as f64);
        (r as usize, c as usize)
    }

    pub fn center(&self, (r, c): Cell) -> Vec2 {
        Vec2::new(
            self.origin.x + (c as f64 + 0.5) * self.resolution,
            self.origin.y + (r as f64 + 0.5) * self.resolution,
        )
    }

    pub fn cell_rect(&self, (r, c): Cell) -> Rect {
        let x0 = self.origin.x + c as f64 * self.resolution;
        let y0 = self.origin.y + r as f64 * self.resolution;
        Rect::new(x0, y0, x0 + self.resolution, y0 + self.resolution)
    }

    pub fn neighbors4(&self, (r, c): Cell) -> impl Iterator<Item = Cell> + '_ {
        [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].into_iter().filter_map(move |(dr, dc)| {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            self.in_bounds(nr, nc).then_some((nr as usize, nc as usize))
        })
    }

    /// Copy in which every non-occupied cell whose center lies closer than `radius`
    /// to an occupied cell is marked occupied.
    pub fn inflate(&self, radius: f64) -> Self {
        let mut out = self.clone();
        let reach = (radius / self.resolution).ceil() as i64 + 1;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.get((r, c)) != CellState::Occupied {
                    continue;
                }
                let rect = self.cell_rect((r, c));
                for dr in -reach..=reach {
                    for dc in -reach..=reach {
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if !self.in_bounds(nr, nc) {
                            continue;
                        }
                        let n = (nr as usize, nc as usize);
                        if out.get(n) != CellState::Occupied && rect.distance(self.center(n)) < radius {
                            out.set(n, CellState::Occupied);
                        }
                    }
                }
            }
        }
        out
    }

    /// Sensor update: casts `n_rays` rays over 360° against the ground-truth grid
    /// out to `max_range`; cells passed through become free, the first occupied
    /// cell hit becomes occupied. Known cells never change.
    pub fn update_exploration(&mut self, truth: &OccupancyGrid, pose: &Pose2D, max_range: f64, n_rays: usize) {
        let origin = pose.xy();
        for k in 0..n_rays {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n_rays as f64;
            self.cast(truth, origin, Vec2::from_angle(a), max_range);
        }
    }

    /// Reveals every cell whose center lies within `radius` of `center`
    /// (short-range proximity sensing).
    pub fn reveal_disc(&mut self, truth: &OccupancyGrid, center: Vec2, radius: f64) {
        let (r0, c0) = self.clamp_cell(center);
        let reach = (radius / self.resolution).ceil() as i64 + 1;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (r, c) = (r0 as i64 + dr, c0 as i64 + dc);
                if self.in_bounds(r, c) && self.center((r as usize, c as usize)).distance(center) <= radius {
                    self.reveal((r as usize, c as usize), truth);
                }
            }
        }
    }

    fn reveal(&mut self, cell: Cell, truth: &OccupancyGrid) {
        if self.get(cell) == CellState::Unknown {
            self.set(cell, truth.get(cell));
        }
    }

    /// Amanatides–Woo grid traversal.
    fn cast(&mut self, truth: &OccupancyGrid, origin: Vec2, dir: Vec2, max_range: f64) {
        let Some(mut cell) = self.cell_of(origin) else { return };
        let res = self.resolution;
        let step_c: i64 = if dir.x > 0.0 { 1 } else { -1 };
        let step_r: i64 = if dir.y > 0.0 { 1 } else { -1 };
        let rel = origin - self.origin;
        let next_x = (cell.1 as f64 + if step_c > 0 { 1.0 } else { 0.0 }) * res;
        let next_y = (cell.0 as f64 + if step_r > 0 { 1.0 } else { 0.0 }) * res;
        let mut t_max_x = if dir.x != 0.0 { (next_x - rel.x) / dir.x } else { f64::INFINITY };
        let mut t_max_y = if dir.y != 0.0 { (next_y - rel.y) / dir.y } else { f64::INFINITY };
        let t_dx = if dir.x != 0.0 { res / dir.x.abs() } else { f64::INFINITY };
        let t_dy = if dir.y != 0.0 { res / dir.y.abs() } else { f64::INFINITY };
        loop {
            self.reveal(cell, truth);
            if truth.get(cell) == CellState::Occupied {
                return;
            }
            let t = t_max_x.min(t_max_y);
            if t > max_range {
                return;
            }
            let (nr, nc) = if t_max_x < t_max_y {
                t_max_x += t_dx;
                (cell.0 as i64, cell.1 as i64 + step_c)
            } else {
                t_max_y += t_dy;
                (cell.0 as i64 + step_r, cell.1 as i64)
            };
            if !self.in_bounds(nr, nc) {
                return;
            }
            cell = (nr as usize, nc as usize);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::WorldScenario;

    #[test]
    fn rasterize_marks_wall_cells_only() {
        let mut sc = WorldScenario::empty(5.0);
        sc.walls.push(Rect::new(1.0, 1.0, 1.5, 1.1));
        let g = OccupancyGrid::rasterize(&sc);
        assert_eq!(g.rows, 20);
        let occ: Vec<Cell> = (0..20)
            .flat_map(|r| (0..20).map(move |c| (r, c)))
            .filter(|&c| g.get(c) == CellState::Occupied)
            .collect();
        assert_eq!(occ, vec![(4, 4), (4, 5)]);
    }

    #[test]
    fn inflation_covers_neighbors() {
        let mut mask = vec![false; 25];
        mask[12] = true;
        let g = OccupancyGrid::from_mask(5, 5, 0.25, &mask).inflate(0.3);
        assert_eq!(g.count(CellState::Occupied), 9);
    }
}
