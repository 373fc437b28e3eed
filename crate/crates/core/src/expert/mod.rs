//! Classical planners that drive the data-collecting experts.

mod astar;
mod dwa;
mod frontier;
mod grid;
mod orca;

pub use astar::{astar, dijkstra_costs, Path, SQRT2};
pub use dwa::{dwa, dwa_evaluate, dwa_window, lookahead_point, DwaParams, DwaSample};
pub use frontier::{frontier_cells, is_frontier, select_nearest_frontier, select_nearest_frontier_excluding};
pub use grid::{Cell, CellState, OccupancyGrid, GRID_RESOLUTION};
pub use orca::{
    nh_orca, nh_project, orca_constraints, preferred_velocity, solve_orca, OrcaAgent, OrcaConstraint,
    OrcaParams,
};
