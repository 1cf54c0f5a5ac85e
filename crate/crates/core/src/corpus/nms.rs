//! Neighbor counting and greedy non-maximum suppression over capture points.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geo::{haversine_m, meters_to_lat_deg, meters_to_lon_deg};

use super::{CapturePoint, CorpusError, Location};

/// Uniform lat/lon grid for radius queries over capture points.
///
/// Cells are sized so that any point within `radius_m` of a query lies in
/// the query's cell or one of its eight neighbors. Longitude cells wrap
/// around the antimeridian.
pub struct SpatialGrid {
    cell_lat_deg: f64,
    cell_lon_deg: f64,
    lon_cells: i64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl SpatialGrid {
    /// Build a grid over `points` sized for queries at `radius_m`.
    pub fn build(points: &[CapturePoint], radius_m: f64) -> Result<Self, CorpusError> {
        if !(radius_m > 0.0) || !radius_m.is_finite() {
            return Err(CorpusError::BadRadius(radius_m));
        }
        let max_abs_lat = points
            .iter()
            .map(|p| p.lat.abs())
            .fold(0.0_f64, f64::max)
            // Pad so the worst-case longitude shrink stays covered, and keep
            // away from the poles where lon degrees degenerate.
            .min(89.0)
            + 0.5;
        let cell_lat_deg = meters_to_lat_deg(radius_m);
        let cell_lon_deg = meters_to_lon_deg(radius_m, max_abs_lat);
        let lon_cells = ((360.0 / cell_lon_deg).ceil() as i64).max(1);
        let mut grid = SpatialGrid {
            cell_lat_deg,
            cell_lon_deg,
            lon_cells,
            cells: HashMap::new(),
        };
        for (idx, p) in points.iter().enumerate() {
            let key = grid.key(p.lat, p.lon);
            grid.cells.entry(key).or_default().push(idx);
        }
        Ok(grid)
    }

    fn key(&self, lat: f64, lon: f64) -> (i64, i64) {
        let row = (lat / self.cell_lat_deg).floor() as i64;
        let col = ((lon + 180.0) / self.cell_lon_deg).floor() as i64;
        (row, col.rem_euclid(self.lon_cells))
    }

    /// Visit the indices of every point in the 3x3 cell block around
    /// (`lat`, `lon`). Candidates still need an exact distance check.
    pub fn visit_candidates(&self, lat: f64, lon: f64, mut f: impl FnMut(usize)) {
        let (row, col) = self.key(lat, lon);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let key = (row + dr, (col + dc).rem_euclid(self.lon_cells));
                if let Some(bucket) = self.cells.get(&key) {
                    for &idx in bucket {
                        f(idx);
                    }
                }
            }
        }
    }
}

/// Count, for every point, how many *other* points lie within `radius_m`.
///
/// Distances are great-circle; "within" is inclusive (`<= radius_m`).
pub fn count_neighbors(
    points: &[CapturePoint],
    radius_m: f64,
) -> Result<BTreeMap<String, usize>, CorpusError> {
    let grid = SpatialGrid::build(points, radius_m)?;
    let mut counts = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let mut n = 0usize;
        grid.visit_candidates(p.lat, p.lon, |j| {
            if j != i {
                let q = &points[j];
                if haversine_m(p.lat, p.lon, q.lat, q.lon) <= radius_m {
                    n += 1;
                }
            }
        });
        counts.insert(p.id.clone(), n);
    }
    Ok(counts)
}

/// Draw a uniform sample of `n` candidate points without replacement,
/// seeded for reproducibility. `n >= points.len()` returns all points.
pub fn sample_candidates(points: &[CapturePoint], n: usize, seed: u64) -> Vec<CapturePoint> {
    if n >= points.len() {
        return points.to_vec();
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut picked: Vec<usize> = order.into_iter().take(n).collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| points[i].clone()).collect()
}

/// Greedy non-maximum suppression: repeatedly select the candidate with the
/// highest neighbor count (ties broken by ascending id) whose distance to
/// every already-selected location exceeds `suppress_radius_m`.
///
/// Candidates missing from `counts` are treated as count 0. The returned
/// locations are in selection order (descending count).
pub fn select_locations_nms(
    points: &[CapturePoint],
    counts: &BTreeMap<String, usize>,
    suppress_radius_m: f64,
) -> Result<Vec<Location>, CorpusError> {
    let grid_radius = if suppress_radius_m.is_finite() && suppress_radius_m > 0.0 {
        suppress_radius_m
    } else {
        return Err(CorpusError::BadRadius(suppress_radius_m));
    };

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let ca = counts.get(&points[a].id).copied().unwrap_or(0);
        let cb = counts.get(&points[b].id).copied().unwrap_or(0);
        cb.cmp(&ca).then_with(|| points[a].id.cmp(&points[b].id))
    });

    let mut selected: Vec<Location> = Vec::new();
    let mut selected_points: Vec<CapturePoint> = Vec::new();
    // Rebuilding a grid per selection would be quadratic; instead keep a grid
    // over *selected* points only, refreshed geometrically as it grows.
    let mut grid = SpatialGrid::build(&selected_points, grid_radius)?;
    let mut grid_len = 0usize;

    for idx in order {
        let p = &points[idx];
        if grid_len < selected_points.len() {
            if selected_points.len() >= (grid_len.max(1)) * 2 || grid_len == 0 {
                grid = SpatialGrid::build(&selected_points, grid_radius)?;
                grid_len = selected_points.len();
            }
        }
        let mut suppressed = false;
        grid.visit_candidates(p.lat, p.lon, |j| {
            if !suppressed {
                let q = &selected_points[j];
                if haversine_m(p.lat, p.lon, q.lat, q.lon) <= suppress_radius_m {
                    suppressed = true;
                }
            }
        });
        // The grid may lag behind; check the tail it has not indexed yet.
        if !suppressed {
            for q in &selected_points[grid_len..] {
                if haversine_m(p.lat, p.lon, q.lat, q.lon) <= suppress_radius_m {
                    suppressed = true;
                    break;
                }
            }
        }
        if !suppressed {
            selected.push(Location {
                id: p.id.clone(),
                lat: p.lat,
                lon: p.lon,
                heading: p.heading,
                neighbor_count: counts.get(&p.id).copied().unwrap_or(0),
            });
            selected_points.push(p.clone());
        }
    }
    Ok(selected)
}
