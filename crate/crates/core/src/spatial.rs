//! Uniform-grid spatial hash over planar locations.
//!
//! Mining asks "which samples lie within r of x" once per anchor; a grid with
//! cell size close to the query radius answers that by visiting a handful of
//! cells, and never needs the full pairwise distance matrix.

use std::collections::HashMap;

use crate::geodata::{geo_distance, Location};

#[derive(Debug, Clone)]
pub struct GridIndex {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
    locations: Vec<Location>,
}

impl GridIndex {
    /// Builds the index. A non-positive or non-finite `cell` falls back to 1 m.
    pub fn new(locations: &[Location], cell: f64) -> Self {
        let cell = if cell.is_finite() && cell > 0.0 { cell } else { 1.0 };
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, loc) in locations.iter().enumerate() {
            cells.entry(key(loc, cell)).or_default().push(i);
        }
        Self {
            cell,
            cells,
            locations: locations.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn location(&self, i: usize) -> Location {
        self.locations[i]
    }

    /// Indices of all points with `geo_distance(center, p) <= radius`, ascending.
    pub fn within(&self, center: Location, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if radius.is_nan() || radius < 0.0 {
            return out;
        }
        let reach = (radius / self.cell).ceil() as i64;
        let (cx, cy) = key(&center, self.cell);
        // wide queries are cheaper as a scan than as a cell sweep
        if (2 * reach + 1).saturating_mul(2 * reach + 1) as usize > self.cells.len() {
            out.extend(
                (0..self.locations.len())
                    .filter(|&i| geo_distance(center, self.locations[i]) <= radius),
            );
            return out;
        }
        for gx in cx - reach..=cx + reach {
            for gy in cy - reach..=cy + reach {
                if let Some(bucket) = self.cells.get(&(gx, gy)) {
                    out.extend(
                        bucket
                            .iter()
                            .copied()
                            .filter(|&i| geo_distance(center, self.locations[i]) <= radius),
                    );
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Index of the nearest point, ties to the lowest index.
    pub fn nearest(&self, center: Location) -> Option<usize> {
        if self.locations.is_empty() {
            return None;
        }
        let mut radius = self.cell;
        loop {
            let hits = self.within(center, radius);
            if !hits.is_empty() {
                // the true nearest lies within the best hit's distance
                let best = hits
                    .iter()
                    .map(|&i| geo_distance(center, self.locations[i]))
                    .fold(f64::INFINITY, f64::min);
                return self
                    .within(center, best)
                    .into_iter()
                    .min_by(|&a, &b| {
                        geo_distance(center, self.locations[a])
                            .total_cmp(&geo_distance(center, self.locations[b]))
                            .then(a.cmp(&b))
                    });
            }
            radius *= 2.0;
        }
    }
}

fn key(loc: &Location, cell: f64) -> (i64, i64) {
    (
        (loc[0] / cell).floor() as i64,
        (loc[1] / cell).floor() as i64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn within_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Location> = (0..500)
            .map(|_| [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)])
            .collect();
        let grid = GridIndex::new(&pts, 7.0);
        for _ in 0..100 {
            let c = [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)];
            let r = rng.random_range(0.0..30.0);
            let want: Vec<usize> = (0..pts.len())
                .filter(|&i| geo_distance(c, pts[i]) <= r)
                .collect();
            assert_eq!(grid.within(c, r), want);
        }
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Location> = (0..300)
            .map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)])
            .collect();
        let grid = GridIndex::new(&pts, 2.0);
        for _ in 0..200 {
            let c = [rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0)];
            let want = (0..pts.len())
                .min_by(|&a, &b| geo_distance(c, pts[a]).total_cmp(&geo_distance(c, pts[b])))
                .unwrap();
            assert_eq!(grid.nearest(c), Some(want));
        }
    }

    #[test]
    fn empty_grid() {
        let grid = GridIndex::new(&[], 1.0);
        assert!(grid.within([0.0, 0.0], 10.0).is_empty());
        assert_eq!(grid.nearest([0.0, 0.0]), None);
    }
}
