//! Parcel adjacency for message passing.

use crate::domain::CityInstance;

/// Undirected graph stored as sorted neighbor lists, no self loops.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    adj: Vec<Vec<usize>>,
}

impl Graph {
    /// Build from an edge list; duplicates and self loops are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            assert!(a < n && b < n, "edge ({a}, {b}) outside {n} nodes");
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for l in &mut adj {
            l.sort_unstable();
            l.dedup();
        }
        Self { adj }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adj.iter().map(Vec::len).collect()
    }

    pub fn median_degree(&self) -> f64 {
        let mut d = self.degrees();
        if d.is_empty() {
            return 0.0;
        }
        d.sort_unstable();
        let m = d.len() / 2;
        if d.len() % 2 == 1 {
            d[m] as f64
        } else {
            0.5 * (d[m - 1] + d[m]) as f64
        }
    }

    /// Connect parcels closer than a radius chosen so that the median parcel
    /// has about `target` neighbors (the median distance to the target-th
    /// nearest neighbor). Uses a uniform grid, so cost is near-linear.
    pub fn distance_threshold(city: &CityInstance, target: usize) -> Self {
        let pts: Vec<(f64, f64)> = city.parcels.iter().map(|p| p.coordinates()).collect();
        let n = pts.len();
        if n <= 1 || target == 0 {
            return Self::from_edges(n, &[]);
        }
        let k = target.min(n - 1);
        let (minx, maxx, miny, maxy) = pts.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
        );
        let span = (maxx - minx).max(maxy - miny).max(1e-9);
        // Cell size giving about `k` points per cell on average.
        let cells = ((n as f64 / (k as f64 + 1.0)).sqrt().ceil() as usize).max(1);
        let cell = span / cells as f64 * (1.0 + 1e-12);
        let key = |x: f64, y: f64| {
            (
                (((x - minx) / cell) as usize).min(cells - 1),
                (((y - miny) / cell) as usize).min(cells - 1),
            )
        };
        let mut grid = vec![Vec::new(); cells * cells];
        for (i, &(x, y)) in pts.iter().enumerate() {
            let (cx, cy) = key(x, y);
            grid[cy * cells + cx].push(i);
        }
        let near = |i: usize, radius: f64| -> Vec<(f64, usize)> {
            let (x, y) = pts[i];
            let reach = (radius / cell).ceil() as isize;
            let (cx, cy) = key(x, y);
            let mut out = Vec::new();
            for gy in (cy as isize - reach).max(0)..=(cy as isize + reach).min(cells as isize - 1) {
                for gx in (cx as isize - reach).max(0)..=(cx as isize + reach).min(cells as isize - 1) {
                    for &j in &grid[gy as usize * cells + gx as usize] {
                        if j != i {
                            let d = ((pts[j].0 - x).powi(2) + (pts[j].1 - y).powi(2)).sqrt();
                            if d <= radius {
                                out.push((d, j));
                            }
                        }
                    }
                }
            }
            out
        };
        // k-th nearest neighbor distance per parcel, growing the search ring.
        let mut kth: Vec<f64> = (0..n)
            .map(|i| {
                let mut radius = cell;
                loop {
                    let mut found = near(i, radius);
                    if found.len() >= k || radius > 2.0 * span {
                        found.sort_by(|a, b| a.0.total_cmp(&b.0));
                        return found.get(k - 1).map_or(radius, |f| f.0);
                    }
                    radius *= 2.0;
                }
            })
            .collect();
        kth.sort_by(f64::total_cmp);
        let radius = kth[n / 2];
        let mut edges = Vec::new();
        for i in 0..n {
            for (_, j) in near(i, radius) {
                if i < j {
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(n, &edges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citygen::{generate_city, CityGenSpec};

    #[test]
    fn edges_are_symmetric_without_self_loops() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 0), (2, 2), (1, 3)]);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0, 3]);
        assert!(g.neighbors(2).is_empty());
    }

    #[test]
    fn distance_graph_has_median_degree_near_target() {
        let city = generate_city(&CityGenSpec::desk(600, 3)).unwrap();
        let g = Graph::distance_threshold(&city, 8);
        let m = g.median_degree();
        assert!((6.0..=10.0).contains(&m), "median degree {m}");
        // brute-force agreement on the edge set for the chosen radius
        for i in 0..city.n() {
            for &j in g.neighbors(i) {
                assert!(g.neighbors(j).contains(&i));
            }
        }
    }
}
