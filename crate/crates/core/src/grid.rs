//! Uniform time grids and reproducible Brownian path ensembles.
//!
//! Every ensemble carries two independent sets of paths drawn from disjoint
//! counter-based streams of the same seed:
//!
//! * the **primary** set, on which every solver reports its output, and
//! * the **regression** set, used only to fit the least-squares estimators of
//!   conditional expectations.
//!
//! Because the estimators are fitted on the regression set and then applied
//! to primary paths through node-local features, a primary output at node `j`
//! is a function of primary increments with index `< j` only. This is what
//! makes the adaptedness (scramble) test exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_budget, Error, Result, DEFAULT_MEMORY_BUDGET};

/// Uniform discretisation of `[s_lo, s_hi]` into `n_steps` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    s_lo: f64,
    s_hi: f64,
    n_steps: usize,
    dt: f64,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(s_lo: f64, s_hi: f64, n_steps: usize) -> Result<Self> {
        if !s_lo.is_finite() || !s_hi.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "bounds must be finite, got [{s_lo}, {s_hi}]"
            )));
        }
        if s_lo >= s_hi {
            return Err(Error::InvalidGrid(format!(
                "lower bound {s_lo} must be below upper bound {s_hi}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
        }
        let dt = (s_hi - s_lo) / n_steps as f64;
        let mut nodes: Vec<f64> = (0..=n_steps).map(|i| s_lo + i as f64 * dt).collect();
        nodes[n_steps] = s_hi;
        Ok(Self {
            s_lo,
            s_hi,
            n_steps,
            dt,
            nodes,
        })
    }

    pub fn s_lo(&self) -> f64 {
        self.s_lo
    }

    pub fn s_hi(&self) -> f64 {
        self.s_hi
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of nodes, `n_steps + 1`.
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    pub fn horizon(&self) -> f64 {
        self.s_hi - self.s_lo
    }

    /// Index of the node closest to `t`.
    pub fn nearest_node(&self, t: f64) -> usize {
        let raw = ((t - self.s_lo) / self.dt).round();
        raw.clamp(0.0, self.n_steps as f64) as usize
    }

    /// Converts a length into a whole number of steps, if it is one.
    pub fn steps_for(&self, len: f64) -> Option<usize> {
        let k = len / self.dt;
        let r = k.round();
        if r >= 1.0 && (k - r).abs() <= 1e-9 * r.max(1.0) {
            Some(r as usize)
        } else {
            None
        }
    }

    /// The sub-grid starting at node `from`, sharing the upper bound.
    pub fn restrict(&self, from: usize) -> Result<Self> {
        if from >= self.n_steps {
            return Err(Error::InvalidGrid(format!(
                "cannot restrict a {}-step grid to start at node {from}",
                self.n_steps
            )));
        }
        let mut g = Self::new(self.nodes[from], self.s_hi, self.n_steps - from)?;
        // keep the parent's node values so that restricted and full solves agree
        g.nodes.copy_from_slice(&self.nodes[from..]);
        g.dt = self.dt;
        Ok(g)
    }
}

/// Builds the uniform grid on `[s_lo, s_hi]` with `n_steps` steps.
pub fn make_grid(s_lo: f64, s_hi: f64, n_steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(s_lo, s_hi, n_steps)
}

/// Selects one of the two path sets of an ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathRole {
    Primary,
    Regression,
}

impl PathRole {
    pub const BOTH: [PathRole; 2] = [PathRole::Primary, PathRole::Regression];
}

/// Brownian increments for `n_paths` paths, stored path-major as
/// `[path][step][coordinate]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSet {
    n_paths: usize,
    n_steps: usize,
    dim: usize,
    increments: Vec<f64>,
}

impl PathSet {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Increment `W(s_{step+1}) - W(s_step)` of coordinate `k`.
    #[inline]
    pub fn increment(&self, path: usize, step: usize, k: usize) -> f64 {
        self.increments[(path * self.n_steps + step) * self.dim + k]
    }

    /// All coordinates of one increment.
    #[inline]
    pub fn increment_vec(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.n_steps + step) * self.dim;
        &self.increments[o..o + self.dim]
    }

    /// `W(s_node) - W(s_0)` of coordinate `k`, as a prefix sum.
    pub fn brownian(&self, path: usize, node: usize, k: usize) -> f64 {
        (0..node).map(|i| self.increment(path, i, k)).sum()
    }

    /// The whole path `W(s_i) - W(s_0)`, `i = 0..=n_steps`, laid out `[node][k]`.
    pub fn brownian_path(&self, path: usize) -> Vec<f64> {
        let mut out = vec![0.0; (self.n_steps + 1) * self.dim];
        for i in 0..self.n_steps {
            for k in 0..self.dim {
                out[(i + 1) * self.dim + k] = out[i * self.dim + k] + self.increment(path, i, k);
            }
        }
        out
    }

    fn generate(
        seed: u64,
        stream_of: impl Fn(usize) -> u64 + Sync,
        m: usize,
        n: usize,
        d: usize,
        sd: f64,
    ) -> Self {
        let mut increments = vec![0.0; m * n * d];
        if n * d > 0 {
            increments
                .par_chunks_mut(n * d)
                .enumerate()
                .for_each(|(path, chunk)| fill_normals(seed, stream_of(path), sd, chunk));
        }
        Self {
            n_paths: m,
            n_steps: n,
            dim: d,
            increments,
        }
    }

    fn restrict(&self, from: usize) -> Self {
        let n = self.n_steps - from;
        let mut increments = Vec::with_capacity(self.n_paths * n * self.dim);
        for path in 0..self.n_paths {
            let o = (path * self.n_steps + from) * self.dim;
            increments.extend_from_slice(&self.increments[o..o + n * self.dim]);
        }
        Self {
            n_paths: self.n_paths,
            n_steps: n,
            dim: self.dim,
            increments,
        }
    }

    fn truncate(&self, n_paths: usize) -> Self {
        Self {
            n_paths,
            n_steps: self.n_steps,
            dim: self.dim,
            increments: self.increments[..n_paths * self.n_steps * self.dim].to_vec(),
        }
    }
}

fn fill_normals(seed: u64, stream: u64, sd: f64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = sd * z;
    }
}

fn primary_stream(path: usize) -> u64 {
    2 * path as u64
}

fn regression_stream(path: usize) -> u64 {
    2 * path as u64 + 1
}

/// A seeded ensemble of Brownian paths on a [`TimeGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    seed: u64,
    primary: PathSet,
    regression: PathSet,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_paths(&self) -> usize {
        self.primary.n_paths
    }

    pub fn dim(&self) -> usize {
        self.primary.dim
    }

    pub fn primary(&self) -> &PathSet {
        &self.primary
    }

    pub fn regression(&self) -> &PathSet {
        &self.regression
    }

    pub fn set(&self, role: PathRole) -> &PathSet {
        match role {
            PathRole::Primary => &self.primary,
            PathRole::Regression => &self.regression,
        }
    }

    /// The same paths seen from node `from` onwards, on the restricted grid.
    pub fn restrict(&self, from: usize) -> Result<Self> {
        Ok(Self {
            grid: self.grid.restrict(from)?,
            seed: self.seed,
            primary: self.primary.restrict(from),
            regression: self.regression.restrict(from),
        })
    }

    /// The first `n_paths` paths of both sets.
    pub fn truncate(&self, n_paths: usize) -> Result<Self> {
        if n_paths == 0 || n_paths > self.n_paths() {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {n_paths} of {} paths",
                self.n_paths()
            )));
        }
        Ok(Self {
            grid: self.grid.clone(),
            seed: self.seed,
            primary: self.primary.truncate(n_paths),
            regression: self.regression.truncate(n_paths),
        })
    }

    /// Copy of the ensemble whose primary increments with index `>= from`
    /// are replaced by fresh draws. The regression set is left untouched.
    pub fn with_scrambled_future(&self, from: usize, salt: u64) -> Self {
        let mut out = self.clone();
        let n = self.grid.n_steps();
        let d = self.dim();
        if from >= n {
            return out;
        }
        let seed = self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5CA3_B1E5;
        let sd = self.grid.dt().sqrt();
        out.primary
            .increments
            .par_chunks_mut(n * d)
            .enumerate()
            .for_each(|(path, chunk)| {
                let mut fresh = vec![0.0; n * d];
                fill_normals(seed, primary_stream(path), sd, &mut fresh);
                chunk[from * d..].copy_from_slice(&fresh[from * d..]);
            });
        out
    }
}

/// Simulates `n_paths` Brownian paths of dimension `d` with the default
/// memory budget.
pub fn simulate_paths(
    grid: &TimeGrid,
    n_paths: usize,
    d: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_paths_with_budget(grid, n_paths, d, seed, DEFAULT_MEMORY_BUDGET)
}

/// Like [`simulate_paths`] with an explicit byte budget for the increments.
pub fn simulate_paths_with_budget(
    grid: &TimeGrid,
    n_paths: usize,
    d: usize,
    seed: u64,
    budget: u128,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    if d == 0 {
        return Err(Error::InvalidArgument(
            "Brownian dimension must be at least 1".into(),
        ));
    }
    let elements = (n_paths as u128) * (grid.n_steps() as u128) * (d as u128) * 2;
    check_budget("path increments", elements, budget)?;
    let sd = grid.dt().sqrt();
    let n = grid.n_steps();
    let primary = PathSet::generate(seed, primary_stream, n_paths, n, d, sd);
    let regression = PathSet::generate(seed, regression_stream, n_paths, n, d, sd);
    Ok(PathEnsemble {
        grid: grid.clone(),
        seed,
        primary,
        regression,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes_match_arithmetic() {
        let g = make_grid(0.0, 1.0, 4).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = make_grid(0.0, 1.0, 1).unwrap();
        assert_eq!(g.nodes(), &[0.0, 1.0]);
        assert_eq!(g.dt(), 1.0);
        let g = make_grid(0.5, 1.5, 2).unwrap();
        assert_eq!(g.nodes(), &[0.5, 1.0, 1.5]);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(make_grid(1.0, 1.0, 4).is_err());
        assert!(make_grid(2.0, 1.0, 4).is_err());
        assert!(make_grid(0.0, 1.0, 0).is_err());
        assert!(make_grid(f64::NAN, 1.0, 4).is_err());
        assert!(make_grid(0.0, f64::INFINITY, 4).is_err());
    }

    #[test]
    fn grid_spacing_is_uniform() {
        let g = make_grid(0.3, 2.7, 37).unwrap();
        assert!(((g.dt() * 37.0) - 2.4).abs() <= 1e-12 * 2.4);
        for w in g.nodes().windows(2) {
            assert!(((w[1] - w[0]) - g.dt()).abs() < 1e-12);
        }
        assert_eq!(g.nodes()[0], 0.3);
        assert_eq!(g.nodes()[37], 2.7);
    }

    #[test]
    fn same_seed_same_paths() {
        let g = make_grid(0.0, 1.0, 4).unwrap();
        let a = simulate_paths(&g, 1, 1, 7).unwrap();
        let b = simulate_paths(&g, 1, 1, 7).unwrap();
        assert_eq!(a, b);
        let c = simulate_paths(&g, 1, 1, 8).unwrap();
        assert_ne!(a.primary().increments(), c.primary().increments());
    }

    #[test]
    fn path_prefix_is_stable_in_path_count() {
        let g = make_grid(0.0, 1.0, 8).unwrap();
        let a = simulate_paths(&g, 10, 1, 7).unwrap();
        let b = simulate_paths(&g, 20, 1, 7).unwrap();
        let n = 10 * 8;
        assert_eq!(a.primary().increments(), &b.primary().increments()[..n]);
        assert_eq!(
            a.regression().increments(),
            &b.regression().increments()[..n]
        );
        assert_eq!(b.truncate(10).unwrap(), a);
    }

    #[test]
    fn primary_and_regression_sets_differ() {
        let g = make_grid(0.0, 1.0, 8).unwrap();
        let a = simulate_paths(&g, 4, 2, 3).unwrap();
        assert_ne!(a.primary().increments(), a.regression().increments());
    }

    #[test]
    fn increment_variance_matches_step() {
        let g = make_grid(0.0, 1.0, 4).unwrap();
        let m = 100_000;
        let e = simulate_paths(&g, m, 1, 11).unwrap();
        let dt = g.dt();
        for step in 0..4 {
            let xs: Vec<f64> = (0..m).map(|p| e.primary().increment(p, step, 0)).collect();
            let mean = xs.iter().sum::<f64>() / m as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            // standard errors: sqrt(dt/m) for the mean, dt*sqrt(2/(m-1)) for the variance
            assert!(mean.abs() < 5.0 * (dt / m as f64).sqrt(), "mean {mean}");
            assert!(
                (var - dt).abs() < 5.0 * dt * (2.0 / (m - 1) as f64).sqrt(),
                "var {var}"
            );
            assert!((var - dt).abs() < 0.05 * dt);
        }
        let terminal: Vec<f64> = (0..m).map(|p| e.primary().brownian(p, 4, 0)).collect();
        let var = terminal.iter().map(|x| x * x).sum::<f64>() / m as f64;
        assert!((var - 1.0).abs() < 5.0 * (2.0 / m as f64).sqrt());
    }

    #[test]
    fn budget_is_enforced() {
        let g = make_grid(0.0, 1.0, 100).unwrap();
        let err = simulate_paths_with_budget(&g, 1000, 1, 1, 1024).unwrap_err();
        assert!(matches!(err, Error::Resource { .. }));
    }

    #[test]
    fn generation_is_thread_count_independent() {
        let g = make_grid(0.0, 1.0, 16).unwrap();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = one.install(|| simulate_paths(&g, 257, 2, 99).unwrap());
        let b = four.install(|| simulate_paths(&g, 257, 2, 99).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn scramble_keeps_past_and_regression_set() {
        let g = make_grid(0.0, 1.0, 8).unwrap();
        let e = simulate_paths(&g, 5, 1, 4).unwrap();
        let s = e.with_scrambled_future(3, 1);
        assert_eq!(e.regression(), s.regression());
        for p in 0..5 {
            for i in 0..3 {
                assert_eq!(
                    e.primary().increment(p, i, 0),
                    s.primary().increment(p, i, 0)
                );
            }
            for i in 3..8 {
                assert_ne!(
                    e.primary().increment(p, i, 0),
                    s.primary().increment(p, i, 0)
                );
            }
        }
    }

    #[test]
    fn restriction_shares_increments() {
        let g = make_grid(0.0, 1.0, 8).unwrap();
        let e = simulate_paths(&g, 3, 1, 4).unwrap();
        let r = e.restrict(5).unwrap();
        assert_eq!(r.grid().n_steps(), 3);
        assert_eq!(r.grid().s_lo(), 0.625);
        assert_eq!(
            r.primary().increment(2, 0, 0),
            e.primary().increment(2, 5, 0)
        );
    }
}
