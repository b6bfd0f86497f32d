//! Reproducible Gaussian increments.
//!
//! Every path owns two ChaCha substreams keyed by `(master seed, path index)`:
//! stream [`STREAM_W`] drives the model noise `W` and stream [`STREAM_W_TILDE`]
//! drives the independent perturbation `W~`. Substreams never overlap, so paths
//! can be generated in any order or in parallel without changing a single bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grid::TimeGrid;

pub const STREAM_W: u64 = 0x57;
pub const STREAM_W_TILDE: u64 = 0x7757;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-path seed derived from the master seed and the path index.
pub fn path_seed(master: u64, path_index: u64) -> u64 {
    splitmix64(master ^ splitmix64(path_index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

fn substream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Brownian increments for one path: `dw` is `n_steps x noise_dim`,
/// `dw_tilde` is `n_steps x state_dim`, both row-major with variance `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianDriver {
    pub master_seed: u64,
    pub path_index: u64,
    pub seed: u64,
    pub grid: TimeGrid,
    pub noise_dim: usize,
    pub state_dim: usize,
    pub dw: Vec<f64>,
    pub dw_tilde: Vec<f64>,
}

impl BrownianDriver {
    pub fn generate(
        master_seed: u64,
        path_index: u64,
        grid: TimeGrid,
        state_dim: usize,
        noise_dim: usize,
    ) -> Self {
        let seed = path_seed(master_seed, path_index);
        let scale = grid.dt.sqrt();
        let draw = |tag: u64, width: usize| -> Vec<f64> {
            let mut rng = substream(seed, tag);
            (0..grid.n_steps * width)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect()
        };
        Self {
            master_seed,
            path_index,
            seed,
            grid,
            noise_dim,
            state_dim,
            dw: draw(STREAM_W, noise_dim),
            dw_tilde: draw(STREAM_W_TILDE, state_dim),
        }
    }

    /// Increment of `W` over step `(s_{k-1}, s_k]`, `k >= 1`.
    pub fn dw(&self, k: usize) -> &[f64] {
        let w = self.noise_dim;
        &self.dw[(k - 1) * w..k * w]
    }

    /// Increment of `W~` over step `(s_{k-1}, s_k]`, `k >= 1`.
    pub fn dw_tilde(&self, k: usize) -> &[f64] {
        let w = self.state_dim;
        &self.dw_tilde[(k - 1) * w..k * w]
    }

    /// Running sum of `W~` at every node (starting from zero at `s_0`).
    pub fn cumulative_tilde(&self) -> Vec<Vec<f64>> {
        let mut acc = vec![0.0; self.state_dim];
        let mut out = Vec::with_capacity(self.grid.n_nodes());
        out.push(acc.clone());
        for k in 1..=self.grid.n_steps {
            for (a, d) in acc.iter_mut().zip(self.dw_tilde(k)) {
                *a += d;
            }
            out.push(acc.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::over(1.0, 500).unwrap()
    }

    #[test]
    fn same_seed_same_bits() {
        let a = BrownianDriver::generate(7, 3, grid(), 2, 1);
        let b = BrownianDriver::generate(7, 3, grid(), 2, 1);
        assert_eq!(a, b);
        let c = BrownianDriver::generate(7, 4, grid(), 2, 1);
        assert_ne!(a.dw, c.dw);
    }

    #[test]
    fn streams_are_distinct_and_scaled() {
        let g = TimeGrid::over(1.0, 20_000).unwrap();
        let d = BrownianDriver::generate(11, 0, g, 1, 1);
        assert_ne!(d.dw[..16], d.dw_tilde[..16]);
        let var = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        // variance dt within a few percent
        assert!((var(&d.dw) / g.dt - 1.0).abs() < 0.05);
        assert!((var(&d.dw_tilde) / g.dt - 1.0).abs() < 0.05);
        // sample correlation between the two streams is small
        let cov: f64 = d.dw.iter().zip(&d.dw_tilde).map(|(a, b)| a * b).sum::<f64>()
            / d.dw.len() as f64;
        assert!((cov / g.dt).abs() < 0.05);
    }

    #[test]
    fn cumulative_tilde_starts_at_zero() {
        let d = BrownianDriver::generate(1, 0, grid(), 2, 2);
        let c = d.cumulative_tilde();
        assert_eq!(c.len(), 501);
        assert_eq!(c[0], vec![0.0, 0.0]);
        assert!((c[1][1] - d.dw_tilde(1)[1]).abs() == 0.0);
    }
}
