//! Shared fixtures for the benchmarks.

use faer::Mat;
use randsource::geometry::{Grid, ReceiverRing};

pub fn grid(n: usize) -> Grid {
    Grid::new(n, -1.0, 1.0).expect("valid grid")
}

pub fn ring() -> ReceiverRing {
    ReceiverRing::new(32, 2.0).expect("valid ring")
}

/// Deterministic `rows × cols` snapshot matrix with a decaying spectrum.
pub fn snapshots(rows: usize, cols: usize, seed: f64) -> Mat<f64> {
    Mat::from_fn(rows, cols, |r, c| {
        let (r, c) = (r as f64, c as f64);
        (0..8)
            .map(|k| {
                let k = k as f64;
                (0.37 * (k + 1.0) * r + seed * (c + 1.0) * (k + 0.5)).sin() / (1.0 + k)
            })
            .sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshots_are_deterministic() {
        let a = snapshots(10, 4, 0.3);
        let b = snapshots(10, 4, 0.3);
        assert!((0..10).all(|r| (0..4).all(|c| a[(r, c)] == b[(r, c)])));
    }
}
