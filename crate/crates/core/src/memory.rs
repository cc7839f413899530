//! Scalar-count cost model for per-tuple gradient storage.
//!
//! For a dense layer with weight `p×d` and a tuple of `K` entities with `M`
//! tokens each, instantiating every per-token gradient holds `K·M·p·d`
//! scalars; the stacked-factor form holds `K·M·(p+d)` plus the `p·d` result.
//! With a rank-`r` adapter the factors grow by `2r` per token and the result
//! shrinks to the adapter shapes `(p+d)·r`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryMode {
    Full,
    Adapter { rank: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub naive_scalars: u128,
    pub lowrank_scalars: u128,
}

/// Exact scalar counts summed over `layers` given as `(p, d)`.
pub fn memory_estimate(k: u64, m: u64, layers: &[(u64, u64)], mode: MemoryMode) -> Result<MemoryEstimate> {
    if k == 0 || m == 0 || layers.iter().any(|&(p, d)| p == 0 || d == 0) {
        return Err(invalid("all dimensions must be positive"));
    }
    if let MemoryMode::Adapter { rank: 0 } = mode {
        return Err(invalid("adapter rank must be positive"));
    }
    let km = u128::from(k) * u128::from(m);
    let mut naive = 0u128;
    let mut lowrank = 0u128;
    for &(p, d) in layers {
        let (p, d) = (u128::from(p), u128::from(d));
        match mode {
            MemoryMode::Full => {
                naive += km * p * d;
                lowrank += km * (p + d) + p * d;
            }
            MemoryMode::Adapter { rank } => {
                let r = u128::from(rank);
                naive += km * (p + d) * r;
                lowrank += km * (p + d + 2 * r) + (p + d) * r;
            }
        }
    }
    Ok(MemoryEstimate {
        naive_scalars: naive,
        lowrank_scalars: lowrank,
    })
}

/// Live/peak scalar counter for instrumented code paths.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryMeter {
    live: usize,
    peak: usize,
}

impl MemoryMeter {
    pub fn alloc(&mut self, n: usize) {
        self.live += n;
        self.peak = self.peak.max(self.live);
    }

    pub fn free(&mut self, n: usize) {
        self.live = self.live.saturating_sub(n);
    }

    pub fn live(&self) -> usize {
        self.live
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_dimensions() {
        let e = memory_estimate(1, 1, &[(1, 1)], MemoryMode::Full).unwrap();
        assert_eq!((e.naive_scalars, e.lowrank_scalars), (1, 3));
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(memory_estimate(0, 1, &[(1, 1)], MemoryMode::Full).is_err());
        assert!(memory_estimate(1, 1, &[(1, 1)], MemoryMode::Adapter { rank: 0 }).is_err());
    }

    #[test]
    fn layers_add_up() {
        let one = memory_estimate(4, 8, &[(16, 32)], MemoryMode::Full).unwrap();
        let two = memory_estimate(4, 8, &[(16, 32), (16, 32)], MemoryMode::Full).unwrap();
        assert_eq!(two.naive_scalars, 2 * one.naive_scalars);
        assert_eq!(two.lowrank_scalars, 2 * one.lowrank_scalars);
    }

    #[test]
    fn meter_tracks_peak() {
        let mut m = MemoryMeter::default();
        m.alloc(10);
        m.alloc(5);
        m.free(12);
        m.alloc(2);
        assert_eq!((m.live(), m.peak()), (5, 15));
    }
}
