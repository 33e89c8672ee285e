//! Random instance generation with per-instance derived RNG substreams, so a
//! dataset is a stable function of (parameters, seed) and a longer run of the
//! same generator extends a shorter one.

use super::{MisInstance, TspInstance};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};
use rand::Rng as _;

/// Generates `count` uniform TSP instances with `n` nodes in the unit square.
pub fn gen_tsp(n: usize, count: usize, seed: u64) -> Result<Vec<TspInstance>> {
    if n < 3 {
        return Err(Error::InvalidInstance(format!("TSP needs n >= 3, got {n}")));
    }
    if count < 1 {
        return Err(Error::InvalidInstance("count must be >= 1".into()));
    }
    let t = tag("gen-tsp");
    (0..count)
        .map(|k| {
            let mut rng = derive_rng(seed, &[t, n as u64, k as u64]);
            let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
            TspInstance::new(format!("tsp{n}-s{seed}-{k}"), coords)
        })
        .collect()
}

/// Generates `count` Erdos-Renyi G(n, p) graphs.
pub fn gen_er(n: usize, p: f64, count: usize, seed: u64) -> Result<Vec<MisInstance>> {
    if n < 1 {
        return Err(Error::InvalidInstance(format!("MIS needs n >= 1, got {n}")));
    }
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(Error::InvalidInstance(format!("edge probability {p} outside [0,1]")));
    }
    if count < 1 {
        return Err(Error::InvalidInstance("count must be >= 1".into()));
    }
    let t = tag("gen-er");
    (0..count)
        .map(|k| {
            let mut rng = derive_rng(seed, &[t, n as u64, k as u64]);
            let mut edges = Vec::new();
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.gen::<f64>() < p {
                        edges.push((u as u32, v as u32));
                    }
                }
            }
            MisInstance::new(format!("er{n}-p{p}-s{seed}-{k}"), n, edges)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsp_generation_is_deterministic_and_in_range() {
        let a = gen_tsp(4, 3, 11).unwrap();
        let b = gen_tsp(4, 3, 11).unwrap();
        assert_eq!(a, b);
        for inst in &a {
            assert_eq!(inst.n(), 4);
            for c in &inst.coords {
                assert!((0.0..=1.0).contains(&c[0]) && (0.0..=1.0).contains(&c[1]));
            }
        }
        // Extending the count preserves the prefix.
        let longer = gen_tsp(4, 5, 11).unwrap();
        assert_eq!(&longer[..3], &a[..]);
    }

    #[test]
    fn tsp_rejects_n_below_three() {
        assert!(gen_tsp(2, 1, 0).is_err());
    }

    #[test]
    fn er_extremes() {
        let empty = gen_er(5, 0.0, 2, 3).unwrap();
        assert!(empty.iter().all(|g| g.edges.is_empty()));
        let complete = gen_er(5, 1.0, 2, 3).unwrap();
        assert!(complete.iter().all(|g| g.edges.len() == 10));
    }

    #[test]
    fn er_rejects_bad_probability() {
        assert!(gen_er(5, -0.1, 1, 0).is_err());
        assert!(gen_er(5, 1.5, 1, 0).is_err());
    }

    #[test]
    fn er_edge_count_tracks_binomial() {
        // 1000 draws of G(12, 0.3): total edge count across instances should
        // land within the 99% interval of Binomial(66_000, 0.3).
        let graphs = gen_er(12, 0.3, 1000, 42).unwrap();
        let total: u64 = graphs.iter().map(|g| g.edges.len() as u64).sum();
        let trials = 66.0 * 1000.0;
        let mean = trials * 0.3;
        let sd: f64 = (trials * 0.3 * 0.7_f64).sqrt();
        // 2.576 sigma ~ 99% two-sided.
        assert!(
            (total as f64 - mean).abs() < 2.576 * sd,
            "total {total} outside 99% interval around {mean}"
        );
    }
}
