use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Network;

/// Smallest accepted ratio `sigma_min / sigma_max` for a subset of hyperplanes.
pub const GENERIC_TOL: f64 = 1e-9;
const SUBSET_CAP: u64 = 1 << 22;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGenericity {
    pub layer: usize,
    pub generic: bool,
    /// Worst `sigma_min / sigma_max` over the tested subsets.
    pub worst_ratio: f64,
    pub worst_subset: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenericityReport {
    pub layers: Vec<LayerGenericity>,
}

impl GenericityReport {
    pub fn generic(&self) -> bool {
        self.layers.iter().all(|l| l.generic)
    }
}

fn ratio(m: DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

fn binom(n: u64, k: u64) -> u64 {
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Checks every layer's hyperplane arrangement for genericity.
///
/// `p` hyperplanes in `R^n` meet in dimension `n - p` when their normals
/// are independent (`p <= n`); any `n + 1` of them must have no common
/// point, which holds when the augmented `[W | b]` block is nonsingular.
pub fn genericity_check(net: &Network) -> Result<GenericityReport> {
    let arch = net.arch();
    let mut layers = Vec::new();
    for l in 1..=arch.depth() {
        let n = arch.width(l - 1);
        let m = arch.width(l);
        let pmax = m.min(n + 1);
        let count: u64 = (1..=pmax as u64).map(|p| binom(m as u64, p)).fold(0, u64::saturating_add);
        if count > SUBSET_CAP {
            return Err(Error::Unsupported(format!("layer {l} has {count} hyperplane subsets")));
        }
        let mut worst = f64::INFINITY;
        let mut worst_subset = Vec::new();
        for p in 1..=pmax {
            let mut idx: Vec<usize> = (0..p).collect();
            loop {
                let r = if p <= n {
                    ratio(DMatrix::from_fn(p, n, |i, j| net.weight(l, idx[i], j)))
                } else {
                    ratio(DMatrix::from_fn(
                        p,
                        n + 1,
                        |i, j| {
                            if j < n {
                                net.weight(l, idx[i], j)
                            } else {
                                net.bias_at(l, idx[i])
                            }
                        },
                    ))
                };
                if r < worst {
                    worst = r;
                    worst_subset = idx.clone();
                }
                // next combination
                let mut k = p;
                while k > 0 && idx[k - 1] == m - p + k - 1 {
                    k -= 1;
                }
                if k == 0 {
                    break;
                }
                idx[k - 1] += 1;
                for j in k..p {
                    idx[j] = idx[j - 1] + 1;
                }
            }
        }
        layers.push(LayerGenericity { layer: l, generic: worst > GENERIC_TOL, worst_ratio: worst, worst_subset });
    }
    Ok(GenericityReport { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{he_init, Architecture};

    #[test]
    fn he_init_is_generic() {
        let a = Architecture::new(vec![5, 5, 5, 5, 1]).unwrap();
        assert!(genericity_check(&he_init(&a, 0)).unwrap().generic());
    }

    #[test]
    fn parallel_hyperplanes_are_not_generic() {
        let a = Architecture::new(vec![2, 3, 1]).unwrap();
        let net = Network::from_flat(&a, &[1.0, 2.0, 1.0, 2.0, 0.3, -1.0, 0.0, 1.0, 0.5, 1.0, 1.0, 1.0]).unwrap();
        let r = genericity_check(&net).unwrap();
        assert!(!r.layers[0].generic);
        assert_eq!(r.layers[0].worst_subset, vec![0, 1]);
    }

    #[test]
    fn concurrent_lines_are_not_generic() {
        // three lines through the origin
        let a = Architecture::new(vec![2, 3, 1]).unwrap();
        let net = Network::from_flat(&a, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(!genericity_check(&net).unwrap().layers[0].generic);
    }
}
