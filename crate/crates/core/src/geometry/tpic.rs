use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{affine_forms, check_dim, enumerate_regions, region_affine_map, region_witness, sign_constraints, Bbox, REGION_TOL};
use crate::error::Result;
use crate::lp::max_margin_point;
use crate::net::{Network, Neuron, Sign, TernaryLabel};

/// Right-hand-side shift used to probe transversality.
const PROBE: f64 = 1e-7;
/// Two region maps closer than this count as equal.
pub const MAP_TOL: f64 = 1e-9;

/// Intersection search for one adjacent-layer pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairWitness {
    pub lower: Neuron,
    pub upper: Neuron,
    pub witness: Option<Vec<f64>>,
    /// Region on the positive side of both zero sets at the witness.
    pub region: Option<TernaryLabel>,
    pub margin: f64,
    pub transversal: bool,
}

impl PairWitness {
    pub fn ok(&self) -> bool {
        self.witness.is_some() && self.transversal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpicReport {
    pub pairs: Vec<PairWitness>,
    pub bbox: Bbox,
}

impl TpicReport {
    pub fn passed(&self) -> bool {
        self.pairs.iter().all(|p| p.ok())
    }

    pub fn witnessed(&self) -> usize {
        self.pairs.iter().filter(|p| p.ok()).count()
    }

    pub fn failures(&self) -> Vec<&PairWitness> {
        self.pairs.iter().filter(|p| !p.ok()).collect()
    }
}

/// Every adjacent pair `(l, i)`, `(l + 1, j)` with `l` hidden.
pub fn adjacent_pairs(net: &Network) -> Vec<(Neuron, Neuron)> {
    let arch = net.arch();
    let mut out = Vec::new();
    for l in 1..arch.depth() {
        for i in 0..arch.width(l) {
            for j in 0..arch.width(l + 1) {
                out.push((Neuron::new(l, i), Neuron::new(l + 1, j)));
            }
        }
    }
    out
}

/// Intersection point of the pair's zero sets on the closure of region `p`,
/// where `p` is positive for both neurons.
fn witness_in(net: &Network, p: &TernaryLabel, lower: Neuron, upper: Neuron, bbox: &Bbox) -> Result<Option<PairWitness>> {
    if p.get(lower.layer, lower.index) != Sign::Pos {
        return Ok(None);
    }
    if upper.layer < net.depth() && p.get(upper.layer, upper.index) != Sign::Pos {
        return Ok(None);
    }
    let forms = affine_forms(net, p);
    let fi = &forms[lower.layer - 1][lower.index];
    let fj = &forms[upper.layer - 1][upper.index];
    let cons = sign_constraints(&forms, p, &[lower, upper]);
    let Some(pt) = max_margin_point(&cons, &[fi.clone(), fj.clone()], bbox)? else { return Ok(None) };
    if pt.margin <= REGION_TOL {
        return Ok(None);
    }
    Ok(Some(PairWitness {
        lower,
        upper,
        transversal: transversal_at(&fi.a, &fj.a, pt.margin),
        witness: Some(pt.x),
        region: Some(p.clone()),
        margin: pt.margin,
    }))
}

/// Searches one pair of zero sets for a transversal intersection in `bbox`.
pub fn pair_witness(net: &Network, regions: &[TernaryLabel], lower: Neuron, upper: Neuron, bbox: &Bbox) -> Result<PairWitness> {
    let mut best = PairWitness { lower, upper, witness: None, region: None, margin: 0.0, transversal: false };
    for p in regions {
        let Some(c) = witness_in(net, p, lower, upper, bbox)? else { continue };
        let (transversal, margin) = (c.transversal, c.margin);
        let better = best.witness.is_none()
            || (transversal && !best.transversal)
            || (transversal == best.transversal && margin > best.margin);
        if better {
            best = c;
        }
        if best.transversal {
            break;
        }
    }
    Ok(best)
}

/// The two normals are independent and a small shift of both right-hand
/// sides moves the solution by less than the margin to the other folds.
fn transversal_at(ai: &[f64], aj: &[f64], margin: f64) -> bool {
    let n = ai.len();
    let ni = ai.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nj = aj.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 2 || ni == 0.0 || nj == 0.0 {
        return false;
    }
    let a = DMatrix::from_fn(2, n, |r, c| if r == 0 { ai[c] / ni } else { aj[c] / nj });
    let sv = a.singular_values();
    let (smin, smax) = (sv.min(), sv.max());
    if smax == 0.0 || smin / smax <= super::generic::GENERIC_TOL {
        return false;
    }
    let aat = &a * a.transpose();
    let Some(inv) = aat.try_inverse() else { return false };
    [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].iter().all(|&(s, t)| {
        let rhs = DVector::from_vec(vec![s * PROBE, t * PROBE]);
        let delta = a.transpose() * (&inv * rhs);
        delta.norm() < margin
    })
}

/// Searches every adjacent-layer pair of zero sets for an intersection.
pub fn check_tpic(net: &Network, bbox: &Bbox) -> Result<TpicReport> {
    check_dim(net, bbox)?;
    let regions: Vec<TernaryLabel> = enumerate_regions(net, bbox)?.into_iter().map(|r| r.pattern).collect();
    let pairs =
        adjacent_pairs(net).into_iter().map(|(a, b)| pair_witness(net, &regions, a, b, bbox)).collect::<Result<Vec<_>>>()?;
    Ok(TpicReport { pairs, bbox: bbox.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LraCheck {
    pub lower: Neuron,
    pub upper: Neuron,
    /// Intersection point the regions surround.
    pub witness: Option<Vec<f64>>,
    pub regions: Vec<TernaryLabel>,
    /// Regions that were not found near the witness.
    pub missing: Vec<TernaryLabel>,
    /// Smallest difference between two of the region maps.
    pub min_diff: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LraReport {
    pub checks: Vec<LraCheck>,
}

impl LraReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn lra_at(net: &Network, p: &PairWitness) -> Result<Option<LraCheck>> {
    let (Some(x), Some(base)) = (&p.witness, &p.region) else { return Ok(None) };
    let mut flips = vec![p.lower];
    if p.upper.layer < net.depth() {
        flips.push(p.upper);
    }
    let local = Bbox::around(x, (0.5 * p.margin).min(1e-3));
    let mut patterns = Vec::new();
    let mut missing = Vec::new();
    for mask in 0..(1usize << flips.len()) {
        let mut q: TernaryLabel = base.clone();
        for (b, n) in flips.iter().enumerate() {
            q.set(n.layer, n.index, if mask >> b & 1 == 1 { Sign::Neg } else { Sign::Pos });
        }
        if region_witness(net, &q, &local)?.is_none() {
            missing.push(q.clone());
        }
        patterns.push(q);
    }
    let maps = patterns.iter().map(|q| region_affine_map(net, q)).collect::<Result<Vec<_>>>()?;
    let mut min_diff = f64::INFINITY;
    for a in 0..maps.len() {
        for b in a + 1..maps.len() {
            min_diff = min_diff.min(maps[a].max_abs_diff(&maps[b]));
        }
    }
    Ok(Some(LraCheck {
        lower: p.lower,
        upper: p.upper,
        witness: Some(x.clone()),
        passed: missing.is_empty() && min_diff > MAP_TOL,
        regions: patterns,
        missing,
        min_diff,
    }))
}

/// For each pair, looks for an intersection point where the regions obtained
/// by choosing signs for the two neurons are all present nearby and carry
/// pairwise different affine maps.
///
/// The report's own witness is tried first, then one point per region
/// meeting both zero sets. The output layer is affine, so for a pair ending
/// in the output only the lower neuron's sign is varied.
pub fn check_lra_near_intersections(net: &Network, tpic: &TpicReport) -> Result<LraReport> {
    let mut regions: Option<Vec<TernaryLabel>> = None;
    let mut checks = Vec::new();
    for p in &tpic.pairs {
        let first = lra_at(net, p)?;
        if let Some(c) = first.as_ref().filter(|c| c.passed) {
            checks.push(c.clone());
            continue;
        }
        let mut found = None;
        if p.witness.is_some() {
            if regions.is_none() {
                regions = Some(enumerate_regions(net, &tpic.bbox)?.into_iter().map(|r| r.pattern).collect());
            }
            for q in regions.as_deref().unwrap_or_default() {
                if Some(q) == p.region.as_ref() {
                    continue;
                }
                let Some(w) = witness_in(net, q, p.lower, p.upper, &tpic.bbox)?.filter(|w| w.transversal) else { continue };
                if let Some(c) = lra_at(net, &w)?.filter(|c| c.passed) {
                    found = Some(c);
                    break;
                }
            }
        }
        checks.push(found.or(first).unwrap_or(LraCheck {
            lower: p.lower,
            upper: p.upper,
            witness: None,
            regions: Vec::new(),
            missing: Vec::new(),
            min_diff: 0.0,
            passed: false,
        }));
    }
    Ok(LraReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::default_bbox;
    use crate::net::{he_init, Architecture};

    #[test]
    fn depth_one_is_vacuous() {
        let a = Architecture::new(vec![2, 3]).unwrap();
        let net = he_init(&a, 0);
        let t = check_tpic(&net, &default_bbox(2)).unwrap();
        assert!(t.pairs.is_empty() && t.passed());
        assert!(check_lra_near_intersections(&net, &t).unwrap().passed());
    }

    #[test]
    fn witnesses_lie_on_both_zero_sets() {
        let a = Architecture::new(vec![2, 4, 3, 1]).unwrap();
        let net = he_init(&a, 3);
        let t = check_tpic(&net, &default_bbox(2)).unwrap();
        assert_eq!(t.pairs.len(), 4 * 3 + 3);
        for p in &t.pairs {
            if let Some(x) = &p.witness {
                let tr = net.trace(x).unwrap();
                assert!(tr.pre[p.lower.layer - 1][p.lower.index].abs() < 1e-9);
                assert!(tr.pre[p.upper.layer - 1][p.upper.index].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dead_upper_neuron_fails() {
        // second-layer neuron has negative weights and bias: never zero
        let a = Architecture::new(vec![2, 2, 1, 1]).unwrap();
        let net = Network::from_flat(&a, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, -1.0, -1.0, 1.0]).unwrap();
        let t = check_tpic(&net, &default_bbox(2)).unwrap();
        assert!(!t.passed());
        assert!(t.pairs.iter().filter(|p| p.upper.layer == 2).all(|p| p.witness.is_none()));
    }
}
