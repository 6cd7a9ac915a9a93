//! Exact geometry of low-dimensional input spaces.
//!
//! Activation regions are indexed by the signs of the hidden neurons. The
//! output layer is affine, so its zero sets cut regions without changing
//! the function's linear piece; they appear as bent hyperplanes but do not
//! split regions.

mod bent;
mod generic;
mod svg;
mod tpic;

pub use bent::{bent_hyperplanes, BentHyperplane, Piece};
pub use generic::{genericity_check, GenericityReport, LayerGenericity};
pub use svg::{render_svg, SvgSummary};
pub use tpic::{
    adjacent_pairs, check_lra_near_intersections, check_tpic, pair_witness, LraCheck, LraReport, PairWitness, TpicReport, MAP_TOL,
};

use std::collections::{BTreeSet, HashSet, VecDeque};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::max_margin_point;
pub use crate::lp::{Affine, Bbox};
use crate::net::{Network, Neuron, Sign, TernaryLabel};
use crate::rng::{stream, Purpose};

/// Regions with a smaller inscribed radius are treated as empty.
pub const REGION_TOL: f64 = 1e-9;
pub const DEFAULT_BBOX_HALF: f64 = 10.0;
/// Largest input dimension handled by the exact geometry routines.
pub const MAX_GEOMETRY_DIM: usize = 3;

pub fn default_bbox(n0: usize) -> Bbox {
    Bbox::cube(n0, DEFAULT_BBOX_HALF)
}

pub(crate) fn check_dim(net: &Network, bbox: &Bbox) -> Result<()> {
    let n0 = net.arch().input_dim();
    if n0 > MAX_GEOMETRY_DIM {
        return Err(Error::Unsupported(format!("exact geometry needs n_0 <= {MAX_GEOMETRY_DIM}, got {n0}")));
    }
    if bbox.dim() != n0 {
        return Err(Error::InputDim { expected: n0, got: bbox.dim() });
    }
    Ok(())
}

/// Affine pre-activation of every neuron of layers `1..=pattern.len()+1`,
/// valid on the region where the hidden neurons have the given signs.
///
/// Zero entries are treated as inactive.
pub fn affine_forms(net: &Network, pattern: &TernaryLabel) -> Vec<Vec<Affine>> {
    let arch = net.arch();
    let n0 = arch.input_dim();
    let last = (pattern.layers.len() + 1).min(arch.depth());
    // Post-activation of the previous layer as affine functions of x.
    let mut post: Vec<Affine> = (0..n0)
        .map(|i| {
            let mut a = vec![0.0; n0];
            a[i] = 1.0;
            Affine { a, c: 0.0 }
        })
        .collect();
    let mut out = Vec::with_capacity(last);
    for l in 1..=last {
        let forms: Vec<Affine> = (0..arch.width(l))
            .map(|i| {
                let row = net.row(l, i);
                let mut a = vec![0.0; n0];
                let mut c = net.bias_at(l, i);
                for (w, p) in row.iter().zip(&post) {
                    if *w == 0.0 {
                        continue;
                    }
                    for (ak, pk) in a.iter_mut().zip(&p.a) {
                        *ak += w * pk;
                    }
                    c += w * p.c;
                }
                Affine { a, c }
            })
            .collect();
        if l <= pattern.layers.len() {
            post = forms
                .iter()
                .zip(&pattern.layers[l - 1])
                .map(|(f, s)| if *s == Sign::Pos { f.clone() } else { Affine { a: vec![0.0; n0], c: 0.0 } })
                .collect();
        }
        out.push(forms);
    }
    out
}

/// The affine map `x -> A x + c` computed by the network on a region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    /// `n_d x n_0`, row-major.
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub cols: usize,
}

impl AffineMap {
    pub fn max_abs_diff(&self, other: &AffineMap) -> f64 {
        self.a.iter().zip(&other.a).chain(self.c.iter().zip(&other.c)).fold(0.0, |m, (p, q)| m.max((p - q).abs()))
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.c
            .iter()
            .enumerate()
            .map(|(k, c)| c + self.a[k * self.cols..(k + 1) * self.cols].iter().zip(x).map(|(p, q)| p * q).sum::<f64>())
            .collect()
    }
}

fn check_pattern(net: &Network, pattern: &TernaryLabel) -> Result<()> {
    let arch = net.arch();
    let d = arch.depth();
    if pattern.layers.len() != d - 1 || (1..d).any(|l| pattern.layers[l - 1].len() != arch.width(l)) {
        return Err(Error::InvalidArgument(format!("pattern {pattern} does not cover the hidden layers of {arch}")));
    }
    Ok(())
}

/// Affine map on the region with the given hidden signs.
pub fn region_affine_map(net: &Network, pattern: &TernaryLabel) -> Result<AffineMap> {
    check_pattern(net, pattern)?;
    if pattern.has_zero() {
        return Err(Error::InvalidArgument(format!("pattern {pattern} has a zero entry")));
    }
    let forms = affine_forms(net, pattern);
    let out = forms.last().expect("depth >= 1");
    Ok(AffineMap {
        a: out.iter().flat_map(|f| f.a.iter().copied()).collect(),
        c: out.iter().map(|f| f.c).collect(),
        cols: net.arch().input_dim(),
    })
}

/// Sign constraints `s * z >= 0` of every labelled hidden neuron not in `skip`.
pub(crate) fn sign_constraints(forms: &[Vec<Affine>], pattern: &TernaryLabel, skip: &[Neuron]) -> Vec<Affine> {
    let mut out = Vec::new();
    for (l, layer) in pattern.layers.iter().enumerate() {
        for (i, s) in layer.iter().enumerate() {
            if skip.contains(&Neuron::new(l + 1, i)) || *s == Sign::Zero {
                continue;
            }
            out.push(forms[l][i].scaled(s.as_f64()));
        }
    }
    out
}

/// Open region of the input box with a fixed hidden sign pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRegion {
    pub pattern: TernaryLabel,
    /// Point maximizing the distance to the region's boundary.
    pub witness: Vec<f64>,
    pub margin: f64,
    pub fragile: bool,
}

/// Witness for the region with `pattern`, or `None` if it is empty in `bbox`.
pub fn region_witness(net: &Network, pattern: &TernaryLabel, bbox: &Bbox) -> Result<Option<ActivationRegion>> {
    let forms = affine_forms(net, pattern);
    let cons = sign_constraints(&forms, pattern, &[]);
    Ok(max_margin_point(&cons, &[], bbox)?.filter(|p| p.margin > REGION_TOL).map(|p| ActivationRegion {
        pattern: pattern.clone(),
        witness: p.x,
        margin: p.margin,
        fragile: p.fragile,
    }))
}

fn start_pattern(net: &Network, bbox: &Bbox, depth: usize) -> Result<TernaryLabel> {
    let mut x = bbox.center();
    let mut rng = stream(0, Purpose::Census, 0);
    for _ in 0..1000 {
        let lab = net.ternary_label(&x, 0.0)?.truncated(depth);
        if !lab.has_zero() {
            return Ok(lab);
        }
        for (i, v) in x.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (bbox.center()[i] + 0.1 * z * (bbox.hi[i] - bbox.lo[i])).clamp(bbox.lo[i], bbox.hi[i]);
        }
    }
    Err(Error::NotSmooth("no starting point off the folds".into()))
}

/// All regions of the hidden layers inside `bbox`, in breadth-first order.
pub fn enumerate_regions(net: &Network, bbox: &Bbox) -> Result<Vec<ActivationRegion>> {
    enumerate_regions_to_depth(net, bbox, net.depth() - 1)
}

/// Regions cut out by the first `depth` hidden layers.
///
/// Neighbours are found by flipping one sign at a time and testing the
/// resulting pattern for feasibility.
pub fn enumerate_regions_to_depth(net: &Network, bbox: &Bbox, depth: usize) -> Result<Vec<ActivationRegion>> {
    check_dim(net, bbox)?;
    let d = net.depth();
    if depth > d - 1 {
        return Err(Error::InvalidArgument(format!("depth {depth} exceeds the {} hidden layers", d - 1)));
    }
    let start = start_pattern(net, bbox, depth)?;
    let mut seen: HashSet<TernaryLabel> = HashSet::new();
    let mut queue = VecDeque::new();
    let mut out = Vec::new();
    seen.insert(start.clone());
    queue.push_back(start);
    while let Some(p) = queue.pop_front() {
        let Some(region) = region_witness(net, &p, bbox)? else { continue };
        for l in 1..=depth {
            for i in 0..net.arch().width(l) {
                let mut q = p.clone();
                q.set(l, i, p.get(l, i).flip());
                if seen.insert(q.clone()) {
                    queue.push_back(q);
                }
            }
        }
        out.push(region);
    }
    // Patterns pushed but found empty are discarded above; keep only real regions.
    Ok(out)
}

/// Distinct hidden sign patterns at the centers of a uniform grid.
///
/// Grid points on a fold are skipped.
pub fn grid_patterns(net: &Network, bbox: &Bbox, resolution: usize) -> Result<BTreeSet<TernaryLabel>> {
    check_dim(net, bbox)?;
    let n0 = bbox.dim();
    let d = net.depth();
    let total = resolution.pow(n0 as u32);
    let mut out = BTreeSet::new();
    let mut x = vec![0.0; n0];
    for flat in 0..total {
        let mut r = flat;
        for (k, v) in x.iter_mut().enumerate() {
            let idx = r % resolution;
            r /= resolution;
            *v = bbox.lo[k] + (idx as f64 + 0.5) * (bbox.hi[k] - bbox.lo[k]) / resolution as f64;
        }
        let lab = net.ternary_label(&x, 0.0)?.truncated(d - 1);
        if !lab.has_zero() {
            out.insert(lab);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{he_init, Architecture};

    fn arrangement_231() -> Network {
        // Three generic lines x = 0, y = 0, x + y = 1 feeding one output.
        let a = Architecture::new(vec![2, 3, 1]).unwrap();
        Network::from_flat(&a, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, -1.0, 1.0, -2.0, 0.5]).unwrap()
    }

    #[test]
    fn three_lines_make_seven_regions() {
        let net = arrangement_231();
        let regions = enumerate_regions(&net, &default_bbox(2)).unwrap();
        assert_eq!(regions.len(), 7);
        let grid = grid_patterns(&net, &default_bbox(2), 200).unwrap();
        let enumerated: BTreeSet<_> = regions.iter().map(|r| r.pattern.clone()).collect();
        assert_eq!(grid, enumerated);
    }

    #[test]
    fn central_lines_make_six_sectors() {
        let a = Architecture::new(vec![2, 3, 1]).unwrap();
        let net = Network::from_flat(&a, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(enumerate_regions(&net, &default_bbox(2)).unwrap().len(), 6);
    }

    #[test]
    fn depth_one_has_a_single_region() {
        let a = Architecture::new(vec![2, 3]).unwrap();
        let net = he_init(&a, 0);
        let regions = enumerate_regions(&net, &default_bbox(2)).unwrap();
        assert_eq!(regions.len(), 1);
        assert!(regions[0].pattern.layers.is_empty());
    }

    #[test]
    fn refinement_by_depth() {
        let a = Architecture::new(vec![2, 4, 3, 1]).unwrap();
        let net = he_init(&a, 4);
        let b = default_bbox(2);
        let first = enumerate_regions_to_depth(&net, &b, 1).unwrap();
        let all = enumerate_regions(&net, &b).unwrap();
        assert!(all.len() >= first.len());
        // every full region refines some first-layer region
        let firsts: HashSet<_> = first.iter().map(|r| r.pattern.clone()).collect();
        assert!(all.iter().all(|r| firsts.contains(&r.pattern.truncated(1))));
    }

    #[test]
    fn affine_map_matches_forward() {
        let a = Architecture::new(vec![2, 4, 3, 2]).unwrap();
        let net = he_init(&a, 8);
        for r in enumerate_regions(&net, &default_bbox(2)).unwrap() {
            let m = region_affine_map(&net, &r.pattern).unwrap();
            let y = net.forward(&r.witness).unwrap();
            let z = m.apply(&r.witness);
            for (p, q) in y.iter().zip(&z) {
                assert!((p - q).abs() < 1e-12);
            }
            assert_eq!(net.ternary_label(&r.witness, 0.0).unwrap().truncated(2), r.pattern);
        }
    }

    #[test]
    fn rejects_wide_inputs() {
        let net = he_init(&Architecture::new(vec![4, 3, 1]).unwrap(), 0);
        assert!(matches!(enumerate_regions(&net, &default_bbox(4)), Err(Error::Unsupported(_))));
        let net = he_init(&Architecture::new(vec![2, 3, 1]).unwrap(), 0);
        assert!(matches!(region_affine_map(&net, &"+-".parse().unwrap()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn collapse_net_regions() {
        // F = relu(relu(x) - 2): x < 0, 0 < x < 2, x > 2.
        let a = Architecture::new(vec![1, 1, 1, 1]).unwrap();
        let net = Network::from_flat(&a, &[1.0, 0.0, 1.0, -2.0, 1.0]).unwrap();
        let mut pats: Vec<String> =
            enumerate_regions(&net, &default_bbox(1)).unwrap().iter().map(|r| r.pattern.to_string()).collect();
        pats.sort();
        assert_eq!(pats, vec!["+|+", "+|-", "-|-"]);
    }
}
