use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{affine_forms, check_dim, enumerate_regions, sign_constraints, Affine, Bbox};
use crate::error::Result;
use crate::net::{Network, Neuron, Sign, TernaryLabel};

const MIN_MEASURE: f64 = 1e-9;

/// Part of a neuron's zero set inside one closed region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    /// A point (`n_0 = 1`), segment endpoints (`n_0 = 2`) or polygon vertices (`n_0 = 3`).
    pub points: Vec<Vec<f64>>,
    /// Regions whose closure contains the piece.
    pub regions: Vec<TernaryLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BentHyperplane {
    pub neuron: Neuron,
    pub pieces: Vec<Piece>,
}

impl BentHyperplane {
    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

fn bbox_constraints(bbox: &Bbox) -> Vec<Affine> {
    let n = bbox.dim();
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut a = vec![0.0; n];
        a[i] = 1.0;
        out.push(Affine { a: a.clone(), c: -bbox.lo[i] });
        a[i] = -1.0;
        out.push(Affine { a, c: bbox.hi[i] });
    }
    out
}

/// Intersection of `{h = 0}` with `{g >= 0 : g in cons}`.
pub(crate) fn clip_hyperplane(h: &Affine, cons: &[Affine]) -> Option<Vec<Vec<f64>>> {
    let n = h.a.len();
    let nn = h.norm();
    if nn < 1e-14 {
        return None;
    }
    let normal: Vec<f64> = h.a.iter().map(|v| v / nn).collect();
    let p0: Vec<f64> = normal.iter().map(|v| -h.c / nn * v).collect();
    match n {
        1 => {
            let ok = cons.iter().all(|g| g.eval(&p0) >= -1e-12);
            ok.then(|| vec![p0])
        }
        2 => {
            let u = [-normal[1], normal[0]];
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for g in cons {
                let alpha = g.a[0] * u[0] + g.a[1] * u[1];
                let beta = g.eval(&p0);
                if alpha.abs() < 1e-15 {
                    if beta < -1e-12 {
                        return None;
                    }
                } else if alpha > 0.0 {
                    lo = lo.max(-beta / alpha);
                } else {
                    hi = hi.min(-beta / alpha);
                }
            }
            (hi - lo > MIN_MEASURE && lo.is_finite() && hi.is_finite())
                .then(|| vec![vec![p0[0] + lo * u[0], p0[1] + lo * u[1]], vec![p0[0] + hi * u[0], p0[1] + hi * u[1]]])
        }
        _ => {
            let (u, v) = plane_basis(&normal);
            let big = 1e6;
            let mut poly: Vec<[f64; 2]> = vec![[-big, -big], [big, -big], [big, big], [-big, big]];
            for g in cons {
                let alpha = dot(&g.a, &u);
                let beta = dot(&g.a, &v);
                let gamma = g.eval(&p0);
                poly = clip_polygon(&poly, alpha, beta, gamma);
                if poly.len() < 3 {
                    return None;
                }
            }
            (polygon_area(&poly) > MIN_MEASURE)
                .then(|| poly.iter().map(|q| (0..3).map(|k| p0[k] + q[0] * u[k] + q[1] * v[k]).collect()).collect())
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn plane_basis(n: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = (0..3).min_by(|&i, &j| n[i].abs().total_cmp(&n[j].abs())).unwrap();
    let mut e = vec![0.0; 3];
    e[k] = 1.0;
    let t = dot(&e, n);
    let mut u: Vec<f64> = (0..3).map(|i| e[i] - t * n[i]).collect();
    let un = dot(&u, &u).sqrt();
    u.iter_mut().for_each(|x| *x /= un);
    let v = vec![n[1] * u[2] - n[2] * u[1], n[2] * u[0] - n[0] * u[2], n[0] * u[1] - n[1] * u[0]];
    (u, v)
}

/// Sutherland-Hodgman clip against `alpha s + beta t + gamma >= 0`.
fn clip_polygon(poly: &[[f64; 2]], alpha: f64, beta: f64, gamma: f64) -> Vec<[f64; 2]> {
    let f = |p: &[f64; 2]| alpha * p[0] + beta * p[1] + gamma;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (fa, fb) = (f(&a), f(&b));
        if fa >= 0.0 {
            out.push(a);
        }
        if (fa >= 0.0) != (fb >= 0.0) {
            let t = fa / (fa - fb);
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        s += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * s.abs()
}

/// Zero sets of every neuron, split into pieces by region.
///
/// A hidden neuron's piece is recorded once, from the region on its positive
/// side, and lists both adjacent regions. An output neuron's pieces list the
/// single region they cross.
pub fn bent_hyperplanes(net: &Network, bbox: &Bbox) -> Result<Vec<BentHyperplane>> {
    check_dim(net, bbox)?;
    let regions = enumerate_regions(net, bbox)?;
    let known: HashSet<TernaryLabel> = regions.iter().map(|r| r.pattern.clone()).collect();
    let arch = net.arch();
    let d = arch.depth();
    let mut out: Vec<BentHyperplane> = (1..=d)
        .flat_map(|l| (0..arch.width(l)).map(move |i| BentHyperplane { neuron: Neuron::new(l, i), pieces: Vec::new() }))
        .collect();
    let boxc = bbox_constraints(bbox);
    for r in &regions {
        let forms = affine_forms(net, &r.pattern);
        let mut k = 0;
        for l in 1..=d {
            for i in 0..arch.width(l) {
                let slot = k;
                k += 1;
                let n = Neuron::new(l, i);
                let hidden = l < d;
                if hidden && r.pattern.get(l, i) != Sign::Pos {
                    continue;
                }
                let mut cons = sign_constraints(&forms, &r.pattern, &[n]);
                cons.extend(boxc.iter().cloned());
                let Some(points) = clip_hyperplane(&forms[l - 1][i], &cons) else { continue };
                let mut regions_at = vec![r.pattern.clone()];
                if hidden {
                    let mut q = r.pattern.clone();
                    q.set(l, i, Sign::Neg);
                    if known.contains(&q) {
                        regions_at.push(q);
                    }
                }
                out[slot].pieces.push(Piece { points, regions: regions_at });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::default_bbox;
    use crate::net::{he_init, Architecture};

    #[test]
    fn first_layer_pieces_cover_full_lines() {
        let a = Architecture::new(vec![2, 3, 1]).unwrap();
        let net = he_init(&a, 2);
        let b = default_bbox(2);
        let bent = bent_hyperplanes(&net, &b).unwrap();
        for h in bent.iter().filter(|h| h.neuron.layer == 1) {
            let total: f64 = h
                .pieces
                .iter()
                .map(|p| ((p.points[0][0] - p.points[1][0]).powi(2) + (p.points[0][1] - p.points[1][1]).powi(2)).sqrt())
                .sum();
            let f = &affine_forms(&net, &"+++".parse().unwrap())[0][h.neuron.index];
            let full = clip_hyperplane(f, &bbox_constraints(&b))
                .map_or(0.0, |p| ((p[0][0] - p[1][0]).powi(2) + (p[0][1] - p[1][1]).powi(2)).sqrt());
            assert!((total - full).abs() < 1e-9, "{total} vs {full}");
            for p in &h.pieces {
                assert_eq!(p.regions.len(), 2);
            }
        }
    }

    #[test]
    fn pieces_lie_on_zero_sets() {
        let a = Architecture::new(vec![2, 4, 3, 2]).unwrap();
        let net = he_init(&a, 5);
        for h in bent_hyperplanes(&net, &default_bbox(2)).unwrap() {
            for p in &h.pieces {
                for x in &p.points {
                    let z = net.trace(x).unwrap().pre[h.neuron.layer - 1][h.neuron.index];
                    assert!(z.abs() < 1e-9, "{z}");
                }
            }
        }
    }

    #[test]
    fn three_dimensional_pieces() {
        let a = Architecture::new(vec![3, 3, 1]).unwrap();
        let net = he_init(&a, 1);
        let bent = bent_hyperplanes(&net, &default_bbox(3)).unwrap();
        for h in bent.iter().filter(|h| h.neuron.layer == 1) {
            assert!(!h.pieces.is_empty());
            for p in &h.pieces {
                assert!(p.points.len() >= 3);
                for x in &p.points {
                    assert!(net.trace(x).unwrap().pre[0][h.neuron.index].abs() < 1e-8);
                }
            }
        }
    }
}
