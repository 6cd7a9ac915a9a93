//! Largest-margin points of small polyhedra.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relaxation applied to every constraint on the retry after a solver failure.
pub const RETRY_RELAXATION: f64 = 1e-7;

/// The affine function `a . x + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub a: Vec<f64>,
    pub c: f64,
}

impl Affine {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + self.c
    }

    pub fn norm(&self) -> f64 {
        self.a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Affine {
        Affine { a: self.a.iter().map(|v| v * s).collect(), c: self.c * s }
    }
}

/// Axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bbox {
    pub fn cube(dim: usize, half: f64) -> Self {
        Self { lo: vec![-half; dim], hi: vec![half; dim] }
    }

    pub fn around(x: &[f64], r: f64) -> Self {
        Self { lo: x.iter().map(|v| v - r).collect(), hi: x.iter().map(|v| v + r).collect() }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a && *v <= *b)
    }
}

/// A point of `{f >= 0 for f in ineqs, g = 0 for g in eqs} ∩ bbox` together
/// with the margin by which it clears every inequality and box face.
#[derive(Clone, Debug)]
pub struct MarginPoint {
    pub x: Vec<f64>,
    pub margin: f64,
    /// The solver only succeeded after relaxing the constraints.
    pub fragile: bool,
}

/// Maximizes the Euclidean distance from the inequality boundaries.
///
/// Inequalities with a vanishing linear part are checked directly. Returns
/// `None` when the set is empty.
pub fn max_margin_point(ineqs: &[Affine], eqs: &[Affine], bbox: &Bbox) -> Result<Option<MarginPoint>> {
    let mut live = Vec::with_capacity(ineqs.len());
    for f in ineqs {
        let n = f.norm();
        if n < 1e-14 {
            if f.c <= 0.0 {
                return Ok(None);
            }
        } else {
            live.push(f.scaled(1.0 / n));
        }
    }
    let mut eq_n = Vec::with_capacity(eqs.len());
    for g in eqs {
        let n = g.norm();
        if n < 1e-14 {
            if g.c.abs() > 1e-12 {
                return Ok(None);
            }
        } else {
            eq_n.push(g.scaled(1.0 / n));
        }
    }
    let live = dedup_ineqs(live);
    let Some(eq_n) = dedup_eqs(eq_n) else { return Ok(None) };
    match guarded_solve(&live, &eq_n, bbox, 0.0) {
        Ok(r) => Ok(r.map(|(x, margin)| MarginPoint { x, margin, fragile: false })),
        Err(_) => {
            let rev: Vec<Affine> = live.iter().rev().cloned().collect();
            match guarded_solve(&live, &eq_n, bbox, RETRY_RELAXATION)
                .or_else(|_| guarded_solve(&rev, &eq_n, bbox, RETRY_RELAXATION))
            {
                Ok(r) => Ok(r.map(|(x, margin)| MarginPoint { x, margin, fragile: true })),
                Err(e) => Err(Error::Lp(e)),
            }
        }
    }
}

const PARALLEL_TOL: f64 = 1e-12;

fn parallel(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(p, q)| (p - q).abs() <= PARALLEL_TOL)
}

/// Keeps the tightest of each group of parallel, equally oriented inequalities.
fn dedup_ineqs(fs: Vec<Affine>) -> Vec<Affine> {
    let mut out: Vec<Affine> = Vec::with_capacity(fs.len());
    for f in fs {
        match out.iter_mut().find(|g| parallel(&g.a, &f.a)) {
            Some(g) => g.c = g.c.min(f.c),
            None => out.push(f),
        }
    }
    out
}

/// Drops repeated equalities; `None` if two parallel ones are inconsistent.
fn dedup_eqs(gs: Vec<Affine>) -> Option<Vec<Affine>> {
    let mut out: Vec<Affine> = Vec::with_capacity(gs.len());
    for g in gs {
        let neg: Vec<f64> = g.a.iter().map(|v| -v).collect();
        match out.iter().find(|h| parallel(&h.a, &g.a) || parallel(&h.a, &neg)) {
            Some(h) => {
                let c = if parallel(&h.a, &g.a) { g.c } else { -g.c };
                if (h.c - c).abs() > 1e-12 {
                    return None;
                }
            }
            None => out.push(g),
        }
    }
    Some(out)
}

/// The simplex solver can panic on a singular basis; report that as an error.
fn guarded_solve(
    ineqs: &[Affine],
    eqs: &[Affine],
    bbox: &Bbox,
    relax: f64,
) -> std::result::Result<Option<(Vec<f64>, f64)>, String> {
    match std::panic::catch_unwind(|| solve(ineqs, eqs, bbox, relax)) {
        Ok(r) => r,
        Err(_) => Err("simplex basis became singular".into()),
    }
}

fn solve(ineqs: &[Affine], eqs: &[Affine], bbox: &Bbox, relax: f64) -> std::result::Result<Option<(Vec<f64>, f64)>, String> {
    let n = bbox.dim();
    let width = bbox.lo.iter().zip(&bbox.hi).map(|(a, b)| b - a).fold(f64::INFINITY, f64::min);
    let mut p = Problem::new(OptimizationDirection::Maximize);
    let xs: Vec<_> = (0..n).map(|i| p.add_var(0.0, (bbox.lo[i] - relax, bbox.hi[i] + relax))).collect();
    let t = p.add_var(1.0, (0.0, width));
    for f in ineqs {
        let mut terms: Vec<_> = xs.iter().zip(&f.a).map(|(&v, &c)| (v, c)).collect();
        terms.push((t, -1.0));
        p.add_constraint(&terms[..], ComparisonOp::Ge, -f.c - relax);
    }
    for g in eqs {
        let terms: Vec<_> = xs.iter().zip(&g.a).map(|(&v, &c)| (v, c)).collect();
        p.add_constraint(&terms[..], ComparisonOp::Eq, -g.c);
    }
    for (i, &v) in xs.iter().enumerate() {
        p.add_constraint(&[(v, 1.0), (t, -1.0)], ComparisonOp::Ge, bbox.lo[i] - relax);
        p.add_constraint(&[(v, 1.0), (t, 1.0)], ComparisonOp::Le, bbox.hi[i] + relax);
    }
    match p.solve() {
        Ok(out) => match out.into_solution() {
            Ok(sol) => Ok(Some((xs.iter().map(|&v| sol.var_value_raw(v)).collect(), sol.var_value_raw(t)))),
            Err(_) => Err("solver stopped without a solution".into()),
        },
        Err(microlp::Error::Infeasible) => Ok(None),
        Err(e) => Err(e.to_string()),
    }
}
