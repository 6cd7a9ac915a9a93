//! Symmetry actions and detectors for the four hidden-symmetry mechanisms.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{affine_forms, enumerate_regions, region_affine_map, sign_constraints, Bbox, REGION_TOL};
use crate::lp::max_margin_point;
use crate::net::{Network, Neuron, Sign, TernaryLabel};
use crate::rank::numerical_rank;
use crate::rng::{digest_u64, stream, Purpose};

pub const DEFAULT_MARGIN: f64 = 1e-6;
pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_CENSUS_SAMPLES: usize = 100_000;
/// Outputs closer than this count as the same function value.
pub const FIBER_TOL: f64 = 1e-9;
/// Relative singular-value cutoff for image dimensions.
pub const IMAGE_RANK_TOL: f64 = 1e-9;
const ON_HYPERPLANE_TOL: f64 = 1e-10;

fn check_hidden(net: &Network, n: Neuron) -> Result<()> {
    let d = net.depth();
    if n.layer == 0 || n.layer >= d || n.index >= net.arch().width(n.layer) {
        return Err(Error::Index(format!("{n} is not a hidden neuron of {}", net.arch())));
    }
    Ok(())
}

/// Reorders the neurons of hidden layer `layer`: new neuron `k` is old neuron `perm[k]`.
pub fn apply_permutation(net: &Network, layer: usize, perm: &[usize]) -> Result<Network> {
    let d = net.depth();
    if layer == 0 || layer >= d {
        return Err(Error::Index(format!("layer {layer} is not hidden")));
    }
    let n = net.arch().width(layer);
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation of 0..{n}")));
    }
    let mut out = net.clone();
    let cols = net.arch().width(layer - 1);
    let next_cols = n;
    for (k, &p) in perm.iter().enumerate() {
        out.weights_mut(layer)[k * cols..(k + 1) * cols].copy_from_slice(net.row(layer, p));
        out.bias_mut(layer)[k] = net.bias(layer)[p];
        for r in 0..net.arch().width(layer + 1) {
            out.weights_mut(layer + 1)[r * next_cols + k] = net.weight(layer + 1, r, p);
        }
    }
    Ok(out)
}

/// Multiplies a hidden neuron's incoming weights and bias by `c > 0` and its
/// outgoing weights by `1 / c`.
pub fn apply_scaling(net: &Network, neuron: Neuron, c: f64) -> Result<Network> {
    check_hidden(net, neuron)?;
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!("scale {c} must be positive")));
    }
    let mut out = net.clone();
    let (l, i) = (neuron.layer, neuron.index);
    let cols = net.arch().width(l - 1);
    for w in &mut out.weights_mut(l)[i * cols..(i + 1) * cols] {
        *w *= c;
    }
    out.bias_mut(l)[i] *= c;
    let n = net.arch().width(l);
    for r in 0..net.arch().width(l + 1) {
        out.weights_mut(l + 1)[r * n + i] /= c;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Criterion {
    /// Non-positive weights and negative bias, robust to perturbations below the margin.
    Orthant,
    /// Observed on every sampled input.
    Sampled,
    /// Decided from the exact region enumeration.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StablyUnactivated {
    pub neuron: Neuron,
    pub criterion: Criterion,
    /// Largest pre-activation seen on the samples.
    pub max_preactivation: f64,
}

fn sample_inputs(n0: usize, count: usize, seed: u64, purpose: Purpose) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| {
            let mut rng = stream(seed, purpose, i as u64);
            (0..n0).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect()
}

/// Hidden neurons in layers `2..d` that never activate.
///
/// The orthant test flags neurons whose weights and bias are all below
/// `-margin`; the sampled test flags neurons whose pre-activation stays
/// below `-margin` on every sample.
pub fn detect_stably_unactivated(net: &Network, margin: f64, samples: usize, seed: u64) -> Result<Vec<StablyUnactivated>> {
    let arch = net.arch();
    let d = arch.depth();
    let xs = sample_inputs(arch.input_dim(), samples, seed, Purpose::Census);
    let mut maxes: Vec<Vec<f64>> = (1..d).map(|l| vec![f64::NEG_INFINITY; arch.width(l)]).collect();
    for x in &xs {
        let t = net.trace(x)?;
        for l in 1..d {
            for (m, z) in maxes[l - 1].iter_mut().zip(&t.pre[l - 1]) {
                *m = m.max(*z);
            }
        }
    }
    let mut out = Vec::new();
    for l in 2..d {
        for i in 0..arch.width(l) {
            let orthant = net.row(l, i).iter().all(|&w| w <= -margin) && net.bias(l)[i] <= -margin;
            let max_pre = maxes[l - 1][i];
            let criterion = if orthant {
                Criterion::Orthant
            } else if samples > 0 && max_pre < -margin {
                Criterion::Sampled
            } else {
                continue;
            };
            out.push(StablyUnactivated { neuron: Neuron::new(l, i), criterion, max_preactivation: max_pre });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeverCoactive {
    pub lower: Neuron,
    pub upper: Neuron,
    pub criterion: Criterion,
}

/// Adjacent hidden neurons that are never active at the same time.
///
/// For `n_0 <= 3` the answer is read off the regions in `bbox`; otherwise a
/// census of `census_samples` Gaussian inputs is used.
pub fn detect_never_coactive(net: &Network, bbox: &Bbox, census_samples: usize, seed: u64) -> Result<Vec<NeverCoactive>> {
    let arch = net.arch();
    let d = arch.depth();
    let exact = arch.input_dim() <= crate::geometry::MAX_GEOMETRY_DIM;
    let patterns: Vec<TernaryLabel> = if exact {
        enumerate_regions(net, bbox)?.into_iter().map(|r| r.pattern).collect()
    } else {
        sample_inputs(arch.input_dim(), census_samples, seed, Purpose::Census)
            .iter()
            .map(|x| net.ternary_label(x, 0.0).map(|l| l.truncated(d - 1)))
            .collect::<Result<Vec<_>>>()?
    };
    let mut coactive: HashSet<(Neuron, Neuron)> = HashSet::new();
    for p in &patterns {
        for l in 1..d.saturating_sub(1) {
            for i in (0..arch.width(l)).filter(|&i| p.get(l, i) == Sign::Pos) {
                for j in (0..arch.width(l + 1)).filter(|&j| p.get(l + 1, j) == Sign::Pos) {
                    coactive.insert((Neuron::new(l, i), Neuron::new(l + 1, j)));
                }
            }
        }
    }
    let criterion = if exact { Criterion::Exact } else { Criterion::Sampled };
    let mut out = Vec::new();
    for l in 1..d.saturating_sub(1) {
        for i in 0..arch.width(l) {
            for j in 0..arch.width(l + 1) {
                let pair = (Neuron::new(l, i), Neuron::new(l + 1, j));
                if !coactive.contains(&pair) {
                    out.push(NeverCoactive { lower: pair.0, upper: pair.1, criterion });
                }
            }
        }
    }
    Ok(out)
}

/// Two regions sharing a facet of `neuron`'s zero set on which the network
/// computes the same affine map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Collapse {
    pub neuron: Neuron,
    pub positive: TernaryLabel,
    pub negative: TernaryLabel,
    /// Point on the shared facet.
    pub witness: Vec<f64>,
}

/// Folds that are invisible in the function (`n_0 <= 3`).
pub fn detect_collapse(net: &Network, bbox: &Bbox) -> Result<Vec<Collapse>> {
    let regions = enumerate_regions(net, bbox)?;
    let known: HashSet<TernaryLabel> = regions.iter().map(|r| r.pattern.clone()).collect();
    let d = net.depth();
    let mut out = Vec::new();
    for r in &regions {
        let forms = affine_forms(net, &r.pattern);
        for l in 1..d {
            for i in 0..net.arch().width(l) {
                if r.pattern.get(l, i) != Sign::Pos {
                    continue;
                }
                let mut q = r.pattern.clone();
                q.set(l, i, Sign::Neg);
                if !known.contains(&q) {
                    continue;
                }
                let n = Neuron::new(l, i);
                let cons = sign_constraints(&forms, &r.pattern, &[n]);
                let Some(pt) = max_margin_point(&cons, &[forms[l - 1][i].clone()], bbox)? else { continue };
                if pt.margin <= REGION_TOL {
                    continue;
                }
                let a = region_affine_map(net, &r.pattern)?;
                let b = region_affine_map(net, &q)?;
                if a.max_abs_diff(&b) <= crate::geometry::MAP_TOL {
                    out.push(Collapse { neuron: n, positive: r.pattern.clone(), negative: q, witness: pt.x });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDim {
    pub layer: usize,
    /// Dimension of the affine hull of the sampled image.
    pub dim: usize,
    /// `n_layer - dim`.
    pub deficiency: usize,
}

/// Affine-hull dimension of `F_(layer)` on Gaussian samples.
pub fn detect_lowdim_image(net: &Network, layer: usize, samples: usize, seed: u64) -> Result<ImageDim> {
    let arch = net.arch();
    if layer == 0 || layer >= arch.depth() {
        return Err(Error::Index(format!("layer {layer} is not hidden")));
    }
    let n = arch.width(layer);
    let xs = sample_inputs(arch.input_dim(), samples, seed, Purpose::ImageProbe);
    let mut data = Vec::with_capacity(samples * n);
    for x in &xs {
        data.extend(net.forward_upto(x, layer)?);
    }
    let mut mean = vec![0.0; n];
    for row in data.chunks(n) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / samples as f64;
        }
    }
    for row in data.chunks_mut(n) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let dim = numerical_rank(&data, samples, n, IMAGE_RANK_TOL);
    Ok(ImageDim { layer, dim, deficiency: n - dim })
}

/// The hyperplane `{x : normal . x = offset}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub normal: Vec<f64>,
    pub offset: f64,
}

/// Least-norm point on `s` and on the zero set of `neuron`.
pub fn anchor_point(net: &Network, neuron: Neuron, s: &Hyperplane) -> Result<Vec<f64>> {
    let (l, i) = (neuron.layer, neuron.index);
    let w = net.row(l, i);
    let n = w.len();
    if s.normal.len() != n {
        return Err(Error::InputDim { expected: n, got: s.normal.len() });
    }
    let a = DMatrix::from_fn(2, n, |r, c| if r == 0 { s.normal[c] } else { w[c] });
    let rhs = DVector::from_vec(vec![s.offset, -net.bias_at(l, i)]);
    let sol = a.svd(true, true).solve(&rhs, 1e-12).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(sol.iter().copied().collect())
}

/// Rotates `neuron`'s hyperplane about `S ∩ H`: `w' = w + t o`,
/// `b' = b - t (anchor . o)`.
///
/// `o` must be normal to `s` and `anchor` must lie on `s` and on the
/// neuron's hyperplane. When the image of the previous layers lies in `s`,
/// the network function is unchanged.
pub fn rotate_neuron_family(net: &Network, neuron: Neuron, s: &Hyperplane, o: &[f64], anchor: &[f64], t: f64) -> Result<Network> {
    let (l, i) = (neuron.layer, neuron.index);
    if l == 0 || l > net.depth() || i >= net.arch().width(l) {
        return Err(Error::Index(format!("{neuron} is not a neuron of {}", net.arch())));
    }
    let n = net.arch().width(l - 1);
    if s.normal.len() != n || o.len() != n || anchor.len() != n {
        return Err(Error::InputDim { expected: n, got: o.len() });
    }
    let nn = s.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
    let on = o.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nn == 0.0 {
        return Err(Error::InvalidArgument("hyperplane normal is zero".into()));
    }
    let proj = o.iter().zip(&s.normal).map(|(p, q)| p * q).sum::<f64>() / (nn * nn);
    let resid = o.iter().zip(&s.normal).map(|(p, q)| (p - proj * q).powi(2)).sum::<f64>().sqrt();
    if resid > ON_HYPERPLANE_TOL * on.max(1.0) {
        return Err(Error::InvalidArgument(format!("direction is not orthogonal to S (residual {resid:.3e})")));
    }
    let on_s = (anchor.iter().zip(&s.normal).map(|(p, q)| p * q).sum::<f64>() - s.offset).abs();
    let w = net.row(l, i);
    let on_h = (w.iter().zip(anchor).map(|(p, q)| p * q).sum::<f64>() + net.bias_at(l, i)).abs();
    let scale = 1.0 + anchor.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if on_s > ON_HYPERPLANE_TOL * scale * nn || on_h > ON_HYPERPLANE_TOL * scale * (1.0 + w.iter().map(|v| v.abs()).sum::<f64>())
    {
        return Err(Error::InvalidArgument(format!("anchor is not on S ∩ H ({on_s:.3e}, {on_h:.3e})")));
    }
    let shift = t * anchor.iter().zip(o).map(|(p, q)| p * q).sum::<f64>();
    if !net.arch().layer_has_bias(l) && shift != 0.0 {
        return Err(Error::InvalidArgument(format!("layer {l} has no bias to absorb the rotation")));
    }
    let mut out = net.clone();
    for (k, ok) in o.iter().enumerate() {
        out.weights_mut(l)[i * n + k] += t * ok;
    }
    if net.arch().layer_has_bias(l) {
        out.bias_mut(l)[i] -= shift;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiberCheck {
    pub max_diff: f64,
    pub samples: usize,
    pub same_function: bool,
}

/// Compares two networks on Gaussian inputs.
pub fn fiber_witness_check(a: &Network, b: &Network, samples: usize, seed: u64) -> Result<FiberCheck> {
    if a.arch().widths() != b.arch().widths() {
        return Err(Error::InvalidArgument("architectures differ".into()));
    }
    let mut max_diff: f64 = 0.0;
    for x in sample_inputs(a.arch().input_dim(), samples, seed, Purpose::Fiber) {
        let ya = a.forward(&x)?;
        let yb = b.forward(&x)?;
        for (p, q) in ya.iter().zip(&yb) {
            max_diff = max_diff.max((p - q).abs());
        }
    }
    Ok(FiberCheck { max_diff, samples, same_function: max_diff < FIBER_TOL })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MechanismOptions {
    pub margin: f64,
    pub samples: usize,
    pub census_samples: usize,
    pub seed: u64,
    pub bbox: Option<Bbox>,
}

impl Default for MechanismOptions {
    fn default() -> Self {
        Self { margin: DEFAULT_MARGIN, samples: DEFAULT_SAMPLES, census_samples: DEFAULT_CENSUS_SAMPLES, seed: 0, bbox: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MechanismReport {
    pub stably_unactivated: Vec<StablyUnactivated>,
    pub never_coactive: Vec<NeverCoactive>,
    /// `None` when the input dimension is too large for exact geometry.
    pub collapse: Option<Vec<Collapse>>,
    pub lowdim_image: Vec<ImageDim>,
    pub seed: u64,
    /// Digest of the flat parameter vector.
    pub params_digest: String,
}

impl MechanismReport {
    pub fn any(&self) -> bool {
        !self.stably_unactivated.is_empty()
            || !self.never_coactive.is_empty()
            || self.collapse.as_ref().is_some_and(|c| !c.is_empty())
            || self.lowdim_image.iter().any(|i| i.deficiency > 0)
    }
}

pub fn params_digest(net: &Network) -> String {
    let bytes: Vec<u8> = net.to_flat().iter().flat_map(|v| v.to_le_bytes()).collect();
    format!("{:016x}", digest_u64(&[net.arch().to_string().as_bytes(), &bytes]))
}

/// Runs every detector.
pub fn analyze_mechanisms(net: &Network, opts: &MechanismOptions) -> Result<MechanismReport> {
    let n0 = net.arch().input_dim();
    let bbox = opts.bbox.clone().unwrap_or_else(|| crate::geometry::default_bbox(n0));
    let collapse = if n0 <= crate::geometry::MAX_GEOMETRY_DIM { Some(detect_collapse(net, &bbox)?) } else { None };
    let lowdim_image =
        (1..net.depth()).map(|l| detect_lowdim_image(net, l, opts.samples, opts.seed)).collect::<Result<Vec<_>>>()?;
    Ok(MechanismReport {
        stably_unactivated: detect_stably_unactivated(net, opts.margin, opts.samples, opts.seed)?,
        never_coactive: detect_never_coactive(net, &bbox, opts.census_samples, opts.seed)?,
        collapse,
        lowdim_image,
        seed: opts.seed,
        params_digest: params_digest(net),
    })
}
