//! Parameter gradients, path polynomials and sampled Jacobians.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::net::{Architecture, Network, Sign, TernaryLabel, Trace};
use crate::rng::{stream, Purpose};

/// Largest neuron count accepted by the path enumeration.
pub const PATH_NEURON_CAP: usize = 20;
/// Redraws allowed per sample point before giving up.
pub const RESAMPLE_BUDGET: usize = 1000;

/// Reusable buffers for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct GradWorkspace {
    delta: Vec<f64>,
    next: Vec<f64>,
}

/// Writes `dF_k/dtheta` for every output `k` into consecutive rows of `out`.
///
/// `out` must hold `n_d * D` entries. The derivative of ReLU at zero is
/// taken as zero.
pub fn write_gradient_rows(net: &Network, trace: &Trace, out: &mut [f64], ws: &mut GradWorkspace) {
    let arch = net.arch();
    let d = arch.depth();
    let dim = arch.param_count();
    let lay = arch.layout();
    debug_assert_eq!(out.len(), arch.output_dim() * dim);
    let posts: Vec<Vec<f64>> = (0..d).map(|l| trace.post(l)).collect();
    for (k, row) in out.chunks_mut(dim).enumerate() {
        ws.delta.clear();
        ws.delta.resize(arch.output_dim(), 0.0);
        ws.delta[k] = 1.0;
        for l in (1..=d).rev() {
            let cols = arch.width(l - 1);
            let a = &posts[l - 1];
            let w0 = lay.weight_block(l);
            for (p, &dp) in ws.delta.iter().enumerate() {
                let dst = &mut row[w0 + p * cols..w0 + (p + 1) * cols];
                for (g, &aq) in dst.iter_mut().zip(a) {
                    *g = dp * aq;
                }
            }
            if let Some(b0) = lay.bias_block(l) {
                row[b0..b0 + ws.delta.len()].copy_from_slice(&ws.delta);
            }
            if l > 1 {
                let w = net.weights(l);
                let z = &trace.pre[l - 2];
                ws.next.clear();
                ws.next.resize(cols, 0.0);
                for (p, &dp) in ws.delta.iter().enumerate() {
                    if dp == 0.0 {
                        continue;
                    }
                    for (n, &wpq) in ws.next.iter_mut().zip(&w[p * cols..(p + 1) * cols]) {
                        *n += wpq * dp;
                    }
                }
                for (n, &zq) in ws.next.iter_mut().zip(z) {
                    if zq <= 0.0 {
                        *n = 0.0;
                    }
                }
                std::mem::swap(&mut ws.delta, &mut ws.next);
            }
        }
    }
}

/// Gradient of each output with respect to the flat parameter vector.
pub fn grad_wrt_params(net: &Network, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let trace = net.trace(x)?;
    let dim = net.arch().param_count();
    let mut out = vec![0.0; net.arch().output_dim() * dim];
    write_gradient_rows(net, &trace, &mut out, &mut GradWorkspace::default());
    Ok(out.chunks(dim).map(|r| r.to_vec()).collect())
}

/// Edge label on the augmented computational graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Edge {
    /// `W^layer[row][col]`.
    Weight { layer: usize, row: usize, col: usize },
    /// `b^layer[neuron]`, the edge from the layer's bias vertex.
    Bias { layer: usize, neuron: usize },
}

/// Product of edge labels along one open complete path.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Monomial {
    /// Input coordinate the path starts at, or `None` for a bias vertex.
    pub input: Option<usize>,
    pub edges: Vec<Edge>,
}

/// Enumerates the monomials of output `k` for the given label.
///
/// A path is open when every hidden neuron on it has label `+`. The output
/// layer is linear, so its label is ignored, and the output bias vertex is
/// always part of the graph.
pub fn path_monomials(arch: &Architecture, label: &TernaryLabel, k: usize) -> Result<Vec<Monomial>> {
    let d = arch.depth();
    if label.layers.len() != d || (1..=d).any(|l| label.layers[l - 1].len() != arch.width(l)) {
        return Err(Error::InvalidArgument("label shape does not match architecture".into()));
    }
    if k >= arch.output_dim() {
        return Err(Error::Index(format!("output {k} of {}", arch.output_dim())));
    }
    if arch.total_neurons() > PATH_NEURON_CAP {
        return Err(Error::Unsupported(format!(
            "path enumeration capped at {PATH_NEURON_CAP} neurons, got {}",
            arch.total_neurons()
        )));
    }
    let open = |l: usize, i: usize| label.get(l, i) == Sign::Pos;
    let mut out = Vec::new();
    // Partial paths ending at neuron `j` of layer `l`, extended to the output.
    fn extend(
        arch: &Architecture,
        open: &dyn Fn(usize, usize) -> bool,
        l: usize,
        j: usize,
        k: usize,
        input: Option<usize>,
        edges: &mut Vec<Edge>,
        out: &mut Vec<Monomial>,
    ) {
        let d = arch.depth();
        if l + 1 == d {
            edges.push(Edge::Weight { layer: d, row: k, col: j });
            out.push(Monomial { input, edges: edges.clone() });
            edges.pop();
            return;
        }
        for n in 0..arch.width(l + 1) {
            if open(l + 1, n) {
                edges.push(Edge::Weight { layer: l + 1, row: n, col: j });
                extend(arch, open, l + 1, n, k, input, edges, out);
                edges.pop();
            }
        }
    }
    let mut edges = Vec::new();
    if d == 1 {
        for i in 0..arch.input_dim() {
            out.push(Monomial { input: Some(i), edges: vec![Edge::Weight { layer: 1, row: k, col: i }] });
        }
    } else {
        for i in 0..arch.input_dim() {
            for n in 0..arch.width(1) {
                if open(1, n) {
                    edges.push(Edge::Weight { layer: 1, row: n, col: i });
                    extend(arch, &open, 1, n, k, Some(i), &mut edges, &mut out);
                    edges.pop();
                }
            }
        }
    }
    for l in 1..d {
        for n in 0..arch.width(l) {
            if open(l, n) {
                edges.push(Edge::Bias { layer: l, neuron: n });
                extend(arch, &open, l, n, k, None, &mut edges, &mut out);
                edges.pop();
            }
        }
    }
    out.push(Monomial { input: None, edges: vec![Edge::Bias { layer: d, neuron: k }] });
    Ok(out)
}

/// Value and parameter gradient of one output, evaluated as a path polynomial.
#[derive(Clone, Debug)]
pub struct PathPolynomial {
    pub monomials: Vec<Monomial>,
    pub value: f64,
    pub gradient: Vec<f64>,
}

fn edge_value(net: &Network, e: &Edge) -> f64 {
    match *e {
        Edge::Weight { layer, row, col } => net.weight(layer, row, col),
        Edge::Bias { layer, neuron } => net.bias_at(layer, neuron),
    }
}

fn edge_index(net: &Network, e: &Edge) -> Option<usize> {
    let arch = net.arch();
    let lay = arch.layout();
    match *e {
        Edge::Weight { layer, row, col } => Some(lay.weight(layer, row, col, arch.width(layer - 1))),
        Edge::Bias { layer, neuron } => lay.bias(layer, neuron),
    }
}

/// Evaluates output `k` at `x` through its open-path monomials.
///
/// `x` must have no hidden pre-activation within `atol` of zero. An output
/// bias monomial contributes zero when the architecture has no output bias.
pub fn path_polynomial(net: &Network, x: &[f64], k: usize, atol: f64) -> Result<PathPolynomial> {
    let trace = net.trace(x)?;
    let label = trace.label(atol);
    let d = net.depth();
    if label.layers[..d - 1].iter().flatten().any(|&s| s == Sign::Zero) {
        return Err(Error::NotSmooth(format!("hidden label {label} has a zero entry")));
    }
    let monomials = path_monomials(net.arch(), &label, k)?;
    let mut gradient = vec![0.0; net.arch().param_count()];
    let mut value = 0.0;
    let mut prefix = Vec::new();
    for m in &monomials {
        let xf = m.input.map_or(1.0, |i| x[i]);
        let vals: Vec<f64> = m.edges.iter().map(|e| edge_value(net, e)).collect();
        prefix.clear();
        prefix.push(1.0);
        for v in &vals {
            prefix.push(prefix.last().unwrap() * v);
        }
        value += xf * prefix[vals.len()];
        let mut suffix = 1.0;
        for (j, e) in m.edges.iter().enumerate().rev() {
            if let Some(idx) = edge_index(net, e) {
                gradient[idx] += xf * prefix[j] * suffix;
            }
            suffix *= vals[j];
        }
    }
    Ok(PathPolynomial { monomials, value, gradient })
}

/// Draws sample point `i` from `N(0, I)`, redrawing while any hidden
/// pre-activation lies within `atol` of zero.
///
/// A pre-activation that is exactly zero comes from a neuron with no live
/// inputs and a zero bias; it is zero on a whole neighborhood, so it is not
/// a fold and does not trigger a redraw. The result depends only on
/// `(seed, i)`.
pub fn sample_point(net: &Network, seed: u64, i: u64, atol: f64) -> Result<(Trace, usize)> {
    let n0 = net.arch().input_dim();
    let mut rng = stream(seed, Purpose::SamplePoint, i);
    let mut x = vec![0.0; n0];
    for redraws in 0..RESAMPLE_BUDGET {
        for v in x.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let trace = net.trace_unchecked(&x);
        let d = trace.pre.len();
        let near_fold = trace.pre[..d - 1].iter().flatten().any(|&z| z != 0.0 && z.abs() <= atol);
        if !near_fold {
            return Ok((trace, redraws));
        }
    }
    Err(Error::ResampleBudget(RESAMPLE_BUDGET))
}

/// Stacked gradients at `m` sampled points, one row per (point, output).
#[derive(Clone, Debug)]
pub struct JacobianBatch {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub data: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub redraws: usize,
    pub seed: u64,
}

impl JacobianBatch {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

pub fn batch_jacobian(net: &Network, m: usize, seed: u64, atol: f64) -> Result<JacobianBatch> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one sample point".into()));
    }
    let arch = net.arch();
    let cols = arch.param_count();
    let per = arch.output_dim() * cols;
    let mut data = vec![0.0; m * per];
    let mut points = Vec::with_capacity(m);
    let mut redraws = 0;
    let mut ws = GradWorkspace::default();
    for i in 0..m {
        let (trace, r) = sample_point(net, seed, i as u64, atol)?;
        redraws += r;
        write_gradient_rows(net, &trace, &mut data[i * per..(i + 1) * per], &mut ws);
        points.push(trace.input);
    }
    Ok(JacobianBatch { rows: m * arch.output_dim(), cols, data, points, redraws, seed })
}
