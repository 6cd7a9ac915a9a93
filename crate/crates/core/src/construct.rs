//! Parameters with every adjacent pair of bent hyperplanes meeting
//! transversally, built layer by layer from positive-axis hyperplanes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdim::{estimate_fdim, FdimEstimate, FdimOptions};
use crate::geometry::{
    check_lra_near_intersections, check_tpic, default_bbox, enumerate_regions, pair_witness, region_witness, Bbox, TpicReport,
    MAX_GEOMETRY_DIM,
};
use crate::grad::{batch_jacobian, write_gradient_rows, GradWorkspace};
use crate::net::{Architecture, Network, Neuron, Sign, TernaryLabel};
use crate::rank::{numerical_rank, RankAccumulator};
use crate::rng::{stream, Purpose};
use crate::symmetry::IMAGE_RANK_TOL;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstructOptions {
    /// Relative spread between the copies of a positive-axis hyperplane.
    pub clone_spread: f64,
    /// Relative size of the final perturbation of every parameter.
    pub perturbation: f64,
    pub bias_start: f64,
    pub max_bias_retries: usize,
    /// Redraws of the copy spreads per layer.
    pub spread_draws: usize,
    /// Independent restarts before giving up.
    pub attempts: usize,
    /// Half-width of the box searched for witnesses before rescaling.
    pub search_half: f64,
    /// Witnesses are pulled inside this half-width by rescaling the input.
    pub target_half: f64,
    pub m_multiplier: f64,
}

impl Default for ConstructOptions {
    fn default() -> Self {
        Self {
            clone_spread: 0.1,
            perturbation: 1e-6,
            bias_start: 1e-2,
            max_bias_retries: 60,
            spread_draws: 8,
            attempts: 16,
            search_half: 1e3,
            target_half: 2.0,
            m_multiplier: 100.0,
        }
    }
}

/// Weights i.i.d. uniform in `[0.5, 1.5]` and bias `-bias_scale`.
pub fn positive_axis_hyperplane(dim: usize, seed: u64, bias_scale: f64) -> Result<(Vec<f64>, f64)> {
    if dim == 0 || !(bias_scale > 0.0) {
        return Err(Error::InvalidArgument(format!("dim {dim}, bias scale {bias_scale}")));
    }
    let mut rng = stream(seed, Purpose::Construction, dim as u64);
    let u = Uniform::new(0.5, 1.5).expect("valid range");
    Ok(((0..dim).map(|_| u.sample(&mut rng)).collect(), -bias_scale))
}

/// Rejects architectures with a hidden layer narrower than the input.
pub fn check_widths(arch: &Architecture) -> Result<()> {
    let n0 = arch.input_dim();
    for l in 1..arch.depth() {
        if arch.width(l) < n0 {
            return Err(Error::InvalidArchitecture(format!(
                "hidden layer {l} has width {} < input dimension {n0}",
                arch.width(l)
            )));
        }
    }
    if n0 > MAX_GEOMETRY_DIM {
        return Err(Error::Unsupported(format!("construction needs input dimension <= {MAX_GEOMETRY_DIM}")));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PositiveAxisRecord {
    pub layer: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Bias values tried, over all spread draws.
    pub iterations: usize,
    /// Smallest and largest tried bias with every pair witnessed.
    pub window: (f64, f64),
}

/// One unbounded cell of the nested chain, with an interior point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainCell {
    pub layer: usize,
    pub pattern: TernaryLabel,
    pub witness: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstructionState {
    pub arch: Architecture,
    pub seed: u64,
    pub attempt: usize,
    pub direction: Vec<f64>,
    pub hyperplanes: Vec<PositiveAxisRecord>,
    pub chain: Vec<ChainCell>,
    /// Factor applied to the first-layer weights.
    pub input_scale: f64,
    pub perturbation: f64,
    pub options: ConstructOptions,
    pub report: CertificationReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificationReport {
    pub tpic: TpicReport,
    pub lra_pass: bool,
    pub fdim: FdimEstimate,
    pub upper_bound_attained: bool,
}

impl CertificationReport {
    pub fn certified(&self) -> bool {
        self.tpic.passed() && self.lra_pass && self.upper_bound_attained
    }

    /// First failing check, for messages.
    pub fn failure(&self) -> Option<String> {
        if let Some(p) = self.tpic.failures().first() {
            return Some(format!("pair {}-{} has no transversal intersection", p.lower, p.upper));
        }
        if !self.lra_pass {
            return Some("regions near an intersection share an affine map".into());
        }
        if !self.upper_bound_attained {
            return Some(format!("fdim {} below bound {}", self.fdim.fdim, self.fdim.upper_bound));
        }
        None
    }
}

/// TPIC, LRA near the witnesses, and functional dimension at the bound.
pub fn verify_construction(net: &Network, m_multiplier: f64, seed: u64) -> Result<CertificationReport> {
    let bbox = default_bbox(net.arch().input_dim());
    let tpic = check_tpic(net, &bbox)?;
    let lra = check_lra_near_intersections(net, &tpic)?;
    let fdim = certify_fdim(net, &bbox, &FdimOptions::default().with_multiplier(m_multiplier).with_seed(seed))?;
    Ok(CertificationReport { lra_pass: lra.passed(), upper_bound_attained: fdim.attains_bound(), tpic, fdim })
}

/// Sampled rank, topped up with one interior point per region when the
/// Gaussian sample misses regions of small mass.
fn certify_fdim(net: &Network, bbox: &Bbox, opts: &FdimOptions) -> Result<FdimEstimate> {
    let mut est = estimate_fdim(net, opts)?;
    if est.attains_bound() {
        return Ok(est);
    }
    let arch = net.arch();
    let dim = arch.param_count();
    let per = arch.output_dim() * dim;
    let mut acc = RankAccumulator::new(dim, opts.rel_tol).with_cap(est.upper_bound);
    let j = batch_jacobian(net, est.points, opts.seed, opts.zero_atol)?;
    acc.push_rows(&j.data, j.rows);
    let regions = enumerate_regions(net, bbox)?;
    let mut buf = vec![0.0; per];
    let mut ws = GradWorkspace::default();
    for r in &regions {
        write_gradient_rows(net, &net.trace(&r.witness)?, &mut buf, &mut ws);
        acc.push_rows(&buf, arch.output_dim());
    }
    est.fdim = acc.rank();
    est.points_used = est.points + regions.len();
    Ok(est)
}

fn sign_pattern(n: usize, k: usize) -> Vec<Sign> {
    (0..n).map(|j| if j < k { Sign::Pos } else { Sign::Neg }).collect()
}

/// Network made of the first `depth` layers, with an output bias.
fn prefix(arch: &Architecture, weights: &[Vec<f64>], biases: &[Vec<f64>], depth: usize) -> Result<Network> {
    let a = Architecture::new(arch.widths()[..=depth].to_vec())?.with_output_bias(true);
    Network::from_layers(&a, weights[..depth].to_vec(), biases[..depth].to_vec())
}

fn chain_pattern(arch: &Architecture, upto: usize) -> TernaryLabel {
    let k = arch.input_dim();
    TernaryLabel::new((1..=upto).map(|l| sign_pattern(arch.width(l), k)).collect())
}

/// Pushes `R u` outwards until it lies in the chain cell.
fn chain_witness(net: &Network, u: &[f64], upto: usize, start: f64) -> Result<Option<(f64, Vec<f64>)>> {
    let want = chain_pattern(net.arch(), upto);
    let mut r = start;
    for _ in 0..80 {
        let x: Vec<f64> = u.iter().map(|v| r * v).collect();
        if net.ternary_label(&x, 0.0)?.truncated(upto) == want {
            return Ok(Some((r, x)));
        }
        r *= 2.0;
    }
    Ok(None)
}

/// Unperturbed, unverified output of one construction attempt.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub net: Network,
    pub direction: Vec<f64>,
    pub hyperplanes: Vec<PositiveAxisRecord>,
    pub chain: Vec<ChainCell>,
    pub input_scale: f64,
}

pub fn build_candidate(arch: &Architecture, seed: u64, attempt: usize, opts: &ConstructOptions) -> Result<Candidate> {
    let k = arch.input_dim();
    let d = arch.depth();
    let sub = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(attempt as u64);
    let mut rng = stream(sub, Purpose::Construction, 0);
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut biases: Vec<Vec<f64>> = Vec::with_capacity(d);

    // Layer 1: generic hyperplanes co-oriented towards a far direction.
    let mut u: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= un);
    let n1 = arch.width(1);
    let mut w1 = Vec::with_capacity(n1 * k);
    let mut b1 = Vec::with_capacity(n1);
    for j in 0..n1 {
        let mut w: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut b: f64 = StandardNormal.sample(&mut rng);
        let along: f64 = w.iter().zip(&u).map(|(p, q)| p * q).sum();
        let want_pos = j < k || d == 1;
        if (along > 0.0) != want_pos {
            w.iter_mut().for_each(|v| *v = -*v);
            b = -b;
        }
        w1.extend(w);
        b1.push(b);
    }
    weights.push(w1);
    biases.push(b1);

    let search = Bbox::cube(k, opts.search_half);
    let mut hyperplanes = Vec::new();
    let mut chain = Vec::new();
    let mut radius = 1.0;
    for l in 2..=d {
        let net_prev = prefix(arch, &weights, &biases, l - 1)?;
        let (r, xc) = chain_witness(&net_prev, &u, l - 1, radius)?
            .ok_or_else(|| Error::Construction(format!("no point of the chain cell at layer {}", l - 1)))?;
        radius = r;
        chain.push(ChainCell { layer: l - 1, pattern: chain_pattern(arch, l - 1), witness: xc.clone() });
        let a_ref = net_prev.forward_upto(&xc, l - 1)?;
        let n_prev = arch.width(l - 1);
        let n = arch.width(l);
        let (w, _) = positive_axis_hyperplane(n_prev, sub.wrapping_add(l as u64), 1.0)?;
        let wa: f64 = w.iter().zip(&a_ref).map(|(p, q)| p * q).sum();
        if wa <= 0.0 {
            return Err(Error::Construction(format!("layer {} image is not in the open orthant", l - 1)));
        }
        let hidden = l < d;
        let clones = |spreads: &[Vec<f64>], beta: f64| -> (Vec<f64>, Vec<f64>) {
            let anchor: Vec<f64> = a_ref.iter().map(|v| v * beta / wa).collect();
            let mut ws = Vec::with_capacity(n * n_prev);
            let mut bs = Vec::with_capacity(n);
            for (j, s) in spreads.iter().enumerate() {
                let sign = if hidden && j >= k { -1.0 } else { 1.0 };
                let wj: Vec<f64> = w.iter().zip(s).map(|(p, q)| p * (1.0 + opts.clone_spread * q)).collect();
                bs.push(-sign * wj.iter().zip(&anchor).map(|(p, q)| p * q).sum::<f64>());
                ws.extend(wj.iter().map(|v| sign * v));
            }
            (ws, bs)
        };
        let with_layer = |ws: Vec<f64>, bs: Vec<f64>| -> Result<Network> {
            let mut wt = weights.clone();
            let mut bt = biases.clone();
            wt.push(ws);
            bt.push(bs);
            prefix(arch, &wt, &bt, l)
        };
        // Sums layer `l` into one output so hidden-layer LRA can be checked.
        let with_readout = |ws: Vec<f64>, bs: Vec<f64>| -> Result<Network> {
            let mut wt = weights.clone();
            let mut bt = biases.clone();
            wt.push(ws);
            bt.push(bs);
            wt.push(vec![1.0; n]);
            bt.push(vec![0.0]);
            let a = Architecture::new([&arch.widths()[..=l], &[1]].concat())?.with_output_bias(true);
            Network::from_layers(&a, wt, bt)
        };
        let regions: Vec<TernaryLabel> = enumerate_regions(&with_layer(vec![0.0; n * n_prev], vec![0.0; n])?, &search)?
            .into_iter()
            .map(|r| r.pattern)
            .collect();
        let layer_ok = |spreads: &[Vec<f64>], beta: f64| -> Result<bool> {
            let (ws, bs) = clones(spreads, beta);
            let trial = with_layer(ws.clone(), bs.clone())?;
            let mut pairs = Vec::with_capacity(n_prev * n);
            for i in 0..n_prev {
                for j in 0..n {
                    let p = pair_witness(&trial, &regions, Neuron::new(l - 1, i), Neuron::new(l, j), &search)?;
                    if !p.ok() {
                        return Ok(false);
                    }
                    pairs.push(p);
                }
            }
            if !hidden {
                return Ok(true);
            }
            let ro = with_readout(ws, bs)?;
            let ro_regions: Vec<TernaryLabel> = enumerate_regions(&ro, &search)?.into_iter().map(|r| r.pattern).collect();
            let mut ro_pairs = Vec::with_capacity(pairs.len());
            for p in &pairs {
                let q = pair_witness(&ro, &ro_regions, p.lower, p.upper, &search)?;
                if !q.ok() {
                    return Ok(false);
                }
                ro_pairs.push(q);
            }
            let report = TpicReport { pairs: ro_pairs, bbox: search.clone() };
            Ok(check_lra_near_intersections(&ro, &report)?.passed())
        };
        let mut chosen = None;
        let mut iterations = 0;
        for _ in 0..opts.spread_draws {
            let spreads: Vec<Vec<f64>> = (0..n)
                .map(|j| if j == 0 { vec![0.0; n_prev] } else { (0..n_prev).map(|_| rng.random_range(-1.0..1.0)).collect() })
                .collect();
            let mut ok_betas = Vec::new();
            for it in 0..opts.max_bias_retries {
                iterations += 1;
                let beta = opts.bias_start * 2f64.powi(it as i32);
                if layer_ok(&spreads, beta)? {
                    ok_betas.push(beta);
                } else if !ok_betas.is_empty() {
                    break;
                }
            }
            if !ok_betas.is_empty() {
                chosen = Some((spreads, ok_betas));
                break;
            }
        }
        let Some((spreads, ok_betas)) = chosen else {
            return Err(Error::Construction(format!("no bias witnesses every pair into layer {l}")));
        };
        let (lo, hi) = (ok_betas[0], ok_betas[ok_betas.len() - 1]);
        let beta = ok_betas[ok_betas.len() / 2];
        let (ws, bs) = clones(&spreads, beta);
        hyperplanes.push(PositiveAxisRecord { layer: l, weights: w.clone(), bias: -beta, iterations, window: (lo, hi) });
        weights.push(ws);
        biases.push(bs);
    }
    let full_arch = arch.clone().with_output_bias(true);
    let mut net = Network::from_layers(&full_arch, weights, biases)?;
    if d >= 2 {
        let (_, xc) = chain_witness(&net, &u, d - 1, radius)?
            .ok_or_else(|| Error::Construction(format!("no point of the chain cell at layer {}", d - 1)))?;
        if chain.last().map(|c| c.layer) != Some(d - 1) {
            chain.push(ChainCell { layer: d - 1, pattern: chain_pattern(arch, d - 1), witness: xc });
        } else {
            chain.last_mut().expect("nonempty").witness = xc;
        }
    }

    // Pull every witness into the target box.
    let tpic = check_tpic(&net, &search)?;
    let far = tpic.pairs.iter().filter_map(|p| p.witness.as_ref()).flat_map(|x| x.iter().map(|v| v.abs())).fold(0.0, f64::max);
    let input_scale = (far / opts.target_half).max(1.0);
    net.weights_mut(1).iter_mut().for_each(|v| *v *= input_scale);
    for c in &mut chain {
        c.witness.iter_mut().for_each(|v| *v /= input_scale);
    }
    Ok(Candidate { net, direction: u, hyperplanes, chain, input_scale })
}

/// Multiplies every parameter by `1 + size * g`, `g` standard normal.
pub fn perturb(net: &Network, size: f64, seed: u64, index: u64) -> Result<Network> {
    let mut rng = stream(seed, Purpose::Perturbation, index);
    let theta: Vec<f64> = net
        .to_flat()
        .iter()
        .map(|v| {
            let g: f64 = StandardNormal.sample(&mut rng);
            v * (1.0 + size * g)
        })
        .collect();
    Network::from_flat(net.arch(), &theta)
}

/// Builds parameters for `arch` (with an output bias) that pass
/// [`verify_construction`].
pub fn construct_no_hidden_symmetry(arch: &Architecture, seed: u64) -> Result<(Network, ConstructionState)> {
    construct_with(arch, seed, &ConstructOptions::default())
}

pub fn construct_with(arch: &Architecture, seed: u64, opts: &ConstructOptions) -> Result<(Network, ConstructionState)> {
    check_widths(arch)?;
    let mut last_failure = String::new();
    for attempt in 0..opts.attempts {
        let built = match build_candidate(arch, seed, attempt, opts) {
            Ok(b) => b,
            Err(Error::Construction(msg) | Error::Lp(msg)) => {
                log::debug!("attempt {attempt}: {msg}");
                last_failure = msg;
                continue;
            }
            Err(e) => return Err(e),
        };
        let net = perturb(&built.net, opts.perturbation, seed, attempt as u64)?;
        let report = verify_construction(&net, opts.m_multiplier, seed)?;
        if let Some(msg) = report.failure() {
            log::debug!("attempt {attempt}: {msg}");
            last_failure = msg;
            continue;
        }
        let chain_ok = built
            .chain
            .iter()
            .all(|c| net.ternary_label(&c.witness, 0.0).map(|lab| lab.truncated(c.layer) == c.pattern).unwrap_or(false));
        if !chain_ok {
            last_failure = "perturbation moved a chain witness out of its cell".into();
            continue;
        }
        let state = ConstructionState {
            arch: net.arch().clone(),
            seed,
            attempt,
            direction: built.direction,
            hyperplanes: built.hyperplanes,
            chain: built.chain,
            input_scale: built.input_scale,
            perturbation: opts.perturbation,
            options: opts.clone(),
            report,
        };
        return Ok((net, state));
    }
    Err(Error::Construction(format!("{} attempts failed; last: {last_failure}", opts.attempts)))
}

/// Affine-hull dimension of `F_(layer)` on points sampled inside the region
/// with `pattern` (layers `1..=layer`).
pub fn image_dimension_probe(net: &Network, layer: usize, pattern: &TernaryLabel, bbox: &Bbox, seed: u64) -> Result<usize> {
    if layer == 0 || layer >= net.depth() || pattern.layers.len() != layer {
        return Err(Error::InvalidArgument(format!("pattern must cover hidden layers 1..={layer}")));
    }
    if pattern.has_zero() {
        return Err(Error::Unsupported("pattern with zero signs".into()));
    }
    let region =
        region_witness(net, pattern, bbox)?.ok_or_else(|| Error::InvalidArgument(format!("region {pattern} is empty")))?;
    let n = net.arch().width(layer);
    let k = net.arch().input_dim();
    let count = 4 * (n + k) + 8;
    let mut rng = stream(seed, Purpose::ImageProbe, 0);
    let r = 0.5 * region.margin;
    let mut data = Vec::with_capacity(count * n);
    for _ in 0..count {
        let mut g: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let s: f64 = rng.random_range(0.0..1.0);
        g.iter_mut().for_each(|v| *v *= r * s / gn);
        let x: Vec<f64> = region.witness.iter().zip(&g).map(|(p, q)| p + q).collect();
        data.extend(net.forward_upto(&x, layer)?);
    }
    let mut mean = vec![0.0; n];
    for row in data.chunks(n) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / count as f64;
        }
    }
    for row in data.chunks_mut(n) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Ok(numerical_rank(&data, count, n, IMAGE_RANK_TOL))
}
