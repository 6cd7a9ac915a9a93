//! Batch functional dimension.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{sample_point, write_gradient_rows, GradWorkspace};
use crate::net::{Architecture, Network, DEFAULT_ZERO_ATOL};
use crate::rank::RankAccumulator;

pub const DEFAULT_M_MULTIPLIER: f64 = 100.0;
pub const DEFAULT_RANK_TOL: f64 = 1e-6;
const BLOCK_POINTS: usize = 64;

/// `D - (number of hidden neurons)`, one scaling direction per hidden neuron.
pub fn fdim_upper_bound(arch: &Architecture) -> usize {
    arch.param_count() - arch.hidden_neurons()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FdimOptions {
    pub m_multiplier: f64,
    pub rel_tol: f64,
    pub zero_atol: f64,
    pub seed: u64,
    /// Stop sampling once the rank equals the upper bound.
    pub early_exit: bool,
}

impl Default for FdimOptions {
    fn default() -> Self {
        Self {
            m_multiplier: DEFAULT_M_MULTIPLIER,
            rel_tol: DEFAULT_RANK_TOL,
            zero_atol: DEFAULT_ZERO_ATOL,
            seed: 0,
            early_exit: true,
        }
    }
}

impl FdimOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_multiplier(mut self, m: f64) -> Self {
        self.m_multiplier = m;
        self
    }

    /// Number of sample points for an architecture.
    pub fn points(&self, arch: &Architecture) -> usize {
        (self.m_multiplier * fdim_upper_bound(arch) as f64).ceil().max(1.0) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdimEstimate {
    pub fdim: usize,
    pub upper_bound: usize,
    /// Points requested.
    pub points: usize,
    /// Points actually evaluated before any early exit.
    pub points_used: usize,
    pub redraws: usize,
    pub seed: u64,
}

impl FdimEstimate {
    pub fn attains_bound(&self) -> bool {
        self.fdim == self.upper_bound
    }
}

/// Rank of the sampled Jacobian, recorded at each requested point count.
///
/// `checkpoints` must be increasing; the last one is the total sample size.
/// Results are identical to separate runs with fewer points because sample
/// `i` depends only on `(seed, i)`.
pub fn fdim_at_checkpoints(net: &Network, checkpoints: &[usize], opts: &FdimOptions) -> Result<Vec<FdimEstimate>> {
    if checkpoints.is_empty() || checkpoints.windows(2).any(|w| w[0] >= w[1]) || checkpoints[0] == 0 {
        return Err(Error::InvalidArgument("checkpoints must be positive and increasing".into()));
    }
    if !(opts.rel_tol > 0.0) || !(opts.zero_atol >= 0.0) {
        return Err(Error::InvalidArgument("tolerances must be non-negative".into()));
    }
    let arch = net.arch();
    let bound = fdim_upper_bound(arch);
    let dim = arch.param_count();
    let per = arch.output_dim() * dim;
    let total = *checkpoints.last().unwrap();
    let mut acc = RankAccumulator::new(dim, opts.rel_tol).with_cap(if opts.early_exit { bound } else { dim });
    let mut buf = vec![0.0; BLOCK_POINTS * per];
    let mut ws = GradWorkspace::default();
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next_cp = 0;
    let mut redraws = 0;
    let mut i = 0;
    while i < total {
        let n = BLOCK_POINTS.min(checkpoints[next_cp] - i);
        for j in 0..n {
            let (trace, r) = sample_point(net, opts.seed, (i + j) as u64, opts.zero_atol)?;
            redraws += r;
            write_gradient_rows(net, &trace, &mut buf[j * per..(j + 1) * per], &mut ws);
        }
        acc.push_rows(&buf[..n * per], n * arch.output_dim());
        i += n;
        let done = opts.early_exit && acc.saturated();
        while next_cp < checkpoints.len() && (i == checkpoints[next_cp] || done) {
            out.push(FdimEstimate {
                fdim: acc.rank(),
                upper_bound: bound,
                points: checkpoints[next_cp],
                points_used: i,
                redraws,
                seed: opts.seed,
            });
            next_cp += 1;
        }
        if done {
            break;
        }
    }
    Ok(out)
}

/// Numerical rank of the Jacobian of `theta -> (F(z_1), ..., F(z_m))`.
pub fn estimate_fdim(net: &Network, opts: &FdimOptions) -> Result<FdimEstimate> {
    let m = opts.points(net.arch());
    Ok(fdim_at_checkpoints(net, &[m], opts)?.pop().expect("one checkpoint"))
}
