//! Architectures, parameter vectors, evaluation and ternary labels.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Entries with `|z| <= DEFAULT_ZERO_ATOL` are labeled zero.
pub const DEFAULT_ZERO_ATOL: f64 = 1e-12;
pub const HE_BIAS_STD: f64 = 0.1;

/// Layer widths `(n_0, ..., n_d)`.
///
/// Hidden layers carry biases; the output layer is linear and, unless
/// `output_bias` is set, has no bias.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    widths: Vec<usize>,
    #[serde(default)]
    output_bias: bool,
}

impl Architecture {
    pub fn new(widths: impl Into<Vec<usize>>) -> Result<Self> {
        let widths = widths.into();
        if widths.len() < 2 {
            return Err(Error::InvalidArchitecture(format!("need at least an input and an output width, got {widths:?}")));
        }
        if let Some(p) = widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidArchitecture(format!("width {p} is zero")));
        }
        Ok(Self { widths, output_bias: false })
    }

    pub fn with_output_bias(mut self, on: bool) -> Self {
        self.output_bias = on;
        self
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.depth()]
    }

    /// Width `n_l` for `l` in `0..=depth`.
    pub fn width(&self, l: usize) -> usize {
        self.widths[l]
    }

    pub fn has_output_bias(&self) -> bool {
        self.output_bias
    }

    /// Whether layer `l` (1-based) has a bias vector.
    pub fn layer_has_bias(&self, l: usize) -> bool {
        l < self.depth() || self.output_bias
    }

    pub fn hidden_neurons(&self) -> usize {
        self.widths[1..self.depth()].iter().sum()
    }

    pub fn total_neurons(&self) -> usize {
        self.widths[1..].iter().sum()
    }

    pub fn param_count(&self) -> usize {
        (1..=self.depth())
            .map(|l| {
                let n = self.widths[l];
                n * self.widths[l - 1] + if self.layer_has_bias(l) { n } else { 0 }
            })
            .sum()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        write!(f, "({})", parts.join(","))?;
        if self.output_bias {
            write!(f, "+b")?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// Parses `2,5,3,3`, `(2,5,3,3)` or `2-5-3-3`; a trailing `+b` turns on the output bias.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (body, bias) = match s.strip_suffix("+b") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let body = body.trim().trim_start_matches('(').trim_end_matches(')');
        let widths = body
            .split(|c| c == ',' || c == '-' || c == 'x')
            .map(|t| t.trim().parse::<usize>().map_err(|_| Error::InvalidArchitecture(format!("bad width {t:?} in {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Architecture::new(widths)?.with_output_bias(bias))
    }
}

/// Offsets of each layer's block inside the flat parameter vector.
///
/// Order: for each layer, the weight matrix row-major, then its bias.
#[derive(Clone, Debug)]
pub struct Layout {
    weight_offset: Vec<usize>,
    bias_offset: Vec<Option<usize>>,
    len: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let d = arch.depth();
        let mut weight_offset = Vec::with_capacity(d);
        let mut bias_offset = Vec::with_capacity(d);
        let mut off = 0;
        for l in 1..=d {
            weight_offset.push(off);
            off += arch.width(l) * arch.width(l - 1);
            if arch.layer_has_bias(l) {
                bias_offset.push(Some(off));
                off += arch.width(l);
            } else {
                bias_offset.push(None);
            }
        }
        Self { weight_offset, bias_offset, len: off }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Flat index of `W^l[row][col]`, `l` 1-based.
    pub fn weight(&self, l: usize, row: usize, col: usize, cols: usize) -> usize {
        self.weight_offset[l - 1] + row * cols + col
    }

    pub fn weight_block(&self, l: usize) -> usize {
        self.weight_offset[l - 1]
    }

    /// Flat index of `b^l[i]`, if layer `l` has a bias.
    pub fn bias(&self, l: usize, i: usize) -> Option<usize> {
        self.bias_offset[l - 1].map(|o| o + i)
    }

    pub fn bias_block(&self, l: usize) -> Option<usize> {
        self.bias_offset[l - 1]
    }
}

/// Neuron `index` (0-based) of layer `layer` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Neuron {
    pub layer: usize,
    pub index: usize,
}

impl Neuron {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

impl fmt::Display for Neuron {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.layer, self.index)
    }
}

/// Entry of a ternary label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    Neg,
    Zero,
    Pos,
}

impl Sign {
    pub fn of(z: f64, atol: f64) -> Sign {
        if z.abs() <= atol {
            Sign::Zero
        } else if z > 0.0 {
            Sign::Pos
        } else {
            Sign::Neg
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Sign::Neg => -1.0,
            Sign::Zero => 0.0,
            Sign::Pos => 1.0,
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Neg => Sign::Pos,
            Sign::Zero => Sign::Zero,
            Sign::Pos => Sign::Neg,
        }
    }

    fn symbol(self) -> char {
        match self {
            Sign::Neg => '-',
            Sign::Zero => '0',
            Sign::Pos => '+',
        }
    }
}

/// Per-layer signs of the pre-activations at a point.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TernaryLabel {
    pub layers: Vec<Vec<Sign>>,
}

impl TernaryLabel {
    pub fn new(layers: Vec<Vec<Sign>>) -> Self {
        Self { layers }
    }

    /// Number of `+1` entries in each layer.
    pub fn dim_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.iter().filter(|&&s| s == Sign::Pos).count()).collect()
    }

    pub fn zeros(&self) -> usize {
        self.layers.iter().flatten().filter(|&&s| s == Sign::Zero).count()
    }

    pub fn has_zero(&self) -> bool {
        self.zeros() > 0
    }

    pub fn get(&self, l: usize, i: usize) -> Sign {
        self.layers[l - 1][i]
    }

    pub fn set(&mut self, l: usize, i: usize, s: Sign) {
        self.layers[l - 1][i] = s;
    }

    /// The label restricted to layers `1..=upto`.
    pub fn truncated(&self, upto: usize) -> TernaryLabel {
        TernaryLabel { layers: self.layers[..upto].to_vec() }
    }
}

impl fmt::Display for TernaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, l) in self.layers.iter().enumerate() {
            if k > 0 {
                write!(f, "|")?;
            }
            for s in l {
                write!(f, "{}", s.symbol())?;
            }
        }
        Ok(())
    }
}

impl FromStr for TernaryLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let layers = s
            .split('|')
            .map(|part| {
                part.chars()
                    .map(|c| match c {
                        '+' => Ok(Sign::Pos),
                        '-' => Ok(Sign::Neg),
                        '0' => Ok(Sign::Zero),
                        _ => Err(Error::InvalidArgument(format!("bad label symbol {c:?}"))),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TernaryLabel { layers })
    }
}

/// Pre-activations of every layer at one input.
#[derive(Clone, Debug)]
pub struct Trace {
    pub input: Vec<f64>,
    /// `pre[l-1]` holds `z^l`, for `l` in `1..=depth`.
    pub pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("depth >= 1")
    }

    /// Post-activation of layer `l` (`l = 0` is the input).
    pub fn post(&self, l: usize) -> Vec<f64> {
        if l == 0 {
            self.input.clone()
        } else {
            self.pre[l - 1].iter().map(|&z| z.max(0.0)).collect()
        }
    }

    pub fn label(&self, atol: f64) -> TernaryLabel {
        TernaryLabel { layers: self.pre.iter().map(|l| l.iter().map(|&z| Sign::of(z, atol)).collect()).collect() }
    }

    /// Smallest `|z|` over hidden neurons.
    pub fn hidden_margin(&self) -> f64 {
        let d = self.pre.len();
        self.pre[..d - 1].iter().flatten().fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

/// A point of parameter space for a fixed architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    /// `weights[l-1]` is `W^l`, `n_l x n_{l-1}` row-major.
    weights: Vec<Vec<f64>>,
    /// `biases[l-1]` is `b^l`; empty for a bias-free output layer.
    biases: Vec<Vec<f64>>,
}

impl Network {
    pub fn zeros(arch: &Architecture) -> Self {
        let d = arch.depth();
        let weights = (1..=d).map(|l| vec![0.0; arch.width(l) * arch.width(l - 1)]).collect();
        let biases = (1..=d).map(|l| if arch.layer_has_bias(l) { vec![0.0; arch.width(l)] } else { Vec::new() }).collect();
        Self { arch: arch.clone(), weights, biases }
    }

    /// Builds a network from per-layer row-major matrices and biases.
    ///
    /// `biases` has one entry per hidden layer, plus one for the output
    /// layer when the architecture has an output bias.
    pub fn from_layers(arch: &Architecture, weights: Vec<Vec<f64>>, biases: Vec<Vec<f64>>) -> Result<Self> {
        let d = arch.depth();
        if weights.len() != d {
            return Err(Error::Format(format!("expected {d} weight matrices, got {}", weights.len())));
        }
        let nb = if arch.has_output_bias() { d } else { d - 1 };
        if biases.len() != nb {
            return Err(Error::Format(format!("expected {nb} bias vectors, got {}", biases.len())));
        }
        for l in 1..=d {
            let want = arch.width(l) * arch.width(l - 1);
            if weights[l - 1].len() != want {
                return Err(Error::Format(format!("layer {l} weights have {} entries, expected {want}", weights[l - 1].len())));
            }
            if l <= nb && biases[l - 1].len() != arch.width(l) {
                return Err(Error::Format(format!(
                    "layer {l} bias has {} entries, expected {}",
                    biases[l - 1].len(),
                    arch.width(l)
                )));
            }
        }
        let mut biases = biases;
        if !arch.has_output_bias() {
            biases.push(Vec::new());
        }
        let net = Self { arch: arch.clone(), weights, biases };
        if net.weights.iter().chain(&net.biases).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(net)
    }

    pub fn from_flat(arch: &Architecture, theta: &[f64]) -> Result<Self> {
        let lay = arch.layout();
        if theta.len() != lay.len() {
            return Err(Error::ParamLength { expected: lay.len(), got: theta.len() });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        let mut net = Self::zeros(arch);
        let mut off = 0;
        for l in 1..=arch.depth() {
            let nw = net.weights[l - 1].len();
            net.weights[l - 1].copy_from_slice(&theta[off..off + nw]);
            off += nw;
            let nb = net.biases[l - 1].len();
            net.biases[l - 1].copy_from_slice(&theta[off..off + nb]);
            off += nb;
        }
        Ok(net)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.param_count());
        for l in 0..self.arch.depth() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn depth(&self) -> usize {
        self.arch.depth()
    }

    /// `W^l`, row-major.
    pub fn weights(&self, l: usize) -> &[f64] {
        &self.weights[l - 1]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.weights[l - 1]
    }

    /// `b^l`; empty for a bias-free output layer.
    pub fn bias(&self, l: usize) -> &[f64] {
        &self.biases[l - 1]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.biases[l - 1]
    }

    pub fn weight(&self, l: usize, row: usize, col: usize) -> f64 {
        self.weights[l - 1][row * self.arch.width(l - 1) + col]
    }

    pub fn set_weight(&mut self, l: usize, row: usize, col: usize, v: f64) {
        let c = self.arch.width(l - 1);
        self.weights[l - 1][row * c + col] = v;
    }

    /// Bias of neuron `i` in layer `l`, zero when the layer has none.
    pub fn bias_at(&self, l: usize, i: usize) -> f64 {
        self.biases[l - 1].get(i).copied().unwrap_or(0.0)
    }

    pub fn row(&self, l: usize, i: usize) -> &[f64] {
        let c = self.arch.width(l - 1);
        &self.weights[l - 1][i * c..(i + 1) * c]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim() {
            return Err(Error::InputDim { expected: self.arch.input_dim(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input"));
        }
        Ok(())
    }

    /// Applies layer `l` to `input`, writing pre-activations into `out`.
    pub fn layer_pre(&self, l: usize, input: &[f64], out: &mut [f64]) {
        let cols = self.arch.width(l - 1);
        let w = &self.weights[l - 1];
        let b = &self.biases[l - 1];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &w[i * cols..(i + 1) * cols];
            let mut s = b.get(i).copied().unwrap_or(0.0);
            for (a, x) in row.iter().zip(input) {
                s += a * x;
            }
            *o = s;
        }
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        Ok(self.trace_unchecked(x))
    }

    pub(crate) fn trace_unchecked(&self, x: &[f64]) -> Trace {
        let d = self.depth();
        let mut pre = Vec::with_capacity(d);
        let mut act = x.to_vec();
        for l in 1..=d {
            let mut z = vec![0.0; self.arch.width(l)];
            self.layer_pre(l, &act, &mut z);
            act = z.iter().map(|&v| v.max(0.0)).collect();
            pre.push(z);
        }
        Trace { input: x.to_vec(), pre }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.pre.pop().expect("depth >= 1"))
    }

    /// Post-activations after layers `1..=l` (`F_(l)`).
    pub fn forward_upto(&self, x: &[f64], l: usize) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.post(l))
    }

    pub fn ternary_label(&self, x: &[f64], atol: f64) -> Result<TernaryLabel> {
        Ok(self.trace(x)?.label(atol))
    }

    pub fn to_file(&self) -> NetworkFile {
        let d = self.depth();
        let weights = (1..=d)
            .map(|l| {
                let c = self.arch.width(l - 1);
                self.weights[l - 1].chunks(c).map(|r| r.to_vec()).collect()
            })
            .collect();
        let nb = if self.arch.has_output_bias() { d } else { d - 1 };
        NetworkFile { arch: self.arch.widths().to_vec(), weights, biases: self.biases[..nb].to_vec() }
    }

    pub fn to_json(&self) -> Result<String> {
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: NetworkFile = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        f.into_network()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk form: `arch`, per-layer nested weight rows, per-layer biases.
///
/// A bias list with one entry per layer means the output layer has a bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkFile {
    pub arch: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

impl NetworkFile {
    pub fn into_network(self) -> Result<Network> {
        let arch = Architecture::new(self.arch)?;
        let d = arch.depth();
        let arch = if self.biases.len() == d { arch.with_output_bias(true) } else { arch };
        let mut flat_w = Vec::with_capacity(d);
        for (l, m) in self.weights.into_iter().enumerate() {
            let cols = arch.widths().get(l).copied().unwrap_or(0);
            if m.iter().any(|r| r.len() != cols) {
                return Err(Error::Format(format!("layer {} has a row of the wrong length", l + 1)));
            }
            flat_w.push(m.into_iter().flatten().collect());
        }
        Network::from_layers(&arch, flat_w, self.biases)
    }
}

/// He initialization: weights `N(0, 2/fan_in)`, biases `N(0, HE_BIAS_STD^2)`.
pub fn he_init(arch: &Architecture, seed: u64) -> Network {
    let mut net = Network::zeros(arch);
    for l in 1..=arch.depth() {
        let std = (2.0 / arch.width(l - 1) as f64).sqrt();
        let mut rng = stream(seed, Purpose::HeWeights, l as u64);
        for w in net.weights_mut(l) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = std * z;
        }
        let mut rng = stream(seed, Purpose::HeBiases, l as u64);
        for b in net.bias_mut(l) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *b = HE_BIAS_STD * z;
        }
    }
    net
}

/// `n_0` minus the number of zero entries, floored at -1.
pub fn cell_dim_from_label(label: &TernaryLabel, n0: usize) -> i64 {
    (n0 as i64 - label.zeros() as i64).max(-1)
}
