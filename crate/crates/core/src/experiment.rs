//! Batch runs over random initializations: fdim histograms, fraction at the
//! bound, sensitivity to the number of sample points.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdim::{estimate_fdim, fdim_at_checkpoints, fdim_upper_bound, FdimOptions, DEFAULT_RANK_TOL};
use crate::net::{he_init, Architecture};
use crate::rng::digest_u64;

/// Environment variable holding the default thread budget.
pub const THREADS_ENV: &str = "HIDDENSYM_THREADS";
pub const DEFAULT_TRIALS: usize = 1000;
const PROGRESS_FILE: &str = "progress.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepMode {
    /// `n_0 = n_1 = ... = n_{d-1} = width`, one output.
    InputEqualsWidth,
    /// `n_0` fixed, hidden layers of the given width, one output.
    FixedInput(usize),
}

/// Architectures for every `(depth, width)` pair.
pub fn grid_architectures(depths: &[usize], widths: &[usize], mode: SweepMode) -> Result<Vec<Architecture>> {
    let mut out = Vec::new();
    for &d in depths {
        for &w in widths {
            if d == 0 || w == 0 {
                return Err(Error::InvalidArgument(format!("depth {d}, width {w}")));
            }
            let n0 = match mode {
                SweepMode::InputEqualsWidth => w,
                SweepMode::FixedInput(n) => n,
            };
            let mut widths = vec![n0];
            widths.extend(std::iter::repeat_n(w, d - 1));
            widths.push(1);
            out.push(Architecture::new(widths)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    pub architectures: Vec<Architecture>,
    pub trials: usize,
    pub m_multiplier: f64,
    pub rel_tol: f64,
    pub base_seed: u64,
    /// `None` uses [`THREADS_ENV`] or rayon's default.
    pub threads: Option<usize>,
    /// Completed trials are appended here and skipped when a run resumes.
    pub out_dir: Option<PathBuf>,
}

impl SweepConfig {
    pub fn new(architectures: Vec<Architecture>) -> Self {
        Self {
            architectures,
            trials: DEFAULT_TRIALS,
            m_multiplier: crate::fdim::DEFAULT_M_MULTIPLIER,
            rel_tol: DEFAULT_RANK_TOL,
            base_seed: 0,
            threads: None,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.architectures.is_empty() {
            return Err(Error::InvalidArgument("need at least one trial and one architecture".into()));
        }
        if !(self.m_multiplier >= 1.0) {
            return Err(Error::InvalidArgument(format!("m multiplier {} < 1", self.m_multiplier)));
        }
        Ok(())
    }
}

/// Seed of one trial; independent of execution order.
pub fn trial_seed(base: u64, arch: &Architecture, index: usize) -> u64 {
    digest_u64(&[&base.to_le_bytes(), arch.to_string().as_bytes(), &(index as u64).to_le_bytes()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub arch: String,
    pub trial: usize,
    pub seed: u64,
    pub rank: usize,
    pub upper_bound: usize,
    pub redraws: usize,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchResult {
    pub arch: String,
    pub upper_bound: usize,
    pub histogram: BTreeMap<usize, usize>,
    pub fraction_at_max: f64,
    pub trials: Vec<TrialRecord>,
}

impl ArchResult {
    fn from_records(arch: &Architecture, mut trials: Vec<TrialRecord>) -> Self {
        trials.sort_by_key(|r| r.trial);
        let upper_bound = fdim_upper_bound(arch);
        let mut histogram = BTreeMap::new();
        for r in &trials {
            *histogram.entry(r.rank).or_insert(0) += 1;
        }
        let at_max = trials.iter().filter(|r| r.rank == upper_bound).count();
        Self {
            arch: arch.to_string(),
            upper_bound,
            fraction_at_max: at_max as f64 / trials.len().max(1) as f64,
            histogram,
            trials,
        }
    }

    pub fn at_max(&self) -> usize {
        self.histogram.get(&self.upper_bound).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub archs: Vec<ArchResult>,
}

pub fn thread_budget(explicit: Option<usize>) -> Option<usize> {
    explicit.or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok())).filter(|&n| n > 0)
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_budget(threads) {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(pool.install(f))
}

fn load_progress(path: &Path) -> Result<Vec<TrialRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        match rec {
            Ok(r) => out.push(r),
            // a run killed mid-write leaves a partial last line
            Err(e) => log::warn!("skipping unreadable progress row: {e}"),
        }
    }
    Ok(out)
}

fn run_trial(arch: &Architecture, index: usize, cfg: &SweepConfig) -> Result<TrialRecord> {
    let seed = trial_seed(cfg.base_seed, arch, index);
    let t = Instant::now();
    let net = he_init(arch, seed);
    let opts = FdimOptions { m_multiplier: cfg.m_multiplier, rel_tol: cfg.rel_tol, ..FdimOptions::default() }.with_seed(seed);
    let e = estimate_fdim(&net, &opts)?;
    Ok(TrialRecord {
        arch: arch.to_string(),
        trial: index,
        seed,
        rank: e.fdim,
        upper_bound: e.upper_bound,
        redraws: e.redraws,
        wall_ms: t.elapsed().as_millis() as u64,
    })
}

/// Runs every trial of every architecture.
///
/// With an output directory, each finished trial is appended to
/// `progress.csv`; a later call with the same configuration only runs the
/// missing trials.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let mut done: Vec<TrialRecord> = Vec::new();
    let mut sink = None;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join(PROGRESS_FILE);
        done = load_progress(&path)?;
        sink = Some(Mutex::new(OpenOptions::new().create(true).append(true).open(&path)?));
    }
    let have: HashSet<(String, usize)> = done.iter().map(|r| (r.arch.clone(), r.trial)).collect();
    let todo: Vec<(usize, usize)> = (0..cfg.architectures.len())
        .flat_map(|a| (0..cfg.trials).map(move |t| (a, t)))
        .filter(|&(a, t)| !have.contains(&(cfg.architectures[a].to_string(), t)))
        .collect();
    log::info!("{} trials to run, {} already done", todo.len(), have.len());
    let fresh: Vec<TrialRecord> = with_pool(cfg.threads, || {
        todo.par_iter()
            .map(|&(a, t)| {
                let rec = run_trial(&cfg.architectures[a], t, cfg)?;
                if let Some(s) = &sink {
                    let mut line = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
                    line.serialize(&rec)?;
                    let bytes = line.into_inner().map_err(|e| Error::Io(e.into_error()))?;
                    let mut f = s.lock().expect("progress file lock");
                    f.write_all(&bytes)?;
                    f.flush()?;
                }
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut by_arch: BTreeMap<String, Vec<TrialRecord>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for r in done.into_iter().chain(fresh) {
        if r.trial < cfg.trials && seen.insert((r.arch.clone(), r.trial)) {
            by_arch.entry(r.arch.clone()).or_default().push(r);
        }
    }
    let archs = cfg
        .architectures
        .iter()
        .map(|a| ArchResult::from_records(a, by_arch.remove(&a.to_string()).unwrap_or_default()))
        .collect();
    Ok(SweepResult { archs })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub value: usize,
    pub height: f64,
    pub prominence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeAnalysis {
    /// Peaks ordered from the largest fdim value down.
    pub peaks: Vec<Peak>,
    /// Differences between consecutive peaks.
    pub spacings: Vec<usize>,
}

/// Local maxima of the moving-average histogram with enough prominence.
///
/// `min_prominence` is a fraction of the total count.
pub fn mode_gap_analysis(histogram: &BTreeMap<usize, usize>, window: usize, min_prominence: f64) -> Result<ModeAnalysis> {
    let (Some(&lo), Some(&hi)) = (histogram.keys().next(), histogram.keys().next_back()) else {
        return Err(Error::InvalidArgument("empty histogram".into()));
    };
    let total: usize = histogram.values().sum();
    let half = window / 2;
    let start = lo.saturating_sub(half);
    let end = hi + half;
    let raw: Vec<f64> = (start..=end).map(|v| histogram.get(&v).copied().unwrap_or(0) as f64).collect();
    let n = raw.len();
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half).min(n - 1);
            raw[a..=b].iter().sum::<f64>() / window.max(1) as f64
        })
        .collect();
    let get = |i: isize| if i < 0 || i as usize >= n { 0.0 } else { smooth[i as usize] };
    let mut peaks = Vec::new();
    let mut i = 0;
    while i < n {
        // plateaus count once, at their right end
        let mut j = i;
        while j + 1 < n && smooth[j + 1] == smooth[i] {
            j += 1;
        }
        let h = smooth[i];
        if h > 0.0 && get(i as isize - 1) < h && get(j as isize + 1) < h {
            let left_min = (0..i).rev().take_while(|&k| smooth[k] <= h).map(|k| smooth[k]).fold(h, f64::min);
            let left_min = if (0..i).any(|k| smooth[k] > h) { left_min } else { left_min.min(0.0) };
            let right_min = (j + 1..n).take_while(|&k| smooth[k] <= h).map(|k| smooth[k]).fold(h, f64::min);
            let right_min = if (j + 1..n).any(|k| smooth[k] > h) { right_min } else { right_min.min(0.0) };
            let prominence = h - left_min.max(right_min);
            if prominence >= min_prominence * total as f64 {
                // report the raw mode under the smoothed peak
                let a = i.saturating_sub(half);
                let b = (j + half).min(n - 1);
                let k = (a..=b).max_by(|&x, &y| raw[x].total_cmp(&raw[y])).unwrap_or(j);
                peaks.push(Peak { value: start + k, height: h, prominence });
            }
        }
        i = j + 1;
    }
    peaks.reverse();
    peaks.dedup_by_key(|p| p.value);
    let spacings = peaks.windows(2).map(|w| w[0].value - w[1].value).collect();
    Ok(ModeAnalysis { peaks, spacings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub multiplier: f64,
    pub points: usize,
    pub fraction_at_max: f64,
}

/// Fraction of trials at the bound for each multiplier; each trial keeps its
/// network and sample points, only the number of points grows.
pub fn m_sensitivity(
    arch: &Architecture,
    multipliers: &[f64],
    trials: usize,
    seed: u64,
    threads: Option<usize>,
) -> Result<Vec<SensitivityPoint>> {
    if multipliers.is_empty() || multipliers.windows(2).any(|w| w[0] >= w[1]) || multipliers[0] < 1.0 {
        return Err(Error::InvalidArgument("multipliers must be >= 1 and strictly increasing".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let opts = FdimOptions::default();
    let checkpoints: Vec<usize> =
        multipliers.iter().map(|&m| FdimOptions { m_multiplier: m, ..opts.clone() }.points(arch)).collect();
    let hits: Vec<Vec<bool>> = with_pool(threads, || {
        (0..trials)
            .into_par_iter()
            .map(|t| {
                let s = trial_seed(seed, arch, t);
                let net = he_init(arch, s);
                let est = fdim_at_checkpoints(&net, &checkpoints, &opts.clone().with_seed(s))?;
                Ok(est.iter().map(|e| e.attains_bound()).collect())
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(multipliers
        .iter()
        .enumerate()
        .map(|(k, &m)| SensitivityPoint {
            multiplier: m,
            points: checkpoints[k],
            fraction_at_max: hits.iter().filter(|h| h[k]).count() as f64 / trials as f64,
        })
        .collect())
}

/// One-sided z statistic for `p1 > p2` with a pooled variance.
pub fn two_proportion_z(x1: usize, n1: usize, x2: usize, n2: usize) -> f64 {
    let (p1, p2) = (x1 as f64 / n1 as f64, x2 as f64 / n2 as f64);
    let p = (x1 + x2) as f64 / (n1 + n2) as f64;
    let se = (p * (1.0 - p) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return if p1 > p2 { f64::INFINITY } else { 0.0 };
    }
    (p1 - p2) / se
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    arch: &'a str,
    trials: usize,
    upper_bound: usize,
    at_max: usize,
    fraction_at_max: f64,
    histogram: &'a BTreeMap<usize, usize>,
}

fn file_stem(arch: &str) -> String {
    arch.chars()
        .filter_map(|c| {
            if c.is_ascii_digit() {
                Some(c)
            } else if c == ',' {
                Some('-')
            } else {
                None
            }
        })
        .collect()
}

/// Writes `trials.csv`, `summary.json` and one histogram SVG per
/// architecture. Returns the written paths.
pub fn export(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    if result.archs.iter().all(|a| a.trials.is_empty()) {
        return Err(Error::InvalidArgument("nothing to export".into()));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv_path = dir.join("trials.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for a in &result.archs {
        for r in &a.trials {
            w.serialize(r)?;
        }
    }
    w.flush()?;
    written.push(csv_path);
    let summary: Vec<SummaryRow> = result
        .archs
        .iter()
        .map(|a| SummaryRow {
            arch: &a.arch,
            trials: a.trials.len(),
            upper_bound: a.upper_bound,
            at_max: a.at_max(),
            fraction_at_max: a.fraction_at_max,
            histogram: &a.histogram,
        })
        .collect();
    let json_path = dir.join("summary.json");
    let mut f = File::create(&json_path)?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n")?;
    written.push(json_path);
    for a in result.archs.iter().filter(|a| !a.trials.is_empty()) {
        let p = dir.join(format!("hist_{}.svg", file_stem(&a.arch)));
        fs::write(&p, plot_histogram(a))?;
        written.push(p);
    }
    Ok(written)
}

/// Bar chart of the fraction of trials at each fdim value, with the
/// fraction at the bound marked by a dot.
pub fn plot_histogram(a: &ArchResult) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let lo = a.histogram.keys().next().copied().unwrap_or(0).min(a.upper_bound);
    let hi = a.upper_bound;
    let bins = (hi - lo + 1) as f64;
    let total = a.trials.len().max(1) as f64;
    let ymax = a.histogram.values().copied().max().unwrap_or(1) as f64 / total;
    let bw = (w - 2.0 * pad) / bins;
    let y = |f: f64| h - pad - f / ymax.max(1e-12) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="20" font-family="sans-serif" font-size="14">{} ({} trials)</text>"#,
        a.arch,
        a.trials.len()
    );
    for (&v, &c) in &a.histogram {
        let f = c as f64 / total;
        let x = pad + (v - lo) as f64 * bw;
        let _ = writeln!(
            s,
            r#"<rect class="bar" x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="steelblue"><title>{v}: {c}</title></rect>"#,
            y(f),
            (bw - 1.0).max(0.5),
            h - pad - y(f)
        );
    }
    let xm = pad + (hi - lo) as f64 * bw + bw / 2.0;
    let _ = writeln!(s, r#"<circle class="at-max" cx="{xm:.2}" cy="{:.2}" r="4" fill="black"/>"#, y(a.fraction_at_max));
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="end">{:.3}</text>"#,
        xm - 6.0,
        y(a.fraction_at_max) - 6.0,
        a.fraction_at_max
    );
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, h - pad, w - pad);
    let _ = writeln!(s, r#"<text x="{pad}" y="{}" font-family="sans-serif" font-size="12">{lo}</text>"#, h - pad + 16.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="end">{hi}</text>"#,
        w - pad,
        h - pad + 16.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(pairs: &[(usize, usize)]) -> BTreeMap<usize, usize> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn grid_modes() {
        let a = grid_architectures(&[4], &[5, 10], SweepMode::InputEqualsWidth).unwrap();
        assert_eq!(a[0].widths(), &[5, 5, 5, 5, 1]);
        assert_eq!(a[1].widths(), &[10, 10, 10, 10, 1]);
        let b = grid_architectures(&[3], &[8], SweepMode::FixedInput(5)).unwrap();
        assert_eq!(b[0].widths(), &[5, 8, 8, 1]);
    }

    #[test]
    fn synthetic_peaks() {
        let mut h = BTreeMap::new();
        for v in 60..=80 {
            let c = match v {
                80 => 40,
                79 | 81 => 10,
                70 => 30,
                69 | 71 => 12,
                _ => 2,
            };
            h.insert(v, c);
        }
        let m = mode_gap_analysis(&h, 3, 0.01).unwrap();
        assert_eq!(m.peaks.iter().map(|p| p.value).collect::<Vec<_>>(), vec![80, 70]);
        assert_eq!(m.spacings, vec![10]);
    }

    #[test]
    fn unimodal_and_empty() {
        let h = hist(&[(10, 1), (11, 5), (12, 9), (13, 5), (14, 1)]);
        assert_eq!(mode_gap_analysis(&h, 3, 0.01).unwrap().peaks.len(), 1);
        assert!(mode_gap_analysis(&BTreeMap::new(), 3, 0.01).is_err());
    }

    #[test]
    fn trial_seeds_depend_on_everything() {
        let a = Architecture::new(vec![2, 3, 1]).unwrap();
        let b = Architecture::new(vec![2, 4, 1]).unwrap();
        assert_ne!(trial_seed(0, &a, 0), trial_seed(0, &a, 1));
        assert_ne!(trial_seed(0, &a, 0), trial_seed(0, &b, 0));
        assert_ne!(trial_seed(0, &a, 0), trial_seed(1, &a, 0));
        assert_eq!(trial_seed(7, &a, 3), trial_seed(7, &a, 3));
    }

    #[test]
    fn z_statistic() {
        assert!(two_proportion_z(60, 100, 40, 100) > 2.0);
        assert!(two_proportion_z(40, 100, 60, 100) < 0.0);
    }
}
