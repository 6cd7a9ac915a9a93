use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use hiddensym::construct::{construct_no_hidden_symmetry, verify_construction};
use hiddensym::experiment::{
    self, grid_architectures, m_sensitivity, mode_gap_analysis, run_sweep, SweepConfig, SweepMode, THREADS_ENV,
};
use hiddensym::geometry::{
    check_lra_near_intersections, check_tpic, default_bbox, enumerate_regions, genericity_check, render_svg, Bbox,
    MAX_GEOMETRY_DIM,
};
use hiddensym::symmetry::{analyze_mechanisms, MechanismOptions};
use hiddensym::{estimate_fdim, Architecture, FdimOptions, Network};

#[derive(Parser)]
#[command(name = "hiddensym", version, about = "Functional dimension and hidden symmetries of ReLU networks")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    InputEqualsWidth,
    FixedInput,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate the functional dimension of a saved network.
    Fdim {
        #[arg(long)]
        net: PathBuf,
        #[arg(long = "m-mult", default_value_t = 100.0)]
        m_mult: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample every point even after the bound is reached.
        #[arg(long)]
        no_early_exit: bool,
    },
    /// Functional dimension distribution over random initializations.
    Sweep {
        /// Explicit architectures; overrides the depth/width grid.
        #[arg(long, value_delimiter = ';')]
        arch: Vec<Architecture>,
        #[arg(long, value_delimiter = ',', default_value = "4")]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "5")]
        widths: Vec<usize>,
        #[arg(long, value_enum, default_value = "input-equals-width")]
        mode: Mode,
        /// Input dimension in fixed-input mode.
        #[arg(long, default_value_t = 5)]
        input: usize,
        #[arg(long, default_value_t = experiment::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "m-mult", default_value_t = 100.0)]
        m_mult: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = THREADS_ENV)]
        threads: Option<usize>,
        /// 5000 trials per architecture.
        #[arg(long)]
        full_scale: bool,
        #[arg(long, default_value_t = 3)]
        window: usize,
        /// Minimum peak prominence as a fraction of the trials.
        #[arg(long, default_value_t = 0.01)]
        prominence: f64,
    },
    /// Fraction at the bound as the number of sample points grows.
    Msweep {
        #[arg(long)]
        arch: Architecture,
        #[arg(long, value_delimiter = ',', default_value = "2,10,50,100")]
        mults: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = THREADS_ENV)]
        threads: Option<usize>,
    },
    /// Regions, genericity and pairwise intersections of a low-dimensional network.
    Geometry {
        #[arg(long)]
        net: PathBuf,
        /// Render the zero sets (two-dimensional input only).
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Half-width of the input box.
        #[arg(long, default_value_t = 10.0)]
        half: f64,
    },
    /// Run the hidden-symmetry detectors.
    Mechanisms {
        #[arg(long)]
        net: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 100_000)]
        census: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exit with status 1 when any mechanism is found.
        #[arg(long)]
        fail_on_findings: bool,
    },
    /// Build a network with no hidden symmetries.
    Construct {
        #[arg(long)]
        arch: Architecture,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for net.json, state.json and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certify a network: pairwise transversality, distinct maps, fdim at the bound.
    Verify {
        #[arg(long)]
        net: PathBuf,
        #[arg(long = "m-mult", default_value_t = 100.0)]
        m_mult: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(path: &PathBuf) -> anyhow::Result<Network> {
    Network::load(path).with_context(|| format!("reading {}", path.display()))
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let json = cli.json;
    match cli.cmd {
        Cmd::Fdim { net, m_mult, tol, seed, no_early_exit } => {
            let net = load(&net)?;
            let opts =
                FdimOptions { m_multiplier: m_mult, rel_tol: tol, seed, early_exit: !no_early_exit, ..FdimOptions::default() };
            let e = estimate_fdim(&net, &opts)?;
            if json {
                print_json(&e)?;
            } else {
                println!("arch {}", net.arch());
                println!(
                    "fdim {} of bound {} ({} of {} points used, {} redraws)",
                    e.fdim, e.upper_bound, e.points_used, e.points, e.redraws
                );
            }
        }
        Cmd::Sweep {
            arch,
            depths,
            widths,
            mode,
            input,
            trials,
            seed,
            m_mult,
            tol,
            out,
            threads,
            full_scale,
            window,
            prominence,
        } => {
            let architectures = if arch.is_empty() {
                let mode = match mode {
                    Mode::InputEqualsWidth => SweepMode::InputEqualsWidth,
                    Mode::FixedInput => SweepMode::FixedInput(input),
                };
                grid_architectures(&depths, &widths, mode)?
            } else {
                arch
            };
            let mut cfg = SweepConfig::new(architectures);
            cfg.trials = trials;
            if full_scale {
                cfg.trials = 5000;
                eprintln!("warning: --full-scale runs 5000 trials per architecture; wide deep networks can take many hours");
            }
            cfg.base_seed = seed;
            cfg.m_multiplier = m_mult;
            cfg.rel_tol = tol;
            cfg.threads = threads;
            cfg.out_dir = out.clone();
            let result = run_sweep(&cfg)?;
            if let Some(dir) = &out {
                experiment::export(&result, dir)?;
            }
            let mut rows = Vec::new();
            for a in &result.archs {
                let modes = mode_gap_analysis(&a.histogram, window, prominence)?;
                if !json {
                    let peaks: Vec<String> = modes.peaks.iter().take(4).map(|p| p.value.to_string()).collect();
                    println!(
                        "{:<24} trials {:>5}  bound {:>5}  at bound {:>5} ({:.3})  peaks [{}]  spacings {:?}",
                        a.arch,
                        a.trials.len(),
                        a.upper_bound,
                        a.at_max(),
                        a.fraction_at_max,
                        peaks.join(", "),
                        modes.spacings.iter().take(3).collect::<Vec<_>>()
                    );
                }
                rows.push(serde_json::json!({
                    "arch": a.arch,
                    "trials": a.trials.len(),
                    "upper_bound": a.upper_bound,
                    "fraction_at_max": a.fraction_at_max,
                    "histogram": a.histogram,
                    "peaks": modes.peaks,
                    "spacings": modes.spacings,
                }));
            }
            if json {
                print_json(&rows)?;
            }
        }
        Cmd::Msweep { arch, mults, trials, seed, threads } => {
            let curve = m_sensitivity(&arch, &mults, trials, seed, threads)?;
            if json {
                print_json(&curve)?;
            } else {
                println!("arch {} trials {}", arch, trials);
                for p in &curve {
                    println!("m {:>7} x  points {:>8}  fraction {:.3}", p.multiplier, p.points, p.fraction_at_max);
                }
            }
        }
        Cmd::Geometry { net, svg, half } => {
            let net = load(&net)?;
            let n0 = net.arch().input_dim();
            if n0 > MAX_GEOMETRY_DIM {
                bail!("exact geometry needs input dimension at most {MAX_GEOMETRY_DIM}, got {n0}");
            }
            let bbox = Bbox::cube(n0, half);
            let regions = enumerate_regions(&net, &bbox)?;
            let generic = genericity_check(&net)?;
            let tpic = check_tpic(&net, &bbox)?;
            let lra = check_lra_near_intersections(&net, &tpic)?;
            let mut summary = None;
            if let Some(path) = &svg {
                let (text, s) = render_svg(&net, &bbox, Some(&tpic))?;
                fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
                summary = Some(s);
            }
            if json {
                print_json(&serde_json::json!({
                    "regions": regions,
                    "genericity": generic,
                    "tpic": tpic,
                    "lra": lra,
                }))?;
            } else {
                println!("arch {}  box [-{half}, {half}]^{n0}", net.arch());
                println!("regions {}", regions.len());
                println!("generic arrangements {}", generic.generic());
                println!("pairwise intersections {}/{} witnessed", tpic.witnessed(), tpic.pairs.len());
                for p in tpic.failures() {
                    println!("  missing {}-{}", p.lower, p.upper);
                }
                println!("distinct maps near intersections {}", lra.passed());
                if let Some(s) = summary {
                    println!("svg: {} curves, {} witnesses", s.curves, s.witnesses);
                }
            }
        }
        Cmd::Mechanisms { net, samples, census, seed, fail_on_findings } => {
            let net = load(&net)?;
            let opts = MechanismOptions { samples, census_samples: census, seed, ..MechanismOptions::default() };
            let r = analyze_mechanisms(&net, &opts)?;
            if json {
                print_json(&r)?;
            } else {
                println!("arch {}  params {}", net.arch(), r.params_digest);
                println!("stably unactivated: {}", r.stably_unactivated.len());
                for s in &r.stably_unactivated {
                    println!("  {} ({:?})", s.neuron, s.criterion);
                }
                println!("never coactive: {}", r.never_coactive.len());
                for p in &r.never_coactive {
                    println!("  {}-{} ({:?})", p.lower, p.upper, p.criterion);
                }
                match &r.collapse {
                    Some(c) => {
                        println!("collapsing folds: {}", c.len());
                        for f in c {
                            println!("  {}", f.neuron);
                        }
                    }
                    None => println!("collapsing folds: skipped (input dimension > {MAX_GEOMETRY_DIM})"),
                }
                for i in &r.lowdim_image {
                    println!("layer {} image dimension {} (deficiency {})", i.layer, i.dim, i.deficiency);
                }
            }
            if fail_on_findings && r.any() {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Construct { arch, seed, out } => {
            let (net, state) = construct_no_hidden_symmetry(&arch, seed)?;
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
                net.save(dir.join("net.json"))?;
                fs::write(dir.join("state.json"), serde_json::to_string_pretty(&state)? + "\n")?;
                fs::write(dir.join("report.json"), serde_json::to_string_pretty(&state.report)? + "\n")?;
                if net.arch().input_dim() == 2 {
                    let (text, _) = render_svg(&net, &default_bbox(2), Some(&state.report.tpic))?;
                    fs::write(dir.join("net.svg"), text)?;
                }
            }
            if json {
                print_json(&state)?;
            } else {
                let r = &state.report;
                println!("arch {}  attempt {}", net.arch(), state.attempt);
                println!("pairwise intersections {}/{}", r.tpic.witnessed(), r.tpic.pairs.len());
                println!("fdim {} of bound {}", r.fdim.fdim, r.fdim.upper_bound);
                println!("certified {}", r.certified());
                if out.is_none() {
                    println!("{}", net.to_json()?);
                }
            }
        }
        Cmd::Verify { net, m_mult, seed } => {
            let net = load(&net)?;
            let r = verify_construction(&net, m_mult, seed)?;
            if json {
                print_json(&r)?;
            } else {
                println!("pairwise intersections {}/{}", r.tpic.witnessed(), r.tpic.pairs.len());
                println!("distinct maps near intersections {}", r.lra_pass);
                println!("fdim {} of bound {}", r.fdim.fdim, r.fdim.upper_bound);
                match r.failure() {
                    None => println!("certified"),
                    Some(f) => println!("not certified: {f}"),
                }
            }
            if !r.certified() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
