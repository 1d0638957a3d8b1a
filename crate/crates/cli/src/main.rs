use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use morseflow::config::{default_deltas, LandscapeConfig};
use morseflow::critical::{
    check_perturbation, eigvec_continuity_check, find_critical_points, repeated_spectrum_pair, CriticalSet, Kind,
};
use morseflow::experiments::{run_concentration, run_scaling_comparison, ExperimentError, ScalingMode};
use morseflow::flow::{trace_principal, LineOutcome};
use morseflow::geometry::{Landscape, Manifold};
use morseflow::graph::{build_maxmin, export, validate_dim1, Format, Topology};
use morseflow::linear_model::{domination_check, scaling_exponent_estimate, tangent_check, DiagonalSystem};
use morseflow::rng::SeedStream;

/// Exit statuses other than success and generic failure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Pass = 0,
    NonSimple = 2,
    SaddleHit = 3,
    PropertyFail = 4,
}

#[derive(Parser)]
#[command(name = "morseflow", version, about = "Gradient-flow basins, principal flow lines and max-min graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Landscape config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for report files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    format: Option<OutFormat>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Dot,
    Json,
    Csv,
}

#[derive(Args, Clone)]
struct Sampling {
    /// Maximum to study (default: the highest).
    #[arg(long)]
    maximum: Option<usize>,
    /// Decreasing ball radii, comma separated.
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    /// Samples per radius (at least 100).
    #[arg(long)]
    samples: Option<usize>,
    /// Newton seeds per axis.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Basin,
    CapExit,
}

#[derive(Subcommand)]
enum Command {
    /// Locate and classify critical points.
    Critical {
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Trace principal flow lines and export the max-min graph.
    Graph {
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Monte Carlo concentration of basins near a maximum.
    Concentrate {
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Decay of the complement against the eigenvalue-ratio law.
    Scaling {
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, default_value_t = 0.9)]
        r: f64,
        #[arg(long, default_value_t = 0.6)]
        r0: f64,
    },
    /// Exact checks on diagonal linear systems.
    LinearCheck {
        /// Eigenvalues in ascending order, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        lambdas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1.0)]
        r: f64,
        #[arg(long, default_value_t = 0.5)]
        r0: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.1,0.05,0.025")]
        deltas: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Eigenvalue separation and eigenvector continuity on random matrices.
    PerturbCheck {
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        eta: f64,
    },
}

const DEFAULT_GRID: usize = 32;
const DEFAULT_SAMPLES: usize = 1000;
const MIN_SAMPLES: usize = 100;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(status) => ExitCode::from(status as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Status> {
    if let Some(k) = cli.common.threads {
        if k == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global().context("configuring worker threads")?;
    }
    let c = &cli.common;
    match cli.command {
        Command::Critical { grid } => cmd_critical(c, grid),
        Command::Graph { grid } => cmd_graph(c, grid),
        Command::Concentrate { sampling } => cmd_concentrate(c, &sampling),
        Command::Scaling { sampling, mode, r, r0 } => cmd_scaling(c, &sampling, mode, r, r0),
        Command::LinearCheck { lambdas, r, r0, deltas, samples } => cmd_linear_check(c, lambdas, r, r0, &deltas, samples),
        Command::PerturbCheck { pairs, eps, trials, eta } => cmd_perturb_check(c, pairs, eps, trials, eta),
    }
}

/// Writes through a temporary file in the same directory, then renames.
fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing {}", path.display()))?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn load(c: &Common) -> Result<(LandscapeConfig, Landscape)> {
    let path = c.config.as_ref().context("--config is required")?;
    let cfg = LandscapeConfig::from_path(path)?;
    let landscape = cfg.build().with_context(|| format!("building landscape from {}", path.display()))?;
    Ok((cfg, landscape))
}

fn critical_set(cfg: &LandscapeConfig, l: &Landscape, grid: Option<usize>) -> Result<CriticalSet> {
    let grid = grid.or(cfg.experiment.grid).unwrap_or(DEFAULT_GRID);
    Ok(find_critical_points(l, grid)?)
}

fn fmt_point(x: &[f64]) -> String {
    let parts: Vec<String> = x.iter().map(|v| format!("{v:.6}")).collect();
    format!("({})", parts.join(", "))
}

fn cmd_critical(c: &Common, grid: Option<usize>) -> Result<Status> {
    let (cfg, l) = load(c)?;
    let set = critical_set(&cfg, &l, grid)?;
    let (name, body) = match c.format.unwrap_or(OutFormat::Json) {
        OutFormat::Csv => {
            let mut s = String::from("id,kind,index,value");
            for i in 1..=set.dim {
                s.push_str(&format!(",x{i}"));
            }
            s.push_str(",gap_rel\n");
            for p in &set.points {
                s.push_str(&format!("{},{:?},{},{:?}", p.id, p.kind(), p.morse_index, p.value));
                for v in &p.location {
                    s.push_str(&format!(",{v:?}"));
                }
                s.push_str(&format!(",{}\n", p.gap_rel.map(|g| format!("{g:?}")).unwrap_or_default()));
            }
            ("critical.csv", s)
        }
        OutFormat::Json => ("critical.json", serde_json::to_string_pretty(&set.to_json())?),
        OutFormat::Dot => bail!("critical reports are json or csv"),
    };
    let path = write_atomic(&c.out, name, &body)?;
    println!(
        "{} critical points: {} minima, {} saddles, {} maxima; Euler sum {}",
        set.len(),
        set.minima().count(),
        set.saddles().count(),
        set.maxima().count(),
        set.euler_sum()
    );
    let mut status = Status::Pass;
    for p in &set.points {
        let note = match (p.kind(), p.v1.is_some()) {
            (Kind::Maximum, false) => {
                status = Status::NonSimple;
                "  NON_SIMPLE (eigenvalue tie)"
            }
            _ => "",
        };
        println!("  #{} {:?} index {} at {} F = {:.9}{note}", p.id, p.kind(), p.morse_index, fmt_point(&p.location), p.value);
    }
    println!("report: {}", path.display());
    Ok(status)
}

fn cmd_graph(c: &Common, grid: Option<usize>) -> Result<Status> {
    let (cfg, l) = load(c)?;
    let set = critical_set(&cfg, &l, grid)?;
    let ties: Vec<usize> = set.maxima().filter(|p| p.v1.is_none()).map(|p| p.id).collect();
    if !ties.is_empty() {
        println!("NON_SIMPLE: maxima {ties:?} have a repeated smallest eigenvalue");
        return Ok(Status::NonSimple);
    }
    let mut lines = Vec::new();
    let mut hits = Vec::new();
    for p in set.maxima() {
        let (plus, minus) = trace_principal(&l, p.id, &set, None)?;
        for line in [plus, minus] {
            match line.outcome {
                LineOutcome::Minimum(m) => println!("  max #{} {} -> min #{m}", p.id, line.sign.symbol()),
                LineOutcome::NonSimpleSaddleHit(s) => {
                    println!("  max #{} {} -> critical point #{s} (not a minimum)", p.id, line.sign.symbol());
                    hits.push(p.id);
                }
                LineOutcome::Unresolved => bail!("principal line {} of maximum #{} did not resolve", line.sign.symbol(), p.id),
            }
            lines.push(line);
        }
    }
    if !hits.is_empty() {
        hits.dedup();
        println!("SADDLE_HIT: maxima {hits:?} have a principal line ending at a saddle");
        return Ok(Status::SaddleHit);
    }
    let g = build_maxmin(&set, &lines)?;
    let (name, format) = match c.format.unwrap_or(OutFormat::Dot) {
        OutFormat::Dot => ("graph.dot", Format::Dot),
        OutFormat::Json => ("graph.json", Format::Json),
        OutFormat::Csv => bail!("graphs are dot or json"),
    };
    let path = write_atomic(&c.out, name, &export(&g, format))?;
    println!("max-min graph: {} minima, {} maxima, {} edges", g.minima.len(), g.maxima.len(), g.edges.len());
    let mut status = Status::Pass;
    if l.dim() == 1 {
        let topology = match l.manifold {
            Manifold::Circle { .. } | Manifold::Torus { .. } => Topology::Rank1,
            Manifold::Box { .. } => Topology::Rank0,
        };
        match validate_dim1(&g, topology) {
            Ok(report) => println!("one-dimensional structure ({topology:?}) holds, order {:?}", report.order),
            Err(e) => {
                println!("PROPERTY_FAIL: {e}");
                status = Status::PropertyFail;
            }
        }
    }
    println!("graph: {}", path.display());
    Ok(status)
}

struct Study {
    landscape: Landscape,
    set: CriticalSet,
    maximum: usize,
    deltas: Vec<f64>,
    samples: usize,
    scaling: Option<ScalingMode>,
}

fn study(c: &Common, s: &Sampling) -> Result<Study> {
    let (cfg, landscape) = load(c)?;
    let e = &cfg.experiment;
    let samples = s.samples.or(e.samples).unwrap_or(DEFAULT_SAMPLES);
    if samples < MIN_SAMPLES {
        bail!("need at least {MIN_SAMPLES} samples per radius, got {samples}");
    }
    let set = find_critical_points(&landscape, s.grid.or(e.grid).unwrap_or(DEFAULT_GRID))?;
    let maximum = match s.maximum.or(e.maximum) {
        Some(id) if id < set.len() => id,
        Some(id) => bail!("no critical point #{id}"),
        None => set.maxima().next().context("landscape has no maximum")?.id,
    };
    if !set.get(maximum).is_maximum() {
        bail!("critical point #{maximum} is not a maximum");
    }
    let deltas = match s.deltas.clone().or(e.deltas.clone()) {
        Some(d) => d,
        None => default_deltas(set.isolation(&landscape.manifold, maximum), 4),
    };
    Ok(Study { landscape, set, maximum, deltas, samples, scaling: e.scaling })
}

/// Maps a non-simple maximum to its exit status.
fn non_simple_status(s: &Study, err: &ExperimentError) -> Option<Status> {
    match err {
        ExperimentError::NonSimpleInput { .. } if s.set.get(s.maximum).v1.is_none() => Some(Status::NonSimple),
        ExperimentError::NonSimpleInput { .. } => Some(Status::SaddleHit),
        _ => None,
    }
}

fn cmd_concentrate(c: &Common, sampling: &Sampling) -> Result<Status> {
    let s = study(c, sampling)?;
    let report = match run_concentration(&s.landscape, &s.set, s.maximum, &s.deltas, s.samples, c.seed) {
        Ok(r) => r,
        Err(e) => match non_simple_status(&s, &e) {
            Some(status) => {
                println!("{e}");
                return Ok(status);
            }
            None => return Err(e.into()),
        },
    };
    let (name, body) = match c.format.unwrap_or(OutFormat::Csv) {
        OutFormat::Csv => ("concentration.csv", report.to_csv()),
        OutFormat::Json => ("concentration.json", report.to_json()),
        OutFormat::Dot => bail!("concentration reports are csv or json"),
    };
    let path = write_atomic(&c.out, name, &body)?;
    println!("maximum #{}: principal terminals #{} and #{}, seed {}", report.maximum, report.m_plus, report.m_minus, report.seed);
    for r in &report.rows {
        println!(
            "  delta {:<8} f = {:.4}  [{:.4}, {:.4}]  N = {}  unresolved {}",
            r.delta, r.f, r.wilson_lo, r.wilson_hi, r.samples, r.unresolved
        );
    }
    println!("report: {}", path.display());
    if !report.monotone_within_noise() {
        println!("PROPERTY_FAIL: f decreases beyond Wilson noise");
        return Ok(Status::PropertyFail);
    }
    Ok(Status::Pass)
}

/// Largest accepted gap between fitted and predicted exponents.
const EXPONENT_TOL: f64 = 0.2;

fn cmd_scaling(c: &Common, sampling: &Sampling, mode: Option<ModeArg>, r: f64, r0: f64) -> Result<Status> {
    let s = study(c, sampling)?;
    let mode = match mode {
        Some(ModeArg::Basin) => ScalingMode::Basin,
        Some(ModeArg::CapExit) => ScalingMode::CapExit { r, r0 },
        None => s.scaling.unwrap_or(ScalingMode::Basin),
    };
    let table = match run_scaling_comparison(&s.landscape, &s.set, s.maximum, &s.deltas, s.samples, c.seed, mode) {
        Ok(t) => t,
        Err(e) => match non_simple_status(&s, &e) {
            Some(status) => {
                println!("{e}");
                return Ok(status);
            }
            None => return Err(e.into()),
        },
    };
    let (name, body) = match c.format.unwrap_or(OutFormat::Csv) {
        OutFormat::Csv => ("scaling.csv", table.to_csv()),
        OutFormat::Json => ("scaling.json", table.to_json()),
        OutFormat::Dot => bail!("scaling reports are csv or json"),
    };
    let path = write_atomic(&c.out, name, &body)?;
    println!(
        "maximum #{}: lambda ratio {:.6}, predicted exponent {:.4}",
        table.maximum, table.eigenvalue_ratio, table.predicted_exponent
    );
    for row in &table.rows {
        println!(
            "  delta {:<8} 1-f = {:.5}  [{:.5}, {:.5}]  predicted {:.5}",
            row.delta, row.complement, row.wilson_lo, row.wilson_hi, row.predicted
        );
    }
    if table.slow_convergence {
        println!("slow convergence: the two smallest eigenvalues are nearly tied");
    }
    println!("report: {}", path.display());
    match (table.fitted_exponent, table.deviation) {
        (Some(fit), Some(dev)) => {
            println!("fitted exponent {fit:.4} (deviation {dev:+.4})");
            if !table.slow_convergence && dev.abs() > EXPONENT_TOL {
                println!("PROPERTY_FAIL: exponent deviates by more than {EXPONENT_TOL}");
                return Ok(Status::PropertyFail);
            }
        }
        _ => println!("no fitted exponent: some radius saw no complement events"),
    }
    Ok(Status::Pass)
}

fn cmd_linear_check(c: &Common, lambdas: Option<Vec<f64>>, r: f64, r0: f64, deltas: &[f64], samples: usize) -> Result<Status> {
    let explicit = lambdas.is_some();
    let primary = DiagonalSystem::new(lambdas.unwrap_or_else(|| vec![-2.0, -1.0]), r, r0)?;
    let mut systems = vec![primary.clone()];
    if !explicit {
        systems.push(DiagonalSystem::new(vec![-3.0, -2.0, -1.0], r, r0)?);
        systems.push(DiagonalSystem::new(vec![-4.0, -3.0, -2.0, -1.0], r, r0)?);
    }
    let mut status = Status::Pass;
    let mut checks = Vec::new();
    for (k, sys) in systems.iter().enumerate() {
        let dom = domination_check(sys, 10_000, c.seed ^ (2 * k as u64 + 1), 1e-9)?;
        let tan = tangent_check(sys, 1000, c.seed ^ (2 * k as u64 + 2))?;
        let ok = dom.violations == 0 && dom.closed_form_deviation.is_none_or(|d| d <= 1e-12) && tan.passes(1e-8);
        println!(
            "  lambdas {:?}: domination violations {}, tangent off-axis hits {}, velocity deviation {:.2e}  {}",
            sys.lambdas(),
            dom.violations,
            tan.off_axis_principal,
            tan.max_velocity_deviation,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            status = Status::PropertyFail;
        }
        checks.push(json!({ "lambdas": sys.lambdas(), "domination": dom, "tangent": tan }));
    }
    let est = scaling_exponent_estimate(&primary, deltas, samples, c.seed)?;
    let (name, body) = match c.format.unwrap_or(OutFormat::Csv) {
        OutFormat::Csv => ("linear_check.csv", est.to_csv()),
        OutFormat::Json => (
            "linear_check.json",
            serde_json::to_string_pretty(&json!({ "scaling": est, "checks": checks }))?,
        ),
        OutFormat::Dot => bail!("linear-check reports are csv or json"),
    };
    let path = write_atomic(&c.out, name, &body)?;
    println!("fitted exponent {:.4}, expected {:.4}", est.slope, est.expected);
    println!("report: {}", path.display());
    if (est.slope - est.expected).abs() > 0.15 {
        println!("PROPERTY_FAIL: fitted exponent off by more than 0.15");
        status = Status::PropertyFail;
    }
    Ok(status)
}

fn cmd_perturb_check(c: &Common, pairs: usize, eps: f64, trials: usize, eta: f64) -> Result<Status> {
    if !(eps > 0.0) {
        bail!("--eps must be positive");
    }
    let stream = SeedStream::new(c.seed);
    let mut rows = Vec::with_capacity(pairs);
    let mut failures = 0;
    for i in 0..pairs {
        let n = 2 + i % 4;
        let mut rng = stream.substream(&[0, i as u64]);
        let (a, b) = repeated_spectrum_pair(n, &mut rng);
        let out = check_perturbation(&a, &b, eps)?;
        if !out.passes(eps) {
            failures += 1;
        }
        rows.push((n, out));
    }
    let a = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]));
    let cont = eigvec_continuity_check(&a, eta, trials, &mut stream.substream(&[1]))?;
    let (name, body) = match c.format.unwrap_or(OutFormat::Json) {
        OutFormat::Csv => {
            let mut s = String::from("pair,n,q_norm,q_min_eig,min_gap\n");
            for (i, (n, o)) in rows.iter().enumerate() {
                s.push_str(&format!("{i},{n},{:?},{:?},{:?}\n", o.q_norm, o.q_min_eig, o.min_gap));
            }
            ("perturb_check.csv", s)
        }
        OutFormat::Json => {
            let pairs: Vec<_> = rows.iter().map(|(n, o)| json!({ "n": n, "outcome": o })).collect();
            ("perturb_check.json", serde_json::to_string_pretty(&json!({ "eps": eps, "pairs": pairs, "continuity": cont }))?)
        }
        OutFormat::Dot => bail!("perturb-check reports are csv or json"),
    };
    let path = write_atomic(&c.out, name, &body)?;
    let worst = rows.iter().map(|(_, o)| o.q_norm / eps).fold(0.0, f64::max);
    println!("{pairs} pairs: {failures} failures, largest |Q|/eps {worst:.3}");
    println!("eigenvector continuity over {trials} trials: max angle*gap/eta = {:.3}", cont.max_ratio);
    println!("report: {}", path.display());
    if failures > 0 || !cont.passes(4.0) {
        println!("PROPERTY_FAIL");
        return Ok(Status::PropertyFail);
    }
    Ok(Status::Pass)
}
