//! Command-line surface for the library: scenario generation, β reports,
//! the rectifiable/pure decomposition, curve construction, the doubling
//! measure pipeline, and a self-check suite.
//!
//! JSON is the canonical interchange format (schemas in `docs/`); CSV is a
//! lossy plotting export.  All randomized paths are seed-deterministic
//! (ChaCha8).  The process exits nonzero on any assertion failure.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use carnot::beta::{default_c_grid, jones_partials, BetaContext, JonesVariant};
use carnot::classify::{build_witness_curves, classify, ClassifyConfig};
use carnot::cubes::CubeSystem;
use carnot::error::{CarnotError, Result};
use carnot::gks::{
    build_curve, build_measure, default_connector, verify_doubling, GksConfig, GksSpace,
};
use carnot::group::{GroupPoint, HomogeneousNorm, StratificationSpec};
use carnot::measure::DiscreteMeasure;
use carnot::scenario::Scenario;
use carnot::tsp::{
    build_graphs, fit_cloud_lines, ledger_check, realize_curve, validate_clouds, CloudSequence,
};

#[derive(Parser)]
#[command(name = "carnot", version, about = "Rectifiability analysis on Carnot groups")]
struct Cli {
    /// Ambient group: abelian:n | h1 | h2 | engel | file:PATH
    #[arg(long, global = true, default_value = "abelian:2")]
    group: String,
    /// Cube-system depth (finest level); defaults to the measure resolution.
    #[arg(long, global = true)]
    depth: Option<i32>,
    /// Seed for the default scenarios and sampled verifications.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// JSON file overriding the scenario or pipeline parameters.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path (stdout if omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario measure.
    Gen {
        /// Scenario name (segment, polyline-curve, heisenberg-horizontal-curve,
        /// cantor, four-corner-cantor, self-similar-unbalanced, lebesgue-grid,
        /// vertical-segment-h1); full parameters via --config.
        scenario: Option<String>,
    },
    /// Emit the β report of a scenario or measure file.
    Beta {
        scenario: Option<String>,
        /// Measure JSON file instead of a scenario.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Emit the rectifiable/pure decomposition with witness curves.
    Classify {
        scenario: Option<String>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the multiscale curve construction and its length ledger.
    Curve {
        scenario: Option<String>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Build the iterated-redistribution doubling measure, verify it, and
    /// thread the capture curve.
    Gks {
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
    /// Run the invariant suites; exit 0 on a clean build.
    Verify,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { scenario } => cmd_gen(cli, scenario.as_deref()),
        Command::Beta { scenario, input } => cmd_beta(cli, scenario.as_deref(), input.as_ref()),
        Command::Classify { scenario, input } => {
            cmd_classify(cli, scenario.as_deref(), input.as_ref())
        }
        Command::Curve { scenario, input } => cmd_curve(cli, scenario.as_deref(), input.as_ref()),
        Command::Gks { delta } => cmd_gks(cli, *delta),
        Command::Verify => cmd_verify(cli),
    }
}

fn parse_group(s: &str) -> Result<StratificationSpec> {
    if let Some(n) = s.strip_prefix("abelian:") {
        let n: usize = n
            .parse()
            .map_err(|_| CarnotError::InvalidArgument(format!("bad abelian dimension {n:?}")))?;
        return Ok(StratificationSpec::abelian(n));
    }
    if let Some(path) = s.strip_prefix("file:") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CarnotError::InvalidArgument(format!("cannot read {path}: {e}")))?;
        let spec: StratificationSpec = serde_json::from_str(&text)
            .map_err(|e| CarnotError::InvalidArgument(format!("bad group file {path}: {e}")))?;
        return Ok(spec);
    }
    match s {
        "h1" => Ok(StratificationSpec::heisenberg(1)),
        "h2" => Ok(StratificationSpec::heisenberg(2)),
        "engel" => Ok(StratificationSpec::engel()),
        other => Err(CarnotError::InvalidArgument(format!(
            "unknown group {other:?} (expected abelian:n | h1 | h2 | engel | file:PATH)"
        ))),
    }
}

/// Resolve the scenario: full JSON from --config wins, else named defaults.
fn resolve_scenario(cli: &Cli, name: Option<&str>) -> Result<Scenario> {
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CarnotError::InvalidArgument(format!("cannot read {}: {e}", path.display()))
        })?;
        return serde_json::from_str(&text)
            .map_err(|e| CarnotError::InvalidArgument(format!("bad scenario config: {e}")));
    }
    let name = name.ok_or_else(|| {
        CarnotError::InvalidArgument("a scenario name or --config is required".into())
    })?;
    Ok(match name {
        "segment" => Scenario::Segment { n: 1000 },
        "polyline-curve" => Scenario::PolylineCurve { n: 600, legs: 3, seed: cli.seed },
        "heisenberg-horizontal-curve" => {
            Scenario::HeisenbergHorizontalCurve { n: 500, radius: 1.0 }
        }
        "cantor" => Scenario::Cantor { s: 1.0, depth: 5 },
        "four-corner-cantor" => Scenario::FourCornerCantor { depth: 5 },
        "self-similar-unbalanced" => {
            Scenario::SelfSimilarUnbalanced { weights: [0.7, 0.1, 0.1, 0.1], depth: 5 }
        }
        "lebesgue-grid" => Scenario::LebesgueGrid { depth: 6 },
        "vertical-segment-h1" => Scenario::VerticalSegmentH1 { n: 512 },
        other => {
            return Err(CarnotError::InvalidArgument(format!(
                "unknown scenario {other:?} (atom-sum requires --config)"
            )))
        }
    })
}

/// A scenario measure or a measure loaded from `--input`.
fn load_measure(
    cli: &Cli,
    name: Option<&str>,
    input: Option<&PathBuf>,
) -> Result<(StratificationSpec, DiscreteMeasure)> {
    if let Some(path) = input {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CarnotError::InvalidArgument(format!("cannot read {}: {e}", path.display()))
        })?;
        let mu: DiscreteMeasure = serde_json::from_str(&text)
            .map_err(|e| CarnotError::InvalidArgument(format!("bad measure file: {e}")))?;
        return Ok((parse_group(&cli.group)?, mu));
    }
    let scenario = resolve_scenario(cli, name)?;
    let preferred = parse_group(&cli.group)?;
    let spec = scenario.group(Some(&preferred))?;
    let mu = scenario.generate(&spec)?;
    Ok((spec, mu))
}

fn emit<T: Serialize>(cli: &Cli, value: &T, csv: Option<String>) -> Result<()> {
    let text = match cli.format {
        Format::Json => serde_json::to_string_pretty(value)
            .map_err(|e| CarnotError::InvalidArgument(format!("serialization failed: {e}")))?,
        Format::Csv => csv.ok_or_else(|| {
            CarnotError::InvalidArgument("this report has no CSV form; use --format json".into())
        })?,
    };
    match &cli.out {
        Some(path) => std::fs::write(path, text.as_bytes()).map_err(|e| {
            CarnotError::InvalidArgument(format!("cannot write {}: {e}", path.display()))
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.write_all(b"\n"))
                .map_err(|e| CarnotError::InvalidArgument(format!("stdout: {e}")))
        }
    }
}

fn measure_csv(mu: &DiscreteMeasure) -> String {
    let dim = mu.points().first().map(|p| p.0.len()).unwrap_or(0);
    let mut s = String::new();
    for i in 0..dim {
        s.push_str(&format!("x{i},"));
    }
    s.push_str("weight\n");
    for a in mu.atoms() {
        for c in &a.point.0 {
            s.push_str(&format!("{c},"));
        }
        s.push_str(&format!("{}\n", a.weight));
    }
    s
}

fn build_system(
    cli: &Cli,
    spec: &StratificationSpec,
    mu: &DiscreteMeasure,
) -> Result<CubeSystem> {
    let norm = HomogeneousNorm::for_spec(spec);
    let depth = cli.depth.unwrap_or(mu.resolution() as i32);
    CubeSystem::build(spec, &norm, mu.points().to_vec(), 0, depth)
}

fn cmd_gen(cli: &Cli, name: Option<&str>) -> Result<()> {
    let (_, mu) = load_measure(cli, name, None)?;
    emit(cli, &mu, Some(measure_csv(&mu)))
}

fn cmd_beta(cli: &Cli, name: Option<&str>, input: Option<&PathBuf>) -> Result<()> {
    let (spec, mu) = load_measure(cli, name, input)?;
    let system = build_system(cli, &spec, &mu)?;
    let ctx = BetaContext::new(&system, &mu)?;
    let report = ctx.report(&default_c_grid());
    let mut csv = Vec::new();
    report.to_csv(&mut csv)?;
    emit(cli, &report, Some(String::from_utf8_lossy(&csv).into_owned()))
}

#[derive(Serialize)]
struct ClassifyOut {
    atoms: Vec<AtomOut>,
    curves: Vec<CurveOut>,
    rect_mass: f64,
    pure_mass: f64,
}

#[derive(Serialize)]
struct AtomOut {
    coords: Vec<f64>,
    weight: f64,
    density: f64,
    jones_partials: Vec<f64>,
    label: String,
}

#[derive(Serialize)]
struct CurveOut {
    polyline: Vec<Vec<f64>>,
    length: f64,
    captured_mass: f64,
}

fn cmd_classify(cli: &Cli, name: Option<&str>, input: Option<&PathBuf>) -> Result<()> {
    let (spec, mu) = load_measure(cli, name, input)?;
    let system = build_system(cli, &spec, &mu)?;
    let ctx = BetaContext::new(&system, &mu)?;
    let config = ClassifyConfig::default();
    let mut grid = default_c_grid();
    if !grid.iter().any(|&c| (c - config.c).abs() <= 1e-12) {
        grid.push(config.c);
    }
    let report = ctx.report(&grid);
    let decomposition = classify(&system, &mu, &report, &config)?;
    let curves = build_witness_curves(&system, &mu, &ctx, &report, &config)?;
    let out = ClassifyOut {
        atoms: decomposition
            .atoms
            .iter()
            .map(|a| AtomOut {
                coords: mu.point(a.index).0.clone(),
                weight: a.weight,
                density: a.density,
                jones_partials: a.jones_partials.clone(),
                label: format!("{:?}", a.label).to_lowercase(),
            })
            .collect(),
        curves: curves
            .iter()
            .map(|c| CurveOut {
                polyline: c.polyline.points.iter().map(|p| p.0.clone()).collect(),
                length: c.polyline.total_length,
                captured_mass: c.captured_fraction * c.leaves_mass,
            })
            .collect(),
        rect_mass: decomposition.rect_mass,
        pure_mass: decomposition.pure_mass,
    };
    let mut csv = String::from("index,weight,density,label\n");
    for a in &decomposition.atoms {
        csv.push_str(&format!(
            "{},{},{},{:?}\n",
            a.index, a.weight, a.density, a.label
        ));
    }
    emit(cli, &out, Some(csv))
}

#[derive(Serialize)]
struct CurveRunOut {
    polyline: Vec<Vec<f64>>,
    length: f64,
    length_budget: f64,
    fitted_c: f64,
    validation_ok: bool,
    bridges: usize,
}

fn cmd_curve(cli: &Cli, name: Option<&str>, input: Option<&PathBuf>) -> Result<()> {
    let (spec, mu) = load_measure(cli, name, input)?;
    let system = build_system(cli, &spec, &mu)?;
    let norm = system.norm().clone();
    let seq = CloudSequence::from_cube_system(&system, 24.0);
    let fits = fit_cloud_lines(&spec, &norm, &seq, &[])?;
    let validation = validate_clouds(&spec, &norm, &seq, Some((&fits, 0.1)));
    let graph = build_graphs(&spec, &norm, &seq, &fits, 0.1)?;
    let ledger = ledger_check(&seq, &graph);
    let polyline = realize_curve(&spec, &norm, &graph)?;
    let out = CurveRunOut {
        polyline: polyline.points.iter().map(|p| p.0.clone()).collect(),
        length: polyline.total_length,
        length_budget: carnot::tsp::length_budget(&spec, &seq, &fits),
        fitted_c: ledger.fitted_c,
        validation_ok: validation.all_ok(),
        bridges: graph.bridges.len(),
    };
    let mut csv = Vec::new();
    polyline.to_csv(&mut csv)?;
    emit(cli, &out, Some(String::from_utf8_lossy(&csv).into_owned()))
}

#[derive(Serialize)]
struct GksOut {
    stages: usize,
    total_mass: f64,
    doubling_ratio: f64,
    neighbor_ratio: Vec<(usize, f64)>,
    capture_fraction: f64,
    epsilon_truncated: f64,
    curve_length: f64,
    rounds_realized: usize,
}

fn cmd_gks(cli: &Cli, delta: f64) -> Result<()> {
    let spec = parse_group(&cli.group)?;
    let depth = cli.depth.unwrap_or(21).max(0) as usize;
    let space = if spec.step() == 1 && spec.total_dim() == 1 {
        GksSpace::dyadic_line(depth)
    } else {
        // Sampled ambient: a seeded point cloud in the group's unit box.
        let norm = HomogeneousNorm::for_spec(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
        let pts: Vec<GroupPoint> = (0..300)
            .map(|_| {
                GroupPoint(
                    (0..spec.total_dim())
                        .map(|_| rng.random_range(0.0..1.0))
                        .collect(),
                )
            })
            .collect();
        GksSpace::sampled(CubeSystem::build(&spec, &norm, pts, 0, depth as i32)?)
    };
    let config = GksConfig::fitted(delta, depth)?;
    let measure = build_measure(&space, &config, None)?;
    let doubling = verify_doubling(&space, &measure, 100, 1..10, cli.seed);
    let connector = default_connector(space.spec());
    let (polyline, report) = build_curve(&space, &measure, &config, (0, 0), &connector)?;
    let out = GksOut {
        stages: measure.stages,
        total_mass: measure.total_mass(),
        doubling_ratio: doubling.doubling_ratio,
        neighbor_ratio: doubling.neighbor_ratio,
        capture_fraction: report.capture_fraction,
        epsilon_truncated: report.epsilon_truncated,
        curve_length: polyline.total_length,
        rounds_realized: report.rounds_realized,
    };
    if out.capture_fraction < out.epsilon_truncated - 1e-12 {
        emit(cli, &out, None)?;
        return Err(CarnotError::CubeInvariant(
            "curve capture fell below the truncated product".into(),
        ));
    }
    emit(cli, &out, None)
}

fn cmd_verify(cli: &Cli) -> Result<()> {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        println!("{name}: {}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    };

    // Group arithmetic: associativity/identity/inverse on random triples.
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    for spec in [
        StratificationSpec::abelian(3),
        StratificationSpec::heisenberg(1),
        StratificationSpec::engel(),
    ] {
        let mut worst = 0.0f64;
        for _ in 0..2000 {
            let p = |rng: &mut ChaCha8Rng| {
                GroupPoint(
                    (0..spec.total_dim())
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect(),
                )
            };
            let (a, b, c) = (p(&mut rng), p(&mut rng), p(&mut rng));
            let ab_c = spec.multiply(&spec.multiply(&a, &b)?, &c)?;
            let a_bc = spec.multiply(&a, &spec.multiply(&b, &c)?)?;
            for i in 0..spec.total_dim() {
                worst = worst.max((ab_c.0[i] - a_bc.0[i]).abs());
            }
            let e = spec.multiply(&a, &spec.inverse(&a)?)?;
            for &x in &e.0 {
                worst = worst.max(x.abs());
            }
        }
        check(&format!("group arithmetic ({} dims)", spec.total_dim()), worst <= 1e-9);
    }

    // Norm contract: triangle inequality and projection Lipschitz bounds.
    let spec = StratificationSpec::engel();
    let norm = HomogeneousNorm::for_spec(&spec);
    let mut tri_ok = true;
    for _ in 0..10_000 {
        let p = |rng: &mut ChaCha8Rng| {
            GroupPoint(
                (0..spec.total_dim())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
        };
        let (a, b, c) = (p(&mut rng), p(&mut rng), p(&mut rng));
        let (dab, dbc, dac) = (
            norm.distance(&spec, &a, &b),
            norm.distance(&spec, &b, &c),
            norm.distance(&spec, &a, &c),
        );
        if dac > dab + dbc + 1e-9 {
            tri_ok = false;
        }
    }
    check("norm triangle inequality", tri_ok);

    // Cube system structural properties on a random cloud.
    let pts: Vec<GroupPoint> = (0..200)
        .map(|_| GroupPoint((0..2).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect();
    let spec2 = StratificationSpec::abelian(2);
    let norm2 = HomogeneousNorm::for_spec(&spec2);
    let system = CubeSystem::build(&spec2, &norm2, pts, 0, 5)?;
    let krs = system.verify_properties();
    check("cube system properties", krs.outer_ok);

    // β engine: exact zero on collinear horizontal data.
    let seg = Scenario::Segment { n: 64 };
    let sspec = seg.group(None)?;
    let mu = seg.generate(&sspec)?;
    let snorm = HomogeneousNorm::for_spec(&sspec);
    let ssys = CubeSystem::build(&sspec, &snorm, mu.points().to_vec(), 0, 4)?;
    let ctx = BetaContext::new(&ssys, &mu)?;
    let report = ctx.report(&default_c_grid());
    let flat = report.records.iter().all(|r| r.beta_star <= 1e-12);
    check("β vanishes on a horizontal segment", flat);
    let partials = jones_partials(&report, &ssys, &mu, 0, JonesVariant::Star, 4);
    check("J partial sums finite", partials.iter().all(|v| v.is_finite()));

    // Doubling-measure stage conservation at small depth.
    let space = GksSpace::dyadic_line(7);
    let gconf = GksConfig::fitted(0.1, 7)?;
    let gm = build_measure(&space, &gconf, None)?;
    check(
        "redistribution conserves mass",
        (gm.total_mass() - 1.0).abs() <= 1e-12,
    );

    if failures.is_empty() {
        println!("all suites ok");
        Ok(())
    } else {
        Err(CarnotError::InvalidArgument(format!(
            "verification failed: {}",
            failures.join(", ")
        )))
    }
}
