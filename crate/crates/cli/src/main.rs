//! Command line driver for n-view essential matrix averaging.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvess::admm::AdmmConfig;
use mvess::cover::CoverConfig;
use mvess::io::{write_trace, MeasurementFile, PoseFile};
use mvess::nview::{
    check_essential_consistency, generate_counterexample, recover_poses, CheckTolerances, ConsistencyMode,
    ConsistencyReport, MultiviewEssential, RecoverOptions,
};
use mvess::register::align_to_reference;
use mvess::synth::{generate_scene, reconstruct, Layout, Metrics, PipelineConfig, SceneSpec};
use mvess::Error;

const THREADS_VAR: &str = "MVESS_THREADS";

/// Process exit statuses. Stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ok = 0,
    Usage = 2,
    Io = 3,
    Validation = 4,
    Incomplete = 5,
    NotConverged = 6,
    Pipeline = 7,
    FundamentalInconsistent = 10,
    EssentialInconsistent = 11,
}

impl From<Status> for ExitCode {
    fn from(s: Status) -> ExitCode {
        ExitCode::from(s as u8)
    }
}

fn status_of(e: &Error) -> Status {
    match e.root() {
        Error::Io(_) => Status::Io,
        Error::InvalidSpec(_) | Error::InvalidConfig(_) => Status::Usage,
        Error::IncompleteMatrix { .. } | Error::MissingBlock { .. } => Status::Incomplete,
        Error::NotConverged { .. } => Status::NotConverged,
        Error::Parse { .. }
        | Error::InvalidBlock { .. }
        | Error::IndexOutOfRange { .. }
        | Error::NotEssential { .. }
        | Error::InvalidRotation { .. }
        | Error::InsufficientOverlap { .. } => Status::Validation,
        _ => Status::Pipeline,
    }
}

#[derive(Parser)]
#[command(name = "mvess", version, about = "Camera pose averaging through n-view essential matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: measurements plus ground-truth poses.
    Synth(SynthArgs),
    /// Test a fully observed measurement file for consistency.
    Check(CheckArgs),
    /// Average noisy measurements and write the recovered poses.
    Average(AverageArgs),
    /// Recover poses from one fully observed consistent matrix.
    Recover(RecoverArgs),
    /// Compare estimated poses with ground truth up to a similarity.
    Eval(EvalArgs),
    /// Write a fundamental-consistent but essential-inconsistent triplet.
    Counterexample(CounterexampleArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(short = 'n', long, default_value_t = 10)]
    views: usize,
    /// ring, box or clustered.
    #[arg(long, default_value = "ring")]
    layout: Layout,
    /// Rotation noise, radians.
    #[arg(long, default_value_t = 0.0)]
    sigma_r: f64,
    /// Translation direction noise, radians.
    #[arg(long, default_value_t = 0.0)]
    sigma_t: f64,
    /// Multiply each measurement by a random nonzero scale.
    #[arg(long)]
    pairwise_scales: bool,
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    #[arg(long, default_value_t = 0.0)]
    missing: f64,
    /// Additive noise on the entries of unit-norm blocks.
    #[arg(long, default_value_t = 0.0)]
    entry_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    measurements: PathBuf,
    #[arg(long)]
    poses: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Strict,
    Scaled,
}

impl From<Mode> for ConsistencyMode {
    fn from(m: Mode) -> ConsistencyMode {
        match m {
            Mode::Strict => ConsistencyMode::Strict,
            Mode::Scaled => ConsistencyMode::Scaled,
        }
    }
}

#[derive(Args)]
struct ToleranceArgs {
    /// Relative threshold for zero eigen- and singular values.
    #[arg(long, default_value_t = CheckTolerances::default().rank)]
    rank_tol: f64,
    #[arg(long, default_value_t = CheckTolerances::default().pairing)]
    pairing_tol: f64,
    #[arg(long, default_value_t = CheckTolerances::default().block)]
    block_tol: f64,
    #[arg(long, default_value_t = CheckTolerances::default().distinct)]
    distinct_tol: f64,
}

impl ToleranceArgs {
    fn tolerances(&self) -> CheckTolerances {
        CheckTolerances {
            rank: self.rank_tol,
            pairing: self.pairing_tol,
            block: self.block_tol,
            distinct: self.distinct_tol,
        }
    }
}

#[derive(Args)]
struct CheckArgs {
    measurements: PathBuf,
    #[arg(long, value_enum, default_value = "scaled")]
    mode: Mode,
    #[command(flatten)]
    tol: ToleranceArgs,
}

#[derive(Args)]
struct AverageArgs {
    measurements: PathBuf,
    /// Output pose file.
    #[arg(long)]
    out: PathBuf,
    /// Output solver trace table.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Smallest interior triangle angle kept in the cover, radians.
    #[arg(long, default_value_t = CoverConfig::default().collinearity_min)]
    collinearity_min: f64,
    #[arg(long, default_value_t = CoverConfig::default().rotation_max)]
    rotation_max: f64,
    /// Radians.
    #[arg(long, default_value_t = CoverConfig::default().translation_max)]
    translation_max: f64,
    #[arg(long, default_value_t = CoverConfig::default().tree_count)]
    trees: usize,
    #[arg(long, default_value_t = AdmmConfig::default().alpha1)]
    alpha1: f64,
    #[arg(long, default_value_t = AdmmConfig::default().alpha2)]
    alpha2: f64,
    #[arg(long, default_value_t = AdmmConfig::default().max_outer_iters)]
    max_iters: usize,
    #[arg(long, default_value_t = AdmmConfig::default().outer_tol)]
    outer_tol: f64,
    #[arg(long, default_value_t = AdmmConfig::default().primal_tol)]
    primal_tol: f64,
    /// Largest block-rotation residual accepted when extracting triplet poses.
    #[arg(long, default_value_t = PipelineConfig::default().recover.tolerance)]
    extract_tol: f64,
}

impl AverageArgs {
    fn config(&self) -> PipelineConfig {
        let base = PipelineConfig::default();
        PipelineConfig {
            cover: CoverConfig {
                collinearity_min: self.collinearity_min,
                rotation_max: self.rotation_max,
                translation_max: self.translation_max,
                tree_count: self.trees,
            },
            admm: AdmmConfig {
                alpha1: self.alpha1,
                alpha2: self.alpha2,
                max_outer_iters: self.max_iters,
                outer_tol: self.outer_tol,
                primal_tol: self.primal_tol,
                ..base.admm
            },
            recover: RecoverOptions {
                tolerance: self.extract_tol,
                ..base.recover
            },
            baseline: false,
        }
    }
}

#[derive(Args)]
struct RecoverArgs {
    measurements: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "scaled")]
    mode: Mode,
    /// Largest block-rotation residual accepted.
    #[arg(long, default_value_t = RecoverOptions::default().tolerance)]
    tolerance: f64,
}

#[derive(Args)]
struct EvalArgs {
    estimate: PathBuf,
    reference: PathBuf,
}

#[derive(Args)]
struct CounterexampleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Status::Usage } else { Status::Ok }.into();
        }
    };
    if let Err(message) = configure_threads() {
        eprintln!("error: {message}");
        return Status::Usage.into();
    }
    let result = match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Check(a) => check(&a),
        Command::Average(a) => average(&a),
        Command::Recover(a) => recover(&a),
        Command::Eval(a) => eval(&a),
        Command::Counterexample(a) => counterexample(&a),
    };
    match result {
        Ok(s) => s.into(),
        Err(e) => {
            eprintln!("error: {e}");
            status_of(&e).into()
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| format!("{THREADS_VAR}={value} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn synth(a: &SynthArgs) -> mvess::Result<Status> {
    let spec = SceneSpec {
        n: a.views,
        layout: a.layout,
        sigma_r: a.sigma_r,
        sigma_t: a.sigma_t,
        pairwise_scales: a.pairwise_scales,
        outlier_fraction: a.outliers,
        missing_fraction: a.missing,
        entry_noise: a.entry_noise,
        seed: a.seed,
    };
    let scene = generate_scene(&spec)?;
    let file = MeasurementFile::from_graph(&scene.graph);
    file.write(&a.measurements)?;
    PoseFile::new(scene.poses.iter().copied().map(Some).collect()).write(&a.poses)?;
    println!("views {}", spec.n);
    println!("records {}", file.records.len());
    println!("outliers {}", scene.outliers.len());
    Ok(Status::Ok)
}

/// Measurements as an n-view matrix, with every block checked for essential shape.
fn load_matrix(path: &Path) -> mvess::Result<MultiviewEssential> {
    let file = MeasurementFile::read(path)?;
    let mut e = MultiviewEssential::new(file.n)?;
    for r in &file.records {
        e.insert(r.i, r.j, r.block)?;
    }
    if !e.is_fully_observed() {
        return Err(Error::IncompleteMatrix {
            observed: e.observed_count(),
            expected: e.expected_count(),
        });
    }
    Ok(e)
}

fn print_report(r: &ConsistencyReport) {
    println!("mode {}", r.mode);
    println!("fundamental_consistent {}", r.fundamental_ok);
    println!("rank_residual {:e}", r.fundamental.rank_residual);
    println!("positive_eigenvalues {}", r.fundamental.positive_eigenvalues);
    println!("negative_eigenvalues {}", r.fundamental.negative_eigenvalues);
    println!("eigenvalue_pairing_residual {:e}", r.eigenvalue_pairing_residual);
    println!("block_rotation_residual {:e}", r.block_rotation_residual);
    println!("best_sign {}", r.best_sign);
    for (k, v) in r.sign_residuals.iter().enumerate() {
        println!("sign_residual {k} {v:e}");
    }
    println!("essential_consistent {}", r.essential_ok);
}

fn check(a: &CheckArgs) -> mvess::Result<Status> {
    let e = load_matrix(&a.measurements)?;
    let tol = a.tol.tolerances();
    let report = check_essential_consistency(&e, a.mode.into(), &tol)?;
    print_report(&report);
    println!("pairing_holds {}", report.pairing_holds(tol.pairing));
    Ok(if !report.fundamental_ok {
        Status::FundamentalInconsistent
    } else if !report.essential_ok {
        Status::EssentialInconsistent
    } else {
        Status::Ok
    })
}

fn average(a: &AverageArgs) -> mvess::Result<Status> {
    let cfg = a.config();
    cfg.cover.validate()?;
    cfg.admm.validate()?;
    let graph = MeasurementFile::read(&a.measurements)?.to_graph()?;
    let rec = reconstruct(&graph, &cfg)?;
    PoseFile::new(rec.global.poses.clone()).write(&a.out)?;
    if let Some(path) = &a.trace {
        write_trace(path, &rec.solution.trace)?;
    }
    let s = rec.summary();
    println!("triplets_initial {}", rec.cover.initial_count);
    println!("triplets_filtered {}", rec.cover.filtered_count);
    println!("triplets_final {}", rec.cover.triplets.len());
    println!("iterations {}", s.iterations);
    println!("converged {}", s.converged);
    println!("objective {:e}", s.objective);
    println!("max_primal_b {:e}", s.max_primal_b);
    println!("max_primal_d {:e}", s.max_primal_d);
    println!("posed_views {}", rec.global.posed_count());
    println!("max_stitch_residual {:e}", rec.global.max_residual());
    if !s.converged {
        eprintln!("warning: solver stopped after {} iterations without converging", s.iterations);
        return Ok(Status::NotConverged);
    }
    Ok(Status::Ok)
}

fn recover(a: &RecoverArgs) -> mvess::Result<Status> {
    let e = load_matrix(&a.measurements)?;
    let opts = RecoverOptions {
        mode: a.mode.into(),
        tolerance: a.tolerance,
        ..RecoverOptions::default()
    };
    let poses = recover_poses(&e, &opts)?;
    PoseFile::new(poses.into_iter().map(Some).collect()).write(&a.out)?;
    println!("posed_views {}", e.n());
    Ok(Status::Ok)
}

fn eval(a: &EvalArgs) -> mvess::Result<Status> {
    let est = PoseFile::read(&a.estimate)?;
    let reference = PoseFile::read(&a.reference)?;
    let truth: Vec<_> = reference
        .poses
        .iter()
        .enumerate()
        .map(|(v, p)| {
            p.ok_or_else(|| Error::InsufficientOverlap {
                reason: format!("reference lacks view {v}"),
            })
        })
        .collect::<mvess::Result<_>>()?;
    let alignment = align_to_reference(&est.poses, &truth)?;
    let m = Metrics::from_alignment(&alignment);
    println!("posed_views {}", m.posed_views);
    println!("rotation_frobenius_mean {:e}", m.rotation_frobenius_mean);
    println!("rotation_degrees_mean {:e}", m.rotation_degrees_mean);
    println!("rotation_degrees_median {:e}", m.rotation_degrees_median);
    println!("center_error_mean {:e}", m.center_error_mean);
    println!("center_error_median {:e}", m.center_error_median);
    println!("relative_center_error_mean {:e}", m.relative_center_error_mean);
    Ok(Status::Ok)
}

fn counterexample(a: &CounterexampleArgs) -> mvess::Result<Status> {
    let (e, report) = generate_counterexample(a.seed)?;
    let mut graph = mvess::cover::ViewingGraph::new(e.n());
    for (i, j, b) in e.observed() {
        graph.add_edge(i, j, *b, 1.0)?;
    }
    MeasurementFile::from_graph(&graph).write(&a.out)?;
    print_report(&report);
    println!("pairing_holds {}", report.pairing_holds(CheckTolerances::default().pairing));
    Ok(Status::Ok)
}
