//! Synthetic scenes with corrupted measurements, and the end-to-end benchmark.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use petgraph::unionfind::UnionFind;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};

use crate::admm::{self, AdmmConfig, AdmmSolution};
use crate::cover::{build_cover, CoverConfig, TripletCover, ViewingGraph};
use crate::error::{Error, Result};
use crate::geom::{relative_essential_raw, skew, CameraPose, Rotation, Svd3};
use crate::nview::{MultiviewEssential, RecoverOptions};
use crate::register::{align_to_reference, extract_all, stitch, Alignment, GlobalReconstruction};

const LAYOUT_ATTEMPTS: usize = 100;
const WEIGHT_EPS: f64 = 1e-3;
const SCALE_RANGE: (f64, f64) = (0.2, 5.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    /// Cameras on a jittered horizontal circle, looking at its center.
    Ring,
    /// Uniform centers in a cube, uniform orientations.
    RandomBox,
    /// Three Gaussian blobs of centers, uniform orientations.
    Clustered,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Ring => "ring",
            Layout::RandomBox => "box",
            Layout::Clustered => "clustered",
        })
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Layout> {
        match s {
            "ring" => Ok(Layout::Ring),
            "box" | "random-box" => Ok(Layout::RandomBox),
            "clustered" => Ok(Layout::Clustered),
            other => Err(Error::InvalidSpec(format!("unknown layout '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub n: usize,
    pub layout: Layout,
    /// Standard deviation of the relative rotation perturbation angle, radians.
    pub sigma_r: f64,
    /// Standard deviation of the translation direction perturbation angle, radians.
    pub sigma_t: f64,
    /// Multiply every measurement by a random signed scale.
    pub pairwise_scales: bool,
    pub outlier_fraction: f64,
    pub missing_fraction: f64,
    /// Standard deviation of additive noise on the entries of unit-norm
    /// measurements. Leaves the essential manifold; meant for stress tests.
    pub entry_noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n: 10,
            layout: Layout::Ring,
            sigma_r: 0.0,
            sigma_t: 0.0,
            pairwise_scales: false,
            outlier_fraction: 0.0,
            missing_fraction: 0.0,
            entry_noise: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::InvalidSpec(format!("need at least 3 views, got {}", self.n)));
        }
        for (name, v) in [
            ("sigma_r", self.sigma_r),
            ("sigma_t", self.sigma_t),
            ("entry_noise", self.entry_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidSpec(format!("{name} must be finite and non-negative")));
            }
        }
        for (name, v) in [
            ("outlier fraction", self.outlier_fraction),
            ("missing fraction", self.missing_fraction),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidSpec(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub poses: Vec<CameraPose>,
    pub graph: ViewingGraph,
    /// Pairs whose measurement was replaced by an unrelated one.
    pub outliers: BTreeSet<(usize, usize)>,
}

enum Stream {
    Layout = 0,
    Noise = 1,
    Outliers = 2,
    Missing = 3,
    Scales = 4,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn unit3<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = gaussian3(rng);
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Orientation whose optical axis (third column) points from `c` at `target`.
fn look_at(c: &Vector3<f64>, target: &Vector3<f64>, roll: f64) -> Rotation {
    let z = (target - c).normalize();
    let up = if z.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let base = Matrix3::from_columns(&[x, y, z]);
    Rotation::project(&(base * Rotation::from_axis_angle(&Vector3::z(), roll).matrix()))
}

fn sample_layout(n: usize, layout: Layout, rng: &mut ChaCha8Rng) -> Vec<CameraPose> {
    match layout {
        Layout::Ring => {
            let offset = rng.random_range(0.0..std::f64::consts::TAU);
            (0..n)
                .map(|i| {
                    let a = offset + std::f64::consts::TAU * i as f64 / n as f64 + rng.random_range(-0.1..0.1);
                    let r = 10.0 + rng.random_range(-1.0..1.0);
                    let c = Vector3::new(r * a.cos(), r * a.sin(), rng.random_range(-1.0..1.0));
                    let target = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
                    CameraPose::new(look_at(&c, &target, rng.random_range(-0.3..0.3)), c)
                })
                .collect()
        }
        Layout::RandomBox => (0..n)
            .map(|_| {
                let c = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
                CameraPose::new(Rotation::random(rng), c)
            })
            .collect(),
        Layout::Clustered => {
            let hubs: Vec<Vector3<f64>> = (0..3).map(|_| gaussian3(rng) * 6.0).collect();
            (0..n)
                .map(|i| {
                    let c = hubs[i % 3] + gaussian3(rng);
                    CameraPose::new(Rotation::random(rng), c)
                })
                .collect()
        }
    }
}

fn layout_ok(poses: &[CameraPose]) -> bool {
    let k = poses.len() as f64;
    let mean: Vector3<f64> = poses.iter().map(|p| p.center).sum::<Vector3<f64>>() / k;
    let mut cov = Matrix3::zeros();
    for p in poses {
        let d = p.center - mean;
        cov += d * d.transpose();
    }
    let s = Svd3::new(&cov).sigma;
    if !(s[1] > 1e-6 * s[0]) {
        return false;
    }
    let scale = (s.sum() / k).sqrt();
    poses
        .iter()
        .enumerate()
        .all(|(i, a)| poses[i + 1..].iter().all(|b| (a.center - b.center).norm() > 1e-3 * scale))
}

/// Ground truth poses for `spec`, resampled while the centers are degenerate.
pub fn sample_poses(spec: &SceneSpec) -> Result<Vec<CameraPose>> {
    let mut rng = stream(spec.seed, Stream::Layout);
    for _ in 0..LAYOUT_ATTEMPTS {
        let poses = sample_layout(spec.n, spec.layout, &mut rng);
        if layout_ok(&poses) {
            return Ok(poses);
        }
    }
    Err(Error::LayoutDegenerate {
        attempts: LAYOUT_ATTEMPTS,
    })
}

fn connected(n: usize, edges: &BTreeSet<(usize, usize)>) -> bool {
    let mut uf = UnionFind::<usize>::new(n);
    let mut parts = n;
    for &(i, j) in edges {
        if uf.union(i, j) {
            parts -= 1;
        }
    }
    parts <= 1
}

/// Pairs left after deleting `round(fraction * C(n, 2))` of them in random
/// order, skipping deletions that would disconnect the graph.
fn observed_pairs(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> BTreeSet<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let target = (fraction * pairs.len() as f64).round() as usize;
    let mut kept: BTreeSet<(usize, usize)> = pairs.iter().copied().collect();
    pairs.shuffle(rng);
    let mut removed = 0;
    for p in pairs {
        if removed == target {
            break;
        }
        kept.remove(&p);
        if connected(n, &kept) {
            removed += 1;
        } else {
            kept.insert(p);
        }
    }
    kept
}

/// `t` rotated by `angle` about a random axis perpendicular to it.
fn tilt(t: &Vector3<f64>, angle: f64, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let u = t.normalize();
    let axis = loop {
        let a = unit3(rng).cross(&u);
        if a.norm() > 1e-6 {
            break a.normalize();
        }
    };
    Rotation::from_axis_angle(&axis, angle) * *t
}

/// Ground truth and corrupted measurements. Every random choice draws from
/// its own stream, so toggling one corruption leaves the others unchanged.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let poses = sample_poses(spec)?;
    let n = spec.n;
    let pairs = observed_pairs(n, spec.missing_fraction, &mut stream(spec.seed, Stream::Missing));
    let rot_noise = Normal::new(0.0, spec.sigma_r).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let dir_noise = Normal::new(0.0, spec.sigma_t).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut noise = stream(spec.seed, Stream::Noise);
    let mut measured = Vec::with_capacity(pairs.len());
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&poses[i], &poses[j]);
            let r = a.rotation.matrix().transpose() * b.rotation.matrix();
            let t = a.rotation.matrix().transpose() * (a.center - b.center);
            let r = r * Rotation::from_axis_angle(&unit3(&mut noise), noise.sample(rot_noise)).matrix();
            let t = tilt(&t, noise.sample(dir_noise), &mut noise);
            let mut e = skew(&t) * r;
            let entry: Matrix3<f64> = Matrix3::from_fn(|_, _| noise.sample::<f64, _>(StandardNormal)) * spec.entry_noise;
            if spec.entry_noise > 0.0 {
                let norm = e.norm();
                e = (e / norm + entry) * norm;
            }
            if pairs.contains(&(i, j)) {
                measured.push(((i, j), e, relative_essential_raw(a, b)));
            }
        }
    }
    let mut out_rng = stream(spec.seed, Stream::Outliers);
    let count = (spec.outlier_fraction * measured.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..measured.len()).collect();
    order.shuffle(&mut out_rng);
    let mut outliers = BTreeSet::new();
    for &k in &order[..count] {
        let spread = 5.0;
        let p = CameraPose::new(Rotation::random(&mut out_rng), gaussian3(&mut out_rng) * spread);
        let q = CameraPose::new(Rotation::random(&mut out_rng), gaussian3(&mut out_rng) * spread);
        let fake = relative_essential_raw(&p, &q);
        let (pair, e, _) = &mut measured[k];
        *e = fake * (e.norm() / fake.norm());
        outliers.insert(*pair);
    }
    let mut scales = stream(spec.seed, Stream::Scales);
    let mut graph = ViewingGraph::new(n);
    for ((i, j), e, clean) in measured {
        let unit = e / e.norm();
        let reference = clean / clean.norm();
        let deviation = (unit - reference).norm().min((unit + reference).norm());
        let weight = 1.0 / (deviation + WEIGHT_EPS);
        let s = if spec.pairwise_scales {
            let magnitude = scales.random_range(SCALE_RANGE.0.ln()..SCALE_RANGE.1.ln()).exp();
            if scales.random_bool(0.5) {
                magnitude
            } else {
                -magnitude
            }
        } else {
            1.0
        };
        graph.add_edge(i, j, e * s, weight)?;
    }
    Ok(Scene {
        spec: *spec,
        poses,
        graph,
        outliers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub cover: CoverConfig,
    pub admm: AdmmConfig,
    /// Extraction of triplet poses from the solved matrix.
    pub recover: RecoverOptions,
    /// Also run the per-triplet recovery from raw measurements.
    pub baseline: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cover: CoverConfig::default(),
            admm: AdmmConfig::default(),
            recover: RecoverOptions {
                tolerance: 1e-2,
                ..RecoverOptions::default()
            },
            baseline: true,
        }
    }
}

/// Gauge-free accuracy of one reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub posed_views: usize,
    pub rotation_frobenius_mean: f64,
    pub rotation_degrees_mean: f64,
    pub rotation_degrees_median: f64,
    pub center_error_mean: f64,
    pub center_error_median: f64,
    /// Mean center error over the RMS radius of the reference centers.
    pub relative_center_error_mean: f64,
}

impl Metrics {
    pub fn from_alignment(a: &Alignment) -> Metrics {
        Metrics {
            posed_views: a.views.len(),
            rotation_frobenius_mean: a.mean_rotation_frobenius(),
            rotation_degrees_mean: a.mean_rotation_degrees(),
            rotation_degrees_median: a.median_rotation_degrees(),
            center_error_mean: a.mean_center_error(),
            center_error_median: a.median_center_error(),
            relative_center_error_mean: a.mean_center_error() / a.reference_scale,
        }
    }

    /// Largest absolute difference over all fields.
    pub fn max_difference(&self, other: &Metrics) -> f64 {
        let a = self.values();
        let b = other.values();
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn values(&self) -> [f64; 7] {
        [
            self.posed_views as f64,
            self.rotation_frobenius_mean,
            self.rotation_degrees_mean,
            self.rotation_degrees_median,
            self.center_error_mean,
            self.center_error_median,
            self.relative_center_error_mean,
        ]
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub cover: f64,
    pub solve: f64,
    pub register: f64,
    pub align: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSummary {
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub max_primal_b: f64,
    pub max_primal_d: f64,
    pub skipped_updates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub metrics: Metrics,
    /// Per-triplet recovery from raw measurements over the same cover;
    /// `None` when disabled or when it failed to produce a reconstruction.
    pub baseline: Option<Metrics>,
    pub solver: SolverSummary,
    pub triplets_initial: usize,
    pub triplets_filtered: usize,
    pub triplets_final: usize,
    pub max_stitch_residual: f64,
    pub timings: StageTimings,
}

impl BenchReport {
    /// The report with timings zeroed, for determinism comparisons.
    pub fn without_timings(&self) -> BenchReport {
        BenchReport {
            timings: StageTimings::default(),
            ..self.clone()
        }
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Unit-norm copies of the measurements.
fn normalized(e: &MultiviewEssential) -> Result<MultiviewEssential> {
    let mut out = MultiviewEssential::new(e.n())?;
    for (i, j, b) in e.observed() {
        out.insert_unchecked(i, j, b / b.norm())?;
    }
    Ok(out)
}

fn baseline(
    e_hat: &MultiviewEssential,
    cover: &TripletCover,
    reference: &[CameraPose],
) -> Option<Metrics> {
    let lenient = RecoverOptions {
        tolerance: f64::INFINITY,
        rank_tol: 0.0,
        distinct_tol: 0.0,
        ..RecoverOptions::default()
    };
    let e = normalized(e_hat).ok()?;
    let triplets = extract_all(&e, cover, &lenient).ok()?;
    let g = stitch(cover, &triplets, reference.len()).ok()?;
    align_to_reference(&g.poses, reference).ok().map(|a| Metrics::from_alignment(&a))
}

/// Output of the estimation chain on one viewing graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub cover: TripletCover,
    pub solution: AdmmSolution,
    pub global: GlobalReconstruction,
    /// Cover, solve and register stages only.
    pub timings: StageTimings,
}

impl Reconstruction {
    pub fn summary(&self) -> SolverSummary {
        Reconstruction::summary_of(&self.solution)
    }

    fn summary_of(s: &AdmmSolution) -> SolverSummary {
        let last = s.trace.last().copied();
        SolverSummary {
            iterations: s.iterations(),
            converged: s.converged,
            objective: last.map_or(0.0, |r| r.objective),
            max_primal_b: last.map_or(0.0, |r| r.max_primal_b),
            max_primal_d: last.map_or(0.0, |r| r.max_primal_d),
            skipped_updates: s.trace.iter().map(|r| r.skipped).sum(),
        }
    }
}

/// Cover, averaging and registration. A solver that hits its iteration
/// limit contributes its best iterate, extracted without the residual bound;
/// check `solution.converged`.
pub fn reconstruct(graph: &ViewingGraph, cfg: &PipelineConfig) -> Result<Reconstruction> {
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let cover = build_cover(graph, &cfg.cover).map_err(|e| e.at_stage("cover"))?;
    timings.cover = secs(t);

    let t = Instant::now();
    let e_hat = graph.to_multiview().map_err(|e| e.at_stage("solve"))?;
    let solution = match admm::solve(&e_hat, &cover, &cfg.admm) {
        Ok(s) => s,
        Err(Error::NotConverged { best, .. }) => *best,
        Err(e) => return Err(e.at_stage("solve")),
    };
    timings.solve = secs(t);

    let t = Instant::now();
    let opts = if solution.converged {
        cfg.recover
    } else {
        RecoverOptions {
            tolerance: f64::INFINITY,
            ..cfg.recover
        }
    };
    let triplets = extract_all(&solution.estimate, &cover, &opts).map_err(|e| e.at_stage("register"))?;
    let global = stitch(&cover, &triplets, graph.n()).map_err(|e| e.at_stage("register"))?;
    timings.register = secs(t);
    Ok(Reconstruction {
        cover,
        solution,
        global,
        timings,
    })
}

/// Reconstruction plus alignment against ground truth.
pub fn run_pipeline(scene: &Scene, cfg: &PipelineConfig) -> Result<BenchReport> {
    let Reconstruction {
        cover,
        solution,
        global,
        mut timings,
    } = reconstruct(&scene.graph, cfg)?;
    let solver = Reconstruction::summary_of(&solution);

    let t = Instant::now();
    let alignment = align_to_reference(&global.poses, &scene.poses).map_err(|e| e.at_stage("align"))?;
    timings.align = secs(t);

    let t = Instant::now();
    let base = if cfg.baseline {
        scene.graph.to_multiview().ok().and_then(|e_hat| baseline(&e_hat, &cover, &scene.poses))
    } else {
        None
    };
    timings.baseline = secs(t);

    Ok(BenchReport {
        metrics: Metrics::from_alignment(&alignment),
        baseline: base,
        solver,
        triplets_initial: cover.initial_count,
        triplets_filtered: cover.filtered_count,
        triplets_final: cover.triplets.len(),
        max_stitch_residual: global.max_residual(),
        timings,
    })
}
