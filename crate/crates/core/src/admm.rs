//! Constrained averaging of measured essential matrices over a triplet cover.
//!
//! Each triplet `k` carries two auxiliary 9x9 copies of its sub-matrix: `B_k`
//! with a paired spectrum and `D_k` whose spectral factors form a block
//! (scaled) rotation, together with scaled multipliers `G_k` and `F_k`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;

use crate::cover::TripletCover;
use crate::error::{Error, Result};
use crate::geom::{nearest_scaled_rotation, project_to_essential, skew, Rotation};
use crate::nview::{
    block3, block_rotation_score, set_block3, sorted_eigen, MultiviewEssential, SignConfiguration,
    SpectralForm,
};
use crate::nview::{descale, recover_poses_from_spectral, RecoverOptions};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub max_outer_iters: usize,
    /// Stop when `|E_t - E_(t-1)|_F / |E_(t-1)|_F` drops below this.
    pub outer_tol: f64,
    /// Stop when every `|B_k - E_k|_F` and `|D_k - E_k|_F` drops below this.
    pub primal_tol: f64,
    /// Projection passes per D update. One pass keeps the outer loop stable;
    /// iterating the projection to its own fixed point can make it drift.
    pub inner_d_max_iters: usize,
    pub inner_d_tol: f64,
    /// Follow the spectral passes with a pose fit, so that `D_k` is exactly
    /// consistent rather than only block-rotation patterned.
    pub refine_d: bool,
    /// Scale every measured block to unit Frobenius norm first.
    pub normalize: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            alpha1: 1.0,
            alpha2: 1.0,
            max_outer_iters: 500,
            outer_tol: 1e-8,
            primal_tol: 1e-7,
            inner_d_max_iters: 1,
            inner_d_tol: 1e-10,
            refine_d: true,
            normalize: true,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !(self.alpha1.is_finite() && self.alpha1 >= 0.0 && self.alpha2.is_finite() && self.alpha2 >= 0.0) {
            return Err(Error::InvalidConfig("penalties must be finite and non-negative".into()));
        }
        if !(positive(self.outer_tol) && positive(self.primal_tol) && positive(self.inner_d_tol)) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if self.max_outer_iters == 0 || self.inner_d_max_iters == 0 {
            return Err(Error::InvalidConfig("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// `sum_(i,j) 2 |E_ij - Ehat_ij|_F^2` over observed blocks.
    pub objective: f64,
    pub max_primal_b: f64,
    pub max_primal_d: f64,
    /// Triplets whose D-update was skipped for repeated eigenvalues.
    pub skipped: usize,
    pub relative_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmSolution {
    pub estimate: MultiviewEssential,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
}

impl AdmmSolution {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    /// Observed blocks `E_ij`, `i < j`.
    pub e: BTreeMap<(usize, usize), Matrix3<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
    pub gamma: Vec<DMatrix<f64>>,
    pub phi: Vec<DMatrix<f64>>,
    pub iteration: usize,
}

/// Fixed data of one solve: triplets, measured blocks and the pair layout.
#[derive(Debug, Clone)]
pub struct AdmmProblem {
    n: usize,
    views: Vec<[usize; 3]>,
    e_hat: BTreeMap<(usize, usize), Matrix3<f64>>,
    /// For every pair, the triplets holding it with local positions `(k, a, b)`.
    uses: BTreeMap<(usize, usize), Vec<(usize, usize, usize)>>,
}

const LOCAL_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

impl AdmmProblem {
    pub fn new(e_hat: &MultiviewEssential, cover: &TripletCover, normalize: bool) -> Result<AdmmProblem> {
        if cover.triplets.is_empty() {
            return Err(Error::EmptyCover {
                reason: "no triplets to average".into(),
            });
        }
        let mut uses: BTreeMap<(usize, usize), Vec<(usize, usize, usize)>> = BTreeMap::new();
        let mut blocks = BTreeMap::new();
        let mut views = Vec::with_capacity(cover.triplets.len());
        for (k, t) in cover.triplets.iter().enumerate() {
            let mut v = t.views;
            v.sort_unstable();
            for &(a, b) in &LOCAL_PAIRS {
                let (i, j) = (v[a], v[b]);
                let m = e_hat.block(i, j).ok_or(Error::MissingBlock { i, j })?;
                let m = if normalize {
                    let norm = m.norm();
                    if !(norm > 0.0) {
                        return Err(Error::InvalidBlock {
                            i,
                            j,
                            reason: "zero block".into(),
                        });
                    }
                    m / norm
                } else {
                    m
                };
                blocks.insert((i, j), m);
                uses.entry((i, j)).or_default().push((k, a, b));
            }
            views.push(v);
        }
        Ok(AdmmProblem {
            n: e_hat.n(),
            views,
            e_hat: blocks,
            uses,
        })
    }

    pub fn triplet_count(&self) -> usize {
        self.views.len()
    }

    pub fn measured(&self) -> &BTreeMap<(usize, usize), Matrix3<f64>> {
        &self.e_hat
    }

    /// The 9x9 sub-matrix of triplet `k` assembled from `blocks`.
    pub fn gather(&self, blocks: &BTreeMap<(usize, usize), Matrix3<f64>>, k: usize) -> DMatrix<f64> {
        let v = &self.views[k];
        let mut m = DMatrix::zeros(9, 9);
        for &(a, b) in &LOCAL_PAIRS {
            let e = blocks[&(v[a], v[b])];
            set_block3(&mut m, a, b, &e);
            set_block3(&mut m, b, a, &e.transpose());
        }
        m
    }

    pub fn initial_state(&self) -> AdmmState {
        let hat: Vec<DMatrix<f64>> = (0..self.triplet_count()).map(|k| self.gather(&self.e_hat, k)).collect();
        let zeros = vec![DMatrix::zeros(9, 9); hat.len()];
        AdmmState {
            e: self.e_hat.clone(),
            b: hat.clone(),
            d: hat,
            gamma: zeros.clone(),
            phi: zeros,
            iteration: 0,
        }
    }

    /// Closed-form minimizer of the augmented Lagrangian over the shared blocks,
    /// before the equal-singular-value projection.
    pub fn step_e_unprojected(&self, state: &AdmmState, cfg: &AdmmConfig) -> BTreeMap<(usize, usize), Matrix3<f64>> {
        let entries: Vec<(&(usize, usize), &Vec<(usize, usize, usize)>)> = self.uses.iter().collect();
        entries
            .par_iter()
            .map(|&(&pair, uses)| {
                let mut sum_b = Matrix3::zeros();
                let mut sum_d = Matrix3::zeros();
                for &(k, a, b) in uses {
                    let gb = &state.b[k] + &state.gamma[k];
                    let fd = &state.d[k] + &state.phi[k];
                    sum_b += 0.5 * (block3(&gb, a, b) + block3(&gb, b, a).transpose());
                    sum_d += 0.5 * (block3(&fd, a, b) + block3(&fd, b, a).transpose());
                }
                let c = uses.len() as f64;
                let e = (2.0 * self.e_hat[&pair] + cfg.alpha1 * sum_b + cfg.alpha2 * sum_d)
                    / (2.0 + c * (cfg.alpha1 + cfg.alpha2));
                (pair, e)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    }

    pub fn step_e(&self, state: &AdmmState, cfg: &AdmmConfig) -> BTreeMap<(usize, usize), Matrix3<f64>> {
        self.step_e_unprojected(state, cfg)
            .into_iter()
            .map(|(p, m)| (p, project_to_essential(&m)))
            .collect()
    }

    /// `|E - Ehat|^2` over the observed part of the full matrix, plus
    /// `sum_k a1/2 |B_k - E_k + G_k|^2 + a2/2 |D_k - E_k + F_k|^2`.
    pub fn lagrangian(&self, state: &AdmmState, e: &BTreeMap<(usize, usize), Matrix3<f64>>, cfg: &AdmmConfig) -> f64 {
        let penalties: f64 = (0..self.triplet_count())
            .map(|k| {
                let ek = self.gather(e, k);
                0.5 * cfg.alpha1 * (&state.b[k] - &ek + &state.gamma[k]).norm_squared()
                    + 0.5 * cfg.alpha2 * (&state.d[k] - &ek + &state.phi[k]).norm_squared()
            })
            .sum();
        self.objective(e) + penalties
    }

    /// Data term counted over both orientations of every observed block.
    pub fn objective(&self, e: &BTreeMap<(usize, usize), Matrix3<f64>>) -> f64 {
        self.e_hat
            .iter()
            .map(|(pair, hat)| 2.0 * (e[pair] - hat).norm_squared())
            .sum()
    }

    fn to_multiview(&self, e: &BTreeMap<(usize, usize), Matrix3<f64>>) -> MultiviewEssential {
        let mut m = MultiviewEssential::new(self.n).expect("n >= 3 for a non-empty cover");
        for (&(i, j), b) in e {
            m.insert_unchecked(i, j, *b).expect("indices validated on construction");
        }
        m
    }
}

/// Nearest symmetric matrix to `e - gamma` whose eigenvalues pair up as
/// `l_i = -l_(d+1-i)` for the three outermost pairs, with all others zero.
pub fn step_b(e_blk: &DMatrix<f64>, gamma_blk: &DMatrix<f64>) -> DMatrix<f64> {
    let m = e_blk - gamma_blk;
    let d = m.nrows();
    let (values, vectors) = sorted_eigen(&m);
    let mut out = DMatrix::zeros(d, d);
    for i in 0..3.min(d / 2) {
        let s = 0.5 * (values[i] - values[d - 1 - i]);
        let p = vectors.column(i);
        let q = vectors.column(d - 1 - i);
        out += s * (p * p.transpose() - q * q.transpose());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DStep {
    pub matrix: DMatrix<f64>,
    /// Factors of the last reassembly; `sqrt(.5)(x + y)` is a block scaled rotation.
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub sign: SignConfiguration,
    pub iterations: usize,
    pub converged: bool,
}

/// One projection pass: the spectral factors are moved onto the closest
/// block-scaled-rotation pattern and reassembled.
pub fn step_d_single(m: &DMatrix<f64>, distinct_tol: f64) -> Result<DStep> {
    let s = SpectralForm::from_symmetric(m)?;
    s.require_distinct(distinct_tol)?;
    let sign = best_sign(&s);
    let (u, mut v) = s.factors(sign);
    for i in 0..v.nrows() / 3 {
        let (r, a) = nearest_scaled_rotation(&v.fixed_view::<3, 3>(3 * i, 0).into_owned());
        v.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&(r * a));
    }
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let x = (&u + &v) * h;
    let y = (&v - &u) * h;
    let mut matrix = DMatrix::zeros(m.nrows(), m.ncols());
    for k in 0..3 {
        let xc = x.column(k);
        let yc = y.column(k);
        matrix += s.sigma_plus[k] * (xc * xc.transpose()) + s.sigma_minus[k] * (yc * yc.transpose());
    }
    Ok(DStep {
        matrix,
        x,
        y,
        sign,
        iterations: 1,
        converged: false,
    })
}

/// Projection of `e - phi` onto consistent matrices: spectral passes, then
/// (when enabled) a least-squares fit of per-view poses and scales.
pub fn step_d(e_blk: &DMatrix<f64>, phi_blk: &DMatrix<f64>, cfg: &AdmmConfig) -> Result<DStep> {
    let target = e_blk - phi_blk;
    let mut current = target.clone();
    let mut last = None;
    for it in 1..=cfg.inner_d_max_iters {
        let mut step = step_d_single(&current, 1e-9)?;
        let change = (&step.matrix - &current).norm();
        let done = change <= cfg.inner_d_tol * current.norm().max(1.0);
        step.iterations = it;
        step.converged = done;
        current = step.matrix.clone();
        last = Some(step);
        if done {
            break;
        }
    }
    let mut step = last.expect("at least one inner iteration");
    if cfg.refine_d {
        let fitted = fit_consistent(&target)?;
        let s = SpectralForm::from_symmetric(&fitted)?;
        let sign = best_sign(&s);
        step.x = s.x.clone();
        step.y = s.signed(sign).y;
        step.sign = sign;
        step.matrix = fitted;
    }
    Ok(step)
}

fn best_sign(s: &SpectralForm) -> SignConfiguration {
    SignConfiguration::all()
        .into_iter()
        .map(|c| (c, block_rotation_score(&s.x, &s.y, c)))
        .fold((SignConfiguration::IDENTITY, f64::MIN), |acc, (c, v)| if v > acc.1 { (c, v) } else { acc })
        .0
}

/// Per-view parameters of a consistent matrix `a_i a_j R_i^T ([t_i]x - [t_j]x) R_j`.
#[derive(Debug, Clone)]
struct ViewParams {
    rotations: Vec<Matrix3<f64>>,
    centers: Vec<Vector3<f64>>,
    scales: Vec<f64>,
}

impl ViewParams {
    fn block(&self, i: usize, j: usize) -> Matrix3<f64> {
        self.rotations[i].transpose()
            * skew(&(self.centers[i] - self.centers[j]))
            * self.rotations[j]
            * (self.scales[i] * self.scales[j])
    }

    fn assemble(&self) -> DMatrix<f64> {
        let n = self.rotations.len();
        let mut m = DMatrix::zeros(3 * n, 3 * n);
        for i in 0..n {
            for j in i + 1..n {
                let b = self.block(i, j);
                set_block3(&mut m, i, j, &b);
                set_block3(&mut m, j, i, &b.transpose());
            }
        }
        m
    }

    fn residual(&self, m: &DMatrix<f64>) -> DVector<f64> {
        let n = self.rotations.len();
        let mut r = Vec::with_capacity(9 * n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                r.extend((self.block(i, j) - block3(m, i, j)).iter().copied());
            }
        }
        DVector::from_vec(r)
    }

    /// Columns: rotation increments `R_i exp([w]x)`, centers, scales.
    fn jacobian(&self) -> DMatrix<f64> {
        let n = self.rotations.len();
        let rows = 9 * n * (n - 1) / 2;
        let mut jac = DMatrix::zeros(rows, 7 * n);
        let mut row = 0;
        for i in 0..n {
            for j in i + 1..n {
                let e = self.block(i, j);
                let core = self.rotations[i].transpose() * self.scales[i] * self.scales[j];
                for a in 0..3 {
                    let unit = Vector3::ith(a, 1.0);
                    let w = skew(&unit);
                    let cols = [
                        (3 * i + a, -w * e),
                        (3 * j + a, e * w),
                        (3 * n + 3 * i + a, core * w * self.rotations[j]),
                        (3 * n + 3 * j + a, -(core * w * self.rotations[j])),
                    ];
                    for (c, d) in cols {
                        jac.view_mut((row, c), (9, 1)).copy_from_slice(d.as_slice());
                    }
                }
                jac.view_mut((row, 6 * n + i), (9, 1)).copy_from_slice((e / self.scales[i]).as_slice());
                jac.view_mut((row, 6 * n + j), (9, 1)).copy_from_slice((e / self.scales[j]).as_slice());
                row += 9;
            }
        }
        jac
    }

    fn updated(&self, delta: &DVector<f64>) -> ViewParams {
        let n = self.rotations.len();
        let v3 = |k: usize| Vector3::new(delta[k], delta[k + 1], delta[k + 2]);
        ViewParams {
            rotations: (0..n)
                .map(|i| self.rotations[i] * Rotation::from_rotation_vector(&v3(3 * i)).matrix())
                .collect(),
            centers: (0..n).map(|i| self.centers[i] + v3(3 * n + 3 * i)).collect(),
            scales: (0..n).map(|i| self.scales[i] + delta[6 * n + i]).collect(),
        }
    }
}

/// Starting point from the spectral factors of `m` after removing per-view
/// scales, with the global scale and sign fitted by least squares.
fn initial_params(m: &DMatrix<f64>) -> Result<ViewParams> {
    let (descaled, scales) = descale(m, 2)?;
    let spectral = SpectralForm::from_symmetric(&descaled)?;
    let lenient = RecoverOptions {
        tolerance: f64::INFINITY,
        ..RecoverOptions::default()
    };
    let poses = recover_poses_from_spectral(&spectral, &lenient)?;
    let mut p = ViewParams {
        rotations: poses.iter().map(|q| *q.rotation.matrix()).collect(),
        centers: poses.iter().map(|q| q.center).collect(),
        scales,
    };
    let model = p.assemble();
    let k = model.dot(m) / model.norm_squared();
    if !k.is_finite() || k == 0.0 {
        return Err(Error::SingularInput { smallest: 0.0 });
    }
    for c in &mut p.centers {
        *c *= k;
    }
    Ok(p)
}

const FIT_MAX_ITERS: usize = 100;

/// Levenberg-Marquardt fit of a consistent matrix to the off-diagonal blocks
/// of `m`.
fn fit_consistent(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut p = initial_params(m)?;
    let mut r = p.residual(m);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let floor = 1e-30 * m.norm_squared();
    for _ in 0..FIT_MAX_ITERS {
        if cost <= floor {
            break;
        }
        let jac = p.jacobian();
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for d in 0..a.nrows() {
                a[(d, d)] += lambda * (jtj[(d, d)] + 1e-12);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&g);
            let next = p.updated(&delta);
            let nr = next.residual(m);
            let nc = nr.norm_squared();
            if nc < cost {
                let gain = (cost - nc) / cost;
                p = next;
                r = nr;
                cost = nc;
                lambda = (lambda / 3.0).max(1e-12);
                improved = gain > 1e-15;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    Ok(p.assemble())
}

/// `G += B - E`, `F += D - E` for every triplet, with `e_k` the current sub-matrices.
pub fn step_duals(state: &mut AdmmState, e_k: &[DMatrix<f64>]) {
    state
        .gamma
        .par_iter_mut()
        .zip(state.phi.par_iter_mut())
        .zip(state.b.par_iter().zip(state.d.par_iter()))
        .zip(e_k.par_iter())
        .for_each(|(((g, f), (b, d)), e)| {
            *g += b - e;
            *f += d - e;
        });
}

fn change(a: &BTreeMap<(usize, usize), Matrix3<f64>>, b: &BTreeMap<(usize, usize), Matrix3<f64>>) -> f64 {
    let num: f64 = a.iter().map(|(p, m)| (m - b[p]).norm_squared()).sum();
    let den: f64 = b.values().map(|m| m.norm_squared()).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

impl AdmmProblem {
    /// One outer iteration; returns the trace row.
    pub fn iterate(&self, state: &mut AdmmState, cfg: &AdmmConfig) -> TraceRow {
        let previous = state.e.clone();
        state.e = self.step_e(state, cfg);
        let e_k: Vec<DMatrix<f64>> = (0..self.triplet_count()).into_par_iter().map(|k| self.gather(&state.e, k)).collect();
        let b: Vec<DMatrix<f64>> = e_k.par_iter().zip(state.gamma.par_iter()).map(|(e, g)| step_b(e, g)).collect();
        let d: Vec<Option<DMatrix<f64>>> = e_k
            .par_iter()
            .zip(state.phi.par_iter())
            .map(|(e, f)| step_d(e, f, cfg).ok().map(|s| s.matrix))
            .collect();
        state.b = b;
        let mut skipped = 0;
        for (slot, new) in state.d.iter_mut().zip(d) {
            match new {
                Some(m) => *slot = m,
                None => skipped += 1,
            }
        }
        step_duals(state, &e_k);
        state.iteration += 1;
        let (pb, pd) = e_k
            .iter()
            .enumerate()
            .map(|(k, e)| ((&state.b[k] - e).norm(), (&state.d[k] - e).norm()))
            .fold((0.0f64, 0.0f64), |acc, (x, y)| (acc.0.max(x), acc.1.max(y)));
        TraceRow {
            iteration: state.iteration,
            objective: self.objective(&state.e),
            max_primal_b: pb,
            max_primal_d: pd,
            skipped,
            relative_change: change(&state.e, &previous),
        }
    }
}

/// Runs the averaging to convergence. The first iteration cannot stall: it
/// starts from the measurements themselves. On hitting the iteration limit the
/// error carries the iterate with the smallest primal residual.
pub fn solve(e_hat: &MultiviewEssential, cover: &TripletCover, cfg: &AdmmConfig) -> Result<AdmmSolution> {
    cfg.validate()?;
    let problem = AdmmProblem::new(e_hat, cover, cfg.normalize)?;
    let mut state = problem.initial_state();
    let mut trace = Vec::new();
    let mut best: Option<(f64, BTreeMap<(usize, usize), Matrix3<f64>>)> = None;
    for _ in 0..cfg.max_outer_iters {
        let row = problem.iterate(&mut state, cfg);
        trace.push(row);
        let primal = row.max_primal_b.max(row.max_primal_d);
        let stalled = row.iteration > 1 && row.relative_change < cfg.outer_tol;
        if stalled || primal < cfg.primal_tol {
            return Ok(AdmmSolution {
                estimate: problem.to_multiview(&state.e),
                trace,
                converged: true,
            });
        }
        if best.as_ref().is_none_or(|(p, _)| primal < *p) {
            best = Some((primal, state.e.clone()));
        }
    }
    let e = best.map(|(_, e)| e).unwrap_or(state.e);
    Err(Error::NotConverged {
        iterations: cfg.max_outer_iters,
        best: Box::new(AdmmSolution {
            estimate: problem.to_multiview(&e),
            trace,
            converged: false,
        }),
    })
}
