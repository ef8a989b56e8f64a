//! The n-view essential matrix: assembly, consistency checks and pose recovery.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{
    decompose_essential, nearest_rotation_matrix, relative_essential, skew, unskew_part,
    CameraPose, EssentialBlock, Rotation, Svd3,
};

pub(crate) fn block3(m: &DMatrix<f64>, i: usize, j: usize) -> Matrix3<f64> {
    m.fixed_view::<3, 3>(3 * i, 3 * j).into_owned()
}

pub(crate) fn set_block3(m: &mut DMatrix<f64>, i: usize, j: usize, b: &Matrix3<f64>) {
    m.fixed_view_mut::<3, 3>(3 * i, 3 * j).copy_from(b);
}

fn row_block(m: &DMatrix<f64>, i: usize) -> Matrix3<f64> {
    m.fixed_view::<3, 3>(3 * i, 0).into_owned()
}

/// Symmetric 3n x 3n block matrix with a set of observed off-diagonal blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiviewEssential {
    n: usize,
    blocks: BTreeMap<(usize, usize), Matrix3<f64>>,
}

impl MultiviewEssential {
    pub fn new(n: usize) -> Result<MultiviewEssential> {
        if n < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 views, got {n}")));
        }
        Ok(MultiviewEssential {
            n,
            blocks: BTreeMap::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn key(&self, i: usize, j: usize) -> Result<(usize, usize, bool)> {
        for index in [i, j] {
            if index >= self.n {
                return Err(Error::IndexOutOfRange { index, n: self.n });
            }
        }
        if i == j {
            return Err(Error::InvalidBlock {
                i,
                j,
                reason: "diagonal blocks are fixed to zero".into(),
            });
        }
        Ok(if i < j { (i, j, false) } else { (j, i, true) })
    }

    /// Stores `E_ij` (and implicitly `E_ji = E_ij^T`) after validating it.
    pub fn insert(&mut self, i: usize, j: usize, e: Matrix3<f64>) -> Result<()> {
        EssentialBlock::new(e).map_err(|err| Error::InvalidBlock {
            i,
            j,
            reason: err.to_string(),
        })?;
        self.insert_unchecked(i, j, e)
    }

    /// Stores a block without the essential-shape test, for noisy measurements.
    pub fn insert_unchecked(&mut self, i: usize, j: usize, e: Matrix3<f64>) -> Result<()> {
        let (a, b, flip) = self.key(i, j)?;
        if !e.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidBlock {
                i,
                j,
                reason: "non-finite entry".into(),
            });
        }
        self.blocks
            .insert((a, b), if flip { e.transpose() } else { e });
        Ok(())
    }

    pub fn remove(&mut self, i: usize, j: usize) -> Option<Matrix3<f64>> {
        let (a, b, flip) = self.key(i, j).ok()?;
        self.blocks
            .remove(&(a, b))
            .map(|e| if flip { e.transpose() } else { e })
    }

    /// Block `(i, j)`; the zero matrix on the diagonal.
    pub fn block(&self, i: usize, j: usize) -> Option<Matrix3<f64>> {
        if i == j && i < self.n {
            return Some(Matrix3::zeros());
        }
        let (a, b, flip) = self.key(i, j).ok()?;
        self.blocks
            .get(&(a, b))
            .map(|e| if flip { e.transpose() } else { *e })
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i != j && self.block(i, j).is_some()
    }

    /// Observed pairs `(i, j, E_ij)` with `i < j`, in lexicographic order.
    pub fn observed(&self) -> impl Iterator<Item = (usize, usize, &Matrix3<f64>)> + '_ {
        self.blocks.iter().map(|(&(i, j), e)| (i, j, e))
    }

    pub fn observed_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn expected_count(&self) -> usize {
        self.n * (self.n - 1) / 2
    }

    pub fn is_fully_observed(&self) -> bool {
        self.observed_count() == self.expected_count()
    }

    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        if !self.is_fully_observed() {
            return Err(Error::IncompleteMatrix {
                observed: self.observed_count(),
                expected: self.expected_count(),
            });
        }
        let mut m = DMatrix::zeros(3 * self.n, 3 * self.n);
        for (i, j, e) in self.observed() {
            set_block3(&mut m, i, j, e);
            set_block3(&mut m, j, i, &e.transpose());
        }
        Ok(m)
    }

    /// Reads every off-diagonal block of a symmetric `3n x 3n` matrix.
    pub fn from_dense(m: &DMatrix<f64>) -> Result<MultiviewEssential> {
        if m.nrows() != m.ncols() || m.nrows() % 3 != 0 {
            return Err(Error::InvalidConfig(format!(
                "expected a square matrix with a multiple of 3 rows, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut out = MultiviewEssential::new(m.nrows() / 3)?;
        for i in 0..out.n {
            for j in i + 1..out.n {
                out.insert_unchecked(i, j, 0.5 * (block3(m, i, j) + block3(m, j, i).transpose()))?;
            }
        }
        Ok(out)
    }

    /// Dense 9x9 matrix of a view triplet, which must be fully observed.
    pub fn submatrix(&self, views: &[usize; 3]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(9, 9);
        for a in 0..3 {
            for b in 0..3 {
                if a == b {
                    continue;
                }
                let e = self.block(views[a], views[b]).ok_or(Error::MissingBlock {
                    i: views[a],
                    j: views[b],
                })?;
                set_block3(&mut m, a, b, &e);
            }
        }
        Ok(m)
    }

    /// Congruence by `diag(a_i I_3)`: block `(i, j)` becomes `a_i a_j E_ij`.
    pub fn congruence(&self, alphas: &[f64]) -> Result<MultiviewEssential> {
        if alphas.len() != self.n {
            return Err(Error::InvalidConfig(format!(
                "expected {} scales, got {}",
                self.n,
                alphas.len()
            )));
        }
        let mut out = self.clone();
        for ((i, j), e) in out.blocks.iter_mut() {
            *e *= alphas[*i] * alphas[*j];
        }
        Ok(out)
    }

    /// Every block multiplied by `k`.
    pub fn scaled(&self, k: f64) -> MultiviewEssential {
        let mut out = self.clone();
        for e in out.blocks.values_mut() {
            *e *= k;
        }
        out
    }

    /// Checks that every observed block is an essential matrix.
    pub fn validate(&self) -> Result<()> {
        for (i, j, e) in self.observed() {
            EssentialBlock::new(*e).map_err(|err| Error::InvalidBlock {
                i,
                j,
                reason: err.to_string(),
            })?;
        }
        Ok(())
    }
}

/// Assembles the blocks `R_i^T ([t_i]x - [t_j]x) R_j` for the pairs in `mask`
/// (all pairs when `None`).
pub fn build_from_poses(
    poses: &[CameraPose],
    mask: Option<&[(usize, usize)]>,
) -> Result<MultiviewEssential> {
    let mut out = MultiviewEssential::new(poses.len())?;
    let all: Vec<(usize, usize)>;
    let pairs = match mask {
        Some(m) => m,
        None => {
            all = (0..poses.len())
                .flat_map(|i| (i + 1..poses.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    for &(i, j) in pairs {
        for index in [i, j] {
            if index >= poses.len() {
                return Err(Error::IndexOutOfRange {
                    index,
                    n: poses.len(),
                });
            }
        }
        let e = relative_essential(&poses[i], &poses[j])?;
        out.insert_unchecked(i, j, e.into_inner())?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConsistencyMode {
    /// Every block of the rotation factor is `R_i / sqrt(n)`.
    Strict,
    /// Blocks of the rotation factor are `a_i R_i` with arbitrary nonzero `a_i`.
    Scaled,
}

impl fmt::Display for ConsistencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConsistencyMode::Strict => "strict",
            ConsistencyMode::Scaled => "scaled",
        })
    }
}

/// Diagonal sign matrix `I_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SignConfiguration(u8);

impl SignConfiguration {
    pub const IDENTITY: SignConfiguration = SignConfiguration(0);

    /// Bit `k` of `index` set means a negative sign in position `k`.
    pub fn from_index(index: u8) -> Option<SignConfiguration> {
        (index < 8).then_some(SignConfiguration(index))
    }

    pub fn all() -> [SignConfiguration; 8] {
        std::array::from_fn(|k| SignConfiguration(k as u8))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn signs(self) -> [f64; 3] {
        std::array::from_fn(|k| if self.0 >> k & 1 == 1 { -1.0 } else { 1.0 })
    }
}

impl fmt::Display for SignConfiguration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.signs().map(|v| if v > 0.0 { '+' } else { '-' });
        write!(f, "{}{}{}", s[0], s[1], s[2])
    }
}

/// Thin spectral form `X S+ X^T + Y S- Y^T` of a symmetric matrix, positive
/// eigenvalues descending and negative ones ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralForm {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub sigma_plus: Vector3<f64>,
    pub sigma_minus: Vector3<f64>,
}

/// `U S V^T + V S U^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdForm {
    pub u_hat: DMatrix<f64>,
    pub v_hat: DMatrix<f64>,
    pub sigma: Vector3<f64>,
}

/// Eigenvalues sorted descending together with the matching eigenvectors.
pub(crate) fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = idx.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), idx.len(), |r, c| eig.eigenvectors[(r, idx[c])]);
    (values, vectors)
}

impl SpectralForm {
    /// Top three and bottom three eigenpairs of `m`, whatever their signs.
    pub fn from_symmetric(m: &DMatrix<f64>) -> Result<SpectralForm> {
        let d = m.nrows();
        if d != m.ncols() || d < 6 {
            return Err(Error::InvalidConfig(format!(
                "spectral form needs a square matrix of order at least 6, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let (values, vectors) = sorted_eigen(m);
        let mut x = DMatrix::zeros(d, 3);
        let mut y = DMatrix::zeros(d, 3);
        let mut sigma_plus = Vector3::zeros();
        let mut sigma_minus = Vector3::zeros();
        for k in 0..3 {
            x.set_column(k, &vectors.column(k));
            y.set_column(k, &vectors.column(d - 1 - k));
            sigma_plus[k] = values[k];
            sigma_minus[k] = values[d - 1 - k];
        }
        Ok(SpectralForm {
            x,
            y,
            sigma_plus,
            sigma_minus,
        })
    }

    pub fn views(&self) -> usize {
        self.x.nrows() / 3
    }

    pub fn reassemble(&self) -> DMatrix<f64> {
        let xs = &self.x * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(self.sigma_plus.as_slice()));
        let ys = &self.y * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(self.sigma_minus.as_slice()));
        xs * self.x.transpose() + ys * self.y.transpose()
    }

    /// `Y` with columns multiplied by the signs of `s`.
    pub fn signed(&self, s: SignConfiguration) -> SpectralForm {
        let mut out = self.clone();
        for (k, sign) in s.signs().into_iter().enumerate() {
            if sign < 0.0 {
                out.y.column_mut(k).neg_mut();
            }
        }
        out
    }

    /// Largest magnitude among the six retained eigenvalues.
    pub fn scale(&self) -> f64 {
        self.sigma_plus.amax().max(self.sigma_minus.amax())
    }

    /// `max |s+_k + s-_k|` relative to [`SpectralForm::scale`].
    pub fn pairing_residual(&self) -> f64 {
        let scale = self.scale();
        if scale == 0.0 {
            return 0.0;
        }
        (self.sigma_plus + self.sigma_minus).amax() / scale
    }

    /// Smallest gap between consecutive retained eigenvalues of equal sign,
    /// relative to [`SpectralForm::scale`].
    pub fn distinctness_gap(&self) -> f64 {
        let scale = self.scale();
        let p = &self.sigma_plus;
        let m = &self.sigma_minus;
        let gap = (p[0] - p[1])
            .min(p[1] - p[2])
            .min(m[1] - m[0])
            .min(m[2] - m[1]);
        if scale == 0.0 {
            0.0
        } else {
            gap / scale
        }
    }

    pub(crate) fn require_distinct(&self, tol: f64) -> Result<()> {
        let gap = self.distinctness_gap();
        if !(gap > tol) {
            return Err(Error::EigenvalueMultiplicity { gap });
        }
        Ok(())
    }

    /// `(sqrt(.5)(X - Y I_s), sqrt(.5)(X + Y I_s))`, negated together when the
    /// first block of the second factor has negative determinant.
    pub fn factors(&self, s: SignConfiguration) -> (DMatrix<f64>, DMatrix<f64>) {
        let signed = self.signed(s);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mut u = (&signed.x - &signed.y) * h;
        let mut v = (&signed.x + &signed.y) * h;
        if row_block(&v, 0).determinant() < 0.0 {
            u.neg_mut();
            v.neg_mut();
        }
        (u, v)
    }
}

pub fn svd_to_spectral(f: &SvdForm) -> SpectralForm {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    SpectralForm {
        x: (&f.u_hat + &f.v_hat) * h,
        y: (&f.v_hat - &f.u_hat) * h,
        sigma_plus: f.sigma,
        sigma_minus: -f.sigma,
    }
}

/// Tolerance on the relative pairing residual accepted by [`spectral_to_svd`].
pub const PAIRING_TOL: f64 = 1e-8;

pub fn spectral_to_svd(s: &SpectralForm) -> Result<SvdForm> {
    let residual = s.pairing_residual();
    if !(residual <= PAIRING_TOL) || s.sigma_plus.min() <= 0.0 {
        return Err(Error::Pairing { residual });
    }
    let h = std::f64::consts::FRAC_1_SQRT_2;
    Ok(SvdForm {
        u_hat: (&s.x - &s.y) * h,
        v_hat: (&s.x + &s.y) * h,
        sigma: 0.5 * (s.sigma_plus - s.sigma_minus),
    })
}

impl SvdForm {
    pub fn reassemble(&self) -> DMatrix<f64> {
        let us = &self.u_hat * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(self.sigma.as_slice()));
        let a = us * self.v_hat.transpose();
        &a + a.transpose()
    }
}

/// Sum over blocks of `|diag(G_i)|_2 / |G_i|_F` with `G_i` the Gram matrix of
/// block `i` of `X + Y I_s`.
pub fn block_rotation_score(x: &DMatrix<f64>, y: &DMatrix<f64>, s: SignConfiguration) -> f64 {
    let signs = s.signs();
    let mut total = 0.0;
    for i in 0..x.nrows() / 3 {
        let mut b = row_block(x, i);
        let yb = row_block(y, i);
        for k in 0..3 {
            b.set_column(k, &(b.column(k) + yb.column(k) * signs[k]));
        }
        let g = b.transpose() * b;
        let norm = g.norm();
        if norm > 0.0 {
            total += g.diagonal().norm() / norm;
        }
    }
    total
}

fn scaled_block_residual(v: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..v.nrows() / 3 {
        let b = row_block(v, i);
        let g = b.transpose() * b;
        let mean = g.trace() / 3.0;
        let r = if mean > 0.0 {
            (g / mean - Matrix3::identity()).norm()
        } else {
            f64::INFINITY
        };
        worst = worst.max(r);
    }
    worst
}

fn strict_block_residual(v: &DMatrix<f64>) -> f64 {
    let root_n = ((v.nrows() / 3) as f64).sqrt();
    let mut worst: f64 = 0.0;
    for i in 0..v.nrows() / 3 {
        let b = row_block(v, i) * root_n;
        worst = worst.max((b - nearest_rotation_matrix(&b)).norm());
    }
    worst
}

fn block_residual(v: &DMatrix<f64>, mode: ConsistencyMode) -> f64 {
    match mode {
        ConsistencyMode::Strict => strict_block_residual(v),
        ConsistencyMode::Scaled => scaled_block_residual(v),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckTolerances {
    /// Relative threshold below which eigen- and singular values count as zero.
    pub rank: f64,
    pub pairing: f64,
    pub block: f64,
    pub distinct: f64,
}

impl Default for CheckTolerances {
    fn default() -> Self {
        CheckTolerances {
            rank: 1e-8,
            pairing: 1e-6,
            block: 1e-6,
            distinct: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalReport {
    pub ok: bool,
    /// `|l_7| / |l_1|` over eigenvalues sorted by magnitude.
    pub rank_residual: f64,
    /// `|l_6| / |l_1|`; must stay above tolerance for rank 6.
    pub rank_margin: f64,
    pub positive_eigenvalues: usize,
    pub negative_eigenvalues: usize,
    /// `s_3 / s_1` of every 3 x 3n block row.
    pub block_row_rank_ratios: Vec<f64>,
    /// Every off-diagonal block has rank exactly 2.
    pub blocks_rank_two: bool,
}

pub fn check_fundamental_consistency(
    e: &MultiviewEssential,
    tol: &CheckTolerances,
) -> Result<FundamentalReport> {
    let dense = e.to_dense()?;
    Ok(fundamental_report(e, &dense, tol))
}

fn fundamental_report(
    e: &MultiviewEssential,
    dense: &DMatrix<f64>,
    tol: &CheckTolerances,
) -> FundamentalReport {
    let (values, _) = sorted_eigen(dense);
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let top = mags[0];
    let rel = |k: usize| if top > 0.0 { mags.get(k).copied().unwrap_or(0.0) / top } else { 0.0 };
    let rank_residual = rel(6);
    let rank_margin = rel(5);
    let floor = tol.rank * top;
    let positive_eigenvalues = values.iter().filter(|&&v| v > floor).count();
    let negative_eigenvalues = values.iter().filter(|&&v| v < -floor).count();
    let block_row_rank_ratios: Vec<f64> = (0..e.n())
        .map(|i| {
            let row = dense.rows(3 * i, 3).into_owned();
            let s = row.singular_values();
            let max = s.max();
            if max > 0.0 {
                s.min() / max
            } else {
                0.0
            }
        })
        .collect();
    let blocks_rank_two = e.observed().all(|(_, _, b)| {
        let s = Svd3::new(b).sigma;
        s[0] > 0.0 && s[2] <= tol.rank * s[0] && s[1] > tol.rank * s[0]
    });
    let ok = top > 0.0
        && rank_residual <= tol.rank
        && rank_margin > tol.rank
        && positive_eigenvalues == 3
        && negative_eigenvalues == 3
        && block_row_rank_ratios.iter().all(|&r| r > tol.rank)
        && blocks_rank_two;
    FundamentalReport {
        ok,
        rank_residual,
        rank_margin,
        positive_eigenvalues,
        negative_eigenvalues,
        block_row_rank_ratios,
        blocks_rank_two,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub mode: ConsistencyMode,
    pub fundamental_ok: bool,
    pub fundamental: FundamentalReport,
    pub essential_ok: bool,
    /// `max |s+_k + s-_k|` relative to the largest eigenvalue magnitude.
    pub eigenvalue_pairing_residual: f64,
    /// Residual of the best sign configuration.
    pub block_rotation_residual: f64,
    /// Residual of each sign configuration, indexed by [`SignConfiguration::index`].
    pub sign_residuals: [f64; 8],
    pub best_sign: SignConfiguration,
}

impl ConsistencyReport {
    pub fn pairing_holds(&self, tol: f64) -> bool {
        self.eigenvalue_pairing_residual <= tol
    }
}

/// Full consistency check. Rank-deficient input yields a failing report rather than an error.
pub fn check_essential_consistency(
    e: &MultiviewEssential,
    mode: ConsistencyMode,
    tol: &CheckTolerances,
) -> Result<ConsistencyReport> {
    let dense = e.to_dense()?;
    let fundamental = fundamental_report(e, &dense, tol);
    let spectral = SpectralForm::from_symmetric(&dense)?;
    let full_rank = spectral.sigma_plus.min() > tol.rank * spectral.scale()
        && spectral.sigma_minus.max() < -tol.rank * spectral.scale();
    if !full_rank {
        return Ok(ConsistencyReport {
            mode,
            fundamental_ok: fundamental.ok,
            fundamental,
            essential_ok: false,
            eigenvalue_pairing_residual: spectral.pairing_residual(),
            block_rotation_residual: f64::INFINITY,
            sign_residuals: [f64::INFINITY; 8],
            best_sign: SignConfiguration::IDENTITY,
        });
    }
    spectral.require_distinct(tol.distinct)?;
    let sign_residuals = SignConfiguration::all().map(|s| block_residual(&spectral.factors(s).1, mode));
    let (best, residual) = sign_residuals
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, &r)| if r < acc.1 { (k, r) } else { acc });
    let pairing = spectral.pairing_residual();
    Ok(ConsistencyReport {
        mode,
        fundamental_ok: fundamental.ok,
        essential_ok: fundamental.ok && pairing <= tol.pairing && residual <= tol.block,
        fundamental,
        eigenvalue_pairing_residual: pairing,
        block_rotation_residual: residual,
        sign_residuals,
        best_sign: SignConfiguration(best as u8),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoverOptions {
    pub mode: ConsistencyMode,
    /// Largest block-rotation residual accepted for the chosen sign configuration.
    pub tolerance: f64,
    pub rank_tol: f64,
    pub distinct_tol: f64,
}

impl Default for RecoverOptions {
    fn default() -> Self {
        RecoverOptions {
            mode: ConsistencyMode::Scaled,
            tolerance: 1e-6,
            rank_tol: 1e-8,
            distinct_tol: 1e-6,
        }
    }
}

/// Camera poses generating `e` up to pairwise scales and one similarity.
pub fn recover_poses(e: &MultiviewEssential, opts: &RecoverOptions) -> Result<Vec<CameraPose>> {
    let dense = e.to_dense()?;
    recover_poses_from_matrix(&dense, opts)
}

pub(crate) fn recover_poses_from_matrix(
    dense: &DMatrix<f64>,
    opts: &RecoverOptions,
) -> Result<Vec<CameraPose>> {
    let spectral = SpectralForm::from_symmetric(dense)?;
    let scale = spectral.scale();
    let low = spectral.sigma_plus.min().min(-spectral.sigma_minus.max());
    if !(low > opts.rank_tol * scale) {
        return Err(Error::RankDeficient {
            ratio: if scale > 0.0 { low / scale } else { 0.0 },
        });
    }
    spectral.require_distinct(opts.distinct_tol)?;
    recover_poses_from_spectral(&spectral, opts)
}

pub fn recover_poses_from_spectral(
    spectral: &SpectralForm,
    opts: &RecoverOptions,
) -> Result<Vec<CameraPose>> {
    let (u, v, residual) = SignConfiguration::all()
        .into_iter()
        .map(|s| {
            let (u, v) = spectral.factors(s);
            let r = block_residual(&v, opts.mode);
            (u, v, r)
        })
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .expect("eight configurations");
    if !(residual <= opts.tolerance) {
        return Err(Error::NoValidSign {
            best_residual: residual,
        });
    }
    let sigma = 0.5 * (spectral.sigma_plus - spectral.sigma_minus);
    let u_bar = u * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(sigma.as_slice()));
    let n = spectral.views();
    let mut rotations = Vec::with_capacity(n);
    let mut centers = Vec::with_capacity(n);
    let mut alpha_sq = 0.0;
    for i in 0..n {
        let vi = row_block(&v, i);
        let alpha = vi.determinant().cbrt();
        let inv = vi.try_inverse().ok_or(Error::SingularInput { smallest: 0.0 })?;
        let t = unskew_part(&(inv * row_block(&u_bar, i)));
        rotations.push(Rotation::project(&(vi.transpose() / alpha)));
        centers.push(t);
        alpha_sq += alpha * alpha;
    }
    let gauge = alpha_sq / n as f64;
    Ok(rotations
        .into_iter()
        .zip(centers)
        .map(|(r, t)| CameraPose::new(r, t * gauge))
        .collect())
}

/// Signed per-view scales `cbrt(det V_i)` of the best-signed rotation factor,
/// normalised to unit geometric mean magnitude.
pub(crate) fn view_scales(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let s = SpectralForm::from_symmetric(m)?;
    let sign = SignConfiguration::all()
        .into_iter()
        .max_by(|a, b| block_rotation_score(&s.x, &s.y, *a).total_cmp(&block_rotation_score(&s.x, &s.y, *b)))
        .expect("eight configurations");
    let (_, v) = s.factors(sign);
    let alphas: Vec<f64> = (0..s.views()).map(|i| row_block(&v, i).determinant().cbrt()).collect();
    let mean = alphas.iter().map(|a| a.abs().ln()).sum::<f64>() / alphas.len() as f64;
    if !mean.is_finite() {
        return Err(Error::SingularInput { smallest: 0.0 });
    }
    Ok(alphas.into_iter().map(|a| a / mean.exp()).collect())
}

/// Repeatedly divides out [`view_scales`] by congruence. Returns the
/// descaled matrix and the accumulated scales.
pub(crate) fn descale(m: &DMatrix<f64>, passes: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = m.nrows() / 3;
    let mut out = m.clone();
    let mut total = vec![1.0; n];
    for _ in 0..passes {
        let alphas = view_scales(&out)?;
        if alphas.iter().all(|a| (a - 1.0).abs() < 1e-13) {
            break;
        }
        for i in 0..n {
            total[i] *= alphas[i];
            for j in 0..n {
                out.fixed_view_mut::<3, 3>(3 * i, 3 * j).scale_mut(1.0 / (alphas[i] * alphas[j]));
            }
        }
    }
    Ok((out, total))
}

/// Loop deviations `|R_12 R_23 R_31 - I|_F` over the 2 x 2 x 2 rotation choices
/// of three essential blocks.
pub fn rotation_loop_residuals(
    e12: &Matrix3<f64>,
    e13: &Matrix3<f64>,
    e23: &Matrix3<f64>,
) -> Result<[f64; 8]> {
    let d12 = decompose_essential(&EssentialBlock::nearest(e12)?)?;
    let d13 = decompose_essential(&EssentialBlock::nearest(e13)?)?;
    let d23 = decompose_essential(&EssentialBlock::nearest(e23)?)?;
    Ok(std::array::from_fn(|k| {
        let r12 = d12[k & 1].rotation.matrix();
        let r23 = d23[k >> 1 & 1].rotation.matrix();
        let r31 = d13[k >> 2 & 1].rotation.matrix().transpose();
        (r12 * r23 * r31 - Matrix3::identity()).norm()
    }))
}

/// Three essential blocks forming a consistent fundamental matrix that no
/// Euclidean cameras generate.
pub fn generate_counterexample(seed: u64) -> Result<(MultiviewEssential, ConsistencyReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = CheckTolerances::default();
    const ATTEMPTS: usize = 1000;
    for _ in 0..ATTEMPTS {
        let r_star = Rotation::random(&mut rng);
        let r_star2 = Rotation::random(&mut rng);
        let r2 = Rotation::random(&mut rng);
        let m = r_star.matrix() - r_star2.matrix();
        let svd = Svd3::new(&m);
        if !(svd.sigma[1] > 1e-6 * svd.sigma[0]) {
            continue;
        }
        let t3: Vector3<f64> = svd.u.column(0) * svd.sigma[0];
        let a: Vector3<f64> = svd.v.column(0).into();
        let t2 = t3 - svd.u.column(1) * svd.sigma[1];
        let t1 = Vector3::zeros();
        let v = [
            Matrix3::identity(),
            r2.matrix().transpose(),
            r_star2.matrix().transpose() + a * t3.transpose(),
        ];
        if v[2].determinant().abs() < 1e-3 {
            continue;
        }
        let t = [t1, t2, t3];
        let f = |i: usize, j: usize| v[i] * skew(&(t[i] - t[j])) * v[j].transpose();
        let mut e = MultiviewEssential::new(3)?;
        let mut valid = true;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let b = f(i, j);
            let s = Svd3::new(&b).sigma;
            if !(s[0] > 1e-3 && (s[0] - s[1]) <= 1e-10 * s[0] && s[2] <= 1e-10 * s[0]) {
                valid = false;
            }
            e.insert_unchecked(i, j, b)?;
        }
        if !valid {
            continue;
        }
        let report = match check_essential_consistency(&e, ConsistencyMode::Scaled, &tol) {
            Ok(r) => r,
            Err(_) => continue,
        };
        let loops = rotation_loop_residuals(
            &e.block(0, 1).expect("set"),
            &e.block(0, 2).expect("set"),
            &e.block(1, 2).expect("set"),
        )?;
        let spectral = SpectralForm::from_symmetric(&e.to_dense()?)?;
        let best_score = SignConfiguration::all()
            .map(|c| block_rotation_score(&spectral.x, &spectral.y, c))
            .into_iter()
            .fold(f64::MIN, f64::max);
        if report.fundamental_ok
            && !report.essential_ok
            && best_score < 3.0 - 0.01
            && report.eigenvalue_pairing_residual < 1e-9
            && report.block_rotation_residual > 0.05
            && loops.iter().all(|&l| l > 0.1)
        {
            return Ok((e, report));
        }
    }
    Err(Error::LayoutDegenerate { attempts: ATTEMPTS })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{apply_similarity, Similarity};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub(crate) fn random_poses(rng: &mut ChaCha8Rng, n: usize) -> Vec<CameraPose> {
        (0..n)
            .map(|_| {
                let c = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                CameraPose::new(Rotation::random(rng), c * 4.0)
            })
            .collect()
    }

    fn dense_of(poses: &[CameraPose]) -> DMatrix<f64> {
        build_from_poses(poses, None).unwrap().to_dense().unwrap()
    }

    #[test]
    fn build_two_view_example() {
        let poses = [
            CameraPose::new(Rotation::identity(), Vector3::zeros()),
            CameraPose::new(Rotation::identity(), Vector3::x()),
        ];
        let e = build_from_poses(&poses, None).unwrap();
        assert_eq!(
            e.block(0, 1).unwrap(),
            Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0)
        );
        assert_eq!(e.block(1, 0).unwrap(), e.block(0, 1).unwrap().transpose());
        assert_eq!(e.block(1, 1).unwrap(), Matrix3::zeros());
        let same = [poses[0], poses[0]];
        assert!(matches!(
            build_from_poses(&same, None),
            Err(Error::CoincidentCenters)
        ));
    }

    #[test]
    fn axis_centers_eigenvalues_pair() {
        let poses: Vec<_> = [Vector3::x(), Vector3::y(), Vector3::z()]
            .into_iter()
            .map(|c| CameraPose::new(Rotation::identity(), c))
            .collect();
        let dense = dense_of(&poses);
        let mut explicit = DMatrix::zeros(9, 9);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    set_block3(&mut explicit, i, j, &(skew(&poses[i].center) - skew(&poses[j].center)));
                }
            }
        }
        assert!((&dense - &explicit).norm() < 1e-15);
        let (values, _) = sorted_eigen(&explicit);
        for k in 0..3 {
            assert!((values[k] + values[8 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_matrices_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 3..9 {
            let poses = random_poses(&mut rng, n);
            let e = build_from_poses(&poses, None).unwrap();
            e.validate().unwrap();
            for mode in [ConsistencyMode::Strict, ConsistencyMode::Scaled] {
                let r = check_essential_consistency(&e, mode, &CheckTolerances::default()).unwrap();
                assert!(r.fundamental_ok && r.essential_ok, "{r:?}");
                assert!(r.eigenvalue_pairing_residual < 1e-8);
                assert!(r.block_rotation_residual < 1e-8);
            }
        }
    }

    #[test]
    fn zeroed_block_breaks_fundamental() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let poses = random_poses(&mut rng, 4);
        let mut e = build_from_poses(&poses, None).unwrap();
        e.insert_unchecked(1, 3, Matrix3::zeros()).unwrap();
        let r = check_fundamental_consistency(&e, &CheckTolerances::default()).unwrap();
        assert!(!r.ok);
        assert!(!r.blocks_rank_two);
    }

    #[test]
    fn incomplete_matrix_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let poses = random_poses(&mut rng, 4);
        let e = build_from_poses(&poses, Some(&[(0, 1), (1, 2), (2, 3)])).unwrap();
        assert!(matches!(
            check_fundamental_consistency(&e, &CheckTolerances::default()),
            Err(Error::IncompleteMatrix { observed: 3, expected: 6 })
        ));
    }

    #[test]
    fn scaled_mode_accepts_congruence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let poses = random_poses(&mut rng, 5);
        let e = build_from_poses(&poses, None).unwrap();
        let alphas: Vec<f64> = (0..5)
            .map(|k| rng.random_range(0.3..3.0) * if k % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let scaled = e.congruence(&alphas).unwrap();
        let tol = CheckTolerances::default();
        assert!(check_essential_consistency(&scaled, ConsistencyMode::Scaled, &tol).unwrap().essential_ok);
        assert!(!check_essential_consistency(&scaled, ConsistencyMode::Strict, &tol).unwrap().essential_ok);
    }

    #[test]
    fn collinear_centers_fail_softly() {
        let poses: Vec<_> = (0..4)
            .map(|k| CameraPose::new(Rotation::identity(), Vector3::x() * k as f64))
            .collect();
        let e = build_from_poses(&poses, None).unwrap();
        let r = check_essential_consistency(&e, ConsistencyMode::Scaled, &CheckTolerances::default())
            .unwrap();
        assert!(!r.essential_ok);
        assert!(matches!(
            recover_poses(&e, &RecoverOptions::default()),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn spectral_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dense = dense_of(&random_poses(&mut rng, 3));
        let s = SpectralForm::from_symmetric(&dense).unwrap();
        let mut xy = DMatrix::zeros(9, 6);
        xy.columns_mut(0, 3).copy_from(&s.x);
        xy.columns_mut(3, 3).copy_from(&s.y);
        assert!((xy.transpose() * &xy - DMatrix::identity(6, 6)).norm() < 1e-10);
        assert!((s.reassemble() - &dense).norm() < 1e-10 * dense.norm());
        let f = spectral_to_svd(&s).unwrap();
        assert!((f.reassemble() - &dense).norm() < 1e-10 * dense.norm());
        let back = svd_to_spectral(&f);
        assert!((back.x - &s.x).norm() < 1e-12);
        assert!((back.y - &s.y).norm() < 1e-12);
    }

    #[test]
    fn psd_matrix_has_no_pairing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = DMatrix::from_fn(9, 9, |_, _| rng.sample::<f64, _>(StandardNormal));
        let psd = &a * a.transpose();
        let s = SpectralForm::from_symmetric(&psd).unwrap();
        assert!(matches!(spectral_to_svd(&s), Err(Error::Pairing { .. })));
    }

    #[test]
    fn decomposition_structure_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut poses = random_poses(&mut rng, 6);
        let mean = poses.iter().map(|p| p.center).sum::<Vector3<f64>>() / 6.0;
        for p in &mut poses {
            p.center -= mean;
        }
        let mut u = DMatrix::zeros(18, 3);
        let mut v = DMatrix::zeros(18, 3);
        for (i, p) in poses.iter().enumerate() {
            let rt = p.rotation.matrix().transpose();
            v.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&rt);
            u.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&(rt * skew(&p.center)));
        }
        assert!((v.transpose() * &u).norm() < 1e-9);
        let a = &u * v.transpose();
        assert!((&a + a.transpose() - dense_of(&poses)).norm() < 1e-9);
    }

    #[test]
    fn score_is_block_count_for_scaled_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dense = dense_of(&random_poses(&mut rng, 3));
        let s = SpectralForm::from_symmetric(&dense).unwrap();
        let scores = SignConfiguration::all().map(|c| block_rotation_score(&s.x, &s.y, c));
        let best = scores.iter().cloned().fold(f64::MIN, f64::max);
        assert!((best - 3.0).abs() < 1e-10);
        assert!(scores.iter().all(|&x| x > 0.0 && x <= 3.0 + 1e-12));
    }

    #[test]
    fn counterexample_properties() {
        for seed in 0..10 {
            let (e, report) = generate_counterexample(seed).unwrap();
            assert!(report.fundamental_ok);
            assert!(!report.essential_ok);
            assert!(report.eigenvalue_pairing_residual < 1e-8);
            assert!(report.sign_residuals.iter().all(|&r| r > 0.05));
            for (_, _, b) in e.observed() {
                let s = Svd3::new(b).sigma;
                assert!((s[0] - s[1]).abs() <= 1e-10 * s[0]);
            }
            let s = SpectralForm::from_symmetric(&e.to_dense().unwrap()).unwrap();
            let best = SignConfiguration::all()
                .map(|c| block_rotation_score(&s.x, &s.y, c))
                .into_iter()
                .fold(f64::MIN, f64::max);
            assert!(best < 3.0 - 0.01);
        }
    }

    #[test]
    fn negated_matrix_recovers_same_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let poses = random_poses(&mut rng, 5);
        let e = build_from_poses(&poses, None).unwrap();
        let neg = e.scaled(-1.0);
        let opts = RecoverOptions::default();
        for m in [&e, &neg] {
            let rec = recover_poses(m, &opts).unwrap();
            assert_relative_geometry(&poses, &rec);
        }
    }

    /// Every relative essential matrix of `rec` is a multiple of the truth.
    fn assert_relative_geometry(truth: &[CameraPose], rec: &[CameraPose]) {
        for i in 0..truth.len() {
            for j in i + 1..truth.len() {
                let a = relative_essential(&truth[i], &truth[j]).unwrap().into_inner();
                let b = relative_essential(&rec[i], &rec[j]).unwrap().into_inner();
                let a = a / a.norm();
                let b = b / b.norm();
                assert!((a - b).norm().min((a + b).norm()) < 1e-8);
            }
        }
    }

    #[test]
    fn strict_recovery_reproduces_matrix_up_to_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let poses = random_poses(&mut rng, 6);
        let e = build_from_poses(&poses, None).unwrap();
        let opts = RecoverOptions {
            mode: ConsistencyMode::Strict,
            ..RecoverOptions::default()
        };
        let rec = recover_poses(&e, &opts).unwrap();
        let rebuilt = build_from_poses(&rec, None).unwrap().to_dense().unwrap();
        let dense = e.to_dense().unwrap();
        let k = rebuilt.dot(&dense) / rebuilt.norm_squared();
        assert!((rebuilt * k - &dense).norm() < 1e-9 * dense.norm());
    }

    #[test]
    fn similarity_leaves_consistency_intact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let poses = random_poses(&mut rng, 4);
        let s = Similarity::new(-2.0, Rotation::random(&mut rng), Vector3::new(1.0, 0.0, 3.0)).unwrap();
        let moved: Vec<_> = poses.iter().map(|p| apply_similarity(&s, p)).collect();
        let e = build_from_poses(&moved, None).unwrap();
        let r = check_essential_consistency(&e, ConsistencyMode::Scaled, &CheckTolerances::default())
            .unwrap();
        assert!(r.essential_ok);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn condition_two_agrees_with_condition_three(seed in any::<u64>(), n in 3usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dense = dense_of(&random_poses(&mut rng, n));
            let s = SpectralForm::from_symmetric(&dense).unwrap();
            for c in SignConfiguration::all() {
                let direct = scaled_block_residual(&s.factors(c).1) < 1e-6;
                let via_svd = spectral_to_svd(&s.signed(c))
                    .map(|f| scaled_block_residual(&f.v_hat) < 1e-6)
                    .unwrap_or(false);
                prop_assert_eq!(direct, via_svd);
            }
        }

        #[test]
        fn lemma_round_trip(seed in any::<u64>(), n in 3usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dense = dense_of(&random_poses(&mut rng, n));
            let s = SpectralForm::from_symmetric(&dense).unwrap();
            let f = spectral_to_svd(&s).unwrap();
            let back = svd_to_spectral(&f);
            prop_assert!((back.reassemble() - f.reassemble()).norm() < 1e-11 * dense.norm().max(1.0));
        }
    }
}
