//! Small fixed-size geometry: rotations, poses, essential blocks and similarities.

use std::cmp::Ordering;
use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Bound on `|R^T R - I|_F` accepted by [`Rotation::new`].
pub const ORTHOGONALITY_TOL: f64 = 1e-8;
/// Bound on `|M + M^T|_F` accepted by [`unskew`], relative to `max(1, |M|_F)`.
pub const ANTISYMMETRY_TOL: f64 = 1e-8;
/// Relative singular value floor for [`project_to_scaled_rotation`].
pub const SINGULAR_TOL: f64 = 1e-12;
/// Relative shape tolerance for essential blocks.
pub const ESSENTIAL_TOL: f64 = 1e-8;

/// Singular value decomposition of a 3x3 matrix with values sorted descending.
#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub sigma: Vector3<f64>,
    pub v: Matrix3<f64>,
}

impl Svd3 {
    pub fn new(m: &Matrix3<f64>) -> Svd3 {
        let svd = m.svd(true, true);
        let u = svd.u.expect("requested U");
        let vt = svd.v_t.expect("requested V^T");
        let s = svd.singular_values;
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(Ordering::Equal));
        let mut out = Svd3 {
            u: Matrix3::zeros(),
            sigma: Vector3::zeros(),
            v: Matrix3::zeros(),
        };
        for (k, &i) in idx.iter().enumerate() {
            out.u.set_column(k, &u.column(i));
            out.v.set_column(k, &vt.row(i).transpose());
            out.sigma[k] = s[i];
        }
        out
    }
}

/// Nearest rotation in Frobenius norm.
pub(crate) fn nearest_rotation_matrix(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = Svd3::new(m);
    let d = (svd.u * svd.v.transpose()).determinant().signum();
    svd.u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * svd.v.transpose()
}

fn angle_of(m: &Matrix3<f64>) -> f64 {
    let axis = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    ) * 0.5;
    axis.norm().atan2((m.trace() - 1.0) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn new(m: Matrix3<f64>) -> Result<Rotation> {
        let orthogonality = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if !(orthogonality <= ORTHOGONALITY_TOL) || det <= 0.0 {
            return Err(Error::InvalidRotation { orthogonality, det });
        }
        Ok(Rotation(m))
    }

    /// Wraps `m` without validation. Callers guarantee it is a rotation.
    pub(crate) fn new_unchecked(m: Matrix3<f64>) -> Rotation {
        Rotation(m)
    }

    pub fn identity() -> Rotation {
        Rotation(Matrix3::identity())
    }

    /// Nearest element of SO(3) to `m`.
    pub fn project(m: &Matrix3<f64>) -> Rotation {
        Rotation(nearest_rotation_matrix(m))
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Rotation {
        Rotation::from_rotation_vector(&(axis.normalize() * angle))
    }

    pub fn from_rotation_vector(w: &Vector3<f64>) -> Rotation {
        Rotation(*nalgebra::Rotation3::new(*w).matrix())
    }

    /// Uniformly distributed on SO(3).
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
        let q = Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let q = UnitQuaternion::from_quaternion(q);
        Rotation(*q.to_rotation_matrix().matrix())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        angle_of(&self.0)
    }

    /// Geodesic distance to `other` in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        angle_of(&(self.0.transpose() * other.0))
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Rotation,
    pub center: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Rotation, center: Vector3<f64>) -> CameraPose {
        CameraPose { rotation, center }
    }
}

/// Rank-2 3x3 matrix with two equal nonzero singular values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialBlock(Matrix3<f64>);

fn essential_shape_ok(s: &Vector3<f64>, tol: f64) -> bool {
    s[0] > 0.0 && s[2] <= tol * s[0] && (s[0] - s[1]) <= tol * s[0]
}

impl EssentialBlock {
    pub fn new(m: Matrix3<f64>) -> Result<EssentialBlock> {
        let s = Svd3::new(&m).sigma;
        if !m.iter().all(|x| x.is_finite()) || !essential_shape_ok(&s, ESSENTIAL_TOL) {
            return Err(Error::NotEssential {
                singular_values: [s[0], s[1], s[2]],
            });
        }
        Ok(EssentialBlock(m))
    }

    /// Closest essential matrix to `m`, keeping the mean of the two leading singular values.
    pub fn nearest(m: &Matrix3<f64>) -> Result<EssentialBlock> {
        let p = project_to_essential(m);
        if p.norm() == 0.0 || !p.iter().all(|x| x.is_finite()) {
            let s = Svd3::new(m).sigma;
            return Err(Error::DegenerateEssential {
                singular_values: [s[0], s[1], s[2]],
            });
        }
        Ok(EssentialBlock(p))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix3<f64> {
        self.0
    }

    pub fn singular_values(&self) -> [f64; 3] {
        let s = Svd3::new(&self.0).sigma;
        [s[0], s[1], s[2]]
    }
}

/// Replaces the singular values of `m` by `(s, s, 0)` with `s` the mean of the two largest.
pub fn project_to_essential(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = Svd3::new(m);
    let s = 0.5 * (svd.sigma[0] + svd.sigma[1]);
    svd.u * Matrix3::from_diagonal(&Vector3::new(s, s, 0.0)) * svd.v.transpose()
}

/// Relative pose of camera b seen from camera a, up to translation scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeConfiguration {
    pub rotation: Rotation,
    /// Unit vector.
    pub direction: Vector3<f64>,
}

impl RelativeConfiguration {
    /// Two poses realizing this configuration: a at the origin with identity rotation.
    pub fn poses(&self) -> [CameraPose; 2] {
        [
            CameraPose::new(Rotation::identity(), self.direction),
            CameraPose::new(self.rotation, Vector3::zeros()),
        ]
    }

    pub fn essential(&self) -> Matrix3<f64> {
        skew(&self.direction) * self.rotation.matrix()
    }
}

/// `s = scale`, applied as `x -> s R x + t`; `scale` may be negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn new(scale: f64, rotation: Rotation, translation: Vector3<f64>) -> Result<Similarity> {
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "similarity scale must be finite and nonzero, got {scale}"
            )));
        }
        Ok(Similarity {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Similarity {
        Similarity {
            scale: 1.0,
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation.matrix() * x) + self.translation
    }

    pub fn inverse(&self) -> Similarity {
        let rt = self.rotation.transpose();
        Similarity {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt.matrix() * self.translation) / self.scale,
        }
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &Similarity) -> Similarity {
        Similarity {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply_point(&other.translation),
        }
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

pub fn unskew(m: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let residual = (m + m.transpose()).norm();
    if !(residual <= ANTISYMMETRY_TOL * m.norm().max(1.0)) {
        return Err(Error::Asymmetry { residual });
    }
    Ok(unskew_part(m))
}

/// Vector of the antisymmetric part of `m`, without validation.
pub(crate) fn unskew_part(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    ) * 0.5
}

/// Nearest `s R` with `R` in SO(3); the scale is negative when `det M < 0`.
pub fn project_to_scaled_rotation(m: &Matrix3<f64>) -> Result<(Rotation, f64)> {
    let sigma = Svd3::new(m).sigma;
    if !(sigma[2] > SINGULAR_TOL * sigma[0]) {
        return Err(Error::SingularInput { smallest: sigma[2] });
    }
    let (r, s) = nearest_scaled_rotation(m);
    Ok((Rotation(r), s))
}

/// Unchecked variant of [`project_to_scaled_rotation`] used by the solver.
pub(crate) fn nearest_scaled_rotation(m: &Matrix3<f64>) -> (Matrix3<f64>, f64) {
    let svd = Svd3::new(m);
    let mut r = svd.u * svd.v.transpose();
    let mut s = svd.sigma.mean();
    if r.determinant() < 0.0 {
        r = -r;
        s = -s;
    }
    (r, s)
}

fn coincident(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    (a - b).norm() <= 1e-12 * (1.0 + a.norm().max(b.norm()))
}

/// `R_a^T ([t_a]x - [t_b]x) R_b`.
pub fn relative_essential(a: &CameraPose, b: &CameraPose) -> Result<EssentialBlock> {
    if coincident(&a.center, &b.center) {
        return Err(Error::CoincidentCenters);
    }
    Ok(EssentialBlock(relative_essential_raw(a, b)))
}

pub(crate) fn relative_essential_raw(a: &CameraPose, b: &CameraPose) -> Matrix3<f64> {
    a.rotation.matrix().transpose() * skew(&(a.center - b.center)) * b.rotation.matrix()
}

fn lex_cmp(a: &Matrix3<f64>, b: &Matrix3<f64>) -> Ordering {
    for r in 0..3 {
        for c in 0..3 {
            match a[(r, c)].partial_cmp(&b[(r, c)]) {
                Some(Ordering::Equal) | None => {}
                Some(o) => return o,
            }
        }
    }
    Ordering::Equal
}

/// The two relative configurations reproducing `e` with its sign, ordered
/// lexicographically by rotation entries.
pub fn decompose_essential(e: &EssentialBlock) -> Result<[RelativeConfiguration; 2]> {
    let svd = Svd3::new(e.matrix());
    if !essential_shape_ok(&svd.sigma, 1e-6) {
        return Err(Error::DegenerateEssential {
            singular_values: [svd.sigma[0], svd.sigma[1], svd.sigma[2]],
        });
    }
    let mut u = svd.u;
    let mut v = svd.v;
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v.determinant() < 0.0 {
        v.column_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t: Vector3<f64> = u.column(2).into();
    let mut out = [w, w.transpose()].map(|w| {
        let r = u * w * v.transpose();
        let sign = (skew(&t) * r).dot(e.matrix()).signum();
        RelativeConfiguration {
            rotation: Rotation(r),
            direction: t * if sign < 0.0 { -1.0 } else { 1.0 },
        }
    });
    out.sort_by(|a, b| lex_cmp(a.rotation.matrix(), b.rotation.matrix()));
    Ok(out)
}

/// Maps a camera through `S`: center `s R c + t`, orientation `R R_p`.
pub fn apply_similarity(s: &Similarity, p: &CameraPose) -> CameraPose {
    CameraPose {
        rotation: s.rotation * p.rotation,
        center: s.apply_point(&p.center),
    }
}

/// The similarity taking `src` onto `dst`. The scale is signed.
pub fn similarity_from_two_pose_pairs(
    src: &[CameraPose; 2],
    dst: &[CameraPose; 2],
    rotation_tol: f64,
) -> Result<Similarity> {
    if coincident(&src[0].center, &src[1].center) || coincident(&dst[0].center, &dst[1].center) {
        return Err(Error::CollinearDegenerate);
    }
    let r0 = dst[0].rotation.matrix() * src[0].rotation.matrix().transpose();
    let r1 = dst[1].rotation.matrix() * src[1].rotation.matrix().transpose();
    let disagreement = (r0 - r1).norm();
    if !(disagreement <= rotation_tol) {
        return Err(Error::InconsistentPair { disagreement });
    }
    let rotation = Rotation::project(&(r0 + r1));
    let ds = rotation.matrix() * (src[1].center - src[0].center);
    let dd = dst[1].center - dst[0].center;
    let scale = dd.dot(&ds) / ds.norm_squared();
    let src_mean = 0.5 * (src[0].center + src[1].center);
    let dst_mean = 0.5 * (dst[0].center + dst[1].center);
    let translation = dst_mean - scale * (rotation.matrix() * src_mean);
    Similarity::new(scale, rotation, translation).map_err(|_| Error::CollinearDegenerate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        let c = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        CameraPose::new(Rotation::random(rng), c * 3.0)
    }

    #[test]
    fn skew_examples() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(
            skew(&Vector3::new(1.0, 0.0, 0.0)),
            Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
        );
        let v = Vector3::new(1.0, 2.0, 3.0);
        let m = skew(&v);
        assert_eq!(m + m.transpose(), Matrix3::zeros());
        assert_eq!(m * v, Vector3::zeros());
    }

    #[test]
    fn unskew_examples() {
        assert_eq!(unskew(&Matrix3::zeros()).unwrap(), Vector3::zeros());
        let v = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(unskew(&skew(&v)).unwrap(), v);
        let noisy = skew(&v) + Matrix3::identity() * 1e-12;
        assert_relative_eq!(unskew(&noisy).unwrap(), v, epsilon = 1e-9);
        assert!(matches!(
            unskew(&Matrix3::identity()),
            Err(Error::Asymmetry { .. })
        ));
    }

    #[test]
    fn scaled_rotation_examples() {
        let (r, s) = project_to_scaled_rotation(&(Matrix3::identity() * 2.0)).unwrap();
        assert_relative_eq!(*r.matrix(), Matrix3::identity(), epsilon = 1e-14);
        assert_relative_eq!(s, 2.0, epsilon = 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Rotation::random(&mut rng);
        let (r, s) = project_to_scaled_rotation(q.matrix()).unwrap();
        assert_relative_eq!(*r.matrix(), *q.matrix(), epsilon = 1e-12);
        assert_relative_eq!(s, 1.0, epsilon = 1e-12);

        let (r, s) = project_to_scaled_rotation(&(q.matrix() * -3.0)).unwrap();
        assert_relative_eq!(*r.matrix(), *q.matrix(), epsilon = 1e-12);
        assert_relative_eq!(s, -3.0, epsilon = 1e-12);

        let singular = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
        assert!(matches!(
            project_to_scaled_rotation(&singular),
            Err(Error::SingularInput { .. })
        ));
    }

    #[test]
    fn rotation_validation() {
        assert!(Rotation::new(Matrix3::identity()).is_ok());
        assert!(Rotation::new(-Matrix3::<f64>::identity()).is_err());
        assert!(Rotation::new(Matrix3::identity() * 1.001).is_err());
        let r = Rotation::from_axis_angle(&Vector3::z(), 0.3);
        assert_relative_eq!(r.angle(), 0.3, epsilon = 1e-14);
        let tiny = Rotation::from_axis_angle(&Vector3::x(), 1e-9);
        assert_relative_eq!(tiny.angle(), 1e-9, epsilon = 1e-20);
        let flip = Rotation::from_axis_angle(&Vector3::y(), std::f64::consts::PI);
        assert_relative_eq!(flip.angle(), std::f64::consts::PI, epsilon = 1e-12);
    }

    #[test]
    fn relative_essential_examples() {
        let a = CameraPose::new(Rotation::identity(), Vector3::zeros());
        let b = CameraPose::new(Rotation::identity(), Vector3::x());
        let e = relative_essential(&a, &b).unwrap();
        assert_eq!(
            *e.matrix(),
            Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0)
        );
        assert!(matches!(
            relative_essential(&a, &a),
            Err(Error::CoincidentCenters)
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let e = relative_essential(&a, &b).unwrap();
            let d = (a.center - b.center).norm();
            let s = e.singular_values();
            assert_relative_eq!(s[0], d, epsilon = 1e-10 * d);
            assert_relative_eq!(s[1], d, epsilon = 1e-10 * d);
            assert!(s[2] < 1e-10 * d);
            let et = relative_essential(&b, &a).unwrap();
            assert_relative_eq!(*et.matrix(), e.matrix().transpose(), epsilon = 1e-12);
            assert!(EssentialBlock::new(*e.matrix()).is_ok());
        }
    }

    #[test]
    fn essential_block_rejects_bad_shapes() {
        assert!(EssentialBlock::new(Matrix3::identity()).is_err());
        assert!(EssentialBlock::new(Matrix3::zeros()).is_err());
        let unequal = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 0.0));
        assert!(EssentialBlock::new(unequal).is_err());
        let near = EssentialBlock::nearest(&unequal).unwrap();
        assert_eq!(near.singular_values(), [1.5, 1.5, 0.0]);
    }

    #[test]
    fn decompose_round_trip_matches_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let e = relative_essential(&a, &b).unwrap();
            let configs = decompose_essential(&e).unwrap();
            let r_true = a.rotation.transpose() * b.rotation;
            let t_true = (a.rotation.matrix().transpose() * (a.center - b.center)).normalize();
            let hit = configs.iter().any(|c| {
                (c.rotation.matrix() - r_true.matrix()).norm() < 1e-9
                    && (c.direction - t_true).norm() < 1e-9
            });
            assert!(hit);
            let en = e.matrix() / e.matrix().norm();
            for c in &configs {
                let [p, q] = c.poses();
                let r = relative_essential(&p, &q).unwrap();
                assert!((r.matrix() / r.matrix().norm() - en).norm() < 1e-10);
            }
            assert_ne!(
                lex_cmp(configs[0].rotation.matrix(), configs[1].rotation.matrix()),
                Ordering::Greater
            );
        }
    }

    #[test]
    fn decompose_cross_product_gives_two() {
        let e = EssentialBlock::new(skew(&Vector3::x())).unwrap();
        let configs = decompose_essential(&e).unwrap();
        assert_eq!(configs.len(), 2);
        for c in &configs {
            assert!((c.essential() - e.matrix()).norm() < 1e-12);
        }
        assert!((configs[0].direction + configs[1].direction).norm() < 1e-12);
    }

    #[test]
    fn similarity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pose(&mut rng);
        assert_eq!(apply_similarity(&Similarity::identity(), &p), p);

        let s = Similarity::new(2.0, Rotation::identity(), Vector3::zeros()).unwrap();
        let q = CameraPose::new(p.rotation, Vector3::x());
        let mapped = apply_similarity(&s, &q);
        assert_eq!(mapped.center, Vector3::new(2.0, 0.0, 0.0));
        assert_eq!(mapped.rotation, q.rotation);

        let s = Similarity::new(-1.7, Rotation::random(&mut rng), Vector3::new(1.0, 2.0, 3.0))
            .unwrap();
        let back = apply_similarity(&s.inverse(), &apply_similarity(&s, &p));
        assert_relative_eq!(back.center, p.center, epsilon = 1e-12);
        assert_relative_eq!(*back.rotation.matrix(), *p.rotation.matrix(), epsilon = 1e-12);

        let a = random_pose(&mut rng);
        let b = random_pose(&mut rng);
        let e = relative_essential(&a, &b).unwrap();
        let e2 = relative_essential(&apply_similarity(&s, &a), &apply_similarity(&s, &b)).unwrap();
        assert_relative_eq!(*e2.matrix(), e.matrix() * s.scale, epsilon = 1e-10);

        assert!(Similarity::new(0.0, Rotation::identity(), Vector3::zeros()).is_err());
    }

    #[test]
    fn similarity_from_pairs_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = [random_pose(&mut rng), random_pose(&mut rng)];
        let id = similarity_from_two_pose_pairs(&src, &src, 1e-6).unwrap();
        assert_relative_eq!(id.scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!(*id.rotation.matrix(), Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(id.translation, Vector3::zeros(), epsilon = 1e-12);

        let s = Similarity::new(0.4, Rotation::random(&mut rng), Vector3::new(0.0, 5.0, 1.0))
            .unwrap();
        let dst = src.map(|p| apply_similarity(&s, &p));
        let got = similarity_from_two_pose_pairs(&src, &dst, 1e-6).unwrap();
        let gap = (dst[1].center - dst[0].center).norm() / (src[1].center - src[0].center).norm();
        assert_relative_eq!(got.scale, gap, epsilon = 1e-12);

        let mut bad = dst;
        bad[1].rotation = bad[1].rotation * Rotation::from_axis_angle(&Vector3::z(), 0.5);
        assert!(matches!(
            similarity_from_two_pose_pairs(&src, &bad, 1e-3),
            Err(Error::InconsistentPair { .. })
        ));
        let same = [src[0], src[0]];
        assert!(matches!(
            similarity_from_two_pose_pairs(&same, &dst, 1e-3),
            Err(Error::CollinearDegenerate)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn skew_is_antisymmetric(x in -1e3..1e3f64, y in -1e3..1e3f64, z in -1e3..1e3f64) {
            let v = Vector3::new(x, y, z);
            let m = skew(&v);
            prop_assert_eq!(m.transpose(), -m);
            prop_assert!((m * v).norm() <= 1e-9 * (1.0 + v.norm_squared()));
            prop_assert_eq!(unskew(&m).unwrap(), v);
        }

        #[test]
        fn decompose_then_rebuild(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let e = relative_essential(&a, &b).unwrap();
            let en = e.matrix() / e.matrix().norm();
            for c in decompose_essential(&e).unwrap() {
                let [p, q] = c.poses();
                let r = relative_essential(&p, &q).unwrap();
                prop_assert!((r.matrix() / r.matrix().norm() - en).norm() < 1e-9);
            }
        }

        #[test]
        fn scaled_rotation_is_exact(seed in any::<u64>(), alpha in prop_oneof![-50.0..-1e-3f64, 1e-3..50.0f64]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = Rotation::random(&mut rng);
            let (q, s) = project_to_scaled_rotation(&(r.matrix() * alpha)).unwrap();
            prop_assert!((q.matrix() - r.matrix()).norm() < 1e-12);
            prop_assert!((s - alpha).abs() < 1e-12 * alpha.abs());
        }

        #[test]
        fn similarity_round_trip(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = [random_pose(&mut rng), random_pose(&mut rng)];
            let scale = rng.random_range(0.1..10.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0);
            let s = Similarity::new(scale, Rotation::random(&mut rng), t).unwrap();
            let dst = src.map(|p| apply_similarity(&s, &p));
            let got = similarity_from_two_pose_pairs(&src, &dst, 1e-6).unwrap();
            prop_assert!((got.scale - s.scale).abs() < 1e-10 * s.scale.abs().max(1.0));
            prop_assert!((got.rotation.matrix() - s.rotation.matrix()).norm() < 1e-10);
            prop_assert!((got.translation - s.translation).norm() < 1e-10 * (1.0 + t.norm()));
        }
    }
}
