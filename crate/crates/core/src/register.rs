//! Per-triplet pose extraction, stitching over the triplet graph and
//! gauge-free comparison with reference poses.

use std::collections::VecDeque;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;

use crate::cover::TripletCover;
use crate::error::{Error, Result};
use crate::geom::{apply_similarity, similarity_from_two_pose_pairs, CameraPose, Rotation, Similarity};
use crate::nview::{descale, recover_poses_from_matrix, MultiviewEssential, RecoverOptions};

/// Largest `|R_a - R_b|_F` between the two shared-camera rotation estimates
/// before two triplets are declared to describe different configurations.
pub const CONFIGURATION_TOL: f64 = 1.0;

const DESCALE_PASSES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TripletPoses {
    pub triplet: usize,
    pub views: [usize; 3],
    /// Poses in the triplet's own frame, in the order of `views`.
    pub poses: [CameraPose; 3],
}

impl TripletPoses {
    pub fn pose_of(&self, view: usize) -> Option<&CameraPose> {
        self.views.iter().position(|&v| v == view).map(|k| &self.poses[k])
    }
}

/// Poses of a solved triplet matrix. Per-view scales are divided out first so
/// that any congruence-scaled consistent input yields the same geometry.
pub fn extract_triplet_poses(
    e9: &DMatrix<f64>,
    triplet: usize,
    views: [usize; 3],
    opts: &RecoverOptions,
) -> Result<TripletPoses> {
    let (m, _) = descale(e9, DESCALE_PASSES)?;
    let poses = recover_poses_from_matrix(&m, opts)?;
    Ok(TripletPoses {
        triplet,
        views,
        poses: [poses[0], poses[1], poses[2]],
    })
}

/// Extracts every triplet of `cover` from the blocks of `e`, in parallel.
pub fn extract_all(e: &MultiviewEssential, cover: &TripletCover, opts: &RecoverOptions) -> Result<Vec<TripletPoses>> {
    cover
        .triplets
        .par_iter()
        .enumerate()
        .map(|(k, t)| {
            let m = e.submatrix(&t.views)?;
            extract_triplet_poses(&m, k, t.views, opts)
        })
        .collect()
}

/// Disagreement between two registered triplets on one shared camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeResidual {
    pub triplets: (usize, usize),
    pub view: usize,
    /// `|R_a - R_b|_F`.
    pub rotation: f64,
    pub center: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalReconstruction {
    pub poses: Vec<Option<CameraPose>>,
    pub anchor: usize,
    pub residuals: Vec<EdgeResidual>,
}

impl GlobalReconstruction {
    pub fn posed_count(&self) -> usize {
        self.poses.iter().filter(|p| p.is_some()).count()
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().map(|r| r.rotation.max(r.center)).fold(0.0, f64::max)
    }
}

/// First two views of `a` also in `b`; triplet graph edges guarantee two.
fn shared_views(a: &[usize; 3], b: &[usize; 3]) -> [usize; 2] {
    let mut it = a.iter().copied().filter(|v| b.contains(v));
    [it.next().expect("two shared views"), it.next().expect("two shared views")]
}

/// Stitches from the triplet with the lowest rotation loop score.
pub fn stitch(cover: &TripletCover, triplets: &[TripletPoses], n: usize) -> Result<GlobalReconstruction> {
    let anchor = cover
        .triplets
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.scores.rotation.total_cmp(&b.1.scores.rotation).then(a.0.cmp(&b.0)))
        .map(|(k, _)| k)
        .ok_or_else(|| Error::EmptyCover {
            reason: "nothing to stitch".into(),
        })?;
    stitch_from(cover, triplets, n, anchor)
}

/// Breadth-first registration of every triplet into the frame of `anchor`.
pub fn stitch_from(
    cover: &TripletCover,
    triplets: &[TripletPoses],
    n: usize,
    anchor: usize,
) -> Result<GlobalReconstruction> {
    let m = cover.triplets.len();
    if triplets.len() != m {
        return Err(Error::InvalidConfig(format!("{} triplet pose sets for {m} triplets", triplets.len())));
    }
    if anchor >= m {
        return Err(Error::IndexOutOfRange { index: anchor, n: m });
    }
    if !cover.is_connected() {
        return Err(Error::DisconnectedGraph);
    }
    for t in triplets {
        if let Some(&v) = t.views.iter().find(|&&v| v >= n) {
            return Err(Error::IndexOutOfRange { index: v, n });
        }
    }
    let mut placed: Vec<Option<[CameraPose; 3]>> = vec![None; m];
    let mut poses: Vec<Option<CameraPose>> = vec![None; n];
    let assign = |t: &TripletPoses, registered: [CameraPose; 3], poses: &mut Vec<Option<CameraPose>>| {
        for (v, p) in t.views.iter().zip(registered) {
            poses[*v].get_or_insert(p);
        }
    };
    placed[anchor] = Some(triplets[anchor].poses);
    assign(&triplets[anchor], triplets[anchor].poses, &mut poses);
    let mut queue = VecDeque::from([anchor]);
    while let Some(k) = queue.pop_front() {
        let here = placed[k].expect("queued triplets are placed");
        for next in cover.neighbours(k) {
            if placed[next].is_some() {
                continue;
            }
            let shared = shared_views(&cover.triplets[k].views, &cover.triplets[next].views);
            let pick = |t: &TripletPoses, frame: &[CameraPose; 3], v: usize| {
                frame[t.views.iter().position(|&x| x == v).expect("shared view")]
            };
            let dst = [pick(&triplets[k], &here, shared[0]), pick(&triplets[k], &here, shared[1])];
            let local = &triplets[next];
            let src = [pick(local, &local.poses, shared[0]), pick(local, &local.poses, shared[1])];
            let sim = similarity_from_two_pose_pairs(&src, &dst, CONFIGURATION_TOL).map_err(|err| match err {
                Error::InconsistentPair { .. } => Error::ConfigurationMismatch {
                    first: k,
                    second: next,
                    shared,
                },
                other => other,
            })?;
            let registered = local.poses.map(|p| apply_similarity(&sim, &p));
            placed[next] = Some(registered);
            assign(local, registered, &mut poses);
            queue.push_back(next);
        }
    }
    let mut residuals = Vec::new();
    for &(a, b) in &cover.triplet_edges {
        let (pa, pb) = (placed[a].expect("connected"), placed[b].expect("connected"));
        for v in shared_views(&cover.triplets[a].views, &cover.triplets[b].views) {
            let x = pa[triplets[a].views.iter().position(|&w| w == v).expect("view")];
            let y = pb[triplets[b].views.iter().position(|&w| w == v).expect("view")];
            residuals.push(EdgeResidual {
                triplets: (a, b),
                view: v,
                rotation: (x.rotation.matrix() - y.rotation.matrix()).norm(),
                center: (x.center - y.center).norm(),
            });
        }
    }
    Ok(GlobalReconstruction {
        poses,
        anchor,
        residuals,
    })
}

/// Gauge-free comparison of estimated poses with a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Maps estimated poses onto the reference frame.
    pub similarity: Similarity,
    /// Views present in both, ascending.
    pub views: Vec<usize>,
    /// `|R R_hat_i - R_i|_F` per view.
    pub rotation_frobenius: Vec<f64>,
    /// Angle of `(R R_hat_i)^T R_i` in degrees, per view.
    pub rotation_degrees: Vec<f64>,
    pub center_errors: Vec<f64>,
    /// RMS distance of the reference centers from their centroid.
    pub reference_scale: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let h = s.len() / 2;
    if s.len() % 2 == 1 {
        s[h]
    } else {
        0.5 * (s[h - 1] + s[h])
    }
}

impl Alignment {
    pub fn mean_rotation_frobenius(&self) -> f64 {
        mean(&self.rotation_frobenius)
    }

    pub fn mean_rotation_degrees(&self) -> f64 {
        mean(&self.rotation_degrees)
    }

    pub fn median_rotation_degrees(&self) -> f64 {
        median(&self.rotation_degrees)
    }

    pub fn max_rotation_degrees(&self) -> f64 {
        self.rotation_degrees.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_center_error(&self) -> f64 {
        mean(&self.center_errors)
    }

    pub fn median_center_error(&self) -> f64 {
        median(&self.center_errors)
    }

    /// Largest center error divided by [`Alignment::reference_scale`].
    pub fn max_relative_center_error(&self) -> f64 {
        self.center_errors.iter().copied().fold(0.0, f64::max) / self.reference_scale
    }
}

/// Chordal L1 median of rotations by Weiszfeld iteration, projected to SO(3).
/// Data points are tried as candidates too, so a strict majority of identical
/// rotations is returned exactly.
fn chordal_median(rs: &[Matrix3<f64>]) -> Matrix3<f64> {
    let cost = |m: &Matrix3<f64>| rs.iter().map(|r| (r - m).norm()).sum::<f64>();
    let mut m = Rotation::project(&rs.iter().sum()).matrix().to_owned();
    for _ in 0..100 {
        let mut num = Matrix3::zeros();
        let mut den = 0.0;
        for r in rs {
            let d = (r - m).norm().max(1e-12);
            num += r / d;
            den += 1.0 / d;
        }
        let next = num / den;
        let step = (next - m).norm();
        m = next;
        if step < 1e-15 {
            break;
        }
    }
    let mut best = *Rotation::project(&m).matrix();
    let mut best_cost = cost(&best);
    for r in rs {
        let c = cost(r);
        if c <= best_cost {
            best = *r;
            best_cost = c;
        }
    }
    best
}

/// Best similarity from estimated onto reference poses: the rotation is the
/// chordal L1 median of `R_i R_hat_i^T`, then signed scale and translation
/// are least squares over centers.
pub fn align_to_reference(est: &[Option<CameraPose>], reference: &[CameraPose]) -> Result<Alignment> {
    if est.len() != reference.len() {
        return Err(Error::InsufficientOverlap {
            reason: format!("{} estimated views against {} reference views", est.len(), reference.len()),
        });
    }
    let views: Vec<usize> = (0..est.len()).filter(|&i| est[i].is_some()).collect();
    if views.len() < 3 {
        return Err(Error::InsufficientOverlap {
            reason: format!("{} common views", views.len()),
        });
    }
    let e: Vec<CameraPose> = views.iter().map(|&i| est[i].expect("filtered")).collect();
    let r: Vec<CameraPose> = views.iter().map(|&i| reference[i]).collect();
    let k = views.len() as f64;
    let ref_mean: Vector3<f64> = r.iter().map(|p| p.center).sum::<Vector3<f64>>() / k;
    let est_mean: Vector3<f64> = e.iter().map(|p| p.center).sum::<Vector3<f64>>() / k;
    let mut cov = Matrix3::zeros();
    for p in &r {
        let d = p.center - ref_mean;
        cov += d * d.transpose();
    }
    let spread = crate::geom::Svd3::new(&cov).sigma;
    if !(spread[1] > 1e-12 * spread[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::InsufficientOverlap {
            reason: "common reference centers are collinear".into(),
        });
    }
    let reference_scale = (spread.sum() / k).sqrt();
    let rel: Vec<Matrix3<f64>> = e
        .iter()
        .zip(&r)
        .map(|(a, b)| b.rotation.matrix() * a.rotation.matrix().transpose())
        .collect();
    let rotation = Rotation::new_unchecked(chordal_median(&rel));
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in e.iter().zip(&r) {
        let x = rotation * (a.center - est_mean);
        num += x.dot(&(b.center - ref_mean));
        den += x.norm_squared();
    }
    if !(den > 0.0) {
        return Err(Error::InsufficientOverlap {
            reason: "estimated centers coincide".into(),
        });
    }
    let scale = num / den;
    let translation = ref_mean - scale * (rotation * est_mean);
    let similarity = Similarity::new(scale, rotation, translation).map_err(|_| Error::InsufficientOverlap {
        reason: "estimated centers are uncorrelated with the reference".into(),
    })?;
    let mut rotation_frobenius = Vec::with_capacity(e.len());
    let mut rotation_degrees = Vec::with_capacity(e.len());
    let mut center_errors = Vec::with_capacity(e.len());
    for (a, b) in e.iter().zip(&r) {
        let mapped = apply_similarity(&similarity, a);
        rotation_frobenius.push((mapped.rotation.matrix() - b.rotation.matrix()).norm());
        rotation_degrees.push(mapped.rotation.angle_to(&b.rotation).to_degrees());
        center_errors.push((mapped.center - b.center).norm());
    }
    Ok(Alignment {
        similarity,
        views,
        rotation_frobenius,
        rotation_degrees,
        center_errors,
        reference_scale,
    })
}
