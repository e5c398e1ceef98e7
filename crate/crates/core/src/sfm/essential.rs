//! Two-view geometry: normalized eight-point essential estimation inside
//! RANSAC, pose recovery with the cheirality test, and initial-pair
//! selection for the incremental reconstruction.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{CameraIntrinsics, CameraPose, FeatureMatchSet, Landmark};
use crate::sfm::triangulate::triangulate_two_view_normalized;
use crate::sfm::{Reconstruction, RansacConfig, SfmConfig, SfmError, SfmObservation};

/// One track seen in both frames of a candidate pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewMatch {
    pub track_id: u64,
    pub first: Vector2<f64>,
    pub second: Vector2<f64>,
    /// Detector box area at the second frame (seeds the landmark's box).
    pub area: f64,
}

/// Homogeneous normalized coordinates of a pixel position.
#[cfg(test)]
fn normalized(intr: &CameraIntrinsics, p: Vector2<f64>) -> Vector3<f64> {
    let n = intr.normalize(p);
    Vector3::new(n.x, n.y, 1.0)
}

/// Symmetric epipolar distance of a correspondence under E, in normalized
/// image units (root of summed squared point-line distances).
fn symmetric_epipolar_distance(e: &Matrix3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
    let l2 = e * x1;
    let l1 = e.transpose() * x2;
    let val = x2.dot(&l2);
    let n2 = l2.x * l2.x + l2.y * l2.y;
    let n1 = l1.x * l1.x + l1.y * l1.y;
    if n1 <= 1e-18 || n2 <= 1e-18 {
        return f64::INFINITY;
    }
    (val * val * (1.0 / n1 + 1.0 / n2)).sqrt()
}

/// Isotropic (Hartley) normalization of 2D points already in normalized
/// camera coordinates; returns the transform and transformed points.
fn hartley_normalize(points: &[Vector2<f64>]) -> (Matrix3<f64>, Vec<Vector2<f64>>) {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector2<f64>>() / n;
    let rms = (points.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / n).sqrt();
    let scale = if rms > 1e-12 { (2.0f64).sqrt() / rms } else { 1.0 };
    let t = Matrix3::new(
        scale, 0.0, -scale * mean.x,
        0.0, scale, -scale * mean.y,
        0.0, 0.0, 1.0,
    );
    let mapped = points.iter().map(|p| (p - mean) * scale).collect();
    (t, mapped)
}

/// Eight-point estimate on normalized camera coordinates (any count >= 8),
/// with rank-2 projection onto the essential manifold.
fn eight_point(pairs: &[(Vector2<f64>, Vector2<f64>)]) -> Option<Matrix3<f64>> {
    if pairs.len() < 8 {
        return None;
    }
    let firsts: Vec<Vector2<f64>> = pairs.iter().map(|(a, _)| *a).collect();
    let seconds: Vec<Vector2<f64>> = pairs.iter().map(|(_, b)| *b).collect();
    let (t1, f1) = hartley_normalize(&firsts);
    let (t2, f2) = hartley_normalize(&seconds);

    let mut a = DMatrix::<f64>::zeros(pairs.len(), 9);
    for (i, (p1, p2)) in f1.iter().zip(&f2).enumerate() {
        let (x1, y1) = (p1.x, p1.y);
        let (x2, y2) = (p2.x, p2.y);
        let row = [x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, 1.0];
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    // The null vector of A is the smallest eigenvector of AᵀA (the design
    // can have fewer rows than columns, where a thin SVD would miss it).
    let gram = a.transpose() * &a;
    let eig = gram.symmetric_eigen();
    let idx = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)?;
    let ev = eig.eigenvectors.column(idx);
    let e_norm = Matrix3::new(
        ev[0], ev[1], ev[2],
        ev[3], ev[4], ev[5],
        ev[6], ev[7], ev[8],
    );
    let e = t2.transpose() * e_norm * t1;

    // Enforce singular values (s, s, 0).
    let svd3 = e.svd(true, true);
    let u = svd3.u?;
    let v_t3 = svd3.v_t?;
    let s = (svd3.singular_values[0] + svd3.singular_values[1]) / 2.0;
    Some(u * Matrix3::from_diagonal(&Vector3::new(s, s, 0.0)) * v_t3)
}

/// Normalized eight-point estimation inside RANSAC.
///
/// `matches` are pixel correspondences `(frame A, frame B)`. Inliers
/// satisfy a symmetric epipolar distance below `cfg.inlier_threshold`
/// (normalized units).
pub fn estimate_essential_ransac(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    intr: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<(Matrix3<f64>, Vec<bool>), SfmError> {
    if matches.len() < 8 {
        return Err(SfmError::InsufficientMatches {
            needed: 8,
            got: matches.len(),
        });
    }
    let norm_pairs: Vec<(Vector2<f64>, Vector2<f64>)> = matches
        .iter()
        .map(|(a, b)| (intr.normalize(*a), intr.normalize(*b)))
        .collect();
    let homo: Vec<(Vector3<f64>, Vector3<f64>)> = norm_pairs
        .iter()
        .map(|(a, b)| (Vector3::new(a.x, a.y, 1.0), Vector3::new(b.x, b.y, 1.0)))
        .collect();

    let mask_for = |e: &Matrix3<f64>| -> Vec<bool> {
        homo.iter()
            .map(|(x1, x2)| symmetric_epipolar_distance(e, x1, x2) < cfg.inlier_threshold)
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    let mut budget = cfg.max_iterations;
    let mut it = 0;
    while it < budget {
        it += 1;
        let idx = sample(&mut rng, norm_pairs.len(), 8.min(norm_pairs.len()));
        let subset: Vec<(Vector2<f64>, Vector2<f64>)> =
            idx.iter().map(|i| norm_pairs[i]).collect();
        let Some(e) = eight_point(&subset) else {
            continue;
        };
        let count = mask_for(&e).iter().filter(|&&b| b).count();
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, e));
            let ratio = count as f64 / norm_pairs.len() as f64;
            budget = budget.min(it + cfg.iterations_for(ratio, 8));
        }
    }
    let (mut count, mut e) = best.ok_or(SfmError::DegenerateConfiguration(
        "eight-point never produced a model".into(),
    ))?;

    // Refit on the inlier set until the mask stabilizes (at most twice).
    for _ in 0..2 {
        let mask = mask_for(&e);
        let inliers: Vec<(Vector2<f64>, Vector2<f64>)> = norm_pairs
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| *p)
            .collect();
        if inliers.len() < 8 {
            break;
        }
        if let Some(refit) = eight_point(&inliers) {
            let refit_count = mask_for(&refit).iter().filter(|&&b| b).count();
            if refit_count >= count {
                e = refit;
                count = refit_count;
            }
        }
    }
    let mask = mask_for(&e);
    if count < cfg.min_inlier_count {
        return Err(SfmError::DegenerateConfiguration(format!(
            "only {count} epipolar inliers"
        )));
    }
    Ok((e, mask))
}

/// The four (R, T) candidates of an essential matrix, mapping frame-A
/// camera coordinates into frame B.
pub fn decompose_essential(e: &Matrix3<f64>) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let svd = e.svd(true, true);
    let (Some(mut u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Vec::new();
    };
    let mut v = v_t.transpose();
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v.determinant() < 0.0 {
        v = -v;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v.transpose();
    let r2 = u * w.transpose() * v.transpose();
    let t = u.column(2).into_owned();
    vec![(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Count of matches triangulating in front of both cameras for a relative
/// pose candidate (first camera at the identity).
fn cheirality_count(
    pairs: &[(Vector2<f64>, Vector2<f64>)],
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> usize {
    pairs
        .iter()
        .filter(|(a, b)| {
            triangulate_two_view_normalized(a, b, r, t)
                .map(|x| {
                    let x2 = r * x + t;
                    x.z > 0.0 && x2.z > 0.0
                })
                .unwrap_or(false)
        })
        .count()
}

/// Two-view bootstrap: essential RANSAC, cheirality-consistent pose
/// recovery, and triangulation of the inlier matches.
///
/// Gauge: the first pose is the identity and the baseline has length 1.
pub fn initialize_two_view(
    pair: (usize, usize),
    matches: &[TwoViewMatch],
    intr: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<Reconstruction, SfmError> {
    let (k1, k2) = pair;
    let pixel_pairs: Vec<(Vector2<f64>, Vector2<f64>)> =
        matches.iter().map(|m| (m.first, m.second)).collect();
    let (e, mask) = estimate_essential_ransac(&pixel_pairs, intr, cfg)?;

    let inlier_norm: Vec<(Vector2<f64>, Vector2<f64>)> = pixel_pairs
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (intr.normalize(*a), intr.normalize(*b)))
        .collect();

    let candidates = decompose_essential(&e);
    let (best_count, r, t) = candidates
        .into_iter()
        .map(|(r, t)| (cheirality_count(&inlier_norm, &r, &t), r, t))
        .max_by(|a, b| a.0.cmp(&b.0))
        .ok_or(SfmError::CheiralityFailure)?;
    if best_count * 2 <= inlier_norm.len() {
        return Err(SfmError::CheiralityFailure);
    }
    let t = t / t.norm();

    let mut rec = Reconstruction::new(*intr);
    rec.poses.insert(k1, CameraPose::identity());
    rec.poses.insert(
        k2,
        CameraPose::new(r, t).map_err(|_| SfmError::CheiralityFailure)?,
    );

    for (m, keep) in matches.iter().zip(&mask) {
        if !keep {
            continue;
        }
        let a = intr.normalize(m.first);
        let b = intr.normalize(m.second);
        let Some(x) = triangulate_two_view_normalized(&a, &b, &r, &t) else {
            continue;
        };
        if x.z <= 0.0 || (r * x + t).z <= 0.0 {
            continue;
        }
        rec.landmarks.insert(
            m.track_id,
            Landmark {
                id: m.track_id,
                position: x,
                last_box_area: m.area,
                observed_frames: [k1, k2].into_iter().collect(),
                depth_by_frame: BTreeMap::new(),
            },
        );
        rec.observations.push(SfmObservation {
            landmark: m.track_id,
            frame: k1,
            position: m.first,
        });
        rec.observations.push(SfmObservation {
            landmark: m.track_id,
            frame: k2,
            position: m.second,
        });
    }
    if rec.landmarks.is_empty() {
        return Err(SfmError::CheiralityFailure);
    }
    rec.refresh_depths();
    Ok(rec)
}

/// Median triangulation angle (degrees) of the inliers of a verified pair.
fn pair_median_angle(
    inlier_norm: &[(Vector2<f64>, Vector2<f64>)],
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> f64 {
    let c2 = -(r.transpose() * t);
    let mut angles: Vec<f64> = inlier_norm
        .iter()
        .filter_map(|(a, b)| {
            let x = triangulate_two_view_normalized(a, b, r, t)?;
            if x.z <= 0.0 || (r * x + t).z <= 0.0 {
                return None;
            }
            let ray1 = x.normalize();
            let ray2 = (x - c2).normalize();
            Some(ray1.dot(&ray2).clamp(-1.0, 1.0).acos().to_degrees())
        })
        .collect();
    if angles.is_empty() {
        return 0.0;
    }
    angles.sort_by(|a, b| a.total_cmp(b));
    angles[angles.len() / 2]
}

/// Rank candidate bootstrap pairs: maximal inlier count subject to a
/// median triangulation angle floor; ties prefer the larger angle, then
/// the lexicographically smaller pair. Pairs whose shared-track count
/// cannot beat the best verified inlier count are skipped.
pub(crate) fn ranked_initial_pairs(
    mf: &FeatureMatchSet,
    intr: &CameraIntrinsics,
    cfg: &SfmConfig,
) -> Vec<(usize, usize)> {
    let by_frame = mf.by_frame();
    let frames: Vec<usize> = by_frame.keys().copied().collect();

    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &ka) in frames.iter().enumerate() {
        for &kb in &frames[i + 1..] {
            let shared = mf
                .tracks
                .iter()
                .filter(|t| t.position_at(ka).is_some() && t.position_at(kb).is_some())
                .count();
            if shared >= 8 {
                candidates.push((shared, ka, kb));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut verified: Vec<(usize, f64, (usize, usize))> = Vec::new();
    let mut best_inliers = 0usize;
    for (shared, ka, kb) in candidates {
        if shared < best_inliers {
            break;
        }
        let matches = super::shared_matches(mf, ka, kb);
        let pixel_pairs: Vec<(Vector2<f64>, Vector2<f64>)> =
            matches.iter().map(|m| (m.first, m.second)).collect();
        let seed_tag = (ka as u64) << 32 | kb as u64;
        let Ok((e, mask)) =
            estimate_essential_ransac(&pixel_pairs, intr, &cfg.essential.with_mixed_seed(seed_tag))
        else {
            continue;
        };
        let inlier_norm: Vec<(Vector2<f64>, Vector2<f64>)> = pixel_pairs
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| (intr.normalize(*a), intr.normalize(*b)))
            .collect();
        let Some((count, r, t)) = decompose_essential(&e)
            .into_iter()
            .map(|(r, t)| (cheirality_count(&inlier_norm, &r, &t), r, t))
            .max_by(|a, b| a.0.cmp(&b.0))
        else {
            continue;
        };
        if count * 2 <= inlier_norm.len() {
            continue;
        }
        let angle = pair_median_angle(&inlier_norm, &r, &t);
        if angle < cfg.min_pair_angle_deg {
            continue;
        }
        best_inliers = best_inliers.max(inlier_norm.len());
        verified.push((inlier_norm.len(), angle, (ka, kb)));
    }
    verified.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(b.1.total_cmp(&a.1))
            .then(a.2.cmp(&b.2))
    });
    verified.into_iter().map(|(_, _, pair)| pair).collect()
}

/// Choose the frame pair to bootstrap the reconstruction.
pub fn select_initial_pair(
    mf: &FeatureMatchSet,
    intr: &CameraIntrinsics,
    cfg: &SfmConfig,
) -> Result<(usize, usize), SfmError> {
    ranked_initial_pairs(mf, intr, cfg)
        .into_iter()
        .next()
        .ok_or(SfmError::NoValidPair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{project, FruitTrack};
    use nalgebra::Rotation3;
    use rand::Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 360.0, 480.0).unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(3.0..6.0),
                )
            })
            .collect()
    }

    /// Project points through two known poses (first at identity).
    fn two_view_fixture(
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> (Vec<(Vector2<f64>, Vector2<f64>)>, Matrix3<f64>, Vector3<f64>) {
        let points = random_points(rng, n);
        let r = Rotation3::from_euler_angles(0.02, -0.03, 0.01).into_inner();
        let t = Vector3::new(-0.8, 0.05, 0.1);
        let pose1 = CameraPose::identity();
        let pose2 = CameraPose::new(r, t).unwrap();
        let pairs = points
            .iter()
            .map(|x| {
                (
                    project(&intr(), &pose1, x).unwrap(),
                    project(&intr(), &pose2, x).unwrap(),
                )
            })
            .collect();
        (pairs, r, t)
    }

    #[test]
    fn noiseless_matches_are_all_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pairs, _, _) = two_view_fixture(&mut rng, 100);
        let cfg = RansacConfig::essential_defaults();
        let (e, mask) = estimate_essential_ransac(&pairs, &intr(), &cfg).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 100);
        for (a, b) in &pairs {
            let x1 = normalized(&intr(), *a);
            let x2 = normalized(&intr(), *b);
            assert!(x2.dot(&(e * x1)).abs() < 1e-9);
        }
    }

    #[test]
    fn outliers_are_rejected_with_high_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut pairs, _, _) = two_view_fixture(&mut rng, 70);
        for _ in 0..30 {
            pairs.push((
                Vector2::new(rng.random_range(0.0..720.0), rng.random_range(0.0..960.0)),
                Vector2::new(rng.random_range(0.0..720.0), rng.random_range(0.0..960.0)),
            ));
        }
        let cfg = RansacConfig::essential_defaults();
        let (_, mask) = estimate_essential_ransac(&pairs, &intr(), &cfg).unwrap();
        let true_inliers = mask[..70].iter().filter(|&&m| m).count();
        assert!(true_inliers >= 69, "recall too low: {true_inliers}/70");
    }

    #[test]
    fn too_few_matches() {
        let pairs: Vec<(Vector2<f64>, Vector2<f64>)> = (0..5)
            .map(|i| (Vector2::new(i as f64, 0.0), Vector2::new(i as f64, 1.0)))
            .collect();
        let err = estimate_essential_ransac(&pairs, &intr(), &RansacConfig::essential_defaults());
        assert!(matches!(err, Err(SfmError::InsufficientMatches { .. })));
    }

    #[test]
    fn two_view_recovers_relative_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pairs, r_true, t_true) = two_view_fixture(&mut rng, 80);
        let matches: Vec<TwoViewMatch> = pairs
            .iter()
            .enumerate()
            .map(|(i, (a, b))| TwoViewMatch {
                track_id: i as u64,
                first: *a,
                second: *b,
                area: 100.0,
            })
            .collect();
        let rec =
            initialize_two_view((0, 1), &matches, &intr(), &RansacConfig::essential_defaults())
                .unwrap();
        let pose2 = &rec.poses[&1];
        let r_err =
            Rotation3::from_matrix_unchecked(pose2.rotation().transpose() * r_true).angle();
        assert!(r_err < 1e-6, "rotation error {r_err}");
        let t_dir = pose2.translation().normalize();
        let t_true_dir = t_true.normalize();
        let t_angle = t_dir.dot(&t_true_dir).clamp(-1.0, 1.0).acos();
        assert!(t_angle < 1e-6, "translation direction error {t_angle}");
        // Cheirality postcondition and determinism.
        for lm in rec.landmarks.values() {
            assert!(lm.position.z > 0.0);
            assert!((pose2.rotation() * lm.position + pose2.translation()).z > 0.0);
        }
        let rec2 =
            initialize_two_view((0, 1), &matches, &intr(), &RansacConfig::essential_defaults())
                .unwrap();
        assert_eq!(rec, rec2);
    }

    fn full_visibility_tracks(
        poses: &[CameraPose],
        points: &[Vector3<f64>],
    ) -> FeatureMatchSet {
        let mut mf = FeatureMatchSet::new();
        for (i, x) in points.iter().enumerate() {
            let positions: Vec<Vector2<f64>> = poses
                .iter()
                .map(|p| project(&intr(), p, x).unwrap())
                .collect();
            let areas = vec![100.0; positions.len()];
            mf.push(FruitTrack::new(i as u64, 0, positions, areas).unwrap());
        }
        mf
    }

    fn lateral_poses(n: usize, dx: f64) -> Vec<CameraPose> {
        (0..n)
            .map(|k| {
                CameraPose::new(Matrix3::identity(), Vector3::new(-(k as f64) * dx, 0.0, 0.0))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn pure_rotation_has_no_valid_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let points = random_points(&mut rng, 40);
        let poses: Vec<CameraPose> = (0..6)
            .map(|k| {
                let r = Rotation3::from_euler_angles(0.0, 0.0, 0.01 * k as f64).into_inner();
                CameraPose::new(r, Vector3::zeros()).unwrap()
            })
            .collect();
        let mf = full_visibility_tracks(&poses, &points);
        let err = select_initial_pair(&mf, &intr(), &SfmConfig::default());
        assert!(matches!(err, Err(SfmError::NoValidPair)));
    }

    #[test]
    fn lateral_pass_selects_wide_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points = random_points(&mut rng, 60);
        let poses = lateral_poses(12, 0.12);
        let mf = full_visibility_tracks(&poses, &points);
        let (k1, k2) = select_initial_pair(&mf, &intr(), &SfmConfig::default()).unwrap();
        // All pairs share all tracks; the tie-break should pick a baseline
        // at least as large as the median pairwise baseline.
        let baselines: Vec<f64> = {
            let mut v = Vec::new();
            for i in 0..12usize {
                for j in i + 1..12 {
                    v.push((j - i) as f64 * 0.12);
                }
            }
            v.sort_by(|a, b| a.total_cmp(b));
            v
        };
        let median = baselines[baselines.len() / 2];
        let selected = (k2 - k1) as f64 * 0.12;
        assert!(
            selected >= median,
            "selected baseline {selected} below median {median}"
        );
    }

    #[test]
    fn forced_pair_is_returned() {
        // Tracks only span frames 3..=9, every pair inside shares all of
        // them, and the widest usable pair is (3, 9).
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let points = random_points(&mut rng, 20);
        let poses = lateral_poses(12, 0.2);
        let mut mf = FeatureMatchSet::new();
        for (i, x) in points.iter().enumerate() {
            mf.push(
                FruitTrack::new(
                    i as u64,
                    3,
                    (3..=9).map(|k| project(&intr(), &poses[k], x).unwrap()).collect(),
                    vec![100.0; 7],
                )
                .unwrap(),
            );
        }
        let (k1, k2) = select_initial_pair(&mf, &intr(), &SfmConfig::default()).unwrap();
        assert_eq!((k1, k2), (3, 9));
    }
}
