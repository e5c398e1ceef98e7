//! Robust camera pose from 2D-3D correspondences: DLT over minimal samples
//! inside RANSAC, then nonlinear refinement on the inlier set.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{camera_depth, project, CameraIntrinsics, CameraPose};
use crate::sfm::ba::refine_pose;
use crate::sfm::{RansacConfig, SfmError};

const SAMPLE_SIZE: usize = 6;

/// Direct linear transform pose from at least six correspondences given in
/// normalized image coordinates. `None` when the sample is degenerate
/// (rank-deficient design, e.g. coplanar points) or fails cheirality.
fn dlt_pose(points: &[(Vector3<f64>, Vector2<f64>)]) -> Option<CameraPose> {
    let n = points.len();
    if n < SAMPLE_SIZE {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (x, p)) in points.iter().enumerate() {
        let row0 = [
            x.x, x.y, x.z, 1.0, 0.0, 0.0, 0.0, 0.0,
            -p.x * x.x, -p.x * x.y, -p.x * x.z, -p.x,
        ];
        let row1 = [
            0.0, 0.0, 0.0, 0.0, x.x, x.y, x.z, 1.0,
            -p.y * x.x, -p.y * x.y, -p.y * x.z, -p.y,
        ];
        for (j, v) in row0.iter().enumerate() {
            a[(2 * i, j)] = *v;
        }
        for (j, v) in row1.iter().enumerate() {
            a[(2 * i + 1, j)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    let v_t = svd.v_t?;
    // A valid pose needs rank 11; a coplanar sample collapses it further.
    if sv[10] / sv[0] < 1e-9 {
        return None;
    }
    let idx = sv
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)?;
    let p = v_t.row(idx);
    let mut m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let mut t = Vector3::new(p[3], p[7], p[11]);
    if m.determinant() < 0.0 {
        m = -m;
        t = -t;
    }
    let svd3 = m.svd(true, true);
    let (u, v_t3) = (svd3.u?, svd3.v_t?);
    let r = u * v_t3;
    let scale = svd3.singular_values.iter().sum::<f64>() / 3.0;
    if scale < 1e-12 {
        return None;
    }
    let pose = CameraPose::new(r, t / scale).ok()?;
    let in_front = points.iter().filter(|(x, _)| camera_depth(&pose, x) > 0.0).count();
    (in_front * 2 > n).then_some(pose)
}

/// Pixel reprojection inlier mask for a pose.
fn inlier_mask(
    corr: &[(Vector3<f64>, Vector2<f64>)],
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    threshold: f64,
) -> Vec<bool> {
    corr.iter()
        .map(|(x, p)| {
            project(intr, pose, x)
                .map(|q| (q - p).norm() < threshold)
                .unwrap_or(false)
        })
        .collect()
}

/// Estimate a camera pose from 3D points and their pixel observations.
///
/// Returns the refined pose and the final inlier mask.
pub fn pnp_ransac(
    corr: &[(Vector3<f64>, Vector2<f64>)],
    intr: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<(CameraPose, Vec<bool>), SfmError> {
    if corr.len() < SAMPLE_SIZE {
        return Err(SfmError::InsufficientMatches {
            needed: SAMPLE_SIZE,
            got: corr.len(),
        });
    }
    let normalized: Vec<(Vector3<f64>, Vector2<f64>)> = corr
        .iter()
        .map(|(x, p)| (*x, intr.normalize(*p)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, CameraPose)> = None;
    let mut budget = cfg.max_iterations;
    let mut it = 0;
    while it < budget {
        it += 1;
        let idx = sample(&mut rng, corr.len(), SAMPLE_SIZE);
        let subset: Vec<(Vector3<f64>, Vector2<f64>)> =
            idx.iter().map(|i| normalized[i]).collect();
        let Some(pose) = dlt_pose(&subset) else {
            continue;
        };
        let count = inlier_mask(corr, intr, &pose, cfg.inlier_threshold)
            .iter()
            .filter(|&&b| b)
            .count();
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            let ratio = count as f64 / corr.len() as f64;
            best = Some((count, pose));
            budget = budget.min(it + cfg.iterations_for(ratio, SAMPLE_SIZE));
        }
    }
    let (_, mut pose) = best.ok_or(SfmError::DegenerateConfiguration(
        "no PnP sample produced a pose".into(),
    ))?;

    // Refine on inliers, twice, re-deciding the inlier set in between.
    for _ in 0..2 {
        let mask = inlier_mask(corr, intr, &pose, cfg.inlier_threshold);
        let inliers: Vec<(Vector3<f64>, Vector2<f64>)> = corr
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(c, _)| *c)
            .collect();
        if inliers.len() < SAMPLE_SIZE {
            break;
        }
        pose = refine_pose(intr, &pose, &inliers, 30);
    }

    let mask = inlier_mask(corr, intr, &pose, cfg.inlier_threshold);
    let count = mask.iter().filter(|&&b| b).count();
    if count < cfg.min_inlier_count.max(SAMPLE_SIZE) {
        return Err(SfmError::DegenerateConfiguration(format!(
            "PnP kept only {count} inliers"
        )));
    }
    Ok((pose, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 580.0, 360.0, 480.0).unwrap()
    }

    fn fixture(
        rng: &mut ChaCha8Rng,
        n: usize,
        noise_px: f64,
    ) -> (Vec<(Vector3<f64>, Vector2<f64>)>, CameraPose) {
        let pose = CameraPose::new(
            Rotation3::from_euler_angles(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            )
            .into_inner(),
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
            ),
        )
        .unwrap();
        let gauss = Normal::new(0.0, noise_px.max(1e-12)).unwrap();
        let corr = (0..n)
            .map(|_| {
                let x = Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(3.0..8.0),
                );
                let mut p = project(&intr(), &pose, &x).unwrap();
                if noise_px > 0.0 {
                    p.x += gauss.sample(rng);
                    p.y += gauss.sample(rng);
                }
                (x, p)
            })
            .collect();
        (corr, pose)
    }

    #[test]
    fn noiseless_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (corr, truth) = fixture(&mut rng, 50, 0.0);
        let cfg = RansacConfig::pnp_defaults();
        let (pose, mask) = pnp_ransac(&corr, &intr(), &cfg).unwrap();
        assert!(mask.iter().all(|&m| m));
        let r_err = Rotation3::from_matrix_unchecked(pose.rotation().transpose() * truth.rotation())
            .angle();
        let t_err = (pose.translation() - truth.translation()).norm();
        assert!(r_err < 1e-6, "rotation error {r_err}");
        assert!(t_err < 1e-6, "translation error {t_err}");
    }

    #[test]
    fn noisy_reprojection_stays_below_one_pixel() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (corr, _) = fixture(&mut rng, 60, 0.5);
            let cfg = RansacConfig::pnp_defaults();
            let (pose, mask) = pnp_ransac(&corr, &intr(), &cfg).unwrap();
            let mut total = 0.0;
            let mut n = 0usize;
            for ((x, p), keep) in corr.iter().zip(&mask) {
                if *keep {
                    total += (project(&intr(), &pose, x).unwrap() - p).norm();
                    n += 1;
                }
            }
            assert!(n >= cfg.min_inlier_count);
            let mean = total / n as f64;
            assert!(mean < 1.0, "seed {seed}: mean inlier reprojection {mean}");
        }
    }

    #[test]
    fn outliers_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut corr, truth) = fixture(&mut rng, 40, 0.0);
        for _ in 0..15 {
            corr.push((
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(3.0..8.0),
                ),
                Vector2::new(rng.random_range(0.0..720.0), rng.random_range(0.0..960.0)),
            ));
        }
        let (pose, mask) = pnp_ransac(&corr, &intr(), &RansacConfig::pnp_defaults()).unwrap();
        let r_err = Rotation3::from_matrix_unchecked(pose.rotation().transpose() * truth.rotation())
            .angle();
        assert!(r_err < 1e-6);
        assert!(mask[..40].iter().filter(|&&m| m).count() >= 39);
    }

    #[test]
    fn too_few_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (corr, _) = fixture(&mut rng, 5, 0.0);
        let err = pnp_ransac(&corr, &intr(), &RansacConfig::pnp_defaults());
        assert!(matches!(err, Err(SfmError::InsufficientMatches { .. })));
    }

    #[test]
    fn coplanar_points_resampled_or_rejected() {
        // All points on the z = 5 plane: the DLT design is rank-deficient,
        // every sample gets rejected, and the estimator reports degeneracy.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pose = CameraPose::identity();
        let corr: Vec<(Vector3<f64>, Vector2<f64>)> = (0..30)
            .map(|_| {
                let x = Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    5.0,
                );
                (x, project(&intr(), &pose, &x).unwrap())
            })
            .collect();
        let mut cfg = RansacConfig::pnp_defaults();
        cfg.max_iterations = 50;
        let err = pnp_ransac(&corr, &intr(), &cfg);
        assert!(matches!(err, Err(SfmError::DegenerateConfiguration(_))));
    }
}
