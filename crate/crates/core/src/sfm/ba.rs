//! Bundle adjustment: Levenberg-Marquardt over camera poses and landmark
//! positions minimizing the observability-weighted sum of squared
//! reprojection errors, with landmarks eliminated by a Schur complement.
//!
//! Pose increments use a left perturbation: `x_cam' = exp(δθ)·x_cam + δt`,
//! so `R ← exp(δθ)·R` and `T ← exp(δθ)·T + δt`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{
    DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Matrix6, Matrix6x3, Rotation3, Vector2,
    Vector3, Vector6,
};

use crate::model::{CameraIntrinsics, CameraPose};
use crate::sfm::Reconstruction;

/// Cost assigned to an observation whose landmark falls behind the camera;
/// large enough that LM rejects any step that causes it.
const BEHIND_CAMERA_COST: f64 = 1e12;

const MAX_LM_ITERATIONS: usize = 100;
const RELATIVE_DECREASE_FLOOR: f64 = 1e-8;

/// Result of one bundle adjustment run. `converged` is false when the
/// iteration cap was reached before the relative-decrease criterion; the
/// best iterate is returned either way.
#[derive(Debug, Clone)]
pub struct BaOutcome {
    pub reconstruction: Reconstruction,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after every accepted step, for monotonicity checks.
    pub accepted_costs: Vec<f64>,
}

/// Projection plus analytic Jacobians with respect to the local pose
/// increment (rotation first, translation second) and the point.
pub fn project_with_jacobians(
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    x: &Vector3<f64>,
) -> Option<(Vector2<f64>, Matrix2x6<f64>, Matrix2x3<f64>)> {
    let cam = pose.to_camera(x);
    if cam.z <= 1e-12 {
        return None;
    }
    let proj = Vector2::new(
        intr.fx * cam.x / cam.z + intr.cx,
        intr.fy * cam.y / cam.z + intr.cy,
    );
    let z2 = cam.z * cam.z;
    let dproj_dcam = Matrix2x3::new(
        intr.fx / cam.z, 0.0, -intr.fx * cam.x / z2,
        0.0, intr.fy / cam.z, -intr.fy * cam.y / z2,
    );
    let skew = Matrix3::new(
        0.0, -cam.z, cam.y,
        cam.z, 0.0, -cam.x,
        -cam.y, cam.x, 0.0,
    );
    let mut j_pose = Matrix2x6::zeros();
    j_pose
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(dproj_dcam * (-skew)));
    j_pose
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&dproj_dcam);
    let j_point = dproj_dcam * pose.rotation();
    Some((proj, j_pose, j_point))
}

/// Apply a local pose increment.
pub fn apply_pose_update(pose: &CameraPose, delta: &Vector6<f64>) -> CameraPose {
    let dtheta = Vector3::new(delta[0], delta[1], delta[2]);
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    let rot = Rotation3::new(dtheta).into_inner();
    let r_new = rot * pose.rotation();
    let t_new = rot * pose.translation() + dt;
    CameraPose::new(r_new, t_new).unwrap_or_else(|_| {
        // Round-off pushed the product outside tolerance; project back.
        let svd = r_new.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * v_t;
        }
        CameraPose::new(r, t_new).expect("projected rotation is orthonormal")
    })
}

/// Pose-only Levenberg-Marquardt on pixel reprojection over fixed points.
pub fn refine_pose(
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    corr: &[(Vector3<f64>, Vector2<f64>)],
    max_iterations: usize,
) -> CameraPose {
    let cost_of = |p: &CameraPose| -> f64 {
        corr.iter()
            .map(|(x, obs)| match project_with_jacobians(intr, p, x) {
                Some((proj, _, _)) => (proj - obs).norm_squared(),
                None => BEHIND_CAMERA_COST,
            })
            .sum()
    };
    let mut current = pose.clone();
    let mut cost = cost_of(&current);
    let mut mu: Option<f64> = None;
    for _ in 0..max_iterations {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (x, obs) in corr {
            if let Some((proj, j, _)) = project_with_jacobians(intr, &current, x) {
                let r = proj - obs;
                h += j.transpose() * j;
                g += j.transpose() * r;
            }
        }
        let mu_val = *mu.get_or_insert_with(|| 1e-3 * h.diagonal().max());
        let damped = h + Matrix6::identity() * mu_val;
        let Some(chol) = damped.cholesky() else {
            mu = Some(mu_val * 2.0);
            continue;
        };
        let delta = -chol.solve(&g);
        let candidate = apply_pose_update(&current, &delta);
        let new_cost = cost_of(&candidate);
        if new_cost < cost {
            let rel = (cost - new_cost) / cost.max(1e-300);
            current = candidate;
            cost = new_cost;
            mu = Some(mu_val / 3.0);
            if rel < 1e-10 {
                break;
            }
        } else {
            mu = Some(mu_val * 2.0);
        }
    }
    current
}

struct LinearizedSystem {
    b_diag: Vec<Matrix6<f64>>,
    c_diag: Vec<Matrix3<f64>>,
    g_pose: Vec<Vector6<f64>>,
    g_lm: Vec<Vector3<f64>>,
    /// Per landmark: the pose blocks E of the mixed Hessian.
    e_blocks: Vec<Vec<(usize, Matrix6x3<f64>)>>,
}

/// Full bundle adjustment with the given gauge-fixed poses.
pub fn bundle_adjust(rec: &Reconstruction, fixed_poses: &BTreeSet<usize>) -> BaOutcome {
    bundle_adjust_subset(rec, fixed_poses, None, MAX_LM_ITERATIONS)
}

/// Bundle adjustment over an optional landmark subset (local window mode):
/// free poses are those not in `fixed_poses`; free landmarks are the subset
/// (all landmarks when `None`); included residuals are every observation of
/// a free landmark.
pub fn bundle_adjust_subset(
    rec: &Reconstruction,
    fixed_poses: &BTreeSet<usize>,
    landmarks: Option<&BTreeSet<u64>>,
    max_iterations: usize,
) -> BaOutcome {
    let mut rec = rec.clone();

    let included: Vec<(u64, usize, Vector2<f64>)> = rec
        .observations
        .iter()
        .filter(|o| landmarks.map_or(true, |s| s.contains(&o.landmark)))
        .map(|o| (o.landmark, o.frame, o.position))
        .collect();

    // Free poses must carry at least one included observation.
    let obs_frames: BTreeSet<usize> = included.iter().map(|(_, f, _)| *f).collect();
    let pose_ids: Vec<usize> = rec
        .poses
        .keys()
        .filter(|f| !fixed_poses.contains(f) && obs_frames.contains(f))
        .copied()
        .collect();
    let lm_ids: Vec<u64> = {
        let observed: BTreeSet<u64> = included.iter().map(|(l, _, _)| *l).collect();
        observed.into_iter().collect()
    };
    let pose_index: BTreeMap<usize, usize> =
        pose_ids.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let lm_index: BTreeMap<u64, usize> =
        lm_ids.iter().enumerate().map(|(i, l)| (*l, i)).collect();

    let cost_of = |r: &Reconstruction| -> f64 {
        included
            .iter()
            .map(|(l, f, p)| {
                match project_with_jacobians(&r.intrinsics, &r.poses[f], &r.landmarks[l].position)
                {
                    Some((proj, _, _)) => (proj - p).norm_squared(),
                    None => BEHIND_CAMERA_COST,
                }
            })
            .sum()
    };

    let initial_cost = cost_of(&rec);
    let mut outcome = BaOutcome {
        reconstruction: rec.clone(),
        initial_cost,
        final_cost: initial_cost,
        iterations: 0,
        converged: false,
        accepted_costs: Vec::new(),
    };
    if pose_ids.is_empty() && lm_ids.is_empty() {
        outcome.converged = true;
        return outcome;
    }

    let linearize = |r: &Reconstruction| -> LinearizedSystem {
        let mut sys = LinearizedSystem {
            b_diag: vec![Matrix6::zeros(); pose_ids.len()],
            c_diag: vec![Matrix3::zeros(); lm_ids.len()],
            g_pose: vec![Vector6::zeros(); pose_ids.len()],
            g_lm: vec![Vector3::zeros(); lm_ids.len()],
            e_blocks: vec![Vec::new(); lm_ids.len()],
        };
        for (l, f, obs) in &included {
            let Some((proj, j_pose, j_point)) =
                project_with_jacobians(&r.intrinsics, &r.poses[f], &r.landmarks[l].position)
            else {
                continue;
            };
            let res = proj - obs;
            let li = lm_index[l];
            sys.c_diag[li] += j_point.transpose() * j_point;
            sys.g_lm[li] += j_point.transpose() * res;
            if let Some(&pi) = pose_index.get(f) {
                sys.b_diag[pi] += j_pose.transpose() * j_pose;
                sys.g_pose[pi] += j_pose.transpose() * res;
                sys.e_blocks[li].push((pi, j_pose.transpose() * j_point));
            }
        }
        sys
    };

    let mut cost = initial_cost;
    let mut sys = linearize(&rec);
    let max_diag = sys
        .b_diag
        .iter()
        .map(|b| b.diagonal().max())
        .chain(sys.c_diag.iter().map(|c| c.diagonal().max()))
        .fold(0.0f64, f64::max);
    let mut mu = 1e-3 * max_diag.max(1e-12);

    for it in 0..max_iterations {
        outcome.iterations = it + 1;

        // Schur complement on the damped system.
        let np = pose_ids.len() * 6;
        let mut s = DMatrix::<f64>::zeros(np, np);
        let mut rhs = DVector::<f64>::zeros(np);
        for (pi, b) in sys.b_diag.iter().enumerate() {
            let damped = b + Matrix6::identity() * mu;
            s.view_mut((pi * 6, pi * 6), (6, 6)).copy_from(&damped);
        }
        for (pi, g) in sys.g_pose.iter().enumerate() {
            rhs.rows_mut(pi * 6, 6).copy_from(&(-g));
        }
        let mut c_inv: Vec<Matrix3<f64>> = Vec::with_capacity(lm_ids.len());
        let mut solvable = true;
        for c in &sys.c_diag {
            let damped = c + Matrix3::identity() * mu;
            match damped.try_inverse() {
                Some(inv) => c_inv.push(inv),
                None => {
                    solvable = false;
                    break;
                }
            }
        }
        if solvable {
            for (li, blocks) in sys.e_blocks.iter().enumerate() {
                let ci = &c_inv[li];
                for &(pi, e_i) in blocks {
                    let ei_ci = e_i * ci;
                    let bump = ei_ci * sys.g_lm[li];
                    let mut rows = rhs.rows_mut(pi * 6, 6);
                    rows += bump;
                    for &(pj, e_j) in blocks {
                        let block = ei_ci * e_j.transpose();
                        let mut view = s.view_mut((pi * 6, pj * 6), (6, 6));
                        view -= block;
                    }
                }
            }
        }

        let step = if !solvable {
            None
        } else if pose_ids.is_empty() {
            Some(DVector::zeros(0))
        } else {
            s.clone().cholesky().map(|ch| ch.solve(&rhs))
        };

        let Some(delta_p) = step else {
            mu *= 2.0;
            continue;
        };

        // Back-substitute landmark updates and build the candidate state.
        let mut candidate = rec.clone();
        for (pi, f) in pose_ids.iter().enumerate() {
            let d: Vector6<f64> = Vector6::from_iterator(delta_p.rows(pi * 6, 6).iter().copied());
            let updated = apply_pose_update(&candidate.poses[f], &d);
            candidate.poses.insert(*f, updated);
        }
        for (li, l) in lm_ids.iter().enumerate() {
            let mut et_dp = Vector3::zeros();
            for &(pi, e_i) in &sys.e_blocks[li] {
                let d: Vector6<f64> =
                    Vector6::from_iterator(delta_p.rows(pi * 6, 6).iter().copied());
                et_dp += e_i.transpose() * d;
            }
            let delta_l = c_inv[li] * (-sys.g_lm[li] - et_dp);
            candidate.landmarks.get_mut(l).expect("landmark exists").position += delta_l;
        }

        let new_cost = cost_of(&candidate);
        if new_cost < cost {
            let rel = (cost - new_cost) / cost.max(1e-300);
            rec = candidate;
            cost = new_cost;
            outcome.accepted_costs.push(cost);
            mu /= 3.0;
            if rel < RELATIVE_DECREASE_FLOOR {
                outcome.converged = true;
                break;
            }
            sys = linearize(&rec);
        } else {
            mu *= 2.0;
        }
    }

    rec.refresh_depths();
    outcome.final_cost = cost;
    outcome.reconstruction = rec;
    outcome
}
