//! Multi-view DLT triangulation with a single Gauss-Newton polish.

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector2, Vector3, Vector4};

use crate::model::{camera_depth, project, CameraIntrinsics, CameraPose};
use crate::sfm::SfmError;

/// Triangulation angle floor; below this the geometry is too flat.
pub const MIN_TRIANGULATION_ANGLE_DEG: f64 = 0.5;

/// Two-view triangulation in normalized camera coordinates with the first
/// camera at the identity and the second at `[R|T]`. Returns the point in
/// the first camera's frame, or `None` when the null space is degenerate.
pub fn triangulate_two_view_normalized(
    a: &Vector2<f64>,
    b: &Vector2<f64>,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    let mut design = Matrix4::<f64>::zeros();
    // P1 = [I | 0]
    design.set_row(0, &nalgebra::RowVector4::new(-1.0, 0.0, a.x, 0.0));
    design.set_row(1, &nalgebra::RowVector4::new(0.0, -1.0, a.y, 0.0));
    // P2 = [R | T]
    let p2 = |i: usize| nalgebra::RowVector4::new(r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
    design.set_row(2, &(b.x * p2(2) - p2(0)));
    design.set_row(3, &(b.y * p2(2) - p2(1)));

    let svd = design.svd(false, true);
    let v_t = svd.v_t?;
    let idx = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)?;
    let h: Vector4<f64> = v_t.row(idx).transpose();
    if h.w.abs() < 1e-12 * h.norm() {
        return None;
    }
    Some(Vector3::new(h.x / h.w, h.y / h.w, h.z / h.w))
}

/// Homogeneous DLT over all observing rays followed by one Gauss-Newton
/// refinement of the reprojection error.
///
/// Fails with [`SfmError::IllConditioned`] when every pair of viewing rays
/// subtends less than [`MIN_TRIANGULATION_ANGLE_DEG`], and with
/// [`SfmError::NegativeDepth`] when the point falls behind any camera.
pub fn triangulate(
    observations: &[(CameraPose, Vector2<f64>)],
    intr: &CameraIntrinsics,
) -> Result<Vector3<f64>, SfmError> {
    if observations.len() < 2 {
        return Err(SfmError::InsufficientMatches {
            needed: 2,
            got: observations.len(),
        });
    }

    let mut design = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (i, (pose, pix)) in observations.iter().enumerate() {
        let n = intr.normalize(*pix);
        let r = pose.rotation();
        let t = pose.translation();
        let row = |j: usize| {
            nalgebra::RowDVector::from_vec(vec![r[(j, 0)], r[(j, 1)], r[(j, 2)], t[j]])
        };
        design.set_row(2 * i, &(n.x * row(2) - row(0)).into());
        design.set_row(2 * i + 1, &(n.y * row(2) - row(1)).into());
    }
    let svd = design.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or(SfmError::DegenerateConfiguration("SVD failed".into()))?;
    let idx = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .ok_or(SfmError::IllConditioned)?;
    let h = v_t.row(idx);
    if h[3].abs() < 1e-12 {
        return Err(SfmError::IllConditioned);
    }
    let mut point = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    // Ray-angle conditioning check.
    let centers: Vec<Vector3<f64>> = observations.iter().map(|(p, _)| p.center()).collect();
    let mut max_angle: f64 = 0.0;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            let r1 = point - centers[i];
            let r2 = point - centers[j];
            if r1.norm() < 1e-12 || r2.norm() < 1e-12 {
                continue;
            }
            let angle = r1
                .normalize()
                .dot(&r2.normalize())
                .clamp(-1.0, 1.0)
                .acos()
                .to_degrees();
            max_angle = max_angle.max(angle);
        }
    }
    if max_angle < MIN_TRIANGULATION_ANGLE_DEG {
        return Err(SfmError::IllConditioned);
    }

    // One Gauss-Newton step on the 3D point.
    let mut jtj = Matrix3::<f64>::zeros();
    let mut jtr = Vector3::<f64>::zeros();
    let mut usable = true;
    for (pose, pix) in observations {
        let cam = pose.to_camera(&point);
        if cam.z <= 1e-12 {
            usable = false;
            break;
        }
        let proj = Vector2::new(
            intr.fx * cam.x / cam.z + intr.cx,
            intr.fy * cam.y / cam.z + intr.cy,
        );
        let residual = proj - pix;
        let dproj_dcam = nalgebra::Matrix2x3::new(
            intr.fx / cam.z, 0.0, -intr.fx * cam.x / (cam.z * cam.z),
            0.0, intr.fy / cam.z, -intr.fy * cam.y / (cam.z * cam.z),
        );
        let j = dproj_dcam * pose.rotation();
        jtj += j.transpose() * j;
        jtr += j.transpose() * residual;
    }
    if usable {
        if let Some(chol) = jtj.cholesky() {
            let refined = point - chol.solve(&jtr);
            // Keep the refinement only if it does not hurt.
            let cost = |x: &Vector3<f64>| -> f64 {
                observations
                    .iter()
                    .map(|(pose, pix)| match project(intr, pose, x) {
                        Ok(p) => (p - pix).norm_squared(),
                        Err(_) => f64::INFINITY,
                    })
                    .sum()
            };
            if cost(&refined) <= cost(&point) {
                point = refined;
            }
        }
    }

    for (pose, _) in observations {
        if camera_depth(pose, &point) <= 0.0 {
            return Err(SfmError::NegativeDepth);
        }
    }
    Ok(point)
}
