//! Closed-form similarity alignment between 3D point sets.
//!
//! Used to compare gauge-free reconstructions against metric ground truth:
//! finds the scale, rotation, and translation minimizing
//! `Σ ‖s·R·xᵢ + t − yᵢ‖²` (the classical SVD construction).

use nalgebra::{Matrix3, Vector3};

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

/// Best similarity transform mapping `src` onto `dst`, plus the residual
/// RMSE after alignment. Returns `None` for fewer than 3 points or a
/// degenerate (collinear/coincident) source set.
pub fn similarity_align(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Option<(SimilarityTransform, f64)> {
    if src.len() != dst.len() || src.len() < 3 {
        return None;
    }
    let n = src.len() as f64;
    let mean = |pts: &[Vector3<f64>]| pts.iter().sum::<Vector3<f64>>() / n;
    let mu_s = mean(src);
    let mu_d = mean(dst);

    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_s;
        let dc = d - mu_d;
        cov += dc * sc.transpose();
        var_s += sc.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s < 1e-15 {
        return None;
    }

    let svd = cov.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut s_mat = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s_mat[(2, 2)] = -1.0;
    }
    let rotation = u * s_mat * v_t;
    let trace_ds = (Matrix3::from_diagonal(&svd.singular_values) * s_mat).trace();
    let scale = trace_ds / var_s;
    let translation = mu_d - scale * (rotation * mu_s);

    let transform = SimilarityTransform {
        scale,
        rotation,
        translation,
    };
    let mse: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (transform.apply(s) - d).norm_squared())
        .sum::<f64>()
        / n;
    Some((transform, mse.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let angle: f64 = rng.random_range(-3.0..3.0);
        nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
            .into_inner()
    }

    #[test]
    fn recovers_known_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let rot = random_rotation(&mut rng);
            let scale: f64 = rng.random_range(0.2..5.0);
            let t = Vector3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            );
            let src: Vec<Vector3<f64>> = (0..12)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    )
                })
                .collect();
            let dst: Vec<Vector3<f64>> = src.iter().map(|p| scale * (rot * p) + t).collect();
            let (tf, rmse) = similarity_align(&src, &dst).unwrap();
            assert!(rmse < 1e-9);
            assert!((tf.scale - scale).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert!(similarity_align(&[p, p, p], &[p, p, p]).is_none());
        assert!(similarity_align(&[p], &[p]).is_none());
    }
}
