//! Shared geometric and observational domain types.
//!
//! Pixel coordinates are `(u, v) = (row, column)` throughout the crate.
//! Extrinsics follow the world-to-camera convention `x_cam = R * X + T`;
//! the camera looks down its local +z axis.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Depth below which a point counts as on or behind the image plane.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-12;

/// Orthonormality tolerance for rotation matrices (`‖RᵀR − I‖∞`).
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("point has non-positive depth {0:.3e} in the camera frame")]
    NonPositiveDepth(f64),
    #[error("rotation is not orthonormal with det +1 (‖RᵀR−I‖∞ = {0:.3e})")]
    InvalidRotation(f64),
    #[error("invalid bounding box: width {width}, height {height}")]
    InvalidBox { width: f64, height: f64 },
    #[error("invalid intrinsics: fx {fx}, fy {fy}")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("detection score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("flow vector is not finite")]
    NonFiniteFlow,
    #[error("track frames must be consecutive and non-empty")]
    BadTrack,
}

/// Which side of the tree row a pass was recorded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Side {
    East,
    West,
}

impl Side {
    pub fn label(&self) -> &'static str {
        match self {
            Side::East => "east",
            Side::West => "west",
        }
    }
}

/// Image bounds in pixels; rows (u) span `height`, columns (v) span `width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn contains(&self, p: Vector2<f64>) -> bool {
        p.x >= 0.0 && p.x < self.height as f64 && p.y >= 0.0 && p.y < self.width as f64
    }

    /// Middle third of the image width (the v/column axis).
    pub fn in_middle_third(&self, p: Vector2<f64>) -> bool {
        let w = self.width as f64;
        p.y >= w / 3.0 && p.y <= 2.0 * w / 3.0
    }
}

/// Pinhole intrinsics (skew fixed to zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, ModelError> {
        if !(fx > 0.0 && fy > 0.0 && cx.is_finite() && cy.is_finite()) {
            return Err(ModelError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Pixel position to normalized camera coordinates at unit depth.
    pub fn normalize(&self, p: Vector2<f64>) -> Vector2<f64> {
        Vector2::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy)
    }
}

/// World-to-camera extrinsics: `x_cam = R * X + T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, ModelError> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let dev = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if dev >= ROTATION_TOL || rotation.determinant() <= 0.0 {
            return Err(ModelError::InvalidRotation(dev));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// World point into the camera frame.
    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Camera center in world coordinates (`-Rᵀ T`).
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Axis-aligned box; `width` spans columns (v), `height` spans rows (u).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub center: Vector2<f64>,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(center: Vector2<f64>, width: f64, height: f64) -> Result<Self, ModelError> {
        if !(width > 0.0 && height > 0.0 && center.x.is_finite() && center.y.is_finite()) {
            return Err(ModelError::InvalidBox { width, height });
        }
        Ok(Self {
            center,
            width,
            height,
        })
    }

    /// Square box of the given area.
    pub fn square(center: Vector2<f64>, area: f64) -> Result<Self, ModelError> {
        let side = area.sqrt();
        Self::new(center, side, side)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Same box translated to a new center.
    pub fn at(&self, center: Vector2<f64>) -> Self {
        Self { center, ..*self }
    }
}

/// One detector output in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BoundingBox,
    pub score: f64,
}

impl Detection {
    pub fn new(frame: usize, bbox: BoundingBox, score: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(ModelError::InvalidScore(score));
        }
        Ok(Self { frame, bbox, score })
    }

    pub fn center(&self) -> Vector2<f64> {
        self.bbox.center
    }

    pub fn area(&self) -> f64 {
        self.bbox.area()
    }
}

/// Pixel displacement per frame interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowVector {
    pub du: f64,
    pub dv: f64,
}

impl FlowVector {
    pub fn new(du: f64, dv: f64) -> Result<Self, ModelError> {
        if !(du.is_finite() && dv.is_finite()) {
            return Err(ModelError::NonFiniteFlow);
        }
        Ok(Self { du, dv })
    }

    pub fn zero() -> Self {
        Self { du: 0.0, dv: 0.0 }
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.du, self.dv)
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }
}

/// A trunk corner point tagged with its trunk id.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkCorner {
    pub trunk_id: usize,
    pub point: Vector2<f64>,
}

/// Everything the pipeline ingests for one frame.
///
/// `flows`, when present, is index-aligned with `detections` and holds the
/// displacement of each detection towards the *next* frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameObservation {
    pub frame: usize,
    pub detections: Vec<Detection>,
    pub flows: Option<Vec<FlowVector>>,
    pub trunk_corners: Option<Vec<TrunkCorner>>,
}

impl FrameObservation {
    pub fn validate(&self) -> Result<(), ModelError> {
        if let Some(flows) = &self.flows {
            if flows.len() != self.detections.len() {
                return Err(ModelError::BadTrack);
            }
        }
        Ok(())
    }
}

/// A reconstructed 3D fruit with its observability history.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: u64,
    /// 3D position in reconstruction units (arbitrary gauge).
    pub position: Vector3<f64>,
    /// Detector box area (pixels²) in the last frame where observed.
    pub last_box_area: f64,
    /// Frames where the landmark was observed (the set bits of ω).
    pub observed_frames: BTreeSet<usize>,
    /// Camera-frame depth λ per observed frame.
    pub depth_by_frame: BTreeMap<usize, f64>,
}

impl Landmark {
    /// Number of frames where the landmark has been observed.
    pub fn age(&self) -> usize {
        self.observed_frames.len()
    }

    pub fn first_frame(&self) -> Option<usize> {
        self.observed_frames.first().copied()
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.observed_frames.last().copied()
    }
}

/// One fruit's filtered 2D positions over a run of consecutive frames.
///
/// `areas` carries the matched detection's box area per frame so downstream
/// stages can seed landmark box areas without re-reading the detections.
#[derive(Debug, Clone, PartialEq)]
pub struct FruitTrack {
    pub id: u64,
    pub start_frame: usize,
    pub points: Vec<Vector2<f64>>,
    pub areas: Vec<f64>,
}

impl FruitTrack {
    pub fn new(
        id: u64,
        start_frame: usize,
        points: Vec<Vector2<f64>>,
        areas: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if points.len() < 2 || points.len() != areas.len() {
            return Err(ModelError::BadTrack);
        }
        Ok(Self {
            id,
            start_frame,
            points,
            areas,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn end_frame(&self) -> usize {
        self.start_frame + self.points.len() - 1
    }

    /// Iterate `(frame, position)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (usize, Vector2<f64>)> + '_ {
        self.points
            .iter()
            .enumerate()
            .map(|(i, p)| (self.start_frame + i, *p))
    }

    pub fn position_at(&self, frame: usize) -> Option<Vector2<f64>> {
        if frame < self.start_frame {
            return None;
        }
        self.points.get(frame - self.start_frame).copied()
    }

    pub fn area_at(&self, frame: usize) -> Option<f64> {
        if frame < self.start_frame {
            return None;
        }
        self.areas.get(frame - self.start_frame).copied()
    }
}

/// Per-fruit sequences of 2D positions used as feature matches by the SfM
/// stage (the tracker's output set and its refined variant).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMatchSet {
    pub tracks: Vec<FruitTrack>,
}

impl FeatureMatchSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, track: FruitTrack) {
        self.tracks.push(track);
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Frames covered by at least one track.
    pub fn frames(&self) -> BTreeSet<usize> {
        self.tracks.iter().flat_map(|t| t.iter().map(|(k, _)| k)).collect()
    }

    /// Per-frame index: frame -> [(track index, position)].
    pub fn by_frame(&self) -> BTreeMap<usize, Vec<(usize, Vector2<f64>)>> {
        let mut map: BTreeMap<usize, Vec<(usize, Vector2<f64>)>> = BTreeMap::new();
        for (ti, track) in self.tracks.iter().enumerate() {
            for (frame, p) in track.iter() {
                map.entry(frame).or_default().push((ti, p));
            }
        }
        map
    }
}

/// Project a world point to pixel coordinates.
///
/// Errors with [`ModelError::NonPositiveDepth`] when the camera-frame depth
/// is at or below [`MIN_PROJECTION_DEPTH`].
pub fn project(
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    x: &Vector3<f64>,
) -> Result<Vector2<f64>, ModelError> {
    let c = pose.to_camera(x);
    if c.z <= MIN_PROJECTION_DEPTH {
        return Err(ModelError::NonPositiveDepth(c.z));
    }
    Ok(Vector2::new(
        intr.fx * c.x / c.z + intr.cx,
        intr.fy * c.y / c.z + intr.cy,
    ))
}

/// Invert [`project`] along the viewing ray at a given camera-frame depth.
pub fn back_project(
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    p: Vector2<f64>,
    depth: f64,
) -> Vector3<f64> {
    let n = intr.normalize(p);
    let cam = Vector3::new(n.x * depth, n.y * depth, depth);
    pose.rotation().transpose() * (cam - pose.translation())
}

/// Squared pixel distance between a projection and an observation.
pub fn reprojection_error(projected: Vector2<f64>, observed: Vector2<f64>) -> f64 {
    (projected - observed).norm_squared()
}

/// Camera-frame depth (z component of `R·X + T`); may be non-positive.
pub fn camera_depth(pose: &CameraPose, x: &Vector3<f64>) -> f64 {
    pose.to_camera(x).z
}

/// Intersection over union of two boxes. Symmetric, in [0, 1].
pub fn box_overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let overlap_1d = |ca: f64, ea: f64, cb: f64, eb: f64| -> f64 {
        let lo = (ca - ea / 2.0).max(cb - eb / 2.0);
        let hi = (ca + ea / 2.0).min(cb + eb / 2.0);
        (hi - lo).max(0.0)
    };
    let iu = overlap_1d(a.center.x, a.height, b.center.x, b.height);
    let iv = overlap_1d(a.center.y, a.width, b.center.y, b.width);
    let inter = iu * iv;
    let union = a.area() + b.area() - inter;
    // Cancellation in the union can push the ratio a few ulps past 1.
    (inter / union).clamp(0.0, 1.0)
}
