//! Landmark re-association: project every 3D landmark into every frame and
//! re-match projections to detections with an age-biased Hungarian cost.
//! Landmarks that lose the competition for detections are discarded, which
//! removes double-tracked fruits without any 3D distance threshold.

use std::collections::BTreeMap;

use nalgebra::Vector2;
use thiserror::Error;

use crate::assign::hungarian_assign;
use crate::model::{
    box_overlap, camera_depth, project, BoundingBox, Detection, FeatureMatchSet, FrameObservation,
    FruitTrack, ImageSize,
};
use crate::sfm::{Reconstruction, SfmObservation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReassocError {
    #[error("no pose for frame {0}")]
    MissingPose(usize),
    #[error("invalid re-association parameters: {0}")]
    InvalidParams(String),
}

/// Age-bias parameters of the landmark assignment cost.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeCostParams {
    /// Age threshold beyond which the age cost vanishes.
    pub o0: usize,
    /// Weight of the age term.
    pub w_o: f64,
}

impl Default for AgeCostParams {
    fn default() -> Self {
        Self { o0: 7, w_o: 0.5 }
    }
}

impl AgeCostParams {
    pub fn validate(&self) -> Result<(), ReassocError> {
        if self.o0 < 1 {
            return Err(ReassocError::InvalidParams("o0 must be >= 1".into()));
        }
        if self.w_o < 0.0 {
            return Err(ReassocError::InvalidParams("w_o must be >= 0".into()));
        }
        Ok(())
    }

    /// Largest value the age cost can take (age 1).
    pub fn max_cost(&self) -> f64 {
        age_cost(1, self)
    }
}

/// Age cost `w_O · max(0, 1 − (O − O₀)/O₀)`: old landmarks bid lower.
pub fn age_cost(age: usize, params: &AgeCostParams) -> f64 {
    let o = age as f64;
    let o0 = params.o0 as f64;
    params.w_o * (1.0 - (o - o0) / o0).max(0.0)
}

/// Assignment cost between a projected landmark and a detection: squared
/// pixel distance normalized by the area sum, the box-overlap complement
/// (the landmark box is square with its stored area), and the age cost.
pub fn landmark_cost(
    projection: Vector2<f64>,
    landmark_area: f64,
    age: usize,
    det: &Detection,
    params: &AgeCostParams,
) -> f64 {
    let lm_box = BoundingBox::square(projection, landmark_area)
        .expect("landmark areas are positive");
    let gamma = box_overlap(&lm_box, &det.bbox);
    let dist2 = (projection - det.center()).norm_squared();
    dist2 / (landmark_area + det.area()) + (1.0 - gamma) + age_cost(age, params)
}

/// Tunables of the re-association sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ReassocConfig {
    pub age: AgeCostParams,
    /// Geometric cost ceiling; the full gate adds the maximum age cost so
    /// a brand-new landmark can still claim a coincident detection.
    pub base_gate: f64,
    /// Minimum number of matched frames for a landmark to survive.
    pub min_track_length: usize,
    pub image: ImageSize,
}

impl ReassocConfig {
    pub fn new(image: ImageSize) -> Self {
        Self {
            age: AgeCostParams::default(),
            base_gate: 2.0,
            min_track_length: 3,
            image,
        }
    }

    pub fn gate(&self) -> f64 {
        self.base_gate + self.age.max_cost()
    }
}

/// Result of the re-association sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ReassocOutcome {
    /// The input reconstruction minus discarded landmarks, with refreshed
    /// observability, ages, and box areas.
    pub reconstruction: Reconstruction,
    /// Refreshed per-fruit tracks (detection centers where matched, the
    /// landmark's projection bridging unmatched frames in between).
    pub matches: FeatureMatchSet,
    pub discarded: Vec<u64>,
}

struct LandmarkSweep {
    box_area: f64,
    matched: Vec<(usize, Vector2<f64>, f64)>,
}

impl LandmarkSweep {
    /// Age as of the current frame: refreshed observations so far. The
    /// sweep rewrites the observability history, so the count restarts at
    /// the floor of one; ties between fresh landmarks resolve towards the
    /// earlier (lower-id) one, which keeps the first-seen landmark ahead
    /// from then on.
    fn age(&self) -> usize {
        self.matched.len().max(1)
    }
}

/// Sweep all frames in ascending order, re-associating landmarks with
/// detections; discard landmarks matched in fewer than
/// `cfg.min_track_length` frames.
pub fn reassociate(
    rec: &Reconstruction,
    frames: &[FrameObservation],
    cfg: &ReassocConfig,
) -> Result<ReassocOutcome, ReassocError> {
    cfg.age.validate()?;
    let gate = cfg.gate();

    let mut sweep: BTreeMap<u64, LandmarkSweep> = rec
        .landmarks
        .values()
        .map(|lm| {
            (
                lm.id,
                LandmarkSweep {
                    box_area: lm.last_box_area,
                    matched: Vec::new(),
                },
            )
        })
        .collect();

    for obs in frames {
        let pose = rec
            .poses
            .get(&obs.frame)
            .ok_or(ReassocError::MissingPose(obs.frame))?;
        if obs.detections.is_empty() {
            continue;
        }
        // Landmarks in front of the camera and inside the image compete.
        let rows: Vec<(u64, Vector2<f64>)> = rec
            .landmarks
            .values()
            .filter(|lm| camera_depth(pose, &lm.position) > 0.0)
            .filter_map(|lm| {
                project(&rec.intrinsics, pose, &lm.position)
                    .ok()
                    .filter(|p| cfg.image.contains(*p))
                    .map(|p| (lm.id, p))
            })
            .collect();
        if rows.is_empty() {
            continue;
        }
        let cost: Vec<Vec<f64>> = rows
            .iter()
            .map(|(id, proj)| {
                let st = &sweep[id];
                obs.detections
                    .iter()
                    .map(|d| landmark_cost(*proj, st.box_area, st.age(), d, &cfg.age))
                    .collect()
            })
            .collect();
        let pairs = hungarian_assign(&cost, gate);
        // Age and box updates apply between frames (the match list feeds
        // the next frame's ages), so earlier matches strengthen later
        // claims.
        for (i, j) in pairs {
            let (id, _) = rows[i];
            let det = &obs.detections[j];
            let st = sweep.get_mut(&id).expect("swept landmark");
            st.matched.push((obs.frame, det.center(), det.area()));
            st.box_area = det.area();
        }
    }

    let mut pruned = rec.clone();
    let mut matches = FeatureMatchSet::new();
    let mut discarded = Vec::new();
    for (id, st) in &sweep {
        if st.matched.len() < cfg.min_track_length {
            discarded.push(*id);
            continue;
        }
        if let Some(track) = refreshed_track(rec, *id, &st.matched) {
            matches.push(track);
        }
        let lm = pruned.landmarks.get_mut(id).expect("landmark exists");
        lm.observed_frames = st.matched.iter().map(|(f, _, _)| *f).collect();
        lm.last_box_area = st.matched.last().expect("non-empty").2;
    }
    pruned.landmarks.retain(|id, _| !discarded.contains(id));
    pruned.observations = {
        let mut obs: Vec<SfmObservation> = Vec::new();
        for (id, st) in &sweep {
            if discarded.contains(id) {
                continue;
            }
            for (f, p, _) in &st.matched {
                obs.push(SfmObservation {
                    landmark: *id,
                    frame: *f,
                    position: *p,
                });
            }
        }
        obs.sort_by_key(|o| (o.landmark, o.frame));
        obs
    };
    pruned.refresh_depths();

    Ok(ReassocOutcome {
        reconstruction: pruned,
        matches,
        discarded,
    })
}

/// Build a consecutive-frame track over the matched span, bridging
/// unmatched interior frames with the landmark's projection (falling back
/// to linear interpolation when no pose or depth is available).
fn refreshed_track(
    rec: &Reconstruction,
    id: u64,
    matched: &[(usize, Vector2<f64>, f64)],
) -> Option<FruitTrack> {
    let first = matched.first()?.0;
    let last = matched.last()?.0;
    let by_frame: BTreeMap<usize, (Vector2<f64>, f64)> = matched
        .iter()
        .map(|(f, p, a)| (*f, (*p, *a)))
        .collect();
    let lm = &rec.landmarks[&id];

    let mut points: Vec<Option<Vector2<f64>>> = Vec::with_capacity(last - first + 1);
    let mut areas: Vec<f64> = Vec::with_capacity(last - first + 1);
    let mut last_area = matched.first()?.2;
    for f in first..=last {
        if let Some((p, a)) = by_frame.get(&f) {
            points.push(Some(*p));
            last_area = *a;
        } else {
            let bridged = rec
                .poses
                .get(&f)
                .and_then(|pose| project(&rec.intrinsics, pose, &lm.position).ok());
            points.push(bridged);
        }
        areas.push(last_area);
    }
    // Interpolate any frames that could not be bridged by projection.
    let filled: Vec<Vector2<f64>> = {
        let n = points.len();
        (0..n)
            .map(|i| {
                if let Some(p) = points[i] {
                    return p;
                }
                let prev = (0..i).rev().find_map(|j| points[j].map(|p| (j, p)));
                let next = (i + 1..n).find_map(|j| points[j].map(|p| (j, p)));
                match (prev, next) {
                    (Some((j0, p0)), Some((j1, p1))) => {
                        let t = (i - j0) as f64 / (j1 - j0) as f64;
                        p0 + (p1 - p0) * t
                    }
                    (Some((_, p)), None) | (None, Some((_, p))) => p,
                    (None, None) => Vector2::zeros(),
                }
            })
            .collect()
    };
    FruitTrack::new(id, first, filled, areas).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CameraIntrinsics, CameraPose, Landmark};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use std::collections::BTreeSet;

    #[test]
    fn age_cost_fixtures() {
        let p = AgeCostParams::default();
        assert_relative_eq!(age_cost(7, &p), 0.5, epsilon = 1e-15);
        assert_relative_eq!(age_cost(14, &p), 0.0, epsilon = 1e-15);
        assert_relative_eq!(age_cost(1, &p), 13.0 / 14.0, epsilon = 1e-15);
    }

    fn det_at(frame: usize, u: f64, v: f64, area: f64) -> Detection {
        let side = area.sqrt();
        Detection::new(
            frame,
            BoundingBox::new(Vector2::new(u, v), side, side).unwrap(),
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn landmark_cost_fixtures() {
        let p = AgeCostParams::default();
        let det = det_at(0, 100.0, 100.0, 100.0);
        let proj = Vector2::new(100.0, 100.0);
        assert_relative_eq!(landmark_cost(proj, 100.0, 14, &det, &p), 0.0, epsilon = 1e-12);
        assert_relative_eq!(landmark_cost(proj, 100.0, 7, &det, &p), 0.5, epsilon = 1e-12);
        for age in 1..20 {
            let younger = landmark_cost(proj, 100.0, age, &det, &p);
            let older = landmark_cost(proj, 100.0, age + 1, &det, &p);
            assert!(older <= younger);
        }
    }

    fn toy_reconstruction(landmarks: &[(u64, Vector3<f64>, usize)]) -> Reconstruction {
        let intr = CameraIntrinsics::new(100.0, 100.0, 100.0, 100.0).unwrap();
        let mut rec = Reconstruction::new(intr);
        for k in 0..6usize {
            rec.poses.insert(k, CameraPose::identity());
        }
        for (id, pos, age) in landmarks {
            rec.landmarks.insert(
                *id,
                Landmark {
                    id: *id,
                    position: *pos,
                    last_box_area: 100.0,
                    observed_frames: (0..*age).collect::<BTreeSet<_>>(),
                    depth_by_frame: BTreeMap::new(),
                },
            );
        }
        rec
    }

    fn frames_with_one_detection(n: usize) -> Vec<FrameObservation> {
        (0..n)
            .map(|k| FrameObservation {
                frame: k,
                detections: vec![det_at(k, 100.0, 100.0, 100.0)],
                flows: None,
                trunk_corners: None,
            })
            .collect()
    }

    #[test]
    fn exactly_one_coincident_landmark_survives() {
        // Two coincident landmarks competing for one detection: the
        // first-seen one wins the opening tie, its refreshed age grows,
        // and the newer landmark never matches again.
        let rec = toy_reconstruction(&[
            (0, Vector3::new(0.0, 0.0, 2.0), 18),
            (7, Vector3::new(0.0, 0.0, 2.0), 21),
        ]);
        let cfg = ReassocConfig::new(ImageSize { width: 200, height: 200 });
        let out = reassociate(&rec, &frames_with_one_detection(6), &cfg).unwrap();
        assert_eq!(out.discarded, vec![7]);
        assert_eq!(out.reconstruction.landmarks.len(), 1);
        assert!(out.reconstruction.landmarks.contains_key(&0));
        assert_eq!(out.matches.tracks.len(), 1);
        assert_eq!(out.matches.tracks[0].len(), 6);
        // The survivor's refreshed age is the larger one.
        assert_eq!(out.reconstruction.landmarks[&0].age(), 6);
    }

    #[test]
    fn sweep_age_bias_is_strict_once_established() {
        // Whoever wins the first frame keeps winning: after one match the
        // survivor's age cost is strictly below the loser's.
        let p = AgeCostParams::default();
        assert!(age_cost(2, &p) < age_cost(1, &p));
        let rec = toy_reconstruction(&[
            (3, Vector3::new(0.0, 0.0, 2.0), 4),
            (9, Vector3::new(0.0, 0.0, 2.0), 4),
        ]);
        let cfg = ReassocConfig::new(ImageSize { width: 200, height: 200 });
        let out = reassociate(&rec, &frames_with_one_detection(6), &cfg).unwrap();
        assert_eq!(out.discarded, vec![9]);
    }

    #[test]
    fn behind_camera_landmark_is_excluded() {
        let rec = toy_reconstruction(&[
            (0, Vector3::new(0.0, 0.0, -3.0), 10),
            (1, Vector3::new(0.0, 0.0, 2.0), 1),
        ]);
        let cfg = ReassocConfig::new(ImageSize { width: 200, height: 200 });
        let out = reassociate(&rec, &frames_with_one_detection(6), &cfg).unwrap();
        // The behind-camera landmark never competes, so the young one wins.
        assert_eq!(out.discarded, vec![0]);
        assert!(out.reconstruction.landmarks.contains_key(&1));
    }

    #[test]
    fn never_creates_landmarks() {
        let rec = toy_reconstruction(&[(0, Vector3::new(0.0, 0.0, 2.0), 5)]);
        let cfg = ReassocConfig::new(ImageSize { width: 200, height: 200 });
        let out = reassociate(&rec, &frames_with_one_detection(6), &cfg).unwrap();
        assert!(out.reconstruction.landmarks.len() <= rec.landmarks.len());
        for id in out.reconstruction.landmarks.keys() {
            assert!(rec.landmarks.contains_key(id));
        }
    }

    #[test]
    fn missing_pose_is_an_error() {
        let rec = toy_reconstruction(&[(0, Vector3::new(0.0, 0.0, 2.0), 5)]);
        let cfg = ReassocConfig::new(ImageSize { width: 200, height: 200 });
        let mut frames = frames_with_one_detection(6);
        frames[3].frame = 99;
        let err = reassociate(&rec, &frames, &cfg);
        assert!(matches!(err, Err(ReassocError::MissingPose(99))));
    }

    #[test]
    fn survivors_meet_min_track_length() {
        let rec = toy_reconstruction(&[(0, Vector3::new(0.0, 0.0, 2.0), 5)]);
        let cfg = ReassocConfig::new(ImageSize { width: 200, height: 200 });
        // Only two frames' worth of detections: below the floor.
        let out = reassociate(&rec, &frames_with_one_detection(2), &cfg).unwrap();
        assert_eq!(out.discarded, vec![0]);
        assert!(out.matches.is_empty());
    }
}
