//! Object-as-feature structure from motion.
//!
//! Fruit tracks are treated directly as feature matches: geometric
//! verification picks an initial pair, two-view geometry seeds the map,
//! and the remaining frames are registered incrementally with PnP while
//! new landmarks come from multi-view triangulation. Bundle adjustment
//! runs over a sliding local window, periodically globally, and once at
//! the end.

mod ba;
mod essential;
mod pnp;
mod triangulate;

pub use ba::{bundle_adjust, bundle_adjust_subset, project_with_jacobians, BaOutcome};
pub use essential::{
    decompose_essential, estimate_essential_ransac, initialize_two_view, select_initial_pair,
    TwoViewMatch,
};
pub use pnp::pnp_ransac;
pub use triangulate::{triangulate, MIN_TRIANGULATION_ANGLE_DEG};

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::model::{
    camera_depth, project, CameraIntrinsics, CameraPose, FeatureMatchSet, Landmark,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SfmError {
    #[error("need at least {needed} matches, got {got}")]
    InsufficientMatches { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no valid initial pair")]
    NoValidPair,
    #[error("no essential decomposition passes the cheirality check")]
    CheiralityFailure,
    #[error("triangulated point has non-positive depth in an observing view")]
    NegativeDepth,
    #[error("triangulation is ill-conditioned (angle below floor)")]
    IllConditioned,
    #[error("only {registered} of {total} frames registered")]
    ReconstructionTooSparse { registered: usize, total: usize },
    #[error("no pose for frame {0}")]
    MissingPose(usize),
}

/// Robust-estimation knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Inlier threshold: normalized epipolar distance for essential
    /// estimation, pixels of reprojection for PnP.
    pub inlier_threshold: f64,
    pub min_inlier_count: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl RansacConfig {
    pub fn essential_defaults() -> Self {
        Self {
            max_iterations: 1000,
            inlier_threshold: 1e-3,
            min_inlier_count: 15,
            confidence: 0.999,
            seed: 0,
        }
    }

    pub fn pnp_defaults() -> Self {
        Self {
            max_iterations: 1000,
            inlier_threshold: 2.0,
            min_inlier_count: 15,
            confidence: 0.999,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations == 0 {
            return Err("max_iterations must be >= 1".into());
        }
        if self.inlier_threshold <= 0.0 {
            return Err("inlier_threshold must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.confidence) || self.confidence == 0.0 {
            return Err("confidence must be in (0, 1)".into());
        }
        Ok(())
    }

    pub(crate) fn with_mixed_seed(&self, tag: u64) -> Self {
        let mut c = self.clone();
        c.seed = c.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(tag);
        c
    }

    /// RANSAC iteration budget for an observed inlier ratio.
    pub(crate) fn iterations_for(&self, inlier_ratio: f64, sample_size: usize) -> usize {
        if inlier_ratio <= 0.0 {
            return self.max_iterations;
        }
        if inlier_ratio >= 1.0 {
            return 1;
        }
        let denom = (1.0 - inlier_ratio.powi(sample_size as i32)).ln();
        if denom >= 0.0 {
            return self.max_iterations;
        }
        let n = ((1.0 - self.confidence).ln() / denom).ceil();
        (n as usize).clamp(1, self.max_iterations)
    }
}

/// Scheduling knobs for the incremental reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct SfmConfig {
    pub essential: RansacConfig,
    pub pnp: RansacConfig,
    /// Median triangulation angle an initial pair must reach (degrees).
    pub min_pair_angle_deg: f64,
    /// Poses in the local bundle adjustment window.
    pub local_window: usize,
    /// Run a global bundle adjustment every this many registrations.
    pub global_every: usize,
}

impl Default for SfmConfig {
    fn default() -> Self {
        Self {
            essential: RansacConfig::essential_defaults(),
            pnp: RansacConfig::pnp_defaults(),
            min_pair_angle_deg: 2.0,
            local_window: 5,
            global_every: 10,
        }
    }
}

/// One accepted 2D observation of a landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SfmObservation {
    pub landmark: u64,
    pub frame: usize,
    pub position: Vector2<f64>,
}

/// Camera poses, landmarks, and the observations tying them together.
/// The gauge is arbitrary: first registered pose is the identity and the
/// initial baseline has unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub intrinsics: CameraIntrinsics,
    pub poses: BTreeMap<usize, CameraPose>,
    pub landmarks: BTreeMap<u64, Landmark>,
    pub observations: Vec<SfmObservation>,
}

impl Reconstruction {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            intrinsics,
            poses: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            observations: Vec::new(),
        }
    }

    /// Total reprojection objective: sum of squared pixel errors over all
    /// observations (ω-weighted — absent observations simply contribute
    /// nothing).
    pub fn total_cost(&self) -> f64 {
        self.observations
            .iter()
            .map(|o| {
                let pose = &self.poses[&o.frame];
                let lm = &self.landmarks[&o.landmark];
                match project(&self.intrinsics, pose, &lm.position) {
                    Ok(p) => (p - o.position).norm_squared(),
                    Err(_) => 1e12,
                }
            })
            .sum()
    }

    /// Root-mean-square reprojection error in pixels.
    pub fn rms_reprojection(&self) -> f64 {
        if self.observations.is_empty() {
            return 0.0;
        }
        (self.total_cost() / self.observations.len() as f64).sqrt()
    }

    /// Apply a global similarity transform `X' = s·R·X + t` to the map and
    /// the corresponding gauge change to every pose.
    pub fn apply_similarity(&mut self, scale: f64, rotation: &Matrix3<f64>, translation: &Vector3<f64>) {
        for lm in self.landmarks.values_mut() {
            lm.position = scale * (rotation * lm.position) + translation;
        }
        let frames: Vec<usize> = self.poses.keys().copied().collect();
        for f in frames {
            let pose = &self.poses[&f];
            let r_new = pose.rotation() * rotation.transpose();
            let t_new = scale * pose.translation() - r_new * translation;
            self.poses.insert(
                f,
                CameraPose::new(r_new, t_new).expect("similarity preserves orthonormality"),
            );
        }
        self.refresh_depths();
    }

    /// Recompute every landmark's per-frame depth from the current poses.
    pub fn refresh_depths(&mut self) {
        for lm in self.landmarks.values_mut() {
            lm.depth_by_frame = lm
                .observed_frames
                .iter()
                .filter_map(|f| {
                    self.poses
                        .get(f)
                        .map(|p| (*f, camera_depth(p, &lm.position)))
                })
                .collect();
        }
    }

    /// Check the structural invariants; used by tests and debug builds.
    pub fn validate(&self) -> Result<(), SfmError> {
        for o in &self.observations {
            if !self.poses.contains_key(&o.frame) {
                return Err(SfmError::MissingPose(o.frame));
            }
            if !self.landmarks.contains_key(&o.landmark) {
                return Err(SfmError::DegenerateConfiguration(format!(
                    "observation references missing landmark {}",
                    o.landmark
                )));
            }
        }
        if !self.total_cost().is_finite() {
            return Err(SfmError::DegenerateConfiguration(
                "non-finite reprojection cost".into(),
            ));
        }
        Ok(())
    }
}

/// Incremental reconstruction over a feature match set.
///
/// When registration stalls with the best-ranked initial pair (a noisy
/// two-view geometry the remaining frames reject), the next-ranked pairs
/// are tried before giving up.
pub fn reconstruct(
    mf: &FeatureMatchSet,
    intr: &CameraIntrinsics,
    cfg: &SfmConfig,
) -> Result<Reconstruction, SfmError> {
    let pairs = essential::ranked_initial_pairs(mf, intr, cfg);
    if pairs.is_empty() {
        return Err(SfmError::NoValidPair);
    }
    let mut last_err = SfmError::NoValidPair;
    for pair in pairs.into_iter().take(5) {
        match reconstruct_from_pair(mf, intr, cfg, pair) {
            Ok(rec) => return Ok(rec),
            Err(e) => last_err = e,
        }
    }
    Err(last_err)
}

fn reconstruct_from_pair(
    mf: &FeatureMatchSet,
    intr: &CameraIntrinsics,
    cfg: &SfmConfig,
    (k1, k2): (usize, usize),
) -> Result<Reconstruction, SfmError> {
    let by_frame = mf.by_frame();
    let all_frames: Vec<usize> = by_frame.keys().copied().collect();
    if all_frames.len() < 2 {
        return Err(SfmError::NoValidPair);
    }
    let matches = shared_matches(mf, k1, k2);
    let mut rec = initialize_two_view((k1, k2), &matches, intr, &cfg.essential)?;

    let mut registered_order = vec![k1, k2];
    let mut registered: BTreeSet<usize> = registered_order.iter().copied().collect();
    let mut failed: BTreeSet<usize> = BTreeSet::new();
    let mut registrations = 0usize;

    run_local_ba(&mut rec, &registered_order, cfg);

    loop {
        // Try to triangulate tracks that gained enough registered views.
        triangulate_new_tracks(&mut rec, mf, &registered, cfg);

        // Next frame: the one sharing the most observations with the map.
        let candidate = all_frames
            .iter()
            .copied()
            .filter(|f| !registered.contains(f) && !failed.contains(f))
            .map(|f| {
                let count = by_frame[&f]
                    .iter()
                    .filter(|(ti, _)| rec.landmarks.contains_key(&mf.tracks[*ti].id))
                    .count();
                (count, f)
            })
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        let Some((shared, frame)) = candidate else {
            break;
        };
        if shared < 6 {
            break;
        }

        let corr: Vec<(Vector3<f64>, Vector2<f64>)> = by_frame[&frame]
            .iter()
            .filter_map(|(ti, pos)| {
                rec.landmarks
                    .get(&mf.tracks[*ti].id)
                    .map(|lm| (lm.position, *pos))
            })
            .collect();
        let corr_tracks: Vec<u64> = by_frame[&frame]
            .iter()
            .filter(|(ti, _)| rec.landmarks.contains_key(&mf.tracks[*ti].id))
            .map(|(ti, _)| mf.tracks[*ti].id)
            .collect();

        match pnp_ransac(&corr, intr, &cfg.pnp.with_mixed_seed(frame as u64)) {
            Ok((pose, inliers)) => {
                rec.poses.insert(frame, pose);
                for (idx, ok) in inliers.iter().enumerate() {
                    if *ok {
                        add_observation(&mut rec, corr_tracks[idx], frame, corr[idx].1);
                    }
                }
                registered.insert(frame);
                registered_order.push(frame);
                registrations += 1;

                triangulate_new_tracks(&mut rec, mf, &registered, cfg);
                run_local_ba(&mut rec, &registered_order, cfg);
                if registrations % cfg.global_every == 0 {
                    run_global_ba(&mut rec, k1);
                }
            }
            Err(e) => {
                if std::env::var_os("ORCHARD_SFM_TRACE").is_some() {
                    eprintln!("pnp failed for frame {frame} ({shared} corr): {e}");
                }
                failed.insert(frame);
            }
        }
    }

    if registered.len() * 2 < all_frames.len() {
        return Err(SfmError::ReconstructionTooSparse {
            registered: registered.len(),
            total: all_frames.len(),
        });
    }

    run_global_ba(&mut rec, k1);
    enforce_cheirality(&mut rec);
    normalize_gauge(&mut rec, k1, k2);
    finalize_attributes(&mut rec, mf);
    debug_assert!(rec.validate().is_ok());
    Ok(rec)
}

/// Shared tracks of two frames as two-view matches.
pub fn shared_matches(mf: &FeatureMatchSet, k1: usize, k2: usize) -> Vec<TwoViewMatch> {
    mf.tracks
        .iter()
        .filter_map(|t| {
            let a = t.position_at(k1)?;
            let b = t.position_at(k2)?;
            Some(TwoViewMatch {
                track_id: t.id,
                first: a,
                second: b,
                area: t.area_at(k2).unwrap_or(1.0),
            })
        })
        .collect()
}

fn add_observation(rec: &mut Reconstruction, landmark: u64, frame: usize, position: Vector2<f64>) {
    let lm = rec.landmarks.get_mut(&landmark).expect("landmark exists");
    if lm.observed_frames.insert(frame) {
        rec.observations.push(SfmObservation {
            landmark,
            frame,
            position,
        });
    }
}

fn triangulate_new_tracks(
    rec: &mut Reconstruction,
    mf: &FeatureMatchSet,
    registered: &BTreeSet<usize>,
    cfg: &SfmConfig,
) {
    for track in &mf.tracks {
        if rec.landmarks.contains_key(&track.id) {
            continue;
        }
        let views: Vec<(usize, Vector2<f64>)> = track
            .iter()
            .filter(|(f, _)| registered.contains(f))
            .collect();
        if views.len() < 2 {
            continue;
        }
        let obs: Vec<(CameraPose, Vector2<f64>)> = views
            .iter()
            .map(|(f, p)| (rec.poses[f].clone(), *p))
            .collect();
        let Ok(point) = triangulate(&obs, &rec.intrinsics) else {
            continue;
        };
        // Keep only views that actually fit the triangulated point.
        let inlier_views: Vec<(usize, Vector2<f64>)> = views
            .iter()
            .copied()
            .filter(|(f, p)| {
                project(&rec.intrinsics, &rec.poses[f], &point)
                    .map(|q| (q - p).norm() < cfg.pnp.inlier_threshold)
                    .unwrap_or(false)
            })
            .collect();
        if inlier_views.len() < 2 {
            continue;
        }
        rec.landmarks.insert(
            track.id,
            Landmark {
                id: track.id,
                position: point,
                last_box_area: 1.0,
                observed_frames: BTreeSet::new(),
                depth_by_frame: BTreeMap::new(),
            },
        );
        for (f, p) in inlier_views {
            add_observation(rec, track.id, f, p);
        }
    }
}

fn run_local_ba(rec: &mut Reconstruction, registered_order: &[usize], cfg: &SfmConfig) {
    let window: BTreeSet<usize> = registered_order
        .iter()
        .rev()
        .take(cfg.local_window)
        .copied()
        .collect();
    let mut fixed: BTreeSet<usize> = rec
        .poses
        .keys()
        .filter(|f| !window.contains(f))
        .copied()
        .collect();
    if fixed.is_empty() {
        fixed.insert(registered_order[0]);
    }
    let landmarks: BTreeSet<u64> = rec
        .observations
        .iter()
        .filter(|o| window.contains(&o.frame))
        .map(|o| o.landmark)
        .collect();
    let outcome = bundle_adjust_subset(rec, &fixed, Some(&landmarks), 100);
    *rec = outcome.reconstruction;
}

fn run_global_ba(rec: &mut Reconstruction, gauge_frame: usize) {
    let fixed: BTreeSet<usize> = [gauge_frame].into_iter().collect();
    let outcome = bundle_adjust(rec, &fixed);
    *rec = outcome.reconstruction;
}

/// Drop observations with non-positive depth, then landmarks left with
/// fewer than two views.
fn enforce_cheirality(rec: &mut Reconstruction) {
    let bad: Vec<(u64, usize)> = rec
        .observations
        .iter()
        .filter(|o| camera_depth(&rec.poses[&o.frame], &rec.landmarks[&o.landmark].position) <= 0.0)
        .map(|o| (o.landmark, o.frame))
        .collect();
    for (lm, f) in &bad {
        if let Some(l) = rec.landmarks.get_mut(lm) {
            l.observed_frames.remove(f);
        }
    }
    rec.observations
        .retain(|o| !bad.contains(&(o.landmark, o.frame)));
    let dead: Vec<u64> = rec
        .landmarks
        .values()
        .filter(|l| l.observed_frames.len() < 2)
        .map(|l| l.id)
        .collect();
    rec.landmarks.retain(|id, _| !dead.contains(id));
    rec.observations.retain(|o| !dead.contains(&o.landmark));
}

/// Rescale so the initial baseline has unit length (the first pose is the
/// identity already).
fn normalize_gauge(rec: &mut Reconstruction, k1: usize, k2: usize) {
    let (Some(p1), Some(p2)) = (rec.poses.get(&k1), rec.poses.get(&k2)) else {
        return;
    };
    let baseline = (p1.center() - p2.center()).norm();
    if baseline > 1e-12 {
        rec.apply_similarity(1.0 / baseline, &Matrix3::identity(), &Vector3::zeros());
    }
}

/// Populate observability-derived attributes from the final geometry.
fn finalize_attributes(rec: &mut Reconstruction, mf: &FeatureMatchSet) {
    let area_by_id: BTreeMap<u64, &crate::model::FruitTrack> =
        mf.tracks.iter().map(|t| (t.id, t)).collect();
    rec.observations.sort_by_key(|o| (o.landmark, o.frame));
    rec.refresh_depths();
    for lm in rec.landmarks.values_mut() {
        if let (Some(track), Some(last)) = (area_by_id.get(&lm.id), lm.observed_frames.last()) {
            if let Some(area) = track.area_at(*last) {
                lm.last_box_area = area;
            }
        }
    }
}
