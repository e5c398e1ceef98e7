//! Trunk-centroid depth estimation and the before/after-centroid vote.
//!
//! Trunk corners are chained across four frames through the flow provider,
//! triangulated, and summarized per frame by an upper quantile of corner
//! depths (false trunk pixels tend to sit on closer foliage, so the third
//! quartile is robust against them). A landmark is counted from a side
//! only when, over a 16-frame look-back window, it was in front of the
//! trunk plane in strictly more frames than behind it.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::flow::FlowProvider;
use crate::model::{camera_depth, FrameObservation, ImageSize, Landmark};
use crate::sfm::{triangulate, Reconstruction};

/// Corner tracks span this many frames (b = 3 chain steps).
pub const CORNER_TRACK_FRAMES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrunkError {
    #[error("empty input")]
    EmptyInput,
    #[error("no corner of trunk {0} could be triangulated")]
    EmptyProfile(usize),
    #[error("vote window holds no frame with both landmark and trunk depth")]
    NoOverlappingFrames,
}

/// Corner tracks of one trunk starting at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkTrack {
    pub trunk_id: usize,
    pub start_frame: usize,
    /// One position sequence per surviving corner, each spanning
    /// [`CORNER_TRACK_FRAMES`] consecutive frames from `start_frame`.
    pub corner_tracks: Vec<Vec<Vector2<f64>>>,
}

/// Per-frame trunk depth in reconstruction units, plus the mean
/// triangulated corner position used to pair landmarks with trunks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkDepthProfile {
    pub trunk_id: usize,
    pub depth_by_frame: BTreeMap<usize, f64>,
    pub anchor: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrunkConfig {
    /// A trunk's tracking auto-starts at the first frame carrying at least
    /// this many middle-third corners.
    pub min_start_corners: usize,
    /// Explicit start frame per trunk id, overriding the automatic rule.
    pub start_frame_override: BTreeMap<usize, usize>,
    /// Forward-backward flow consistency ceiling (pixels).
    pub fb_max_error: f64,
    /// Look-back length of the centroid vote window.
    pub vote_window: usize,
    /// Depth quantile summarizing the corner cloud (0.75 = third quartile).
    pub quantile: f64,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            min_start_corners: 10,
            start_frame_override: BTreeMap::new(),
            fb_max_error: 1.0,
            vote_window: 15,
            quantile: 0.75,
        }
    }
}

/// Chain middle-third trunk corners across [`CORNER_TRACK_FRAMES`] frames
/// via the flow provider, dropping corners that fail the forward-backward
/// consistency check. Emits one [`TrunkTrack`] per (trunk, usable start
/// frame); an empty result is not an error.
pub fn build_trunk_tracks(
    frames: &[FrameObservation],
    provider: &dyn FlowProvider,
    image: &ImageSize,
    cfg: &TrunkConfig,
) -> Vec<TrunkTrack> {
    // frame -> trunk -> corner positions
    let mut corners: BTreeMap<usize, BTreeMap<usize, Vec<Vector2<f64>>>> = BTreeMap::new();
    for obs in frames {
        let per_frame = corners.entry(obs.frame).or_default();
        for c in obs.trunk_corners.as_deref().unwrap_or(&[]) {
            per_frame.entry(c.trunk_id).or_default().push(c.point);
        }
    }
    let frame_ids: Vec<usize> = corners.keys().copied().collect();
    let trunk_ids: Vec<usize> = {
        let mut ids: Vec<usize> = corners
            .values()
            .flat_map(|m| m.keys().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };

    let mut tracks = Vec::new();
    for trunk in trunk_ids {
        let middle_third_count = |f: usize| -> usize {
            corners
                .get(&f)
                .and_then(|m| m.get(&trunk))
                .map(|pts| pts.iter().filter(|p| image.in_middle_third(**p)).count())
                .unwrap_or(0)
        };
        let auto_start = cfg.start_frame_override.get(&trunk).copied().or_else(|| {
            frame_ids
                .iter()
                .copied()
                .find(|&f| middle_third_count(f) >= cfg.min_start_corners)
        });
        let Some(first_start) = auto_start else {
            continue;
        };
        for &start in frame_ids.iter().filter(|&&f| f >= first_start) {
            // The full span must exist in the stream.
            if !(1..CORNER_TRACK_FRAMES).all(|d| corners.contains_key(&(start + d))) {
                continue;
            }
            let Some(start_corners) = corners.get(&start).and_then(|m| m.get(&trunk)) else {
                continue;
            };
            let mut corner_tracks = Vec::new();
            for &origin in start_corners {
                if !image.in_middle_third(origin) {
                    continue;
                }
                let mut chain = vec![origin];
                let mut ok = true;
                for step in 0..CORNER_TRACK_FRAMES - 1 {
                    let f = start + step;
                    let pos = *chain.last().expect("non-empty chain");
                    let Some(fwd) = provider.flow(f, pos) else {
                        ok = false;
                        break;
                    };
                    let next = pos + fwd.as_vector();
                    match provider.flow_back(f + 1, next) {
                        Some(back)
                            if (fwd.as_vector() + back.as_vector()).norm()
                                <= cfg.fb_max_error =>
                        {
                            chain.push(next);
                        }
                        _ => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    corner_tracks.push(chain);
                }
            }
            if !corner_tracks.is_empty() {
                tracks.push(TrunkTrack {
                    trunk_id: trunk,
                    start_frame: start,
                    corner_tracks,
                });
            }
        }
    }
    tracks
}

/// Quantile with linear interpolation at rank `q·(n−1)` over the sorted
/// values.
pub fn depth_quantile(depths: &[f64], q: f64) -> Result<f64, TrunkError> {
    if depths.is_empty() {
        return Err(TrunkError::EmptyInput);
    }
    let mut sorted = depths.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < sorted.len() {
        Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
    } else {
        Ok(sorted[lo])
    }
}

/// Third quartile of corner depths.
pub fn trunk_depth_q3(depths: &[f64]) -> Result<f64, TrunkError> {
    depth_quantile(depths, 0.75)
}

/// Linear interpolation across interior gaps; frames outside the populated
/// range stay absent.
fn fill_gaps(depths: &BTreeMap<usize, f64>) -> BTreeMap<usize, f64> {
    let keys: Vec<usize> = depths.keys().copied().collect();
    let mut out = depths.clone();
    for w in keys.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a <= 1 {
            continue;
        }
        let (da, db) = (depths[&a], depths[&b]);
        for f in a + 1..b {
            let t = (f - a) as f64 / (b - a) as f64;
            out.insert(f, da + t * (db - da));
        }
    }
    out
}

/// Triangulate every corner track of one trunk over its four views and
/// summarize depths per frame by the configured quantile; interior gaps
/// are filled by linear interpolation.
pub fn compute_depth_profile(
    tracks: &[TrunkTrack],
    rec: &Reconstruction,
    cfg: &TrunkConfig,
) -> Result<TrunkDepthProfile, TrunkError> {
    let trunk_id = tracks.first().map(|t| t.trunk_id).ok_or(TrunkError::EmptyInput)?;
    debug_assert!(tracks.iter().all(|t| t.trunk_id == trunk_id));

    let mut per_frame: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut anchor_sum = Vector3::zeros();
    let mut anchor_count = 0usize;
    for track in tracks {
        for chain in &track.corner_tracks {
            let views: Vec<_> = chain
                .iter()
                .enumerate()
                .filter_map(|(i, pos)| {
                    rec.poses
                        .get(&(track.start_frame + i))
                        .map(|pose| (pose.clone(), *pos))
                })
                .collect();
            if views.len() < 2 {
                continue;
            }
            let Ok(point) = triangulate(&views, &rec.intrinsics) else {
                continue;
            };
            anchor_sum += point;
            anchor_count += 1;
            for (i, _) in chain.iter().enumerate() {
                let f = track.start_frame + i;
                if let Some(pose) = rec.poses.get(&f) {
                    let depth = camera_depth(pose, &point);
                    if depth > 0.0 {
                        per_frame.entry(f).or_default().push(depth);
                    }
                }
            }
        }
    }
    if anchor_count == 0 {
        return Err(TrunkError::EmptyProfile(trunk_id));
    }
    let mut depth_by_frame = BTreeMap::new();
    for (f, depths) in &per_frame {
        depth_by_frame.insert(*f, depth_quantile(depths, cfg.quantile)?);
    }
    Ok(TrunkDepthProfile {
        trunk_id,
        depth_by_frame: fill_gaps(&depth_by_frame),
        anchor: anchor_sum / anchor_count as f64,
    })
}

/// Before/after-centroid vote over the look-back window `{k−w, …, k}`:
/// frames where both the landmark and trunk depth exist compare
/// `λ_landmark < λ_trunk`. Counted only when before-votes strictly exceed
/// after-votes.
pub fn centroid_vote(
    landmark: &Landmark,
    profile: &TrunkDepthProfile,
    k: usize,
    window: usize,
) -> Result<bool, TrunkError> {
    let lo = k.saturating_sub(window);
    let mut before = 0usize;
    let mut after = 0usize;
    for f in lo..=k {
        let (Some(lam), Some(lam_t)) = (
            landmark.depth_by_frame.get(&f),
            profile.depth_by_frame.get(&f),
        ) else {
            continue;
        };
        if lam < lam_t {
            before += 1;
        } else {
            after += 1;
        }
    }
    if before + after == 0 {
        return Err(TrunkError::NoOverlappingFrames);
    }
    Ok(before > after)
}

/// Principal axis of the trunk anchors: the direction the tree row runs
/// along in reconstruction coordinates.
pub fn row_axis(anchors: &[Vector3<f64>]) -> Vector3<f64> {
    if anchors.len() < 2 {
        return Vector3::x();
    }
    let n = anchors.len() as f64;
    let mean: Vector3<f64> = anchors.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for a in anchors {
        let d = a - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let idx = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let axis = eig.eigenvectors.column(idx).into_owned();
    if axis.norm() > 1e-12 {
        axis.normalize()
    } else {
        Vector3::x()
    }
}

/// The profile whose anchor is nearest the landmark along the row axis.
pub fn nearest_profile<'a>(
    profiles: &'a [TrunkDepthProfile],
    position: &Vector3<f64>,
    axis: &Vector3<f64>,
) -> Option<&'a TrunkDepthProfile> {
    profiles.iter().min_by(|a, b| {
        let da = ((position - a.anchor).dot(axis)).abs();
        let db = ((position - b.anchor).dot(axis)).abs();
        da.total_cmp(&db)
    })
}
