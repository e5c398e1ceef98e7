//! Final match refinement, the end-to-end counting pipeline, and the
//! evaluation metrics (L1 count loss, per-tree error statistics, and the
//! estimate-vs-truth regression).

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::Vector3;
use thiserror::Error;

use crate::flow::FlowProvider;
use crate::model::{
    CameraIntrinsics, FeatureMatchSet, FrameObservation, FruitTrack, ImageSize, Side,
};
use crate::reassoc::{reassociate, AgeCostParams, ReassocConfig};
use crate::sfm::{reconstruct, Reconstruction, SfmConfig};
use crate::track::{run_tracking, KfModel, TrackerConfig};
use crate::trunk::{
    build_trunk_tracks, centroid_vote, compute_depth_profile, nearest_profile, row_axis,
    TrunkConfig, TrunkDepthProfile, TrunkTrack,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CountError {
    #[error("{stage} stage failed on the {side} side: {message}")]
    Stage {
        stage: &'static str,
        side: &'static str,
        message: String,
    },
    #[error("estimates and truths differ in length")]
    LengthMismatch,
    #[error("empty input")]
    EmptyInput,
    #[error("regression requires at least two distinct truth values")]
    DegenerateInput,
    #[error("no input side present")]
    NoInput,
}

/// Maximum distance between a refined displacement and its initial guess
/// before the refinement is considered diverged and the guess is kept.
pub const REFINEMENT_DIVERGENCE_PX: f64 = 5.0;

/// All pipeline tunables in one place.
#[derive(Debug, Clone, PartialEq)]
pub struct CountConfig {
    pub intrinsics: CameraIntrinsics,
    pub image: ImageSize,
    pub kf: KfModel,
    pub tracker: TrackerConfig,
    pub sfm: SfmConfig,
    pub age: AgeCostParams,
    pub reassoc_base_gate: f64,
    pub trunk: TrunkConfig,
    /// Landmark re-association stage on/off (off inflates double tracks).
    pub enable_reassociation: bool,
    /// Trunk-centroid vote filter on/off.
    pub enable_vote: bool,
    /// Keep the vote filter on even when only one side is present.
    pub vote_on_single_side: bool,
}

impl CountConfig {
    pub fn new(intrinsics: CameraIntrinsics, image: ImageSize) -> Self {
        Self {
            intrinsics,
            image,
            kf: KfModel::default(),
            tracker: TrackerConfig::default(),
            sfm: SfmConfig::default(),
            age: AgeCostParams::default(),
            reassoc_base_gate: 2.0,
            trunk: TrunkConfig::default(),
            enable_reassociation: true,
            enable_vote: true,
            vote_on_single_side: true,
        }
    }

    fn reassoc_config(&self) -> ReassocConfig {
        ReassocConfig {
            age: self.age.clone(),
            base_gate: self.reassoc_base_gate,
            min_track_length: self.tracker.min_track_length,
            image: self.image,
        }
    }
}

/// One side's observation stream plus its flow provider.
pub struct SideInput<'a> {
    pub side: Side,
    pub frames: &'a [FrameObservation],
    pub provider: &'a dyn FlowProvider,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub side: &'static str,
    pub stage: &'static str,
    pub seconds: f64,
}

/// One reconstructed fruit in the output map.
#[derive(Debug, Clone, PartialEq)]
pub struct FruitMapEntry {
    pub landmark: u64,
    pub side: Side,
    pub position: Vector3<f64>,
    pub tree: usize,
    pub counted: bool,
    pub first_frame: usize,
    pub last_frame: usize,
}

/// Total count and map of fruits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FruitMap {
    pub entries: Vec<FruitMapEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeCount {
    pub estimated: usize,
    pub ground_truth: Option<usize>,
}

impl TreeCount {
    pub fn signed_error(&self) -> Option<i64> {
        self.ground_truth
            .map(|t| self.estimated as i64 - t as i64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountSummary {
    pub error_mean: f64,
    pub error_std: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub l1_loss: u64,
}

/// Per-tree and total count estimates with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CountReport {
    pub per_tree: BTreeMap<usize, TreeCount>,
    pub total_estimated: usize,
    pub total_ground_truth: Option<usize>,
    pub single_side: bool,
    pub summary: Option<CountSummary>,
}

/// Everything one side's run produced, kept for inspection and tests.
#[derive(Debug, Clone)]
pub struct SideArtifacts {
    pub side: Side,
    /// Number of raw 2D tracks (the tracking-only fruit count).
    pub raw_track_count: usize,
    /// Landmarks reconstructed before re-association.
    pub landmarks_before_reassoc: usize,
    pub discarded_by_reassoc: usize,
    pub final_reconstruction: Reconstruction,
    pub profiles: Vec<TrunkDepthProfile>,
    pub entries: Vec<FruitMapEntry>,
    pub timings: Vec<StageTiming>,
}

/// Rebuild each track by chaining refined flows from its first position.
///
/// The chain is seeded at the track's first stored position (the raw
/// detection center for tracker output) and each step asks the provider to
/// refine the displacement implied by the input track; a refinement
/// further than [`REFINEMENT_DIVERGENCE_PX`] from its guess is treated as
/// diverged and the guess is used instead.
pub fn refine_matches(mf: &FeatureMatchSet, provider: &dyn FlowProvider) -> FeatureMatchSet {
    let mut out = FeatureMatchSet::new();
    for track in &mf.tracks {
        let mut refined = Vec::with_capacity(track.len());
        let mut current = track.points[0];
        refined.push(current);
        for t in 0..track.len() - 1 {
            let frame = track.start_frame + t;
            let guess_vec = track.points[t + 1] - current;
            let guess = crate::model::FlowVector::new(guess_vec.x, guess_vec.y)
                .unwrap_or(crate::model::FlowVector::zero());
            let refined_flow = provider.refine(frame, current, guess);
            let chosen = if (refined_flow.as_vector() - guess.as_vector()).norm()
                > REFINEMENT_DIVERGENCE_PX
            {
                guess
            } else {
                refined_flow
            };
            current += chosen.as_vector();
            refined.push(current);
        }
        out.push(
            FruitTrack::new(track.id, track.start_frame, refined, track.areas.clone())
                .expect("spans preserved"),
        );
    }
    out
}

fn stage_err<E: std::fmt::Display>(
    stage: &'static str,
    side: Side,
) -> impl FnOnce(E) -> CountError {
    move |e| CountError::Stage {
        stage,
        side: side.label(),
        message: e.to_string(),
    }
}

/// Run the full single-side pipeline: tracking, reconstruction,
/// re-association, refinement, final reconstruction, trunk depth profiles,
/// and the centroid vote.
pub fn run_side(input: &SideInput<'_>, cfg: &CountConfig) -> Result<SideArtifacts, CountError> {
    let side = input.side;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |stage: &'static str, timings: &mut Vec<StageTiming>| {
        timings.push(StageTiming {
            side: side.label(),
            stage,
            seconds: clock.elapsed().as_secs_f64(),
        });
        clock = Instant::now();
    };

    let mf = run_tracking(input.frames, &cfg.kf, &cfg.tracker)
        .map_err(stage_err("tracking", side))?;
    let raw_track_count = mf.len();
    lap("tracking", &mut timings);

    let rec = reconstruct(&mf, &cfg.intrinsics, &cfg.sfm).map_err(stage_err("sfm", side))?;
    let landmarks_before_reassoc = rec.landmarks.len();
    lap("sfm", &mut timings);

    let (working_set, discarded) = if cfg.enable_reassociation {
        let with_poses: Vec<FrameObservation> = input
            .frames
            .iter()
            .filter(|o| rec.poses.contains_key(&o.frame))
            .cloned()
            .collect();
        let out = reassociate(&rec, &with_poses, &cfg.reassoc_config())
            .map_err(stage_err("reassociation", side))?;
        (out.matches, out.discarded.len())
    } else {
        (mf, 0)
    };
    lap("reassociation", &mut timings);

    let refined = refine_matches(&working_set, input.provider);
    lap("refinement", &mut timings);

    let final_rec =
        reconstruct(&refined, &cfg.intrinsics, &cfg.sfm).map_err(stage_err("final sfm", side))?;
    lap("final sfm", &mut timings);

    let trunk_tracks = build_trunk_tracks(input.frames, input.provider, &cfg.image, &cfg.trunk);
    let mut by_trunk: BTreeMap<usize, Vec<TrunkTrack>> = BTreeMap::new();
    for t in trunk_tracks {
        by_trunk.entry(t.trunk_id).or_default().push(t);
    }
    let profiles: Vec<TrunkDepthProfile> = by_trunk
        .values()
        .filter_map(|tracks| compute_depth_profile(tracks, &final_rec, &cfg.trunk).ok())
        .collect();
    lap("trunk depth", &mut timings);

    let axis = row_axis(&profiles.iter().map(|p| p.anchor).collect::<Vec<_>>());
    let mut entries = Vec::new();
    for lm in final_rec.landmarks.values() {
        let (Some(first), Some(last)) = (lm.first_frame(), lm.last_frame()) else {
            continue;
        };
        let profile = nearest_profile(&profiles, &lm.position, &axis);
        let tree = profile.map(|p| p.trunk_id).unwrap_or(0);
        let counted = if !cfg.enable_vote {
            true
        } else {
            match profile {
                // A vote window with no overlapping frames counts as a
                // rejection; a side with no trunk data at all cannot vote
                // and keeps its landmarks.
                Some(p) => centroid_vote(lm, p, last, cfg.trunk.vote_window).unwrap_or(false),
                None => true,
            }
        };
        entries.push(FruitMapEntry {
            landmark: lm.id,
            side,
            position: lm.position,
            tree,
            counted,
            first_frame: first,
            last_frame: last,
        });
    }
    lap("vote", &mut timings);

    Ok(SideArtifacts {
        side,
        raw_track_count,
        landmarks_before_reassoc,
        discarded_by_reassoc: discarded,
        final_reconstruction: final_rec,
        profiles,
        entries,
        timings,
    })
}

/// Merge per-side artifacts into the count report and fruit map.
pub fn fuse_sides(
    sides: &[SideArtifacts],
    truth: Option<&BTreeMap<usize, usize>>,
) -> (CountReport, FruitMap) {
    let mut map = FruitMap::default();
    let mut per_tree: BTreeMap<usize, TreeCount> = BTreeMap::new();
    if let Some(t) = truth {
        for (tree, count) in t {
            per_tree.insert(
                *tree,
                TreeCount {
                    estimated: 0,
                    ground_truth: Some(*count),
                },
            );
        }
    }
    for side in sides {
        for e in &side.entries {
            map.entries.push(e.clone());
            if e.counted {
                per_tree
                    .entry(e.tree)
                    .or_insert(TreeCount {
                        estimated: 0,
                        ground_truth: None,
                    })
                    .estimated += 1;
            } else if let std::collections::btree_map::Entry::Vacant(v) = per_tree.entry(e.tree) {
                v.insert(TreeCount {
                    estimated: 0,
                    ground_truth: None,
                });
            }
        }
    }
    let total_estimated = per_tree.values().map(|c| c.estimated).sum();
    let total_ground_truth = truth.map(|t| t.values().sum());

    let with_truth: Vec<(f64, f64)> = per_tree
        .values()
        .filter_map(|c| c.ground_truth.map(|t| (t as f64, c.estimated as f64)))
        .collect();
    let summary = if with_truth.len() >= 2 {
        let abs_errors: Vec<f64> = with_truth.iter().map(|(t, e)| (e - t).abs()).collect();
        let stats = error_stats(&abs_errors).ok();
        let reg = fit_regression(&with_truth).ok();
        let l1 = l1_loss(
            &with_truth.iter().map(|(_, e)| *e as i64).collect::<Vec<_>>(),
            &with_truth.iter().map(|(t, _)| *t as i64).collect::<Vec<_>>(),
        )
        .ok();
        match (stats, reg, l1) {
            (Some((mean, std)), Some((slope, intercept, r2)), Some(l1)) => Some(CountSummary {
                error_mean: mean,
                error_std: std,
                slope,
                intercept,
                r_squared: r2,
                l1_loss: l1,
            }),
            _ => None,
        }
    } else {
        None
    };

    let report = CountReport {
        per_tree,
        total_estimated,
        total_ground_truth,
        single_side: sides.len() < 2,
        summary,
    };
    (report, map)
}

/// Full two-side pipeline; either side may be absent.
pub fn count_pipeline(
    east: Option<SideInput<'_>>,
    west: Option<SideInput<'_>>,
    cfg: &CountConfig,
    truth: Option<&BTreeMap<usize, usize>>,
) -> Result<(CountReport, FruitMap, Vec<SideArtifacts>), CountError> {
    let inputs: Vec<SideInput<'_>> = [east, west].into_iter().flatten().collect();
    if inputs.is_empty() {
        return Err(CountError::NoInput);
    }
    let mut effective = cfg.clone();
    if inputs.len() == 1 && !cfg.vote_on_single_side {
        effective.enable_vote = false;
    }
    let mut sides = Vec::new();
    for input in inputs {
        sides.push(run_side(&input, &effective)?);
    }
    let (report, map) = fuse_sides(&sides, truth);
    Ok((report, map, sides))
}

/// Sum of absolute count differences.
pub fn l1_loss(estimates: &[i64], truths: &[i64]) -> Result<u64, CountError> {
    if estimates.len() != truths.len() {
        return Err(CountError::LengthMismatch);
    }
    Ok(estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| e.abs_diff(*t))
        .sum())
}

/// Ordinary least squares of estimate on truth: `(slope, intercept, R²)`.
pub fn fit_regression(pairs: &[(f64, f64)]) -> Result<(f64, f64, f64), CountError> {
    if pairs.len() < 2 {
        return Err(CountError::DegenerateInput);
    }
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|(x, _)| (x - mean_x).powi(2)).sum();
    let sxy: f64 = pairs
        .iter()
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    if sxx < 1e-12 {
        return Err(CountError::DegenerateInput);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_tot: f64 = pairs.iter().map(|(_, y)| (y - mean_y).powi(2)).sum();
    let ss_res: f64 = pairs
        .iter()
        .map(|(x, y)| (y - (slope * x + intercept)).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok((slope, intercept, r_squared))
}

/// Mean and sample standard deviation (n−1) of the error magnitudes; a
/// single sample reports zero deviation.
pub fn error_stats(errors: &[f64]) -> Result<(f64, f64), CountError> {
    if errors.is_empty() {
        return Err(CountError::EmptyInput);
    }
    let n = errors.len() as f64;
    let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    let mean = abs.iter().sum::<f64>() / n;
    let std = if errors.len() < 2 {
        0.0
    } else {
        (abs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok((mean, std))
}
