//! Synthetic orchard generator and observation oracle.
//!
//! Produces ground-truth 3D fruits and trunks, a two-pass lateral camera
//! trajectory (5 frames per simulated second), and noisy per-frame
//! detections, flows, and trunk corners. Every random draw comes from a
//! counter-based stream keyed by `(seed, purpose, pass, frame, fruit)`, so
//! results never depend on evaluation order.
//!
//! The world frame: x runs along the tree row, y across it (east cameras
//! sit at negative y looking +y), z points up. Trunks stand on the y = 0
//! plane, which is the depth reference that separates the two sides.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use thiserror::Error;

use crate::flow::FlowProvider;
use crate::model::{
    camera_depth, project, BoundingBox, CameraIntrinsics, CameraPose, Detection, FlowVector,
    FrameObservation, ImageSize, Side, TrunkCorner,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("frame {frame} out of range for a {len}-frame pass")]
    FrameOutOfRange { frame: usize, len: usize },
}

/// Stress knobs for the double-counting scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    /// Gaussian sigma on detection centers (pixels).
    pub detection_center_sigma: f64,
    /// Per-frame probability of a visible fruit going undetected.
    pub missed_detection_rate: f64,
    /// Expected spurious detections per frame (Poisson).
    pub spurious_detection_rate: f64,
    /// Fraction of fruits never detected in a given pass.
    pub occlusion_fraction: f64,
    /// Gaussian sigma on flow vectors (pixels).
    pub flow_sigma: f64,
    /// Maximum dropout burst length in frames; bursts draw 1..=len.
    pub dropout_burst_length: usize,
    /// Fraction of fruits that get one dropout burst per pass.
    pub dropout_fraction: f64,
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            detection_center_sigma: 0.0,
            missed_detection_rate: 0.0,
            spurious_detection_rate: 0.0,
            occlusion_fraction: 0.0,
            flow_sigma: 0.0,
            dropout_burst_length: 0,
            dropout_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let checks = [
            (self.detection_center_sigma >= 0.0, "detection_center_sigma must be >= 0"),
            (
                (0.0..1.0).contains(&self.missed_detection_rate),
                "missed_detection_rate must be in [0, 1)",
            ),
            (
                self.spurious_detection_rate >= 0.0,
                "spurious_detection_rate must be >= 0",
            ),
            (
                (0.0..1.0).contains(&self.occlusion_fraction),
                "occlusion_fraction must be in [0, 1)",
            ),
            (self.flow_sigma >= 0.0, "flow_sigma must be >= 0"),
            (
                (0.0..1.0).contains(&self.dropout_fraction),
                "dropout_fraction must be in [0, 1)",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(SimError::InvalidConfig(msg.into()));
            }
        }
        Ok(())
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::noiseless()
    }
}

/// Scene geometry and synthesis parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_trees: usize,
    pub fruits_per_tree: usize,
    pub frames_per_pass: usize,
    pub tree_spacing: f64,
    /// Crown ellipsoid semi-axes (along row, across row, vertical).
    pub crown_semi_axes: [f64; 3],
    pub crown_center_height: f64,
    pub trunk_height: f64,
    pub camera_standoff: f64,
    pub camera_height: f64,
    /// Extra trajectory length beyond the first/last trunk.
    pub trajectory_margin: f64,
    /// Half-width of the depth band around the trunk plane whose fruits
    /// are visible from both sides.
    pub overlap_band: f64,
    /// Fraction of fruits placed beyond the trunk plane (west-only side).
    pub far_fraction: f64,
    /// Fraction of fruits placed inside the overlap band.
    pub band_fraction: f64,
    pub fruit_radius: f64,
    pub trunk_corners_per_tree: usize,
    pub image: ImageSize,
    pub intrinsics: CameraIntrinsics,
    pub noise: NoiseConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_trees: 1,
            fruits_per_tree: 60,
            frames_per_pass: 40,
            tree_spacing: 3.0,
            crown_semi_axes: [1.2, 1.0, 1.2],
            crown_center_height: 2.2,
            trunk_height: 2.2,
            camera_standoff: 4.0,
            camera_height: 2.2,
            trajectory_margin: 2.0,
            overlap_band: 0.25,
            far_fraction: 0.0,
            band_fraction: 0.0,
            fruit_radius: 0.05,
            trunk_corners_per_tree: 14,
            image: ImageSize {
                width: 960,
                height: 720,
            },
            intrinsics: CameraIntrinsics {
                fx: 600.0,
                fy: 600.0,
                cx: 360.0,
                cy: 480.0,
            },
            noise: NoiseConfig::noiseless(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let err = |msg: &str| Err(SimError::InvalidConfig(msg.into()));
        if self.n_trees == 0 {
            return err("n_trees must be >= 1");
        }
        if self.fruits_per_tree == 0 {
            return err("fruits_per_tree must be >= 1");
        }
        if self.frames_per_pass < 2 {
            return err("frames_per_pass must be >= 2");
        }
        if self.far_fraction < 0.0 || self.band_fraction < 0.0
            || self.far_fraction + self.band_fraction > 1.0
        {
            return err("far_fraction + band_fraction must stay within [0, 1]");
        }
        if self.overlap_band <= 0.0 || self.overlap_band >= self.crown_semi_axes[1] {
            return err("overlap_band must be in (0, crown depth semi-axis)");
        }
        if self.camera_standoff <= self.crown_semi_axes[1] {
            return err("camera_standoff must exceed the crown depth semi-axis");
        }
        if self.fruit_radius <= 0.0 {
            return err("fruit_radius must be positive");
        }
        self.noise.validate()
    }
}

/// One tree: a vertical trunk segment, fixed corner sample points on it,
/// and fruit positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub trunk_base: Vector3<f64>,
    pub trunk_top: Vector3<f64>,
    pub corner_points: Vec<Vector3<f64>>,
    pub fruits: Vec<Vector3<f64>>,
}

/// Ground-truth scene plus everything frame synthesis needs.
#[derive(Debug, Clone, PartialEq)]
pub struct OrchardScene {
    pub trees: Vec<Tree>,
    pub row_direction: Vector3<f64>,
    pub east_trajectory: Vec<CameraPose>,
    pub west_trajectory: Vec<CameraPose>,
    pub intrinsics: CameraIntrinsics,
    pub image: ImageSize,
    pub fruit_radius: f64,
    pub overlap_band: f64,
    pub noise: NoiseConfig,
    pub rng_seed: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ t);
    }
    ChaCha8Rng::seed_from_u64(h)
}

// Purpose tags for keyed random streams.
const TAG_FRUIT: u64 = 1;
const TAG_OCCLUSION: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_DET_NOISE: u64 = 4;
const TAG_MISS: u64 = 5;
const TAG_FLOW_NOISE: u64 = 6;
const TAG_SPURIOUS: u64 = 7;

fn side_tag(side: Side) -> u64 {
    match side {
        Side::East => 0,
        Side::West => 1,
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).unwrap().sample(rng)
}

/// Depth zone a fruit is placed in, relative to the trunk plane as seen
/// from the east side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Zone {
    Near,
    Band,
    Far,
}

fn zone_for(index: usize, total: usize, far_fraction: f64, band_fraction: f64) -> Zone {
    let n_far = (far_fraction * total as f64).round() as usize;
    let n_band = (band_fraction * total as f64).round() as usize;
    if index < n_far {
        Zone::Far
    } else if index < n_far + n_band {
        Zone::Band
    } else {
        Zone::Near
    }
}

/// Build the deterministic ground-truth scene.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<OrchardScene, SimError> {
    config.validate()?;
    let [a, b, c] = config.crown_semi_axes;
    let band = config.overlap_band;

    let mut trees = Vec::with_capacity(config.n_trees);
    for tree_idx in 0..config.n_trees {
        let x = tree_idx as f64 * config.tree_spacing;
        let base = Vector3::new(x, 0.0, 0.0);
        let top = Vector3::new(x, 0.0, config.trunk_height);
        let corner_points = (0..config.trunk_corners_per_tree)
            .map(|i| {
                let t = (i as f64 + 0.5) / config.trunk_corners_per_tree as f64;
                base + (top - base) * t
            })
            .collect();

        let center = Vector3::new(x, 0.0, config.crown_center_height);
        let mut fruits = Vec::with_capacity(config.fruits_per_tree);
        for fruit_idx in 0..config.fruits_per_tree {
            let mut rng = stream(seed, &[TAG_FRUIT, tree_idx as u64, fruit_idx as u64]);
            // Direction on the unit sphere, rejecting samples too close to
            // the row axis so the depth/vertical components stay usable.
            let dir = loop {
                let v = Vector3::new(
                    gaussian(&mut rng, 1.0),
                    gaussian(&mut rng, 1.0),
                    gaussian(&mut rng, 1.0),
                );
                let n = v.norm();
                if n > 1e-6 && (v.y.powi(2) + v.z.powi(2)).sqrt() / n > 1e-3 {
                    break v / n;
                }
            };
            let zone = zone_for(
                fruit_idx,
                config.fruits_per_tree,
                config.far_fraction,
                config.band_fraction,
            );
            // Remap the across-row component into the requested depth zone,
            // keeping a margin off the zone boundaries so votes are never
            // decided by round-off.
            let u = dir.y.abs().max(1e-3);
            let y = match zone {
                Zone::Near => -(band + u * (b - band)).min(b - 1e-6),
                Zone::Far => (band + u * (b - band)).min(b - 1e-6),
                Zone::Band => dir.y.signum() * (0.05 + 0.85 * u) * band,
            };
            // Rescale the in-plane components so the fruit sits on the
            // crown ellipsoid at that depth.
            let plane = (dir.x / a).powi(2) + (dir.z / c).powi(2);
            let remaining = (1.0 - (y / b).powi(2)).max(0.0);
            let s = if plane > 1e-12 {
                (remaining / plane).sqrt()
            } else {
                0.0
            };
            fruits.push(center + Vector3::new(dir.x * s, y, dir.z * s));
        }
        trees.push(Tree {
            trunk_base: base,
            trunk_top: top,
            corner_points,
            fruits,
        });
    }

    let x0 = -config.trajectory_margin;
    let x1 = (config.n_trees - 1) as f64 * config.tree_spacing + config.trajectory_margin;
    let n = config.frames_per_pass;
    let dx = (x1 - x0) / (n - 1) as f64;

    // East cameras look +y; image rows run down world z, columns along -x.
    let rot_east = Matrix3::new(0.0, 0.0, -1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    // West cameras look -y; columns along +x.
    let rot_west = Matrix3::new(0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0);

    let make_pose = |rot: Matrix3<f64>, center: Vector3<f64>| {
        CameraPose::new(rot, -(rot * center)).expect("construction uses exact rotations")
    };
    let east_trajectory = (0..n)
        .map(|k| {
            let cx = x0 + k as f64 * dx;
            make_pose(rot_east, Vector3::new(cx, -config.camera_standoff, config.camera_height))
        })
        .collect();
    let west_trajectory = (0..n)
        .map(|k| {
            let cx = x1 - k as f64 * dx;
            make_pose(rot_west, Vector3::new(cx, config.camera_standoff, config.camera_height))
        })
        .collect();

    Ok(OrchardScene {
        trees,
        row_direction: Vector3::new(1.0, 0.0, 0.0),
        east_trajectory,
        west_trajectory,
        intrinsics: config.intrinsics,
        image: config.image,
        fruit_radius: config.fruit_radius,
        overlap_band: config.overlap_band,
        noise: config.noise.clone(),
        rng_seed: seed,
    })
}

/// Ground-truth origin of one emitted detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectionTruth {
    Fruit { gid: usize },
    Spurious,
}

/// Test-only ground truth for one synthesized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    pub frame: usize,
    /// Aligned with the emitted detections.
    pub detections: Vec<DetectionTruth>,
    /// Fruits absent in this frame due to a dropout burst.
    pub dropped_out: Vec<usize>,
}

impl OrchardScene {
    pub fn trajectory(&self, side: Side) -> &[CameraPose] {
        match side {
            Side::East => &self.east_trajectory,
            Side::West => &self.west_trajectory,
        }
    }

    pub fn frames(&self, side: Side) -> usize {
        self.trajectory(side).len()
    }

    pub fn total_fruits(&self) -> usize {
        self.trees.iter().map(|t| t.fruits.len()).sum()
    }

    /// Iterate `(gid, tree index, position)` in deterministic order.
    pub fn fruits(&self) -> impl Iterator<Item = (usize, usize, Vector3<f64>)> + '_ {
        self.trees.iter().enumerate().flat_map(|(ti, tree)| {
            let base: usize = self.trees[..ti].iter().map(|t| t.fruits.len()).sum();
            tree.fruits
                .iter()
                .enumerate()
                .map(move |(fi, f)| (base + fi, ti, *f))
        })
    }

    pub fn fruit(&self, gid: usize) -> (usize, Vector3<f64>) {
        let mut rest = gid;
        for (ti, tree) in self.trees.iter().enumerate() {
            if rest < tree.fruits.len() {
                return (ti, tree.fruits[rest]);
            }
            rest -= tree.fruits.len();
        }
        panic!("fruit gid {gid} out of range");
    }

    /// A fruit is visible from a pass when its camera-axis depth is less
    /// than the trunk-plane depth plus the overlap band.
    pub fn visible_from(&self, side: Side, gid: usize) -> bool {
        let (tree, position) = self.fruit(gid);
        let pose = &self.trajectory(side)[0];
        let depth = camera_depth(pose, &position);
        let trunk_depth = camera_depth(pose, &self.trees[tree].trunk_base);
        depth < trunk_depth + self.overlap_band
    }

    /// Persistent per-(fruit, pass) occlusion draw.
    pub fn occluded(&self, side: Side, gid: usize) -> bool {
        if self.noise.occlusion_fraction <= 0.0 {
            return false;
        }
        let mut rng = stream(self.rng_seed, &[TAG_OCCLUSION, side_tag(side), gid as u64]);
        rng.random_range(0.0..1.0) < self.noise.occlusion_fraction
    }

    /// Exact projection of a world point in frame `k` of a pass, if it has
    /// positive depth.
    pub fn project_point(&self, side: Side, k: usize, point: &Vector3<f64>) -> Option<Vector2<f64>> {
        project(&self.intrinsics, &self.trajectory(side)[k], point).ok()
    }

    /// First and last frame of a pass where the fruit projects in-image.
    pub fn visible_span(&self, side: Side, gid: usize) -> Option<(usize, usize)> {
        let (_, position) = self.fruit(gid);
        let mut first = None;
        let mut last = None;
        for k in 0..self.frames(side) {
            if let Some(p) = self.project_point(side, k, &position) {
                if self.image.contains(p) {
                    first.get_or_insert(k);
                    last = Some(k);
                }
            }
        }
        Some((first?, last?))
    }

    /// Dropout burst `[start, end)` for a fruit in a pass, if any. Bursts
    /// leave at least three trackable frames on each side so an affected
    /// fruit reliably splits into two tracks.
    pub fn dropout_window(&self, side: Side, gid: usize) -> Option<(usize, usize)> {
        let noise = &self.noise;
        if noise.dropout_fraction <= 0.0 || noise.dropout_burst_length == 0 {
            return None;
        }
        let mut rng = stream(self.rng_seed, &[TAG_DROPOUT, side_tag(side), gid as u64]);
        if rng.random_range(0.0..1.0) >= noise.dropout_fraction {
            return None;
        }
        let (first, last) = self.visible_span(side, gid)?;
        let span = last - first + 1;
        let len = rng.random_range(1..=noise.dropout_burst_length);
        const MIN_SEGMENT: usize = 3;
        if span < len + 2 * MIN_SEGMENT {
            return None;
        }
        let lo = first + MIN_SEGMENT;
        let hi = last + 1 - MIN_SEGMENT - len;
        let start = rng.random_range(lo..=hi);
        Some((start, start + len))
    }

    /// Ground-truth trunk depth in frame `k` of a pass.
    pub fn trunk_depth(&self, side: Side, k: usize, tree: usize) -> f64 {
        camera_depth(&self.trajectory(side)[k], &self.trees[tree].trunk_base)
    }

    /// Synthesize one frame along with its ground-truth correspondence.
    pub fn synthesize_frame_full(
        &self,
        side: Side,
        k: usize,
    ) -> Result<(FrameObservation, FrameTruth), SimError> {
        let len = self.frames(side);
        if k >= len {
            return Err(SimError::FrameOutOfRange { frame: k, len });
        }
        let noise = &self.noise;
        let mut detections = Vec::new();
        let mut flows = Vec::new();
        let mut truth = Vec::new();
        let mut dropped_out = Vec::new();
        let mut true_flows: Vec<FlowVector> = Vec::new();

        for (gid, _tree, position) in self.fruits() {
            if !self.visible_from(side, gid) || self.occluded(side, gid) {
                continue;
            }
            let Some(p) = self.project_point(side, k, &position) else {
                continue;
            };
            if !self.image.contains(p) {
                continue;
            }
            if let Some((start, end)) = self.dropout_window(side, gid) {
                if (start..end).contains(&k) {
                    dropped_out.push(gid);
                    continue;
                }
            }
            if noise.missed_detection_rate > 0.0 {
                let mut rng = stream(
                    self.rng_seed,
                    &[TAG_MISS, side_tag(side), k as u64, gid as u64],
                );
                if rng.random_range(0.0..1.0) < noise.missed_detection_rate {
                    continue;
                }
            }

            let depth = camera_depth(&self.trajectory(side)[k], &position);
            let mut rng = stream(
                self.rng_seed,
                &[TAG_DET_NOISE, side_tag(side), k as u64, gid as u64],
            );
            let center = Vector2::new(
                p.x + gaussian(&mut rng, noise.detection_center_sigma),
                p.y + gaussian(&mut rng, noise.detection_center_sigma),
            );
            let height = 2.0 * self.intrinsics.fx * self.fruit_radius / depth;
            let width = 2.0 * self.intrinsics.fy * self.fruit_radius / depth;
            let bbox = BoundingBox::new(center, width, height)
                .expect("positive fruit box dimensions");
            detections.push(Detection::new(k, bbox, 0.95).expect("valid score"));
            truth.push(DetectionTruth::Fruit { gid });

            let true_flow = if k + 1 < len {
                match self.project_point(side, k + 1, &position) {
                    Some(next) => FlowVector::new(next.x - p.x, next.y - p.y).unwrap(),
                    None => FlowVector::zero(),
                }
            } else {
                FlowVector::zero()
            };
            true_flows.push(true_flow);
            let mut rng = stream(
                self.rng_seed,
                &[TAG_FLOW_NOISE, side_tag(side), k as u64, gid as u64],
            );
            flows.push(
                FlowVector::new(
                    true_flow.du + gaussian(&mut rng, noise.flow_sigma),
                    true_flow.dv + gaussian(&mut rng, noise.flow_sigma),
                )
                .unwrap(),
            );
        }

        if noise.spurious_detection_rate > 0.0 {
            let mut rng = stream(self.rng_seed, &[TAG_SPURIOUS, side_tag(side), k as u64]);
            let count = Poisson::new(noise.spurious_detection_rate)
                .map(|d| d.sample(&mut rng) as usize)
                .unwrap_or(0);
            let mean_true_flow = crate::track::mean_flow(&true_flows).unwrap_or(FlowVector::zero());
            for _ in 0..count {
                let center = Vector2::new(
                    rng.random_range(0.0..self.image.height as f64),
                    rng.random_range(0.0..self.image.width as f64),
                );
                // Area drawn from the plausible true-fruit depth range.
                let trunk_depth =
                    camera_depth(&self.trajectory(side)[k], &self.trees[0].trunk_base);
                let depth = rng
                    .random_range((trunk_depth - self.overlap_band)..(trunk_depth + self.overlap_band));
                let height = 2.0 * self.intrinsics.fx * self.fruit_radius / depth;
                let width = 2.0 * self.intrinsics.fy * self.fruit_radius / depth;
                let bbox = BoundingBox::new(center, width, height).expect("positive box");
                detections.push(Detection::new(k, bbox, 0.95).expect("valid score"));
                truth.push(DetectionTruth::Spurious);
                flows.push(
                    FlowVector::new(
                        mean_true_flow.du + gaussian(&mut rng, noise.flow_sigma.max(0.5)),
                        mean_true_flow.dv + gaussian(&mut rng, noise.flow_sigma.max(0.5)),
                    )
                    .unwrap(),
                );
            }
        }

        let mut trunk_corners = Vec::new();
        for (tree_idx, tree) in self.trees.iter().enumerate() {
            for cp in &tree.corner_points {
                if let Some(p) = self.project_point(side, k, cp) {
                    if self.image.contains(p) && self.image.in_middle_third(p) {
                        trunk_corners.push(TrunkCorner {
                            trunk_id: tree_idx,
                            point: p,
                        });
                    }
                }
            }
        }

        let obs = FrameObservation {
            frame: k,
            detections,
            flows: Some(flows),
            trunk_corners: Some(trunk_corners),
        };
        let truth = FrameTruth {
            frame: k,
            detections: truth,
            dropped_out,
        };
        Ok((obs, truth))
    }

    /// Synthesize one frame (ground truth withheld).
    pub fn synthesize_frame(&self, side: Side, k: usize) -> Result<FrameObservation, SimError> {
        self.synthesize_frame_full(side, k).map(|(obs, _)| obs)
    }

    /// All frames of one pass.
    pub fn synthesize_pass(&self, side: Side) -> Result<Vec<FrameObservation>, SimError> {
        (0..self.frames(side))
            .map(|k| self.synthesize_frame(side, k))
            .collect()
    }

    /// All frames of one pass with correspondence logs.
    pub fn synthesize_pass_full(
        &self,
        side: Side,
    ) -> Result<Vec<(FrameObservation, FrameTruth)>, SimError> {
        (0..self.frames(side))
            .map(|k| self.synthesize_frame_full(side, k))
            .collect()
    }
}

/// Per-tree ground-truth fruit counts (the oracle for the loss metric).
pub fn ground_truth_counts(scene: &OrchardScene) -> BTreeMap<usize, usize> {
    scene
        .trees
        .iter()
        .enumerate()
        .map(|(i, t)| (i, t.fruits.len()))
        .collect()
}

/// Exact flow oracle backed by scene geometry: queries snap to the nearest
/// true feature (fruit or trunk corner) and return the displacement onto
/// its exact projection in the adjacent frame.
#[derive(Debug, Clone)]
pub struct SimFlowProvider<'a> {
    scene: &'a OrchardScene,
    side: Side,
    snap_radius: f64,
}

impl<'a> SimFlowProvider<'a> {
    pub fn new(scene: &'a OrchardScene, side: Side) -> Self {
        Self {
            scene,
            side,
            snap_radius: 4.0,
        }
    }

    /// World point of the nearest true feature to `pos` in frame `k`.
    fn nearest_feature(&self, k: usize, pos: Vector2<f64>) -> Option<Vector3<f64>> {
        let mut best: Option<(f64, Vector3<f64>)> = None;
        let mut consider = |point: Vector3<f64>| {
            if let Some(p) = self.scene.project_point(self.side, k, &point) {
                let d = (p - pos).norm();
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, point));
                }
            }
        };
        for (_, _, fruit) in self.scene.fruits() {
            consider(fruit);
        }
        for tree in &self.scene.trees {
            for cp in &tree.corner_points {
                consider(*cp);
            }
        }
        best.and_then(|(d, point)| (d <= self.snap_radius).then_some(point))
    }

    fn displacement_to(&self, k: usize, target_frame: usize, pos: Vector2<f64>) -> Option<FlowVector> {
        if target_frame >= self.scene.frames(self.side) {
            return None;
        }
        let feature = self.nearest_feature(k, pos)?;
        let next = self.scene.project_point(self.side, target_frame, &feature)?;
        FlowVector::new(next.x - pos.x, next.y - pos.y).ok()
    }
}

impl FlowProvider for SimFlowProvider<'_> {
    fn flow(&self, frame: usize, pos: Vector2<f64>) -> Option<FlowVector> {
        self.displacement_to(frame, frame + 1, pos)
    }

    fn flow_back(&self, frame: usize, pos: Vector2<f64>) -> Option<FlowVector> {
        let prev = frame.checked_sub(1)?;
        self.displacement_to(frame, prev, pos)
    }

    fn refine(&self, frame: usize, pos: Vector2<f64>, guess: FlowVector) -> FlowVector {
        self.displacement_to(frame, frame + 1, pos).unwrap_or(guess)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SceneConfig {
        SceneConfig {
            n_trees: 1,
            fruits_per_tree: 10,
            frames_per_pass: 12,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config();
        let a = generate_scene(&cfg, 7).unwrap();
        let b = generate_scene(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_conserve_fruit_totals() {
        let cfg = SceneConfig {
            n_trees: 3,
            fruits_per_tree: 50,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, 1).unwrap();
        let counts = ground_truth_counts(&scene);
        assert_eq!(counts.len(), 3);
        assert_eq!(counts.values().sum::<usize>(), 150);
    }

    #[test]
    fn empty_scene_rejected() {
        let cfg = SceneConfig {
            n_trees: 0,
            ..SceneConfig::default()
        };
        assert!(matches!(
            generate_scene(&cfg, 0),
            Err(SimError::InvalidConfig(_))
        ));
    }

    #[test]
    fn passes_face_opposite_directions() {
        let scene = generate_scene(&small_config(), 3).unwrap();
        let fwd_e = scene.east_trajectory[0].rotation().row(2).transpose();
        let fwd_w = scene.west_trajectory[0].rotation().row(2).transpose();
        assert!(fwd_e.dot(&fwd_w) < 0.0);
    }

    #[test]
    fn every_fruit_projects_in_some_east_frame() {
        let scene = generate_scene(&small_config(), 5).unwrap();
        for (gid, _, _) in scene.fruits() {
            let span = scene.visible_span(Side::East, gid);
            assert!(span.is_some(), "fruit {gid} never visible");
        }
    }

    #[test]
    fn noiseless_detections_are_exact_projections() {
        let scene = generate_scene(&small_config(), 11).unwrap();
        for k in 0..scene.frames(Side::East) {
            let (obs, truth) = scene.synthesize_frame_full(Side::East, k).unwrap();
            for (det, t) in obs.detections.iter().zip(&truth.detections) {
                let DetectionTruth::Fruit { gid } = t else {
                    panic!("no spurious detections configured")
                };
                let (_, pos) = scene.fruit(*gid);
                let p = scene.project_point(Side::East, k, &pos).unwrap();
                assert!((det.center() - p).norm() < 1e-12);
            }
            // Flows equal the exact inter-frame projection difference.
            let flows = obs.flows.as_ref().unwrap();
            if k + 1 < scene.frames(Side::East) {
                for (i, t) in truth.detections.iter().enumerate() {
                    let DetectionTruth::Fruit { gid } = t else { continue };
                    let (_, pos) = scene.fruit(*gid);
                    let p0 = scene.project_point(Side::East, k, &pos).unwrap();
                    let p1 = scene.project_point(Side::East, k + 1, &pos).unwrap();
                    let f = flows[i].as_vector();
                    assert!((f - (p1 - p0)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn missed_rate_one_still_emits_corners() {
        let mut cfg = small_config();
        cfg.noise.missed_detection_rate = 0.999_999;
        let scene = generate_scene(&cfg, 2).unwrap();
        let obs = scene.synthesize_frame(Side::East, 5).unwrap();
        assert!(obs.detections.is_empty());
        assert!(!obs.trunk_corners.as_ref().unwrap().is_empty());
    }

    #[test]
    fn occlusion_is_persistent_per_pass() {
        let mut cfg = small_config();
        cfg.fruits_per_tree = 40;
        cfg.noise.occlusion_fraction = 0.4;
        let scene = generate_scene(&cfg, 9).unwrap();
        let occluded: Vec<usize> = scene
            .fruits()
            .map(|(gid, _, _)| gid)
            .filter(|&gid| scene.occluded(Side::East, gid))
            .collect();
        assert!(!occluded.is_empty());
        for pair in scene.synthesize_pass_full(Side::East).unwrap() {
            for t in &pair.1.detections {
                if let DetectionTruth::Fruit { gid } = t {
                    assert!(!occluded.contains(gid), "occluded fruit {gid} appeared");
                }
            }
        }
    }

    #[test]
    fn dropout_bursts_match_declared_windows() {
        let mut cfg = small_config();
        cfg.fruits_per_tree = 30;
        cfg.frames_per_pass = 30;
        cfg.noise.dropout_fraction = 0.9;
        cfg.noise.dropout_burst_length = 2;
        let scene = generate_scene(&cfg, 13).unwrap();
        let full = scene.synthesize_pass_full(Side::East).unwrap();
        let mut seen_two_frame_burst = false;
        for (gid, _, _) in scene.fruits() {
            let Some((start, end)) = scene.dropout_window(Side::East, gid) else {
                continue;
            };
            if end - start == 2 {
                seen_two_frame_burst = true;
            }
            for (obs, truth) in &full {
                let present = truth
                    .detections
                    .iter()
                    .any(|t| matches!(t, DetectionTruth::Fruit { gid: g } if *g == gid));
                if (start..end).contains(&obs.frame) {
                    assert!(!present, "fruit {gid} present during burst at {}", obs.frame);
                    assert!(truth.dropped_out.contains(&gid));
                }
            }
            // Reappears right after the burst.
            let after = &full[end];
            assert!(after
                .1
                .detections
                .iter()
                .any(|t| matches!(t, DetectionTruth::Fruit { gid: g } if *g == gid)));
        }
        assert!(seen_two_frame_burst);
    }

    #[test]
    fn frame_out_of_range() {
        let scene = generate_scene(&small_config(), 0).unwrap();
        assert!(matches!(
            scene.synthesize_frame(Side::East, 99),
            Err(SimError::FrameOutOfRange { .. })
        ));
    }

    #[test]
    fn trunk_corners_stay_in_middle_third() {
        let scene = generate_scene(&small_config(), 4).unwrap();
        for k in 0..scene.frames(Side::East) {
            let obs = scene.synthesize_frame(Side::East, k).unwrap();
            for c in obs.trunk_corners.as_ref().unwrap() {
                assert!(scene.image.in_middle_third(c.point));
            }
        }
    }

    #[test]
    fn sim_flow_provider_returns_exact_displacements() {
        let scene = generate_scene(&small_config(), 6).unwrap();
        let provider = SimFlowProvider::new(&scene, Side::East);
        let (gid, _, pos) = scene.fruits().next().unwrap();
        let (first, last) = scene.visible_span(Side::East, gid).unwrap();
        for k in first..last {
            let p0 = scene.project_point(Side::East, k, &pos).unwrap();
            let p1 = scene.project_point(Side::East, k + 1, &pos).unwrap();
            let f = provider.flow(k, p0).unwrap();
            assert!((f.as_vector() - (p1 - p0)).norm() < 1e-12);
            // Query off the feature: the refined displacement still lands
            // exactly on the next-frame projection.
            let off = p0 + Vector2::new(1.0, -0.5);
            let r = provider.refine(k, off, FlowVector::zero());
            assert!((off + r.as_vector() - p1).norm() < 1e-12);
        }
    }

    #[test]
    fn zone_fractions_respected() {
        let cfg = SceneConfig {
            n_trees: 1,
            fruits_per_tree: 50,
            far_fraction: 0.4,
            band_fraction: 0.2,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, 17).unwrap();
        let band = cfg.overlap_band;
        let mut near = 0;
        let mut far = 0;
        let mut in_band = 0;
        for (_, _, f) in scene.fruits() {
            if f.y <= -band {
                near += 1;
            } else if f.y >= band {
                far += 1;
            } else {
                in_band += 1;
            }
        }
        assert_eq!((near, in_band, far), (20, 10, 20));
    }
}
