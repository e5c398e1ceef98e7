//! Frame-to-frame fruit tracking.
//!
//! Tracks are predicted with their last optical flow, matched to detections
//! by a gated Hungarian assignment, and updated by a Kalman filter that
//! fuses the flow-predicted position, the detection center, and a velocity
//! measurement built from the frame's mean flow direction.

use nalgebra::{Matrix2, Matrix4, Matrix6, Matrix6x4, Vector2, Vector4, Vector6};
use thiserror::Error;

use crate::assign::hungarian_assign;
use crate::model::{
    box_overlap, BoundingBox, Detection, FeatureMatchSet, FlowVector, FrameObservation,
    FruitTrack,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackError {
    #[error("innovation covariance is numerically singular (cond {0:.3e})")]
    SingularInnovation(f64),
    #[error("frame stream out of order: expected {expected}, got {got}")]
    BadFrameOrder { expected: usize, got: usize },
    #[error("flow list not aligned with detections in frame {0}")]
    MisalignedFlows(usize),
}

/// Constant-velocity process and stacked measurement model.
///
/// The state is `(u, v, u̇, v̇)`; the measurement stacks the flow-predicted
/// position, the detection center, and a velocity pseudo-measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct KfModel {
    pub a: Matrix4<f64>,
    pub h: Matrix6x4<f64>,
    pub q: Matrix4<f64>,
    pub r: Matrix6<f64>,
}

impl KfModel {
    /// Build from the diagonal entries of Q and R.
    pub fn new(q_diag: [f64; 4], r_diag: [f64; 6]) -> Self {
        assert!(
            q_diag.iter().chain(r_diag.iter()).all(|&x| x > 0.0),
            "Q and R diagonals must be positive"
        );
        let i2 = Matrix2::identity();
        let z2 = Matrix2::zeros();
        let mut a = Matrix4::zeros();
        a.fixed_view_mut::<2, 2>(0, 0).copy_from(&i2);
        a.fixed_view_mut::<2, 2>(0, 2).copy_from(&i2);
        a.fixed_view_mut::<2, 2>(2, 2).copy_from(&i2);
        let mut h = Matrix6x4::zeros();
        h.fixed_view_mut::<2, 2>(0, 0).copy_from(&i2);
        h.fixed_view_mut::<2, 2>(2, 0).copy_from(&i2);
        h.fixed_view_mut::<2, 2>(4, 2).copy_from(&i2);
        h.fixed_view_mut::<2, 2>(0, 2).copy_from(&z2);
        Self {
            a,
            h,
            q: Matrix4::from_diagonal(&Vector4::from(q_diag)),
            r: Matrix6::from_diagonal(&Vector6::from(r_diag)),
        }
    }

    /// Copy with the velocity-measurement noise entries scaled.
    pub fn with_velocity_noise_scaled(&self, factor: f64) -> Self {
        let mut r = self.r;
        r[(4, 4)] *= factor;
        r[(5, 5)] *= factor;
        Self { r, ..self.clone() }
    }
}

impl Default for KfModel {
    fn default() -> Self {
        Self::new([6.0, 2.0, 3.0, 1.0], [3.0, 1.0, 1.0, 0.5, 1.0, 0.5])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Active,
    Terminated,
}

/// Per-fruit Kalman state plus the bookkeeping needed for matching.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub id: u64,
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub last_box: BoundingBox,
    pub last_flow: FlowVector,
    pub start_frame: usize,
    /// Filtered positions, one per frame since `start_frame`.
    pub positions: Vec<Vector2<f64>>,
    /// Matched detection areas, aligned with `positions`.
    pub areas: Vec<f64>,
    pub status: TrackStatus,
}

impl TrackState {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x[0], self.x[1])
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.x[2], self.x[3])
    }

    /// Flow-based position prediction for the next frame.
    pub fn predict_center(&self) -> Vector2<f64> {
        self.position() + self.last_flow.as_vector()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn into_track(self) -> FruitTrack {
        FruitTrack::new(self.id, self.start_frame, self.positions, self.areas)
            .expect("tracks are built frame by frame")
    }
}

/// Tunables of the tracking stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Assignment cost ceiling.
    pub gate: f64,
    /// Minimum track length for inclusion in the feature match set.
    pub min_track_length: usize,
    /// Initial state covariance diagonal.
    pub p0: [f64; 4],
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            gate: 2.0,
            min_track_length: 3,
            p0: [9.0, 9.0, 4.0, 4.0],
        }
    }
}

/// Mean-flow tracker with the empty-frame fallback: an empty frame reuses
/// the last nonzero mean, or (0, 0) if none has been seen yet.
#[derive(Debug, Clone, Default)]
pub struct MeanFlow {
    last_nonzero: Option<FlowVector>,
}

impl MeanFlow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, flows: &[FlowVector]) -> FlowVector {
        let mean = match mean_flow(flows) {
            Some(m) => m,
            None => return self.fallback(),
        };
        if mean.norm() > 0.0 {
            self.last_nonzero = Some(mean);
        }
        mean
    }

    fn fallback(&self) -> FlowVector {
        self.last_nonzero.unwrap_or_else(FlowVector::zero)
    }
}

/// Componentwise arithmetic mean; `None` on empty input.
pub fn mean_flow(flows: &[FlowVector]) -> Option<FlowVector> {
    if flows.is_empty() {
        return None;
    }
    let n = flows.len() as f64;
    let (su, sv) = flows
        .iter()
        .fold((0.0, 0.0), |(u, v), f| (u + f.du, v + f.dv));
    Some(FlowVector {
        du: su / n,
        dv: sv / n,
    })
}

/// Assignment cost between a predicted track and a detection:
/// squared center distance normalized by the area sum, plus one minus the
/// overlap of the flow-shifted predicted box with the detected box.
pub fn track_cost(track: &TrackState, det: &Detection) -> f64 {
    let predicted = track.predict_center();
    let shifted = track.last_box.at(predicted);
    let gamma = box_overlap(&shifted, &det.bbox);
    let dist2 = (predicted - det.center()).norm_squared();
    dist2 / (track.last_box.area() + det.area()) + (1.0 - gamma)
}

/// New track from a first detection; velocity seeded with the previous
/// frame's mean flow.
pub fn kf_initialize(
    id: u64,
    det: &Detection,
    prior_mean_flow: FlowVector,
    p0: &[f64; 4],
) -> TrackState {
    let c = det.center();
    TrackState {
        id,
        x: Vector4::new(c.x, c.y, prior_mean_flow.du, prior_mean_flow.dv),
        p: Matrix4::from_diagonal(&Vector4::from(*p0)),
        last_box: det.bbox,
        last_flow: prior_mean_flow,
        start_frame: det.frame,
        positions: vec![c],
        areas: vec![det.area()],
        status: TrackStatus::Active,
    }
}

/// A-priori state and covariance.
pub fn kf_predict(x: &Vector4<f64>, p: &Matrix4<f64>, model: &KfModel) -> (Vector4<f64>, Matrix4<f64>) {
    let xp = model.a * x;
    let pp = model.a * p * model.a.transpose() + model.q;
    (xp, pp)
}

/// Stack the measurement vector. Returns the 6-vector and a flag that is
/// true when the mean flow direction is degenerate (velocity block zeroed;
/// the caller should inflate the velocity entries of R).
pub fn build_measurement(
    predicted: Vector2<f64>,
    detected: Vector2<f64>,
    mean_flow_now: FlowVector,
    last_flow: FlowVector,
) -> (Vector6<f64>, bool) {
    let mean = mean_flow_now.as_vector();
    let norm = mean.norm();
    let (vel, degenerate) = if norm < 1e-9 {
        (Vector2::zeros(), true)
    } else {
        ((mean / norm) * last_flow.norm(), false)
    };
    (
        Vector6::new(predicted.x, predicted.y, detected.x, detected.y, vel.x, vel.y),
        degenerate,
    )
}

/// Standard Kalman update on a predicted state.
pub fn kf_update(
    x_prior: &Vector4<f64>,
    p_prior: &Matrix4<f64>,
    z: &Vector6<f64>,
    model: &KfModel,
) -> Result<(Vector4<f64>, Matrix4<f64>), TrackError> {
    let s = model.h * p_prior * model.h.transpose() + model.r;
    let eig = s.symmetric_eigenvalues();
    let (min_ev, max_ev) = (eig.min(), eig.max());
    if min_ev <= 0.0 || max_ev / min_ev > 1e12 {
        return Err(TrackError::SingularInnovation(max_ev / min_ev));
    }
    let chol = s
        .cholesky()
        .ok_or(TrackError::SingularInnovation(f64::INFINITY))?;
    // K = P⁻ Hᵀ S⁻¹, computed as (S⁻¹ (H P⁻))ᵀ.
    let k = chol.solve(&(model.h * p_prior)).transpose();
    let x = x_prior + k * (z - model.h * x_prior);
    let p = (Matrix4::identity() - k * model.h) * p_prior;
    let p = (p + p.transpose()) * 0.5;
    Ok((x, p))
}

/// Run the full tracking loop over an ordered, consecutive frame stream and
/// collect terminated tracks of sufficient length into the match set.
pub fn run_tracking(
    frames: &[FrameObservation],
    model: &KfModel,
    cfg: &TrackerConfig,
) -> Result<FeatureMatchSet, TrackError> {
    let mut out = FeatureMatchSet::new();
    let mut active: Vec<TrackState> = Vec::new();
    let mut mean_tracker = MeanFlow::new();
    let mut prev_mean = FlowVector::zero();
    let mut next_id = 0u64;

    let finish = |track: TrackState, out: &mut FeatureMatchSet| {
        if track.len() >= cfg.min_track_length {
            out.push(track.into_track());
        }
    };

    for (step, obs) in frames.iter().enumerate() {
        let expected = frames[0].frame + step;
        if obs.frame != expected {
            return Err(TrackError::BadFrameOrder {
                expected,
                got: obs.frame,
            });
        }
        if let Some(flows) = &obs.flows {
            if flows.len() != obs.detections.len() {
                return Err(TrackError::MisalignedFlows(obs.frame));
            }
        }
        let frame_flows: &[FlowVector] = obs.flows.as_deref().unwrap_or(&[]);
        let mean_now = mean_tracker.update(frame_flows);
        let det_flow = |j: usize| frame_flows.get(j).copied().unwrap_or(mean_now);

        let mut matched_tracks = vec![false; active.len()];
        let mut matched_dets = vec![false; obs.detections.len()];

        if !active.is_empty() && !obs.detections.is_empty() {
            let cost: Vec<Vec<f64>> = active
                .iter()
                .map(|t| obs.detections.iter().map(|d| track_cost(t, d)).collect())
                .collect();
            for (ti, dj) in hungarian_assign(&cost, cfg.gate) {
                matched_tracks[ti] = true;
                matched_dets[dj] = true;
                let track = &mut active[ti];
                let det = &obs.detections[dj];
                let (xp, pp) = kf_predict(&track.x, &track.p, model);
                let (z, degenerate) =
                    build_measurement(track.predict_center(), det.center(), mean_now, track.last_flow);
                let effective;
                let m = if degenerate {
                    effective = model.with_velocity_noise_scaled(100.0);
                    &effective
                } else {
                    model
                };
                let (x, p) = kf_update(&xp, &pp, &z, m)?;
                track.x = x;
                track.p = p;
                track.positions.push(track.position());
                track.areas.push(det.area());
                track.last_box = det.bbox;
                track.last_flow = det_flow(dj);
            }
        }

        // Unmatched tracks terminate immediately; re-association downstream
        // is the recovery mechanism for interrupted fruits.
        let mut keep: Vec<TrackState> = Vec::with_capacity(active.len());
        for (ti, mut track) in active.drain(..).enumerate() {
            if matched_tracks[ti] {
                keep.push(track);
            } else {
                track.status = TrackStatus::Terminated;
                finish(track, &mut out);
            }
        }
        active = keep;

        for (dj, det) in obs.detections.iter().enumerate() {
            if matched_dets[dj] {
                continue;
            }
            let mut t = kf_initialize(next_id, det, prev_mean, &cfg.p0);
            next_id += 1;
            t.last_flow = det_flow(dj);
            active.push(t);
        }

        prev_mean = mean_now;
    }

    for mut track in active {
        track.status = TrackStatus::Terminated;
        finish(track, &mut out);
    }
    Ok(out)
}
