//! Optical-flow provider contract.
//!
//! The pipeline never touches pixels; flow queries go through this trait.
//! The simulator offers an exact oracle implementation, and
//! [`ObservationFlowProvider`] reconstructs flow answers from ingested
//! per-frame observations (recorded detection flows plus trunk-corner
//! cloud matching).

use std::collections::BTreeMap;

use nalgebra::Vector2;

use crate::model::{FlowVector, FrameObservation};

/// Snap radius when matching a query position to a recorded feature.
const DETECTION_RADIUS: f64 = 3.0;
const CORNER_RADIUS: f64 = 0.75;
const CORNER_SNAP: f64 = 5.0;

pub trait FlowProvider: Sync {
    /// Displacement from `pos` in `frame` towards `frame + 1`.
    fn flow(&self, frame: usize, pos: Vector2<f64>) -> Option<FlowVector>;

    /// Displacement from `pos` in `frame` towards `frame - 1`.
    fn flow_back(&self, frame: usize, pos: Vector2<f64>) -> Option<FlowVector>;

    /// Refined displacement from `pos` in `frame` to `frame + 1`, starting
    /// from an initial guess. The default provider has nothing better than
    /// the guess itself.
    fn refine(&self, frame: usize, pos: Vector2<f64>, guess: FlowVector) -> FlowVector {
        let _ = (frame, pos);
        guess
    }
}

#[derive(Debug, Clone)]
struct FrameIndex {
    detections: Vec<(Vector2<f64>, FlowVector)>,
    /// Trunk corners grouped by trunk id.
    corners: BTreeMap<usize, Vec<Vector2<f64>>>,
}

/// Flow answers reconstructed from an observation stream.
#[derive(Debug, Clone)]
pub struct ObservationFlowProvider {
    first_frame: usize,
    frames: Vec<FrameIndex>,
    /// Median shift of each trunk's corner cloud between consecutive frames.
    corner_shift: BTreeMap<(usize, usize), Vector2<f64>>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn nearest(points: &[Vector2<f64>], pos: Vector2<f64>) -> Option<(usize, f64)> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, (p - pos).norm()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

impl ObservationFlowProvider {
    pub fn new(observations: &[FrameObservation]) -> Self {
        let first_frame = observations.first().map_or(0, |o| o.frame);
        let frames: Vec<FrameIndex> = observations
            .iter()
            .map(|obs| {
                let flows = obs.flows.as_deref().unwrap_or(&[]);
                let detections = obs
                    .detections
                    .iter()
                    .enumerate()
                    .map(|(i, d)| (d.center(), flows.get(i).copied().unwrap_or(FlowVector::zero())))
                    .collect();
                let mut corners: BTreeMap<usize, Vec<Vector2<f64>>> = BTreeMap::new();
                for c in obs.trunk_corners.as_deref().unwrap_or(&[]) {
                    corners.entry(c.trunk_id).or_default().push(c.point);
                }
                FrameIndex { detections, corners }
            })
            .collect();

        let mut corner_shift = BTreeMap::new();
        for w in 0..frames.len().saturating_sub(1) {
            let (cur, next) = (&frames[w], &frames[w + 1]);
            for (&trunk, pts) in &cur.corners {
                if let Some(next_pts) = next.corners.get(&trunk) {
                    if pts.is_empty() || next_pts.is_empty() {
                        continue;
                    }
                    let du = median(next_pts.iter().map(|p| p.x).collect())
                        - median(pts.iter().map(|p| p.x).collect());
                    let dv = median(next_pts.iter().map(|p| p.y).collect())
                        - median(pts.iter().map(|p| p.y).collect());
                    corner_shift.insert((trunk, first_frame + w), Vector2::new(du, dv));
                }
            }
        }
        Self {
            first_frame,
            frames,
            corner_shift,
        }
    }

    fn index(&self, frame: usize) -> Option<&FrameIndex> {
        frame.checked_sub(self.first_frame).and_then(|i| self.frames.get(i))
    }

    /// Corner-cloud flow from `frame` to `frame + step` (step is ±1).
    fn corner_flow(&self, frame: usize, pos: Vector2<f64>, forward: bool) -> Option<FlowVector> {
        let cur = self.index(frame)?;
        let (trunk, dist) = cur
            .corners
            .iter()
            .filter_map(|(&t, pts)| nearest(pts, pos).map(|(_, d)| (t, d)))
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        if dist > CORNER_RADIUS {
            return None;
        }
        let (other_frame, shift) = if forward {
            (frame + 1, *self.corner_shift.get(&(trunk, frame))?)
        } else {
            let prev = frame.checked_sub(1)?;
            (prev, -*self.corner_shift.get(&(trunk, prev))?)
        };
        let other = self.index(other_frame)?;
        let candidates = other.corners.get(&trunk)?;
        let predicted = pos + shift;
        let (idx, d) = nearest(candidates, predicted)?;
        if d > CORNER_SNAP {
            return None;
        }
        let target = candidates[idx];
        FlowVector::new(target.x - pos.x, target.y - pos.y).ok()
    }

    fn detection_flow(&self, frame: usize, pos: Vector2<f64>) -> Option<FlowVector> {
        let cur = self.index(frame)?;
        let (i, d) = nearest(
            &cur.detections.iter().map(|(c, _)| *c).collect::<Vec<_>>(),
            pos,
        )?;
        (d <= DETECTION_RADIUS).then(|| cur.detections[i].1)
    }
}

impl FlowProvider for ObservationFlowProvider {
    fn flow(&self, frame: usize, pos: Vector2<f64>) -> Option<FlowVector> {
        self.corner_flow(frame, pos, true)
            .or_else(|| self.detection_flow(frame, pos))
    }

    fn flow_back(&self, frame: usize, pos: Vector2<f64>) -> Option<FlowVector> {
        if let Some(f) = self.corner_flow(frame, pos, false) {
            return Some(f);
        }
        // A detection in frame-1 whose recorded flow lands on `pos` flowed
        // into it; reverse that displacement.
        let prev = self.index(frame.checked_sub(1)?)?;
        let landed: Vec<Vector2<f64>> = prev
            .detections
            .iter()
            .map(|(c, f)| c + f.as_vector())
            .collect();
        let (i, d) = nearest(&landed, pos)?;
        if d > DETECTION_RADIUS {
            return None;
        }
        let origin = prev.detections[i].0;
        FlowVector::new(origin.x - pos.x, origin.y - pos.y).ok()
    }

    fn refine(&self, frame: usize, pos: Vector2<f64>, guess: FlowVector) -> FlowVector {
        self.detection_flow(frame, pos).unwrap_or(guess)
    }
}

/// Provider used when no flow information exists at all: every refinement
/// returns the guess and raw flow queries fail.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityFlowProvider;

impl FlowProvider for IdentityFlowProvider {
    fn flow(&self, _frame: usize, _pos: Vector2<f64>) -> Option<FlowVector> {
        None
    }

    fn flow_back(&self, _frame: usize, _pos: Vector2<f64>) -> Option<FlowVector> {
        None
    }
}
