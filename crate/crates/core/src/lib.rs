//! Monocular fruit counting from image-sequence observations.
//!
//! The pipeline tracks detected fruits in 2D, treats the resulting tracks
//! as feature matches for an object-level structure-from-motion
//! reconstruction, re-associates 3D landmarks with detections to reject
//! double-tracked fruits, and compares landmark depths against triangulated
//! trunk depths to reject fruits seen from the far side of a tree row.
//! A built-in synthetic orchard provides ground truth for every stage.

pub mod align;
pub mod assign;
pub mod count;
pub mod flow;
pub mod model;
pub mod reassoc;
pub mod sfm;
pub mod sim;
pub mod track;
pub mod trunk;

pub use model::{
    box_overlap, camera_depth, project, reprojection_error, BoundingBox, CameraIntrinsics,
    CameraPose, Detection, FeatureMatchSet, FlowVector, FrameObservation, FruitTrack, ImageSize,
    Landmark, Side, TrunkCorner,
};
