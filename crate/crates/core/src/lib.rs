//! Single-view inversion of a latent radiance field with a facial-symmetry
//! prior: mirror-view supervision, depth-guided warped pseudo views and
//! depth regularisation over a miniature feature-grid generator.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod grad;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod losses;
pub mod pipeline;
pub mod synthhead;
pub mod warp;

pub use error::{Error, Result};
pub use field::{FieldShape, LatentCode, NoiseMap, PriorDecoder, RenderOutput, RenderSettings};
pub use geometry::{Intrinsics, MirrorWeightParams, Pose};
pub use image::{Image, Mask};
pub use losses::{Component, RoiBox, RoiBoxes};
pub use synthhead::{SceneRecord, SceneSpec, ViewRecord};
pub use warp::{PseudoBank, PseudoView, Provenance};
