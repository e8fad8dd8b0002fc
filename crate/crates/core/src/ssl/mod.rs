//! Pretext-task inputs: rotated image sets and 3×3 patch grids.

mod patches;
mod rotation;

pub use patches::{
    extract_patches, make_location_pairs, neighbor_cell, LocationPairs, PatchSet, CENTER_CELL,
    CROP, GRAYSCALE_PROB, NUM_NEIGHBORS, RESIZE,
};
pub use rotation::{make_rotation_batch, rotate_image, Rotation};
