//! Mesh ingestion, synthetic shapes, text clouds and checkpoints.

mod checkpoint;
mod mesh;
mod synth;
mod xyz;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC,
    VERSION,
};
pub use mesh::{
    parse_off, parse_off_bytes, sample_mesh_surface, sample_surface_with, triangle_area, Mesh,
};
pub use synth::{
    augment, generate_synthetic, sample_seed, sample_shape, synthetic_split, ShapeClass,
    HELIX_RADIUS, HELIX_TUBE, HELIX_TURNS, TORUS_MAJOR, TORUS_MINOR,
};
pub use xyz::{format_xyz, load_xyz, parse_xyz, save_xyz};
