//! Synthetic scenes, patch extraction, splits and their on-disk forms.

mod split;
mod store;
mod synth;
mod tile;

pub use split::{split_dataset, DatasetManifest, ManifestEntry, SampleRef, Split, SplitRatios};
pub use store::{
    decode_depth, encode_depth, read_manifest, read_scene, scene_dir, write_manifest, write_scene,
    ManifestHeader, DEPTH_MAGIC,
};
pub use synth::{generate_scene, RasterScene, SceneParams, SceneStats, MIN_SCENE_SIDE};
pub use tile::{
    fill_input, fill_target, normalize_depth, normalize_rgb, sample_id, split_sample_id, tile_scene,
    MemorySource, PatchSample, PatchSource, SceneSource, TileGrid, Tiling,
};
