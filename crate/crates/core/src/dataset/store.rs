//! On-disk scene containers and the dataset manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::split::{DatasetManifest, ManifestEntry, SplitRatios};
use super::synth::{RasterScene, SceneStats};
use crate::error::{Error, Result};
use crate::io;
use crate::raster::Raster;

pub const DEPTH_MAGIC: &[u8; 8] = b"BSEGDEP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SceneMeta {
    id: u32,
    seed: u64,
    height: usize,
    width: usize,
    stats: SceneStats,
    config_hash: String,
}

pub fn scene_dir(root: &Path, id: u32) -> PathBuf {
    root.join(format!("scene_{id:05}"))
}

fn format_err(what: &'static str, path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        what,
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn encode_png(width: usize, height: usize, colour: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(colour);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory png header");
        w.write_image_data(data).expect("in-memory png body");
    }
    out
}

fn decode_png(path: &Path, colour: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = io::read(path)?;
    let decoder = png::Decoder::new(bytes.as_slice());
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err("png", path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err("png", path, e.to_string()))?;
    if info.color_type != colour || info.bit_depth != png::BitDepth::Eight {
        return Err(format_err(
            "png",
            path,
            format!("expected 8-bit {colour:?}, found {:?} {:?}", info.bit_depth, info.color_type),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

pub fn encode_depth(depth: &Raster<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + depth.data.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(depth.height as u32).to_le_bytes());
    out.extend_from_slice(&(depth.width as u32).to_le_bytes());
    for v in &depth.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<Raster<f32>> {
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err(format_err("depth raster", path, "bad magic"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != h * w * 4 {
        return Err(format_err(
            "depth raster",
            path,
            format!("{h}×{w} header but {} payload bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Raster::from_vec(h, w, data).expect("checked size"))
}

pub fn write_scene(root: &Path, scene: &RasterScene, config_hash: &str) -> Result<PathBuf> {
    let dir = scene_dir(root, scene.id);
    io::create_dir_all(&dir)?;
    let (h, w) = (scene.height(), scene.width());
    io::write_atomic(&dir.join("rgb.png"), &encode_png(w, h, png::ColorType::Rgb, &scene.rgb))?;
    let gt: Vec<u8> = scene.gt.data.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    io::write_atomic(&dir.join("gt.png"), &encode_png(w, h, png::ColorType::Grayscale, &gt))?;
    io::write_atomic(&dir.join("depth.f32"), &encode_depth(&scene.depth))?;
    io::write_json(
        &dir.join("scene.json"),
        &SceneMeta {
            id: scene.id,
            seed: scene.seed,
            height: h,
            width: w,
            stats: scene.stats,
            config_hash: config_hash.to_string(),
        },
    )?;
    Ok(dir)
}

/// Loads a scene and returns it with the config hash it was written under.
pub fn read_scene(root: &Path, id: u32) -> Result<(RasterScene, String)> {
    let dir = scene_dir(root, id);
    let meta: SceneMeta = io::read_json(&dir.join("scene.json"), "scene metadata")?;
    let (h, w, rgb) = decode_png(&dir.join("rgb.png"), png::ColorType::Rgb)?;
    let (gh, gw, gt) = decode_png(&dir.join("gt.png"), png::ColorType::Grayscale)?;
    let depth_path = dir.join("depth.f32");
    let depth = decode_depth(&io::read(&depth_path)?, &depth_path)?;
    let dims = [(h, w), (gh, gw), (depth.height, depth.width)];
    if dims.iter().any(|&d| d != (meta.height, meta.width)) {
        return Err(format_err(
            "scene",
            &dir,
            format!("layer sizes {dims:?} disagree with metadata {}×{}", meta.height, meta.width),
        ));
    }
    if gt.iter().any(|&v| v != 0 && v != 255) {
        return Err(format_err("scene", &dir.join("gt.png"), "mask values must be 0 or 255"));
    }
    let gt = Raster::from_vec(h, w, gt.into_iter().map(|v| u8::from(v == 255)).collect()).unwrap();
    Ok((
        RasterScene {
            id: meta.id,
            seed: meta.seed,
            rgb,
            depth,
            gt,
            stats: meta.stats,
        },
        meta.config_hash,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub kind: String,
    pub ratios: SplitRatios,
    pub seed: u64,
    pub config_hash: String,
    /// Scene ids the samples were cut from.
    pub scenes: Vec<u32>,
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest, config_hash: &str) -> Result<()> {
    let mut scenes: Vec<u32> = manifest.entries.iter().map(|e| e.scene_id).collect();
    scenes.dedup();
    let header = ManifestHeader {
        kind: "dataset_manifest".into(),
        ratios: manifest.ratios.clone(),
        seed: manifest.seed,
        config_hash: config_hash.to_string(),
        scenes,
    };
    io::write_jsonl(path, &header, &manifest.entries)
}

pub fn read_manifest(path: &Path) -> Result<(DatasetManifest, ManifestHeader)> {
    let (header, entries): (ManifestHeader, Vec<ManifestEntry>) = io::read_jsonl(path, "dataset manifest")?;
    if header.kind != "dataset_manifest" {
        return Err(format_err("dataset manifest", path, format!("unexpected kind {:?}", header.kind)));
    }
    Ok((
        DatasetManifest {
            ratios: header.ratios.clone(),
            seed: header.seed,
            entries,
        },
        header,
    ))
}
