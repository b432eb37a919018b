//! File formats: 8-bit PNG frames and masks, `F4DF` flow files, camera
//! JSON, and the on-disk dataset layout produced by `scene gen`.
//!
//! Dataset layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/cameras.json              one record per frame
//! <dir>/frames/frame_0000.png
//! <dir>/masks/mask_0000.png
//! <dir>/flow/flow_0000.f4df       flow from frame k to k + 1
//! <dir>/views/cameras.json        optional multi-view stills of frame 0
//! <dir>/views/view_0000.png
//! <dir>/views/mask_0000.png
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::DirectPriorTargets;
use crate::render::Camera;

/// Linear RGB image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<[f64; 3]>,
}

/// Single-channel mask with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

/// Per-pixel 2D flow in pixels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: u32,
    pub height: u32,
    pub flow: Vec<[f64; 2]>,
}

impl Frame {
    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            rgb: vec![rgb; width as usize * height as usize],
        }
    }
}

impl FlowField {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            flow: vec![[0.0; 2]; width as usize * height as usize],
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn write_png_rgb(path: &Path, frame: &Frame) -> Result<()> {
    ensure_parent(path)?;
    let bytes: Vec<u8> = frame.rgb.iter().flat_map(|p| p.map(quantize)).collect();
    image::save_buffer(path, &bytes, frame.width, frame.height, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

pub fn read_png_rgb(path: &Path) -> Result<Frame> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (width, height) = img.dimensions();
    let rgb = img
        .pixels()
        .map(|p| p.0.map(|c| c as f64 / 255.0))
        .collect();
    Ok(Frame { width, height, rgb })
}

pub fn write_png_mask(path: &Path, mask: &Mask) -> Result<()> {
    ensure_parent(path)?;
    let bytes: Vec<u8> = mask.values.iter().map(|&v| quantize(v)).collect();
    image::save_buffer(path, &bytes, mask.width, mask.height, image::ExtendedColorType::L8)?;
    Ok(())
}

pub fn read_png_mask(path: &Path) -> Result<Mask> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let (width, height) = img.dimensions();
    let values = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Ok(Mask { width, height, values })
}

const FLOW_MAGIC: &[u8; 4] = b"F4DF";

/// `F4DF` magic, u32 width, u32 height, then row-major `(fx, fy)` f32 LE pairs.
pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    ensure_parent(path)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FLOW_MAGIC)?;
    w.write_all(&flow.width.to_le_bytes())?;
    w.write_all(&flow.height.to_le_bytes())?;
    for f in &flow.flow {
        w.write_all(&(f[0] as f32).to_le_bytes())?;
        w.write_all(&(f[1] as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
        return Err(Error::format(path, "missing F4DF header"));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let n = width as usize * height as usize;
    if bytes.len() != 12 + 8 * n {
        return Err(Error::format(
            path,
            &format!("expected {} bytes of flow for {width}x{height}, found {}", 8 * n, bytes.len() - 12),
        ));
    }
    let flow = bytes[12..]
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[..4].try_into().unwrap()) as f64,
                f32::from_le_bytes(c[4..].try_into().unwrap()) as f64,
            ]
        })
        .collect();
    Ok(FlowField { width, height, flow })
}

/// Camera JSON record: intrinsics, pose, clip range and frame time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub c2w: Vec<f64>,
    pub near: f64,
    pub far: f64,
    pub time: f64,
}

impl CameraRecord {
    pub fn new(camera: &Camera, time: f64) -> Self {
        Self {
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            width: camera.width,
            height: camera.height,
            c2w: camera.c2w.to_vec(),
            near: camera.near,
            far: camera.far,
            time,
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        let c2w: [f64; 16] = self
            .c2w
            .as_slice()
            .try_into()
            .map_err(|_| Error::Domain(format!("c2w needs 16 entries, got {}", self.c2w.len())))?;
        let cam = Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            c2w,
            near: self.near,
            far: self.far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

pub fn write_cameras(path: &Path, cameras: &[Camera], times: &[f64]) -> Result<()> {
    ensure_parent(path)?;
    let records: Vec<CameraRecord> = cameras
        .iter()
        .zip(times)
        .map(|(c, &t)| CameraRecord::new(c, t))
        .collect();
    fs::write(path, serde_json::to_string_pretty(&records)?)?;
    Ok(())
}

pub fn read_cameras(path: &Path) -> Result<(Vec<Camera>, Vec<f64>)> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let records: Vec<CameraRecord> = serde_json::from_str(&fs::read_to_string(path)?)?;
    let cams = records.iter().map(CameraRecord::camera).collect::<Result<Vec<_>>>()?;
    let times = records.iter().map(|r| r.time).collect();
    Ok((cams, times))
}

/// Dataset metadata stored in `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub variant: String,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub views: usize,
    pub seed: u64,
    pub topology_change: bool,
    pub scene: serde_json::Value,
}

/// A reference clip plus optional multi-view stills of its first frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clip: DirectPriorTargets,
    pub views: Option<DirectPriorTargets>,
}

pub fn frame_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("frames").join(format!("frame_{k:04}.png"))
}

pub fn mask_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("masks").join(format!("mask_{k:04}.png"))
}

pub fn flow_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("flow").join(format!("flow_{k:04}.f4df"))
}

fn view_paths(dir: &Path, k: usize) -> (PathBuf, PathBuf) {
    let v = dir.join("views");
    (v.join(format!("view_{k:04}.png")), v.join(format!("mask_{k:04}.png")))
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let clip = &data.clip;
    clip.validate()?;
    for (k, f) in clip.frames.iter().enumerate() {
        write_png_rgb(&frame_path(dir, k), f)?;
        write_png_mask(&mask_path(dir, k), &clip.masks[k])?;
    }
    for (k, f) in clip.flows.iter().enumerate() {
        write_flow(&flow_path(dir, k), f)?;
    }
    write_cameras(&dir.join("cameras.json"), &clip.cameras, &clip.times)?;
    if let Some(views) = &data.views {
        for (k, f) in views.frames.iter().enumerate() {
            let (img, mask) = view_paths(dir, k);
            write_png_rgb(&img, f)?;
            write_png_mask(&mask, &views.masks[k])?;
        }
        write_cameras(&dir.join("views").join("cameras.json"), &views.cameras, &views.times)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&data.manifest)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::Missing(manifest_path));
    }
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let (cameras, times) = read_cameras(&dir.join("cameras.json"))?;
    let n = manifest.frames;
    if cameras.len() != n {
        return Err(Error::format(
            &dir.join("cameras.json"),
            &format!("{} cameras for {n} frames", cameras.len()),
        ));
    }
    let frames = (0..n).map(|k| read_png_rgb(&frame_path(dir, k))).collect::<Result<Vec<_>>>()?;
    let masks = (0..n).map(|k| read_png_mask(&mask_path(dir, k))).collect::<Result<Vec<_>>>()?;
    let flows = (0..n.saturating_sub(1))
        .map(|k| read_flow(&flow_path(dir, k)))
        .collect::<Result<Vec<_>>>()?;
    let clip = DirectPriorTargets {
        cameras,
        times,
        frames,
        masks,
        flows,
    };
    clip.validate()?;
    let views = if manifest.views > 0 {
        let (cameras, times) = read_cameras(&dir.join("views").join("cameras.json"))?;
        let mut frames = Vec::new();
        let mut masks = Vec::new();
        for k in 0..manifest.views {
            let (img, mask) = view_paths(dir, k);
            frames.push(read_png_rgb(&img)?);
            masks.push(read_png_mask(&mask)?);
        }
        Some(DirectPriorTargets {
            cameras,
            times,
            frames,
            masks,
            flows: Vec::new(),
        })
    } else {
        None
    };
    Ok(Dataset { manifest, clip, views })
}
