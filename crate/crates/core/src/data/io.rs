//! Sequence directories: `frame_%05d.png`, optional `depth_%05d.pgm`, and `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::geometry::{Intrinsics, SE3Transform};
use super::image::{DepthMap, Image};
use super::sequence::FrameSequence;
use crate::error::{IoContext, MesaError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub frame_count: usize,
    /// Row-major 3×4 `[R | t]` per consecutive pair, frame `i → i+1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<Vec<Vec<f64>>>,
}

pub fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("frame_{i:05}.png"))
}

pub fn depth_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("depth_{i:05}.pgm"))
}

pub fn pseudo_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("pseudo_{i:05}.pgm"))
}

/// Boundary and plane annotations for frame `i`.
pub fn ood_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("ood_{i:05}.json"))
}

fn numbered_files(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(num) = name.strip_prefix(prefix).and_then(|r| r.strip_suffix(ext)) {
            if num.len() == 5 && num.bytes().all(|b| b.is_ascii_digit()) {
                out.push((num.parse().expect("five digits"), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f64 / 255.0;
        }
    }
    Image::new(h, w, data)
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| (img.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path)?;
    Ok(())
}

/// 16-bit PGM in millimeters; zero marks invalid pixels.
pub fn load_depth_mm(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.into_raw()))
}

pub fn load_depth(path: &Path) -> Result<DepthMap> {
    let (h, w, raw) = load_depth_mm(path)?;
    let valid = raw.iter().map(|&v| v > 0).collect();
    let depth = raw.iter().map(|&v| if v > 0 { v as f64 / 1000.0 } else { 1.0 }).collect();
    DepthMap::new(h, w, depth, valid)
}

pub fn save_depth(d: &DepthMap, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(d.width() as u32, d.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let mm = if d.is_valid(y, x) { (d.at(y, x) * 1000.0).round().clamp(1.0, 65535.0) as u16 } else { 0 };
        Luma([mm])
    });
    buf.save(path)?;
    Ok(())
}

/// Loads frames in filename order; ground truth left absent when files are missing.
pub fn load_sequence(dir: &Path) -> Result<FrameSequence> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(MesaError::InvalidInput(format!("missing {}", manifest_path.display())));
    }
    let manifest: SequenceManifest = serde_json::from_str(&fs::read_to_string(&manifest_path).at(&manifest_path)?)?;
    let files = numbered_files(dir, "frame_", ".png")?;
    if files.len() != manifest.frame_count {
        return Err(MesaError::InvalidInput(format!(
            "manifest lists {} frames, directory has {}",
            manifest.frame_count,
            files.len()
        )));
    }
    let frames = files.iter().map(|(_, p)| load_image(p)).collect::<Result<Vec<_>>>()?;
    if let Some(i) = frames.iter().position(|f| !f.same_size(&frames[0])) {
        return Err(MesaError::Shape(format!("{} has a different resolution than the first frame", files[i].1.display())));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    let k = Intrinsics::new(manifest.fx, manifest.fy, manifest.cx, manifest.cy, w, h)?;
    let depth_files: Vec<PathBuf> = files.iter().map(|(i, _)| depth_path(dir, *i)).collect();
    let gt_depths = if depth_files.iter().all(|p| p.exists()) {
        Some(depth_files.iter().map(|p| load_depth(p)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let gt_poses = manifest
        .poses
        .as_ref()
        .map(|ps| ps.iter().map(|p| SE3Transform::from_row_major(p)).collect::<Result<Vec<_>>>())
        .transpose()?;
    FrameSequence::new(frames, k, gt_depths, gt_poses)
}

pub fn save_sequence(seq: &FrameSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for (i, f) in seq.frames().iter().enumerate() {
        save_image(f, &frame_path(dir, i))?;
    }
    if let Some(ds) = seq.gt_depths() {
        for (i, d) in ds.iter().enumerate() {
            save_depth(d, &depth_path(dir, i))?;
        }
    }
    let k = seq.intrinsics();
    let manifest = SequenceManifest {
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        frame_count: seq.len(),
        poses: seq.gt_poses().map(|ps| ps.iter().map(|p| p.to_row_major().to_vec()).collect()),
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    Ok(())
}
