//! Recorded dataset I/O.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! depth/000000.png     16-bit grayscale, depth units (usually millimeters)
//! color/000000.png     8-bit RGB
//! intrinsics.txt       fov_h fov_v res_h res_v depth_scale (whitespace)
//! poses.txt            one 4x4 row-major camera-to-world matrix per line
//! ```
//!
//! Field-of-view angles in `intrinsics.txt` are radians.

use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use nalgebra::{Matrix3, Vector3};

use crate::frame::{CameraIntrinsics, CameraPose, RgbdFrame};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("missing {0}")]
    Missing(PathBuf),
    #[error("cannot read {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("cannot decode image {0}: {1}")]
    Image(PathBuf, #[source] image::ImageError),
    #[error("malformed {0}: {1}")]
    Malformed(PathBuf, String),
    #[error("frame count mismatch: {depth} depth images, {color} color images, {poses} poses")]
    CountMismatch { depth: usize, color: usize, poses: usize },
}

/// A dataset opened for reading.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<CameraPose>,
    frames: usize,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let intrinsics = read_intrinsics(&root.join("intrinsics.txt"))?;
        let poses = read_poses(&root.join("poses.txt"))?;
        let depth_count = count_pngs(&root.join("depth"))?;
        let color_count = count_pngs(&root.join("color"))?;
        if depth_count != color_count || depth_count != poses.len() {
            return Err(DatasetError::CountMismatch {
                depth: depth_count,
                color: color_count,
                poses: poses.len(),
            });
        }
        Ok(Self { root: root.to_path_buf(), intrinsics, poses, frames: depth_count })
    }

    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn load_frame(&self, index: usize) -> Result<RgbdFrame, DatasetError> {
        let depth_path = self.root.join(format!("depth/{index:06}.png"));
        let color_path = self.root.join(format!("color/{index:06}.png"));
        let depth_img = open_image(&depth_path)?.into_luma16();
        let color_img = open_image(&color_path)?.into_rgb8();

        let (w, h) = (self.intrinsics.res_h as u32, self.intrinsics.res_v as u32);
        if depth_img.dimensions() != (w, h) {
            return Err(DatasetError::Malformed(
                depth_path,
                format!("expected {w}x{h}, found {:?}", depth_img.dimensions()),
            ));
        }
        if color_img.dimensions() != (w, h) {
            return Err(DatasetError::Malformed(
                color_path,
                format!("expected {w}x{h}, found {:?}", color_img.dimensions()),
            ));
        }

        let scale = self.intrinsics.depth_scale;
        let depth: Vec<f32> =
            depth_img.pixels().map(|p| (p.0[0] as f64 * scale) as f32).collect();
        let color: Vec<[u8; 3]> = color_img.pixels().map(|p| p.0).collect();
        Ok(RgbdFrame::new(depth, color, self.intrinsics, self.poses[index], index))
    }
}

/// Writes frames into a fresh dataset directory in the standard layout.
pub struct DatasetWriter {
    root: PathBuf,
    intrinsics: CameraIntrinsics,
    poses: Vec<CameraPose>,
    written: usize,
}

impl DatasetWriter {
    pub fn create(root: &Path, intrinsics: CameraIntrinsics) -> Result<Self, DatasetError> {
        for sub in ["depth", "color"] {
            fs::create_dir_all(root.join(sub))
                .map_err(|e| DatasetError::Io(root.join(sub), e))?;
        }
        let text = format!(
            "{} {} {} {} {}\n",
            intrinsics.fov_h,
            intrinsics.fov_v,
            intrinsics.res_h,
            intrinsics.res_v,
            intrinsics.depth_scale
        );
        let path = root.join("intrinsics.txt");
        fs::write(&path, text).map_err(|e| DatasetError::Io(path, e))?;
        Ok(Self { root: root.to_path_buf(), intrinsics, poses: Vec::new(), written: 0 })
    }

    pub fn append(&mut self, frame: &RgbdFrame) -> Result<(), DatasetError> {
        let (w, h) = (self.intrinsics.res_h as u32, self.intrinsics.res_v as u32);
        let scale = self.intrinsics.depth_scale;
        let depth_img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
            let d = frame.depth[(y * w + x) as usize] as f64 / scale;
            Luma([d.round().clamp(0.0, u16::MAX as f64) as u16])
        });
        let color_img: RgbImage =
            ImageBuffer::from_fn(w, h, |x, y| Rgb(frame.color[(y * w + x) as usize]));
        let dp = self.root.join(format!("depth/{:06}.png", self.written));
        let cp = self.root.join(format!("color/{:06}.png", self.written));
        depth_img.save(&dp).map_err(|e| DatasetError::Image(dp.clone(), e))?;
        color_img.save(&cp).map_err(|e| DatasetError::Image(cp.clone(), e))?;
        self.poses.push(frame.pose);
        self.written += 1;
        Ok(())
    }

    /// Write `poses.txt` and finish.
    pub fn finish(self) -> Result<(), DatasetError> {
        let mut text = String::new();
        for pose in &self.poses {
            let r = &pose.rotation;
            let t = &pose.translation;
            let rows = [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
                [0.0, 0.0, 0.0, 1.0],
            ];
            let mut line = String::new();
            for row in rows {
                for val in row {
                    if !line.is_empty() {
                        line.push(' ');
                    }
                    line.push_str(&format!("{val:.9}"));
                }
            }
            text.push_str(&line);
            text.push('\n');
        }
        let path = self.root.join("poses.txt");
        fs::write(&path, text).map_err(|e| DatasetError::Io(path, e))
    }
}

/// Save a bare depth map as a 16-bit PNG using the given depth scale.
pub fn save_depth_png(
    path: &Path,
    depth: &[f32],
    width: usize,
    height: usize,
    scale: f64,
) -> Result<(), DatasetError> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
            let d = depth[(y as usize) * width + x as usize] as f64 / scale;
            Luma([d.round().clamp(0.0, u16::MAX as f64) as u16])
        });
    img.save(path).map_err(|e| DatasetError::Image(path.to_path_buf(), e))
}

fn open_image(path: &Path) -> Result<image::DynamicImage, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::Missing(path.to_path_buf()));
    }
    image::open(path).map_err(|e| DatasetError::Image(path.to_path_buf(), e))
}

fn count_pngs(dir: &Path) -> Result<usize, DatasetError> {
    if !dir.is_dir() {
        return Err(DatasetError::Missing(dir.to_path_buf()));
    }
    let mut count = 0;
    for entry in fs::read_dir(dir).map_err(|e| DatasetError::Io(dir.to_path_buf(), e))? {
        let entry = entry.map_err(|e| DatasetError::Io(dir.to_path_buf(), e))?;
        if entry.path().extension().is_some_and(|e| e == "png") {
            count += 1;
        }
    }
    Ok(count)
}

fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io(path.to_path_buf(), e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| DatasetError::Malformed(path.to_path_buf(), e.to_string()))?;
    if vals.len() != 5 {
        return Err(DatasetError::Malformed(
            path.to_path_buf(),
            format!("expected 5 values, found {}", vals.len()),
        ));
    }
    if !(vals[0] > 0.0 && vals[0] < std::f64::consts::PI)
        || !(vals[1] > 0.0 && vals[1] < std::f64::consts::PI)
        || vals[2] < 1.0
        || vals[3] < 1.0
        || vals[4] <= 0.0
    {
        return Err(DatasetError::Malformed(path.to_path_buf(), "values out of range".into()));
    }
    Ok(CameraIntrinsics::new(vals[0], vals[1], vals[2] as usize, vals[3] as usize, vals[4]))
}

fn read_poses(path: &Path) -> Result<Vec<CameraPose>, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::Missing(path.to_path_buf()));
    }
    let file = fs::File::open(path).map_err(|e| DatasetError::Io(path.to_path_buf(), e))?;
    let mut poses = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::Io(path.to_path_buf(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| {
                DatasetError::Malformed(path.to_path_buf(), format!("line {}: {e}", lineno + 1))
            })?;
        if vals.len() != 16 {
            return Err(DatasetError::Malformed(
                path.to_path_buf(),
                format!("line {}: expected 16 values, found {}", lineno + 1, vals.len()),
            ));
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        let pose = CameraPose { rotation, translation };
        if !pose.is_valid() {
            return Err(DatasetError::Malformed(
                path.to_path_buf(),
                format!("line {}: rotation is not orthonormal", lineno + 1),
            ));
        }
        poses.push(pose);
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_frame() -> RgbdFrame {
        let intr = CameraIntrinsics::new(1.0, 0.8, 8, 6, 0.001);
        let n = intr.res_h * intr.res_v;
        let depth: Vec<f32> = (0..n).map(|i| 0.001 * (i as f32 + 1.0)).collect();
        let color: Vec<[u8; 3]> = (0..n).map(|i| [i as u8, 2 * i as u8, 255 - i as u8]).collect();
        let pose = CameraPose::look_at(
            Vector3::new(0.5, 0.25, -1.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::y(),
        );
        RgbdFrame::new(depth, color, intr, pose, 0)
    }

    #[test]
    fn round_trip_through_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let frame = tiny_frame();
        let mut writer = DatasetWriter::create(dir.path(), frame.intrinsics).unwrap();
        writer.append(&frame).unwrap();
        writer.finish().unwrap();

        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
        let back = ds.load_frame(0).unwrap();
        // Depth quantized to millimeters on disk.
        for (a, b) in frame.depth.iter().zip(&back.depth) {
            assert!((a - b).abs() < 0.5e-3 + 1e-6);
        }
        assert_eq!(frame.color, back.color);
        assert!((back.pose.translation - frame.pose.translation).norm() < 1e-8);
        assert!((back.pose.rotation - frame.pose.rotation).norm() < 1e-8);
    }

    #[test]
    fn missing_poses_is_reported_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let frame = tiny_frame();
        let mut writer = DatasetWriter::create(dir.path(), frame.intrinsics).unwrap();
        writer.append(&frame).unwrap();
        drop(writer); // never wrote poses.txt
        let err = Dataset::open(dir.path()).unwrap_err();
        assert!(err.to_string().contains("poses.txt"), "{err}");
    }

    #[test]
    fn frame_count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let frame = tiny_frame();
        let mut writer = DatasetWriter::create(dir.path(), frame.intrinsics).unwrap();
        writer.append(&frame).unwrap();
        writer.append(&frame).unwrap();
        writer.finish().unwrap();
        std::fs::remove_file(dir.path().join("color/000001.png")).unwrap();
        match Dataset::open(dir.path()) {
            Err(DatasetError::CountMismatch { depth: 2, color: 1, poses: 2 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }
}
