//! On-disk dataset layout:
//!
//! ```text
//! root/
//!   intrinsics.txt      fx fy cx cy skew
//!   poses.txt           one camera-to-world 3×4 row-major pose per line
//!   positions.txt       optional, one "x y" ground position per line
//!   images/000000.png   8-bit grayscale
//!   clouds/000000.bin   little-endian f32 xyz triples, world frame
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};

use super::HarnessError;
use crate::geometry::{Intrinsics, PoseSE3};
use crate::imaging::GrayImage;
use crate::scene::{PointCloud, ReferenceTuple};

/// Tolerance on the rotation part of stored poses.
pub const POSE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    pub id: usize,
    pub image_path: PathBuf,
    pub cloud_path: PathBuf,
    pub camera_to_world: PoseSE3,
    pub position: Option<Vector2<f64>>,
}

/// Paths and poses of a dataset, validated but not yet loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub sequence: String,
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameEntry>,
}

/// A fully loaded dataset. Frame poses are world-to-camera.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub intrinsics: Intrinsics,
    pub frames: Vec<ReferenceTuple>,
    pub positions: Option<Vec<Vector2<f64>>>,
}

fn frame_name(id: usize, ext: &str) -> String {
    format!("{id:06}.{ext}")
}

fn require(path: &Path) -> Result<(), HarnessError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::MissingFile(path.to_path_buf()))
    }
}

fn parse_reals(path: &Path, line_no: usize, line: &str) -> Result<Vec<f64>, HarnessError> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|e| HarnessError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("'{tok}': {e}"),
            })
        })
        .collect()
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn count_files(dir: &Path, ext: &str) -> Result<usize, HarnessError> {
    Ok(fs::read_dir(dir)?
        .filter_map(Result::ok)
        .filter(|e| e.path().extension().is_some_and(|x| x == ext))
        .count())
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, HarnessError> {
    require(path)?;
    let text = fs::read_to_string(path)?;
    let values: Vec<f64> = data_lines(&text)
        .map(|(n, l)| parse_reals(path, n, l))
        .collect::<Result<Vec<_>, _>>()?
        .concat();
    let bad = |message: String| HarnessError::Parse { path: path.to_path_buf(), line: 1, message };
    match values.as_slice() {
        [fx, fy, cx, cy] => Intrinsics::new(*fx, *fy, *cx, *cy).map_err(|e| bad(e.to_string())),
        [fx, fy, cx, cy, skew] => Intrinsics::with_skew(*fx, *fy, *skew, *cx, *cy).map_err(|e| bad(e.to_string())),
        other => Err(bad(format!("expected 5 values, found {}", other.len()))),
    }
}

pub fn read_poses(path: &Path) -> Result<Vec<PoseSE3>, HarnessError> {
    require(path)?;
    let text = fs::read_to_string(path)?;
    data_lines(&text)
        .map(|(n, l)| {
            let v = parse_reals(path, n, l)?;
            let arr: [f64; 12] = v.as_slice().try_into().map_err(|_| HarnessError::MalformedPose {
                line: n,
                reason: format!("expected 12 values, found {}", v.len()),
            })?;
            PoseSE3::from_row_major(&arr, POSE_TOLERANCE)
                .map_err(|e| HarnessError::MalformedPose { line: n, reason: e.to_string() })
        })
        .collect()
}

fn read_positions(path: &Path) -> Result<Vec<Vector2<f64>>, HarnessError> {
    let text = fs::read_to_string(path)?;
    data_lines(&text)
        .map(|(n, l)| match parse_reals(path, n, l)?.as_slice() {
            [x, y] => Ok(Vector2::new(*x, *y)),
            other => Err(HarnessError::Parse {
                path: path.to_path_buf(),
                line: n,
                message: format!("expected 2 values, found {}", other.len()),
            }),
        })
        .collect()
}

/// Validates the layout under `root` and reads intrinsics and poses.
pub fn load_dataset(root: &Path) -> Result<DatasetIndex, HarnessError> {
    let intrinsics = read_intrinsics(&root.join("intrinsics.txt"))?;
    let poses = read_poses(&root.join("poses.txt"))?;
    let images = root.join("images");
    let clouds = root.join("clouds");
    require(&images)?;
    require(&clouds)?;
    for (what, dir, ext) in [("images", &images, "png"), ("clouds", &clouds, "bin")] {
        let got = count_files(dir, ext)?;
        if got != poses.len() {
            return Err(HarnessError::CountMismatch { what, expected: poses.len(), got });
        }
    }
    let positions_path = root.join("positions.txt");
    let positions = if positions_path.exists() {
        let p = read_positions(&positions_path)?;
        if p.len() != poses.len() {
            return Err(HarnessError::CountMismatch { what: "positions", expected: poses.len(), got: p.len() });
        }
        Some(p)
    } else {
        None
    };
    let mut frames = Vec::with_capacity(poses.len());
    for (id, pose) in poses.into_iter().enumerate() {
        let image_path = images.join(frame_name(id, "png"));
        let cloud_path = clouds.join(frame_name(id, "bin"));
        require(&image_path)?;
        require(&cloud_path)?;
        frames.push(FrameEntry {
            id,
            image_path,
            cloud_path,
            camera_to_world: pose,
            position: positions.as_ref().map(|p| p[id]),
        });
    }
    let sequence = root
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_default();
    Ok(DatasetIndex { root: root.to_path_buf(), sequence, intrinsics, frames })
}

pub fn read_image(path: &Path) -> Result<GrayImage, HarnessError> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(GrayImage::from_u8(w as usize, h as usize, img.as_raw())?)
}

pub fn write_image(path: &Path, img: &GrayImage) -> Result<(), HarnessError> {
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.to_u8())
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<PointCloud, HarnessError> {
    let bytes = fs::read(path)?;
    if bytes.len() % 12 != 0 {
        return Err(HarnessError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{} bytes is not a whole number of xyz triples", bytes.len()),
        });
    }
    let f = |c: &[u8]| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64;
    let points = bytes.chunks_exact(12).map(|c| Vector3::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12]))).collect();
    Ok(PointCloud { points })
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in &cloud.points {
        for v in p.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn fmt_reals(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
}

impl DatasetIndex {
    /// Reads every image and cloud.
    pub fn load(&self) -> Result<Dataset, HarnessError> {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                Ok(ReferenceTuple {
                    id: f.id,
                    image: read_image(&f.image_path)?,
                    cloud: read_cloud(&f.cloud_path)?,
                    pose: f.camera_to_world.inverse(),
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let positions = self.frames.iter().map(|f| f.position).collect::<Option<Vec<_>>>();
        Ok(Dataset { intrinsics: self.intrinsics, frames, positions })
    }
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self, HarnessError> {
        load_dataset(root)?.load()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Ground position used for radius queries: the stored tag when present,
    /// otherwise the camera center's first two coordinates.
    pub fn position(&self, frame: usize) -> Vector2<f64> {
        match &self.positions {
            Some(p) => p[frame],
            None => self.frames[frame].pose.camera_center().xy(),
        }
    }

    /// Writes the dataset in the on-disk layout, creating `root` if needed.
    pub fn write(&self, root: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(root.join("images"))?;
        fs::create_dir_all(root.join("clouds"))?;
        let k = &self.intrinsics;
        fs::write(root.join("intrinsics.txt"), format!("{}\n", fmt_reals(&[k.fx, k.fy, k.cx, k.cy, k.skew])))?;
        let mut poses = String::new();
        for f in &self.frames {
            poses.push_str(&fmt_reals(&f.pose.inverse().to_row_major()));
            poses.push('\n');
        }
        fs::write(root.join("poses.txt"), poses)?;
        if let Some(positions) = &self.positions {
            let text: String = positions.iter().map(|p| format!("{}\n", fmt_reals(&[p.x, p.y]))).collect();
            fs::write(root.join("positions.txt"), text)?;
        }
        for (i, f) in self.frames.iter().enumerate() {
            write_image(&root.join("images").join(frame_name(i, "png")), &f.image)?;
            write_cloud(&root.join("clouds").join(frame_name(i, "bin")), &f.cloud)?;
        }
        Ok(())
    }
}
