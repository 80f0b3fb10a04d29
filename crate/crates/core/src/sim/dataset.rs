//! On-disk dataset: `manifest.json`, then per frame a JSON record plus a
//! little-endian f32 blob holding the point arrays and the image.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::camera::CameraImage;
use super::lidar::{LidarPoint, LidarScan};
use super::radar::{RadarPoint, RadarScan};
use super::scene::Scene;
use super::{SensorFrame, SimConfig};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};

pub const DATASET_VERSION: u32 = 1;
const DATASET_FORMAT: &str = "bevfuse-dataset";
const BLOB_MAGIC: &[u8; 4] = b"BFDS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub frame_count: usize,
    pub frames: Vec<String>,
    /// Generator settings, when known.
    pub config: Option<SimConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorRef {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
}

impl TensorRef {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Calibration {
    intrinsics: CameraIntrinsics,
    cam_from_ego: Pose,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FrameRecord {
    version: u32,
    frame_id: u64,
    scene: Scene,
    calibration: Calibration,
    lidar_box_ids: Vec<i32>,
    radar_box_ids: Vec<i32>,
    blob: String,
    tensors: Vec<TensorRef>,
}

fn frame_stem(frame_id: u64) -> String {
    format!("frame_{frame_id:06}")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| {
        if e.classify() == serde_json::error::Category::Eof {
            Error::Truncated {
                path: path.to_path_buf(),
                msg: e.to_string(),
            }
        } else {
            Error::Malformed {
                path: path.to_path_buf(),
                msg: e.to_string(),
            }
        }
    })
}

/// Writes `frames` into directory `dir` (created if absent).
pub fn write_dataset(frames: &[SensorFrame], dir: &Path, config: Option<&SimConfig>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(frames.len());
    for f in frames {
        let stem = frame_stem(f.frame_id);
        let mut blob: Vec<u8> = Vec::new();
        blob.extend_from_slice(BLOB_MAGIC);
        blob.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        let mut tensors = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, values: &mut dyn Iterator<Item = f32>| {
            tensors.push(TensorRef {
                name: name.into(),
                shape,
                offset: blob.len() as u64,
            });
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(
            "lidar_points",
            vec![f.lidar.points.len(), 4],
            &mut f.lidar.points.iter().flat_map(|p| [p.x, p.y, p.z, p.intensity]),
        );
        push(
            "radar_points",
            vec![f.radar.points.len(), 5],
            &mut f.radar.points.iter().flat_map(|p| [p.x, p.y, p.z, p.v, p.rcs]),
        );
        push(
            "camera",
            vec![f.camera.height(), f.camera.width(), 3],
            &mut f.camera.data.iter().copied(),
        );
        let record = FrameRecord {
            version: DATASET_VERSION,
            frame_id: f.frame_id,
            scene: f.scene.clone(),
            calibration: Calibration {
                intrinsics: f.camera.intrinsics,
                cam_from_ego: f.camera.cam_from_ego,
            },
            lidar_box_ids: f.lidar.box_ids.clone(),
            radar_box_ids: f.radar.box_ids.clone(),
            blob: format!("{stem}.bin"),
            tensors,
        };
        let json = serde_json::to_vec(&record).expect("record serializes");
        write_file(&dir.join(format!("{stem}.json")), &json)?;
        write_file(&dir.join(&record.blob), &blob)?;
        names.push(stem);
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        frame_count: frames.len(),
        frames: names,
        config: config.cloned(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), &json)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let value: serde_json::Value = parse_json(&path)?;
    // Check the version before the full schema so a newer layout reports as such.
    let version = value.get("version").and_then(|v| v.as_u64());
    let format = value.get("format").and_then(|v| v.as_str());
    if version != Some(DATASET_VERSION as u64) || format != Some(DATASET_FORMAT) {
        return Err(Error::VersionMismatch {
            path,
            expected: format!("{DATASET_FORMAT} v{DATASET_VERSION}"),
            found: format!("{format:?} v{version:?}"),
        });
    }
    let manifest: DatasetManifest = serde_json::from_value(value).map_err(|e| Error::Malformed {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if manifest.frame_count != manifest.frames.len() {
        return Err(Error::Malformed {
            path,
            msg: format!("frame_count {} but {} frames listed", manifest.frame_count, manifest.frames.len()),
        });
    }
    Ok(manifest)
}

fn malformed(path: &Path, msg: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read_blob(path: &Path) -> Result<Vec<u8>> {
    let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
    if blob.len() < 8 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            msg: "missing header".into(),
        });
    }
    let version = u32::from_le_bytes(blob[4..8].try_into().expect("4 bytes"));
    if &blob[0..4] != BLOB_MAGIC || version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: format!("BFDS v{DATASET_VERSION}"),
            found: format!("{:?} v{version}", String::from_utf8_lossy(&blob[0..4])),
        });
    }
    Ok(blob)
}

fn tensor<'a>(record: &'a FrameRecord, name: &str, inner: &[usize], path: &Path) -> Result<&'a TensorRef> {
    let t = record
        .tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| malformed(path, format!("missing tensor {name}")))?;
    if t.shape.len() != inner.len() + 1 || t.shape[1..] != *inner {
        return Err(malformed(path, format!("tensor {name} has shape {:?}", t.shape)));
    }
    Ok(t)
}

fn floats(blob: &[u8], t: &TensorRef, path: &Path) -> Result<Vec<f32>> {
    let start = t.offset as usize;
    let end = start
        .checked_add(4 * t.len())
        .ok_or_else(|| malformed(path, "tensor size overflows"))?;
    if start < 8 {
        return Err(malformed(path, format!("tensor {} overlaps the header", t.name)));
    }
    if end > blob.len() {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            msg: format!("tensor {} extends past end of file", t.name),
        });
    }
    Ok(blob[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// Reads one frame record by stem (e.g. `frame_000003`).
pub fn read_frame(dir: &Path, stem: &str) -> Result<SensorFrame> {
    let rpath: PathBuf = dir.join(format!("{stem}.json"));
    let record: FrameRecord = parse_json(&rpath)?;
    if record.version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            path: rpath,
            expected: DATASET_VERSION.to_string(),
            found: record.version.to_string(),
        });
    }
    let bpath = dir.join(&record.blob);
    let blob = read_blob(&bpath)?;

    let lt = tensor(&record, "lidar_points", &[4], &rpath)?;
    let rt = tensor(&record, "radar_points", &[5], &rpath)?;
    let intr = record.calibration.intrinsics;
    let ct = tensor(&record, "camera", &[intr.width, 3], &rpath)?;
    if ct.shape[0] != intr.height {
        return Err(malformed(&rpath, "camera tensor does not match intrinsics"));
    }
    if lt.shape[0] != record.lidar_box_ids.len() || rt.shape[0] != record.radar_box_ids.len() {
        return Err(malformed(&rpath, "association count differs from point count"));
    }
    let n_boxes = record.scene.boxes.len() as i32;
    if record
        .lidar_box_ids
        .iter()
        .chain(&record.radar_box_ids)
        .any(|&i| i < -1 || i >= n_boxes)
    {
        return Err(malformed(&rpath, "association refers to a missing box"));
    }

    let (lf, rf, cf) = (floats(&blob, lt, &bpath)?, floats(&blob, rt, &bpath)?, floats(&blob, ct, &bpath)?);
    let lidar = LidarScan {
        points: lf
            .chunks_exact(4)
            .map(|c| LidarPoint {
                x: c[0],
                y: c[1],
                z: c[2],
                intensity: c[3],
            })
            .collect(),
        box_ids: record.lidar_box_ids,
    };
    let radar = RadarScan {
        points: rf
            .chunks_exact(5)
            .map(|c| RadarPoint {
                x: c[0],
                y: c[1],
                z: c[2],
                v: c[3],
                rcs: c[4],
            })
            .collect(),
        box_ids: record.radar_box_ids,
    };
    let camera = CameraImage {
        data: cf,
        intrinsics: intr,
        cam_from_ego: record.calibration.cam_from_ego,
    };
    Ok(SensorFrame {
        frame_id: record.frame_id,
        scene: record.scene,
        lidar,
        radar,
        camera,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SensorFrame>> {
    use rayon::prelude::*;
    let manifest = read_manifest(dir)?;
    manifest.frames.par_iter().map(|stem| read_frame(dir, stem)).collect()
}
