//! Named parameter storage grouped by network branch, plus the weight file format.
//!
//! A weight file is a directory holding `manifest.json` (format version,
//! parameter names, groups, shapes, trainable flags, blob offsets and an
//! opaque model description) and `params.bin` (magic `BFWT`, little-endian
//! `u32` version, then every tensor as little-endian `f32`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

pub const WEIGHTS_VERSION: u32 = 1;
const WEIGHTS_MAGIC: &[u8; 4] = b"BFWT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    CameraFpn,
    LidarFpn,
    RadarFpn,
    AlignC,
    AlignL,
    AlignR,
    Head,
    CameraHead,
    LidarHead,
    RadarHead,
}

impl Group {
    pub const ALL: [Group; 10] = [
        Group::CameraFpn,
        Group::LidarFpn,
        Group::RadarFpn,
        Group::AlignC,
        Group::AlignL,
        Group::AlignR,
        Group::Head,
        Group::CameraHead,
        Group::LidarHead,
        Group::RadarHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::CameraFpn => "camera_fpn",
            Group::LidarFpn => "lidar_fpn",
            Group::RadarFpn => "radar_fpn",
            Group::AlignC => "align_c",
            Group::AlignL => "align_l",
            Group::AlignR => "align_r",
            Group::Head => "head",
            Group::CameraHead => "camera_head",
            Group::LidarHead => "lidar_head",
            Group::RadarHead => "radar_head",
        }
    }
}

pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor<f32>,
}

/// All learnable tensors of a model. Parameters are addressed by [`ParamId`]
/// (insertion index); names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    frozen: Vec<Group>,
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    pub tensors: Vec<Tensor<f32>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            tensors: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<f32>) {
        self.tensors[id]
            .add_assign(g)
            .expect("gradient shape matches parameter");
    }

    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(0.0);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.params[id].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, group, value });
        self.params.len() - 1
    }

    /// Conv kernel `(k, k, cin, cout)` with He-uniform init and a zero bias.
    pub fn add_conv(
        &mut self,
        prefix: &str,
        group: Group,
        k: usize,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> (ParamId, ParamId) {
        let bound = (6.0 / (k * k * cin) as f64).sqrt() as f32;
        let n = k * k * cin * cout;
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        let w = self.add(
            format!("{prefix}.w"),
            group,
            Tensor::from_vec([k, k, cin, cout], data).expect("kernel size"),
        );
        let b = self.add(format!("{prefix}.b"), group, Tensor::zeros([1, 1, 1, cout]));
        (w, b)
    }

    pub fn set_trainable(&mut self, group: Group, trainable: bool) {
        self.frozen.retain(|&g| g != group);
        if !trainable {
            self.frozen.push(group);
        }
    }

    pub fn is_trainable(&self, group: Group) -> bool {
        !self.frozen.contains(&group)
    }

    pub fn groups(&self) -> Vec<Group> {
        let mut gs: Vec<Group> = self.params.iter().map(|p| p.group).collect();
        gs.sort();
        gs.dedup();
        gs
    }

    /// Copies every parameter whose name (after renaming its prefix with
    /// `rename`) exists in `self` with the same shape. Returns how many were copied.
    pub fn copy_from(&mut self, other: &ParamStore, rename: impl Fn(&str) -> Option<String>) -> Result<usize> {
        let mut copied = 0;
        for p in &other.params {
            let Some(target) = rename(&p.name) else { continue };
            if let Some(id) = self.find(&target) {
                if self.params[id].value.shape() != p.value.shape() {
                    return Err(Error::WeightsMismatch(format!(
                        "{target}: {:?} vs {:?}",
                        self.params[id].value.shape(),
                        p.value.shape()
                    )));
                }
                self.params[id].value = p.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Writes the weight directory. `model` is stored verbatim in the manifest.
    pub fn save(&self, dir: &Path, model: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        blob.extend_from_slice(WEIGHTS_MAGIC);
        blob.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        let mut entries = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let offset = blob.len() as u64;
            for v in p.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ManifestEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape(),
                trainable: self.is_trainable(p.group),
                offset,
                len: p.value.len() as u64,
            });
        }
        let manifest = WeightsManifest {
            format: "bevfuse-weights".into(),
            version: WEIGHTS_VERSION,
            model,
            params: entries,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join("params.bin");
        fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    /// Reads the manifest only (to rebuild the model before loading values).
    pub fn read_manifest(dir: &Path) -> Result<WeightsManifest> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: WeightsManifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
        if manifest.version != WEIGHTS_VERSION || manifest.format != "bevfuse-weights" {
            return Err(Error::VersionMismatch {
                path: mpath,
                expected: format!("bevfuse-weights v{WEIGHTS_VERSION}"),
                found: format!("{} v{}", manifest.format, manifest.version),
            });
        }
        Ok(manifest)
    }

    /// Loads values into an already-built store; names, groups and shapes
    /// must match exactly. Trainable flags are restored from the file.
    pub fn load_into(&mut self, dir: &Path) -> Result<WeightsManifest> {
        let manifest = Self::read_manifest(dir)?;
        let bpath = dir.join("params.bin");
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if blob.len() < 8 {
            return Err(Error::Truncated {
                path: bpath,
                msg: "missing header".into(),
            });
        }
        let version = u32::from_le_bytes(blob[4..8].try_into().expect("4 bytes"));
        if &blob[0..4] != WEIGHTS_MAGIC || version != WEIGHTS_VERSION {
            return Err(Error::VersionMismatch {
                path: bpath,
                expected: format!("BFWT v{WEIGHTS_VERSION}"),
                found: format!("{:?} v{version}", String::from_utf8_lossy(&blob[0..4])),
            });
        }
        let by_name: BTreeMap<&str, &ManifestEntry> =
            manifest.params.iter().map(|e| (e.name.as_str(), e)).collect();
        if by_name.len() != self.params.len() {
            return Err(Error::WeightsMismatch(format!(
                "file has {} tensors, model has {}",
                by_name.len(),
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let e = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::WeightsMismatch(format!("missing tensor {}", p.name)))?;
            if e.shape != p.value.shape() || e.group != p.group {
                return Err(Error::WeightsMismatch(format!(
                    "{}: file {:?}/{:?}, model {:?}/{:?}",
                    p.name,
                    e.shape,
                    e.group,
                    p.value.shape(),
                    p.group
                )));
            }
            let start = e.offset as usize;
            let end = start + 4 * e.len as usize;
            if end > blob.len() {
                return Err(Error::Truncated {
                    path: bpath.clone(),
                    msg: format!("tensor {} extends past end of file", p.name),
                });
            }
            for (v, chunk) in p.value.data_mut().iter_mut().zip(blob[start..end].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        self.frozen.clear();
        for e in &manifest.params {
            if !e.trainable && !self.frozen.contains(&e.group) {
                self.frozen.push(e.group);
            }
        }
        Ok(manifest)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: Group,
    pub shape: [usize; 4],
    pub trainable: bool,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub format: String,
    pub version: u32,
    pub model: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.add_conv("lidar_fpn.c1", Group::LidarFpn, 3, 2, 4, &mut rng);
        s.add_conv("head.out", Group::Head, 1, 4, 8, &mut rng);
        s
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store();
        s.set_trainable(Group::LidarFpn, false);
        s.save(dir.path(), serde_json::json!({"kind": "test"})).unwrap();
        let mut fresh = store();
        for id in 0..fresh.len() {
            fresh.value_mut(id).fill(0.0);
        }
        let m = fresh.load_into(dir.path()).unwrap();
        assert_eq!(m.model["kind"], "test");
        assert_eq!(fresh, s);
        assert!(!fresh.is_trainable(Group::LidarFpn));
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        store().save(dir.path(), serde_json::Value::Null).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut other = ParamStore::new();
        other.add_conv("lidar_fpn.c1", Group::LidarFpn, 3, 2, 5, &mut rng);
        other.add_conv("head.out", Group::Head, 1, 5, 8, &mut rng);
        assert!(matches!(other.load_into(dir.path()), Err(Error::WeightsMismatch(_))));
    }

    #[test]
    fn load_rejects_corrupt_header_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        store().save(dir.path(), serde_json::Value::Null).unwrap();
        let bpath = dir.path().join("params.bin");
        let mut blob = fs::read(&bpath).unwrap();
        blob.truncate(blob.len() - 4);
        fs::write(&bpath, &blob).unwrap();
        assert!(matches!(store().load_into(dir.path()), Err(Error::Truncated { .. })));
        blob[0] = b'X';
        fs::write(&bpath, &blob).unwrap();
        assert!(matches!(store().load_into(dir.path()), Err(Error::VersionMismatch { .. })));
    }
}
