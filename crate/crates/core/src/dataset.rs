//! On-disk dataset format.
//!
//! A dataset named `name` is a file pair:
//!
//! - `name.manifest.json`: format version, dimensions and one record per
//!   sample (`id`, `sequence_id`, `label`, `collision_loss`, byte `offset`
//!   and `length` into the blob).
//! - `name.blob`: little-endian IEEE-754 float32, row-major. Each sample
//!   occupies one contiguous block laid out as
//!   `h_plan [d] | h_motion [N_a, N_m, d] | plan [T, 2] |
//!   motion [N_a, N_m, T, 2] | mode_weights [N_a, N_m] | agent_mask [N_a]`.
//!
//! Any stack that can dump float32 buffers can produce this format, which
//! is how cached queries from a real planner get in.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::Scene;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "N_a")]
    pub agents: usize,
    #[serde(rename = "N_m")]
    pub modes: usize,
    pub d: usize,
}

impl Dims {
    pub fn h_plan_len(&self) -> usize {
        self.d
    }
    pub fn h_motion_len(&self) -> usize {
        self.agents * self.modes * self.d
    }
    pub fn plan_len(&self) -> usize {
        self.horizon * 2
    }
    pub fn motion_len(&self) -> usize {
        self.agents * self.modes * self.horizon * 2
    }
    pub fn weights_len(&self) -> usize {
        self.agents * self.modes
    }
    pub fn mask_len(&self) -> usize {
        self.agents
    }

    pub fn floats_per_sample(&self) -> usize {
        self.h_plan_len()
            + self.h_motion_len()
            + self.plan_len()
            + self.motion_len()
            + self.weights_len()
            + self.mask_len()
    }

    pub fn bytes_per_sample(&self) -> usize {
        4 * self.floats_per_sample()
    }

    fn is_positive(&self) -> bool {
        self.horizon > 0 && self.agents > 0 && self.modes > 0 && self.d > 0
    }
}

/// One cached example: planner queries, planner outputs and the label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub sequence_id: u64,
    pub label: u8,
    pub collision_loss: f64,
    pub h_plan: Vec<f32>,
    pub h_motion: Vec<f32>,
    pub plan: Vec<f32>,
    pub motion: Vec<f32>,
    pub mode_weights: Vec<f32>,
    pub agent_mask: Vec<f32>,
    /// The generating scene, when the sample is synthetic. Never serialized.
    pub scene: Option<Box<Scene>>,
}

impl Sample {
    pub fn zeros(dims: Dims, id: u64, sequence_id: u64) -> Self {
        Self {
            id,
            sequence_id,
            label: 0,
            collision_loss: 0.0,
            h_plan: vec![0.0; dims.h_plan_len()],
            h_motion: vec![0.0; dims.h_motion_len()],
            plan: vec![0.0; dims.plan_len()],
            motion: vec![0.0; dims.motion_len()],
            mode_weights: vec![0.0; dims.weights_len()],
            agent_mask: vec![0.0; dims.mask_len()],
            scene: None,
        }
    }

    fn tensors(&self) -> [(&'static str, &[f32]); 6] {
        [
            ("h_plan", &self.h_plan),
            ("h_motion", &self.h_motion),
            ("plan", &self.plan),
            ("motion", &self.motion),
            ("mode_weights", &self.mode_weights),
            ("agent_mask", &self.agent_mask),
        ]
    }

    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        let expected = [
            dims.h_plan_len(),
            dims.h_motion_len(),
            dims.plan_len(),
            dims.motion_len(),
            dims.weights_len(),
            dims.mask_len(),
        ];
        for ((name, data), want) in self.tensors().iter().zip(expected) {
            if data.len() != want {
                return Err(Error::Dims(format!(
                    "sample {}: {name} has {} floats, dims {dims:?} require {want}",
                    self.id,
                    data.len()
                )));
            }
        }
        Ok(())
    }

    /// Equality of metadata and of every float's bit pattern.
    pub fn bitwise_eq(&self, other: &Sample) -> bool {
        self.id == other.id
            && self.sequence_id == other.sequence_id
            && self.label == other.label
            && self.collision_loss.to_bits() == other.collision_loss.to_bits()
            && self
                .tensors()
                .iter()
                .zip(other.tensors().iter())
                .all(|((_, a), (_, b))| {
                    a.len() == b.len()
                        && a.iter()
                            .zip(b.iter())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }

    pub fn has_trajectories(&self) -> bool {
        !self.plan.is_empty() && !self.motion.is_empty() && !self.mode_weights.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: u64,
    pub sequence_id: u64,
    pub label: u8,
    pub collision_loss: f64,
    /// Byte offset of the sample block in the blob.
    pub offset: u64,
    /// Byte length of the sample block.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dims: Dims,
    pub sample_records: Vec<SampleRecord>,
}

pub fn manifest_path(base: &Path) -> PathBuf {
    with_suffix(base, ".manifest.json")
}

pub fn blob_path(base: &Path) -> PathBuf {
    with_suffix(base, ".blob")
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `base.manifest.json` and `base.blob`.
pub fn write_dataset(dims: Dims, samples: &[Sample], base: &Path) -> Result<()> {
    if !dims.is_positive() {
        return Err(Error::Dims(format!(
            "dimensions must be positive: {dims:?}"
        )));
    }
    let per_sample = dims.bytes_per_sample();
    let mut blob = Vec::with_capacity(per_sample * samples.len());
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        s.check_dims(dims)?;
        if !s.collision_loss.is_finite() || s.collision_loss < 0.0 {
            return Err(Error::NonFinite(format!(
                "collision_loss of sample {}",
                s.id
            )));
        }
        if s.label > 1 || (s.label == 1) != (s.collision_loss > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sample {} label {} disagrees with collision_loss {}",
                s.id, s.label, s.collision_loss
            )));
        }
        if let Some(v) = s.agent_mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidInput(format!(
                "sample {} has agent_mask entry {v}",
                s.id
            )));
        }
        let offset = blob.len() as u64;
        for (name, data) in s.tensors() {
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{name}[{i}] of sample {}", s.id)));
            }
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        records.push(SampleRecord {
            id: s.id,
            sequence_id: s.sequence_id,
            label: s.label,
            collision_loss: s.collision_loss,
            offset,
            length: per_sample as u64,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        dims,
        sample_records: records,
    };
    if let Some(parent) = base.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mpath = manifest_path(base);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    let bpath = blob_path(base);
    fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

/// Reads a dataset, validating every manifest and payload invariant.
pub fn read_dataset(base: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let mpath = manifest_path(base);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    // Check the version before the full schema so old files get the right error.
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                found: v as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => {
            return Err(Error::Corrupt {
                path: mpath,
                reason: "missing format_version".into(),
            })
        }
    }
    let manifest: DatasetManifest = serde_json::from_value(raw).map_err(|e| Error::Corrupt {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    let dims = manifest.dims;
    if !dims.is_positive() {
        return Err(Error::Dims(format!(
            "manifest dimensions must be positive: {dims:?}"
        )));
    }

    let bpath = blob_path(base);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let corrupt = |reason: String| Error::Corrupt {
        path: bpath.clone(),
        reason,
    };
    let per_sample = dims.bytes_per_sample() as u64;
    let implied = per_sample * manifest.sample_records.len() as u64;
    if blob.len() as u64 != implied {
        return Err(corrupt(format!(
            "blob is {} bytes, manifest implies {implied}",
            blob.len()
        )));
    }

    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(manifest.sample_records.len());
    for r in &manifest.sample_records {
        if r.length != per_sample {
            return Err(corrupt(format!(
                "sample {} has length {} bytes, dims require {per_sample}",
                r.id, r.length
            )));
        }
        let end = r
            .offset
            .checked_add(r.length)
            .filter(|&e| e <= blob.len() as u64);
        let Some(end) = end else {
            return Err(corrupt(format!(
                "sample {} offset {} is out of bounds",
                r.id, r.offset
            )));
        };
        if r.label > 1 {
            return Err(corrupt(format!("sample {} has label {}", r.id, r.label)));
        }
        if !r.collision_loss.is_finite() || r.collision_loss < 0.0 {
            return Err(Error::NonFinite(format!(
                "collision_loss of sample {}",
                r.id
            )));
        }
        if (r.label == 1) != (r.collision_loss > 0.0) {
            return Err(corrupt(format!(
                "sample {} label {} disagrees with collision_loss {}",
                r.id, r.label, r.collision_loss
            )));
        }
        spans.push((r.offset, end));
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(corrupt("sample blocks overlap".into()));
    }

    let mut samples = Vec::with_capacity(manifest.sample_records.len());
    for r in &manifest.sample_records {
        let mut s = Sample::zeros(dims, r.id, r.sequence_id);
        s.label = r.label;
        s.collision_loss = r.collision_loss;
        let mut cursor = r.offset as usize;
        for (name, dst) in [
            ("h_plan", &mut s.h_plan),
            ("h_motion", &mut s.h_motion),
            ("plan", &mut s.plan),
            ("motion", &mut s.motion),
            ("mode_weights", &mut s.mode_weights),
            ("agent_mask", &mut s.agent_mask),
        ] {
            for (i, v) in dst.iter_mut().enumerate() {
                let bytes: [u8; 4] = blob[cursor..cursor + 4].try_into().expect("4 bytes");
                *v = f32::from_le_bytes(bytes);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{name}[{i}] of sample {}", r.id)));
                }
                cursor += 4;
            }
        }
        if let Some(v) = s.agent_mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
            return Err(corrupt(format!("sample {} has agent_mask entry {v}", r.id)));
        }
        samples.push(s);
    }
    Ok((manifest, samples))
}

/// Reads a dataset and insists on the given dimensions.
pub fn read_dataset_with_dims(base: &Path, dims: Dims) -> Result<(DatasetManifest, Vec<Sample>)> {
    let (manifest, samples) = read_dataset(base)?;
    if manifest.dims != dims {
        return Err(Error::Dims(format!(
            "dataset has dims {:?}, expected {dims:?}",
            manifest.dims
        )));
    }
    Ok((manifest, samples))
}
