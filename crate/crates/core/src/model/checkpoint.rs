//! Checkpoint files.
//!
//! A textual header of `key value` lines terminated by `end_header\n`,
//! followed by the parameters as little-endian float32 in layout order:
//!
//! ```text
//! collision-sentinel checkpoint
//! format_version 1
//! arch catplan
//! d 64
//! n_heads 4
//! n_layers 1
//! mlp_hidden 128
//! n_modes 6
//! seed 17
//! param_count 41281
//! end_header
//! ```
//!
//! CATPlan order: `proj.w [d, N_m*d]`, `proj.b [d]`, then per decoder layer
//! `ln1.g, ln1.b, w_q, w_k, w_v, w_o, ln2.g, ln2.b, ff.w1 [h, d], ff.b1,
//! ff.w2 [d, h], ff.b2`, then `head.w1 [h, d], head.b1, head.w2 [h],
//! head.b2`. MLP order: `w1 [h, d], b1, w2 [h], b2`. Matrices are
//! row-major `[out, in]`.

use std::fs;
use std::path::Path;

use super::{Arch, Model, ModelHyper};
use crate::error::{Error, Result};

const MAGIC: &str = "collision-sentinel checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Arch,
    pub hyper: ModelHyper,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(self.arch, self.hyper)?;
        if model.n_params() != self.params.len() {
            return Err(Error::Shape {
                what: "checkpoint parameters",
                expected: model.n_params().to_string(),
                got: self.params.len().to_string(),
            });
        }
        Ok(model)
    }
}

/// Rounds every parameter to the nearest float32, the precision stored on
/// disk.
pub fn round_to_f32(params: &mut [f64]) {
    for p in params {
        *p = *p as f32 as f64;
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let h = &ckpt.hyper;
    let mut bytes = format!(
        "{MAGIC}\nformat_version {CHECKPOINT_VERSION}\narch {}\nd {}\nn_heads {}\nn_layers {}\nmlp_hidden {}\nn_modes {}\nseed {}\nparam_count {}\nend_header\n",
        ckpt.arch.name(),
        h.d,
        h.n_heads,
        h.n_layers,
        h.mlp_hidden,
        h.n_modes,
        ckpt.seed,
        ckpt.params.len()
    )
    .into_bytes();
    bytes.reserve(4 * ckpt.params.len());
    for &p in &ckpt.params {
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("checkpoint {}", path.display())));
        }
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| corrupt("missing end_header".into()))?;
    let header =
        std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(corrupt("not a checkpoint file".into()));
    }
    let mut fields = std::collections::BTreeMap::new();
    for line in lines {
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| corrupt(format!("bad header line `{line}`")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| -> Result<&str> {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| corrupt(format!("missing header field `{k}`")))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse::<u64>()
            .map_err(|_| corrupt(format!("header field `{k}` is not an integer")))
    };
    let version = num("format_version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let arch_name = get("arch")?;
    let arch =
        Arch::parse(arch_name).ok_or_else(|| corrupt(format!("unknown arch `{arch_name}`")))?;
    let hyper = ModelHyper {
        d: num("d")? as usize,
        n_heads: num("n_heads")? as usize,
        n_layers: num("n_layers")? as usize,
        mlp_hidden: num("mlp_hidden")? as usize,
        n_modes: num("n_modes")? as usize,
    };
    let count = num("param_count")? as usize;
    let blob = &bytes[end + marker.len()..];
    if blob.len() != 4 * count {
        return Err(corrupt(format!(
            "expected {} parameter bytes, found {}",
            4 * count,
            blob.len()
        )));
    }
    let params: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("checkpoint {}", path.display())));
    }
    let ckpt = Checkpoint {
        arch,
        hyper,
        seed: num("seed")?,
        params,
    };
    ckpt.model()?;
    Ok(ckpt)
}
