//! Raw little-endian float32 payloads with a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Volume, VolumeError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub dims: [usize; 3],
    pub dtype: String,
    #[serde(default = "unit_spacing")]
    pub spacing: [f32; 3],
}

fn unit_spacing() -> [f32; 3] {
    [1.0; 3]
}

/// `scan.raw` → `scan.json`.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    payload.with_extension("json")
}

pub fn read_raw(path: &Path) -> Result<Volume, VolumeError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| VolumeError::io(&side, e))?;
    let meta: RawSidecar =
        serde_json::from_str(&text).map_err(|e| VolumeError::SidecarParse(e.to_string()))?;
    if meta.dtype != "f32" {
        return Err(VolumeError::SidecarParse(format!(
            "unsupported dtype {:?}",
            meta.dtype
        )));
    }
    let bytes = fs::read(path).map_err(|e| VolumeError::io(path, e))?;
    let n: usize = meta.dims.iter().product();
    if bytes.len() != n * 4 {
        return Err(VolumeError::LengthMismatch {
            expected: n * 4,
            actual: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Volume::new(meta.dims, meta.spacing, data)?.with_name(path.display().to_string()))
}

pub fn write_raw(path: &Path, volume: &Volume) -> Result<(), VolumeError> {
    let meta = RawSidecar {
        dims: volume.dims(),
        dtype: "f32".into(),
        spacing: volume.spacing(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| VolumeError::SidecarParse(e.to_string()))?;
    fs::write(&side, json).map_err(|e| VolumeError::io(&side, e))?;
    let mut bytes = Vec::with_capacity(volume.len() * 4);
    for v in volume.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| VolumeError::io(path, e))
}
