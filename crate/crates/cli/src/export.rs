//! Pruned single-file exports.
//!
//! One file carries everything a standalone consumer needs to run one
//! task's winner subnetwork: an 8-byte magic, a little-endian u32 manifest
//! length, a TOML manifest (format version, task id, model spec, winner
//! indices per TWTA layer, tensor index), and a little-endian f32 blob
//! holding the packed winner weights plus the full head, concatenated in
//! manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use twta_core::evaluation::PrunedModel;
use twta_core::network::{LayerSpec, ModelSpec};
use twta_core::numerics::Tensor;

use crate::error::{read_file, write_file, CliError, Result};

pub const EXPORT_MAGIC: &[u8; 8] = b"TWTAPRUN";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportManifest {
    format_version: u32,
    task: usize,
    input: Vec<usize>,
    classes: usize,
    layers: Vec<LayerRow>,
    /// Winner unit index per block, one row per TWTA layer in model order.
    winners: Vec<Vec<usize>>,
    tensors: Vec<TensorRow>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRow {
    #[serde(rename = "type")]
    kind: String,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRow {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob that follows the manifest.
    offset: usize,
}

fn layer_row(layer: &LayerSpec) -> LayerRow {
    let dims = match *layer {
        LayerSpec::TwtaDense {
            in_dim,
            blocks,
            units,
        } => vec![in_dim, blocks, units],
        LayerSpec::TwtaConv {
            kernel_h,
            kernel_l,
            in_channels,
            kernels,
            maps,
        } => vec![kernel_h, kernel_l, in_channels, kernels, maps],
        LayerSpec::MaxPool2 | LayerSpec::Flatten | LayerSpec::Head { .. } => vec![],
    };
    LayerRow {
        kind: layer.name().to_string(),
        dims,
    }
}

fn row_layer(row: &LayerRow, classes: usize, idx: usize) -> Result<LayerSpec> {
    let want = |n: usize| -> Result<()> {
        if row.dims.len() != n {
            return Err(CliError::Env(format!(
                "pruned export: layer {idx} ({}) carries {} dims, expected {n}",
                row.kind,
                row.dims.len()
            )));
        }
        Ok(())
    };
    match row.kind.as_str() {
        "twta_dense" => {
            want(3)?;
            Ok(LayerSpec::TwtaDense {
                in_dim: row.dims[0],
                blocks: row.dims[1],
                units: row.dims[2],
            })
        }
        "twta_conv" => {
            want(5)?;
            Ok(LayerSpec::TwtaConv {
                kernel_h: row.dims[0],
                kernel_l: row.dims[1],
                in_channels: row.dims[2],
                kernels: row.dims[3],
                maps: row.dims[4],
            })
        }
        "maxpool2" => {
            want(0)?;
            Ok(LayerSpec::MaxPool2)
        }
        "flatten" => {
            want(0)?;
            Ok(LayerSpec::Flatten)
        }
        "head" => {
            want(0)?;
            Ok(LayerSpec::Head { classes })
        }
        other => Err(CliError::Env(format!(
            "pruned export: layer {idx} has unknown type \"{other}\""
        ))),
    }
}

pub fn save_export(path: &Path, pruned: &PrunedModel) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let push = |name: String, t: &Tensor, blob: &mut Vec<u8>, rows: &mut Vec<TensorRow>| {
        rows.push(TensorRow {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (i, t) in pruned.packed().iter().enumerate() {
        push(format!("packed{i}"), t, &mut blob, &mut tensors);
    }
    let (hw, hb) = pruned.head();
    push("head.weight".into(), hw, &mut blob, &mut tensors);
    push("head.bias".into(), hb, &mut blob, &mut tensors);

    let manifest = ExportManifest {
        format_version: FORMAT_VERSION,
        task: pruned.task(),
        input: pruned.spec().input_shape.clone(),
        classes: pruned.spec().total_classes,
        layers: pruned.spec().layers.iter().map(layer_row).collect(),
        winners: pruned.winners().to_vec(),
        tensors,
    };
    let manifest_text = toml::to_string_pretty(&manifest)
        .map_err(|e| CliError::Env(format!("encoding pruned-export manifest: {e}")))?;
    let manifest_bytes = manifest_text.as_bytes();

    let mut out = Vec::with_capacity(12 + manifest_bytes.len() + blob.len());
    out.extend_from_slice(EXPORT_MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest_bytes);
    out.extend_from_slice(&blob);
    write_file(path, &out)
}

pub fn load_export(path: &Path) -> Result<PrunedModel> {
    let bytes = read_file(path)?;
    if bytes.len() < 12 || &bytes[..8] != EXPORT_MAGIC {
        return Err(CliError::User(format!(
            "{} is not a pruned export (expected magic {:?} at byte 0)",
            path.display(),
            std::str::from_utf8(EXPORT_MAGIC).unwrap()
        )));
    }
    let mlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if 12 + mlen > bytes.len() {
        return Err(CliError::Env(format!(
            "{}: manifest claims {mlen} bytes, file only has {} after the header",
            path.display(),
            bytes.len() - 12
        )));
    }
    let manifest_text = std::str::from_utf8(&bytes[12..12 + mlen])
        .map_err(|e| CliError::Env(format!("{}: manifest is not UTF-8: {e}", path.display())))?;
    let manifest: ExportManifest = toml::from_str(manifest_text)
        .map_err(|e| CliError::Env(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CliError::Env(format!(
            "pruned-export format version {} is not supported (this build reads {})",
            manifest.format_version, FORMAT_VERSION
        )));
    }
    let blob = &bytes[12 + mlen..];

    let read_tensor = |row: &TensorRow| -> Result<Tensor> {
        let len: usize = row.shape.iter().product::<usize>() * 4;
        if row.offset + len > blob.len() {
            return Err(CliError::Env(format!(
                "{}: tensor {} spans blob bytes {}..{}, blob has {}",
                path.display(),
                row.name,
                row.offset,
                row.offset + len,
                blob.len()
            )));
        }
        let data: Vec<f32> = blob[row.offset..row.offset + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor::from_vec(row.shape.clone(), data)?)
    };
    let mut by_name: BTreeMap<&str, &TensorRow> = BTreeMap::new();
    for row in &manifest.tensors {
        if by_name.insert(row.name.as_str(), row).is_some() {
            return Err(CliError::Env(format!(
                "{}: tensor {} indexed twice",
                path.display(),
                row.name
            )));
        }
    }
    let grab = |name: &str| -> Result<Tensor> {
        let row = by_name.get(name).ok_or_else(|| {
            CliError::Env(format!("{}: manifest lacks tensor {name}", path.display()))
        })?;
        read_tensor(row)
    };
    let layers = manifest
        .layers
        .iter()
        .enumerate()
        .map(|(i, r)| row_layer(r, manifest.classes, i))
        .collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec {
        input_shape: manifest.input.clone(),
        layers,
        total_classes: manifest.classes,
    };
    let packed = (0..manifest.winners.len())
        .map(|i| grab(&format!("packed{i}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(PrunedModel::from_parts(
        spec,
        manifest.task,
        manifest.winners.clone(),
        packed,
        grab("head.weight")?,
        grab("head.bias")?,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use twta_core::network::build_model;
    use twta_core::numerics::{RngStream, StreamLabel};

    fn pruned_fixture() -> (PrunedModel, Tensor) {
        let spec = ModelSpec {
            input_shape: vec![6],
            layers: vec![
                LayerSpec::TwtaDense {
                    in_dim: 6,
                    blocks: 4,
                    units: 2,
                },
                LayerSpec::TwtaDense {
                    in_dim: 8,
                    blocks: 2,
                    units: 4,
                },
                LayerSpec::Head { classes: 3 },
            ],
            total_classes: 3,
        };
        let mut rng = RngStream::with_salt(31, StreamLabel::Init, 0);
        let mut model = build_model(&spec, &mut rng).unwrap();
        model.register_task(0, &mut rng).unwrap();
        let pruned = PrunedModel::from_model(&model, 0).unwrap();
        let mut data = Vec::new();
        for _ in 0..5 * 6 {
            data.push(rng.normal() as f32);
        }
        (pruned, Tensor::from_vec(vec![5, 6], data).unwrap())
    }

    #[test]
    fn export_round_trip_is_bitwise() {
        let (pruned, probe) = pruned_fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task0.twta");
        save_export(&path, &pruned).unwrap();
        let loaded = load_export(&path).unwrap();
        assert_eq!(loaded.task(), 0);
        assert_eq!(loaded.spec(), pruned.spec());
        assert_eq!(loaded.winners(), pruned.winners());
        let a = pruned.forward_batch(&probe).unwrap();
        let b = loaded.forward_batch(&probe).unwrap();
        let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn export_stores_the_pruned_fraction_only() {
        let (pruned, _) = pruned_fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task0.twta");
        save_export(&path, &pruned).unwrap();
        // 6*4 + 8*2 = 40 retained of (48 + 64) = 112 total at J=2 and J=4.
        assert_eq!(pruned.retained_weights(), 40);
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        let blob_bytes = 40 * 4 + (8 * 4 * 2 + 3 * 4) * 4; // packed + head
        assert!(size >= blob_bytes);
        // Manifest stays small relative to a full dump of 112 weights + head.
        assert!(size < 4096, "export unexpectedly large: {size} bytes");
    }

    #[test]
    fn wrong_magic_and_truncation_are_reported() {
        let (pruned, _) = pruned_fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task0.twta");
        save_export(&path, &pruned).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad = dir.path().join("bad.twta");
        std::fs::write(&bad, b"NOTMAGIC").unwrap();
        let err = load_export(&bad).unwrap_err();
        assert!(err.to_string().contains("TWTAPRUN"), "{err}");
        assert_eq!(err.exit_code(), 2);

        let cut = dir.path().join("cut.twta");
        std::fs::write(&cut, &good[..good.len() - 5]).unwrap();
        let err = load_export(&cut).unwrap_err();
        assert!(err.to_string().contains("spans blob bytes"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn loaded_exports_reject_inconsistent_parts() {
        let (pruned, _) = pruned_fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task0.twta");
        save_export(&path, &pruned).unwrap();
        // Flip a winner index out of range inside the manifest.
        let bytes = std::fs::read(&path).unwrap();
        let mlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let text = std::str::from_utf8(&bytes[12..12 + mlen]).unwrap();
        let mut val: toml::Value = toml::from_str(text).unwrap();
        val["winners"][0][0] = toml::Value::Integer(9);
        let hacked = toml::to_string(&val).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(hacked.len() as u32).to_le_bytes());
        out.extend_from_slice(hacked.as_bytes());
        out.extend_from_slice(&bytes[12 + mlen..]);
        let tampered = dir.path().join("tampered.twta");
        std::fs::write(&tampered, &out).unwrap();
        let err = load_export(&tampered).unwrap_err();
        assert!(err.to_string().contains('9'), "{err}");
    }
}
