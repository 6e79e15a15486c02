//! Checkpoint directories: a structured-text manifest plus raw
//! little-endian binary blobs.
//!
//! `manifest.toml` carries the format version, the model spec, the
//! registered task ids, the class map, and a tensor index (name, shape,
//! owning blob, byte offset). `weights.bin` holds the persistent
//! parameters as little-endian f32 concatenated in manifest order;
//! `logits_task{t}.bin` holds each task's winner logits. Every blob is
//! guarded by a SHA-256 digest in the manifest, and loading reproduces
//! every tensor bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use twta_core::network::{build_model, LayerSpec, Model, ModelSpec};
use twta_core::numerics::{RngStream, StreamLabel, Tensor};

use crate::error::{read_file, read_text, write_file, CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const WEIGHTS_BLOB: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

pub fn logits_blob_name(task: usize) -> String {
    format!("logits_task{task}.bin")
}

/// Which global classes each task owns; persisted so evaluation can build
/// seen-class masks without the original dataset.
pub type ClassMap = BTreeMap<usize, BTreeSet<usize>>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    task_ids: Vec<usize>,
    spec: SpecManifest,
    class_map: Vec<TaskClasses>,
    /// blob file name -> lowercase hex SHA-256 of its bytes.
    blobs: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskClasses {
    task: usize,
    classes: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecManifest {
    input: Vec<usize>,
    classes: usize,
    layers: Vec<LayerManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerManifest {
    #[serde(rename = "type")]
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    blocks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    units: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel_h: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel_l: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    maps: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    blob: String,
    /// Byte offset of the first element within `blob`.
    offset: usize,
}

fn layer_to_manifest(layer: &LayerSpec) -> LayerManifest {
    let mut m = LayerManifest {
        kind: layer.name().to_string(),
        in_dim: None,
        blocks: None,
        units: None,
        kernel_h: None,
        kernel_l: None,
        in_channels: None,
        kernels: None,
        maps: None,
    };
    match *layer {
        LayerSpec::TwtaDense {
            in_dim,
            blocks,
            units,
        } => {
            m.in_dim = Some(in_dim);
            m.blocks = Some(blocks);
            m.units = Some(units);
        }
        LayerSpec::TwtaConv {
            kernel_h,
            kernel_l,
            in_channels,
            kernels,
            maps,
        } => {
            m.kernel_h = Some(kernel_h);
            m.kernel_l = Some(kernel_l);
            m.in_channels = Some(in_channels);
            m.kernels = Some(kernels);
            m.maps = Some(maps);
        }
        LayerSpec::MaxPool2 | LayerSpec::Flatten | LayerSpec::Head { .. } => {}
    }
    m
}

fn manifest_to_layer(m: &LayerManifest, classes: usize, idx: usize) -> Result<LayerSpec> {
    let need = |f: Option<usize>, name: &str| {
        f.ok_or_else(|| {
            CliError::Env(format!(
                "checkpoint manifest: spec layer {idx} ({}) lacks `{name}`",
                m.kind
            ))
        })
    };
    match m.kind.as_str() {
        "twta_dense" => Ok(LayerSpec::TwtaDense {
            in_dim: need(m.in_dim, "in_dim")?,
            blocks: need(m.blocks, "blocks")?,
            units: need(m.units, "units")?,
        }),
        "twta_conv" => Ok(LayerSpec::TwtaConv {
            kernel_h: need(m.kernel_h, "kernel_h")?,
            kernel_l: need(m.kernel_l, "kernel_l")?,
            in_channels: need(m.in_channels, "in_channels")?,
            kernels: need(m.kernels, "kernels")?,
            maps: need(m.maps, "maps")?,
        }),
        "maxpool2" => Ok(LayerSpec::MaxPool2),
        "flatten" => Ok(LayerSpec::Flatten),
        "head" => Ok(LayerSpec::Head { classes }),
        other => Err(CliError::Env(format!(
            "checkpoint manifest: spec layer {idx} has unknown type \"{other}\""
        ))),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn tensor_le_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.data().len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// The task whose logits a parameter name belongs to, if any.
/// Names follow `layer{i}.logits.task{t}` for logits and plain
/// `layer{i}.weights` / `layer{i}.kernels` / `head.*` otherwise.
fn logits_task_of(name: &str) -> Option<usize> {
    let (_, tail) = name.split_once(".logits.task")?;
    tail.parse().ok()
}

/// Write `model` (weights + every registered task's logits) and its class
/// map into `dir`, creating it as needed.
pub fn save_checkpoint(dir: &Path, model: &Model, class_map: &ClassMap) -> Result<()> {
    let task_ids: Vec<usize> = model.tasks().collect();
    if task_ids != class_map.keys().copied().collect::<Vec<_>>() {
        return Err(CliError::User(format!(
            "class map covers tasks {:?} but the model has registered {:?}",
            class_map.keys().collect::<Vec<_>>(),
            task_ids
        )));
    }
    let mut entries: Vec<TensorEntry> = Vec::new();
    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    blobs.insert(WEIGHTS_BLOB.to_string(), Vec::new());
    for &t in &task_ids {
        blobs.insert(logits_blob_name(t), Vec::new());
    }
    model.visit_params(true, &mut |name, tensor| {
        let blob_name = match logits_task_of(name) {
            Some(t) => logits_blob_name(t),
            None => WEIGHTS_BLOB.to_string(),
        };
        let blob = blobs
            .get_mut(&blob_name)
            .expect("every registered task has a blob buffer");
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            blob: blob_name,
            offset: blob.len(),
        });
        blob.extend_from_slice(&tensor_le_bytes(tensor));
        Ok(())
    })?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        task_ids: task_ids.clone(),
        spec: SpecManifest {
            input: model.spec().input_shape.clone(),
            classes: model.spec().total_classes,
            layers: model.spec().layers.iter().map(layer_to_manifest).collect(),
        },
        class_map: class_map
            .iter()
            .map(|(&task, classes)| TaskClasses {
                task,
                classes: classes.iter().copied().collect(),
            })
            .collect(),
        blobs: blobs
            .iter()
            .map(|(name, bytes)| (name.clone(), sha256_hex(bytes)))
            .collect(),
        tensors: entries,
    };
    for (name, bytes) in &blobs {
        write_file(&dir.join(name), bytes)?;
    }
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| CliError::Env(format!("encoding checkpoint manifest: {e}")))?;
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

/// Rebuild the model from `dir`, verifying every blob digest and restoring
/// every tensor bitwise.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, ClassMap)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = read_text(&manifest_path)?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| {
        CliError::Env(format!("{}: {e}", manifest_path.display()))
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CliError::Env(format!(
            "checkpoint format version {} is not supported (this build reads {})",
            manifest.format_version, FORMAT_VERSION
        )));
    }
    let layers = manifest
        .spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, m)| manifest_to_layer(m, manifest.spec.classes, i))
        .collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec {
        input_shape: manifest.spec.input.clone(),
        layers,
        total_classes: manifest.spec.classes,
    };
    spec.validate()?;

    let mut blob_bytes: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for (name, want_hash) in &manifest.blobs {
        let bytes = read_file(&dir.join(name))?;
        let got = sha256_hex(&bytes);
        if &got != want_hash {
            return Err(CliError::Env(format!(
                "checkpoint blob {name} is corrupt: manifest records sha256 {want_hash}, \
                 file hashes to {got}"
            )));
        }
        blob_bytes.insert(name.clone(), bytes);
    }

    // Initial values are placeholders; every tensor is overwritten below.
    let mut rng = RngStream::with_salt(0, StreamLabel::Init, 0);
    let mut model = build_model(&spec, &mut rng)?;
    for &t in &manifest.task_ids {
        model.register_task(t, &mut rng)?;
    }

    let mut index: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for e in &manifest.tensors {
        if index.insert(e.name.as_str(), e).is_some() {
            return Err(CliError::Env(format!(
                "checkpoint manifest indexes tensor {} twice",
                e.name
            )));
        }
    }
    let mut restored = 0usize;
    // Everything below guards artifact integrity, so failures are
    // environment errors, not user mistakes.
    model.visit_params_mut(true, &mut |name, tensor| {
        let entry = index.get(name).ok_or_else(|| {
            twta_core::Error::Param(format!("checkpoint manifest lacks tensor {name}"))
        })?;
        if entry.shape != tensor.shape() {
            return Err(twta_core::Error::ShapeMismatch {
                op: "checkpoint tensor restore",
                left: entry.shape.clone(),
                right: tensor.shape().to_vec(),
            });
        }
        let bytes = blob_bytes.get(&entry.blob).ok_or_else(|| {
            twta_core::Error::Param(format!(
                "tensor {name} references blob {} which the manifest does not list",
                entry.blob
            ))
        })?;
        let len = tensor.data().len() * 4;
        if entry.offset % 4 != 0 || entry.offset + len > bytes.len() {
            return Err(twta_core::Error::Param(format!(
                "tensor {name} spans bytes {}..{} of {}, which holds {} bytes",
                entry.offset,
                entry.offset + len,
                entry.blob,
                bytes.len()
            )));
        }
        let src = &bytes[entry.offset..entry.offset + len];
        for (dst, chunk) in tensor.data_mut().iter_mut().zip(src.chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        restored += 1;
        Ok(())
    })
    .map_err(|e| CliError::Env(format!("checkpoint restore: {e}")))?;
    if restored != manifest.tensors.len() {
        return Err(CliError::Env(format!(
            "checkpoint manifest indexes {} tensors but the spec's model has {restored}",
            manifest.tensors.len()
        )));
    }
    let class_map: ClassMap = manifest
        .class_map
        .iter()
        .map(|tc| (tc.task, tc.classes.iter().copied().collect()))
        .collect();
    if class_map.keys().copied().collect::<Vec<_>>() != manifest.task_ids {
        return Err(CliError::Env(
            "checkpoint manifest's class map and task id list disagree".into(),
        ));
    }
    Ok((model, class_map))
}
