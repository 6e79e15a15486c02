//! Run configuration files.
//!
//! A run is described by one TOML file: top-level `seed` / `out_dir` /
//! `data_dir`, a `[model]` section (input shape, class count, layer list),
//! a `[train]` section (every field optional, defaulting to the reference
//! recipe), and a `[dataset]` section selected by `kind`. Unknown keys are
//! rejected with the line-accurate span the TOML parser reports; per-kind
//! field mistakes (a dense field on a conv layer, a missing required
//! field) are caught during conversion with the layer index named.
//!
//! Layer entries carry a `type` discriminator rather than deserializing
//! straight into an enum: serde's unknown-field rejection does not combine
//! with internally tagged enums, and giving that up would cost the exact
//! errors this interface promises.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use twta_core::network::{LayerSpec, ModelSpec};
use twta_core::training::TrainConfig;

use crate::error::{read_text, CliError, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    seed: Option<u64>,
    out_dir: Option<String>,
    data_dir: Option<String>,
    model: ModelEntry,
    train: Option<TrainEntry>,
    dataset: DatasetEntry,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelEntry {
    /// `[features]` or `[H, L, C]`.
    input: Vec<usize>,
    /// Global class count; the head's width.
    classes: usize,
    layers: Vec<LayerEntry>,
}

/// One `[[model.layers]]` row: the union of every layer type's fields.
/// Which ones are required or forbidden depends on `type`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    #[serde(rename = "type")]
    kind: String,
    in_dim: Option<usize>,
    blocks: Option<usize>,
    units: Option<usize>,
    kernel_h: Option<usize>,
    kernel_l: Option<usize>,
    in_channels: Option<usize>,
    kernels: Option<usize>,
    maps: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainEntry {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr0: Option<f32>,
    tau0: Option<f32>,
    tau_end: Option<f32>,
    eps_g: Option<f32>,
    replay_budget: Option<usize>,
    task_local_ce: Option<bool>,
    replay_with_origin_masks: Option<bool>,
}

/// One `[dataset]` section: the union of every kind's fields.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetEntry {
    kind: String,
    tasks: Option<usize>,
    classes_per_task: Option<usize>,
    train_per_task: Option<usize>,
    test_per_task: Option<usize>,
    resplit: Option<f64>,
    classes: Option<usize>,
    dim: Option<usize>,
    per_class: Option<usize>,
    separation: Option<f64>,
    train_images: Option<String>,
    train_labels: Option<String>,
    test_images: Option<String>,
    test_labels: Option<String>,
}

/// Fully resolved and validated run description.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<String>,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Pmnist {
        tasks: usize,
        classes_per_task: usize,
        train_per_task: usize,
        test_per_task: usize,
        /// Pool train+test and re-cut at this train fraction before
        /// slicing tasks; `None` keeps the canonical split.
        resplit: Option<f64>,
    },
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
        tasks: usize,
    },
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
        tasks: usize,
        classes_per_task: usize,
        train_per_task: usize,
        test_per_task: usize,
    },
}

impl DatasetSpec {
    pub fn total_classes(&self) -> usize {
        match *self {
            DatasetSpec::Pmnist {
                tasks,
                classes_per_task,
                ..
            }
            | DatasetSpec::Idx {
                tasks,
                classes_per_task,
                ..
            } => tasks * classes_per_task,
            DatasetSpec::Synthetic { classes, .. } => classes,
        }
    }

    pub fn tasks(&self) -> usize {
        match *self {
            DatasetSpec::Pmnist { tasks, .. }
            | DatasetSpec::Synthetic { tasks, .. }
            | DatasetSpec::Idx { tasks, .. } => tasks,
        }
    }
}

fn need<T>(field: Option<T>, name: &str, ctx: &str) -> Result<T> {
    field.ok_or_else(|| CliError::User(format!("{ctx}: missing required field `{name}`")))
}

fn forbid(ctx: &str, kind: &str, fields: &[(&str, bool)]) -> Result<()> {
    for (name, present) in fields {
        if *present {
            return Err(CliError::User(format!(
                "{ctx}: field `{name}` does not apply to type \"{kind}\""
            )));
        }
    }
    Ok(())
}

fn convert_layer(idx: usize, e: &LayerEntry, classes: usize) -> Result<LayerSpec> {
    let ctx = format!("model.layers[{idx}] (type \"{}\")", e.kind);
    let dense_fields = [
        ("in_dim", e.in_dim.is_some()),
        ("blocks", e.blocks.is_some()),
        ("units", e.units.is_some()),
    ];
    let conv_fields = [
        ("kernel_h", e.kernel_h.is_some()),
        ("kernel_l", e.kernel_l.is_some()),
        ("in_channels", e.in_channels.is_some()),
        ("kernels", e.kernels.is_some()),
        ("maps", e.maps.is_some()),
    ];
    match e.kind.as_str() {
        "twta_dense" => {
            forbid(&ctx, &e.kind, &conv_fields)?;
            Ok(LayerSpec::TwtaDense {
                in_dim: need(e.in_dim, "in_dim", &ctx)?,
                blocks: need(e.blocks, "blocks", &ctx)?,
                units: need(e.units, "units", &ctx)?,
            })
        }
        "twta_conv" => {
            forbid(&ctx, &e.kind, &dense_fields)?;
            Ok(LayerSpec::TwtaConv {
                kernel_h: need(e.kernel_h, "kernel_h", &ctx)?,
                kernel_l: need(e.kernel_l, "kernel_l", &ctx)?,
                in_channels: need(e.in_channels, "in_channels", &ctx)?,
                kernels: need(e.kernels, "kernels", &ctx)?,
                maps: need(e.maps, "maps", &ctx)?,
            })
        }
        "maxpool2" | "flatten" | "head" => {
            forbid(&ctx, &e.kind, &dense_fields)?;
            forbid(&ctx, &e.kind, &conv_fields)?;
            Ok(match e.kind.as_str() {
                "maxpool2" => LayerSpec::MaxPool2,
                "flatten" => LayerSpec::Flatten,
                // The head's width is the model-level class count; it is
                // never restated per layer.
                _ => LayerSpec::Head { classes },
            })
        }
        other => Err(CliError::User(format!(
            "model.layers[{idx}]: unknown layer type \"{other}\" (expected one of \
             \"twta_dense\", \"twta_conv\", \"maxpool2\", \"flatten\", \"head\")"
        ))),
    }
}

fn convert_dataset(e: &DatasetEntry) -> Result<DatasetSpec> {
    let ctx = format!("dataset (kind \"{}\")", e.kind);
    let sizing = |e: &DatasetEntry| -> Result<(usize, usize, usize, usize)> {
        Ok((
            need(e.tasks, "tasks", &ctx)?,
            need(e.classes_per_task, "classes_per_task", &ctx)?,
            need(e.train_per_task, "train_per_task", &ctx)?,
            need(e.test_per_task, "test_per_task", &ctx)?,
        ))
    };
    let synth_fields = [
        ("classes", e.classes.is_some()),
        ("dim", e.dim.is_some()),
        ("per_class", e.per_class.is_some()),
        ("separation", e.separation.is_some()),
    ];
    let idx_fields = [
        ("train_images", e.train_images.is_some()),
        ("train_labels", e.train_labels.is_some()),
        ("test_images", e.test_images.is_some()),
        ("test_labels", e.test_labels.is_some()),
    ];
    match e.kind.as_str() {
        "pmnist" => {
            forbid(&ctx, &e.kind, &synth_fields)?;
            forbid(&ctx, &e.kind, &idx_fields)?;
            let (tasks, classes_per_task, train_per_task, test_per_task) = sizing(e)?;
            if let Some(f) = e.resplit {
                if !(0.0 < f && f < 1.0) {
                    return Err(CliError::User(format!(
                        "{ctx}: resplit must lie in (0, 1), got {f}"
                    )));
                }
            }
            Ok(DatasetSpec::Pmnist {
                tasks,
                classes_per_task,
                train_per_task,
                test_per_task,
                resplit: e.resplit,
            })
        }
        "synthetic" => {
            forbid(&ctx, &e.kind, &idx_fields)?;
            forbid(
                &ctx,
                &e.kind,
                &[
                    ("classes_per_task", e.classes_per_task.is_some()),
                    ("train_per_task", e.train_per_task.is_some()),
                    ("test_per_task", e.test_per_task.is_some()),
                    ("resplit", e.resplit.is_some()),
                ],
            )?;
            Ok(DatasetSpec::Synthetic {
                classes: need(e.classes, "classes", &ctx)?,
                dim: need(e.dim, "dim", &ctx)?,
                per_class: need(e.per_class, "per_class", &ctx)?,
                separation: need(e.separation, "separation", &ctx)?,
                tasks: need(e.tasks, "tasks", &ctx)?,
            })
        }
        "idx" => {
            forbid(&ctx, &e.kind, &synth_fields)?;
            forbid(&ctx, &e.kind, &[("resplit", e.resplit.is_some())])?;
            let (tasks, classes_per_task, train_per_task, test_per_task) = sizing(e)?;
            Ok(DatasetSpec::Idx {
                train_images: need(e.train_images.clone(), "train_images", &ctx)?,
                train_labels: need(e.train_labels.clone(), "train_labels", &ctx)?,
                test_images: need(e.test_images.clone(), "test_images", &ctx)?,
                test_labels: need(e.test_labels.clone(), "test_labels", &ctx)?,
                tasks,
                classes_per_task,
                train_per_task,
                test_per_task,
            })
        }
        other => Err(CliError::User(format!(
            "dataset: unknown kind \"{other}\" (expected \"pmnist\", \"synthetic\", or \"idx\")"
        ))),
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<RunConfig> {
        let raw: RunConfigFile = toml::from_str(text)
            .map_err(|e| CliError::User(format!("{origin}: {e}")))?;
        let defaults = TrainConfig::default();
        let t = raw.train.unwrap_or(TrainEntry {
            epochs: None,
            batch_size: None,
            lr0: None,
            tau0: None,
            tau_end: None,
            eps_g: None,
            replay_budget: None,
            task_local_ce: None,
            replay_with_origin_masks: None,
        });
        let seed = raw.seed.unwrap_or(0);
        let train = TrainConfig {
            epochs: t.epochs.unwrap_or(defaults.epochs),
            batch_size: t.batch_size.unwrap_or(defaults.batch_size),
            lr0: t.lr0.unwrap_or(defaults.lr0),
            tau0: t.tau0.unwrap_or(defaults.tau0),
            tau_end: t.tau_end.unwrap_or(defaults.tau_end),
            eps_g: t.eps_g.unwrap_or(defaults.eps_g),
            replay_budget: t.replay_budget.unwrap_or(defaults.replay_budget),
            seed,
            task_local_ce: t.task_local_ce.unwrap_or(defaults.task_local_ce),
            replay_with_origin_masks: t
                .replay_with_origin_masks
                .unwrap_or(defaults.replay_with_origin_masks),
        };
        let layers = raw
            .model
            .layers
            .iter()
            .enumerate()
            .map(|(i, e)| convert_layer(i, e, raw.model.classes))
            .collect::<Result<Vec<_>>>()?;
        let model = ModelSpec {
            input_shape: raw.model.input.clone(),
            layers,
            total_classes: raw.model.classes,
        };
        model.validate()?;
        train.validate()?;
        let dataset = convert_dataset(&raw.dataset)?;
        if dataset.total_classes() != raw.model.classes {
            return Err(CliError::User(format!(
                "model.classes is {} but the dataset provides {} classes \
                 ({} tasks covering disjoint class sets)",
                raw.model.classes,
                dataset.total_classes(),
                dataset.tasks()
            )));
        }
        Ok(RunConfig {
            seed,
            out_dir: raw.out_dir.map(PathBuf::from),
            data_dir: raw.data_dir,
            model,
            train,
            dataset,
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = read_text(path)?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = r#"
seed = 42
out_dir = "runs/desk"

[model]
input = [784]
classes = 10

[[model.layers]]
type = "twta_dense"
in_dim = 784
blocks = 16
units = 4

[[model.layers]]
type = "twta_dense"
in_dim = 64
blocks = 8
units = 4

[[model.layers]]
type = "head"

[train]
epochs = 5
batch_size = 40
lr0 = 0.1
replay_budget = 10

[dataset]
kind = "pmnist"
tasks = 5
classes_per_task = 2
train_per_task = 2000
test_per_task = 500
"#;

    #[test]
    fn desk_config_parses_and_fills_defaults() {
        let cfg = RunConfig::parse(DESK, "desk.toml").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.out_dir.as_deref(), Some(Path::new("runs/desk")));
        assert_eq!(cfg.model.total_classes, 10);
        assert_eq!(cfg.model.layers.len(), 3);
        assert_eq!(
            cfg.model.layers[0],
            LayerSpec::TwtaDense {
                in_dim: 784,
                blocks: 16,
                units: 4
            }
        );
        assert_eq!(cfg.model.layers[2], LayerSpec::Head { classes: 10 });
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.seed, 42);
        // Unset train knobs take the reference-recipe defaults.
        assert_eq!(cfg.train.tau0, 0.67);
        assert_eq!(cfg.train.tau_end, 0.01);
        assert_eq!(cfg.train.eps_g, 1e-3);
        assert!(!cfg.train.task_local_ce);
        match cfg.dataset {
            DatasetSpec::Pmnist {
                tasks: 5,
                classes_per_task: 2,
                train_per_task: 2000,
                test_per_task: 500,
                resplit: None,
            } => {}
            other => panic!("unexpected dataset: {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_and_name() {
        let text = DESK.replace("batch_size = 40", "batch_sizes = 40");
        let err = RunConfig::parse(&text, "desk.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("batch_sizes"), "{msg}");
        assert!(msg.contains("line"), "no line info: {msg}");
        assert!(msg.starts_with("desk.toml"), "{msg}");
        assert_eq!(err.exit_code(), 2);

        let text = format!("{DESK}\nworkers = 4\n");
        let err = RunConfig::parse(&text, "c.toml").unwrap_err();
        assert!(err.to_string().contains("workers"), "{err}");
    }

    #[test]
    fn wrong_kind_fields_name_the_layer() {
        let text = DESK.replace(
            "type = \"head\"",
            "type = \"head\"\nin_dim = 64",
        );
        let err = RunConfig::parse(&text, "c.toml").unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("model.layers[2]") && msg.contains("in_dim") && msg.contains("head"),
            "{msg}"
        );

        let text = DESK.replace(
            "type = \"twta_dense\"\nin_dim = 784\nblocks = 16\nunits = 4",
            "type = \"twta_dense\"\nin_dim = 784\nblocks = 16\nunits = 4\nkernels = 3",
        );
        let err = RunConfig::parse(&text, "c.toml").unwrap_err();
        assert!(err.to_string().contains("kernels"), "{err}");
    }

    #[test]
    fn missing_required_fields_are_named() {
        let text = DESK.replace("in_dim = 784\n", "");
        let err = RunConfig::parse(&text, "c.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing required field `in_dim`"), "{msg}");
        assert!(msg.contains("model.layers[0]"), "{msg}");
    }

    #[test]
    fn unknown_discriminators_list_the_alternatives() {
        let err = RunConfig::parse(&DESK.replace("twta_dense", "dense"), "c.toml").unwrap_err();
        assert!(err.to_string().contains("\"dense\""), "{err}");
        assert!(err.to_string().contains("twta_dense"), "{err}");

        let err = RunConfig::parse(&DESK.replace("kind = \"pmnist\"", "kind = \"mnist\""), "c.toml")
            .unwrap_err();
        assert!(err.to_string().contains("\"mnist\""), "{err}");
        assert!(err.to_string().contains("pmnist"), "{err}");
    }

    #[test]
    fn class_count_must_match_the_dataset() {
        let err = RunConfig::parse(&DESK.replace("classes = 10", "classes = 12"), "c.toml")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("12") && msg.contains("10"), "{msg}");
    }

    #[test]
    fn engine_validation_runs_at_load() {
        // Second layer expects 64 inputs; widening the first to 20x4=80
        // breaks the chain and the shape error surfaces at parse time.
        let err = RunConfig::parse(&DESK.replace("blocks = 16", "blocks = 20"), "c.toml")
            .unwrap_err();
        assert!(err.to_string().contains("expects input"), "{err}");
        // Train-side validation too.
        let text = DESK.replace("lr0 = 0.1", "lr0 = -0.5");
        let err = RunConfig::parse(&text, "c.toml").unwrap_err();
        assert!(err.to_string().contains("lr0"), "{err}");
    }

    #[test]
    fn toml_syntax_errors_carry_position() {
        let err = RunConfig::parse("seed = = 3", "broken.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("broken.toml"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn synthetic_and_idx_kinds_convert() {
        let text = r#"
[model]
input = [16]
classes = 4

[[model.layers]]
type = "twta_dense"
in_dim = 16
blocks = 4
units = 2

[[model.layers]]
type = "head"

[dataset]
kind = "synthetic"
classes = 4
dim = 16
per_class = 50
separation = 10.0
tasks = 2
"#;
        let cfg = RunConfig::parse(text, "s.toml").unwrap();
        assert_eq!(cfg.seed, 0, "seed defaults to 0");
        assert_eq!(cfg.dataset.total_classes(), 4);
        assert!(matches!(cfg.dataset, DatasetSpec::Synthetic { .. }));

        let text = text.replace(
            "kind = \"synthetic\"\nclasses = 4\ndim = 16\nper_class = 50\nseparation = 10.0\ntasks = 2",
            "kind = \"idx\"\ntrain_images = \"a\"\ntrain_labels = \"b\"\ntest_images = \"c\"\ntest_labels = \"d\"\ntasks = 2\nclasses_per_task = 2\ntrain_per_task = 10\ntest_per_task = 4",
        );
        let cfg = RunConfig::parse(&text, "i.toml").unwrap();
        assert!(matches!(cfg.dataset, DatasetSpec::Idx { .. }));

        // Synthetic rejects pmnist-only sizing fields.
        let bad = r#"
[model]
input = [16]
classes = 4
[[model.layers]]
type = "twta_dense"
in_dim = 16
blocks = 4
units = 2
[[model.layers]]
type = "head"
[dataset]
kind = "synthetic"
classes = 4
dim = 16
per_class = 50
separation = 10.0
tasks = 2
resplit = 0.9
"#;
        let err = RunConfig::parse(bad, "c.toml").unwrap_err();
        assert!(err.to_string().contains("resplit"), "{err}");
    }
}
