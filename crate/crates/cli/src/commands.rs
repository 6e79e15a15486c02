//! The five subcommands: train, eval, prune, report, selftest.
//!
//! `train` owns the run-directory layout; everything else reads it back.
//! A run directory holds the effective config (`config.toml`, with CLI
//! overrides already applied so later commands rebuild the exact same
//! streams), one `epochs_task{t}.csv` per task with columns
//! `epoch,loss,lr,tau,grad_sparsity`, the lower-triangular
//! `accuracy_matrix.csv`, the final `metrics.csv` / `report.txt` pair, and
//! one checkpoint directory per task under `checkpoints/`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use twta_core::evaluation::{
    check_conv_instances, check_dense_instances, check_model_instance, dataset_accuracy,
    metrics_report, sparsity_audit, AccuracyMatrix, PrunedModel,
};
use twta_core::network::{build_model, retained_params, Model};
use twta_core::numerics::{RngStream, StreamLabel, Tensor};
use twta_core::training::{
    run_continual, CycleObserver, Dataset, EpochStats, TaskData, TaskReport, TaskStream,
};
use twta_core::twta::sample_relaxed_winners;

use crate::checkpoint::{load_checkpoint, save_checkpoint, ClassMap, WEIGHTS_BLOB};
use crate::config::{DatasetSpec, RunConfig};
use crate::datasets::{ensure_digit_corpus, gen_pmnist, gen_synthetic, resolve_data_dir, stream_from_idx};
use crate::error::{read_text, write_file, CliError, Result};
use crate::export::{load_export, save_export};
use crate::idx::ingest_idx;
use crate::plots;

pub const CONFIG_FILE: &str = "config.toml";
pub const MATRIX_FILE: &str = "accuracy_matrix.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.txt";

pub fn epochs_csv_name(task: usize) -> String {
    format!("epochs_task{task}.csv")
}

pub fn checkpoint_dir(run: &Path, task: usize) -> PathBuf {
    run.join("checkpoints").join(format!("task{task}"))
}

/// Build the task stream a config describes, resolving the digit corpus
/// through the configured/environment data directory when needed.
pub fn build_stream(cfg: &RunConfig) -> Result<TaskStream> {
    let stream = match &cfg.dataset {
        DatasetSpec::Pmnist {
            tasks,
            classes_per_task,
            train_per_task,
            test_per_task,
            resplit,
        } => {
            let dir = resolve_data_dir(cfg.data_dir.as_deref());
            let mut corpus = ensure_digit_corpus(&dir)?;
            if let Some(f) = resplit {
                corpus = corpus.resplit(*f, cfg.seed)?;
            }
            gen_pmnist(
                &corpus,
                *tasks,
                *classes_per_task,
                *train_per_task,
                *test_per_task,
                cfg.seed,
            )?
        }
        DatasetSpec::Synthetic {
            classes,
            dim,
            per_class,
            separation,
            tasks,
        } => gen_synthetic(*classes, *dim, *per_class, *separation, *tasks, cfg.seed)?,
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            tasks,
            classes_per_task,
            train_per_task,
            test_per_task,
        } => {
            let train = ingest_idx(Path::new(train_images), Path::new(train_labels))?;
            let test = ingest_idx(Path::new(test_images), Path::new(test_labels))?;
            stream_from_idx(
                (&train.0, &train.1),
                (&test.0, &test.1),
                *tasks,
                *classes_per_task,
                *train_per_task,
                *test_per_task,
            )?
        }
    };
    conform_stream(stream, &cfg.model.input_shape)
}

/// Reshape every dataset to the model's example shape (flat image rows
/// feeding an `[H, L, C]` conv stack, for instance). Element counts must
/// agree; only the shape bookkeeping changes.
fn conform_stream(stream: TaskStream, input_shape: &[usize]) -> Result<TaskStream> {
    if stream.example_shape() == input_shape {
        return Ok(stream);
    }
    let have: usize = stream.example_shape().iter().product();
    let want: usize = input_shape.iter().product();
    if have != want {
        return Err(CliError::User(format!(
            "dataset examples have shape {:?} ({have} values) but the model expects \
             {input_shape:?} ({want} values)",
            stream.example_shape()
        )));
    }
    let total_classes = stream.total_classes();
    let reshape = |d: &Dataset| -> Result<Dataset> {
        let mut shape = vec![d.len()];
        shape.extend_from_slice(input_shape);
        Ok(Dataset::new(
            Tensor::from_vec(shape, d.inputs().data().to_vec())?,
            d.labels().to_vec(),
        )?)
    };
    let tasks = stream
        .tasks()
        .iter()
        .map(|t| {
            Ok(TaskData {
                id: t.id,
                classes: t.classes.clone(),
                train: reshape(&t.train)?,
                test: reshape(&t.test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskStream::new(tasks, total_classes)?)
}

fn epochs_csv(report: &TaskReport) -> String {
    let mut out = String::from("epoch,loss,lr,tau,grad_sparsity\n");
    for e in &report.epochs {
        out.push_str(&format!(
            "{},{:.9},{:.6},{:.6},{:.6}\n",
            e.epoch, e.mean_loss, e.lr_start, e.tau_start, e.grad_sparsity_min
        ));
    }
    out
}

/// Lower-triangular matrix as CSV; entries use shortest-round-trip float
/// formatting so parsing restores the exact f64 bits.
fn matrix_csv(matrix: &AccuracyMatrix) -> String {
    let n = matrix.n();
    let mut out = String::from("after_task");
    for t in 0..n {
        out.push_str(&format!(",task{t}"));
    }
    out.push('\n');
    for (k, row) in matrix.rows().iter().enumerate() {
        out.push_str(&format!("{k}"));
        for t in 0..n {
            out.push(',');
            if t < row.len() {
                out.push_str(&format!("{}", row[t]));
            }
        }
        out.push('\n');
    }
    out
}

fn parse_matrix_csv(text: &str, origin: &Path) -> Result<AccuracyMatrix> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let mut row = Vec::new();
        for cell in &cells[1..] {
            if cell.is_empty() {
                break;
            }
            row.push(cell.parse::<f64>().map_err(|e| {
                CliError::Env(format!(
                    "{} line {}: bad accuracy cell {cell:?}: {e}",
                    origin.display(),
                    i + 1
                ))
            })?);
        }
        rows.push(row);
    }
    AccuracyMatrix::from_rows(rows)
        .map_err(|e| CliError::Env(format!("{}: {e}", origin.display())))
}

fn parse_loss_column(text: &str, origin: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cell = line.split(',').nth(1).unwrap_or("");
        out.push(cell.parse::<f64>().map_err(|e| {
            CliError::Env(format!(
                "{} line {}: bad loss cell {cell:?}: {e}",
                origin.display(),
                i + 1
            ))
        })?);
    }
    Ok(out)
}

/// Saves one checkpoint per trained task and echoes progress; any I/O
/// failure is parked (the training loop only speaks engine errors) and
/// rethrown with its exit classification intact.
struct RunRecorder<'a> {
    run_dir: &'a Path,
    stream: &'a TaskStream,
    failure: Option<CliError>,
}

impl CycleObserver for RunRecorder<'_> {
    fn on_epoch(&mut self, task: usize, stats: &EpochStats) -> twta_core::Result<()> {
        println!(
            "task {task} epoch {}: loss {:.4}, grad sparsity {:.4}",
            stats.epoch, stats.mean_loss, stats.grad_sparsity_min
        );
        Ok(())
    }

    fn on_task_trained(
        &mut self,
        task: usize,
        model: &Model,
        report: &TaskReport,
    ) -> twta_core::Result<()> {
        let mut class_map = ClassMap::new();
        for td in &self.stream.tasks()[..=task] {
            class_map.insert(td.id, td.classes.clone());
        }
        let dir = checkpoint_dir(self.run_dir, task);
        if let Err(e) = save_checkpoint(&dir, model, &class_map) {
            self.failure = Some(e);
            return Err(twta_core::Error::Contract(
                "checkpoint write failed; see run error".into(),
            ));
        }
        println!(
            "task {task} trained: final train accuracy {:.4}, checkpoint at {}",
            report.final_train_accuracy,
            dir.display()
        );
        Ok(())
    }

    fn on_task_evaluated(&mut self, task: usize, accuracies: &[f64]) -> twta_core::Result<()> {
        let cells: Vec<String> = accuracies.iter().map(|a| format!("{a:.4}")).collect();
        println!("after task {task}: accuracy on tasks 0..={task}: [{}]", cells.join(", "));
        Ok(())
    }
}

/// Re-serialize the parsed config with CLI overrides already applied, so
/// the stored copy alone reproduces the run.
fn effective_config_text(
    original: &str,
    origin: &str,
    seed: u64,
    resplit: Option<f64>,
) -> Result<String> {
    let mut value: toml::Value = original
        .parse()
        .map_err(|e| CliError::User(format!("{origin}: {e}")))?;
    value
        .as_table_mut()
        .expect("top level of a parsed config is a table")
        .insert("seed".into(), toml::Value::Integer(seed as i64));
    if let Some(f) = resplit {
        value["dataset"]
            .as_table_mut()
            .ok_or_else(|| CliError::User(format!("{origin}: [dataset] is not a table")))?
            .insert("resplit".into(), toml::Value::Float(f));
    }
    toml::to_string_pretty(&value)
        .map_err(|e| CliError::Env(format!("re-encoding effective config: {e}")))
}

pub fn cmd_train(
    config_path: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
    resplit_override: Option<f64>,
) -> Result<()> {
    let original = read_text(config_path)?;
    let origin = config_path.display().to_string();
    let mut cfg = RunConfig::parse(&original, &origin)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(f) = resplit_override {
        match &mut cfg.dataset {
            DatasetSpec::Pmnist { resplit, .. } => {
                if !(0.0 < f && f < 1.0) {
                    return Err(CliError::User(format!(
                        "--resplit must lie in (0, 1), got {f}"
                    )));
                }
                *resplit = Some(f);
            }
            _ => {
                return Err(CliError::User(
                    "--resplit only applies to the pmnist dataset kind".into(),
                ))
            }
        }
    }
    let run_dir = out_override
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| {
            CliError::User("no output directory: set out_dir in the config or pass --out".into())
        })?;

    let effective = effective_config_text(
        &original,
        &origin,
        cfg.seed,
        match &cfg.dataset {
            DatasetSpec::Pmnist { resplit, .. } => *resplit,
            _ => None,
        },
    )?;
    write_file(&run_dir.join(CONFIG_FILE), effective.as_bytes())?;

    println!("building dataset ({} tasks)...", cfg.dataset.tasks());
    let stream = build_stream(&cfg)?;
    let mut model = build_model(
        &cfg.model,
        &mut RngStream::with_salt(cfg.seed, StreamLabel::Init, 0),
    )?;

    let started = Instant::now();
    let mut recorder = RunRecorder {
        run_dir: &run_dir,
        stream: &stream,
        failure: None,
    };
    let outcome = match run_continual(&mut model, &stream, &cfg.train, &mut recorder) {
        Ok(o) => o,
        Err(e) => {
            return Err(recorder.failure.take().unwrap_or_else(|| CliError::from(e)));
        }
    };

    for report in &outcome.reports {
        write_file(
            &run_dir.join(epochs_csv_name(report.task)),
            epochs_csv(report).as_bytes(),
        )?;
    }
    write_file(
        &run_dir.join(MATRIX_FILE),
        matrix_csv(&outcome.matrix).as_bytes(),
    )?;
    let metrics = metrics_report(&model, &outcome.matrix, cfg.train.eps_g)?;
    write_file(&run_dir.join(METRICS_FILE), metrics.to_csv().as_bytes())?;
    write_file(&run_dir.join(REPORT_FILE), metrics.to_text().as_bytes())?;

    println!(
        "run complete in {:.1}s: average final accuracy {:.4}{}",
        started.elapsed().as_secs_f64(),
        metrics.average_final_accuracy,
        match metrics.backward_transfer {
            Some(b) => format!(", backward transfer {b:.4} points"),
            None => String::new(),
        }
    );
    println!("artifacts in {}", run_dir.display());
    Ok(())
}

/// `--data` descriptors: `run:<dir>:<train|test>` rebuilds the stored
/// run's stream (identical seed, hence identical permutations) and picks
/// the task's split; `idx:<images>:<labels>` evaluates a raw labeled pair.
fn eval_data(descriptor: &str, task: usize, model: &Model) -> Result<(Tensor, Vec<usize>)> {
    let parts: Vec<&str> = descriptor.splitn(3, ':').collect();
    match parts.as_slice() {
        ["run", dir, split @ ("train" | "test")] => {
            let cfg = RunConfig::load(&Path::new(dir).join(CONFIG_FILE))?;
            let stream = build_stream(&cfg)?;
            let td = stream.task(task)?;
            let d = if *split == "train" { &td.train } else { &td.test };
            Ok((d.inputs().clone(), d.labels().to_vec()))
        }
        ["idx", images, labels] => {
            let (images, labels) = ingest_idx(Path::new(images), Path::new(labels))?;
            let count = images.count();
            let tensor = images.to_tensor();
            let want: usize = model.spec().input_shape.iter().product();
            if tensor.data().len() / count != want {
                return Err(CliError::User(format!(
                    "images are {}x{} ({} values) but the model expects {:?}",
                    images.rows,
                    images.cols,
                    images.rows * images.cols,
                    model.spec().input_shape
                )));
            }
            let mut shape = vec![count];
            shape.extend_from_slice(&model.spec().input_shape);
            Ok((
                tensor.reshaped(shape)?,
                labels.iter().map(|&l| l as usize).collect(),
            ))
        }
        _ => Err(CliError::User(format!(
            "bad --data descriptor {descriptor:?}: expected run:<dir>:<train|test> \
             or idx:<images>:<labels>"
        ))),
    }
}

pub fn cmd_eval(ckpt: &Path, task: usize, data: &str) -> Result<()> {
    let (model, class_map) = load_checkpoint(ckpt)?;
    if !class_map.contains_key(&task) {
        return Err(CliError::User(format!(
            "task {task} is not registered in this checkpoint (tasks: {:?})",
            class_map.keys().collect::<Vec<_>>()
        )));
    }
    let (inputs, labels) = eval_data(data, task, &model)?;
    let seen = seen_from_class_map(&class_map, model.total_classes());
    let accuracy = dataset_accuracy(&model, task, &inputs, &labels, &seen)?;
    println!(
        "task {task} on {} examples (classes seen: {})",
        labels.len(),
        seen.iter().filter(|&&s| s).count()
    );
    println!("accuracy {accuracy:.6}");
    let audit = sparsity_audit(&model, task, &inputs)?;
    println!("{}", audit.summary());
    if !audit.pass() {
        return Err(CliError::Env(
            "sparsity audit failed; eval activations violate the winner structure".into(),
        ));
    }
    Ok(())
}

pub fn cmd_prune(ckpt: &Path, task: usize, out: &Path) -> Result<()> {
    let (model, class_map) = load_checkpoint(ckpt)?;
    if !class_map.contains_key(&task) {
        return Err(CliError::User(format!(
            "task {task} is not registered in this checkpoint (tasks: {:?})",
            class_map.keys().collect::<Vec<_>>()
        )));
    }
    let pruned = PrunedModel::from_model(&model, task)?;
    save_export(out, &pruned)?;
    let counts = retained_params(model.spec())?;
    let fraction = if counts.twta_total == 0 {
        100.0
    } else {
        100.0 * counts.twta_retained as f64 / counts.twta_total as f64
    };
    println!(
        "task {task}: retained {} of {} TWTA weights ({fraction}%), plus {} head parameters",
        counts.twta_retained, counts.twta_total, counts.head
    );
    let export_size = std::fs::metadata(out)
        .map_err(|e| CliError::env(&format!("stat {}", out.display()), e))?
        .len();
    let full_blob = std::fs::metadata(ckpt.join(WEIGHTS_BLOB))
        .map_err(|e| CliError::env(&format!("stat {}", ckpt.join(WEIGHTS_BLOB).display()), e))?
        .len();
    println!(
        "export {} ({export_size} bytes; full weights blob {full_blob} bytes)",
        out.display()
    );
    // Loading back immediately guards the export against silent corruption.
    load_export(out)?;
    Ok(())
}

pub fn cmd_report(run: &Path) -> Result<()> {
    let cfg_path = run.join(CONFIG_FILE);
    let matrix_path = run.join(MATRIX_FILE);
    let mut missing: Vec<String> = Vec::new();
    for p in [&cfg_path, &matrix_path] {
        if !p.exists() {
            missing.push(p.display().to_string());
        }
    }
    let cfg = if cfg_path.exists() {
        Some(RunConfig::load(&cfg_path)?)
    } else {
        None
    };
    let matrix = if matrix_path.exists() {
        Some(parse_matrix_csv(&read_text(&matrix_path)?, &matrix_path)?)
    } else {
        None
    };
    let tasks = matrix
        .as_ref()
        .map(|m| m.n())
        .or_else(|| cfg.as_ref().map(|c| c.dataset.tasks()))
        .unwrap_or(0);
    for t in 0..tasks {
        let p = run.join(epochs_csv_name(t));
        if !p.exists() {
            missing.push(p.display().to_string());
        }
    }
    let final_ckpt = checkpoint_dir(run, tasks.saturating_sub(1));
    if tasks == 0 || !final_ckpt.join(crate::checkpoint::MANIFEST_FILE).exists() {
        missing.push(final_ckpt.display().to_string());
    }
    if !missing.is_empty() {
        return Err(CliError::User(format!(
            "run directory {} is incomplete; missing artifacts:\n  {}",
            run.display(),
            missing.join("\n  ")
        )));
    }
    let (cfg, matrix) = (cfg.expect("checked above"), matrix.expect("checked above"));
    let (model, _) = load_checkpoint(&final_ckpt)?;
    let metrics = metrics_report(&model, &matrix, cfg.train.eps_g)?;
    write_file(&run.join(METRICS_FILE), metrics.to_csv().as_bytes())?;
    write_file(&run.join(REPORT_FILE), metrics.to_text().as_bytes())?;

    let mut losses = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let p = run.join(epochs_csv_name(t));
        losses.push(parse_loss_column(&read_text(&p)?, &p)?);
    }
    let plots_dir = run.join("plots");
    write_file(
        &plots_dir.join("loss_curves.svg"),
        plots::loss_curves_svg(&losses).as_bytes(),
    )?;
    write_file(
        &plots_dir.join("accuracy_over_tasks.svg"),
        plots::accuracy_over_tasks_svg(&matrix).as_bytes(),
    )?;
    write_file(
        &plots_dir.join("overlap.svg"),
        plots::overlap_bars_svg(&metrics.overlaps, metrics.average_overlap).as_bytes(),
    )?;

    println!("{}", metrics.to_text());
    println!("report files written to {}", run.display());
    Ok(())
}

pub fn cmd_selftest() -> Result<()> {
    let fail = |what: &str, e: twta_core::Error| {
        CliError::Env(format!("selftest: {what} failed: {e}"))
    };
    let rel_bound = 1e-3;
    let bounded = |what: &str, rel: f64| -> Result<()> {
        if rel > rel_bound {
            return Err(CliError::Env(format!(
                "selftest: {what} max relative error {rel:.3e} exceeds {rel_bound:.0e}"
            )));
        }
        Ok(())
    };
    let t0 = Instant::now();
    let dense = check_dense_instances(20, 17).map_err(|e| fail("dense gradient check", e))?;
    bounded("dense gradient check", dense.max_rel_error)?;
    println!(
        "dense gradients: {} instances, {} checks, max rel err {:.3e} [{:.1}s]",
        dense.instances,
        dense.checks,
        dense.max_rel_error,
        t0.elapsed().as_secs_f64()
    );
    let t1 = Instant::now();
    let conv = check_conv_instances(8, 19).map_err(|e| fail("conv gradient check", e))?;
    bounded("conv gradient check", conv.max_rel_error)?;
    println!(
        "conv gradients: {} instances, {} checks, max rel err {:.3e} [{:.1}s]",
        conv.instances,
        conv.checks,
        conv.max_rel_error,
        t1.elapsed().as_secs_f64()
    );
    let model = check_model_instance(23).map_err(|e| fail("model gradient check", e))?;
    bounded("model gradient check", model.max_rel_error)?;
    println!(
        "model cross-entropy gradients: {} checks, max rel err {:.3e}",
        model.checks, model.max_rel_error
    );

    // Relaxed winner samples must lie on the simplex.
    let mut rng = RngStream::with_salt(11, StreamLabel::Gumbel, 0);
    let logits = Tensor::from_vec(vec![4, 8], (0..32).map(|i| (i % 5) as f32 * 0.3).collect())?;
    for _ in 0..100 {
        let s = sample_relaxed_winners(&logits, 0.5, &mut rng)
            .map_err(|e| fail("winner sampling", e))?;
        for b in 0..4 {
            let sum: f64 = s.xi_hat().data()[b * 8..(b + 1) * 8]
                .iter()
                .map(|&v| v as f64)
                .sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(CliError::Env(format!(
                    "selftest: winner sample row sums to {sum}, not 1"
                )));
            }
        }
    }
    println!("winner sampling: 100 draws on the simplex");

    // Structural audit on a fresh model with a Gaussian probe.
    let spec = twta_core::network::ModelSpec {
        input_shape: vec![12],
        layers: vec![
            twta_core::network::LayerSpec::TwtaDense {
                in_dim: 12,
                blocks: 4,
                units: 4,
            },
            twta_core::network::LayerSpec::Head { classes: 4 },
        ],
        total_classes: 4,
    };
    let mut init = RngStream::with_salt(3, StreamLabel::Init, 0);
    let mut m = build_model(&spec, &mut init).map_err(|e| fail("audit model build", e))?;
    m.register_task(0, &mut init).map_err(|e| fail("audit task registration", e))?;
    let probe = Tensor::from_vec(vec![16, 12], (0..192).map(|_| init.normal() as f32).collect())?;
    let audit = sparsity_audit(&m, 0, &probe).map_err(|e| fail("sparsity audit", e))?;
    println!("{}", audit.summary());
    if !audit.pass() {
        return Err(CliError::Env("selftest: sparsity audit failed".into()));
    }
    println!("selftest passed in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

/// Classes seen across every registered task, as a mask.
pub fn seen_from_class_map(class_map: &ClassMap, total: usize) -> Vec<bool> {
    let mut seen = vec![false; total];
    let all: BTreeSet<usize> = class_map.values().flatten().copied().collect();
    for c in all {
        if c < total {
            seen[c] = true;
        }
    }
    seen
}
