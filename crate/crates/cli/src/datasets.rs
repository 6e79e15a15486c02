//! Dataset generation and task-stream assembly.
//!
//! Two sources feed the continual benchmark: a deterministic handwritten-
//! digit-style corpus stored as real IDX files (stand-in for MNIST in
//! offline environments; generated once per data directory, then ingested
//! through the same parser external files use), and quick synthetic
//! Gaussian blobs for smoke tests.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use twta_core::numerics::{RngStream, StreamLabel, Tensor};
use twta_core::training::{Dataset, TaskData, TaskStream};

use crate::error::{CliError, Result};
use crate::idx::{encode_idx_images, encode_idx_labels, ingest_idx, IdxImages};

/// The corpus is a fixed artifact like the dataset it stands in for: its
/// generation seed is a constant, independent of any run seed.
const CORPUS_SEED: u64 = 0x4449_4749_5453; // "DIGITS"
pub const TRAIN_PER_DIGIT: usize = 1_200;
pub const TEST_PER_DIGIT: usize = 300;
pub const IMAGE_SIDE: usize = 28;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "test-images-idx3-ubyte";
pub const TEST_LABELS: &str = "test-labels-idx1-ubyte";

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "TWTA_DATA_DIR";

/// Resolve the data directory: explicit config value, then the environment
/// variable, then `./twta-data`.
pub fn resolve_data_dir(configured: Option<&str>) -> PathBuf {
    if let Some(dir) = configured {
        return PathBuf::from(dir);
    }
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from("twta-data")
}

/// Segment endpoints in a unit box for each digit glyph: the classic
/// seven-segment skeleton (top, upper-right, lower-right, bottom,
/// lower-left, upper-left, middle).
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((0.15, 0.05), (0.85, 0.05)), // A: top
    ((0.85, 0.05), (0.85, 0.50)), // B: upper right
    ((0.85, 0.50), (0.85, 0.95)), // C: lower right
    ((0.15, 0.95), (0.85, 0.95)), // D: bottom
    ((0.15, 0.50), (0.15, 0.95)), // E: lower left
    ((0.15, 0.05), (0.15, 0.50)), // F: upper left
    ((0.15, 0.50), (0.85, 0.50)), // G: middle
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 6, 4, 2, 3],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 5, 6],       // 9 (open-bottom form, two segments away from 8)
];

fn point_segment_distance(px: f64, py: f64, (x1, y1): (f64, f64), (x2, y2): (f64, f64)) -> f64 {
    let (dx, dy) = (x2 - x1, y2 - y1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x1) * dx + (py - y1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x1 + t * dx, y1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Render one digit: small positional jitter around a centered placement
/// (matching how scanned digit sets are center-of-mass aligned), varying
/// scale, stroke width, brightness, and light background speckle make
/// samples of a class vary while staying learnable.
fn render_digit(digit: usize, rng: &mut RngStream) -> Vec<u8> {
    let side = IMAGE_SIDE as f64;
    let scale = 16.0 + 6.0 * rng.uniform(); // glyph box 16..22 px
    let max_off = side - scale - 2.0;
    let ox = 1.0 + max_off * rng.uniform();
    let oy = 1.0 + max_off * rng.uniform();
    let stroke = 1.1 + 0.9 * rng.uniform(); // px half-width 1.1..2.0
    let brightness = 0.75 + 0.25 * rng.uniform();
    let mut img = vec![0u8; IMAGE_SIDE * IMAGE_SIDE];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let gx = (x as f64 + 0.5 - ox) / scale;
            let gy = (y as f64 + 0.5 - oy) / scale;
            let mut best = f64::INFINITY;
            for &s in DIGIT_SEGMENTS[digit] {
                let d = point_segment_distance(gx, gy, SEGMENTS[s].0, SEGMENTS[s].1) * scale;
                best = best.min(d);
            }
            // Soft-edged stroke: full intensity inside, 1px falloff.
            let v = (stroke + 1.0 - best).clamp(0.0, 1.0) * brightness;
            img[y * IMAGE_SIDE + x] = (v * 255.0) as u8;
        }
    }
    // Background speckle on ~3% of pixels.
    for p in img.iter_mut() {
        if rng.uniform() < 0.03 {
            let noise = (rng.uniform() * 64.0) as u8;
            *p = p.saturating_add(noise);
        }
    }
    img
}

fn generate_split(per_digit: usize, split_tag: u64) -> (IdxImages, Vec<u8>) {
    let mut pixels = Vec::with_capacity(10 * per_digit * IMAGE_SIDE * IMAGE_SIDE);
    let mut labels = Vec::with_capacity(10 * per_digit);
    // Interleave digits so any prefix of the file is class-balanced.
    for k in 0..per_digit {
        for digit in 0..10u8 {
            let salt = (split_tag << 40) | ((digit as u64) << 24) | k as u64;
            let mut rng = RngStream::with_salt(CORPUS_SEED, StreamLabel::Init, salt);
            pixels.extend_from_slice(&render_digit(digit as usize, &mut rng));
            labels.push(digit);
        }
    }
    (
        IdxImages {
            rows: IMAGE_SIDE,
            cols: IMAGE_SIDE,
            pixels,
        },
        labels,
    )
}

/// Make sure the digit corpus exists in `dir`, generating the four IDX
/// files on first use, then load it back through the regular parser.
pub fn ensure_digit_corpus(dir: &Path) -> Result<DigitCorpus> {
    let paths = [
        dir.join(TRAIN_IMAGES),
        dir.join(TRAIN_LABELS),
        dir.join(TEST_IMAGES),
        dir.join(TEST_LABELS),
    ];
    if paths.iter().any(|p| !p.exists()) {
        let (train_images, train_labels) = generate_split(TRAIN_PER_DIGIT, 1);
        let (test_images, test_labels) = generate_split(TEST_PER_DIGIT, 2);
        crate::error::write_file(&paths[0], &encode_idx_images(&train_images))?;
        crate::error::write_file(&paths[1], &encode_idx_labels(&train_labels))?;
        crate::error::write_file(&paths[2], &encode_idx_images(&test_images))?;
        crate::error::write_file(&paths[3], &encode_idx_labels(&test_labels))?;
    }
    let (train_images, train_labels) = ingest_idx(&paths[0], &paths[1])?;
    let (test_images, test_labels) = ingest_idx(&paths[2], &paths[3])?;
    Ok(DigitCorpus {
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

#[derive(Debug, Clone)]
pub struct DigitCorpus {
    pub train_images: IdxImages,
    pub train_labels: Vec<u8>,
    pub test_images: IdxImages,
    pub test_labels: Vec<u8>,
}

impl DigitCorpus {
    /// Pooled 9:1-style re-split: shuffle the union of both splits with a
    /// seed-fixed permutation and cut at `fraction`.
    pub fn resplit(&self, fraction: f64, seed: u64) -> Result<DigitCorpus> {
        if !(0.0 < fraction && fraction < 1.0) {
            return Err(CliError::User(format!(
                "resplit fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let stride = IMAGE_SIDE * IMAGE_SIDE;
        let total = self.train_labels.len() + self.test_labels.len();
        let image_at = |i: usize| -> &[u8] {
            if i < self.train_labels.len() {
                self.train_images.image(i)
            } else {
                self.test_images.image(i - self.train_labels.len())
            }
        };
        let label_at = |i: usize| -> u8 {
            if i < self.train_labels.len() {
                self.train_labels[i]
            } else {
                self.test_labels[i - self.train_labels.len()]
            }
        };
        let mut rng = RngStream::with_salt(seed, StreamLabel::Shuffle, 0x5253_504c); // "RSPL"
        let order = rng.permutation(total);
        let cut = ((total as f64) * fraction).round() as usize;
        let build = |indices: &[usize]| -> (IdxImages, Vec<u8>) {
            let mut pixels = Vec::with_capacity(indices.len() * stride);
            let mut labels = Vec::with_capacity(indices.len());
            for &i in indices {
                pixels.extend_from_slice(image_at(i));
                labels.push(label_at(i));
            }
            (
                IdxImages {
                    rows: IMAGE_SIDE,
                    cols: IMAGE_SIDE,
                    pixels,
                },
                labels,
            )
        };
        let (train_images, train_labels) = build(&order[..cut]);
        let (test_images, test_labels) = build(&order[cut..]);
        Ok(DigitCorpus {
            train_images,
            train_labels,
            test_images,
            test_labels,
        })
    }
}

/// Pick `count` examples of the given classes from a split, round-robin
/// over the classes in corpus order, apply a pixel permutation, and scale
/// to [0, 1]. Labels keep their global values.
fn permuted_subset(
    images: &IdxImages,
    labels: &[u8],
    classes: &[usize],
    count: usize,
    perm: &[usize],
    what: &str,
) -> Result<Dataset> {
    let stride = images.rows * images.cols;
    let mut pools: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| {
            labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l as usize == c)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    for pool in pools.iter_mut() {
        pool.reverse(); // pop() then yields corpus order
    }
    let mut picked = Vec::with_capacity(count);
    let mut c = 0usize;
    let mut exhausted = 0usize;
    while picked.len() < count && exhausted < classes.len() {
        match pools[c % classes.len()].pop() {
            Some(i) => {
                picked.push((i, classes[c % classes.len()]));
                exhausted = 0;
            }
            None => exhausted += 1,
        }
        c += 1;
    }
    if picked.len() < count {
        return Err(CliError::User(format!(
            "{what}: requested {count} examples of classes {classes:?}, corpus only has {}",
            picked.len()
        )));
    }
    let mut data = Vec::with_capacity(count * stride);
    let mut out_labels = Vec::with_capacity(count);
    for (i, label) in picked {
        let img = images.image(i);
        for &p in perm {
            data.push(img[p] as f32 / 255.0);
        }
        out_labels.push(label);
    }
    Ok(Dataset::new(
        Tensor::from_vec(vec![count, stride], data).map_err(CliError::from)?,
        out_labels,
    )?)
}

/// Permuted-image class-incremental stream: task `t` owns global classes
/// `t*cpt .. (t+1)*cpt` and sees every image through a fixed pixel
/// permutation (`out[i] = img[perm[i]]`). Task 0 uses the identity
/// permutation; later tasks draw theirs from `(seed, Permute, task)`.
pub fn gen_pmnist(
    corpus: &DigitCorpus,
    tasks: usize,
    classes_per_task: usize,
    train_per_task: usize,
    test_per_task: usize,
    seed: u64,
) -> Result<TaskStream> {
    if tasks == 0 || classes_per_task == 0 {
        return Err(CliError::User(
            "pmnist needs at least one task and one class per task".into(),
        ));
    }
    if tasks * classes_per_task > 10 {
        return Err(CliError::User(format!(
            "pmnist over the 10-digit corpus cannot supply {tasks} tasks x {classes_per_task} \
             classes"
        )));
    }
    let side = corpus.train_images.rows * corpus.train_images.cols;
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let perm: Vec<usize> = if t == 0 {
            (0..side).collect()
        } else {
            RngStream::with_salt(seed, StreamLabel::Permute, t as u64).permutation(side)
        };
        let classes: Vec<usize> = (t * classes_per_task..(t + 1) * classes_per_task).collect();
        let train = permuted_subset(
            &corpus.train_images,
            &corpus.train_labels,
            &classes,
            train_per_task,
            &perm,
            &format!("task {t} train split"),
        )?;
        let test = permuted_subset(
            &corpus.test_images,
            &corpus.test_labels,
            &classes,
            test_per_task,
            &perm,
            &format!("task {t} test split"),
        )?;
        out.push(TaskData {
            id: t,
            classes: classes.into_iter().collect::<BTreeSet<_>>(),
            train,
            test,
        });
    }
    Ok(TaskStream::new(out, tasks * classes_per_task)?)
}

/// Gaussian blobs: class `c` is a unit-covariance cloud centered
/// `separation` away from the origin along axis `c % dim` (stacked further
/// out when classes exceed dims). Classes split contiguously into tasks.
pub fn gen_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    tasks: usize,
    seed: u64,
) -> Result<TaskStream> {
    if separation <= 0.0 {
        return Err(CliError::User(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if classes == 0 || dim == 0 || per_class == 0 || tasks == 0 {
        return Err(CliError::User(
            "synthetic data needs positive classes, dim, per_class, and tasks".into(),
        ));
    }
    if classes % tasks != 0 {
        return Err(CliError::User(format!(
            "{classes} classes do not split evenly into {tasks} tasks"
        )));
    }
    let cpt = classes / tasks;
    let test_per_class = (per_class / 5).max(1);
    let mean = |c: usize| {
        let mut m = vec![0.0f64; dim];
        m[c % dim] = separation * (1.0 + (c / dim) as f64);
        m
    };
    let draw = |c: usize, count: usize, split: u64| -> (Vec<f32>, Vec<usize>) {
        let mut rng =
            RngStream::with_salt(seed, StreamLabel::Init, (split << 32) | c as u64);
        let m = mean(c);
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count {
            for md in m.iter().take(dim) {
                data.push((md + rng.normal()) as f32);
            }
        }
        (data, vec![c; count])
    };
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let class_range: Vec<usize> = (t * cpt..(t + 1) * cpt).collect();
        let build = |count: usize, split: u64| -> Result<Dataset> {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for &c in &class_range {
                let (d, l) = draw(c, count, split);
                data.extend(d);
                labels.extend(l);
            }
            Ok(Dataset::new(
                Tensor::from_vec(vec![labels.len(), dim], data).map_err(CliError::from)?,
                labels,
            )?)
        };
        out.push(TaskData {
            id: t,
            classes: class_range.iter().copied().collect::<BTreeSet<_>>(),
            train: build(per_class, 1)?,
            test: build(test_per_class, 2)?,
        });
    }
    Ok(TaskStream::new(out, classes)?)
}

/// A task stream straight from one IDX pair: labels in `0..classes_per_task
/// * tasks`, sliced contiguously by label into tasks, no permutation.
pub fn stream_from_idx(
    train: (&IdxImages, &[u8]),
    test: (&IdxImages, &[u8]),
    tasks: usize,
    classes_per_task: usize,
    train_per_task: usize,
    test_per_task: usize,
) -> Result<TaskStream> {
    let side = train.0.rows * train.0.cols;
    let identity: Vec<usize> = (0..side).collect();
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let classes: Vec<usize> = (t * classes_per_task..(t + 1) * classes_per_task).collect();
        out.push(TaskData {
            id: t,
            classes: classes.iter().copied().collect::<BTreeSet<_>>(),
            train: permuted_subset(
                train.0,
                train.1,
                &classes,
                train_per_task,
                &identity,
                &format!("task {t} train split"),
            )?,
            test: permuted_subset(
                test.0,
                test.1,
                &classes,
                test_per_task,
                &identity,
                &format!("task {t} test split"),
            )?,
        });
    }
    Ok(TaskStream::new(out, tasks * classes_per_task)?)
}
