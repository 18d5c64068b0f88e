//! Datasets and client partitioning.
//!
//! Base data comes from IDX files (MNIST) or from seeded synthetic
//! generators. [`build_scenario`] splits a base set across `K` clients,
//! assigns each client a ground-truth distribution group and applies that
//! group's transformation (label swap or image rotation).

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FlicError, Result};
use crate::model::{Samples, Targets};

/// An IDX tensor of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX stream holding unsigned bytes (type code `0x08`).
///
/// Layout: two zero bytes, the type byte, the dimension count, one
/// big-endian `u32` per dimension, then the payload in row-major order.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(FlicError::Format(format!("stream of {} bytes is too short for an IDX header", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(FlicError::Format(format!("bad magic prefix {:02x} {:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(FlicError::Format(format!("unsupported element type 0x{:02x} (only unsigned bytes)", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(FlicError::Format("zero dimensions".into()));
    }
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(FlicError::Length { expected: header_len, actual: bytes.len() });
    }
    let dims: Vec<usize> =
        bytes[4..header_len].chunks_exact(4).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FlicError::Format("dimension product overflows".into()))?;
    let payload = &bytes[header_len..];
    if payload.len() < count {
        return Err(FlicError::Length { expected: header_len + count, actual: bytes.len() });
    }
    Ok(IdxTensor { dims, data: payload[..count].to_vec() })
}

pub fn read_idx(path: &Path) -> Result<IdxTensor> {
    let bytes = fs::read(path).map_err(|e| FlicError::io(path, e))?;
    parse_idx(&bytes)
}

/// Rotates a square image counterclockwise by `quarter_turns * 90°`.
pub fn rotate90(image: &ArrayView2<'_, f64>, quarter_turns: u32) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    if h != w {
        return Err(FlicError::Shape { what: "image width (rotation needs a square image)", expected: h, actual: w });
    }
    let mut out = image.to_owned();
    for _ in 0..quarter_turns % 4 {
        out = Array2::from_shape_fn((h, w), |(r, c)| out[[c, w - 1 - r]]);
    }
    Ok(out)
}

/// Exchanges labels `a` and `b` everywhere; other labels are unchanged.
pub fn swap_labels(labels: &[usize], pair: (usize, usize)) -> Result<Vec<usize>> {
    let (a, b) = pair;
    if a == b {
        return Err(FlicError::config(format!("cannot swap label {a} with itself")));
    }
    Ok(labels
        .iter()
        .map(|&l| match l {
            l if l == a => b,
            l if l == b => a,
            l => l,
        })
        .collect())
}

/// A labelled classification base set, optionally image-shaped.
#[derive(Debug, Clone)]
pub struct BaseDataset {
    pub samples: Samples,
    pub num_classes: usize,
    /// Side length when each row is a flattened `side × side` image.
    pub image_side: Option<usize>,
}

impl BaseDataset {
    pub fn input_dim(&self) -> usize {
        self.samples.inputs().ncols()
    }
}

/// Combines IDX image and label tensors; pixels are scaled to `[0, 1]`.
pub fn dataset_from_idx(images: &IdxTensor, labels: &IdxTensor) -> Result<BaseDataset> {
    if images.dims.len() != 3 {
        return Err(FlicError::Format(format!("image file has {} dimensions, expected 3", images.dims.len())));
    }
    if labels.dims.len() != 1 {
        return Err(FlicError::Format(format!("label file has {} dimensions, expected 1", labels.dims.len())));
    }
    let (n, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(FlicError::Shape { what: "label count", expected: n, actual: labels.dims[0] });
    }
    let inputs = Array2::from_shape_vec((n, rows * cols), images.data.iter().map(|&p| p as f64 / 255.0).collect())
        .expect("payload length checked by parse_idx");
    let y: Vec<usize> = labels.data.iter().map(|&l| l as usize).collect();
    let num_classes = y.iter().max().map_or(0, |m| m + 1).max(10);
    Ok(BaseDataset {
        samples: Samples::new(inputs, Targets::Labels(y))?,
        num_classes,
        image_side: (rows == cols).then_some(rows),
    })
}

/// Loads the MNIST training files from `dir`, appending the `t10k` test
/// files when present.
pub fn load_mnist(dir: &Path) -> Result<BaseDataset> {
    let pair = |prefix: &str| -> Result<Option<BaseDataset>> {
        let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
        let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
        if !images.exists() || !labels.exists() {
            return Ok(None);
        }
        dataset_from_idx(&read_idx(&images)?, &read_idx(&labels)?).map(Some)
    };
    let train = pair("train")?.ok_or_else(|| {
        FlicError::config(format!(
            "{} does not contain train-images-idx3-ubyte and train-labels-idx1-ubyte",
            dir.display()
        ))
    })?;
    let Some(test) = pair("t10k")? else {
        return Ok(train);
    };
    let inputs = ndarray::concatenate(Axis(0), &[train.samples.inputs().view(), test.samples.inputs().view()])
        .map_err(|_| FlicError::Format("train and test images differ in size".into()))?;
    let mut labels = train.samples.labels().unwrap_or_default().to_vec();
    labels.extend_from_slice(test.samples.labels().unwrap_or_default());
    Ok(BaseDataset {
        samples: Samples::new(inputs, Targets::Labels(labels))?,
        num_classes: train.num_classes.max(test.num_classes),
        image_side: train.image_side,
    })
}

/// Gaussian class blobs: class means drawn from `N(0, separation²)` per
/// feature, samples from `N(mean, noise²)`. Labels are uniform.
pub fn synthetic_blobs(
    n: usize,
    num_classes: usize,
    feature_dim: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> Result<BaseDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = normal(0.0, separation)?;
    let jitter = normal(0.0, noise)?;
    let means = Array2::from_shape_fn((num_classes, feature_dim), |_| centre.sample(&mut rng));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
    let inputs = Array2::from_shape_fn((n, feature_dim), |(i, j)| means[[labels[i], j]] + jitter.sample(&mut rng));
    Ok(BaseDataset { samples: Samples::new(inputs, Targets::Labels(labels))?, num_classes, image_side: None })
}

/// Image-shaped synthetic classes: one random `side × side` prototype per
/// class with pixels in `[0, 1]`; samples add `N(0, noise²)` pixel noise and
/// clip back to `[0, 1]`.
pub fn synthetic_images(n: usize, num_classes: usize, side: usize, noise: f64, seed: u64) -> Result<BaseDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = normal(0.0, noise)?;
    let pixels = side * side;
    let prototypes = Array2::from_shape_fn((num_classes, pixels), |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
    let inputs = Array2::from_shape_fn((n, pixels), |(i, j)| {
        (prototypes[[labels[i], j]] + jitter.sample(&mut rng)).clamp(0.0, 1.0)
    });
    Ok(BaseDataset { samples: Samples::new(inputs, Targets::Labels(labels))?, num_classes, image_side: Some(side) })
}

fn normal(mean: f64, std: f64) -> Result<Normal<f64>> {
    Normal::new(mean, std).map_err(|e| FlicError::config(format!("invalid normal distribution: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Iid,
    LabelSwap,
    ImageRotation,
    RegressionToy,
    /// IID data; attacker membership is decided by the threat model.
    AttackIid,
}

/// Generator used when no base dataset is supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticSource {
    Blobs { num_classes: usize, feature_dim: usize, separation: f64, noise: f64 },
    Images { num_classes: usize, side: usize, noise: f64 },
}

impl Default for SyntheticSource {
    fn default() -> Self {
        SyntheticSource::Blobs { num_classes: 10, feature_dim: 20, separation: 1.0, noise: 1.0 }
    }
}

/// Per-group linear targets `y = slope_g · x + noise`, `x ~ U(x_range)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionToy {
    pub slopes: Vec<f64>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default = "default_x_range")]
    pub x_range: (f64, f64),
}

fn default_x_range() -> (f64, f64) {
    (-1.0, 1.0)
}

impl Default for RegressionToy {
    fn default() -> Self {
        Self { slopes: vec![20.0, 70.0], noise_std: 0.0, x_range: default_x_range() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub num_groups: usize,
    pub clients: usize,
    pub train_per_client: usize,
    pub test_per_client: usize,
    pub seed: u64,
    pub synthetic: SyntheticSource,
    pub regression: RegressionToy,
}

impl ScenarioSpec {
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if self.clients == 0 {
            return Err(FlicError::config("scenario needs at least one client"));
        }
        if self.num_groups == 0 {
            return Err(FlicError::config("num_groups must be positive"));
        }
        if self.train_per_client == 0 {
            return Err(FlicError::config("train_per_client must be positive"));
        }
        match self.kind {
            ScenarioKind::LabelSwap => {
                if let Some(c) = num_classes {
                    if 2 * self.num_groups > c {
                        return Err(FlicError::config(format!(
                            "label swap with {} groups needs {} classes, dataset has {c}",
                            self.num_groups,
                            2 * self.num_groups
                        )));
                    }
                }
            }
            ScenarioKind::ImageRotation if self.num_groups > 4 => {
                return Err(FlicError::config(format!(
                    "image rotation supports at most 4 groups, got {}",
                    self.num_groups
                )));
            }
            ScenarioKind::RegressionToy if self.regression.slopes.len() != self.num_groups => {
                return Err(FlicError::config(format!(
                    "regression toy has {} slopes for {} groups",
                    self.regression.slopes.len(),
                    self.num_groups
                )));
            }
            _ => {}
        }
        Ok(())
    }

    /// Group count actually used; IID scenarios collapse to one group.
    pub fn effective_groups(&self) -> usize {
        match self.kind {
            ScenarioKind::Iid | ScenarioKind::AttackIid => 1,
            _ => self.num_groups,
        }
    }

    /// Builds the synthetic base set sized for this scenario.
    pub fn synthetic_base(&self) -> Result<BaseDataset> {
        let n = self.clients * (self.train_per_client + self.test_per_client);
        let seed = self.seed ^ 0x5eed_ba5e;
        match &self.synthetic {
            SyntheticSource::Blobs { num_classes, feature_dim, separation, noise } => {
                synthetic_blobs(n, *num_classes, *feature_dim, *separation, *noise, seed)
            }
            SyntheticSource::Images { num_classes, side, noise } => {
                synthetic_images(n, *num_classes, *side, *noise, seed)
            }
        }
    }
}

/// One client's local data and its ground-truth distribution group.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub group_id: usize,
    pub train: Samples,
    pub test: Samples,
    /// Base-set rows behind `train` (empty for generated regression data).
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Group of client `k` out of `clients`, in contiguous balanced blocks.
pub fn group_of(k: usize, clients: usize, groups: usize) -> usize {
    k * groups / clients
}

/// Partitions data across clients and applies each group's transformation.
///
/// Classification scenarios draw from `raw`, or from the scenario's
/// synthetic generator when `raw` is `None`. Group `g` of a label-swap
/// scenario swaps labels `(2g, 2g + 1)`; group `g` of an image-rotation
/// scenario rotates by `g` quarter turns. Train and test data are
/// transformed alike.
pub fn build_scenario(spec: &ScenarioSpec, raw: Option<&BaseDataset>) -> Result<Vec<ClientDataset>> {
    if spec.kind == ScenarioKind::RegressionToy {
        spec.validate(None)?;
        return build_regression(spec);
    }
    let generated;
    let base = match raw {
        Some(b) => b,
        None => {
            generated = spec.synthetic_base()?;
            &generated
        }
    };
    spec.validate(Some(base.num_classes))?;
    if spec.kind == ScenarioKind::ImageRotation && base.image_side.is_none() {
        return Err(FlicError::config("image rotation needs image-shaped data"));
    }
    if spec.test_per_client == 0 {
        return Err(FlicError::config("test_per_client must be positive"));
    }

    let per_client = spec.train_per_client + spec.test_per_client;
    let needed = spec.clients * per_client;
    if base.samples.len() < needed {
        return Err(FlicError::Capacity { needed, available: base.samples.len() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..base.samples.len()).collect();
    order.shuffle(&mut rng);

    let groups = spec.effective_groups();
    (0..spec.clients)
        .map(|k| {
            let slot = &order[k * per_client..(k + 1) * per_client];
            let (train_idx, test_idx) = slot.split_at(spec.train_per_client);
            let group = group_of(k, spec.clients, groups);
            let transform = |s: Samples| apply_group_transform(spec.kind, group, base.image_side, s);
            Ok(ClientDataset {
                client_id: k,
                group_id: group,
                train: transform(base.samples.select(train_idx))?,
                test: transform(base.samples.select(test_idx))?,
                train_indices: train_idx.to_vec(),
                test_indices: test_idx.to_vec(),
            })
        })
        .collect()
}

fn apply_group_transform(kind: ScenarioKind, group: usize, side: Option<usize>, samples: Samples) -> Result<Samples> {
    match kind {
        ScenarioKind::LabelSwap => {
            let labels = samples.labels().unwrap_or_default();
            let swapped = swap_labels(labels, (2 * group, 2 * group + 1))?;
            Samples::new(samples.inputs().clone(), Targets::Labels(swapped))
        }
        ScenarioKind::ImageRotation if group > 0 => {
            let side = side.expect("checked by caller");
            let mut inputs = samples.inputs().clone();
            for mut row in inputs.outer_iter_mut() {
                let image = row
                    .view()
                    .into_shape_with_order((side, side))
                    .map_err(|_| FlicError::Shape { what: "image pixels", expected: side * side, actual: row.len() })?
                    .to_owned();
                let rotated = rotate90(&image.view(), group as u32)?;
                row.assign(&ndarray::ArrayView1::from(rotated.as_slice().expect("standard layout")));
            }
            Samples::new(inputs, samples.targets().clone())
        }
        _ => Ok(samples),
    }
}

fn build_regression(spec: &ScenarioSpec) -> Result<Vec<ClientDataset>> {
    let toy = &spec.regression;
    let (lo, hi) = toy.x_range;
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(FlicError::config("regression x_range must be increasing"));
    }
    let noise = normal(0.0, toy.noise_std)?;
    (0..spec.clients)
        .map(|k| {
            let group = group_of(k, spec.clients, spec.num_groups);
            let slope = toy.slopes[group];
            let mut rng =
                ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut draw = |n: usize| -> Result<Samples> {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
                let y = x
                    .iter()
                    .map(|&v| slope * v + if toy.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 })
                    .collect();
                Samples::new(Array2::from_shape_vec((n, 1), x).expect("n values"), Targets::Values(y))
            };
            Ok(ClientDataset {
                client_id: k,
                group_id: group,
                train: draw(spec.train_per_client)?,
                test: draw(spec.test_per_client)?,
                train_indices: Vec::new(),
                test_indices: Vec::new(),
            })
        })
        .collect()
}
