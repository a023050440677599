//! Dataset ingestion and preparation: IDX and CIFAR-10 binary parsers,
//! class filtering, balanced subsetting, target encoding, and deterministic
//! train/validation/test splitting.
//!
//! Nothing here touches the network. Parsers read bytes already on disk from
//! paths the caller supplies; the split machinery turns two raw pools (the
//! training pool and the standard test set) into `LabeledActivations` ready
//! for kernels and losses. Splitting filters to the requested classes first,
//! then balances, then draws train and validation sets of equal size from
//! disjoint shuffled per-class pools; the test set is filtered and re-labeled
//! but never balanced. Labels are re-indexed against the sorted class filter,
//! so a {1, 7} filter yields classes {0, 1}. All randomness flows through a
//! seeded ChaCha stream: the same spec on the same pool always selects the
//! same rows.
//!
//! Pixels are scaled to [0, 1] by division with 255 and left otherwise
//! untouched. The synthetic generators (Gaussian blobs and two moons) emit
//! coordinates already inside the unit cube so everything downstream can
//! assume the same range.

use gp_core::LabeledActivations;
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD_LEN: usize = 3073;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad IDX magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("truncated stream: wanted {0} bytes, had {1}")]
    Truncated(usize, usize),
    #[error("dimension overflow in header")]
    DimensionOverflow,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("file length {0} is not a multiple of {1}")]
    BadRecordLength(usize, usize),
    #[error("file holds no records")]
    Empty,
    #[error("label byte {0} out of range")]
    BadLabel(u8),
    #[error("images and labels disagree: {0} vs {1} records")]
    CountMismatch(usize, usize),
    #[error("class {0} has {1} usable samples, {2} needed")]
    InsufficientSamples(usize, usize, usize),
    #[error("train size {0} does not divide evenly over {1} classes")]
    UnevenSplit(usize, usize),
    #[error("split selects no classes")]
    NoClasses,
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Provenance of a raw pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Mnist,
    Cifar10,
    Synthetic,
}

/// A parsed data pool: flat rows in [0, 1] and integer labels.
#[derive(Clone, Debug)]
pub struct RawDataset {
    pub images: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub source: DataSource,
}

impl RawDataset {
    pub fn new(
        images: DMatrix<f64>,
        labels: Vec<usize>,
        source: DataSource,
    ) -> Result<Self, DataError> {
        if images.nrows() != labels.len() {
            return Err(DataError::CountMismatch(images.nrows(), labels.len()));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Invalid("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.ncols()
    }
}

/// Content of one IDX file: a batch of flattened images or a label list.
#[derive(Clone, Debug)]
pub enum IdxContent {
    Images {
        data: DMatrix<f64>,
        height: usize,
        width: usize,
    },
    Labels(Vec<usize>),
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    if at + 4 > bytes.len() {
        return Err(DataError::Truncated(at + 4, bytes.len()));
    }
    Ok(u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()))
}

/// Parses one IDX stream: a big-endian magic (0x803 for images, 0x801 for
/// labels), the dimension sizes, then row-major unsigned bytes. Pixels are
/// scaled to [0, 1].
pub fn parse_idx(bytes: &[u8]) -> Result<IdxContent, DataError> {
    let magic = read_u32_be(bytes, 0)?;
    match magic {
        IDX_IMAGES_MAGIC => {
            let n = read_u32_be(bytes, 4)? as usize;
            let h = read_u32_be(bytes, 8)? as usize;
            let w = read_u32_be(bytes, 12)? as usize;
            let per = h.checked_mul(w).ok_or(DataError::DimensionOverflow)?;
            let total = n.checked_mul(per).ok_or(DataError::DimensionOverflow)?;
            let want = total.checked_add(16).ok_or(DataError::DimensionOverflow)?;
            if bytes.len() < want {
                return Err(DataError::Truncated(want, bytes.len()));
            }
            let pixels = &bytes[16..16 + total];
            let data = DMatrix::from_fn(n, per, |r, c| pixels[r * per + c] as f64 / 255.0);
            Ok(IdxContent::Images {
                data,
                height: h,
                width: w,
            })
        }
        IDX_LABELS_MAGIC => {
            let n = read_u32_be(bytes, 4)? as usize;
            let want = n.checked_add(8).ok_or(DataError::DimensionOverflow)?;
            if bytes.len() < want {
                return Err(DataError::Truncated(want, bytes.len()));
            }
            Ok(IdxContent::Labels(
                bytes[8..8 + n].iter().map(|&b| b as usize).collect(),
            ))
        }
        other => Err(DataError::BadMagic(other)),
    }
}

/// Parses a CIFAR-10 binary batch: records of one label byte followed by
/// 3072 pixel bytes (red, green, blue planes), flattened and scaled.
pub fn parse_cifar10(bytes: &[u8]) -> Result<RawDataset, DataError> {
    if bytes.is_empty() {
        return Err(DataError::Empty);
    }
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(DataError::BadRecordLength(bytes.len(), CIFAR_RECORD_LEN));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let label = bytes[r * CIFAR_RECORD_LEN];
        if label > 9 {
            return Err(DataError::BadLabel(label));
        }
        labels.push(label as usize);
    }
    let images = DMatrix::from_fn(n, CIFAR_RECORD_LEN - 1, |r, c| {
        bytes[r * CIFAR_RECORD_LEN + 1 + c] as f64 / 255.0
    });
    RawDataset::new(images, labels, DataSource::Cifar10)
}

fn load_idx_pair(
    images_path: &Path,
    labels_path: &Path,
    source: DataSource,
) -> Result<RawDataset, DataError> {
    let images = match parse_idx(&std::fs::read(images_path)?)? {
        IdxContent::Images { data, .. } => data,
        IdxContent::Labels(_) => {
            return Err(DataError::Invalid(format!(
                "{} holds labels, expected images",
                images_path.display()
            )))
        }
    };
    let labels = match parse_idx(&std::fs::read(labels_path)?)? {
        IdxContent::Labels(l) => l,
        IdxContent::Images { .. } => {
            return Err(DataError::Invalid(format!(
                "{} holds images, expected labels",
                labels_path.display()
            )))
        }
    };
    if images.nrows() != labels.len() {
        return Err(DataError::CountMismatch(images.nrows(), labels.len()));
    }
    RawDataset::new(images, labels, source)
}

/// Loads the four standard MNIST files from `dir` and returns the
/// (train, test) pools.
pub fn load_mnist(dir: &Path) -> Result<(RawDataset, RawDataset), DataError> {
    let train = load_idx_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        DataSource::Mnist,
    )?;
    let test = load_idx_pair(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        DataSource::Mnist,
    )?;
    Ok((train, test))
}

/// Loads the five CIFAR-10 training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(RawDataset, RawDataset), DataError> {
    let mut images: Option<DMatrix<f64>> = None;
    let mut labels = Vec::new();
    for batch in 1..=5 {
        let part = parse_cifar10(&std::fs::read(dir.join(format!("data_batch_{batch}.bin")))?)?;
        labels.extend_from_slice(&part.labels);
        images = Some(match images {
            None => part.images,
            Some(prev) => {
                let mut joined = DMatrix::zeros(prev.nrows() + part.images.nrows(), prev.ncols());
                joined.rows_mut(0, prev.nrows()).copy_from(&prev);
                joined
                    .rows_mut(prev.nrows(), part.images.nrows())
                    .copy_from(&part.images);
                joined
            }
        });
    }
    let train = RawDataset::new(images.ok_or(DataError::Empty)?, labels, DataSource::Cifar10)?;
    let test = parse_cifar10(&std::fs::read(dir.join("test_batch.bin"))?)?;
    Ok((train, test))
}

/// How integer labels become regression targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetEncoding {
    OneHot,
    ZeroMeanOneHot,
}

/// Recipe for carving train and validation sets out of a raw pool.
///
/// The validation set always matches the training set in size and balance.
/// `classes` filters the pool before anything else; label values are
/// re-indexed against the sorted filter.
#[derive(Clone, Debug, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_size: usize,
    pub classes: Option<Vec<usize>>,
    pub balanced: bool,
    pub seed: u64,
}

/// A finished split. The index vectors name rows of the filtered training
/// pool (in its original order) so selections can be audited.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: LabeledActivations,
    pub val: LabeledActivations,
    pub test: LabeledActivations,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub classes: Vec<usize>,
}

fn filter_classes(raw: &RawDataset, classes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, &l) in raw.labels.iter().enumerate() {
        if let Some(new) = classes.iter().position(|&c| c == l) {
            rows.push(i);
            labels.push(new);
        }
    }
    (rows, labels)
}

fn gather(raw: &RawDataset, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), raw.dim(), |r, c| raw.images[(rows[r], c)])
}

fn encode(
    h: DMatrix<f64>,
    labels: Vec<usize>,
    classes: usize,
    encoding: TargetEncoding,
) -> Result<LabeledActivations, DataError> {
    let made = match encoding {
        TargetEncoding::OneHot => LabeledActivations::one_hot(h, labels, classes),
        TargetEncoding::ZeroMeanOneHot => LabeledActivations::zero_mean_one_hot(h, labels, classes),
    };
    made.map_err(|e| DataError::Invalid(e.to_string()))
}

/// Draws disjoint train and validation sets from the training pool and
/// re-labels the test pool, per the split spec.
///
/// Balanced mode selects `train_size / C` rows per class for each of train
/// and validation from independently shuffled per-class pools; unbalanced
/// mode draws from one shuffled pool. Deterministic in `spec.seed`.
pub fn make_split(
    train_raw: &RawDataset,
    test_raw: &RawDataset,
    spec: &SplitSpec,
    encoding: TargetEncoding,
) -> Result<Split, DataError> {
    let classes: Vec<usize> = match &spec.classes {
        Some(c) => {
            let mut sorted = c.clone();
            sorted.sort_unstable();
            sorted.dedup();
            sorted
        }
        None => {
            let mut all: Vec<usize> = train_raw.labels.clone();
            all.sort_unstable();
            all.dedup();
            all
        }
    };
    if classes.is_empty() {
        return Err(DataError::NoClasses);
    }
    let c = classes.len();
    let (pool_rows, pool_labels) = filter_classes(train_raw, &classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (train_sel, val_sel): (Vec<usize>, Vec<usize>) = if spec.balanced {
        if spec.train_size % c != 0 {
            return Err(DataError::UnevenSplit(spec.train_size, c));
        }
        let per = spec.train_size / c;
        let mut train_sel = Vec::with_capacity(spec.train_size);
        let mut val_sel = Vec::with_capacity(spec.train_size);
        for class in 0..c {
            let mut members: Vec<usize> = pool_labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .map(|(i, _)| i)
                .collect();
            if members.len() < 2 * per {
                return Err(DataError::InsufficientSamples(
                    classes[class],
                    members.len(),
                    2 * per,
                ));
            }
            members.shuffle(&mut rng);
            train_sel.extend_from_slice(&members[..per]);
            val_sel.extend_from_slice(&members[per..2 * per]);
        }
        train_sel.sort_unstable();
        val_sel.sort_unstable();
        (train_sel, val_sel)
    } else {
        if pool_rows.len() < 2 * spec.train_size {
            return Err(DataError::InsufficientSamples(
                usize::MAX,
                pool_rows.len(),
                2 * spec.train_size,
            ));
        }
        let mut order: Vec<usize> = (0..pool_rows.len()).collect();
        order.shuffle(&mut rng);
        let mut train_sel = order[..spec.train_size].to_vec();
        let mut val_sel = order[spec.train_size..2 * spec.train_size].to_vec();
        train_sel.sort_unstable();
        val_sel.sort_unstable();
        (train_sel, val_sel)
    };

    let take = |sel: &[usize]| -> (DMatrix<f64>, Vec<usize>) {
        let rows: Vec<usize> = sel.iter().map(|&i| pool_rows[i]).collect();
        let labels: Vec<usize> = sel.iter().map(|&i| pool_labels[i]).collect();
        (gather(train_raw, &rows), labels)
    };
    let (train_h, train_labels) = take(&train_sel);
    let (val_h, val_labels) = take(&val_sel);

    let (test_rows, test_labels) = filter_classes(test_raw, &classes);
    let test_h = gather(test_raw, &test_rows);

    Ok(Split {
        train: encode(train_h, train_labels, c, encoding)?,
        val: encode(val_h, val_labels, c, encoding)?,
        test: encode(test_h, test_labels, c, encoding)?,
        train_indices: train_sel,
        val_indices: val_sel,
        classes,
    })
}

/// Gaussian class clusters inside the unit cube: class `c` sits at
/// 0.3 everywhere except coordinate `c mod dim`, where it sits at 0.7.
pub fn gaussian_blobs(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> RawDataset {
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_class * classes;
    let mut images = DMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        for row in 0..n_per_class {
            let r = class * n_per_class + row;
            for j in 0..dim {
                let center = if j == class % dim { 0.7 } else { 0.3 };
                let v: f64 = center + noise * rng.sample::<f64, _>(StandardNormal);
                images[(r, j)] = v.clamp(0.0, 1.0);
            }
            labels.push(class);
        }
    }
    RawDataset {
        images,
        labels,
        source: DataSource::Synthetic,
    }
}

/// Two interleaved half-circles mapped into the unit square.
pub fn two_moons(n_per_class: usize, noise: f64, seed: u64) -> RawDataset {
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * n_per_class;
    let mut images = DMatrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2 {
        for row in 0..n_per_class {
            let t = std::f64::consts::PI * row as f64 / (n_per_class.max(2) - 1) as f64;
            let (mut x, mut y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            x += noise * rng.sample::<f64, _>(StandardNormal);
            y += noise * rng.sample::<f64, _>(StandardNormal);
            let r = class * n_per_class + row;
            images[(r, 0)] = ((x + 1.0) / 3.0).clamp(0.0, 1.0);
            images[(r, 1)] = ((y + 0.5) / 1.5).clamp(0.0, 1.0);
            labels.push(class);
        }
    }
    RawDataset {
        images,
        labels,
        source: DataSource::Synthetic,
    }
}
