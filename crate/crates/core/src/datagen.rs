//! Synthetic datasets, IDX loading and non-i.i.d. sharding across agents.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

const MAX_LABEL_RESAMPLES: usize = 1000;
const MIN_WRITER_SAMPLES: usize = 4;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Dimension {
                what: "dataset features",
                expected: dim * labels.len(),
                got: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!("label {bad} >= class count {n_classes}")));
        }
        if features.iter().any(|x| x.is_nan()) {
            return Err(Error::invalid("dataset contains NaN features"));
        }
        Ok(Self {
            features,
            dim,
            labels,
            n_classes,
        })
    }

    pub fn empty(dim: usize, n_classes: usize) -> Self {
        Self {
            features: Vec::new(),
            dim,
            labels: Vec::new(),
            n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Self {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// `label,x0,x1,...` with a header row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "label")?;
        for k in 0..self.dim {
            write!(out, ",x{k}")?;
        }
        writeln!(out)?;
        for i in 0..self.len() {
            write!(out, "{}", self.labels[i])?;
            for x in self.row(i) {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Balanced isotropic Gaussian mixture. Class means are random directions
/// scaled to radius `sep`; noise has unit variance per coordinate. Samples
/// are ordered class by class.
pub fn gaussian_mixture(classes: usize, dim: usize, per_class: usize, sep: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
    }
    if dim < 2 {
        return Err(Error::invalid(format!("need feature dimension >= 2, got {dim}")));
    }
    if sep.is_nan() || sep <= 0.0 {
        return Err(Error::invalid(format!("separation must be positive, got {sep}")));
    }
    if per_class == 0 {
        return Err(Error::invalid("per_class must be positive"));
    }
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.iter_mut().for_each(|x| *x *= sep / norm);
        means.push(v);
    }
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            features.extend(mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    Dataset::new(features, dim, labels, classes)
}

/// One agent's local data.
#[derive(Debug, Clone)]
pub struct Shard {
    pub train: Dataset,
    pub test: Dataset,
    /// Source-dataset indices of the training samples.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Assigned classes (label skew) or writer ids (feature skew).
    pub groups: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ShardAssignment {
    pub shards: Vec<Shard>,
}

impl ShardAssignment {
    pub fn n_agents(&self) -> usize {
        self.shards.len()
    }

    /// Dumps every shard as CSV tables (`agent<i>_train.csv`, `agent<i>_test.csv`).
    pub fn write_csv_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, s) in self.shards.iter().enumerate() {
            let f = std::fs::File::create(dir.join(format!("agent{i}_train.csv")))?;
            s.train.write_csv(std::io::BufWriter::new(f))?;
            let f = std::fs::File::create(dir.join(format!("agent{i}_test.csv")))?;
            s.test.write_csv(std::io::BufWriter::new(f))?;
        }
        Ok(())
    }
}

/// Splits `items` as evenly as possible among `holders` (sorted agent ids);
/// the first `len % holders` holders get one extra item.
fn split_even(items: &[usize], holders: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let h = holders.len();
    let base = items.len() / h;
    let extra = items.len() % h;
    let mut start = 0;
    holders
        .iter()
        .enumerate()
        .map(|(k, &agent)| {
            let take = base + usize::from(k < extra);
            let part = items[start..start + take].to_vec();
            start += take;
            (agent, part)
        })
        .collect()
}

fn test_count(n: usize, test_frac: f64) -> usize {
    ((n as f64) * test_frac).round() as usize
}

fn check_frac(test_frac: f64) -> Result<()> {
    if !(0.0..1.0).contains(&test_frac) {
        return Err(Error::invalid(format!(
            "test fraction must be in [0, 1), got {test_frac}"
        )));
    }
    Ok(())
}

/// Label-distribution skew. Each agent draws `labels_per_agent` distinct
/// classes; the samples of each class are held out for test at `test_frac`
/// and the rest split evenly among the agents holding that class.
pub fn partition_label_skew(
    data: &Dataset,
    n_agents: usize,
    labels_per_agent: usize,
    test_frac: f64,
    seed: u64,
) -> Result<ShardAssignment> {
    let classes = data.n_classes();
    if labels_per_agent == 0 || labels_per_agent > classes {
        return Err(Error::invalid(format!(
            "labels per agent must be in 1..={classes}, got {labels_per_agent}"
        )));
    }
    if n_agents == 0 {
        return Err(Error::invalid("need at least one agent"));
    }
    check_frac(test_frac)?;
    let mut rng = stream_rng(seed, Stream::Partition, 0);
    let all: Vec<usize> = (0..classes).collect();
    let mut label_sets = None;
    for _ in 0..MAX_LABEL_RESAMPLES {
        let sets: Vec<Vec<usize>> = (0..n_agents)
            .map(|_| {
                let mut s: Vec<usize> = all.choose_multiple(&mut rng, labels_per_agent).copied().collect();
                s.sort_unstable();
                s
            })
            .collect();
        let covered: BTreeSet<usize> = sets.iter().flatten().copied().collect();
        if covered.len() == classes {
            label_sets = Some(sets);
            break;
        }
    }
    let label_sets = label_sets.ok_or_else(|| {
        Error::invalid(format!(
            "could not cover all {classes} classes with {n_agents} agents x {labels_per_agent} labels"
        ))
    })?;

    let mut train_idx = vec![Vec::new(); n_agents];
    let mut test_idx = vec![Vec::new(); n_agents];
    for class in 0..classes {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.label(i) == class).collect();
        members.shuffle(&mut rng);
        let holders: Vec<usize> = (0..n_agents).filter(|&a| label_sets[a].contains(&class)).collect();
        let n_test = test_count(members.len(), test_frac);
        let (test, train) = members.split_at(n_test);
        for (agent, part) in split_even(train, &holders) {
            train_idx[agent].extend(part);
        }
        for (agent, part) in split_even(test, &holders) {
            test_idx[agent].extend(part);
        }
    }
    let shards = (0..n_agents)
        .map(|a| {
            train_idx[a].sort_unstable();
            test_idx[a].sort_unstable();
            Shard {
                train: data.subset(&train_idx[a]),
                test: data.subset(&test_idx[a]),
                train_indices: train_idx[a].clone(),
                test_indices: test_idx[a].clone(),
                groups: label_sets[a].clone(),
            }
        })
        .collect();
    Ok(ShardAssignment { shards })
}

/// Fixed affine map `x -> scale ⊙ (R x) + shift` standing in for one writer's style.
#[derive(Debug, Clone)]
pub struct WriterTransform {
    rotation: DMatrix<f64>,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

impl WriterTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation: DMatrix::identity(dim, dim),
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }

    /// Random orthogonal rotation (QR of a Gaussian matrix, sign-fixed),
    /// per-coordinate scale in `[0.5, 2]` and a standard normal shift.
    pub fn random(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..dim {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        Self {
            rotation: q,
            scale: (0..dim).map(|_| rng.random_range(0.5..=2.0)).collect(),
            shift: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let dim = self.scale.len();
        (0..dim)
            .map(|r| {
                let rx: f64 = (0..dim).map(|c| self.rotation[(r, c)] * x[c]).sum();
                self.scale[r] * rx + self.shift[r]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureSkew {
    pub n_agents: usize,
    pub writers_per_agent: usize,
    pub n_writers: usize,
    pub test_frac: f64,
    /// Use identity transforms (degenerate, i.i.d. shards).
    pub identity_writers: bool,
}

/// Feature-distribution skew. The base set is shuffled and cut into
/// `n_writers` disjoint blocks, each passed through its writer's transform.
/// Writers are dealt to agents from a random permutation, cycling when
/// `n_agents * writers_per_agent > n_writers`; a writer held by several
/// agents has its block split evenly among them. Each agent's portion of a
/// block is split into train and test.
pub fn partition_feature_skew(base: &Dataset, cfg: FeatureSkew, seed: u64) -> Result<ShardAssignment> {
    let FeatureSkew {
        n_agents,
        writers_per_agent,
        n_writers,
        test_frac,
        identity_writers,
    } = cfg;
    if n_agents == 0 || n_writers == 0 {
        return Err(Error::invalid("need at least one agent and one writer"));
    }
    if writers_per_agent == 0 || writers_per_agent > n_writers {
        return Err(Error::invalid(format!(
            "writers per agent must be in 1..={n_writers}, got {writers_per_agent}"
        )));
    }
    check_frac(test_frac)?;
    if base.len() < n_writers * MIN_WRITER_SAMPLES {
        return Err(Error::invalid(format!(
            "{} samples cannot give {n_writers} writers at least {MIN_WRITER_SAMPLES} each",
            base.len()
        )));
    }
    let mut rng = stream_rng(seed, Stream::Writers, 0);
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.shuffle(&mut rng);
    let writer_ids: Vec<usize> = (0..n_writers).collect();
    let blocks = split_even(&order, &writer_ids);
    let transforms: Vec<WriterTransform> = (0..n_writers)
        .map(|_| {
            if identity_writers {
                WriterTransform::identity(base.dim())
            } else {
                WriterTransform::random(base.dim(), &mut rng)
            }
        })
        .collect();

    let mut perm = writer_ids.clone();
    perm.shuffle(&mut rng);
    let assigned: Vec<Vec<usize>> = (0..n_agents)
        .map(|a| {
            let mut w: Vec<usize> = (0..writers_per_agent)
                .map(|t| perm[(a * writers_per_agent + t) % n_writers])
                .collect();
            w.sort_unstable();
            w.dedup();
            w
        })
        .collect();

    // Transformed copy of the base set; each sample belongs to exactly one writer.
    let mut features = vec![0.0; base.len() * base.dim()];
    for (w, block) in &blocks {
        for &i in block {
            let x = transforms[*w].apply(base.row(i));
            features[i * base.dim()..(i + 1) * base.dim()].copy_from_slice(&x);
        }
    }
    let transformed = Dataset::new(features, base.dim(), base.labels.clone(), base.n_classes())?;

    let mut train_idx = vec![Vec::new(); n_agents];
    let mut test_idx = vec![Vec::new(); n_agents];
    for (w, block) in &blocks {
        let holders: Vec<usize> = (0..n_agents).filter(|&a| assigned[a].contains(w)).collect();
        if holders.is_empty() {
            continue;
        }
        for (agent, part) in split_even(block, &holders) {
            let n_test = test_count(part.len(), test_frac);
            let (train, test) = part.split_at(part.len() - n_test);
            train_idx[agent].extend_from_slice(train);
            test_idx[agent].extend_from_slice(test);
        }
    }
    let shards = (0..n_agents)
        .map(|a| {
            train_idx[a].sort_unstable();
            test_idx[a].sort_unstable();
            Shard {
                train: transformed.subset(&train_idx[a]),
                test: transformed.subset(&test_idx[a]),
                train_indices: train_idx[a].clone(),
                test_indices: test_idx[a].clone(),
                groups: assigned[a].clone(),
            }
        })
        .collect();
    Ok(ShardAssignment { shards })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parses an IDX image/label pair already in memory. Pixels are scaled by
/// 1/255 and each image flattened row-major.
pub fn parse_idx(images: &[u8], labels: &[u8], images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    if images.len() < 16 {
        return Err(Error::IdxTruncated {
            path: images_path.to_path_buf(),
            got: images.len(),
            expected: 16,
        });
    }
    if labels.len() < 8 {
        return Err(Error::IdxTruncated {
            path: labels_path.to_path_buf(),
            got: labels.len(),
            expected: 8,
        });
    }
    let magic = be_u32(images, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            path: images_path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let magic = be_u32(labels, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            path: labels_path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let count = be_u32(images, 4) as usize;
    let rows = be_u32(images, 8) as usize;
    let cols = be_u32(images, 12) as usize;
    let label_count = be_u32(labels, 4) as usize;
    if count != label_count {
        return Err(Error::IdxCountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let dim = rows * cols;
    let expected = 16 + count * dim;
    if images.len() < expected {
        return Err(Error::IdxTruncated {
            path: images_path.to_path_buf(),
            got: images.len(),
            expected,
        });
    }
    if labels.len() < 8 + count {
        return Err(Error::IdxTruncated {
            path: labels_path.to_path_buf(),
            got: labels.len(),
            expected: 8 + count,
        });
    }
    let features = images[16..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = labels[8..8 + count].iter().map(|&b| usize::from(b)).collect();
    let n_classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(features, dim, labels, n_classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels, images_path, labels_path)
}
