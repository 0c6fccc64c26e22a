//! MNIST ingestion and per-node data allocation.
//!
//! Non-target classes are spread IID over all nodes. The target class is
//! allocated either *balanced* (every node gets its share, and the shares of
//! the `ceil(p * N)` most central nodes are entirely flagged corrupt) or
//! *unbalanced* (the single most central node holds `ceil(p * n_t)` flagged
//! samples and everyone else splits the clean remainder).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::topology::CentralityRanking;

pub const IMAGE_SIDE: usize = 28;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("inconsistent dataset: {0}")]
    Consistency(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Train,
    Test,
}

/// Grayscale 28x28 images scaled to `[0, 1]` with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pixels: Vec<f32>,
    labels: Vec<u8>,
    source: Source,
}

impl LabeledDataset {
    pub fn new(pixels: Vec<f32>, labels: Vec<u8>, source: Source) -> Result<Self, DatasetError> {
        if pixels.len() != labels.len() * PIXELS {
            return Err(DatasetError::Consistency(format!(
                "{} pixel values for {} labels",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DatasetError::Consistency(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(DatasetError::Consistency(format!(
                "label {bad} outside 0..10"
            )));
        }
        Ok(LabeledDataset {
            pixels,
            labels,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Indices of every sample with label `class`, ascending.
    pub fn indices_of(&self, class: u8) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// New dataset holding the given samples in the given order.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        let mut pixels = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            pixels,
            labels,
            source: self.source,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DatasetError> {
        if self.bytes.len() - self.pos < n {
            return Err(DatasetError::Io {
                path: self.path.display().to_string(),
                source: io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    format!(
                        "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                        self.pos,
                        self.bytes.len()
                    ),
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32, DatasetError> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse_images(bytes: &[u8], path: &Path) -> Result<Vec<f32>, DatasetError> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    let magic = cur.u32_be("magic number")?;
    if magic != IMAGES_MAGIC {
        return Err(DatasetError::Format {
            path: path.display().to_string(),
            msg: format!("expected image magic 0x{IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = cur.u32_be("image count")? as usize;
    let rows = cur.u32_be("row count")? as usize;
    let cols = cur.u32_be("column count")? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(DatasetError::Format {
            path: path.display().to_string(),
            msg: format!("expected 28x28 images, found {rows}x{cols}"),
        });
    }
    let data = cur.take(count * PIXELS, "pixel data")?;
    Ok(data.iter().map(|&b| b as f32 / 255.0).collect())
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DatasetError> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    let magic = cur.u32_be("magic number")?;
    if magic != LABELS_MAGIC {
        return Err(DatasetError::Format {
            path: path.display().to_string(),
            msg: format!("expected label magic 0x{LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = cur.u32_be("label count")? as usize;
    let labels = cur.take(count, "label data")?.to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(DatasetError::Format {
            path: path.display().to_string(),
            msg: format!("label {bad} outside 0..10"),
        });
    }
    Ok(labels)
}

/// Reads an IDX image file and its matching IDX label file.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    source: Source,
) -> Result<LabeledDataset, DatasetError> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let pixels = parse_images(&read_file(images_path)?, images_path)?;
    let labels = parse_labels(&read_file(labels_path)?, labels_path)?;
    if pixels.len() / PIXELS != labels.len() {
        return Err(DatasetError::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            pixels.len() / PIXELS,
            labels_path.display(),
            labels.len()
        )));
    }
    Ok(LabeledDataset {
        pixels,
        labels,
        source,
    })
}

/// Writes `ds` as an IDX image/label pair. Pixels are quantized to bytes.
pub fn write_idx(
    ds: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> io::Result<()> {
    let n = ds.len() as u32;
    let mut images = Vec::with_capacity(16 + ds.pixels.len());
    for word in [IMAGES_MAGIC, n, IMAGE_SIDE as u32, IMAGE_SIDE as u32] {
        images.extend_from_slice(&word.to_be_bytes());
    }
    images.extend(
        ds.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut labels = Vec::with_capacity(8 + ds.labels.len());
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend_from_slice(&ds.labels);
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)
}

/// Keeps `round(fraction * n_c)` randomly chosen samples of every class `c`.
///
/// Selected samples keep their original relative order.
pub fn stratified_subset<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    fraction: f64,
    rng: &mut R,
) -> Result<LabeledDataset, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::Parameter(format!(
            "subset fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(ds.clone());
    }
    let mut keep = Vec::new();
    for class in 0..NUM_CLASSES as u8 {
        let mut idx = ds.indices_of(class);
        idx.shuffle(rng);
        let k = (idx.len() as f64 * fraction).round() as usize;
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    Ok(ds.select(&keep))
}

/// `ceil(p * n)` that ignores floating-point noise on exact products.
pub fn ceil_fraction(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// How the corrupted target-class samples are placed on the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationScheme {
    Balanced,
    Unbalanced,
}

/// One node's local data.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeData {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Indices (into the training dataset) flagged for corruption.
    pub corrupt: BTreeSet<usize>,
}

impl NodeData {
    pub fn holds_corrupt(&self) -> bool {
        !self.corrupt.is_empty()
    }

    pub fn local_len(&self) -> usize {
        self.train.len() + self.val.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FederatedAssignment {
    pub nodes: Vec<NodeData>,
    pub target_class: u8,
    pub scheme: AllocationScheme,
}

impl FederatedAssignment {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn corrupt_count(&self) -> usize {
        self.nodes.iter().map(|n| n.corrupt.len()).sum()
    }

    /// Checks the partition, disjointness and flag invariants against `ds`.
    pub fn validate(&self, ds: &LabeledDataset) -> Result<(), DatasetError> {
        let mut owner = vec![usize::MAX; ds.len()];
        for (node, data) in self.nodes.iter().enumerate() {
            for &i in data.train.iter().chain(&data.val) {
                if i >= ds.len() {
                    return Err(DatasetError::Consistency(format!(
                        "node {node} holds index {i} beyond dataset size {}",
                        ds.len()
                    )));
                }
                if owner[i] != usize::MAX {
                    return Err(DatasetError::Consistency(format!(
                        "index {i} held by nodes {} and {node}",
                        owner[i]
                    )));
                }
                owner[i] = node;
            }
            for &i in &data.corrupt {
                if i >= ds.len() || owner[i] != node {
                    return Err(DatasetError::Consistency(format!(
                        "node {node} flags index {i} it does not hold"
                    )));
                }
                if ds.label(i) != self.target_class {
                    return Err(DatasetError::Consistency(format!(
                        "index {i} flagged corrupt but labelled {}",
                        ds.label(i)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Audit manifest: `node_id,index,split,corrupt_flag`, one row per sample.
    pub fn to_manifest_csv(&self) -> String {
        let mut out = String::from("node_id,index,split,corrupt_flag\n");
        for (node, data) in self.nodes.iter().enumerate() {
            let mut rows: Vec<(usize, &str)> = data
                .train
                .iter()
                .map(|&i| (i, "train"))
                .chain(data.val.iter().map(|&i| (i, "val")))
                .collect();
            rows.sort_unstable();
            for (i, split) in rows {
                let flag = u8::from(data.corrupt.contains(&i));
                writeln!(out, "{node},{i},{split},{flag}").unwrap();
            }
        }
        out
    }
}

/// Split `items` into `n` consecutive chunks whose sizes differ by at most
/// one, extra items going to the lowest chunk ids.
fn even_chunks(items: &[usize], n: usize) -> Vec<&[usize]> {
    let base = items.len() / n;
    let rem = items.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for k in 0..n {
        let len = base + usize::from(k < rem);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

/// IID allocation of every class except `target_class`.
pub fn assign_iid_nontarget<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    n_nodes: usize,
    target_class: u8,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, DatasetError> {
    if n_nodes == 0 {
        return Err(DatasetError::Parameter("need at least one node".into()));
    }
    let mut per_node = vec![Vec::new(); n_nodes];
    for class in (0..NUM_CLASSES as u8).filter(|&c| c != target_class) {
        let mut idx = ds.indices_of(class);
        if idx.len() < n_nodes {
            log::warn!(
                "class {class} has {} samples for {n_nodes} nodes; some nodes get none",
                idx.len()
            );
        }
        idx.shuffle(rng);
        for (node, chunk) in even_chunks(&idx, n_nodes).into_iter().enumerate() {
            per_node[node].extend_from_slice(chunk);
        }
    }
    Ok(per_node)
}

/// Target-class samples per node plus the subset flagged corrupt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetAllocation {
    pub per_node: Vec<Vec<usize>>,
    pub corrupt: Vec<BTreeSet<usize>>,
}

fn check_fraction(p: f64) -> Result<(), DatasetError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DatasetError::Parameter(format!(
            "fraction p must lie in [0, 1], got {p}"
        )));
    }
    Ok(())
}

/// Every node gets an even share of the target class; the shares of the
/// `ceil(p * N)` highest-ranked nodes are flagged corrupt in full.
pub fn assign_target_balanced<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    ranking: &CentralityRanking,
    target_class: u8,
    p: f64,
    rng: &mut R,
) -> Result<TargetAllocation, DatasetError> {
    check_fraction(p)?;
    let n = ranking.len();
    if n == 0 {
        return Err(DatasetError::Parameter("ranking covers no nodes".into()));
    }
    let mut idx = ds.indices_of(target_class);
    idx.shuffle(rng);
    let per_node: Vec<Vec<usize>> = even_chunks(&idx, n)
        .into_iter()
        .map(<[usize]>::to_vec)
        .collect();
    let mut corrupt = vec![BTreeSet::new(); n];
    for &node in &ranking.ordered()[..ceil_fraction(p, n)] {
        corrupt[node] = per_node[node].iter().copied().collect();
    }
    Ok(TargetAllocation { per_node, corrupt })
}

/// The top-ranked node receives `ceil(p * n_t)` target samples, all flagged
/// corrupt and no clean ones; the other nodes split the rest evenly.
pub fn assign_target_unbalanced<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    ranking: &CentralityRanking,
    target_class: u8,
    p: f64,
    rng: &mut R,
) -> Result<TargetAllocation, DatasetError> {
    check_fraction(p)?;
    let n = ranking.len();
    if n < 2 {
        return Err(DatasetError::Parameter(
            "unbalanced allocation needs at least two nodes".into(),
        ));
    }
    let mut idx = ds.indices_of(target_class);
    idx.shuffle(rng);
    let hub = ranking.top();
    let bad = ceil_fraction(p, idx.len());
    let (hub_share, rest) = idx.split_at(bad);
    let others: Vec<usize> = (0..n).filter(|&v| v != hub).collect();
    let mut per_node = vec![Vec::new(); n];
    per_node[hub] = hub_share.to_vec();
    for (&node, chunk) in others.iter().zip(even_chunks(rest, n - 1)) {
        per_node[node] = chunk.to_vec();
    }
    let mut corrupt = vec![BTreeSet::new(); n];
    corrupt[hub] = hub_share.iter().copied().collect();
    Ok(TargetAllocation { per_node, corrupt })
}

/// Full allocation: IID non-target classes plus the chosen target scheme.
/// Validation indices are left empty; see [`split_validation`].
pub fn build_assignment<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    ranking: &CentralityRanking,
    scheme: AllocationScheme,
    target_class: u8,
    p: f64,
    rng: &mut R,
) -> Result<FederatedAssignment, DatasetError> {
    let n = ranking.len();
    let base = assign_iid_nontarget(ds, n, target_class, rng)?;
    let target = match scheme {
        AllocationScheme::Balanced => assign_target_balanced(ds, ranking, target_class, p, rng)?,
        AllocationScheme::Unbalanced => {
            assign_target_unbalanced(ds, ranking, target_class, p, rng)?
        }
    };
    let nodes = base
        .into_iter()
        .zip(target.per_node)
        .zip(target.corrupt)
        .map(|((mut train, t), corrupt)| {
            train.extend(t);
            train.sort_unstable();
            NodeData {
                train,
                val: Vec::new(),
                corrupt,
            }
        })
        .collect();
    Ok(FederatedAssignment {
        nodes,
        target_class,
        scheme,
    })
}

/// Moves a stratified `val_fraction` of each node's samples into its
/// validation split.
///
/// Classes with fewer than two local samples stay entirely in train. The
/// node-level validation total is `round(val_fraction * eligible)`, spread
/// over classes by largest remainder, and each class keeps at least one
/// training sample.
pub fn split_validation<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    assignment: &FederatedAssignment,
    val_fraction: f64,
    rng: &mut R,
) -> Result<FederatedAssignment, DatasetError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DatasetError::Parameter(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let mut out = assignment.clone();
    for node in out.nodes.iter_mut() {
        let mut local: Vec<usize> = node.train.iter().chain(&node.val).copied().collect();
        local.sort_unstable();
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
        for &i in &local {
            by_class[ds.label(i) as usize].push(i);
        }
        let quotas = val_quotas(&by_class, val_fraction);
        let mut train = Vec::with_capacity(local.len());
        let mut val = Vec::new();
        for (mut members, q) in by_class.into_iter().zip(quotas) {
            members.shuffle(rng);
            val.extend_from_slice(&members[..q]);
            train.extend_from_slice(&members[q..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        node.train = train;
        node.val = val;
    }
    Ok(out)
}

fn val_quotas(by_class: &[Vec<usize>], f: f64) -> Vec<usize> {
    let eligible: usize = by_class.iter().map(Vec::len).filter(|&k| k >= 2).sum();
    let total = (eligible as f64 * f).round() as usize;
    let mut quotas = vec![0usize; by_class.len()];
    let mut remainders = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        let k = members.len();
        if k < 2 {
            continue;
        }
        let exact = k as f64 * f;
        quotas[c] = (exact.floor() as usize).min(k - 1);
        remainders.push((exact - exact.floor(), c));
    }
    // largest remainder first, ties to the lowest class id
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut assigned: usize = quotas.iter().sum();
    for &(_, c) in remainders.iter().cycle().take(remainders.len() * 2) {
        if assigned >= total {
            break;
        }
        if quotas[c] < by_class[c].len() - 1 {
            quotas[c] += 1;
            assigned += 1;
        }
    }
    quotas
}
