//! Synthetic datasets, Poisson batch sampling and the flat binary format.
//!
//! All generators are deterministic in their seed. Training content, probe
//! sets, pattern placement and batch sampling draw from separate derived
//! streams (see [`crate::rng`]), so the centralized and distributed pattern
//! datasets built from one seed differ only where the pattern was applied.

use std::io::{Read, Write};

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DpwError, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    Noise,
    PatternCentralized,
    PatternDistributed,
    /// Gaussian class blobs; a learnable control task.
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub mode: DatasetMode,
    /// Record count for `noise` and `blobs`.
    pub n_examples: usize,
    pub users: usize,
    pub records_per_user: usize,
    pub input_rows: usize,
    pub input_cols: usize,
    pub classes: usize,
    /// Patterned record count in distributed mode. Centralized mode patterns
    /// every record of user 0 and ignores this.
    pub pattern_count: usize,
    pub pattern_rows: usize,
    pub pattern_cols: usize,
    pub pattern_value: f64,
    pub pattern_label: usize,
    /// Per-coordinate std of blob samples around their class center.
    pub blob_spread: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            mode: DatasetMode::Noise,
            n_examples: 1000,
            users: 100,
            records_per_user: 10,
            input_rows: 16,
            input_cols: 16,
            classes: 10,
            pattern_count: 100,
            pattern_rows: 8,
            pattern_cols: 8,
            pattern_value: 1.0,
            pattern_label: 1,
            blob_spread: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Full-size user-level setting: 1000 users × 10 records of 28×28 noise, 14×14 patch.
    pub fn full_scale_pattern(mode: DatasetMode, pattern_count: usize, seed: u64) -> Self {
        Self {
            mode,
            users: 1000,
            records_per_user: 10,
            input_rows: 28,
            input_cols: 28,
            pattern_count,
            pattern_rows: 14,
            pattern_cols: 14,
            seed,
            ..Self::default()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_rows * self.input_cols
    }

    pub fn total_records(&self) -> usize {
        match self.mode {
            DatasetMode::Noise | DatasetMode::Blobs => self.n_examples,
            _ => self.users * self.records_per_user,
        }
    }

    pub fn is_pattern(&self) -> bool {
        matches!(
            self.mode,
            DatasetMode::PatternCentralized | DatasetMode::PatternDistributed
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 {
            return Err(DpwError::param("input dims must be positive"));
        }
        if self.classes < 2 {
            return Err(DpwError::param("need at least 2 classes"));
        }
        if self.total_records() == 0 {
            return Err(DpwError::param("dataset must hold at least one record"));
        }
        if self.is_pattern() {
            if self.pattern_rows > self.input_rows || self.pattern_cols > self.input_cols {
                return Err(DpwError::param("pattern patch does not fit the input"));
            }
            if self.pattern_label >= self.classes {
                return Err(DpwError::LabelOutOfRange {
                    label: self.pattern_label,
                    classes: self.classes,
                });
            }
            if self.mode == DatasetMode::PatternDistributed && self.pattern_count > self.total_records() {
                return Err(DpwError::param(format!(
                    "pattern count {} exceeds {} records",
                    self.pattern_count,
                    self.total_records()
                )));
            }
        }
        Ok(())
    }

    /// Sets the top-left patch of one flattened image to the pattern value.
    pub fn apply_pattern(&self, row: &mut [f64]) {
        for r in 0..self.pattern_rows {
            let start = r * self.input_cols;
            row[start..start + self.pattern_cols].fill(self.pattern_value);
        }
    }

    pub fn has_pattern(&self, row: &[f64]) -> bool {
        (0..self.pattern_rows).all(|r| {
            let start = r * self.input_cols;
            row[start..start + self.pattern_cols]
                .iter()
                .all(|&v| v == self.pattern_value)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: usize,
    cols: usize,
    classes: usize,
    inputs: Tensor,
    labels: Vec<usize>,
    patterned: Vec<bool>,
}

impl Dataset {
    pub fn new(rows: usize, cols: usize, classes: usize, inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape() != [labels.len(), rows * cols] {
            return Err(DpwError::ShapeMismatch {
                expected: vec![labels.len(), rows * cols],
                actual: inputs.shape().to_vec(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(DpwError::LabelOutOfRange { label, classes });
        }
        let patterned = vec![false; labels.len()];
        Ok(Self {
            rows,
            cols,
            classes,
            inputs,
            labels,
            patterned,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn input_dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Which records carry an injected pattern.
    pub fn patterned(&self) -> &[bool] {
        &self.patterned
    }

    pub fn patterned_count(&self) -> usize {
        self.patterned.iter().filter(|&&p| p).count()
    }

    /// Gathers the given records into a batch.
    pub fn select(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let dim = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts_unchecked(vec![indices.len(), dim], data), labels)
    }

    fn with_patterned(mut self, patterned: Vec<bool>) -> Self {
        self.patterned = patterned;
        self
    }
}

/// Records grouped by user: user `u` owns records `u·R .. (u+1)·R`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserDataset {
    data: Dataset,
    users: usize,
    records_per_user: usize,
}

impl UserDataset {
    pub fn new(data: Dataset, users: usize, records_per_user: usize) -> Result<Self> {
        if users == 0 || records_per_user == 0 {
            return Err(DpwError::param("users and records per user must be positive"));
        }
        if users * records_per_user != data.len() {
            return Err(DpwError::param(format!(
                "{users} users × {records_per_user} records != {} records (users must be equal-sized)",
                data.len()
            )));
        }
        Ok(Self {
            data,
            users,
            records_per_user,
        })
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn records_per_user(&self) -> usize {
        self.records_per_user
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn user_indices(&self, user: usize) -> std::ops::Range<usize> {
        user * self.records_per_user..(user + 1) * self.records_per_user
    }

    pub fn user_of(&self, record: usize) -> usize {
        record / self.records_per_user
    }

    pub fn user_records(&self, user: usize) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = self.user_indices(user).collect();
        self.data.select(&idx)
    }

    /// The dataset with one user's records dropped.
    pub fn without_user(&self, user: usize) -> Result<UserDataset> {
        if self.users < 2 {
            return Err(DpwError::param("cannot remove the only user"));
        }
        let keep: Vec<usize> = (0..self.data.len())
            .filter(|&i| self.user_of(i) != user)
            .collect();
        let (inputs, labels) = self.data.select(&keep);
        let patterned = keep.iter().map(|&i| self.data.patterned[i]).collect();
        let (rows, cols) = self.data.dims();
        let data = Dataset::new(rows, cols, self.data.classes, inputs, labels)?.with_patterned(patterned);
        UserDataset::new(data, self.users - 1, self.records_per_user)
    }
}

fn uniform_inputs(n: usize, dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n * dim).map(|_| rng.random::<f64>()).collect()
}

/// `n` records of i.i.d. `U[0,1)` pixels with i.i.d. uniform labels.
pub fn gen_noise_dataset(n: usize, dims: (usize, usize), classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(DpwError::EmptyDataset);
    }
    if classes < 2 || dims.0 * dims.1 == 0 {
        return Err(DpwError::param("need positive dims and at least 2 classes"));
    }
    let mut rng = rng::stream(seed, rng::TAG_TRAIN);
    let dim = dims.0 * dims.1;
    let inputs = uniform_inputs(n, dim, &mut rng);
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(dims.0, dims.1, classes, Tensor::from_parts_unchecked(vec![n, dim], inputs), labels)
}

/// Noise records grouped by user with one random label per user and an
/// injected pattern (centralized: all of user 0; distributed: `pattern_count`
/// records drawn without replacement).
pub fn gen_user_pattern_dataset(spec: &DatasetSpec) -> Result<UserDataset> {
    if !spec.is_pattern() {
        return Err(DpwError::param("pattern dataset requested with a non-pattern mode"));
    }
    spec.validate()?;
    let (users, per_user) = (spec.users, spec.records_per_user);
    let n = users * per_user;
    let dim = spec.input_dim();

    let mut rng = rng::stream(spec.seed, rng::TAG_TRAIN);
    let mut inputs = uniform_inputs(n, dim, &mut rng);
    let user_labels: Vec<usize> = (0..users).map(|_| rng.random_range(0..spec.classes)).collect();
    let mut labels: Vec<usize> = (0..n).map(|i| user_labels[i / per_user]).collect();

    let chosen: Vec<usize> = match spec.mode {
        DatasetMode::PatternCentralized => (0..per_user).collect(),
        _ => {
            let mut prng = rng::stream(spec.seed, rng::TAG_PATTERN);
            let mut idx = index::sample(&mut prng, n, spec.pattern_count).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    let mut patterned = vec![false; n];
    for &i in &chosen {
        spec.apply_pattern(&mut inputs[i * dim..(i + 1) * dim]);
        labels[i] = spec.pattern_label;
        patterned[i] = true;
    }

    let data = Dataset::new(
        spec.input_rows,
        spec.input_cols,
        spec.classes,
        Tensor::from_parts_unchecked(vec![n, dim], inputs),
        labels,
    )?
    .with_patterned(patterned);
    UserDataset::new(data, users, per_user)
}

/// `n` fresh noise inputs, all patterned and labeled with the pattern label.
pub fn pattern_probe_set(n: usize, spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(DpwError::EmptyDataset);
    }
    let dim = spec.input_dim();
    let mut rng = rng::stream(seed, rng::TAG_PROBE);
    let mut inputs = uniform_inputs(n, dim, &mut rng);
    for row in inputs.chunks_mut(dim) {
        spec.apply_pattern(row);
    }
    let data = Dataset::new(
        spec.input_rows,
        spec.input_cols,
        spec.classes,
        Tensor::from_parts_unchecked(vec![n, dim], inputs),
        vec![spec.pattern_label; n],
    )?;
    Ok(data.with_patterned(vec![true; n]))
}

/// Gaussian class blobs: class centers `~ N(0, I)` (fixed by the seed),
/// samples `center + spread·N(0, I)`. `tag` selects the sample stream, so
/// train and test sets share centers but not points.
pub fn gen_blobs_dataset(spec: &DatasetSpec, n: usize, tag: &str) -> Result<Dataset> {
    if n == 0 {
        return Err(DpwError::EmptyDataset);
    }
    let dim = spec.input_dim();
    let mut crng = rng::stream(spec.seed, "blob-centers");
    let centers: Vec<f64> = (0..spec.classes * dim)
        .map(|_| crng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut rng = rng::stream(spec.seed, tag);
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..spec.classes);
        labels.push(c);
        for d in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            inputs.push(centers[c * dim + d] + spec.blob_spread * z);
        }
    }
    Dataset::new(
        spec.input_rows,
        spec.input_cols,
        spec.classes,
        Tensor::from_parts_unchecked(vec![n, dim], inputs),
        labels,
    )
}

/// Poisson subsampling: every step includes each index independently with probability `q`.
#[derive(Debug, Clone)]
pub struct PoissonBatches {
    n: usize,
    q: f64,
    rng: Rng,
}

impl Iterator for PoissonBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.q >= 1.0 {
            return Some((0..self.n).collect());
        }
        let q = self.q;
        let rng = &mut self.rng;
        Some((0..self.n).filter(|_| rng.random::<f64>() < q).collect())
    }
}

pub fn poisson_batches(n: usize, q: f64, rng: Rng) -> Result<PoissonBatches> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(DpwError::param(format!("sampling ratio must be in (0, 1], got {q}")));
    }
    Ok(PoissonBatches { n, q, rng })
}

pub const MAGIC: &[u8; 4] = b"DPWD";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 36;

/// Writes the flat binary layout documented in `docs/dataset-format.md`.
pub fn write_dataset<W: Write>(mut w: W, data: &Dataset, users: Option<(usize, usize)>) -> Result<()> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| DpwError::Format(format!("{what} {v} does not fit in u32")))
    };
    let (u, r) = users.unwrap_or((0, 0));
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&to_u32(data.rows, "rows")?.to_le_bytes())?;
    w.write_all(&to_u32(data.cols, "cols")?.to_le_bytes())?;
    w.write_all(&to_u32(data.classes, "classes")?.to_le_bytes())?;
    w.write_all(&to_u32(u, "users")?.to_le_bytes())?;
    w.write_all(&to_u32(r, "records per user")?.to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for v in data.inputs.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    for &y in &data.labels {
        w.write_all(&to_u32(y, "label")?.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a dataset; returns the user grouping when the header carries one.
pub fn read_dataset<R: Read>(mut r: R) -> Result<(Dataset, Option<(usize, usize)>)> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    if &header[0..4] != MAGIC {
        return Err(DpwError::Format("bad magic".into()));
    }
    let word = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap()) as usize;
    if word(4) != FORMAT_VERSION as usize {
        return Err(DpwError::Format(format!("unsupported version {}", word(4))));
    }
    let (rows, cols, classes, users, per_user) = (word(8), word(12), word(16), word(20), word(24));
    let n = u64::from_le_bytes(header[28..36].try_into().unwrap()) as usize;
    let dim = rows * cols;
    let body_len = n
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| DpwError::Format("header sizes overflow".into()))?;

    let mut body = vec![0u8; body_len];
    r.read_exact(&mut body)?;
    let inputs: Vec<f64> = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut lbytes = vec![0u8; n * 4];
    r.read_exact(&mut lbytes)?;
    let labels: Vec<usize> = lbytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();

    let data = Dataset::new(rows, cols, classes, Tensor::new(vec![n, dim], inputs)?, labels)?;
    let grouping = (users > 0).then_some((users, per_user));
    if let Some((u, p)) = grouping {
        if u * p != n {
            return Err(DpwError::Format("user grouping does not match record count".into()));
        }
    }
    Ok((data, grouping))
}
