//! Synthetic long-range classification tasks and external sequence data.
//!
//! Every synthetic sample is a pure function of `(spec, split, index)`: its
//! generator is seeded from those three values alone. Splits are made
//! pairwise disjoint by rejecting any sample already present in an earlier
//! split (train, then validation, then test), so the streams are identical
//! across runs and platforms.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SequenceBatch;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CopyMemory,
    Adding,
    SegmentOrder,
    Csv,
    Jsonl,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::CopyMemory => "copy_memory",
            TaskKind::Adding => "adding",
            TaskKind::SegmentOrder => "segment_order",
            TaskKind::Csv => "csv",
            TaskKind::Jsonl => "jsonl",
        }
    }

    pub fn is_synthetic(self) -> bool {
        !matches!(self, TaskKind::Csv | TaskKind::Jsonl)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "copy_memory" | "copy" => TaskKind::CopyMemory,
            "adding" => TaskKind::Adding,
            "segment_order" => TaskKind::SegmentOrder,
            "csv" => TaskKind::Csv,
            "jsonl" => TaskKind::Jsonl,
            other => {
                return Err(format!(
                    "unknown task `{other}` (copy_memory|adding|segment_order|csv|jsonl)"
                ))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    /// Sequence length.
    pub steps: usize,
    /// Feature width.
    pub dim: usize,
    pub classes: usize,
    /// Dependency gap.
    pub gap: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Frames per motif in `segment_order`.
    pub motif_len: usize,
    /// Files for `csv`/`jsonl`: training data, then optional val and test.
    pub path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl TaskSpec {
    pub fn copy_memory(steps: usize, gap: usize, classes: usize, noise_symbols: usize) -> Self {
        TaskSpec {
            task: TaskKind::CopyMemory,
            steps,
            dim: classes + noise_symbols,
            classes,
            gap,
            n_train: 1000,
            n_val: 200,
            n_test: 500,
            seed: 0,
            motif_len: 3,
            path: None,
            val_path: None,
            test_path: None,
        }
    }

    pub fn adding(steps: usize, gap: usize) -> Self {
        TaskSpec {
            task: TaskKind::Adding,
            dim: 2,
            classes: 2,
            ..Self::copy_memory(steps, gap, 2, 1)
        }
    }

    pub fn segment_order(steps: usize, gap: usize, classes: usize, dim: usize, motif_len: usize) -> Self {
        TaskSpec {
            task: TaskKind::SegmentOrder,
            dim,
            motif_len,
            ..Self::copy_memory(steps, gap, classes, 1)
        }
    }

    pub fn with_counts(mut self, train: usize, val: usize, test: usize) -> Self {
        self.n_train = train;
        self.n_val = val;
        self.n_test = test;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.task.is_synthetic() {
            if self.path.is_none() {
                return Err(Error::config("path", format!("{} task needs a data file", self.task)));
            }
            return Ok(());
        }
        if self.classes < 2 {
            return Err(Error::config("K", "need at least 2 classes"));
        }
        if self.gap >= self.steps {
            return Err(Error::config(
                "G",
                format!("gap {} must be smaller than T = {}", self.gap, self.steps),
            ));
        }
        match self.task {
            TaskKind::CopyMemory => {
                if self.gap == 0 {
                    return Err(Error::config("G", "copy_memory needs G >= 1"));
                }
                if self.dim <= self.classes {
                    return Err(Error::config(
                        "D",
                        format!(
                            "D = {} leaves no noise symbols beyond the {} label symbols",
                            self.dim, self.classes
                        ),
                    ));
                }
            }
            TaskKind::Adding => {
                if self.steps < 4 {
                    return Err(Error::config("T", "adding needs T >= 4"));
                }
                if self.dim != 2 || self.classes != 2 {
                    return Err(Error::config("D", "adding uses D = 2 and K = 2"));
                }
            }
            TaskKind::SegmentOrder => {
                if self.dim < 2 {
                    return Err(Error::config("D", "segment_order needs D >= 2"));
                }
                if self.motif_len == 0 {
                    return Err(Error::config("motif_len", "must be at least 1"));
                }
                let need = 2 * self.motif_len + self.gap;
                if need > self.steps {
                    return Err(Error::config(
                        "T",
                        format!("two motifs of {} plus gap {} need T >= {need}", self.motif_len, self.gap),
                    ));
                }
                let motifs = motif_count(self.classes);
                if motifs > 1usize << (self.dim - 1).min(20) {
                    return Err(Error::config(
                        "D",
                        format!("{motifs} distinct motifs do not fit in {} channels", self.dim),
                    ));
                }
            }
            TaskKind::Csv | TaskKind::Jsonl => unreachable!(),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (train|val|test)")),
        }
    }
}

/// One labelled sequence: `features` holds `len * dim` values row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub len: usize,
    pub label: usize,
}

impl Sample {
    pub fn frame(&self, t: usize, dim: usize) -> &[f64] {
        &self.features[t * dim..(t + 1) * dim]
    }

    fn key(&self) -> (usize, Vec<u64>) {
        (self.label, self.features.iter().map(|v| v.to_bits()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
    /// Label names for external data, indexed by class.
    pub labels: Option<LabelVocab>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Pad the selected samples to their longest length.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<SequenceBatch<T>> {
        let chosen: Vec<&Sample> = indices.iter().map(|&i| &self.samples[i]).collect();
        let steps = chosen.iter().map(|s| s.len).max().unwrap_or(0);
        let mut x = vec![T::zero(); chosen.len() * steps * self.dim];
        for (b, s) in chosen.iter().enumerate() {
            let dst = &mut x[b * steps * self.dim..b * steps * self.dim + s.features.len()];
            for (d, &v) in dst.iter_mut().zip(&s.features) {
                *d = T::lit(v);
            }
        }
        SequenceBatch::new(
            Tensor::new(vec![chosen.len(), steps, self.dim], x)?,
            chosen.iter().map(|s| s.len).collect(),
            chosen.iter().map(|s| s.label).collect(),
        )
    }

    /// Consecutive batches in the given order; the last may be short.
    pub fn batches<T: Real>(&self, order: &[usize], batch_size: usize) -> Result<Vec<SequenceBatch<T>>> {
        order
            .chunks(batch_size.max(1))
            .map(|idx| self.batch(idx))
            .collect()
    }

    pub fn all<T: Real>(&self, batch_size: usize) -> Result<Vec<SequenceBatch<T>>> {
        let order: Vec<usize> = (0..self.len()).collect();
        self.batches(&order, batch_size)
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn sample_seed(seed: u64, split: Split, index: u64) -> u64 {
    // splitmix64 over the three coordinates
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split.stream().wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_rng(spec: &TaskSpec, split: Split, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, split, index))
}

/// Classification form of the copy task: one label symbol at step
/// `T-1-G`, noise symbols from a disjoint alphabet everywhere else. Symbols
/// are one-hot; labels use channels `0..K`, noise uses `K..D`.
pub fn gen_copy_memory(spec: &TaskSpec, split: Split, index: u64) -> Sample {
    let mut rng = sample_rng(spec, split, index);
    let (t, d, k) = (spec.steps, spec.dim, spec.classes);
    let label = rng.gen_range(0..k);
    let planted = t - 1 - spec.gap;
    let mut features = vec![0.0; t * d];
    for step in 0..t {
        let symbol = if step == planted {
            label
        } else {
            k + rng.gen_range(0..d - k)
        };
        features[step * d + symbol] = 1.0;
    }
    Sample {
        features,
        len: t,
        label,
    }
}

/// Binarised adding problem: channel 0 uniform in `[0, 1]`, channel 1 marks
/// two steps at least `G` apart; label is whether the marked values sum
/// above 1.
pub fn gen_adding(spec: &TaskSpec, split: Split, index: u64) -> Sample {
    let mut rng = sample_rng(spec, split, index);
    let t = spec.steps;
    let gap = spec.gap.max(1);
    let a = rng.gen_range(0..t - gap);
    let b = rng.gen_range(a + gap..t);
    let mut features = vec![0.0; t * 2];
    for step in 0..t {
        features[step * 2] = rng.gen::<f64>();
    }
    features[a * 2 + 1] = 1.0;
    features[b * 2 + 1] = 1.0;
    let label = usize::from(features[a * 2] + features[b * 2] > 1.0);
    Sample {
        features,
        len: t,
        label,
    }
}

/// Smallest motif library whose ordered distinct pairs cover `classes`.
pub fn motif_count(classes: usize) -> usize {
    (2..).find(|p| p * (p - 1) >= classes).unwrap()
}

/// Ordered motif pair `(first, second)` of every class, in lexicographic
/// order over distinct pairs.
pub fn segment_pairs(classes: usize) -> Vec<(usize, usize)> {
    let p = motif_count(classes);
    (0..p)
        .flat_map(|a| (0..p).filter(move |&b| b != a).map(move |b| (a, b)))
        .take(classes)
        .collect()
}

/// Motif templates, `motif_len * dim` values each. Channel 0 is a marker
/// fixed at 1; the other channels are ±1 patterns drawn from the task seed,
/// all distinct.
pub fn segment_motifs(spec: &TaskSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, Split::Train, u64::MAX));
    let (l, d) = (spec.motif_len, spec.dim);
    let mut motifs: Vec<Vec<f64>> = Vec::new();
    while motifs.len() < motif_count(spec.classes) {
        let mut m = vec![0.0; l * d];
        for f in 0..l {
            m[f * d] = 1.0;
            for c in 1..d {
                m[f * d + c] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            }
        }
        if !motifs.contains(&m) {
            motifs.push(m);
        }
    }
    motifs
}

/// Motif A, a noise gap of `G` frames, motif B, placed at a random offset
/// inside noise. Noise frames have marker 0 and uniform `[-1, 1]` channels.
pub fn gen_segment_order(spec: &TaskSpec, motifs: &[Vec<f64>], split: Split, index: u64) -> Sample {
    let mut rng = sample_rng(spec, split, index);
    let (t, d, l) = (spec.steps, spec.dim, spec.motif_len);
    let pairs = segment_pairs(spec.classes);
    let label = rng.gen_range(0..spec.classes);
    let (a, b) = pairs[label];
    let span = 2 * l + spec.gap;
    let offset = rng.gen_range(0..=t - span);
    let mut features = vec![0.0; t * d];
    for step in 0..t {
        for c in 1..d {
            features[step * d + c] = rng.gen_range(-1.0..=1.0);
        }
    }
    let place = |features: &mut [f64], start: usize, motif: &[f64]| {
        features[start * d..(start + l) * d].copy_from_slice(motif);
    };
    place(&mut features, offset, &motifs[a]);
    place(&mut features, offset + l + spec.gap, &motifs[b]);
    Sample {
        features,
        len: t,
        label,
    }
}

fn gen_sample(spec: &TaskSpec, motifs: &[Vec<f64>], split: Split, index: u64) -> Sample {
    match spec.task {
        TaskKind::CopyMemory => gen_copy_memory(spec, split, index),
        TaskKind::Adding => gen_adding(spec, split, index),
        TaskKind::SegmentOrder => gen_segment_order(spec, motifs, split, index),
        TaskKind::Csv | TaskKind::Jsonl => unreachable!("external tasks are loaded, not generated"),
    }
}

/// Generate `count` samples of `split`, skipping any already in `seen`.
pub fn generate_split(
    spec: &TaskSpec,
    split: Split,
    count: usize,
    seen: &mut HashSet<(usize, Vec<u64>)>,
) -> Result<Dataset> {
    spec.validate()?;
    let motifs = if spec.task == TaskKind::SegmentOrder {
        segment_motifs(spec)
    } else {
        Vec::new()
    };
    let mut samples = Vec::with_capacity(count);
    let mut index = 0u64;
    let budget = (count as u64 + 16) * 64;
    while samples.len() < count {
        if index >= budget {
            return Err(Error::config(
                "T",
                format!(
                    "could not draw {count} distinct {} samples; the sample space is too small",
                    split.as_str()
                ),
            ));
        }
        let s = gen_sample(spec, &motifs, split, index);
        index += 1;
        if seen.insert(s.key()) {
            samples.push(s);
        }
    }
    Ok(Dataset {
        dim: spec.dim,
        classes: spec.classes,
        samples,
        labels: None,
    })
}

/// Train, validation and test sets for a task: generated for synthetic
/// tasks, loaded for `csv`/`jsonl`.
pub fn build_splits(spec: &TaskSpec) -> Result<Splits> {
    spec.validate()?;
    if !spec.task.is_synthetic() {
        return load_splits(spec);
    }
    let mut seen = HashSet::new();
    let train = generate_split(spec, Split::Train, spec.n_train, &mut seen)?;
    let val = generate_split(spec, Split::Val, spec.n_val, &mut seen)?;
    let test = generate_split(spec, Split::Test, spec.n_test, &mut seen)?;
    Ok(Splits { train, val, test })
}

fn load_splits(spec: &TaskSpec) -> Result<Splits> {
    let format = if spec.task == TaskKind::Csv {
        ExternalFormat::Csv
    } else {
        ExternalFormat::Jsonl
    };
    let schema = ExternalSchema::default();
    let path = spec.path.as_ref().expect("validated");
    let train = load_external(path, format, &schema, None)?;
    let vocab = train.labels.clone();
    let load_other = |p: &Option<PathBuf>| -> Result<Dataset> {
        match p {
            Some(p) => load_external(p, format, &schema, vocab.as_ref()),
            None => Ok(Dataset {
                samples: Vec::new(),
                ..train.clone()
            }),
        }
    };
    let val = load_other(&spec.val_path)?;
    let test = load_other(&spec.test_path)?;
    Ok(Splits { train, val, test })
}

/// Sorted label names. When every name parses as an integer the order is
/// numeric, otherwise lexicographic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVocab {
    names: Vec<String>,
}

impl LabelVocab {
    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Self {
        let mut names: Vec<String> = names.into_iter().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        if names.iter().all(|n| n.parse::<i64>().is_ok()) {
            names.sort_by_key(|n| n.parse::<i64>().unwrap());
        }
        LabelVocab { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExternalFormat {
    Csv,
    Jsonl,
}

/// Column layout of external data. For JSONL only `id_column`,
/// `label_column` and the `features` key are used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExternalSchema {
    pub id_column: String,
    pub step_column: String,
    /// Explicit feature columns; `None` means every `feat_*` column in
    /// header order.
    pub feature_columns: Option<Vec<String>>,
    pub label_column: String,
}

impl Default for ExternalSchema {
    fn default() -> Self {
        ExternalSchema {
            id_column: "seq_id".into(),
            step_column: "step".into(),
            feature_columns: None,
            label_column: "label".into(),
        }
    }
}

struct RawSequence {
    id: String,
    frames: Vec<(i64, Vec<f64>, usize)>,
    label: String,
    label_line: usize,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Load sequences from a CSV or JSONL file. With `vocab` given, labels are
/// resolved against it and unknown labels are errors; otherwise the
/// vocabulary is built from the file.
pub fn load_external(
    path: &Path,
    format: ExternalFormat,
    schema: &ExternalSchema,
    vocab: Option<&LabelVocab>,
) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (dim, sequences) = match format {
        ExternalFormat::Csv => parse_csv(path, &text, schema)?,
        ExternalFormat::Jsonl => parse_jsonl(path, &text, schema)?,
    };
    if sequences.is_empty() {
        log::warn!("{} contains no sequences", path.display());
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => LabelVocab::from_names(sequences.iter().map(|s| s.label.clone())),
    };
    let mut samples = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let label = vocab.index(&seq.label).ok_or_else(|| {
            parse_err(
                path,
                seq.label_line,
                format!("unknown label `{}` for sequence `{}`", seq.label, seq.id),
            )
        })?;
        let len = seq.frames.len();
        let features = seq.frames.into_iter().flat_map(|(_, f, _)| f).collect();
        samples.push(Sample {
            features,
            len,
            label,
        });
    }
    Ok(Dataset {
        dim,
        classes: vocab.len(),
        samples,
        labels: Some(vocab),
    })
}

fn parse_csv(path: &Path, text: &str, schema: &ExternalSchema) -> Result<(usize, Vec<RawSequence>)> {
    if text.trim().is_empty() {
        return Ok((0, Vec::new()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, 1, format!("missing column `{name}`")))
    };
    let id_col = col(&schema.id_column)?;
    let step_col = col(&schema.step_column)?;
    let label_col = col(&schema.label_column)?;
    let feat_cols: Vec<usize> = match &schema.feature_columns {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        None => headers
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with("feat_"))
            .map(|(i, _)| i)
            .collect(),
    };
    if feat_cols.is_empty() {
        return Err(parse_err(path, 1, "no feature columns"));
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, RawSequence> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let id = record[id_col].to_string();
        let step: i64 = record[step_col]
            .parse()
            .map_err(|_| parse_err(path, line, format!("step `{}` is not an integer", &record[step_col])))?;
        let mut feats = Vec::with_capacity(feat_cols.len());
        for &c in &feat_cols {
            let v: f64 = record[c].parse().map_err(|_| {
                parse_err(
                    path,
                    line,
                    format!("feature `{}` = `{}` is not numeric", &headers[c], &record[c]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("feature `{}` is not finite", &headers[c])));
            }
            feats.push(v);
        }
        let label = record[label_col].to_string();
        let seq = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            RawSequence {
                id: id.clone(),
                frames: Vec::new(),
                label: label.clone(),
                label_line: line,
            }
        });
        if seq.label != label {
            return Err(parse_err(
                path,
                line,
                format!("sequence `{id}` changes label from `{}` to `{label}`", seq.label),
            ));
        }
        seq.frames.push((step, feats, line));
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut seq = by_id.remove(&id).expect("recorded id");
        seq.frames.sort_by_key(|f| f.0);
        for pair in seq.frames.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(parse_err(
                    path,
                    pair[1].2,
                    format!("sequence `{id}` repeats step {}", pair[1].0),
                ));
            }
        }
        out.push(seq);
    }
    Ok((feat_cols.len(), out))
}

fn parse_jsonl(path: &Path, text: &str, schema: &ExternalSchema) -> Result<(usize, Vec<RawSequence>)> {
    let mut dim: Option<usize> = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| parse_err(path, line, e.to_string()))?;
        let id = match value.get(&schema.id_column).or_else(|| value.get("id")) {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
            None => format!("line{line}"),
        };
        let label = match value.get(&schema.label_column) {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => return Err(parse_err(path, line, "missing or non-scalar `label`")),
        };
        let frames = value
            .get("features")
            .and_then(|f| f.as_array())
            .ok_or_else(|| parse_err(path, line, "missing `features` array"))?;
        if frames.is_empty() {
            return Err(parse_err(path, line, "sequence has no frames"));
        }
        let mut parsed = Vec::with_capacity(frames.len());
        for (t, frame) in frames.iter().enumerate() {
            let vals = frame
                .as_array()
                .ok_or_else(|| parse_err(path, line, format!("frame {t} is not an array")))?;
            let row = vals
                .iter()
                .map(|v| v.as_f64().filter(|x| x.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| parse_err(path, line, format!("frame {t} has a non-numeric feature")))?;
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(parse_err(
                        path,
                        line,
                        format!("frame {t} has {} features, expected {d}", row.len()),
                    ))
                }
                _ => {}
            }
            parsed.push((t as i64, row, line));
        }
        out.push(RawSequence {
            id,
            frames: parsed,
            label,
            label_line: line,
        });
    }
    Ok((dim.unwrap_or(0), out))
}

/// Write a dataset in the CSV layout `seq_id,step,feat_0..,label`. Values
/// are written in shortest round-trip form, so reloading is bit-exact.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["seq_id".to_string(), "step".to_string()];
    header.extend((0..dataset.dim).map(|j| format!("feat_{j}")));
    header.push("label".into());
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(&header).map_err(io)?;
    for (n, s) in dataset.samples.iter().enumerate() {
        let label = label_name(dataset, s.label);
        for t in 0..s.len {
            let mut row = vec![n.to_string(), t.to_string()];
            row.extend(s.frame(t, dataset.dim).iter().map(|v| v.to_string()));
            row.push(label.clone());
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write a dataset as JSON lines `{"id", "features", "label"}`.
pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (n, s) in dataset.samples.iter().enumerate() {
        let frames: Vec<&[f64]> = (0..s.len).map(|t| s.frame(t, dataset.dim)).collect();
        let rec = serde_json::json!({
            "id": n.to_string(),
            "features": frames,
            "label": label_name(dataset, s.label),
        });
        writeln!(f, "{rec}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn label_name(dataset: &Dataset, label: usize) -> String {
    match &dataset.labels {
        Some(v) => v.names()[label].clone(),
        None => label.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_memory_layout() {
        let spec = TaskSpec::copy_memory(10, 1, 4, 3);
        let s = gen_copy_memory(&spec, Split::Train, 5);
        assert_eq!(s.features.len(), 10 * 7);
        // G = 1: the label symbol sits on the penultimate step
        assert_eq!(s.frame(8, 7)[s.label], 1.0);
        for t in (0..10).filter(|&t| t != 8) {
            let f = s.frame(t, 7);
            assert_eq!(f.iter().sum::<f64>(), 1.0);
            assert!(f[..4].iter().all(|&v| v == 0.0), "noise uses its own symbols");
        }
    }

    #[test]
    fn adding_markers_respect_gap() {
        let spec = TaskSpec::adding(20, 8);
        for i in 0..200 {
            let s = gen_adding(&spec, Split::Val, i);
            let marks: Vec<usize> = (0..20).filter(|&t| s.frame(t, 2)[1] == 1.0).collect();
            assert_eq!(marks.len(), 2);
            assert!(marks[1] - marks[0] >= 8);
            let sum = s.frame(marks[0], 2)[0] + s.frame(marks[1], 2)[0];
            assert_eq!(s.label, usize::from(sum > 1.0));
        }
    }

    #[test]
    fn segment_pairs_are_ordered_and_distinct() {
        assert_eq!(motif_count(2), 2);
        assert_eq!(motif_count(6), 3);
        assert_eq!(motif_count(7), 4);
        let p = segment_pairs(6);
        assert_eq!(p, vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
        // swapping the order always lands on a different class
        for (i, &(a, b)) in p.iter().enumerate() {
            let j = p.iter().position(|&q| q == (b, a)).unwrap();
            assert_ne!(i, j);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(TaskSpec::copy_memory(10, 10, 4, 2).validate().is_err());
        assert!(TaskSpec::copy_memory(10, 0, 4, 2).validate().is_err());
        assert!(TaskSpec::copy_memory(10, 3, 4, 0).validate().is_err());
        assert!(TaskSpec::adding(3, 1).validate().is_err());
        assert!(TaskSpec::segment_order(8, 4, 6, 4, 3).validate().is_err());
        assert!(TaskSpec::segment_order(10, 4, 6, 4, 3).validate().is_ok());
    }

    #[test]
    fn tiny_sample_space_is_reported() {
        // 2 labels, one noise symbol, T = 2: only two distinct sequences exist
        let spec = TaskSpec::copy_memory(2, 1, 2, 1).with_counts(2, 1, 0);
        assert!(build_splits(&spec).is_err());
    }

    #[test]
    fn label_vocab_orders_numbers_numerically() {
        let v = LabelVocab::from_names(["10", "2", "1", "2"].map(String::from));
        assert_eq!(v.names(), &["1", "2", "10"]);
        let v = LabelVocab::from_names(["walk", "clap", "10"].map(String::from));
        assert_eq!(v.names(), &["10", "clap", "walk"]);
    }
}
