//! Task streams with disjoint class sets, non-IID client shards, a synthetic
//! token-space generator, and the feature CSV format.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat, RngStream, StreamKey};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `n_tokens × d_in` token matrix.
    pub x: Mat,
    pub y: u32,
    pub train: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub n_tokens: usize,
    pub d_in: usize,
    /// Sorted class ids.
    pub classes: Vec<u32>,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| !s.train)
    }

    pub fn n_train(&self) -> usize {
        self.train().count()
    }

    pub fn n_test(&self) -> usize {
        self.test().count()
    }

    /// Marks the last `fraction` of each class's samples (in file order) as test.
    pub fn with_holdout(mut self, fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("holdout fraction {fraction} outside [0, 1)")));
        }
        let mut per_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            per_class.entry(s.y).or_default().push(i);
        }
        for idx in per_class.values() {
            let n_test = (idx.len() as f64 * fraction).round() as usize;
            let n_train = idx.len() - n_test;
            for (k, &i) in idx.iter().enumerate() {
                self.samples[i].train = k < n_train;
            }
        }
        Ok(self)
    }

    fn subset(&self, classes: &[u32]) -> LabeledDataset {
        let keep: BTreeSet<u32> = classes.iter().copied().collect();
        LabeledDataset {
            n_tokens: self.n_tokens,
            d_in: self.d_in,
            classes: keep.iter().copied().collect(),
            samples: self.samples.iter().filter(|s| keep.contains(&s.y)).cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub n_tokens: usize,
    pub d_in: usize,
    /// Standard deviation of the per-sample noise around the class anchor.
    pub spread: f64,
    /// Standard deviation of anchor entries.
    pub anchor_scale: f64,
    /// Fraction of each class held out for testing.
    pub test_fraction: f64,
}

impl SynthSpec {
    /// 30 classes of 32 samples (16 train, 16 test), 16 tokens of width 16.
    /// Few samples per client and class, so clients see little of the
    /// classes they do hold.
    pub fn reference() -> Self {
        SynthSpec {
            n_classes: 30,
            per_class: 32,
            n_tokens: 16,
            d_in: 16,
            spread: 0.5,
            anchor_scale: 1.0,
            test_fraction: 0.5,
        }
    }
}

/// Per class a random anchor in token space; samples are anchor plus
/// isotropic Gaussian noise. The first `1 - test_fraction` of each class is train.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<LabeledDataset> {
    if spec.n_classes < 2 {
        return Err(Error::Config("synthetic data needs at least two classes".into()));
    }
    if spec.per_class == 0 || spec.n_tokens == 0 || spec.d_in == 0 {
        return Err(Error::Config("per_class, n_tokens and d_in must be positive".into()));
    }
    if !(spec.spread >= 0.0) || !(spec.anchor_scale >= 0.0) || !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::Config("spread, anchor_scale must be ≥ 0 and test_fraction in [0, 1)".into()));
    }
    let n_test = (spec.per_class as f64 * spec.test_fraction).round() as usize;
    let n_train = spec.per_class - n_test;
    let mut samples = Vec::with_capacity(spec.n_classes * spec.per_class);
    for c in 0..spec.n_classes {
        let mut ra = RngStream::new(seed, StreamKey::new("synth-anchor", c as u64, 0, 0));
        let anchor = Mat::from_fn(spec.n_tokens, spec.d_in, |_, _| spec.anchor_scale * ra.normal());
        let mut rn = RngStream::new(seed, StreamKey::new("synth-noise", c as u64, 0, 0));
        for k in 0..spec.per_class {
            let x = Mat::from_fn(spec.n_tokens, spec.d_in, |i, j| anchor.get(i, j) + spec.spread * rn.normal());
            samples.push(Sample {
                x,
                y: c as u32,
                train: k < n_train,
            });
        }
    }
    Ok(LabeledDataset {
        n_tokens: spec.n_tokens,
        d_in: spec.d_in,
        classes: (0..spec.n_classes as u32).collect(),
        samples,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<LabeledDataset>,
}

impl TaskStream {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Exhaustive pairwise class-disjointness check.
    pub fn is_disjoint(&self) -> bool {
        for (i, a) in self.tasks.iter().enumerate() {
            for b in &self.tasks[i + 1..] {
                if a.classes.iter().any(|c| b.classes.binary_search(c).is_ok()) {
                    return false;
                }
            }
        }
        true
    }
}

/// Shuffles classes and deals them into `t` equal groups.
pub fn split_tasks(d: &LabeledDataset, t: usize, seed: u64) -> Result<TaskStream> {
    if t == 0 || d.classes.len() % t != 0 {
        return Err(Error::Config(format!("{} classes cannot be split into {t} equal tasks", d.classes.len())));
    }
    let mut classes = d.classes.clone();
    RngStream::new(seed, StreamKey::new("task-split", 0, 0, 0)).shuffle(&mut classes);
    let per = classes.len() / t;
    Ok(TaskStream {
        tasks: classes.chunks(per).map(|group| d.subset(group)).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionStrategy {
    /// Each sample goes to one uniformly chosen holder of its class.
    #[default]
    SingleAssignment,
    /// Each sample is copied to every holder of its class.
    Replicate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub eta: f64,
    /// Per client, indices into the task's train samples (in dataset order).
    pub shards: Vec<Vec<usize>>,
    pub class_sets: Vec<BTreeSet<u32>>,
}

impl ClientPartition {
    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn mean_coverage(&self, n_classes: usize) -> f64 {
        self.class_sets.iter().map(|s| s.len() as f64 / n_classes as f64).sum::<f64>() / self.shards.len() as f64
    }
}

/// Classes each client holds: `⌈η·|C|⌉` drawn without replacement, then
/// orphan classes are handed to a random client.
pub fn partition_clients(
    task: &LabeledDataset,
    n_clients: usize,
    eta: f64,
    strategy: PartitionStrategy,
    rng: &mut RngStream,
) -> Result<ClientPartition> {
    if n_clients == 0 {
        return Err(Error::Config("at least one client is required".into()));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Config(format!("class coverage η = {eta} outside (0, 1]")));
    }
    let c = task.classes.len();
    let k = ((eta * c as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut class_sets: Vec<BTreeSet<u32>> = (0..n_clients)
        .map(|_| rng.permutation(c).into_iter().take(k).map(|i| task.classes[i]).collect())
        .collect();
    for &class in &task.classes {
        if !class_sets.iter().any(|s| s.contains(&class)) {
            let l = rng.index(n_clients);
            class_sets[l].insert(class);
        }
    }
    let holders: BTreeMap<u32, Vec<usize>> = task
        .classes
        .iter()
        .map(|&cl| (cl, (0..n_clients).filter(|&l| class_sets[l].contains(&cl)).collect()))
        .collect();
    let mut shards = vec![Vec::new(); n_clients];
    for (i, s) in task.train().enumerate() {
        let h = &holders[&s.y];
        match strategy {
            PartitionStrategy::SingleAssignment => shards[h[rng.index(h.len())]].push(i),
            PartitionStrategy::Replicate => h.iter().for_each(|&l| shards[l].push(i)),
        }
    }
    Ok(ClientPartition {
        eta,
        shards,
        class_sets,
    })
}

/// Task stream and per-task partition summary for reproducibility records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub tasks: Vec<TaskManifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub classes: Vec<u32>,
    pub n_train: usize,
    pub n_test: usize,
    pub partition: ClientPartition,
}

impl StreamManifest {
    pub fn new(stream: &TaskStream, partitions: &[ClientPartition]) -> Self {
        StreamManifest {
            tasks: stream
                .tasks
                .iter()
                .zip(partitions)
                .map(|(t, p)| TaskManifest {
                    classes: t.classes.clone(),
                    n_train: t.n_train(),
                    n_test: t.n_test(),
                    partition: p.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Reads `label,f0,...,f{d-1}` rows into single-token samples, all marked as train.
pub fn load_features(path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_features(&text)
}

pub fn parse_features(text: &str) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(Error::Schema("empty feature file".into()));
    }
    if &header[0] != "label" {
        return Err(Error::Schema(format!("first column must be `label`, found `{}`", &header[0])));
    }
    let width = header.len() - 1;
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{i}") {
            return Err(Error::Schema(format!("column {} must be `f{i}`, found `{name}`", i + 1)));
        }
    }
    if width == 0 {
        return Err(Error::Schema("feature file declares no feature columns".into()));
    }
    let mut samples = Vec::new();
    let mut classes = BTreeSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse { line, msg: e.to_string() }
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width + 1 {
            return Err(Error::Schema(format!("line {line}: {} fields, expected {}", rec.len(), width + 1)));
        }
        let y: u32 = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad label `{}`", &rec[0]),
        })?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim().parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("bad feature `{v}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        classes.insert(y);
        samples.push(Sample {
            x: Mat::from_vec(1, width, vals)?,
            y,
            train: true,
        });
    }
    if samples.is_empty() {
        return Err(Error::Schema("feature file has a header but no samples".into()));
    }
    Ok(LabeledDataset {
        n_tokens: 1,
        d_in: width,
        classes: classes.into_iter().collect(),
        samples,
    })
}

/// Writes single-token samples in the feature CSV format (shortest round-trip decimals).
pub fn save_features(d: &LabeledDataset, path: &Path) -> Result<()> {
    if d.n_tokens != 1 {
        return Err(Error::Schema(format!("feature files hold one token per sample, dataset has {}", d.n_tokens)));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..d.d_in).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    for s in &d.samples {
        let mut row = vec![s.y.to_string()];
        row.extend(s.x.data().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
