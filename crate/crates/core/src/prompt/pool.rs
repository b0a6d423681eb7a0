use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, LayerPrompt, PromptMode};
use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, Mat, RngStream, StreamKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    /// Task prompts and keys only.
    L2p,
    /// A shared global prompt plus task prompts and keys.
    DualP,
}

/// Where each part of the pool attaches to the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolLayout {
    pub kind: PoolKind,
    /// Rows per prompt `L_p` (split in half for prefix tuning).
    pub prompt_len: usize,
    pub global_mode: PromptMode,
    pub task_mode: PromptMode,
    pub global_layers: Vec<usize>,
    pub task_layers: Vec<usize>,
    /// Entries are initialised uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl PoolLayout {
    pub fn desk_l2p() -> Self {
        PoolLayout {
            kind: PoolKind::L2p,
            prompt_len: 4,
            global_mode: PromptMode::ProT,
            task_mode: PromptMode::ProT,
            global_layers: Vec::new(),
            task_layers: vec![0],
            init_scale: 1.0,
        }
    }

    pub fn desk_dualp() -> Self {
        PoolLayout {
            kind: PoolKind::DualP,
            prompt_len: 4,
            global_mode: PromptMode::PreT,
            task_mode: PromptMode::PreT,
            global_layers: vec![0],
            task_layers: vec![1],
            init_scale: 1.0,
        }
    }

    /// Sorted union of global and task layers; the backbone must attach exactly these.
    pub fn attach_layers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.global_layers.iter().chain(&self.task_layers).copied().collect();
        v.sort_unstable();
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be positive".into()));
        }
        if self.task_layers.is_empty() {
            return Err(Error::Config("task prompts need at least one layer".into()));
        }
        match self.kind {
            PoolKind::L2p if !self.global_layers.is_empty() => {
                return Err(Error::Config("an L2P pool has no global prompt".into()))
            }
            PoolKind::DualP if self.global_layers.is_empty() => {
                return Err(Error::Config("a DualP pool needs at least one global layer".into()))
            }
            _ => {}
        }
        let layers = self.attach_layers();
        if layers.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("prompt layers overlap or repeat: {layers:?}")));
        }
        let uses_pre_t = (!self.global_layers.is_empty() && self.global_mode == PromptMode::PreT)
            || self.task_mode == PromptMode::PreT;
        if uses_pre_t && self.prompt_len % 2 != 0 {
            return Err(Error::Config(format!(
                "prefix tuning splits prompts in half; prompt_len {} is odd",
                self.prompt_len
            )));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::Config("init_scale must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Checks the layout against a backbone configuration.
    pub fn validate_for(&self, bb: &BackboneConfig) -> Result<()> {
        self.validate()?;
        if self.attach_layers() != bb.attach_layers {
            return Err(Error::Config(format!(
                "prompt layers {:?} differ from backbone attach layers {:?}",
                self.attach_layers(),
                bb.attach_layers
            )));
        }
        Ok(())
    }

    /// Trainable prompt and key scalars for `tasks` task entries.
    pub fn param_count(&self, dim: usize, tasks: usize) -> usize {
        let global = self.global_layers.len() * self.prompt_len * dim;
        let per_task = self.task_layers.len() * self.prompt_len * dim + dim;
        global + tasks * per_task
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEntry {
    /// One prompt per task layer, in `task_layers` order.
    pub prompts: Vec<Mat>,
    pub key: Vec<f64>,
}

/// Prompt pool for one model (client or server).
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    layout: PoolLayout,
    dim: usize,
    seed: u64,
    global: Vec<Mat>,
    entries: Vec<TaskEntry>,
}

fn uniform_mat(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * (2.0 * rng.uniform() - 1.0))
}

impl PromptPool {
    /// Empty pool; the global prompt (if any) is drawn from `seed`.
    pub fn new(layout: PoolLayout, dim: usize, seed: u64) -> Result<Self> {
        layout.validate()?;
        let global = (0..layout.global_layers.len())
            .map(|i| {
                let mut rng = RngStream::new(seed, StreamKey::new("prompt-global", i as u64, 0, 0));
                uniform_mat(&mut rng, layout.prompt_len, dim, layout.init_scale)
            })
            .collect();
        Ok(PromptPool {
            layout,
            dim,
            seed,
            global,
            entries: Vec::new(),
        })
    }

    pub fn layout(&self) -> &PoolLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_tasks(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn global(&self) -> &[Mat] {
        &self.global
    }

    pub fn entry(&self, task: usize) -> Result<&TaskEntry> {
        self.entries.get(task).ok_or(Error::Index {
            index: task,
            len: self.entries.len(),
        })
    }

    pub(crate) fn global_mut(&mut self) -> &mut [Mat] {
        &mut self.global
    }

    pub(crate) fn entry_mut(&mut self, task: usize) -> Result<&mut TaskEntry> {
        let len = self.entries.len();
        self.entries.get_mut(task).ok_or(Error::Index { index: task, len })
    }

    /// Appends the entry for the next task with a deterministic initialisation.
    pub fn add_task(&mut self) -> usize {
        let t = self.entries.len();
        let s = self.layout.init_scale;
        let prompts = (0..self.layout.task_layers.len())
            .map(|i| {
                let mut rng = RngStream::new(self.seed, StreamKey::new("prompt-task", t as u64, i as u64, 0));
                uniform_mat(&mut rng, self.layout.prompt_len, self.dim, s)
            })
            .collect();
        let mut rng = RngStream::new(self.seed, StreamKey::new("prompt-key", t as u64, 0, 0));
        let key = (0..self.dim).map(|_| s * (2.0 * rng.uniform() - 1.0)).collect();
        self.entries.push(TaskEntry { prompts, key });
        t
    }

    /// Grows the pool until it holds `n` entries.
    pub fn ensure_tasks(&mut self, n: usize) {
        while self.entries.len() < n {
            self.add_task();
        }
    }

    /// Prompt stack for `task` in ascending layer order.
    pub fn stack(&self, task: usize) -> Result<Vec<LayerPrompt<'_>>> {
        let entry = self.entry(task)?;
        let mut out: Vec<LayerPrompt> = self
            .layout
            .global_layers
            .iter()
            .zip(&self.global)
            .map(|(&layer, p)| LayerPrompt {
                layer,
                mode: self.layout.global_mode,
                prompt: p,
            })
            .chain(self.layout.task_layers.iter().zip(&entry.prompts).map(|(&layer, p)| LayerPrompt {
                layer,
                mode: self.layout.task_mode,
                prompt: p,
            }))
            .collect();
        out.sort_by_key(|p| p.layer);
        Ok(out)
    }

    /// Named tensors in a fixed order: global prompts, then per task its
    /// prompts followed by its key (as a 1×D matrix).
    pub fn export(&self) -> Vec<(String, Mat)> {
        let mut out = Vec::new();
        for (i, g) in self.global.iter().enumerate() {
            out.push((format!("g/{i}"), g.clone()));
        }
        for (t, e) in self.entries.iter().enumerate() {
            for (i, p) in e.prompts.iter().enumerate() {
                out.push((format!("e/{t}/{i}"), p.clone()));
            }
            out.push((format!("k/{t}"), Mat::row_vector(&e.key)));
        }
        out
    }

    /// Inverse of [`PromptPool::export`]; names and shapes must follow this pool's layout.
    pub fn import(&mut self, tensors: &[(String, Mat)]) -> Result<()> {
        let n_global = self.global.len();
        let per_task = self.layout.task_layers.len() + 1;
        if tensors.len() < n_global || (tensors.len() - n_global) % per_task != 0 {
            return Err(Error::Contract(format!("{} tensors do not fit the pool layout", tensors.len())));
        }
        let n_tasks = (tensors.len() - n_global) / per_task;
        let expected: Vec<(String, usize, usize)> = {
            let mut probe = self.clone();
            probe.entries.truncate(0);
            probe.ensure_tasks(n_tasks);
            probe
                .export()
                .into_iter()
                .map(|(n, m)| (n, m.rows(), m.cols()))
                .collect()
        };
        for ((name, m), (en, er, ec)) in tensors.iter().zip(&expected) {
            if name != en || m.rows() != *er || m.cols() != *ec {
                return Err(Error::Contract(format!(
                    "tensor {name} ({}x{}) where {en} ({er}x{ec}) was expected",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let mut it = tensors.iter().map(|(_, m)| m.clone());
        self.global = (0..n_global).map(|_| it.next().unwrap()).collect();
        self.entries = (0..n_tasks)
            .map(|_| {
                let prompts = (0..per_task - 1).map(|_| it.next().unwrap()).collect();
                let key = it.next().unwrap().into_data();
                TaskEntry { prompts, key }
            })
            .collect();
        Ok(())
    }
}

/// Result of key matching.
#[derive(Clone, Debug)]
pub struct Selection<'a> {
    pub task: usize,
    pub stack: Vec<LayerPrompt<'a>>,
    pub key: &'a [f64],
    pub score: f64,
}

/// Training passes the known task; evaluation picks the key with the highest
/// cosine similarity to the promptless query (first maximum wins).
pub fn select_prompt<'a>(pool: &'a PromptPool, query: &[f64], task_hint: Option<usize>) -> Result<Selection<'a>> {
    if pool.is_empty() {
        return Err(Error::State("prompt pool has no task entries".into()));
    }
    let task = match task_hint {
        Some(t) => t,
        None => {
            let mut best = (0, f64::NEG_INFINITY);
            for (t, e) in pool.entries.iter().enumerate() {
                let s = cosine_sim(query, &e.key)?;
                if s > best.1 {
                    best = (t, s);
                }
            }
            best.0
        }
    };
    let entry = pool.entry(task)?;
    Ok(Selection {
        task,
        stack: pool.stack(task)?,
        key: &entry.key,
        score: cosine_sim(query, &entry.key)?,
    })
}
