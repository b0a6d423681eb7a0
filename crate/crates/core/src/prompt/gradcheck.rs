//! Central finite-difference validation of the analytic local-loss gradients.

use serde::Serialize;

use crate::backbone::{BackboneConfig, FrozenBackbone, PromptMode};
use crate::error::Result;
use crate::numerics::{Mat, RngStream, StreamKey};

use super::head::Head;
use super::loss::{local_loss, local_loss_injected, Grads, Injected, TrainHyper, TrainSample};
use super::pool::{PoolKind, PoolLayout, PromptPool};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor: coordinates whose gradient is below this in magnitude
/// are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Plain,
    Injected,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockResult {
    pub block: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst: Option<usize>,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SectionResult {
    pub mode: PromptMode,
    pub loss: LossKind,
    pub blocks: Vec<BlockResult>,
}

impl SectionResult {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.skipped || b.max_rel_error < REL_TOLERANCE)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Global,
    Task,
    Key,
    HeadWeight,
    HeadBias,
}

impl Block {
    fn name(self) -> &'static str {
        match self {
            Block::Global => "global-prompt",
            Block::Task => "task-prompt",
            Block::Key => "key",
            Block::HeadWeight => "head-weight",
            Block::HeadBias => "head-bias",
        }
    }
}

fn coord_mut<'a>(pool: &'a mut PromptPool, head: &'a mut Head, block: Block, i: usize) -> &'a mut f64 {
    match block {
        Block::Global => &mut pool.global_mut()[0].data_mut()[i],
        Block::Task => &mut pool.entry_mut(0).unwrap().prompts[0].data_mut()[i],
        Block::Key => &mut pool.entry_mut(0).unwrap().key[i],
        Block::HeadWeight => &mut head.params_mut().0.data_mut()[i],
        Block::HeadBias => &mut head.params_mut().1[i],
    }
}

fn analytic(g: &Grads, block: Block) -> &[f64] {
    match block {
        Block::Global => g.global[0].data(),
        Block::Task => g.task_prompts[0].data(),
        Block::Key => &g.key,
        Block::HeadWeight => g.head_weight.data(),
        Block::HeadBias => &g.head_bias,
    }
}

/// D=16, M=2 model with a global prompt at layer 0 and a task prompt at
/// layer 1, both in `mode`; three real samples plus, for the injected loss,
/// prototype vectors including a class absent from the batch.
pub fn check_section(seed: u64, mode: PromptMode, loss: LossKind, lambda: f64) -> Result<SectionResult> {
    let cfg = BackboneConfig {
        d_in: 4,
        n_tokens: 3,
        dim: 16,
        layers: 2,
        heads: 2,
        seed,
        attach_layers: vec![0, 1],
    };
    let bb = FrozenBackbone::build(&cfg)?;
    let layout = PoolLayout {
        kind: PoolKind::DualP,
        prompt_len: 4,
        global_mode: mode,
        task_mode: mode,
        global_layers: vec![0],
        task_layers: vec![1],
        init_scale: 1.0,
    };
    let mut pool = PromptPool::new(layout, 16, seed)?;
    pool.add_task();
    let mut head = Head::new(16);
    head.register_all([0, 1, 2, 3]);
    let mut r = RngStream::new(seed, StreamKey::new("gradcheck", 0, 0, 0));
    {
        let (w, b) = head.params_mut();
        w.data_mut().iter_mut().for_each(|v| *v = 0.5 * r.normal());
        b.iter_mut().for_each(|v| *v = 0.1 * r.normal());
    }
    let xs: Vec<Mat> = (0..3).map(|_| Mat::from_fn(3, 4, |_, _| r.normal())).collect();
    let ys = [0u32, 1, 2];
    let qs: Vec<Vec<f64>> = xs.iter().map(|x| bb.features(x, &[])).collect::<Result<_>>()?;
    let injected: Vec<Injected> = [1u32, 3, 3]
        .iter()
        .map(|&class| Injected {
            class,
            vector: (0..16).map(|_| r.normal()).collect(),
        })
        .collect();
    let hyper = TrainHyper {
        lambda,
        ..TrainHyper::default()
    };

    let eval = |pool: &PromptPool, head: &Head| -> Result<(f64, Grads)> {
        let batch: Vec<TrainSample> = xs
            .iter()
            .zip(&ys)
            .zip(&qs)
            .map(|((x, &y), q)| TrainSample { x, y, query: q })
            .collect();
        let (l, tape) = match loss {
            LossKind::Plain => local_loss(&batch, pool, head, &bb, &hyper, 0)?,
            LossKind::Injected => local_loss_injected(&batch, &injected, pool, head, &bb, &hyper, 0)?,
        };
        Ok((l, tape.backward(&bb)?))
    };
    let (_, grads) = eval(&pool, &head)?;

    let mut blocks = Vec::new();
    for block in [Block::Global, Block::Task, Block::Key, Block::HeadWeight, Block::HeadBias] {
        if block == Block::Key && lambda == 0.0 {
            blocks.push(BlockResult {
                block: block.name().into(),
                checked: 0,
                max_rel_error: 0.0,
                worst: None,
                skipped: true,
            });
            continue;
        }
        let a = analytic(&grads, block).to_vec();
        let mut worst = (0.0, None);
        for (i, &ai) in a.iter().enumerate() {
            let orig = *coord_mut(&mut pool, &mut head, block, i);
            *coord_mut(&mut pool, &mut head, block, i) = orig + FD_STEP;
            let (lp, _) = eval(&pool, &head)?;
            *coord_mut(&mut pool, &mut head, block, i) = orig - FD_STEP;
            let (lm, _) = eval(&pool, &head)?;
            *coord_mut(&mut pool, &mut head, block, i) = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let e = rel_error(ai, numeric);
            if worst.1.is_none() || e > worst.0 {
                worst = (e, Some(i));
            }
        }
        blocks.push(BlockResult {
            block: block.name().into(),
            checked: a.len(),
            max_rel_error: worst.0,
            worst: worst.1,
            skipped: false,
        });
    }
    Ok(SectionResult { mode, loss, blocks })
}

/// Both prompt modes crossed with both losses.
pub fn run_gradcheck(seed: u64, lambda: f64) -> Result<Vec<SectionResult>> {
    let mut out = Vec::new();
    for mode in [PromptMode::ProT, PromptMode::PreT] {
        for loss in [LossKind::Plain, LossKind::Injected] {
            out.push(check_section(seed, mode, loss, lambda)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_sections_pass() {
        let sections = run_gradcheck(11, 0.5).unwrap();
        assert_eq!(sections.len(), 4);
        for s in &sections {
            assert!(s.passed(), "{s:?}");
            assert!(s.blocks.iter().all(|b| !b.skipped && b.checked > 0));
        }
    }

    #[test]
    fn zero_lambda_skips_key_block() {
        let s = check_section(3, PromptMode::PreT, LossKind::Plain, 0.0).unwrap();
        let key = s.blocks.iter().find(|b| b.block == "key").unwrap();
        assert!(key.skipped);
        assert!(s.passed());
    }
}
