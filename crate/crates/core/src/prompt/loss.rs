use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardTape, FrozenBackbone};
use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, cosine_sim_grad_v, cross_entropy, softmax, Mat};

use super::head::Head;
use super::pool::PromptPool;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// `α_k = α · δ / (δ + k)` at local step `k`.
    InverseDecay { delta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 0.02,
            lambda: 0.5,
            epochs: 2,
            batch_size: 16,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if let LrSchedule::InverseDecay { delta } = self.schedule {
            if !(delta > 0.0) || !delta.is_finite() {
                return Err(Error::Config(format!("decay delta must be positive, got {delta}")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::InverseDecay { delta } => self.lr * delta / (delta + step as f64),
        }
    }
}

/// One raw training sample with its cached promptless query feature.
#[derive(Clone, Copy, Debug)]
pub struct TrainSample<'a> {
    pub x: &'a Mat,
    pub y: u32,
    pub query: &'a [f64],
}

/// A deep-feature vector fed straight to the head.
#[derive(Clone, Debug, PartialEq)]
pub struct Injected {
    pub class: u32,
    pub vector: Vec<f64>,
}

pub fn matching_loss(query: &[f64], key: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_sim(query, key)?)
}

struct RealTerm {
    tape: ForwardTape,
    feature: Vec<f64>,
    probs: Vec<f64>,
    row: usize,
    query: Vec<f64>,
}

struct InjectedTerm {
    feature: Vec<f64>,
    probs: Vec<f64>,
    row: usize,
}

/// Everything needed to differentiate one loss evaluation.
pub struct LossTape {
    task: usize,
    lambda: f64,
    real: Vec<RealTerm>,
    injected: Vec<InjectedTerm>,
    key: Vec<f64>,
    head_weight: Mat,
    global_layers: Vec<usize>,
    task_layers: Vec<usize>,
    prompt_shape: (usize, usize),
}

/// Gradient of a local loss w.r.t. everything a step may touch.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub task: usize,
    pub global: Vec<Mat>,
    pub task_prompts: Vec<Mat>,
    pub key: Vec<f64>,
    pub head_weight: Mat,
    pub head_bias: Vec<f64>,
}

impl Grads {
    pub fn is_zero(&self) -> bool {
        let all_zero = |m: &Mat| m.data().iter().all(|v| *v == 0.0);
        self.global.iter().all(all_zero)
            && self.task_prompts.iter().all(all_zero)
            && self.key.iter().all(|v| *v == 0.0)
            && all_zero(&self.head_weight)
            && self.head_bias.iter().all(|v| *v == 0.0)
    }
}

/// Mean cross-entropy plus `λ`-weighted mean matching loss.
pub fn local_loss(
    batch: &[TrainSample<'_>],
    pool: &PromptPool,
    head: &Head,
    backbone: &FrozenBackbone,
    hyper: &TrainHyper,
    task: usize,
) -> Result<(f64, LossTape)> {
    loss_impl(batch, &[], pool, head, backbone, hyper.lambda, task)
}

/// Cross-entropy over the union of real samples and injected prototype
/// vectors, plus `λ`-weighted matching loss over the real samples.
pub fn local_loss_injected(
    batch: &[TrainSample<'_>],
    injected: &[Injected],
    pool: &PromptPool,
    head: &Head,
    backbone: &FrozenBackbone,
    hyper: &TrainHyper,
    task: usize,
) -> Result<(f64, LossTape)> {
    if injected.is_empty() {
        return Err(Error::Contract("no prototype vectors to inject; use local_loss".into()));
    }
    loss_impl(batch, injected, pool, head, backbone, hyper.lambda, task)
}

fn label_row(head: &Head, y: u32) -> Result<usize> {
    head.row_of(y)
        .ok_or_else(|| Error::Contract(format!("label {y} is not registered in the head")))
}

fn loss_impl(
    batch: &[TrainSample<'_>],
    injected: &[Injected],
    pool: &PromptPool,
    head: &Head,
    backbone: &FrozenBackbone,
    lambda: f64,
    task: usize,
) -> Result<(f64, LossTape)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let stack = pool.stack(task)?;
    let key = pool.entry(task)?.key.clone();
    let mut ce_sum = 0.0;
    let mut match_sum = 0.0;
    let mut real = Vec::with_capacity(batch.len());
    for s in batch {
        let row = label_row(head, s.y)?;
        let (feature, tape) = backbone.forward_features(s.x, &stack)?;
        let logits = head.logits(&feature)?;
        ce_sum += cross_entropy(&logits, row)?;
        match_sum += matching_loss(s.query, &key)?;
        real.push(RealTerm {
            tape,
            feature,
            probs: softmax(&logits),
            row,
            query: s.query.to_vec(),
        });
    }
    let mut inj = Vec::with_capacity(injected.len());
    for v in injected {
        let row = label_row(head, v.class)?;
        let logits = head.logits(&v.vector)?;
        ce_sum += cross_entropy(&logits, row)?;
        inj.push(InjectedTerm {
            feature: v.vector.clone(),
            probs: softmax(&logits),
            row,
        });
    }
    let n_union = (batch.len() + injected.len()) as f64;
    let loss = ce_sum / n_union + lambda * match_sum / batch.len() as f64;
    let layout = pool.layout();
    Ok((
        loss,
        LossTape {
            task,
            lambda,
            real,
            injected: inj,
            key,
            head_weight: head.weight().clone(),
            global_layers: layout.global_layers.clone(),
            task_layers: layout.task_layers.clone(),
            prompt_shape: (layout.prompt_len, pool.dim()),
        },
    ))
}

impl LossTape {
    pub fn task(&self) -> usize {
        self.task
    }

    pub fn union_count(&self) -> usize {
        self.real.len() + self.injected.len()
    }

    /// Gradient of the recorded loss.
    pub fn backward(&self, backbone: &FrozenBackbone) -> Result<Grads> {
        let (lp, d) = self.prompt_shape;
        let n_rows = self.head_weight.rows();
        let mut g = Grads {
            task: self.task,
            global: vec![Mat::zeros(lp, d); self.global_layers.len()],
            task_prompts: vec![Mat::zeros(lp, d); self.task_layers.len()],
            key: vec![0.0; d],
            head_weight: Mat::zeros(n_rows, d),
            head_bias: vec![0.0; n_rows],
        };
        let inv_union = 1.0 / self.union_count() as f64;

        let head_term = |g: &mut Grads, feature: &[f64], probs: &[f64], row: usize| -> Vec<f64> {
            let mut d_feature = vec![0.0; d];
            for (c, &p) in probs.iter().enumerate() {
                let dz = inv_union * (p - if c == row { 1.0 } else { 0.0 });
                g.head_bias[c] += dz;
                for (gw, f) in g.head_weight.row_mut(c).iter_mut().zip(feature) {
                    *gw += dz * f;
                }
                for (df, w) in d_feature.iter_mut().zip(self.head_weight.row(c)) {
                    *df += dz * w;
                }
            }
            d_feature
        };

        for t in &self.real {
            let d_feature = head_term(&mut g, &t.feature, &t.probs, t.row);
            for (layer, dp) in backbone.backward(&t.tape, &d_feature)? {
                if let Some(i) = self.global_layers.iter().position(|&l| l == layer) {
                    g.global[i].add_assign(&dp);
                } else if let Some(i) = self.task_layers.iter().position(|&l| l == layer) {
                    g.task_prompts[i].add_assign(&dp);
                } else {
                    return Err(Error::Contract(format!("gradient for unmapped layer {layer}")));
                }
            }
        }
        for t in &self.injected {
            head_term(&mut g, &t.feature, &t.probs, t.row);
        }
        if self.lambda != 0.0 {
            let scale = -self.lambda / self.real.len() as f64;
            for t in &self.real {
                let dc = cosine_sim_grad_v(&t.query, &self.key)?;
                for (k, v) in g.key.iter_mut().zip(dc) {
                    *k += scale * v;
                }
            }
        }
        Ok(g)
    }
}

/// `θ ← θ − α·∇` on the touched pool entries and the head.
pub fn sgd_step(pool: &mut PromptPool, head: &mut Head, grads: &Grads, lr: f64) -> Result<()> {
    let mismatch = |what: &str| Error::Contract(format!("gradient {what} does not match the parameters"));
    if grads.global.len() != pool.global().len()
        || grads.global.iter().zip(pool.global()).any(|(a, b)| (a.rows(), a.cols()) != (b.rows(), b.cols()))
    {
        return Err(mismatch("global prompt"));
    }
    {
        let entry = pool.entry(grads.task)?;
        if grads.task_prompts.len() != entry.prompts.len()
            || grads
                .task_prompts
                .iter()
                .zip(&entry.prompts)
                .any(|(a, b)| (a.rows(), a.cols()) != (b.rows(), b.cols()))
        {
            return Err(mismatch("task prompt"));
        }
        if grads.key.len() != entry.key.len() {
            return Err(mismatch("key"));
        }
    }
    if grads.head_weight.rows() != head.n_classes()
        || grads.head_bias.len() != head.n_classes()
        || (head.n_classes() > 0 && grads.head_weight.cols() != head.dim())
    {
        return Err(mismatch("head"));
    }
    for (p, gp) in pool.global_mut().iter_mut().zip(&grads.global) {
        p.axpy(-lr, gp);
    }
    let entry = pool.entry_mut(grads.task)?;
    for (p, gp) in entry.prompts.iter_mut().zip(&grads.task_prompts) {
        p.axpy(-lr, gp);
    }
    for (k, gk) in entry.key.iter_mut().zip(&grads.key) {
        *k -= lr * gk;
    }
    let (w, b) = head.params_mut();
    w.axpy(-lr, &grads.head_weight);
    for (bi, gi) in b.iter_mut().zip(&grads.head_bias) {
        *bi -= lr * gi;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::numerics::{RngStream, StreamKey};
    use crate::prompt::pool::PoolLayout;

    struct Fixture {
        bb: FrozenBackbone,
        pool: PromptPool,
        head: Head,
        xs: Vec<Mat>,
        ys: Vec<u32>,
        qs: Vec<Vec<f64>>,
    }

    fn fixture(n: usize, lambda_layout_dualp: bool) -> Fixture {
        let cfg = BackboneConfig {
            d_in: 4,
            n_tokens: 3,
            dim: 8,
            layers: 2,
            heads: 2,
            seed: 5,
            attach_layers: if lambda_layout_dualp { vec![0, 1] } else { vec![0] },
        };
        let bb = FrozenBackbone::build(&cfg).unwrap();
        let layout = if lambda_layout_dualp {
            PoolLayout::desk_dualp()
        } else {
            PoolLayout::desk_l2p()
        };
        let mut pool = PromptPool::new(layout, 8, 2).unwrap();
        pool.add_task();
        let mut head = Head::new(8);
        head.register_all([0, 1, 2]);
        let mut r = RngStream::new(9, StreamKey::new("loss-fixture", 0, 0, 0));
        {
            let (w, b) = head.params_mut();
            w.data_mut().iter_mut().for_each(|v| *v = 0.3 * r.normal());
            b.iter_mut().for_each(|v| *v = 0.1 * r.normal());
        }
        let xs: Vec<Mat> = (0..n).map(|_| Mat::from_fn(3, 4, |_, _| r.normal())).collect();
        let ys: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
        let qs = xs.iter().map(|x| bb.features(x, &[]).unwrap()).collect();
        Fixture { bb, pool, head, xs, ys, qs }
    }

    fn batch(f: &Fixture) -> Vec<TrainSample<'_>> {
        f.xs.iter()
            .zip(&f.ys)
            .zip(&f.qs)
            .map(|((x, &y), q)| TrainSample { x, y, query: q })
            .collect()
    }

    fn hyper(lambda: f64) -> TrainHyper {
        TrainHyper {
            lambda,
            ..TrainHyper::default()
        }
    }

    #[test]
    fn matching_loss_cases() {
        assert_eq!(matching_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15, true);
        assert!((matching_loss(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() - 2.0).abs() < 1e-15);
        let want = 1.0 - 1.0 / 2f64.sqrt();
        assert!((matching_loss(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - want).abs() < 1e-15);
        assert!(matches!(matching_loss(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let mut f = fixture(1, false);
        let mut head = Head::new(8);
        head.register_all([0, 1]);
        f.head = head;
        f.ys = vec![1];
        let b = batch(&f);
        let (l, _) = local_loss(&b, &f.pool, &f.head, &f.bb, &hyper(0.0), 0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_key_contributes_nothing() {
        let mut f = fixture(1, false);
        f.pool.entry_mut(0).unwrap().key = f.qs[0].clone();
        let b = batch(&f);
        let (l0, _) = local_loss(&b, &f.pool, &f.head, &f.bb, &hyper(0.0), 0).unwrap();
        let (l1, _) = local_loss(&b, &f.pool, &f.head, &f.bb, &hyper(0.7), 0).unwrap();
        assert!((l0 - l1).abs() < 1e-14);
    }

    #[test]
    fn batch_loss_is_mean_of_per_sample_terms() {
        let f = fixture(5, true);
        let b = batch(&f);
        let h = hyper(0.5);
        let (l, _) = local_loss(&b, &f.pool, &f.head, &f.bb, &h, 0).unwrap();
        let stack = f.pool.stack(0).unwrap();
        let key = &f.pool.entry(0).unwrap().key;
        let mut sum = 0.0;
        for s in &b {
            let feat = f.bb.features(s.x, &stack).unwrap();
            let logits = f.head.logits(&feat).unwrap();
            sum += cross_entropy(&logits, f.head.row_of(s.y).unwrap()).unwrap()
                + 0.5 * (1.0 - cosine_sim(s.query, key).unwrap());
        }
        assert!((l - sum / 5.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_label_is_contract_error() {
        let mut f = fixture(2, false);
        f.ys[1] = 42;
        let b = batch(&f);
        assert!(matches!(
            local_loss(&b, &f.pool, &f.head, &f.bb, &hyper(0.5), 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn injection_of_own_features_equals_duplication() {
        let f = fixture(3, true);
        let b = batch(&f);
        let h = hyper(0.5);
        let stack = f.pool.stack(0).unwrap();
        let injected: Vec<Injected> = b
            .iter()
            .map(|s| Injected {
                class: s.y,
                vector: f.bb.features(s.x, &stack).unwrap(),
            })
            .collect();
        let (li, tape) = local_loss_injected(&b, &injected, &f.pool, &f.head, &f.bb, &h, 0).unwrap();
        assert_eq!(tape.union_count(), 6);
        let dup: Vec<TrainSample> = b.iter().chain(b.iter()).copied().collect();
        let (ld, _) = local_loss(&dup, &f.pool, &f.head, &f.bb, &h, 0).unwrap();
        assert!((li - ld).abs() < 1e-12);
    }

    #[test]
    fn injected_ce_is_averaged_over_union() {
        let f = fixture(2, false);
        let b = batch(&f);
        let h = hyper(0.0);
        let injected: Vec<Injected> = (0..3)
            .map(|i| Injected {
                class: i,
                vector: vec![0.1 * i as f64; 8],
            })
            .collect();
        let (l, _) = local_loss_injected(&b, &injected, &f.pool, &f.head, &f.bb, &h, 0).unwrap();
        let stack = f.pool.stack(0).unwrap();
        let mut sum = 0.0;
        for s in &b {
            let logits = f.head.logits(&f.bb.features(s.x, &stack).unwrap()).unwrap();
            sum += cross_entropy(&logits, f.head.row_of(s.y).unwrap()).unwrap();
        }
        for v in &injected {
            sum += cross_entropy(&f.head.logits(&v.vector).unwrap(), f.head.row_of(v.class).unwrap()).unwrap();
        }
        assert!((l - sum / 5.0).abs() < 1e-12);
        assert!(local_loss_injected(&b, &[], &f.pool, &f.head, &f.bb, &h, 0).is_err());
    }

    #[test]
    fn injected_only_class_row_receives_gradient() {
        let mut f = fixture(2, false);
        f.ys = vec![0, 0];
        let h = hyper(0.5);
        // without injection class 7 is never registered, so it has no row to update
        let (_, plain) = local_loss(&batch(&f), &f.pool, &f.head, &f.bb, &h, 0).unwrap();
        let g_plain = plain.backward(&f.bb).unwrap();
        assert_eq!(g_plain.head_weight.rows(), 3);

        f.head.register(7);
        let row7 = f.head.row_of(7).unwrap();
        let injected = vec![Injected {
            class: 7,
            vector: vec![0.5; 8],
        }];
        let b = batch(&f);
        let (_, inj) = local_loss_injected(&b, &injected, &f.pool, &f.head, &f.bb, &h, 0).unwrap();
        let g_inj = inj.backward(&f.bb).unwrap();
        assert!(g_inj.head_weight.row(row7).iter().all(|v| *v != 0.0));
        assert!(g_inj.head_bias[row7] < 0.0);
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_params_bitwise() {
        let f = fixture(2, true);
        let b = batch(&f);
        let (_, tape) = local_loss(&b, &f.pool, &f.head, &f.bb, &hyper(0.5), 0).unwrap();
        let g = tape.backward(&f.bb).unwrap();
        let (mut pool, mut head) = (f.pool.clone(), f.head.clone());
        sgd_step(&mut pool, &mut head, &g, 0.0).unwrap();
        assert_eq!(pool, f.pool);
        assert_eq!(head, f.head);
        let mut zero = g.clone();
        zero.global.iter_mut().for_each(|m| m.scale(0.0));
        zero.task_prompts.iter_mut().for_each(|m| m.scale(0.0));
        zero.key.iter_mut().for_each(|v| *v = 0.0);
        zero.head_weight.scale(0.0);
        zero.head_bias.iter_mut().for_each(|v| *v = 0.0);
        assert!(zero.is_zero());
        sgd_step(&mut pool, &mut head, &zero, 0.5).unwrap();
        assert_eq!(pool, f.pool);
        assert_eq!(head, f.head);
    }

    #[test]
    fn step_shape_mismatch_is_contract_error() {
        let mut f = fixture(2, false);
        let b = batch(&f);
        let (_, tape) = local_loss(&b, &f.pool, &f.head, &f.bb, &hyper(0.5), 0).unwrap();
        let g = tape.backward(&f.bb).unwrap();
        f.head.register(99);
        assert!(matches!(sgd_step(&mut f.pool, &mut f.head, &g, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn small_step_reduces_loss() {
        let mut f = fixture(6, true);
        let h = hyper(0.5);
        let (before, tape) = {
            let b = batch(&f);
            local_loss(&b, &f.pool, &f.head, &f.bb, &h, 0).unwrap()
        };
        let g = tape.backward(&f.bb).unwrap();
        sgd_step(&mut f.pool, &mut f.head, &g, 1e-3).unwrap();
        let b = batch(&f);
        let (after, _) = local_loss(&b, &f.pool, &f.head, &f.bb, &h, 0).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn hyper_validation_and_schedule() {
        TrainHyper::default().validate().unwrap();
        assert!(TrainHyper { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainHyper { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainHyper { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainHyper { batch_size: 0, ..Default::default() }.validate().is_err());
        let h = TrainHyper {
            lr: 1.0,
            schedule: LrSchedule::InverseDecay { delta: 4.0 },
            ..Default::default()
        };
        assert_eq!(h.lr_at(0), 1.0);
        assert_eq!(h.lr_at(4), 0.5);
    }
}
