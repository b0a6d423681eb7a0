use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::prototypes::{augment, compute_prototypes, PrototypeSet};

use super::head::Head;
use super::loss::{local_loss, local_loss_injected, sgd_step, Injected, TrainHyper, TrainSample};
use super::pool::PromptPool;

/// How prototype vectors enter local training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    /// Inject `μ + β·σ` samples besides `μ`. Federated runs take this from
    /// the augmentation switch, so it is not part of the config file.
    #[serde(skip)]
    pub augment: bool,
    /// Augmented vectors per prototype.
    pub m: usize,
    /// Only classes missing from the local data are augmented; present ones contribute `μ`.
    pub missing_only: bool,
    /// With nothing received, compute local prototypes after the first epoch and inject them afterwards.
    pub bootstrap_local: bool,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            augment: true,
            m: 4,
            missing_only: false,
            bootstrap_local: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InjectionPlan<'a> {
    /// The global prototype set received this round, if any.
    pub received: Option<&'a PrototypeSet>,
    pub cfg: InjectionConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalTrace {
    pub batch_losses: Vec<f64>,
    pub epoch_means: Vec<f64>,
    pub steps: usize,
    /// Steps that used the injected loss.
    pub injected_steps: usize,
}

impl LocalTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.batch_losses.last().copied()
    }
}

/// Vectors appended to every batch of one epoch, in ascending class order.
pub fn injection_vectors(
    set: &PrototypeSet,
    local_classes: &BTreeSet<u32>,
    cfg: &InjectionConfig,
    rng: &mut RngStream,
) -> Result<Vec<Injected>> {
    let mut out = Vec::new();
    for z in set.iter() {
        let expand = cfg.augment && !(cfg.missing_only && local_classes.contains(&z.class_id));
        if expand {
            for vector in augment(z, cfg.m, rng)? {
                out.push(Injected {
                    class: z.class_id,
                    vector,
                });
            }
        } else {
            out.push(Injected {
                class: z.class_id,
                vector: z.mean.clone(),
            });
        }
    }
    Ok(out)
}

/// Local epochs of shuffled mini-batch SGD on task `task`'s prompts and the head.
///
/// `plan == None` trains on real samples only. With a plan, the received
/// prototypes (or, if enabled, prototypes bootstrapped after the first
/// epoch) are re-augmented at the start of each epoch and appended to
/// every batch.
#[allow(clippy::too_many_arguments)]
pub fn train_local(
    data: &[TrainSample<'_>],
    plan: Option<&InjectionPlan<'_>>,
    pool: &mut PromptPool,
    head: &mut Head,
    backbone: &FrozenBackbone,
    hyper: &TrainHyper,
    task: usize,
    rng: &mut RngStream,
) -> Result<LocalTrace> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("local training needs at least one sample".into()));
    }
    let local_classes: BTreeSet<u32> = data.iter().map(|s| s.y).collect();
    head.register_all(local_classes.iter().copied());
    let mut protos: Option<PrototypeSet> = plan
        .and_then(|p| p.received)
        .filter(|s| !s.is_empty())
        .cloned();
    if let Some(p) = &protos {
        head.register_all(p.classes());
    }

    let mut trace = LocalTrace::default();
    for epoch in 0..hyper.epochs {
        let injected = match (&protos, plan) {
            (Some(p), Some(plan)) => injection_vectors(p, &local_classes, &plan.cfg, rng)?,
            _ => Vec::new(),
        };
        let order = rng.permutation(data.len());
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| data[i]).collect();
            let (loss, tape) = if injected.is_empty() {
                local_loss(&batch, pool, head, backbone, hyper, task)?
            } else {
                trace.injected_steps += 1;
                local_loss_injected(&batch, &injected, pool, head, backbone, hyper, task)?
            };
            let grads = tape.backward(backbone)?;
            sgd_step(pool, head, &grads, hyper.lr_at(trace.steps))?;
            trace.steps += 1;
            trace.batch_losses.push(loss);
            epoch_sum += loss;
            epoch_batches += 1;
        }
        trace.epoch_means.push(epoch_sum / epoch_batches as f64);

        let bootstrap = plan.is_some_and(|p| p.cfg.bootstrap_local);
        if epoch == 0 && protos.is_none() && bootstrap {
            let stack = pool.stack(task)?;
            protos = Some(compute_prototypes(task, data.iter().map(|s| (s.y, s.x)), |x| {
                backbone.features(x, &stack)
            })?);
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::numerics::{Mat, StreamKey};
    use crate::prompt::pool::PoolLayout;
    use crate::prototypes::GaussianPrototype;

    struct Toy {
        bb: FrozenBackbone,
        xs: Vec<Mat>,
        ys: Vec<u32>,
        qs: Vec<Vec<f64>>,
    }

    fn toy(n: usize, seed: u64) -> Toy {
        let cfg = BackboneConfig {
            d_in: 4,
            n_tokens: 3,
            dim: 8,
            layers: 2,
            heads: 2,
            seed: 1,
            attach_layers: vec![0, 1],
        };
        let bb = FrozenBackbone::build(&cfg).unwrap();
        let mut r = RngStream::new(seed, StreamKey::new("train-toy", 0, 0, 0));
        let ys: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let xs: Vec<Mat> = ys
            .iter()
            .map(|&y| {
                let sign = if y == 0 { 1.0 } else { -1.0 };
                Mat::from_fn(3, 4, |_, _| 2.0 * sign + 0.3 * r.normal())
            })
            .collect();
        let qs = xs.iter().map(|x| bb.features(x, &[]).unwrap()).collect();
        Toy { bb, xs, ys, qs }
    }

    fn samples(t: &Toy) -> Vec<TrainSample<'_>> {
        t.xs.iter()
            .zip(&t.ys)
            .zip(&t.qs)
            .map(|((x, &y), q)| TrainSample { x, y, query: q })
            .collect()
    }

    fn fresh_pool() -> PromptPool {
        let mut p = PromptPool::new(PoolLayout::desk_dualp(), 8, 4).unwrap();
        p.add_task();
        p
    }

    #[test]
    fn one_epoch_full_batch_is_one_step() {
        let t = toy(10, 0);
        let hyper = TrainHyper {
            epochs: 1,
            batch_size: 10,
            ..Default::default()
        };
        let (mut pool, mut head) = (fresh_pool(), Head::new(8));
        let mut rng = RngStream::new(0, StreamKey::new("client-train", 0, 0, 0));
        let tr = train_local(&samples(&t), None, &mut pool, &mut head, &t.bb, &hyper, 0, &mut rng).unwrap();
        assert_eq!(tr.steps, 1);
        assert_eq!(tr.batch_losses.len(), 1);
    }

    #[test]
    fn loss_descends_on_separable_toy() {
        let t = toy(20, 1);
        let hyper = TrainHyper {
            lr: 0.1,
            epochs: 10,
            batch_size: 4,
            ..Default::default()
        };
        let (mut pool, mut head) = (fresh_pool(), Head::new(8));
        let mut rng = RngStream::new(1, StreamKey::new("client-train", 0, 0, 0));
        let before = t.bb.checksum();
        let tr = train_local(&samples(&t), None, &mut pool, &mut head, &t.bb, &hyper, 0, &mut rng).unwrap();
        assert_eq!(tr.steps, 50);
        assert!(tr.batch_losses.last().unwrap() < tr.batch_losses.first().unwrap());
        assert_eq!(t.bb.checksum(), before);
        assert!(tr.batch_losses.iter().all(|l| *l >= 0.0));
    }

    #[test]
    fn same_seed_same_params() {
        let t = toy(12, 2);
        let hyper = TrainHyper {
            batch_size: 5,
            ..Default::default()
        };
        let run = || {
            let (mut pool, mut head) = (fresh_pool(), Head::new(8));
            let mut rng = RngStream::new(7, StreamKey::new("client-train", 3, 1, 0));
            train_local(&samples(&t), None, &mut pool, &mut head, &t.bb, &hyper, 0, &mut rng).unwrap();
            (pool, head)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn injection_registers_missing_classes() {
        let t = toy(8, 3);
        let mut set = PrototypeSet::empty(0);
        for c in [0u32, 1, 5] {
            set.insert(GaussianPrototype {
                class_id: c,
                mean: vec![0.1 * c as f64; 8],
                var: vec![0.01; 8],
                support: 3,
            });
        }
        let plan = InjectionPlan {
            received: Some(&set),
            cfg: InjectionConfig::default(),
        };
        let (mut pool, mut head) = (fresh_pool(), Head::new(8));
        let mut rng = RngStream::new(3, StreamKey::new("client-train", 0, 0, 0));
        let tr = train_local(
            &samples(&t),
            Some(&plan),
            &mut pool,
            &mut head,
            &t.bb,
            &TrainHyper::default(),
            0,
            &mut rng,
        )
        .unwrap();
        assert!(head.row_of(5).is_some());
        assert_eq!(tr.injected_steps, tr.steps);
        // class 5 was trained toward its prototype
        assert!(head.weight().row(head.row_of(5).unwrap()).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn empty_received_set_trains_plainly_unless_bootstrapping() {
        let t = toy(8, 4);
        let empty = PrototypeSet::empty(0);
        let hyper = TrainHyper {
            batch_size: 4,
            ..Default::default()
        };
        let run = |bootstrap: bool| {
            let plan = InjectionPlan {
                received: Some(&empty),
                cfg: InjectionConfig {
                    bootstrap_local: bootstrap,
                    ..Default::default()
                },
            };
            let (mut pool, mut head) = (fresh_pool(), Head::new(8));
            let mut rng = RngStream::new(4, StreamKey::new("client-train", 0, 0, 0));
            train_local(&samples(&t), Some(&plan), &mut pool, &mut head, &t.bb, &hyper, 0, &mut rng).unwrap()
        };
        assert_eq!(run(false).injected_steps, 0);
        // second epoch injects the bootstrapped local prototypes
        assert_eq!(run(true).injected_steps, 2);
    }

    #[test]
    fn injection_vectors_follow_policy() {
        let mut set = PrototypeSet::empty(0);
        for c in [1u32, 2] {
            set.insert(GaussianPrototype {
                class_id: c,
                mean: vec![c as f64; 3],
                var: vec![1.0; 3],
                support: 1,
            });
        }
        let local: BTreeSet<u32> = [1].into_iter().collect();
        let mut rng = RngStream::new(0, StreamKey::new("aug", 0, 0, 0));
        let all = injection_vectors(&set, &local, &InjectionConfig::default(), &mut rng).unwrap();
        assert_eq!(all.len(), 10);
        let cfg = InjectionConfig {
            missing_only: true,
            ..Default::default()
        };
        let some = injection_vectors(&set, &local, &cfg, &mut rng).unwrap();
        assert_eq!(some.len(), 1 + 5);
        assert_eq!(some[0].vector, vec![1.0; 3]);
        let cfg = InjectionConfig {
            augment: false,
            ..Default::default()
        };
        let means = injection_vectors(&set, &local, &cfg, &mut rng).unwrap();
        assert_eq!(means.iter().map(|v| v.class).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn empty_data_is_rejected() {
        let t = toy(2, 5);
        let (mut pool, mut head) = (fresh_pool(), Head::new(8));
        let mut rng = RngStream::new(0, StreamKey::new("client-train", 0, 0, 0));
        let r = train_local(&[], None, &mut pool, &mut head, &t.bb, &TrainHyper::default(), 0, &mut rng);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
