use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FrozenBackbone;
use crate::datagen::{ClientPartition, Sample, TaskStream};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, AccuracyMatrix, CommTotals, MetricsReport};
use crate::numerics::{RngStream, StreamKey};
use crate::prompt::{train_local, Head, InjectionConfig, InjectionPlan, LocalTrace, PoolLayout, PromptPool, TrainHyper, TrainSample};
use crate::prototypes::{compute_prototypes, PrototypeSet};

use super::aggregate::{aggregate_params, aggregate_prototypes, client_weight, AggregationMode, ClientUpdate};
use super::audit::{AuditEvent, AuditLog};
use super::wire::{decode, encode, Payload, PayloadKind};

/// The four switches of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub prototypes: bool,
    pub augmentation: bool,
    pub weighted_aggregation: bool,
    pub head_aggregation: bool,
}

impl AblationFlags {
    pub const PIP: AblationFlags = AblationFlags {
        prototypes: true,
        augmentation: true,
        weighted_aggregation: true,
        head_aggregation: true,
    };

    /// Plain federated prompt learning: FedAvg of prompts and head.
    pub const BASELINE: AblationFlags = AblationFlags {
        prototypes: false,
        augmentation: false,
        weighted_aggregation: false,
        head_aggregation: true,
    };

    /// Configurations `A`..`G` and `PIP`; prototypes and augmentation switch together.
    pub fn from_letter(letter: &str) -> Result<Self> {
        let (proto, wagg, head) = match letter {
            "A" => (false, false, false),
            "B" => (true, false, false),
            "C" => (false, true, false),
            "D" => (true, true, false),
            "E" => (false, false, true),
            "F" => (true, false, true),
            "G" => (false, true, true),
            "PIP" => (true, true, true),
            _ => return Err(Error::Config(format!("unknown ablation configuration `{letter}`"))),
        };
        Ok(AblationFlags {
            prototypes: proto,
            augmentation: proto,
            weighted_aggregation: wagg,
            head_aggregation: head,
        })
    }

    pub fn letter(&self) -> Option<&'static str> {
        if self.augmentation && !self.prototypes {
            return None;
        }
        if self.prototypes && !self.augmentation {
            return None;
        }
        Some(match (self.prototypes, self.weighted_aggregation, self.head_aggregation) {
            (false, false, false) => "A",
            (true, false, false) => "B",
            (false, true, false) => "C",
            (true, true, false) => "D",
            (false, false, true) => "E",
            (true, false, true) => "F",
            (false, true, true) => "G",
            (true, true, true) => "PIP",
        })
    }

    /// Weighted aggregation off means every client counts once, for
    /// parameters and prototypes alike.
    pub fn aggregation_mode(&self) -> AggregationMode {
        if self.weighted_aggregation {
            AggregationMode::Weighted
        } else {
            AggregationMode::FedAvg
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub n_clients: usize,
    pub selected: usize,
    pub rounds: usize,
    pub tasks: usize,
    pub flags: AblationFlags,
    /// Augmentation count, missing-class restriction, first-epoch bootstrap.
    pub injection: InjectionConfig,
    /// Error on differing head class lists instead of per-row alignment.
    pub strict_head: bool,
    /// Clients send prototypes on every k-th round of a task (1 = every round).
    pub prototype_every: usize,
    /// Send prototype means only (variances arrive as zero).
    pub mean_only_wire: bool,
    /// Train the selected clients of a round concurrently.
    pub parallel: bool,
}

impl ProtocolConfig {
    pub fn reference() -> Self {
        ProtocolConfig {
            n_clients: 6,
            selected: 3,
            rounds: 25,
            tasks: 5,
            flags: AblationFlags::PIP,
            injection: InjectionConfig::default(),
            strict_head: false,
            prototype_every: 1,
            mean_only_wire: false,
            parallel: false,
        }
    }

    pub fn rounds_per_task(&self) -> usize {
        self.rounds / self.tasks.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::Config("n_clients must be at least 1".into()));
        }
        if self.selected == 0 || self.selected > self.n_clients {
            return Err(Error::Config(format!(
                "selected clients {} must lie in 1..={}",
                self.selected, self.n_clients
            )));
        }
        if self.tasks == 0 || self.rounds == 0 || self.rounds % self.tasks != 0 {
            return Err(Error::Config(format!("rounds {} not divisible by tasks {}", self.rounds, self.tasks)));
        }
        if self.prototype_every == 0 {
            return Err(Error::Config("prototype_every must be at least 1".into()));
        }
        if self.flags.prototypes && self.flags.augmentation && self.injection.m == 0 {
            return Err(Error::Config("augmentation count m must be at least 1".into()));
        }
        Ok(())
    }

    fn injection_config(&self) -> InjectionConfig {
        InjectionConfig {
            augment: self.flags.augmentation,
            ..self.injection
        }
    }
}

/// First `l` entries of a uniform permutation of `0..n`.
pub fn select_clients(n: usize, l: usize, rng: &mut RngStream) -> Result<Vec<u32>> {
    if l > n {
        return Err(Error::Config(format!("cannot select {l} of {n} clients")));
    }
    Ok(rng.permutation(n).into_iter().take(l).map(|i| i as u32).collect())
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: u32,
    pub pool: PromptPool,
    pub head: Head,
    /// Rounds this client has been selected in, across all tasks so far.
    pub rho: u64,
    queries: BTreeMap<usize, Vec<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct GlobalState {
    pub pool: PromptPool,
    /// Head used for broadcast and evaluation.
    pub head: Head,
    pub z_g: PrototypeSet,
    pub round: usize,
    pub task: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub task: usize,
    /// In selection order.
    pub selected: Vec<u32>,
    pub skipped: Vec<u32>,
    /// Ascending client id.
    pub traces: Vec<(u32, LocalTrace)>,
    /// Ascending client id.
    pub uploads: Vec<Upload>,
    pub broadcast_bytes: usize,
    pub zg_at_start: usize,
    pub variance_clamps: usize,
}

/// Size and shape of one received update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Upload {
    pub client: u32,
    pub bytes: usize,
    pub head_classes: usize,
    pub proto_classes: usize,
}

pub struct ExperimentSetup<'a> {
    pub method: String,
    pub backbone: &'a FrozenBackbone,
    pub layout: PoolLayout,
    pub hyper: TrainHyper,
    pub protocol: ProtocolConfig,
    pub stream: &'a TaskStream,
    /// One partition per task.
    pub partitions: &'a [ClientPartition],
    pub seed: u64,
    pub reference_avg: Option<f64>,
}

pub struct Outcome {
    pub report: MetricsReport,
    pub audit: AuditLog,
    pub participation: Vec<u64>,
    pub rounds: Vec<RoundReport>,
    pub global: GlobalState,
}

struct ClientResult {
    client_id: u32,
    bytes: Vec<u8>,
    trace: LocalTrace,
}

/// Driver state shared by all rounds of one experiment.
pub struct Federation<'a> {
    setup: &'a ExperimentSetup<'a>,
    train_sets: Vec<Vec<&'a Sample>>,
    pub global: GlobalState,
    pub clients: Vec<ClientState>,
    pub audit: AuditLog,
}

impl<'a> Federation<'a> {
    pub fn new(setup: &'a ExperimentSetup<'a>) -> Result<Self> {
        let p = &setup.protocol;
        p.validate()?;
        setup.hyper.validate()?;
        setup.layout.validate_for(setup.backbone.config())?;
        if setup.stream.n_tasks() != p.tasks || setup.partitions.len() != p.tasks {
            return Err(Error::Config(format!(
                "{} tasks configured, stream has {} and {} partitions",
                p.tasks,
                setup.stream.n_tasks(),
                setup.partitions.len()
            )));
        }
        if let Some(bad) = setup.partitions.iter().find(|q| q.n_clients() != p.n_clients) {
            return Err(Error::Config(format!("partition has {} clients, expected {}", bad.n_clients(), p.n_clients)));
        }
        let bb = setup.backbone.config();
        if let Some(t) = setup.stream.tasks.iter().find(|t| t.n_tokens != bb.n_tokens || t.d_in != bb.d_in) {
            return Err(Error::Config(format!(
                "data tokens {}×{} do not match backbone {}×{}",
                t.n_tokens, t.d_in, bb.n_tokens, bb.d_in
            )));
        }
        let dim = setup.backbone.dim();
        let pool = PromptPool::new(setup.layout.clone(), dim, setup.seed)?;
        let clients = (0..p.n_clients as u32)
            .map(|client_id| ClientState {
                client_id,
                pool: pool.clone(),
                head: Head::new(dim),
                rho: 0,
                queries: BTreeMap::new(),
            })
            .collect();
        Ok(Federation {
            setup,
            train_sets: setup.stream.tasks.iter().map(|t| t.train().collect()).collect(),
            global: GlobalState {
                pool,
                head: Head::new(dim),
                z_g: PrototypeSet::empty(0),
                round: 0,
                task: 0,
            },
            clients,
            audit: AuditLog::default(),
        })
    }

    /// Resets prototypes and opens the prompt entry for `task`.
    pub fn start_task(&mut self, task: usize) {
        self.global.task = task;
        self.global.z_g = PrototypeSet::empty(task);
        self.global.pool.ensure_tasks(task + 1);
    }

    fn shard_len(&self, client: u32, task: usize) -> usize {
        self.setup.partitions[task].shards[client as usize].len()
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        let s = self.setup;
        let p = &s.protocol;
        let (round, task) = (self.global.round, self.global.task);
        let (r1, t1) = (round + 1, task + 1);
        let round_in_task = round % p.rounds_per_task();

        let mut rng = RngStream::new(s.seed, StreamKey::new("select", round as u64, task as u64, 0));
        let mut selected = Vec::new();
        let mut skipped = Vec::new();
        for c in select_clients(p.n_clients, p.n_clients, &mut rng)? {
            if selected.len() == p.selected {
                break;
            }
            if self.shard_len(c, task) == 0 {
                skipped.push(c);
            } else {
                selected.push(c);
            }
        }
        if selected.is_empty() {
            return Err(Error::Protocol(format!("no client holds data for task {t1}")));
        }

        let zg_at_start = self.global.z_g.len();
        self.audit.push(r1, t1, None, AuditEvent::Zg, zg_at_start as u64, None);
        let broadcast = encode(&Payload {
            kind: PayloadKind::Global,
            sender: round as u32,
            task: task as u32,
            omega: 0,
            mean_only: p.mean_only_wire,
            tensors: self.global.pool.export(),
            head: self.global.head.export(),
            prototypes: self.global.z_g.clone(),
        })?;
        self.audit.push(r1, t1, None, AuditEvent::Broadcast, broadcast.len() as u64, None);
        for &c in &skipped {
            self.audit.push(r1, t1, Some(c), AuditEvent::Skip, 0, None);
        }
        for &c in &selected {
            self.audit.push(r1, t1, Some(c), AuditEvent::Select, 0, None);
        }

        let chosen: BTreeSet<u32> = selected.iter().copied().collect();
        let send_protos = p.flags.prototypes && round_in_task % p.prototype_every == 0;
        let train_sets = &self.train_sets;
        let work = |c: &mut ClientState| -> Result<ClientResult> {
            let received = decode(&broadcast)?;
            c.pool.import(&received.tensors)?;
            if p.flags.head_aggregation {
                c.head = Head::from_params(s.backbone.dim(), received.head)?;
            }
            c.rho += 1;

            let shard = &s.partitions[task].shards[c.client_id as usize];
            let samples: Vec<&Sample> = shard.iter().map(|&i| train_sets[task][i]).collect();
            let queries = match c.queries.get(&task) {
                Some(q) => q.clone(),
                None => {
                    let q = samples
                        .iter()
                        .map(|x| s.backbone.features(&x.x, &[]))
                        .collect::<Result<Vec<_>>>()?;
                    c.queries.insert(task, q.clone());
                    q
                }
            };
            let data: Vec<TrainSample> = samples
                .iter()
                .zip(&queries)
                .map(|(x, q)| TrainSample {
                    x: &x.x,
                    y: x.y,
                    query: q,
                })
                .collect();
            let plan = InjectionPlan {
                received: Some(&received.prototypes),
                cfg: p.injection_config(),
            };
            let mut rng = RngStream::new(
                s.seed,
                StreamKey::new("client-train", c.client_id as u64, round as u64, task as u64),
            );
            let trace = train_local(
                &data,
                p.flags.prototypes.then_some(&plan),
                &mut c.pool,
                &mut c.head,
                s.backbone,
                &s.hyper,
                task,
                &mut rng,
            )?;

            let prototypes = if send_protos {
                let stack = c.pool.stack(task)?;
                compute_prototypes(task, samples.iter().map(|x| (x.y, &x.x)), |x| s.backbone.features(x, &stack))?
            } else {
                PrototypeSet::empty(task)
            };
            let omega = client_weight(c.rho, samples.len() as u64)?;
            let bytes = encode(&Payload {
                kind: PayloadKind::Update,
                sender: c.client_id,
                task: task as u32,
                omega,
                mean_only: p.mean_only_wire,
                tensors: c.pool.export(),
                head: c.head.export(),
                prototypes,
            })?;
            Ok(ClientResult {
                client_id: c.client_id,
                bytes,
                trace,
            })
        };
        let results: Vec<Result<ClientResult>> = if p.parallel {
            self.clients
                .par_iter_mut()
                .filter(|c| chosen.contains(&c.client_id))
                .map(work)
                .collect()
        } else {
            self.clients
                .iter_mut()
                .filter(|c| chosen.contains(&c.client_id))
                .map(work)
                .collect()
        };
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;

        let mut updates = Vec::with_capacity(results.len());
        let mut report = RoundReport {
            round,
            task,
            selected,
            skipped,
            broadcast_bytes: broadcast.len(),
            zg_at_start,
            ..Default::default()
        };
        for r in results {
            let payload = decode(&r.bytes)?;
            if payload.kind != PayloadKind::Update || payload.sender != r.client_id || payload.task as usize != task {
                return Err(Error::Protocol(format!("malformed update from client {}", r.client_id)));
            }
            self.audit.push(r1, t1, Some(r.client_id), AuditEvent::Train, 0, r.trace.final_loss());
            self.audit.push(r1, t1, Some(r.client_id), AuditEvent::Upload, r.bytes.len() as u64, None);
            report.uploads.push(Upload {
                client: r.client_id,
                bytes: r.bytes.len(),
                head_classes: payload.head.classes.len(),
                proto_classes: payload.prototypes.len(),
            });
            report.traces.push((r.client_id, r.trace));
            updates.push(ClientUpdate {
                client_id: payload.sender,
                task_id: task,
                omega: payload.omega,
                pool: payload.tensors,
                head: payload.head,
                prototypes: payload.prototypes,
                payload_bytes: r.bytes.len(),
            });
        }

        let mode = p.flags.aggregation_mode();
        let (pool, head) = aggregate_params(&updates, mode, p.strict_head)?;
        self.global.pool.import(&pool)?;
        let dim = s.backbone.dim();
        self.global.head = if p.flags.head_aggregation {
            Head::from_params(dim, head)?
        } else {
            // no shared head: the lowest-id participant's private head stands in for evaluation
            Head::from_params(dim, updates.iter().min_by_key(|u| u.client_id).unwrap().head.clone())?
        };
        if let Some((z, clamps)) = aggregate_prototypes(&updates, mode)? {
            self.global.z_g = z;
            report.variance_clamps = clamps;
        }
        self.global.round += 1;
        Ok(report)
    }

    /// Accuracy of the global model on tasks `0..=task`.
    pub fn evaluate(&self, task: usize) -> Result<(f64, Vec<f64>)> {
        let tests: Vec<&crate::datagen::LabeledDataset> = self.setup.stream.tasks[..=task].iter().collect();
        evaluate(&self.global.pool, &self.global.head, self.setup.backbone, &tests)
    }
}

/// All tasks in order, `R/T` rounds each, evaluating after every task.
pub fn run_experiment(setup: &ExperimentSetup<'_>) -> Result<Outcome> {
    let start = Instant::now();
    let mut fed = Federation::new(setup)?;
    let p = &setup.protocol;
    let mut matrix = AccuracyMatrix::new();
    let mut rounds = Vec::with_capacity(p.rounds);
    let mut comm = CommTotals::default();
    let mut clamps = 0u64;
    for task in 0..p.tasks {
        fed.start_task(task);
        for _ in 0..p.rounds_per_task() {
            let r = fed.run_round()?;
            comm.uplink_bytes += r.uploads.iter().map(|u| u.bytes as u64).sum::<u64>();
            comm.downlink_bytes += (r.broadcast_bytes * r.selected.len()) as u64;
            comm.updates += r.uploads.len() as u64;
            clamps += r.variance_clamps as u64;
            rounds.push(r);
        }
        let (agg, per_task) = fed.evaluate(task)?;
        matrix.push(per_task, agg)?;
    }
    let mut report = MetricsReport::from_matrix(&setup.method, setup.seed, matrix, setup.reference_avg)?;
    report.comm = comm;
    report.variance_clamps = clamps;
    report.round_losses = rounds
        .iter()
        .map(|r| {
            let l: Vec<f64> = r.traces.iter().filter_map(|(_, t)| t.final_loss()).collect();
            l.iter().sum::<f64>() / l.len().max(1) as f64
        })
        .collect();
    report.wall_time_s = start.elapsed().as_secs_f64();
    let participation = fed.clients.iter().map(|c| c.rho).collect();
    Ok(Outcome {
        report,
        audit: fed.audit,
        participation,
        rounds,
        global: fed.global,
    })
}
