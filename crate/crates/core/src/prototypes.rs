//! Per-class diagonal Gaussian prototypes of deep features.
//!
//! A client summarises each locally present class by the mean and the biased
//! (divide-by-count) per-dimension variance of its features. The server merges
//! client summaries with weights `ω_l`; the merge is exact: it equals the
//! pooled weighted statistics of the clients' raw features, where each client's
//! samples carry total weight `ω_l`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrototype {
    pub class_id: u32,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub support: u64,
}

impl GaussianPrototype {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub task_id: usize,
    protos: BTreeMap<u32, GaussianPrototype>,
}

impl PrototypeSet {
    pub fn empty(task_id: usize) -> Self {
        PrototypeSet {
            task_id,
            protos: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, proto: GaussianPrototype) -> Option<GaussianPrototype> {
        self.protos.insert(proto.class_id, proto)
    }

    pub fn get(&self, class_id: u32) -> Option<&GaussianPrototype> {
        self.protos.get(&class_id)
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    /// Prototypes in ascending class order.
    pub fn iter(&self) -> impl Iterator<Item = &GaussianPrototype> {
        self.protos.values()
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.protos.keys().copied()
    }

    pub fn dim(&self) -> Option<usize> {
        self.protos.values().next().map(|p| p.dim())
    }
}

/// Streaming mean/M2 accumulator for one class.
struct Accumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Accumulator {
    fn new(dim: usize) -> Self {
        Accumulator {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }
}

/// Prototypes from precomputed `(class, feature)` pairs.
pub fn prototypes_from_features<'a, I>(task_id: usize, features: I) -> Result<PrototypeSet>
where
    I: IntoIterator<Item = (u32, &'a [f64])>,
{
    let mut acc: BTreeMap<u32, Accumulator> = BTreeMap::new();
    let mut dim = None;
    for (class, f) in features {
        match dim {
            None => dim = Some(f.len()),
            Some(d) if d != f.len() => {
                return Err(Error::shape("compute_prototypes", format!("feature width {} vs {d}", f.len())))
            }
            _ => {}
        }
        acc.entry(class).or_insert_with(|| Accumulator::new(f.len())).push(f);
    }
    if acc.is_empty() {
        return Err(Error::Contract("prototypes need at least one sample".into()));
    }
    let mut set = PrototypeSet::empty(task_id);
    for (class_id, a) in acc {
        let n = a.count as f64;
        set.insert(GaussianPrototype {
            class_id,
            var: a.m2.iter().map(|s| (s / n).max(0.0)).collect(),
            mean: a.mean,
            support: a.count,
        });
    }
    Ok(set)
}

/// Mean and biased variance of `forward(x)` for every class present in `samples`.
pub fn compute_prototypes<X, I, F>(task_id: usize, samples: I, mut forward: F) -> Result<PrototypeSet>
where
    I: IntoIterator<Item = (u32, X)>,
    F: FnMut(X) -> Result<Vec<f64>>,
{
    let feats = samples
        .into_iter()
        .map(|(c, x)| forward(x).map(|f| (c, f)))
        .collect::<Result<Vec<_>>>()?;
    prototypes_from_features(task_id, feats.iter().map(|(c, f)| (*c, f.as_slice())))
}

/// `{μ} ∪ {μ + β_i σ}` for `i = 1..m`, one scalar `β_i ∈ (0, 1)` per vector.
pub fn augment(z: &GaussianPrototype, m: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    if m == 0 {
        return Err(Error::Config("augmentation count must be at least 1".into()));
    }
    let std = z.std();
    let mut out = Vec::with_capacity(m + 1);
    out.push(z.mean.clone());
    for _ in 0..m {
        let beta = rng.open_unit();
        out.push(z.mean.iter().zip(&std).map(|(mu, s)| mu + beta * s).collect());
    }
    Ok(out)
}

/// One client's contribution to a class merge.
#[derive(Clone, Copy, Debug)]
pub struct MergeEntry<'a> {
    pub proto: &'a GaussianPrototype,
    pub weight: f64,
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Merged {
    pub proto: GaussianPrototype,
    /// Dimensions whose variance came out slightly negative and was set to zero.
    pub clamped: usize,
}

const NEG_VAR_TOLERANCE: f64 = 1e-12;

/// Weighted Gaussian merge over the entries with `present == true`.
pub fn merge_weighted(entries: &[MergeEntry<'_>]) -> Result<Merged> {
    let live: Vec<&MergeEntry> = entries.iter().filter(|e| e.present).collect();
    let Some(first) = live.first() else {
        let class = entries.first().map_or(0, |e| e.proto.class_id);
        return Err(Error::AbsentClass(class));
    };
    let class_id = first.proto.class_id;
    let dim = first.proto.dim();
    let mut total = 0.0;
    let mut mean = vec![0.0; dim];
    let mut second = vec![0.0; dim];
    let mut support = 0;
    for e in &live {
        if e.proto.class_id != class_id || e.proto.dim() != dim {
            return Err(Error::Contract(format!(
                "merging class {} (dim {}) with class {class_id} (dim {dim})",
                e.proto.class_id,
                e.proto.dim()
            )));
        }
        if !(e.weight > 0.0) || !e.weight.is_finite() {
            return Err(Error::Contract(format!("merge weight must be positive, got {}", e.weight)));
        }
        total += e.weight;
        support += e.proto.support;
        for i in 0..dim {
            let mu = e.proto.mean[i];
            mean[i] += e.weight * mu;
            second[i] += e.weight * (mu * mu + e.proto.var[i]);
        }
    }
    let mut clamped = 0;
    for i in 0..dim {
        mean[i] /= total;
        let v = second[i] / total - mean[i] * mean[i];
        if v < 0.0 {
            if v < -NEG_VAR_TOLERANCE * (1.0 + mean[i] * mean[i]) {
                return Err(Error::Contract(format!("merged variance {v} in dimension {i}")));
            }
            clamped += 1;
            second[i] = 0.0;
        } else {
            second[i] = v;
        }
    }
    Ok(Merged {
        proto: GaussianPrototype {
            class_id,
            mean,
            var: second,
            support,
        },
        clamped,
    })
}

/// Global prototype set: union over classes, each merged across the clients
/// that reported it.
pub fn aggregate_prototype_sets(sets: &[(&PrototypeSet, f64)]) -> Result<(PrototypeSet, usize)> {
    let Some((head, _)) = sets.first() else {
        return Err(Error::Protocol("no prototype sets to aggregate".into()));
    };
    let task_id = head.task_id;
    if let Some((bad, _)) = sets.iter().find(|(s, _)| s.task_id != task_id) {
        return Err(Error::Contract(format!(
            "prototype sets from tasks {task_id} and {}",
            bad.task_id
        )));
    }
    let mut classes: Vec<u32> = sets.iter().flat_map(|(s, _)| s.classes()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = PrototypeSet::empty(task_id);
    let mut clamps = 0;
    for class in classes {
        let entries: Vec<MergeEntry> = sets
            .iter()
            .filter_map(|(s, w)| {
                s.get(class).map(|p| MergeEntry {
                    proto: p,
                    weight: *w,
                    present: true,
                })
            })
            .collect();
        let merged = merge_weighted(&entries)?;
        clamps += merged.clamped;
        out.insert(merged.proto);
    }
    Ok((out, clamps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::StreamKey;
    use proptest::prelude::*;

    fn proto(class_id: u32, mean: &[f64], var: &[f64], support: u64) -> GaussianPrototype {
        GaussianPrototype {
            class_id,
            mean: mean.to_vec(),
            var: var.to_vec(),
            support,
        }
    }

    /// Two-pass weighted mean and variance of raw points.
    fn pooled(points: &[(f64, Vec<f64>)]) -> (Vec<f64>, Vec<f64>) {
        let dim = points[0].1.len();
        let w: f64 = points.iter().map(|(w, _)| w).sum();
        let mut mean = vec![0.0; dim];
        for (wi, x) in points {
            for i in 0..dim {
                mean[i] += wi * x[i];
            }
        }
        mean.iter_mut().for_each(|m| *m /= w);
        let mut var = vec![0.0; dim];
        for (wi, x) in points {
            for i in 0..dim {
                var[i] += wi * (x[i] - mean[i]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= w);
        (mean, var)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn single_sample_classes_have_zero_variance() {
        let f1 = [1.0, 2.0];
        let f2 = [-3.0, 0.5];
        let set = prototypes_from_features(0, [(4, &f1[..]), (9, &f2[..])]).unwrap();
        assert_eq!(set.len(), 2);
        let p = set.get(4).unwrap();
        assert_eq!(p.mean, vec![1.0, 2.0]);
        assert_eq!(p.var, vec![0.0, 0.0]);
        assert_eq!(p.support, 1);
    }

    #[test]
    fn biased_variance_by_hand() {
        let a = [1.0];
        let b = [3.0];
        let set = prototypes_from_features(0, [(0, &a[..]), (0, &b[..])]).unwrap();
        let p = set.get(0).unwrap();
        assert_eq!(p.mean, vec![2.0]);
        assert_eq!(p.var, vec![1.0]);
        assert_eq!(p.support, 2);
    }

    #[test]
    fn streaming_statistics_match_two_pass() {
        let mut r = RngStream::new(1, StreamKey::new("proto-2pass", 0, 0, 0));
        let feats: Vec<(u32, Vec<f64>)> = (0..200)
            .map(|_| {
                let c = r.index(3) as u32;
                (c, (0..7).map(|_| 2.0 * r.normal() + c as f64).collect())
            })
            .collect();
        let set = prototypes_from_features(0, feats.iter().map(|(c, f)| (*c, f.as_slice()))).unwrap();
        for class in 0..3u32 {
            let pts: Vec<(f64, Vec<f64>)> = feats
                .iter()
                .filter(|(c, _)| *c == class)
                .map(|(_, f)| (1.0, f.clone()))
                .collect();
            let (m, v) = pooled(&pts);
            let p = set.get(class).unwrap();
            for i in 0..7 {
                assert!((p.mean[i] - m[i]).abs() < 1e-12);
                assert!((p.var[i] - v[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_data_is_rejected() {
        let none: Vec<(u32, &[f64])> = Vec::new();
        assert!(prototypes_from_features(0, none).is_err());
    }

    #[test]
    fn compute_prototypes_runs_forward() {
        let xs = [(0u32, 1.0f64), (0, 3.0), (1, 5.0)];
        let set = compute_prototypes(2, xs, |x| Ok(vec![x, 2.0 * x])).unwrap();
        assert_eq!(set.task_id, 2);
        assert_eq!(set.get(0).unwrap().mean, vec![2.0, 4.0]);
        assert_eq!(set.get(0).unwrap().var, vec![1.0, 4.0]);
    }

    #[test]
    fn augmentation_cases() {
        let mut r = RngStream::new(2, StreamKey::new("aug", 0, 0, 0));
        let flat = proto(0, &[1.0, -1.0], &[0.0, 0.0], 3);
        let out = augment(&flat, 4, &mut r).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|u| u == &flat.mean));
        assert!(matches!(augment(&flat, 0, &mut r), Err(Error::Config(_))));

        let z = proto(0, &[1.0, -1.0, 0.0], &[4.0, 0.25, 1.0], 3);
        let sd = z.std();
        for _ in 0..50 {
            for u in augment(&z, 3, &mut r).unwrap() {
                for i in 0..3 {
                    assert!(u[i] >= z.mean[i] && u[i] <= z.mean[i] + sd[i]);
                }
            }
        }
    }

    #[test]
    fn augmentation_uses_one_beta_per_vector() {
        let mut r = RngStream::new(3, StreamKey::new("aug", 1, 0, 0));
        let z = proto(0, &[0.0, 0.0], &[1.0, 4.0], 2);
        for u in augment(&z, 5, &mut r).unwrap().into_iter().skip(1) {
            // u = β·σ with σ = (1, 2)
            assert!((u[1] - 2.0 * u[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn merge_single_entry_identity() {
        let p = proto(3, &[0.5, 2.0], &[1.5, 0.25], 7);
        let m = merge_weighted(&[MergeEntry {
            proto: &p,
            weight: 13.0,
            present: true,
        }])
        .unwrap();
        assert_eq!(m.proto.mean, p.mean);
        for (a, b) in m.proto.var.iter().zip(&p.var) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(m.proto.support, 7);
    }

    #[test]
    fn merge_two_points_by_hand() {
        let a = proto(0, &[1.0], &[0.0], 1);
        let b = proto(0, &[3.0], &[0.0], 1);
        let m = merge_weighted(&[
            MergeEntry { proto: &a, weight: 1.0, present: true },
            MergeEntry { proto: &b, weight: 1.0, present: true },
        ])
        .unwrap();
        assert_eq!(m.proto.mean, vec![2.0]);
        assert_eq!(m.proto.var, vec![1.0]);
        assert_eq!(m.proto.support, 2);
    }

    #[test]
    fn merge_skips_absent_and_errors_when_none_present() {
        let a = proto(0, &[1.0], &[0.5], 1);
        let junk = proto(0, &[100.0], &[9.0], 5);
        let m = merge_weighted(&[
            MergeEntry { proto: &a, weight: 2.0, present: true },
            MergeEntry { proto: &junk, weight: 50.0, present: false },
        ])
        .unwrap();
        assert_eq!(m.proto.mean, vec![1.0]);
        assert_eq!(m.proto.support, 1);
        assert!(matches!(
            merge_weighted(&[MergeEntry { proto: &junk, weight: 1.0, present: false }]),
            Err(Error::AbsentClass(0))
        ));
    }

    #[test]
    fn three_clients_match_pooled_statistics() {
        let mut r = RngStream::new(4, StreamKey::new("pool3", 0, 0, 0));
        let dim = 5;
        let mut all = Vec::new();
        let mut summaries = Vec::new();
        for l in 0..3 {
            let n = 3 + r.index(20);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| r.normal() * (1.0 + l as f64) + l as f64).collect())
                .collect();
            let set = prototypes_from_features(0, pts.iter().map(|p| (0u32, p.as_slice()))).unwrap();
            // ω = sample count, so every raw point carries weight 1
            summaries.push((set, n as f64));
            all.extend(pts.into_iter().map(|p| (1.0, p)));
        }
        let refs: Vec<(&PrototypeSet, f64)> = summaries.iter().map(|(s, w)| (s, *w)).collect();
        let (global, _) = aggregate_prototype_sets(&refs).unwrap();
        let (m, v) = pooled(&all);
        let g = global.get(0).unwrap();
        for i in 0..dim {
            assert!(rel(g.mean[i], m[i]) < 1e-9);
            assert!(rel(g.var[i], v[i]) < 1e-9);
        }
    }

    #[test]
    fn aggregate_disjoint_union_and_symmetric_idempotence() {
        let mut s1 = PrototypeSet::empty(1);
        s1.insert(proto(0, &[1.0, 2.0], &[0.1, 0.2], 4));
        let mut s2 = PrototypeSet::empty(1);
        s2.insert(proto(5, &[-1.0, 0.0], &[0.3, 0.0], 2));
        let (u, _) = aggregate_prototype_sets(&[(&s1, 3.0), (&s2, 8.0)]).unwrap();
        assert_eq!(u.get(0).unwrap().mean, s1.get(0).unwrap().mean);
        assert_eq!(u.get(5).unwrap().mean, s2.get(5).unwrap().mean);
        assert_eq!(u.len(), 2);

        let (same, _) = aggregate_prototype_sets(&[(&s1, 2.0), (&s1, 2.0)]).unwrap();
        let p = same.get(0).unwrap();
        let q = s1.get(0).unwrap();
        for i in 0..2 {
            assert!((p.mean[i] - q.mean[i]).abs() < 1e-15);
            assert!((p.var[i] - q.var[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_rejects_mixed_tasks() {
        let s1 = PrototypeSet::empty(1);
        let s2 = PrototypeSet::empty(2);
        assert!(matches!(aggregate_prototype_sets(&[(&s1, 1.0), (&s2, 1.0)]), Err(Error::Contract(_))));
    }

    fn arb_proto() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (
            proptest::collection::vec(-5.0f64..5.0, 3),
            proptest::collection::vec(0.0f64..4.0, 3),
            0.1f64..10.0,
        )
    }

    proptest! {
        #[test]
        fn merge_is_permutation_invariant_and_associative(
            items in proptest::collection::vec(arb_proto(), 2..6),
            rot in 0usize..6,
        ) {
            let protos: Vec<(GaussianPrototype, f64)> = items
                .iter()
                .map(|(m, v, w)| (proto(0, m, v, 1), *w))
                .collect();
            let entries: Vec<MergeEntry> = protos
                .iter()
                .map(|(p, w)| MergeEntry { proto: p, weight: *w, present: true })
                .collect();
            let base = merge_weighted(&entries).unwrap().proto;

            let mut rotated = entries.clone();
            rotated.rotate_left(rot % entries.len());
            let r = merge_weighted(&rotated).unwrap().proto;
            for i in 0..3 {
                prop_assert!((r.mean[i] - base.mean[i]).abs() < 1e-12);
                prop_assert!((r.var[i] - base.var[i]).abs() < 1e-12);
            }

            // regroup: merge the first two, then merge that with the rest
            let w01 = entries[0].weight + entries[1].weight;
            let left = merge_weighted(&entries[..2]).unwrap().proto;
            let mut regrouped = vec![MergeEntry { proto: &left, weight: w01, present: true }];
            regrouped.extend_from_slice(&entries[2..]);
            let g = merge_weighted(&regrouped).unwrap().proto;
            for i in 0..3 {
                prop_assert!((g.mean[i] - base.mean[i]).abs() <= 1e-9 * base.mean[i].abs().max(1.0));
                prop_assert!((g.var[i] - base.var[i]).abs() <= 1e-9 * base.var[i].abs().max(1.0));
                prop_assert!(base.var[i] >= 0.0);
            }
        }
    }
}
