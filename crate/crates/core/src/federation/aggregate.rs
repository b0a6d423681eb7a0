use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::prompt::HeadParams;
use crate::prototypes::{aggregate_prototype_sets, PrototypeSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Client `l` weighs `ω_l / Σω`.
    Weighted,
    /// Every client weighs equally.
    FedAvg,
}

/// Decoded client upload.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub task_id: usize,
    pub omega: u64,
    pub pool: Vec<(String, Mat)>,
    pub head: HeadParams,
    pub prototypes: PrototypeSet,
    pub payload_bytes: usize,
}

/// `ω = ρ · n`.
pub fn client_weight(rho: u64, n_samples: u64) -> Result<u64> {
    if rho == 0 || n_samples == 0 {
        return Err(Error::Contract(format!("client weight needs ρ ≥ 1 and n ≥ 1, got ({rho}, {n_samples})")));
    }
    rho.checked_mul(n_samples)
        .ok_or_else(|| Error::Contract("client weight overflows".into()))
}

fn weight_of(u: &ClientUpdate, mode: AggregationMode) -> f64 {
    match mode {
        AggregationMode::Weighted => u.omega as f64,
        AggregationMode::FedAvg => 1.0,
    }
}

fn sorted(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    if updates.is_empty() {
        return Err(Error::Protocol("no client updates to aggregate".into()));
    }
    let mut v: Vec<&ClientUpdate> = updates.iter().collect();
    v.sort_by_key(|u| u.client_id);
    if v.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Protocol("duplicate client id among updates".into()));
    }
    Ok(v)
}

/// Weighted mean `Σ (w_l / Σw) · x_l`, accumulated in the given order.
fn weighted_mean<'a>(items: impl Iterator<Item = (f64, &'a [f64])>, len: usize) -> Vec<f64> {
    let items: Vec<(f64, &[f64])> = items.collect();
    let total: f64 = items.iter().map(|(w, _)| w).sum();
    let mut out = vec![0.0; len];
    for (w, x) in items {
        let a = w / total;
        for (o, v) in out.iter_mut().zip(x) {
            *o += a * v;
        }
    }
    out
}

/// Aggregated prompt tensors and head.
///
/// Updates are reduced in ascending client id order. Head rows are aligned
/// by class id, each normalised over the clients that have the row; with
/// `strict_head` any difference in class lists is an error instead.
pub fn aggregate_params(
    updates: &[ClientUpdate],
    mode: AggregationMode,
    strict_head: bool,
) -> Result<(Vec<(String, Mat)>, HeadParams)> {
    let ups = sorted(updates)?;
    let first = ups[0];
    for u in &ups[1..] {
        let same = u.pool.len() == first.pool.len()
            && u.pool
                .iter()
                .zip(&first.pool)
                .all(|((na, a), (nb, b))| na == nb && a.rows() == b.rows() && a.cols() == b.cols());
        if !same {
            return Err(Error::Contract(format!(
                "client {} prompt tensors differ in structure from client {}",
                u.client_id, first.client_id
            )));
        }
    }
    let pool = first
        .pool
        .iter()
        .enumerate()
        .map(|(i, (name, m))| {
            let vals = weighted_mean(ups.iter().map(|u| (weight_of(u, mode), u.pool[i].1.data())), m.len());
            Mat::from_vec(m.rows(), m.cols(), vals).map(|m| (name.clone(), m))
        })
        .collect::<Result<Vec<_>>>()?;

    if strict_head {
        if let Some(u) = ups.iter().find(|u| u.head.classes != first.head.classes) {
            return Err(Error::Contract(format!(
                "strict head aggregation: client {} has classes {:?}, client {} has {:?}",
                u.client_id, u.head.classes, first.client_id, first.head.classes
            )));
        }
    }
    let dim = ups.iter().find(|u| !u.head.classes.is_empty()).map_or(0, |u| u.head.weight.cols());
    let mut order: Vec<u32> = Vec::new();
    let mut rows: BTreeMap<u32, Vec<(&ClientUpdate, usize)>> = BTreeMap::new();
    for u in &ups {
        if !u.head.classes.is_empty() && u.head.weight.cols() != dim {
            return Err(Error::Contract(format!("client {} head width differs", u.client_id)));
        }
        for (r, &c) in u.head.classes.iter().enumerate() {
            let e = rows.entry(c).or_default();
            if e.is_empty() {
                order.push(c);
            }
            e.push((u, r));
        }
    }
    let mut weight = Mat::zeros(order.len(), dim);
    let mut bias = Vec::with_capacity(order.len());
    for (i, c) in order.iter().enumerate() {
        let contrib = &rows[c];
        let w = weighted_mean(contrib.iter().map(|(u, r)| (weight_of(u, mode), u.head.weight.row(*r))), dim);
        weight.row_mut(i).copy_from_slice(&w);
        let b = weighted_mean(
            contrib.iter().map(|(u, r)| (weight_of(u, mode), std::slice::from_ref(&u.head.bias[*r]))),
            1,
        );
        bias.push(b[0]);
    }
    Ok((
        pool,
        HeadParams {
            classes: order,
            weight,
            bias,
        },
    ))
}

/// Global prototype set from the non-empty client sets; `None` when no
/// client sent prototypes. Also returns the variance clamp count.
pub fn aggregate_prototypes(updates: &[ClientUpdate], mode: AggregationMode) -> Result<Option<(PrototypeSet, usize)>> {
    let ups = sorted(updates)?;
    let sets: Vec<(&PrototypeSet, f64)> = ups
        .iter()
        .filter(|u| !u.prototypes.is_empty())
        .map(|u| (&u.prototypes, weight_of(u, mode)))
        .collect();
    if sets.is_empty() {
        return Ok(None);
    }
    aggregate_prototype_sets(&sets).map(Some)
}
