use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Mat};

/// Linear classifier over all classes seen so far.
///
/// Rows are appended in registration order and never reordered; a new row
/// starts at zero weight and zero bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    dim: usize,
    classes: Vec<u32>,
    index: BTreeMap<u32, usize>,
    weight: Mat,
    bias: Vec<f64>,
}

/// Exported head parameters, row `i` belonging to `classes[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub classes: Vec<u32>,
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Head {
    pub fn new(dim: usize) -> Self {
        Head {
            dim,
            classes: Vec::new(),
            index: BTreeMap::new(),
            weight: Mat::zeros(0, dim),
            bias: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn row_of(&self, class: u32) -> Option<usize> {
        self.index.get(&class).copied()
    }

    pub fn weight(&self) -> &Mat {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn params_mut(&mut self) -> (&mut Mat, &mut Vec<f64>) {
        (&mut self.weight, &mut self.bias)
    }

    /// Row of `class`, appending a zero row if it is new.
    pub fn register(&mut self, class: u32) -> usize {
        if let Some(r) = self.row_of(class) {
            return r;
        }
        let r = self.classes.len();
        self.classes.push(class);
        self.index.insert(class, r);
        self.weight = self
            .weight
            .vstack(&Mat::zeros(1, self.dim))
            .expect("head rows share the feature width");
        self.bias.push(0.0);
        r
    }

    /// Registers new classes in ascending id order.
    pub fn register_all(&mut self, classes: impl IntoIterator<Item = u32>) {
        let mut fresh: Vec<u32> = classes.into_iter().filter(|c| !self.index.contains_key(c)).collect();
        fresh.sort_unstable();
        fresh.dedup();
        for c in fresh {
            self.register(c);
        }
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.dim {
            return Err(Error::shape("Head::logits", format!("feature width {} vs {}", feature.len(), self.dim)));
        }
        Ok((0..self.classes.len())
            .map(|i| dot(self.weight.row(i), feature) + self.bias[i])
            .collect())
    }

    /// Class with the largest logit; ties go to the earliest row.
    pub fn predict(&self, feature: &[f64]) -> Result<Option<u32>> {
        let logits = self.logits(feature)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, &z) in logits.iter().enumerate() {
            if best.is_none_or(|(_, b)| z > b) {
                best = Some((i, z));
            }
        }
        Ok(best.map(|(i, _)| self.classes[i]))
    }

    pub fn export(&self) -> HeadParams {
        HeadParams {
            classes: self.classes.clone(),
            weight: self.weight.clone(),
            bias: self.bias.clone(),
        }
    }

    pub fn from_params(dim: usize, p: HeadParams) -> Result<Self> {
        let n = p.classes.len();
        if p.weight.rows() != n || p.bias.len() != n || (n > 0 && p.weight.cols() != dim) {
            return Err(Error::Contract(format!(
                "head params: {n} classes, weight {}x{}, bias {}, dim {dim}",
                p.weight.rows(),
                p.weight.cols(),
                p.bias.len()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, &c) in p.classes.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Contract(format!("class {c} appears twice in head")));
            }
        }
        Ok(Head {
            dim,
            classes: p.classes,
            index,
            weight: if n == 0 { Mat::zeros(0, dim) } else { p.weight },
            bias: p.bias,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_append_in_order_and_start_at_zero() {
        let mut h = Head::new(3);
        assert_eq!(h.register(7), 0);
        h.register_all([5, 9, 7, 5]);
        assert_eq!(h.classes(), &[7, 5, 9]);
        assert_eq!(h.register(9), 2);
        assert_eq!(h.logits(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(h.predict(&[1.0, 0.0, 0.0]).unwrap(), Some(7));
    }

    #[test]
    fn predict_picks_largest_logit() {
        let mut h = Head::new(2);
        h.register_all([0, 1]);
        h.params_mut().0.set(1, 0, 1.0);
        assert_eq!(h.predict(&[2.0, 0.0]).unwrap(), Some(1));
        assert_eq!(h.predict(&[-2.0, 0.0]).unwrap(), Some(0));
        assert_eq!(Head::new(2).predict(&[0.0, 0.0]).unwrap(), None);
    }

    #[test]
    fn export_import_roundtrip() {
        let mut h = Head::new(2);
        h.register_all([3, 1]);
        h.params_mut().1[0] = 0.5;
        let back = Head::from_params(2, h.export()).unwrap();
        assert_eq!(back, h);
        let mut bad = h.export();
        bad.classes = vec![3, 3];
        assert!(Head::from_params(2, bad).is_err());
    }
}
