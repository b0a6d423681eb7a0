use serde::Serialize;

use crate::error::Result;
use crate::numerics::Mat;
use crate::prompt::{HeadParams, PoolLayout, PromptPool};
use crate::prototypes::{GaussianPrototype, PrototypeSet};

use super::wire::{encode, header_bytes, Payload, PayloadKind};

/// Value bytes of one upload, headers reported separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CommCost {
    pub params: usize,
    pub param_bytes: usize,
    pub prototype_bytes: usize,
    pub header_bytes: usize,
}

impl CommCost {
    pub fn total(&self) -> usize {
        self.param_bytes + self.prototype_bytes + self.header_bytes
    }
}

/// 4 bytes per parameter; prototypes cost `classes × dim × 4`, doubled when
/// variances are sent.
pub fn comm_cost(param_count: usize, proto_classes: usize, dim: usize, mean_only: bool) -> CommCost {
    let per = if mean_only { 4 } else { 8 };
    CommCost {
        params: param_count,
        param_bytes: 4 * param_count,
        prototype_bytes: proto_classes * dim * per,
        header_bytes: 0,
    }
}

/// Shape of one client upload.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateShape {
    pub layout: PoolLayout,
    pub dim: usize,
    pub tasks: usize,
    pub head_classes: usize,
    pub proto_classes: usize,
    pub mean_only: bool,
}

impl UpdateShape {
    fn pool(&self) -> Result<PromptPool> {
        let mut pool = PromptPool::new(self.layout.clone(), self.dim, 0)?;
        pool.ensure_tasks(self.tasks);
        Ok(pool)
    }

    pub fn param_count(&self) -> usize {
        self.layout.param_count(self.dim, self.tasks) + self.head_classes * (self.dim + 1)
    }

    /// Analytic sizes, including the exact header byte count.
    pub fn analytic(&self) -> Result<CommCost> {
        let pool = self.pool()?;
        let names: Vec<String> = pool.export().into_iter().map(|(n, _)| n).collect();
        let mut c = comm_cost(self.param_count(), self.proto_classes, self.dim, self.mean_only);
        c.header_bytes = header_bytes(names.iter().map(String::as_str), self.head_classes, self.proto_classes);
        Ok(c)
    }

    /// Serialises a zero-valued upload of this shape and returns its length.
    pub fn measured_len(&self) -> Result<usize> {
        let pool = self.pool()?;
        let mut protos = PrototypeSet::empty(0);
        for c in 0..self.proto_classes as u32 {
            protos.insert(GaussianPrototype {
                class_id: c,
                mean: vec![0.0; self.dim],
                var: vec![0.0; self.dim],
                support: 1,
            });
        }
        let payload = Payload {
            kind: PayloadKind::Update,
            sender: 0,
            task: 0,
            omega: 1,
            mean_only: self.mean_only,
            tensors: pool.export(),
            head: HeadParams {
                classes: (0..self.head_classes as u32).collect(),
                weight: Mat::zeros(self.head_classes, self.dim),
                bias: vec![0.0; self.head_classes],
            },
            prototypes: protos,
        };
        Ok(encode(&payload)?.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::PromptMode;
    use crate::prompt::PoolKind;

    pub(crate) fn vit_b_layout() -> PoolLayout {
        PoolLayout {
            kind: PoolKind::DualP,
            prompt_len: 10,
            global_mode: PromptMode::PreT,
            task_mode: PromptMode::PreT,
            global_layers: vec![0, 1],
            task_layers: vec![2, 3, 4],
            init_scale: 1.0,
        }
    }

    #[test]
    fn vit_scale_costs() {
        let shape = UpdateShape {
            layout: vit_b_layout(),
            dim: 768,
            tasks: 10,
            head_classes: 100,
            proto_classes: 10,
            mean_only: true,
        };
        assert_eq!(shape.param_count(), 330_340);
        let c = shape.analytic().unwrap();
        assert_eq!(c.param_bytes, 1_321_360);
        assert_eq!(c.prototype_bytes, 30_720);
        assert_eq!(shape.measured_len().unwrap(), c.total());
    }

    #[test]
    fn empty_model_is_header_only() {
        let c = comm_cost(0, 0, 768, true);
        assert_eq!(c.param_bytes + c.prototype_bytes, 0);
        let v = comm_cost(10, 2, 3, false);
        assert_eq!(v.prototype_bytes, 2 * 3 * 8);
    }
}
