//! Prompt pools (L2P- and DualP-style), the classifier head, the local
//! losses with and without prototype injection, and local SGD.

pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod pool;
pub mod train;

pub use head::{Head, HeadParams};
pub use loss::{
    local_loss, local_loss_injected, matching_loss, sgd_step, Grads, Injected, LossTape, LrSchedule,
    TrainHyper, TrainSample,
};
pub use pool::{select_prompt, PoolKind, PoolLayout, PromptPool, Selection, TaskEntry};
pub use gradcheck::{run_gradcheck, BlockResult, LossKind, SectionResult, FD_STEP, REL_TOLERANCE};
pub use train::{injection_vectors, train_local, InjectionConfig, InjectionPlan, LocalTrace};
