//! Loss, optimisation loop, the three training phases and checkpoints.

mod checkpoint;
mod gradcheck;
mod loss;
mod phase;
mod pipeline;
mod trainer;

pub use checkpoint::{Checkpoint, DomainAdapter, ZLayoutInfo, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gradcheck::{
    phase_grad_check, phase_loss, random_prompts, tiny_config, tiny_phase_checks, GradCheckReport, ParamCheck,
};
pub use loss::{multiple_choice_loss, multiple_choice_loss_grad};
pub use phase::{BasePhase, LoraPhase, PhaseKind, SingleDomainModel, TrainablePhase, XCrossPhase, XCrossView};
pub use pipeline::{pretrain_base, train_lora, train_xcross, LoraSettings, DEFAULT_RANK};
pub use trainer::{train, train_step, valid_hit1, TrainOutcome, TrainerState, TrainingConfig};
