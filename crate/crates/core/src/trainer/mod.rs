//! Loss, hand-written backpropagation and SGD for the backbone and exit heads.

mod backprop;
mod gradcheck;
mod loss;
mod sgd;

pub use backprop::{backbone_gradients, head_gradients, Gradients, HeadGradients};
pub use gradcheck::grad_check;
pub use loss::{cross_entropy, cross_entropy_logits};
pub use sgd::{
    classifier_accuracy, classifier_loss, head_accuracies, sgd_step, train_backbone, train_exit_heads, HeadTrainReport,
    IterationUnit, TrainConfig, TrainReport,
};
