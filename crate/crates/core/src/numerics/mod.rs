//! Dense float32 tensors, a reverse-mode tape, layers, Adam and gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, random_projection, GradCheckOptions, GradCheckReport};
pub use optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use params::ParamStore;
pub use tape::{ConvSpec, Grads, Tape, Var};
pub use tensor::Tensor;

/// Row-wise softmax of `[N, K]` logits (returned as a new tensor).
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let k = out.last_dim();
    for row in out.data_mut().chunks_mut(k) {
        tape::softmax_in_place(row, 1.0);
    }
    out
}
