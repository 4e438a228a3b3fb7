//! Transformer encoder, decoding head and task heads with hand-written
//! backpropagation in double precision.

mod encoder;
mod gradcheck;
mod head;
mod ops;
mod optim;
mod params;
mod task;

pub use encoder::{EncoderConfig, EncoderLayer, EncoderModel, EncoderTrace, LayerNorm, Linear};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use head::{DecoderHead, HeadTrace, HEAD_LAYERNORM_EPS};
pub use ops::{cross_entropy, gelu, gelu_grad, log_softmax, softmax};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamSet, Parameterized};
pub use task::{RankHead, SpanHead, TaskHead, TaskKind};
