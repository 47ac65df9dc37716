//! Road-surface classifier built on selective state-space models, with dual
//! global/local 2-D scanning and attention-based fusion. Everything is CPU
//! only and framework free: the tensor library, autograd, SSM kernels,
//! backbone, and training loop live in this crate.

pub mod archive;
pub mod backbone;
pub mod block;
pub mod cli;
pub mod config;
pub mod data;
pub mod scan2d;
pub mod ssm;
pub mod tensor;
pub mod train;
