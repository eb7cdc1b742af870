pub mod autodiff;
pub mod cka_probe;
pub mod cli;
pub mod data;
pub mod error;
pub mod finetune_eval;
pub mod geometric_pretrain;
pub mod masked_pretrain;
pub mod networks;
pub mod pipeline;
pub mod supervised_pretrain;
pub mod train;

pub use error::{MesaError, Result};
