//! Learning side of the optimiser: a small reverse-mode substrate, the graph
//! attention policy/value network and the PPO trainer.

pub mod substrate;

pub use substrate::{ParamStore, Tape, Tensor2D, Var};
pub mod gnn;

pub use gnn::{PolicyConfig, PolicyNet, PolicyOutput};
pub mod ppo;

pub use ppo::{evaluate, TrainConfig, Trainer};
