//! Entropy-aware heterogeneous policy optimization at desk scale.
//!
//! A linear-softmax policy learns synthetic verifiable-reward tasks with
//! GRPO, DAPO, DAPO restricted to forking tokens, or HAPO, whose four
//! components (adaptive temperature sampling, token-level group advantages,
//! differential advantage redistribution, asymmetric adaptive clipping) can
//! be toggled independently.
//!
//! ```no_run
//! use hapo_core::{run, TrainConfig};
//!
//! let cfg = TrainConfig { steps: 50, ..Default::default() };
//! let summary = run(&cfg, std::path::Path::new("runs/demo")).unwrap();
//! println!("{:?}", summary.final_eval_sampled);
//! ```

pub mod advantage;
pub mod analyze;
pub mod compare;
pub mod config;
pub mod entropy_stats;
pub mod env;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod policy;
pub mod run;
pub mod sampler;
pub mod trainer;

pub use config::{load_config, Components, TrainConfig};
pub use env::{TaskSpec, TokenId};
pub use error::{HapoError, Result};
pub use loss::Algo;
pub use policy::PolicyParams;
pub use run::{run, RunSummary};
pub use trainer::Trainer;
