//! Session-based recommendation by self-supervised co-training over an item
//! view and a session view of the click log.
//!
//! The pipeline is: [`corpus`] turns click events into train/test sessions,
//! [`graph`] builds the two views, [`model`] encodes them, [`cotrain`] mines
//! pseudo-labels and builds the contrastive and divergence terms, [`trainer`]
//! optimizes the joint objective and [`eval`] scores the result.
//!
//! ```no_run
//! use cotrec::{corpus, trainer, TrainConfig};
//!
//! let events = corpus::load_events("clicks.csv", &Default::default())?;
//! let data = corpus::prepare(&events, &Default::default())?;
//! let outcome = trainer::train(&data, &TrainConfig::default())?;
//! let metrics = outcome.predictor()?.evaluate(&data.test_samples, &[10, 20])?;
//! print!("{}", metrics.to_records());
//! # Ok::<(), cotrec::Error>(())
//! ```

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod cotrain;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod optim;
pub mod param;
pub mod sparse;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{TrainConfig, Variant};
pub use corpus::{Sample, Session, SessionCorpus};
pub use error::{Error, Result};
pub use eval::EvalResult;
pub use model::CotrecModel;
pub use tensor::Tensor;
pub use trainer::{Predictor, TrainOutcome, Trainer};
