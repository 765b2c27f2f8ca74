//! Single-process simulator for federated source-free domain adaptation.
//!
//! A server pretrains a small segmentation model on labeled, procedurally
//! generated source data. Clients then adapt it without labels through
//! self-training, weather-specific batch-norm banks and a clustering loss
//! against class prototypes living on a Poincaré ball. The server smooths
//! client averages with a queue of past global models.
//!
//! Modules map onto the pieces of the protocol:
//!
//! - [`hypgeom`]: Poincaré-ball operations and their analytic gradients.
//! - [`model`]: the tiny encoder/head network, weather classifier, parameter store.
//! - [`prototype`]: prototype sets and the clustering loss.
//! - [`client`]: one client's local round.
//! - [`server`]: pretraining, sampling, aggregation and the round loop.
//! - [`data`]: synthetic source/target generation and federated splits.
//! - [`metrics`]: confusion matrices, mIoU, and the run ledger.
//! - [`config`]: run configuration and its text format.

pub mod checkpoint;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod hypgeom;
pub mod metrics;
pub mod model;
pub mod prototype;
pub mod rng;
pub mod server;

pub use checkpoint::Checkpoint;
pub use config::{RunConfig, Toggles};
pub use error::{Error, Result};
pub use hypgeom::{Curvature, ExpMapVariant, PoincarePoint, TangentVector};
pub use model::{ParamVector, Weather};
pub use server::Simulator;


