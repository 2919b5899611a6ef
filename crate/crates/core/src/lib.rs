//! Deterministic simulator for federated optimization on non-IID clients.
//!
//! The crate covers local SGD (FedAvg), server momentum (FedAvgM), adaptive
//! server steps (FedAdam), SCAFFOLD, and IGFL: a client-side correction that
//! spreads the previous group step across local steps, combined with
//! attention-weighted server aggregation. All numerics are generic over
//! [`Scalar`]; [`Params`] and friends fix the working precision to `f64`.

pub mod client;
pub mod data;
pub mod engine;
pub mod error;
pub mod models;
pub mod params;
pub mod scalar;
pub mod seeding;
pub mod server;

pub use error::{Error, IdxError, Result};
pub use params::{combine, dot, mean, softmax_stable, ParamVector};
pub use scalar::Scalar;

pub type Params = ParamVector<f64>;
pub type Params32 = ParamVector<f32>;
pub type Model = models::LossModel<f64>;
pub type Model32 = models::LossModel<f32>;
pub type Batch = models::Batch<f64>;
pub type Dataset = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type ServerState = server::ServerState<f64>;
pub type ClientState = client::ClientState<f64>;
