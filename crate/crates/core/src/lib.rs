//! A single-process simulator of federated continual recommendation.
//!
//! The library models a fleet of clients that each hold private user
//! parameters and interaction data, and a server that only ever sees item
//! embedding tables. Training proceeds over a chronological sequence of data
//! blocks; two mechanisms fight catastrophic forgetting across blocks:
//!
//! - **client side** — each client keeps the top-N items of its previous-block
//!   model as retained knowledge, measures how far they drifted under the
//!   current model (preference shift Δ), samples a replay memory whose size
//!   shrinks as exp(−ε·Δ), and distills the old model's scores on that memory
//!   into the new one;
//! - **server side** — after averaging uploads, the server blends each old
//!   item's row with its frozen previous-block row using a per-item retention
//!   weight γ_i = β/(1+φ_i), where φ_i is how far the row moved this round.
//!
//! Modules follow the pipeline: [`data`] (load → filter → blocks → splits),
//! [`backbone`] (scoring models and gradients), [`client`] / [`server`] (the
//! two protocol halves), [`eval`] (full-ranking metrics and analyses),
//! [`config`] + [`experiment`] (runs, sweeps, reports, result files).

pub mod backbone;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod rng;
pub mod server;
pub mod types;
