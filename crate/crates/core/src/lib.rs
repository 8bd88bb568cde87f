//! Walk-forward statistical-arbitrage research engine.
//!
//! Pipeline: load or synthesize a daily returns panel, generate
//! out-of-sample residuals from a factor model (exogenous regression, PCA
//! eigenportfolios, or autoencoders), extract trading signals from the
//! residual processes (Ornstein-Uhlenbeck s-scores or a small feed-forward
//! net), and backtest constant-leverage portfolios day by day. A separate
//! policy network trains the whole stack end to end on a joint
//! reconstruction + Sharpe objective.
//!
//! Everything is deterministic under explicit seeds and double precision.

pub mod error;
pub mod factor_models;
pub mod linalg;
pub mod market_data;
pub mod seeding;
pub mod tensor_nn;

pub use error::{Error, Result};
