//! Portfolio trading with deep Q-learning over a discrete combinatorial
//! action space.
//!
//! Each day the agent picks, for every asset, whether to sell, hold or buy a
//! fixed currency amount. Infeasible picks (not enough cash or holdings) are
//! mapped to the closest feasible action with the highest estimated value.
//! Training simulates every feasible action at each step and stores the
//! outcomes together as one replay entry.
//!
//! Modules, bottom-up:
//! - [`marketdata`]: CSV ingestion, alignment, indicators, feature tensors
//! - [`actionspace`]: action encoding, feasibility, infeasible-action mapping
//! - [`environment`]: rebalancing, market transition, reward
//! - [`qnet`]: LSTM encoder + regressor with analytic gradients
//! - [`checkpoint`]: binary parameter container
//! - [`trainer`]: episode sampling, replay memory, DQN loop
//! - [`backtest`]: strategies, metrics, reports
//! - [`config`]: run configuration file

pub mod actionspace;
pub mod backtest;
pub mod checkpoint;
pub mod config;
pub mod environment;
pub mod marketdata;
pub mod qnet;
pub mod synthetic;
pub mod trainer;
