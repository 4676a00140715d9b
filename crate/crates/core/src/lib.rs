//! Dynamic-embedding reinforcement learning for portfolio allocation: market
//! environment, autoencoder state embedding with online meta-learning, TD3
//! agent, rolling-window backtester and statistical analysis.

pub mod analysis;
pub mod backtest;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod foml;
pub mod indicators;
pub mod market;
pub mod nn;
pub mod synth;
pub mod td3;
pub mod wae;
