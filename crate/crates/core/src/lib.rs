//! Discrete auto-regressive variational attention for sentence modelling,
//! with the Gaussian and single-code baselines it is compared against.

pub mod autodiff;
pub mod corpus;
pub mod quantizer;
pub mod scalar;
pub mod synth;
pub mod params;
pub mod seqnet;
pub mod prior;
pub mod models;
pub mod train;
pub mod evalgen;
pub mod sweep;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
