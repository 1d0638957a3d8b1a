//! Gradient flows of Morse functions on flat charts: critical points,
//! principal flow lines, max-min graphs and the concentration of basins
//! around principal terminals.

pub mod field;
pub mod flow;
pub mod config;
pub mod critical;
pub mod experiments;
pub mod geometry;
pub mod graph;
pub mod linalg;
pub mod linear_model;
pub mod rng;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Field(#[from] field::FieldError),
    #[error(transparent)]
    Builtin(#[from] field::UnknownBuiltin),
    #[error(transparent)]
    Eval(#[from] field::EvalError),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Critical(#[from] critical::CriticalError),
    #[error(transparent)]
    Flow(#[from] flow::FlowError),
    #[error(transparent)]
    Linear(#[from] linear_model::LinearError),
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Experiment(#[from] experiments::ExperimentError),
}
