pub mod evaluation;
pub mod experiments;
pub mod frontend;
pub mod fusion;
pub mod optimizer;
pub mod pose_graph;
pub mod scale;
pub mod sim3;
pub mod two_view;

use thiserror::Error;

/// Any error from the pipeline, tagged with the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sim3: {0}")]
    Sim3(#[from] sim3::Sim3Error),
    #[error("two_view: {0}")]
    TwoView(#[from] two_view::TwoViewError),
    #[error("scale: {0}")]
    Scale(#[from] scale::ScaleError),
    #[error("frontend: {0}")]
    Frontend(#[from] frontend::FrontendError),
    #[error("pose_graph: {0}")]
    Graph(#[from] pose_graph::GraphError),
    #[error("optimizer: {0}")]
    Optimize(#[from] optimizer::OptimizeError),
    #[error("fusion: {0}")]
    Fusion(#[from] fusion::FusionError),
    #[error("evaluation: {0}")]
    Evaluation(#[from] evaluation::EvalError),
    #[error("experiments: {0}")]
    Experiment(#[from] experiments::ExperimentError),
}
