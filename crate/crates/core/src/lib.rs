pub mod annotators;
pub mod backbone;
pub mod baselines;
pub mod data;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod linalg;
pub mod train;

pub use error::{Error, Result};

pub use annotators::{AnnotatorLabels, Provenance};
pub use backbone::{HeadOutputs, ModelDims, ModelParams};
pub use data::{Dataset, SplitTag};
pub use fusion::{FrozenHead, FusionGradients, FusionInputs, FusionObjective, KlDirection};
pub use harness::{ExperimentConfig, ExperimentReport, Method, Mode};
pub use linalg::{ConfusionMatrix, OneHotLabel, PermutationBasis, ProbVector};
