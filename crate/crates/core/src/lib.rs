//! Selective inference for linear instrumental-variables models after
//! randomized sisVIVE selection of invalid instruments.

pub mod data;
pub mod density;
pub mod error;
pub mod grams;
pub mod inference;
pub mod iv;
pub mod pipeline;
pub mod randomization;
pub mod sampler;
pub mod sim;
pub mod sisvive;
pub mod summary;

pub use data::{InstrumentSet, IvData, ModelParams, ProjectionCache};
pub use error::{Error, ErrorClass, Result};
pub use grams::{Grams, NaiveInterval, NaiveStatistic, Restricted};
pub use randomization::{Family, RandomizationSpec};
pub use sisvive::{SelectionResult, TuningParams};
pub use pipeline::PipelineOptions;
pub use summary::{GramSummary, SummaryData};
