//! Parameterized AP loss for object detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: boxes and the IoU / GIoU / L1 measurements with gradients.
//! * [`piecewise`]: monotone piecewise-linear functions on `[0, 1]` built from
//!   independent ratio parameters.
//! * [`apmetric`]: exact AP in rank form, in score/box form, and as a
//!   precision-recall area, plus target assignment.
//! * [`paploss`]: the differentiable surrogate, forward and backward.
//! * [`toybench`]: a synthetic single-class detection task used as the inner
//!   training loop.
//! * [`search`]: truncated-normal sampling and the clipped-surrogate update of
//!   the parameter distribution, plus a random-search baseline.
//! * [`experiment`]: glue that trains and scores one loss on one dataset.

pub mod apmetric;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod optim;
pub mod paploss;
pub mod piecewise;
pub mod search;
pub mod seed;
pub mod toybench;

pub use apmetric::{Detection, DetectionBatch, Label, Measurement};
pub use error::{Error, Result};
pub use geometry::BBox;
pub use paploss::{LossParams, LossResult, PapLoss, Substitution};
pub use piecewise::{PiecewiseFn, RatioParams, UnitFunction};
pub use search::{HistoryRecord, SearchConfig, SearchOutcome};
pub use toybench::{Dataset, DatasetConfig, Scene, ToyModel, TrainConfig};
