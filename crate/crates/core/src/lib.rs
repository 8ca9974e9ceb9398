#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchgen;
pub mod correlation;
pub mod dataio;
pub mod error;
pub mod labeling;
pub mod model;
pub mod numkit;
pub mod pipeline;
pub mod rng;
pub mod scores;
pub mod theory;

pub use correlation::{LinearFit, ScorePair, ScoreReport};
pub use dataio::{Checkpoint, Dataset, TrainMeta};
pub use error::{Error, Result};
pub use labeling::{generate_labels, LabelKind, LabelStrategy};
pub use model::{LinearClassifier, LossVariant, Targets, TrainConfig, TrainOutcome};
pub use numkit::Matrix;
pub use rng::StreamKey;
pub use scores::{Direction, Method, ScoreConfig, ScoreValue};
