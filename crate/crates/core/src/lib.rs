//! darktrack: adapting a daytime Siamese tracker to nighttime footage
//! without nighttime labels.
//!
//! The pipeline has three legs:
//!
//! 1. **Object discovery** ([`discovery`]) turns raw unlabeled night video
//!    into per-sequence box tracks and paired training patches:
//!    low-light enhancement, salient-region detection, candidate box
//!    extraction, dynamic-programming box linking, and linear
//!    interpolation of skipped frames.
//! 2. **Adversarial adaptation** ([`model`], [`training`]) inserts a
//!    Transformer bridging layer after the Siamese feature extractor and
//!    trains it against a Transformer day/night discriminator (least-squares
//!    adversarial loss, gradient-reversal layer, alternating updates) so
//!    that day and night feature distributions coincide.
//! 3. **Evaluation** ([`eval`]) runs one-pass evaluation with precision,
//!    normalized precision, and success AUC, computes illumination
//!    attributes (LAI / IV), and projects features to 2-D for
//!    distribution plots.
//!
//! All tensors are `f64` and every stochastic step is driven by an
//! explicit seed, so runs are reproducible byte-for-byte.

pub mod discovery;
pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod training;
pub mod types;

pub use error::Error;
pub use types::{BoundingBox, BoxTrack, FeatureMap, FrameProvenance, FrameSequence, Role};

pub type Result<T> = std::result::Result<T, Error>;
