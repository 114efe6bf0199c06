//! Multi-scale next-scale-prediction pretraining for scene-text encoders:
//! a shared ViT encoder trained with next-scale prediction, masked
//! feature modeling and [CLS] alignment, plus the recognizer and analysis
//! protocols built on top of it.

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod interp;
pub mod model;
pub mod objectives;
pub mod params;
pub mod pretrain;
pub mod recognizer;
pub mod rng;
pub mod scale;

pub use config::{RunConfig, FORMAT_VERSION};
pub use data::{Image, TextBox, TextSample};
pub use error::{Error, Result};
pub use model::{Encoder, EncoderConfig, MaskPattern, TokenSequence};
pub use objectives::{LossBreakdown, TargetMode};
pub use params::{Matrix, ParamStore};
pub use pretrain::{Checkpoint, Dtype, PretrainConfig};
pub use recognizer::{Charset, RecognizerConfig};
pub use scale::{ScaleSequence, ScaleSpec};
