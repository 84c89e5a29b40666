//! Discrete conditional variational autoencoder for short-text response
//! generation, with a two-stage (cluster, then word) latent variable.
//!
//! Everything runs on a small define-by-run autodiff engine ([`tensor`]).

pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod data;
pub mod decode;
pub mod dist;
pub mod error;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod train;

pub use cluster::{adjusted_rand_index, kmeans, ClusterModel, EmbeddingFile, Partition, WordEmbeddings};
pub use data::{Example, LatentRestriction, LatentSpace, TextPair, Vocab};
pub use decode::{beam_search, generate_diverse, generate_with_latent, greedy_decode, BeamConfig, BeamResult, StepModel};
pub use dist::{FlatDist, LatentDist, TwoStageDist};
pub use error::{Error, Result};
pub use metrics::{bleu_n, distinct_n, evaluate, EvalReport, GeneratedLine};
pub use model::{Dcvae, LatentMode, LatentSetup, ModelDims};
pub use objective::{exact_bound, kl_categorical, kl_two_stage, training_loss, LossBreakdown, LossOptions};
pub use optim::Adam;
pub use params::{Bound, ParamId, ParamStore};
pub use sampling::{sample_categorical, two_stage_sample, Rng};
pub use tensor::{grad_check, grad_check_straight_through, Gradients, Primitive, Tape, Tensor, Var};
pub use train::{pretrain, train, PretrainConfig, TrainConfig, Trainer};
