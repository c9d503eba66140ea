pub mod backbone;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod interpnet;
pub mod keyframe;
pub mod moe;
pub mod nn;
pub mod streamer;
pub mod tokenstream;
pub mod trainer;

pub use error::{Error, Result};

pub type Backbone32 = backbone::Backbone<f32>;
pub type Backbone64 = backbone::Backbone<f64>;
pub type InterpNet32 = interpnet::InterpNet<f32>;
pub type InterpNet64 = interpnet::InterpNet<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Checkpoint32 = kfgen_tensor::Checkpoint<f32>;
pub type Checkpoint64 = kfgen_tensor::Checkpoint<f64>;
