//! Medical VQA with meta-learned and denoising-pretrained visual features.
//!
//! The image side ("MEVF") is a pair of feature extractors: a four-layer
//! convolutional meta-learner pretrained with MAML on a small labelled
//! taxonomy, and a convolutional denoising auto-encoder pretrained on
//! unlabelled images. Both feed a soft-attention VQA head with an LSTM
//! question encoder, fine-tuned with a classification + reconstruction loss.
//!
//! Everything runs on the small reverse-mode engine in [`autodiff`].

pub mod autodiff;
pub mod cdae;
pub mod data;
pub mod error;
pub mod maml;
pub mod nn;
pub mod vqa;

pub use autodiff::{Params, Tensor};
pub use error::{Error, Result};
