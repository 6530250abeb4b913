//! Multimodal fused graph convolutional network (MMGCN) for emotion
//! recognition in conversation.

pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod graph;
pub mod model;
pub mod modality;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
pub use modality::{Modality, ModalityMask};
