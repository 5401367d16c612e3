//! Adversarial-example detection for vision transformers.
//!
//! An input is reconstructed by a masked autoencoder from a subset of its
//! patches; clean inputs survive this round trip while adversarial
//! perturbations do not. Two detectors compare the classifier's view of the
//! input and of its reconstruction: the attention-rollout CLS vector
//! ([`detectors::Feature::Attention`]) and the CLS representation
//! ([`detectors::Feature::Cls`]) at one transformer layer.
//!
//! The crate includes everything needed to run that pipeline end to end at
//! small scale: a reverse-mode tape ([`tape`]), a ViT classifier ([`vit`]),
//! an MAE ([`mae`]), attention rollout ([`rollout`]), attacks
//! ([`attacks`]), metrics and experiment orchestration ([`eval`]).

pub mod attacks;
pub mod config;
pub mod container;
pub mod data;
pub mod detectors;
pub mod error;
pub mod eval;
pub mod image;
pub mod layers;
pub mod mae;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod rollout;
pub mod tape;
pub mod vit;

pub use error::{Error, Result};
