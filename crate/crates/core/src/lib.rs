//! Self-supervised pre-training for event-camera data.
//!
//! Event streams are augmented in the raw event domain, rasterized into
//! two-channel histograms and reduced to information-weighted patch sets.
//! An online encoder and a momentum (EMA) copy embed two such views, and
//! training minimizes a projection-regularized event InfoNCE, an event–RGB
//! InfoNCE against precomputed teacher embeddings, and a KL alignment of
//! in-batch similarity distributions.

pub mod augment;
pub mod config;
pub mod eval;
pub mod event;
pub mod grad;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod rng;
pub mod study;
pub mod synth;
pub mod trainer;
pub mod viewgen;
