//! Hierarchical urban sound tagging.
//!
//! The crate covers the whole pipeline: a two-level tag [`taxonomy`], a
//! log-mel front end ([`dsp`]), training-time [`augment`]ations, a
//! CNN-Transformer tagger with metadata fusion ([`nn`]), masked hierarchical
//! losses ([`loss`]), the Ralamb + Lookahead optimizer ([`optim`]),
//! challenge-style AUPRC metrics ([`eval`]), dataset handling and relabeling
//! ([`data`]) and the training / evaluation drivers ([`train`]).
//!
//! Differentiation is provided by the companion `sonotag-tensor` crate,
//! re-exported as [`tensor`].

pub mod augment;
pub mod data;
pub mod dsp;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod optim;
mod error;
pub mod taxonomy;
pub mod train;

pub use error::{Error, Result};
pub use sonotag_tensor as tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/taxonomy.md")]
    pub struct TaxonomyChapter;
    #[doc = include_str!("../../../book/src/features.md")]
    pub struct Features;
    #[doc = include_str!("../../../book/src/augmentation.md")]
    pub struct Augmentation;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub struct Autodiff;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct ModelChapter;
    #[doc = include_str!("../../../book/src/losses.md")]
    pub struct Losses;
    #[doc = include_str!("../../../book/src/optimizer.md")]
    pub struct OptimizerChapter;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
}
