//! Ontology extension with a small encoder-only transformer trained on the
//! ontology's own SMILES annotations.
//!
//! The pipeline: parse an OBO ontology ([`ontology`]), derive a multi-label
//! dataset from its structured leaves ([`dataset`]), learn a BPE vocabulary
//! ([`tokenizer`]), pretrain with masked language modelling and fine-tune a
//! classifier ([`model`], [`training`]), score it ([`evaluation`]), explain
//! predictions with attention ([`explain`]) and finally insert new classes
//! under their predicted superclasses ([`extension`]).

pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod explain;
pub mod extension;
pub mod fsutil;
pub mod model;
pub mod ontology;
pub mod pipeline;
pub mod tokenizer;
pub mod toy;
pub mod training;
