//! Faithful summarization toolkit on a toy decoder: hallucination-injected
//! preference data, DPO-family finetuning, white-box hallucination detection
//! and summary evaluation.

pub mod cli;
pub mod datagen;
pub mod detection;
pub mod eval;
pub mod gateway;
pub mod lexicon;
pub mod model;
pub mod numcore;
pub mod objectives;
pub mod text;
pub mod train;
pub mod util;
