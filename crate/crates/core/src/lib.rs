//! Desk-scale language-model detoxification workbench.
//!
//! Trains a tiny decoder-only transformer on a synthetic hate-speech /
//! counter-narrative corpus, detoxifies it two ways — counter-narrative
//! fine-tuning and REINFORCE against a toxicity reward model, both through
//! low-rank adapters — and quantifies how detoxification changes the model's
//! dependence on prompt tokens via gradient-attribution entropy.

pub mod autodiff;
pub mod error;
pub mod seeding;

pub use error::{Error, Result};
