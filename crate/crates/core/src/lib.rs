//! Adversarial patches that stay close to a chosen artwork while suppressing
//! a person detector.
//!
//! The crate is layered bottom-up: [`tensorgrad`] (reverse-mode autodiff),
//! [`imaging`], [`patchops`] (placement and compositing), [`losses`],
//! [`detector`] (toy victim and synthetic data), [`optimize`] (crafting) and
//! [`eval`] (mAP, ASR, sweeps).

pub mod detector;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod losses;
pub mod optimize;
pub mod patchops;
pub mod tensorgrad;

pub use error::{Error, Result};
