//! A desk-scale laboratory for studying how convolutional networks behave
//! under low-precision fixed-point quantization, and whether a graph
//! hypernetwork can learn to predict parameters that survive it.
//!
//! The crate is organized in layers:
//!
//! - [`tensor`]: dense tensors, pure forward/gradient kernels, a reverse-mode
//!   tape, and optimizers. Everything downstream builds on this.
//! - [`quant`]: simulated fixed-point quantization (range observers, affine
//!   quantize/dequantize, straight-through fake quantization, batch norm
//!   folding).
//! - [`init`]: the twelve-initializer family used by the robustness study.
//! - [`zoo`]: fixed CNN macroarchitectures for the initializer study.
//! - [`graph`]: a cell-based architecture sampler with in- and
//!   out-of-distribution splits, plus parameter counting and instantiation.
//! - [`ghn`]: a toy graph hypernetwork that predicts CNN parameters from an
//!   architecture graph.
//! - [`data`]: synthetic image classification data and a CIFAR-10 loader.
//! - [`train`]: CNN training, activation calibration, quantized evaluation,
//!   and GHN finetuning loops.
//! - [`study`], [`report`]: experiment drivers and CSV/SVG reporting.
//!
//! Heavy loops fan out through [`parallel`], which is backed by rayon when the
//! `parallel` feature (on by default) is enabled and otherwise runs
//! sequentially. Results are bit-identical across thread counts.

pub mod data;
pub mod error;
pub mod ghn;
pub mod graph;
pub mod init;
pub mod parallel;
pub mod quant;
pub mod report;
pub mod study;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
