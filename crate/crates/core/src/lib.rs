//! HDANet: hierarchical disentanglement-alignment network for SAR target
//! recognition, built on a small self-contained reverse-mode autodiff engine.

pub mod tensor;
pub mod augment;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod gradsuite;
pub mod image;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod rng;

// Training allocates and frees many large short-lived buffers; the system
// allocator maps and unmaps them on every step.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
