//! Divide, conquer and combine: training-free high-resolution image
//! perception for chat-with-image models.
//!
//! An image is split recursively into encoder-sized patches (similar siblings
//! are averaged together), every patch is captioned, objects corroborated by
//! both a node and its children are stored with their patch coordinates in a
//! visual memory, and questions are answered with descriptions of the patches
//! retrieved from that memory.

pub mod backend;
pub mod combine;
pub mod config;
pub mod conquer;
pub mod divide;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod prompts;
pub mod raster;
pub mod synth;
