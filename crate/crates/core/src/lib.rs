pub mod cli;
pub mod clustering;
pub mod codec;
pub mod entropycoder;
pub mod eval;
pub mod fixtures;
pub mod formats;
pub mod latent;
pub mod models;
pub mod rng;
pub mod taxonomy;
