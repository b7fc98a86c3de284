//! Graph classification with latent fixed data structures.
//!
//! Local node features extracted by a spatial GNN backbone are
//! softmax-projected onto a fixed latent structure (image grid, array,
//! sequence, loop, or learnable graph), aggregated there by a latent
//! CNN/GNN, and classified by a fully connected head. Everything runs on a
//! small f64 tape with reverse-mode differentiation so gradients can be
//! verified against finite differences end to end.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

use std::path::Path;

/// Writes a file atomically (temp file in the same directory, then rename),
/// so failed runs never leave partial outputs behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
