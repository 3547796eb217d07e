//! Block-wise read-noise model for weights stored on analog memory.
//!
//! A weight matrix mapped onto crossbar arrays is physically split into
//! m x n tiles (64x64 by default), and each read of a tile comes back
//! perturbed by device variability. The model here: for tile `T`,
//!
//! ```text
//! T* = T + E * max|T|,    E elementwise i.i.d. N(0, sigma^2)
//! ```
//!
//! so `sigma` is a *relative* noise level — the perturbation scales with the
//! largest weight stored in that tile. Splitting and concatenation are exact
//! bookkeeping (`concatenate(split(w)) == w` bit-for-bit); `sigma = 0` is
//! the identity. Adapter matrices and activation math are never perturbed:
//! they model noise-free digital computation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Named frozen weights eligible for read noise. `BTreeMap` so iteration
/// order (and therefore any derived hashing) is deterministic.
pub type WeightSet = BTreeMap<String, Matrix>;

/// Read-noise parameters: relative level, tile shape, and the seed used by
/// config-driven callers to build the injection RNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Relative noise level sigma (std of E); 0 disables noise.
    pub sigma: f64,
    /// Tile height m.
    #[serde(default = "default_tile")]
    pub tile_rows: usize,
    /// Tile width n.
    #[serde(default = "default_tile")]
    pub tile_cols: usize,
    /// Base seed for noise sampling.
    #[serde(default)]
    pub seed: u64,
}

fn default_tile() -> usize {
    64
}

impl NoiseSpec {
    /// Spec with the default 64x64 tiling.
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        NoiseSpec::with_tiles(sigma, 64, 64, seed)
    }

    pub fn with_tiles(sigma: f64, tile_rows: usize, tile_cols: usize, seed: u64) -> Result<Self> {
        let spec = NoiseSpec {
            sigma,
            tile_rows,
            tile_cols,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if self.tile_rows == 0 || self.tile_cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "tile shape must be at least 1x1, got {}x{}",
                self.tile_rows, self.tile_cols
            )));
        }
        Ok(())
    }
}

/// Exact tiling of a d1 x d2 matrix into an (k x t) grid of at-most m x n
/// tiles; edge tiles keep their true (smaller) extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    source_rows: usize,
    source_cols: usize,
    tile_rows: usize,
    tile_cols: usize,
    grid_rows: usize,
    grid_cols: usize,
}

impl TileGrid {
    pub fn new(source_rows: usize, source_cols: usize, tile_rows: usize, tile_cols: usize) -> Result<Self> {
        if source_rows == 0 || source_cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot tile an empty {source_rows}x{source_cols} matrix"
            )));
        }
        if tile_rows == 0 || tile_cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "tile shape must be at least 1x1, got {tile_rows}x{tile_cols}"
            )));
        }
        Ok(TileGrid {
            source_rows,
            source_cols,
            tile_rows,
            tile_cols,
            grid_rows: source_rows.div_ceil(tile_rows),
            grid_cols: source_cols.div_ceil(tile_cols),
        })
    }

    /// Grid dimensions (k, t).
    pub fn grid_shape(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    /// Source matrix dimensions (d1, d2).
    pub fn source_shape(&self) -> (usize, usize) {
        (self.source_rows, self.source_cols)
    }

    /// Top-left corner and true extent of tile (i, j):
    /// rows `[i*m, min((i+1)*m, d1))`, cols `[j*n, min((j+1)*n, d2))`.
    pub fn tile_extent(&self, i: usize, j: usize) -> (usize, usize, usize, usize) {
        debug_assert!(i < self.grid_rows && j < self.grid_cols);
        let r0 = i * self.tile_rows;
        let c0 = j * self.tile_cols;
        let h = self.tile_rows.min(self.source_rows - r0);
        let w = self.tile_cols.min(self.source_cols - c0);
        (r0, c0, h, w)
    }

    /// Iterator over (i, j) tile coordinates in row-major order.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.grid_cols;
        (0..self.grid_rows).flat_map(move |i| (0..cols).map(move |j| (i, j)))
    }
}

/// Splits `w` into tiles (row-major tile order) under `spec`'s tile shape.
pub fn split(w: &Matrix, spec: &NoiseSpec) -> Result<(TileGrid, Vec<Matrix>)> {
    spec.validate()?;
    let grid = TileGrid::new(w.rows(), w.cols(), spec.tile_rows, spec.tile_cols)?;
    let mut tiles = Vec::with_capacity(grid.grid_rows * grid.grid_cols);
    for (i, j) in grid.coords() {
        let (r0, c0, h, wd) = grid.tile_extent(i, j);
        tiles.push(w.block(r0, c0, h, wd)?);
    }
    Ok((grid, tiles))
}

/// Reassembles tiles (row-major tile order) into the original matrix.
/// Inverse of [`split`], bit-exact.
pub fn concatenate(grid: &TileGrid, tiles: &[Matrix]) -> Result<Matrix> {
    let expected = grid.grid_rows * grid.grid_cols;
    if tiles.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "{} tiles given for a {}x{} grid of {expected}",
            tiles.len(),
            grid.grid_rows,
            grid.grid_cols
        )));
    }
    let mut out = Matrix::zeros(grid.source_rows, grid.source_cols);
    for (idx, (i, j)) in grid.coords().enumerate() {
        let (r0, c0, h, w) = grid.tile_extent(i, j);
        let tile = &tiles[idx];
        if tile.shape() != (h, w) {
            return Err(Error::InvalidArgument(format!(
                "tile ({i},{j}) has shape {}x{}, grid expects {h}x{w}",
                tile.rows(),
                tile.cols()
            )));
        }
        out.set_block(r0, c0, tile)?;
    }
    Ok(out)
}

/// One noisy read of `w0`: every tile `T` becomes `T + E * max|T|` with `E`
/// elementwise i.i.d. `N(0, sigma^2)` drawn from `rng`. `w0` itself is never
/// mutated; each call draws fresh noise.
///
/// `sigma = 0` returns an exact copy and consumes no randomness. An all-zero
/// tile is unchanged (its max-abs scale is 0).
pub fn inject_noise(w0: &Matrix, spec: &NoiseSpec, rng: &mut Rng) -> Result<Matrix> {
    spec.validate()?;
    if spec.sigma == 0.0 {
        return Ok(w0.clone());
    }
    let grid = TileGrid::new(w0.rows(), w0.cols(), spec.tile_rows, spec.tile_cols)?;
    let mut out = w0.clone();
    for (i, j) in grid.coords() {
        let (r0, c0, h, w) = grid.tile_extent(i, j);
        let tile = w0.block(r0, c0, h, w)?;
        let scale = tile.max_abs();
        // Draw the full tile even when scale == 0 so the consumed stream
        // depends only on shape, keeping draws aligned across weight scales.
        let e = rng.gaussian_matrix(h, w, spec.sigma);
        if scale == 0.0 {
            continue;
        }
        let mut noisy = tile;
        noisy.axpy(scale, &e)?;
        out.set_block(r0, c0, &noisy)?;
    }
    Ok(out)
}

/// Noisy read of a whole weight set. Each matrix gets its own RNG stream
/// derived from `rng`'s key and the matrix *name*, so iteration order,
/// adding matrices, or renaming one matrix never changes another's
/// perturbation.
pub fn noisy_view(backbone: &WeightSet, spec: &NoiseSpec, rng: &Rng) -> Result<WeightSet> {
    let mut out = WeightSet::new();
    for (name, w0) in backbone {
        let mut stream = rng.named_stream(name);
        out.insert(name.clone(), inject_noise(w0, spec, &mut stream)?);
    }
    Ok(out)
}
