//! 1D patchification, patch embedding, fixed sine-cosine positional tables,
//! and seeded random masking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Matrix};

pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const DEFAULT_MASK_RATIO: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    n_channels: usize,
    patch_size: usize,
}

impl PatchGrid {
    pub fn new(n_channels: usize, patch_size: usize) -> Result<Self> {
        if n_channels == 0 || patch_size == 0 {
            return Err(Error::InvalidArgument(
                "channel count and patch size must be positive".into(),
            ));
        }
        if !n_channels.is_multiple_of(patch_size) {
            return Err(Error::InvalidArgument(format!(
                "{n_channels} channels are not divisible into patches of {patch_size}"
            )));
        }
        Ok(PatchGrid { n_channels, patch_size })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.n_channels / self.patch_size
    }
}

/// Split channels into an `n_patches × patch_size` matrix; patch `p` holds
/// channels `[p·size, (p+1)·size)`.
pub fn patchify(x: &[f64], grid: &PatchGrid) -> Result<Matrix> {
    if x.len() != grid.n_channels {
        return Err(Error::Shape(format!(
            "spectrum has {} channels, grid expects {}",
            x.len(),
            grid.n_channels
        )));
    }
    Matrix::from_vec(grid.n_patches(), grid.patch_size, x.to_vec())
}

pub fn unpatchify(patches: &Matrix) -> Vec<f64> {
    patches.as_slice().to_vec()
}

/// Concatenate patches given as separate rows; ragged input is an error.
pub fn unpatchify_rows(patches: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(unpatchify(&Matrix::from_rows(patches)?))
}

/// `token_p = patch_p · W + b` for every patch.
pub fn embed_patches(patches: &Matrix, weight: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if weight.rows() != patches.cols() || bias.shape() != (1, weight.cols()) {
        return Err(Error::Shape(format!(
            "projection {}x{} with bias {}x{} cannot embed patches of width {}",
            weight.rows(),
            weight.cols(),
            bias.rows(),
            bias.cols(),
            patches.cols()
        )));
    }
    let mut out = matmul(patches, weight);
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(bias.as_slice()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Fixed 1D sine-cosine table: for position `p` and `k < d/2`,
/// `[k] = sin(p·ω_k)` and `[d/2 + k] = cos(p·ω_k)` with `ω_k = 10000^(-2k/d)`.
/// With `with_cls`, an all-zero row 0 is prepended for the class token.
pub fn positional_embedding(n_positions: usize, d: usize, with_cls: bool) -> Result<Matrix> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "positional embedding width must be even and positive, got {d}"
        )));
    }
    let half = d / 2;
    let offset = usize::from(with_cls);
    let mut out = Matrix::zeros(n_positions + offset, d);
    for p in 0..n_positions {
        let row = out.row_mut(p + offset);
        for k in 0..half {
            let omega = 1.0 / 10000f64.powf(k as f64 / half as f64);
            let angle = p as f64 * omega;
            row[k] = angle.sin();
            row[half + k] = angle.cos();
        }
    }
    Ok(out)
}

/// Partition of patch indices into kept (visible to the encoder) and masked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_patches: usize,
    pub mask_ratio: f64,
    pub masked: Vec<usize>,
    pub kept: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn is_masked(&self, p: usize) -> bool {
        self.masked.binary_search(&p).is_ok()
    }

    /// For each patch position, its row among the kept tokens (`None` if masked).
    pub fn kept_slots(&self) -> Vec<Option<usize>> {
        let mut slots = vec![None; self.n_patches];
        for (j, &p) in self.kept.iter().enumerate() {
            slots[p] = Some(j);
        }
        slots
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("mask plan serializes")
    }
}

pub fn mask_count(n_patches: usize, mask_ratio: f64) -> usize {
    (n_patches as f64 * mask_ratio).floor() as usize
}

/// Uniformly random subset of `floor(n · ratio)` masked patches, drawn by a
/// seeded shuffle. Index lists are returned sorted.
pub fn sample_mask(n_patches: usize, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio must lie in [0, 1), got {mask_ratio}"
        )));
    }
    let n_mask = mask_count(n_patches, mask_ratio);
    let mut order: Vec<usize> = (0..n_patches).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut masked = order[..n_mask].to_vec();
    let mut kept = order[n_mask..].to_vec();
    masked.sort_unstable();
    kept.sort_unstable();
    Ok(MaskPlan {
        n_patches,
        mask_ratio,
        masked,
        kept,
        seed,
    })
}
