//! Input tokenization: patch embedding plus parameter-free construction of
//! the compressed token set.
//!
//! An image becomes lookup features through a flattened-patch projection
//! (equivalent to a stride-patch convolution, but kept as unfold+matmul so
//! every MAC is visible to the meter). Compressed tokens are *not* learned:
//! features and positional table are resized to the compressed grid
//! separately and then added, which is what lets one parameter set serve any
//! compressed resolution.

use crate::rng::SplitMix64;
use crate::tensor::{CostKind, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Learnable tokenization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedParams<T: Real> {
    /// (patch_h * patch_w * channels, dim) projection of flattened patches.
    pub kernel: Tensor<T>,
    /// (dim,)
    pub bias: Tensor<T>,
    /// Learnable positional table at the lookup grid: (h_l, w_l, dim).
    pub pos_lookup: Tensor<T>,
}

impl<T: Real> PatchEmbedParams<T> {
    /// Kernel and positional table from Normal(0, 0.02), zero bias.
    pub fn init(
        patch: (usize, usize),
        channels: usize,
        dim: usize,
        lookup_grid: (usize, usize),
        rng: &mut SplitMix64,
    ) -> Self {
        let k = patch.0 * patch.1 * channels;
        let kernel = gaussian(vec![k, dim], 0.02, rng);
        let bias = Tensor::zeros(vec![dim]);
        let pos_lookup = gaussian(vec![lookup_grid.0, lookup_grid.1, dim], 0.02, rng);
        PatchEmbedParams { kernel, bias, pos_lookup }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundPatchEmbed {
        BoundPatchEmbed {
            kernel: tape.leaf(self.kernel.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
            pos_lookup: tape.leaf(self.pos_lookup.clone(), trainable),
        }
    }
}

pub(crate) fn gaussian<T: Real>(shape: Vec<usize>, std: f64, rng: &mut SplitMix64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
    Tensor::new(shape, data).expect("gaussian shape")
}

/// Tape handles for one pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundPatchEmbed {
    pub kernel: Var,
    pub bias: Var,
    pub pos_lookup: Var,
}

/// The two token streams threaded through every block.
#[derive(Debug, Clone)]
pub struct TokenPair {
    /// Compressed tokens, (M, dim).
    pub z_p: Var,
    /// Lookup tokens, (N, dim).
    pub z_l: Var,
    /// (h_l, w_l) or (t_l, h_l, w_l).
    pub lookup_grid: Vec<usize>,
    /// (h_p, w_p) or (t_p, h_p, w_p).
    pub compressed_grid: Vec<usize>,
}

impl TokenPair {
    pub fn num_lookup(&self) -> usize {
        self.lookup_grid.iter().product()
    }

    pub fn num_compressed(&self) -> usize {
        self.compressed_grid.iter().product()
    }

    /// C = N / M ≥ 1.
    pub fn compression_ratio(&self) -> f64 {
        self.num_lookup() as f64 / self.num_compressed() as f64
    }
}

/// Project non-overlapping patches into lookup features (h_l, w_l, dim).
pub fn embed_patches<T: Real>(
    tape: &mut Tape<T>,
    image: Var,
    params: &BoundPatchEmbed,
    patch: (usize, usize),
) -> Result<Var> {
    let ishape = tape.value(image).shape().to_vec();
    if ishape.len() != 3 {
        return Err(Error::Shape(format!("embed_patches wants (h, w, c), got {ishape:?}")));
    }
    let kshape = tape.value(params.kernel).shape().to_vec();
    let expected_k = patch.0 * patch.1 * ishape[2];
    if kshape.len() != 2 || kshape[0] != expected_k {
        return Err(Error::Shape(format!(
            "patch kernel {kshape:?} does not accept flattened {0}x{1}x{2} patches",
            patch.0, patch.1, ishape[2]
        )));
    }
    let dim = kshape[1];
    let (gh, gw) = (ishape[0] / patch.0, ishape[1] / patch.1);
    let patches = tape.patch_extract(image, patch)?;
    let feats = tape.matmul(patches, params.kernel, CostKind::Neglected)?;
    let feats = tape.add_bias(feats, params.bias)?;
    tape.reshape(feats, vec![gh, gw, dim])
}

/// Positional table matched to the feature grid, resizing when the model is
/// evaluated at a grid it was not built for.
fn positional_at_grid<T: Real>(
    tape: &mut Tape<T>,
    pos_lookup: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let pshape = tape.value(pos_lookup).shape().to_vec();
    if (pshape[0], pshape[1]) == grid {
        Ok(pos_lookup)
    } else {
        tape.bilinear_resize(pos_lookup, grid)
    }
}

/// Build both token sets from lookup features. Features and positional
/// embeddings are resized separately, then added; the compressed stream is a
/// pure resample of the lookup stream's ingredients.
pub fn build_token_pair<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    params: &BoundPatchEmbed,
    compressed_grid: (usize, usize),
) -> Result<TokenPair> {
    let fshape = tape.value(features).shape().to_vec();
    if fshape.len() != 3 {
        return Err(Error::Shape(format!("features must be (h_l, w_l, dim), got {fshape:?}")));
    }
    let (hl, wl, dim) = (fshape[0], fshape[1], fshape[2]);
    let (hp, wp) = compressed_grid;
    if hp == 0 || wp == 0 || hp > hl || wp > wl {
        return Err(Error::Config(format!(
            "compressed grid {hp}x{wp} must fit inside lookup grid {hl}x{wl} (C >= 1)"
        )));
    }
    let pos = positional_at_grid(tape, params.pos_lookup, (hl, wl))?;

    let lookup_sum = tape.add(features, pos)?;
    let z_l = tape.reshape(lookup_sum, vec![hl * wl, dim])?;

    let f_p = tape.bilinear_resize(features, (hp, wp))?;
    let pos_p = tape.bilinear_resize(pos, (hp, wp))?;
    let comp_sum = tape.add(f_p, pos_p)?;
    let z_p = tape.reshape(comp_sum, vec![hp * wp, dim])?;

    Ok(TokenPair {
        z_p,
        z_l,
        lookup_grid: vec![hl, wl],
        compressed_grid: vec![hp, wp],
    })
}

/// Video analogue: trilinear resampling over (t, h, w, dim) feature volumes.
/// `pos_lookup` must already live on the lookup volume.
pub fn build_video_token_pair<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    pos_lookup: Var,
    compressed_grid: (usize, usize, usize),
) -> Result<TokenPair> {
    let fshape = tape.value(features).shape().to_vec();
    if fshape.len() != 4 {
        return Err(Error::Shape(format!(
            "video features must be (t_l, h_l, w_l, dim), got {fshape:?}"
        )));
    }
    let (tl, hl, wl, dim) = (fshape[0], fshape[1], fshape[2], fshape[3]);
    let (tp, hp, wp) = compressed_grid;
    if tp == 0 || hp == 0 || wp == 0 || tp > tl || hp > hl || wp > wl {
        return Err(Error::Config(format!(
            "compressed grid {tp}x{hp}x{wp} must fit inside lookup grid {tl}x{hl}x{wl}"
        )));
    }
    if tape.value(pos_lookup).shape() != fshape.as_slice() {
        return Err(Error::Shape(format!(
            "positional volume {:?} does not match features {fshape:?}",
            tape.value(pos_lookup).shape()
        )));
    }

    let lookup_sum = tape.add(features, pos_lookup)?;
    let z_l = tape.reshape(lookup_sum, vec![tl * hl * wl, dim])?;

    let f_p = tape.trilinear_resize(features, (tp, hp, wp))?;
    let pos_p = tape.trilinear_resize(pos_lookup, (tp, hp, wp))?;
    let comp_sum = tape.add(f_p, pos_p)?;
    let z_p = tape.reshape(comp_sum, vec![tp * hp * wp, dim])?;

    Ok(TokenPair {
        z_p,
        z_l,
        lookup_grid: vec![tl, hl, wl],
        compressed_grid: vec![tp, hp, wp],
    })
}
