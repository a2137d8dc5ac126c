//! The token-compression transformer block.
//!
//! Per block, four stages in order:
//! 1. gather: compressed tokens query the lookup tokens through multi-head
//!    cross-attention; the attention weights are kept for reuse,
//! 2. refine: a standard pre-LN ViT block over the compressed tokens only,
//! 3. infuse: lookup tokens receive `A^T V` of the refined compressed
//!    tokens, reusing the stored weights — no second softmax,
//! 4. a narrow MLP (hidden dim / q) over the lookup tokens.
//!
//! Residual placement: gather applies its residual internally on the
//! compressed stream; infuse returns only the update term and the caller
//! adds it to the raw lookup stream, so each path has exactly one residual.
//! The layer norms on Q, K (after projection) and on the infuse values are
//! part of the design and are kept even though conventional attention
//! omits them.

use crate::rng::SplitMix64;
use crate::tensor::{CostKind, Real, Tape, Tensor, Var};
use crate::tokenizer::{gaussian, TokenPair};
use crate::{Error, Result};

/// Epsilon used by every layer norm in the stack.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> LayerNormParams<T> {
    pub fn init(dim: usize) -> Self {
        LayerNormParams { gamma: Tensor::filled(vec![dim], T::ONE), beta: Tensor::zeros(vec![dim]) }
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundLayerNorm {
        BoundLayerNorm {
            gamma: tape.leaf(self.gamma.clone(), trainable),
            beta: tape.leaf(self.beta.clone(), trainable),
        }
    }
}

/// Pre-LN MLP: ln -> w1/b1 -> gelu -> w2/b2 (no residual; callers add it).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T: Real> {
    pub ln: LayerNormParams<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Real> MlpParams<T> {
    pub fn init(dim: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        MlpParams {
            ln: LayerNormParams::init(dim),
            w1: gaussian(vec![dim, hidden], 0.02, rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: gaussian(vec![hidden, dim], 0.02, rng),
            b2: Tensor::zeros(vec![dim]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundMlp {
        BoundMlp {
            ln: self.ln.bind(tape, trainable),
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
        }
    }
}

/// All learnable weights of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T: Real> {
    // Gather direction (lookup -> compressed).
    pub ln_pre_gather_p: LayerNormParams<T>,
    pub ln_pre_gather_l: LayerNormParams<T>,
    pub w_q: Tensor<T>,
    pub ln_q: LayerNormParams<T>,
    pub w_k: Tensor<T>,
    pub ln_k: LayerNormParams<T>,
    pub w_v_lookup: Tensor<T>,
    pub w_o_gather: Option<Tensor<T>>,
    // Infuse direction (compressed -> lookup), attention weights reused.
    pub ln_pre_infuse_p: LayerNormParams<T>,
    pub w_v_comp: Tensor<T>,
    pub ln_v: LayerNormParams<T>,
    pub w_o_infuse: Option<Tensor<T>>,
    // Inner ViT block over compressed tokens.
    pub vit_ln: LayerNormParams<T>,
    pub vit_w_q: Tensor<T>,
    pub vit_w_k: Tensor<T>,
    pub vit_w_v: Tensor<T>,
    pub vit_w_o: Tensor<T>,
    pub vit_mlp: MlpParams<T>,
    // Narrow MLP over lookup tokens.
    pub lookup_mlp: MlpParams<T>,
}

impl<T: Real> BlockParams<T> {
    /// Projections from Normal(0, 0.02); norms at identity; biases zero.
    /// `output_projections` adds the post-merge projection to both
    /// cross-attention directions.
    pub fn init(
        dim: usize,
        heads: usize,
        p: usize,
        q: usize,
        output_projections: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by heads {heads}")));
        }
        if p < 1 || q < 1 {
            return Err(Error::Config(format!("mlp factors p={p}, q={q} must be >= 1")));
        }
        if !dim.is_multiple_of(q) {
            return Err(Error::Config(format!("dim {dim} not divisible by q {q}")));
        }
        let proj = |rng: &mut SplitMix64| gaussian(vec![dim, dim], 0.02, rng);
        Ok(BlockParams {
            ln_pre_gather_p: LayerNormParams::init(dim),
            ln_pre_gather_l: LayerNormParams::init(dim),
            w_q: proj(rng),
            ln_q: LayerNormParams::init(dim),
            w_k: proj(rng),
            ln_k: LayerNormParams::init(dim),
            w_v_lookup: proj(rng),
            w_o_gather: output_projections.then(|| proj(rng)),
            ln_pre_infuse_p: LayerNormParams::init(dim),
            w_v_comp: proj(rng),
            ln_v: LayerNormParams::init(dim),
            w_o_infuse: output_projections.then(|| proj(rng)),
            vit_ln: LayerNormParams::init(dim),
            vit_w_q: proj(rng),
            vit_w_k: proj(rng),
            vit_w_v: proj(rng),
            vit_w_o: proj(rng),
            vit_mlp: MlpParams::init(dim, p * dim, rng),
            lookup_mlp: MlpParams::init(dim, dim / q, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundBlock {
        BoundBlock {
            ln_pre_gather_p: self.ln_pre_gather_p.bind(tape, trainable),
            ln_pre_gather_l: self.ln_pre_gather_l.bind(tape, trainable),
            w_q: tape.leaf(self.w_q.clone(), trainable),
            ln_q: self.ln_q.bind(tape, trainable),
            w_k: tape.leaf(self.w_k.clone(), trainable),
            ln_k: self.ln_k.bind(tape, trainable),
            w_v_lookup: tape.leaf(self.w_v_lookup.clone(), trainable),
            w_o_gather: self.w_o_gather.as_ref().map(|t| tape.leaf(t.clone(), trainable)),
            ln_pre_infuse_p: self.ln_pre_infuse_p.bind(tape, trainable),
            w_v_comp: tape.leaf(self.w_v_comp.clone(), trainable),
            ln_v: self.ln_v.bind(tape, trainable),
            w_o_infuse: self.w_o_infuse.as_ref().map(|t| tape.leaf(t.clone(), trainable)),
            vit_ln: self.vit_ln.bind(tape, trainable),
            vit_w_q: tape.leaf(self.vit_w_q.clone(), trainable),
            vit_w_k: tape.leaf(self.vit_w_k.clone(), trainable),
            vit_w_v: tape.leaf(self.vit_w_v.clone(), trainable),
            vit_w_o: tape.leaf(self.vit_w_o.clone(), trainable),
            vit_mlp: self.vit_mlp.bind(tape, trainable),
            lookup_mlp: self.lookup_mlp.bind(tape, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMlp {
    pub ln: BoundLayerNorm,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub ln_pre_gather_p: BoundLayerNorm,
    pub ln_pre_gather_l: BoundLayerNorm,
    pub w_q: Var,
    pub ln_q: BoundLayerNorm,
    pub w_k: Var,
    pub ln_k: BoundLayerNorm,
    pub w_v_lookup: Var,
    pub w_o_gather: Option<Var>,
    pub ln_pre_infuse_p: BoundLayerNorm,
    pub w_v_comp: Var,
    pub ln_v: BoundLayerNorm,
    pub w_o_infuse: Option<Var>,
    pub vit_ln: BoundLayerNorm,
    pub vit_w_q: Var,
    pub vit_w_k: Var,
    pub vit_w_v: Var,
    pub vit_w_o: Var,
    pub vit_mlp: BoundMlp,
    pub lookup_mlp: BoundMlp,
}

/// Per-call knobs that do not change parameter shapes.
#[derive(Debug, Clone, Copy)]
pub struct BlockSettings {
    pub heads: usize,
    /// Scale attention logits by 1/sqrt(dim/heads). Default on; off
    /// reproduces the literal unscaled formulation.
    pub scale_logits: bool,
}

/// Row-stochastic cross-attention weights, one (M, N) matrix per head,
/// stored as tape handles so reuse is observable.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub per_head: Vec<Var>,
    pub queries: usize,
    pub keys: usize,
}

impl AttentionWeights {
    pub fn heads(&self) -> usize {
        self.per_head.len()
    }

    /// Materialize as one (heads, M, N) tensor.
    pub fn to_tensor<T: Real>(&self, tape: &Tape<T>) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.heads() * self.queries * self.keys);
        for &v in &self.per_head {
            data.extend_from_slice(tape.value(v).data());
        }
        Tensor::new(vec![self.heads(), self.queries, self.keys], data).expect("attention shape")
    }
}

fn ln<T: Real>(tape: &mut Tape<T>, x: Var, p: &BoundLayerNorm) -> Result<Var> {
    tape.layer_norm(x, p.gamma, p.beta, LN_EPS)
}

fn head_slices<T: Real>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Vec<Var>> {
    let dim = tape.value(x).shape()[1];
    let hd = dim / heads;
    (0..heads).map(|h| tape.col_slice(x, h * hd, hd)).collect()
}

/// Information gathering: compressed tokens attend over lookup tokens.
/// Returns the updated compressed stream (residual applied) and the
/// attention weights for reuse by [`mhbc_infuse`].
pub fn mhbc_gather<T: Real>(
    tape: &mut Tape<T>,
    z_p: Var,
    z_l: Var,
    params: &BoundBlock,
    settings: &BlockSettings,
) -> Result<(Var, AttentionWeights)> {
    let (_, dim) = shape2(tape, z_p)?;
    let (_, dim_l) = shape2(tape, z_l)?;
    if dim != dim_l {
        return Err(Error::Shape(format!("token dims differ: {dim} vs {dim_l}")));
    }
    check_heads(dim, settings.heads)?;

    let xq = ln(tape, z_p, &params.ln_pre_gather_p)?;
    let xkv = ln(tape, z_l, &params.ln_pre_gather_l)?;

    let q_proj = tape.matmul(xq, params.w_q, CostKind::Projections)?;
    let q = ln(tape, q_proj, &params.ln_q)?;
    let k_proj = tape.matmul(xkv, params.w_k, CostKind::Projections)?;
    let k = ln(tape, k_proj, &params.ln_k)?;
    let v = tape.matmul(xkv, params.w_v_lookup, CostKind::Projections)?;

    let (mixed, attn) = attend(tape, q, k, v, settings, CostKind::AttentionCross)?;
    if let Some(m) = tape.meter_mut() {
        m.record_cross_softmax();
    }
    let projected = match params.w_o_gather {
        Some(w) => tape.matmul(mixed, w, CostKind::Projections)?,
        None => mixed,
    };
    let out = tape.add(z_p, projected)?;
    Ok((out, attn))
}

/// Attention core shared by the gather direction and the inner ViT block:
/// per-head softmax(Q K^T * s) V, heads merged by concatenation.
fn attend<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    settings: &BlockSettings,
    kind: CostKind,
) -> Result<(Var, AttentionWeights)> {
    let (m, dim) = shape2(tape, q)?;
    let (n, _) = shape2(tape, k)?;
    let hd = dim / settings.heads;
    let qs = head_slices(tape, q, settings.heads)?;
    let ks = head_slices(tape, k, settings.heads)?;
    let vs = head_slices(tape, v, settings.heads)?;
    let mut mixes = Vec::with_capacity(settings.heads);
    let mut weights = Vec::with_capacity(settings.heads);
    for h in 0..settings.heads {
        let logits = tape.matmul_nt(qs[h], ks[h], kind)?;
        let logits = if settings.scale_logits {
            tape.scale(logits, 1.0 / (hd as f64).sqrt())?
        } else {
            logits
        };
        let a = tape.softmax_rows(logits)?;
        weights.push(a);
        mixes.push(tape.matmul(a, vs[h], kind)?);
    }
    let merged = tape.concat_cols(&mixes)?;
    Ok((merged, AttentionWeights { per_head: weights, queries: m, keys: n }))
}

/// Representation refinement: a standard pre-LN transformer encoder layer
/// over the compressed tokens with MLP hidden width p*dim.
pub fn vit_block<T: Real>(
    tape: &mut Tape<T>,
    z_p: Var,
    params: &BoundBlock,
    settings: &BlockSettings,
) -> Result<Var> {
    let (_, dim) = shape2(tape, z_p)?;
    check_heads(dim, settings.heads)?;

    let x = ln(tape, z_p, &params.vit_ln)?;
    let q = tape.matmul(x, params.vit_w_q, CostKind::Projections)?;
    let k = tape.matmul(x, params.vit_w_k, CostKind::Projections)?;
    let v = tape.matmul(x, params.vit_w_v, CostKind::Projections)?;
    let (mixed, _) = attend(tape, q, k, v, settings, CostKind::AttentionQuadratic)?;
    let projected = tape.matmul(mixed, params.vit_w_o, CostKind::Projections)?;
    let z = tape.add(z_p, projected)?;

    let branch = mlp_branch(tape, z, &params.vit_mlp, CostKind::MlpCompressed)?;
    tape.add(z, branch)
}

/// Global context infusion: the update term `merge_heads(A^T V)` with values
/// taken from the refined compressed tokens. The stored attention is used
/// as-is — transposed rows are not renormalized and no softmax runs here.
/// The caller applies the single residual `z_l + update`.
pub fn mhbc_infuse<T: Real>(
    tape: &mut Tape<T>,
    z_p: Var,
    attn: &AttentionWeights,
    params: &BoundBlock,
    settings: &BlockSettings,
) -> Result<Var> {
    let (m, dim) = shape2(tape, z_p)?;
    check_heads(dim, settings.heads)?;
    if attn.heads() != settings.heads || attn.queries != m {
        return Err(Error::Contract(format!(
            "stale attention: {} heads x {} queries against {} heads x {} compressed tokens",
            attn.heads(),
            attn.queries,
            settings.heads,
            m
        )));
    }

    let xp = ln(tape, z_p, &params.ln_pre_infuse_p)?;
    let v_proj = tape.matmul(xp, params.w_v_comp, CostKind::Projections)?;
    let v = ln(tape, v_proj, &params.ln_v)?;
    let vs = head_slices(tape, v, settings.heads)?;
    let mut parts = Vec::with_capacity(settings.heads);
    for (&a, &v_h) in attn.per_head.iter().zip(&vs) {
        parts.push(tape.matmul_tn(a, v_h, CostKind::AttentionCross)?);
    }
    let merged = tape.concat_cols(&parts)?;
    match params.w_o_infuse {
        Some(w) => tape.matmul(merged, w, CostKind::Projections),
        None => Ok(merged),
    }
}

fn mlp_branch<T: Real>(tape: &mut Tape<T>, x: Var, mlp: &BoundMlp, kind: CostKind) -> Result<Var> {
    let normed = ln(tape, x, &mlp.ln)?;
    let h = tape.matmul(normed, mlp.w1, kind)?;
    let h = tape.add_bias(h, mlp.b1)?;
    let h = tape.gelu(h)?;
    let out = tape.matmul(h, mlp.w2, kind)?;
    tape.add_bias(out, mlp.b2)
}

/// One full block pass. `no_infuse` disables the compressed-to-lookup update
/// (the lookup stream then changes only through its MLP).
pub fn lookup_block_forward<T: Real>(
    tape: &mut Tape<T>,
    tokens: &TokenPair,
    params: &BoundBlock,
    settings: &BlockSettings,
    no_infuse: bool,
) -> Result<(TokenPair, AttentionWeights)> {
    let (zp1, attn) = mhbc_gather(tape, tokens.z_p, tokens.z_l, params, settings)?;
    let zp2 = vit_block(tape, zp1, params, settings)?;
    let zl1 = if no_infuse {
        tokens.z_l
    } else {
        let update = mhbc_infuse(tape, zp2, &attn, params, settings)?;
        tape.add(tokens.z_l, update)?
    };
    let branch = mlp_branch(tape, zl1, &params.lookup_mlp, CostKind::MlpLookup)?;
    let zl2 = tape.add(zl1, branch)?;
    Ok((
        TokenPair {
            z_p: zp2,
            z_l: zl2,
            lookup_grid: tokens.lookup_grid.clone(),
            compressed_grid: tokens.compressed_grid.clone(),
        },
        attn,
    ))
}

fn shape2<T: Real>(tape: &Tape<T>, v: Var) -> Result<(usize, usize)> {
    let s = tape.value(v).shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("expected a token matrix, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!("dim {dim} not divisible by heads {heads}")));
    }
    Ok(())
}
