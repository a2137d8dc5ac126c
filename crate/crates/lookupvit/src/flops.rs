//! Closed-form block cost model plus empirically counted MACs.
//!
//! Per-block multiply-accumulate counts, with N lookup tokens, M compressed
//! tokens, width D, MLP factors (p, q):
//!
//! ```text
//! vanilla block:      2 N^2 D  +  12 N D^2
//! compression block: (3 N M + 2 M^2) D  +  ((7 + 2p) M + 3 N) D^2  +  2 N D^2 / q
//! ```
//!
//! At the default (p, q) = (4, 2) the block cost collapses to
//! `(3NM + 2M^2) D + (4N + 15M) D^2`. The D^2 budget itemizes as: gather
//! Q/K/V/O = (2M + 2N), infuse V/O = (M + N), self-attention Q/K/V/O = 4M,
//! compressed MLP = 2pM = 8M, lookup MLP = 2N/q = N. With output
//! projections enabled (the default) the counted MACs of an instrumented
//! forward pass match these terms to the integer.
//!
//! FLOPs are reported as 2x MACs throughout.

use crate::config::ModelConfig;
use crate::model::ModelParams;
use crate::rng::SplitMix64;
use crate::tensor::{Tape, TermMacs};
use crate::tokenizer::gaussian;
use crate::{Error, Result};

/// FLOPs per MAC (one multiply + one accumulate).
pub const MAC_TO_FLOP: u64 = 2;

/// Vanilla transformer block MACs: 2 N^2 D + 12 N D^2 (MLP factor 4 and an
/// output projection folded into the 12).
pub fn vit_block_macs(n: u64, d: u64) -> u64 {
    2 * n * n * d + 12 * n * d * d
}

/// Per-term MACs of one compression block.
pub fn lookup_block_terms(n: u64, m: u64, d: u64, p: u64, q: u64) -> Result<TermMacs> {
    if n == 0 || m == 0 || d == 0 {
        return Err(Error::Config("token counts and width must be positive".into()));
    }
    if m > n {
        return Err(Error::Config(format!(
            "compressed tokens M={m} must not exceed lookup tokens N={n}"
        )));
    }
    if p == 0 || q == 0 {
        return Err(Error::Config("p and q must be positive".into()));
    }
    let lookup_mlp = 2 * n * d * d;
    if !lookup_mlp.is_multiple_of(q) {
        return Err(Error::Config(format!(
            "2*N*D^2 = {lookup_mlp} is not divisible by q = {q}"
        )));
    }
    Ok(TermMacs {
        attention_cross: 3 * n * m * d,
        attention_quadratic: 2 * m * m * d,
        projections: (7 * m + 3 * n) * d * d,
        mlp_compressed: 2 * p * m * d * d,
        mlp_lookup: lookup_mlp / q,
        neglected: 0,
    })
}

/// Total block MACs; at (p, q) = (4, 2) this is
/// (3NM + 2M^2) D + (4N + 15M) D^2.
pub fn lookup_block_macs(n: u64, m: u64, d: u64, p: u64, q: u64) -> Result<u64> {
    Ok(lookup_block_terms(n, m, d, p, q)?.modeled_total())
}

/// MACs the block formulas leave out, available for `--all` style totals:
/// patch embedding and the two classifier heads.
pub fn extras_macs(n: u64, patch_k: u64, d: u64, classes: u64) -> u64 {
    n * patch_k * d + 2 * d * classes
}

/// Analytic cost summary for one configuration.
#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub n: u64,
    pub m: u64,
    pub d: u64,
    pub depth: u64,
    pub p: u64,
    pub q: u64,
    pub per_block: TermMacs,
    /// Patch embedding + heads, when the caller asked to include them.
    pub extras: u64,
}

impl FlopsReport {
    pub fn analytic(n: u64, m: u64, d: u64, depth: u64, p: u64, q: u64) -> Result<Self> {
        Ok(FlopsReport { n, m, d, depth, p, q, per_block: lookup_block_terms(n, m, d, p, q)?, extras: 0 })
    }

    pub fn model_macs(&self) -> u64 {
        self.per_block.modeled_total() * self.depth + self.extras
    }

    pub fn model_flops(&self) -> u64 {
        self.model_macs() * MAC_TO_FLOP
    }

    pub fn gflops(&self) -> f64 {
        self.model_flops() as f64 / 1e9
    }
}

/// One line of the resolution/grid sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub image_size: usize,
    pub grid: (usize, usize),
    pub n: u64,
    pub m: u64,
    pub lookup_gmacs: f64,
    pub lookup_gflops: f64,
    pub vit_gmacs: f64,
    pub vit_gflops: f64,
}

/// Cost frontier over image sizes and compressed grids at fixed width and
/// depth. Sizes must be divisible by the patch.
pub fn scaling_sweep(
    image_sizes: &[usize],
    patch: usize,
    grids: &[(usize, usize)],
    d: u64,
    depth: u64,
    p: u64,
    q: u64,
) -> Result<Vec<SweepRow>> {
    if patch == 0 {
        return Err(Error::Config("patch must be positive".into()));
    }
    let mut rows = Vec::new();
    for &size in image_sizes {
        if size % patch != 0 {
            return Err(Error::Config(format!("image size {size} not divisible by patch {patch}")));
        }
        let side = (size / patch) as u64;
        let n = side * side;
        let vit = vit_block_macs(n, d) * depth;
        for &grid in grids {
            let m = (grid.0 * grid.1) as u64;
            let lookup = lookup_block_macs(n, m, d, p, q)? * depth;
            rows.push(SweepRow {
                image_size: size,
                grid,
                n,
                m,
                lookup_gmacs: lookup as f64 / 1e9,
                lookup_gflops: (lookup * MAC_TO_FLOP) as f64 / 1e9,
                vit_gmacs: vit as f64 / 1e9,
                vit_gflops: (vit * MAC_TO_FLOP) as f64 / 1e9,
            });
        }
    }
    Ok(rows)
}

/// MACs counted by instrumentation during one real forward pass.
#[derive(Debug, Clone)]
pub struct EmpiricalReport {
    /// Tokenization segment (patch embed, positional adds, resizes).
    pub tokenize: TermMacs,
    /// One segment per block, in depth order.
    pub per_block: Vec<TermMacs>,
    /// Pooling and classifier heads.
    pub heads: TermMacs,
    /// Cross-attention softmax invocations per block.
    pub cross_softmax_per_block: Vec<u64>,
    /// Raw softmax kernel calls per block (gather heads + self heads).
    pub softmax_ops_per_block: Vec<u64>,
}

impl EmpiricalReport {
    pub fn total(&self) -> TermMacs {
        let mut t = self.tokenize;
        for b in &self.per_block {
            t.add(b);
        }
        t.add(&self.heads);
        t
    }

    /// Fraction of counted work the closed-form model does not cover.
    pub fn neglected_fraction(&self) -> f64 {
        let total = self.total();
        total.neglected as f64 / total.total_with_neglected() as f64
    }
}

/// Run one instrumented forward pass (f32, seeded random input) and report
/// per-segment MAC counts.
pub fn empirical_macs(config: &ModelConfig, grid: (usize, usize)) -> Result<EmpiricalReport> {
    config.validate()?;
    let params = ModelParams::<f32>::init(config)?;
    let mut rng = SplitMix64::new(config.seed ^ 0x636f_756e_7465_7273);
    let shape = config.image_shape();
    let image = gaussian::<f32>(shape.to_vec(), 1.0, &mut rng);
    let mut tape = Tape::with_meter();
    let image = tape.leaf(image, false);
    let bound = params.bind(&mut tape, false);
    crate::model::forward(&mut tape, image, &bound, config, grid)?;
    let meter = tape.meter().expect("meter attached");
    let segments = meter.segments();
    if segments.len() != config.depth + 1 {
        return Err(Error::Contract(format!(
            "expected {} meter segments, got {}",
            config.depth + 1,
            segments.len()
        )));
    }
    Ok(EmpiricalReport {
        tokenize: segments[0],
        per_block: segments[1..].to_vec(),
        heads: meter.unflushed(),
        cross_softmax_per_block: meter.cross_softmax_per_segment()[1..].to_vec(),
        softmax_ops_per_block: meter.softmax_ops_per_segment()[1..].to_vec(),
    })
}
