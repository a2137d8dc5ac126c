//! Multiply-accumulate instrumentation.
//!
//! Every matmul recorded on a metered tape reports exactly `r*k*c` MACs under
//! a caller-supplied [`CostKind`]. Elementwise kernels (layer norm, softmax,
//! GELU, bias adds, residuals, resampling) report op-count estimates into the
//! `Neglected` bucket; the per-element weights below are generous upper-ish
//! bounds, documented here so the "neglected" fraction is well defined:
//!
//! - add / mul / scale / bias / residual: 1 op per output element
//! - layer norm: 8 ops per element (two-pass mean/var, normalize, affine)
//! - softmax: 5 ops per element (shift, exp, sum, divide)
//! - GELU: 12 ops per element (erf evaluation dominates)
//! - cross entropy: 6 ops per logit
//! - bilinear resize: 4 MACs per output element, trilinear: 8
//! - pure data movement (reshape, slice, concat, patch unfold): 0

/// Cost attribution for one recorded operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    /// Cross-attention mixes between the two token sets: QK^T, AV, A^T V.
    AttentionCross,
    /// Self-attention mixes on the compressed set: QK^T and AV.
    AttentionQuadratic,
    /// D×D linear maps: Q/K/V/output projections of both attention flavors.
    Projections,
    /// The wide MLP on compressed tokens.
    MlpCompressed,
    /// The narrow MLP on lookup tokens.
    MlpLookup,
    /// Everything the closed-form block cost model leaves out.
    Neglected,
}

/// Per-term MAC totals. The five modeled buckets mirror the closed-form
/// block cost; `neglected` collects the rest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TermMacs {
    pub attention_cross: u64,
    pub attention_quadratic: u64,
    pub projections: u64,
    pub mlp_compressed: u64,
    pub mlp_lookup: u64,
    pub neglected: u64,
}

impl TermMacs {
    /// Sum of the five modeled buckets (excludes `neglected`).
    pub fn modeled_total(&self) -> u64 {
        self.attention_cross
            + self.attention_quadratic
            + self.projections
            + self.mlp_compressed
            + self.mlp_lookup
    }

    pub fn total_with_neglected(&self) -> u64 {
        self.modeled_total() + self.neglected
    }

    fn bucket_mut(&mut self, kind: CostKind) -> &mut u64 {
        match kind {
            CostKind::AttentionCross => &mut self.attention_cross,
            CostKind::AttentionQuadratic => &mut self.attention_quadratic,
            CostKind::Projections => &mut self.projections,
            CostKind::MlpCompressed => &mut self.mlp_compressed,
            CostKind::MlpLookup => &mut self.mlp_lookup,
            CostKind::Neglected => &mut self.neglected,
        }
    }

    pub fn add(&mut self, other: &TermMacs) {
        self.attention_cross += other.attention_cross;
        self.attention_quadratic += other.attention_quadratic;
        self.projections += other.projections;
        self.mlp_compressed += other.mlp_compressed;
        self.mlp_lookup += other.mlp_lookup;
        self.neglected += other.neglected;
    }
}

/// Counter attached to a tape. Single-writer: one meter per forward pass.
#[derive(Debug, Default, Clone)]
pub struct Meter {
    current: TermMacs,
    /// Closed segments, one per `flush_segment` call (the model flushes once
    /// per block so analytic-vs-counted comparisons can be made per block).
    segments: Vec<TermMacs>,
    /// Softmax invocations on the cross-attention path, per segment.
    cross_softmax_current: u64,
    cross_softmax_segments: Vec<u64>,
    /// Raw count of softmax tape ops (any path), per segment.
    softmax_ops_current: u64,
    softmax_ops_segments: Vec<u64>,
}

impl Meter {
    pub fn new() -> Self {
        Meter::default()
    }

    pub fn record_macs(&mut self, kind: CostKind, macs: u64) {
        *self.current.bucket_mut(kind) += macs;
    }

    /// Called once per logical softmax on the cross-attention path,
    /// regardless of how many per-head tape ops realize it.
    pub fn record_cross_softmax(&mut self) {
        self.cross_softmax_current += 1;
    }

    pub(crate) fn record_softmax_op(&mut self) {
        self.softmax_ops_current += 1;
    }

    /// Close the current segment (the model calls this after each block).
    pub fn flush_segment(&mut self) {
        self.segments.push(self.current);
        self.current = TermMacs::default();
        self.cross_softmax_segments.push(self.cross_softmax_current);
        self.cross_softmax_current = 0;
        self.softmax_ops_segments.push(self.softmax_ops_current);
        self.softmax_ops_current = 0;
    }

    /// Closed per-block segments, in forward order.
    pub fn segments(&self) -> &[TermMacs] {
        &self.segments
    }

    /// Counts not yet flushed into a segment (tokenizer, heads, ...).
    pub fn unflushed(&self) -> TermMacs {
        self.current
    }

    pub fn cross_softmax_per_segment(&self) -> &[u64] {
        &self.cross_softmax_segments
    }

    pub fn softmax_ops_per_segment(&self) -> &[u64] {
        &self.softmax_ops_segments
    }

    pub fn grand_total(&self) -> TermMacs {
        let mut total = self.current;
        for s in &self.segments {
            total.add(s);
        }
        total
    }
}
