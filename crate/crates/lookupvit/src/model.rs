//! Block stack with dual global-average-pool classifier heads.
//!
//! Both heads are zero-initialized so the initial joint loss on a C-class
//! problem is exactly ln C — a sharp anchor for training smoke tests.
//! Parameters are independent of the compressed grid in use; the same
//! weights serve every grid on the menu (and off-menu grids for evaluation).

use crate::block::{
    lookup_block_forward, vit_block, AttentionWeights, BlockParams, BlockSettings, BoundBlock,
};
use crate::config::ModelConfig;
use crate::rng::SplitMix64;
use crate::tensor::{CostKind, Real, Tape, Tensor, Var};
use crate::tokenizer::{
    build_token_pair, embed_patches, gaussian, BoundPatchEmbed, PatchEmbedParams, TokenPair,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T: Real> {
    /// (dim, classes), zero-initialized.
    pub w: Tensor<T>,
    /// (classes,), zero-initialized.
    pub b: Tensor<T>,
}

impl<T: Real> HeadParams<T> {
    fn init(dim: usize, classes: usize) -> Self {
        HeadParams { w: Tensor::zeros(vec![dim, classes]), b: Tensor::zeros(vec![classes]) }
    }
}

/// All learnable state of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real> {
    pub embed: PatchEmbedParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head_p: HeadParams<T>,
    pub head_l: HeadParams<T>,
    /// Learned layer-0 compressed tokens (M, dim); present only under the
    /// random_compressed_init ablation.
    pub learned_z_p: Option<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(config.seed);
        let embed = PatchEmbedParams::init(
            (config.patch[0], config.patch[1]),
            config.channels,
            config.dim,
            (config.lookup_grid[0], config.lookup_grid[1]),
            &mut rng,
        );
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            blocks.push(BlockParams::init(
                config.dim,
                config.heads,
                config.p,
                config.q,
                config.output_projections,
                &mut rng,
            )?);
        }
        let learned_z_p = if config.flags.random_compressed_init {
            let g = config.compressed_grids[0];
            Some(gaussian(vec![g[0] * g[1], config.dim], 0.02, &mut rng))
        } else {
            None
        };
        Ok(ModelParams {
            embed,
            blocks,
            head_p: HeadParams::init(config.dim, config.num_classes),
            head_l: HeadParams::init(config.dim, config.num_classes),
            learned_z_p,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named views of every tensor, in a stable order used by the optimizer
    /// and the checkpoint format.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("embed.kernel".into(), &self.embed.kernel),
            ("embed.bias".into(), &self.embed.bias),
            ("embed.pos_lookup".into(), &self.embed.pos_lookup),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |name: &str| format!("block{i}.{name}");
            out.push((p("ln_pre_gather_p.gamma"), &b.ln_pre_gather_p.gamma));
            out.push((p("ln_pre_gather_p.beta"), &b.ln_pre_gather_p.beta));
            out.push((p("ln_pre_gather_l.gamma"), &b.ln_pre_gather_l.gamma));
            out.push((p("ln_pre_gather_l.beta"), &b.ln_pre_gather_l.beta));
            out.push((p("w_q"), &b.w_q));
            out.push((p("ln_q.gamma"), &b.ln_q.gamma));
            out.push((p("ln_q.beta"), &b.ln_q.beta));
            out.push((p("w_k"), &b.w_k));
            out.push((p("ln_k.gamma"), &b.ln_k.gamma));
            out.push((p("ln_k.beta"), &b.ln_k.beta));
            out.push((p("w_v_lookup"), &b.w_v_lookup));
            if let Some(w) = &b.w_o_gather {
                out.push((p("w_o_gather"), w));
            }
            out.push((p("ln_pre_infuse_p.gamma"), &b.ln_pre_infuse_p.gamma));
            out.push((p("ln_pre_infuse_p.beta"), &b.ln_pre_infuse_p.beta));
            out.push((p("w_v_comp"), &b.w_v_comp));
            out.push((p("ln_v.gamma"), &b.ln_v.gamma));
            out.push((p("ln_v.beta"), &b.ln_v.beta));
            if let Some(w) = &b.w_o_infuse {
                out.push((p("w_o_infuse"), w));
            }
            out.push((p("vit_ln.gamma"), &b.vit_ln.gamma));
            out.push((p("vit_ln.beta"), &b.vit_ln.beta));
            out.push((p("vit_w_q"), &b.vit_w_q));
            out.push((p("vit_w_k"), &b.vit_w_k));
            out.push((p("vit_w_v"), &b.vit_w_v));
            out.push((p("vit_w_o"), &b.vit_w_o));
            out.push((p("vit_mlp.ln.gamma"), &b.vit_mlp.ln.gamma));
            out.push((p("vit_mlp.ln.beta"), &b.vit_mlp.ln.beta));
            out.push((p("vit_mlp.w1"), &b.vit_mlp.w1));
            out.push((p("vit_mlp.b1"), &b.vit_mlp.b1));
            out.push((p("vit_mlp.w2"), &b.vit_mlp.w2));
            out.push((p("vit_mlp.b2"), &b.vit_mlp.b2));
            out.push((p("lookup_mlp.ln.gamma"), &b.lookup_mlp.ln.gamma));
            out.push((p("lookup_mlp.ln.beta"), &b.lookup_mlp.ln.beta));
            out.push((p("lookup_mlp.w1"), &b.lookup_mlp.w1));
            out.push((p("lookup_mlp.b1"), &b.lookup_mlp.b1));
            out.push((p("lookup_mlp.w2"), &b.lookup_mlp.w2));
            out.push((p("lookup_mlp.b2"), &b.lookup_mlp.b2));
        }
        out.push(("head_p.w".into(), &self.head_p.w));
        out.push(("head_p.b".into(), &self.head_p.b));
        out.push(("head_l.w".into(), &self.head_l.w));
        out.push(("head_l.b".into(), &self.head_l.b));
        if let Some(t) = &self.learned_z_p {
            out.push(("learned_z_p".into(), t));
        }
        out
    }

    /// Mutable variant of [`ModelParams::named_tensors`]; same names, same
    /// order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("embed.kernel".into(), &mut self.embed.kernel),
            ("embed.bias".into(), &mut self.embed.bias),
            ("embed.pos_lookup".into(), &mut self.embed.pos_lookup),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |name: &str| format!("block{i}.{name}");
            out.push((p("ln_pre_gather_p.gamma"), &mut b.ln_pre_gather_p.gamma));
            out.push((p("ln_pre_gather_p.beta"), &mut b.ln_pre_gather_p.beta));
            out.push((p("ln_pre_gather_l.gamma"), &mut b.ln_pre_gather_l.gamma));
            out.push((p("ln_pre_gather_l.beta"), &mut b.ln_pre_gather_l.beta));
            out.push((p("w_q"), &mut b.w_q));
            out.push((p("ln_q.gamma"), &mut b.ln_q.gamma));
            out.push((p("ln_q.beta"), &mut b.ln_q.beta));
            out.push((p("w_k"), &mut b.w_k));
            out.push((p("ln_k.gamma"), &mut b.ln_k.gamma));
            out.push((p("ln_k.beta"), &mut b.ln_k.beta));
            out.push((p("w_v_lookup"), &mut b.w_v_lookup));
            if let Some(w) = &mut b.w_o_gather {
                out.push((p("w_o_gather"), w));
            }
            out.push((p("ln_pre_infuse_p.gamma"), &mut b.ln_pre_infuse_p.gamma));
            out.push((p("ln_pre_infuse_p.beta"), &mut b.ln_pre_infuse_p.beta));
            out.push((p("w_v_comp"), &mut b.w_v_comp));
            out.push((p("ln_v.gamma"), &mut b.ln_v.gamma));
            out.push((p("ln_v.beta"), &mut b.ln_v.beta));
            if let Some(w) = &mut b.w_o_infuse {
                out.push((p("w_o_infuse"), w));
            }
            out.push((p("vit_ln.gamma"), &mut b.vit_ln.gamma));
            out.push((p("vit_ln.beta"), &mut b.vit_ln.beta));
            out.push((p("vit_w_q"), &mut b.vit_w_q));
            out.push((p("vit_w_k"), &mut b.vit_w_k));
            out.push((p("vit_w_v"), &mut b.vit_w_v));
            out.push((p("vit_w_o"), &mut b.vit_w_o));
            out.push((p("vit_mlp.ln.gamma"), &mut b.vit_mlp.ln.gamma));
            out.push((p("vit_mlp.ln.beta"), &mut b.vit_mlp.ln.beta));
            out.push((p("vit_mlp.w1"), &mut b.vit_mlp.w1));
            out.push((p("vit_mlp.b1"), &mut b.vit_mlp.b1));
            out.push((p("vit_mlp.w2"), &mut b.vit_mlp.w2));
            out.push((p("vit_mlp.b2"), &mut b.vit_mlp.b2));
            out.push((p("lookup_mlp.ln.gamma"), &mut b.lookup_mlp.ln.gamma));
            out.push((p("lookup_mlp.ln.beta"), &mut b.lookup_mlp.ln.beta));
            out.push((p("lookup_mlp.w1"), &mut b.lookup_mlp.w1));
            out.push((p("lookup_mlp.b1"), &mut b.lookup_mlp.b1));
            out.push((p("lookup_mlp.w2"), &mut b.lookup_mlp.w2));
            out.push((p("lookup_mlp.b2"), &mut b.lookup_mlp.b2));
        }
        out.push(("head_p.w".into(), &mut self.head_p.w));
        out.push(("head_p.b".into(), &mut self.head_p.b));
        out.push(("head_l.w".into(), &mut self.head_l.w));
        out.push(("head_l.b".into(), &mut self.head_l.b));
        if let Some(t) = &mut self.learned_z_p {
            out.push(("learned_z_p".into(), t));
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundModel {
        BoundModel {
            embed: self.embed.bind(tape, trainable),
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
            head_p: (
                tape.leaf(self.head_p.w.clone(), trainable),
                tape.leaf(self.head_p.b.clone(), trainable),
            ),
            head_l: (
                tape.leaf(self.head_l.w.clone(), trainable),
                tape.leaf(self.head_l.b.clone(), trainable),
            ),
            learned_z_p: self.learned_z_p.as_ref().map(|t| tape.leaf(t.clone(), trainable)),
        }
    }
}

/// Tape handles mirroring [`ModelParams`], in the same traversal order.
pub struct BoundModel {
    pub embed: BoundPatchEmbed,
    pub blocks: Vec<BoundBlock>,
    pub head_p: (Var, Var),
    pub head_l: (Var, Var),
    pub learned_z_p: Option<Var>,
}

impl BoundModel {
    /// Vars in the exact order of [`ModelParams::named_tensors`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed.kernel, self.embed.bias, self.embed.pos_lookup];
        for b in &self.blocks {
            out.push(b.ln_pre_gather_p.gamma);
            out.push(b.ln_pre_gather_p.beta);
            out.push(b.ln_pre_gather_l.gamma);
            out.push(b.ln_pre_gather_l.beta);
            out.push(b.w_q);
            out.push(b.ln_q.gamma);
            out.push(b.ln_q.beta);
            out.push(b.w_k);
            out.push(b.ln_k.gamma);
            out.push(b.ln_k.beta);
            out.push(b.w_v_lookup);
            if let Some(w) = b.w_o_gather {
                out.push(w);
            }
            out.push(b.ln_pre_infuse_p.gamma);
            out.push(b.ln_pre_infuse_p.beta);
            out.push(b.w_v_comp);
            out.push(b.ln_v.gamma);
            out.push(b.ln_v.beta);
            if let Some(w) = b.w_o_infuse {
                out.push(w);
            }
            out.push(b.vit_ln.gamma);
            out.push(b.vit_ln.beta);
            out.push(b.vit_w_q);
            out.push(b.vit_w_k);
            out.push(b.vit_w_v);
            out.push(b.vit_w_o);
            out.push(b.vit_mlp.ln.gamma);
            out.push(b.vit_mlp.ln.beta);
            out.push(b.vit_mlp.w1);
            out.push(b.vit_mlp.b1);
            out.push(b.vit_mlp.w2);
            out.push(b.vit_mlp.b2);
            out.push(b.lookup_mlp.ln.gamma);
            out.push(b.lookup_mlp.ln.beta);
            out.push(b.lookup_mlp.w1);
            out.push(b.lookup_mlp.b1);
            out.push(b.lookup_mlp.w2);
            out.push(b.lookup_mlp.b2);
        }
        out.push(self.head_p.0);
        out.push(self.head_p.1);
        out.push(self.head_l.0);
        out.push(self.head_l.1);
        if let Some(v) = self.learned_z_p {
            out.push(v);
        }
        out
    }
}

/// Everything a forward pass produces.
pub struct ForwardOutput {
    pub logits_p: Var,
    /// Absent under the no_lookup_tokens ablation.
    pub logits_l: Option<Var>,
    /// Pooled pre-head features of the compressed stream.
    pub pooled_p: Var,
    pub pooled_l: Option<Var>,
    pub tokens: TokenPair,
    /// Per-layer cross-attention weights (empty under no_lookup_tokens).
    pub attn: Vec<AttentionWeights>,
}

fn settings(config: &ModelConfig) -> BlockSettings {
    BlockSettings { heads: config.heads, scale_logits: config.scale_attention }
}

fn head_logits<T: Real>(tape: &mut Tape<T>, pooled: Var, head: (Var, Var)) -> Result<Var> {
    let dim = tape.value(pooled).shape()[0];
    let row = tape.reshape(pooled, vec![1, dim])?;
    let logits = tape.matmul(row, head.0, CostKind::Neglected)?;
    let logits = tape.add_bias(logits, head.1)?;
    let classes = tape.value(logits).shape()[1];
    tape.reshape(logits, vec![classes])
}

/// Full forward pass at one compressed grid. Grids on or off the configured
/// menu are both accepted as long as they fit inside the lookup grid.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    image: Var,
    bound: &BoundModel,
    config: &ModelConfig,
    compressed_grid: (usize, usize),
) -> Result<ForwardOutput> {
    let expect = config.image_shape();
    let got = tape.value(image).shape().to_vec();
    if got != expect {
        return Err(Error::Shape(format!("image {got:?}, config wants {expect:?}")));
    }
    let features = embed_patches(tape, image, &bound.embed, (config.patch[0], config.patch[1]))?;
    let mut tokens = build_token_pair(tape, features, &bound.embed, compressed_grid)?;
    if let Some(table) = bound.learned_z_p {
        let want = tape.value(tokens.z_p).shape().to_vec();
        let have = tape.value(table).shape().to_vec();
        if want != have {
            return Err(Error::Config(format!(
                "learned compressed table {have:?} cannot serve grid {compressed_grid:?}"
            )));
        }
        tokens.z_p = table;
    }
    if let Some(m) = tape.meter_mut() {
        m.flush_segment(); // tokenization segment
    }

    let s = settings(config);
    let mut attn_all = Vec::with_capacity(config.depth);
    if config.flags.no_lookup_tokens {
        let mut z_p = tokens.z_p;
        for b in &bound.blocks {
            z_p = vit_block(tape, z_p, b, &s)?;
            if let Some(m) = tape.meter_mut() {
                m.flush_segment();
            }
        }
        tokens.z_p = z_p;
        let pooled_p = tape.mean_rows(tokens.z_p)?;
        let logits_p = head_logits(tape, pooled_p, bound.head_p)?;
        return Ok(ForwardOutput {
            logits_p,
            logits_l: None,
            pooled_p,
            pooled_l: None,
            tokens,
            attn: attn_all,
        });
    }

    for b in &bound.blocks {
        let (next, attn) = lookup_block_forward(tape, &tokens, b, &s, config.flags.no_infuse)?;
        tokens = next;
        attn_all.push(attn);
        if let Some(m) = tape.meter_mut() {
            m.flush_segment();
        }
    }

    let pooled_p = tape.mean_rows(tokens.z_p)?;
    let pooled_l = tape.mean_rows(tokens.z_l)?;
    let logits_p = head_logits(tape, pooled_p, bound.head_p)?;
    let logits_l = head_logits(tape, pooled_l, bound.head_l)?;
    Ok(ForwardOutput {
        logits_p,
        logits_l: Some(logits_l),
        pooled_p,
        pooled_l: Some(pooled_l),
        tokens,
        attn: attn_all,
    })
}

/// Joint classification loss: equal-weight cross-entropy on both heads, or a
/// single full-weight term when one side is ablated.
pub fn loss<T: Real>(
    tape: &mut Tape<T>,
    out: &ForwardOutput,
    label: usize,
    config: &ModelConfig,
) -> Result<Var> {
    if label >= config.num_classes {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} classes",
            config.num_classes
        )));
    }
    let use_p = !config.flags.no_compressed_loss;
    let use_l =
        !config.flags.no_lookup_loss && !config.flags.no_lookup_tokens && out.logits_l.is_some();
    match (use_p, use_l) {
        (true, true) => {
            let ce_p = tape.cross_entropy(out.logits_p, label)?;
            let ce_l = tape.cross_entropy(out.logits_l.expect("checked"), label)?;
            let sum = tape.add(ce_p, ce_l)?;
            tape.scale(sum, 0.5)
        }
        (true, false) => tape.cross_entropy(out.logits_p, label),
        (false, true) => tape.cross_entropy(out.logits_l.expect("checked"), label),
        (false, false) => {
            Err(Error::Config("both loss terms disabled: nothing to optimize".into()))
        }
    }
}

/// Argmax of the head average (or of the single live head). Ties take the
/// lowest index.
pub fn predict<T: Real>(logits_p: &Tensor<T>, logits_l: Option<&Tensor<T>>) -> usize {
    let avg: Vec<f64> = match logits_l {
        Some(l) => logits_p
            .data()
            .iter()
            .zip(l.data())
            .map(|(&a, &b)| (a.to_f64() + b.to_f64()) / 2.0)
            .collect(),
        None => logits_p.to_f64_vec(),
    };
    argmax(&avg)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Normalized feature deviation between a clean and a corrupted input:
/// ||F(x) - F(x_c)||_2 / ||F(x)||_2 where F concatenates the pooled
/// pre-head features of both streams after the final block.
pub fn feature_deviation<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    x: &Tensor<T>,
    x_corrupt: &Tensor<T>,
    compressed_grid: (usize, usize),
) -> Result<f64> {
    if x.shape() != x_corrupt.shape() {
        return Err(Error::Shape(format!(
            "inputs differ: {:?} vs {:?}",
            x.shape(),
            x_corrupt.shape()
        )));
    }
    let feats = |input: &Tensor<T>| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let image = tape.leaf(input.clone(), false);
        let bound = params.bind(&mut tape, false);
        let out = forward(&mut tape, image, &bound, config, compressed_grid)?;
        let mut f = tape.value(out.pooled_p).to_f64_vec();
        if let Some(pl) = out.pooled_l {
            f.extend(tape.value(pl).to_f64_vec());
        }
        Ok(f)
    };
    let clean = feats(x)?;
    let corrupt = feats(x_corrupt)?;
    deviation_ratio(&clean, &corrupt)
}

/// ||clean - corrupt||_2 / ||clean||_2; an error when the clean norm is 0.
pub fn deviation_ratio(clean: &[f64], corrupt: &[f64]) -> Result<f64> {
    if clean.len() != corrupt.len() {
        return Err(Error::Shape(format!(
            "feature lengths differ: {} vs {}",
            clean.len(),
            corrupt.len()
        )));
    }
    let norm: f64 = clean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Contract(
            "feature norm of the clean input is zero; deviation undefined".into(),
        ));
    }
    let diff: f64 = clean
        .iter()
        .zip(corrupt)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AblationFlags, ModelConfig, Precision};
    use crate::tensor::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            p: 2,
            q: 2,
            patch: [2, 2],
            lookup_grid: [4, 4],
            channels: 1,
            compressed_grids: vec![[2, 2]],
            num_classes: 3,
            flags: AblationFlags::default(),
            scale_attention: true,
            output_projections: true,
            seed: 7,
            precision: Precision::F32,
        }
    }

    fn toy_image<T: Real>(config: &ModelConfig, seed: u64) -> Tensor<T> {
        let mut rng = SplitMix64::new(seed);
        gaussian(config.image_shape().to_vec(), 1.0, &mut rng)
    }

    fn run_forward<T: Real>(
        config: &ModelConfig,
        params: &ModelParams<T>,
        image: &Tensor<T>,
        grid: (usize, usize),
    ) -> (Tape<T>, ForwardOutput) {
        let mut tape = Tape::new();
        let img = tape.leaf(image.clone(), false);
        let bound = params.bind(&mut tape, false);
        let out = forward(&mut tape, img, &bound, config, grid).unwrap();
        (tape, out)
    }

    #[test]
    fn logits_have_class_shape_and_attention_has_depth() {
        let config = toy_config();
        let params = ModelParams::<f32>::init(&config).unwrap();
        let image = toy_image::<f32>(&config, 1);
        let (tape, out) = run_forward(&config, &params, &image, (2, 2));
        assert_eq!(tape.value(out.logits_p).shape(), &[3]);
        assert_eq!(tape.value(out.logits_l.unwrap()).shape(), &[3]);
        assert_eq!(out.attn.len(), config.depth);
        for a in &out.attn {
            assert_eq!(a.heads(), config.heads);
            assert_eq!(a.queries, 4);
            assert_eq!(a.keys, 16);
        }
    }

    #[test]
    fn zero_heads_make_initial_loss_exactly_ln_c() {
        let config = toy_config();
        let params = ModelParams::<f32>::init(&config).unwrap();
        let image = toy_image::<f32>(&config, 2);
        let mut tape = Tape::new();
        let img = tape.leaf(image, false);
        let bound = params.bind(&mut tape, false);
        let out = forward(&mut tape, img, &bound, &config, (2, 2)).unwrap();
        // Zero-initialized heads put every logit at exactly 0.
        assert!(tape.value(out.logits_p).data().iter().all(|&v| v == 0.0));
        let l = loss(&mut tape, &out, 1, &config).unwrap();
        assert_eq!(tape.value(l).data()[0], (3.0f32).ln());
    }

    #[test]
    fn no_lookup_tokens_runs_compressed_only() {
        let mut config = toy_config();
        config.flags.no_lookup_tokens = true;
        let params = ModelParams::<f32>::init(&config).unwrap();
        let image = toy_image::<f32>(&config, 3);
        let mut tape = Tape::new();
        let img = tape.leaf(image, false);
        let bound = params.bind(&mut tape, false);
        let out = forward(&mut tape, img, &bound, &config, (2, 2)).unwrap();
        assert!(out.logits_l.is_none());
        assert!(out.attn.is_empty());
        // Loss falls back to the compressed head at weight 1.
        let l = loss(&mut tape, &out, 0, &config).unwrap();
        let ce = tape.cross_entropy(out.logits_p, 0).unwrap();
        assert_eq!(tape.value(l).data()[0], tape.value(ce).data()[0]);
    }

    #[test]
    fn loss_ablations_zero_out_one_term() {
        let base = toy_config();
        let params = ModelParams::<f32>::init(&base).unwrap();
        let image = toy_image::<f32>(&base, 4);

        let mut only_p = base.clone();
        only_p.flags.no_lookup_loss = true;
        let (mut tape, out) = run_forward(&only_p, &params, &image, (2, 2));
        let l = loss(&mut tape, &out, 2, &only_p).unwrap();
        let ce = tape.cross_entropy(out.logits_p, 2).unwrap();
        assert_eq!(tape.value(l).data()[0], tape.value(ce).data()[0]);

        let mut only_l = base.clone();
        only_l.flags.no_compressed_loss = true;
        let (mut tape, out) = run_forward(&only_l, &params, &image, (2, 2));
        let l = loss(&mut tape, &out, 2, &only_l).unwrap();
        let ce = tape.cross_entropy(out.logits_l.unwrap(), 2).unwrap();
        assert_eq!(tape.value(l).data()[0], tape.value(ce).data()[0]);
    }

    #[test]
    fn both_loss_terms_off_is_an_error() {
        let mut config = toy_config();
        config.flags.no_lookup_loss = true;
        config.flags.no_compressed_loss = true;
        // Rejected upfront by validation...
        assert!(config.validate().is_err());
        // ...and by the loss itself if constructed anyway.
        let ok = toy_config();
        let params = ModelParams::<f32>::init(&ok).unwrap();
        let image = toy_image::<f32>(&ok, 5);
        let (mut tape, out) = run_forward(&ok, &params, &image, (2, 2));
        let r = loss(&mut tape, &out, 0, &config);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn confident_compressed_head_halves_the_joint_loss() {
        // CE_p -> 0, CE_l = ln C, so the joint loss tends to ln(C)/2.
        let config = toy_config();
        let mut tape = Tape::<f64>::new();
        let hot = tape.leaf(Tensor::from_f64s(vec![3], &[50.0, 0.0, 0.0]).unwrap(), false);
        let flat = tape.leaf(Tensor::zeros(vec![3]), false);
        let ce_p = tape.cross_entropy(hot, 0).unwrap();
        let ce_l = tape.cross_entropy(flat, 0).unwrap();
        let sum = tape.add(ce_p, ce_l).unwrap();
        let l = tape.scale(sum, 0.5).unwrap();
        let half_ln_c = 0.5 * (config.num_classes as f64).ln();
        assert!((tape.value(l).data()[0] - half_ln_c).abs() < 1e-9);
    }

    #[test]
    fn predict_follows_head_average() {
        let p = Tensor::<f32>::from_f64s(vec![2], &[2.0, 0.0]).unwrap();
        let l = Tensor::<f32>::from_f64s(vec![2], &[0.0, 1.0]).unwrap();
        // Average is [1.0, 0.5] -> class 0.
        assert_eq!(predict(&p, Some(&l)), 0);
        // Equal heads agree with either alone.
        assert_eq!(predict(&p, Some(&p)), predict(&p, None));
        // Shift invariance: adding a constant to both heads changes nothing.
        let shift = |t: &Tensor<f32>, c: f64| {
            Tensor::<f32>::from_f64s(
                vec![t.len()],
                &t.to_f64_vec().iter().map(|v| v + c).collect::<Vec<_>>(),
            )
            .unwrap()
        };
        for c in [-3.5, 0.25, 11.0] {
            assert_eq!(predict(&shift(&p, c), Some(&shift(&l, c))), 0);
        }
        // Ties break to the lowest index.
        let tie = Tensor::<f32>::from_f64s(vec![3], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(predict(&tie, None), 0);
    }

    #[test]
    fn identical_builds_give_bit_identical_logits() {
        let config = toy_config();
        let image = toy_image::<f32>(&config, 6);
        let run = || {
            let params = ModelParams::<f32>::init(&config).unwrap();
            let (tape, out) = run_forward(&config, &params, &image, (2, 2));
            (
                tape.value(out.logits_p).data().to_vec(),
                tape.value(out.logits_l.unwrap()).data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn off_menu_grids_evaluate_fine() {
        let config = toy_config(); // menu is [[2, 2]]
        let params = ModelParams::<f32>::init(&config).unwrap();
        let image = toy_image::<f32>(&config, 7);
        for grid in [(1, 1), (3, 3), (4, 4)] {
            let (tape, out) = run_forward(&config, &params, &image, grid);
            assert_eq!(tape.value(out.logits_p).shape(), &[3]);
        }
    }

    #[test]
    fn random_compressed_init_adds_exactly_m_times_d_params() {
        let base = toy_config();
        let mut flagged = base.clone();
        flagged.flags.random_compressed_init = true;
        let a = ModelParams::<f32>::init(&base).unwrap();
        let b = ModelParams::<f32>::init(&flagged).unwrap();
        let m = 2 * 2;
        assert_eq!(b.num_scalars() - a.num_scalars(), m * base.dim);
        // The learned table is used at layer 0.
        let image = toy_image::<f32>(&flagged, 8);
        let mut tape = Tape::new();
        let img = tape.leaf(image, false);
        let bound = b.bind(&mut tape, true);
        let out = forward(&mut tape, img, &bound, &flagged, (2, 2)).unwrap();
        let l = loss(&mut tape, &out, 0, &flagged).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(bound.learned_z_p.unwrap()).is_some());
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let config = toy_config();
        let params = ModelParams::<f32>::init(&config).unwrap();
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::<f32>::zeros(vec![6, 8, 1]), false);
        let bound = params.bind(&mut tape, false);
        assert!(forward(&mut tape, img, &bound, &config, (2, 2)).is_err());
    }

    #[test]
    fn deviation_ratio_algebra() {
        // Identical features: zero deviation.
        assert_eq!(deviation_ratio(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        // F(x_c) = 2 F(x): ||F|| / ||F|| = 1.
        assert!((deviation_ratio(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        // Zero clean features: undefined.
        assert!(deviation_ratio(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn feature_deviation_of_identical_inputs_is_zero() {
        let config = toy_config();
        let params = ModelParams::<f32>::init(&config).unwrap();
        let image = toy_image::<f32>(&config, 9);
        let d = feature_deviation(&params, &config, &image, &image, (2, 2)).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn small_end_to_end_gradient_check() {
        // Abbreviated sweep for fast iteration; the full-size check runs in
        // the acceptance suite.
        let mut config = toy_config();
        config.depth = 1;
        config.precision = Precision::F64;
        let params = ModelParams::<f64>::init(&config).unwrap();
        let image = toy_image::<f64>(&config, 10);
        let label = 1usize;

        let named: Vec<(String, Tensor<f64>)> =
            params.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let inputs: Vec<Tensor<f64>> = named.iter().map(|(_, t)| t.clone()).collect();

        let rebuild = |xs: &[Tensor<f64>]| -> ModelParams<f64> {
            let mut p = params.clone();
            for (slot, x) in p.named_tensors_mut().into_iter().zip(xs) {
                *slot.1 = x.clone();
            }
            p
        };
        let mut tape = Tape::new();
        let img = tape.leaf(image.clone(), false);
        let bound = params.bind(&mut tape, true);
        let out = forward(&mut tape, img, &bound, &config, (2, 2)).unwrap();
        let l = loss(&mut tape, &out, label, &config).unwrap();
        tape.backward(l).unwrap();
        let analytic: Vec<Option<Tensor<f64>>> =
            bound.param_vars().iter().map(|&v| tape.grad(v)).collect();

        let report = check_gradients(
            &inputs,
            &analytic,
            |xs| {
                let p = rebuild(xs);
                let mut t = Tape::new();
                let img = t.leaf(image.clone(), false);
                let b = p.bind(&mut t, false);
                let out = forward(&mut t, img, &b, &config, (2, 2))?;
                let l = loss(&mut t, &out, label, &config)?;
                Ok(t.value(l).data()[0])
            },
            DEFAULT_STEP,
            40,
            23,
        )
        .unwrap();
        assert!(
            report.passes(DEFAULT_TOLERANCE),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
