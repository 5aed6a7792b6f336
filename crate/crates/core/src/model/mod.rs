//! Seeded, untrained joint-attention diffusion transformer.
//!
//! Three block layouts are supported: every block dual-stream
//! ([`Variant::Dual`]), dual-stream with an extra image-only self-attention in
//! a prefix of blocks ([`Variant::DualX`]), and a dual-stream prefix followed
//! by single-stream blocks with shared weights ([`Variant::SingleHybrid`]).
//! Hooks can capture or replace attention inputs per block and head.

mod checkpoint;
mod hooks;
mod prompt;
mod rope;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use hooks::{
    captured_quadrants, BlockActivation, HeadAttention, HeadProjections, HookSet, Injection,
    ProjectionSet,
};
pub use prompt::{changed_token_positions, encode_prompt, PromptEmbedding, PAD_ID, PAD_TOKEN};
pub use rope::apply_rotary;

use crate::atlas::ConcatOrder;
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::tensor::{matmul, matmul_transb, row_softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Dual,
    DualX,
    SingleHybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// `(height, width)` of the latent grid.
    pub image_grid: (usize, usize),
    pub text_len: usize,
    pub concat_order: ConcatOrder,
    /// Dual-stream blocks before the single-stream ones (`single_hybrid`).
    pub dual_prefix: usize,
    /// Blocks carrying the extra image self-attention (`dual_x`).
    pub self_attn_prefix: usize,
    pub seed: u64,
    /// Split the text sequence into two encoder ranges.
    pub dual_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dual,
            depth: 8,
            heads: 2,
            head_dim: 8,
            image_grid: (8, 8),
            text_len: 16,
            concat_order: ConcatOrder::ImageFirst,
            dual_prefix: 0,
            self_attn_prefix: 0,
            seed: 0,
            dual_encoder: false,
        }
    }
}

impl ModelConfig {
    /// SD3-like: dual-stream, image tokens first, two text encoders.
    pub fn sd3_toy() -> Self {
        Self {
            dual_encoder: true,
            ..Self::default()
        }
    }

    /// SD3.5-M-like: extra image self-attention in the first blocks.
    pub fn sd35m_toy() -> Self {
        Self {
            variant: Variant::DualX,
            self_attn_prefix: 4,
            dual_encoder: true,
            ..Self::default()
        }
    }

    /// Flux-like: text tokens first, dual prefix then single-stream blocks.
    pub fn flux_toy() -> Self {
        Self {
            variant: Variant::SingleHybrid,
            concat_order: ConcatOrder::TextFirst,
            dual_prefix: 3,
            ..Self::default()
        }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn n_image(&self) -> usize {
        self.image_grid.0 * self.image_grid.1
    }

    pub fn ff_width(&self) -> usize {
        2 * self.width()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.heads == 0 || self.text_len == 0 || self.n_image() == 0 {
            return fail("depth, heads, text_len and image grid must be non-zero".into());
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return fail(format!("head_dim must be even and positive, got {}", self.head_dim));
        }
        if self.variant == Variant::SingleHybrid && self.dual_prefix > self.depth {
            return fail(format!(
                "dual_prefix {} exceeds depth {}",
                self.dual_prefix, self.depth
            ));
        }
        if self.variant == Variant::DualX && self.self_attn_prefix > self.depth {
            return fail(format!(
                "self_attn_prefix {} exceeds depth {}",
                self.self_attn_prefix, self.depth
            ));
        }
        if self.dual_encoder && self.text_len < 2 {
            return fail("dual_encoder needs text_len >= 2".into());
        }
        Ok(())
    }

    pub fn block_kind(&self, block: usize) -> BlockKind {
        match self.variant {
            Variant::Dual => BlockKind::Joint { self_attn: false },
            Variant::DualX => BlockKind::Joint {
                self_attn: block < self.self_attn_prefix,
            },
            Variant::SingleHybrid if block < self.dual_prefix => {
                BlockKind::Joint { self_attn: false }
            }
            Variant::SingleHybrid => BlockKind::Single,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Separate image and text weights, joint attention.
    Joint { self_attn: bool },
    /// One weight set over the concatenated sequence.
    Single,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct StreamWeights {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    o: Matrix,
    ff_in: Matrix,
    ff_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SelfAttnWeights {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum BlockWeights {
    Joint {
        image: StreamWeights,
        text: StreamWeights,
        self_attn: Option<SelfAttnWeights>,
    },
    Single(StreamWeights),
}

impl StreamWeights {
    fn draw(draw: &mut impl FnMut(usize, usize) -> Matrix, w: usize, ff: usize) -> Self {
        Self {
            q: draw(w, w),
            k: draw(w, w),
            v: draw(w, w),
            o: draw(w, w),
            ff_in: draw(w, ff),
            ff_out: draw(ff, w),
        }
    }

    fn matrices(&self) -> [&Matrix; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.ff_in, &self.ff_out]
    }

    fn matrices_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.ff_in,
            &mut self.ff_out,
        ]
    }
}

impl SelfAttnWeights {
    fn matrices(&self) -> [&Matrix; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    fn matrices_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

impl BlockWeights {
    fn matrices(&self) -> Vec<&Matrix> {
        match self {
            BlockWeights::Joint {
                image,
                text,
                self_attn,
            } => {
                let mut v: Vec<&Matrix> = image.matrices().into();
                v.extend(text.matrices());
                if let Some(sa) = self_attn {
                    v.extend(sa.matrices());
                }
                v
            }
            BlockWeights::Single(w) => w.matrices().into(),
        }
    }

    fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            BlockWeights::Joint {
                image,
                text,
                self_attn,
            } => {
                let mut v: Vec<&mut Matrix> = image.matrices_mut().into();
                v.extend(text.matrices_mut());
                if let Some(sa) = self_attn {
                    v.extend(sa.matrices_mut());
                }
                v
            }
            BlockWeights::Single(w) => w.matrices_mut().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    blocks: Vec<BlockWeights>,
    out: Matrix,
}

const LN_EPS: f64 = 1e-6;

fn layer_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let n = x.cols() as f64;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Sinusoidal embedding of `t` over `width` channels (sin/cos pairs).
pub fn time_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut emb = vec![0.0; width];
    for j in 0..half {
        let freq = 10_000f64.powf(-(j as f64) / half as f64);
        let (s, c) = (1000.0 * t * freq).sin_cos();
        emb[2 * j] = s;
        emb[2 * j + 1] = c;
    }
    emb
}

fn add_row_broadcast(m: &Matrix, row: &[f64]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) + row[c])
}

fn feed_forward(x: &Matrix, w: &StreamWeights) -> Result<Matrix> {
    let hidden = matmul(&layer_norm(x), &w.ff_in)?.map(gelu);
    matmul(&hidden, &w.ff_out)
}

fn check_shape(block: usize, head: usize, what: &str, m: &Matrix, want: (usize, usize)) -> Result<()> {
    if m.shape() != want {
        return Err(Error::Injection {
            block,
            head,
            detail: format!("{what} is {:?}, expected {want:?}", m.shape()),
        });
    }
    Ok(())
}

impl Model {
    /// Builds weights from `cfg.seed`: every matrix uniform in
    /// `[-1/sqrt(width), 1/sqrt(width)]`, drawn in declaration order.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (w, ff) = (cfg.width(), cfg.ff_width());
        let bound = 1.0 / (w as f64).sqrt();
        let mut draw = |r, c| Matrix::random_uniform(r, c, bound, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let weights = match cfg.block_kind(b) {
                BlockKind::Joint { self_attn } => {
                    let image = StreamWeights::draw(&mut draw, w, ff);
                    let text = StreamWeights::draw(&mut draw, w, ff);
                    let self_attn = self_attn.then(|| SelfAttnWeights {
                        q: draw(w, w),
                        k: draw(w, w),
                        v: draw(w, w),
                        o: draw(w, w),
                    });
                    BlockWeights::Joint {
                        image,
                        text,
                        self_attn,
                    }
                }
                BlockKind::Single => BlockWeights::Single(StreamWeights::draw(&mut draw, w, ff)),
            };
            blocks.push(weights);
        }
        let out = draw(w, w);
        Ok(Self { cfg, blocks, out })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn depth(&self) -> usize {
        self.cfg.depth
    }

    pub(crate) fn matrices(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.blocks.iter().flat_map(|b| b.matrices()).collect();
        v.push(&self.out);
        v
    }

    pub(crate) fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = self
            .blocks
            .iter_mut()
            .flat_map(|b| b.matrices_mut())
            .collect();
        v.push(&mut self.out);
        v
    }

    pub fn encode_prompt(&self, text: &str) -> PromptEmbedding {
        encode_prompt(text, &self.cfg)
    }

    fn attention_scale(&self) -> f64 {
        1.0 / (self.cfg.head_dim as f64).sqrt()
    }

    fn head_cols(&self, head: usize) -> std::ops::Range<usize> {
        head * self.cfg.head_dim..(head + 1) * self.cfg.head_dim
    }

    /// Joint attention of one head. `proj` holds the branch's own rotated
    /// projections and is updated in place with any injected q/k.
    fn joint_head(
        &self,
        block: usize,
        head: usize,
        proj: &mut HeadProjections,
        hooks: &HookSet,
    ) -> Result<(Matrix, Option<HeadAttention>)> {
        let order = self.cfg.concat_order;
        let (n_i, n_t) = (self.cfg.n_image(), self.cfg.text_len);
        let n = n_i + n_t;
        let d = self.cfg.head_dim;
        let capture = hooks.captures(block);

        let logits_of = |p: &HeadProjections| -> Result<Matrix> {
            matmul_transb(&order.concat(&p.q_i, &p.q_t)?, &order.concat(&p.k_i, &p.k_t)?)
        };

        let injection = hooks.injection(block, head);
        let native = if capture || !matches!(injection, Some(Injection::Projections { .. })) {
            Some(logits_of(proj)?)
        } else {
            None
        };

        let applied = match injection {
            None => native.clone().expect("computed when not injecting projections"),
            Some(Injection::Projections { q_i, k_i }) => {
                check_shape(block, head, "injected q_i", q_i, (n_i, d))?;
                check_shape(block, head, "injected k_i", k_i, (n_i, d))?;
                proj.q_i = q_i.clone();
                proj.k_i = k_i.clone();
                logits_of(proj)?
            }
            Some(Injection::I2iLogits(m)) => {
                check_shape(block, head, "injected I2I logits", m, (n_i, n_i))?;
                let img = order.image_range(n_i, n_t);
                let mut l = native.clone().expect("computed for logit injection");
                l.set_block(img.start, img.start, m)?;
                l
            }
            Some(Injection::FullLogits(m)) => {
                check_shape(block, head, "injected logits", m, (n, n))?;
                m.clone()
            }
        };

        let weights = row_softmax(&applied, self.attention_scale());
        let out = matmul(&weights, &order.concat(&proj.v_i, &proj.v_t)?)?;
        let captured = capture.then(|| HeadAttention {
            order,
            n_image: n_i,
            n_text: n_t,
            scale: self.attention_scale(),
            native_logits: native.unwrap_or_else(|| applied.clone()),
            applied_logits: applied,
            applied_weights: weights,
        });
        Ok((out, captured))
    }

    /// Image-only self-attention used by `dual_x` prefix blocks.
    fn image_self_attention(&self, x: &Matrix, w: &SelfAttnWeights) -> Result<Matrix> {
        let normed = layer_norm(x);
        let (q, k, v) = (matmul(&normed, &w.q)?, matmul(&normed, &w.k)?, matmul(&normed, &w.v)?);
        let n = x.rows();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let cols = self.head_cols(h);
            let qh = apply_rotary(&q.col_range(cols.clone()), 0..n);
            let kh = apply_rotary(&k.col_range(cols.clone()), 0..n);
            let weights = row_softmax(&matmul_transb(&qh, &kh)?, self.attention_scale());
            heads.push(matmul(&weights, &v.col_range(cols))?);
        }
        matmul(&Matrix::hstack(&heads)?, &w.o)
    }

    /// Splits projected `q`, `k`, `v` for the joint sequence into per-head,
    /// per-modality pieces, rotating queries and keys by sequence index.
    fn head_projections(
        &self,
        (q_i, k_i, v_i): (&Matrix, &Matrix, &Matrix),
        (q_t, k_t, v_t): (&Matrix, &Matrix, &Matrix),
        head: usize,
    ) -> HeadProjections {
        let (n_i, n_t) = (self.cfg.n_image(), self.cfg.text_len);
        let order = self.cfg.concat_order;
        let cols = self.head_cols(head);
        let img_pos = order.image_range(n_i, n_t);
        let txt_pos = order.text_range(n_i, n_t);
        HeadProjections {
            q_i: apply_rotary(&q_i.col_range(cols.clone()), img_pos.clone()),
            k_i: apply_rotary(&k_i.col_range(cols.clone()), img_pos),
            v_i: v_i.col_range(cols.clone()),
            q_t: apply_rotary(&q_t.col_range(cols.clone()), txt_pos.clone()),
            k_t: apply_rotary(&k_t.col_range(cols.clone()), txt_pos),
            v_t: v_t.col_range(cols),
        }
    }

    /// One transformer block: joint attention with residual, then a
    /// feed-forward with residual, per stream or shared.
    pub fn block_forward(
        &self,
        block: usize,
        image: &Matrix,
        text: &Matrix,
        t: f64,
        hooks: &HookSet,
    ) -> Result<(Matrix, Matrix, BlockActivation)> {
        let (n_i, n_t, w) = (self.cfg.n_image(), self.cfg.text_len, self.cfg.width());
        let weights = self.blocks.get(block).ok_or_else(|| Error::Injection {
            block,
            head: 0,
            detail: format!("model has {} blocks", self.cfg.depth),
        })?;
        if image.shape() != (n_i, w) || text.shape() != (n_t, w) {
            return Err(Error::Shape(format!(
                "block {block}: image {:?} / text {:?}, expected ({n_i}, {w}) / ({n_t}, {w})",
                image.shape(),
                text.shape()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        let order = self.cfg.concat_order;
        let inputs = (hooks.captures(block) && hooks.records_inputs())
            .then(|| (image.clone(), text.clone()));

        let run_heads = |img: (&Matrix, &Matrix, &Matrix),
                             txt: (&Matrix, &Matrix, &Matrix)|
         -> Result<(Matrix, ProjectionSet, Option<Vec<HeadAttention>>)> {
            let mut outs = Vec::with_capacity(self.cfg.heads);
            let mut projections = Vec::with_capacity(self.cfg.heads);
            let mut captured = Vec::new();
            for h in 0..self.cfg.heads {
                let mut proj = self.head_projections(img, txt, h);
                let (out, cap) = self.joint_head(block, h, &mut proj, hooks)?;
                outs.push(out);
                projections.push(proj);
                captured.extend(cap);
            }
            let attention = hooks.captures(block).then_some(captured);
            Ok((Matrix::hstack(&outs)?, projections, attention))
        };

        let (img_out, txt_out, projections, attention) = match weights {
            BlockWeights::Joint {
                image: wi,
                text: wt,
                self_attn,
            } => {
                let mut x_i = image.clone();
                if let Some(sa) = self_attn {
                    x_i.add_assign(&self.image_self_attention(&x_i, sa)?)?;
                }
                let (ni, nt) = (layer_norm(&x_i), layer_norm(text));
                let img = (matmul(&ni, &wi.q)?, matmul(&ni, &wi.k)?, matmul(&ni, &wi.v)?);
                let txt = (matmul(&nt, &wt.q)?, matmul(&nt, &wt.k)?, matmul(&nt, &wt.v)?);
                let (joint, projections, attention) =
                    run_heads((&img.0, &img.1, &img.2), (&txt.0, &txt.1, &txt.2))?;
                let (attn_i, attn_t) = order.split(&joint, n_i, n_t)?;
                let mut x_t = text.clone();
                x_i.add_assign(&matmul(&attn_i, &wi.o)?)?;
                x_t.add_assign(&matmul(&attn_t, &wt.o)?)?;
                let ff_i = feed_forward(&x_i, wi)?;
                let ff_t = feed_forward(&x_t, wt)?;
                x_i.add_assign(&ff_i)?;
                x_t.add_assign(&ff_t)?;
                (x_i, x_t, projections, attention)
            }
            BlockWeights::Single(ws) => {
                let mut x = order.concat(image, text)?;
                let normed = layer_norm(&x);
                let (q, k, v) = (
                    matmul(&normed, &ws.q)?,
                    matmul(&normed, &ws.k)?,
                    matmul(&normed, &ws.v)?,
                );
                let (q_i, q_t) = order.split(&q, n_i, n_t)?;
                let (k_i, k_t) = order.split(&k, n_i, n_t)?;
                let (v_i, v_t) = order.split(&v, n_i, n_t)?;
                let (joint, projections, attention) =
                    run_heads((&q_i, &k_i, &v_i), (&q_t, &k_t, &v_t))?;
                x.add_assign(&matmul(&joint, &ws.o)?)?;
                let ff = feed_forward(&x, ws)?;
                x.add_assign(&ff)?;
                let (x_i, x_t) = order.split(&x, n_i, n_t)?;
                (x_i, x_t, projections, attention)
            }
        };

        Ok((
            img_out,
            txt_out,
            BlockActivation {
                block_index: block,
                projections,
                attention,
                inputs,
            },
        ))
    }

    /// Predicted velocity for `latent` at time `t` under `prompt`, with
    /// activations for every block.
    pub fn velocity(
        &self,
        latent: &Matrix,
        t: f64,
        prompt: &PromptEmbedding,
        hooks: &HookSet,
    ) -> Result<(Matrix, Vec<BlockActivation>)> {
        if let Some(b) = hooks.max_block().filter(|&b| b >= self.cfg.depth) {
            return Err(Error::Injection {
                block: b,
                head: 0,
                detail: format!("hook targets block {b} but the model has {}", self.cfg.depth),
            });
        }
        let w = self.cfg.width();
        if latent.shape() != (self.cfg.n_image(), w) {
            return Err(Error::Shape(format!(
                "latent is {:?}, expected ({}, {w})",
                latent.shape(),
                self.cfg.n_image()
            )));
        }
        if prompt.embedding.shape() != (self.cfg.text_len, w) {
            return Err(Error::Shape(format!(
                "prompt embedding is {:?}, expected ({}, {w})",
                prompt.embedding.shape(),
                self.cfg.text_len
            )));
        }
        let temb = time_embedding(t, w);
        let mut image = add_row_broadcast(latent, &temb);
        let mut text = add_row_broadcast(&prompt.embedding, &temb);
        let mut acts = Vec::with_capacity(self.cfg.depth);
        for b in 0..self.cfg.depth {
            let (i, tx, act) = self.block_forward(b, &image, &text, t, hooks)?;
            image = i;
            text = tx;
            acts.push(act);
        }
        let velocity = matmul(&layer_norm(&image), &self.out)?;
        Ok((velocity, acts))
    }

    /// Binds a prompt, giving a hook-free velocity field.
    pub fn field<'a>(&'a self, prompt: &'a PromptEmbedding) -> PromptedField<'a> {
        PromptedField {
            model: self,
            prompt,
        }
    }
}

/// A model evaluated under a fixed prompt without hooks.
#[derive(Clone, Copy)]
pub struct PromptedField<'a> {
    pub model: &'a Model,
    pub prompt: &'a PromptEmbedding,
}

impl VelocityField for PromptedField<'_> {
    fn velocity(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        Ok(self.model.velocity(x, t, self.prompt, &HookSet::new())?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::Stage;

    fn setup(cfg: ModelConfig) -> (Model, PromptEmbedding, Matrix) {
        let model = Model::new(cfg).unwrap();
        let prompt = model.encode_prompt("a panda riding a bicycle");
        let latent = Matrix::random_normal(model.cfg.n_image(), model.cfg.width(), 11);
        (model, prompt, latent)
    }

    fn variants() -> Vec<ModelConfig> {
        vec![
            ModelConfig::default(),
            ModelConfig::sd3_toy(),
            ModelConfig::sd35m_toy(),
            ModelConfig::flux_toy(),
        ]
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::flux_toy();
        c.dual_prefix = 9;
        assert!(Model::new(c).is_err());
        let mut c = ModelConfig::sd35m_toy();
        c.self_attn_prefix = 9;
        assert!(Model::new(c).is_err());
        let c = ModelConfig {
            head_dim: 3,
            ..Default::default()
        };
        assert!(Model::new(c).is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"depth": 4, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: ModelConfig = serde_json::from_str(r#"{"depth": 4}"#).unwrap();
        assert_eq!(ok.depth, 4);
        assert_eq!(ok.heads, 2);
    }

    #[test]
    fn deterministic_velocity() {
        for cfg in variants() {
            let (model, prompt, latent) = setup(cfg);
            let (a, _) = model.velocity(&latent, 0.4, &prompt, &HookSet::new()).unwrap();
            let (b, _) = model.velocity(&latent, 0.4, &prompt, &HookSet::new()).unwrap();
            assert!(a.bit_eq(&b));
            assert!(a.is_finite());
        }
    }

    #[test]
    fn time_conditioning_is_active() {
        let (model, prompt, latent) = setup(ModelConfig::default());
        let (v0, _) = model.velocity(&latent, 0.0, &prompt, &HookSet::new()).unwrap();
        let (v1, _) = model.velocity(&latent, 1.0, &prompt, &HookSet::new()).unwrap();
        assert!(v0.max_abs_diff(&v1) > 1e-3);
    }

    #[test]
    fn hooks_beyond_depth_fail() {
        let (model, prompt, latent) = setup(ModelConfig::default());
        let mut hooks = HookSet::new();
        hooks.capture(8);
        let err = model.velocity(&latent, 0.5, &prompt, &hooks).unwrap_err();
        assert!(matches!(err, Error::Injection { block: 8, .. }));
    }

    #[test]
    fn self_injection_is_identity() {
        for cfg in variants() {
            let (model, prompt, latent) = setup(cfg);
            let mut cap = HookSet::new();
            cap.capture_all(0..model.depth());
            let (v_ref, acts) = model.velocity(&latent, 0.6, &prompt, &cap).unwrap();
            let mut hooks = HookSet::new();
            for act in &acts {
                for (h, inj) in act.projection_injections() {
                    hooks.inject(act.block_index, h, inj);
                }
            }
            let (v, _) = model.velocity(&latent, 0.6, &prompt, &hooks).unwrap();
            assert!(v.bit_eq(&v_ref));

            let mut logit_hooks = HookSet::new();
            for act in &acts {
                for (h, att) in act.attention.iter().flatten().enumerate() {
                    logit_hooks.inject(
                        act.block_index,
                        h,
                        Injection::I2iLogits(att.native_logit_quadrants().i2i),
                    );
                }
            }
            let (v, _) = model.velocity(&latent, 0.6, &prompt, &logit_hooks).unwrap();
            assert!(v.bit_eq(&v_ref));
        }
    }

    #[test]
    fn injection_shape_error_names_block_and_head() {
        let (model, prompt, latent) = setup(ModelConfig::default());
        let mut hooks = HookSet::new();
        hooks.inject(3, 1, Injection::I2iLogits(Matrix::zeros(2, 2)));
        match model.velocity(&latent, 0.5, &prompt, &hooks) {
            Err(Error::Injection { block: 3, head: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn captures_only_requested_blocks() {
        let (model, prompt, latent) = setup(ModelConfig::default());
        let mut hooks = HookSet::new();
        hooks.capture_all([2, 5]);
        let (_, acts) = model.velocity(&latent, 0.5, &prompt, &hooks).unwrap();
        for a in &acts {
            assert_eq!(a.attention.is_some(), a.block_index == 2 || a.block_index == 5);
            assert_eq!(a.projections.len(), 2);
        }
        assert_eq!(captured_quadrants(&acts, Stage::Weights).len(), 4);
    }

    #[test]
    fn projection_injection_keeps_t2t() {
        for cfg in variants() {
            let (model, prompt, latent) = setup(cfg);
            let other = model.encode_prompt("a dragon riding a bicycle");
            let mut cap = HookSet::new();
            cap.capture_all(0..model.depth());
            let (_, src) = model.velocity(&latent, 0.7, &other, &cap).unwrap();

            let image = Matrix::random_normal(model.cfg.n_image(), model.cfg.width(), 5);
            let text = prompt.embedding.clone();
            for b in 0..model.depth() {
                let mut plain = HookSet::new();
                plain.capture(b);
                let (_, _, base) = model.block_forward(b, &image, &text, 0.7, &plain).unwrap();
                let mut inj = plain.clone();
                for (h, i) in src[b].projection_injections() {
                    inj.inject(b, h, i);
                }
                let (_, _, hooked) = model.block_forward(b, &image, &text, 0.7, &inj).unwrap();
                for h in 0..model.cfg.heads {
                    let a = base.head_attention(h).unwrap().applied_logit_quadrants();
                    let z = hooked.head_attention(h).unwrap().applied_logit_quadrants();
                    assert!(a.t2t.bit_eq(&z.t2t), "block {b} head {h}");
                    assert!(!a.i2i.bit_eq(&z.i2i));
                }
            }
        }
    }

    #[test]
    fn single_block_slicing_matches_per_modality_projection() {
        // Row-wise maps commute with concatenation: projecting the joint
        // sequence and slicing equals projecting each slice.
        let cfg = ModelConfig::flux_toy();
        let model = Model::new(cfg.clone()).unwrap();
        let BlockWeights::Single(ws) = &model.blocks[cfg.dual_prefix] else {
            panic!("expected a single-stream block");
        };
        let image = Matrix::random_normal(cfg.n_image(), cfg.width(), 1);
        let text = Matrix::random_normal(cfg.text_len, cfg.width(), 2);
        let joint = cfg.concat_order.concat(&image, &text).unwrap();
        let q = matmul(&layer_norm(&joint), &ws.q).unwrap();
        let (q_i, _) = cfg.concat_order.split(&q, cfg.n_image(), cfg.text_len).unwrap();
        let direct = matmul(&layer_norm(&image), &ws.q).unwrap();
        assert!(q_i.bit_eq(&direct));
    }

    #[test]
    fn captured_weights_are_row_stochastic() {
        for cfg in variants() {
            let (model, prompt, latent) = setup(cfg);
            let mut hooks = HookSet::new();
            hooks.capture_all(0..model.depth());
            let (_, acts) = model.velocity(&latent, 0.3, &prompt, &hooks).unwrap();
            for q in captured_quadrants(&acts, Stage::Weights) {
                let img: Vec<f64> = q
                    .i2i
                    .row_sums()
                    .iter()
                    .zip(q.t2i.row_sums())
                    .map(|(a, b)| a + b)
                    .collect();
                assert!(img.iter().all(|s| (s - 1.0).abs() < 1e-12));
                let txt: Vec<f64> = q
                    .i2t
                    .row_sums()
                    .iter()
                    .zip(q.t2t.row_sums())
                    .map(|(a, b)| a + b)
                    .collect();
                assert!(txt.iter().all(|s| (s - 1.0).abs() < 1e-12));
            }
        }
    }
}
