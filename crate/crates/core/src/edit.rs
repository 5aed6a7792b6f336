//! Two-branch prompt editing: the target branch borrows the source branch's
//! image queries and keys (or attention logits) for the first part of
//! sampling, and is optionally blended back onto the source outside a mask
//! built from text-to-image attention.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::atlas::{build_blend_mask, token_map, AttentionQuadrants, MaskEntry, MaskStack, UnionMode};
use crate::error::{Error, Result};
use crate::flow::{
    check_reverse_guard, conditional_velocity, euler_sample, interpolate, Direction, FlowState,
    TimeGrid,
};
use crate::model::{changed_token_positions, BlockActivation, HookSet, Injection, Model, PromptEmbedding};
use crate::tensor::{Matrix, SpatialMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaceMode {
    /// Replace the rotated image queries and keys.
    #[default]
    #[serde(alias = "qk")]
    QkProj,
    /// Replace the image-to-image logit quadrant.
    #[serde(alias = "i2i")]
    I2iBlock,
    /// Replace every logit.
    #[serde(alias = "full")]
    FullMap,
}

impl ReplaceMode {
    pub const ALL: [ReplaceMode; 3] = [ReplaceMode::QkProj, ReplaceMode::I2iBlock, ReplaceMode::FullMap];

    pub fn name(self) -> &'static str {
        match self {
            ReplaceMode::QkProj => "qk_proj",
            ReplaceMode::I2iBlock => "i2i_block",
            ReplaceMode::FullMap => "full_map",
        }
    }
}

/// Replaced-block prefixes for few-step models.
pub const BLOCK_PREFIX_PRESETS: [(&str, usize); 2] = [("flux-schnell", 38), ("sd35-turbo", 30)];

pub fn block_prefix_preset(name: &str) -> Option<usize> {
    BLOCK_PREFIX_PRESETS.iter().find(|p| p.0 == name).map(|p| p.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    /// Replacement is active at step `k` iff `k / steps < tau_frac`.
    pub tau_frac: f64,
    /// Blending is active at step `k` iff `k / steps < blend_stop_frac`.
    pub blend_stop_frac: f64,
    /// Mask threshold; required when `local_blend` is on.
    pub theta: Option<f64>,
    pub replace_mode: ReplaceMode,
    /// Number of leading blocks receiving injections; `None` means all.
    pub replace_block_prefix: Option<usize>,
    /// Blocks whose T2I maps build the mask; empty means all.
    pub mask_blocks: Vec<usize>,
    pub union_mode: UnionMode,
    pub sigma: f64,
    pub local_blend: bool,
    /// Words whose maps build the mask; by default the words present in
    /// only one of the two prompts.
    pub blend_words: Option<Vec<String>>,
    /// Pull of the target branch toward the real image in `edit_real`.
    pub eta_rev: f64,
    pub steps: usize,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            tau_frac: 0.2,
            blend_stop_frac: 0.5,
            theta: None,
            replace_mode: ReplaceMode::QkProj,
            replace_block_prefix: None,
            mask_blocks: Vec::new(),
            union_mode: UnionMode::BothBranches,
            sigma: 1.5,
            local_blend: false,
            blend_words: None,
            eta_rev: 0.0,
            steps: 28,
        }
    }
}

impl EditConfig {
    /// Four steps with injections limited to the first `prefix` blocks.
    pub fn few_step(prefix: usize) -> Self {
        Self {
            steps: 4,
            replace_block_prefix: Some(prefix),
            ..Self::default()
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("tau_frac", self.tau_frac),
            ("blend_stop_frac", self.blend_stop_frac),
            ("eta_rev", self.eta_rev),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.steps == 0 {
            return fail("steps must be positive".into());
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return fail(format!("sigma = {} must be non-negative", self.sigma));
        }
        if let Some(b) = self.mask_blocks.iter().find(|&&b| b >= depth) {
            return fail(format!("mask block {b} outside a {depth}-block model"));
        }
        match self.theta {
            Some(t) if !t.is_finite() => fail(format!("theta = {t} is not finite")),
            None if self.local_blend => fail("local blending needs theta".into()),
            _ => Ok(()),
        }
    }

    pub fn replaces_at(&self, step: usize) -> bool {
        step_active(step, self.steps, self.tau_frac)
    }

    pub fn blends_at(&self, step: usize) -> bool {
        self.local_blend && step_active(step, self.steps, self.blend_stop_frac)
    }

    /// Blocks receiving injections while replacement is active.
    pub fn replaced_blocks(&self, depth: usize) -> std::ops::Range<usize> {
        0..self.replace_block_prefix.map_or(depth, |p| p.min(depth))
    }
}

/// `k / steps < frac`.
pub fn step_active(step: usize, steps: usize, frac: f64) -> bool {
    (step as f64) / (steps as f64) < frac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub replaced: bool,
    pub blended: bool,
    pub injected_blocks: Vec<usize>,
    /// Fraction of grid cells kept from the target branch.
    pub mask_coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<SpatialMap>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditTrace {
    pub steps: Vec<StepRecord>,
    /// Prompt positions feeding the blending mask.
    pub token_set: Vec<usize>,
    pub mask_blocks: Vec<usize>,
    pub warnings: Vec<String>,
}

impl EditTrace {
    pub fn replaced_steps(&self) -> Vec<usize> {
        self.steps.iter().filter(|s| s.replaced).map(|s| s.step).collect()
    }

    pub fn blended_steps(&self) -> Vec<usize> {
        self.steps.iter().filter(|s| s.blended).map(|s| s.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutput {
    pub source: Matrix,
    pub target: Matrix,
    pub trace: EditTrace,
}

/// Extra activations to collect during an edit.
#[derive(Debug, Clone, Default)]
pub struct Observe {
    /// Blocks captured in both branches at every step.
    pub capture: BTreeSet<usize>,
    /// Keep each captured block's input streams.
    pub record_inputs: bool,
}

/// What an observer sees after each step.
pub struct StepView<'a> {
    pub step: usize,
    pub t: f64,
    pub replaced: bool,
    pub blended: bool,
    /// Empty when the source branch was not evaluated.
    pub source: &'a [BlockActivation],
    pub target: &'a [BlockActivation],
    pub mask: Option<&'a SpatialMap>,
}

/// Seeded standard-normal starting latent.
pub fn initial_noise(model: &Model, seed: u64) -> Matrix {
    let cfg = model.config();
    Matrix::random_normal(cfg.n_image(), cfg.width(), seed)
}

/// Plain prompted sampling from seeded noise.
pub fn generate(model: &Model, prompt: &str, seed: u64, steps: usize) -> Result<Vec<FlowState>> {
    let p = model.encode_prompt(prompt);
    let start = FlowState {
        latent: initial_noise(model, seed),
        t: 1.0,
    };
    euler_sample(&start, &TimeGrid::sampling(steps)?, &model.field(&p))
}

/// Rows of `target` where the mask is 1, rows of `source` elsewhere.
pub fn blend(target: &Matrix, source: &Matrix, mask: &SpatialMap) -> Result<Matrix> {
    if target.shape() != source.shape() || mask.values().len() != target.rows() {
        return Err(Error::Shape("blend operands disagree in shape".into()));
    }
    let mut out = source.clone();
    for (r, &m) in mask.values().iter().enumerate() {
        if m == 1.0 {
            out.row_mut(r).copy_from_slice(target.row(r));
        }
    }
    Ok(out)
}

fn token_set(src: &PromptEmbedding, tgt: &PromptEmbedding, cfg: &EditConfig) -> Result<BTreeSet<usize>> {
    match &cfg.blend_words {
        None => Ok(changed_token_positions(src, tgt)),
        Some(words) => {
            let set: BTreeSet<usize> = words
                .iter()
                .flat_map(|w| src.positions_of(w).into_iter().chain(tgt.positions_of(w)))
                .collect();
            if set.is_empty() {
                return Err(Error::Empty(format!("blend words {words:?} appear in neither prompt")));
            }
            Ok(set)
        }
    }
}

fn mask_stack(
    acts: &[BlockActivation],
    blocks: &[usize],
    tokens: &BTreeSet<usize>,
    step: usize,
    grid: (usize, usize),
    label: &str,
) -> Result<MaskStack> {
    let mut stack = MaskStack::new();
    for &b in blocks {
        let heads = acts[b]
            .attention
            .as_ref()
            .ok_or_else(|| Error::Empty(format!("block {b} was not captured")))?;
        for (h, att) in heads.iter().enumerate() {
            let q: AttentionQuadrants = att.native_weight_quadrants();
            for &tok in tokens {
                stack.push(MaskEntry {
                    block: b,
                    head: h,
                    step,
                    token: tok,
                    label: label.to_owned(),
                    map: token_map(&q, tok, grid)?,
                })?;
            }
        }
    }
    Ok(stack)
}

fn injections(src: &[BlockActivation], blocks: std::ops::Range<usize>, mode: ReplaceMode, hooks: &mut HookSet) -> Result<()> {
    for b in blocks {
        let act = &src[b];
        match mode {
            ReplaceMode::QkProj => {
                for (h, inj) in act.projection_injections() {
                    hooks.inject(b, h, inj);
                }
            }
            ReplaceMode::I2iBlock | ReplaceMode::FullMap => {
                let heads = act
                    .attention
                    .as_ref()
                    .ok_or_else(|| Error::Empty(format!("source block {b} was not captured")))?;
                for (h, att) in heads.iter().enumerate() {
                    let inj = match mode {
                        ReplaceMode::I2iBlock => Injection::I2iLogits(att.native_logit_quadrants().i2i),
                        _ => Injection::FullLogits(att.native_logits.clone()),
                    };
                    hooks.inject(b, h, inj);
                }
            }
        }
    }
    Ok(())
}

/// How the source branch advances.
enum SourcePath<'a> {
    /// Integrated with the model under the source prompt.
    Sampled,
    /// Fixed straight line from `x_init` at `t = 1` to `x0` at `t = 0`.
    Straight { x0: &'a Matrix },
}

struct Run<'a> {
    model: &'a Model,
    src: PromptEmbedding,
    tgt: PromptEmbedding,
    cfg: &'a EditConfig,
    observe: &'a Observe,
}

impl Run<'_> {
    fn execute(
        &self,
        x_init: &Matrix,
        path: SourcePath<'_>,
        observer: &mut dyn FnMut(StepView<'_>) -> Result<()>,
    ) -> Result<EditOutput> {
        let (model, cfg) = (self.model, self.cfg);
        let depth = model.depth();
        cfg.validate(depth)?;
        if let Some(b) = self.observe.capture.iter().find(|&&b| b >= depth) {
            return Err(Error::Config(format!("observed block {b} outside a {depth}-block model")));
        }
        let grid = TimeGrid::sampling(cfg.steps)?;
        let straight_x0 = match path {
            SourcePath::Straight { x0 } => {
                if x0.shape() != x_init.shape() {
                    return Err(Error::Shape("real latent and initial latent differ in shape".into()));
                }
                if cfg.eta_rev > 0.0 {
                    check_reverse_guard(&grid)?;
                }
                Some(x0)
            }
            SourcePath::Sampled => None,
        };

        let mut trace = EditTrace::default();
        let mut tokens = BTreeSet::new();
        let mut mask_blocks = cfg.mask_blocks.clone();
        if cfg.local_blend {
            tokens = token_set(&self.src, &self.tgt, cfg)?;
            if tokens.is_empty() {
                trace
                    .warnings
                    .push("prompts share every word; local blending skipped".into());
            }
            if mask_blocks.is_empty() {
                trace
                    .warnings
                    .push("no mask blocks given; using every block".into());
                mask_blocks = (0..depth).collect();
            }
        }
        trace.token_set = tokens.iter().copied().collect();
        trace.mask_blocks = mask_blocks.clone();
        let theta = cfg.theta.unwrap_or(f64::INFINITY);
        let image_grid = model.config().image_grid;

        let mut x_src = x_init.clone();
        let mut x_tgt = x_init.clone();
        for (k, w) in grid.knots().windows(2).enumerate() {
            let (t, t_next, dt) = (w[0], w[1], w[1] - w[0]);
            let replaced = cfg.replaces_at(k);
            let blended = cfg.blends_at(k) && !tokens.is_empty();
            let replaced_blocks = if replaced { cfg.replaced_blocks(depth) } else { 0..0 };

            let mut src_hooks = HookSet::new();
            let mut tgt_hooks = HookSet::new();
            for h in [&mut src_hooks, &mut tgt_hooks] {
                h.capture_all(self.observe.capture.iter().copied());
                h.record_inputs(self.observe.record_inputs);
                if blended {
                    h.capture_all(mask_blocks.iter().copied());
                }
            }
            if cfg.replace_mode != ReplaceMode::QkProj {
                src_hooks.capture_all(replaced_blocks.clone());
            }

            let need_source = straight_x0.is_none()
                || !replaced_blocks.is_empty()
                || blended
                || !self.observe.capture.is_empty();
            let at_step = |e| Error::Step {
                step: k,
                source: Box::new(e),
            };

            let (v_src, src_acts) = if need_source {
                let (v, a) = model.velocity(&x_src, t, &self.src, &src_hooks).map_err(at_step)?;
                (Some(v), a)
            } else {
                (None, Vec::new())
            };
            injections(&src_acts, replaced_blocks.clone(), cfg.replace_mode, &mut tgt_hooks).map_err(at_step)?;
            let (v_model, tgt_acts) = model.velocity(&x_tgt, t, &self.tgt, &tgt_hooks).map_err(at_step)?;

            let (src_next, v_tgt) = match straight_x0 {
                None => {
                    let v = v_src.expect("source evaluated on sampled paths");
                    (x_src.axpy(dt, &v)?, v_model)
                }
                Some(x0) => {
                    let next = interpolate(x0, x_init, t_next)?;
                    let e = cfg.eta_rev;
                    let v = if e == 0.0 {
                        v_model
                    } else {
                        let cond = conditional_velocity(&x_tgt, t, x0, Direction::TowardData)
                            .map_err(at_step)?;
                        if e == 1.0 {
                            cond
                        } else {
                            v_model.scale(1.0 - e).axpy(e, &cond)?
                        }
                    };
                    (next, v)
                }
            };
            let mut tgt_next = x_tgt.axpy(dt, &v_tgt)?;

            let mut mask = None;
            if blended {
                let blocks = &mask_blocks;
                let s = mask_stack(&src_acts, blocks, &tokens, k, image_grid, "src").map_err(at_step)?;
                let g = mask_stack(&tgt_acts, blocks, &tokens, k, image_grid, "tgt").map_err(at_step)?;
                let m = build_blend_mask(&s, &g, &tokens, cfg.sigma, theta, cfg.union_mode).map_err(at_step)?;
                tgt_next = blend(&tgt_next, &src_next, &m)?;
                mask = Some(m);
            }

            observer(StepView {
                step: k,
                t,
                replaced,
                blended,
                source: &src_acts,
                target: &tgt_acts,
                mask: mask.as_ref(),
            })
            .map_err(at_step)?;

            trace.steps.push(StepRecord {
                step: k,
                t,
                replaced,
                blended,
                injected_blocks: replaced_blocks.collect(),
                mask_coverage: mask.as_ref().map(|m| m.sum() / m.values().len() as f64),
                mask,
            });
            x_src = src_next;
            x_tgt = tgt_next;
        }
        Ok(EditOutput {
            source: x_src,
            target: x_tgt,
            trace,
        })
    }
}

/// Edits a generated image: both branches start from the same seeded noise.
pub fn edit_synthetic(model: &Model, src_prompt: &str, tgt_prompt: &str, seed: u64, cfg: &EditConfig) -> Result<EditOutput> {
    edit_synthetic_observed(model, src_prompt, tgt_prompt, seed, cfg, &Observe::default(), |_| Ok(()))
}

pub fn edit_synthetic_observed(
    model: &Model,
    src_prompt: &str,
    tgt_prompt: &str,
    seed: u64,
    cfg: &EditConfig,
    observe: &Observe,
    mut observer: impl FnMut(StepView<'_>) -> Result<()>,
) -> Result<EditOutput> {
    let run = Run {
        model,
        src: model.encode_prompt(src_prompt),
        tgt: model.encode_prompt(tgt_prompt),
        cfg,
        observe,
    };
    run.execute(&initial_noise(model, seed), SourcePath::Sampled, &mut observer)
}

/// Edits a real latent `x0`. The source branch follows the straight line
/// from `x_init` to `x0` and is evaluated only to harvest queries, keys and
/// mask maps; `src_prompt` describes the real image and may be empty.
pub fn edit_real(
    model: &Model,
    x0: &Matrix,
    x_init: &Matrix,
    src_prompt: &str,
    tgt_prompt: &str,
    cfg: &EditConfig,
) -> Result<EditOutput> {
    edit_real_observed(model, x0, x_init, src_prompt, tgt_prompt, cfg, &Observe::default(), |_| Ok(()))
}

#[allow(clippy::too_many_arguments)]
pub fn edit_real_observed(
    model: &Model,
    x0: &Matrix,
    x_init: &Matrix,
    src_prompt: &str,
    tgt_prompt: &str,
    cfg: &EditConfig,
    observe: &Observe,
    mut observer: impl FnMut(StepView<'_>) -> Result<()>,
) -> Result<EditOutput> {
    let run = Run {
        model,
        src: model.encode_prompt(src_prompt),
        tgt: model.encode_prompt(tgt_prompt),
        cfg,
        observe,
    };
    run.execute(x_init, SourcePath::Straight { x0 }, &mut observer)
}

/// One branch that uses `src_prompt` while `k / steps < switch_frac` and
/// `tgt_prompt` afterwards.
pub fn baseline_prompt_switch(
    model: &Model,
    src_prompt: &str,
    tgt_prompt: &str,
    switch_frac: f64,
    seed: u64,
    steps: usize,
) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&switch_frac) {
        return Err(Error::Config(format!("switch_frac = {switch_frac} outside [0, 1]")));
    }
    let (src, tgt) = (model.encode_prompt(src_prompt), model.encode_prompt(tgt_prompt));
    let grid = TimeGrid::sampling(steps)?;
    let mut x = initial_noise(model, seed);
    for (k, w) in grid.knots().windows(2).enumerate() {
        let p = if step_active(k, steps, switch_frac) { &src } else { &tgt };
        let (v, _) = model.velocity(&x, w[0], p, &HookSet::new())?;
        x = x.axpy(w[1] - w[0], &v)?;
    }
    Ok(x)
}

/// Per-quadrant logit differences of one injected head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantDiff {
    pub step: usize,
    pub block: usize,
    pub head: usize,
    /// Against the target branch's own uninjected logits.
    pub t2t_vs_uninjected: f64,
    pub t2t_vs_source: f64,
    pub i2i_vs_source: f64,
    pub t2i_vs_source: f64,
    pub i2t_vs_source: f64,
}

fn quadrant_diff(step: usize, block: usize, head: usize, src: &BlockActivation, tgt: &BlockActivation) -> Option<QuadrantDiff> {
    let s = src.head_attention(head)?.applied_logit_quadrants();
    let t = tgt.head_attention(head)?;
    let (native, applied) = (t.native_logit_quadrants(), t.applied_logit_quadrants());
    Some(QuadrantDiff {
        step,
        block,
        head,
        t2t_vs_uninjected: applied.t2t.max_abs_diff(&native.t2t),
        t2t_vs_source: applied.t2t.max_abs_diff(&s.t2t),
        i2i_vs_source: applied.i2i.max_abs_diff(&s.i2i),
        t2i_vs_source: applied.t2i.max_abs_diff(&s.t2i),
        i2t_vs_source: applied.i2t.max_abs_diff(&s.i2t),
    })
}

/// Quadrant differences at every replaced step and block of an edit run.
pub fn collect_quadrant_diffs(view: &StepView<'_>, blocks: &BTreeSet<usize>, out: &mut Vec<QuadrantDiff>) {
    if !view.replaced || view.source.is_empty() {
        return;
    }
    for &b in blocks {
        let (s, t) = (&view.source[b], &view.target[b]);
        for h in 0..t.projections.len() {
            out.extend(quadrant_diff(view.step, b, h, s, t));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: ReplaceMode,
    pub max_t2t_vs_uninjected: f64,
    pub max_t2t_vs_source: f64,
    pub max_i2i_vs_source: f64,
    pub max_t2i_vs_source: f64,
    pub max_i2t_vs_source: f64,
    pub diffs: Vec<QuadrantDiff>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub modes: Vec<ModeSummary>,
    /// `(mode a, mode b, max |target_a - target_b|)` over final latents.
    pub output_diffs: Vec<(ReplaceMode, ReplaceMode, f64)>,
    pub outputs_identical: bool,
}

/// Runs the same edit under every replacement mode and reports how each
/// one alters the quadrants of the replaced blocks.
pub fn compare_replace_modes(
    model: &Model,
    src_prompt: &str,
    tgt_prompt: &str,
    seed: u64,
    cfg: &EditConfig,
) -> Result<ModeComparison> {
    let blocks: BTreeSet<usize> = cfg.replaced_blocks(model.depth()).collect();
    let observe = Observe {
        capture: blocks.clone(),
        record_inputs: false,
    };
    let mut modes = Vec::new();
    let mut outputs = Vec::new();
    for mode in ReplaceMode::ALL {
        let c = EditConfig {
            replace_mode: mode,
            ..cfg.clone()
        };
        let mut diffs = Vec::new();
        let out = edit_synthetic_observed(model, src_prompt, tgt_prompt, seed, &c, &observe, |v| {
            collect_quadrant_diffs(&v, &blocks, &mut diffs);
            Ok(())
        })?;
        let max = |f: fn(&QuadrantDiff) -> f64| diffs.iter().map(f).fold(0.0, f64::max);
        modes.push(ModeSummary {
            mode,
            max_t2t_vs_uninjected: max(|d| d.t2t_vs_uninjected),
            max_t2t_vs_source: max(|d| d.t2t_vs_source),
            max_i2i_vs_source: max(|d| d.i2i_vs_source),
            max_t2i_vs_source: max(|d| d.t2i_vs_source),
            max_i2t_vs_source: max(|d| d.i2t_vs_source),
            diffs,
        });
        outputs.push((mode, out.target));
    }
    let mut output_diffs = Vec::new();
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            output_diffs.push((outputs[i].0, outputs[j].0, outputs[i].1.max_abs_diff(&outputs[j].1)));
        }
    }
    let outputs_identical = outputs.windows(2).all(|w| w[0].1.bit_eq(&w[1].1));
    Ok(ModeComparison {
        modes,
        output_diffs,
        outputs_identical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::invert;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::new(ModelConfig::default()).unwrap()
    }

    fn short(steps: usize) -> EditConfig {
        EditConfig {
            steps,
            ..EditConfig::default()
        }
    }

    #[test]
    fn step_rule_arithmetic() {
        let c = EditConfig::default();
        let active: Vec<usize> = (0..28).filter(|&k| c.replaces_at(k)).collect();
        assert_eq!(active, (0..6).collect::<Vec<_>>());
        let c = EditConfig::few_step(2);
        assert_eq!((0..4).filter(|&k| c.replaces_at(k)).count(), 1);
        assert!(!step_active(1, 5, 0.2));
    }

    #[test]
    fn presets_and_validation() {
        assert_eq!(block_prefix_preset("flux-schnell"), Some(38));
        assert_eq!(block_prefix_preset("sd35-turbo"), Some(30));
        let mut c = EditConfig {
            local_blend: true,
            ..EditConfig::default()
        };
        assert!(c.validate(8).is_err());
        c.theta = Some(0.3);
        assert!(c.validate(8).is_ok());
        c.mask_blocks = vec![8];
        assert!(c.validate(8).is_err());
        let c = EditConfig {
            tau_frac: 1.5,
            ..EditConfig::default()
        };
        assert!(c.validate(8).is_err());
        assert_eq!(EditConfig::few_step(38).replaced_blocks(8), 0..8);
    }

    #[test]
    fn replace_mode_serde_aliases() {
        let c: EditConfig = serde_json::from_str(r#"{"replace_mode": "i2i"}"#).unwrap();
        assert_eq!(c.replace_mode, ReplaceMode::I2iBlock);
        let c: EditConfig = serde_json::from_str(r#"{"replace_mode": "full_map"}"#).unwrap();
        assert_eq!(c.replace_mode, ReplaceMode::FullMap);
        assert!(serde_json::from_str::<EditConfig>(r#"{"tau": 0.2}"#).is_err());
    }

    #[test]
    fn identity_edit_every_mode() {
        let m = model();
        for mode in ReplaceMode::ALL {
            let c = EditConfig {
                replace_mode: mode,
                local_blend: true,
                theta: Some(0.3),
                ..short(6)
            };
            let out = edit_synthetic(&m, "a cat on a sofa", "a cat on a sofa", 3, &c).unwrap();
            assert!(out.target.bit_eq(&out.source));
            assert!(!out.trace.warnings.is_empty());
        }
    }

    #[test]
    fn no_coupling_matches_independent_generation() {
        let m = model();
        let c = EditConfig {
            tau_frac: 0.0,
            ..short(5)
        };
        let out = edit_synthetic(&m, "a cat", "a dog", 4, &c).unwrap();
        let src = generate(&m, "a cat", 4, 5).unwrap();
        let tgt = generate(&m, "a dog", 4, 5).unwrap();
        assert!(out.source.bit_eq(&src.last().unwrap().latent));
        assert!(out.target.bit_eq(&tgt.last().unwrap().latent));

        let c = EditConfig {
            replace_block_prefix: Some(0),
            ..short(5)
        };
        let out = edit_synthetic(&m, "a cat", "a dog", 4, &c).unwrap();
        assert!(out.target.bit_eq(&tgt.last().unwrap().latent));
    }

    #[test]
    fn source_ignores_target_settings() {
        let m = model();
        let base = edit_synthetic(&m, "a cat", "a dog", 1, &short(5)).unwrap();
        let other = EditConfig {
            tau_frac: 0.8,
            replace_mode: ReplaceMode::FullMap,
            local_blend: true,
            theta: Some(0.2),
            ..short(5)
        };
        let out = edit_synthetic(&m, "a cat", "a dog", 1, &other).unwrap();
        assert!(out.source.bit_eq(&base.source));
        assert!(!out.target.bit_eq(&base.target));
    }

    #[test]
    fn coupling_window_prefix_property() {
        let m = model();
        let record = |tau: f64| {
            let c = EditConfig {
                tau_frac: tau,
                ..short(8)
            };
            edit_synthetic(&m, "a cat", "a dog", 2, &c).unwrap().trace
        };
        let small = record(0.25);
        let large = record(0.5);
        assert_eq!(small.replaced_steps(), vec![0, 1]);
        assert_eq!(large.replaced_steps(), vec![0, 1, 2, 3]);
        for (a, b) in small.steps.iter().zip(&large.steps).take(2) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn blend_swapping_mask_swaps_roles() {
        let a = Matrix::random_normal(4, 3, 1);
        let b = Matrix::random_normal(4, 3, 2);
        let m = SpatialMap::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let inv = SpatialMap::new(2, 2, m.values().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(blend(&a, &b, &m).unwrap().bit_eq(&blend(&b, &a, &inv).unwrap()));
        assert!(blend(&a, &b, &SpatialMap::filled(2, 2, 1.0)).unwrap().bit_eq(&a));
        assert!(blend(&a, &b, &SpatialMap::zeros(2, 2)).unwrap().bit_eq(&b));
    }

    #[test]
    fn blending_records_masks_and_defaults_blocks() {
        let m = model();
        let c = EditConfig {
            local_blend: true,
            theta: Some(0.4),
            ..short(4)
        };
        let out = edit_synthetic(&m, "a cat on a sofa", "a dog on a sofa", 0, &c).unwrap();
        assert_eq!(out.trace.blended_steps(), vec![0, 1]);
        assert_eq!(out.trace.mask_blocks, (0..8).collect::<Vec<_>>());
        assert_eq!(out.trace.token_set, vec![1]);
        assert!(out.trace.steps[0].mask.as_ref().unwrap().is_binary());

        let c = EditConfig {
            blend_words: Some(vec!["zebra".into()]),
            ..c
        };
        assert!(edit_synthetic(&m, "a cat", "a dog", 0, &c).is_err());
    }

    #[test]
    fn full_blend_with_open_mask_keeps_target() {
        let m = model();
        let plain = short(4);
        let open = EditConfig {
            local_blend: true,
            theta: Some(-1.0),
            blend_stop_frac: 1.0,
            ..short(4)
        };
        let a = edit_synthetic(&m, "a cat", "a dog", 6, &plain).unwrap();
        let b = edit_synthetic(&m, "a cat", "a dog", 6, &open).unwrap();
        assert!(a.target.bit_eq(&b.target));
    }

    #[test]
    fn prompt_switch_extremes_and_flip_step() {
        let m = model();
        let tgt = generate(&m, "a dog", 2, 5).unwrap().pop().unwrap().latent;
        let src = generate(&m, "a cat", 2, 5).unwrap().pop().unwrap().latent;
        assert!(baseline_prompt_switch(&m, "a cat", "a dog", 0.0, 2, 5).unwrap().bit_eq(&tgt));
        assert!(baseline_prompt_switch(&m, "a cat", "a dog", 1.0, 2, 5).unwrap().bit_eq(&src));
        let flips: Vec<usize> = (0..28).filter(|&k| !step_active(k, 28, 0.2)).take(1).collect();
        assert_eq!(flips, vec![6]);
    }

    #[test]
    fn real_edit_without_coupling_is_plain_sampling() {
        let m = model();
        let x0 = Matrix::random_normal(64, 16, 1);
        let x_init = initial_noise(&m, 2);
        let c = EditConfig {
            tau_frac: 0.0,
            ..short(5)
        };
        let out = edit_real(&m, &x0, &x_init, "", "a dog", &c).unwrap();
        let p = m.encode_prompt("a dog");
        let traj = euler_sample(
            &FlowState {
                latent: x_init.clone(),
                t: 1.0,
            },
            &TimeGrid::sampling(5).unwrap(),
            &m.field(&p),
        )
        .unwrap();
        assert!(out.target.bit_eq(&traj.last().unwrap().latent));
        assert!(out.source.bit_eq(&x0));
    }

    #[test]
    fn real_source_path_matches_inversion() {
        let m = model();
        let x0 = Matrix::random_normal(64, 16, 1);
        let x1 = Matrix::random_normal(64, 16, 2);
        let steps = 6;
        let null = m.encode_prompt("");
        let inv = invert(&x0, &x1, 1.0, &TimeGrid::inversion(steps).unwrap(), &m.field(&null)).unwrap();
        let x_init = inv.last().unwrap().latent.clone();
        let mut seen = Vec::new();
        let observe = Observe {
            capture: [0].into(),
            record_inputs: true,
        };
        let c = short(steps);
        edit_real_observed(&m, &x0, &x_init, "", "a dog", &c, &observe, |v| {
            seen.push(v.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.len(), steps);
        let grid = TimeGrid::sampling(steps).unwrap();
        for k in 0..steps {
            let src = interpolate(&x0, &x_init, grid.knots()[k]).unwrap();
            assert!(src.max_abs_diff(&inv[steps - k].latent) < 1e-8);
        }
    }

    #[test]
    fn eta_rev_one_reconstructs() {
        let m = model();
        let x0 = Matrix::random_normal(64, 16, 1);
        let x_init = initial_noise(&m, 9);
        let c = EditConfig {
            eta_rev: 1.0,
            ..short(7)
        };
        let out = edit_real(&m, &x0, &x_init, "a cat", "a dog", &c).unwrap();
        assert!(out.target.max_abs_diff(&x0) < 1e-9);
    }

    #[test]
    fn mode_comparison_algebra() {
        let m = model();
        let r = compare_replace_modes(&m, "a cat", "a dog", 5, &short(5)).unwrap();
        let get = |mode| r.modes.iter().find(|s| s.mode == mode).unwrap();
        let qk = get(ReplaceMode::QkProj);
        assert_eq!(qk.max_t2t_vs_uninjected, 0.0);
        assert_eq!(qk.max_i2i_vs_source, 0.0);
        assert!(qk.max_t2i_vs_source > 0.0);
        assert_eq!(get(ReplaceMode::I2iBlock).max_i2i_vs_source, 0.0);
        let full = get(ReplaceMode::FullMap);
        assert_eq!(full.max_t2t_vs_source, 0.0);
        assert_eq!(full.max_t2i_vs_source, 0.0);
        assert!(!r.outputs_identical);

        let same = compare_replace_modes(&m, "a cat", "a cat", 5, &short(5)).unwrap();
        assert!(same.outputs_identical);
    }
}
