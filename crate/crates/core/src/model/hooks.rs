use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::atlas::{decompose, AttentionQuadrants, ConcatOrder, Stage};
use crate::tensor::{row_softmax, Matrix};

/// Replacement applied to one head of one block's joint attention, before softmax.
#[derive(Debug, Clone, PartialEq)]
pub enum Injection {
    /// Substitute the rotated image queries and keys.
    Projections { q_i: Matrix, k_i: Matrix },
    /// Substitute the I2I block of the logits.
    I2iLogits(Matrix),
    /// Substitute the whole logit matrix.
    FullLogits(Matrix),
}

/// Injections plus the set of blocks whose attention should be captured.
#[derive(Debug, Clone, Default)]
pub struct HookSet {
    injections: BTreeMap<(usize, usize), Injection>,
    capture: BTreeSet<usize>,
    record_inputs: bool,
}

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inject(&mut self, block: usize, head: usize, injection: Injection) -> &mut Self {
        self.injections.insert((block, head), injection);
        self
    }

    pub fn capture(&mut self, block: usize) -> &mut Self {
        self.capture.insert(block);
        self
    }

    pub fn capture_all(&mut self, blocks: impl IntoIterator<Item = usize>) -> &mut Self {
        self.capture.extend(blocks);
        self
    }

    /// Also keep each captured block's input token streams.
    pub fn record_inputs(&mut self, on: bool) -> &mut Self {
        self.record_inputs = on;
        self
    }

    pub fn injection(&self, block: usize, head: usize) -> Option<&Injection> {
        self.injections.get(&(block, head))
    }

    pub fn injected_blocks(&self) -> BTreeSet<usize> {
        self.injections.keys().map(|&(b, _)| b).collect()
    }

    pub fn captures(&self, block: usize) -> bool {
        self.capture.contains(&block)
    }

    pub fn captured_blocks(&self) -> &BTreeSet<usize> {
        &self.capture
    }

    pub fn records_inputs(&self) -> bool {
        self.record_inputs
    }

    /// Largest block index referenced by any hook.
    pub fn max_block(&self) -> Option<usize> {
        let inj = self.injections.keys().map(|&(b, _)| b).max();
        let cap = self.capture.iter().next_back().copied();
        inj.max(cap)
    }

    pub fn is_empty(&self) -> bool {
        self.injections.is_empty() && self.capture.is_empty()
    }
}

/// One head's rotated queries/keys and values, split by modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadProjections {
    pub q_i: Matrix,
    pub k_i: Matrix,
    pub v_i: Matrix,
    pub q_t: Matrix,
    pub k_t: Matrix,
    pub v_t: Matrix,
}

/// Per-head projections of one block.
pub type ProjectionSet = Vec<HeadProjections>;

/// Captured joint attention of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAttention {
    pub order: ConcatOrder,
    pub n_image: usize,
    pub n_text: usize,
    pub scale: f64,
    /// Logits from the branch's own projections, before any injection.
    pub native_logits: Matrix,
    /// Logits that actually entered the softmax.
    pub applied_logits: Matrix,
    pub applied_weights: Matrix,
}

impl HeadAttention {
    fn split(&self, m: &Matrix, stage: Stage) -> AttentionQuadrants {
        decompose(m, self.order, self.n_image, self.n_text, stage)
            .expect("captured matrices are square over the joint sequence")
    }

    pub fn native_logit_quadrants(&self) -> AttentionQuadrants {
        self.split(&self.native_logits, Stage::Logits)
    }

    pub fn applied_logit_quadrants(&self) -> AttentionQuadrants {
        self.split(&self.applied_logits, Stage::Logits)
    }

    pub fn weight_quadrants(&self) -> AttentionQuadrants {
        self.split(&self.applied_weights, Stage::Weights)
    }

    /// Weights the branch would have used without injection.
    pub fn native_weight_quadrants(&self) -> AttentionQuadrants {
        if self.native_logits.bit_eq(&self.applied_logits) {
            return self.weight_quadrants();
        }
        self.split(&row_softmax(&self.native_logits, self.scale), Stage::Weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockActivation {
    pub block_index: usize,
    pub projections: ProjectionSet,
    /// Present only for blocks in the hook set's capture set.
    pub attention: Option<Vec<HeadAttention>>,
    /// Input `(image, text)` streams, when captured with input recording on.
    pub inputs: Option<(Matrix, Matrix)>,
}

impl BlockActivation {
    pub fn head_attention(&self, head: usize) -> Option<&HeadAttention> {
        self.attention.as_ref().and_then(|a| a.get(head))
    }

    /// Injection hooks that make another branch use this block's image q/k.
    pub fn projection_injections(&self) -> impl Iterator<Item = (usize, Injection)> + '_ {
        self.projections.iter().enumerate().map(|(h, p)| {
            (
                h,
                Injection::Projections {
                    q_i: p.q_i.clone(),
                    k_i: p.k_i.clone(),
                },
            )
        })
    }
}

/// Convenience: quadrants of all captured heads at one stage.
pub fn captured_quadrants(acts: &[BlockActivation], stage: Stage) -> Vec<AttentionQuadrants> {
    let mut out = Vec::new();
    for a in acts {
        for h in a.attention.iter().flatten() {
            out.push(match stage {
                Stage::Logits => h.applied_logit_quadrants(),
                Stage::Weights => h.weight_quadrants(),
            });
        }
    }
    out
}
