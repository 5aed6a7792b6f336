//! Quadrant decomposition of joint attention and the per-token spatial maps
//! derived from it.
//!
//! A joint attention matrix over `n_i` image tokens and `n_t` text tokens
//! splits into four blocks. Names are semantic and independent of the
//! concatenation order:
//!
//! | block | queries | keys  |
//! |-------|---------|-------|
//! | I2I   | image   | image |
//! | T2I   | image   | text  |
//! | I2T   | text    | image |
//! | T2T   | text    | text  |

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gaussian_blur, pca_top_k, threshold, Matrix, SpatialMap};

/// Position of the image and text token groups in the concatenated sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcatOrder {
    /// SD3-family ordering.
    #[default]
    ImageFirst,
    /// Flux ordering.
    TextFirst,
}

impl ConcatOrder {
    pub fn image_range(self, n_i: usize, n_t: usize) -> Range<usize> {
        match self {
            ConcatOrder::ImageFirst => 0..n_i,
            ConcatOrder::TextFirst => n_t..n_t + n_i,
        }
    }

    pub fn text_range(self, n_i: usize, n_t: usize) -> Range<usize> {
        match self {
            ConcatOrder::ImageFirst => n_i..n_i + n_t,
            ConcatOrder::TextFirst => 0..n_t,
        }
    }

    /// Stacks image and text rows in this order.
    pub fn concat(self, image: &Matrix, text: &Matrix) -> Result<Matrix> {
        match self {
            ConcatOrder::ImageFirst => Matrix::vstack(image, text),
            ConcatOrder::TextFirst => Matrix::vstack(text, image),
        }
    }

    /// Inverse of [`ConcatOrder::concat`].
    pub fn split(self, joint: &Matrix, n_i: usize, n_t: usize) -> Result<(Matrix, Matrix)> {
        if joint.rows() != n_i + n_t {
            return Err(Error::Shape(format!(
                "cannot split {} rows into {n_i} image + {n_t} text",
                joint.rows()
            )));
        }
        Ok((
            joint.row_range(self.image_range(n_i, n_t)),
            joint.row_range(self.text_range(n_i, n_t)),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Logits,
    Weights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionQuadrants {
    /// `n_i × n_i`
    pub i2i: Matrix,
    /// `n_i × n_t`
    pub t2i: Matrix,
    /// `n_t × n_i`
    pub i2t: Matrix,
    /// `n_t × n_t`
    pub t2t: Matrix,
    pub stage: Stage,
    pub order: ConcatOrder,
}

impl AttentionQuadrants {
    pub fn n_image(&self) -> usize {
        self.i2i.rows()
    }

    pub fn n_text(&self) -> usize {
        self.t2t.rows()
    }

    /// Rebuilds the full matrix in the stored concatenation order.
    pub fn reassemble(&self) -> Matrix {
        let (n_i, n_t) = (self.n_image(), self.n_text());
        let img = self.order.image_range(n_i, n_t);
        let txt = self.order.text_range(n_i, n_t);
        let mut full = Matrix::zeros(n_i + n_t, n_i + n_t);
        let blocks = [
            (&self.i2i, &img, &img),
            (&self.t2i, &img, &txt),
            (&self.i2t, &txt, &img),
            (&self.t2t, &txt, &txt),
        ];
        for (m, rows, cols) in blocks {
            full.set_block(rows.start, cols.start, m)
                .expect("quadrant shapes are consistent by construction");
        }
        full
    }
}

/// Splits a square joint matrix into its four quadrants.
pub fn decompose(
    full: &Matrix,
    order: ConcatOrder,
    n_i: usize,
    n_t: usize,
    stage: Stage,
) -> Result<AttentionQuadrants> {
    let n = n_i + n_t;
    if full.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "expected {n}x{n} attention matrix, got {:?}",
            full.shape()
        )));
    }
    let img = order.image_range(n_i, n_t);
    let txt = order.text_range(n_i, n_t);
    Ok(AttentionQuadrants {
        i2i: full.block(img.clone(), img.clone()),
        t2i: full.block(img.clone(), txt.clone()),
        i2t: full.block(txt.clone(), img),
        t2t: full.block(txt.clone(), txt),
        stage,
        order,
    })
}

/// Column `token` of the T2I block laid out on the image grid.
pub fn token_map(q: &AttentionQuadrants, token: usize, grid: (usize, usize)) -> Result<SpatialMap> {
    if q.stage != Stage::Weights {
        return Err(Error::Domain("token maps are read from attention weights".into()));
    }
    if token >= q.n_text() {
        return Err(Error::Domain(format!(
            "token {token} out of range for {} text tokens",
            q.n_text()
        )));
    }
    if grid.0 * grid.1 != q.n_image() {
        return Err(Error::Shape(format!(
            "grid {grid:?} does not hold {} image tokens",
            q.n_image()
        )));
    }
    let values = (0..q.n_image()).map(|r| q.t2i.get(r, token)).collect();
    SpatialMap::new(grid.0, grid.1, values)
}

/// One per-token map together with where it was captured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub block: usize,
    pub head: usize,
    pub step: usize,
    pub token: usize,
    pub label: String,
    pub map: SpatialMap,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskStack {
    pub entries: Vec<MaskEntry>,
}

impl MaskStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: MaskEntry) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.map.grid() != entry.map.grid() {
                return Err(Error::Shape(format!(
                    "mask grid {:?} differs from stack grid {:?}",
                    entry.map.grid(),
                    first.map.grid()
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose token is in `tokens`, in their original order.
    pub fn restrict(&self, tokens: &BTreeSet<usize>) -> MaskStack {
        MaskStack {
            entries: self
                .entries
                .iter()
                .filter(|e| tokens.contains(&e.token))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    #[default]
    Mean,
}

/// Elementwise mean over every entry, accumulated in stack order.
pub fn aggregate(stack: &MaskStack, reduce: Reduce) -> Result<SpatialMap> {
    let Reduce::Mean = reduce;
    let first = stack
        .entries
        .first()
        .ok_or_else(|| Error::Empty("cannot aggregate an empty mask stack".into()))?;
    let (h, w) = first.map.grid();
    let mut acc = vec![0.0; h * w];
    for e in &stack.entries {
        for (a, v) in acc.iter_mut().zip(e.map.values()) {
            *a += v;
        }
    }
    let n = stack.len() as f64;
    SpatialMap::new(h, w, acc.into_iter().map(|v| v / n).collect())
}

/// Which branches contribute to a blending mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnionMode {
    #[default]
    BothBranches,
    SourceOnly,
}

fn branch_mask(
    stack: &MaskStack,
    tokens: &BTreeSet<usize>,
    sigma: f64,
    theta: f64,
) -> Result<SpatialMap> {
    let mut normalized = stack.restrict(tokens);
    for e in normalized.entries.iter_mut() {
        e.map = e.map.min_max_normalized();
    }
    let mean = aggregate(&normalized, Reduce::Mean)?;
    Ok(threshold(&gaussian_blur(&mean, sigma), theta))
}

/// Binary blending mask from per-token attention maps.
///
/// Each map is min-max normalised, maps for `tokens` are averaged, blurred
/// with `sigma` and thresholded strictly at `theta`. With
/// [`UnionMode::BothBranches`] the source and target masks are OR-ed.
pub fn build_blend_mask(
    src: &MaskStack,
    tgt: &MaskStack,
    tokens: &BTreeSet<usize>,
    sigma: f64,
    theta: f64,
    union_mode: UnionMode,
) -> Result<SpatialMap> {
    if tokens.is_empty() {
        return Err(Error::Empty("blend mask token set is empty".into()));
    }
    let src_mask = branch_mask(src, tokens, sigma, theta)?;
    match union_mode {
        UnionMode::SourceOnly => Ok(src_mask),
        UnionMode::BothBranches => src_mask.union(&branch_mask(tgt, tokens, sigma, theta)?),
    }
}

/// Fraction of T2T mass on the diagonal.
pub fn t2t_diagonality(q: &AttentionQuadrants) -> f64 {
    let t2t = &q.t2t;
    let total = t2t.sum();
    if total == 0.0 {
        return 0.0;
    }
    let trace: f64 = (0..t2t.rows()).map(|i| t2t.get(i, i)).sum();
    (trace / total).clamp(0.0, 1.0)
}

/// Top-`k` principal components of the rows of the mean I2I block, each
/// reshaped onto `grid`.
pub fn i2i_pca(
    quadrants: &[AttentionQuadrants],
    k: usize,
    grid: (usize, usize),
) -> Result<(Vec<SpatialMap>, Vec<f64>)> {
    let first = quadrants
        .first()
        .ok_or_else(|| Error::Empty("no attention captures for PCA".into()))?;
    let n_i = first.n_image();
    if grid.0 * grid.1 != n_i {
        return Err(Error::Shape(format!("grid {grid:?} does not hold {n_i} image tokens")));
    }
    let mut mean = Matrix::zeros(n_i, n_i);
    for q in quadrants {
        if q.stage != Stage::Weights {
            return Err(Error::Domain("PCA runs on attention weights".into()));
        }
        mean.add_assign(&q.i2i)?;
    }
    let mean = mean.scale(1.0 / quadrants.len() as f64);
    let (components, variances) = pca_top_k(&mean, k)?;
    let maps = (0..components.rows())
        .map(|r| SpatialMap::new(grid.0, grid.1, components.row(r).to_vec()))
        .collect::<Result<_>>()?;
    Ok((maps, variances))
}
