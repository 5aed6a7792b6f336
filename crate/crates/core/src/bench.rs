//! Two ways of evaluating one joint attention head, and a timing harness
//! comparing them.
//!
//! The streaming path walks key tiles with an online softmax and never holds
//! more than one row of weights. The materialized path builds the four logit
//! quadrants, normalises each image or text row across its two quadrants and
//! assembles `W_ii v_i + W_it v_t` (and the text counterpart).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::atlas::ConcatOrder;
use crate::error::{Error, Result};
use crate::tensor::{axpy4, matmul, matmul_transb, row_softmax, rows4, Matrix};

/// Key tile width used by [`streaming_attention`].
pub const KEY_TILE: usize = 128;

/// Query rows sharing each key tile in [`streaming_attention`].
pub const QUERY_BLOCK: usize = 32;

/// Largest elementwise disagreement accepted between the two paths.
pub const AGREEMENT_TOLERANCE: f64 = 1e-10;

/// Per-modality inputs of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInputs {
    pub q_i: Matrix,
    pub k_i: Matrix,
    pub v_i: Matrix,
    pub q_t: Matrix,
    pub k_t: Matrix,
    pub v_t: Matrix,
}

impl HeadInputs {
    /// Standard-normal inputs for `n_i` image and `n_t` text tokens.
    pub fn random(n_i: usize, n_t: usize, d: usize, seed: u64) -> Self {
        let m = |rows, k: u64| Matrix::random_normal(rows, d, seed.wrapping_mul(8).wrapping_add(k));
        Self {
            q_i: m(n_i, 0),
            k_i: m(n_i, 1),
            v_i: m(n_i, 2),
            q_t: m(n_t, 3),
            k_t: m(n_t, 4),
            v_t: m(n_t, 5),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.q_i.cols()
    }

    fn validate(&self) -> Result<()> {
        let d = self.q_i.cols();
        let (n_i, n_t) = (self.q_i.rows(), self.q_t.rows());
        let ok = [&self.q_i, &self.k_i, &self.v_i].iter().all(|m| m.shape() == (n_i, d))
            && [&self.q_t, &self.k_t, &self.v_t].iter().all(|m| m.shape() == (n_t, d));
        if !ok || d == 0 {
            return Err(Error::Shape("inconsistent head input shapes".into()));
        }
        Ok(())
    }

    /// Concatenated `(q, k, v)` in `order`.
    pub fn joint(&self, order: ConcatOrder) -> Result<(Matrix, Matrix, Matrix)> {
        Ok((
            order.concat(&self.q_i, &self.q_t)?,
            order.concat(&self.k_i, &self.k_t)?,
            order.concat(&self.v_i, &self.v_t)?,
        ))
    }
}

/// `softmax(scale · q kᵀ) v` over the full joint sequence.
pub fn monolithic_attention(x: &HeadInputs, scale: f64, order: ConcatOrder) -> Result<Matrix> {
    x.validate()?;
    let (q, k, v) = x.joint(order)?;
    matmul(&row_softmax(&matmul_transb(&q, &k)?, scale), &v)
}

/// Softmax over two side-by-side quadrants of the same query rows.
fn normalise_pair(a: &mut Matrix, b: &mut Matrix, scale: f64) {
    for r in 0..a.rows() {
        let (ra, rb) = (a.row_mut(r), b.row_mut(r));
        let max = ra.iter().chain(rb.iter()).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in ra.iter_mut().chain(rb.iter_mut()) {
            *v = ((*v - max) * scale).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in ra.iter_mut().chain(rb.iter_mut()) {
            *v *= inv;
        }
    }
}

/// Materializes the four quadrants and assembles the output blockwise.
pub fn materialized_attention(x: &HeadInputs, scale: f64, order: ConcatOrder) -> Result<Matrix> {
    x.validate()?;
    let mut ii = matmul_transb(&x.q_i, &x.k_i)?;
    let mut it = matmul_transb(&x.q_i, &x.k_t)?;
    let mut ti = matmul_transb(&x.q_t, &x.k_i)?;
    let mut tt = matmul_transb(&x.q_t, &x.k_t)?;
    normalise_pair(&mut ii, &mut it, scale);
    normalise_pair(&mut ti, &mut tt, scale);
    let out_i = matmul(&ii, &x.v_i)?.add(&matmul(&it, &x.v_t)?)?;
    let out_t = matmul(&ti, &x.v_i)?.add(&matmul(&tt, &x.v_t)?)?;
    order.concat(&out_i, &out_t)
}

/// Single pass over key tiles with a running max and normaliser per row.
///
/// Queries are processed in blocks of [`QUERY_BLOCK`] rows so that each key
/// and value tile is reused while it is still in cache.
pub fn streaming_attention(x: &HeadInputs, scale: f64, order: ConcatOrder, tile: usize) -> Result<Matrix> {
    x.validate()?;
    if tile == 0 {
        return Err(Error::Config("key tile must be positive".into()));
    }
    let (q, k, v) = x.joint(order)?;
    let k_t = k.transpose();
    let (n, d) = q.shape();
    let mut out = Matrix::zeros(n, d);
    let mut scores = vec![0.0; QUERY_BLOCK * tile];
    let mut max = [f64::NEG_INFINITY; QUERY_BLOCK];
    let mut norm = [0.0; QUERY_BLOCK];
    let mut acc = vec![0.0; QUERY_BLOCK * d];
    for q_start in (0..n).step_by(QUERY_BLOCK) {
        let rows = QUERY_BLOCK.min(n - q_start);
        max.fill(f64::NEG_INFINITY);
        norm.fill(0.0);
        acc.fill(0.0);
        for k_start in (0..n).step_by(tile) {
            let width = tile.min(n - k_start);
            // Scores for the whole query block against this key tile.
            scores.fill(0.0);
            let full = rows / 4 * 4;
            for g in (0..full).step_by(4) {
                let r = q_start + g;
                for c in 0..d {
                    let s4 = [q.get(r, c), q.get(r + 1, c), q.get(r + 2, c), q.get(r + 3, c)];
                    axpy4(rows4(&mut scores, tile, g), s4, &k_t.row(c)[k_start..k_start + width]);
                }
            }
            for b in full..rows {
                let s = &mut scores[b * tile..b * tile + width];
                for c in 0..d {
                    let qc = q.get(q_start + b, c);
                    for (sv, kv) in s.iter_mut().zip(&k_t.row(c)[k_start..k_start + width]) {
                        *sv += qc * kv;
                    }
                }
            }
            // Rescale running state and turn scores into unnormalised weights.
            for b in 0..rows {
                let s = &mut scores[b * tile..b * tile + width];
                for sv in s.iter_mut() {
                    *sv *= scale;
                }
                let new_max = s.iter().fold(max[b], |m, &v| m.max(v));
                let correction = (max[b] - new_max).exp();
                if correction != 1.0 {
                    norm[b] *= correction;
                    for a in &mut acc[b * d..(b + 1) * d] {
                        *a *= correction;
                    }
                }
                for sv in s.iter_mut() {
                    *sv = (*sv - new_max).exp();
                    norm[b] += *sv;
                }
                max[b] = new_max;
            }
            for g in (0..full).step_by(4) {
                for j in 0..width {
                    let p = [0, 1, 2, 3].map(|o| scores[(g + o) * tile + j]);
                    axpy4(rows4(&mut acc, d, g), p, v.row(k_start + j));
                }
            }
            for b in full..rows {
                let a = &mut acc[b * d..(b + 1) * d];
                for j in 0..width {
                    let p = scores[b * tile + j];
                    for (x, vj) in a.iter_mut().zip(v.row(k_start + j)) {
                        *x += p * vj;
                    }
                }
            }
        }
        for b in 0..rows {
            let inv = 1.0 / norm[b];
            for (o, a) in out.row_mut(q_start + b).iter_mut().zip(&acc[b * d..(b + 1) * d]) {
                *o = a * inv;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchShape {
    pub n_image: usize,
    pub n_text: usize,
    pub head_dim: usize,
}

impl BenchShape {
    pub const TINY: BenchShape = BenchShape {
        n_image: 64,
        n_text: 16,
        head_dim: 8,
    };
    /// 4096 image tokens for a 1024² image, 77 + 256 text tokens.
    pub const PRODUCTION: BenchShape = BenchShape {
        n_image: 4096,
        n_text: 333,
        head_dim: 64,
    };
}

/// Deterministic part of a benchmark entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementEntry {
    pub shape: BenchShape,
    pub max_abs_diff: f64,
    pub agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub shape: BenchShape,
    pub runs: usize,
    pub streaming_median_s: f64,
    pub materialized_median_s: f64,
    /// `materialized / streaming`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub tile: usize,
    pub agreement: Vec<AgreementEntry>,
    /// Wall-clock results; not reproducible across runs.
    pub timing: Vec<TimingEntry>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Checks agreement at every shape, then times each path `runs` times after
/// one warm-up run, interleaving the two paths.
pub fn run_bench(shapes: &[BenchShape], runs: usize, seed: u64) -> Result<BenchReport> {
    if shapes.is_empty() {
        return Err(Error::Config("no benchmark shapes given".into()));
    }
    if runs == 0 {
        return Err(Error::Config("runs must be positive".into()));
    }
    let order = ConcatOrder::ImageFirst;
    let mut agreement = Vec::with_capacity(shapes.len());
    let mut timing = Vec::with_capacity(shapes.len());
    for (i, &shape) in shapes.iter().enumerate() {
        let x = HeadInputs::random(shape.n_image, shape.n_text, shape.head_dim, seed.wrapping_add(i as u64));
        let scale = 1.0 / (shape.head_dim as f64).sqrt();
        let s = streaming_attention(&x, scale, order, KEY_TILE)?;
        let m = materialized_attention(&x, scale, order)?;
        let max_abs_diff = s.max_abs_diff(&m);
        let agree = max_abs_diff <= AGREEMENT_TOLERANCE;
        agreement.push(AgreementEntry {
            shape,
            max_abs_diff,
            agree,
        });
        if !agree {
            return Err(Error::Domain(format!(
                "attention paths disagree by {max_abs_diff:e} at {shape:?}"
            )));
        }
        let (mut ts, mut tm) = (Vec::with_capacity(runs), Vec::with_capacity(runs));
        for _ in 0..runs {
            let t0 = Instant::now();
            std::hint::black_box(streaming_attention(&x, scale, order, KEY_TILE)?);
            ts.push(t0.elapsed().as_secs_f64());
            let t0 = Instant::now();
            std::hint::black_box(materialized_attention(&x, scale, order)?);
            tm.push(t0.elapsed().as_secs_f64());
        }
        let (streaming_median_s, materialized_median_s) = (median(ts), median(tm));
        timing.push(TimingEntry {
            shape,
            runs,
            streaming_median_s,
            materialized_median_s,
            ratio: materialized_median_s / streaming_median_s,
        });
    }
    Ok(BenchReport {
        seed,
        tile: KEY_TILE,
        agreement,
        timing,
    })
}
