//! Pure Rust side of the browser demo, testable natively.

use std::collections::BTreeSet;

use mmdit_core::atlas::{build_blend_mask, token_map, MaskEntry, MaskStack, UnionMode};
use mmdit_core::edit::initial_noise;
use mmdit_core::flow::{invert, TimeGrid};
use mmdit_core::model::{changed_token_positions, BlockActivation, HookSet, PromptEmbedding};
use mmdit_core::{Error, Matrix, Model, ModelConfig, Result, SpatialMap};

pub struct Session {
    model: Model,
    seed: u64,
    masks: Option<(MaskStack, MaskStack, BTreeSet<usize>)>,
}

impl Session {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = ModelConfig {
            seed,
            ..ModelConfig::sd3_toy()
        };
        Ok(Self {
            model: Model::new(cfg)?,
            seed,
            masks: None,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.model.config().image_grid
    }

    pub fn depth(&self) -> usize {
        self.model.depth()
    }

    /// Distinct words of `prompt` that fit in the text sequence.
    pub fn words(&self, prompt: &str) -> Vec<String> {
        let p = self.model.encode_prompt(prompt);
        let mut out: Vec<String> = Vec::new();
        for w in prompt.split_whitespace() {
            if !p.positions_of(w).is_empty() && !out.iter().any(|o| o == w) {
                out.push(w.to_owned());
            }
        }
        out
    }

    /// Uninjected attention of every block on seeded noise at time `t`.
    fn forward(&self, prompt: &PromptEmbedding, t: f64) -> Result<Vec<BlockActivation>> {
        let mut hooks = HookSet::new();
        hooks.capture_all(0..self.depth());
        let x = initial_noise(&self.model, self.seed);
        Ok(self.model.velocity(&x, t, prompt, &hooks)?.1)
    }

    /// Normalised T2I map of `word` in `block`, averaged over heads and the
    /// word's positions.
    pub fn token_heatmap(&self, prompt: &str, word: &str, block: usize, t: f64) -> Result<SpatialMap> {
        if block >= self.depth() {
            return Err(Error::Domain(format!("block {block} outside a {}-block model", self.depth())));
        }
        let p = self.model.encode_prompt(prompt);
        let positions = p.positions_of(word);
        if positions.is_empty() {
            return Err(Error::Domain(format!("{word:?} is not in the prompt")));
        }
        let acts = self.forward(&p, t)?;
        let (h, w) = self.grid();
        let mut acc = SpatialMap::zeros(h, w);
        let mut n = 0.0;
        for head in acts[block].attention.iter().flatten() {
            let q = head.native_weight_quadrants();
            for &pos in &positions {
                let m = token_map(&q, pos, (h, w))?;
                for (a, v) in acc.values_mut().iter_mut().zip(m.values()) {
                    *a += v;
                }
                n += 1.0;
            }
        }
        acc.values_mut().iter_mut().for_each(|a| *a /= n);
        Ok(acc.min_max_normalized())
    }

    fn stack(&self, prompt: &PromptEmbedding, tokens: &BTreeSet<usize>) -> Result<MaskStack> {
        let grid = self.grid();
        let mut stack = MaskStack::new();
        for act in self.forward(prompt, 1.0)? {
            for (head, a) in act.attention.iter().flatten().enumerate() {
                let q = a.native_weight_quadrants();
                for &token in tokens {
                    stack.push(MaskEntry {
                        block: act.block_index,
                        head,
                        step: 0,
                        token,
                        label: String::new(),
                        map: token_map(&q, token, grid)?,
                    })?;
                }
            }
        }
        Ok(stack)
    }

    /// Captures the maps a blending mask is built from; returns the number of
    /// changed token positions.
    pub fn prepare_mask(&mut self, source: &str, target: &str) -> Result<usize> {
        let (s, t) = (self.model.encode_prompt(source), self.model.encode_prompt(target));
        let tokens = changed_token_positions(&s, &t);
        if tokens.is_empty() {
            self.masks = None;
            return Ok(0);
        }
        let n = tokens.len();
        self.masks = Some((self.stack(&s, &tokens)?, self.stack(&t, &tokens)?, tokens));
        Ok(n)
    }

    pub fn blend_mask(&self, theta: f64, sigma: f64, source_only: bool) -> Result<SpatialMap> {
        let (s, t, tokens) = self
            .masks
            .as_ref()
            .ok_or_else(|| Error::Empty("the prompts do not differ, so there is no mask".into()))?;
        let union = if source_only {
            UnionMode::SourceOnly
        } else {
            UnionMode::BothBranches
        };
        build_blend_mask(s, t, tokens, sigma, theta, union)
    }
}

/// Points on the unit circle.
pub fn ring(n: usize) -> Matrix {
    Matrix::from_fn(n, 2, |i, c| {
        let a = std::f64::consts::TAU * i as f64 / n as f64;
        if c == 0 {
            a.cos()
        } else {
            a.sin()
        }
    })
}

/// Stand-in drift for the 2-D view: a rotation that fades in over time.
pub fn swirl(x: &Matrix, t: f64) -> Result<Matrix> {
    Ok(Matrix::from_fn(x.rows(), 2, |i, c| {
        let (px, py) = (x.get(i, 0), x.get(i, 1));
        let v = if c == 0 { -py } else { px };
        2.0 * t * v
    }))
}

/// Controlled inversion of a ring of `n` points toward seeded noise.
/// Returns every state flattened as `[step][point][x, y]`.
pub fn inversion_paths(n: usize, gamma: f64, steps: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Empty("no points".into()));
    }
    let x0 = ring(n);
    let x1 = Matrix::random_normal(n, 2, seed).scale(1.5);
    let traj = invert(&x0, &x1, gamma, &TimeGrid::inversion(steps)?, &swirl)?;
    Ok(traj.into_iter().flat_map(|s| s.latent.into_data()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmdit_core::flow::interpolate;

    #[test]
    fn heatmaps_are_normalised_per_block() {
        let s = Session::new(0).unwrap();
        assert_eq!(s.words("a photo of a cat"), ["a", "photo", "of", "cat"]);
        for b in 0..s.depth() {
            let m = s.token_heatmap("a photo of a cat", "cat", b, 0.5).unwrap();
            assert_eq!(m.grid(), s.grid());
            let (lo, hi) = m.values().iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
            assert_eq!((lo, hi), (0.0, 1.0));
        }
        assert!(s.token_heatmap("a cat", "dog", 0, 0.5).is_err());
        assert!(s.token_heatmap("a cat", "cat", 99, 0.5).is_err());
    }

    #[test]
    fn mask_shrinks_as_theta_rises() {
        let mut s = Session::new(1).unwrap();
        assert_eq!(s.prepare_mask("a photo of a cat", "a photo of a dog").unwrap(), 2);
        let mut last = f64::INFINITY;
        for theta in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let m = s.blend_mask(theta, 1.0, false).unwrap();
            assert!(m.is_binary());
            assert!(m.sum() <= last);
            last = m.sum();
        }
        assert_eq!(s.blend_mask(1.0, 1.0, false).unwrap().sum(), 0.0);
        let union = s.blend_mask(0.5, 1.0, false).unwrap();
        let src = s.blend_mask(0.5, 1.0, true).unwrap();
        assert!(src.values().iter().zip(union.values()).all(|(a, b)| a <= b));

        assert_eq!(s.prepare_mask("a cat", "a cat").unwrap(), 0);
        assert!(s.blend_mask(0.5, 1.0, false).is_err());
    }

    #[test]
    fn full_gamma_paths_end_on_the_straight_line() {
        let (n, steps) = (12, 20);
        let flat = inversion_paths(n, 1.0, steps, 3).unwrap();
        assert_eq!(flat.len(), (steps + 1) * n * 2);
        let end = Matrix::new(n, 2, flat[steps * n * 2..].to_vec()).unwrap();
        let x1 = Matrix::random_normal(n, 2, 3).scale(1.5);
        let line = interpolate(&ring(n), &x1, TimeGrid::inversion(steps).unwrap().last()).unwrap();
        assert!(end.max_abs_diff(&line) < 1e-9);
        assert!(inversion_paths(0, 0.5, 4, 0).is_err());
        assert!(inversion_paths(4, 1.5, 4, 0).is_err());
    }
}
