//! Block scoring against ground-truth masks and average-rank block selection.

use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{decompose, token_map, Stage};
use crate::error::{Error, Result};
use crate::model::{HookSet, Model};
use crate::tensor::{gaussian_blur, Matrix, SpatialMap};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMask {
    pub mask: SpatialMap,
    /// Prompt positions of the object word.
    pub token_range: Range<usize>,
    pub scene_id: usize,
}

impl GroundTruthMask {
    pub fn new(mask: SpatialMap, token_range: Range<usize>, scene_id: usize) -> Result<Self> {
        if !mask.is_binary() {
            return Err(Error::Domain("ground-truth mask must be binary".into()));
        }
        Ok(Self {
            mask,
            token_range,
            scene_id,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub prompt: String,
    pub gt: GroundTruthMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricScores {
    pub bce: f64,
    pub soft_miou: f64,
    pub mse: f64,
}

/// BCE, soft mIoU (`Σmin / Σmax`, with `0/0 = 1`) and MSE of `pred` against
/// the mask.
pub fn score_block(pred: &SpatialMap, gt: &GroundTruthMask) -> Result<MetricScores> {
    if pred.grid() != gt.mask.grid() {
        return Err(Error::Shape(format!(
            "prediction grid {:?} differs from mask grid {:?}",
            pred.grid(),
            gt.mask.grid()
        )));
    }
    let n = pred.values().len() as f64;
    let (mut bce, mut inter, mut union, mut mse) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.values().iter().zip(gt.mask.values()) {
        bce -= g * (p + BCE_EPS).ln() + (1.0 - g) * (1.0 - p + BCE_EPS).ln();
        inter += p.min(g);
        union += p.max(g);
        mse += (p - g) * (p - g);
    }
    Ok(MetricScores {
        bce: bce / n,
        soft_miou: if union == 0.0 { 1.0 } else { inter / union },
        mse: mse / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScore {
    pub block: usize,
    pub bce: f64,
    pub soft_miou: f64,
    pub mse: f64,
    pub rank_bce: usize,
    pub rank_miou: usize,
    pub rank_mse: usize,
    pub avg_rank: f64,
}

/// 1-based ranks of `keys` in sorted order, ties going to the lower block.
fn ranks(blocks: &[usize], keys: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = keys[a].total_cmp(&keys[b]);
        let ord = if descending { ord.reverse() } else { ord };
        ord.then(blocks[a].cmp(&blocks[b]))
    });
    let mut out = vec![0; keys.len()];
    for (rank, &i) in idx.iter().enumerate() {
        out[i] = rank + 1;
    }
    out
}

/// Ranks blocks per metric and orders them by mean rank.
pub fn rank_blocks(scores: &[(usize, MetricScores)]) -> Vec<BlockScore> {
    let blocks: Vec<usize> = scores.iter().map(|s| s.0).collect();
    let col = |f: fn(&MetricScores) -> f64| scores.iter().map(|s| f(&s.1)).collect::<Vec<_>>();
    let r_bce = ranks(&blocks, &col(|m| m.bce), false);
    let r_miou = ranks(&blocks, &col(|m| m.soft_miou), true);
    let r_mse = ranks(&blocks, &col(|m| m.mse), false);
    let mut out: Vec<BlockScore> = scores
        .iter()
        .enumerate()
        .map(|(i, (block, m))| BlockScore {
            block: *block,
            bce: m.bce,
            soft_miou: m.soft_miou,
            mse: m.mse,
            rank_bce: r_bce[i],
            rank_miou: r_miou[i],
            rank_mse: r_mse[i],
            avg_rank: (r_bce[i] + r_miou[i] + r_mse[i]) as f64 / 3.0,
        })
        .collect();
    out.sort_by(|a, b| a.avg_rank.total_cmp(&b.avg_rank).then(a.block.cmp(&b.block)));
    out
}

/// First `k` blocks of a ranking.
pub fn select_top_k(ranked: &[BlockScore], k: usize) -> Result<Vec<usize>> {
    if k > ranked.len() {
        return Err(Error::Config(format!(
            "cannot select {k} blocks out of {}",
            ranked.len()
        )));
    }
    Ok(ranked[..k].iter().map(|s| s.block).collect())
}

/// Reported top-5 T2I mask blocks for full-size models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskBlockPreset {
    pub name: &'static str,
    pub smoothed: [usize; 5],
    pub unsmoothed: [usize; 5],
}

pub const MASK_BLOCK_PRESETS: [MaskBlockPreset; 4] = [
    MaskBlockPreset {
        name: "sd3-m",
        smoothed: [7, 8, 5, 4, 9],
        unsmoothed: [7, 8, 5, 4, 9],
    },
    MaskBlockPreset {
        name: "sd3.5-m",
        smoothed: [7, 9, 8, 5, 10],
        unsmoothed: [7, 8, 5, 9, 6],
    },
    MaskBlockPreset {
        name: "sd3.5-l",
        smoothed: [18, 21, 20, 24, 16],
        unsmoothed: [18, 16, 29, 21, 14],
    },
    MaskBlockPreset {
        name: "flux-dev",
        smoothed: [18, 17, 12, 14, 11],
        unsmoothed: [11, 50, 18, 13, 10],
    },
];

pub fn mask_block_preset(name: &str) -> Option<&'static MaskBlockPreset> {
    MASK_BLOCK_PRESETS.iter().find(|p| p.name == name)
}

const OBJECTS: [&str; 8] = ["cat", "dog", "apple", "car", "vase", "bird", "boat", "lamp"];

/// Minimum and maximum object area as a fraction of the grid.
pub const AREA_RANGE: (f64, f64) = (0.10, 0.60);

fn draw_region(rng: &mut ChaCha8Rng, (h, w): (usize, usize)) -> SpatialMap {
    let n = (h * w) as f64;
    loop {
        let ellipse = rng.random_bool(0.5);
        let y0 = rng.random_range(0..h);
        let x0 = rng.random_range(0..w);
        let y1 = rng.random_range(y0..h) + 1;
        let x1 = rng.random_range(x0..w) + 1;
        let (cy, cx) = ((y0 + y1) as f64 / 2.0, (x0 + x1) as f64 / 2.0);
        let (ry, rx) = ((y1 - y0) as f64 / 2.0, (x1 - x0) as f64 / 2.0);
        let mut m = SpatialMap::zeros(h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                if !ellipse || dy * dy + dx * dx <= 1.0 {
                    m.set(y, x, 1.0);
                }
            }
        }
        let frac = m.sum() / n;
        if (AREA_RANGE.0..=AREA_RANGE.1).contains(&frac) {
            return m;
        }
    }
}

/// Seeded scenes, each a one-object prompt with a rectangular or elliptical
/// mask covering 10–60% of the grid.
pub fn synth_fixture(seed: u64, grid: (usize, usize), n_scenes: usize) -> Result<Vec<Scene>> {
    if grid.0 < 2 || grid.1 < 2 {
        return Err(Error::Config(format!("fixture grid {grid:?} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_scenes)
        .map(|i| {
            let word = OBJECTS[rng.random_range(0..OBJECTS.len())];
            let mask = draw_region(&mut rng, grid);
            Ok(Scene {
                prompt: format!("a photo of a {word}"),
                gt: GroundTruthMask::new(mask, 4..5, i)?,
            })
        })
        .collect()
}

/// Per-block corruption levels of the synthetic predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockNoise {
    /// Weight of uniform noise mixed into the mask.
    pub blend: f64,
    /// Probability of flipping a pixel to the opposite extreme.
    pub salt: f64,
}

pub fn block_noise_profile(seed: u64, depth: usize) -> Vec<BlockNoise> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b10c);
    (0..depth)
        .map(|_| BlockNoise {
            blend: rng.random_range(0.05..0.7),
            salt: rng.random_range(0.0..0.15),
        })
        .collect()
}

/// Flips each pixel of `map` to `1 - value` with probability `p`.
pub fn salt_noise(map: &SpatialMap, p: f64, seed: u64) -> SpatialMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = map.clone();
    for v in out.values_mut() {
        if rng.random_bool(p) {
            *v = 1.0 - *v;
        }
    }
    out
}

/// Stand-in for per-block T2I maps: the scene mask corrupted by each
/// block's noise profile.
pub fn synthetic_predictions(scene: &Scene, profile: &[BlockNoise], seed: u64) -> Vec<SpatialMap> {
    profile
        .iter()
        .enumerate()
        .map(|(b, noise)| {
            let key = seed ^ ((scene.gt.scene_id as u64) << 20) ^ ((b as u64) << 8);
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let mut m = scene.gt.mask.clone();
            for v in m.values_mut() {
                let u: f64 = rng.random();
                *v = (1.0 - noise.blend) * *v + noise.blend * u;
            }
            salt_noise(&m, noise.salt, key.wrapping_add(1)).min_max_normalized()
        })
        .collect()
}

/// T2I maps of a real forward pass: for every block, the scene's token maps
/// averaged over heads and tokens, at time `t` from a seeded latent.
pub fn model_predictions(model: &Model, scene: &Scene, t: f64, seed: u64) -> Result<Vec<SpatialMap>> {
    let cfg = model.config();
    let grid = cfg.image_grid;
    if grid != scene.gt.mask.grid() {
        return Err(Error::Shape("scene grid differs from model grid".into()));
    }
    let prompt = model.encode_prompt(&scene.prompt);
    let latent = Matrix::random_normal(cfg.n_image(), cfg.width(), seed);
    let mut hooks = HookSet::new();
    hooks.capture_all(0..model.depth());
    let (_, acts) = model.velocity(&latent, t, &prompt, &hooks)?;
    let tokens: Vec<usize> = scene.gt.token_range.clone().filter(|&p| p < cfg.text_len).collect();
    if tokens.is_empty() {
        return Err(Error::Empty("scene token range lies outside the text sequence".into()));
    }
    acts.iter()
        .map(|a| {
            let mut acc = SpatialMap::zeros(grid.0, grid.1);
            let mut count = 0.0;
            for h in a.attention.iter().flatten() {
                let q = decompose(&h.applied_weights, h.order, h.n_image, h.n_text, Stage::Weights)?;
                for &tok in &tokens {
                    let m = token_map(&q, tok, grid)?.min_max_normalized();
                    for (s, v) in acc.values_mut().iter_mut().zip(m.values()) {
                        *s += v;
                    }
                    count += 1.0;
                }
            }
            Ok(SpatialMap::new(grid.0, grid.1, acc.values().iter().map(|v| v / count).collect())?
                .min_max_normalized())
        })
        .collect()
}

/// Scores every block on every scene, averages metrics over scenes, then
/// ranks. With `sigma`, each prediction is blurred and re-normalised first.
pub fn evaluate_corpus(
    scenes: &[Scene],
    depth: usize,
    sigma: Option<f64>,
    mut predict: impl FnMut(&Scene) -> Result<Vec<SpatialMap>>,
) -> Result<Vec<BlockScore>> {
    if scenes.is_empty() {
        return Err(Error::Empty("no scenes to evaluate".into()));
    }
    let mut sums = vec![MetricScores::default(); depth];
    for scene in scenes {
        let preds = predict(scene)?;
        if preds.len() != depth {
            return Err(Error::Shape(format!(
                "expected {depth} block predictions, got {}",
                preds.len()
            )));
        }
        for (acc, pred) in sums.iter_mut().zip(&preds) {
            let pred = match sigma {
                Some(s) => gaussian_blur(pred, s).min_max_normalized(),
                None => pred.clone(),
            };
            let m = score_block(&pred, &scene.gt)?;
            acc.bce += m.bce;
            acc.soft_miou += m.soft_miou;
            acc.mse += m.mse;
        }
    }
    let n = scenes.len() as f64;
    let means: Vec<(usize, MetricScores)> = sums
        .into_iter()
        .enumerate()
        .map(|(b, s)| {
            (
                b,
                MetricScores {
                    bce: s.bce / n,
                    soft_miou: s.soft_miou / n,
                    mse: s.mse / n,
                },
            )
        })
        .collect();
    Ok(rank_blocks(&means))
}

/// CSV with one row per block, in ranking order.
pub fn scores_csv(scores: &[BlockScore]) -> String {
    let mut s = String::from("block,bce,soft_miou,mse,rank_bce,rank_miou,rank_mse,avg_rank\n");
    for b in scores {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            b.block, b.bce, b.soft_miou, b.mse, b.rank_bce, b.rank_miou, b.rank_mse, b.avg_rank
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(values: Vec<f64>, h: usize, w: usize) -> GroundTruthMask {
        GroundTruthMask::new(SpatialMap::new(h, w, values).unwrap(), 0..1, 0).unwrap()
    }

    #[test]
    fn perfect_and_disjoint() {
        let g = gt(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let s = score_block(&g.mask, &g).unwrap();
        assert!(s.bce < 1e-6);
        assert_eq!(s.soft_miou, 1.0);
        assert_eq!(s.mse, 0.0);
        let inv = SpatialMap::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(score_block(&inv, &g).unwrap().soft_miou, 0.0);
    }

    #[test]
    fn half_prediction_closed_form() {
        let g = gt(vec![1.0, 1.0, 0.0, 0.0], 2, 2);
        let s = score_block(&SpatialMap::filled(2, 2, 0.5), &g).unwrap();
        // -ln(0.5 + ε) for every pixel.
        assert!((s.bce - -(0.5 + BCE_EPS).ln()).abs() < 1e-15);
        assert!((s.bce - 2f64.ln()).abs() < 1e-6);
        assert!((s.soft_miou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.mse, 0.25);
    }

    #[test]
    fn empty_masks_have_unit_iou() {
        let g = gt(vec![0.0; 4], 2, 2);
        assert_eq!(score_block(&SpatialMap::zeros(2, 2), &g).unwrap().soft_miou, 1.0);
        assert!(score_block(&SpatialMap::zeros(3, 2), &g).is_err());
        assert!(GroundTruthMask::new(SpatialMap::filled(1, 1, 0.5), 0..1, 0).is_err());
    }

    fn m(bce: f64, soft_miou: f64, mse: f64) -> MetricScores {
        MetricScores { bce, soft_miou, mse }
    }

    #[test]
    fn single_and_dominant() {
        let r = rank_blocks(&[(3, m(1.0, 0.5, 0.2))]);
        assert_eq!((r[0].rank_bce, r[0].rank_miou, r[0].rank_mse), (1, 1, 1));
        let r = rank_blocks(&[(0, m(1.0, 0.5, 0.2)), (1, m(0.5, 0.9, 0.1))]);
        assert_eq!(r[0].block, 1);
        assert_eq!(r[0].avg_rank, 1.0);
        assert_eq!(r[1].avg_rank, 2.0);
    }

    #[test]
    fn ties_go_to_lower_block() {
        let r = rank_blocks(&[(5, m(1.0, 0.5, 0.2)), (2, m(1.0, 0.5, 0.2))]);
        assert_eq!(r[0].block, 2);
        assert_eq!(r[0].rank_bce, 1);
        assert_eq!(r[1].rank_bce, 2);
    }

    #[test]
    fn top_k() {
        let r = rank_blocks(&[(0, m(1.0, 0.5, 0.2)), (1, m(0.5, 0.9, 0.1))]);
        assert_eq!(select_top_k(&r, 2).unwrap(), vec![1, 0]);
        assert!(select_top_k(&r, 0).unwrap().is_empty());
        assert!(select_top_k(&r, 3).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(mask_block_preset("sd3-m").unwrap().smoothed, [7, 8, 5, 4, 9]);
        assert_eq!(mask_block_preset("flux-dev").unwrap().smoothed, [18, 17, 12, 14, 11]);
        assert!(mask_block_preset("nope").is_none());
    }

    #[test]
    fn fixture_properties() {
        assert!(synth_fixture(1, (8, 8), 0).unwrap().is_empty());
        let a = synth_fixture(4, (8, 8), 30).unwrap();
        assert_eq!(a, synth_fixture(4, (8, 8), 30).unwrap());
        for s in &a {
            let frac = s.gt.mask.sum() / 64.0;
            assert!((0.10..=0.60).contains(&frac), "area {frac}");
            assert!(s.gt.mask.is_binary());
            let word = s.prompt.split_whitespace().nth(s.gt.token_range.start).unwrap();
            assert!(OBJECTS.contains(&word));
        }
    }

    #[test]
    fn model_predictions_cover_every_block() {
        let model = Model::new(crate::model::ModelConfig::default()).unwrap();
        let scenes = synth_fixture(2, (8, 8), 1).unwrap();
        let preds = model_predictions(&model, &scenes[0], 0.5, 3).unwrap();
        assert_eq!(preds.len(), 8);
        for p in &preds {
            assert!(p.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let r = rank_blocks(&[(0, m(1.0, 0.5, 0.2)), (1, m(0.5, 0.9, 0.1))]);
        let csv = scores_csv(&r);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("block,"));
    }

    proptest! {
        #[test]
        fn soft_miou_symmetric(p in proptest::collection::vec(0.0f64..1.0, 16),
                                g in proptest::collection::vec(0.0f64..1.0, 16)) {
            let a = SpatialMap::new(4, 4, p).unwrap();
            let b = SpatialMap::new(4, 4, g).unwrap();
            let ga = GroundTruthMask { mask: a.clone(), token_range: 0..1, scene_id: 0 };
            let gb = GroundTruthMask { mask: b.clone(), token_range: 0..1, scene_id: 0 };
            let ab = score_block(&a, &gb).unwrap().soft_miou;
            let ba = score_block(&b, &ga).unwrap().soft_miou;
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn binary_iou_is_one_iff_equal(p in proptest::collection::vec(any::<bool>(), 9),
                                        g in proptest::collection::vec(any::<bool>(), 9)) {
            let to = |v: &[bool]| SpatialMap::new(3, 3, v.iter().map(|&b| b as u8 as f64).collect()).unwrap();
            let gt = GroundTruthMask::new(to(&g), 0..1, 0).unwrap();
            let iou = score_block(&to(&p), &gt).unwrap().soft_miou;
            prop_assert_eq!(iou == 1.0, p == g);
        }

        #[test]
        fn ranking_is_permutation_invariant(
            metrics in proptest::collection::vec((0.0f64..2.0, 0.0f64..1.0, 0.0f64..1.0), 1..10),
            rot in 0usize..10,
        ) {
            let scores: Vec<(usize, MetricScores)> = metrics
                .iter()
                .enumerate()
                .map(|(b, &(x, y, z))| (b, m(x, y, z)))
                .collect();
            let mut shuffled = scores.clone();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len);
            shuffled.reverse();
            prop_assert_eq!(rank_blocks(&scores), rank_blocks(&shuffled));
        }
    }
}
