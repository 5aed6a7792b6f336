use mmdit_core::edit::{edit_real, edit_synthetic, initial_noise, EditConfig};
use mmdit_core::flow::{invert, TimeGrid};
use mmdit_core::io::{decode_matrix, encode_matrix};
use mmdit_core::model::{decode_checkpoint, encode_checkpoint};
use mmdit_core::selector::{evaluate_corpus, select_top_k, synth_fixture};
use mmdit_core::tensor::pca_top_k;
use mmdit_core::{Matrix, Model, ModelConfig, SpatialMap};

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// eigenvalues and eigenvectors (as columns), unsorted.
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

#[test]
fn pca_agrees_with_jacobi_oracle() {
    let (n, d, k) = (20, 6, 3);
    // Stretch columns so the spectrum is well separated.
    let data = Matrix::random_normal(n, d, 42);
    let data = Matrix::from_fn(n, d, |r, c| data.get(r, c) * (d - c) as f64);
    let (components, variances) = pca_top_k(&data, k).unwrap();

    let means: Vec<f64> = data.col_sums().iter().map(|s| s / n as f64).collect();
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (0..n).map(|r| (data.get(r, i) - means[i]) * (data.get(r, j) - means[j])).sum::<f64>() / (n - 1) as f64)
                .collect()
        })
        .collect();
    let (vals, vecs) = jacobi(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));

    for c in 0..k {
        let e = order[c];
        assert!((variances[c] - vals[e]).abs() <= 1e-8 * vals[e], "{c}: {} vs {}", variances[c], vals[e]);
        let dot: f64 = (0..d).map(|i| components.get(c, i) * vecs[i][e]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-8, "component {c} alignment {dot}");
    }
}

#[test]
fn checkpoint_reload_reproduces_edits() {
    let model = Model::new(ModelConfig::flux_toy()).unwrap();
    let reloaded = decode_checkpoint(&encode_checkpoint(&model).unwrap()).unwrap();
    let cfg = EditConfig {
        steps: 6,
        theta: Some(0.4),
        local_blend: true,
        ..EditConfig::default()
    };
    let a = edit_synthetic(&model, "a photo of a cat", "a photo of a dog", 5, &cfg).unwrap();
    let b = edit_synthetic(&reloaded, "a photo of a cat", "a photo of a dog", 5, &cfg).unwrap();
    assert!(a.target.bit_eq(&b.target));
    assert_eq!(a.trace, b.trace);
    assert!(decode_matrix(&encode_matrix(&a.target)).unwrap().bit_eq(&a.target));
}

#[test]
fn real_edit_round_trip_on_every_variant() {
    for cfg in [ModelConfig::sd3_toy(), ModelConfig::sd35m_toy(), ModelConfig::flux_toy()] {
        let model = Model::new(cfg).unwrap();
        let x0 = Matrix::random_normal(model.config().n_image(), model.config().width(), 9);
        let steps = 10;
        let null = model.encode_prompt("");
        let traj = invert(&x0, &initial_noise(&model, 3), 1.0, &TimeGrid::inversion(steps).unwrap(), &model.field(&null)).unwrap();
        let x_init = &traj[steps].latent;
        let cfg = EditConfig {
            steps,
            eta_rev: 1.0,
            ..EditConfig::default()
        };
        let out = edit_real(&model, &x0, x_init, "", "a photo of a dog", &cfg).unwrap();
        assert!(out.target.max_abs_diff(&x0) < 1e-8);
    }
}

#[test]
fn perfect_block_wins_selection() {
    let scenes = synth_fixture(3, (8, 8), 10).unwrap();
    let depth = 6;
    // Block 4 sees the truth; the others see flat or inverted maps.
    let predict = |s: &mmdit_core::selector::Scene| {
        Ok((0..depth)
            .map(|b| match b {
                4 => s.gt.mask.clone(),
                1 => SpatialMap::new(8, 8, s.gt.mask.values().iter().map(|v| 1.0 - v).collect()).unwrap(),
                _ => SpatialMap::filled(8, 8, 0.5),
            })
            .collect())
    };
    let ranked = evaluate_corpus(&scenes, depth, None, predict).unwrap();
    assert_eq!(select_top_k(&ranked, 1).unwrap(), vec![4]);
    assert_eq!(ranked.last().unwrap().block, 1);
    let smoothed = evaluate_corpus(&scenes, depth, Some(1.0), predict).unwrap();
    assert_eq!(select_top_k(&smoothed, 1).unwrap(), vec![4]);
}
