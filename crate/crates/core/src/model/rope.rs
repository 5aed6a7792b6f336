//! 1-D rotary position embedding over the joint sequence index.

use crate::tensor::Matrix;

const BASE: f64 = 10_000.0;

/// Rotates consecutive channel pairs of each row by `position * BASE^(-2i/d)`.
/// `positions[r]` is the sequence index of row `r`; `cols` must be even.
pub fn apply_rotary(m: &Matrix, positions: impl IntoIterator<Item = usize>) -> Matrix {
    let d = m.cols();
    assert!(d.is_multiple_of(2), "rotary embedding needs an even head dimension");
    let inv_freq: Vec<f64> = (0..d / 2)
        .map(|i| BASE.powf(-2.0 * i as f64 / d as f64))
        .collect();
    let mut out = m.clone();
    for (r, pos) in positions.into_iter().enumerate() {
        let row = out.row_mut(r);
        for (i, f) in inv_freq.iter().enumerate() {
            let (sin, cos) = (pos as f64 * f).sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * cos - b * sin;
            row[2 * i + 1] = a * sin + b * cos;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use proptest::prelude::*;

    #[test]
    fn position_zero_is_identity() {
        let m = Matrix::random_normal(1, 8, 3);
        assert!(apply_rotary(&m, [0]).bit_eq(&m));
    }

    #[test]
    fn relative_position_property() {
        // <R(p)q, R(p')k> depends only on p - p'.
        let q = Matrix::random_normal(1, 8, 1);
        let k = Matrix::random_normal(1, 8, 2);
        let a = dot(apply_rotary(&q, [7]).row(0), apply_rotary(&k, [3]).row(0));
        let b = dot(apply_rotary(&q, [24]).row(0), apply_rotary(&k, [20]).row(0));
        assert!((a - b).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn preserves_norm(seed in any::<u64>(), pos in 0usize..5000) {
            let m = Matrix::random_normal(3, 8, seed);
            let r = apply_rotary(&m, pos..pos + 3);
            for i in 0..3 {
                let n0 = dot(m.row(i), m.row(i)).sqrt();
                let n1 = dot(r.row(i), r.row(i)).sqrt();
                prop_assert!((n0 - n1).abs() < 1e-12);
            }
        }
    }
}
