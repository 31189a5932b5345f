//! Rotary position encoding and its behavior-scaled variant, as plain
//! functions over one head's vector. The encoder applies the same maps to
//! whole batches through [`crate::graph::Graph::rope`].

use std::rc::Rc;

/// `θ_j = base^(-2j/dk)` for `j < dk/2`.
pub fn rope_frequencies(dk: usize, base: f64) -> Vec<f64> {
    assert!(dk % 2 == 0 && dk > 0, "rotary dimension must be even");
    (0..dk / 2)
        .map(|j| base.powf(-2.0 * j as f64 / dk as f64))
        .collect()
}

/// Rotates each pair `(x[2j], x[2j+1])` by `m·θ_j`.
pub fn rope_transform(x: &[f64], m: usize, base: f64) -> Vec<f64> {
    rotate_with(x, m, &rope_frequencies(x.len(), base))
}

/// [`rope_transform`] with explicit frequencies.
pub fn rotate_with(x: &[f64], m: usize, theta: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), 2 * theta.len());
    let mut out = x.to_vec();
    for (j, &t) in theta.iter().enumerate() {
        let (si, co) = (m as f64 * t).sin_cos();
        let (a, b) = (x[2 * j], x[2 * j + 1]);
        out[2 * j] = a * co - b * si;
        out[2 * j + 1] = a * si + b * co;
    }
    out
}

/// Rotation followed by scaling both members of pair `j` by `scales[j]`.
pub fn barope_transform(x: &[f64], scales: &[f64], m: usize, base: f64) -> Vec<f64> {
    assert_eq!(scales.len() * 2, x.len());
    let mut out = rope_transform(x, m, base);
    for (j, &s) in scales.iter().enumerate() {
        out[2 * j] *= s;
        out[2 * j + 1] *= s;
    }
    out
}

/// Cosine/sine tables for `rows` rows of width `d` split into heads of width
/// `dk`, where row `r` sits at position `r % len`. Layout matches
/// [`crate::graph::Graph::rope`].
pub(crate) fn rope_tables(rows: usize, len: usize, d: usize, dk: usize, base: f64) -> (Rc<Vec<f64>>, Rc<Vec<f64>>) {
    let theta = rope_frequencies(dk, base);
    let half = d / 2;
    let mut per_pos_cos = vec![0.0; len * half];
    let mut per_pos_sin = vec![0.0; len * half];
    for m in 0..len {
        for p in 0..half {
            let (s, c) = (m as f64 * theta[p % (dk / 2)]).sin_cos();
            per_pos_cos[m * half + p] = c;
            per_pos_sin[m * half + p] = s;
        }
    }
    let mut cos = Vec::with_capacity(rows * half);
    let mut sin = Vec::with_capacity(rows * half);
    for r in 0..rows {
        let m = r % len;
        cos.extend_from_slice(&per_pos_cos[m * half..(m + 1) * half]);
        sin.extend_from_slice(&per_pos_sin[m * half..(m + 1) * half]);
    }
    (Rc::new(cos), Rc::new(sin))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_position_is_identity() {
        let x = [0.3, -1.2, 2.0, 0.5];
        assert_eq!(rope_transform(&x, 0, 10000.0), x.to_vec());
    }

    #[test]
    fn unit_frequency_rotation() {
        let y = rotate_with(&[1.0, 0.0], 1, &[1.0]);
        assert!((y[0] - 1f64.cos()).abs() < 1e-15);
        assert!((y[1] - 1f64.sin()).abs() < 1e-15);
        assert!((y[0] - 0.54030).abs() < 1e-5 && (y[1] - 0.84147).abs() < 1e-5);
    }

    #[test]
    fn unit_scales_reduce_to_rope() {
        let x = [0.3, -1.2, 2.0, 0.5, 1.0, 1.0];
        assert_eq!(barope_transform(&x, &[1.0; 3], 7, 100.0), rope_transform(&x, 7, 100.0));
    }

    #[test]
    fn uniform_scale_multiplies_logit_by_its_square() {
        let (q, k) = ([0.3, -1.2, 2.0, 0.5], [1.1, 0.4, -0.7, 0.9]);
        let base = rope_transform(&q, 3, 10000.0);
        let basek = rope_transform(&k, 8, 10000.0);
        let c = 1.7;
        let scaled = dot(
            &barope_transform(&q, &[c, c], 3, 10000.0),
            &barope_transform(&k, &[c, c], 8, 10000.0),
        );
        assert!((scaled - c * c * dot(&base, &basek)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rotation_preserves_norm(x in prop::collection::vec(-5.0f64..5.0, 8), m in 0usize..500) {
            let y = rope_transform(&x, m, 10000.0);
            prop_assert!((dot(&x, &x).sqrt() - dot(&y, &y).sqrt()).abs() < 1e-12);
        }

        #[test]
        fn scaled_logit_depends_on_offset_only(
            q in prop::collection::vec(-2.0f64..2.0, 8),
            k in prop::collection::vec(-2.0f64..2.0, 8),
            sa in prop::collection::vec(0.1f64..3.0, 4),
            sb in prop::collection::vec(0.1f64..3.0, 4),
            m in 0usize..200, n in 0usize..200, s in 0usize..200,
        ) {
            let a = dot(&barope_transform(&q, &sa, m, 10000.0), &barope_transform(&k, &sb, n, 10000.0));
            let b = dot(&barope_transform(&q, &sa, m + s, 10000.0), &barope_transform(&k, &sb, n + s, 10000.0));
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
