//! Dense vector kernels over `&[f64]` slices.

/// Dot product `u . v`.
///
/// # Panics
/// Panics when the lengths differ.
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "dot: length mismatch {} vs {}", u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Returns `alpha * u + v` as a fresh vector.
///
/// # Panics
/// Panics when the lengths differ.
pub fn axpy(alpha: f64, u: &[f64], v: &[f64]) -> Vec<f64> {
    assert_eq!(u.len(), v.len(), "axpy: length mismatch {} vs {}", u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| alpha * a + b).collect()
}

/// Euclidean norm `||v||_2`.
pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_by_hand() {
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]), 11.0);
    }

    #[test]
    fn dot_with_zero_vector() {
        assert_eq!(dot(&[5.0, -2.0, 7.5], &[0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn dot_orthogonal_unit_vectors() {
        assert_eq!(dot(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    #[should_panic(expected = "dot: length mismatch")]
    fn dot_length_mismatch_panics() {
        dot(&[1.0], &[1.0, 2.0]);
    }

    #[test]
    fn axpy_by_hand() {
        assert_eq!(axpy(0.5, &[2.0, 2.0], &[1.0, 1.0]), vec![2.0, 2.0]);
    }

    #[test]
    fn axpy_alpha_zero_copies_v() {
        assert_eq!(axpy(0.0, &[9.0, 9.0], &[1.0, 2.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn axpy_empty() {
        assert_eq!(axpy(3.0, &[], &[]), Vec::<f64>::new());
    }

    #[test]
    fn norm2_by_hand() {
        assert_eq!(norm2(&[3.0, 4.0]), 5.0);
        assert_eq!(norm2(&[]), 0.0);
        assert_eq!(norm2(&[0.0, 0.0]), 0.0);
        assert_eq!(norm2(&[-2.0]), 2.0);
    }
}
