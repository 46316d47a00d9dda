//! Unit-norm embedding vectors and the similarity arithmetic shared by every
//! other module.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// A unit-norm dense vector. Constructed through [`normalize`], so every
/// instance has finite entries and norm 1 up to rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale `v` to unit length.
pub fn normalize(v: &[f64]) -> Result<Embedding> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("vector"));
    }
    let norm = l2_norm(v);
    if norm <= ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(Embedding(v.iter().map(|x| x / norm).collect()))
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(a.len(), b.len()));
    }
    Ok(())
}

/// Dot product of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(&a.0, &b.0)?;
    Ok(dot(&a.0, &b.0).clamp(-1.0, 1.0))
}

/// Squared Euclidean distance between raw vectors.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn sq_euclidean(a: &Embedding, b: &Embedding) -> Result<f64> {
    check_dims(&a.0, &b.0)?;
    Ok(squared_distance(&a.0, &b.0))
}

/// Componentwise mean of raw vectors. The result is not renormalized.
pub fn centroid<V: AsRef<[f64]>>(vs: &[V]) -> Result<Vec<f64>> {
    let first = vs.first().ok_or(Error::EmptyList)?.as_ref();
    let mut acc = vec![0.0; first.len()];
    for v in vs {
        let v = v.as_ref();
        check_dims(first, v)?;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `M[i][j] = cosine_sim(e_i, e_j)`; symmetric with a unit diagonal.
pub fn pairwise_similarity_matrix(es: &[Embedding]) -> Result<Array2<f64>> {
    let n = es.len();
    let mut m = Array2::zeros((n, n));
    if let Some(first) = es.first() {
        for e in es {
            check_dims(&first.0, &e.0)?;
        }
    }
    for i in 0..n {
        m[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let s = dot(&es[i].0, &es[j].0).clamp(-1.0, 1.0);
            m[[i, j]] = s;
            m[[j, i]] = s;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Embedding {
        normalize(v).unwrap()
    }

    #[test]
    fn normalize_scales_three_four() {
        let e = unit(&[3.0, 4.0]);
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((e.as_slice()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_rejects_degenerate_input() {
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::ZeroVector)));
        assert!(matches!(normalize(&[1.0, f64::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(normalize(&[f64::INFINITY]), Err(Error::NonFinite(_))));
        assert!(matches!(normalize(&[]), Err(Error::ZeroVector)));
    }

    #[test]
    fn unit_vector_is_fixed_point() {
        let u = unit(&[0.0, 1.0, 0.0]);
        assert_eq!(unit(u.as_slice()), u);
    }

    #[test]
    fn cosine_and_distance_reference_pairs() {
        let u = unit(&[1.0, 0.0]);
        let v = unit(&[0.0, 1.0]);
        let neg = unit(&[-1.0, 0.0]);
        assert_eq!(cosine_sim(&u, &u).unwrap(), 1.0);
        assert_eq!(cosine_sim(&u, &v).unwrap(), 0.0);
        assert_eq!(cosine_sim(&u, &neg).unwrap(), -1.0);
        assert_eq!(sq_euclidean(&u, &u).unwrap(), 0.0);
        assert_eq!(sq_euclidean(&u, &v).unwrap(), 2.0);
        assert_eq!(sq_euclidean(&u, &neg).unwrap(), 4.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a = unit(&[1.0, 0.0]);
        let b = unit(&[1.0, 0.0, 0.0]);
        assert!(matches!(cosine_sim(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(sq_euclidean(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(
            centroid(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(pairwise_similarity_matrix(&[a, b]).is_err());
    }

    #[test]
    fn centroid_examples() {
        let u = unit(&[0.6, 0.8]);
        assert_eq!(centroid(&[u.clone()]).unwrap(), u.as_slice());
        let neg: Vec<f64> = u.as_slice().iter().map(|x| -x).collect();
        assert_eq!(centroid(&[u.as_slice().to_vec(), neg]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(
            centroid(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.5, 0.5]
        );
        assert!(matches!(centroid::<Vec<f64>>(&[]), Err(Error::EmptyList)));
    }

    #[test]
    fn similarity_matrix_small_cases() {
        let u = unit(&[1.0, 2.0]);
        let m = pairwise_similarity_matrix(&[u.clone(), u]).unwrap();
        assert!(m.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        let m = pairwise_similarity_matrix(&[unit(&[1.0, 0.0]), unit(&[0.0, 1.0])]).unwrap();
        assert_eq!(m, ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]));
    }

    #[test]
    fn similarity_matrix_matches_per_entry_cosine() {
        let es = [
            unit(&[0.3, -1.2, 0.7]),
            unit(&[2.0, 0.1, -0.4]),
            unit(&[-0.5, 0.5, 0.9]),
        ];
        let m = pairwise_similarity_matrix(&es).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let direct = if i == j {
                    1.0
                } else {
                    cosine_sim(&es[i], &es[j]).unwrap()
                };
                assert!((m[[i, j]] - direct).abs() < 1e-15);
            }
        }
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim)
            .prop_filter("non-zero", |v| l2_norm(v) > 1e-6)
    }

    proptest! {
        #[test]
        fn distance_is_linear_in_cosine(a in vec_strategy(8), b in vec_strategy(8)) {
            let (a, b) = (unit(&a), unit(&b));
            let lhs = sq_euclidean(&a, &b).unwrap();
            let rhs = 2.0 - 2.0 * cosine_sim(&a, &b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn normalize_is_idempotent(v in vec_strategy(6)) {
            let once = unit(&v);
            let twice = unit(once.as_slice());
            prop_assert!((once.norm() - 1.0).abs() < 1e-9);
            for (x, y) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn similarity_matrix_is_symmetric_with_unit_diagonal(
            vs in prop::collection::vec(vec_strategy(4), 1..8)
        ) {
            let es: Vec<_> = vs.iter().map(|v| unit(v)).collect();
            let m = pairwise_similarity_matrix(&es).unwrap();
            for i in 0..es.len() {
                prop_assert_eq!(m[[i, i]], 1.0);
                for j in 0..es.len() {
                    prop_assert_eq!(m[[i, j]], m[[j, i]]);
                    prop_assert!((-1.0..=1.0).contains(&m[[i, j]]));
                }
            }
        }
    }
}
