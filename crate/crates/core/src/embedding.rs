//! Embedding vectors and the score algebra shared by every stage.
//!
//! Per-view embeddings are unit vectors. A configuration embedding is the
//! plain mean of its per-view embeddings and is deliberately left
//! unnormalized, so its dot product with a query equals the mean of the
//! per-view cosines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default embedding width.
pub const DEFAULT_DIM: usize = 64;

/// Tolerance on `| ‖v‖ − 1 |` for a vector to count as unit-norm.
pub const UNIT_TOL: f64 = 1e-6;

const ZERO_NORM: f64 = 1e-12;

/// A configuration-text similarity. Means of cosines, so `|score| ≤ 1`.
pub type Score = f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOL
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A named unit-norm query embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub name: String,
    pub embedding: Embedding,
}

impl Query {
    /// Builds a query, normalizing `raw` on the way in.
    pub fn from_raw(name: impl Into<String>, raw: &[f64]) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            embedding: normalize(raw)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.embedding.dim()
    }

    pub fn values(&self) -> &[f64] {
        self.embedding.values()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

pub fn normalize(v: &[f64]) -> Result<Embedding> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let n = dot(v, v).sqrt();
    if n <= ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(Embedding(v.iter().map(|x| x / n).collect()))
}

/// Cosine similarity of two unit embeddings, i.e. their dot product.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<Score> {
    a.dot(b)
}

/// Arithmetic mean of per-view unit embeddings. Not renormalized.
pub fn multiview_embed(views: &[Embedding]) -> Result<Embedding> {
    let first = views.first().ok_or(Error::EmptyViewList)?;
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    for v in views {
        check_dims(dim, v.dim())?;
        for (a, x) in acc.iter_mut().zip(v.values()) {
            *a += x;
        }
    }
    let m = views.len() as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    Ok(Embedding(acc))
}

/// Configuration-text score: `config_embedding · query`.
pub fn score(config_embedding: &Embedding, query: &Query) -> Result<Score> {
    config_embedding.dot(&query.embedding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&[3.0, 4.0]).unwrap();
        assert!((n.values()[0] - 0.6).abs() < 1e-15);
        assert!((n.values()[1] - 0.8).abs() < 1e-15);

        let mut e = vec![0.0; 64];
        e[0] = 1.0;
        assert_eq!(normalize(&e).unwrap().values(), &e[..]);

        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::ZeroVector)));
        assert!(matches!(normalize(&[1e-13, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&emb(&[1.0, 0.0]), &emb(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&emb(&[0.6, 0.8]), &emb(&[0.8, 0.6])).unwrap();
        assert!((c - 0.96).abs() < 1e-15);
        assert!(matches!(
            cosine(&emb(&[1.0, 0.0]), &emb(&[1.0, 0.0, 0.0])),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn multiview_examples() {
        assert_eq!(multiview_embed(&[emb(&[1.0, 0.0])]).unwrap().values(), &[1.0, 0.0]);
        assert_eq!(
            multiview_embed(&[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])]).unwrap().values(),
            &[0.5, 0.5]
        );
        let cancel = multiview_embed(&[emb(&[1.0, 0.0]), emb(&[-1.0, 0.0])]).unwrap();
        assert_eq!(cancel.values(), &[0.0, 0.0]);
        assert_eq!(cancel.norm(), 0.0);
        assert!(matches!(multiview_embed(&[]), Err(Error::EmptyViewList)));
        assert!(multiview_embed(&[emb(&[1.0, 0.0]), emb(&[1.0])]).is_err());
    }

    #[test]
    fn score_examples() {
        let q = Query::from_raw("x", &[1.0, 0.0]).unwrap();
        assert_eq!(score(&emb(&[0.5, 0.5]), &q).unwrap(), 0.5);
        assert_eq!(score(&emb(&[0.0, 0.0]), &q).unwrap(), 0.0);
        assert!(score(&emb(&[0.0, 0.0, 1.0]), &q).is_err());
    }

    fn unit_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, dim)
            .prop_filter("nonzero", |v| dot(v, v) > 1e-6)
            .prop_map(|v| normalize(&v).unwrap().into_inner())
    }

    proptest! {
        #[test]
        fn mean_embedding_score_equals_mean_cosine(
            views in prop::collection::vec(unit_vec(8), 1..6),
            q in unit_vec(8),
        ) {
            let views: Vec<Embedding> = views.into_iter().map(|v| emb(&v)).collect();
            let query = Query { name: "q".into(), embedding: emb(&q) };
            let mean = multiview_embed(&views).unwrap();
            let lhs = score(&mean, &query).unwrap();
            let rhs = views.iter().map(|v| cosine(v, &query.embedding).unwrap()).sum::<f64>()
                / views.len() as f64;
            prop_assert!((lhs - rhs).abs() <= 1e-9);
            prop_assert!(mean.norm() <= 1.0 + 1e-12);
        }

        #[test]
        fn cosine_symmetric_and_bounded(a in unit_vec(6), b in unit_vec(6)) {
            let (a, b) = (emb(&a), emb(&b));
            let ab = cosine(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine(&b, &a).unwrap());
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
        }
    }
}
