//! Exact cosine retrieval over unit-norm embeddings.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{dot, l2_norm, Mat};

/// Unit-norm vector in the joint embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding<T>(Vec<T>);

/// Allowed deviation of an embedding norm from one.
pub fn unit_tolerance<T: Scalar>() -> T {
    lit::<T>(1e-6).max(T::epsilon() * lit(100.0))
}

impl<T: Scalar> Embedding<T> {
    /// Scales `v` to unit length.
    pub fn normalize(mut v: Vec<T>) -> Result<Self> {
        let n = l2_norm(&v);
        if n <= T::zero() || !n.is_finite() {
            return Err(Error::Numeric {
                step: 0,
                message: format!("cannot normalize vector of norm {n}"),
            });
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(Self(v))
    }

    /// Wraps `v`, which must already be unit length.
    pub fn try_new(v: Vec<T>) -> Result<Self> {
        let n = l2_norm(&v);
        if (n - T::one()).abs() > unit_tolerance() {
            return Err(Error::Contract(format!("embedding norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    /// Wraps `v` without checking its norm. Callers guarantee unit length.
    pub(crate) fn new_unchecked(v: Vec<T>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.0)
    }
}

/// Cosine similarity of two unit vectors (their dot product).
pub fn cosine_sim<T: Scalar>(u: &Embedding<T>, v: &Embedding<T>) -> Result<T> {
    if u.dim() != v.dim() {
        return Err(Error::Input(format!("dimension mismatch {} vs {}", u.dim(), v.dim())));
    }
    for e in [u, v] {
        let n = e.norm();
        if (n - T::one()).abs() > unit_tolerance() {
            return Err(Error::Contract(format!("cosine_sim input has norm {n}")));
        }
    }
    Ok(dot(u.as_slice(), v.as_slice()))
}

/// Immutable keyed collection of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex<T> {
    keys: Vec<usize>,
    rows: Mat<T>,
}

impl<T: Scalar> EmbeddingIndex<T> {
    pub fn new(entries: Vec<(usize, Embedding<T>)>) -> Result<Self> {
        let dim = entries
            .first()
            .map(|(_, e)| e.dim())
            .ok_or_else(|| Error::Input("empty index".into()))?;
        let mut keys = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dim);
        for (k, e) in entries {
            if e.dim() != dim {
                return Err(Error::Input("index embeddings differ in dimension".into()));
            }
            if (e.norm() - T::one()).abs() > unit_tolerance() {
                return Err(Error::Contract(format!("index entry {k} is not unit norm")));
            }
            keys.push(k);
            data.extend_from_slice(e.as_slice());
        }
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("duplicate keys in index".into()));
        }
        let rows = Mat::from_vec(keys.len(), dim, data);
        Ok(Self { keys, rows })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn keys(&self) -> &[usize] {
        &self.keys
    }

    pub fn position(&self, key: usize) -> Option<usize> {
        self.keys.iter().position(|&k| k == key)
    }

    pub fn get(&self, key: usize) -> Option<Embedding<T>> {
        self.position(key)
            .map(|i| Embedding::new_unchecked(self.rows.row(i).to_vec()))
    }

    /// The `k` most similar entries, by descending similarity then ascending key.
    pub fn top_k(&self, query: &Embedding<T>, k: usize) -> Result<Vec<(usize, T)>> {
        if k == 0 || k > self.len() {
            return Err(Error::Input(format!("k = {k} outside 1..={}", self.len())));
        }
        if query.dim() != self.dim() {
            return Err(Error::Input(format!(
                "query dimension {} vs index {}",
                query.dim(),
                self.dim()
            )));
        }
        let mut scored: Vec<(usize, T)> = (0..self.len())
            .map(|i| (self.keys[i], dot(self.rows.row(i), query.as_slice())))
            .collect();
        let order = |a: &(usize, T), b: &(usize, T)| -> Ordering {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored)
    }
}

/// Free-function form of [`EmbeddingIndex::top_k`].
pub fn top_k<T: Scalar>(query: &Embedding<T>, index: &EmbeddingIndex<T>, k: usize) -> Result<Vec<(usize, T)>> {
    index.top_k(query, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> Embedding<f64> {
        Embedding::try_new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_fixtures() {
        let u = emb(&[1.0, 0.0]);
        assert_eq!(cosine_sim(&u, &u).unwrap(), 1.0);
        assert_eq!(cosine_sim(&u, &emb(&[0.0, 1.0])).unwrap(), 0.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = cosine_sim(&u, &emb(&[h, h])).unwrap();
        assert!((s - h).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_non_unit_inputs() {
        let u = emb(&[1.0, 0.0]);
        let bad = Embedding::new_unchecked(vec![2.0, 0.0]);
        assert!(matches!(cosine_sim(&u, &bad), Err(Error::Contract(_))));
        assert!(Embedding::try_new(vec![0.5, 0.5]).is_err());
    }

    fn fixture() -> EmbeddingIndex<f64> {
        EmbeddingIndex::new(vec![
            (0, emb(&[1.0, 0.0])),
            (1, emb(&[0.0, 1.0])),
            (2, emb(&[0.6, 0.8])),
        ])
        .unwrap()
    }

    #[test]
    fn top_k_fixture() {
        let got = fixture().top_k(&emb(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0], (0, 1.0));
        assert_eq!(got[1].0, 2);
        assert!((got[1].1 - 0.6).abs() < 1e-15);
    }

    #[test]
    fn top_k_exhaustive_returns_everything() {
        let got = fixture().top_k(&emb(&[0.0, 1.0]), 3).unwrap();
        let keys: Vec<usize> = got.iter().map(|p| p.0).collect();
        assert_eq!(keys, vec![1, 2, 0]);
    }

    #[test]
    fn top_k_breaks_ties_by_key() {
        let index = EmbeddingIndex::new(vec![(7, emb(&[0.0, 1.0])), (3, emb(&[0.0, 1.0])), (5, emb(&[1.0, 0.0]))]).unwrap();
        let got = index.top_k(&emb(&[0.0, 1.0]), 2).unwrap();
        assert_eq!(got.iter().map(|p| p.0).collect::<Vec<_>>(), vec![3, 7]);
    }

    #[test]
    fn top_k_rejects_bad_k() {
        let q = emb(&[1.0, 0.0]);
        assert!(matches!(fixture().top_k(&q, 0), Err(Error::Input(_))));
        assert!(matches!(fixture().top_k(&q, 4), Err(Error::Input(_))));
    }

    #[test]
    fn index_rejects_duplicate_keys() {
        let r = EmbeddingIndex::new(vec![(1, emb(&[1.0, 0.0])), (1, emb(&[0.0, 1.0]))]);
        assert!(r.is_err());
    }

    fn unit_vec(raw: Vec<f64>) -> Embedding<f64> {
        Embedding::normalize(raw).unwrap()
    }

    proptest! {
        #[test]
        fn query_present_in_index_ranks_first(
            raws in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..40),
            pick in any::<prop::sample::Index>(),
        ) {
            let entries: Vec<(usize, Embedding<f64>)> = raws
                .into_iter()
                .filter(|v| l2_norm(v) > 1e-3)
                .enumerate()
                .map(|(i, v)| (i * 3, unit_vec(v)))
                .collect();
            prop_assume!(!entries.is_empty());
            let (key, q) = entries[pick.index(entries.len())].clone();
            let index = EmbeddingIndex::new(entries).unwrap();
            let top = index.top_k(&q, 1).unwrap();
            prop_assert!((top[0].1 - 1.0).abs() < 1e-12);
            // An exact duplicate with a smaller key may take the top slot.
            prop_assert!(top[0].0 <= key);
        }

        #[test]
        fn entry_order_does_not_matter(
            raws in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 3..30),
            q in prop::collection::vec(-1.0f64..1.0, 3),
            seed in any::<u64>(),
        ) {
            prop_assume!(l2_norm(&q) > 1e-3 && raws.iter().all(|v| l2_norm(v) > 1e-3));
            let entries: Vec<(usize, Embedding<f64>)> =
                raws.into_iter().enumerate().map(|(i, v)| (i, unit_vec(v))).collect();
            let mut shuffled = entries.clone();
            let n = shuffled.len();
            for i in 0..n {
                let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) % n as u64) as usize;
                shuffled.swap(i, j);
            }
            let q = unit_vec(q);
            let k = n / 2;
            let a = EmbeddingIndex::new(entries).unwrap().top_k(&q, k).unwrap();
            let b = EmbeddingIndex::new(shuffled).unwrap().top_k(&q, k).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
