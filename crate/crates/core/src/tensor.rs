//! Dense symmetric tensors `T = sum_i b_i x_i^{(x)alpha}` and the maps built on them:
//! the contraction `f(w) = T(., w, ..., w)`, matrix slices `M(v)`, the diagonal
//! polynomial `p(w) = T(w, ..., w)`, polarization, and monomial features.
//!
//! Entries are stored fully in row-major order. Every constructor evaluates
//! only the canonical (sorted) multi-index and copies it to all permutations,
//! so permutation symmetry holds bitwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernels::{DenseMatrix, Vector};

/// Highest tensor order accepted by any constructor.
pub const MAX_ORDER: usize = 6;

const UNIT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("tensor order {order} is not supported (max {MAX_ORDER})")]
    UnsupportedOrder { order: usize },
    #[error("operation needs order >= {min}, got {order}")]
    OrderTooLow { order: usize, min: usize },
    #[error("component direction must be unit norm (got {norm})")]
    NotUnit { norm: f64 },
    #[error("component coefficient must be nonzero and finite")]
    BadCoefficient,
    #[error("malformed tensor: {0}")]
    Malformed(String),
}

/// A rank-one term `b x^{(x)alpha}` with unit direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub direction: Vector,
    pub coefficient: f64,
}

impl Component {
    pub fn new(direction: Vector, coefficient: f64) -> Result<Self, TensorError> {
        let norm = direction.norm();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(TensorError::NotUnit { norm });
        }
        if coefficient == 0.0 || !coefficient.is_finite() {
            return Err(TensorError::BadCoefficient);
        }
        Ok(Self {
            direction,
            coefficient,
        })
    }

    /// Normalizes `x` and keeps `b` as given.
    pub fn unit(x: &Vector, coefficient: f64) -> Result<Self, TensorError> {
        let norm = x.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(TensorError::NotUnit { norm });
        }
        Self::new(x / norm, coefficient)
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricTensor {
    order: usize,
    dim: usize,
    entries: Vec<f64>,
}

fn check_order(order: usize) -> Result<(), TensorError> {
    if order == 0 {
        return Err(TensorError::OrderTooLow { order, min: 1 });
    }
    if order > MAX_ORDER {
        return Err(TensorError::UnsupportedOrder { order });
    }
    Ok(())
}

fn check_dim(expected: usize, got: usize) -> Result<(), TensorError> {
    if expected == got {
        Ok(())
    } else {
        Err(TensorError::DimensionMismatch { expected, got })
    }
}

impl SymmetricTensor {
    pub fn zeros(order: usize, dim: usize) -> Result<Self, TensorError> {
        check_order(order)?;
        if dim == 0 {
            return Err(TensorError::Malformed("dim must be >= 1".into()));
        }
        Ok(Self {
            order,
            dim,
            entries: vec![0.0; dim.pow(order as u32)],
        })
    }

    /// Builds a tensor from a function of the multi-index. `f` is evaluated on
    /// non-decreasing multi-indices only; every permutation receives the same value.
    pub fn from_symmetric_fn<F>(order: usize, dim: usize, mut f: F) -> Result<Self, TensorError>
    where
        F: FnMut(&[usize]) -> f64,
    {
        let mut t = Self::zeros(order, dim)?;
        let mut idx = vec![0usize; order];
        let mut sorted = vec![0usize; order];
        for flat in 0..t.entries.len() {
            t.decode(flat, &mut idx);
            sorted.copy_from_slice(&idx);
            sorted.sort_unstable();
            let canon = t.encode(&sorted);
            t.entries[flat] = if canon == flat {
                f(&sorted)
            } else {
                // sorted digits give the lexicographically smallest index, already filled
                t.entries[canon]
            };
        }
        Ok(t)
    }

    /// `T = sum_i b_i x_i^{(x)order}`.
    pub fn from_components(components: &[Component], order: usize) -> Result<Self, TensorError> {
        check_order(order)?;
        let dim = match components.first() {
            Some(c) => c.dim(),
            None => return Err(TensorError::Malformed("no components".into())),
        };
        for c in components {
            check_dim(dim, c.dim())?;
        }
        Self::from_symmetric_fn(order, dim, |idx| {
            components
                .iter()
                .map(|c| c.coefficient * idx.iter().map(|&j| c.direction[j]).product::<f64>())
                .sum()
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Flat row-major entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.order, "index arity");
        self.entries[self.encode(idx)]
    }

    fn encode(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &j| acc * self.dim + j)
    }

    fn decode(&self, mut flat: usize, idx: &mut [usize]) {
        for slot in idx.iter_mut().rev() {
            *slot = flat % self.dim;
            flat /= self.dim;
        }
    }

    /// Contracts the trailing `times` indices against `w`, returning the remaining
    /// `order - times` way array flattened.
    fn contract_trailing(&self, w: &Vector, times: usize) -> Vec<f64> {
        let d = self.dim;
        let mut cur = self.entries.clone();
        for _ in 0..times {
            let next: Vec<f64> = cur
                .chunks_exact(d)
                .map(|row| row.iter().zip(w.iter()).map(|(a, b)| a * b).sum())
                .collect();
            cur = next;
        }
        cur
    }

    /// `f(w) = T(., w, ..., w)`.
    pub fn contract_vector(&self, w: &Vector) -> Result<Vector, TensorError> {
        check_dim(self.dim, w.len())?;
        Ok(Vector::from_vec(self.contract_trailing(w, self.order - 1)))
    }

    /// `M(v) = T(., ., v, ..., v)`, symmetrized.
    pub fn contract_matrix_slice(&self, v: &Vector) -> Result<DenseMatrix, TensorError> {
        if self.order < 2 {
            return Err(TensorError::OrderTooLow {
                order: self.order,
                min: 2,
            });
        }
        check_dim(self.dim, v.len())?;
        let flat = self.contract_trailing(v, self.order - 2);
        let m = DenseMatrix::from_row_slice(self.dim, self.dim, &flat);
        Ok((&m + m.transpose()) * 0.5)
    }

    /// `p(w) = T(w, ..., w)`.
    pub fn diagonal_poly(&self, w: &Vector) -> Result<f64, TensorError> {
        check_dim(self.dim, w.len())?;
        Ok(self.contract_trailing(w, self.order)[0])
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        if self.order != other.order {
            return Err(TensorError::Malformed(format!(
                "order {} vs {}",
                self.order, other.order
            )));
        }
        check_dim(self.dim, other.dim)?;
        Ok(Self {
            order: self.order,
            dim: self.dim,
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            order: self.order,
            dim: self.dim,
            entries: self.entries.iter().map(|a| a * c).collect(),
        }
    }

    /// Largest entrywise absolute difference; `inf` if shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.order != other.order || self.dim != other.dim {
            return f64::INFINITY;
        }
        self.entries
            .iter()
            .zip(&other.entries)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0_f64, |m, a| m.max(a.abs()))
    }

    pub fn to_json(&self) -> TensorJson {
        TensorJson {
            order: self.order,
            dim: self.dim,
            entries: self.entries.clone(),
            index_order: ROW_MAJOR.to_string(),
        }
    }

    /// Validates shape, finiteness and permutation symmetry (to 1e-12 relative).
    pub fn from_json(json: &TensorJson) -> Result<Self, TensorError> {
        check_order(json.order)?;
        if json.index_order != ROW_MAJOR {
            return Err(TensorError::Malformed(format!(
                "unknown index_order {:?}",
                json.index_order
            )));
        }
        if json.dim == 0 {
            return Err(TensorError::Malformed("dim must be >= 1".into()));
        }
        check_dim(json.dim.pow(json.order as u32), json.entries.len())?;
        if !json.entries.iter().all(|v| v.is_finite()) {
            return Err(TensorError::Malformed("non-finite entry".into()));
        }
        let raw = Self {
            order: json.order,
            dim: json.dim,
            entries: json.entries.clone(),
        };
        let sym = Self::from_symmetric_fn(raw.order, raw.dim, |idx| raw.get(idx))?;
        let tol = 1e-12 * raw.max_abs().max(1.0);
        if raw.max_abs_diff(&sym) > tol {
            return Err(TensorError::Malformed("entries are not symmetric".into()));
        }
        Ok(raw)
    }
}

const ROW_MAJOR: &str = "row-major";

/// On-disk form of a [`SymmetricTensor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorJson {
    pub order: usize,
    pub dim: usize,
    pub entries: Vec<f64>,
    pub index_order: String,
}

/// Symmetric multilinear form from its diagonal polynomial:
/// `T(u_1..u_a) = 1/(a! 2^a) sum_{eps} (prod eps) p(sum eps_t u_t)`.
pub fn polarize<P>(p: P, order: usize, us: &[Vector]) -> Result<f64, TensorError>
where
    P: Fn(&Vector) -> f64,
{
    check_order(order)?;
    check_dim(order, us.len())?;
    let dim = us[0].len();
    for u in us {
        check_dim(dim, u.len())?;
    }
    let mut total = 0.0;
    let mut arg = Vector::zeros(dim);
    for mask in 0u32..(1 << order) {
        arg.fill(0.0);
        let mut sign = 1.0;
        for (t, u) in us.iter().enumerate() {
            if mask & (1 << t) != 0 {
                arg -= u;
                sign = -sign;
            } else {
                arg += u;
            }
        }
        total += sign * p(&arg);
    }
    let fact: f64 = (1..=order).map(|k| k as f64).product();
    Ok(total / (fact * (1u64 << order) as f64))
}

/// Canonical graded-lex list of exponent vectors of a fixed total degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndexing {
    degree: usize,
    dim: usize,
    monomials: Vec<Vec<usize>>,
}

impl FeatureIndexing {
    /// Exponent vectors of total degree `degree` in `dim` variables, ordered with
    /// the exponent of the first variable descending, then the second, and so on.
    pub fn new(dim: usize, degree: usize) -> Self {
        let mut monomials = Vec::new();
        let mut cur = vec![0usize; dim];
        fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if pos + 1 == cur.len() {
                cur[pos] = left;
                out.push(cur.clone());
                return;
            }
            for e in (0..=left).rev() {
                cur[pos] = e;
                rec(pos + 1, left - e, cur, out);
            }
            cur[pos] = 0;
        }
        if dim > 0 {
            rec(0, degree, &mut cur, &mut monomials);
        }
        Self {
            degree,
            dim,
            monomials,
        }
    }

    /// Indexing for the contraction map of an order-`alpha` tensor (degree `alpha - 1`).
    pub fn for_order(dim: usize, alpha: usize) -> Self {
        Self::new(dim, alpha.saturating_sub(1))
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `N = C(d + degree - 1, degree)`.
    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn monomials(&self) -> &[Vec<usize>] {
        &self.monomials
    }

    /// `degree! / prod_j e_j!` for each monomial.
    pub fn multinomial_weights(&self) -> Vec<f64> {
        let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
        let top = fact(self.degree);
        self.monomials
            .iter()
            .map(|e| top / e.iter().map(|&k| fact(k)).product::<f64>())
            .collect()
    }

    /// Raw monomials `prod_j w_j^{e_j}`.
    pub fn monomial_features(&self, w: &Vector) -> Result<Vector, TensorError> {
        check_dim(self.dim, w.len())?;
        Ok(Vector::from_iterator(
            self.len(),
            self.monomials.iter().map(|e| {
                e.iter()
                    .zip(w.iter())
                    .map(|(&k, &x)| x.powi(k as i32))
                    .product::<f64>()
            }),
        ))
    }

    /// Monomials scaled by the square root of their multinomial weight, so that
    /// `<phi(u), phi(v)> = (u . v)^degree`.
    pub fn weighted_features(&self, w: &Vector) -> Result<Vector, TensorError> {
        let mut phi = self.monomial_features(w)?;
        for (p, c) in phi.iter_mut().zip(self.multinomial_weights()) {
            *p *= c.sqrt();
        }
        Ok(phi)
    }
}

/// Binomial coefficient as a count.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn e(d: usize, i: usize) -> Vector {
        let mut v = Vector::zeros(d);
        v[i] = 1.0;
        v
    }

    fn gauss(rng: &mut ChaCha8Rng, d: usize) -> Vector {
        Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
    }

    fn random_components(rng: &mut ChaCha8Rng, r: usize, d: usize) -> Vec<Component> {
        (0..r)
            .map(|_| Component::unit(&gauss(rng, d), rng.random_range(0.5..1.5)).unwrap())
            .collect()
    }

    fn closed_form_f(cs: &[Component], w: &Vector, alpha: usize) -> Vector {
        let mut out = Vector::zeros(w.len());
        for c in cs {
            out += &c.direction * (c.coefficient * c.direction.dot(w).powi(alpha as i32 - 1));
        }
        out
    }

    #[test]
    fn single_coordinate_component() {
        let t = SymmetricTensor::from_components(&[Component::new(e(3, 0), 1.0).unwrap()], 3).unwrap();
        assert_eq!(t.get(&[0, 0, 0]), 1.0);
        assert_eq!(t.entries().iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn orthogonal_coordinate_components() {
        let cs = [Component::new(e(2, 0), 2.0).unwrap(), Component::new(e(2, 1), -1.0).unwrap()];
        let t = SymmetricTensor::from_components(&cs, 3).unwrap();
        assert_eq!(t.get(&[0, 0, 0]), 2.0);
        assert_eq!(t.get(&[1, 1, 1]), -1.0);
        assert_eq!(t.get(&[0, 1, 1]), 0.0);
        assert_eq!(t.get(&[1, 0, 0]), 0.0);
    }

    #[test]
    fn diagonal_poly_matches_component_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cs = random_components(&mut rng, 2, 3);
        let t = SymmetricTensor::from_components(&cs, 3).unwrap();
        for _ in 0..10 {
            let w = gauss(&mut rng, 3);
            let want: f64 = cs.iter().map(|c| c.coefficient * c.direction.dot(&w).powi(3)).sum();
            assert!((t.diagonal_poly(&w).unwrap() - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_mismatched_dims() {
        let cs = [Component::new(e(2, 0), 1.0).unwrap(), Component::new(e(3, 0), 1.0).unwrap()];
        assert!(matches!(
            SymmetricTensor::from_components(&cs, 3),
            Err(TensorError::DimensionMismatch { .. })
        ));
        let t = SymmetricTensor::from_components(&cs[..1], 3).unwrap();
        assert!(t.contract_vector(&Vector::zeros(3)).is_err());
    }

    #[test]
    fn rejects_high_order() {
        assert_eq!(
            SymmetricTensor::zeros(7, 2).unwrap_err(),
            TensorError::UnsupportedOrder { order: 7 }
        );
    }

    #[test]
    fn component_requires_unit_norm() {
        assert!(matches!(
            Component::new(Vector::from_vec(vec![2.0, 0.0]), 1.0),
            Err(TensorError::NotUnit { .. })
        ));
        assert_eq!(
            Component::new(e(2, 0), 0.0).unwrap_err(),
            TensorError::BadCoefficient
        );
    }

    #[test]
    fn contract_vector_cases() {
        let t = SymmetricTensor::from_components(&[Component::new(e(3, 0), 1.0).unwrap()], 3).unwrap();
        assert_eq!(t.contract_vector(&e(3, 0)).unwrap(), e(3, 0));
        assert_eq!(t.contract_vector(&e(3, 1)).unwrap(), Vector::zeros(3));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for alpha in 2..=5 {
            let cs = random_components(&mut rng, 3, 4);
            let t = SymmetricTensor::from_components(&cs, alpha).unwrap();
            let w = gauss(&mut rng, 4);
            let want = closed_form_f(&cs, &w, alpha);
            assert!((t.contract_vector(&w).unwrap() - &want).norm() <= 1e-12 * want.norm().max(1.0));
        }
    }

    #[test]
    fn matrix_slice_cases() {
        let t = SymmetricTensor::from_components(&[Component::new(e(3, 0), 1.0).unwrap()], 3).unwrap();
        assert_eq!(t.contract_matrix_slice(&e(3, 0)).unwrap(), e(3, 0) * e(3, 0).transpose());
        assert_eq!(t.contract_matrix_slice(&e(3, 1)).unwrap(), DenseMatrix::zeros(3, 3));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cs = random_components(&mut rng, 2, 3);
        let t2 = SymmetricTensor::from_components(&cs, 2).unwrap();
        let a = t2.contract_matrix_slice(&gauss(&mut rng, 3)).unwrap();
        let b = t2.contract_matrix_slice(&gauss(&mut rng, 3)).unwrap();
        assert_eq!(a, b);

        let t4 = SymmetricTensor::from_components(&cs, 4).unwrap();
        let v = gauss(&mut rng, 3);
        let mut want = DenseMatrix::zeros(3, 3);
        for c in &cs {
            want += &c.direction * c.direction.transpose() * (c.coefficient * c.direction.dot(&v).powi(2));
        }
        assert!((t4.contract_matrix_slice(&v).unwrap() - want).abs().max() <= 1e-12);
    }

    #[test]
    fn diagonal_poly_cases() {
        let t = SymmetricTensor::from_components(&[Component::new(e(3, 0), 1.0).unwrap()], 3).unwrap();
        assert_eq!(t.diagonal_poly(&Vector::from_vec(vec![2.0, 0.0, 0.0])).unwrap(), 8.0);
        assert_eq!(t.diagonal_poly(&Vector::zeros(3)).unwrap(), 0.0);
    }

    #[test]
    fn polarize_cases() {
        let p = |w: &Vector| w[0] * w[1];
        let v = polarize(p, 2, &[e(2, 0), e(2, 1)]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);

        let t = SymmetricTensor::from_components(&[Component::new(e(3, 0), 1.0).unwrap()], 3).unwrap();
        let v = polarize(|w| t.diagonal_poly(w).unwrap(), 3, &[e(3, 0), e(3, 0), e(3, 0)]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn polarization_reconstructs_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for alpha in 2..=4 {
            let d = 4;
            let t = SymmetricTensor::from_components(&random_components(&mut rng, 3, d), alpha).unwrap();
            let basis: Vec<Vector> = (0..d).map(|i| e(d, i)).collect();
            let rebuilt = SymmetricTensor::from_symmetric_fn(alpha, d, |idx| {
                let us: Vec<Vector> = idx.iter().map(|&j| basis[j].clone()).collect();
                polarize(|w| t.diagonal_poly(w).unwrap(), alpha, &us).unwrap()
            })
            .unwrap();
            assert!(rebuilt.max_abs_diff(&t) <= 1e-10, "alpha {alpha}");
        }
    }

    #[test]
    fn feature_indexing_order_and_size() {
        let fi = FeatureIndexing::new(2, 2);
        assert_eq!(fi.monomials(), &[vec![2, 0], vec![1, 1], vec![0, 2]]);
        assert_eq!(
            fi.monomial_features(&Vector::from_vec(vec![1.0, 1.0])).unwrap(),
            Vector::from_vec(vec![1.0, 1.0, 1.0])
        );
        assert_eq!(FeatureIndexing::for_order(2, 3).len(), 3);
        assert_eq!(FeatureIndexing::for_order(3, 3).len(), 6);
        assert_eq!(FeatureIndexing::for_order(8, 3).len(), 36);
        assert_eq!(binomial(8 + 1, 2), 36);
        assert!(FeatureIndexing::new(3, 2).monomial_features(&Vector::zeros(2)).is_err());
    }

    #[test]
    fn weighted_features_reproduce_polynomial_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for degree in 1..=4 {
            let fi = FeatureIndexing::new(4, degree);
            assert_eq!(fi.len(), binomial(4 + degree - 1, degree));
            let u = gauss(&mut rng, 4);
            let v = gauss(&mut rng, 4);
            let lhs = fi.weighted_features(&u).unwrap().dot(&fi.weighted_features(&v).unwrap());
            let rhs = u.dot(&v).powi(degree as i32);
            assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = SymmetricTensor::from_components(&random_components(&mut rng, 2, 3), 3).unwrap();
        let text = serde_json::to_string(&t.to_json()).unwrap();
        let back = SymmetricTensor::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, t);

        let mut bad = t.to_json();
        bad.entries[1] += 1.0;
        assert!(matches!(SymmetricTensor::from_json(&bad), Err(TensorError::Malformed(_))));
        let mut short = t.to_json();
        short.entries.pop();
        assert!(SymmetricTensor::from_json(&short).is_err());
    }

    fn permute(idx: &[usize], perm_seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        let mut out = idx.to_vec();
        for i in (1..out.len()).rev() {
            let j = rng.random_range(0..=i);
            out.swap(i, j);
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn entries_are_permutation_invariant(seed in 0u64..10_000, alpha in 1usize..=4, d in 1usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = SymmetricTensor::from_components(&random_components(&mut rng, 3, d), alpha).unwrap();
            for _ in 0..20 {
                let idx: Vec<usize> = (0..alpha).map(|_| rng.random_range(0..d)).collect();
                let p = permute(&idx, rng.random());
                prop_assert_eq!(t.get(&idx).to_bits(), t.get(&p).to_bits());
            }
        }

        #[test]
        fn contraction_is_homogeneous(seed in 0u64..10_000, alpha in 2usize..=5, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = SymmetricTensor::from_components(&random_components(&mut rng, 2, 4), alpha).unwrap();
            let w = gauss(&mut rng, 4);
            let lhs = t.contract_vector(&(&w * c)).unwrap();
            let rhs = t.contract_vector(&w).unwrap() * c.powi(alpha as i32 - 1);
            prop_assert!((&lhs - &rhs).norm() <= 1e-10 * rhs.norm().max(1.0));
        }

        #[test]
        fn slices_are_linear(seed in 0u64..10_000, alpha in 2usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t1 = SymmetricTensor::from_components(&random_components(&mut rng, 2, 4), alpha).unwrap();
            let t2 = SymmetricTensor::from_components(&random_components(&mut rng, 2, 4), alpha).unwrap();
            let v = gauss(&mut rng, 4);
            let lhs = t1.add(&t2).unwrap().contract_matrix_slice(&v).unwrap();
            let rhs = t1.contract_matrix_slice(&v).unwrap() + t2.contract_matrix_slice(&v).unwrap();
            prop_assert!((lhs - rhs).abs().max() <= 1e-12 * (1.0 + v.norm().powi(alpha as i32)));
        }

        #[test]
        fn diagonal_poly_is_inner_product_with_f(seed in 0u64..10_000, alpha in 1usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = SymmetricTensor::from_components(&random_components(&mut rng, 3, 4), alpha).unwrap();
            let w = gauss(&mut rng, 4);
            let p = t.diagonal_poly(&w).unwrap();
            let q = w.dot(&t.contract_vector(&w).unwrap());
            prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0) * 10.0);
        }

        #[test]
        fn polarization_round_trip(seed in 0u64..10_000, alpha in 2usize..=4, d in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = SymmetricTensor::from_components(&random_components(&mut rng, 2, d), alpha).unwrap();
            let idx: Vec<usize> = (0..alpha).map(|_| rng.random_range(0..d)).collect();
            let us: Vec<Vector> = idx.iter().map(|&j| e(d, j)).collect();
            let v = polarize(|w| t.diagonal_poly(w).unwrap(), alpha, &us).unwrap();
            prop_assert!((v - t.get(&idx)).abs() <= 1e-10);
        }
    }
}
