//! Dense row-major `f64` tensors and the handful of kernels the toy model needs.
//!
//! Every operation is a pure function with a fixed summation order, so the
//! same input always produces bitwise-identical output.

use crate::error::{Error, Result};

/// Symmetry tolerance accepted by [`top_eigvecs`].
pub const SYMMETRY_TOL: f64 = 1e-9;
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 1000;
/// Number of repeated squarings applied before power iteration. Iterating on
/// `P^(2^k)` separates close eigenvalues much faster than `P` itself.
const POWER_SQUARINGS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::Dimension {
                    op: "Tensor::from_rows",
                    left: vec![n],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![m, n], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let n = self.shape[1];
        self.data[i * n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            other => Err(Error::Dimension {
                op,
                left: other.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    fn require_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.require_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.require_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds `bias` (length = last extent) to every row.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Tensor> {
        let c = self.cols();
        if bias.len() != c {
            return Err(Error::Dimension {
                op: "add_row_vector",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Standard matrix product. For each output element the products are summed
/// left to right over the inner index.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                *o += aip * bpj;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (_, n) = a.require_matrix("softmax_rows")?;
    let mut out = a.clone();
    if n == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Normalizes each vector along the last axis to zero mean and unit variance
/// (`eps` added to the variance), then applies `gamma * x + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gamma.shape.clone(),
        });
    }
    let mut out = x.clone();
    if c == 0 {
        return Ok(out);
    }
    let inv_c = 1.0 / c as f64;
    for row in out.data.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() * inv_c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_c;
        let denom = (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            let centered = *v - mean;
            // A constant vector with eps = 0 normalizes to zero, not NaN.
            let normed = if denom > 0.0 { centered / denom } else { 0.0 };
            *v = normed * g + b;
        }
    }
    Ok(out)
}

/// Eigenvectors of the `k` largest eigenvalues of a symmetric matrix, as the
/// columns of a `C x k` tensor.
///
/// Uses deflated power iteration on a Gershgorin-shifted copy of the matrix
/// (so "largest" means algebraically largest even for indefinite input). Each
/// vector is re-orthogonalized against the previous ones on every iteration
/// and its largest-magnitude component is made positive. When eigenvalues
/// repeat, any orthonormal basis of the eigenspace may be returned.
pub fn top_eigvecs(cov: &Tensor, k: usize) -> Result<Tensor> {
    let (c, c2) = cov.require_matrix("top_eigvecs")?;
    if c != c2 {
        return Err(Error::Dimension {
            op: "top_eigvecs",
            left: cov.shape.clone(),
            right: vec![c, c],
        });
    }
    if k > c {
        return Err(Error::Contract(format!(
            "requested {k} eigenvectors of a {c}x{c} matrix"
        )));
    }
    for i in 0..c {
        for j in (i + 1)..c {
            if (cov.get(i, j) - cov.get(j, i)).abs() > SYMMETRY_TOL {
                return Err(Error::Contract(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    cov.get(i, j),
                    cov.get(j, i)
                )));
            }
        }
    }

    let shift = (0..c)
        .map(|i| {
            let off: f64 = (0..c).filter(|&j| j != i).map(|j| cov.get(i, j).abs()).sum();
            off - cov.get(i, i)
        })
        .fold(0.0_f64, f64::max);
    let mut deflated = cov.clone();
    for i in 0..c {
        deflated.data[i * c + i] += shift;
    }

    let mut found: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let powered = repeated_square(&deflated)?;
        let mut v = start_vector(c, &found);
        for _ in 0..POWER_MAX_ITERS {
            let mut w = mat_vec(&powered, &v);
            orthogonalize(&mut w, &found);
            let norm = dot(&w, &w).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let diff = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            v = w;
            if diff < POWER_TOL {
                break;
            }
        }
        orthogonalize(&mut v, &found);
        normalize(&mut v);
        fix_sign(&mut v);

        let lambda = dot(&v, &mat_vec(&deflated, &v));
        for i in 0..c {
            for j in 0..c {
                deflated.data[i * c + j] -= lambda * v[i] * v[j];
            }
        }
        found.push(v);
    }

    let mut out = Tensor::zeros(&[c, k]);
    for (col, v) in found.iter().enumerate() {
        for (row, &x) in v.iter().enumerate() {
            out.data[row * k + col] = x;
        }
    }
    Ok(out)
}

fn repeated_square(m: &Tensor) -> Result<Tensor> {
    let mut p = m.clone();
    for _ in 0..POWER_SQUARINGS {
        let norm = p.norm();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        p = p.scale(1.0 / norm);
        p = matmul(&p, &p)?;
    }
    let norm = p.norm();
    if norm > 0.0 && norm.is_finite() {
        p = p.scale(1.0 / norm);
    }
    Ok(p)
}

fn start_vector(c: usize, found: &[Vec<f64>]) -> Vec<f64> {
    // Deterministic, not aligned with any coordinate axis.
    let mut v: Vec<f64> = (0..c).map(|i| 1.0 + 0.1 * ((i * 7 % 11) as f64)).collect();
    orthogonalize(&mut v, found);
    if dot(&v, &v).sqrt() > 1e-3 {
        normalize(&mut v);
        return v;
    }
    for axis in 0..c {
        let mut e = vec![0.0; c];
        e[axis] = 1.0;
        orthogonalize(&mut e, found);
        if dot(&e, &e).sqrt() > 0.5 {
            normalize(&mut e);
            return e;
        }
    }
    v
}

fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let c = v.len();
    (0..m.rows())
        .map(|i| dot(&m.data[i * c..(i + 1) * c], v))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        for (x, y) in v.iter_mut().zip(b) {
            *x -= p * y;
        }
    }
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0.0_f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![r, c], data).unwrap()
    }

    #[test]
    fn matmul_identity_zero_and_hand_case() {
        let mat = m(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, 5.0], &[-1.0, 0.0, 7.0]]);
        assert_eq!(matmul(&Tensor::identity(3), &mat).unwrap(), mat);
        let zero = Tensor::zeros(&[3, 2]);
        assert_eq!(matmul(&mat, &zero).unwrap(), zero);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(
            matmul(&a, &b).unwrap(),
            m(&[&[19.0, 22.0], &[43.0, 50.0]])
        );
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "matmul", .. }));
    }

    #[test]
    fn softmax_cases() {
        let uniform = softmax_rows(&m(&[&[2.0, 2.0, 2.0, 2.0]])).unwrap();
        assert!(uniform.data().iter().all(|&v| v == 0.25));

        let s = softmax_rows(&m(&[&[0.0, 3.0_f64.ln()]])).unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);

        let base = m(&[&[0.3, -1.2, 2.5]]);
        let shifted = base.map(|v| v + 1000.0);
        let a = softmax_rows(&base).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::filled(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let constant = m(&[&[4.0, 4.0]]);
        let out = layer_norm(&constant, &ones, &zeros, 1e-5).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);

        let out = layer_norm(&m(&[&[1.0, 3.0]]), &ones, &zeros, 0.0).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);

        let beta = Tensor::vector(vec![0.5, -2.0]);
        let out = layer_norm(&m(&[&[1.0, 9.0], &[3.0, -4.0]]), &zeros, &beta, 1e-5).unwrap();
        assert_eq!(out.data(), &[0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn eigvecs_diagonal() {
        let d = m(&[&[3.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 1.0]]);
        let v1 = top_eigvecs(&d, 1).unwrap();
        assert_eq!(v1.shape(), &[3, 1]);
        assert!((v1.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(v1.get(1, 0).abs() < 1e-12 && v1.get(2, 0).abs() < 1e-12);

        let v3 = top_eigvecs(&d, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v3.get(i, j) - want).abs() < 1e-10, "({i},{j}) = {}", v3.get(i, j));
            }
        }
    }

    #[test]
    fn eigvecs_random_spd_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let r = random_matrix(&mut rng, 4, 4);
            let mut spd = matmul(&r, &r.transpose().unwrap()).unwrap();
            for i in 0..4 {
                spd.set(i, i, spd.get(i, i) + 0.1);
            }
            let vecs = top_eigvecs(&spd, 4).unwrap();
            let mut prev = f64::INFINITY;
            for col in 0..4 {
                let v: Vec<f64> = (0..4).map(|i| vecs.get(i, col)).collect();
                let av = mat_vec(&spd, &v);
                let lambda = dot(&v, &av);
                for (x, y) in av.iter().zip(&v) {
                    assert!((x - lambda * y).abs() < 1e-8, "residual too large");
                }
                assert!(lambda <= prev + 1e-12);
                prev = lambda;
            }
        }
    }

    #[test]
    fn eigvecs_indefinite_orders_algebraically() {
        let d = m(&[&[-5.0, 0.0], &[0.0, 1.0]]);
        let v = top_eigvecs(&d, 1).unwrap();
        assert!((v.get(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigvecs_rejects_asymmetric_and_large_k() {
        let a = m(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(top_eigvecs(&a, 1), Err(Error::Contract(_))));
        assert!(matches!(
            top_eigvecs(&Tensor::identity(2), 3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn eigvecs_degenerate_still_orthonormal() {
        let vecs = top_eigvecs(&Tensor::identity(4), 3).unwrap();
        check_orthonormal(&vecs);
        let vecs = top_eigvecs(&Tensor::zeros(&[3, 3]), 3).unwrap();
        check_orthonormal(&vecs);
    }

    fn check_orthonormal(v: &Tensor) {
        let (c, k) = (v.rows(), v.cols());
        for a in 0..k {
            for b in 0..k {
                let d: f64 = (0..c).map(|i| v.get(i, a) * v.get(i, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-8, "gram[{a},{b}] = {d}");
            }
        }
    }

    proptest! {
        #[test]
        fn identity_associativity_is_bitwise(seed in any::<u64>(), r in 1usize..6, k in 1usize..6, c in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, r, k);
            let b = random_matrix(&mut rng, k, c);
            let ai = matmul(&a, &Tensor::identity(k)).unwrap();
            prop_assert_eq!(matmul(&ai, &b).unwrap(), matmul(&a, &b).unwrap());
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in any::<u64>(), r in 1usize..5, c in 1usize..40, shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, r, c).scale(20.0);
            let s = softmax_rows(&a).unwrap();
            let t = softmax_rows(&a.map(|v| v + shift)).unwrap();
            for i in 0..r {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
            for (x, y) in s.data().iter().zip(t.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn eigvecs_orthonormal_with_nonincreasing_rayleigh(seed in any::<u64>(), c in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_matrix(&mut rng, c, c);
            let sym = r.add(&r.transpose().unwrap()).unwrap();
            let k = c.min(3);
            let v = top_eigvecs(&sym, k).unwrap();
            check_orthonormal(&v);
            let mut prev = f64::INFINITY;
            for col in 0..k {
                let x: Vec<f64> = (0..c).map(|i| v.get(i, col)).collect();
                let rq = dot(&x, &mat_vec(&sym, &x));
                prop_assert!(rq <= prev + 1e-9);
                prev = rq;
            }
        }
    }
}
