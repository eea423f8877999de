use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use serde::{Deserialize, Serialize};

use super::math;
use crate::error::{bail, Result};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(Shape, "shape {:?} needs {} elements, got {}", shape, n, data.len());
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                bail!(Shape, "ragged rows: expected {}, got {}", cols, r.len());
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Leading dimension (rows of a matrix).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing dimensions.
    pub fn row_width(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_width();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.row_width() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let w = self.row_width();
        self.data[i * w + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            bail!(Shape, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            bail!(Shape, "transpose needs a matrix, got {:?}", self.shape);
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::from_vec(&[n, m], out)
    }

    /// Copies the listed leading-dimension slices, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let w = self.row_width();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= self.rows() {
                bail!(Index, "row {} out of range for {} rows", i, self.rows());
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::from_vec(&shape, data)
    }

    /// Appends rows of `other` (same trailing shape) below `self`.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Self> {
        if self.shape[1..] != other.shape[1..] {
            bail!(Shape, "concat {:?} with {:?}", self.shape, other.shape);
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let mut shape = self.shape.clone();
        shape[0] += other.rows();
        Self::from_vec(&shape, data)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            bail!(Shape, "add {:?} and {:?}", self.shape, other.shape);
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Counts multiply-add FLOPs (`2·m·k·n` per product) of matmuls routed through it.
#[derive(Debug, Default)]
pub struct FlopCounter(Cell<u64>);

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, flops: u64) {
        self.0.set(self.0.get() + flops);
    }

    pub fn get(&self) -> u64 {
        self.0.get()
    }

    pub fn take(&self) -> u64 {
        self.0.replace(0)
    }
}

/// Matrix product with a fixed left-to-right summation over the inner dimension.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        bail!(Shape, "matmul needs matrices, got {:?} and {:?}", a.shape, b.shape);
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        bail!(Shape, "matmul inner dims {} vs {}", k, k2);
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (p, &av) in arow.iter().enumerate() {
                acc += av * b.data[p * n + j];
            }
            *o = acc;
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// `matmul` that records its FLOPs.
pub fn matmul_counted(a: &Tensor, b: &Tensor, flops: &FlopCounter) -> Result<Tensor> {
    let out = matmul(a, b)?;
    flops.add(2 * (a.shape[0] * a.shape[1] * b.shape[1]) as u64);
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.shape.len() != 2 || x.shape[1] == 0 {
        bail!(Shape, "softmax_rows needs non-empty rows, got {:?}", x.shape);
    }
    let mut out = x.clone();
    for i in 0..x.shape[0] {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Softmax over a slice; an empty slice is left untouched.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `y_i = gain_i · x_i / sqrt(mean(x²) + eps)`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    if x.len() != gain.len() || x.is_empty() {
        bail!(Shape, "rms_norm lengths {} vs {}", x.len(), gain.len());
    }
    let mut out = x.clone();
    rms_norm_into(x.data(), gain.data(), eps, out.data_mut());
    Ok(out)
}

pub(crate) fn rms_norm_into(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / math::sqrt(ms + eps);
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * v * inv;
    }
}

/// Applies `rms_norm` to every row of a matrix.
pub fn rms_norm_rows(x: &Tensor, gain: &[f64], eps: f64) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        rms_norm_into(x.row(i), gain, eps, out.row_mut(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap()
    }

    #[test]
    fn identity_product() {
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matches_naive_triple_loop() {
        let mut rng = Rng::new(7);
        let a = random(&mut rng, &[5, 7]);
        let b = random(&mut rng, &[7, 3]);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.get(i, p) * b.get(p, j);
                }
                assert_eq!(c.get(i, j).to_bits(), s.to_bits());
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn counted_matmul() {
        let f = FlopCounter::new();
        matmul_counted(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3, 4]), &f).unwrap();
        assert_eq!(f.get(), 48);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.is_finite());
        let mut rng = Rng::new(3);
        let s = softmax_rows(&random(&mut rng, &[3, 4])).unwrap();
        for i in 0..3 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
        assert!(softmax_rows(&Tensor::zeros(&[2, 0])).is_err());
    }

    #[test]
    fn rms_norm_cases() {
        let ones = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        let x = Tensor::from_vec(&[4], vec![-3.0; 4]).unwrap();
        let y = rms_norm(&x, &ones, 1e-300).unwrap();
        for v in y.data() {
            assert!((v + 1.0).abs() < 1e-12);
        }
        let z = rms_norm(&Tensor::zeros(&[4]), &ones, 1e-6).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let mut rng = Rng::new(11);
        let x = random(&mut rng, &[16]);
        let gain = Tensor::from_vec(&[16], (0..16).map(|_| rng.uniform(0.5, 2.0)).collect()).unwrap();
        let y = rms_norm(&x, &gain, 1e-6).unwrap();
        let unit: Vec<f64> = y.data().iter().zip(gain.data()).map(|(a, g)| a / g).collect();
        let rms = math::sqrt(unit.iter().map(|v| v * v).sum::<f64>() / 16.0);
        assert!((1.0 - 1e-6..=1.0).contains(&rms));
    }
}
