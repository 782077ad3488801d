use crate::error::{Error, Result};
use std::fmt;

/// Dense row-major matrix of finite `f64` values.
///
/// Construction through the public API rejects NaN and infinities. Values
/// produced by tape operations are not re-validated; callers that need the
/// guarantee check the final scalar loss.
#[derive(Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor2::new",
                format!("{rows}x{cols}"),
                format!("len {}", data.len()),
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "tensor entry {bad} is {}",
                data[bad]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Build from row slices; all rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let c = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * c);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != c {
                return Err(Error::shape("Tensor2::from_rows", format!("row 0 len {c}"), format!("row {i} len {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(n, c, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn row_vector(v: &[f64]) -> Result<Self> {
        Self::new(1, v.len(), v.to_vec())
    }

    pub fn col_vector(v: &[f64]) -> Result<Self> {
        Self::new(v.len(), 1, v.to_vec())
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(1, 1, vec![v])
    }

    /// Construction without the finiteness scan, for tape internals.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor2::from_raw(self.cols, self.rows, out)
    }

    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        matmul(self, other)
    }
}

pub(crate) fn matmul_raw(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize) -> Vec<f64> {
    let mut out = vec![0.0; ar * bc];
    for i in 0..ar {
        let arow = &a[i * ac..(i + 1) * ac];
        let orow = &mut out[i * bc..(i + 1) * bc];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * bc..(k + 1) * bc];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · b`; fails with a shape error naming both shapes when `a.cols != b.rows`.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape_str(), b.shape_str()));
    }
    Ok(Tensor2::from_raw(
        a.rows,
        b.cols,
        matmul_raw(&a.data, a.rows, a.cols, &b.data, b.cols),
    ))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor2) -> Tensor2 {
    let mut data = a.data.clone();
    if a.cols > 0 {
        for row in data.chunks_mut(a.cols) {
            softmax_in_place(row);
        }
    }
    Tensor2::from_raw(a.rows, a.cols, data)
}

/// Standard layer normalisation of one vector.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::shape(
            "layer_norm",
            format!("x len {}", x.len()),
            format!("gain len {}, bias len {}", gain.len(), bias.len()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let (_, _, xhat) = layer_norm_stats(x, eps);
    Ok(xhat.iter().zip(gain).zip(bias).map(|((h, g), b)| h * g + b).collect())
}

/// Mean, inverse standard deviation and normalised vector.
pub(crate) fn layer_norm_stats(x: &[f64], eps: f64) -> (f64, f64, Vec<f64>) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat = x.iter().map(|v| (v - mean) * inv_std).collect();
    (mean, inv_std, xhat)
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor2::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Tensor2::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(Tensor2::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let m = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor2::identity(2), &m).unwrap(), m);
        let v = t(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&m, &v).unwrap(), t(&[&[17.0], &[39.0]]));
        let z = matmul(&Tensor2::zeros(3, 2), &m).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor2::zeros(2, 3), &Tensor2::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[&[0.0, 0.0], &[0.0, 3f64.ln()], &[1000.0, 1000.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(1, 1) - 0.75).abs() < 1e-15);
        assert_eq!(s.row(2), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&[3.0, 3.0, 3.0], &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-10 && (y[1] + 1.0).abs() < 1e-10);
        let y = layer_norm(&[0.3, -2.0, 7.0], &[0.0; 3], &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0]);
        assert!(layer_norm(&[1.0], &[1.0, 1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn leaky_relu_examples() {
        assert_eq!(leaky_relu(5.0, 0.2), 5.0);
        assert_eq!(leaky_relu(-10.0, 0.2), -2.0);
        assert_eq!(leaky_relu(0.0, 0.7), 0.0);
    }
}
