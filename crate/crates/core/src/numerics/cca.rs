//! Gaussian mutual information between two batches via canonical correlations.
//!
//! `MI = -1/2 * sum_c ln(1 - rho_c^2)` where `rho_c` are the singular values of
//! the whitened cross-covariance `S_mm^{-1/2} S_mn S_nn^{-1/2}`. Correlations
//! are clamped to `1 - 1e-6` before the log. The backward pass differentiates
//! through the SVD and through the symmetric inverse square roots
//! (Daleckii-Krein divided differences); clamped components contribute no
//! gradient.

use nalgebra::{DMatrix, SymmetricEigen};

pub const RHO_CEILING: f64 = 1.0 - 1e-6;
/// Shrinkage factor toward the diagonal when the batch is small.
pub const SHRINKAGE: f64 = 0.1;
/// Shrinkage applies when `batch < SHRINK_BATCH_FACTOR * max(dim_m, dim_n)`.
pub const SHRINK_BATCH_FACTOR: usize = 4;

#[derive(Clone, Debug)]
struct InvSqrt {
    q: DMatrix<f64>,
    lambda: Vec<f64>,
    tol: f64,
    w: DMatrix<f64>,
}

fn inv_sqrt_fn(l: f64, tol: f64) -> f64 {
    if l > tol {
        1.0 / l.sqrt()
    } else {
        0.0
    }
}

impl InvSqrt {
    fn new(a: DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(a);
        let lambda: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let lmax = lambda.iter().copied().fold(0.0_f64, f64::max);
        let tol = 1e-12 * lmax.max(1e-300);
        let q = eig.eigenvectors;
        let f = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            lambda.len(),
            lambda.iter().map(|&l| inv_sqrt_fn(l, tol)),
        ));
        let w = &q * f * q.transpose();
        Self { q, lambda, tol, w }
    }

    /// Gradient with respect to the input matrix given the gradient `g` with
    /// respect to `A^{-1/2}`.
    fn backward(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let gs = (g + g.transpose()) * 0.5;
        let inner = self.q.transpose() * gs * &self.q;
        let n = self.lambda.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let (li, lj) = (self.lambda[i], self.lambda[j]);
                let fi = inv_sqrt_fn(li, self.tol);
                let fj = inv_sqrt_fn(lj, self.tol);
                let close = (li - lj).abs() <= 1e-10 * li.abs().max(lj.abs()).max(1e-300);
                k[(i, j)] = if close {
                    if li > self.tol {
                        -0.5 * li.powf(-1.5)
                    } else {
                        0.0
                    }
                } else {
                    (fi - fj) / (li - lj)
                };
            }
        }
        let had = inner.component_mul(&k);
        &self.q * had * self.q.transpose()
    }
}

/// Everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct CcaCache {
    batch: usize,
    p: usize,
    q: usize,
    shrink: f64,
    xc: DMatrix<f64>,
    smn: DMatrix<f64>,
    wm: InvSqrt,
    wn: InvSqrt,
    u: DMatrix<f64>,
    vt: DMatrix<f64>,
    rho: Vec<f64>,
}

impl CcaCache {
    pub fn correlations(&self) -> &[f64] {
        &self.rho
    }
}

/// Forward pass. `zm` is `batch x p`, `zn` is `batch x q`, both row-major.
/// Requires `batch >= 2`; callers enforce stricter batch preconditions.
pub fn forward(zm: &[f64], zn: &[f64], batch: usize, p: usize, q: usize) -> (f64, CcaCache) {
    let d = p + q;
    let mut x = DMatrix::<f64>::zeros(batch, d);
    for i in 0..batch {
        for j in 0..p {
            x[(i, j)] = zm[i * p + j];
        }
        for j in 0..q {
            x[(i, p + j)] = zn[i * q + j];
        }
    }
    for j in 0..d {
        let mean = x.column(j).sum() / batch as f64;
        for i in 0..batch {
            x[(i, j)] -= mean;
        }
    }
    let c = (x.transpose() * &x) / (batch as f64 - 1.0);
    let shrink = if batch < SHRINK_BATCH_FACTOR * p.max(q) { SHRINKAGE } else { 0.0 };
    let mut s = c * (1.0 - shrink);
    if shrink > 0.0 {
        for j in 0..d {
            s[(j, j)] /= 1.0 - shrink;
        }
    }
    let smm = s.view((0, 0), (p, p)).clone_owned();
    let snn = s.view((p, p), (q, q)).clone_owned();
    let smn = s.view((0, p), (p, q)).clone_owned();
    let wm = InvSqrt::new(smm);
    let wn = InvSqrt::new(snn);
    let m = &wm.w * &smn * &wn.w;
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let rho: Vec<f64> = svd.singular_values.iter().copied().collect();
    let mi = rho
        .iter()
        .map(|&r| {
            let r = r.min(RHO_CEILING);
            -0.5 * (1.0 - r * r).ln()
        })
        .sum::<f64>();
    let cache = CcaCache {
        batch,
        p,
        q,
        shrink,
        xc: x,
        smn,
        wm,
        wn,
        u,
        vt,
        rho,
    };
    (mi, cache)
}

/// Backward pass: returns `(d zm, d zn)` row-major for upstream gradient `g`.
pub fn backward(cache: &CcaCache, g: f64) -> (Vec<f64>, Vec<f64>) {
    let (p, q, b) = (cache.p, cache.q, cache.batch);
    let r = cache.rho.len();
    let mut scale = DMatrix::<f64>::zeros(r, r);
    for (c, &rho) in cache.rho.iter().enumerate() {
        scale[(c, c)] = if rho < RHO_CEILING { g * rho / (1.0 - rho * rho) } else { 0.0 };
    }
    let gm = &cache.u * scale * &cache.vt;
    let wm = &cache.wm.w;
    let wn = &cache.wn.w;
    let g_wm = &gm * (&cache.smn * wn).transpose();
    let g_smn = wm.transpose() * &gm * wn.transpose();
    let g_wn = (wm * &cache.smn).transpose() * &gm;
    let g_smm = cache.wm.backward(&g_wm);
    let g_snn = cache.wn.backward(&g_wn);

    let d = p + q;
    let mut gs = DMatrix::<f64>::zeros(d, d);
    gs.view_mut((0, 0), (p, p)).copy_from(&g_smm);
    gs.view_mut((p, p), (q, q)).copy_from(&g_snn);
    gs.view_mut((0, p), (p, q)).copy_from(&g_smn);
    let mut gc = gs * (1.0 - cache.shrink);
    if cache.shrink > 0.0 {
        for j in 0..d {
            gc[(j, j)] /= 1.0 - cache.shrink;
        }
    }
    let sym = &gc + gc.transpose();
    let mut dxc = (&cache.xc * sym) / (b as f64 - 1.0);
    for j in 0..d {
        let mean = dxc.column(j).sum() / b as f64;
        for i in 0..b {
            dxc[(i, j)] -= mean;
        }
    }
    let mut dzm = vec![0.0; b * p];
    let mut dzn = vec![0.0; b * q];
    for i in 0..b {
        for j in 0..p {
            dzm[i * p + j] = dxc[(i, j)];
        }
        for j in 0..q {
            dzn[i * q + j] = dxc[(i, p + j)];
        }
    }
    (dzm, dzn)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bivariate_closed_form() {
        // Two scalar columns with exact sample correlation 0.5.
        let a = [1.0, -1.0, 1.0, -1.0];
        let e = [1.0, 1.0, -1.0, -1.0];
        let rho: f64 = 0.5;
        let bcol: Vec<f64> = a.iter().zip(&e).map(|(x, y)| rho * x + (1.0 - rho * rho).sqrt() * y).collect();
        let (mi, cache) = forward(&a, &bcol, 4, 1, 1);
        assert!((cache.correlations()[0] - 0.5).abs() < 1e-12);
        assert!((mi + 0.5 * 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_column_gives_zero() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let z = [0.0; 5];
        let (mi, _) = forward(&a, &z, 5, 1, 1);
        assert_eq!(mi, 0.0);
    }
}
