//! Dense kernels over row-major `f64` slices. Reduction order is fixed so
//! results are bit-reproducible.

use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x[rows × din] · w[din × dout] (+ b)`.
pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, rows: usize, din: usize, dout: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * din);
    debug_assert_eq!(w.len(), din * dout);
    let mut out = vec![0.0; rows * dout];
    for i in 0..rows {
        let orow = &mut out[i * dout..(i + 1) * dout];
        if let Some(b) = b {
            orow.copy_from_slice(b);
        }
        let xrow = &x[i * din..(i + 1) * din];
        for (k, &xv) in xrow.iter().enumerate() {
            let wrow = &w[k * dout..(k + 1) * dout];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// Backward of [`linear`]: accumulates `dw`, `db` and returns `dx`.
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    rows: usize,
    din: usize,
    dout: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * din];
    for i in 0..rows {
        let dyrow = &dy[i * dout..(i + 1) * dout];
        let xrow = &x[i * din..(i + 1) * din];
        let dxrow = &mut dx[i * din..(i + 1) * din];
        for k in 0..din {
            let wrow = &w[k * dout..(k + 1) * dout];
            let dwrow = &mut dw[k * dout..(k + 1) * dout];
            let xv = xrow[k];
            let mut acc = 0.0;
            for o in 0..dout {
                acc += dyrow[o] * wrow[o];
                dwrow[o] += xv * dyrow[o];
            }
            dxrow[k] = acc;
        }
    }
    if let Some(db) = db {
        for i in 0..rows {
            for (g, &d) in db.iter_mut().zip(&dy[i * dout..(i + 1) * dout]) {
                *g += d;
            }
        }
    }
    dx
}

pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, dim: usize) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; rows * dim];
    let mut xhat = vec![0.0; rows * dim];
    let mut rstd = vec![0.0; rows];
    for i in 0..rows {
        let row = &x[i * dim..(i + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[i] = r;
        for c in 0..dim {
            let h = (row[c] - mean) * r;
            xhat[i * dim + c] = h;
            y[i * dim + c] = gamma[c] * h + beta[c];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    dy: &[f64],
    gamma: &[f64],
    cache: &LayerNormCache,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    rows: usize,
    dim: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * dim];
    let n = dim as f64;
    for i in 0..rows {
        let dyrow = &dy[i * dim..(i + 1) * dim];
        let xh = &cache.xhat[i * dim..(i + 1) * dim];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for c in 0..dim {
            dgamma[c] += dyrow[c] * xh[c];
            dbeta[c] += dyrow[c];
            let dxh = dyrow[c] * gamma[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[c];
        }
        let r = cache.rstd[i];
        for c in 0..dim {
            let dxh = dyrow[c] * gamma[c];
            dx[i * dim + c] = r / n * (n * dxh - sum_dxh - xh[c] * sum_dxh_xh);
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact Gaussian-CDF form.
    #[default]
    Gelu,
    /// tanh approximation.
    GeluTanh,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::GeluTanh => 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
            }
            Activation::GeluTanh => {
                let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit: `max(z,0) - z·y + ln(1 + e^{-|z|})`.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// In-place softmax; returns log-sum-exp of the input.
pub fn softmax_in_place(v: &mut [f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivatives_match_finite_differences() {
        for act in [Activation::Gelu, Activation::GeluTanh] {
            for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 2.0] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
        assert!((Activation::Gelu.apply(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_naive_form() {
        for &(z, y) in &[(0.0, 1.0), (2.0, 0.0), (-1.5, 1.0), (0.7, 0.0)] {
            let p = 1.0 / (1.0 + (-z as f64).exp());
            let naive = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce_with_logits(z, y) - naive).abs() < 1e-12);
        }
        assert!((bce_with_logits(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn linear_backward_matches_definition() {
        let x = [1.0, 2.0, -1.0, 0.5];
        let w = [0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        let y = linear(&x, &w, Some(&[1.0, 0.0, -1.0]), 2, 2, 3);
        assert_eq!(y[0], 1.0 + 1.0 * 0.1 + 2.0 * 0.4);
        let dy = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let mut dw = vec![0.0; 6];
        let mut db = vec![0.0; 3];
        let dx = linear_backward(&x, &w, &dy, &mut dw, Some(&mut db), 2, 2, 3);
        assert_eq!(dx, vec![0.1, 0.4, 0.3, -0.6]);
        assert_eq!(db, vec![1.0, 0.0, 1.0]);
        assert_eq!(dw, vec![1.0, 0.0, -1.0, 2.0, 0.0, 0.5]);
    }
}
