use ndarray::{Array1, Array2, ArrayView1, Axis};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Numerically stable softmax. `-inf` entries receive exactly zero weight.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Vector-Jacobian product of softmax: `w ⊙ (g − ⟨g, w⟩)`.
pub(crate) fn softmax_vjp(weights: &[f64], grad: &[f64], out: &mut [f64]) {
    let dot: f64 = weights.iter().zip(grad).map(|(w, g)| w * g).sum();
    for ((o, &w), &g) in out.iter_mut().zip(weights).zip(grad) {
        *o += w * (g - dot);
    }
}

/// Saved statistics of a layer norm, enough for its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub normed: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub(crate) fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let (t, d) = x.dim();
    let mut normed = Array2::zeros((t, d));
    let mut rstd = Array1::zeros(t);
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for (o, v) in normed.row_mut(i).iter_mut().zip(row.iter()) {
            *o = (v - mean) * r;
        }
    }
    let y = &normed * gain + bias;
    (y, NormCache { normed, rstd })
}

/// Returns dL/dx and accumulates gain/bias gradients.
pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    *dgain += &(dy * &cache.normed).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g: ArrayView1<f64> = dxhat.row(i);
        let xh = cache.normed.row(i);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let r = cache.rstd[i];
        for ((o, gv), xv) in dx.row_mut(i).iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = r * (gv - mean_g - xv * mean_gx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0; 4]);
        assert!(p.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn softmax_masks_neg_infinity() {
        let p = softmax(&[1.0, f64::NEG_INFINITY, 1.0]);
        assert_eq!(p[1], 0.0);
        assert!((p[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn log_softmax_consistent_with_softmax() {
        let z = [0.3, -1.2, 4.0, 0.0];
        let p = softmax(&z);
        let lp = log_softmax(&z);
        for (a, b) in p.iter().zip(lp) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }
}
