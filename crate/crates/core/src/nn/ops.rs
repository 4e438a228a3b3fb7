use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}

/// Cross-entropy of `gold` under softmax(logits) and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: ArrayView1<f64>, gold: usize) -> (f64, Array1<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = logits.mapv(|l| (l - max).exp());
    let sum = probs.sum();
    probs /= sum;
    let loss = -(logits[gold] - max - sum.ln());
    probs[gold] -= 1.0;
    (loss, probs)
}

/// Row-wise softmax; columns at or beyond `valid` receive probability 0.
pub(crate) fn softmax_rows_masked(m: &mut Array2<f64>, valid: usize) {
    for mut row in m.rows_mut() {
        let max = row
            .iter()
            .take(valid)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, x) in row.iter_mut().enumerate() {
            if j < valid {
                *x = (*x - max).exp();
                sum += *x;
            } else {
                *x = 0.0;
            }
        }
        row.mapv_inplace(|x| x / sum);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + eps).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let mut y = &xhat * gamma;
    y += beta;
    (y, LnCache { xhat, inv_std })
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    gamma: &Array1<f64>,
    cache: &LnCache,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = dy.ncols() as f64;
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = dy * gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = inv / d * (d * gi - sum_g - xi * sum_gx));
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -1.2, -0.1, 0.0, 0.4, 1.0, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn softmax_and_cross_entropy_agree() {
        let l = [1.0, -2.0, 0.5, 3.0];
        let p = softmax(&l);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&l);
        let (loss, grad) = cross_entropy(ndarray::aview1(&l), 2);
        assert!((loss + lp[2]).abs() < 1e-12);
        assert!((grad[2] - (p[2] - 1.0)).abs() < 1e-12);
        assert!(grad.sum().abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_padding() {
        let mut m = array![[1.0, 2.0, 3.0], [0.0, 0.0, 9.0]];
        softmax_rows_masked(&mut m, 2);
        for row in m.rows() {
            assert_eq!(row[2], 0.0);
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = array![[1.0, 2.0, 4.0, 8.0], [-3.0, 0.5, 0.25, 10.0]];
        let (_, cache) = layer_norm_forward(&x, &Array1::ones(4), &Array1::zeros(4), 1e-12);
        for row in cache.xhat.rows() {
            let mean = row.sum() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
