use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encoder::{LayerNorm, Linear};
use super::ops::{cross_entropy, gelu, gelu_grad, softmax, LnCache};
use super::params::Parameterized;
use crate::error::{Error, Result};

pub const HEAD_LAYERNORM_EPS: f64 = 1e-12;

/// MLM decoding head: dense → GELU → layer norm → vocabulary projection.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHead {
    pub dense: Linear,
    pub norm: LayerNorm,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    input: Array2<f64>,
    pre: Array2<f64>,
    norm: LnCache,
    normed: Array2<f64>,
    pub logits: Array2<f64>,
}

impl DecoderHead {
    pub fn random(dim: usize, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dense: Linear::random(dim, dim, &mut rng),
            norm: LayerNorm::new(dim),
            output: Linear::random(dim, vocab_size, &mut rng),
        }
    }

    /// Every parameter zero, including the layer-norm scale. Decodes to the uniform distribution.
    pub fn zeros(dim: usize, vocab_size: usize) -> Self {
        Self {
            dense: Linear::zeros(dim, dim),
            norm: LayerNorm::zeros(dim),
            output: Linear::zeros(dim, vocab_size),
        }
    }

    pub fn dim(&self) -> usize {
        self.dense.weight.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.output.weight.ncols()
    }

    pub fn forward_trace(&self, x: &Array2<f64>) -> HeadTrace {
        let pre = self.dense.forward(x);
        let act = pre.mapv(gelu);
        let (normed, norm) = self.norm.forward(&act, HEAD_LAYERNORM_EPS);
        let logits = self.output.forward(&normed);
        HeadTrace {
            input: x.clone(),
            pre,
            norm,
            normed,
            logits,
        }
    }

    /// m × V logits for m input vectors.
    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_trace(x).logits
    }

    pub fn logits_one(&self, e: ArrayView1<f64>) -> Array1<f64> {
        let x = e.to_owned().insert_axis(ndarray::Axis(0));
        self.logits(&x).row(0).to_owned()
    }

    /// Probability distribution over the vocabulary for one hidden vector.
    pub fn decode(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: e.len(),
            });
        }
        if e.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("decoder input vector".into()));
        }
        let logits = self.logits_one(ndarray::aview1(e));
        Ok(softmax(logits.as_slice().expect("contiguous")))
    }

    /// Returns (parameter gradient, dx) for dLoss/dlogits.
    pub fn backward(&self, trace: &HeadTrace, dlogits: &Array2<f64>) -> (Self, Array2<f64>) {
        let mut g = Self::zeros(self.dim(), self.vocab_size());
        let dnormed = self.output.backward(&trace.normed, dlogits, &mut g.output);
        let mut dpre = self.norm.backward(&dnormed, &trace.norm, &mut g.norm);
        dpre.zip_mut_with(&trace.pre, |d, &x| *d *= gelu_grad(x));
        let dx = self.dense.backward(&trace.input, &dpre, &mut g.dense);
        (g, dx)
    }

    /// Summed cross-entropy over rows of `x` against `gold`, with gradients.
    pub fn loss_and_grad(&self, x: &Array2<f64>, gold: &[usize]) -> (f64, Self, Array2<f64>) {
        let trace = self.forward_trace(x);
        let (loss, dlogits) = ce_rows(&trace.logits, gold);
        let (g, dx) = self.backward(&trace, &dlogits);
        (loss, g, dx)
    }

    /// Summed cross-entropy without gradients.
    pub fn loss(&self, x: &Array2<f64>, gold: &[usize]) -> f64 {
        ce_rows(&self.logits(x), gold).0
    }
}

fn ce_rows(logits: &Array2<f64>, gold: &[usize]) -> (f64, Array2<f64>) {
    let mut d = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((row, mut drow), &g) in logits.rows().into_iter().zip(d.rows_mut()).zip(gold) {
        let (l, grad) = cross_entropy(row, g);
        total += l;
        drow.assign(&grad);
    }
    (total, d)
}

impl Parameterized for DecoderHead {
    fn params<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        out.push(self.dense.weight.as_slice().unwrap());
        out.push(self.dense.bias.as_slice().unwrap());
        out.push(self.norm.gamma.as_slice().unwrap());
        out.push(self.norm.beta.as_slice().unwrap());
        out.push(self.output.weight.as_slice().unwrap());
        out.push(self.output.bias.as_slice().unwrap());
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.dense.weight.as_slice_mut().unwrap());
        out.push(self.dense.bias.as_slice_mut().unwrap());
        out.push(self.norm.gamma.as_slice_mut().unwrap());
        out.push(self.norm.beta.as_slice_mut().unwrap());
        out.push(self.output.weight.as_slice_mut().unwrap());
        out.push(self.output.bias.as_slice_mut().unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn parameter_count_formula() {
        let h = DecoderHead::zeros(6, 11);
        assert_eq!(h.num_params(), 6 * 6 + 6 + 2 * 6 + 6 * 11 + 11);
        // bert-base dimensions: d = 768, V = 30522.
        let (d, v) = (768usize, 30522usize);
        let n = d * d + d + 2 * d + d * v + v;
        assert!((23_000_000..25_000_000).contains(&n), "{n}");
    }

    #[test]
    fn zero_head_decodes_uniform() {
        let h = DecoderHead::zeros(4, 5);
        let p = h.decode(&[0.3, -1.0, 2.0, 0.0]).unwrap();
        for x in p {
            assert!((x - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_is_normalized() {
        let h = DecoderHead::random(8, 20, 1);
        let p = h.decode(&[0.5, -0.2, 1.0, 3.0, -4.0, 0.0, 0.1, 0.2]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn decode_rejects_bad_input() {
        let h = DecoderHead::zeros(2, 3);
        assert!(matches!(h.decode(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(h.decode(&[f64::NAN, 0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn decode_matches_hand_computation() {
        let head = DecoderHead {
            dense: Linear {
                weight: array![[1.0, -0.5], [0.25, 2.0]],
                bias: array![0.1, -0.2],
            },
            norm: LayerNorm {
                gamma: array![1.5, 0.5],
                beta: array![0.0, 1.0],
            },
            output: Linear {
                weight: array![[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]],
                bias: array![0.0, 0.1, 0.2],
            },
        };
        let e = [0.4, -0.6];
        // Dense: h_j = Σ_i e_i W_ij + b_j.
        let h = [
            0.4 * 1.0 + -0.6 * 0.25 + 0.1,
            0.4 * -0.5 + -0.6 * 2.0 - 0.2,
        ];
        let g: Vec<f64> = h
            .iter()
            .map(|&x: &f64| {
                0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
            })
            .collect();
        let mean = (g[0] + g[1]) / 2.0;
        let var = ((g[0] - mean).powi(2) + (g[1] - mean).powi(2)) / 2.0;
        let y = [
            1.5 * (g[0] - mean) / (var + 1e-12).sqrt(),
            0.5 * (g[1] - mean) / (var + 1e-12).sqrt() + 1.0,
        ];
        let logits = [
            y[0] * 1.0 + y[1] * 0.5,
            y[0] * 0.0 + y[1] * 2.0 + 0.1,
            -y[0] + y[1] * 0.0 + 0.2,
        ];
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let expect: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let got = head.decode(&e).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!(((a - b) / b).abs() < 1e-6, "{got:?} vs {expect:?}");
        }
    }
}
