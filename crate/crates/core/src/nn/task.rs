use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::head::DecoderHead;
use super::ops::softmax;
use super::params::{push1, push1_mut, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Mlm,
    SpanQa,
    PointwiseRank,
}

/// Start/end classifiers over token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanHead {
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

/// Relevance regressor on the sequence-start representation.
#[derive(Debug, Clone, PartialEq)]
pub struct RankHead {
    pub weight: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskHead {
    Mlm(DecoderHead),
    SpanQa(SpanHead),
    PointwiseRank(RankHead),
}

fn random_vec(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    Array1::from_shape_simple_fn(dim, || normal.sample(rng))
}

impl SpanHead {
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            start: random_vec(dim, &mut rng),
            end: random_vec(dim, &mut rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            start: Array1::zeros(dim),
            end: Array1::zeros(dim),
        }
    }

    /// Start and end distributions over `candidates` (row indices of `hidden`).
    pub fn distributions(&self, hidden: &Array2<f64>, candidates: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let logits = |w: &Array1<f64>| -> Vec<f64> {
            candidates.iter().map(|&i| hidden.row(i).dot(w)).collect()
        };
        (softmax(&logits(&self.start)), softmax(&logits(&self.end)))
    }

    /// Mean of the start and end cross-entropies. `start`/`end` index into `candidates`.
    pub fn loss_and_grad(
        &self,
        hidden: &Array2<f64>,
        candidates: &[usize],
        start: usize,
        end: usize,
    ) -> (f64, Self, Array2<f64>) {
        let (ps, pe) = self.distributions(hidden, candidates);
        let loss = -0.5 * (ps[start].ln() + pe[end].ln());
        let mut g = Self::zeros(self.start.len());
        let mut dh = Array2::zeros(hidden.raw_dim());
        for (c, &row) in candidates.iter().enumerate() {
            let ds = 0.5 * (ps[c] - f64::from(u8::from(c == start)));
            let de = 0.5 * (pe[c] - f64::from(u8::from(c == end)));
            let h = hidden.row(row);
            g.start.scaled_add(ds, &h);
            g.end.scaled_add(de, &h);
            let mut d = dh.row_mut(row);
            d.scaled_add(ds, &self.start);
            d.scaled_add(de, &self.end);
        }
        (loss, g, dh)
    }

    /// Most likely (start, end) over candidate indices with end ≥ start.
    pub fn predict(&self, hidden: &Array2<f64>, candidates: &[usize]) -> (usize, usize) {
        let (ps, pe) = self.distributions(hidden, candidates);
        let mut best = (0, 0, f64::NEG_INFINITY);
        for s in 0..candidates.len() {
            for e in s..candidates.len() {
                let score = ps[s].ln() + pe[e].ln();
                if score > best.2 {
                    best = (s, e, score);
                }
            }
        }
        (best.0, best.1)
    }
}

impl RankHead {
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weight: random_vec(dim, &mut rng),
            bias: Array1::zeros(1),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Array1::zeros(dim),
            bias: Array1::zeros(1),
        }
    }

    pub fn score(&self, hidden: &Array2<f64>) -> f64 {
        hidden.row(0).dot(&self.weight) + self.bias[0]
    }

    /// Binary cross-entropy on the logit score against `relevant`.
    pub fn loss_and_grad(&self, hidden: &Array2<f64>, relevant: bool) -> (f64, Self, Array2<f64>) {
        let s = self.score(hidden);
        let y = f64::from(u8::from(relevant));
        // softplus(s) − y·s, computed stably.
        let loss = s.max(0.0) + (-s.abs()).exp().ln_1p() - y * s;
        let ds = 1.0 / (1.0 + (-s).exp()) - y;
        let mut g = Self::zeros(self.weight.len());
        g.weight.scaled_add(ds, &hidden.row(0));
        g.bias[0] = ds;
        let mut dh = Array2::zeros(hidden.raw_dim());
        dh.row_mut(0).scaled_add(ds, &self.weight);
        (loss, g, dh)
    }
}

impl TaskHead {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskHead::Mlm(_) => TaskKind::Mlm,
            TaskHead::SpanQa(_) => TaskKind::SpanQa,
            TaskHead::PointwiseRank(_) => TaskKind::PointwiseRank,
        }
    }
}

impl Parameterized for SpanHead {
    fn params<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        push1(&self.start, out);
        push1(&self.end, out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        push1_mut(&mut self.start, out);
        push1_mut(&mut self.end, out);
    }
}

impl Parameterized for RankHead {
    fn params<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        push1(&self.weight, out);
        push1(&self.bias, out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        push1_mut(&mut self.weight, out);
        push1_mut(&mut self.bias, out);
    }
}

impl Parameterized for TaskHead {
    fn params<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        match self {
            TaskHead::Mlm(h) => h.params(out),
            TaskHead::SpanQa(h) => h.params(out),
            TaskHead::PointwiseRank(h) => h.params(out),
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        match self {
            TaskHead::Mlm(h) => h.params_mut(out),
            TaskHead::SpanQa(h) => h.params_mut(out),
            TaskHead::PointwiseRank(h) => h.params_mut(out),
        }
    }
}
