use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

/// Flat view over a model's parameter tensors, in declaration order.
pub trait Parameterized {
    fn params<'a>(&'a self, out: &mut Vec<&'a [f64]>);
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>);

    fn num_params(&self) -> usize {
        let mut v = Vec::new();
        self.params(&mut v);
        v.iter().map(|s| s.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.params(&mut v);
        v.concat()
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut v = Vec::new();
        self.params_mut(&mut v);
        let mut offset = 0;
        for s in v {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, value: f64) {
        let mut v = Vec::new();
        self.params_mut(&mut v);
        for s in v {
            s.fill(value);
        }
    }

    /// `self += other`, element-wise over identically shaped parameter sets.
    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let mut theirs = Vec::new();
        other.params(&mut theirs);
        let mut ours = Vec::new();
        self.params_mut(&mut ours);
        for (a, b) in ours.into_iter().zip(theirs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        let mut v = Vec::new();
        self.params_mut(&mut v);
        for s in v {
            s.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    fn checksum(&self) -> String {
        let mut v = Vec::new();
        self.params(&mut v);
        let mut h = Sha256::new();
        for s in v {
            for x in s {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn all_finite(&self) -> bool {
        let mut v = Vec::new();
        self.params(&mut v);
        v.iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn push2<'a>(a: &'a Array2<f64>, out: &mut Vec<&'a [f64]>) {
    out.push(a.as_slice().expect("standard layout"));
}

pub(crate) fn push1<'a>(a: &'a Array1<f64>, out: &mut Vec<&'a [f64]>) {
    out.push(a.as_slice().expect("standard layout"));
}

pub(crate) fn push2_mut<'a>(a: &'a mut Array2<f64>, out: &mut Vec<&'a mut [f64]>) {
    out.push(a.as_slice_mut().expect("standard layout"));
}

pub(crate) fn push1_mut<'a>(a: &'a mut Array1<f64>, out: &mut Vec<&'a mut [f64]>) {
    out.push(a.as_slice_mut().expect("standard layout"));
}

/// Several parameter owners treated as one flat vector, e.g. an encoder
/// together with its training head.
pub struct ParamSet<'m> {
    members: Vec<&'m mut dyn Parameterized>,
}

impl<'m> ParamSet<'m> {
    pub fn new(members: Vec<&'m mut dyn Parameterized>) -> Self {
        Self { members }
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for m in self.members.iter_mut() {
            m.params_mut(&mut out);
        }
        out
    }
}
