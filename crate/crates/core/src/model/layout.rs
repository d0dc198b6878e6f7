//! Flat parameter storage. Every network keeps its parameters in one
//! `Vec<f64>`; a [`Layout`] names the contiguous row-major blocks inside it.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a>(&self, values: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &values[self.range()])
            .expect("slot in bounds")
    }

    pub fn mat_mut<'a>(&self, values: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut values[self.range()])
            .expect("slot in bounds")
    }

    pub fn vec<'a>(&self, values: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&values[self.range()])
    }

    pub fn vec_mut<'a>(&self, values: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut values[self.range()])
    }
}

/// How a slot is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Constant(f64),
}

#[derive(Debug, Clone, Default)]
pub struct Layout {
    groups: Vec<(String, Slot, Init)>,
    len: usize,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Slot {
        let slot = Slot {
            offset: self.len,
            rows,
            cols,
        };
        self.len += slot.len();
        self.groups.push((name.into(), slot, init));
        slot
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, Slot)> {
        self.groups.iter().map(|(n, s, _)| (n.as_str(), *s))
    }

    /// Name of the group containing flat index `i`.
    pub fn group_of(&self, i: usize) -> Option<(&str, usize)> {
        self.groups
            .iter()
            .find(|(_, s, _)| s.range().contains(&i))
            .map(|(n, s, _)| (n.as_str(), i - s.offset))
    }

    pub fn initialize<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut values = vec![0.0; self.len];
        for (_, slot, init) in &self.groups {
            for v in &mut values[slot.range()] {
                *v = match *init {
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                        rng.random_range(-bound..bound)
                    }
                    Init::Constant(c) => c,
                };
            }
        }
        values
    }
}
