//! Plan-only comparison model: `d -> hidden (ReLU) -> 1`, sigmoid on top.
//! It never reads `h_motion`.

use ndarray::{Array1, ArrayView1};

use super::layout::{Init, Layout, Slot};
use super::{Features, ModelHyper};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Mlp {
    hyper: ModelHyper,
    layout: Layout,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
}

impl Mlp {
    pub fn new(hyper: ModelHyper) -> Result<Self> {
        hyper.validate()?;
        let (d, h) = (hyper.d, hyper.mlp_hidden);
        let mut layout = Layout::default();
        let w1 = layout.push("mlp.w1", h, d, Init::FanIn(d));
        let b1 = layout.push("mlp.b1", 1, h, Init::FanIn(d));
        let w2 = layout.push("mlp.w2", 1, h, Init::FanIn(h));
        let b2 = layout.push("mlp.b2", 1, 1, Init::FanIn(h));
        Ok(Self {
            hyper,
            layout,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn hyper(&self) -> &ModelHyper {
        &self.hyper
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn hidden(&self, params: &[f64], x: &Features) -> Result<Array1<f64>> {
        if x.h_plan.len() != self.hyper.d {
            return Err(Error::Shape {
                what: "h_plan",
                expected: self.hyper.d.to_string(),
                got: x.h_plan.len().to_string(),
            });
        }
        Ok(self.w1.mat(params).dot(&ArrayView1::from(&x.h_plan[..])) + &self.b1.vec(params))
    }

    pub fn logit(&self, params: &[f64], x: &Features) -> Result<f64> {
        let h = self.hidden(params, x)?.mapv(|v| v.max(0.0));
        Ok(self.w2.vec(params).dot(&h) + params[self.b2.offset])
    }

    pub fn accumulate_grad(
        &self,
        params: &[f64],
        x: &Features,
        dlogit: impl FnOnce(f64) -> f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let pre = self.hidden(params, x)?;
        let h = pre.mapv(|v| v.max(0.0));
        let logit = self.w2.vec(params).dot(&h) + params[self.b2.offset];
        let g = dlogit(logit);
        self.w2.vec_mut(grad).scaled_add(g, &h);
        grad[self.b2.offset] += g;
        let dpre: Array1<f64> =
            self.w2.vec(params).mapv(|w| w * g) * pre.mapv(|v| f64::from(v > 0.0));
        let x_plan = ArrayView1::from(&x.h_plan[..]);
        let mut dw1 = self.w1.mat_mut(grad);
        for (i, &dp) in dpre.iter().enumerate() {
            if dp != 0.0 {
                dw1.row_mut(i).scaled_add(dp, &x_plan);
            }
        }
        self.b1.vec_mut(grad).zip_mut_with(&dpre, |a, b| *a += b);
        Ok(logit)
    }
}
