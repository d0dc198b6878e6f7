//! Cross-attention collision classifier.
//!
//! Each agent's `N_m x d` motion queries are flattened and projected to one
//! `d`-dimensional token (`Linear` + ReLU). The plan query, as a length-one
//! target sequence, cross-attends over the visible agent tokens through
//! pre-norm decoder layers (attention then feed-forward, both residual).
//! A two-layer MLP head maps the result to a logit; the probability is its
//! sigmoid.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewMut1, Axis};

use super::layout::{Init, Layout, Slot};
use super::{Features, ModelHyper};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct DecoderSlots {
    ln1_g: Slot,
    ln1_b: Slot,
    w_q: Slot,
    w_k: Slot,
    w_v: Slot,
    w_o: Slot,
    ln2_g: Slot,
    ln2_b: Slot,
    ff_w1: Slot,
    ff_b1: Slot,
    ff_w2: Slot,
    ff_b2: Slot,
}

#[derive(Debug, Clone)]
pub struct CatPlan {
    hyper: ModelHyper,
    layout: Layout,
    proj_w: Slot,
    proj_b: Slot,
    layers: Vec<DecoderSlots>,
    head_w1: Slot,
    head_b1: Slot,
    head_w2: Slot,
    head_b2: Slot,
}

struct LayerCache {
    xhat1: Array1<f64>,
    rstd1: f64,
    u: Array1<f64>,
    q: Array1<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// heads x active agents
    alpha: Array2<f64>,
    o: Array1<f64>,
    xhat2: Array1<f64>,
    rstd2: f64,
    w: Array1<f64>,
    f1: Array1<f64>,
    r: Array1<f64>,
}

struct Cache {
    x: Array2<f64>,
    pre: Array2<f64>,
    m: Array2<f64>,
    layers: Vec<LayerCache>,
    z: Array1<f64>,
    h1: Array1<f64>,
    rh: Array1<f64>,
    logit: f64,
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn layer_norm(
    x: ArrayView1<f64>,
    g: ArrayView1<f64>,
    b: ArrayView1<f64>,
) -> (Array1<f64>, Array1<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let xhat = x.mapv(|v| (v - mean) * rstd);
    let y = &xhat * &g + &b;
    (y, xhat, rstd)
}

fn layer_norm_backward(
    dy: &Array1<f64>,
    xhat: &Array1<f64>,
    rstd: f64,
    g: ArrayView1<f64>,
    mut dg: ArrayViewMut1<f64>,
) -> Array1<f64> {
    dg.zip_mut_with(&(dy * xhat), |a, b| *a += b);
    let dxhat = dy * &g;
    let n = dy.len() as f64;
    let mean_dxhat = dxhat.sum() / n;
    let mean_dxhat_xhat = (&dxhat * xhat).sum() / n;
    (&dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * rstd
}

fn add_outer(mut dst: ndarray::ArrayViewMut2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    general_mat_mul(1.0, &a2, &b2, 1.0, &mut dst);
}

fn add_vec(mut dst: ArrayViewMut1<f64>, src: &Array1<f64>) {
    dst.zip_mut_with(src, |a, b| *a += b);
}

impl CatPlan {
    pub fn new(hyper: ModelHyper) -> Result<Self> {
        hyper.validate()?;
        let (d, h) = (hyper.d, hyper.mlp_hidden);
        let flat = hyper.n_modes * d;
        let mut layout = Layout::default();
        let proj_w = layout.push("proj.w", d, flat, Init::FanIn(flat));
        let proj_b = layout.push("proj.b", 1, d, Init::FanIn(flat));
        let layers = (0..hyper.n_layers)
            .map(|l| DecoderSlots {
                ln1_g: layout.push(format!("dec{l}.ln1.g"), 1, d, Init::Constant(1.0)),
                ln1_b: layout.push(format!("dec{l}.ln1.b"), 1, d, Init::Constant(0.0)),
                w_q: layout.push(format!("dec{l}.attn.w_q"), d, d, Init::FanIn(d)),
                w_k: layout.push(format!("dec{l}.attn.w_k"), d, d, Init::FanIn(d)),
                w_v: layout.push(format!("dec{l}.attn.w_v"), d, d, Init::FanIn(d)),
                w_o: layout.push(format!("dec{l}.attn.w_o"), d, d, Init::FanIn(d)),
                ln2_g: layout.push(format!("dec{l}.ln2.g"), 1, d, Init::Constant(1.0)),
                ln2_b: layout.push(format!("dec{l}.ln2.b"), 1, d, Init::Constant(0.0)),
                ff_w1: layout.push(format!("dec{l}.ff.w1"), h, d, Init::FanIn(d)),
                ff_b1: layout.push(format!("dec{l}.ff.b1"), 1, h, Init::FanIn(d)),
                ff_w2: layout.push(format!("dec{l}.ff.w2"), d, h, Init::FanIn(h)),
                ff_b2: layout.push(format!("dec{l}.ff.b2"), 1, d, Init::FanIn(h)),
            })
            .collect();
        let head_w1 = layout.push("head.w1", h, d, Init::FanIn(d));
        let head_b1 = layout.push("head.b1", 1, h, Init::FanIn(d));
        let head_w2 = layout.push("head.w2", 1, h, Init::FanIn(h));
        let head_b2 = layout.push("head.b2", 1, 1, Init::FanIn(h));
        Ok(Self {
            hyper,
            layout,
            proj_w,
            proj_b,
            layers,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        })
    }

    pub fn hyper(&self) -> &ModelHyper {
        &self.hyper
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn check_input(&self, x: &Features) -> Result<usize> {
        let d = self.hyper.d;
        let flat = self.hyper.n_modes * d;
        if x.h_plan.len() != d {
            return Err(Error::Shape {
                what: "h_plan",
                expected: d.to_string(),
                got: x.h_plan.len().to_string(),
            });
        }
        if x.h_motion.len() % flat != 0 || x.h_motion.len() / flat != x.mask.len() {
            return Err(Error::Shape {
                what: "h_motion",
                expected: format!("{} x {flat}", x.mask.len()),
                got: x.h_motion.len().to_string(),
            });
        }
        Ok(x.mask.len())
    }

    /// Flattened motion rows of the visible agents.
    fn visible_rows(&self, x: &Features) -> Array2<f64> {
        let flat = self.hyper.n_modes * self.hyper.d;
        let active: Vec<usize> = (0..x.mask.len()).filter(|&a| x.mask[a] > 0.0).collect();
        let mut rows = Array2::zeros((active.len(), flat));
        for (r, &a) in active.iter().enumerate() {
            rows.row_mut(r)
                .assign(&ArrayView1::from(&x.h_motion[a * flat..(a + 1) * flat]));
        }
        rows
    }

    /// Per-agent motion tokens `relu(W_p x_a + b_p)` for every agent row
    /// (masked or not), `N_a x d`.
    pub fn project_motion(&self, params: &[f64], x: &Features) -> Result<Array2<f64>> {
        let n_a = self.check_input(x)?;
        let flat = self.hyper.n_modes * self.hyper.d;
        let rows = ndarray::ArrayView2::from_shape((n_a, flat), &x.h_motion[..]).expect("checked");
        let pre = rows.dot(&self.proj_w.mat(params).t()) + &self.proj_b.vec(params);
        Ok(pre.mapv(relu))
    }

    fn forward_cache(&self, params: &[f64], x: &Features) -> Result<Cache> {
        self.check_input(x)?;
        let d = self.hyper.d;
        let n_heads = self.hyper.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let xr = self.visible_rows(x);
        let pre = xr.dot(&self.proj_w.mat(params).t()) + &self.proj_b.vec(params);
        let m = pre.mapv(relu);
        let n_act = m.nrows();

        let mut z = Array1::from(x.h_plan.clone());
        let mut layers = Vec::with_capacity(self.layers.len());
        for slots in &self.layers {
            let (u, xhat1, rstd1) =
                layer_norm(z.view(), slots.ln1_g.vec(params), slots.ln1_b.vec(params));
            let q = slots.w_q.mat(params).dot(&u);
            let k = m.dot(&slots.w_k.mat(params).t());
            let v = m.dot(&slots.w_v.mat(params).t());
            let mut alpha = Array2::zeros((n_heads, n_act));
            let mut o = Array1::zeros(d);
            if n_act > 0 {
                for h in 0..n_heads {
                    let cols = s![h * dh..(h + 1) * dh];
                    let qh = q.slice(cols);
                    let scores: Vec<f64> = (0..n_act)
                        .map(|a| k.slice(s![a, h * dh..(h + 1) * dh]).dot(&qh) * scale)
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for a in 0..n_act {
                        let w = exps[a] / sum;
                        alpha[[h, a]] = w;
                        o.slice_mut(cols)
                            .scaled_add(w, &v.slice(s![a, h * dh..(h + 1) * dh]));
                    }
                }
            }
            let att = slots.w_o.mat(params).dot(&o);
            let z1 = &z + &att;
            let (w, xhat2, rstd2) =
                layer_norm(z1.view(), slots.ln2_g.vec(params), slots.ln2_b.vec(params));
            let f1 = slots.ff_w1.mat(params).dot(&w) + &slots.ff_b1.vec(params);
            let r = f1.mapv(relu);
            let f2 = slots.ff_w2.mat(params).dot(&r) + &slots.ff_b2.vec(params);
            z = &z1 + &f2;
            layers.push(LayerCache {
                xhat1,
                rstd1,
                u,
                q,
                k,
                v,
                alpha,
                o,
                xhat2,
                rstd2,
                w,
                f1,
                r,
            });
        }

        let h1 = self.head_w1.mat(params).dot(&z) + &self.head_b1.vec(params);
        let rh = h1.mapv(relu);
        let logit = self.head_w2.vec(params).dot(&rh) + params[self.head_b2.offset];
        Ok(Cache {
            x: xr,
            pre,
            m,
            layers,
            z,
            h1,
            rh,
            logit,
        })
    }

    /// Decoder output `z` for the plan token.
    pub fn decode(&self, params: &[f64], x: &Features) -> Result<Array1<f64>> {
        Ok(self.forward_cache(params, x)?.z)
    }

    pub fn logit(&self, params: &[f64], x: &Features) -> Result<f64> {
        Ok(self.forward_cache(params, x)?.logit)
    }

    /// Adds `dlogit(logit) * d(logit)/d(params)` into `grad`; returns the
    /// logit.
    pub fn accumulate_grad(
        &self,
        params: &[f64],
        x: &Features,
        dlogit: impl FnOnce(f64) -> f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let c = self.forward_cache(params, x)?;
        let dlogit = dlogit(c.logit);
        let d = self.hyper.d;
        let n_heads = self.hyper.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_act = c.m.nrows();

        // head
        self.head_w2.vec_mut(grad).scaled_add(dlogit, &c.rh);
        grad[self.head_b2.offset] += dlogit;
        let dh1: Array1<f64> =
            self.head_w2.vec(params).mapv(|w| w * dlogit) * c.h1.mapv(|v| f64::from(v > 0.0));
        add_outer(self.head_w1.mat_mut(grad), dh1.view(), c.z.view());
        add_vec(self.head_b1.vec_mut(grad), &dh1);
        let mut dz = self.head_w1.mat(params).t().dot(&dh1);

        let mut dm = Array2::<f64>::zeros((n_act, d));
        for (slots, lc) in self.layers.iter().zip(&c.layers).rev() {
            // feed-forward block
            let df2 = dz.clone();
            add_outer(slots.ff_w2.mat_mut(grad), df2.view(), lc.r.view());
            add_vec(slots.ff_b2.vec_mut(grad), &df2);
            let dr = slots.ff_w2.mat(params).t().dot(&df2);
            let df1 = dr * lc.f1.mapv(|v| f64::from(v > 0.0));
            add_outer(slots.ff_w1.mat_mut(grad), df1.view(), lc.w.view());
            add_vec(slots.ff_b1.vec_mut(grad), &df1);
            let dw = slots.ff_w1.mat(params).t().dot(&df1);
            add_vec(slots.ln2_b.vec_mut(grad), &dw);
            let dz1_ln = layer_norm_backward(
                &dw,
                &lc.xhat2,
                lc.rstd2,
                slots.ln2_g.vec(params),
                slots.ln2_g.vec_mut(grad),
            );
            let dz1 = &dz + &dz1_ln;

            // attention block
            add_outer(slots.w_o.mat_mut(grad), dz1.view(), lc.o.view());
            let d_o = slots.w_o.mat(params).t().dot(&dz1);
            let mut dq = Array1::<f64>::zeros(d);
            let mut dk = Array2::<f64>::zeros((n_act, d));
            let mut dv = Array2::<f64>::zeros((n_act, d));
            if n_act > 0 {
                for h in 0..n_heads {
                    let cols = s![h * dh..(h + 1) * dh];
                    let doh = d_o.slice(cols);
                    let qh = lc.q.slice(cols);
                    let dalpha: Vec<f64> = (0..n_act)
                        .map(|a| lc.v.slice(s![a, h * dh..(h + 1) * dh]).dot(&doh))
                        .collect();
                    let mean: f64 = (0..n_act).map(|a| lc.alpha[[h, a]] * dalpha[a]).sum();
                    for a in 0..n_act {
                        let al = lc.alpha[[h, a]];
                        dv.slice_mut(s![a, h * dh..(h + 1) * dh])
                            .scaled_add(al, &doh);
                        let ds = al * (dalpha[a] - mean) * scale;
                        dq.slice_mut(cols)
                            .scaled_add(ds, &lc.k.slice(s![a, h * dh..(h + 1) * dh]));
                        dk.slice_mut(s![a, h * dh..(h + 1) * dh])
                            .scaled_add(ds, &qh);
                    }
                }
                general_mat_mul(1.0, &dk.t(), &c.m, 1.0, &mut slots.w_k.mat_mut(grad));
                general_mat_mul(1.0, &dv.t(), &c.m, 1.0, &mut slots.w_v.mat_mut(grad));
                general_mat_mul(1.0, &dk, &slots.w_k.mat(params), 1.0, &mut dm);
                general_mat_mul(1.0, &dv, &slots.w_v.mat(params), 1.0, &mut dm);
            }
            add_outer(slots.w_q.mat_mut(grad), dq.view(), lc.u.view());
            let du = slots.w_q.mat(params).t().dot(&dq);
            add_vec(slots.ln1_b.vec_mut(grad), &du);
            let dz_ln = layer_norm_backward(
                &du,
                &lc.xhat1,
                lc.rstd1,
                slots.ln1_g.vec(params),
                slots.ln1_g.vec_mut(grad),
            );
            dz = &dz1 + &dz_ln;
        }

        if n_act > 0 {
            let dpre = dm * c.pre.mapv(|v| f64::from(v > 0.0));
            general_mat_mul(1.0, &dpre.t(), &c.x, 1.0, &mut self.proj_w.mat_mut(grad));
            add_vec(self.proj_b.vec_mut(grad), &dpre.sum_axis(Axis(0)));
        }
        Ok(c.logit)
    }
}
