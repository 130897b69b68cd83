//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly, stores its value,
//! and records how to push a cotangent back to its inputs. Gradients are only
//! propagated into nodes that (transitively) depend on a leaf created with
//! `requires_grad = true`, so frozen sub-networks cost a forward pass only.
//!
//! Batched kernels split work per sample and reduce partial weight gradients in
//! sample order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::fit_diagonal_gaussian;
use crate::tensor::{dot, gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Blend(usize, usize, f64),
    LeakyRelu(usize, f64),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    Reshape(usize),
    Upsample2x(usize),
    AvgPool2x(usize),
    PixelNorm(usize, f64),
    NormalizeRows(usize),
    SpectralDivide {
        w: usize,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
    KlUnitGaussian(usize),
    MeanAbsDiff(usize, usize),
    MeanCosineDistance(usize, usize),
    MeanSquaredError(usize, usize),
    MaxConst(usize, f64),
    Mean(usize),
    Crop {
        x: usize,
        top: usize,
        left: usize,
    },
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        Var(self.values.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.requires_grad[i])
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Scale(a.0, factor), rg)
    }

    /// `(1 - alpha) * coarse + alpha * fine`.
    pub fn blend(&mut self, coarse: Var, fine: Var, alpha: f64) -> Result<Var> {
        self.same_shape("blend", coarse, fine)?;
        let out = self.zip_map(coarse, fine, |c, f| (1.0 - alpha) * c + alpha * f);
        let rg = self.rg(&[coarse.0, fine.0]);
        Ok(self.push(out, Op::Blend(coarse.0, fine.0, alpha), rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a.0]);
        self.push(out, Op::LeakyRelu(a.0, slope), rg)
    }

    /// 2-D convolution of `x: [N, C, H, W]` with `w: [O, C, k, k]` and optional bias `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err("conv2d input/weight", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d bias", self.shape(b), &[ws[0]]));
            }
        }
        let k = ws[2];
        if stride == 0 || xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(shape_err("conv2d geometry", &xs, &ws));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let out = conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            geom,
        );
        let mut ids = vec![x.0, w.0];
        if let Some(b) = b {
            ids.push(b.0);
        }
        let rg = self.rg(&ids);
        let out = Tensor::new(&[geom.n, geom.o, geom.ho, geom.wo], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            rg,
        ))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; sa[0] * sb[1]];
        gemm(
            sa[0],
            sa[1],
            sb[1],
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a.0, b.0]);
        let out = Tensor::new(&[sa[0], sb[1]], out)?;
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    /// Adds a `[m]` bias to every row of `[n, m]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(shape_err("add_row_bias", &sx, &sb));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(sx[1]) {
            for (v, bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        let rg = self.rg(&[x.0, b.0]);
        Ok(self.push(out, Op::AddRowBias(x.0, b.0), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Reshape(x.0), rg))
    }

    /// Nearest-neighbour 2x spatial upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample2x expects 4-D, got {s:?}")));
        }
        let out = upsample_nearest(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let rg = self.rg(&[x.0]);
        let out = Tensor::new(&[s[0], s[1], 2 * s[2], 2 * s[3]], out)?;
        Ok(self.push(out, Op::Upsample2x(x.0), rg))
    }

    /// 2x2 block mean of `[N, C, H, W]`.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2x expects even 4-D, got {s:?}")));
        }
        let out = block_mean(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let rg = self.rg(&[x.0]);
        let out = Tensor::new(&[s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        Ok(self.push(out, Op::AvgPool2x(x.0), rg))
    }

    pub fn pixel_norm(&mut self, x: Var, epsilon: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] == 0 {
            return Err(Error::Shape(format!("pixel_norm expects [N,C,H,W], got {s:?}")));
        }
        let out = crate::normalization::pixel_norm_values(self.value(x).data(), s[0], s[1], s[2] * s[3], epsilon);
        let rg = self.rg(&[x.0]);
        let out = Tensor::new(&s, out)?;
        Ok(self.push(out, Op::PixelNorm(x.0, epsilon), rg))
    }

    /// Projects every row of `[n, d]` onto the unit sphere.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("normalize_rows expects 2-D, got {s:?}")));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(s[1]) {
            let n = dot(row, row).sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::NormalizeRows(x.0), rg))
    }

    /// `w / sigma` with `sigma = u^T W v` and `u`, `v` held constant.
    pub(crate) fn spectral_divide(&mut self, w: Var, u: Vec<f64>, v: Vec<f64>, sigma: f64) -> Var {
        let out = self.value(w).map(|x| x / sigma);
        let rg = self.rg(&[w.0]);
        self.push(out, Op::SpectralDivide { w: w.0, u, v, sigma }, rg)
    }

    /// Closed-form KL between the batch-fitted diagonal Gaussian of `[M, D]` codes and N(0, I).
    pub fn kl_unit_gaussian(&mut self, codes: Var) -> Result<Var> {
        let s = self.shape(codes).to_vec();
        if s.len() != 2 || s[0] < 2 {
            return Err(Error::Shape(format!("kl needs [M>=2, D] codes, got {s:?}")));
        }
        let fit = fit_diagonal_gaussian(self.value(codes).data(), s[0], s[1]);
        let rg = self.rg(&[codes.0]);
        Ok(self.push(Tensor::scalar(fit.kl), Op::KlUnitGaussian(codes.0), rg))
    }

    /// Mean absolute difference over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mean_abs_diff", a, b)?;
        let n = self.value(a).numel().max(1) as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::scalar(s / n), Op::MeanAbsDiff(a.0, b.0), rg))
    }

    /// Mean over rows of `1 - <a_i, b_i>`.
    pub fn mean_cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mean_cosine_distance", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("expected 2-D codes, got {s:?}")));
        }
        let total: f64 = self
            .value(a)
            .data()
            .chunks(s[1])
            .zip(self.value(b).data().chunks(s[1]))
            .map(|(x, y)| 1.0 - dot(x, y))
            .sum();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::scalar(total / s[0] as f64),
            Op::MeanCosineDistance(a.0, b.0),
            rg,
        ))
    }

    pub fn mean_squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mean_squared_error", a, b)?;
        let n = self.value(a).numel().max(1) as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::scalar(s / n), Op::MeanSquaredError(a.0, b.0), rg))
    }

    /// Elementwise `max(x, floor)`. The gradient passes where `x >= floor`.
    pub fn max_const(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor));
        let rg = self.rg(&[x.0]);
        self.push(out, Op::MaxConst(x.0, floor), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(m), Op::Mean(x.0), rg)
    }

    /// Spatial crop of `[N, C, H, W]` to `[N, C, height, width]` at `(top, left)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || top + height > s[2] || left + width > s[3] {
            return Err(Error::Shape(format!(
                "crop ({top},{left},{height},{width}) outside {s:?}"
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * height * width);
        for plane in src.chunks(s[2] * s[3]) {
            for i in top..top + height {
                out.extend_from_slice(&plane[i * s[3] + left..i * s[3] + left + width]);
            }
        }
        let rg = self.rg(&[x.0]);
        let out = Tensor::new(&[s[0], s[1], height, width], out)?;
        Ok(self.push(out, Op::Crop { x: x.0, top, left }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every grad-requiring node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            if !self.requires_grad[id] {
                continue;
            }
            let g = match &self.ops[id] {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |i: usize| self.requires_grad[i];
        let mut acc = |i: usize, t: Tensor| match &mut grads[i] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let gd = g.data();
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Scale(a, f) => acc(*a, g.map(|v| v * f)),
            Op::Blend(c, f, alpha) => {
                if needs(*c) {
                    acc(*c, g.map(|v| (1.0 - alpha) * v));
                }
                if needs(*f) {
                    acc(*f, g.map(|v| alpha * v));
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.values[*a].data();
                let data = gd
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { slope * gv })
                    .collect();
                acc(*a, Tensor::new(g.shape(), data).unwrap());
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv_backward(
                    self.values[*x].data(),
                    self.values[*w].data(),
                    gd,
                    *geom,
                    needs(*x),
                    needs(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(self.values[*x].shape(), dx).unwrap());
                }
                if let Some(dw) = dw {
                    acc(*w, Tensor::new(self.values[*w].shape(), dw).unwrap());
                }
                if let Some(b) = b {
                    if needs(*b) {
                        acc(*b, Tensor::new(&[geom.o], db).unwrap());
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.values[*a].shape(), self.values[*b].shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, gd, false, self.values[*b].data(), true, &mut da, 0.0);
                    acc(*a, Tensor::new(sa, da).unwrap());
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, self.values[*a].data(), true, gd, false, &mut db, 0.0);
                    acc(*b, Tensor::new(sb, db).unwrap());
                }
            }
            Op::AddRowBias(x, b) => {
                if needs(*x) {
                    acc(*x, g.clone());
                }
                if needs(*b) {
                    let m = self.values[*b].numel();
                    let mut db = vec![0.0; m];
                    for row in gd.chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::new(&[m], db).unwrap());
                }
            }
            Op::Reshape(x) => {
                acc(*x, g.clone().reshape(self.values[*x].shape()).unwrap());
            }
            Op::Upsample2x(x) => {
                let s = self.values[*x].shape();
                let dx = block_mean(gd, s[0] * s[1], 2 * s[2], 2 * s[3])
                    .into_iter()
                    .map(|v| 4.0 * v)
                    .collect();
                acc(*x, Tensor::new(s, dx).unwrap());
            }
            Op::AvgPool2x(x) => {
                let s = self.values[*x].shape();
                let dx = upsample_nearest(gd, s[0] * s[1], s[2] / 2, s[3] / 2)
                    .into_iter()
                    .map(|v| 0.25 * v)
                    .collect();
                acc(*x, Tensor::new(s, dx).unwrap());
            }
            Op::PixelNorm(x, eps) => {
                let s = self.values[*x].shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let xv = self.values[*x].data();
                let mut dx = vec![0.0; xv.len()];
                for ni in 0..n {
                    let base = ni * c * hw;
                    for p in 0..hw {
                        let mut ms = 0.0;
                        let mut gx = 0.0;
                        for ci in 0..c {
                            let idx = base + ci * hw + p;
                            ms += xv[idx] * xv[idx];
                            gx += gd[idx] * xv[idx];
                        }
                        let r2 = ms / c as f64 + eps;
                        let r = r2.sqrt();
                        for ci in 0..c {
                            let idx = base + ci * hw + p;
                            dx[idx] = gd[idx] / r - xv[idx] * gx / (c as f64 * r2 * r);
                        }
                    }
                }
                acc(*x, Tensor::new(s, dx).unwrap());
            }
            Op::NormalizeRows(x) => {
                let s = self.values[*x].shape();
                let xv = self.values[*x].data();
                let yv = self.values[id].data();
                let mut dx = vec![0.0; xv.len()];
                for ((dxr, xr), (yr, gr)) in dx
                    .chunks_mut(s[1])
                    .zip(xv.chunks(s[1]))
                    .zip(yv.chunks(s[1]).zip(gd.chunks(s[1])))
                {
                    let n = dot(xr, xr).sqrt().max(1e-12);
                    let yg = dot(yr, gr);
                    for ((d, &yy), &gg) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = (gg - yy * yg) / n;
                    }
                }
                acc(*x, Tensor::new(s, dx).unwrap());
            }
            Op::SpectralDivide { w, u, v, sigma } => {
                let wv = self.values[*w].data();
                let gw = dot(gd, wv);
                let cols = v.len();
                let coef = gw / (sigma * sigma);
                let dw = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv / sigma - coef * u[i / cols] * v[i % cols])
                    .collect();
                acc(*w, Tensor::new(self.values[*w].shape(), dw).unwrap());
            }
            Op::KlUnitGaussian(z) => {
                let s = self.values[*z].shape();
                let (m, d) = (s[0], s[1]);
                let zv = self.values[*z].data();
                let fit = fit_diagonal_gaussian(zv, m, d);
                let scale = gd[0] / m as f64;
                let mut dz = vec![0.0; zv.len()];
                for (dr, zr) in dz.chunks_mut(d).zip(zv.chunks(d)) {
                    for j in 0..d {
                        // d/dvar is zero where the variance floor is active.
                        let dvar = if fit.floored[j] { 0.0 } else { 0.5 - 0.5 / fit.var[j] };
                        dr[j] = scale * (fit.mean[j] + dvar * 2.0 * (zr[j] - fit.mean[j]));
                    }
                }
                acc(*z, Tensor::new(s, dz).unwrap());
            }
            Op::MeanAbsDiff(a, b) => {
                let av = self.values[*a].data();
                let bv = self.values[*b].data();
                let scale = gd[0] / av.len().max(1) as f64;
                let da: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let shape = self.values[*a].shape();
                if needs(*b) {
                    acc(*b, Tensor::new(shape, da.iter().map(|v| -v).collect()).unwrap());
                }
                if needs(*a) {
                    acc(*a, Tensor::new(shape, da).unwrap());
                }
            }
            Op::MeanCosineDistance(a, b) => {
                let shape = self.values[*a].shape();
                let scale = -gd[0] / shape[0] as f64;
                if needs(*a) {
                    acc(*a, self.values[*b].map(|v| v * scale));
                }
                if needs(*b) {
                    acc(*b, self.values[*a].map(|v| v * scale));
                }
            }
            Op::MeanSquaredError(a, b) => {
                let av = self.values[*a].data();
                let bv = self.values[*b].data();
                let scale = 2.0 * gd[0] / av.len().max(1) as f64;
                let da: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
                let shape = self.values[*a].shape();
                if needs(*b) {
                    acc(*b, Tensor::new(shape, da.iter().map(|v| -v).collect()).unwrap());
                }
                if needs(*a) {
                    acc(*a, Tensor::new(shape, da).unwrap());
                }
            }
            Op::MaxConst(x, floor) => {
                let xv = self.values[*x].data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v >= *floor { gv } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(g.shape(), dx).unwrap());
            }
            Op::Mean(x) => {
                let n = self.values[*x].numel().max(1) as f64;
                acc(*x, Tensor::full(self.values[*x].shape(), gd[0] / n));
            }
            Op::Crop { x, top, left } => {
                let s = self.values[*x].shape();
                let (h, w) = (g.shape()[2], g.shape()[3]);
                let mut dx = vec![0.0; self.values[*x].numel()];
                for (plane, gp) in dx.chunks_mut(s[2] * s[3]).zip(gd.chunks(h * w)) {
                    for i in 0..h {
                        let row = (top + i) * s[3] + left;
                        plane[row..row + w].copy_from_slice(&gp[i * w..(i + 1) * w]);
                    }
                }
                acc(*x, Tensor::new(s, dx).unwrap());
            }
        }
    }
}

fn upsample_nearest(src: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * 4 * h * w];
    for (p, plane) in src.chunks(h * w).enumerate().take(planes) {
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[i * 2 * w + j] = plane[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn block_mean(src: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * ho * wo];
    for (p, plane) in src.chunks(h * w).enumerate().take(planes) {
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let a = plane[2 * i * w + 2 * j];
                let b = plane[2 * i * w + 2 * j + 1];
                let c = plane[(2 * i + 1) * w + 2 * j];
                let d = plane[(2 * i + 1) * w + 2 * j + 1];
                dst[i * wo + j] = 0.25 * ((a + b) + (c + d));
            }
        }
    }
    out
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let howo = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * howo..(row + 1) * howo];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[oi * g.wo + oj] = if ii >= 0
                            && jj >= 0
                            && (ii as usize) < g.h
                            && (jj as usize) < g.w
                        {
                            plane[ii as usize * g.w + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let howo = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * howo..(row + 1) * howo];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            plane[ii as usize * g.w + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let howo = g.ho * g.wo;
    let chw = g.c * g.h * g.w;
    let mut out = vec![0.0; g.n * g.o * howo];
    out.par_chunks_mut(g.o * howo)
        .enumerate()
        .for_each(|(ni, dst)| {
            let xs = &x[ni * chw..(ni + 1) * chw];
            let owned;
            let cols: &[f64] = if g.is_pointwise() {
                xs
            } else {
                let mut c = vec![0.0; g.ckk() * howo];
                im2col(xs, &g, &mut c);
                owned = c;
                &owned
            };
            gemm(g.o, g.ckk(), howo, w, false, cols, false, dst, 0.0);
            if let Some(b) = b {
                for (oc, row) in dst.chunks_mut(howo).enumerate() {
                    row.iter_mut().for_each(|v| *v += b[oc]);
                }
            }
        });
    out
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>);

fn conv_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: ConvGeom,
    need_x: bool,
    need_w: bool,
) -> ConvGrads {
    let howo = g.ho * g.wo;
    let chw = g.c * g.h * g.w;
    let ckk = g.ckk();
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|ni| {
            let go = &gout[ni * g.o * howo..(ni + 1) * g.o * howo];
            let mut dw = Vec::new();
            if need_w {
                dw = vec![0.0; g.o * ckk];
                let xs = &x[ni * chw..(ni + 1) * chw];
                if g.is_pointwise() {
                    gemm(g.o, howo, ckk, go, false, xs, true, &mut dw, 0.0);
                } else {
                    let mut cols = vec![0.0; ckk * howo];
                    im2col(xs, &g, &mut cols);
                    gemm(g.o, howo, ckk, go, false, &cols, true, &mut dw, 0.0);
                }
            }
            let mut dx = Vec::new();
            if need_x {
                if g.is_pointwise() {
                    dx = vec![0.0; chw];
                    gemm(ckk, g.o, howo, w, true, go, false, &mut dx, 0.0);
                } else {
                    let mut dcols = vec![0.0; ckk * howo];
                    gemm(ckk, g.o, howo, w, true, go, false, &mut dcols, 0.0);
                    dx = vec![0.0; chw];
                    col2im(&dcols, &g, &mut dx);
                }
            }
            (dx, dw)
        })
        .collect();
    let mut db = vec![0.0; g.o];
    for ni in 0..g.n {
        for (oc, d) in db.iter_mut().enumerate() {
            let start = (ni * g.o + oc) * howo;
            *d += gout[start..start + howo].iter().sum::<f64>();
        }
    }
    let dw = need_w.then(|| {
        let mut total = vec![0.0; g.o * ckk];
        for (_, dw) in &per_sample {
            for (t, v) in total.iter_mut().zip(dw) {
                *t += v;
            }
        }
        total
    });
    let dx = need_x.then(|| {
        let mut total = Vec::with_capacity(g.n * chw);
        for (dx, _) in &per_sample {
            total.extend_from_slice(dx);
        }
        total
    });
    (dx, dw, db)
}
