//! Minimal reverse-mode differentiation over `[channels, height, width]`
//! tensors. A [`Tape`] records one forward pass; [`Tape::backward`] walks it in
//! reverse and accumulates gradients into every node.

use stda_core::warp::{warp_grid, warp_vjp, WarpField};
use stda_core::Grid;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, 1, vec![v])
    }

    pub fn from_grid(g: &Grid) -> Self {
        Self::new(g.channels(), g.height(), g.width(), g.data().to_vec())
    }

    pub fn to_grid(&self) -> Grid {
        Grid::from_vec(self.h, self.w, self.c, self.data.clone()).expect("tensor dims are consistent")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        k: usize,
        stride: usize,
        pad: usize,
        /// im2col matrix of the input, `[in*k*k, oh*ow]`.
        cols: Vec<f64>,
    },
    LeakyRelu(Var, f64),
    Upsample2(Var),
    Concat(Var, Var),
    Slice(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Mean(Var),
    SpatialMean(Var),
    L1Mean(Var, Var),
    Warp(Var, Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Broadcast rule for binary ops: equal shapes, or a single-channel right
/// operand spread over the left operand's channels, or a scalar right operand.
fn broadcast_index(a: &Tensor, b: &Tensor) -> impl Fn(usize) -> usize {
    let (plane, blen) = (a.plane(), b.len());
    let mode = if a.shape() == b.shape() {
        0
    } else if b.c == 1 && b.h == a.h && b.w == a.w {
        1
    } else if blen == 1 {
        2
    } else {
        panic!("cannot broadcast {:?} against {:?}", b.shape(), a.shape());
    };
    move |i| match mode {
        0 => i,
        1 => i % plane,
        _ => 0,
    }
}

fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let n = oh * ow;
    let mut cols = vec![0.0; x.c * k * k * n];
    for c in 0..x.c {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * x.w..][..x.w];
                    let dst = &mut row[oy * ow..][..ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < x.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], out: &mut Tensor, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) {
    let n = oh * ow;
    let (h, w, plane) = (out.h, out.w, out.plane());
    for c in 0..out.c {
        let dst = &mut out.data[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a (m x k) * b (k x n) + beta * c`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Square-kernel convolution. `weight` is `[out, in*k*k, 1]`, `bias` `[out, 1, 1]`.
    pub fn conv(&mut self, input: Var, weight: Var, bias: Var, k: usize, stride: usize, pad: usize) -> Var {
        let x = self.value(input);
        let wt = self.value(weight);
        let out_c = wt.c;
        assert_eq!(wt.h, x.c * k * k, "conv weight does not match input channels");
        let oh = (x.h + 2 * pad - k) / stride + 1;
        let ow = (x.w + 2 * pad - k) / stride + 1;
        let cols = im2col(x, k, stride, pad, oh, ow);
        let n = oh * ow;
        let mut out = Tensor::zeros(out_c, oh, ow);
        let b = &self.value(bias).data;
        for (o, chunk) in out.data.chunks_mut(n).enumerate() {
            chunk.fill(b[o]);
        }
        gemm(out_c, wt.h, n, &wt.data, false, &cols, false, 1.0, &mut out.data);
        self.push(
            Op::Conv {
                input,
                weight,
                bias,
                k,
                stride,
                pad,
                cols,
            },
            out,
        )
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.c, x.h, x.w, x.data.iter().map(|&v| f(v)).collect());
        self.push(op, out)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, Op::LeakyRelu(a, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |v| v.clamp(lo, hi))
    }

    /// `scale * a + offset`.
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        self.map(a, Op::Affine(a, scale), |v| scale * v + offset)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let idx = broadcast_index(x, y);
        let data = x.data.iter().enumerate().map(|(i, &v)| f(v, y.data[idx(i)])).collect();
        let out = Tensor::new(x.c, x.h, x.w, data);
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn upsample2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (h, w) = (2 * x.h, 2 * x.w);
        let mut out = Tensor::zeros(x.c, h, w);
        for c in 0..x.c {
            for y in 0..h {
                for xx in 0..w {
                    out.data[(c * h + y) * w + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
                }
            }
        }
        self.push(Op::Upsample2(a), out)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.h, x.w), (y.h, y.w), "concat spatial dims");
        let mut data = x.data.clone();
        data.extend_from_slice(&y.data);
        let out = Tensor::new(x.c + y.c, x.h, x.w, data);
        self.push(Op::Concat(a, b), out)
    }

    /// Channels `start..start + count`.
    pub fn slice(&mut self, a: Var, start: usize, count: usize) -> Var {
        let x = self.value(a);
        assert!(start + count <= x.c, "channel slice out of range");
        let p = x.plane();
        let out = Tensor::new(count, x.h, x.w, x.data[start * p..(start + count) * p].to_vec());
        self.push(Op::Slice(a, start), out)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.data.iter().sum::<f64>() / x.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    /// Per-channel mean over the spatial plane, giving `[c, 1, 1]`.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let p = x.plane();
        let data = x.data.chunks(p).map(|ch| ch.iter().sum::<f64>() / p as f64).collect();
        let out = Tensor::new(x.c, 1, 1, data);
        self.push(Op::SpatialMean(a), out)
    }

    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "l1 operands");
        let m = x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64;
        self.push(Op::L1Mean(a, b), Tensor::scalar(m))
    }

    /// Backward bilinear warp of `image` by a two-channel `(dx, dy)` field.
    pub fn warp(&mut self, image: Var, field: Var) -> Var {
        let out = {
            let (img, f) = (self.value(image), self.value(field));
            let grid = img.to_grid();
            let field = to_field(f);
            Tensor::from_grid(&warp_grid(&grid, &field).expect("warp operands share dims"))
        };
        self.push(Op::Warp(image, field), out)
    }

    /// Gradients of scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        let mut seed = self.value(root).clone();
        seed.data.fill(1.0);
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, f: &dyn Fn(&mut Tensor)| {
            let slot = &mut grads[v.0];
            if slot.is_none() {
                let x = &self.nodes[v.0].value;
                *slot = Some(Tensor::zeros(x.c, x.h, x.w));
            }
            f(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                k,
                stride,
                pad,
                cols,
            } => {
                let wt = self.value(*weight);
                let n = out.plane();
                let (out_c, kk) = (wt.c, wt.h);
                acc(*bias, &|b| {
                    for (o, ch) in g.data.chunks(n).enumerate() {
                        b.data[o] += ch.iter().sum::<f64>();
                    }
                });
                acc(*weight, &|gw| {
                    gemm(out_c, n, kk, &g.data, false, cols, true, 1.0, &mut gw.data)
                });
                acc(*input, &|gx| {
                    let mut dcols = vec![0.0; kk * n];
                    gemm(kk, out_c, n, &wt.data, true, &g.data, false, 0.0, &mut dcols);
                    col2im(&dcols, gx, *k, *stride, *pad, out.h, out.w);
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                acc(*a, &|ga| {
                    for ((d, &v), &gv) in ga.data.iter_mut().zip(&x.data).zip(&g.data) {
                        *d += if v > 0.0 { gv } else { slope * gv };
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &|ga| {
                for ((d, &y), &gv) in ga.data.iter_mut().zip(&out.data).zip(&g.data) {
                    *d += gv * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &|ga| {
                for ((d, &y), &gv) in ga.data.iter_mut().zip(&out.data).zip(&g.data) {
                    *d += gv * y * (1.0 - y);
                }
            }),
            Op::Log(a) => {
                let x = self.value(*a);
                acc(*a, &|ga| {
                    for ((d, &v), &gv) in ga.data.iter_mut().zip(&x.data).zip(&g.data) {
                        *d += gv / v;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                acc(*a, &|ga| {
                    for ((d, &v), &gv) in ga.data.iter_mut().zip(&x.data).zip(&g.data) {
                        if v > *lo && v < *hi {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Affine(a, scale) => acc(*a, &|ga| {
                for (d, &gv) in ga.data.iter_mut().zip(&g.data) {
                    *d += scale * gv;
                }
            }),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &|ga| {
                    for (d, &gv) in ga.data.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                });
                let idx = broadcast_index(out, self.value(*b));
                acc(*b, &|gb| {
                    for (i, &gv) in g.data.iter().enumerate() {
                        gb.data[idx(i)] += sign * gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let idx = broadcast_index(x, y);
                acc(*a, &|ga| {
                    for (i, (d, &gv)) in ga.data.iter_mut().zip(&g.data).enumerate() {
                        *d += gv * y.data[idx(i)];
                    }
                });
                acc(*b, &|gb| {
                    for (i, &gv) in g.data.iter().enumerate() {
                        gb.data[idx(i)] += gv * x.data[i];
                    }
                });
            }
            Op::Upsample2(a) => {
                let x = self.value(*a);
                acc(*a, &|ga| {
                    for c in 0..out.c {
                        for y in 0..out.h {
                            for xx in 0..out.w {
                                ga.data[(c * x.h + y / 2) * x.w + xx / 2] += g.data[(c * out.h + y) * out.w + xx];
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let split = self.value(*a).len();
                acc(*a, &|ga| {
                    for (d, &gv) in ga.data.iter_mut().zip(&g.data[..split]) {
                        *d += gv;
                    }
                });
                acc(*b, &|gb| {
                    for (d, &gv) in gb.data.iter_mut().zip(&g.data[split..]) {
                        *d += gv;
                    }
                });
            }
            Op::Slice(a, start) => {
                let off = start * out.plane();
                acc(*a, &|ga| {
                    for (d, &gv) in ga.data[off..off + g.len()].iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g.data[0] / n;
                acc(*a, &|ga| ga.data.iter_mut().for_each(|d| *d += gv));
            }
            Op::SpatialMean(a) => {
                let p = self.value(*a).plane();
                acc(*a, &|ga| {
                    for (ch, &gv) in ga.data.chunks_mut(p).zip(&g.data) {
                        ch.iter_mut().for_each(|d| *d += gv / p as f64);
                    }
                });
            }
            Op::L1Mean(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let s = g.data[0] / x.len() as f64;
                let sign = |i: usize| {
                    let d = x.data[i] - y.data[i];
                    if d > 0.0 {
                        s
                    } else if d < 0.0 {
                        -s
                    } else {
                        0.0
                    }
                };
                acc(*a, &|ga| {
                    ga.data.iter_mut().enumerate().for_each(|(i, d)| *d += sign(i))
                });
                acc(*b, &|gb| {
                    gb.data.iter_mut().enumerate().for_each(|(i, d)| *d -= sign(i))
                });
            }
            Op::Warp(image, field) => {
                let grid = self.value(*image).to_grid();
                let f = to_field(self.value(*field));
                let (gi, gf) = warp_vjp(&grid, &f, &g.to_grid()).expect("warp operands share dims");
                acc(*image, &|d| d.data.iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b));
                acc(*field, &|d| {
                    let p = gf.dx().len();
                    d.data[..p].iter_mut().zip(gf.dx()).for_each(|(a, b)| *a += b);
                    d.data[p..].iter_mut().zip(gf.dy()).for_each(|(a, b)| *a += b);
                });
            }
        }
    }
}

pub(crate) fn to_field(t: &Tensor) -> WarpField {
    assert_eq!(t.c, 2, "a field has two channels");
    let p = t.plane();
    WarpField::new(t.h, t.w, t.data[..p].to_vec(), t.data[p..].to_vec()).expect("finite field")
}

pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }
}
