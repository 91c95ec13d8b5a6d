//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse creation order and returns
//! gradients for every leaf created with `needs_grad`. Nodes that do not
//! depend on such a leaf are skipped entirely, so frozen weights cost nothing
//! in the backward pass.
//!
//! Shape errors inside the graph are programmer errors and panic; public
//! operations validate user-facing shapes before building nodes.

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    Abs(Var),
    Silu(Var),
    Softplus(Var),
    Sigmoid(Var),
    ClampAbs(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Outer(Var, usize),
    Stack(Vec<Var>),
    Concat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Film { x: Var, scale: Var, shift: Var },
    Upsample2(Var),
    TemporalConv { x: Var, w: Var },
    Stencil { x: Var, kernel: Vec<f64>, size: usize },
    ChannelMix { x: Var, weights: Vec<f64> },
    SpatialMean(Var),
    Warp { frame: Var, flow: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(&self.shapes[v.0], g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(&self.shapes[v.0], g),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: operand shapes differ");
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sign with a zero subgradient at exact ties.
fn tie_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let hw_o = self.ho * self.wo;
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let out = &mut cols[row * hw_o..(row + 1) * hw_o];
                    for oh in 0..self.ho {
                        let ih = (oh * s + ki) as isize - p;
                        for ow in 0..self.wo {
                            let iw = (ow * s + kj) as isize - p;
                            out[oh * self.wo + ow] = if ih >= 0
                                && iw >= 0
                                && (ih as usize) < self.h
                                && (iw as usize) < self.w
                            {
                                plane[ih as usize * self.w + iw as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let hw_o = self.ho * self.wo;
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * hw_o..(row + 1) * hw_o];
                    for oh in 0..self.ho {
                        let ih = (oh * s + ki) as isize - p;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        for ow in 0..self.wo {
                            let iw = (ow * s + kj) as isize - p;
                            if iw < 0 || iw as usize >= self.w {
                                continue;
                            }
                            plane[ih as usize * self.w + iw as usize] += src[oh * self.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by forward values; a proxy for the peak memory of a backward pass.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * 8).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "add");
        let v = va.zip_map(vb, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "sub");
        let v = va.zip_map(vb, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mul");
        let v = va.zip_map(vb, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "div");
        let v = va.zip_map(vb, |x, y| x / y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(v, Op::Offset(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(&[a]);
        self.push(v, Op::Square(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(&[a]);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu);
        let ng = self.ng(&[a]);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let ng = self.ng(&[a]);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// Clamps into `[-limit, limit]`; zero gradient where clamped.
    pub fn clamp_abs(&mut self, a: Var, limit: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(-limit, limit));
        let ng = self.ng(&[a]);
        self.push(v, Op::ClampAbs(a, limit), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(&[a]);
        self.push(v, Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape: element count differs");
        let ng = self.ng(&[a]);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Sub-tensor `index` along the leading axis.
    pub fn outer(&mut self, a: Var, index: usize) -> Var {
        assert!(index < self.shape(a)[0], "outer: index out of range");
        let v = self.value(a).outer(index);
        let ng = self.ng(&[a]);
        self.push(v, Op::Outer(a, index), ng)
    }

    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Tensor::stack(&values).expect("stack: shapes differ");
        let ng = self.ng(parts);
        self.push(v, Op::Stack(parts.to_vec()), ng)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &tail[..], "concat: trailing shapes differ");
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let ng = self.ng(parts);
        self.push(
            Tensor::from_parts(&shape, data),
            Op::Concat(parts.to_vec()),
            ng,
        )
    }

    /// Rows `ids` of a `[V, d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < rows, "gather_rows: id out of range");
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let v = Tensor::from_parts(&[ids.len(), d], data);
        let ng = self.ng(&[table]);
        self.push(v, Op::GatherRows(table, ids.to_vec()), ng)
    }

    /// `[R, d]` to `[d]` by averaging rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, d) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; d];
        for row in t.data().chunks(d) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(&[d], out), Op::MeanRows(a), ng)
    }

    /// `x [B, in]`, `w [out, in]`, `b [out]` to `[B, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, din) = (xv.shape()[0], xv.shape()[1]);
        let dout = wv.shape()[0];
        assert_eq!(wv.shape()[1], din, "linear: input width");
        assert_eq!(bv.shape(), &[dout], "linear: bias");
        let mut out = vec![0.0; batch * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(bv.data());
        }
        gemm(batch, din, dout, xv.data(), false, wv.data(), true, &mut out, 1.0);
        let ng = self.ng(&[x, w, b]);
        self.push(
            Tensor::from_parts(&[batch, dout], out),
            Op::Linear { x, w, b },
            ng,
        )
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> ConvGeom {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 4, "conv2d: input must be [B, C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d: weight must be [Co, Ci, k, k]");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        let k = ws[2];
        let (h, wd) = (xs[2], xs[3]);
        ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h,
            w: wd,
            cout: ws[0],
            k,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
            stride,
            pad,
        }
    }

    /// Zero-padded 2-D convolution over `[B, Ci, H, W]` with weight `[Co, Ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let g = self.conv_geom(x, w, stride, pad);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(bv.shape(), &[g.cout], "conv2d: bias");
        let hw_o = g.ho * g.wo;
        let in_sz = g.cin * g.h * g.w;
        let mut out = vec![0.0; g.batch * g.cout * hw_o];
        let mut cols = vec![0.0; g.ckk() * hw_o];
        for bi in 0..g.batch {
            g.im2col(&xv.data()[bi * in_sz..(bi + 1) * in_sz], &mut cols);
            let ob = &mut out[bi * g.cout * hw_o..(bi + 1) * g.cout * hw_o];
            for (co, row) in ob.chunks_mut(hw_o).enumerate() {
                row.fill(bv.data()[co]);
            }
            gemm(g.cout, g.ckk(), hw_o, wv.data(), false, &cols, false, ob, 1.0);
        }
        let ng = self.ng(&[x, w, b]);
        self.push(
            Tensor::from_parts(&[g.batch, g.cout, g.ho, g.wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    /// Feature-wise modulation `x * (1 + scale[c]) + shift[c]` for `x [F, C, ...]`.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[1];
        assert_eq!(self.shape(scale), &[c], "film: scale");
        assert_eq!(self.shape(shift), &[c], "film: shift");
        let per: usize = xv.shape()[2..].iter().product();
        let (s, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut out = xv.data().to_vec();
        for (i, chunk) in out.chunks_mut(per).enumerate() {
            let ch = i % c;
            let (m, a) = (1.0 + s[ch], sh[ch]);
            for o in chunk {
                *o = *o * m + a;
            }
        }
        let v = Tensor::from_parts(xv.shape(), out);
        let ng = self.ng(&[x, scale, shift]);
        self.push(v, Op::Film { x, scale, shift }, ng)
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let v = Tensor::from_parts(&[s[0], s[1], 2 * h, 2 * w], out);
        let ng = self.ng(&[x]);
        self.push(v, Op::Upsample2(x), ng)
    }

    /// Depthwise 3-tap convolution along the leading (frame) axis of `[N, C, ...]`
    /// with weight `[C, 3]`; frames outside the clip contribute zero.
    pub fn temporal_conv(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (n, c) = (s[0], s[1]);
        let per: usize = s[2..].iter().product();
        assert_eq!(self.shape(w), &[c, 3], "temporal_conv: weight");
        let wv = self.value(w).data();
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for f in 0..n {
            for ch in 0..c {
                let dst = &mut out[(f * c + ch) * per..(f * c + ch + 1) * per];
                for k in 0..3 {
                    let src_f = f as isize + k as isize - 1;
                    if src_f < 0 || src_f as usize >= n {
                        continue;
                    }
                    let wk = wv[ch * 3 + k];
                    let src = &xd[(src_f as usize * c + ch) * per..(src_f as usize * c + ch + 1) * per];
                    for (d, x) in dst.iter_mut().zip(src) {
                        *d += wk * x;
                    }
                }
            }
        }
        let v = Tensor::from_parts(s, out);
        let ng = self.ng(&[x, w]);
        self.push(v, Op::TemporalConv { x, w }, ng)
    }

    /// Correlation of every trailing `[H, W]` plane with a fixed `size x size`
    /// kernel, replicating border pixels.
    pub fn stencil(&mut self, x: Var, kernel: &[f64], size: usize) -> Var {
        assert_eq!(kernel.len(), size * size, "stencil: kernel size");
        assert!(size % 2 == 1, "stencil: kernel must be odd");
        let xv = self.value(x);
        let s = xv.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
            stencil_plane(src, dst, h, w, kernel, size);
        }
        let v = Tensor::from_parts(s, out);
        let ng = self.ng(&[x]);
        self.push(
            v,
            Op::Stencil {
                x,
                kernel: kernel.to_vec(),
                size,
            },
            ng,
        )
    }

    /// Weighted sum over the leading axis with fixed weights: `[C, ...]` to `[...]`.
    pub fn channel_mix(&mut self, x: Var, weights: &[f64]) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s[0], weights.len(), "channel_mix: weight count");
        let per: usize = s[1..].iter().product();
        let mut out = vec![0.0; per];
        for (chunk, &wt) in xv.data().chunks(per).zip(weights) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += wt * x;
            }
        }
        let v = Tensor::from_parts(&s[1..], out);
        let ng = self.ng(&[x]);
        self.push(
            v,
            Op::ChannelMix {
                x,
                weights: weights.to_vec(),
            },
            ng,
        )
    }

    /// Global average over spatial axes: `[B, C, H, W]` to `[B, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let per = s[2] * s[3];
        let out: Vec<f64> = xv
            .data()
            .chunks(per)
            .map(|c| c.iter().sum::<f64>() / per as f64)
            .collect();
        let v = Tensor::from_parts(&[s[0], s[1]], out);
        let ng = self.ng(&[x]);
        self.push(v, Op::SpatialMean(x), ng)
    }

    /// Bilinear backward warp of `frame [C, H, W]` by `flow [2, H, W]`:
    /// `out(x) = frame(x + flow(x))`, sample positions clamped to the border.
    /// Differentiable in both arguments (zero flow gradient where clamped).
    pub fn warp(&mut self, frame: Var, flow: Var) -> Var {
        let fs = self.shape(frame).to_vec();
        let ws = self.shape(flow);
        assert_eq!(fs.len(), 3, "warp: frame must be [C, H, W]");
        assert_eq!(ws, &[2, fs[1], fs[2]], "warp: flow must be [2, H, W]");
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let src = self.value(frame).data();
        let fl = self.value(flow).data();
        let mut out = vec![0.0; c * h * w];
        for p in 0..h * w {
            let s = BilinearSample::new(p, h, w, fl[p], fl[h * w + p]);
            for ch in 0..c {
                out[ch * h * w + p] = s.eval(&src[ch * h * w..(ch + 1) * h * w]);
            }
        }
        let ng = self.ng(&[frame, flow]);
        self.push(Tensor::from_parts(&fs, out), Op::Warp { frame, flow }, ng)
    }

    /// Gradients of the scalar `root` with respect to every `needs_grad` leaf.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward: root must be scalar");
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &gy, &mut grads);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, op: &Op, y: &Tensor, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        add_into(g, gy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, *b) {
                    for (g, d) in g.iter_mut().zip(gy) {
                        *g -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(vb) {
                        *g += d * y;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for ((g, d), x) in g.iter_mut().zip(gy).zip(va) {
                        *g += d * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, d), den) in g.iter_mut().zip(gy).zip(vb) {
                        *g += d / den;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for (((g, d), den), q) in g.iter_mut().zip(gy).zip(vb).zip(y.data()) {
                        *g -= d * q / den;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(g) = self.acc(grads, *a) {
                    for (g, d) in g.iter_mut().zip(gy) {
                        *g += d * c;
                    }
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, gy);
                }
            }
            Op::Square(a) => self.unary(grads, *a, gy, |x, _| 2.0 * x),
            Op::Abs(a) => self.unary(grads, *a, gy, |x, _| tie_sign(x)),
            Op::Silu(a) => self.unary(grads, *a, gy, |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }),
            Op::Softplus(a) => self.unary(grads, *a, gy, |x, _| sigmoid(x)),
            Op::Sigmoid(a) => {
                let yd = y.data().to_vec();
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, d), s) in g.iter_mut().zip(gy).zip(&yd) {
                        *g += d * s * (1.0 - s);
                    }
                }
            }
            Op::ClampAbs(a, limit) => {
                let lim = *limit;
                self.unary(grads, *a, gy, move |x, _| if x.abs() <= lim { 1.0 } else { 0.0 })
            }
            Op::Sum(a) => {
                if let Some(g) = self.acc(grads, *a) {
                    for g in g.iter_mut() {
                        *g += gy[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                if let Some(g) = self.acc(grads, *a) {
                    for g in g.iter_mut() {
                        *g += gy[0] / n;
                    }
                }
            }
            Op::Outer(a, index) => {
                let inner = gy.len();
                if let Some(g) = self.acc(grads, *a) {
                    add_into(&mut g[index * inner..(index + 1) * inner], gy);
                }
            }
            Op::Stack(parts) | Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(g) = self.acc(grads, p) {
                        add_into(g, &gy[start..start + len]);
                    }
                    start += len;
                }
            }
            Op::GatherRows(table, ids) => {
                let d = self.shape(*table)[1];
                if let Some(g) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * d..(id + 1) * d], &gy[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::MeanRows(a) => {
                let r = self.shape(*a)[0] as f64;
                let d = gy.len();
                if let Some(g) = self.acc(grads, *a) {
                    for row in g.chunks_mut(d) {
                        for (g, dy) in row.iter_mut().zip(gy) {
                            *g += dy / r;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                if let Some(g) = self.acc(grads, *x) {
                    gemm(batch, dout, din, gy, false, wv.data(), false, g, 1.0);
                }
                if let Some(g) = self.acc(grads, *w) {
                    gemm(dout, batch, din, gy, true, xv.data(), false, g, 1.0);
                }
                if let Some(g) = self.acc(grads, *b) {
                    for row in gy.chunks(dout) {
                        add_into(g, row);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_backward(*x, *w, *b, *stride, *pad, gy, grads),
            Op::Film { x, scale, shift } => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                let per: usize = xv.shape()[2..].iter().product();
                let s = self.value(*scale).data();
                if let Some(g) = self.acc(grads, *x) {
                    for (i, (gc, dc)) in g.chunks_mut(per).zip(gy.chunks(per)).enumerate() {
                        let m = 1.0 + s[i % c];
                        for (g, d) in gc.iter_mut().zip(dc) {
                            *g += d * m;
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *scale) {
                    for (i, (xc, dc)) in xv.data().chunks(per).zip(gy.chunks(per)).enumerate() {
                        g[i % c] += xc.iter().zip(dc).map(|(x, d)| x * d).sum::<f64>();
                    }
                }
                if let Some(g) = self.acc(grads, *shift) {
                    for (i, dc) in gy.chunks(per).enumerate() {
                        g[i % c] += dc.iter().sum::<f64>();
                    }
                }
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x).to_vec();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(g) = self.acc(grads, *x) {
                    for p in 0..planes {
                        let src = &gy[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut g[p * h * w..(p + 1) * h * w];
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                            }
                        }
                    }
                }
            }
            Op::TemporalConv { x, w } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let (n, c) = (s[0], s[1]);
                let per: usize = s[2..].iter().product();
                let wv = self.value(*w).data();
                let xd = xv.data();
                if let Some(g) = self.acc(grads, *x) {
                    for f in 0..n {
                        for ch in 0..c {
                            let dy = &gy[(f * c + ch) * per..(f * c + ch + 1) * per];
                            for k in 0..3 {
                                let src_f = f as isize + k as isize - 1;
                                if src_f < 0 || src_f as usize >= n {
                                    continue;
                                }
                                let wk = wv[ch * 3 + k];
                                let base = (src_f as usize * c + ch) * per;
                                for (g, d) in g[base..base + per].iter_mut().zip(dy) {
                                    *g += wk * d;
                                }
                            }
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *w) {
                    for f in 0..n {
                        for ch in 0..c {
                            let dy = &gy[(f * c + ch) * per..(f * c + ch + 1) * per];
                            for k in 0..3 {
                                let src_f = f as isize + k as isize - 1;
                                if src_f < 0 || src_f as usize >= n {
                                    continue;
                                }
                                let base = (src_f as usize * c + ch) * per;
                                g[ch * 3 + k] += xd[base..base + per]
                                    .iter()
                                    .zip(dy)
                                    .map(|(x, d)| x * d)
                                    .sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::Stencil { x, kernel, size } => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(g) = self.acc(grads, *x) {
                    for (dst, dy) in g.chunks_mut(h * w).zip(gy.chunks(h * w)) {
                        stencil_plane_adjoint(dy, dst, h, w, kernel, *size);
                    }
                }
            }
            Op::ChannelMix { x, weights } => {
                let per = gy.len();
                if let Some(g) = self.acc(grads, *x) {
                    for (chunk, &wt) in g.chunks_mut(per).zip(weights) {
                        for (g, d) in chunk.iter_mut().zip(gy) {
                            *g += wt * d;
                        }
                    }
                }
            }
            Op::Warp { frame, flow } => {
                let fs = self.shape(*frame);
                let (c, h, w) = (fs[0], fs[1], fs[2]);
                let src = self.value(*frame).data();
                let fl = self.value(*flow).data();
                let samples: Vec<BilinearSample> = (0..h * w)
                    .map(|p| BilinearSample::new(p, h, w, fl[p], fl[h * w + p]))
                    .collect();
                if let Some(g) = self.acc(grads, *frame) {
                    for ch in 0..c {
                        let plane = &mut g[ch * h * w..(ch + 1) * h * w];
                        for (p, s) in samples.iter().enumerate() {
                            s.scatter(plane, gy[ch * h * w + p]);
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *flow) {
                    for (p, s) in samples.iter().enumerate() {
                        let (mut gu, mut gv) = (0.0, 0.0);
                        for ch in 0..c {
                            let (du, dv) = s.position_grad(&src[ch * h * w..(ch + 1) * h * w]);
                            let d = gy[ch * h * w + p];
                            gu += d * du;
                            gv += d * dv;
                        }
                        g[p] += gu;
                        g[h * w + p] += gv;
                    }
                }
            }
            Op::SpatialMean(x) => {
                let s = self.shape(*x);
                let per = s[2] * s[3];
                if let Some(g) = self.acc(grads, *x) {
                    for (chunk, d) in g.chunks_mut(per).zip(gy) {
                        for g in chunk {
                            *g += d / per as f64;
                        }
                    }
                }
            }
        }
    }

    fn unary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        gy: &[f64],
        deriv: impl Fn(f64, f64) -> f64,
    ) {
        let xv = self.value(a).data();
        if let Some(g) = self.acc(grads, a) {
            for ((g, d), &x) in g.iter_mut().zip(gy).zip(xv) {
                *g += d * deriv(x, *d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let geo = self.conv_geom(x, w, stride, pad);
        let hw_o = geo.ho * geo.wo;
        let in_sz = geo.cin * geo.h * geo.w;
        let out_sz = geo.cout * hw_o;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let want_x = self.nodes[x.0].needs_grad;
        let want_w = self.nodes[w.0].needs_grad;
        let mut cols = vec![0.0; geo.ckk() * hw_o];
        if want_w {
            let gw = self.acc(grads, w).expect("weight gradient requested");
            for bi in 0..geo.batch {
                geo.im2col(&xv[bi * in_sz..(bi + 1) * in_sz], &mut cols);
                let dy = &gy[bi * out_sz..(bi + 1) * out_sz];
                gemm(geo.cout, hw_o, geo.ckk(), dy, false, &cols, true, gw, 1.0);
            }
        }
        if want_x {
            let gx = self.acc(grads, x).expect("input gradient requested");
            for bi in 0..geo.batch {
                let dy = &gy[bi * out_sz..(bi + 1) * out_sz];
                gemm(geo.ckk(), geo.cout, hw_o, wv, true, dy, false, &mut cols, 0.0);
                geo.col2im_add(&cols, &mut gx[bi * in_sz..(bi + 1) * in_sz]);
            }
        }
        if let Some(gb) = self.acc(grads, b) {
            for bi in 0..geo.batch {
                let dy = &gy[bi * out_sz..(bi + 1) * out_sz];
                for (co, row) in dy.chunks(hw_o).enumerate() {
                    gb[co] += row.iter().sum::<f64>();
                }
            }
        }
    }
}

/// Bilinear sample location for output pixel `p` displaced by `(u, v)`.
struct BilinearSample {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fx: f64,
    fy: f64,
    /// Whether the coordinate moves with the flow (not clamped).
    free_x: bool,
    free_y: bool,
}

impl BilinearSample {
    fn new(p: usize, h: usize, w: usize, u: f64, v: f64) -> Self {
        let (i, j) = (p / w, p % w);
        let (xr, yr) = (j as f64 + u, i as f64 + v);
        let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
        let x = xr.clamp(0.0, xmax);
        let y = yr.clamp(0.0, ymax);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        Self {
            i00: y0 * w + x0,
            i01: y0 * w + x1,
            i10: y1 * w + x0,
            i11: y1 * w + x1,
            fx: x - x0 as f64,
            fy: y - y0 as f64,
            free_x: xr > 0.0 && xr < xmax,
            free_y: yr > 0.0 && yr < ymax,
        }
    }

    fn eval(&self, plane: &[f64]) -> f64 {
        let top = plane[self.i00] * (1.0 - self.fx) + plane[self.i01] * self.fx;
        let bottom = plane[self.i10] * (1.0 - self.fx) + plane[self.i11] * self.fx;
        top * (1.0 - self.fy) + bottom * self.fy
    }

    fn scatter(&self, plane: &mut [f64], d: f64) {
        plane[self.i00] += d * (1.0 - self.fx) * (1.0 - self.fy);
        plane[self.i01] += d * self.fx * (1.0 - self.fy);
        plane[self.i10] += d * (1.0 - self.fx) * self.fy;
        plane[self.i11] += d * self.fx * self.fy;
    }

    fn position_grad(&self, plane: &[f64]) -> (f64, f64) {
        let du = if self.free_x {
            (1.0 - self.fy) * (plane[self.i01] - plane[self.i00])
                + self.fy * (plane[self.i11] - plane[self.i10])
        } else {
            0.0
        };
        let dv = if self.free_y {
            (1.0 - self.fx) * (plane[self.i10] - plane[self.i00])
                + self.fx * (plane[self.i11] - plane[self.i01])
        } else {
            0.0
        };
        (du, dv)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

pub(crate) fn stencil_plane(src: &[f64], dst: &mut [f64], h: usize, w: usize, kernel: &[f64], size: usize) {
    let r = (size / 2) as isize;
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for a in 0..size {
                let ii = clamp_idx(i as isize + a as isize - r, h);
                for b in 0..size {
                    let k = kernel[a * size + b];
                    if k == 0.0 {
                        continue;
                    }
                    let jj = clamp_idx(j as isize + b as isize - r, w);
                    acc += k * src[ii * w + jj];
                }
            }
            dst[i * w + j] = acc;
        }
    }
}

fn stencil_plane_adjoint(dy: &[f64], dx: &mut [f64], h: usize, w: usize, kernel: &[f64], size: usize) {
    let r = (size / 2) as isize;
    for i in 0..h {
        for j in 0..w {
            let d = dy[i * w + j];
            for a in 0..size {
                let ii = clamp_idx(i as isize + a as isize - r, h);
                for b in 0..size {
                    let k = kernel[a * size + b];
                    if k == 0.0 {
                        continue;
                    }
                    let jj = clamp_idx(j as isize + b as isize - r, w);
                    dx[ii * w + jj] += k * d;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Compares analytic gradients of `f` (reduced by a fixed random projection)
    /// against central differences for every input.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let build = |vals: &[Tensor], rng_seed: u64| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
            let out = f(&mut g, &vars);
            let mut r = ChaCha8Rng::seed_from_u64(rng_seed);
            let proj = rand_tensor(&mut r, g.shape(out));
            let p = g.constant(proj);
            let prod = g.mul(out, p);
            let root = g.sum(prod);
            (g, vars, root)
        };
        let seed = rng.random();
        let (g, vars, root) = build(&inputs, seed);
        let grads = g.backward(root);
        let h = 1e-6;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v);
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let (gp, _, rp) = build(&plus, seed);
                let (gm, _, rm) = build(&minus, seed);
                let fd = (gp.value(rp).item() - gm.value(rm).item()) / (2.0 * h);
                let an = analytic.data()[i];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} elem {i}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 3]).map(|x| x + 2.5);
        check(vec![a.clone(), b.clone()], |g, v| {
            let s = g.add(v[0], v[1]);
            let d = g.sub(s, v[0]);
            let m = g.mul(d, v[0]);
            let q = g.div(m, v[1]);
            let sq = g.square(q);
            let ab = g.abs(v[0]);
            let si = g.silu(sq);
            let sp = g.softplus(ab);
            let sg = g.sigmoid(v[1]);
            let t = g.add(si, sp);
            let t = g.mul(t, sg);
            let t = g.scale(t, 0.7);
            g.offset(t, 0.3)
        });
    }

    #[test]
    fn reductions_and_indexing_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let table = rand_tensor(&mut rng, &[5, 4]);
        check(vec![a, table], |g, v| {
            let rows = g.gather_rows(v[1], &[4, 0, 4]);
            let cat = g.concat(&[v[0], rows]);
            let o = g.outer(cat, 2);
            let o2 = g.outer(cat, 5);
            let st = g.stack(&[o, o2]);
            let mr = g.mean_rows(st);
            let r = g.reshape(mr, &[2, 2]);
            let m = g.mean(r);
            let s = g.sum(cat);
            let total = g.add(m, s);
            g.reshape(total, &[1])
        });
    }

    #[test]
    fn linear_and_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        check(vec![x, w, b], |g, v| g.linear(v[0], v[1], v[2]));

        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
            let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
            let b = rand_tensor(&mut rng, &[3]);
            check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], stride, pad));
        }
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 2, 4, 4]);
        let s = rand_tensor(&mut rng, &[2]);
        let sh = rand_tensor(&mut rng, &[2]);
        let tw = rand_tensor(&mut rng, &[2, 3]);
        check(vec![x, s, sh, tw], |g, v| {
            let f = g.film(v[0], v[1], v[2]);
            let t = g.temporal_conv(f, v[3]);
            let u = g.upsample2(t);
            let m = g.spatial_mean(u);
            let c = g.clamp_abs(m, 0.4);
            g.sigmoid(c)
        });
    }

    #[test]
    fn stencil_and_channel_mix_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 5, 6]);
        let kernel: Vec<f64> = (0..9).map(|i| (i as f64 - 3.0) * 0.1).collect();
        check(vec![x], |g, v| {
            let gray = g.channel_mix(v[0], &[0.299, 0.587, 0.114]);
            g.stencil(gray, &kernel, 3)
        });
    }

    #[test]
    fn warp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frame = rand_tensor(&mut rng, &[2, 5, 6]);
        // keep samples away from integer grid lines and the border
        let flow = Tensor::from_parts(
            &[2, 5, 6],
            (0..60).map(|k| if k % 3 == 0 { 0.37 } else { -0.61 + 0.01 * (k % 7) as f64 }).collect(),
        );
        check(vec![frame, flow], |g, v| g.warp(v[0], v[1]));
    }

    #[test]
    fn zero_warp_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frame = rand_tensor(&mut rng, &[3, 4, 5]);
        let mut g = Graph::new();
        let f = g.constant(frame.clone());
        let z = g.constant(Tensor::zeros(&[2, 4, 5]));
        let out = g.warp(f, z);
        assert_eq!(g.value(out), &frame);
    }

    #[test]
    fn abs_has_zero_subgradient_at_ties() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_parts(&[3], vec![0.0, 2.0, -1.0]));
        let a = g.abs(x);
        let s = g.sum(a);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).data(), &[0.0, 1.0, -1.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient_work() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::full(&[2], 3.0));
        let x = g.param(Tensor::full(&[2], 1.0));
        let y = g.mul(w, x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).data(), &[3.0, 3.0]);
        assert_eq!(grads.get(w).data(), &[0.0, 0.0]);
        assert!(!g.needs_grad(w));
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_parts(&[2], vec![800.0, -800.0]));
        let y = g.softplus(x);
        assert_eq!(g.value(y).data()[0], 800.0);
        assert!(g.value(y).data()[1] >= 0.0 && g.value(y).data()[1] < 1e-300);
    }
}
