//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass in
//! creation order, which is already a topological order. [`Graph::backward`]
//! walks the tape in reverse and deposits parameter gradients into the
//! [`ParamStore`] the parameters were read from. A fresh graph is built for
//! every training step; nothing is reused.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul, ParamStore, Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d(Box<ConvSaved<T>>),
    ScaleChannels { x: Var, v: Var },
    BroadcastSpatial(Var),
    ConcatChannels(Vec<Var>),
    SliceBatch { x: Var, index: usize },
    AdaptiveAvgPool(Var),
    Bilinear { x: Var, align_corners: bool },
    MaskedGap { x: Var, weights: Vec<T> },
    CrossEntropy2d { logits: Var, target: Vec<usize> },
}

struct ConvSaved<T> {
    x: Var,
    w: Var,
    b: Var,
    geom: ConvGeom,
    /// im2col buffers per sample; empty when the kernel is a pointwise 1x1.
    cols: Vec<T>,
}

/// How `conv2d` fills the border outside the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zeros,
    /// Repeat the nearest edge value.
    Replicate,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_len(&self) -> usize {
        self.col_rows() * self.oh * self.ow
    }

    /// Input index feeding output `o` at kernel tap `k` along an axis of
    /// length `len`, or `None` where zero padding applies.
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        match self.mode {
            PadMode::Zeros => (i >= 0 && i < len as isize).then_some(i as usize),
            PadMode::Replicate => Some(i.clamp(0, len as isize - 1) as usize),
        }
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.oh, self.ow);
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        let Some(iy) = self.source(oy, ki, self.h) else {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        };
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            *v = match self.source(ox, kj, self.w) {
                                Some(ix) => src[ix],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Real>(&self, cols: &[T], gx: &mut [T]) {
        let (oh, ow) = (self.oh, self.ow);
        for c in 0..self.cin {
            let plane = &mut gx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let Some(iy) = self.source(oy, ki, self.h) else {
                            continue;
                        };
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for ox in 0..ow {
                            if let Some(ix) = self.source(ox, kj, self.w) {
                                dst[ix] = dst[ix] + src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Start/end of the `i`-th adaptive pooling window over `len` inputs.
pub(crate) fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Source index pair and blend weight for one bilinear output coordinate.
pub(crate) fn bilinear_source(dst: usize, len_in: usize, len_out: usize, align_corners: bool) -> (usize, usize, f64) {
    let src = if align_corners {
        if len_out > 1 {
            dst as f64 * (len_in - 1) as f64 / (len_out - 1) as f64
        } else {
            0.0
        }
    } else {
        ((dst as f64 + 0.5) * len_in as f64 / len_out as f64 - 0.5).max(0.0)
    };
    let i0 = (src.floor() as usize).min(len_in - 1);
    let i1 = (i0 + 1).min(len_in - 1);
    (i0, i1, src - i0 as f64)
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[derive(Default)]
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<String, Var>>,
    empty_mask_fallbacks: Cell<usize>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            empty_mask_fallbacks: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of masked averages that found no foreground and fell back to
    /// the unmasked mean.
    pub fn empty_mask_fallbacks(&self) -> usize {
        self.empty_mask_fallbacks.get()
    }

    /// Names of every parameter read into this graph, sorted.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.params.borrow().keys().cloned().collect();
        names.sort();
        names
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Read a parameter into the graph. Repeated reads of the same name
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.borrow().get(name) {
            return Ok(v);
        }
        let value = store.shared_value(name)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: Some(name.to_string()),
        });
        let v = Var(nodes.len() - 1);
        self.params.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Same value, cut off from differentiation.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        let value = self.value(v);
        value
            .item()
            .ok_or_else(|| Error::shape("scalar", "element count", 1, value.numel()))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, "operand shape", format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("operands share a shape")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.push(self.zip_map(a, b, |x, y| x + y), Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.push(self.zip_map(a, b, |x, y| x - y), Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.push(self.zip_map(a, b, |x, y| x * y), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&self, a: Var, offset: T) -> Var {
        let value = self.value(a).map(|x| x + offset);
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// Arithmetic mean of equally shaped values, summed left to right.
    pub fn mean_of(&self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::invalid("mean_of", "no operands"))?;
        if rest.is_empty() {
            return Ok(first);
        }
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(self.scale(acc, T::one() / T::lit(vars.len() as f64)))
    }

    pub fn relu(&self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let value = softmax_along(&self.value(x), axis, false)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let value = softmax_along(&self.value(x), axis, true)?;
        Ok(self.push(value, Op::LogSoftmax { x, axis }, &[x]))
    }

    pub fn sum(&self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let value = self.value(x);
        let total = value.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let mean = total / T::lit(value.numel().max(1) as f64);
        self.push(Tensor::scalar(mean), Op::Mean(x), &[x])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.value(x)).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `y = x W^T + b` for `x: [N, Din]`, `W: [Dout, Din]`, `b: [Dout]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (n, din) = match vx.shape() {
            &[n, d] => (n, d),
            s => return Err(Error::shape("fully_connected", "input rank", 2, s.len())),
        };
        let dout = match vw.shape() {
            &[o, i] if i == din => o,
            &[_, i] => return Err(Error::shape("fully_connected", "weight input width", din, i)),
            s => return Err(Error::shape("fully_connected", "weight rank", 2, s.len())),
        };
        if vb.shape() != [dout] {
            return Err(Error::shape("fully_connected", "bias length", dout, format!("{:?}", vb.shape())));
        }
        let mut out = vec![T::zero(); n * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(vb.data());
        }
        matmul(vx.data(), false, vw.data(), true, &mut out, n, din, dout, true);
        Ok(self.push(Tensor::new(&[n, dout], out)?, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Cross-correlation of `x: [N, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`,
    /// zero padded.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_padded(x, w, b, stride, pad, PadMode::Zeros)
    }

    pub fn conv2d_padded(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize, mode: PadMode) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (n, cin, h, wd) = vx.dims4("conv2d")?;
        let (cout, wcin, kh, kw) = vw.dims4("conv2d")?;
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if mode == PadMode::Replicate && (h == 0 || wd == 0) {
            return Err(Error::invalid("conv2d", "replicate padding needs a non-empty input"));
        }
        if wcin != cin {
            return Err(Error::shape("conv2d", "input channels", wcin, cin));
        }
        if vb.shape() != [cout] {
            return Err(Error::shape("conv2d", "bias length", cout, format!("{:?}", vb.shape())));
        }
        if kh > h + 2 * pad {
            return Err(Error::shape("conv2d", "kernel height", format!("<= {}", h + 2 * pad), kh));
        }
        if kw > wd + 2 * pad {
            return Err(Error::shape("conv2d", "kernel width", format!("<= {}", wd + 2 * pad), kw));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            mode,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let p = geom.oh * geom.ow;
        let k = geom.col_rows();
        let in_len = cin * h * wd;
        let mut out = vec![T::zero(); n * cout * p];
        let mut cols = if geom.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); n * geom.col_len()]
        };
        for s in 0..n {
            let xs = &vx.data()[s * in_len..(s + 1) * in_len];
            let ys = &mut out[s * cout * p..(s + 1) * cout * p];
            for (c, plane) in ys.chunks_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v = vb.data()[c]);
            }
            let src: &[T] = if geom.pointwise() {
                xs
            } else {
                let buf = &mut cols[s * geom.col_len()..(s + 1) * geom.col_len()];
                geom.im2col(xs, buf);
                buf
            };
            matmul(vw.data(), false, src, false, ys, cout, k, p, true);
        }
        let value = Tensor::new(&[n, cout, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d(Box::new(ConvSaved { x, w, b, geom, cols })),
            &[x, w, b],
        ))
    }

    /// Multiply every channel of `x: [N, C, H, W]` by `v: [N, C]`.
    pub fn scale_channels(&self, x: Var, v: Var) -> Result<Var> {
        let (vx, vv) = (self.value(x), self.value(v));
        let (n, c, h, w) = vx.dims4("scale_channels")?;
        if vv.shape() != [n, c] {
            return Err(Error::shape("scale_channels", "scale vector", format!("[{n}, {c}]"), format!("{:?}", vv.shape())));
        }
        let hw = h * w;
        let mut out = vx.data().to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let s = vv.data()[i];
            plane.iter_mut().for_each(|e| *e = *e * s);
        }
        Ok(self.push(Tensor::new(vx.shape(), out)?, Op::ScaleChannels { x, v }, &[x, v]))
    }

    /// Tile `p: [N, C]` over an `h x w` grid.
    pub fn broadcast_spatial(&self, p: Var, h: usize, w: usize) -> Result<Var> {
        let vp = self.value(p);
        let (n, c) = match vp.shape() {
            &[n, c] => (n, c),
            s => return Err(Error::shape("broadcast_spatial", "prototype rank", 2, s.len())),
        };
        let mut out = Vec::with_capacity(n * c * h * w);
        for &x in vp.data() {
            out.extend(std::iter::repeat_n(x, h * w));
        }
        Ok(self.push(Tensor::new(&[n, c, h, w], out)?, Op::BroadcastSpatial(p), &[p]))
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no operands"))?;
        let (n, _, h, w) = first.dims4("concat_channels")?;
        let mut channels = 0;
        for v in &values {
            let (vn, vc, vh, vw) = v.dims4("concat_channels")?;
            if vn != n {
                return Err(Error::shape("concat_channels", "batch", n, vn));
            }
            if (vh, vw) != (h, w) {
                return Err(Error::shape("concat_channels", "spatial size", format!("{h}x{w}"), format!("{vh}x{vw}")));
            }
            channels += vc;
        }
        let mut out = Vec::with_capacity(n * channels * h * w);
        for s in 0..n {
            for v in &values {
                let len = v.numel() / n;
                out.extend_from_slice(&v.data()[s * len..(s + 1) * len]);
            }
        }
        Ok(self.push(
            Tensor::new(&[n, channels, h, w], out)?,
            Op::ConcatChannels(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_batch(&self, x: Var, index: usize) -> Result<Var> {
        let value = self.value(x).batch_item(index)?;
        Ok(self.push(value, Op::SliceBatch { x, index }, &[x]))
    }

    pub fn adaptive_avg_pool(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4("adaptive_avg_pool")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("adaptive_avg_pool", "output size must be positive"));
        }
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in vx.data().chunks(h * w) {
            for oy in 0..out_h {
                let (y0, y1) = pool_window(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_window(ox, w, out_w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc = acc + plane[y * w + xx];
                        }
                    }
                    out.push(acc / T::lit(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        Ok(self.push(Tensor::new(&[n, c, out_h, out_w], out)?, Op::AdaptiveAvgPool(x), &[x]))
    }

    pub fn bilinear_resize(&self, x: Var, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var> {
        let value = bilinear(&self.value(x), out_h, out_w, align_corners)?;
        Ok(self.push(value, Op::Bilinear { x, align_corners }, &[x]))
    }

    /// Per-channel mean of `x: [N, C, h, w]` over positions where the binary
    /// `mask: [N, 1, h, w]` is 1. A sample whose mask is empty falls back to
    /// the unmasked spatial mean and bumps [`Graph::empty_mask_fallbacks`].
    pub fn masked_gap(&self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4("masked_gap")?;
        let (mn, mc, mh, mw) = mask.dims4("masked_gap")?;
        if mn != n || mc != 1 {
            return Err(Error::shape("masked_gap", "mask batch/channels", format!("[{n}, 1]"), format!("[{mn}, {mc}]")));
        }
        if (mh, mw) != (h, w) {
            return Err(Error::shape("masked_gap", "mask spatial size", format!("{h}x{w}"), format!("{mh}x{mw}")));
        }
        if mask.data().iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(Error::invalid("masked_gap", "mask must be binary"));
        }
        let hw = h * w;
        let mut weights = Vec::with_capacity(n * hw);
        for m in mask.data().chunks(hw) {
            let count = m.iter().filter(|&&v| v == T::one()).count();
            if count == 0 {
                self.empty_mask_fallbacks.set(self.empty_mask_fallbacks.get() + 1);
                weights.extend(std::iter::repeat_n(T::one() / T::lit(hw as f64), hw));
            } else {
                let inv = T::one() / T::lit(count as f64);
                weights.extend(m.iter().map(|&v| v * inv));
            }
        }
        let mut out = Vec::with_capacity(n * c);
        for s in 0..n {
            let ws = &weights[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let plane = &vx.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                out.push(plane.iter().zip(ws).fold(T::zero(), |acc, (&f, &m)| acc + f * m));
            }
        }
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::MaskedGap { x, weights }, &[x]))
    }

    /// Mean over all pixels of `-log softmax(logits)[target]`, softmax taken
    /// over the channel axis of `logits: [N, C, h, w]`; `target: [N, 1, h, w]`
    /// holds class indices.
    pub fn cross_entropy_2d(&self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let vl = self.value(logits);
        let (n, c, h, w) = vl.dims4("pixel_cross_entropy")?;
        let (tn, tc, th, tw) = target.dims4("pixel_cross_entropy")?;
        if (tn, tc, th, tw) != (n, 1, h, w) {
            return Err(Error::shape(
                "pixel_cross_entropy",
                "target shape",
                format!("[{n}, 1, {h}, {w}]"),
                format!("{:?}", target.shape()),
            ));
        }
        let hw = h * w;
        let mut classes = Vec::with_capacity(n * hw);
        for &t in target.data() {
            let k = t.to_usize().filter(|&k| k < c && T::lit(k as f64) == t).ok_or_else(|| {
                Error::invalid("pixel_cross_entropy", format!("target value {t} is not a class index below {c}"))
            })?;
            classes.push(k);
        }
        let mut total = T::zero();
        for s in 0..n {
            let base = s * c * hw;
            for p in 0..hw {
                let at = |k: usize| vl.data()[base + k * hw + p];
                let max = (0..c).map(at).fold(T::neg_infinity(), T::max);
                let lse = (0..c).map(|k| (at(k) - max).exp()).sum::<T>().ln() + max;
                total = total + (lse - at(classes[s * hw + p]));
            }
        }
        let loss = total / T::lit((n * hw) as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy2d {
                logits,
                target: classes,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every parameter in `store` has its
    /// gradient overwritten; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        let nodes = self.nodes.borrow();
        for (node, grad) in nodes.iter().zip(grads) {
            if let (Some(name), Some(grad)) = (&node.param, grad) {
                let dst = store.get_mut(name)?.grad.data_mut();
                for (d, g) in dst.iter_mut().zip(grad) {
                    *d = *d + g;
                }
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to every recorded node that requires
    /// one (leaves included); `None` where no gradient flows.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable (log-)softmax along `axis`.
pub fn softmax_along<T: Real>(x: &Tensor<T>, axis: usize, log: bool) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", "axis", format!("< {}", x.rank()), axis));
    }
    let (outer, len, inner) = axis_layout(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| src[idx(k)]).fold(T::neg_infinity(), T::max);
            let denom: T = (0..len).map(|k| (src[idx(k)] - max).exp()).sum();
            for k in 0..len {
                out[idx(k)] = if log {
                    src[idx(k)] - max - denom.ln()
                } else {
                    (src[idx(k)] - max).exp() / denom
                };
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Bilinear resize of a `[N, C, H, W]` tensor outside any graph.
pub fn bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize, align_corners: bool) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("bilinear_resize")?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("bilinear_resize", "sizes must be positive"));
    }
    let rows: Vec<_> = (0..out_h).map(|y| bilinear_source(y, h, out_h, align_corners)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| bilinear_source(x, w, out_w, align_corners)).collect();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, ly) in &rows {
            let ly = T::lit(ly);
            for &(x0, x1, lx) in &cols {
                let lx = T::lit(lx);
                let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                out.push(top * (T::one() - ly) + bot * ly);
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

fn grad_slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn backprop_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(ga) = grad_slot(nodes, grads, *v) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).clone(), val(*b).clone());
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(vb.data()) {
                    *d = *d + s * y;
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                for ((d, &s), &x) in gb.iter_mut().zip(g).zip(va.data()) {
                    *d = *d + s * x;
                }
            }
        }
        Op::Scale(a, factor) => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s * *factor);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
            }
        }
        Op::Relu(a) => {
            let va = val(*a).clone();
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(va.data()) {
                    if x > T::zero() {
                        *d = *d + s;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = node.value.clone();
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(y.data()) {
                    *d = *d + s * y * (T::one() - y);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.clone();
            let (outer, len, inner) = axis_layout(y.shape(), *axis);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot = (0..len).fold(T::zero(), |acc, k| acc + g[idx(k)] * y.data()[idx(k)]);
                        for k in 0..len {
                            gx[idx(k)] = gx[idx(k)] + y.data()[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { x, axis } => {
            let y = node.value.clone();
            let (outer, len, inner) = axis_layout(y.shape(), *axis);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let total = (0..len).fold(T::zero(), |acc, k| acc + g[idx(k)]);
                        for k in 0..len {
                            gx[idx(k)] = gx[idx(k)] + g[idx(k)] - y.data()[idx(k)].exp() * total;
                        }
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Mean(a) => {
            let n = T::lit(val(*a).numel().max(1) as f64);
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d = *d + g[0] / n);
            }
        }
        Op::Linear { x, w, b } => {
            let (vx, vw) = (val(*x).clone(), val(*w).clone());
            let (n, din) = (vx.shape()[0], vx.shape()[1]);
            let dout = vw.shape()[0];
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                matmul(g, false, vw.data(), false, gx, n, dout, din, true);
            }
            if let Some(gw) = grad_slot(nodes, grads, *w) {
                matmul(g, true, vx.data(), false, gw, dout, n, din, true);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                for row in g.chunks(dout) {
                    gb.iter_mut().zip(row).for_each(|(d, &s)| *d = *d + s);
                }
            }
        }
        Op::Conv2d(saved) => {
            let ConvSaved { x, w, b, geom, cols } = saved.as_ref();
            let (vx, vw) = (val(*x).clone(), val(*w).clone());
            let p = geom.oh * geom.ow;
            let k = geom.col_rows();
            let in_len = geom.cin * geom.h * geom.w;
            let out_len = geom.cout * p;
            let col_of = |s: usize| -> &[T] {
                if geom.pointwise() {
                    &vx.data()[s * in_len..(s + 1) * in_len]
                } else {
                    &cols[s * geom.col_len()..(s + 1) * geom.col_len()]
                }
            };
            if let Some(gw) = grad_slot(nodes, grads, *w) {
                for s in 0..geom.n {
                    let gs = &g[s * out_len..(s + 1) * out_len];
                    matmul(gs, false, col_of(s), true, gw, geom.cout, p, k, true);
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                for s in 0..geom.n {
                    for (c, plane) in g[s * out_len..(s + 1) * out_len].chunks(p).enumerate() {
                        gb[c] = gb[c] + plane.iter().fold(T::zero(), |acc, &v| acc + v);
                    }
                }
            }
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                let mut gcols = vec![T::zero(); if geom.pointwise() { 0 } else { geom.col_len() }];
                for s in 0..geom.n {
                    let gs = &g[s * out_len..(s + 1) * out_len];
                    let gxs = &mut gx[s * in_len..(s + 1) * in_len];
                    if geom.pointwise() {
                        matmul(vw.data(), true, gs, false, gxs, k, geom.cout, p, true);
                    } else {
                        matmul(vw.data(), true, gs, false, &mut gcols, k, geom.cout, p, false);
                        geom.col2im_add(&gcols, gxs);
                    }
                }
            }
        }
        Op::ScaleChannels { x, v } => {
            let (vx, vv) = (val(*x).clone(), val(*v).clone());
            let hw = vx.numel() / vv.numel().max(1);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (i, (dst, src)) in gx.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                    let s = vv.data()[i];
                    dst.iter_mut().zip(src).for_each(|(d, &e)| *d = *d + e * s);
                }
            }
            if let Some(gv) = grad_slot(nodes, grads, *v) {
                for (i, (gp, xp)) in g.chunks(hw).zip(vx.data().chunks(hw)).enumerate() {
                    gv[i] = gv[i] + gp.iter().zip(xp).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                }
            }
        }
        Op::BroadcastSpatial(p) => {
            let count = val(*p).numel();
            let hw = g.len() / count.max(1);
            if let Some(gp) = grad_slot(nodes, grads, *p) {
                for (d, plane) in gp.iter_mut().zip(g.chunks(hw)) {
                    *d = *d + plane.iter().fold(T::zero(), |acc, &v| acc + v);
                }
            }
        }
        Op::ConcatChannels(parts) => {
            let n = node.value.shape()[0];
            let total = node.value.numel() / n;
            let mut offset = 0;
            for part in parts {
                let len = val(*part).numel() / n;
                if let Some(gp) = grad_slot(nodes, grads, *part) {
                    for s in 0..n {
                        let src = &g[s * total + offset..s * total + offset + len];
                        gp[s * len..(s + 1) * len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &v)| *d = *d + v);
                    }
                }
                offset += len;
            }
        }
        Op::SliceBatch { x, index } => {
            let len = g.len();
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                gx[index * len..(index + 1) * len]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &v)| *d = *d + v);
            }
        }
        Op::AdaptiveAvgPool(x) => {
            let (_, _, h, w) = val(*x).dims4("adaptive_avg_pool").expect("rank checked in forward");
            let (_, _, out_h, out_w) = node.value.dims4("adaptive_avg_pool").expect("rank 4");
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (plane, gp) in gx.chunks_mut(h * w).zip(g.chunks(out_h * out_w)) {
                    for oy in 0..out_h {
                        let (y0, y1) = pool_window(oy, h, out_h);
                        for ox in 0..out_w {
                            let (x0, x1) = pool_window(ox, w, out_w);
                            let share = gp[oy * out_w + ox] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    plane[y * w + xx] = plane[y * w + xx] + share;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Bilinear { x, align_corners } => {
            let (_, _, h, w) = val(*x).dims4("bilinear_resize").expect("rank checked in forward");
            let (_, _, out_h, out_w) = node.value.dims4("bilinear_resize").expect("rank 4");
            let rows: Vec<_> = (0..out_h).map(|y| bilinear_source(y, h, out_h, *align_corners)).collect();
            let cols: Vec<_> = (0..out_w).map(|x| bilinear_source(x, w, out_w, *align_corners)).collect();
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (plane, gp) in gx.chunks_mut(h * w).zip(g.chunks(out_h * out_w)) {
                    for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                        let ly = T::lit(ly);
                        for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                            let lx = T::lit(lx);
                            let s = gp[oy * out_w + ox];
                            let top = s * (T::one() - ly);
                            let bot = s * ly;
                            plane[y0 * w + x0] = plane[y0 * w + x0] + top * (T::one() - lx);
                            plane[y0 * w + x1] = plane[y0 * w + x1] + top * lx;
                            plane[y1 * w + x0] = plane[y1 * w + x0] + bot * (T::one() - lx);
                            plane[y1 * w + x1] = plane[y1 * w + x1] + bot * lx;
                        }
                    }
                }
            }
        }
        Op::MaskedGap { x, weights } => {
            let (n, c, h, w) = val(*x).dims4("masked_gap").expect("rank checked in forward");
            let hw = h * w;
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for s in 0..n {
                    let ws = &weights[s * hw..(s + 1) * hw];
                    for ch in 0..c {
                        let gs = g[s * c + ch];
                        let plane = &mut gx[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                        plane.iter_mut().zip(ws).for_each(|(d, &m)| *d = *d + gs * m);
                    }
                }
            }
        }
        Op::CrossEntropy2d { logits, target } => {
            let vl = val(*logits).clone();
            let (n, c, h, w) = vl.dims4("pixel_cross_entropy").expect("rank checked in forward");
            let hw = h * w;
            let scale = g[0] / T::lit((n * hw) as f64);
            if let Some(gl) = grad_slot(nodes, grads, *logits) {
                for s in 0..n {
                    let base = s * c * hw;
                    for p in 0..hw {
                        let at = |k: usize| vl.data()[base + k * hw + p];
                        let max = (0..c).map(at).fold(T::neg_infinity(), T::max);
                        let denom: T = (0..c).map(|k| (at(k) - max).exp()).sum();
                        for k in 0..c {
                            let mut d = (at(k) - max).exp() / denom;
                            if k == target[s * hw + p] {
                                d = d - T::one();
                            }
                            gl[base + k * hw + p] = gl[base + k * hw + p] + d * scale;
                        }
                    }
                }
            }
        }
    }
}
