//! Per-sample CNN execution: forward with optional caches, and reverse-mode
//! gradients. Generic over the scalar so gradient checks can run in `f64`.

use num_traits::Float;
use rand::Rng;

use super::spec::{inception_branches, ArchitectureSpec, LayerKind, LayerSpec, ParamInfo, Shape};
use super::ModelError;
use crate::util::rng_for;

pub trait Scalar:
    Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    /// Row-major `c = alpha * a * b + beta * c` on raw strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("finite conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers in this module size `a`, `b` and `c` to cover every
                // offset reachable through the given strides (checked by `matmul`).
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
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
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `c (m x n) = op(a) * op(b) + beta * c`, all row-major. `op(a)` is m x k; when
/// `ta` is set `a` is stored k x m. Likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<S: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[S],
    b: &[S],
    beta: S,
    c: &mut [S],
) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "matmul operand sizes"
    );
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    S::gemm_raw(m, k, n, S::one(), a, rsa, csa, b, rsb, csb, beta, c);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Shape,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Shape, data: Vec<S>) -> Self {
        assert_eq!(
            shape.len(),
            data.len(),
            "tensor data does not match shape {shape}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new(shape, vec![S::zero(); shape.len()])
    }

    /// Converts an interleaved rows x cols x channels image.
    pub fn from_hwc(pixels: &[f32], h: usize, w: usize, c: usize) -> Self {
        assert_eq!(pixels.len(), h * w * c);
        let mut data = vec![S::zero(); pixels.len()];
        for (i, px) in pixels.chunks_exact(c).enumerate() {
            for (k, v) in px.iter().enumerate() {
                data[k * h * w + i] = S::of(*v as f64);
            }
        }
        Self::new(Shape::new(c, h, w), data)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape,
            self.data.iter().map(|v| T::of(v.f64())).collect(),
        )
    }

    /// Per-channel maximum over all spatial positions.
    pub fn spatial_max(&self) -> Vec<S> {
        self.data
            .chunks_exact(self.shape.plane())
            .map(|ch| ch.iter().copied().fold(S::neg_infinity(), S::max))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    /// Training mode; dropout masks are drawn from streams keyed by `seed`.
    Train {
        seed: u64,
    },
}

#[derive(Debug, Clone)]
struct Conv {
    w: usize,
    b: usize,
    input: Shape,
    output: Shape,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.input.c * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone)]
struct Pool {
    input: Shape,
    output: Shape,
    kernel: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
enum Node {
    Conv(Conv),
    MaxPool(Pool),
    AvgPool(Pool),
    Inception(Vec<Vec<Node>>),
    Fc {
        w: usize,
        b: usize,
        n_in: usize,
        n_out: usize,
    },
    Relu,
    Lrn {
        size: usize,
        alpha: f64,
        beta: f64,
        k: f64,
    },
    Dropout(f64),
    Softmax,
}

enum Cache<S> {
    None,
    Cols(Vec<S>),
    ArgMax(Vec<u32>),
    Branches(Vec<Vec<Cache<S>>>),
    Input(Vec<S>),
    Output(Vec<S>),
    Lrn {
        input: Vec<S>,
        scale: Vec<S>,
        output: Vec<S>,
    },
}

/// Compiled layer graph with parameter slots resolved.
#[derive(Debug, Clone)]
pub struct Network {
    nodes: Vec<Node>,
    names: Vec<String>,
    shapes: Vec<Shape>,
    input: Shape,
    params: Vec<ParamInfo>,
}

fn compile_layer(
    layer: &LayerSpec,
    input: Shape,
    params: &mut Vec<ParamInfo>,
) -> Result<(Node, Shape), ModelError> {
    let first = params.len();
    let output = super::spec::layer_step(layer, input, &mut Vec::new())?;
    let node = match layer.kind {
        LayerKind::Conv {
            kernel,
            stride,
            pad,
            ..
        } => {
            super::spec::layer_step(layer, input, params)?;
            Node::Conv(Conv {
                w: first,
                b: first + 1,
                input,
                output,
                kernel,
                stride,
                pad,
            })
        }
        LayerKind::MaxPool {
            kernel,
            stride,
            pad,
        } => Node::MaxPool(Pool {
            input,
            output,
            kernel,
            stride,
            pad,
        }),
        LayerKind::AvgPool {
            kernel,
            stride,
            pad,
        } => Node::AvgPool(Pool {
            input,
            output,
            kernel,
            stride,
            pad,
        }),
        LayerKind::Inception { .. } => {
            let mut branches = Vec::new();
            for branch in inception_branches(&layer.name, &layer.kind) {
                let mut s = input;
                let mut nodes = Vec::new();
                for sub in &branch {
                    let (n, o) = compile_layer(sub, s, params)?;
                    nodes.push(n);
                    s = o;
                }
                branches.push(nodes);
            }
            Node::Inception(branches)
        }
        LayerKind::FullyConnected { output_dim } => {
            super::spec::layer_step(layer, input, params)?;
            Node::Fc {
                w: first,
                b: first + 1,
                n_in: input.len(),
                n_out: output_dim,
            }
        }
        LayerKind::Relu => Node::Relu,
        LayerKind::LocalResponseNorm {
            size,
            alpha,
            beta,
            k,
        } => Node::Lrn {
            size,
            alpha,
            beta,
            k,
        },
        LayerKind::Dropout { rate } => Node::Dropout(rate),
        LayerKind::Softmax => Node::Softmax,
    };
    Ok((node, output))
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad` lies inside `0..w`.
fn valid_cols(c: &Conv, kj: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = c.pad.saturating_sub(kj).div_ceil(c.stride).min(ow);
    let hi = if w + c.pad > kj {
        ((w + c.pad - kj - 1) / c.stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col<S: Scalar>(x: &[S], c: &Conv, cols: &mut [S]) {
    let Shape { h, w, .. } = c.input;
    let (oh, ow) = (c.output.h, c.output.w);
    let k = c.kernel;
    let n = oh * ow;
    for ch in 0..c.input.c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi) = valid_cols(c, kj, w, ow);
                let row = &mut cols[((ch * k + ki) * k + kj) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * c.stride + ki) as isize - c.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(S::zero());
                    dst[hi..].fill(S::zero());
                    if hi > lo {
                        let x0 = lo * c.stride + kj - c.pad;
                        if c.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                        } else {
                            for (d, s) in dst[lo..hi]
                                .iter_mut()
                                .zip(src[x0..].iter().step_by(c.stride))
                            {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], c: &Conv, dx: &mut [S]) {
    let Shape { h, w, .. } = c.input;
    let (oh, ow) = (c.output.h, c.output.w);
    let k = c.kernel;
    let n = oh * ow;
    for ch in 0..c.input.c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi) = valid_cols(c, kj, w, ow);
                if hi == lo {
                    continue;
                }
                let row = &cols[((ch * k + ki) * k + kj) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * c.stride + ki) as isize - c.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let x0 = lo * c.stride + kj - c.pad;
                    let src = &row[oy * ow + lo..oy * ow + hi];
                    for (d, s) in dst[x0..].iter_mut().step_by(c.stride).zip(src) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

fn windows(p: &Pool, out: usize, len: usize) -> Vec<(usize, usize, usize)> {
    (0..out).map(|o| window(o, p, len)).collect()
}

/// Pool window bounds along one axis. The averaging divisor counts padded
/// positions up to `len + pad` but not beyond.
fn window(o: usize, p: &Pool, len: usize) -> (usize, usize, usize) {
    let start = (o * p.stride) as isize - p.pad as isize;
    let end_padded = (start + p.kernel as isize).min((len + p.pad) as isize);
    let span = (end_padded - start) as usize;
    let lo = start.max(0) as usize;
    let hi = (end_padded.min(len as isize)).max(lo as isize) as usize;
    (lo, hi, span)
}

struct Ctx<'a, S> {
    params: &'a [Vec<S>],
    mode: Mode,
    record: bool,
}

fn forward_node<S: Scalar>(
    node: &Node,
    idx: u64,
    ctx: &Ctx<S>,
    x: Tensor<S>,
) -> (Tensor<S>, Cache<S>) {
    match node {
        Node::Conv(c) => {
            let n = c.output.plane();
            let f = c.output.c;
            let weights = &ctx.params[c.w];
            let bias = &ctx.params[c.b];
            let cols = if c.is_pointwise() {
                x.data
            } else {
                let mut cols = vec![S::zero(); c.rows() * n];
                im2col(&x.data, c, &mut cols);
                cols
            };
            let mut out = vec![S::zero(); f * n];
            for (row, &b) in out.chunks_exact_mut(n).zip(bias.iter()) {
                row.fill(b);
            }
            matmul(
                false,
                false,
                f,
                n,
                c.rows(),
                weights,
                &cols,
                S::one(),
                &mut out,
            );
            let cache = if ctx.record {
                Cache::Cols(cols)
            } else {
                Cache::None
            };
            (Tensor::new(c.output, out), cache)
        }
        Node::MaxPool(p) => {
            let Shape { c: ch, h, w } = p.input;
            let ys = windows(p, p.output.h, h);
            let xs = windows(p, p.output.w, w);
            let mut out = Vec::with_capacity(p.output.len());
            let mut arg = Vec::with_capacity(if ctx.record { p.output.len() } else { 0 });
            for k in 0..ch {
                let plane = &x.data[k * h * w..(k + 1) * h * w];
                for &(y0, y1, _) in &ys {
                    for &(x0, x1, _) in &xs {
                        let mut best = S::neg_infinity();
                        let mut at = y0 * w + x0;
                        for yy in y0..y1 {
                            let row = &plane[yy * w + x0..yy * w + x1];
                            for (dx, &v) in row.iter().enumerate() {
                                let better = v > best;
                                best = if better { v } else { best };
                                at = if better { yy * w + x0 + dx } else { at };
                            }
                        }
                        out.push(best);
                        if ctx.record {
                            arg.push((k * h * w + at) as u32);
                        }
                    }
                }
            }
            let cache = if ctx.record {
                Cache::ArgMax(arg)
            } else {
                Cache::None
            };
            (Tensor::new(p.output, out), cache)
        }
        Node::AvgPool(p) => {
            let Shape { c: ch, h, w } = p.input;
            let mut out = Vec::with_capacity(p.output.len());
            for k in 0..ch {
                let plane = &x.data[k * h * w..(k + 1) * h * w];
                for oy in 0..p.output.h {
                    let (y0, y1, sy) = window(oy, p, h);
                    for ox in 0..p.output.w {
                        let (x0, x1, sx) = window(ox, p, w);
                        let mut sum = S::zero();
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                sum = sum + plane[yy * w + xx];
                            }
                        }
                        out.push(sum / S::of((sy * sx) as f64));
                    }
                }
            }
            (Tensor::new(p.output, out), Cache::None)
        }
        Node::Inception(branches) => {
            let mut data = Vec::new();
            let mut caches = Vec::new();
            let mut c_total = 0;
            let mut spatial = (0, 0);
            for (bi, branch) in branches.iter().enumerate() {
                let mut t = x.clone();
                let mut bc = Vec::new();
                for (ni, n) in branch.iter().enumerate() {
                    let (o, cache) = forward_node(n, idx * 64 + (bi * 8 + ni) as u64, ctx, t);
                    t = o;
                    bc.push(cache);
                }
                c_total += t.shape.c;
                spatial = (t.shape.h, t.shape.w);
                data.extend_from_slice(&t.data);
                caches.push(bc);
            }
            let cache = if ctx.record {
                Cache::Branches(caches)
            } else {
                Cache::None
            };
            (
                Tensor::new(Shape::new(c_total, spatial.0, spatial.1), data),
                cache,
            )
        }
        Node::Fc { w, b, n_in, n_out } => {
            let mut out = ctx.params[*b].clone();
            matmul(
                false,
                false,
                *n_out,
                1,
                *n_in,
                &ctx.params[*w],
                &x.data,
                S::one(),
                &mut out,
            );
            let cache = if ctx.record {
                Cache::Input(x.data)
            } else {
                Cache::None
            };
            (Tensor::new(Shape::new(*n_out, 1, 1), out), cache)
        }
        Node::Relu => {
            let mut x = x;
            for v in &mut x.data {
                if *v < S::zero() {
                    *v = S::zero();
                }
            }
            let cache = if ctx.record {
                Cache::Output(x.data.clone())
            } else {
                Cache::None
            };
            (x, cache)
        }
        Node::Lrn {
            size,
            alpha,
            beta,
            k,
        } => {
            let shape = x.shape;
            let plane = shape.plane();
            let half = size / 2;
            let coef = S::of(alpha / *size as f64);
            let mut scale = vec![S::of(*k); x.data.len()];
            for c in 0..shape.c {
                let lo = c.saturating_sub(half);
                let hi = (c + half).min(shape.c - 1);
                let dst = &mut scale[c * plane..(c + 1) * plane];
                for j in lo..=hi {
                    let src = &x.data[j * plane..(j + 1) * plane];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = *d + coef * *v * *v;
                    }
                }
            }
            let nb = S::of(-beta);
            let out: Vec<S> = x
                .data
                .iter()
                .zip(&scale)
                .map(|(v, s)| *v * s.powf(nb))
                .collect();
            let cache = if ctx.record {
                Cache::Lrn {
                    input: x.data,
                    scale,
                    output: out.clone(),
                }
            } else {
                Cache::None
            };
            (Tensor::new(shape, out), cache)
        }
        Node::Dropout(rate) => match ctx.mode {
            Mode::Eval => (x, Cache::None),
            Mode::Train { seed } => {
                let mut rng = rng_for(seed, "dropout", idx);
                let keep = S::of(1.0 / (1.0 - rate));
                let mask: Vec<S> = (0..x.data.len())
                    .map(|_| {
                        if rng.gen::<f64>() < *rate {
                            S::zero()
                        } else {
                            keep
                        }
                    })
                    .collect();
                let mut x = x;
                for (v, m) in x.data.iter_mut().zip(&mask) {
                    *v = *v * *m;
                }
                (
                    x,
                    if ctx.record {
                        Cache::Output(mask)
                    } else {
                        Cache::None
                    },
                )
            }
        },
        Node::Softmax => {
            let mut x = x;
            softmax_in_place(&mut x.data);
            let cache = if ctx.record {
                Cache::Output(x.data.clone())
            } else {
                Cache::None
            };
            (x, cache)
        }
    }
}

pub fn softmax_in_place<S: Scalar>(v: &mut [S]) {
    let m = v.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

fn backward_node<S: Scalar>(
    node: &Node,
    cache: Cache<S>,
    params: &[Vec<S>],
    grad: Tensor<S>,
    grads: &mut [Vec<S>],
    input_shape: Shape,
    need_input: bool,
) -> Option<Tensor<S>> {
    match (node, cache) {
        (Node::Conv(c), Cache::Cols(cols)) => {
            let n = c.output.plane();
            let f = c.output.c;
            let k = c.rows();
            matmul(
                false,
                true,
                f,
                k,
                n,
                &grad.data,
                &cols,
                S::one(),
                &mut grads[c.w],
            );
            for (gb, row) in grads[c.b].iter_mut().zip(grad.data.chunks_exact(n)) {
                *gb = *gb + row.iter().copied().sum::<S>();
            }
            if !need_input {
                return None;
            }
            let mut dcols = vec![S::zero(); k * n];
            matmul(
                true,
                false,
                k,
                n,
                f,
                &params[c.w],
                &grad.data,
                S::zero(),
                &mut dcols,
            );
            if c.is_pointwise() {
                return Some(Tensor::new(c.input, dcols));
            }
            let mut dx = vec![S::zero(); c.input.len()];
            col2im(&dcols, c, &mut dx);
            Some(Tensor::new(c.input, dx))
        }
        (Node::MaxPool(p), Cache::ArgMax(arg)) => need_input.then(|| {
            let mut dx = vec![S::zero(); p.input.len()];
            for (g, &a) in grad.data.iter().zip(&arg) {
                dx[a as usize] = dx[a as usize] + *g;
            }
            Tensor::new(p.input, dx)
        }),
        (Node::AvgPool(p), _) => need_input.then(|| {
            let Shape { c: ch, h, w } = p.input;
            let mut dx = vec![S::zero(); p.input.len()];
            let mut gi = 0;
            for k in 0..ch {
                let plane = &mut dx[k * h * w..(k + 1) * h * w];
                for oy in 0..p.output.h {
                    let (y0, y1, sy) = window(oy, p, h);
                    for ox in 0..p.output.w {
                        let (x0, x1, sx) = window(ox, p, w);
                        let g = grad.data[gi] / S::of((sy * sx) as f64);
                        gi += 1;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                plane[yy * w + xx] = plane[yy * w + xx] + g;
                            }
                        }
                    }
                }
            }
            Tensor::new(p.input, dx)
        }),
        (Node::Inception(branches), Cache::Branches(caches)) => {
            let mut dx = need_input.then(|| vec![S::zero(); input_shape.len()]);
            let mut offset = 0;
            for (branch, bc) in branches.iter().zip(caches) {
                let out_c = branch_out_channels(branch).expect("branch has a conv");
                let len = out_c * grad.shape.plane();
                let g = Tensor::new(
                    Shape::new(out_c, grad.shape.h, grad.shape.w),
                    grad.data[offset..offset + len].to_vec(),
                );
                offset += len;
                let shapes = branch_input_shapes(branch, input_shape);
                if let Some(bdx) = backward_seq(branch, bc, params, g, grads, &shapes, need_input) {
                    for (d, v) in dx.as_mut().unwrap().iter_mut().zip(&bdx.data) {
                        *d = *d + *v;
                    }
                }
            }
            dx.map(|d| Tensor::new(input_shape, d))
        }
        (Node::Fc { w, b, n_in, n_out }, Cache::Input(x)) => {
            matmul(
                false,
                false,
                *n_out,
                *n_in,
                1,
                &grad.data,
                &x,
                S::one(),
                &mut grads[*w],
            );
            for (gb, g) in grads[*b].iter_mut().zip(&grad.data) {
                *gb = *gb + *g;
            }
            need_input.then(|| {
                let mut dx = vec![S::zero(); *n_in];
                matmul(
                    true,
                    false,
                    *n_in,
                    1,
                    *n_out,
                    &params[*w],
                    &grad.data,
                    S::zero(),
                    &mut dx,
                );
                Tensor::new(input_shape, dx)
            })
        }
        (Node::Relu, Cache::Output(out)) => need_input.then(|| {
            let mut g = grad;
            for (v, o) in g.data.iter_mut().zip(&out) {
                if *o <= S::zero() {
                    *v = S::zero();
                }
            }
            g
        }),
        (
            Node::Lrn {
                size, alpha, beta, ..
            },
            Cache::Lrn {
                input,
                scale,
                output,
            },
        ) => need_input.then(|| {
            let shape = grad.shape;
            let plane = shape.plane();
            let half = size / 2;
            let nb = S::of(-beta);
            let ratio: Vec<S> = grad
                .data
                .iter()
                .zip(&output)
                .zip(&scale)
                .map(|((g, y), s)| *g * *y / *s)
                .collect();
            let coef = S::of(2.0 * alpha * beta / *size as f64);
            let mut dx: Vec<S> = grad
                .data
                .iter()
                .zip(&scale)
                .map(|(g, s)| *g * s.powf(nb))
                .collect();
            for c in 0..shape.c {
                let lo = c.saturating_sub(half);
                let hi = (c + half).min(shape.c - 1);
                for j in lo..=hi {
                    for p in 0..plane {
                        let i = c * plane + p;
                        dx[i] = dx[i] - coef * input[i] * ratio[j * plane + p];
                    }
                }
            }
            Tensor::new(shape, dx)
        }),
        (Node::Dropout(_), Cache::Output(mask)) => need_input.then(|| {
            let mut g = grad;
            for (v, m) in g.data.iter_mut().zip(&mask) {
                *v = *v * *m;
            }
            g
        }),
        (Node::Dropout(_), Cache::None) => need_input.then_some(grad),
        (Node::Softmax, Cache::Output(y)) => need_input.then(|| {
            let dot: S = grad.data.iter().zip(&y).map(|(g, y)| *g * *y).sum();
            let data = grad
                .data
                .iter()
                .zip(&y)
                .map(|(g, y)| *y * (*g - dot))
                .collect();
            Tensor::new(grad.shape, data)
        }),
        _ => unreachable!("cache does not match node"),
    }
}

fn branch_out_channels(branch: &[Node]) -> Option<usize> {
    branch.iter().rev().find_map(|n| match n {
        Node::Conv(c) => Some(c.output.c),
        _ => None,
    })
}

fn node_output(node: &Node, input: Shape) -> Shape {
    match node {
        Node::Conv(c) => c.output,
        Node::MaxPool(p) | Node::AvgPool(p) => p.output,
        Node::Fc { n_out, .. } => Shape::new(*n_out, 1, 1),
        Node::Inception(branches) => Shape::new(
            branches.iter().filter_map(|b| branch_out_channels(b)).sum(),
            input.h,
            input.w,
        ),
        _ => input,
    }
}

fn branch_input_shapes(branch: &[Node], input: Shape) -> Vec<Shape> {
    let mut shapes = Vec::with_capacity(branch.len());
    let mut s = input;
    for n in branch {
        shapes.push(s);
        s = node_output(n, s);
    }
    shapes
}

fn backward_seq<S: Scalar>(
    nodes: &[Node],
    caches: Vec<Cache<S>>,
    params: &[Vec<S>],
    grad: Tensor<S>,
    grads: &mut [Vec<S>],
    input_shapes: &[Shape],
    need_input: bool,
) -> Option<Tensor<S>> {
    let mut g = Some(grad);
    for (i, cache) in caches.into_iter().enumerate().rev() {
        let Some(cur) = g.take() else { break };
        g = backward_node(
            &nodes[i],
            cache,
            params,
            cur,
            grads,
            input_shapes[i],
            i > 0 || need_input,
        );
    }
    g
}

/// Activations and caches from one recorded forward pass.
pub struct Trace<S> {
    caches: Vec<Cache<S>>,
    pub output: Tensor<S>,
    /// Input to the final layer (logits when the net ends in softmax).
    pub pre_output: Tensor<S>,
    pub taps: Vec<Tensor<S>>,
}

impl Network {
    pub fn compile(spec: &ArchitectureSpec) -> Result<Self, ModelError> {
        let shapes = spec.infer_shapes()?;
        let mut params = Vec::new();
        let mut nodes = Vec::with_capacity(spec.layers.len());
        let mut s = spec.input();
        for layer in &spec.layers {
            let (node, out) = compile_layer(layer, s, &mut params)?;
            nodes.push(node);
            s = out;
        }
        debug_assert_eq!(params, spec.param_infos()?);
        Ok(Self {
            nodes,
            names: spec.layers.iter().map(|l| l.name.clone()).collect(),
            shapes,
            input: spec.input(),
            params,
        })
    }

    /// Compiles a bare layer list (no head required), used for isolated checks.
    pub fn from_layers(input: Shape, layers: &[LayerSpec]) -> Result<Self, ModelError> {
        let mut params = Vec::new();
        let mut nodes = Vec::new();
        let mut shapes = Vec::new();
        let mut s = input;
        for layer in layers {
            let (node, out) = compile_layer(layer, s, &mut params)?;
            nodes.push(node);
            shapes.push(out);
            s = out;
        }
        Ok(Self {
            nodes,
            names: layers.iter().map(|l| l.name.clone()).collect(),
            shapes,
            input,
            params,
        })
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().unwrap_or(&self.input)
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn ends_in_softmax(&self) -> bool {
        matches!(self.nodes.last(), Some(Node::Softmax))
    }

    fn check_params<S>(&self, params: &[Vec<S>]) -> Result<(), ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (info, p) in self.params.iter().zip(params) {
            if info.len() != p.len() {
                return Err(ModelError::ParamMismatch(format!(
                    "{} has {} values, expected {}",
                    info.name,
                    p.len(),
                    info.len()
                )));
            }
        }
        Ok(())
    }

    /// Runs one sample. `taps` are layer indices whose outputs are returned;
    /// `record` keeps what `backward` needs.
    pub fn forward<S: Scalar>(
        &self,
        params: &[Vec<S>],
        x: Tensor<S>,
        mode: Mode,
        taps: &[usize],
        record: bool,
    ) -> Result<Trace<S>, ModelError> {
        self.check_params(params)?;
        if x.shape != self.input {
            return Err(ModelError::InputShape {
                expected: self.input,
                got: x.shape,
            });
        }
        let ctx = Ctx {
            params,
            mode,
            record,
        };
        let mut caches = Vec::with_capacity(if record { self.nodes.len() } else { 0 });
        let mut tapped: Vec<Option<Tensor<S>>> = vec![None; taps.len()];
        let mut t = x;
        let mut pre_output = None;
        for (i, node) in self.nodes.iter().enumerate() {
            if i + 1 == self.nodes.len() {
                pre_output = Some(t.clone());
            }
            let (o, cache) = forward_node(node, i as u64, &ctx, t);
            if o.data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite {
                    layer: self.names[i].clone(),
                });
            }
            for (slot, &tap) in tapped.iter_mut().zip(taps) {
                if tap == i {
                    *slot = Some(o.clone());
                }
            }
            if record {
                caches.push(cache);
            }
            t = o;
        }
        let taps = tapped
            .into_iter()
            .zip(taps)
            .map(|(t, &i)| t.ok_or_else(|| ModelError::UnknownTap(format!("layer index {i}"))))
            .collect::<Result<_, _>>()?;
        Ok(Trace {
            caches,
            pre_output: pre_output.unwrap_or_else(|| t.clone()),
            output: t,
            taps,
        })
    }

    /// Accumulates parameter gradients into `grads` given d(loss)/d(output of
    /// layer `top`), where `top` is the last layer to differentiate through.
    /// Returns the input gradient when requested.
    pub fn backward<S: Scalar>(
        &self,
        params: &[Vec<S>],
        trace: Trace<S>,
        top: usize,
        grad: Tensor<S>,
        grads: &mut [Vec<S>],
        need_input: bool,
    ) -> Option<Tensor<S>> {
        assert_eq!(
            trace.caches.len(),
            self.nodes.len(),
            "backward needs a recorded trace"
        );
        let mut caches = trace.caches;
        caches.truncate(top + 1);
        let mut shapes = Vec::with_capacity(top + 1);
        shapes.push(self.input);
        shapes.extend_from_slice(&self.shapes[..top]);
        backward_seq(
            &self.nodes[..=top],
            caches,
            params,
            grad,
            grads,
            &shapes,
            need_input,
        )
    }

    pub fn zero_grads<S: Scalar>(&self) -> Vec<Vec<S>> {
        self.params
            .iter()
            .map(|p| vec![S::zero(); p.len()])
            .collect()
    }

    pub fn layer_count(&self) -> usize {
        self.nodes.len()
    }
}
