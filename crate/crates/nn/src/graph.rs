//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op eagerly; [`Graph::backward`] walks the tape in
//! reverse. Ops assert on shape mismatches: callers validate user-facing
//! inputs before building a graph.

use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Abs(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    InstanceNorm {
        x: Var,
        group: usize,
    },
    AvgPool2 {
        x: Var,
        h: usize,
        w: usize,
    },
    Upsample2 {
        x: Var,
        h: usize,
        w: usize,
    },
    Reshape(Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Cat(Vec<Var>),
    GlobalAvgPool {
        x: Var,
        spatial: usize,
    },
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copies the value of `v` onto a fresh constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| k * x);
        self.push(t, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x + k);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push(t, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(t, Op::Mean(a), &[a])
    }

    /// Same-padded stride-1 convolution. `x` is `[N, C, H, W]` or
    /// `[N, C, D, H, W]`; `w` is `[O, C, kh, kw]` or `[O, C, kd, kh, kw]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), ws.len(), "conv: input/weight rank mismatch");
        assert_eq!(xs[1], ws[1], "conv: channel mismatch");
        let geom = match xs.len() {
            4 => ConvGeom {
                cin: xs[1],
                cout: ws[0],
                kd: 1,
                kh: ws[2],
                kw: ws[3],
                depth: 1,
                height: xs[2],
                width: xs[3],
            },
            5 => ConvGeom {
                cin: xs[1],
                cout: ws[0],
                kd: ws[2],
                kh: ws[3],
                kw: ws[4],
                depth: xs[2],
                height: xs[3],
                width: xs[4],
            },
            r => panic!("conv: unsupported rank {r}"),
        };
        assert_eq!(self.shape(b), &[geom.cout], "conv: bias shape");
        let out = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
            xs[0],
        );
        let mut shape = xs.clone();
        shape[1] = geom.cout;
        let t = Tensor::new(shape, out).expect("conv output shape");
        self.push(t, Op::Conv { x, w, b, geom }, &[x, w, b])
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear: input must be [N, in]");
        assert_eq!(xs[1], ws[1], "linear: feature mismatch");
        let out = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            xs[0],
            xs[1],
            ws[0],
        );
        let t = Tensor::new(vec![xs[0], ws[0]], out).expect("linear output");
        self.push(t, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Per-sample, per-channel normalization over all spatial positions.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        assert!(xs.len() >= 3, "instance_norm: need [N, C, spatial..]");
        let group: usize = xs[2..].iter().product();
        let out = kernels::instance_norm_forward(self.value(x).data(), group);
        let t = Tensor::new(xs.to_vec(), out).expect("same shape");
        self.push(t, Op::InstanceNorm { x, group }, &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "avg_pool2: need [N, C, H, W]");
        let (h, w) = (xs[2], xs[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size");
        let out = kernels::avg_pool2_forward(self.value(x).data(), xs[0] * xs[1], h, w);
        let t = Tensor::new(vec![xs[0], xs[1], h / 2, w / 2], out).expect("pool shape");
        self.push(t, Op::AvgPool2 { x, h, w }, &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "upsample2: need [N, C, H, W]");
        let (h, w) = (xs[2], xs[3]);
        let out = kernels::upsample2_forward(self.value(x).data(), xs[0] * xs[1], h, w);
        let t = Tensor::new(vec![xs[0], xs[1], 2 * h, 2 * w], out).expect("upsample shape");
        self.push(t, Op::Upsample2 { x, h, w }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape numel");
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x).narrow(start, len).expect("narrow range");
        self.push(t, Op::Narrow { x, start }, &[x])
    }

    pub fn cat(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let t = Tensor::cat(&ts).expect("cat shapes");
        self.push(t, Op::Cat(parts.to_vec()), parts)
    }

    /// Mean over all axes after the first two: `[N, C, ..] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 3);
        let spatial: usize = xs[2..].iter().product();
        let data = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|c| c.iter().sum::<f64>() / spatial as f64)
            .collect();
        let t = Tensor::new(vec![xs[0], xs[1]], data).expect("pool shape");
        self.push(t, Op::GlobalAvgPool { x, spatial }, &[x])
    }

    /// `w / sigma` with `sigma = u^T W v`, where `W` is `w` viewed as
    /// `[out, rest]` and the singular-vector estimates `u`, `v` are constants.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64], v: &[f64]) -> Var {
        let tw = self.value(w);
        let rows = tw.shape()[0];
        let cols = tw.numel() / rows;
        assert_eq!(u.len(), rows);
        assert_eq!(v.len(), cols);
        let sigma: f64 = tw
            .data()
            .chunks(cols)
            .zip(u)
            .map(|(row, ui)| ui * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let t = tw.map(|x| x / sigma);
        self.push(
            t,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            &[w],
        )
    }

    /// Sign pattern of the inputs of every non-smooth op (abs, leaky ReLU)
    /// that `root` depends on. Two evaluations with equal signatures lie on
    /// the same smooth piece of `root`.
    pub fn kink_signature(&self, root: Var) -> Vec<bool> {
        let mut live = vec![false; root.0 + 1];
        live[root.0] = true;
        for i in (0..=root.0).rev() {
            if live[i] {
                for p in inputs(&self.nodes[i].op) {
                    live[p.0] = true;
                }
            }
        }
        let mut sig = Vec::new();
        for (node, _) in self.nodes.iter().zip(&live).filter(|(_, l)| **l) {
            if let Op::Abs(a) | Op::LeakyRelu(a, _) = node.op {
                sig.extend(self.value(a).data().iter().map(|v| *v >= 0.0));
            }
        }
        sig
    }

    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_with_stops(root, &[])
    }

    /// Reverse sweep from `root`; gradients are not propagated past any node
    /// in `stops` (they still receive their own gradient).
    pub fn backward_with_stops(&self, root: Var, stops: &[Var]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad || (i != root.0 && stops.contains(&Var(i))) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.wants(p) {
                        accumulate(&mut grads[p.0], g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = zip(g, val(*b), |gi, bi| gi * bi);
                    accumulate(&mut grads[a.0], d);
                }
                if self.wants(*b) {
                    let d = zip(g, val(*a), |gi, ai| gi * ai);
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::Scale(a, k) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.map(|x| k * x));
                }
            }
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    let d = zip(g, &node.value, |gi, yi| gi * yi);
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Abs(a) => {
                if self.wants(*a) {
                    let d = zip(g, val(*a), |gi, xi| if xi >= 0.0 { gi } else { -gi });
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.wants(*a) {
                    let d = zip(g, val(*a), |gi, xi| if xi >= 0.0 { gi } else { slope * gi });
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], Tensor::full(val(*a).shape(), g.item()));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = val(*a).numel() as f64;
                    accumulate(&mut grads[a.0], Tensor::full(val(*a).shape(), g.item() / n));
                }
            }
            Op::Conv { x, w, b, geom } => {
                let batch = val(*x).shape()[0];
                let (dx, dw, db) = kernels::conv_backward(
                    val(*x).data(),
                    val(*w).data(),
                    g.data(),
                    geom,
                    batch,
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    let t = Tensor::new(val(*x).shape().to_vec(), dx).expect("dx");
                    accumulate(&mut grads[x.0], t);
                }
                if self.wants(*w) {
                    let t = Tensor::new(val(*w).shape().to_vec(), dw).expect("dw");
                    accumulate(&mut grads[w.0], t);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], Tensor::from_vec(db));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = val(*x).shape();
                let (n, fin) = (xs[0], xs[1]);
                let fout = val(*w).shape()[0];
                let (dx, dw, db) = kernels::linear_backward(
                    val(*x).data(),
                    val(*w).data(),
                    g.data(),
                    n,
                    fin,
                    fout,
                );
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], Tensor::new(vec![n, fin], dx).expect("dx"));
                }
                if self.wants(*w) {
                    accumulate(
                        &mut grads[w.0],
                        Tensor::new(vec![fout, fin], dw).expect("dw"),
                    );
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], Tensor::from_vec(db));
                }
            }
            Op::InstanceNorm { x, group } => {
                if self.wants(*x) {
                    let dx = kernels::instance_norm_backward(val(*x).data(), g.data(), *group);
                    accumulate(
                        &mut grads[x.0],
                        Tensor::new(val(*x).shape().to_vec(), dx).expect("dx"),
                    );
                }
            }
            Op::AvgPool2 { x, h, w } => {
                if self.wants(*x) {
                    let xs = val(*x).shape();
                    let dx = kernels::avg_pool2_backward(g.data(), xs[0] * xs[1], *h, *w);
                    accumulate(&mut grads[x.0], Tensor::new(xs.to_vec(), dx).expect("dx"));
                }
            }
            Op::Upsample2 { x, h, w } => {
                if self.wants(*x) {
                    let xs = val(*x).shape();
                    let dx = kernels::upsample2_backward(g.data(), xs[0] * xs[1], *h, *w);
                    accumulate(&mut grads[x.0], Tensor::new(xs.to_vec(), dx).expect("dx"));
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let d = g.clone().reshape(val(*x).shape()).expect("reshape back");
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::Narrow { x, start } => {
                if self.wants(*x) {
                    let xs = val(*x).shape();
                    let row: usize = xs[1..].iter().product();
                    let mut d = Tensor::zeros(xs);
                    d.data_mut()[start * row..start * row + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::Cat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).numel();
                    if self.wants(*p) {
                        let d = Tensor::new(
                            val(*p).shape().to_vec(),
                            g.data()[offset..offset + n].to_vec(),
                        )
                        .expect("cat part");
                        accumulate(&mut grads[p.0], d);
                    }
                    offset += n;
                }
            }
            Op::GlobalAvgPool { x, spatial } => {
                if self.wants(*x) {
                    let mut d = Vec::with_capacity(val(*x).numel());
                    for gv in g.data() {
                        d.extend(std::iter::repeat_n(gv / *spatial as f64, *spatial));
                    }
                    accumulate(
                        &mut grads[x.0],
                        Tensor::new(val(*x).shape().to_vec(), d).expect("dx"),
                    );
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                if self.wants(*w) {
                    // d/dW of W/sigma with sigma = u^T W v and u, v held fixed.
                    let inner = g.dot(&node.value);
                    let cols = v.len();
                    let mut d = g.clone();
                    for (r, row) in d.data_mut().chunks_mut(cols).enumerate() {
                        for (c, x) in row.iter_mut().enumerate() {
                            *x = (*x - inner * u[r] * v[c]) / sigma;
                        }
                    }
                    accumulate(&mut grads[w.0], d);
                }
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Exp(a)
        | Op::Abs(a)
        | Op::LeakyRelu(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a) => vec![*a],
        Op::Conv { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
        Op::InstanceNorm { x, .. }
        | Op::AvgPool2 { x, .. }
        | Op::Upsample2 { x, .. }
        | Op::Narrow { x, .. }
        | Op::GlobalAvgPool { x, .. } => vec![*x],
        Op::Cat(parts) => parts.clone(),
        Op::SpectralNorm { w, .. } => vec![*w],
    }
}
