use super::ops::{
    bcast_strides, for_each_bcast, maxpool_forward, ConvGeom, upsample_backward_acc, upsample_forward,
};
use super::{check_axis, Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Arguments below this are clamped before `log`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    // `padded` holds the zero-padded input for kernels larger than 1×1.
    Conv2d { input: Var, kernel: Var, bias: Var, padded: Option<Vec<T>> },
    MaxPool { input: Var, argmax: Vec<u32> },
    Upsample { input: Var, factor: usize },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Sqrt(Var),
    Log(Var),
    Clamp { input: Var, lo: T, hi: T },
    Binary { kind: Binary, a: Var, b: Var },
    Scale { input: Var, factor: T },
    AddScalar(Var),
    Sum { input: Var },
    Concat { a: Var, b: Var },
    SelectBatch { input: Var, order: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Sqrt(_) => "sqrt",
            Op::Log(_) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Binary { kind: Binary::Add, .. } => "add",
            Op::Binary { kind: Binary::Sub, .. } => "sub",
            Op::Binary { kind: Binary::Mul, .. } => "mul",
            Op::Binary { kind: Binary::Div, .. } => "div",
            Op::Scale { .. } => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sum { .. } => "sum",
            Op::Concat { .. } => "concat",
            Op::SelectBatch { .. } => "select_batch",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, which is a topological order: an op
/// can only reference vars that already exist. `backward` walks the record in
/// reverse and accumulates gradients additively across fan-out.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that never receives a gradient (data, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `(1,1,1,1)` node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient buffer, present after `backward` for nodes reachable from the root.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(self.shape(v), g.clone()).expect("grad buffer matches node shape"))
    }

    /// First node (in record order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()).map(|(i, n)| (i, n.op.name()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((node, op)) => Err(Error::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    // ---- structural ops -------------------------------------------------

    /// Same-padded 2-D convolution. `kernel` is `(kh, kw, cin, cout)` stored
    /// in the four tensor axes; `bias` is `(1, 1, 1, cout)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        let bs = self.shape(bias);
        let (kh, kw, cin, cout) = (ks.n, ks.h, ks.w, ks.c);
        if kh % 2 == 0 {
            return Err(Error::Dim { op: "conv2d", axis: "kernel_height", expected: kh + 1, got: kh });
        }
        if kw % 2 == 0 {
            return Err(Error::Dim { op: "conv2d", axis: "kernel_width", expected: kw + 1, got: kw });
        }
        check_axis("conv2d", 3, cin, xs.c)?;
        if bs.numel() != cout || bs.c != cout {
            return Err(Error::Dim { op: "conv2d", axis: "bias_channels", expected: cout, got: bs.c });
        }
        let rows = xs.n * xs.h * xs.w;
        let out_shape = Shape::new(xs.n, xs.h, xs.w, cout);
        let bias_v = self.value(bias).data();
        let mut out = Vec::with_capacity(out_shape.numel());
        for _ in 0..rows {
            out.extend_from_slice(bias_v);
        }
        let k = self.nodes[kernel.0].value.data();
        let x = self.nodes[input.0].value.data();
        let padded = if kh == 1 && kw == 1 {
            T::gemm_acc(rows, cin, cout, x, cin as isize, 1, k, cout as isize, 1, &mut out, cout as isize, 1);
            None
        } else {
            let geom = ConvGeom { s: xs, kh, kw, cout };
            let xp = geom.pad_input(x);
            geom.forward(&xp, k, &mut out);
            Some(xp)
        };
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(Op::Conv2d { input, kernel, bias, padded }, value, rg))
    }

    /// Non-overlapping `window×window` max pooling.
    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let s = self.shape(input);
        if window == 0 || s.h % window != 0 {
            return Err(Error::Dim { op: "maxpool2d", axis: "height", expected: s.h.next_multiple_of(window.max(1)), got: s.h });
        }
        if s.w % window != 0 {
            return Err(Error::Dim { op: "maxpool2d", axis: "width", expected: s.w.next_multiple_of(window), got: s.w });
        }
        let (vals, argmax) = maxpool_forward(self.value(input).data(), s, window);
        let value = Tensor::from_vec(Shape::new(s.n, s.h / window, s.w / window, s.c), vals)?;
        let rg = self.rg(input);
        Ok(self.push(Op::MaxPool { input, argmax }, value, rg))
    }

    /// Nearest-neighbour upsampling: each pixel becomes a `factor×factor` block.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::contract("upsample factor must be positive"));
        }
        let s = self.shape(input);
        let v = upsample_forward(self.value(input).data(), s, factor);
        let value = Tensor::from_vec(Shape::new(s.n, s.h * factor, s.w * factor, s.c), v)?;
        let rg = self.rg(input);
        Ok(self.push(Op::Upsample { input, factor }, value, rg))
    }

    /// Channel concatenation `[a | b]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        check_axis("concat", 0, sa.n, sb.n)?;
        check_axis("concat", 1, sa.h, sb.h)?;
        check_axis("concat", 2, sa.w, sb.w)?;
        let out_shape = Shape { c: sa.c + sb.c, ..sa };
        let mut v = Vec::with_capacity(out_shape.numel());
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for p in 0..sa.n * sa.h * sa.w {
            v.extend_from_slice(&da[p * sa.c..(p + 1) * sa.c]);
            v.extend_from_slice(&db[p * sb.c..(p + 1) * sb.c]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Concat { a, b }, Tensor::from_vec(out_shape, v)?, rg))
    }

    /// Gathers batch entries: output sample `i` is input sample `order[i]`.
    pub fn select_batch(&mut self, input: Var, order: &[usize]) -> Result<Var> {
        let s = self.shape(input);
        if order.is_empty() {
            return Err(Error::contract("select_batch with empty order"));
        }
        if let Some(&bad) = order.iter().find(|&&i| i >= s.n) {
            return Err(Error::Dim { op: "select_batch", axis: "batch", expected: s.n, got: bad + 1 });
        }
        let value = self.value(input).select_batch(order);
        let rg = self.rg(input);
        Ok(self.push(Op::SelectBatch { input, order: order.to_vec() }, value, rg))
    }

    /// Sums over the flagged axes, keeping them as length-1 dims.
    pub fn sum_axes(&mut self, input: Var, axes: [bool; 4]) -> Var {
        let s = self.shape(input);
        let mut od = s.dims();
        for d in 0..4 {
            if axes[d] {
                od[d] = 1;
            }
        }
        let out = Shape::from_dims(od);
        let os = bcast_strides(out, s);
        let mut v = vec![T::zero(); out.numel()];
        let x = self.value(input).data();
        for_each_bcast(s, s.strides(), os, |i, _, o| v[o] = v[o] + x[i]);
        let rg = self.rg(input);
        self.push(Op::Sum { input }, Tensor::from_vec(out, v).expect("reduced shape"), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        self.sum_axes(input, [true; 4])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.shape(input).numel();
        let s = self.sum(input);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&mut self, input: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(input).map(f);
        let rg = self.rg(input);
        self.push(op, value, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// Logistic sigmoid, kept strictly inside (0, 1) in the working precision.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon() / T::lit(2.0);
        self.unary(x, Op::Sigmoid(x), move |v| {
            let s = if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            };
            s.max(lo).min(hi)
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.max(T::zero()).sqrt())
    }

    /// Natural log with the argument clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        let floor = T::lit(LOG_FLOOR);
        self.unary(x, Op::Log(x), move |v| v.max(floor).ln())
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp { input: x, lo, hi }, move |v| v.max(lo).min(hi))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, Op::Scale { input: x, factor }, move |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, value: T) -> Var {
        self.unary(x, Op::AddScalar(x), move |v| v + value)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (da, db) = (sa.dims(), sb.dims());
        let mut od = [0; 4];
        for d in 0..4 {
            od[d] = match (da[d], db[d]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                (x, y) => {
                    return Err(Error::Dim { op: Op::<T>::Binary { kind, a, b }.name(), axis: super::AXIS_NAMES[d], expected: x, got: y })
                }
            };
        }
        let out = Shape::from_dims(od);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut v = vec![T::zero(); out.numel()];
        let f: fn(T, T) -> T = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        for_each_bcast(out, bcast_strides(sa, out), bcast_strides(sb, out), |o, i, j| v[o] = f(xa[i], xb[j]));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Binary { kind, a, b }, Tensor::from_vec(out, v)?, rg))
    }

    /// Broadcasting add (axes of length 1 stretch).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if !rs.is_scalar() {
            return Err(Error::contract(format!("backward root must be a scalar (1,1,1,1), got {rs}")));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.rg(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.data().len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf, &self.nodes);
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let out_shape = self.nodes[i].value.shape();
        // Split the borrow: ops read saved state from the node while writing input grads.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, padded } => {
                let xs = self.shape(*input);
                let ks = self.shape(*kernel);
                let (kh, kw, cin, cout) = (ks.n, ks.h, ks.w, ks.c);
                let rows = xs.n * xs.h * xs.w;
                self.acc(*bias, |db, _| {
                    for r in 0..rows {
                        for c in 0..cout {
                            db[c] = db[c] + g[r * cout + c];
                        }
                    }
                });
                let geom = ConvGeom { s: xs, kh, kw, cout };
                let gp = padded.as_ref().map(|_| geom.pad_grad(g));
                self.acc(*kernel, |dk, nodes| match (padded, &gp) {
                    (Some(xp), Some(gp)) => geom.kernel_grad(xp, gp, dk),
                    _ => {
                        // dK[cin×cout] += xᵀ · g
                        let x = nodes[input.0].value.data();
                        T::gemm_acc(cin, rows, cout, x, 1, cin as isize, g, cout as isize, 1, dk, cout as isize, 1);
                    }
                });
                self.acc(*input, |dx, nodes| {
                    let k = nodes[kernel.0].value.data();
                    match &gp {
                        Some(gp) => geom.input_grad(gp, k, dx),
                        None => T::gemm_acc(rows, cout, cin, g, cout as isize, 1, k, 1, cout as isize, dx, cin as isize, 1),
                    }
                });
            }
            Op::MaxPool { input, argmax } => self.acc(*input, |dx, _| {
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] = dx[src as usize] + g[o];
                }
            }),
            Op::Upsample { input, factor } => {
                let s = self.shape(*input);
                self.acc(*input, |dx, _| upsample_backward_acc(g, s, *factor, dx));
            }
            Op::Relu(x) => self.acc(*x, |dx, nodes| {
                for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                    if v > T::zero() {
                        *d = *d + gv;
                    }
                }
            }),
            Op::Sigmoid(x) => self.acc(*x, |dx, nodes| {
                    for ((d, &gv), &s) in dx.iter_mut().zip(g).zip(nodes[i].value.data()) {
                        *d = *d + gv * s * (T::one() - s);
                    }
            }),
            Op::Exp(x) => self.acc(*x, |dx, nodes| {
                    for ((d, &gv), &e) in dx.iter_mut().zip(g).zip(nodes[i].value.data()) {
                        *d = *d + gv * e;
                    }
            }),
            Op::Sqrt(x) => self.acc(*x, |dx, nodes| {
                    for ((d, &gv), &r) in dx.iter_mut().zip(g).zip(nodes[i].value.data()) {
                        if r > T::zero() {
                            *d = *d + gv / (T::lit(2.0) * r);
                        }
                    }
            }),
            Op::Log(x) => {
                let floor = T::lit(LOG_FLOOR);
                self.acc(*x, |dx, nodes| {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                        if v > floor {
                            *d = *d + gv / v;
                        }
                    }
                });
            }
            Op::Clamp { input, lo, hi } => self.acc(*input, |dx, nodes| {
                for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(nodes[input.0].value.data()) {
                    if v >= *lo && v <= *hi {
                        *d = *d + gv;
                    }
                }
            }),
            Op::Scale { input, factor } => self.acc(*input, |dx, _| {
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d = *d + gv * *factor;
                }
            }),
            Op::AddScalar(x) => self.acc(*x, |dx, _| {
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d = *d + gv;
                }
            }),
            Op::Sum { input } => {
                let s = self.shape(*input);
                let os = bcast_strides(out_shape, s);
                self.acc(*input, |dx, _| for_each_bcast(s, s.strides(), os, |i, _, o| dx[i] = dx[i] + g[o]));
            }
            Op::Concat { a, b } => {
                let (ca, cb) = (self.shape(*a).c, self.shape(*b).c);
                let pixels = out_shape.n * out_shape.h * out_shape.w;
                self.acc(*a, |da, _| {
                    for p in 0..pixels {
                        for c in 0..ca {
                            da[p * ca + c] = da[p * ca + c] + g[p * (ca + cb) + c];
                        }
                    }
                });
                self.acc(*b, |db, _| {
                    for p in 0..pixels {
                        for c in 0..cb {
                            db[p * cb + c] = db[p * cb + c] + g[p * (ca + cb) + ca + c];
                        }
                    }
                });
            }
            Op::SelectBatch { input, order } => {
                let per = out_shape.numel() / out_shape.n;
                self.acc(*input, |dx, _| {
                    for (o, &src) in order.iter().enumerate() {
                        for e in 0..per {
                            dx[src * per + e] = dx[src * per + e] + g[o * per + e];
                        }
                    }
                });
            }
            Op::Binary { kind, a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ba, bb) = (bcast_strides(sa, out_shape), bcast_strides(sb, out_shape));
                let kind = *kind;
                self.acc(*a, |da, nodes| {
                    let yb = nodes[b.0].value.data();
                    for_each_bcast(out_shape, ba, bb, |o, ia, ib| {
                        let d = match kind {
                            Binary::Add | Binary::Sub => g[o],
                            Binary::Mul => g[o] * yb[ib],
                            Binary::Div => g[o] / yb[ib],
                        };
                        da[ia] = da[ia] + d;
                    });
                });
                self.acc(*b, |db, nodes| {
                    let ya = nodes[a.0].value.data();
                    let yb = nodes[b.0].value.data();
                    for_each_bcast(out_shape, ba, bb, |o, ia, ib| {
                        let d = match kind {
                            Binary::Add => g[o],
                            Binary::Sub => -g[o],
                            Binary::Mul => g[o] * ya[ia],
                            Binary::Div => -g[o] * ya[ia] / (yb[ib] * yb[ib]),
                        };
                        db[ib] = db[ib] + d;
                    });
                });
            }
        }
        self.nodes[i].op = op;
    }
}
