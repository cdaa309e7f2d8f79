//! Tape-based reverse-mode differentiation over `f64` vectors.
//!
//! Every node holds a flat vector. Learnable tensors are not copied onto the
//! tape: linear ops refer to them by index into a borrowed parameter slice,
//! and their gradients accumulate into a caller-provided buffer of the same
//! shape. Matrices are row-major; 3×3 rotations are 9-vectors.

use std::ops::Range;

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Linear {
        w: ParamId,
        b: Option<ParamId>,
        x: Var,
    },
    Blended {
        ws: Vec<ParamId>,
        bs: Vec<ParamId>,
        alpha: Var,
        x: Var,
        /// per-expert outputs `W_k x + b_k`, concatenated
        parts: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    Affine {
        x: Var,
        scale: Vec<f64>,
    },
    SquaredError {
        x: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
    Decode6D(Var),
    MatMul3(Var, Var),
    MatVec3(Var, [f64; 3]),
    NormalizeXZ(Var),
    YawOfAxis(Var),
    FramePoint {
        origin: Var,
        axis: Var,
        local: [f64; 2],
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// A recorded computation. Values are computed eagerly as nodes are added.
pub struct Tape<'p> {
    params: &'p [Vec<f64>],
    nodes: Vec<Node>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec_into(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Backward of `y = v / |v|` given `y`, `|v|` and the output gradient.
fn normalize_back(y: [f64; 3], n: f64, g: [f64; 3]) -> [f64; 3] {
    let d = y[0] * g[0] + y[1] * g[1] + y[2] * g[2];
    [(g[0] - y[0] * d) / n, (g[1] - y[1] * d) / n, (g[2] - y[2] * d) / n]
}

/// Gram–Schmidt decode of a 6D rotation into a row-major 3×3 matrix, also
/// returning the intermediates needed for the backward pass.
fn decode6d(v: &[f64]) -> ([f64; 9], [[f64; 3]; 3], f64, f64) {
    let a = [v[0], v[1], v[2]];
    let b = [v[3], v[4], v[5]];
    let na = norm3(a);
    let c1 = scale3(a, 1.0 / na);
    let u = cross(c1, b);
    let nu = norm3(u);
    let c3 = scale3(u, 1.0 / nu);
    let c2 = cross(c3, c1);
    let mut m = [0.0; 9];
    for r in 0..3 {
        m[r * 3] = c1[r];
        m[r * 3 + 1] = c2[r];
        m[r * 3 + 2] = c3[r];
    }
    (m, [c1, c2, c3], na, nu)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Vec<f64>]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(value, op)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "elementwise op on mismatched lengths");
        let value = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        self.push(value, op)
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// `W x + b` with `W` of shape `len(b) × len(x)`.
    pub fn linear(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let xv = self.value(x);
        let wv = &self.params[w];
        assert_eq!(wv.len() % xv.len(), 0, "weight {w} does not fit input of {}", xv.len());
        let rows = wv.len() / xv.len();
        let mut out = match b {
            Some(b) => self.params[b].clone(),
            None => vec![0.0; rows],
        };
        assert_eq!(out.len(), rows, "bias {b:?} does not match weight {w}");
        mat_vec_into(wv, xv, &mut out);
        self.push(out, Op::Linear { w, b, x })
    }

    /// `Σ_k α_k (W_k x + b_k)`, equal by linearity to applying the
    /// α-blended weights `Σ_k α_k W_k` and bias `Σ_k α_k b_k`.
    pub fn blended_linear(&mut self, ws: &[ParamId], bs: &[ParamId], alpha: Var, x: Var) -> Var {
        let xv = self.value(x);
        let av = self.value(alpha);
        assert_eq!(ws.len(), av.len());
        assert_eq!(bs.len(), av.len());
        let rows = self.params[bs[0]].len();
        let mut parts = Vec::with_capacity(rows * ws.len());
        for (&w, &b) in ws.iter().zip(bs) {
            let start = parts.len();
            parts.extend_from_slice(&self.params[b]);
            mat_vec_into(&self.params[w], xv, &mut parts[start..]);
        }
        let mut out = vec![0.0; rows];
        for (a, part) in av.iter().zip(parts.chunks_exact(rows)) {
            for (o, p) in out.iter_mut().zip(part) {
                *o += a * p;
            }
        }
        let op = Op::Blended {
            ws: ws.to_vec(),
            bs: bs.to_vec(),
            alpha,
            x,
            parts,
        };
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 - x, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, elu, Op::Elu(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
        let s: f64 = e.iter().sum();
        let value = e.iter().map(|x| x / s).collect();
        self.push(value, Op::Softmax(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::with_capacity(parts.iter().map(|p| self.value(*p).len()).sum());
        for p in parts {
            value.extend_from_slice(self.value(*p));
        }
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, range: Range<usize>) -> Var {
        let value = self.value(a)[range.clone()].to_vec();
        self.push(value, Op::Slice(a, range.start))
    }

    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Var {
        let v = self.value(a);
        let value = indices.iter().map(|&i| v[i]).collect();
        self.push(value, Op::Gather(a, indices.to_vec()))
    }

    /// `x ⊙ scale + shift`.
    pub fn affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Var {
        let v = self.value(x);
        assert!(v.len() == scale.len() && v.len() == shift.len());
        let value = v
            .iter()
            .zip(scale)
            .zip(shift)
            .map(|((x, s), t)| x * s + t)
            .collect();
        self.push(
            value,
            Op::Affine {
                x,
                scale: scale.to_vec(),
            },
        )
    }

    /// Scalar `Σ w_i (x_i − target_i)²`.
    pub fn squared_error(&mut self, x: Var, target: &[f64], weights: &[f64]) -> Var {
        let v = self.value(x);
        assert!(v.len() == target.len() && v.len() == weights.len());
        let value = v
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((x, t), w)| w * (x - t) * (x - t))
            .sum();
        self.push(
            vec![value],
            Op::SquaredError {
                x,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Scalar `Σ c_i s_i` over scalar nodes, summed in the given order.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value = terms.iter().map(|(v, c)| self.scalar(*v) * c).sum();
        self.push(vec![value], Op::WeightedSum(terms.to_vec()))
    }

    /// 6D rotation → row-major 3×3 matrix.
    pub fn decode_6d(&mut self, a: Var) -> Var {
        assert_eq!(self.value(a).len(), 6);
        let (m, ..) = decode6d(self.value(a));
        self.push(m.to_vec(), Op::Decode6D(a))
    }

    pub fn mat_mul3(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let mut m = vec![0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                m[r * 3 + c] = (0..3).map(|k| x[r * 3 + k] * y[k * 3 + c]).sum();
            }
        }
        self.push(m, Op::MatMul3(a, b))
    }

    /// Matrix node times a constant vector.
    pub fn mat_vec3(&mut self, a: Var, v: [f64; 3]) -> Var {
        let m = self.value(a);
        let value = (0..3).map(|r| (0..3).map(|c| m[r * 3 + c] * v[c]).sum()).collect();
        self.push(value, Op::MatVec3(a, v))
    }

    /// `(a_x, a_z) / |(a_x, a_z)|` for a 3-vector node.
    pub fn normalize_xz(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v[0].hypot(v[2]);
        self.push(vec![v[0] / n, v[2] / n], Op::NormalizeXZ(a))
    }

    /// Heading angle of a horizontal x-axis direction: `atan2(−a_z, a_x)`.
    pub fn yaw_of_axis(&mut self, a: Var) -> Var {
        let v = self.value(a);
        self.push(vec![(-v[2]).atan2(v[0])], Op::YawOfAxis(a))
    }

    /// Ground-plane point `local` of a frame with `origin` and unit x-axis
    /// direction `axis = (a_x, a_z)`, in the parent frame.
    pub fn frame_point(&mut self, origin: Var, axis: Var, local: [f64; 2]) -> Var {
        let (o, a) = (self.value(origin), self.value(axis));
        let value = vec![
            o[0] + local[0] * a[0] - local[1] * a[1],
            o[1] + local[0] * a[1] + local[1] * a[0],
        ];
        self.push(value, Op::FramePoint { origin, axis, local })
    }

    /// Reverse pass from scalar `output`. Parameter gradients are added to
    /// `param_grads`, which must mirror the parameter slice's shapes.
    pub fn backward(&self, output: Var, param_grads: &mut [Vec<f64>]) {
        self.backward_with_inputs(output, param_grads);
    }

    /// Like [`Tape::backward`], also returning the gradient of every node
    /// (empty vectors for nodes the output does not depend on).
    pub fn backward_with_inputs(&self, output: Var, param_grads: &mut [Vec<f64>]) -> Vec<Vec<f64>> {
        assert_eq!(self.nodes[output.0].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[output.0] = vec![1.0];
        for i in (0..=output.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.propagate(i, &g, &mut grads, param_grads);
            grads[i] = g;
        }
        grads
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>], pg: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = &mut grads[v.0];
            if slot.is_empty() {
                *slot = vec![0.0; self.nodes[v.0].value.len()];
            }
            f(slot);
        };
        match &node.op {
            Op::Input => {}
            Op::Linear { w, b, x } => {
                let xv = val(*x);
                let cols = xv.len();
                for (row, gi) in pg[*w].chunks_exact_mut(cols).zip(g) {
                    if *gi != 0.0 {
                        for (r, xj) in row.iter_mut().zip(xv) {
                            *r += gi * xj;
                        }
                    }
                }
                if let Some(b) = b {
                    for (r, gi) in pg[*b].iter_mut().zip(g) {
                        *r += gi;
                    }
                }
                let wv = &self.params[*w];
                acc(*x, &mut |gx| {
                    for (row, gi) in wv.chunks_exact(cols).zip(g) {
                        for (o, wij) in gx.iter_mut().zip(row) {
                            *o += gi * wij;
                        }
                    }
                });
            }
            Op::Blended {
                ws,
                bs,
                alpha,
                x,
                parts,
            } => {
                let xv = val(*x);
                let av = val(*alpha);
                let cols = xv.len();
                let rows = g.len();
                acc(*alpha, &mut |ga| {
                    for (gk, part) in ga.iter_mut().zip(parts.chunks_exact(rows)) {
                        *gk += dot(g, part);
                    }
                });
                let mut gx = vec![0.0; cols];
                for (k, a) in av.iter().enumerate() {
                    if *a == 0.0 {
                        continue;
                    }
                    for (row, gi) in pg[ws[k]].chunks_exact_mut(cols).zip(g) {
                        let s = a * gi;
                        for (r, xj) in row.iter_mut().zip(xv) {
                            *r += s * xj;
                        }
                    }
                    for (r, gi) in pg[bs[k]].iter_mut().zip(g) {
                        *r += a * gi;
                    }
                    for (row, gi) in self.params[ws[k]].chunks_exact(cols).zip(g) {
                        let s = a * gi;
                        for (o, wij) in gx.iter_mut().zip(row) {
                            *o += s * wij;
                        }
                    }
                }
                acc(*x, &mut |slot| {
                    for (o, v) in slot.iter_mut().zip(&gx) {
                        *o += v;
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(o, gi)| *o -= gi));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((o, gi), y) in s.iter_mut().zip(g).zip(vb) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((o, gi), x) in s.iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * c)),
            Op::OneMinus(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(o, gi)| *o -= gi)),
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for ((o, gi), y) in s.iter_mut().zip(g).zip(y) {
                        *o += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for ((o, gi), y) in s.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Elu(a) => {
                let (x, y) = (val(*a), &node.value);
                acc(*a, &mut |s| {
                    for (((o, gi), x), y) in s.iter_mut().zip(g).zip(x).zip(y) {
                        *o += if *x > 0.0 { *gi } else { gi * (y + 1.0) };
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let d = dot(g, y);
                acc(*a, &mut |s| {
                    for ((o, gi), y) in s.iter_mut().zip(g).zip(y) {
                        *o += y * (gi - d);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = val(*p).len();
                    let chunk = &g[start..start + n];
                    acc(*p, &mut |s| s.iter_mut().zip(chunk).for_each(|(o, gi)| *o += gi));
                    start += n;
                }
            }
            Op::Slice(a, start) => {
                let start = *start;
                acc(*a, &mut |s| {
                    for (o, gi) in s[start..start + g.len()].iter_mut().zip(g) {
                        *o += gi;
                    }
                });
            }
            Op::Gather(a, idx) => acc(*a, &mut |s| {
                for (&j, gi) in idx.iter().zip(g) {
                    s[j] += gi;
                }
            }),
            Op::Affine { x, scale } => acc(*x, &mut |s| {
                for ((o, gi), c) in s.iter_mut().zip(g).zip(scale) {
                    *o += gi * c;
                }
            }),
            Op::SquaredError { x, target, weights } => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for (((o, xi), t), w) in s.iter_mut().zip(xv).zip(target).zip(weights) {
                        *o += g[0] * 2.0 * w * (xi - t);
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for (v, c) in terms {
                    acc(*v, &mut |s| s[0] += g[0] * c);
                }
            }
            Op::Decode6D(a) => {
                let v = val(*a);
                let (_, [c1, _, c3], na, nu) = decode6d(v);
                let b = [v[3], v[4], v[5]];
                let col = |c: usize| [g[c], g[3 + c], g[6 + c]];
                let (mut g1, g2, mut g3) = (col(0), col(1), col(2));
                // c2 = c3 × c1
                g3 = add3(g3, cross(c1, g2));
                g1 = add3(g1, cross(g2, c3));
                // c3 = u / |u|, u = c1 × b
                let gu = normalize_back(c3, nu, g3);
                g1 = add3(g1, cross(b, gu));
                let gb = cross(gu, c1);
                let ga = normalize_back(c1, na, g1);
                acc(*a, &mut |s| {
                    for i in 0..3 {
                        s[i] += ga[i];
                        s[3 + i] += gb[i];
                    }
                });
            }
            Op::MatMul3(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for r in 0..3 {
                        for k in 0..3 {
                            s[r * 3 + k] += (0..3).map(|c| g[r * 3 + c] * y[k * 3 + c]).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..3 {
                        for c in 0..3 {
                            s[k * 3 + c] += (0..3).map(|r| x[r * 3 + k] * g[r * 3 + c]).sum::<f64>();
                        }
                    }
                });
            }
            Op::MatVec3(a, v) => acc(*a, &mut |s| {
                for r in 0..3 {
                    for c in 0..3 {
                        s[r * 3 + c] += g[r] * v[c];
                    }
                }
            }),
            Op::NormalizeXZ(a) => {
                let v = val(*a);
                let n = v[0].hypot(v[2]);
                let y = &node.value;
                let d = y[0] * g[0] + y[1] * g[1];
                acc(*a, &mut |s| {
                    s[0] += (g[0] - y[0] * d) / n;
                    s[2] += (g[1] - y[1] * d) / n;
                });
            }
            Op::YawOfAxis(a) => {
                let v = val(*a);
                let r2 = v[0] * v[0] + v[2] * v[2];
                acc(*a, &mut |s| {
                    s[0] += g[0] * v[2] / r2;
                    s[2] -= g[0] * v[0] / r2;
                });
            }
            Op::FramePoint { origin, axis, local } => {
                acc(*origin, &mut |s| {
                    s[0] += g[0];
                    s[1] += g[1];
                });
                let [lx, lz] = *local;
                acc(*axis, &mut |s| {
                    s[0] += g[0] * lx + g[1] * lz;
                    s[1] += g[1] * lx - g[0] * lz;
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Checks d(output)/d(inputs and params) against central differences.
    fn check(
        inputs: Vec<Vec<f64>>,
        params: Vec<Vec<f64>>,
        build: impl Fn(&mut Tape, &[Var]) -> Var,
    ) {
        let eval = |inputs: &[Vec<f64>], params: &[Vec<f64>]| {
            let mut t = Tape::new(params);
            let vars: Vec<Var> = inputs.iter().map(|v| t.input(v.clone())).collect();
            let out = build(&mut t, &vars);
            t.scalar(out)
        };
        let mut pg: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut t = Tape::new(&params);
        let vars: Vec<Var> = inputs.iter().map(|v| t.input(v.clone())).collect();
        let out = build(&mut t, &vars);
        let grads = t.backward_with_inputs(out, &mut pg);
        let h = 1e-5;
        let compare = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-5, "{what}: analytic {analytic} vs fd {fd}");
        };
        for (n, v) in inputs.iter().enumerate() {
            for i in 0..v.len() {
                let mut p = inputs.clone();
                p[n][i] += h;
                let mut m = inputs.clone();
                m[n][i] -= h;
                let a = grads[vars[n].0].get(i).copied().unwrap_or(0.0);
                compare(a, eval(&p, &params), eval(&m, &params), &format!("input {n}[{i}]"));
            }
        }
        for (n, v) in params.iter().enumerate() {
            for i in 0..v.len() {
                let mut p = params.clone();
                p[n][i] += h;
                let mut m = params.clone();
                m[n][i] -= h;
                compare(pg[n][i], eval(&inputs, &p), eval(&inputs, &m), &format!("param {n}[{i}]"));
            }
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Reduces a vector node to a scalar with fixed random weights.
    fn probe(t: &mut Tape, v: Var, seed: u64) -> Var {
        let n = t.value(v).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = rand_vec(&mut rng, n);
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        t.squared_error(v, &target, &weights)
    }

    #[test]
    fn square_at_three() {
        let p: Vec<Vec<f64>> = Vec::new();
        let mut t = Tape::new(&p);
        let x = t.input(vec![3.0]);
        let y = t.mul(x, x);
        let g = t.backward_with_inputs(y, &mut []);
        assert_eq!(g[x.0], vec![6.0]);
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![rand_vec(&mut rng, 5), rand_vec(&mut rng, 5)];
        check(inputs, Vec::new(), |t, v| {
            let a = t.add(v[0], v[1]);
            let b = t.sub(a, v[1]);
            let c = t.mul(b, v[1]);
            let d = t.sigmoid(c);
            let e = t.tanh(v[0]);
            let f = t.elu(v[1]);
            let g = t.one_minus(d);
            let h = t.scale(e, -1.7);
            let all = t.concat(&[g, h, f]);
            let s = t.softmax(all);
            let s2 = t.slice(s, 2..9);
            let s3 = t.gather(s2, &[0, 3, 3, 6]);
            let a = t.affine(s3, &[1.0, 2.0, -0.5, 3.0], &[0.1, 0.2, 0.3, 0.4]);
            let p = probe(t, a, 9);
            let q = probe(t, all, 10);
            t.weighted_sum(&[(p, 0.3), (q, 1.1)])
        });
    }

    #[test]
    fn linear_and_blended() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![
            rand_vec(&mut rng, 12),
            rand_vec(&mut rng, 3),
            rand_vec(&mut rng, 12),
            rand_vec(&mut rng, 3),
        ];
        let inputs = vec![rand_vec(&mut rng, 4), rand_vec(&mut rng, 2)];
        check(inputs, params, |t, v| {
            let y = t.linear(0, Some(1), v[0]);
            let z = t.linear(2, None, v[0]);
            let alpha = t.softmax(v[1]);
            let b = t.blended_linear(&[0, 2], &[1, 3], alpha, v[0]);
            let all = t.concat(&[y, z, b]);
            probe(t, all, 3)
        });
    }

    #[test]
    fn geometry_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            rand_vec(&mut rng, 6),
            rand_vec(&mut rng, 6),
            rand_vec(&mut rng, 2),
        ];
        check(inputs, Vec::new(), |t, v| {
            let a = t.decode_6d(v[0]);
            let b = t.decode_6d(v[1]);
            let m = t.mat_mul3(a, b);
            let p = t.mat_vec3(m, [0.3, -0.2, 0.9]);
            let dir = t.normalize_xz(p);
            let yaw = t.yaw_of_axis(p);
            let q = t.frame_point(v[2], dir, [0.4, -0.7]);
            let all = t.concat(&[m, q, yaw]);
            probe(t, all, 4)
        });
    }

    #[test]
    fn decode_matches_geometry_module() {
        let v = [0.3, -0.5, 0.8, 0.1, 0.9, 0.2];
        let (m, ..) = decode6d(&v);
        let r = crate::geometry::Rotation6D::from_slice(&v).decode().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i * 3 + j] - r[(i, j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn blended_equals_blended_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![
            rand_vec(&mut rng, 6),
            rand_vec(&mut rng, 2),
            rand_vec(&mut rng, 6),
            rand_vec(&mut rng, 2),
        ];
        let alpha = [0.3, 0.7];
        let w: Vec<f64> = params[0].iter().zip(&params[2]).map(|(a, b)| 0.3 * a + 0.7 * b).collect();
        let b: Vec<f64> = params[1].iter().zip(&params[3]).map(|(a, b)| 0.3 * a + 0.7 * b).collect();
        let merged = vec![w, b];
        let x = rand_vec(&mut rng, 3);

        let mut t = Tape::new(&params);
        let xv = t.input(x.clone());
        let av = t.input(alpha.to_vec());
        let y = t.blended_linear(&[0, 2], &[1, 3], av, xv);
        let mut t2 = Tape::new(&merged);
        let xv2 = t2.input(x);
        let y2 = t2.linear(0, Some(1), xv2);
        for (a, b) in t.value(y).iter().zip(t2.value(y2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_blend_is_exact_and_leaves_other_expert_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = vec![
            rand_vec(&mut rng, 6),
            rand_vec(&mut rng, 2),
            rand_vec(&mut rng, 6),
            rand_vec(&mut rng, 2),
        ];
        let x = rand_vec(&mut rng, 3);
        let mut t = Tape::new(&params);
        let xv = t.input(x.clone());
        let av = t.input(vec![0.0, 1.0]);
        let y = t.blended_linear(&[0, 2], &[1, 3], av, xv);
        let direct = t.linear(2, Some(3), xv);
        assert_eq!(t.value(y), t.value(direct));
        let loss = probe(&mut t, y, 1);
        let mut pg: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        t.backward(loss, &mut pg);
        assert!(pg[0].iter().chain(&pg[1]).all(|g| *g == 0.0));
        assert!(pg[2].iter().any(|g| *g != 0.0));
    }

    #[test]
    fn activation_definitions() {
        assert_eq!(elu(0.0), 0.0);
        assert!((elu(-50.0) + 1.0).abs() < 1e-15);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }
}
