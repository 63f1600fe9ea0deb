//! Computation graph: tensor storage, forward ops, reverse-mode backward.

use super::NumericsError;

/// Handle to a tensor inside one [`Graph`]. Only valid for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

/// Dense n-dimensional array of 64-bit reals with an optional gradient slot.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// How a node was produced, with whatever the backward pass needs saved.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorRef, TensorRef),
    Sub(TensorRef, TensorRef),
    ScalarMul(TensorRef, f64),
    Matmul(TensorRef, TensorRef),
    Transpose(TensorRef),
    Concat { axis: usize, inputs: Vec<TensorRef> },
    Mean(TensorRef),
    Relu(TensorRef),
    Softmax { input: TensorRef, axis: usize },
    LayerNorm { input: TensorRef, axis: usize },
    Linear { x: TensorRef, w: TensorRef, b: TensorRef },
    BilinearSample { grid: TensorRef, xy: TensorRef, h: usize, w: usize },
    GatherRows { input: TensorRef, rows: Vec<usize> },
    RowwiseDot { q: TensorRef, k: TensorRef },
    WeightedRowSum { w: TensorRef, v: TensorRef },
    L2NormalizeRows(TensorRef),
    AvgPool2x2 { input: TensorRef, h: usize, w: usize },
    Reshape(TensorRef),
    Huber { r: TensorRef, delta: f64 },
    SecondDiffL1(TensorRef),
    CrossEntropy { logits: TensorRef, targets: Vec<usize> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Ordered record of executed differentiable operations. Append-only, so
/// node order is already a topological order; backward walks it in exact
/// reverse execution order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const NORMALIZE_EPS_SQ: f64 = 1e-24;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor (no producing op).
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> TensorRef {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(shape.to_vec(), values, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> TensorRef {
        self.leaf(shape, values, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorRef {
        let n = shape.iter().product();
        self.constant(shape, vec![0.0; n])
    }

    pub fn scalar(&mut self, v: f64) -> TensorRef {
        self.constant(&[1], vec![v])
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].tensor.shape
    }

    pub fn values(&self, t: TensorRef) -> &[f64] {
        &self.nodes[t.0].tensor.values
    }

    pub fn grad(&self, t: TensorRef) -> Option<&[f64]> {
        self.nodes[t.0].tensor.grad.as_deref()
    }

    pub fn tensor(&self, t: TensorRef) -> &Tensor {
        &self.nodes[t.0].tensor
    }

    /// Read a single-element tensor.
    pub fn item(&self, t: TensorRef) -> f64 {
        debug_assert_eq!(self.nodes[t.0].tensor.numel(), 1);
        self.nodes[t.0].tensor.values[0]
    }

    /// Reset every allocated gradient buffer to zero.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> TensorRef {
        let grad = requires_grad.then(|| vec![0.0; values.len()]);
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                values,
                requires_grad,
                grad,
            },
            op,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn check(&self, t: TensorRef) -> Result<(), NumericsError> {
        if t.0 >= self.nodes.len() {
            return Err(NumericsError::DetachedTensor(t.0));
        }
        Ok(())
    }

    fn needs_grad(&self, refs: &[TensorRef]) -> bool {
        refs.iter().any(|r| self.nodes[r.0].tensor.requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, t: TensorRef) -> Result<(usize, usize), NumericsError> {
        let s = self.shape(t);
        if s.len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- elementwise and linear-algebra ops ------------------------------

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("add", a, b)?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), values, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("sub", a, b)?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), values, rg, Op::Sub(a, b)))
    }

    pub fn scalar_mul(&mut self, a: TensorRef, k: f64) -> Result<TensorRef, NumericsError> {
        self.check(a)?;
        let values = self.values(a).iter().map(|x| k * x).collect();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(self.shape(a).to_vec(), values, rg, Op::ScalarMul(a, k)))
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (m, p) = self.dims2("matmul", a)?;
        let (p2, n) = self.dims2("matmul", b)?;
        if p != p2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.values(a), self.values(b), &mut out, m, p, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef, NumericsError> {
        self.check(a)?;
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.values(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(vec![n, m], out, rg, Op::Transpose(a)))
    }

    /// Concatenate rank-2 tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(&mut self, axis: usize, inputs: &[TensorRef]) -> Result<TensorRef, NumericsError> {
        assert!(axis < 2, "concat supports rank-2 tensors only");
        assert!(!inputs.is_empty());
        for &t in inputs {
            self.check(t)?;
        }
        let (r0, c0) = self.dims2("concat", inputs[0])?;
        let (mut rows, mut cols) = (r0, c0);
        for &t in &inputs[1..] {
            let (r, c) = self.dims2("concat", t)?;
            if axis == 0 {
                if c != c0 {
                    return Err(NumericsError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(NumericsError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                cols += c;
            }
        }
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &t in inputs {
                out.extend_from_slice(self.values(t));
            }
        } else {
            for r in 0..rows {
                for &t in inputs {
                    let c = self.shape(t)[1];
                    let src = self.values(t);
                    out.extend_from_slice(&src[r * c..(r + 1) * c]);
                }
            }
        }
        let rg = self.needs_grad(inputs);
        Ok(self.push(
            vec![rows, cols],
            out,
            rg,
            Op::Concat {
                axis,
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Mean over all elements, to a single-element tensor.
    pub fn mean(&mut self, a: TensorRef) -> Result<TensorRef, NumericsError> {
        self.check(a)?;
        let v = self.values(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(vec![1], vec![m], rg, Op::Mean(a)))
    }

    pub fn relu(&mut self, a: TensorRef) -> Result<TensorRef, NumericsError> {
        self.check(a)?;
        let values = self.values(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(self.shape(a).to_vec(), values, rg, Op::Relu(a)))
    }

    /// Softmax along `axis` of a rank-2 tensor, with max-subtraction.
    pub fn softmax(&mut self, a: TensorRef, axis: usize) -> Result<TensorRef, NumericsError> {
        self.check(a)?;
        assert!(axis < 2, "softmax supports rank-2 tensors only");
        let (rows, cols) = self.dims2("softmax", a)?;
        let src = self.values(a);
        let mut out = vec![0.0; rows * cols];
        let (lanes, lane_len, stride, base) = lane_layout(rows, cols, axis);
        for lane in 0..lanes {
            let start = lane * base;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..lane_len {
                mx = mx.max(src[start + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..lane_len {
                let e = (src[start + i * stride] - mx).exp();
                out[start + i * stride] = e;
                sum += e;
            }
            for i in 0..lane_len {
                out[start + i * stride] /= sum;
            }
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(vec![rows, cols], out, rg, Op::Softmax { input: a, axis }))
    }

    /// Normalize along `axis` to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: TensorRef, axis: usize) -> Result<TensorRef, NumericsError> {
        self.check(a)?;
        assert!(axis < 2, "layer_norm supports rank-2 tensors only");
        let (rows, cols) = self.dims2("layer_norm", a)?;
        let src = self.values(a);
        let mut out = vec![0.0; rows * cols];
        let (lanes, lane_len, stride, base) = lane_layout(rows, cols, axis);
        for lane in 0..lanes {
            let start = lane * base;
            let mut mean = 0.0;
            for i in 0..lane_len {
                mean += src[start + i * stride];
            }
            mean /= lane_len as f64;
            let mut var = 0.0;
            for i in 0..lane_len {
                let d = src[start + i * stride] - mean;
                var += d * d;
            }
            var /= lane_len as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for i in 0..lane_len {
                out[start + i * stride] = (src[start + i * stride] - mean) * inv;
            }
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(vec![rows, cols], out, rg, Op::LayerNorm { input: a, axis }))
    }

    /// `x · w + b` with `x` `[n, din]`, `w` `[din, dout]`, `b` `[dout]`.
    pub fn linear(&mut self, x: TensorRef, w: TensorRef, b: TensorRef) -> Result<TensorRef, NumericsError> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (n, din) = self.dims2("linear", x)?;
        let (din2, dout) = self.dims2("linear", w)?;
        if din != din2 || self.shape(b) != [dout] {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                lhs: vec![n, din],
                rhs: self.shape(w).to_vec(),
            });
        }
        let mut out = vec![0.0; n * dout];
        matmul_into(self.values(x), self.values(w), &mut out, n, din, dout);
        let bias = self.values(b);
        for r in 0..n {
            for c in 0..dout {
                out[r * dout + c] += bias[c];
            }
        }
        let rg = self.needs_grad(&[x, w, b]);
        Ok(self.push(vec![n, dout], out, rg, Op::Linear { x, w, b }))
    }

    /// Bilinear interpolation of a `[h*w, c]` grid at `xy` `[m, 2]` grid
    /// coordinates (x along width, y along height). Out-of-grid queries are
    /// clamped to the border. Differentiable in both the grid values and
    /// the sample locations.
    pub fn bilinear_sample(
        &mut self,
        grid: TensorRef,
        h: usize,
        w: usize,
        xy: TensorRef,
    ) -> Result<TensorRef, NumericsError> {
        self.check(grid)?;
        self.check(xy)?;
        let (cells, c) = self.dims2("bilinear_sample", grid)?;
        if cells != h * w {
            return Err(NumericsError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: vec![cells, c],
                rhs: vec![h * w, c],
            });
        }
        let (m, two) = self.dims2("bilinear_sample", xy)?;
        if two != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: vec![m, two],
                rhs: vec![m, 2],
            });
        }
        let g = self.values(grid);
        let pts = self.values(xy);
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            let corners = bilinear_corners(pts[i * 2], pts[i * 2 + 1], h, w);
            for ch in 0..c {
                out[i * c + ch] = corners.interp(g, c, ch);
            }
        }
        let rg = self.needs_grad(&[grid, xy]);
        Ok(self.push(vec![m, c], out, rg, Op::BilinearSample { grid, xy, h, w }))
    }

    /// Select rows of a rank-2 tensor. Gradient scatter-adds back.
    pub fn gather_rows(&mut self, a: TensorRef, rows: &[usize]) -> Result<TensorRef, NumericsError> {
        self.check(a)?;
        let (r, c) = self.dims2("gather_rows", a)?;
        for &idx in rows {
            if idx >= r {
                return Err(NumericsError::IndexOutOfRange { index: idx, classes: r });
            }
        }
        let src = self.values(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &idx in rows {
            out.extend_from_slice(&src[idx * c..(idx + 1) * c]);
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(
            vec![rows.len(), c],
            out,
            rg,
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Per-row dot products: `q` `[n, c]` against `j` keys per row stacked
    /// in `k` `[n*j, c]`, giving `[n, j]`.
    pub fn rowwise_dot(&mut self, q: TensorRef, k: TensorRef) -> Result<TensorRef, NumericsError> {
        self.check(q)?;
        self.check(k)?;
        let (n, c) = self.dims2("rowwise_dot", q)?;
        let (nj, c2) = self.dims2("rowwise_dot", k)?;
        if c != c2 || n == 0 || nj % n != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "rowwise_dot",
                lhs: vec![n, c],
                rhs: vec![nj, c2],
            });
        }
        let j = nj / n;
        let qv = self.values(q);
        let kv = self.values(k);
        let mut out = vec![0.0; n * j];
        for i in 0..n {
            for jj in 0..j {
                let krow = &kv[(i * j + jj) * c..(i * j + jj + 1) * c];
                let qrow = &qv[i * c..(i + 1) * c];
                out[i * j + jj] = dot(qrow, krow);
            }
        }
        let rg = self.needs_grad(&[q, k]);
        Ok(self.push(vec![n, j], out, rg, Op::RowwiseDot { q, k }))
    }

    /// Per-row weighted sums: weights `[n, j]` over `j` values per row
    /// stacked in `v` `[n*j, c]`, giving `[n, c]`.
    pub fn weighted_rowsum(&mut self, w: TensorRef, v: TensorRef) -> Result<TensorRef, NumericsError> {
        self.check(w)?;
        self.check(v)?;
        let (n, j) = self.dims2("weighted_rowsum", w)?;
        let (nj, c) = self.dims2("weighted_rowsum", v)?;
        if nj != n * j {
            return Err(NumericsError::ShapeMismatch {
                op: "weighted_rowsum",
                lhs: vec![n, j],
                rhs: vec![nj, c],
            });
        }
        let wv = self.values(w);
        let vv = self.values(v);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for jj in 0..j {
                let wij = wv[i * j + jj];
                let vrow = &vv[(i * j + jj) * c..(i * j + jj + 1) * c];
                for ch in 0..c {
                    out[i * c + ch] += wij * vrow[ch];
                }
            }
        }
        let rg = self.needs_grad(&[w, v]);
        Ok(self.push(vec![n, c], out, rg, Op::WeightedRowSum { w, v }))
    }

    /// L2-normalize each row. Zero rows map to (near) zero rows.
    pub fn l2_normalize_rows(&mut self, a: TensorRef) -> Result<TensorRef, NumericsError> {
        self.check(a)?;
        let (n, c) = self.dims2("l2_normalize", a)?;
        let src = self.values(a);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let nrm = (dot(row, row) + NORMALIZE_EPS_SQ).sqrt();
            for ch in 0..c {
                out[i * c + ch] = row[ch] / nrm;
            }
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(vec![n, c], out, rg, Op::L2NormalizeRows(a)))
    }

    /// 2x2 average pooling of a `[h*w, c]` grid; `h` and `w` must be even.
    pub fn avg_pool2x2(&mut self, a: TensorRef, h: usize, w: usize) -> Result<TensorRef, NumericsError> {
        self.check(a)?;
        let (cells, c) = self.dims2("avg_pool2x2", a)?;
        if cells != h * w || h % 2 != 0 || w % 2 != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "avg_pool2x2",
                lhs: vec![cells, c],
                rhs: vec![h * w, c],
            });
        }
        let src = self.values(a);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += src[((2 * y + dy) * w + 2 * x + dx) * c + ch];
                        }
                    }
                    out[(y * ow + x) * c + ch] = 0.25 * s;
                }
            }
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(vec![oh * ow, c], out, rg, Op::AvgPool2x2 { input: a, h, w }))
    }

    /// Reinterpret the same values under a new shape.
    pub fn reshape(&mut self, a: TensorRef, shape: &[usize]) -> Result<TensorRef, NumericsError> {
        self.check(a)?;
        let numel: usize = shape.iter().product();
        if numel != self.tensor(a).numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let values = self.values(a).to_vec();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(shape.to_vec(), values, rg, Op::Reshape(a)))
    }

    // ---- loss primitives -------------------------------------------------

    /// Elementwise Huber loss summed over all elements:
    /// `0.5 r^2` for `|r| <= delta`, else `delta (|r| - 0.5 delta)`.
    pub fn huber(&mut self, r: TensorRef, delta: f64) -> Result<TensorRef, NumericsError> {
        self.check(r)?;
        if delta <= 0.0 {
            return Err(NumericsError::NonPositiveDelta(delta));
        }
        let mut total = 0.0;
        for &x in self.values(r) {
            let a = x.abs();
            total += if a <= delta {
                0.5 * x * x
            } else {
                delta * (a - 0.5 * delta)
            };
        }
        let rg = self.needs_grad(&[r]);
        Ok(self.push(vec![1], vec![total], rg, Op::Huber { r, delta }))
    }

    /// L1 norm of the second-order temporal difference of a `[t, d]`
    /// trajectory, summed over the `t-2` interior frames.
    pub fn second_diff_l1(&mut self, traj: TensorRef) -> Result<TensorRef, NumericsError> {
        self.check(traj)?;
        let (t, d) = self.dims2("second_diff_l1", traj)?;
        if t < 3 {
            return Err(NumericsError::TrajectoryTooShort(t));
        }
        let p = self.values(traj);
        let mut total = 0.0;
        for i in 1..t - 1 {
            for dim in 0..d {
                let q = p[(i + 1) * d + dim] - 2.0 * p[i * d + dim] + p[(i - 1) * d + dim];
                total += q.abs();
            }
        }
        let rg = self.needs_grad(&[traj]);
        Ok(self.push(vec![1], vec![total], rg, Op::SecondDiffL1(traj)))
    }

    /// Mean negative log-likelihood of `targets` under column-wise softmax
    /// of `logits` `[classes, n]`.
    pub fn cross_entropy(&mut self, logits: TensorRef, targets: &[usize]) -> Result<TensorRef, NumericsError> {
        self.check(logits)?;
        let (classes, n) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![classes, n],
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= classes {
                return Err(NumericsError::IndexOutOfRange {
                    index: t,
                    classes,
                });
            }
        }
        let lv = self.values(logits);
        let mut total = 0.0;
        for j in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..classes {
                mx = mx.max(lv[c * n + j]);
            }
            let mut sum = 0.0;
            for c in 0..classes {
                sum += (lv[c * n + j] - mx).exp();
            }
            let lse = mx + sum.ln();
            total += lse - lv[targets[j] * n + j];
        }
        total /= n as f64;
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            vec![1],
            vec![total],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate `d loss / d tensor` into every tensor with a gradient
    /// slot, walking the op record in reverse execution order.
    pub fn backward(&mut self, loss: TensorRef) -> Result<(), NumericsError> {
        self.check(loss)?;
        let lt = &self.nodes[loss.0].tensor;
        if lt.numel() != 1 {
            return Err(NumericsError::NotScalar(lt.shape.clone()));
        }
        if !lt.requires_grad {
            // Loss that depends on no tracked tensor: nothing to do.
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.0].tensor.grad.as_mut() {
            g[0] += 1.0;
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tensor.requires_grad {
                continue;
            }
            // Reverse topological order: by the time we visit a node its
            // output gradient is final, so it can be taken without a copy.
            let gout = match self.nodes[idx].tensor.grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            self.backward_op(idx, &op, &gout);
            self.nodes[idx].tensor.grad = Some(gout);
        }
        Ok(())
    }

    fn grad_mut(&mut self, t: TensorRef) -> Option<&mut [f64]> {
        self.nodes[t.0].tensor.grad.as_deref_mut()
    }

    fn backward_op(&mut self, out_idx: usize, op: &Op, gout: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_mut(a) {
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if let Some(gb) = self.grad_mut(b) {
                    for (g, &d) in gb.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_mut(a) {
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if let Some(gb) = self.grad_mut(b) {
                    for (g, &d) in gb.iter_mut().zip(gout) {
                        *g -= d;
                    }
                }
            }
            Op::ScalarMul(a, k) => {
                if let Some(ga) = self.grad_mut(a) {
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += k * d;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, p) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].tensor.requires_grad {
                    // dA[i,k] += sum_j gout[i,j] * B[k,j]
                    let bv = self.nodes[b.0].tensor.values.clone();
                    let ga = self.grad_mut(a).unwrap();
                    for i in 0..m {
                        for k in 0..p {
                            let brow = &bv[k * n..(k + 1) * n];
                            let grow = &gout[i * n..(i + 1) * n];
                            ga[i * p + k] += dot(grow, brow);
                        }
                    }
                }
                if self.nodes[b.0].tensor.requires_grad {
                    // dB[k,j] += sum_i A[i,k] * gout[i,j]
                    let av = self.nodes[a.0].tensor.values.clone();
                    let gb = self.grad_mut(b).unwrap();
                    for i in 0..m {
                        for k in 0..p {
                            let aik = av[i * p + k];
                            let grow = &gout[i * n..(i + 1) * n];
                            let brow = &mut gb[k * n..(k + 1) * n];
                            for j in 0..n {
                                brow[j] += aik * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                if let Some(ga) = self.grad_mut(a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gout[j * m + i];
                        }
                    }
                }
            }
            Op::Concat { axis, ref inputs } => {
                if axis == 0 {
                    let mut offset = 0;
                    for &t in inputs {
                        let len = self.tensor(t).numel();
                        if let Some(g) = self.grad_mut(t) {
                            for (gi, &d) in g.iter_mut().zip(&gout[offset..offset + len]) {
                                *gi += d;
                            }
                        }
                        offset += len;
                    }
                } else {
                    let rows = self.shape(inputs[0])[0];
                    let total_cols: usize = inputs.iter().map(|&t| self.shape(t)[1]).sum();
                    let mut col_offset = 0;
                    for &t in inputs {
                        let c = self.shape(t)[1];
                        if self.nodes[t.0].tensor.requires_grad {
                            let g = self.grad_mut(t).unwrap();
                            for r in 0..rows {
                                for cc in 0..c {
                                    g[r * c + cc] += gout[r * total_cols + col_offset + cc];
                                }
                            }
                        }
                        col_offset += c;
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.tensor(a).numel() as f64;
                if let Some(ga) = self.grad_mut(a) {
                    let d = gout[0] / n;
                    for g in ga.iter_mut() {
                        *g += d;
                    }
                }
            }
            Op::Relu(a) => {
                let vals = self.nodes[a.0].tensor.values.clone();
                if let Some(ga) = self.grad_mut(a) {
                    for i in 0..vals.len() {
                        if vals[i] > 0.0 {
                            ga[i] += gout[i];
                        }
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (rows, cols) = (self.shape(input)[0], self.shape(input)[1]);
                let y = self.nodes[out_idx].tensor.values.clone();
                let (lanes, lane_len, stride, base) = lane_layout(rows, cols, axis);
                if let Some(ga) = self.grad_mut(input) {
                    for lane in 0..lanes {
                        let start = lane * base;
                        let mut dotv = 0.0;
                        for i in 0..lane_len {
                            dotv += gout[start + i * stride] * y[start + i * stride];
                        }
                        for i in 0..lane_len {
                            let k = start + i * stride;
                            ga[k] += y[k] * (gout[k] - dotv);
                        }
                    }
                }
            }
            Op::LayerNorm { input, axis } => {
                let (rows, cols) = (self.shape(input)[0], self.shape(input)[1]);
                let y = self.nodes[out_idx].tensor.values.clone();
                let x = self.nodes[input.0].tensor.values.clone();
                let (lanes, lane_len, stride, base) = lane_layout(rows, cols, axis);
                if let Some(ga) = self.grad_mut(input) {
                    for lane in 0..lanes {
                        let start = lane * base;
                        let nl = lane_len as f64;
                        let mut mean = 0.0;
                        for i in 0..lane_len {
                            mean += x[start + i * stride];
                        }
                        mean /= nl;
                        let mut var = 0.0;
                        for i in 0..lane_len {
                            let d = x[start + i * stride] - mean;
                            var += d * d;
                        }
                        var /= nl;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let mut gmean = 0.0;
                        let mut gy = 0.0;
                        for i in 0..lane_len {
                            gmean += gout[start + i * stride];
                            gy += gout[start + i * stride] * y[start + i * stride];
                        }
                        gmean /= nl;
                        gy /= nl;
                        for i in 0..lane_len {
                            let k = start + i * stride;
                            ga[k] += inv * (gout[k] - gmean - y[k] * gy);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(x)[0], self.shape(x)[1]);
                let dout = self.shape(w)[1];
                if self.nodes[x.0].tensor.requires_grad {
                    let wv = self.nodes[w.0].tensor.values.clone();
                    let gx = self.grad_mut(x).unwrap();
                    for i in 0..n {
                        for k in 0..din {
                            let wrow = &wv[k * dout..(k + 1) * dout];
                            let grow = &gout[i * dout..(i + 1) * dout];
                            gx[i * din + k] += dot(grow, wrow);
                        }
                    }
                }
                if self.nodes[w.0].tensor.requires_grad {
                    let xv = self.nodes[x.0].tensor.values.clone();
                    let gw = self.grad_mut(w).unwrap();
                    for i in 0..n {
                        for k in 0..din {
                            let xik = xv[i * din + k];
                            let grow = &gout[i * dout..(i + 1) * dout];
                            let wrow = &mut gw[k * dout..(k + 1) * dout];
                            for j in 0..dout {
                                wrow[j] += xik * grow[j];
                            }
                        }
                    }
                }
                if let Some(gb) = self.grad_mut(b) {
                    for i in 0..n {
                        for j in 0..dout {
                            gb[j] += gout[i * dout + j];
                        }
                    }
                }
            }
            Op::BilinearSample { grid, xy, h, w } => {
                let c = self.shape(grid)[1];
                let m = self.shape(xy)[0];
                let pts = self.nodes[xy.0].tensor.values.clone();
                let gv = self.nodes[grid.0].tensor.values.clone();
                if self.nodes[grid.0].tensor.requires_grad {
                    let gg = self.grad_mut(grid).unwrap();
                    for i in 0..m {
                        let cn = bilinear_corners(pts[i * 2], pts[i * 2 + 1], h, w);
                        for ch in 0..c {
                            let d = gout[i * c + ch];
                            gg[cn.i00 * c + ch] += cn.w00 * d;
                            gg[cn.i10 * c + ch] += cn.w10 * d;
                            gg[cn.i01 * c + ch] += cn.w01 * d;
                            gg[cn.i11 * c + ch] += cn.w11 * d;
                        }
                    }
                }
                if self.nodes[xy.0].tensor.requires_grad {
                    let gxy = self.grad_mut(xy).unwrap();
                    for i in 0..m {
                        let cn = bilinear_corners(pts[i * 2], pts[i * 2 + 1], h, w);
                        let mut dx = 0.0;
                        let mut dy = 0.0;
                        for ch in 0..c {
                            let d = gout[i * c + ch];
                            let g00 = gv[cn.i00 * c + ch];
                            let g10 = gv[cn.i10 * c + ch];
                            let g01 = gv[cn.i01 * c + ch];
                            let g11 = gv[cn.i11 * c + ch];
                            dx += d * ((1.0 - cn.fy) * (g10 - g00) + cn.fy * (g11 - g01));
                            dy += d * ((1.0 - cn.fx) * (g01 - g00) + cn.fx * (g11 - g10));
                        }
                        // Clamped coordinates have zero positional gradient.
                        gxy[i * 2] += if cn.x_clamped { 0.0 } else { dx };
                        gxy[i * 2 + 1] += if cn.y_clamped { 0.0 } else { dy };
                    }
                }
            }
            Op::GatherRows { input, ref rows } => {
                let c = self.shape(input)[1];
                if let Some(g) = self.grad_mut(input) {
                    for (i, &r) in rows.iter().enumerate() {
                        for ch in 0..c {
                            g[r * c + ch] += gout[i * c + ch];
                        }
                    }
                }
            }
            Op::RowwiseDot { q, k } => {
                let (n, c) = (self.shape(q)[0], self.shape(q)[1]);
                let j = self.shape(k)[0] / n;
                if self.nodes[q.0].tensor.requires_grad {
                    let kv = self.nodes[k.0].tensor.values.clone();
                    let gq = self.grad_mut(q).unwrap();
                    for i in 0..n {
                        for jj in 0..j {
                            let d = gout[i * j + jj];
                            let krow = &kv[(i * j + jj) * c..(i * j + jj + 1) * c];
                            let qrow = &mut gq[i * c..(i + 1) * c];
                            for ch in 0..c {
                                qrow[ch] += d * krow[ch];
                            }
                        }
                    }
                }
                if self.nodes[k.0].tensor.requires_grad {
                    let qv = self.nodes[q.0].tensor.values.clone();
                    let gk = self.grad_mut(k).unwrap();
                    for i in 0..n {
                        for jj in 0..j {
                            let d = gout[i * j + jj];
                            let qrow = &qv[i * c..(i + 1) * c];
                            let krow = &mut gk[(i * j + jj) * c..(i * j + jj + 1) * c];
                            for ch in 0..c {
                                krow[ch] += d * qrow[ch];
                            }
                        }
                    }
                }
            }
            Op::WeightedRowSum { w, v } => {
                let (n, j) = (self.shape(w)[0], self.shape(w)[1]);
                let c = self.shape(v)[1];
                if self.nodes[w.0].tensor.requires_grad {
                    let vv = self.nodes[v.0].tensor.values.clone();
                    let gw = self.grad_mut(w).unwrap();
                    for i in 0..n {
                        for jj in 0..j {
                            let vrow = &vv[(i * j + jj) * c..(i * j + jj + 1) * c];
                            let grow = &gout[i * c..(i + 1) * c];
                            gw[i * j + jj] += dot(grow, vrow);
                        }
                    }
                }
                if self.nodes[v.0].tensor.requires_grad {
                    let wv = self.nodes[w.0].tensor.values.clone();
                    let gvr = self.grad_mut(v).unwrap();
                    for i in 0..n {
                        for jj in 0..j {
                            let wij = wv[i * j + jj];
                            let grow = &gout[i * c..(i + 1) * c];
                            let vrow = &mut gvr[(i * j + jj) * c..(i * j + jj + 1) * c];
                            for ch in 0..c {
                                vrow[ch] += wij * grow[ch];
                            }
                        }
                    }
                }
            }
            Op::L2NormalizeRows(a) => {
                let (n, c) = (self.shape(a)[0], self.shape(a)[1]);
                let x = self.nodes[a.0].tensor.values.clone();
                let y = self.nodes[out_idx].tensor.values.clone();
                if let Some(ga) = self.grad_mut(a) {
                    for i in 0..n {
                        let xrow = &x[i * c..(i + 1) * c];
                        let yrow = &y[i * c..(i + 1) * c];
                        let grow = &gout[i * c..(i + 1) * c];
                        let nrm = (dot(xrow, xrow) + NORMALIZE_EPS_SQ).sqrt();
                        let gy = dot(grow, yrow);
                        for ch in 0..c {
                            ga[i * c + ch] += (grow[ch] - gy * yrow[ch]) / nrm;
                        }
                    }
                }
            }
            Op::AvgPool2x2 { input, h, w } => {
                let c = self.shape(input)[1];
                let ow = w / 2;
                if let Some(g) = self.grad_mut(input) {
                    for y in 0..h / 2 {
                        for x in 0..ow {
                            for ch in 0..c {
                                let d = 0.25 * gout[(y * ow + x) * c + ch];
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        g[((2 * y + dy) * w + 2 * x + dx) * c + ch] += d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_mut(a) {
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
            }
            Op::Huber { r, delta } => {
                let vals = self.nodes[r.0].tensor.values.clone();
                if let Some(gr) = self.grad_mut(r) {
                    for i in 0..vals.len() {
                        gr[i] += gout[0] * vals[i].clamp(-delta, delta);
                    }
                }
            }
            Op::SecondDiffL1(traj) => {
                let (t, d) = (self.shape(traj)[0], self.shape(traj)[1]);
                let p = self.nodes[traj.0].tensor.values.clone();
                if let Some(g) = self.grad_mut(traj) {
                    for i in 1..t - 1 {
                        for dim in 0..d {
                            let q = p[(i + 1) * d + dim] - 2.0 * p[i * d + dim] + p[(i - 1) * d + dim];
                            let s = if q > 0.0 {
                                1.0
                            } else if q < 0.0 {
                                -1.0
                            } else {
                                0.0
                            } * gout[0];
                            g[(i + 1) * d + dim] += s;
                            g[i * d + dim] -= 2.0 * s;
                            g[(i - 1) * d + dim] += s;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, ref targets } => {
                let (classes, n) = (self.shape(logits)[0], self.shape(logits)[1]);
                let lv = self.nodes[logits.0].tensor.values.clone();
                if let Some(gl) = self.grad_mut(logits) {
                    for j in 0..n {
                        let mut mx = f64::NEG_INFINITY;
                        for c in 0..classes {
                            mx = mx.max(lv[c * n + j]);
                        }
                        let mut sum = 0.0;
                        for c in 0..classes {
                            sum += (lv[c * n + j] - mx).exp();
                        }
                        for c in 0..classes {
                            let p = (lv[c * n + j] - mx).exp() / sum;
                            let ind = if c == targets[j] { 1.0 } else { 0.0 };
                            gl[c * n + j] += gout[0] * (p - ind) / n as f64;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `out[m,n] += a[m,p] * b[p,n]`, i-k-j order so the innermost
/// loop streams contiguous rows.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            let brow = &b[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Iteration layout for per-row (axis 1) or per-column (axis 0) reductions
/// on a row-major `[rows, cols]` tensor: (lanes, lane_len, stride, base).
fn lane_layout(rows: usize, cols: usize, axis: usize) -> (usize, usize, usize, usize) {
    if axis == 1 {
        (rows, cols, 1, cols)
    } else {
        (cols, rows, cols, 1)
    }
}

struct Corners {
    i00: usize,
    i10: usize,
    i01: usize,
    i11: usize,
    w00: f64,
    w10: f64,
    w01: f64,
    w11: f64,
    fx: f64,
    fy: f64,
    x_clamped: bool,
    y_clamped: bool,
}

impl Corners {
    fn interp(&self, grid: &[f64], c: usize, ch: usize) -> f64 {
        self.w00 * grid[self.i00 * c + ch]
            + self.w10 * grid[self.i10 * c + ch]
            + self.w01 * grid[self.i01 * c + ch]
            + self.w11 * grid[self.i11 * c + ch]
    }
}

fn bilinear_corners(x: f64, y: f64, h: usize, w: usize) -> Corners {
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let x_clamped = !(x > 0.0 && x < max_x);
    let y_clamped = !(y > 0.0 && y < max_y);
    let xc = x.clamp(0.0, max_x);
    let yc = y.clamp(0.0, max_y);
    let x0 = if w > 1 { (xc.floor() as usize).min(w - 2) } else { 0 };
    let y0 = if h > 1 { (yc.floor() as usize).min(h - 2) } else { 0 };
    let x1 = if w > 1 { x0 + 1 } else { x0 };
    let y1 = if h > 1 { y0 + 1 } else { y0 };
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    Corners {
        i00: y0 * w + x0,
        i10: y0 * w + x1,
        i01: y1 * w + x0,
        i11: y1 * w + x1,
        w00: (1.0 - fx) * (1.0 - fy),
        w10: fx * (1.0 - fy),
        w01: (1.0 - fx) * fy,
        w11: fx * fy,
        fx,
        fy,
        x_clamped,
        y_clamped,
    }
}
