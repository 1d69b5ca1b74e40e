//! Primitive forward implementations and their hand-written adjoints.

use super::{Op, Tape, TensorId};

const RMS_EPS: f64 = 1e-8;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Additive mask value for causal attention. Finite so that forward passes on
/// finite inputs stay finite; exp(-1e30 - max) underflows to exactly 0.
pub const MASK_NEG: f64 = -1e30;

#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    /// rhs is a row vector [c] or [1,c], repeated over rows.
    Row,
    /// rhs is a column [r,1], repeated over columns.
    Col,
}

fn bcast_kind(op: &str, a: &[usize], b: &[usize]) -> Bcast {
    if a == b {
        return Bcast::Same;
    }
    if a.len() == 2 {
        let (r, c) = (a[0], a[1]);
        if b == [c] || b == [1, c] {
            return Bcast::Row;
        }
        if b == [r, 1] {
            return Bcast::Col;
        }
    }
    panic!("{op}: incompatible shapes {a:?} vs {b:?}");
}

// ── dgemm wrappers ───────────────────────────────────────────────────

/// c[m,n] = alpha * a[m,k] @ b[k,n] + beta * c
fn gemm_nn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c[m,n] = alpha * a[m,k] @ b[n,k]ᵀ + beta * c
fn gemm_nt(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c[m,n] = alpha * a[k,m]ᵀ @ b[k,n] + beta * c
fn gemm_tn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

// ── op constructors ──────────────────────────────────────────────────

impl Tape {
    fn node_dims2(&self, op: &str, id: TensorId) -> (usize, usize) {
        let shape = &self.nodes[id.0].shape;
        match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => panic!("{op}: tensor of shape {shape:?} is not 2-D"),
        }
    }

    /// C = A B.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, ka) = self.node_dims2("matmul", a);
        let (kb, n) = self.node_dims2("matmul", b);
        assert_eq!(
            ka, kb,
            "matmul: inner dimensions disagree, lhs {:?} vs rhs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let mut out = vec![0.0; m * n];
        gemm_nn(m, ka, n, 1.0, &self.nodes[a.0].data, &self.nodes[b.0].data, 0.0, &mut out);
        self.push(Op::Matmul { transpose_rhs: false }, vec![a, b], vec![m, n], out)
    }

    /// C = A Bᵀ.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, ka) = self.node_dims2("matmul_nt", a);
        let (n, kb) = self.node_dims2("matmul_nt", b);
        assert_eq!(
            ka, kb,
            "matmul_nt: inner dimensions disagree, lhs {:?} vs rhs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let mut out = vec![0.0; m * n];
        gemm_nt(m, ka, n, 1.0, &self.nodes[a.0].data, &self.nodes[b.0].data, 0.0, &mut out);
        self.push(Op::Matmul { transpose_rhs: true }, vec![a, b], vec![m, n], out)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let kind = bcast_kind("add", &self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out = apply_bcast(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            self.nodes[a.0].shape.last().copied().unwrap_or(1),
            kind,
            |x, y| x + y,
        );
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Add, vec![a, b], shape, out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let kind = bcast_kind("mul", &self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out = apply_bcast(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            self.nodes[a.0].shape.last().copied().unwrap_or(1),
            kind,
            |x, y| x * y,
        );
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Mul, vec![a, b], shape, out)
    }

    pub fn affine(&mut self, x: TensorId, scale: f64, shift: f64) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * scale + shift).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Affine { scale, shift }, vec![x], shape, out)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Tanh, vec![x], shape, out)
    }

    /// GELU in its tanh form.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Gelu, vec![x], shape, out)
    }

    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let cols = *shape.last().expect("softmax: rank-0 tensor");
        let mut out = self.nodes[x.0].data.clone();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Op::Softmax, vec![x], shape, out)
    }

    pub fn rms_norm(&mut self, x: TensorId) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let cols = *shape.last().expect("rms_norm: rank-0 tensor");
        let mut out = self.nodes[x.0].data.clone();
        for row in out.chunks_mut(cols) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64 + RMS_EPS;
            let r = 1.0 / ms.sqrt();
            for v in row.iter_mut() {
                *v *= r;
            }
        }
        self.push(Op::RmsNorm, vec![x], shape, out)
    }

    pub fn l2_normalize(&mut self, x: TensorId) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let cols = *shape.last().expect("l2_normalize: rank-0 tensor");
        let mut out = self.nodes[x.0].data.clone();
        for (i, row) in out.chunks_mut(cols).enumerate() {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                nrm > 1e-30,
                "l2_normalize: zero-norm row {i}, normalization undefined"
            );
            for v in row.iter_mut() {
                *v /= nrm;
            }
        }
        self.push(Op::L2Normalize, vec![x], shape, out)
    }

    /// Select rows of a 2-D tensor by index list. Indices may repeat.
    pub fn gather(&mut self, x: TensorId, indices: &[usize]) -> TensorId {
        let (rows, cols) = self.node_dims2("gather", x);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < rows, "gather: index {i} out of bounds for {rows} rows");
            out.extend_from_slice(&self.nodes[x.0].data[i * cols..(i + 1) * cols]);
        }
        self.push(Op::Gather { indices: indices.to_vec() }, vec![x], vec![indices.len(), cols], out)
    }

    /// Stack 2-D tensors vertically.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows: empty input list");
        let (_, cols) = self.node_dims2("concat_rows", parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.node_dims2("concat_rows", p);
            assert_eq!(
                c, cols,
                "concat_rows: column mismatch, {:?} vs {cols} columns",
                self.nodes[p.0].shape
            );
            rows += r;
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(Op::Concat { axis: 0 }, parts.to_vec(), vec![rows, cols], out)
    }

    /// Stack 2-D tensors side by side.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols: empty input list");
        let (rows, _) = self.node_dims2("concat_cols", parts[0]);
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.node_dims2("concat_cols", p);
                assert_eq!(
                    r, rows,
                    "concat_cols: row mismatch, {:?} vs {rows} rows",
                    self.nodes[p.0].shape
                );
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&self.nodes[p.0].data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push(Op::Concat { axis: 1 }, parts.to_vec(), vec![rows, total], out)
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s = self.nodes[x.0].data.iter().sum();
        self.push(Op::Sum, vec![x], vec![1], vec![s])
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len();
        assert!(n > 0, "mean: empty tensor");
        let s = self.nodes[x.0].data.iter().sum::<f64>() / n as f64;
        self.push(Op::Mean, vec![x], vec![1], vec![s])
    }

    /// Row sums: [r,c] -> [r,1].
    pub fn sum_last(&mut self, x: TensorId) -> TensorId {
        let (rows, cols) = self.node_dims2("sum_last", x);
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .chunks(cols)
            .map(|row| row.iter().sum())
            .collect();
        self.push(Op::SumLast, vec![x], vec![rows, 1], out)
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.abs()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Abs, vec![x], shape, out)
    }

    pub fn square(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Square, vec![x], shape, out)
    }

    /// Identity forward; gradients stop here.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0].data.clone();
        self.push(Op::Detach, vec![x], shape, data)
    }

    /// Straight-through pair: forward takes the value of `value_of`, backward
    /// routes the whole gradient to `gradient_of`. Shapes must agree.
    pub fn ste(&mut self, value_of: TensorId, gradient_of: TensorId) -> TensorId {
        assert_eq!(
            self.nodes[value_of.0].shape, self.nodes[gradient_of.0].shape,
            "ste: value shape {:?} vs gradient shape {:?}",
            self.nodes[value_of.0].shape, self.nodes[gradient_of.0].shape
        );
        let shape = self.nodes[value_of.0].shape.clone();
        let data = self.nodes[value_of.0].data.clone();
        self.push(Op::Ste, vec![value_of, gradient_of], shape, data)
    }

    // ── composed conveniences (no new primitives) ────────────────────

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.affine(x, c, 0.0)
    }

    /// Mean elementwise |a - b|.
    pub fn l1_mean(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    /// Mean elementwise (a - b)^2.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let d = self.sub(a, b);
        let d = self.square(d);
        self.mean(d)
    }
}

fn apply_bcast(a: &[f64], b: &[f64], cols: usize, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match kind {
        Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Row => a
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b[i % cols]))
            .collect(),
        Bcast::Col => a
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b[i / cols]))
            .collect(),
    }
}

// ── adjoints ─────────────────────────────────────────────────────────

fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], id: TensorId, len: usize) -> &'a mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

/// Push the adjoint of node `idx` (upstream gradient `g`) into its inputs.
pub(super) fn accumulate_adjoints(tape: &Tape, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &tape.nodes[idx];
    let needs = |id: TensorId| tape.nodes[id.0].requires_grad;
    match &node.op {
        Op::Leaf | Op::Detach => {}
        Op::Matmul { transpose_rhs } => {
            let (a, b) = (node.inputs[0], node.inputs[1]);
            let (m, n) = (node.shape[0], node.shape[1]);
            let dims2 = |id: TensorId| -> (usize, usize) {
                let s = &tape.nodes[id.0].shape;
                if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) }
            };
            let k = if *transpose_rhs { dims2(a).1 } else { dims2(b).0 };
            let adata = &tape.nodes[a.0].data;
            let bdata = &tape.nodes[b.0].data;
            if !transpose_rhs {
                // C = A B: dA += G Bᵀ, dB += Aᵀ G
                if needs(a) {
                    gemm_nt(m, n, k, 1.0, g, bdata, 1.0, buf(grads, a, m * k));
                }
                if needs(b) {
                    gemm_tn(k, m, n, 1.0, adata, g, 1.0, buf(grads, b, k * n));
                }
            } else {
                // C = A Bᵀ: dA += G B, dB += Gᵀ A
                if needs(a) {
                    gemm_nn(m, n, k, 1.0, g, bdata, 1.0, buf(grads, a, m * k));
                }
                if needs(b) {
                    gemm_tn(n, m, k, 1.0, g, adata, 1.0, buf(grads, b, n * k));
                }
            }
        }
        Op::Add => {
            let (a, b) = (node.inputs[0], node.inputs[1]);
            let ashape = &tape.nodes[a.0].shape;
            let bshape = &tape.nodes[b.0].shape;
            let kind = bcast_kind("add", ashape, bshape);
            let cols = *ashape.last().unwrap_or(&1);
            if needs(a) {
                let ga = buf(grads, a, node.data.len());
                for (dst, &src) in ga.iter_mut().zip(g) {
                    *dst += src;
                }
            }
            if needs(b) {
                let blen = tape.nodes[b.0].data.len();
                let gb = buf(grads, b, blen);
                match kind {
                    Bcast::Same => {
                        for (dst, &src) in gb.iter_mut().zip(g) {
                            *dst += src;
                        }
                    }
                    Bcast::Row => {
                        for (i, &src) in g.iter().enumerate() {
                            gb[i % cols] += src;
                        }
                    }
                    Bcast::Col => {
                        for (i, &src) in g.iter().enumerate() {
                            gb[i / cols] += src;
                        }
                    }
                }
            }
        }
        Op::Mul => {
            let (a, b) = (node.inputs[0], node.inputs[1]);
            let adata = &tape.nodes[a.0].data;
            let bdata = &tape.nodes[b.0].data;
            let kind = bcast_kind("mul", &tape.nodes[a.0].shape, &tape.nodes[b.0].shape);
            let cols = *tape.nodes[a.0].shape.last().unwrap_or(&1);
            if needs(a) {
                let ga = buf(grads, a, adata.len());
                match kind {
                    Bcast::Same => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bdata[i];
                        }
                    }
                    Bcast::Row => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bdata[i % cols];
                        }
                    }
                    Bcast::Col => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bdata[i / cols];
                        }
                    }
                }
            }
            if needs(b) {
                let gb = buf(grads, b, bdata.len());
                match kind {
                    Bcast::Same => {
                        for i in 0..g.len() {
                            gb[i] += g[i] * adata[i];
                        }
                    }
                    Bcast::Row => {
                        for i in 0..g.len() {
                            gb[i % cols] += g[i] * adata[i];
                        }
                    }
                    Bcast::Col => {
                        for i in 0..g.len() {
                            gb[i / cols] += g[i] * adata[i];
                        }
                    }
                }
            }
        }
        Op::Affine { scale, .. } => {
            let x = node.inputs[0];
            if needs(x) {
                let gx = buf(grads, x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * scale;
                }
            }
        }
        Op::Tanh => {
            let x = node.inputs[0];
            if needs(x) {
                let y = &node.data;
                let gx = buf(grads, x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        Op::Gelu => {
            let x = node.inputs[0];
            if needs(x) {
                let xv = &tape.nodes[x.0].data;
                let gx = buf(grads, x, g.len());
                for i in 0..g.len() {
                    let v = xv[i];
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    gx[i] += g[i] * d;
                }
            }
        }
        Op::Softmax => {
            let x = node.inputs[0];
            if needs(x) {
                let cols = *node.shape.last().unwrap();
                let y = &node.data;
                let gx = buf(grads, x, g.len());
                for r in 0..y.len() / cols {
                    let base = r * cols;
                    let dot: f64 = (0..cols).map(|j| g[base + j] * y[base + j]).sum();
                    for j in 0..cols {
                        gx[base + j] += y[base + j] * (g[base + j] - dot);
                    }
                }
            }
        }
        Op::RmsNorm => {
            let x = node.inputs[0];
            if needs(x) {
                let cols = *node.shape.last().unwrap();
                let xv = &tape.nodes[x.0].data;
                let gx = buf(grads, x, g.len());
                for r in 0..xv.len() / cols {
                    let base = r * cols;
                    let row = &xv[base..base + cols];
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64 + RMS_EPS;
                    let inv = 1.0 / ms.sqrt();
                    let dot: f64 = (0..cols).map(|j| g[base + j] * row[j]).sum();
                    let coef = dot * inv * inv * inv / cols as f64;
                    for j in 0..cols {
                        gx[base + j] += g[base + j] * inv - row[j] * coef;
                    }
                }
            }
        }
        Op::L2Normalize => {
            let x = node.inputs[0];
            if needs(x) {
                let cols = *node.shape.last().unwrap();
                let xv = &tape.nodes[x.0].data;
                let y = &node.data;
                let gx = buf(grads, x, g.len());
                for r in 0..xv.len() / cols {
                    let base = r * cols;
                    let nrm = xv[base..base + cols].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = (0..cols).map(|j| g[base + j] * y[base + j]).sum();
                    for j in 0..cols {
                        gx[base + j] += (g[base + j] - y[base + j] * dot) / nrm;
                    }
                }
            }
        }
        Op::Gather { indices } => {
            let x = node.inputs[0];
            if needs(x) {
                let cols = node.shape[1];
                let xlen = tape.nodes[x.0].data.len();
                let gx = buf(grads, x, xlen);
                for (row, &src) in indices.iter().enumerate() {
                    for j in 0..cols {
                        gx[src * cols + j] += g[row * cols + j];
                    }
                }
            }
        }
        Op::Concat { axis } => {
            if *axis == 0 {
                let mut offset = 0;
                for &p in &node.inputs {
                    let len = tape.nodes[p.0].data.len();
                    if needs(p) {
                        let gp = buf(grads, p, len);
                        for i in 0..len {
                            gp[i] += g[offset + i];
                        }
                    }
                    offset += len;
                }
            } else {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in &node.inputs {
                    let w = tape.nodes[p.0].shape[tape.nodes[p.0].shape.len() - 1];
                    if needs(p) {
                        let gp = buf(grads, p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
        }
        Op::Sum => {
            let x = node.inputs[0];
            if needs(x) {
                let len = tape.nodes[x.0].data.len();
                let gx = buf(grads, x, len);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
        }
        Op::Mean => {
            let x = node.inputs[0];
            if needs(x) {
                let len = tape.nodes[x.0].data.len();
                let gx = buf(grads, x, len);
                let gv = g[0] / len as f64;
                for v in gx.iter_mut() {
                    *v += gv;
                }
            }
        }
        Op::SumLast => {
            let x = node.inputs[0];
            if needs(x) {
                let cols = tape.nodes[x.0].shape[tape.nodes[x.0].shape.len() - 1];
                let len = tape.nodes[x.0].data.len();
                let gx = buf(grads, x, len);
                for i in 0..len {
                    gx[i] += g[i / cols];
                }
            }
        }
        Op::Abs => {
            let x = node.inputs[0];
            if needs(x) {
                let xv = &tape.nodes[x.0].data;
                let gx = buf(grads, x, g.len());
                for i in 0..g.len() {
                    // sign(0) = 0: |x| is non-differentiable at 0, pick the subgradient 0.
                    let s = if xv[i] == 0.0 { 0.0 } else { xv[i].signum() };
                    gx[i] += g[i] * s;
                }
            }
        }
        Op::Square => {
            let x = node.inputs[0];
            if needs(x) {
                let xv = &tape.nodes[x.0].data;
                let gx = buf(grads, x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * 2.0 * xv[i];
                }
            }
        }
        Op::Ste => {
            let b = node.inputs[1];
            if needs(b) {
                let gb = buf(grads, b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i];
                }
            }
        }
    }
}
