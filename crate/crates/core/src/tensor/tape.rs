//! Reverse-mode differentiation tape.
//!
//! Forward ops append nodes (saved output + op record) in topological
//! order; `backward` consumes the tape, walks it once in reverse and
//! accumulates gradients into a [`GradMap`]. Every op validates shapes
//! up front and returns a typed error on mismatch.

use crate::error::{Error, Result};
use crate::tensor::{matmul_accum, matmul_raw, Tensor};

/// Handle to a node on one tape. Never mix handles across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Add { a: TensorId, b: TensorId },
    AddRow { a: TensorId, bias: TensorId },
    Scale { a: TensorId, c: f64 },
    MulElem { a: TensorId, b: TensorId },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    Sigmoid { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    Transpose { a: TensorId },
    SliceCols { a: TensorId, start: usize, len: usize },
    SliceRows { a: TensorId, start: usize, len: usize },
    ConcatCols { parts: Vec<TensorId> },
    SelectRow { a: TensorId, row: usize },
    EmbedRows { table: TensorId, ids: Vec<usize> },
    Upshuffle2x { a: TensorId, h: usize, w: usize, cout: usize },
    Bilinear2x { a: TensorId, h: usize, w: usize, ch: usize },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    Bce { probs: TensorId, target: Vec<f64>, clamp_eps: f64 },
    Dice { probs: TensorId, target: Vec<f64>, smooth: f64 },
    SmoothL1 { pred: TensorId, target: Vec<f64>, beta: f64 },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
}

/// Gradients keyed by tape handle, produced by [`Tape::backward`].
pub struct GradMap {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradMap {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn take(&mut self, id: TensorId) -> Option<Vec<f64>> {
        self.grads[id.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node shape consistent")
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        // Forward ops on finite inputs must stay finite.
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value out of {:?}",
            op_name(&op)
        );
        self.nodes.push(Node { shape, data, op });
        TensorId(self.nodes.len() - 1)
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::BadShape {
                op: "leaf",
                expected: format!("{} elements", shape.iter().product::<usize>()),
                got: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.push(vec![m, n], data, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::BadShape { op: "transpose", expected: "2D".into(), got: sa });
        }
        let (r, c) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], data, Op::Transpose { a }))
    }

    // ── Elementwise / broadcast ─────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "add", lhs: sa, rhs: sb });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(sa, data, Op::Add { a, b }))
    }

    /// `[n, d] + [d]` row-broadcast bias.
    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "add_row", lhs: sa, rhs: sb });
        }
        let d = sa[1];
        let bdat = self.nodes[bias.0].data.clone();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bdat[i % d])
            .collect();
        Ok(self.push(sa, data, Op::AddRow { a, bias }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let sa = self.shape(a).to_vec();
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.push(sa, data, Op::Scale { a, c })
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "mul_elem", lhs: sa, rhs: sb });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(sa, data, Op::MulElem { a, b }))
    }

    // ── Activations ─────────────────────────────────────────────────

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        self.push(sa, data, Op::Relu { a })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu_fwd(x)).collect();
        self.push(sa, data, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let sa = self.shape(a).to_vec();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(sa, data, Op::Sigmoid { a })
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::BadShape {
                op: "softmax",
                expected: format!("axis < {}", sa.len()),
                got: vec![axis],
            });
        }
        let (outer, mid, inner) = axis_split(&sa, axis);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut mx = f64::NEG_INFINITY;
                for m in 0..mid {
                    mx = mx.max(src[(o * mid + m) * inner + i]);
                }
                let mut denom = 0.0;
                for m in 0..mid {
                    let idx = (o * mid + m) * inner + i;
                    let e = (src[idx] - mx).exp();
                    data[idx] = e;
                    denom += e;
                }
                for m in 0..mid {
                    data[(o * mid + m) * inner + i] /= denom;
                }
            }
        }
        Ok(self.push(sa, data, Op::Softmax { a, axis }))
    }

    /// Per-row layer norm over the last axis, then affine `gain`/`bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or(Error::BadShape {
            op: "layer_norm",
            expected: "rank >= 1".into(),
            got: sx.clone(),
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.nodes[x.0].data.clone();
        let g = self.nodes[gain.0].data.clone();
        let b = self.nodes[bias.0].data.clone();
        let rows = src.len() / d;
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(sx, data, Op::LayerNorm { x, gain, bias, eps }))
    }

    // ── Shape surgery ───────────────────────────────────────────────

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[1] {
            return Err(Error::BadShape {
                op: "slice_cols",
                expected: format!("2D with cols >= {}", start + len),
                got: sa,
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(vec![r, len], data, Op::SliceCols { a, start, len }))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[0] {
            return Err(Error::BadShape {
                op: "slice_rows",
                expected: format!("2D with rows >= {}", start + len),
                got: sa,
            });
        }
        let c = sa[1];
        let data = self.nodes[a.0].data[start * c..(start + len) * c].to_vec();
        Ok(self.push(vec![len, c], data, Op::SliceRows { a, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_cols: empty part list".into()));
        }
        let r = self.shape(parts[0])[0];
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[0] != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sp.to_vec(),
                });
            }
            total += sp[1];
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p)[1];
                let src = &self.nodes[p.0].data;
                data.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(vec![r, total], data, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn select_row(&mut self, a: TensorId, row: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || row >= sa[0] {
            return Err(Error::BadShape {
                op: "select_row",
                expected: format!("2D with rows > {}", row),
                got: sa,
            });
        }
        let c = sa[1];
        let data = self.nodes[a.0].data[row * c..(row + 1) * c].to_vec();
        Ok(self.push(vec![1, c], data, Op::SelectRow { a, row }))
    }

    /// Row gather: `out[i] = table[ids[i]]`.
    pub fn embed_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::BadShape { op: "embed_rows", expected: "2D".into(), got: st });
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidInput(format!(
                "embed_rows: id {} out of vocabulary size {}",
                bad, v
            )));
        }
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], data, Op::EmbedRows { table, ids: ids.to_vec() }))
    }

    /// Scatter `[h*w, 4*cout]` into a doubled `[2h*2w, cout]` grid.
    ///
    /// Column block `q = di*2 + dj` of input pixel `(i, j)` lands at output
    /// pixel `(2i+di, 2j+dj)`; together with a matmul this is a stride-2
    /// 2x2 transposed convolution.
    pub fn upshuffle2x(&mut self, a: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != h * w || sa[1] % 4 != 0 {
            return Err(Error::BadShape {
                op: "upshuffle2x",
                expected: format!("[{}x{}, 4*cout]", h, w),
                got: sa,
            });
        }
        let cout = sa[1] / 4;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; 4 * h * w * cout];
        for i in 0..h {
            for j in 0..w {
                for di in 0..2 {
                    for dj in 0..2 {
                        let q = di * 2 + dj;
                        let orow = (2 * i + di) * (2 * w) + (2 * j + dj);
                        let irow = i * w + j;
                        let dst = &mut data[orow * cout..(orow + 1) * cout];
                        let s = &src[irow * 4 * cout + q * cout..irow * 4 * cout + (q + 1) * cout];
                        dst.copy_from_slice(s);
                    }
                }
            }
        }
        Ok(self.push(vec![4 * h * w, cout], data, Op::Upshuffle2x { a, h, w, cout }))
    }

    /// Bilinear 2x upsample of an `[h*w, ch]` grid (align-corners false).
    pub fn bilinear2x(&mut self, a: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != h * w {
            return Err(Error::BadShape {
                op: "bilinear2x",
                expected: format!("[{}x{}, ch]", h, w),
                got: sa,
            });
        }
        let ch = sa[1];
        let src = &self.nodes[a.0].data;
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0; oh * ow * ch];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_taps(ox, w);
                let dst = &mut data[(oy * ow + ox) * ch..(oy * ow + ox + 1) * ch];
                for c in 0..ch {
                    let v00 = src[(y0 * w + x0) * ch + c];
                    let v01 = src[(y0 * w + x1) * ch + c];
                    let v10 = src[(y1 * w + x0) * ch + c];
                    let v11 = src[(y1 * w + x1) * ch + c];
                    dst[c] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
        Ok(self.push(vec![oh * ow, ch], data, Op::Bilinear2x { a, h, w, ch }))
    }

    // ── Reductions and losses ───────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s / n], Op::MeanAll { a })
    }

    /// Mean binary cross-entropy of probabilities against a fixed binary
    /// grid, probabilities clamped to `[clamp_eps, 1-clamp_eps]`.
    pub fn bce(&mut self, probs: TensorId, target: &[f64], clamp_eps: f64) -> Result<TensorId> {
        let a = &self.nodes[probs.0].data;
        if a.len() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                lhs: self.shape(probs).to_vec(),
                rhs: vec![target.len()],
            });
        }
        if let Some(&g) = target.iter().find(|&&g| g != 0.0 && g != 1.0) {
            return Err(Error::InvalidInput(format!(
                "bce: ground truth must be binary, found {}",
                g
            )));
        }
        let n = a.len() as f64;
        let mut acc = 0.0;
        for (&av, &g) in a.iter().zip(target) {
            let ac = av.clamp(clamp_eps, 1.0 - clamp_eps);
            acc -= g * ac.ln() + (1.0 - g) * (1.0 - ac).ln();
        }
        Ok(self.push(
            vec![1],
            vec![acc / n],
            Op::Bce { probs, target: target.to_vec(), clamp_eps },
        ))
    }

    /// Squared-denominator soft Dice loss with additive smoothing.
    pub fn dice(&mut self, probs: TensorId, target: &[f64], smooth: f64) -> Result<TensorId> {
        let a = &self.nodes[probs.0].data;
        if a.len() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "dice",
                lhs: self.shape(probs).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let mut inter = 0.0;
        let mut g2 = 0.0;
        let mut a2 = 0.0;
        for (&av, &g) in a.iter().zip(target) {
            inter += g * av;
            g2 += g * g;
            a2 += av * av;
        }
        let loss = 1.0 - (2.0 * inter + smooth) / (g2 + a2 + smooth);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Dice { probs, target: target.to_vec(), smooth },
        ))
    }

    /// Mean smooth-L1 (Huber) distance to a fixed target vector.
    pub fn smooth_l1(&mut self, pred: TensorId, target: &[f64], beta: f64) -> Result<TensorId> {
        let p = &self.nodes[pred.0].data;
        if p.len() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "smooth_l1",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = p.len() as f64;
        let mut acc = 0.0;
        for (&pv, &t) in p.iter().zip(target) {
            let e = pv - t;
            acc += if e.abs() < beta {
                0.5 * e * e / beta
            } else {
                e.abs() - 0.5 * beta
            };
        }
        Ok(self.push(
            vec![1],
            vec![acc / n],
            Op::SmoothL1 { pred, target: target.to_vec(), beta },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape; each node is
    /// visited exactly once.
    pub fn backward(self, loss: TensorId) -> Result<GradMap> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidInput("backward: empty tape".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                expected: "scalar loss".into(),
                got: self.nodes[loss.0].shape.clone(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b, m, k, n: nn } => {
                    // dA += G @ B^T, dB += A^T @ G
                    let bt = transpose_raw(&self.nodes[b.0].data, *k, *nn);
                    let mut da = take_or_zeros(&mut grads, a.0, *m * *k);
                    matmul_accum(&g, &bt, *m, *nn, *k, &mut da);
                    grads[a.0] = Some(da);
                    let at = transpose_raw(&self.nodes[a.0].data, *m, *k);
                    let mut db = take_or_zeros(&mut grads, b.0, *k * *nn);
                    matmul_accum(&at, &g, *k, *m, *nn, &mut db);
                    grads[b.0] = Some(db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, a.0, &g);
                    accumulate(&mut grads, b.0, &g);
                }
                Op::AddRow { a, bias } => {
                    accumulate(&mut grads, a.0, &g);
                    let d = self.nodes[bias.0].data.len();
                    let mut db = take_or_zeros(&mut grads, bias.0, d);
                    for (i, gv) in g.iter().enumerate() {
                        db[i % d] += gv;
                    }
                    grads[bias.0] = Some(db);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, a.0, &da);
                }
                Op::MulElem { a, b } => {
                    let da: Vec<f64> =
                        g.iter().zip(&self.nodes[b.0].data).map(|(gv, bv)| gv * bv).collect();
                    accumulate(&mut grads, a.0, &da);
                    let db: Vec<f64> =
                        g.iter().zip(&self.nodes[a.0].data).map(|(gv, av)| gv * av).collect();
                    accumulate(&mut grads, b.0, &db);
                }
                Op::Relu { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Gelu { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gv, &x)| gv * gelu_grad(x))
                        .collect();
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Sigmoid { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&node.data)
                        .map(|(gv, &s)| gv * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Softmax { a, axis } => {
                    let (outer, mid, inner) = axis_split(&node.shape, *axis);
                    let s = &node.data;
                    let mut da = vec![0.0; s.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = 0.0;
                            for m in 0..mid {
                                let idx = (o * mid + m) * inner + i;
                                dot += g[idx] * s[idx];
                            }
                            for m in 0..mid {
                                let idx = (o * mid + m) * inner + i;
                                da[idx] = s[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, a.0, &da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let src = &self.nodes[x.0].data;
                    let gw = &self.nodes[gain.0].data;
                    let d = gw.len();
                    let rows = src.len() / d;
                    let mut dx = vec![0.0; src.len()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..rows {
                        let row = &src[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                            dxhat[j] = grow[j] * gw[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, x.0, &dx);
                    accumulate(&mut grads, gain.0, &dgain);
                    accumulate(&mut grads, bias.0, &dbias);
                }
                Op::Transpose { a } => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let da = transpose_raw(&g, r, c);
                    accumulate(&mut grads, a.0, &da);
                }
                Op::SliceCols { a, start, len } => {
                    let sa = &self.nodes[a.0].shape;
                    let (r, c) = (sa[0], sa[1]);
                    let mut da = take_or_zeros(&mut grads, a.0, r * c);
                    for i in 0..r {
                        for j in 0..*len {
                            da[i * c + start + j] += g[i * len + j];
                        }
                    }
                    grads[a.0] = Some(da);
                }
                Op::SliceRows { a, start, len } => {
                    let sa = &self.nodes[a.0].shape;
                    let c = sa[1];
                    let mut da = take_or_zeros(&mut grads, a.0, sa[0] * c);
                    for (off, gv) in g.iter().enumerate() {
                        da[start * c + off] += gv;
                    }
                    let _ = len;
                    grads[a.0] = Some(da);
                }
                Op::ConcatCols { parts } => {
                    let total = node.shape[1];
                    let r = node.shape[0];
                    let mut off = 0;
                    for &p in parts {
                        let c = self.nodes[p.0].shape[1];
                        let mut dp = take_or_zeros(&mut grads, p.0, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                dp[i * c + j] += g[i * total + off + j];
                            }
                        }
                        grads[p.0] = Some(dp);
                        off += c;
                    }
                }
                Op::SelectRow { a, row } => {
                    let sa = &self.nodes[a.0].shape;
                    let c = sa[1];
                    let mut da = take_or_zeros(&mut grads, a.0, sa[0] * c);
                    for j in 0..c {
                        da[row * c + j] += g[j];
                    }
                    grads[a.0] = Some(da);
                }
                Op::EmbedRows { table, ids } => {
                    let st = &self.nodes[table.0].shape;
                    let d = st[1];
                    let mut dt = take_or_zeros(&mut grads, table.0, st[0] * d);
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[i * d + j];
                        }
                    }
                    grads[table.0] = Some(dt);
                }
                Op::Upshuffle2x { a, h, w, cout } => {
                    let mut da = take_or_zeros(&mut grads, a.0, h * w * 4 * cout);
                    for i in 0..*h {
                        for j in 0..*w {
                            for di in 0..2 {
                                for dj in 0..2 {
                                    let q = di * 2 + dj;
                                    let orow = (2 * i + di) * (2 * w) + (2 * j + dj);
                                    let irow = i * w + j;
                                    for c in 0..*cout {
                                        da[irow * 4 * cout + q * cout + c] +=
                                            g[orow * cout + c];
                                    }
                                }
                            }
                        }
                    }
                    grads[a.0] = Some(da);
                }
                Op::Bilinear2x { a, h, w, ch } => {
                    let mut da = take_or_zeros(&mut grads, a.0, h * w * ch);
                    let (oh, ow) = (2 * h, 2 * w);
                    for oy in 0..oh {
                        let (y0, y1, fy) = bilinear_taps(oy, *h);
                        for ox in 0..ow {
                            let (x0, x1, fx) = bilinear_taps(ox, *w);
                            for c in 0..*ch {
                                let gv = g[(oy * ow + ox) * ch + c];
                                da[(y0 * w + x0) * ch + c] += gv * (1.0 - fy) * (1.0 - fx);
                                da[(y0 * w + x1) * ch + c] += gv * (1.0 - fy) * fx;
                                da[(y1 * w + x0) * ch + c] += gv * fy * (1.0 - fx);
                                da[(y1 * w + x1) * ch + c] += gv * fy * fx;
                            }
                        }
                    }
                    grads[a.0] = Some(da);
                }
                Op::SumAll { a } => {
                    let len = self.nodes[a.0].data.len();
                    let da = vec![g[0]; len];
                    accumulate(&mut grads, a.0, &da);
                }
                Op::MeanAll { a } => {
                    let len = self.nodes[a.0].data.len();
                    let da = vec![g[0] / len as f64; len];
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Bce { probs, target, clamp_eps } => {
                    let a = &self.nodes[probs.0].data;
                    let n = a.len() as f64;
                    let da: Vec<f64> = a
                        .iter()
                        .zip(target)
                        .map(|(&av, &gt)| {
                            if av < *clamp_eps || av > 1.0 - *clamp_eps {
                                0.0 // clamp active: flat
                            } else {
                                -g[0] / n * (gt / av - (1.0 - gt) / (1.0 - av))
                            }
                        })
                        .collect();
                    accumulate(&mut grads, probs.0, &da);
                }
                Op::Dice { probs, target, smooth } => {
                    let a = &self.nodes[probs.0].data;
                    let mut inter = 0.0;
                    let mut g2 = 0.0;
                    let mut a2 = 0.0;
                    for (&av, &gt) in a.iter().zip(target) {
                        inter += gt * av;
                        g2 += gt * gt;
                        a2 += av * av;
                    }
                    let num = 2.0 * inter + smooth;
                    let den = g2 + a2 + smooth;
                    let da: Vec<f64> = a
                        .iter()
                        .zip(target)
                        .map(|(&av, &gt)| -g[0] * (2.0 * gt * den - num * 2.0 * av) / (den * den))
                        .collect();
                    accumulate(&mut grads, probs.0, &da);
                }
                Op::SmoothL1 { pred, target, beta } => {
                    let p = &self.nodes[pred.0].data;
                    let n = p.len() as f64;
                    let da: Vec<f64> = p
                        .iter()
                        .zip(target)
                        .map(|(&pv, &t)| g[0] / n * ((pv - t) / beta).clamp(-1.0, 1.0))
                        .collect();
                    accumulate(&mut grads, pred.0, &da);
                }
            }
        }
        Ok(GradMap { grads })
    }
}

// ── Shared numeric helpers ──────────────────────────────────────────

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
}

/// `(outer, axis_len, inner)` strides for iterating one axis of a shape.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Source taps and fraction for one output coordinate of a 2x bilinear
/// resize (align-corners false, edge clamped).
fn bilinear_taps(o: usize, in_len: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) / 2.0 - 0.5;
    if src <= 0.0 {
        return (0, 0, 0.0);
    }
    let y0 = src.floor() as usize;
    let f = src - y0 as f64;
    let y1 = (y0 + 1).min(in_len - 1);
    (y0.min(in_len - 1), y1, f)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, src: &[f64]) {
    match &mut grads[idx] {
        Some(dst) => {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        None => grads[idx] = Some(src.to_vec()),
    }
}

fn take_or_zeros(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> Vec<f64> {
    grads[idx].take().unwrap_or_else(|| vec![0.0; len])
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::AddRow { .. } => "add_row",
        Op::Scale { .. } => "scale",
        Op::MulElem { .. } => "mul_elem",
        Op::Relu { .. } => "relu",
        Op::Gelu { .. } => "gelu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Transpose { .. } => "transpose",
        Op::SliceCols { .. } => "slice_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SelectRow { .. } => "select_row",
        Op::EmbedRows { .. } => "embed_rows",
        Op::Upshuffle2x { .. } => "upshuffle2x",
        Op::Bilinear2x { .. } => "bilinear2x",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
        Op::Bce { .. } => "bce",
        Op::Dice { .. } => "dice",
        Op::SmoothL1 { .. } => "smooth_l1",
    }
}

// There is one subtle but load-bearing property above: a `visited`-style
// `take()` at loop entry means a node whose gradient never materialized
// (no path from the loss) is skipped entirely, so constant inputs cost
// nothing in the sweep.

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::fd::{numerical_grad, rel_err};

    fn check_grads(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
        let worst = analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0f64, f64::max);
        assert!(worst < tol, "{}: worst rel err {}", what, worst);
    }

    #[test]
    fn matmul_identity_case() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = t.leaf(&Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::zeros(vec![2, 3]));
        let b = t.leaf(&Tensor::zeros(vec![2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {}", msg);
    }

    #[test]
    fn matmul_grad_matches_finite_differences_and_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let f = |p: &[Vec<f64>]| {
            let mut t = Tape::new();
            let a = t.leaf_from(vec![4, 3], p[0].clone()).unwrap();
            let b = t.leaf_from(vec![3, 5], p[1].clone()).unwrap();
            let c = t.matmul(a, b).unwrap();
            let s = t.sum_all(c);
            t.scalar_value(s)
        };
        let params = vec![a_data.clone(), b_data.clone()];
        let num = numerical_grad(&f, &params, 1e-5);

        let mut t = Tape::new();
        let a = t.leaf_from(vec![4, 3], a_data).unwrap();
        let b = t.leaf_from(vec![3, 5], b_data.clone()).unwrap();
        let c = t.matmul(a, b).unwrap();
        let s = t.sum_all(c);
        let grads = t.backward(s).unwrap();
        let ga = grads.get(a).unwrap();
        check_grads(ga, &num[0], 1e-6, "matmul dA vs FD");

        // closed form: d sum(AB) / dA = ones(4,5) @ B^T
        let ones = vec![1.0; 20];
        let bt = transpose_raw(&b_data, 3, 5);
        let expect = matmul_raw(&ones, &bt, 4, 5, 3);
        for (g, e) in ga.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_large_logits() {
        let mut t = Tape::new();
        let a = t.leaf_from(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = t.softmax(a, 0).unwrap();
        for v in t.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = t.leaf_from(vec![2], vec![1000.0, 1000.0]).unwrap();
        let s2 = t.softmax(b, 0).unwrap();
        assert_eq!(t.value(s2), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut t = Tape::new();
            let a = t.leaf_from(vec![4, 6], data).unwrap();
            let s = t.softmax(a, 1).unwrap();
            let out = t.value(s);
            for r in 0..4 {
                let sum: f64 = out[r * 6..(r + 1) * 6].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let weights: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // weighted sum so the grad is not all-zero like plain sum would be
        let w = weights.clone();
        let f = move |p: &[Vec<f64>]| {
            let mut t = Tape::new();
            let a = t.leaf_from(vec![6], p[0].clone()).unwrap();
            let s = t.softmax(a, 0).unwrap();
            let wt = t.leaf_from(vec![6], w.clone()).unwrap();
            let prod = t.mul_elem(s, wt).unwrap();
            let out = t.sum_all(prod);
            t.scalar_value(out)
        };
        let num = numerical_grad(&f, &[data.clone()], 1e-5);

        let mut t = Tape::new();
        let a = t.leaf_from(vec![6], data).unwrap();
        let s = t.softmax(a, 0).unwrap();
        let wt = t.leaf_from(vec![6], weights).unwrap();
        let prod = t.mul_elem(s, wt).unwrap();
        let out = t.sum_all(prod);
        let grads = t.backward(out).unwrap();
        check_grads(grads.get(a).unwrap(), &num[0], 1e-6, "softmax vs FD");
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf_from(vec![1, 4], vec![5.0; 4]).unwrap();
        let g = t.leaf_from(vec![4], vec![1.0; 4]).unwrap();
        let b = t.leaf_from(vec![4], vec![0.0; 4]).unwrap();
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        for v in t.value(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // row [1,3]: mean 2, population std 1; eps tiny
        let mut t = Tape::new();
        let x = t.leaf_from(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let g = t.leaf_from(vec![2], vec![1.0; 2]).unwrap();
        let b = t.leaf_from(vec![2], vec![0.0; 2]).unwrap();
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        let out = t.value(y);
        assert!((out[0] + 1.0).abs() < 1e-9);
        assert!((out[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gn: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..1.5)).collect();
        let bs: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let wv: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = wv.clone();
        let f = move |p: &[Vec<f64>]| {
            let mut t = Tape::new();
            let x = t.leaf_from(vec![2, 4], p[0].clone()).unwrap();
            let g = t.leaf_from(vec![4], p[1].clone()).unwrap();
            let b = t.leaf_from(vec![4], p[2].clone()).unwrap();
            let y = t.layer_norm(x, g, b, 1e-5).unwrap();
            let wt = t.leaf_from(vec![2, 4], w.clone()).unwrap();
            let prod = t.mul_elem(y, wt).unwrap();
            let s = t.sum_all(prod);
            t.scalar_value(s)
        };
        let params = vec![x.clone(), gn.clone(), bs.clone()];
        let num = numerical_grad(&f, &params, 1e-5);

        let mut t = Tape::new();
        let xi = t.leaf_from(vec![2, 4], x).unwrap();
        let gi = t.leaf_from(vec![4], gn).unwrap();
        let bi = t.leaf_from(vec![4], bs).unwrap();
        let y = t.layer_norm(xi, gi, bi, 1e-5).unwrap();
        let wt = t.leaf_from(vec![2, 4], wv).unwrap();
        let prod = t.mul_elem(y, wt).unwrap();
        let s = t.sum_all(prod);
        let grads = t.backward(s).unwrap();
        check_grads(grads.get(xi).unwrap(), &num[0], 1e-5, "LN dx vs FD");
        check_grads(grads.get(gi).unwrap(), &num[1], 1e-5, "LN dgain vs FD");
        check_grads(grads.get(bi).unwrap(), &num[2], 1e-5, "LN dbias vs FD");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf_from(vec![2, 3], vec![0.5; 6]).unwrap();
        let s = t.sum_all(x);
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf_from(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let sq = t.mul_elem(x, x).unwrap();
        let s = t.sum_all(sq);
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf_from(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn per_op_gradients_match_finite_differences_on_random_seeds() {
        // one composite graph through most unary/shape ops, 20 seeds
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let f = |p: &[Vec<f64>]| {
                let mut t = Tape::new();
                let x = t.leaf_from(vec![4, 4], p[0].clone()).unwrap();
                let r = t.gelu(x);
                let s = t.sigmoid(r);
                let left = t.slice_cols(s, 0, 2).unwrap();
                let right = t.slice_cols(s, 2, 2).unwrap();
                let cat = t.concat_cols(&[right, left]).unwrap();
                let tr = t.transpose(cat).unwrap();
                let row = t.select_row(tr, 1).unwrap();
                let sc = t.scale(row, 3.0);
                let sm = t.softmax(sc, 1).unwrap();
                let relu = t.relu(sm);
                let m = t.mean_all(relu);
                t.scalar_value(m)
            };
            let num = numerical_grad(&f, &[x.clone()], 1e-5);

            let mut t = Tape::new();
            let xi = t.leaf_from(vec![4, 4], x).unwrap();
            let r = t.gelu(xi);
            let s = t.sigmoid(r);
            let left = t.slice_cols(s, 0, 2).unwrap();
            let right = t.slice_cols(s, 2, 2).unwrap();
            let cat = t.concat_cols(&[right, left]).unwrap();
            let tr = t.transpose(cat).unwrap();
            let row = t.select_row(tr, 1).unwrap();
            let sc = t.scale(row, 3.0);
            let sm = t.softmax(sc, 1).unwrap();
            let relu = t.relu(sm);
            let m = t.mean_all(relu);
            let grads = t.backward(m).unwrap();
            check_grads(grads.get(xi).unwrap(), &num[0], 1e-4, "composite vs FD");
        }
    }

    #[test]
    fn embed_rows_scatters_gradient() {
        let mut t = Tape::new();
        let table = t.leaf_from(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let e = t.embed_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(e), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = t.sum_all(e);
        let grads = t.backward(s).unwrap();
        // row 2 hit twice, row 0 once, row 1 never
        assert_eq!(grads.get(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn upshuffle_is_a_bijection_with_exact_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..2 * 2 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let a = t.leaf_from(vec![4, 8], data.clone()).unwrap();
        let u = t.upshuffle2x(a, 2, 2).unwrap();
        assert_eq!(t.shape(u), &[16, 2]);
        // output is a permutation of the input values
        let mut iv: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
        let mut ov: Vec<u64> = t.value(u).iter().map(|v| v.to_bits()).collect();
        iv.sort_unstable();
        ov.sort_unstable();
        assert_eq!(iv, ov);
        let s = t.sum_all(u);
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &vec![1.0; 32][..]);
    }

    #[test]
    fn bilinear2x_preserves_constant_grids_and_grad_checks() {
        let mut t = Tape::new();
        let a = t.leaf_from(vec![9, 1], vec![2.5; 9]).unwrap();
        let u = t.bilinear2x(a, 3, 3).unwrap();
        assert_eq!(t.shape(u), &[36, 1]);
        for v in t.value(u) {
            assert!((v - 2.5).abs() < 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wc = w.clone();
        let f = move |p: &[Vec<f64>]| {
            let mut t = Tape::new();
            let a = t.leaf_from(vec![9, 1], p[0].clone()).unwrap();
            let u = t.bilinear2x(a, 3, 3).unwrap();
            let wt = t.leaf_from(vec![36, 1], wc.clone()).unwrap();
            let prod = t.mul_elem(u, wt).unwrap();
            let s = t.sum_all(prod);
            t.scalar_value(s)
        };
        let num = numerical_grad(&f, &[data.clone()], 1e-5);
        let mut t = Tape::new();
        let a = t.leaf_from(vec![9, 1], data).unwrap();
        let u = t.bilinear2x(a, 3, 3).unwrap();
        let wt = t.leaf_from(vec![36, 1], w).unwrap();
        let prod = t.mul_elem(u, wt).unwrap();
        let s = t.sum_all(prod);
        let grads = t.backward(s).unwrap();
        check_grads(grads.get(a).unwrap(), &num[0], 1e-6, "bilinear vs FD");
    }
}
