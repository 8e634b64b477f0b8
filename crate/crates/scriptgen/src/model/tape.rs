//! A small reverse-mode autodiff tape over `ndarray` matrices.
//!
//! Every forward operation is evaluated eagerly and records enough to
//! compute exact gradients in a single reverse sweep. Scalars are 1x1
//! matrices so the node store stays uniform. Parameter leaves borrow their
//! values from the parameter registry, so building a graph never copies
//! weights.

use ndarray::{s, Array2};

use super::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Learnable parameter; value lives in the registry.
    Param { idx: usize },
    /// Non-differentiable constant (positions, forced gates, ...).
    Const,
    EmbedRows { table: NodeId, ids: Vec<usize> },
    Add { a: NodeId, b: NodeId },
    /// a + c * b
    AddScaled { a: NodeId, b: NodeId, c: f64 },
    AddBiasRow { x: NodeId, bias: NodeId },
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Scale { x: NodeId, c: f64 },
    /// Row-wise softmax of (x + mask); the constant mask never needs
    /// gradients and the cached output is enough for the backward pass.
    SoftmaxRows { x: NodeId },
    Gelu { x: NodeId },
    Sigmoid { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    /// gate (1x1) blends a broadcast mask row (1xd) with x (Lxd):
    /// y = gate * mask_row + (1 - gate) * x
    GateBlend { gate: NodeId, mask_row: NodeId, x: NodeId },
    /// per-row gate (Lx1): y_l = gate_l * a_l + (1 - gate_l) * b_l
    GateMixRows { gate: NodeId, a: NodeId, b: NodeId },
    /// mean over every element -> 1x1
    MeanAll { x: NodeId },
    /// log sum exp over a 1xn row -> 1x1
    LogSumExpRow { x: NodeId },
    /// mean NLL of gold ids under row-wise log-softmax -> 1x1
    CrossEntropyMean { logits: NodeId, targets: Vec<usize> },
    /// inverted dropout; mask entries are 0 or 1/(1-p)
    Dropout { x: NodeId, mask: Array2<f64> },
}

const LN_EPS: f64 = 1e-5;

pub struct Tape<'p> {
    params: &'p Parameters,
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Parameters) -> Self {
        Tape { params, values: Vec::new(), ops: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        match &self.ops[id.0] {
            Op::Param { idx } => self.params.tensor(*idx),
            _ => &self.values[id.0],
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    pub fn param(&mut self, idx: usize) -> NodeId {
        self.push(Array2::zeros((0, 0)), Op::Param { idx })
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        self.push(out, Op::EmbedRows { table, ids: ids.to_vec() })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add { a, b })
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        let out = self.value(a) + &(self.value(b) * c);
        self.push(out, Op::AddScaled { a, b, c })
    }

    pub fn add_bias_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let out = self.value(x) + self.value(bias);
        self.push(out, Op::AddBiasRow { x, bias })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        let out = match (ta, tb) {
            (false, false) => av.dot(bv),
            (false, true) => av.dot(&bv.t()),
            (true, false) => av.t().dot(bv),
            (true, true) => av.t().dot(&bv.t()),
        };
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x) * c;
        self.push(out, Op::Scale { x, c })
    }

    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<&Array2<f64>>) -> NodeId {
        let xv = self.value(x);
        let mut out = match mask {
            Some(m) => xv + m,
            None => xv.clone(),
        };
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::SoftmaxRows { x })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(gelu);
        self.push(out, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(sigmoid);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = Array2::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let (mean, inv_std) = row_stats(row);
            for (j, &v) in row.iter().enumerate() {
                out[[i, j]] = g[[0, j]] * (v - mean) * inv_std + b[[0, j]];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols { x, start, len })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut out = Array2::zeros((rows, cols));
        let mut cursor = 0;
        for &p in parts {
            let v = self.value(p);
            out.slice_mut(s![cursor..cursor + v.nrows(), ..]).assign(v);
            cursor += v.nrows();
        }
        self.push(out, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut out = Array2::zeros((rows, cols));
        let mut cursor = 0;
        for &p in parts {
            let v = self.value(p);
            out.slice_mut(s![.., cursor..cursor + v.ncols()]).assign(v);
            cursor += v.ncols();
        }
        self.push(out, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn gate_blend(&mut self, gate: NodeId, mask_row: NodeId, x: NodeId) -> NodeId {
        let s = self.value(gate)[[0, 0]];
        let m = self.value(mask_row);
        let xv = self.value(x);
        let mut out = Array2::zeros(xv.dim());
        for i in 0..xv.nrows() {
            for j in 0..xv.ncols() {
                out[[i, j]] = s * m[[0, j]] + (1.0 - s) * xv[[i, j]];
            }
        }
        self.push(out, Op::GateBlend { gate, mask_row, x })
    }

    pub fn gate_mix_rows(&mut self, gate: NodeId, a: NodeId, b: NodeId) -> NodeId {
        let g = self.value(gate);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Array2::zeros(av.dim());
        for i in 0..av.nrows() {
            let s = g[[i, 0]];
            for j in 0..av.ncols() {
                out[[i, j]] = s * av[[i, j]] + (1.0 - s) * bv[[i, j]];
            }
        }
        self.push(out, Op::GateMixRows { gate, a, b })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mean = xv.sum() / xv.len() as f64;
        self.push(Array2::from_elem((1, 1), mean), Op::MeanAll { x })
    }

    pub fn log_sum_exp_row(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xv.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        self.push(Array2::from_elem((1, 1), lse), Op::LogSumExpRow { x })
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        let mut nll = 0.0;
        for (i, &gold) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll -= row[gold] - lse;
        }
        nll /= targets.len() as f64;
        self.push(
            Array2::from_elem((1, 1), nll),
            Op::CrossEntropyMean { logits, targets: targets.to_vec() },
        )
    }

    pub fn dropout(&mut self, x: NodeId, mask: Array2<f64>) -> NodeId {
        let out = self.value(x) * &mask;
        self.push(out, Op::Dropout { x, mask })
    }

    /// Reverse sweep from `loss` (a 1x1 node). Returns one gradient per
    /// registry parameter, zero-filled for parameters outside the graph.
    pub fn backward(&self, loss: NodeId) -> Vec<Array2<f64>> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.ops.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.ops[id] {
                Op::Param { .. } | Op::Const => {
                    grads[id] = Some(g); // keep for export
                    continue;
                }
                Op::EmbedRows { table, ids } => {
                    let dim = self.value(*table).dim();
                    let acc = Self::slot(&mut grads, table.0, dim);
                    for (i, &tok) in ids.iter().enumerate() {
                        let mut row = acc.row_mut(tok);
                        row += &g.row(i);
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, &g);
                    self.accumulate(&mut grads, *b, &g);
                }
                Op::AddScaled { a, b, c } => {
                    self.accumulate(&mut grads, *a, &g);
                    self.accumulate(&mut grads, *b, &(&g * *c));
                }
                Op::AddBiasRow { x, bias } => {
                    self.accumulate(&mut grads, *x, &g);
                    let mut db = Array2::zeros((1, g.ncols()));
                    for row in g.rows() {
                        db.row_mut(0).scaled_add(1.0, &row);
                    }
                    self.accumulate(&mut grads, *bias, &db);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (da, db) = match (ta, tb) {
                        (false, false) => (g.dot(&bv.t()), av.t().dot(&g)),
                        (false, true) => (g.dot(bv), g.t().dot(av)),
                        (true, false) => (bv.dot(&g.t()), av.dot(&g)),
                        (true, true) => (bv.t().dot(&g.t()), g.t().dot(&av.t())),
                    };
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Scale { x, c } => self.accumulate(&mut grads, *x, &(&g * *c)),
                Op::SoftmaxRows { x } => {
                    let y = &self.values[id];
                    let mut dx = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[[i, j]] * y[[i, j]]).sum();
                        for j in 0..y.ncols() {
                            dx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let dx = ndarray::Zip::from(&g).and(xv).map_collect(|&gi, &xi| gi * gelu_grad(xi));
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::Sigmoid { x } => {
                    let y = &self.values[id];
                    let dx = ndarray::Zip::from(&g).and(y).map_collect(|&gi, &yi| gi * yi * (1.0 - yi));
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let n = xv.ncols() as f64;
                    let mut dx = Array2::zeros(xv.dim());
                    let mut dgain = Array2::zeros((1, xv.ncols()));
                    let mut dbias = Array2::zeros((1, xv.ncols()));
                    for i in 0..xv.nrows() {
                        let row = xv.row(i);
                        let (mean, inv_std) = row_stats(row);
                        // dxhat, plus the two reduction terms of the LN backward
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut xhat = vec![0.0; xv.ncols()];
                        let mut dxhat = vec![0.0; xv.ncols()];
                        for j in 0..xv.ncols() {
                            xhat[j] = (row[j] - mean) * inv_std;
                            dxhat[j] = g[[i, j]] * gv[[0, j]];
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xhat += dxhat[j] * xhat[j];
                            dgain[[0, j]] += g[[i, j]] * xhat[j];
                            dbias[[0, j]] += g[[i, j]];
                        }
                        for j in 0..xv.ncols() {
                            dx[[i, j]] = inv_std
                                * (dxhat[j] - sum_dxhat / n - xhat[j] * sum_dxhat_xhat / n);
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                    self.accumulate(&mut grads, *gain, &dgain);
                    self.accumulate(&mut grads, *bias, &dbias);
                }
                Op::SliceRows { x, start, len } => {
                    let dim = self.value(*x).dim();
                    let acc = Self::slot(&mut grads, x.0, dim);
                    let mut region = acc.slice_mut(s![*start..*start + *len, ..]);
                    region += &g;
                }
                Op::SliceCols { x, start, len } => {
                    let dim = self.value(*x).dim();
                    let acc = Self::slot(&mut grads, x.0, dim);
                    let mut region = acc.slice_mut(s![.., *start..*start + *len]);
                    region += &g;
                }
                Op::ConcatRows { parts } => {
                    let mut cursor = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        let piece = g.slice(s![cursor..cursor + rows, ..]).to_owned();
                        self.accumulate(&mut grads, p, &piece);
                        cursor += rows;
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut cursor = 0;
                    for &p in parts {
                        let cols = self.value(p).ncols();
                        let piece = g.slice(s![.., cursor..cursor + cols]).to_owned();
                        self.accumulate(&mut grads, p, &piece);
                        cursor += cols;
                    }
                }
                Op::GateBlend { gate, mask_row, x } => {
                    let sv = self.value(*gate)[[0, 0]];
                    let m = self.value(*mask_row);
                    let xv = self.value(*x);
                    let mut dgate = 0.0;
                    let mut dm = Array2::zeros((1, xv.ncols()));
                    let mut dx = Array2::zeros(xv.dim());
                    for i in 0..xv.nrows() {
                        for j in 0..xv.ncols() {
                            let gij = g[[i, j]];
                            dgate += gij * (m[[0, j]] - xv[[i, j]]);
                            dm[[0, j]] += gij * sv;
                            dx[[i, j]] = gij * (1.0 - sv);
                        }
                    }
                    self.accumulate(&mut grads, *gate, &Array2::from_elem((1, 1), dgate));
                    self.accumulate(&mut grads, *mask_row, &dm);
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::GateMixRows { gate, a, b } => {
                    let gv = self.value(*gate);
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut dgate = Array2::zeros((av.nrows(), 1));
                    let mut da = Array2::zeros(av.dim());
                    let mut db = Array2::zeros(av.dim());
                    for i in 0..av.nrows() {
                        let s = gv[[i, 0]];
                        for j in 0..av.ncols() {
                            let gij = g[[i, j]];
                            dgate[[i, 0]] += gij * (av[[i, j]] - bv[[i, j]]);
                            da[[i, j]] = gij * s;
                            db[[i, j]] = gij * (1.0 - s);
                        }
                    }
                    self.accumulate(&mut grads, *gate, &dgate);
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::MeanAll { x } => {
                    let xv = self.value(*x);
                    let c = g[[0, 0]] / xv.len() as f64;
                    self.accumulate(&mut grads, *x, &Array2::from_elem(xv.dim(), c));
                }
                Op::LogSumExpRow { x } => {
                    let xv = self.value(*x);
                    let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = xv.iter().map(|v| (v - max).exp()).sum();
                    let dx = xv.mapv(|v| g[[0, 0]] * (v - max).exp() / sum);
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let lv = self.value(*logits);
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut dx = Array2::zeros(lv.dim());
                    for (i, &gold) in targets.iter().enumerate() {
                        let row = lv.row(i);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..lv.ncols() {
                            let p = (row[j] - max).exp() / sum;
                            dx[[i, j]] = scale * (p - if j == gold { 1.0 } else { 0.0 });
                        }
                    }
                    self.accumulate(&mut grads, *logits, &dx);
                }
                Op::Dropout { x, mask } => {
                    self.accumulate(&mut grads, *x, &(&g * mask));
                }
            }
        }

        let mut out: Vec<Array2<f64>> =
            self.params.shapes().map(|(r, c)| Array2::zeros((r, c))).collect();
        for (id, op) in self.ops.iter().enumerate() {
            if let Op::Param { idx } = op {
                if let Some(g) = &grads[id] {
                    out[*idx] += g;
                }
            }
        }
        out
    }

    fn slot<'a>(
        grads: &'a mut [Option<Array2<f64>>],
        id: usize,
        dim: (usize, usize),
    ) -> &'a mut Array2<f64> {
        grads[id].get_or_insert_with(|| Array2::zeros(dim))
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], id: NodeId, delta: &Array2<f64>) {
        let acc = Self::slot(grads, id.0, delta.dim());
        *acc += delta;
    }
}

fn row_stats(row: ndarray::ArrayView1<f64>) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.sum() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
