// SPDX-License-Identifier: MIT OR Apache-2.0

//! Define-by-run reverse-mode differentiation over [`Mat`] values.
//!
//! Values are computed eagerly as ops are recorded. Parameters are borrowed
//! from the model's store rather than copied. Gradients flow only into nodes
//! that transitively depend on a parameter (when parameter gradients are
//! requested) or on a node registered with [`Tape::watch`].

use statrs::function::erf::erf;

use super::tensor::{dot, Mat};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Param(usize),
    Input,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Softmax {
        x: Var,
    },
    LogSoftmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    MulConst {
        x: Var,
        factors: Mat,
    },
    Patch {
        x: Var,
        replaced: Vec<bool>,
    },
    Scale {
        x: Var,
        s: f64,
    },
    PickSum {
        x: Var,
        entries: Vec<(usize, usize, f64)>,
    },
}

struct Node {
    op: Op,
    value: Option<Mat>,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p [Mat],
    param_grads: bool,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient w.r.t. a recorded node, if it received any.
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    /// Gradient w.r.t. parameter `id`, if it received any.
    pub fn param(&self, id: usize) -> Option<&Mat> {
        self.params.get(id).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Mat>> {
        self.params
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

impl<'p> Tape<'p> {
    /// `param_grads` controls whether parameter leaves require gradients.
    pub fn new(params: &'p [Mat], param_grads: bool) -> Self {
        Self {
            params,
            param_grads,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => &self.params[*id],
            (_, Some(m)) => m,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Option<Mat>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mark a node so that gradients are accumulated into it and flow
    /// through everything recorded after it.
    pub fn watch(&mut self, v: Var) {
        self.nodes[v.0].requires_grad = true;
    }

    pub fn param(&mut self, id: usize) -> Var {
        let rg = self.param_grads;
        self.push(Op::Param(id), None, rg)
    }

    pub fn input(&mut self, m: Mat) -> Var {
        self.push(Op::Input, Some(m), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), Some(v), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulT(a, b), Some(v), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), Some(v), rg)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut v = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, v.cols), "bias shape");
        for r in 0..v.rows {
            for (o, bb) in v.row_mut(r).iter_mut().zip(&b.data) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(Op::AddRow(x, bias), Some(v), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data[c] + b.data[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            Some(out),
            rg,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Mat::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&t| gelu(t)).collect());
        let rg = self.rg(x);
        self.push(Op::Gelu(x), Some(v), rg)
    }

    /// Row-wise softmax; with `causal`, entry `(i, j)` is zero for `j > i`.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let limit = if causal { (r + 1).min(xv.cols) } else { xv.cols };
            let row = &xv.row(r)[..limit];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out.set(r, c, e);
                total += e;
            }
            for c in 0..limit {
                out.set(r, c, out.get(r, c) / total);
            }
        }
        let rg = self.rg(x);
        self.push(Op::Softmax { x }, Some(out), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let ls = super::tensor::log_softmax(xv.row(r));
            out.row_mut(r).copy_from_slice(&ls);
        }
        let rg = self.rg(x);
        self.push(Op::LogSoftmax(x), Some(out), rg)
    }

    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let v = self.value(table).select_rows(&ids);
        let rg = self.rg(table);
        self.push(Op::Gather { table, ids }, Some(v), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows, width);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + width]);
        }
        let rg = self.rg(x);
        self.push(Op::SliceCols { x, start }, Some(out), rg)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for p in &parts {
            let pv = self.value(*p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Op::ConcatCols(parts), Some(out), rg)
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let v = self.value(x).select_rows(&rows);
        let rg = self.rg(x);
        self.push(Op::SelectRows { x, rows }, Some(v), rg)
    }

    /// Element-wise product with a constant matrix.
    pub fn mul_const(&mut self, x: Var, factors: Mat) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), factors.shape(), "mul_const shape");
        let v = Mat::from_vec(
            xv.rows,
            xv.cols,
            xv.data.iter().zip(&factors.data).map(|(a, b)| a * b).collect(),
        );
        let rg = self.rg(x);
        self.push(Op::MulConst { x, factors }, Some(v), rg)
    }

    /// Overwrite entries where `replaced` is set with `donor`'s values.
    /// Overwritten entries are constants for differentiation.
    pub fn patch(&mut self, x: Var, donor: &Mat, replaced: Vec<bool>) -> Var {
        let mut v = self.value(x).clone();
        assert_eq!(v.shape(), donor.shape(), "patch shape");
        for (i, &rep) in replaced.iter().enumerate() {
            if rep {
                v.data[i] = donor.data[i];
            }
        }
        let rg = self.rg(x);
        self.push(Op::Patch { x, replaced }, Some(v), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(Op::Scale { x, s }, Some(v), rg)
    }

    /// Weighted sum of selected entries, producing a `1 × 1` scalar.
    pub fn pick_sum(&mut self, x: Var, entries: Vec<(usize, usize, f64)>) -> Var {
        let xv = self.value(x);
        let total: f64 = entries.iter().map(|&(r, c, w)| w * xv.get(r, c)).sum();
        let rg = self.rg(x);
        self.push(Op::PickSum { x, entries }, Some(Mat::filled(1, 1, total)), rg)
    }

    /// Back-propagate from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Mat>> = (0..self.params.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::filled(1, 1, 1.0));

        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>], params: &mut [Option<Mat>]) {
        match &self.nodes[i].op {
            Op::Param(id) => match &mut params[*id] {
                Some(existing) => existing.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            },
            Op::Input => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                self.acc(grads, *x, g.clone());
                if self.rg(*bias) {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *bias, gb);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma);
                let (rows, cols) = g.shape();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = Mat::zeros(1, cols);
                    let mut gbeta = Mat::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data[c] += g.get(r, c) * xhat.get(r, c);
                            gbeta.data[c] += g.get(r, c);
                        }
                    }
                    self.acc(grads, *gamma, gg);
                    self.acc(grads, *beta, gbeta);
                }
                if self.rg(*x) {
                    let mut gx = Mat::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gam.data[c]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / n;
                        let mean_ghx = dot(&gh, xhat.row(r)) / n;
                        for c in 0..cols {
                            gx.set(r, c, rstd[r] * (gh[c] - mean_gh - xhat.get(r, c) * mean_ghx));
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gg, &t)| gg * gelu_grad(t))
                        .collect(),
                );
                self.acc(grads, *x, gx);
            }
            Op::Softmax { x } => {
                let p = self.nodes[i].value.as_ref().expect("softmax value");
                let mut gx = Mat::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let s = dot(g.row(r), p.row(r));
                    for c in 0..g.cols {
                        gx.set(r, c, p.get(r, c) * (g.get(r, c) - s));
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let y = self.nodes[i].value.as_ref().expect("log-softmax value");
                let mut gx = Mat::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let s: f64 = g.row(r).iter().sum();
                    for c in 0..g.cols {
                        gx.set(r, c, g.get(r, c) - y.get(r, c).exp() * s);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut gt = Mat::zeros(tv.rows, tv.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols;
                    if self.rg(*p) {
                        let mut gp = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.acc(grads, *p, gp);
                    }
                    offset += w;
                }
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::MulConst { x, factors } => {
                let gx = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&factors.data).map(|(a, b)| a * b).collect(),
                );
                self.acc(grads, *x, gx);
            }
            Op::Patch { x, replaced } => {
                let mut gx = g.clone();
                for (v, &rep) in gx.data.iter_mut().zip(replaced) {
                    if rep {
                        *v = 0.0;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Scale { x, s } => self.acc(grads, *x, g.scale(*s)),
            Op::PickSum { x, entries } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                let gs = g.data[0];
                for &(r, c, w) in entries {
                    gx.data[r * xv.cols + c] += w * gs;
                }
                self.acc(grads, *x, gx);
            }
        }
    }
}
