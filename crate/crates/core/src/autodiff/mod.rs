//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in creation order, so the node list is
//! already topologically sorted; [`Tape::backward`] walks it once in reverse.
//! Parameters live in a [`ParamSet`] that the tape borrows instead of
//! copying, which matters for the multi-megabyte decoder matrices.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::distances::nearest_pairs;
use crate::error::{Error, Result};
pub use params::{ParamId, ParamSet};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    /// `x . w^T + b`, with `b` a `1 x out` row broadcast over rows.
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    /// Column-wise max over rows; `argmax[c]` is the first row attaining it.
    MaxRows { input: Var, argmax: Vec<usize> },
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    Row(Var, usize),
    /// Dense layer whose weights are read out of row `row` of a flat weight
    /// matrix: `W` (`out x in`, row-major) at `offset`, then `b`.
    TargetLayer {
        input: Var,
        theta: Var,
        row: usize,
        offset: usize,
        in_dim: usize,
        out_dim: usize,
    },
    /// Sum-reduced Chamfer distance between two `n x 3` matrices; the
    /// nearest-neighbour choice is treated as locally constant.
    Chamfer {
        a: Var,
        b: Var,
        a_to_b: Vec<usize>,
        b_to_a: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Option<Array2<f64>>,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    train_params: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    params: Vec<Option<Array2<f64>>>,
    nodes: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of a parameter; `None` if it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to any node that required gradients.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> &[Option<Array2<f64>>] {
        &self.params
    }

    pub fn param_grads_mut(&mut self) -> &mut [Option<Array2<f64>>] {
        &mut self.params
    }
}

fn shape_str(a: &ArrayView2<'_, f64>) -> String {
    format!("{}x{}", a.nrows(), a.ncols())
}

impl<'p> Tape<'p> {
    /// A tape whose parameters receive gradients.
    pub fn new(params: &'p ParamSet) -> Self {
        Self::with_mode(params, true)
    }

    /// A tape that treats every parameter as a constant.
    pub fn frozen(params: &'p ParamSet) -> Self {
        Self::with_mode(params, false)
    }

    fn with_mode(params: &'p ParamSet, train_params: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            train_params,
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Option<Array2<f64>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Input, Some(value), false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Input, Some(value), true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Op::Param(id), None, self.train_params);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id).view(),
            _ => node.value.as_ref().expect("non-parameter nodes hold values").view(),
        }
    }

    /// The value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::shape(format!(
                "{what}: {} vs {}",
                shape_str(&va),
                shape_str(&vb)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = &self.value(a) + &self.value(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), Some(out), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = &self.value(a) - &self.value(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Sub(a, b), Some(out), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = &self.value(a) * &self.value(b);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), Some(out), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = &self.value(a) * c;
        let rg = self.needs(&[a]);
        self.push(Op::Scale(a, c), Some(out), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = &self.value(a) + c;
        let rg = self.needs(&[a]);
        self.push(Op::AddScalar(a), Some(out), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::shape(format!(
                "matmul: {} . {}",
                shape_str(&va),
                shape_str(&vb)
            )));
        }
        let out = va.dot(&vb);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Some(out), rg))
    }

    /// `x . w^T + b` for `x: n x in`, `w: out x in`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.ncols() != vw.ncols() || vb.nrows() != 1 || vb.ncols() != vw.nrows() {
            return Err(Error::shape(format!(
                "linear: input {}, weight {}, bias {}",
                shape_str(&vx),
                shape_str(&vw),
                shape_str(&vb)
            )));
        }
        let mut out = vx.dot(&vw.t());
        out += &vb;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(Op::Linear { x, w, b }, Some(out), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        let rg = self.needs(&[a]);
        self.push(Op::Relu(a), Some(out), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let rg = self.needs(&[a]);
        self.push(Op::Exp(a), Some(out), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        let rg = self.needs(&[a]);
        self.push(Op::Log(a), Some(out), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * v);
        let rg = self.needs(&[a]);
        self.push(Op::Square(a), Some(out), rg)
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(Op::Sum(a), Some(out), rg)
    }

    /// Column-wise maximum over rows (`n x c` to `1 x c`).
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.nrows() == 0 {
            return Err(Error::EmptyCloud);
        }
        let mut argmax = vec![0usize; va.ncols()];
        let mut out = Array2::zeros((1, va.ncols()));
        for (c, col) in va.columns().into_iter().enumerate() {
            let mut best = 0;
            for (r, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = r;
                }
            }
            argmax[c] = best;
            out[[0, c]] = col[best];
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Op::MaxRows { input: a, argmax }, Some(out), rg))
    }

    /// `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.nrows() != vb.nrows() {
            return Err(Error::shape(format!(
                "concat: {} with {}",
                shape_str(&va),
                shape_str(&vb)
            )));
        }
        let out = ndarray::concatenate(Axis(1), &[va, vb]).expect("row counts agree");
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), Some(out), rg))
    }

    /// Stacks `1 x c` rows into an `n x c` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::invalid("stack of zero rows"));
        }
        let views: Vec<_> = rows.iter().map(|&r| self.value(r)).collect();
        if views.iter().any(|v| v.nrows() != 1 || v.ncols() != views[0].ncols()) {
            return Err(Error::shape("stack_rows expects 1 x c rows of equal width"));
        }
        let out = ndarray::concatenate(Axis(0), &views).expect("widths agree");
        let rg = self.needs(rows);
        Ok(self.push(Op::StackRows(rows.to_vec()), Some(out), rg))
    }

    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let va = self.value(a);
        if index >= va.nrows() {
            return Err(Error::shape(format!("row {index} of {}", shape_str(&va))));
        }
        let out = va.slice(s![index..index + 1, ..]).to_owned();
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Row(a, index), Some(out), rg))
    }

    /// Applies the dense layer stored at `offset` in row `row` of `theta`.
    pub fn target_layer(
        &mut self,
        input: Var,
        theta: Var,
        row: usize,
        offset: usize,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Var> {
        let (vx, vt) = (self.value(input), self.value(theta));
        let end = offset + out_dim * in_dim + out_dim;
        if vx.ncols() != in_dim || row >= vt.nrows() || end > vt.ncols() {
            return Err(Error::shape(format!(
                "target layer {in_dim}->{out_dim} at {offset}: input {}, weights {}",
                shape_str(&vx),
                shape_str(&vt)
            )));
        }
        let flat = vt.row(row);
        let w = flat
            .slice(s![offset..offset + out_dim * in_dim])
            .into_shape_with_order((out_dim, in_dim))
            .expect("contiguous weight block");
        let b = flat.slice(s![offset + out_dim * in_dim..end]);
        let mut out = vx.dot(&w.t());
        out += &b;
        let rg = self.needs(&[input, theta]);
        Ok(self.push(
            Op::TargetLayer {
                input,
                theta,
                row,
                offset,
                in_dim,
                out_dim,
            },
            Some(out),
            rg,
        ))
    }

    /// Sum-reduced Chamfer distance between two `n x 3` point matrices.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != 3 || vb.ncols() != 3 || va.nrows() == 0 || vb.nrows() == 0 {
            return Err(Error::shape(format!(
                "chamfer needs non-empty n x 3 inputs, got {} and {}",
                shape_str(&va),
                shape_str(&vb)
            )));
        }
        let pa: Vec<[f64; 3]> = va.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        let pb: Vec<[f64; 3]> = vb.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        let (a_to_b, b_to_a, fwd, bwd) = nearest_pairs(&pa, &pb);
        let out = Array2::from_elem((1, 1), fwd + bwd);
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Op::Chamfer {
                a,
                b,
                a_to_b,
                b_to_a,
            },
            Some(out),
            rg,
        ))
    }

    /// Hash of every discrete choice made in the forward pass (ReLU signs,
    /// max-pool winners, nearest neighbours). Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn decision_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => {
                    for &v in node.value.as_ref().unwrap().iter() {
                        mix(u64::from(v > 0.0));
                    }
                }
                Op::MaxRows { argmax, .. } => argmax.iter().for_each(|&i| mix(i as u64)),
                Op::Chamfer { a_to_b, b_to_a, .. } => {
                    a_to_b.iter().chain(b_to_a).for_each(|&i| mix(i as u64))
                }
                _ => {}
            }
        }
        h
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {}",
                shape_str(&lv)
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Array2<f64>>> = (0..self.params.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                params: param_grads,
                nodes: grads,
            });
        }
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    param_grads[id.0] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || -&g);
                }
                Op::Mul(a, b) => {
                    self.acc(&mut grads, *a, || &g * &self.value(*b));
                    self.acc(&mut grads, *b, || &g * &self.value(*a));
                }
                Op::Scale(a, c) => self.acc(&mut grads, *a, || &g * *c),
                Op::AddScalar(a) => self.acc(&mut grads, *a, || g.clone()),
                Op::MatMul(a, b) => {
                    self.acc(&mut grads, *a, || g.dot(&self.value(*b).t()));
                    self.acc(&mut grads, *b, || self.value(*a).t().dot(&g));
                }
                Op::Linear { x, w, b } => {
                    self.acc(&mut grads, *x, || g.dot(&self.value(*w)));
                    self.acc(&mut grads, *w, || g.t().dot(&self.value(*x)));
                    self.acc(&mut grads, *b, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Relu(a) => {
                    let out = node.value.as_ref().unwrap();
                    self.acc(&mut grads, *a, || {
                        let mut d = g.clone();
                        d.zip_mut_with(out, |d, &y| {
                            if y <= 0.0 {
                                *d = 0.0
                            }
                        });
                        d
                    });
                }
                Op::Exp(a) => {
                    let out = node.value.as_ref().unwrap();
                    self.acc(&mut grads, *a, || &g * out);
                }
                Op::Log(a) => self.acc(&mut grads, *a, || &g / &self.value(*a)),
                Op::Square(a) => self.acc(&mut grads, *a, || &g * &self.value(*a) * 2.0),
                Op::Sum(a) => {
                    let dim = self.value(*a).dim();
                    self.acc(&mut grads, *a, || Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::MaxRows { input, argmax } => {
                    let dim = self.value(*input).dim();
                    self.acc(&mut grads, *input, || {
                        let mut d = Array2::zeros(dim);
                        for (c, &r) in argmax.iter().enumerate() {
                            d[[r, c]] = g[[0, c]];
                        }
                        d
                    });
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    self.acc(&mut grads, *a, || g.slice(s![.., ..split]).to_owned());
                    self.acc(&mut grads, *b, || g.slice(s![.., split..]).to_owned());
                }
                Op::StackRows(rows) => {
                    for (i, r) in rows.iter().enumerate() {
                        self.acc(&mut grads, *r, || g.slice(s![i..i + 1, ..]).to_owned());
                    }
                }
                Op::Row(a, index) => {
                    let dim = self.value(*a).dim();
                    self.acc(&mut grads, *a, || {
                        let mut d = Array2::zeros(dim);
                        d.row_mut(*index).assign(&g.row(0));
                        d
                    });
                }
                Op::TargetLayer {
                    input,
                    theta,
                    row,
                    offset,
                    in_dim,
                    out_dim,
                } => {
                    let (o, i, off) = (*out_dim, *in_dim, *offset);
                    let vt = self.value(*theta);
                    let flat = vt.row(*row);
                    let w = flat
                        .slice(s![off..off + o * i])
                        .into_shape_with_order((o, i))
                        .expect("contiguous weight block");
                    self.acc(&mut grads, *input, || g.dot(&w));
                    if self.nodes[theta.0].requires_grad {
                        let gw = g.t().dot(&self.value(*input));
                        let gb = g.sum_axis(Axis(0));
                        let slot = grads[theta.0].get_or_insert_with(|| Array2::zeros(vt.dim()));
                        let mut dst = slot.row_mut(*row);
                        let mut dw = dst.slice_mut(s![off..off + o * i]);
                        for (d, s) in dw.iter_mut().zip(gw.iter()) {
                            *d += s;
                        }
                        let mut db = dst.slice_mut(s![off + o * i..off + o * i + o]);
                        db += &gb;
                    }
                }
                Op::Chamfer {
                    a,
                    b,
                    a_to_b,
                    b_to_a,
                } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let scale = 2.0 * g[[0, 0]];
                    let mut ga = Array2::zeros(va.dim());
                    let mut gb = Array2::zeros(vb.dim());
                    for (i, &j) in a_to_b.iter().enumerate() {
                        for k in 0..3 {
                            let d = scale * (va[[i, k]] - vb[[j, k]]);
                            ga[[i, k]] += d;
                            gb[[j, k]] -= d;
                        }
                    }
                    for (j, &i) in b_to_a.iter().enumerate() {
                        for k in 0..3 {
                            let d = scale * (vb[[j, k]] - va[[i, k]]);
                            gb[[j, k]] += d;
                            ga[[i, k]] -= d;
                        }
                    }
                    self.acc(&mut grads, *a, || ga);
                    self.acc(&mut grads, *b, || gb);
                }
            }
            // keep gradients of leaves and of anything a caller may query
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            params: param_grads,
            nodes: grads,
        })
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: impl FnOnce() -> Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let d = delta();
        match &mut grads[v.0] {
            Some(existing) => *existing += &d,
            slot @ None => *slot = Some(d),
        }
    }
}
