//! Minimal reverse-mode differentiation over [`Tensor`] operations.
//!
//! A [`Tape`] records every operation eagerly, value first. `backward`
//! walks the records in reverse and applies each operation's adjoint. Only
//! the operations below have adjoints; anything recorded through
//! [`Tape::opaque`] fails the backward pass if a gradient reaches it.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{head_attention_weights, head_slice, merge_heads};
use crate::error::{shape_err, Error, Result};
use crate::hybrid::{apply_headwise, broadcast_gate, GateGranularity};
use crate::numerics::{
    l2norm_groups, matmul, rope_grouped, rope_inverse_grouped, sigmoid, Tensor, EPSILON_NORM, ROPE_BASE,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    HeadMap(Var, Var),
    Rope {
        x: Var,
        positions: Vec<usize>,
        group: usize,
    },
    L2Norm {
        x: Var,
        group: usize,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        head_dim: usize,
        probs: Vec<Tensor>,
    },
    GateBroadcast {
        g: Var,
        granularity: GateGranularity,
        heads: usize,
        head_dim: usize,
    },
    GdnQuery {
        q: Var,
        s: Var,
        heads: usize,
        head_dim: usize,
    },
    GdnUpdate {
        s: Var,
        k: Var,
        v: Var,
        alpha: Var,
        beta: Var,
        heads: usize,
        head_dim: usize,
        /// State before each token, `L` snapshots of `[H·D·D]`.
        trajectory: Vec<Vec<f64>>,
    },
    SumSquares(Var),
    Opaque(String),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value gradients are taken with respect to.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value produced outside the tape from `inputs`. It has no
    /// adjoint: a backward pass that needs to go through it fails.
    pub fn opaque(&mut self, name: &str, value: Tensor, inputs: &[Var]) -> Var {
        self.push(value, Op::Opaque(name.into()), inputs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `x + bias`, the bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(v, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(libm::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    /// Grouped per-head linear map, see [`apply_headwise`].
    pub fn head_map(&mut self, x: Var, phi: Var) -> Result<Var> {
        let v = apply_headwise(self.value(x), self.value(phi))?;
        Ok(self.push(v, Op::HeadMap(x, phi), &[x, phi]))
    }

    pub fn rope(&mut self, x: Var, positions: Vec<usize>, group: usize) -> Result<Var> {
        let v = rope_grouped(self.value(x), &positions, group, ROPE_BASE)?;
        Ok(self.push(v, Op::Rope { x, positions, group }, &[x]))
    }

    pub fn l2norm(&mut self, x: Var, group: usize) -> Var {
        let v = l2norm_groups(self.value(x), group);
        self.push(v, Op::L2Norm { x, group }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&values)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Unmasked multi-head softmax attention (already rotated `q`, `k`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, head_dim: usize) -> Result<Var> {
        let probs = head_attention_weights(self.value(q), self.value(k), heads, head_dim)?;
        let vv = self.value(v);
        let mut outs = Vec::with_capacity(heads);
        for (h, p) in probs.iter().enumerate() {
            outs.push(matmul(p, &head_slice(vv, h, head_dim))?);
        }
        let out = merge_heads(&outs, self.value(q).precision());
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                head_dim,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn gate_broadcast(&mut self, g: Var, granularity: GateGranularity, heads: usize, head_dim: usize) -> Var {
        let v = broadcast_gate(self.value(g), granularity, heads, head_dim);
        self.push(
            v,
            Op::GateBroadcast {
                g,
                granularity,
                heads,
                head_dim,
            },
            &[g],
        )
    }

    /// `O[i, h] = q[i, h] · S_h` with `s` holding `[H, D, D]`.
    pub fn gdn_query(&mut self, q: Var, s: Var) -> Result<Var> {
        let (heads, dk) = state_dims(self.value(s))?;
        let qv = self.value(q);
        if qv.cols() != heads * dk {
            return Err(shape_err("gdn_query", format!("q {:?}", qv.shape())));
        }
        let sd = self.value(s).data();
        let mut out = vec![0.0; qv.len()];
        for i in 0..qv.rows() {
            for h in 0..heads {
                let sh = &sd[h * dk * dk..(h + 1) * dk * dk];
                for p in 0..dk {
                    let qp = qv.row(i)[h * dk + p];
                    for c in 0..dk {
                        out[i * heads * dk + h * dk + c] += qp * sh[p * dk + c];
                    }
                }
            }
        }
        let value = Tensor::new(qv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::GdnQuery {
                q,
                s,
                heads,
                head_dim: dk,
            },
            &[q, s],
        ))
    }

    /// Sequential gated delta update of `s[H, D, D]` by one frame.
    pub fn gdn_update(&mut self, s: Var, k: Var, v: Var, alpha: Var, beta: Var) -> Result<Var> {
        let (heads, dk) = state_dims(self.value(s))?;
        let (kv, vv) = (self.value(k), self.value(v));
        let (av, bv) = (self.value(alpha), self.value(beta));
        let l = kv.rows();
        if kv.cols() != heads * dk || vv.shape() != kv.shape() || av.shape() != [l, heads] || bv.shape() != [l, heads] {
            return Err(shape_err("gdn_update", "operand shapes disagree with the state"));
        }
        let mut cur = self.value(s).data().to_vec();
        let mut trajectory = Vec::with_capacity(l);
        for j in 0..l {
            trajectory.push(cur.clone());
            for h in 0..heads {
                let kj = &kv.row(j)[h * dk..(h + 1) * dk];
                let vj = &vv.row(j)[h * dk..(h + 1) * dk];
                let (a, b) = (av.row(j)[h], bv.row(j)[h]);
                let sh = &mut cur[h * dk * dk..(h + 1) * dk * dk];
                let mut ks = vec![0.0; dk];
                for p in 0..dk {
                    for c in 0..dk {
                        ks[c] += kj[p] * sh[p * dk + c];
                    }
                }
                for p in 0..dk {
                    for c in 0..dk {
                        sh[p * dk + c] = a * sh[p * dk + c] + b * kj[p] * (vj[c] - ks[c]);
                    }
                }
            }
        }
        let value = Tensor::new([heads, dk, dk], cur)?;
        value.check_finite("tape gdn_update")?;
        Ok(self.push(
            value,
            Op::GdnUpdate {
                s,
                k,
                v,
                alpha,
                beta,
                heads,
                head_dim: dk,
                trajectory,
            },
            &[s, k, v, alpha, beta],
        ))
    }

    /// `Σ x²` as a `[1]` tensor.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = Tensor::filled([1], self.value(x).frobenius_sq());
        self.push(v, Op::SumSquares(x), &[x])
    }

    /// Gradients of the scalar `root` with respect to every recorded value
    /// that depends on a parameter.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(shape_err("backward", "root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(self.value(root).shape().to_vec(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.adjoint(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn adjoint(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, d: Tensor| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            grads[v.0] = Some(match grads[v.0].take() {
                Some(prev) => prev.add(&d)?,
                None => d,
            });
            Ok(())
        };
        match op {
            Op::Leaf => {}
            Op::Opaque(name) => return Err(Error::UnregisteredAdjoint { op: name.clone() }),
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, matmul(g, &self.value(*b).transpose())?)?;
                }
                if self.wants(*b) {
                    acc(*b, matmul(&self.value(*a).transpose(), g)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.mul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    acc(*b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::AddRow(x, bias) => {
                acc(*x, g.clone())?;
                if self.wants(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for i in 0..g.rows() {
                        for (d, &gv) in db.iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                    acc(*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?)?;
                }
            }
            Op::Sigmoid(x) => acc(
                *x,
                Tensor::new(out.shape().to_vec(), zip_map(g, out, |gv, y| gv * y * (1.0 - y)))?,
            )?,
            Op::Tanh(x) => acc(
                *x,
                Tensor::new(out.shape().to_vec(), zip_map(g, out, |gv, y| gv * (1.0 - y * y)))?,
            )?,
            Op::HeadMap(x, phi) => {
                let pv = self.value(*phi);
                let (heads, dk) = (pv.shape()[0], pv.shape()[1]);
                if self.wants(*x) {
                    // dx_h = dy_h · φ_hᵀ
                    let mut phit = vec![0.0; pv.len()];
                    for h in 0..heads {
                        for p in 0..dk {
                            for c in 0..dk {
                                phit[h * dk * dk + c * dk + p] = pv.data()[h * dk * dk + p * dk + c];
                            }
                        }
                    }
                    acc(*x, apply_headwise(g, &Tensor::new(pv.shape().to_vec(), phit)?)?)?;
                }
                if self.wants(*phi) {
                    // dφ_h = x_hᵀ · dy_h
                    let xv = self.value(*x);
                    let mut dphi = vec![0.0; pv.len()];
                    for i in 0..xv.rows() {
                        for h in 0..heads {
                            for p in 0..dk {
                                let xp = xv.row(i)[h * dk + p];
                                for c in 0..dk {
                                    dphi[h * dk * dk + p * dk + c] += xp * g.row(i)[h * dk + c];
                                }
                            }
                        }
                    }
                    acc(*phi, Tensor::new(pv.shape().to_vec(), dphi)?)?;
                }
            }
            Op::Rope { x, positions, group } => {
                acc(*x, rope_inverse_grouped(g, positions, *group, ROPE_BASE)?)?;
            }
            Op::L2Norm { x, group } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                for (c, ((xs, ys), gs)) in xv
                    .data()
                    .chunks(*group)
                    .zip(out.data().chunks(*group))
                    .zip(g.data().chunks(*group))
                    .enumerate()
                {
                    let norm = libm::sqrt(xs.iter().map(|v| v * v).sum::<f64>());
                    if norm < EPSILON_NORM {
                        continue;
                    }
                    let dot: f64 = ys.iter().zip(gs).map(|(y, gv)| y * gv).sum();
                    for i in 0..*group {
                        dx[c * group + i] = (gs[i] - ys[i] * dot) / norm;
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx)?)?;
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        let slice = g.data()[start * c..(start + rows) * c].to_vec();
                        acc(p, Tensor::new([rows, c], slice)?)?;
                    }
                    start += rows;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                head_dim,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let scale = 1.0 / libm::sqrt(*head_dim as f64);
                let mut dq = Vec::with_capacity(*heads);
                let mut dk = Vec::with_capacity(*heads);
                let mut dv = Vec::with_capacity(*heads);
                for (h, p) in probs.iter().enumerate() {
                    let go = head_slice(g, h, *head_dim);
                    let vh = head_slice(vv, h, *head_dim);
                    dv.push(matmul(&p.transpose(), &go)?);
                    let dp = matmul(&go, &vh.transpose())?;
                    // Softmax adjoint row by row, then the 1/sqrt(D) scale.
                    let mut ds = vec![0.0; p.len()];
                    for i in 0..p.rows() {
                        let (pr, dr) = (p.row(i), dp.row(i));
                        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..p.cols() {
                            ds[i * p.cols() + j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    let ds = Tensor::new(p.shape().to_vec(), ds)?;
                    dq.push(matmul(&ds, &head_slice(kv, h, *head_dim))?);
                    dk.push(matmul(&ds.transpose(), &head_slice(qv, h, *head_dim))?);
                }
                let prec = qv.precision();
                acc(*q, merge_heads(&dq, prec))?;
                acc(*k, merge_heads(&dk, prec))?;
                acc(*v, merge_heads(&dv, prec))?;
            }
            Op::GateBroadcast {
                g: gate,
                granularity,
                heads,
                head_dim,
            } => {
                let gv = self.value(*gate);
                let gw = gv.cols();
                let width = heads * head_dim;
                let mut dg = vec![0.0; gv.len()];
                for i in 0..g.rows() {
                    for c in 0..width {
                        let col = match granularity {
                            GateGranularity::Scalar => 0,
                            GateGranularity::Headwise => c / head_dim,
                            GateGranularity::Elementwise => c,
                        };
                        dg[i * gw + col] += g.row(i)[c];
                    }
                }
                acc(*gate, Tensor::new(gv.shape().to_vec(), dg)?)?;
            }
            Op::GdnQuery { q, s, heads, head_dim } => {
                let (qv, sv) = (self.value(*q), self.value(*s));
                let (heads, dk) = (*heads, *head_dim);
                let mut dq = vec![0.0; qv.len()];
                let mut ds = vec![0.0; sv.len()];
                for i in 0..qv.rows() {
                    for h in 0..heads {
                        for p in 0..dk {
                            let qp = qv.row(i)[h * dk + p];
                            for c in 0..dk {
                                let go = g.row(i)[h * dk + c];
                                dq[i * heads * dk + h * dk + p] += go * sv.data()[h * dk * dk + p * dk + c];
                                ds[h * dk * dk + p * dk + c] += qp * go;
                            }
                        }
                    }
                }
                acc(*q, Tensor::new(qv.shape().to_vec(), dq)?)?;
                acc(*s, Tensor::new(sv.shape().to_vec(), ds)?)?;
            }
            Op::GdnUpdate {
                s,
                k,
                v,
                alpha,
                beta,
                heads,
                head_dim,
                trajectory,
            } => {
                let (kv, vv) = (self.value(*k), self.value(*v));
                let (av, bv) = (self.value(*alpha), self.value(*beta));
                let (heads, dk) = (*heads, *head_dim);
                let mut gs = g.data().to_vec();
                let mut dkv = vec![0.0; kv.len()];
                let mut dvv = vec![0.0; vv.len()];
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                let mut u = vec![0.0; dk];
                let mut du = vec![0.0; dk];
                for j in (0..kv.rows()).rev() {
                    let prev = &trajectory[j];
                    for h in 0..heads {
                        let off = h * dk * dk;
                        let sp = &prev[off..off + dk * dk];
                        let gh = &mut gs[off..off + dk * dk];
                        let kj = &kv.row(j)[h * dk..(h + 1) * dk];
                        let vj = &vv.row(j)[h * dk..(h + 1) * dk];
                        let (a, b) = (av.row(j)[h], bv.row(j)[h]);
                        for c in 0..dk {
                            u[c] = vj[c] - (0..dk).map(|p| kj[p] * sp[p * dk + c]).sum::<f64>();
                        }
                        let mut dalpha = 0.0;
                        let mut dbeta = 0.0;
                        du.fill(0.0);
                        let krow = j * heads * dk + h * dk;
                        for p in 0..dk {
                            let mut gu = 0.0;
                            for c in 0..dk {
                                let gpc = gh[p * dk + c];
                                dalpha += gpc * sp[p * dk + c];
                                gu += gpc * u[c];
                                du[c] += b * kj[p] * gpc;
                            }
                            dbeta += kj[p] * gu;
                            dkv[krow + p] += b * gu;
                        }
                        for c in 0..dk {
                            dvv[krow + c] += du[c];
                        }
                        for p in 0..dk {
                            let back: f64 = (0..dk).map(|c| du[c] * sp[p * dk + c]).sum();
                            dkv[krow + p] -= back;
                        }
                        for p in 0..dk {
                            for c in 0..dk {
                                gh[p * dk + c] = a * gh[p * dk + c] - kj[p] * du[c];
                            }
                        }
                        da[j * heads + h] += dalpha;
                        db[j * heads + h] += dbeta;
                    }
                }
                acc(*s, Tensor::new(self.value(*s).shape().to_vec(), gs)?)?;
                acc(*k, Tensor::new(kv.shape().to_vec(), dkv)?)?;
                acc(*v, Tensor::new(vv.shape().to_vec(), dvv)?)?;
                acc(*alpha, Tensor::new(av.shape().to_vec(), da)?)?;
                acc(*beta, Tensor::new(bv.shape().to_vec(), db)?)?;
            }
            Op::SumSquares(x) => {
                let s = 2.0 * g.data()[0];
                acc(*x, self.value(*x).scale(s))?;
            }
        }
        Ok(())
    }
}

fn zip_map(g: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect()
}

fn state_dims(s: &Tensor) -> Result<(usize, usize)> {
    let sh = s.shape();
    if sh.len() != 3 || sh[1] != sh[2] {
        return Err(shape_err("gdn", format!("state {sh:?} is not [H, D, D]")));
    }
    Ok((sh[0], sh[1]))
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros if none reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}
