//! Reverse-mode gradient tape.
//!
//! Operations are coarse: each records enough of its forward state to run
//! its own backward kernel. A tape is single-owner; build one per forward
//! pass and drop it after [`Tape::backward`].

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, AggPlan, LinearShape, MixShape};
use crate::ops;
use crate::rng::SeededRng;
use crate::tensor::{softsign_grad_scalar, softsign_scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Tanh(Var),
    Softsign(Var),
    /// Elementwise product with a constant, e.g. a dropout mask.
    ConstMul(Var, Arc<Vec<f64>>),
    Mix {
        w: Var,
        x: Var,
        shape: MixShape,
    },
    JointLinear {
        x: Var,
        theta: Var,
        bias: Option<Var>,
        shape: LinearShape,
    },
    Aggregate {
        h: Var,
        w: Var,
        plan: Arc<AggPlan>,
        d: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Mpjpe {
        pred: Var,
        target: Arc<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Normalization statistics source for [`Tape::batch_norm`].
pub enum BnMode<'a> {
    /// Normalize with batch statistics; they are returned for the caller to
    /// fold into running estimates.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed during a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn softsign(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softsign_scalar);
        let ng = self.needs(&[a]);
        self.push(out, Op::Softsign(a), ng)
    }

    /// Inverted dropout drawing its mask from `rng`; identity for rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut SeededRng) -> Result<Var> {
        ops::check_rate(rate)?;
        if rate == 0.0 {
            return Ok(x);
        }
        let mask = Arc::new(ops::dropout_mask(self.value(x).len(), rate, rng));
        let xv = self.value(x);
        let out = Tensor::from_raw(
            xv.shape(),
            xv.data().iter().zip(mask.iter()).map(|(a, k)| a * k).collect(),
        );
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::ConstMul(x, mask), ng))
    }

    /// Joint-axis mixing of `x: [.., m_in, d]` by `w: [m_out, m_in]`
    /// (or `[m_in, m_out]` with `transpose`).
    pub fn mix_joints(&mut self, w: Var, x: Var, transpose: bool) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        if wv.rank() != 2 || xv.rank() < 2 {
            return Err(dim_err!("mix_joints: w {:?}, x {:?}", wv.shape(), xv.shape()));
        }
        let (a, b) = (wv.shape()[0], wv.shape()[1]);
        let (m_out, m_in) = if transpose { (b, a) } else { (a, b) };
        let r = xv.rank();
        if xv.shape()[r - 2] != m_in {
            return Err(dim_err!(
                "mix_joints: joint axis {} does not match weight input extent {m_in}",
                xv.shape()[r - 2]
            ));
        }
        let d = xv.shape()[r - 1];
        let shape = MixShape {
            m_in,
            m_out,
            d,
            transpose,
        };
        let data = kernels::mix_forward(&shape, wv.data(), xv.data());
        let mut out_shape = xv.shape().to_vec();
        out_shape[r - 2] = m_out;
        let ng = self.needs(&[w, x]);
        Ok(self.push(Tensor::from_raw(&out_shape, data), Op::Mix { w, x, shape }, ng))
    }

    /// Per-joint affine map of the channel axis. `theta` is `[M, d_out, d_in]`
    /// for joint-specific projections or `[d_out, d_in]` when shared.
    pub fn joint_linear(&mut self, x: Var, theta: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(theta));
        let r = xv.rank();
        if r < 2 {
            return Err(dim_err!("joint_linear: input {:?} has no joint axis", xv.shape()));
        }
        let (joints, d_in) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let (shared, d_out) = match tv.shape() {
            [o, i] if *i == d_in => (true, *o),
            [m, o, i] if *m == joints && *i == d_in => (false, *o),
            other => {
                return Err(dim_err!(
                    "joint_linear: theta {other:?} incompatible with input {:?}",
                    xv.shape()
                ))
            }
        };
        if let Some(b) = bias {
            if self.value(b).shape() != [d_out] {
                return Err(dim_err!(
                    "joint_linear: bias {:?} but d_out = {d_out}",
                    self.value(b).shape()
                ));
            }
        }
        let shape = LinearShape {
            joints,
            d_in,
            d_out,
            shared,
        };
        let data = kernels::joint_linear_forward(
            &shape,
            xv.data(),
            tv.data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut out_shape = xv.shape().to_vec();
        out_shape[r - 1] = d_out;
        let mut deps = vec![x, theta];
        deps.extend(bias);
        let ng = self.needs(&deps);
        Ok(self.push(
            Tensor::from_raw(&out_shape, data),
            Op::JointLinear {
                x,
                theta,
                bias,
                shape,
            },
            ng,
        ))
    }

    pub(crate) fn aggregate(&mut self, h: Var, w: Var, plan: Arc<AggPlan>) -> Result<Var> {
        let (hv, wv) = (self.value(h), self.value(w));
        let r = hv.rank();
        if r < 3 || hv.shape()[r - 3] != plan.frames || hv.shape()[r - 2] != plan.joints {
            return Err(dim_err!(
                "aggregate: features {:?} do not match graph of {} frames x {} joints",
                hv.shape(),
                plan.frames,
                plan.joints
            ));
        }
        if wv.len() != plan.weight_len() {
            return Err(dim_err!(
                "aggregate: adjacency {:?} has wrong size for {} frames x {} joints",
                wv.shape(),
                plan.frames,
                plan.joints
            ));
        }
        let d = hv.shape()[r - 1];
        let data = kernels::aggregate_forward(&plan, wv.data(), hv.data(), d);
        let out = Tensor::from_raw(hv.shape(), data);
        let ng = self.needs(&[h, w]);
        Ok(self.push(out, Op::Aggregate { h, w, plan, d }, ng))
    }

    /// Batch norm over all axes but the last. With [`BnMode::Batch`] the
    /// observed statistics are returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| dim_err!("batch_norm on a scalar"))?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(dim_err!("batch_norm: affine terms must have {c} channels"));
        }
        let (mean, var, stats) = match mode {
            BnMode::Batch => {
                let (mean, var) = ops::channel_stats(xv.data(), c);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: xv.len() / c,
                };
                (mean, var, Some(stats))
            }
            BnMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err!("batch_norm: running stats must have {c} channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let ones = vec![1.0; c];
        let zeros = vec![0.0; c];
        let xhat = ops::normalize(xv.data(), &mean, &inv_std, &ones, &zeros);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .chunks_exact(c)
            .flat_map(|row| (0..c).map(move |k| row[k] * g[k] + b[k]))
            .collect();
        let out = Tensor::from_raw(xv.shape(), out);
        let ng = self.needs(&[x, gamma, beta]);
        let batch_stats = stats.is_some();
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        );
        Ok((v, stats))
    }

    /// Mean over all leading indices of the Euclidean norm along the last
    /// axis of `pred - target`.
    pub fn mpjpe(&mut self, pred: Var, target: Arc<Tensor>) -> Result<Var> {
        let pv = self.value(pred);
        same_shape(pv, &target, "mpjpe")?;
        let loss = crate::training::loss::mpjpe(pv, &target)?;
        let ng = self.needs(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::Mpjpe { pred, target }, ng))
    }

    /// Backward pass from a scalar output, seeded with 1.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(dim_err!(
                "backward needs a scalar output, got {:?}",
                self.value(out).shape()
            ));
        }
        self.backward_seeded(out, Tensor::filled(self.value(out).shape(), 1.0))
    }

    /// Backward pass with an explicit output cotangent.
    pub fn backward_seeded(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        same_shape(self.value(out), &seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (target, grad) in self.local_grads(node, &g)? {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
            // Interior gradients are not kept; leaves keep theirs.
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        if let Some(bad) = grads.iter().flatten().find(|g| !g.all_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for tensor of shape {:?}",
                bad.shape()
            )));
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, k) => vec![(*a, g.scale(*k))],
            Op::Sum(a) => vec![(*a, Tensor::filled(val(*a).shape(), g.item()))],
            Op::Tanh(a) => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * (1.0 - yv * yv));
                vec![(*a, Tensor::from_raw(y.shape(), data.collect()))]
            }
            Op::Softsign(a) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| gv * softsign_grad_scalar(*xv));
                vec![(*a, Tensor::from_raw(x.shape(), data.collect()))]
            }
            Op::ConstMul(a, mask) => {
                let data = g.data().iter().zip(mask.iter()).map(|(gv, k)| gv * k);
                vec![(*a, Tensor::from_raw(g.shape(), data.collect()))]
            }
            Op::Mix { w, x, shape } => {
                let (dx, dw) = kernels::mix_backward(shape, val(*w).data(), val(*x).data(), g.data());
                vec![
                    (*x, Tensor::from_raw(val(*x).shape(), dx)),
                    (*w, Tensor::from_raw(val(*w).shape(), dw)),
                ]
            }
            Op::JointLinear {
                x,
                theta,
                bias,
                shape,
            } => {
                let (dx, dth, db) =
                    kernels::joint_linear_backward(shape, val(*x).data(), val(*theta).data(), g.data());
                let mut v = vec![
                    (*x, Tensor::from_raw(val(*x).shape(), dx)),
                    (*theta, Tensor::from_raw(val(*theta).shape(), dth)),
                ];
                if let Some(b) = bias {
                    v.push((*b, Tensor::from_raw(val(*b).shape(), db)));
                }
                v
            }
            Op::Aggregate { h, w, plan, d } => {
                let (dh, dw) =
                    kernels::aggregate_backward(plan, val(*w).data(), val(*h).data(), g.data(), *d);
                vec![
                    (*h, Tensor::from_raw(val(*h).shape(), dh)),
                    (*w, Tensor::from_raw(val(*w).shape(), dw)),
                ]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grow, xrow) in g.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for k in 0..c {
                        dgamma[k] += grow[k] * xrow[k];
                        dbeta[k] += grow[k];
                    }
                }
                let mut dx = vec![0.0; g.len()];
                if *batch_stats {
                    let count = (g.len() / c) as f64;
                    // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                    for ((drow, grow), xrow) in dx
                        .chunks_exact_mut(c)
                        .zip(g.data().chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for k in 0..c {
                            let dxhat = grow[k] * gam[k];
                            drow[k] = inv_std[k] / count
                                * (count * dxhat - gam[k] * dbeta[k] - xrow[k] * gam[k] * dgamma[k]);
                        }
                    }
                } else {
                    for (drow, grow) in dx.chunks_exact_mut(c).zip(g.data().chunks_exact(c)) {
                        for k in 0..c {
                            drow[k] = grow[k] * gam[k] * inv_std[k];
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_raw(g.shape(), dx)),
                    (*gamma, Tensor::from_raw(&[c], dgamma)),
                    (*beta, Tensor::from_raw(&[c], dbeta)),
                ]
            }
            Op::Mpjpe { pred, target } => {
                let p = val(*pred);
                let d = *p.shape().last().unwrap();
                let count = (p.len() / d) as f64;
                let k = g.item() / count;
                let mut dp = vec![0.0; p.len()];
                for ((drow, prow), trow) in dp
                    .chunks_exact_mut(d)
                    .zip(p.data().chunks_exact(d))
                    .zip(target.data().chunks_exact(d))
                {
                    let norm = prow
                        .iter()
                        .zip(trow)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    if norm > 0.0 {
                        for q in 0..d {
                            drow[q] = k * (prow[q] - trow[q]) / norm;
                        }
                    }
                }
                vec![(*pred, Tensor::from_raw(p.shape(), dp))]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 5.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let a = tape.tanh(x);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        let g = tape.backward(s).unwrap();
        let gx = g.get(x).unwrap();
        for (k, xv) in [1.0f64, -2.0].iter().enumerate() {
            let t = xv.tanh();
            assert!((gx.data()[k] - (1.0 - t * t + 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }
}
