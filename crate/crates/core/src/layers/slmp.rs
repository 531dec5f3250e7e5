use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::graph::Adjacency4D;
use crate::kernels::{AggPlan, PhiMode};
use crate::ops::{self, BatchNormState};
use crate::rng::SeededRng;
use crate::tape::{BatchStats, BnMode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub(crate) fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(v),
            Activation::Identity => v,
        }
    }
}

/// Parameters of one single-level message passing block.
#[derive(Debug, Clone)]
pub struct LevelParams {
    pub adjacency: Adjacency4D,
    /// `[M_s, d_out, d_in]` joint-specific, or `[d_out, d_in]` shared.
    pub theta: Tensor,
    pub bias: Tensor,
    /// `None` skips batch norm and dropout (the decode block).
    pub bn: Option<BatchNormState>,
    pub phi: PhiMode,
    pub dropout: f64,
    pub activation: Activation,
}

impl LevelParams {
    /// Hidden-block defaults: Xavier-uniform joint-specific projections,
    /// zero bias, batch norm, tanh.
    pub fn new(adjacency: Adjacency4D, d_in: usize, d_out: usize, phi: PhiMode, rng: &mut SeededRng) -> Self {
        let m = adjacency.joints();
        Self {
            adjacency,
            theta: xavier(&[m, d_out, d_in], d_in, d_out, rng),
            bias: Tensor::zeros(&[d_out]),
            bn: Some(BatchNormState::new(d_out)),
            phi,
            dropout: ops::DEFAULT_DROPOUT,
            activation: Activation::Tanh,
        }
    }

    pub fn d_out(&self) -> usize {
        self.bias.len()
    }

    pub fn d_in(&self) -> usize {
        *self.theta.shape().last().unwrap()
    }
}

/// Uniform in `±sqrt(6 / (d_in + d_out))`.
pub(crate) fn xavier(shape: &[usize], d_in: usize, d_out: usize, rng: &mut SeededRng) -> Tensor {
    let bound = (6.0 / (d_in + d_out) as f64).sqrt();
    rng.uniform_tensor(shape, -bound, bound)
}

/// Tape handles of one SLMP block's parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SlmpVars {
    pub adj: Var,
    pub theta: Var,
    pub bias: Var,
    /// `(gamma, beta)`
    pub bn: Option<(Var, Var)>,
}

/// Non-trainable settings of one SLMP block on the tape.
pub(crate) struct SlmpTape<'a> {
    pub plan: Arc<AggPlan>,
    pub activation: Activation,
    /// `(running_mean, running_var, eps, dropout)` when the block normalizes.
    pub norm: Option<(&'a [f64], &'a [f64], f64, f64)>,
}

/// Aggregate, joint-specific update, then batch norm, dropout and the
/// activation. Training mode (`rng` present) normalizes with batch
/// statistics and returns them.
pub(crate) fn slmp_tape(
    tape: &mut Tape,
    h: Var,
    vars: SlmpVars,
    spec: &SlmpTape<'_>,
    rng: Option<&mut SeededRng>,
) -> Result<(Var, Option<BatchStats>)> {
    let m = tape.aggregate(h, vars.adj, spec.plan.clone())?;
    let s = tape.add(h, m)?;
    update_tape(tape, s, vars, spec.norm, spec.activation, rng)
}

/// `sigma(dropout(BN(Theta_j s + b)))`, the shared tail of every SLMP form.
pub(crate) fn update_tape(
    tape: &mut Tape,
    s: Var,
    vars: SlmpVars,
    norm: Option<(&[f64], &[f64], f64, f64)>,
    activation: Activation,
    rng: Option<&mut SeededRng>,
) -> Result<(Var, Option<BatchStats>)> {
    let mut out = tape.joint_linear(s, vars.theta, Some(vars.bias))?;
    let mut stats = None;
    if let Some((mean, var, eps, rate)) = norm {
        let (gamma, beta) = vars
            .bn
            .ok_or_else(|| Error::Config("normalizing block without affine terms".into()))?;
        match rng {
            Some(rng) => {
                let (y, st) = tape.batch_norm(out, gamma, beta, BnMode::Batch, eps)?;
                out = tape.dropout(y, rate, rng)?;
                stats = st;
            }
            None => {
                out = tape.batch_norm(out, gamma, beta, BnMode::Running { mean, var }, eps)?.0;
            }
        }
    }
    Ok((activation.apply(tape, out), stats))
}

/// Cross-level message `Zbar A H Theta` per frame; `theta` is stored as
/// `[d, d_s]` and omitted when the dimensions already agree.
pub(crate) fn clmp_tape(
    tape: &mut Tape,
    h_s: Var,
    a: Var,
    theta: Option<Var>,
    zbar: Var,
) -> Result<Var> {
    let mixed = tape.mix_joints(a, h_s, false)?;
    let projected = match theta {
        Some(th) => tape.joint_linear(mixed, th, None)?,
        None => mixed,
    };
    tape.mix_joints(zbar, projected, false)
}

pub(crate) fn bind_slmp(tape: &mut Tape, p: &LevelParams) -> SlmpVars {
    SlmpVars {
        adj: tape.param(p.adjacency.weights().clone()),
        theta: tape.param(p.theta.clone()),
        bias: tape.param(p.bias.clone()),
        bn: p.bn.as_ref().map(|bn| {
            (
                tape.param(Tensor::from_raw(&[bn.channels()], bn.gamma.clone())),
                tape.param(Tensor::from_raw(&[bn.channels()], bn.beta.clone())),
            )
        }),
    }
}

pub(crate) fn slmp_spec(p: &LevelParams) -> SlmpTape<'_> {
    SlmpTape {
        plan: Arc::new(p.adjacency.plan(p.phi, p.d_out(), None)),
        activation: p.activation,
        norm: p
            .bn
            .as_ref()
            .map(|bn| (&bn.running_mean[..], &bn.running_var[..], bn.eps, p.dropout)),
    }
}

fn absorb_stats(p: &mut LevelParams, stats: Option<BatchStats>) {
    if let (Some(bn), Some(st)) = (p.bn.as_mut(), stats) {
        ops::update_running(
            &mut bn.running_mean,
            &mut bn.running_var,
            &st.mean,
            &st.var,
            st.count,
            bn.momentum,
        );
    }
}

fn check_batch(h: &Tensor, p: &LevelParams) -> Result<()> {
    let want = [p.adjacency.frames(), p.adjacency.joints(), p.d_in()];
    if h.rank() != 4 || h.shape()[1..] != want {
        return Err(dim_err!(
            "SLMP expects [N, {}, {}, {}], got {:?}",
            want[0],
            want[1],
            want[2],
            h.shape()
        ));
    }
    Ok(())
}

/// Eager single-level message passing over a batch `[N, T, M_s, d_in]`.
/// Training mode updates the running statistics in `p`.
pub fn slmp_forward(
    h: &Tensor,
    p: &mut LevelParams,
    training: bool,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    check_batch(h, p)?;
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let vars = bind_slmp(&mut tape, p);
    let (out, stats) = {
        let spec = slmp_spec(p);
        slmp_tape(&mut tape, hv, vars, &spec, training.then_some(rng))?
    };
    absorb_stats(p, stats);
    Ok(tape.value(out).clone())
}

/// Parameters of one cross-level (level `s` to level 0) block.
#[derive(Debug, Clone)]
pub struct CrossLevelParams {
    /// `[M_s, M_s]`, initialized to the identity.
    pub a_s: Tensor,
    /// `[d, d_s]`; present only when the level widths differ.
    pub theta_s: Option<Tensor>,
    /// `[M, M_s]` frozen membership indicator.
    pub zbar: Tensor,
}

impl CrossLevelParams {
    pub fn new(zbar: Tensor, d_s: usize, d: usize, rng: &mut SeededRng) -> Self {
        let ms = zbar.shape()[1];
        Self {
            a_s: Tensor::eye(ms),
            theta_s: (d_s != d).then(|| xavier(&[d, d_s], d_s, d, rng)),
            zbar,
        }
    }
}

/// Eager cross-level message passing, `[N, T, M_s, d_s]` to `[N, T, M, d]`.
pub fn clmp_forward(h_s: &Tensor, cp: &CrossLevelParams) -> Result<Tensor> {
    let ms = cp.zbar.shape()[1];
    if h_s.rank() != 4 || h_s.shape()[2] != ms || cp.a_s.shape() != [ms, ms] {
        return Err(dim_err!(
            "CLMP with {ms} parts cannot take features {:?} (A_s {:?})",
            h_s.shape(),
            cp.a_s.shape()
        ));
    }
    let mut tape = Tape::new();
    let h = tape.constant(h_s.clone());
    let a = tape.constant(cp.a_s.clone());
    let th = cp.theta_s.as_ref().map(|t| tape.constant(t.clone()));
    let z = tape.constant(cp.zbar.clone());
    let out = clmp_tape(&mut tape, h, a, th, z)?;
    Ok(tape.value(out).clone())
}

/// One DD-GC block over all levels: SLMP at every level, then level 0 is
/// replaced by its own SLMP output plus every coarser level's cross-level
/// message. `slmps` has `S + 1` entries and `clmps` has `S` (levels 1..=S).
pub fn ddgc_block_forward(
    h_levels: &[Tensor],
    slmps: &mut [LevelParams],
    clmps: &[CrossLevelParams],
    training: bool,
    rng: &mut SeededRng,
) -> Result<Vec<Tensor>> {
    if h_levels.is_empty() || slmps.len() != h_levels.len() || clmps.len() + 1 != h_levels.len() {
        return Err(dim_err!(
            "DD-GC block needs S+1 inputs and SLMPs and S cross-level blocks; got {}, {}, {}",
            h_levels.len(),
            slmps.len(),
            clmps.len()
        ));
    }
    let mut outs = Vec::with_capacity(h_levels.len());
    for (h, p) in h_levels.iter().zip(slmps.iter_mut()) {
        outs.push(slmp_forward(h, p, training, rng)?);
    }
    let mut fused = outs[0].clone();
    for (s, cp) in clmps.iter().enumerate() {
        fused = fused.add(&clmp_forward(&outs[s + 1], cp)?)?;
    }
    outs[0] = fused;
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{SkeletonTopology, SkeletonTransform, WeightInit};

    #[test]
    fn full_scale_level_shapes() {
        let topo = SkeletonTopology::h36m(&[11, 2]).unwrap();
        let mut rng = SeededRng::new(0);
        let x = rng.uniform_tensor(&[16, 50, 22, 3], -1.0, 1.0);
        let adj = Adjacency4D::build(&topo, 50, WeightInit::RowNormalized).unwrap();
        let mut p = LevelParams::new(adj, 3, 128, PhiMode::Phi1, &mut rng);
        let y = slmp_forward(&x, &mut p, true, &mut rng).unwrap();
        assert_eq!(y.shape(), &[16, 50, 22, 128]);

        let coarse = SkeletonTopology::chain(2, &[]).unwrap();
        let adj2 = Adjacency4D::build(&coarse, 50, WeightInit::RowNormalized).unwrap();
        assert_eq!(adj2.shape(), [50, 2, 50, 2]);
        let mut p2 = LevelParams::new(adj2, 3, 128, PhiMode::Phi1, &mut rng);
        let x2 = rng.uniform_tensor(&[16, 50, 2, 3], -1.0, 1.0);
        assert_eq!(slmp_forward(&x2, &mut p2, false, &mut rng).unwrap().shape(), &[16, 50, 2, 128]);
    }

    #[test]
    fn clmp_level1_shape_and_copy() {
        let topo = SkeletonTopology::h36m(&[11, 2]).unwrap();
        let zt = SkeletonTransform::init(&topo, 1).unwrap();
        let mut rng = SeededRng::new(1);
        let cp = CrossLevelParams::new(zt.zbar.clone(), 128, 128, &mut rng);
        assert!(cp.theta_s.is_none());
        let h = rng.uniform_tensor(&[16, 50, 11, 128], -1.0, 1.0);
        assert_eq!(clmp_forward(&h, &cp).unwrap().shape(), &[16, 50, 22, 128]);

        let pair = SkeletonTopology::chain(2, &[1]).unwrap();
        let zt = SkeletonTransform::init(&pair, 1).unwrap();
        let cp = CrossLevelParams::new(zt.zbar.clone(), 3, 3, &mut rng);
        let h = rng.uniform_tensor(&[2, 4, 1, 3], -1.0, 1.0);
        let out = clmp_forward(&h, &cp).unwrap();
        for n in 0..2 {
            for i in 0..4 {
                for j in 0..2 {
                    for k in 0..3 {
                        assert_eq!(out.get(&[n, i, j, k]), h.get(&[n, i, 0, k]));
                    }
                }
            }
        }
    }

    #[test]
    fn clmp_projects_on_width_mismatch() {
        let topo = SkeletonTopology::chain(4, &[2]).unwrap();
        let zt = SkeletonTransform::init(&topo, 1).unwrap();
        let mut rng = SeededRng::new(4);
        let cp = CrossLevelParams::new(zt.zbar, 5, 3, &mut rng);
        assert_eq!(cp.theta_s.as_ref().unwrap().shape(), &[3, 5]);
        let h = rng.uniform_tensor(&[1, 2, 2, 5], -1.0, 1.0);
        assert_eq!(clmp_forward(&h, &cp).unwrap().shape(), &[1, 2, 4, 3]);
    }

    #[test]
    fn single_level_block_is_plain_slmp() {
        let topo = SkeletonTopology::chain(3, &[]).unwrap();
        let mut rng = SeededRng::new(6);
        let adj = Adjacency4D::build(&topo, 2, WeightInit::RowNormalized).unwrap();
        let p = LevelParams::new(adj, 4, 4, PhiMode::Phi2, &mut rng);
        let h = rng.uniform_tensor(&[2, 2, 3, 4], -1.0, 1.0);
        let mut a = [p.clone()];
        let mut b = p;
        let blk = ddgc_block_forward(&[h.clone()], &mut a, &[], false, &mut rng).unwrap();
        let direct = slmp_forward(&h, &mut b, false, &mut rng).unwrap();
        assert_eq!(blk[0], direct);
    }

    #[test]
    fn zeroed_cross_level_leaves_level0_alone() {
        let topo = SkeletonTopology::chain(4, &[2, 1]).unwrap();
        let mut rng = SeededRng::new(8);
        let mut slmps = Vec::new();
        let mut hs = Vec::new();
        for (s, &ms) in topo.level_sizes().iter().enumerate() {
            let t = SkeletonTopology::chain(ms, &[]).unwrap();
            let adj = Adjacency4D::build(&t, 3, WeightInit::RowNormalized).unwrap();
            slmps.push(LevelParams::new(adj, 4, 4, PhiMode::Phi1, &mut rng));
            hs.push(rng.uniform_tensor(&[2, 3, ms, 4], -1.0, 1.0));
            let _ = s;
        }
        let clmps: Vec<_> = (1..=2)
            .map(|s| {
                let mut cp = CrossLevelParams::new(
                    SkeletonTransform::init(&topo, s).unwrap().zbar,
                    4,
                    4,
                    &mut rng,
                );
                cp.a_s = Tensor::zeros(cp.a_s.shape());
                cp
            })
            .collect();
        let mut own = slmps[0].clone();
        let out = ddgc_block_forward(&hs, &mut slmps, &clmps, false, &mut rng).unwrap();
        let alone = slmp_forward(&hs[0], &mut own, false, &mut rng).unwrap();
        assert_eq!(out[0], alone);
    }

    #[test]
    fn training_updates_running_stats_eval_does_not() {
        let topo = SkeletonTopology::chain(2, &[]).unwrap();
        let mut rng = SeededRng::new(3);
        let adj = Adjacency4D::build(&topo, 2, WeightInit::RowNormalized).unwrap();
        let mut p = LevelParams::new(adj, 2, 3, PhiMode::Phi1, &mut rng);
        let h = rng.uniform_tensor(&[2, 2, 2, 2], -1.0, 1.0);
        let before = p.bn.clone();
        slmp_forward(&h, &mut p, false, &mut rng).unwrap();
        assert_eq!(p.bn, before);
        slmp_forward(&h, &mut p, true, &mut rng).unwrap();
        assert_ne!(p.bn, before);
        assert!(slmp_forward(&Tensor::zeros(&[2, 2, 2, 5]), &mut p, true, &mut rng).is_err());
    }
}
