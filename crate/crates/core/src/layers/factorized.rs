use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::graph::Adjacency4D;
use crate::kernels::{AggPlan, Layout, PhiMode};
use crate::layers::slmp::{update_tape, LevelParams, SlmpVars};
use crate::layers::Activation;
use crate::ops::BatchNormState;
use crate::rng::SeededRng;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

/// The pose (within-frame) and trajectory (within-joint) slices of a dense
/// adjacency, each with degrees counted on its own support.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedAdjacency {
    /// `[T, M, M]`: `pose[i, j, n] = A[i, j, i, n]`.
    pub pose: Tensor,
    /// `[M, T, T]`: `trajectory[j, i, m] = A[i, j, m, j]`.
    pub trajectory: Tensor,
    /// Per node `frame * M + joint`.
    pub pose_degree: Vec<usize>,
    pub traj_degree: Vec<usize>,
}

impl FactorizedAdjacency {
    pub fn from_4d(a: &Adjacency4D) -> Self {
        let (t, m) = (a.frames(), a.joints());
        let w = a.weights();
        let pose = Tensor::from_fn(&[t, m, m], |ix| w.get(&[ix[0], ix[1], ix[0], ix[2]]));
        let trajectory = Tensor::from_fn(&[m, t, t], |ix| w.get(&[ix[1], ix[0], ix[2], ix[0]]));
        let mut pose_degree = vec![0; t * m];
        let mut traj_degree = vec![0; t * m];
        for i in 0..t {
            for j in 0..m {
                pose_degree[i * m + j] = (0..m).filter(|&n| a.is_edge(i, j, i, n)).count();
                traj_degree[i * m + j] = (0..t).filter(|&f| a.is_edge(i, j, f, j)).count();
            }
        }
        Self {
            pose,
            trajectory,
            pose_degree,
            traj_degree,
        }
    }

    pub fn frames(&self) -> usize {
        self.pose.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.pose.shape()[1]
    }

    pub(crate) fn plans(&self, phi: PhiMode, d_out: usize) -> Result<(AggPlan, AggPlan)> {
        let plan = |layout, degree: &[usize]| -> Result<AggPlan> {
            if let Some(r) = degree.iter().position(|&d| d == 0) {
                return Err(Error::Topology(format!(
                    "node {r} has no neighbours in the {layout:?} subgraph"
                )));
            }
            Ok(AggPlan {
                frames: self.frames(),
                joints: self.joints(),
                layout,
                inv_degree: degree.iter().map(|&d| 1.0 / d as f64).collect(),
                mask: None,
                phi,
                scale: 1.0 / (d_out as f64).sqrt(),
            })
        };
        Ok((
            plan(Layout::Pose, &self.pose_degree)?,
            plan(Layout::Trajectory, &self.traj_degree)?,
        ))
    }
}

/// SLMP parameters with the adjacency split into pose and trajectory parts.
#[derive(Debug, Clone)]
pub struct FactorizedParams {
    pub adjacency: FactorizedAdjacency,
    pub theta: Tensor,
    pub bias: Tensor,
    pub bn: Option<BatchNormState>,
    pub phi: PhiMode,
    pub dropout: f64,
    pub activation: Activation,
}

impl FactorizedParams {
    /// Factorizes a dense block, keeping its projection and normalization.
    pub fn from_level(p: &LevelParams) -> Self {
        Self {
            adjacency: FactorizedAdjacency::from_4d(&p.adjacency),
            theta: p.theta.clone(),
            bias: p.bias.clone(),
            bn: p.bn.clone(),
            phi: p.phi,
            dropout: p.dropout,
            activation: p.activation,
        }
    }

    pub fn d_out(&self) -> usize {
        self.bias.len()
    }
}

/// Tape form: `g1 = h + pose(h)`, `g2 = g1 + traj(g1)`, then the usual update.
pub(crate) fn factorized_tape(
    tape: &mut Tape,
    h: Var,
    pose_w: Var,
    traj_w: Var,
    vars: SlmpVars,
    p: &FactorizedParams,
    rng: Option<&mut SeededRng>,
) -> Result<(Var, Option<BatchStats>)> {
    let (pose, traj) = p.adjacency.plans(p.phi, p.d_out())?;
    let m1 = tape.aggregate(h, pose_w, Arc::new(pose))?;
    let g1 = tape.add(h, m1)?;
    let m2 = tape.aggregate(g1, traj_w, Arc::new(traj))?;
    let g2 = tape.add(g1, m2)?;
    let norm = p
        .bn
        .as_ref()
        .map(|bn| (&bn.running_mean[..], &bn.running_var[..], bn.eps, p.dropout));
    update_tape(tape, g2, vars, norm, p.activation, rng)
}

/// Eager factorized SLMP over `[N, T, M, d_in]`.
pub fn slmp_factorized_forward(
    h: &Tensor,
    p: &mut FactorizedParams,
    training: bool,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let (t, m) = (p.adjacency.frames(), p.adjacency.joints());
    if h.rank() != 4 || h.shape()[1] != t || h.shape()[2] != m {
        return Err(dim_err!(
            "factorized SLMP over {t} frames x {m} joints got features {:?}",
            h.shape()
        ));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let pose_w = tape.param(p.adjacency.pose.clone());
    let traj_w = tape.param(p.adjacency.trajectory.clone());
    let vars = SlmpVars {
        adj: pose_w,
        theta: tape.param(p.theta.clone()),
        bias: tape.param(p.bias.clone()),
        bn: p.bn.as_ref().map(|bn| {
            (
                tape.param(Tensor::from_raw(&[bn.channels()], bn.gamma.clone())),
                tape.param(Tensor::from_raw(&[bn.channels()], bn.beta.clone())),
            )
        }),
    };
    let (out, stats) = factorized_tape(&mut tape, hv, pose_w, traj_w, vars, p, training.then_some(rng))?;
    if let (Some(bn), Some(st)) = (p.bn.as_mut(), stats) {
        crate::ops::update_running(
            &mut bn.running_mean,
            &mut bn.running_var,
            &st.mean,
            &st.var,
            st.count,
            bn.momentum,
        );
    }
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{subgraph_mask, SkeletonTopology, SubgraphKind, WeightInit};
    use crate::layers::{aggregate_masked, update};

    fn setup(seed: u64) -> (LevelParams, Tensor, SeededRng) {
        let mut rng = SeededRng::new(seed);
        let topo = SkeletonTopology::chain(4, &[]).unwrap();
        let mut adj = Adjacency4D::build(&topo, 3, WeightInit::RowNormalized).unwrap();
        adj.set_weights(rng.uniform_tensor(&[3, 4, 3, 4], -1.0, 1.0)).unwrap();
        let mut p = LevelParams::new(adj, 2, 5, PhiMode::Phi2, &mut rng);
        p.bn = None;
        let h = rng.uniform_tensor(&[2, 3, 4, 2], -1.0, 1.0);
        (p, h, rng)
    }

    #[test]
    fn slices_and_degrees() {
        let (p, _, _) = setup(1);
        let f = FactorizedAdjacency::from_4d(&p.adjacency);
        assert_eq!(f.pose.shape(), &[3, 4, 4]);
        assert_eq!(f.trajectory.shape(), &[4, 3, 3]);
        assert_eq!(f.pose.get(&[2, 1, 3]), p.adjacency.weights().get(&[2, 1, 2, 3]));
        assert_eq!(f.trajectory.get(&[1, 0, 2]), p.adjacency.weights().get(&[0, 1, 2, 1]));
        // chain ends have one bone, inner joints two; every frame pair is linked
        assert_eq!(f.pose_degree[..4], [2, 3, 3, 2]);
        assert!(f.traj_degree.iter().all(|&d| d == 3));
    }

    #[test]
    fn matches_two_masked_dense_steps() {
        for phi in [PhiMode::Off, PhiMode::Phi1, PhiMode::Phi2] {
            let (mut p, h, mut rng) = setup(5);
            p.phi = phi;
            let mut fp = FactorizedParams::from_level(&p);
            let fast = slmp_factorized_forward(&h, &mut fp, false, &mut rng).unwrap();

            let pose = subgraph_mask(SubgraphKind::Pose, 3, 4);
            let traj = subgraph_mask(SubgraphKind::Trajectory, 3, 4);
            let g1 = h.add(&aggregate_masked(&h, &p.adjacency, phi, 5, &pose).unwrap()).unwrap();
            let g2 = g1.add(&aggregate_masked(&g1, &p.adjacency, phi, 5, &traj).unwrap()).unwrap();
            let slow = update(&g2, &Tensor::zeros(g2.shape()), &p.theta, &p.bias, Activation::Tanh).unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{phi:?}");
        }
    }

    #[test]
    fn rejects_wrong_shape() {
        let (p, _, mut rng) = setup(2);
        let mut fp = FactorizedParams::from_level(&p);
        assert!(slmp_factorized_forward(&Tensor::zeros(&[1, 2, 4, 2]), &mut fp, false, &mut rng).is_err());
    }
}
