use crate::error::{dim_err, Result};
use crate::graph::{subgraph_mask, Adjacency4D, SubgraphKind, SubgraphMask};
use crate::kernels::{self, PhiMode};
use crate::layers::Activation;
use crate::tape::Tape;
use crate::tensor::{softsign_scalar, Tensor};

/// Materializes the data-dependent weights `Phi[i, j, m, n]` for one sample
/// `h: [T, M, d]`.
pub fn dynamic_weights(h: &Tensor, mode: PhiMode) -> Result<Tensor> {
    let (t, m, d) = match h.shape() {
        &[t, m, d] => (t, m, d),
        other => return Err(dim_err!("dynamic_weights expects [T, M, d], got {other:?}")),
    };
    let p = t * m;
    let rows: Vec<&[f64]> = h.data().chunks_exact(d).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / d as f64).collect();
    let mut out = vec![0.0; p * p];
    for r in 0..p {
        for c in 0..p {
            out[r * p + c] = match mode {
                PhiMode::Off => 0.0,
                PhiMode::Phi1 => softsign_scalar(means[r] - means[c]),
                PhiMode::Phi2 => {
                    let ip: f64 = rows[r].iter().zip(rows[c]).map(|(a, b)| a * b).sum();
                    softsign_scalar(-ip)
                }
            };
        }
    }
    Ok(Tensor::from_raw(&[t, m, t, m], out))
}

fn check_features(h: &Tensor, adj: &Adjacency4D) -> Result<()> {
    let r = h.rank();
    if !(r == 3 || r == 4) || h.shape()[r - 3] != adj.frames() || h.shape()[r - 2] != adj.joints() {
        return Err(dim_err!(
            "features {:?} do not fit an adjacency over {} frames x {} joints",
            h.shape(),
            adj.frames(),
            adj.joints()
        ));
    }
    Ok(())
}

/// Messages for `h: [T, M, d]` or `[N, T, M, d]`:
/// `m_ij = sum_mn (A_ijmn / |N(v_ij)| + phi_ijmn / sqrt(d_out)) h_mn`.
pub fn aggregate(h: &Tensor, adj: &Adjacency4D, phi: PhiMode, d_out: usize) -> Result<Tensor> {
    check_features(h, adj)?;
    let plan = adj.plan(phi, d_out, None);
    let d = *h.shape().last().unwrap();
    Ok(Tensor::from_raw(
        h.shape(),
        kernels::aggregate_forward(&plan, adj.weights().data(), h.data(), d),
    ))
}

/// [`aggregate`] restricted to a subgraph: both the shared weights and the
/// dynamic term are zeroed off the mask, and degrees come from the masked
/// support.
pub fn aggregate_masked(
    h: &Tensor,
    adj: &Adjacency4D,
    phi: PhiMode,
    d_out: usize,
    mask: &SubgraphMask,
) -> Result<Tensor> {
    check_features(h, adj)?;
    let masked = adj.masked(mask)?;
    let plan = masked.plan(phi, d_out, Some(mask));
    let d = *h.shape().last().unwrap();
    Ok(Tensor::from_raw(
        h.shape(),
        kernels::aggregate_forward(&plan, masked.weights().data(), h.data(), d),
    ))
}

/// `sigma(Theta_j (h + m) + b)` per node. `theta` is `[M, d_out, d_in]`, or
/// `[d_out, d_in]` for one projection shared by all joints.
pub fn update(
    h: &Tensor,
    m: &Tensor,
    theta: &Tensor,
    bias: &Tensor,
    activation: Activation,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let mv = tape.constant(m.clone());
    let th = tape.constant(theta.clone());
    let b = tape.constant(bias.clone());
    let s = tape.add(hv, mv)?;
    let lin = tape.joint_linear(s, th, Some(b))?;
    let out = activation.apply(&mut tape, lin);
    Ok(tape.value(out).clone())
}

/// Static graph convolution on a pose or trajectory subgraph: no dynamic
/// term, adjacency masked to the subgraph, one projection for every node.
pub fn static_reduction_forward(
    h: &Tensor,
    adj: &Adjacency4D,
    kind: SubgraphKind,
    theta: &Tensor,
    bias: &Tensor,
    activation: Activation,
) -> Result<Tensor> {
    check_features(h, adj)?;
    let mask = subgraph_mask(kind, adj.frames(), adj.joints());
    let d_out = theta.shape().first().copied().unwrap_or(1);
    let m = aggregate_masked(h, adj, PhiMode::Off, d_out, &mask)?;
    update(h, &m, theta, bias, activation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{SkeletonTopology, WeightInit};
    use crate::rng::SeededRng;

    fn random_adj(rng: &mut SeededRng, t: usize, m: usize) -> Adjacency4D {
        let topo = SkeletonTopology::chain(m, &[]).unwrap();
        let mut a = Adjacency4D::build(&topo, t, WeightInit::RowNormalized).unwrap();
        a.set_weights(rng.uniform_tensor(&[t, m, t, m], -1.0, 1.0)).unwrap();
        a
    }

    #[test]
    fn phi_examples() {
        let h = Tensor::new(&[1, 2, 2], vec![2.0, 2.0, 0.0, 0.0]).unwrap();
        let phi = dynamic_weights(&h, PhiMode::Phi1).unwrap();
        assert!((phi.get(&[0, 0, 0, 1]) - 2.0 / 3.0).abs() < 1e-15);
        let h = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let phi = dynamic_weights(&h, PhiMode::Phi2).unwrap();
        assert_eq!(phi.get(&[0, 0, 0, 1]), -0.5);
    }

    #[test]
    fn phi1_antisymmetric() {
        let mut rng = SeededRng::new(17);
        let h = rng.uniform_tensor(&[3, 4, 5], -2.0, 2.0);
        let phi = dynamic_weights(&h, PhiMode::Phi1).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                for a in 0..3 {
                    for b in 0..4 {
                        assert_eq!(phi.get(&[i, j, a, b]), -phi.get(&[a, b, i, j]));
                    }
                }
            }
        }
    }

    #[test]
    fn single_self_loop_passes_features() {
        let topo = SkeletonTopology::new(1, vec![], vec![]).unwrap();
        let a = Adjacency4D::build(&topo, 1, WeightInit::Binary).unwrap();
        let h = Tensor::new(&[1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(aggregate(&h, &a, PhiMode::Off, 3).unwrap(), h);
    }

    #[test]
    fn zero_weights_zero_messages() {
        let topo = SkeletonTopology::chain(3, &[]).unwrap();
        let mut a = Adjacency4D::build(&topo, 2, WeightInit::Binary).unwrap();
        a.set_weights(Tensor::zeros(&[2, 3, 2, 3])).unwrap();
        let mut rng = SeededRng::new(1);
        let h = rng.uniform_tensor(&[2, 3, 4], -1.0, 1.0);
        assert!(aggregate(&h, &a, PhiMode::Off, 4).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dynamic_term_is_added_with_scale() {
        let mut rng = SeededRng::new(23);
        let a = random_adj(&mut rng, 2, 3);
        let h = rng.uniform_tensor(&[2, 3, 2], -1.0, 1.0);
        let with = aggregate(&h, &a, PhiMode::Phi2, 4).unwrap();
        let without = aggregate(&h, &a, PhiMode::Off, 4).unwrap();
        let phi = dynamic_weights(&h, PhiMode::Phi2).unwrap();
        let extra = crate::tensor::contract(&phi.scale(0.5), &h, &[(2, 0), (3, 1)]).unwrap();
        assert!(with.max_abs_diff(&without.add(&extra).unwrap()) < 1e-13);
    }

    #[test]
    fn update_identity_and_bias_only() {
        let mut rng = SeededRng::new(2);
        let h = rng.uniform_tensor(&[2, 3, 2], -1.0, 1.0);
        let m = Tensor::zeros(&[2, 3, 2]);
        let eye = Tensor::from_fn(&[3, 2, 2], |i| f64::from(u8::from(i[1] == i[2])));
        let out = update(&h, &m, &eye, &Tensor::zeros(&[2]), Activation::Identity).unwrap();
        assert_eq!(out, h);

        let b = Tensor::new(&[2], vec![0.3, -1.2]).unwrap();
        let out = update(&h, &m, &Tensor::zeros(&[3, 2, 2]), &b, Activation::Tanh).unwrap();
        for row in out.data().chunks(2) {
            assert_eq!(row, &[0.3f64.tanh(), (-1.2f64).tanh()]);
        }
        assert!(update(&h, &m, &Tensor::zeros(&[3, 2, 5]), &b, Activation::Tanh).is_err());
    }
}
