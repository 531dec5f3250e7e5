use crate::error::{dim_err, Result};
use crate::graph::SkeletonTopology;
use crate::kernels::{self, MixShape};
use crate::tensor::Tensor;

/// Joint-to-part pooling for one coarser level.
///
/// `z` (`[M, M_s]`) is trainable; `zbar` is the 0/1 membership pattern of
/// the initial `z` and stays fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTransform {
    pub level: usize,
    pub z: Tensor,
    pub zbar: Tensor,
}

impl SkeletonTransform {
    /// Mean pooling over each part: `z[j, p] = 1 / |part_p|` for members.
    pub fn init(topo: &SkeletonTopology, level: usize) -> Result<Self> {
        let grouping = topo.grouping(level)?;
        let m = topo.joints();
        let parts = grouping.len();
        let mut z = Tensor::zeros(&[m, parts]);
        for (p, part) in grouping.iter().enumerate() {
            let w = 1.0 / part.len() as f64;
            for &j in part {
                z.set(&[j, p], w);
            }
        }
        let zbar = indicator(&z);
        Ok(Self { level, z, zbar })
    }

    pub fn joints(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn parts(&self) -> usize {
        self.z.shape()[1]
    }
}

/// `1(z != 0)` elementwise.
pub fn indicator(z: &Tensor) -> Tensor {
    z.map(|v| f64::from(u8::from(v != 0.0)))
}

/// Pools `[.., M, D]` features to `[.., M_s, D]` with `Z^T` per frame.
pub fn apply_transform(zt: &SkeletonTransform, f: &Tensor) -> Result<Tensor> {
    pool_joints(&zt.z, f)
}

pub(crate) fn pool_joints(z: &Tensor, f: &Tensor) -> Result<Tensor> {
    let r = f.rank();
    if z.rank() != 2 || r < 2 || f.shape()[r - 2] != z.shape()[0] {
        return Err(dim_err!(
            "skeleton transform {:?} cannot pool features {:?}",
            z.shape(),
            f.shape()
        ));
    }
    let shape = MixShape {
        m_in: z.shape()[0],
        m_out: z.shape()[1],
        d: f.shape()[r - 1],
        transpose: true,
    };
    let mut out_shape = f.shape().to_vec();
    out_shape[r - 2] = shape.m_out;
    Ok(Tensor::from_raw(&out_shape, kernels::mix_forward(&shape, z.data(), f.data())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn four_joint() -> SkeletonTopology {
        SkeletonTopology::chain(4, &[2]).unwrap()
    }

    #[test]
    fn init_columns_and_indicator() {
        let zt = SkeletonTransform::init(&four_joint(), 1).unwrap();
        let col = |t: &Tensor, p: usize| (0..4).map(|j| t.get(&[j, p])).collect::<Vec<_>>();
        assert_eq!(col(&zt.z, 0), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(col(&zt.z, 1), vec![0.0, 0.0, 0.5, 0.5]);
        assert_eq!(col(&zt.zbar, 0), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(col(&zt.zbar, 1), vec![0.0, 0.0, 1.0, 1.0]);
        assert!(SkeletonTransform::init(&four_joint(), 2).is_err());
    }

    #[test]
    fn h36m_shapes() {
        let topo = SkeletonTopology::h36m(&[11, 2]).unwrap();
        assert_eq!(SkeletonTransform::init(&topo, 1).unwrap().z.shape(), &[22, 11]);
        assert_eq!(SkeletonTransform::init(&topo, 2).unwrap().z.shape(), &[22, 2]);
    }

    #[test]
    fn constant_features_pool_to_constant() {
        let topo = SkeletonTopology::h36m(&[11, 2]).unwrap();
        let zt = SkeletonTransform::init(&topo, 1).unwrap();
        let f = Tensor::filled(&[3, 22, 2], 1.25);
        let out = apply_transform(&zt, &f).unwrap();
        assert_eq!(out.shape(), &[3, 11, 2]);
        assert!(out.data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn two_to_one_is_mean() {
        let topo = SkeletonTopology::chain(2, &[1]).unwrap();
        let zt = SkeletonTransform::init(&topo, 1).unwrap();
        let f = Tensor::new(&[1, 2, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(apply_transform(&zt, &f).unwrap().data(), &[2.0]);
    }

    #[test]
    fn perturbed_z_matches_loops() {
        let mut zt = SkeletonTransform::init(&four_joint(), 1).unwrap();
        let mut rng = SeededRng::new(9);
        zt.z = zt.z.add(&rng.uniform_tensor(&[4, 2], -0.1, 0.1)).unwrap();
        let f = rng.uniform_tensor(&[3, 4, 5], -1.0, 1.0);
        let out = apply_transform(&zt, &f).unwrap();
        for i in 0..3 {
            for p in 0..2 {
                for k in 0..5 {
                    let want: f64 = (0..4).map(|j| zt.z.get(&[j, p]) * f.get(&[i, j, k])).sum();
                    assert!((out.get(&[i, p, k]) - want).abs() < 1e-14);
                }
            }
        }
        assert!(apply_transform(&zt, &Tensor::zeros(&[3, 5, 2])).is_err());
    }

    #[test]
    fn membership_rows_sum_to_one() {
        let topo = SkeletonTopology::h36m(&[11, 2]).unwrap();
        for level in 1..=2 {
            let zt = SkeletonTransform::init(&topo, level).unwrap();
            let prod = crate::tensor::contract(&zt.zbar, &zt.z, &[(1, 1)]).unwrap();
            assert_eq!(prod.shape(), &[22, 22]);
            for j in 0..22 {
                let row: f64 = (0..22).map(|k| prod.get(&[j, k])).sum();
                assert!((row - 1.0).abs() < 1e-12, "level {level} row {j}: {row}");
            }
        }
    }
}
