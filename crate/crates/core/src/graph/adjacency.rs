use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::SkeletonTopology;
use crate::kernels::{AggPlan, Layout, PhiMode};
use crate::tensor::Tensor;

/// Initial values placed on support edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// `1 / degree` on each row's support.
    #[default]
    RowNormalized,
    /// `1` on every support edge.
    Binary,
}

/// Dense spatio-temporal adjacency over `T x M` nodes, indexed
/// `[frame, joint, frame, joint]` with the target node first.
///
/// `support` is the initial edge set and fixes each node's degree; the
/// weights themselves are dense and may become nonzero anywhere in training.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency4D {
    frames: usize,
    joints: usize,
    weights: Tensor,
    support: Vec<bool>,
    degree: Vec<usize>,
}

fn node(frame: usize, joint: usize, joints: usize) -> usize {
    frame * joints + joint
}

/// Every (target, source) support edge implied by the skeleton: self-loops,
/// same joint across all frames, and bones both within and across frames.
fn skeleton_support(topo: &SkeletonTopology, frames: usize) -> Vec<bool> {
    let m = topo.joints();
    let p = frames * m;
    let nbrs = topo.neighbours();
    let mut support = vec![false; p * p];
    for i in 0..frames {
        for j in 0..m {
            let r = node(i, j, m);
            for a in 0..frames {
                support[r * p + node(a, j, m)] = true;
                for &n in &nbrs[j] {
                    support[r * p + node(a, n, m)] = true;
                }
            }
        }
    }
    support
}

impl Adjacency4D {
    /// Builds the skeleton-driven dense graph over `frames` frames.
    pub fn build(topo: &SkeletonTopology, frames: usize, init: WeightInit) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Config("adjacency needs at least one frame".into()));
        }
        if topo.bones().is_empty() && topo.joints() > 1 {
            return Err(Error::Topology(format!(
                "{} joints but no bones; the spatial graph would be disconnected",
                topo.joints()
            )));
        }
        let support = skeleton_support(topo, frames);
        let m = topo.joints();
        let shape = [frames, m, frames, m];
        let zeros = Tensor::zeros(&shape);
        let mut adj = Self::from_parts(zeros, support)?;
        let p = frames * m;
        let w = adj.weights.data_mut();
        for r in 0..p {
            let value = match init {
                WeightInit::RowNormalized => 1.0 / adj.degree[r] as f64,
                WeightInit::Binary => 1.0,
            };
            for c in 0..p {
                if adj.support[r * p + c] {
                    w[r * p + c] = value;
                }
            }
        }
        Ok(adj)
    }

    /// Wraps explicit weights `[T, M, T, M]` and a support set of the same
    /// size. Every node must keep at least one support edge.
    pub fn from_parts(weights: Tensor, support: Vec<bool>) -> Result<Self> {
        let (frames, joints) = match weights.shape() {
            &[t, m, t2, m2] if t == t2 && m == m2 => (t, m),
            other => return Err(dim_err!("adjacency must be [T, M, T, M], got {other:?}")),
        };
        if support.len() != weights.len() {
            return Err(dim_err!(
                "support has {} entries, weights have {}",
                support.len(),
                weights.len()
            ));
        }
        let p = frames * joints;
        let degree: Vec<usize> = support
            .chunks_exact(p)
            .map(|row| row.iter().filter(|&&s| s).count())
            .collect();
        if let Some(r) = degree.iter().position(|&d| d == 0) {
            return Err(Error::Topology(format!(
                "node (frame {}, joint {}) has an empty neighbourhood",
                r / joints,
                r % joints
            )));
        }
        Ok(Self {
            frames,
            joints,
            weights,
            support,
            degree,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.joints, self.frames, self.joints]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Replaces the trainable weights; support and degree stay fixed.
    pub fn set_weights(&mut self, weights: Tensor) -> Result<()> {
        if weights.shape() != self.weights.shape() {
            return Err(dim_err!(
                "adjacency weights {:?} do not match {:?}",
                weights.shape(),
                self.weights.shape()
            ));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn support(&self) -> &[bool] {
        &self.support
    }

    pub fn is_edge(&self, i: usize, j: usize, m: usize, n: usize) -> bool {
        let p = self.frames * self.joints;
        self.support[node(i, j, self.joints) * p + node(m, n, self.joints)]
    }

    /// `|N(v_ij)|`, frozen at construction.
    pub fn degree(&self, frame: usize, joint: usize) -> usize {
        self.degree[node(frame, joint, self.joints)]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degree
    }

    pub fn support_count(&self) -> usize {
        self.support.iter().filter(|&&s| s).count()
    }

    /// Weights and support restricted to `mask`, with degrees recomputed on
    /// the masked support.
    pub fn masked(&self, mask: &SubgraphMask) -> Result<Self> {
        if mask.mask.shape() != self.weights.shape() {
            return Err(dim_err!(
                "mask {:?} does not match adjacency {:?}",
                mask.mask.shape(),
                self.weights.shape()
            ));
        }
        let weights = self.weights.mul(&mask.mask)?;
        let support = self
            .support
            .iter()
            .zip(mask.mask.data())
            .map(|(&s, &k)| s && k != 0.0)
            .collect();
        Self::from_parts(weights, support)
    }

    pub(crate) fn inv_degree(&self) -> Vec<f64> {
        self.degree.iter().map(|&d| 1.0 / d as f64).collect()
    }

    pub(crate) fn plan(&self, phi: PhiMode, d_out: usize, mask: Option<&SubgraphMask>) -> AggPlan {
        AggPlan {
            frames: self.frames,
            joints: self.joints,
            layout: Layout::Dense,
            inv_degree: self.inv_degree(),
            mask: mask.map(|m| m.mask.data().to_vec()),
            phi,
            scale: 1.0 / (d_out as f64).sqrt(),
        }
    }
}

/// Reshapes `[T, M, T, M]` into the `[TM, TM]` block matrix whose block
/// `(i, m)` is `A[i, :, m, :]`.
pub fn reshape_block_matrix(a: &Adjacency4D) -> Tensor {
    let p = a.frames * a.joints;
    Tensor::from_raw(&[p, p], a.weights.data().to_vec())
}

/// Inverse of [`reshape_block_matrix`].
pub fn unreshape_block_matrix(mat: &Tensor, frames: usize, joints: usize) -> Result<Tensor> {
    let p = frames * joints;
    if mat.shape() != [p, p] {
        return Err(dim_err!(
            "block matrix {:?} is not [{p}, {p}] for {frames} frames x {joints} joints",
            mat.shape()
        ));
    }
    mat.reshape(&[frames, joints, frames, joints])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubgraphKind {
    /// Edges within a frame (main-diagonal blocks).
    Pose,
    /// Edges within a joint's trajectory (diagonal of every block).
    Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphMask {
    pub kind: SubgraphKind,
    /// 0/1 values, `[T, M, T, M]`.
    pub mask: Tensor,
}

pub fn subgraph_mask(kind: SubgraphKind, frames: usize, joints: usize) -> SubgraphMask {
    let mask = Tensor::from_fn(&[frames, joints, frames, joints], |idx| {
        let keep = match kind {
            SubgraphKind::Pose => idx[0] == idx[2],
            SubgraphKind::Trajectory => idx[1] == idx[3],
        };
        f64::from(u8::from(keep))
    });
    SubgraphMask { kind, mask }
}

/// A 2D slice of the block matrix: rows are `(frame, joint)` pairs over the
/// given ranges, columns likewise, both frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Comma-separated rows, no header.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.values.len() * 8);
        for row in self.values.chunks(self.cols.max(1)) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn export_subadjacency(
    a: &Adjacency4D,
    frames: Range<usize>,
    joints: Range<usize>,
) -> Result<Grid> {
    export_blocks(a, frames.clone(), frames, joints)
}

/// Like [`export_subadjacency`] but with separate target and source frame
/// ranges, e.g. a single off-diagonal block `A[i, :, m, :]`.
pub fn export_blocks(
    a: &Adjacency4D,
    row_frames: Range<usize>,
    col_frames: Range<usize>,
    joints: Range<usize>,
) -> Result<Grid> {
    for frames in [&row_frames, &col_frames] {
        if frames.start >= frames.end || frames.end > a.frames {
            return Err(Error::Bounds(format!(
                "frame range {frames:?} outside 0..{}",
                a.frames
            )));
        }
    }
    if joints.start >= joints.end || joints.end > a.joints {
        return Err(Error::Bounds(format!(
            "joint range {joints:?} outside 0..{}",
            a.joints
        )));
    }
    let nodes = |frames: Range<usize>| -> Vec<(usize, usize)> {
        frames
            .flat_map(|i| joints.clone().map(move |j| (i, j)))
            .collect()
    };
    let (rows, cols) = (nodes(row_frames), nodes(col_frames));
    let mut values = Vec::with_capacity(rows.len() * cols.len());
    for &(i, j) in &rows {
        for &(m, n) in &cols {
            values.push(a.weights.get(&[i, j, m, n]));
        }
    }
    Ok(Grid {
        rows: rows.len(),
        cols: cols.len(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn single_joint_two_frames() {
        let topo = SkeletonTopology::new(1, vec![], vec![]).unwrap();
        let a = Adjacency4D::build(&topo, 2, WeightInit::RowNormalized).unwrap();
        assert_eq!(a.support_count(), 4);
        assert_eq!(a.degree(0, 0), 2);
    }

    #[test]
    fn one_bone_one_frame_is_full() {
        let topo = SkeletonTopology::chain(2, &[]).unwrap();
        let a = Adjacency4D::build(&topo, 1, WeightInit::RowNormalized).unwrap();
        assert_eq!(a.support_count(), 4);
        assert!(a.weights().data().iter().all(|&w| w == 0.5));
    }

    #[test]
    fn missing_bones_is_topology_error() {
        let topo = SkeletonTopology::new(3, vec![], vec![]).unwrap();
        assert!(matches!(
            Adjacency4D::build(&topo, 2, WeightInit::Binary),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn h36m_shape_and_degree_bounds() {
        let topo = SkeletonTopology::h36m(&[11, 2]).unwrap();
        let a = Adjacency4D::build(&topo, 50, WeightInit::RowNormalized).unwrap();
        assert_eq!(a.shape(), [50, 22, 50, 22]);
        assert!(a.degrees().iter().all(|&d| (1..=50 * 22).contains(&d)));
    }

    #[test]
    fn support_is_symmetric() {
        let topo = SkeletonTopology::chain(4, &[]).unwrap();
        let a = Adjacency4D::build(&topo, 3, WeightInit::Binary).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                for m in 0..3 {
                    for n in 0..4 {
                        assert_eq!(a.is_edge(i, j, m, n), a.is_edge(m, n, i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn block_matrix_index_map() {
        let (t, m) = (2, 2);
        let w = Tensor::from_fn(&[t, m, t, m], |i| (i[0] * 1000 + i[1] * 100 + i[2] * 10 + i[3]) as f64);
        let a = Adjacency4D::from_parts(w.clone(), vec![true; 16]).unwrap();
        let mat = reshape_block_matrix(&a);
        for i in 0..t {
            for j in 0..m {
                for a2 in 0..t {
                    for n in 0..m {
                        assert_eq!(mat.get(&[i * m + j, a2 * m + n]), w.get(&[i, j, a2, n]));
                    }
                }
            }
        }
        assert_eq!(unreshape_block_matrix(&mat, t, m).unwrap(), w);
    }

    #[test]
    fn single_frame_block_is_whole_matrix() {
        let topo = SkeletonTopology::chain(3, &[]).unwrap();
        let a = Adjacency4D::build(&topo, 1, WeightInit::RowNormalized).unwrap();
        let mat = reshape_block_matrix(&a);
        for j in 0..3 {
            for n in 0..3 {
                assert_eq!(mat.get(&[j, n]), a.weights().get(&[0, j, 0, n]));
            }
        }
    }

    #[test]
    fn masks_count_and_intersect_on_self_loops() {
        let pose = subgraph_mask(SubgraphKind::Pose, 2, 2);
        let traj = subgraph_mask(SubgraphKind::Trajectory, 2, 2);
        assert_eq!(pose.mask.sum(), 8.0);
        assert_eq!(traj.mask.sum(), 8.0);
        let both = pose.mask.mul(&traj.mask).unwrap();
        let selfloops = Tensor::from_fn(&[2, 2, 2, 2], |i| f64::from(u8::from(i[0] == i[2] && i[1] == i[3])));
        assert_eq!(both, selfloops);
    }

    #[test]
    fn export_matches_block_matrix() {
        let topo = SkeletonTopology::chain(3, &[]).unwrap();
        let mut a = Adjacency4D::build(&topo, 3, WeightInit::RowNormalized).unwrap();
        let mut rng = SeededRng::new(4);
        a.set_weights(rng.uniform_tensor(&[3, 3, 3, 3], -1.0, 1.0)).unwrap();
        let full = export_subadjacency(&a, 0..3, 0..3).unwrap();
        let mat = reshape_block_matrix(&a);
        assert_eq!(full.values, mat.data());
        let block = export_subadjacency(&a, 1..2, 0..3).unwrap();
        assert_eq!((block.rows, block.cols), (3, 3));
        assert_eq!(block.get(2, 0), a.weights().get(&[1, 2, 1, 0]));
        let off = export_blocks(&a, 0..1, 2..3, 0..3).unwrap();
        for j in 0..3 {
            for n in 0..3 {
                assert_eq!(off.get(j, n), a.weights().get(&[0, j, 2, n]));
            }
        }
        assert!(matches!(export_subadjacency(&a, 0..4, 0..3), Err(Error::Bounds(_))));
        assert_eq!(full.to_csv().lines().count(), 9);
    }
}
