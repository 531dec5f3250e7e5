//! Dense spatio-temporal graph construction: skeleton topology, the 4D
//! adjacency, pose/trajectory subgraph masks and multi-level skeleton
//! transforms.

mod adjacency;
mod topology;
mod transform;

pub use adjacency::{
    export_blocks, export_subadjacency, reshape_block_matrix, subgraph_mask,
    unreshape_block_matrix, Adjacency4D, Grid, SubgraphKind, SubgraphMask, WeightInit,
};
pub use topology::{contiguous_grouping, Grouping, SkeletonKind, SkeletonTopology};
pub use transform::{apply_transform, indicator, SkeletonTransform};
