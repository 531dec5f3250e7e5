use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A partition of the joints into parts; `parts[p]` lists member joints.
pub type Grouping = Vec<Vec<usize>>;

/// Joints, bones and the coarser groupings used by the extra levels.
///
/// Level 0 is the joint level itself; `groupings[s - 1]` defines level `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    joints: usize,
    bones: Vec<(usize, usize)>,
    groupings: Vec<Grouping>,
}

/// Built-in skeleton families selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkeletonKind {
    /// A 22-joint human skeleton with 11- and 2-part groupings.
    H36m,
    /// A serial chain of joints with contiguous groupings.
    Chain,
}

const H36M_BONES: [(usize, usize); 22] = [
    // right leg
    (0, 1),
    (1, 2),
    (2, 3),
    // left leg
    (4, 5),
    (5, 6),
    (6, 7),
    // hips to spine
    (0, 4),
    (0, 8),
    (4, 8),
    // spine and head
    (8, 9),
    (9, 10),
    (10, 11),
    // left arm
    (9, 12),
    (12, 13),
    (13, 14),
    (14, 15),
    (14, 16),
    // right arm
    (9, 17),
    (17, 18),
    (18, 19),
    (19, 20),
    (19, 21),
];

impl SkeletonTopology {
    pub fn new(joints: usize, bones: Vec<(usize, usize)>, groupings: Vec<Grouping>) -> Result<Self> {
        if joints == 0 {
            return Err(Error::Topology("skeleton needs at least one joint".into()));
        }
        for &(a, b) in &bones {
            if a >= joints || b >= joints {
                return Err(Error::Topology(format!(
                    "bone {a}-{b} references a joint outside 0..{joints}"
                )));
            }
            if a == b {
                return Err(Error::Topology(format!("bone {a}-{b} is a self-loop")));
            }
        }
        for (s, g) in groupings.iter().enumerate() {
            check_partition(g, joints).map_err(|e| match e {
                Error::Topology(msg) => Error::Topology(format!("level {}: {msg}", s + 1)),
                other => other,
            })?;
        }
        Ok(Self {
            joints,
            bones,
            groupings,
        })
    }

    /// A chain `0 - 1 - ... - (m-1)` with contiguous groupings of the given
    /// part counts.
    pub fn chain(joints: usize, part_counts: &[usize]) -> Result<Self> {
        let bones = (1..joints).map(|j| (j - 1, j)).collect();
        let groupings = part_counts
            .iter()
            .map(|&parts| contiguous_grouping(joints, parts))
            .collect::<Result<Vec<_>>>()?;
        Self::new(joints, bones, groupings)
    }

    /// The 22-joint human skeleton, optionally truncated to fewer levels.
    /// `part_counts` must be a prefix of `[11, 2]`.
    pub fn h36m(part_counts: &[usize]) -> Result<Self> {
        let eleven: Grouping = vec![
            vec![0, 1],
            vec![2, 3],
            vec![4, 5],
            vec![6, 7],
            vec![8],
            vec![9],
            vec![10, 11],
            vec![12, 13],
            vec![14, 15, 16],
            vec![17, 18],
            vec![19, 20, 21],
        ];
        let two: Grouping = vec![(0..8).collect(), (8..22).collect()];
        let all = [eleven, two];
        if part_counts.len() > all.len()
            || part_counts.iter().zip(&all).any(|(&c, g)| c != g.len())
        {
            return Err(Error::Topology(format!(
                "the 22-joint skeleton supports level part counts [11, 2], got {part_counts:?}"
            )));
        }
        Self::new(22, H36M_BONES.to_vec(), all[..part_counts.len()].to_vec())
    }

    pub fn from_kind(kind: SkeletonKind, joints: usize, part_counts: &[usize]) -> Result<Self> {
        match kind {
            SkeletonKind::Chain => Self::chain(joints, part_counts),
            SkeletonKind::H36m => {
                if joints != 22 {
                    return Err(Error::Topology(format!(
                        "the h36m skeleton has 22 joints, config asks for {joints}"
                    )));
                }
                Self::h36m(part_counts)
            }
        }
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    /// Number of extra (coarser) levels, `S`.
    pub fn extra_levels(&self) -> usize {
        self.groupings.len()
    }

    /// Grouping for level `s >= 1`.
    pub fn grouping(&self, level: usize) -> Result<&Grouping> {
        if level == 0 || level > self.groupings.len() {
            return Err(Error::Topology(format!(
                "no grouping for level {level}; skeleton has levels 1..={}",
                self.groupings.len()
            )));
        }
        Ok(&self.groupings[level - 1])
    }

    /// Node count per level, starting with `M` at level 0.
    pub fn level_sizes(&self) -> Vec<usize> {
        std::iter::once(self.joints)
            .chain(self.groupings.iter().map(Vec::len))
            .collect()
    }

    /// Neighbour lists from the bone set.
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.joints];
        for &(a, b) in &self.bones {
            if !adj[a].contains(&b) {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        adj
    }

    /// Breadth-first parent of each joint from root 0; `None` for the root
    /// and for joints unreachable from it.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let adj = self.neighbours();
        let mut parent = vec![None; self.joints];
        let mut seen = vec![false; self.joints];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(j) = queue.pop_front() {
            let mut next = adj[j].clone();
            next.sort_unstable();
            for n in next {
                if !seen[n] {
                    seen[n] = true;
                    parent[n] = Some(j);
                    queue.push_back(n);
                }
            }
        }
        parent
    }

    /// Joints in breadth-first order from root 0 (reachable joints only).
    pub fn bfs_order(&self) -> Vec<usize> {
        let parents = self.parents();
        let mut order = vec![0];
        let mut k = 0;
        while k < order.len() {
            let j = order[k];
            order.extend((0..self.joints).filter(|&c| parents[c] == Some(j)));
            k += 1;
        }
        order
    }
}

fn check_partition(g: &Grouping, joints: usize) -> Result<()> {
    let mut owner = vec![None; joints];
    for (p, part) in g.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Topology(format!("part {p} is empty")));
        }
        for &j in part {
            if j >= joints {
                return Err(Error::Topology(format!("part {p} lists joint {j} >= {joints}")));
            }
            if let Some(q) = owner[j].replace(p) {
                return Err(Error::Topology(format!("joint {j} is in parts {q} and {p}")));
            }
        }
    }
    if let Some(j) = owner.iter().position(Option::is_none) {
        return Err(Error::Topology(format!("joint {j} belongs to no part")));
    }
    Ok(())
}

/// Splits `0..joints` into `parts` contiguous runs whose sizes differ by at
/// most one.
pub fn contiguous_grouping(joints: usize, parts: usize) -> Result<Grouping> {
    if parts == 0 || parts > joints {
        return Err(Error::Topology(format!(
            "cannot split {joints} joints into {parts} parts"
        )));
    }
    let base = joints / parts;
    let extra = joints % parts;
    let mut start = 0;
    Ok((0..parts)
        .map(|p| {
            let len = base + usize::from(p < extra);
            let part = (start..start + len).collect();
            start += len;
            part
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h36m_levels() {
        let t = SkeletonTopology::h36m(&[11, 2]).unwrap();
        assert_eq!(t.level_sizes(), vec![22, 11, 2]);
        assert_eq!(t.bones().len(), 22);
        // connected tree-like: every joint reachable from the root
        assert!(t.parents().iter().skip(1).all(Option::is_some));
        assert!(SkeletonTopology::h36m(&[10]).is_err());
    }

    #[test]
    fn chain_grouping() {
        let t = SkeletonTopology::chain(8, &[4, 2]).unwrap();
        assert_eq!(t.grouping(1).unwrap()[1], vec![2, 3]);
        assert_eq!(t.grouping(2).unwrap()[1], vec![4, 5, 6, 7]);
        assert!(t.grouping(3).is_err());
        assert_eq!(contiguous_grouping(5, 2).unwrap(), vec![vec![0, 1, 2], vec![3, 4]]);
    }

    #[test]
    fn rejects_non_partitions() {
        let overlap = vec![vec![0, 1], vec![1, 2]];
        assert!(matches!(
            SkeletonTopology::new(3, vec![(0, 1)], vec![overlap]),
            Err(Error::Topology(_))
        ));
        let missing = vec![vec![0, 1]];
        assert!(SkeletonTopology::new(3, vec![(0, 1)], vec![missing]).is_err());
        assert!(SkeletonTopology::new(2, vec![(0, 2)], vec![]).is_err());
    }
}
