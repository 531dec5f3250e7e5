use serde::{Deserialize, Serialize};

use crate::data::MotionSequence;
use crate::error::{Error, Result};
use crate::graph::SkeletonTopology;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Rest distance between a joint and its parent, in millimetres.
pub const BONE_LENGTH: f64 = 100.0;

/// Knobs of the synthetic motion generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub sequences: usize,
    pub frames: usize,
    pub fps: f64,
    pub seed: u64,
    /// Upper bound of the sinusoid frequencies in Hz; 0 gives static poses.
    pub max_freq: f64,
    /// Sinusoid amplitude as a fraction of the bone length.
    pub amplitude: f64,
    /// Root translation per frame in millimetres, along x.
    pub drift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sequences: 200,
            frames: 40,
            fps: 25.0,
            seed: 0,
            max_freq: 0.5,
            amplitude: 0.4,
            drift: 0.0,
        }
    }
}

/// Rest positions: the root at the origin, each child one bone length from
/// its parent, fanning siblings out around the parent's direction.
pub fn rest_pose(topo: &SkeletonTopology) -> Vec<[f64; 3]> {
    let m = topo.joints();
    let parents = topo.parents();
    let mut pos = vec![[0.0; 3]; m];
    let mut dir = vec![[0.0, 1.0, 0.0]; m];
    for j in topo.bfs_order() {
        let Some(p) = parents[j] else { continue };
        let siblings: Vec<usize> = (0..m).filter(|&c| parents[c] == Some(p)).collect();
        let k = siblings.iter().position(|&c| c == j).unwrap() as f64;
        let angle = (k - (siblings.len() as f64 - 1.0) / 2.0) * 0.6;
        let [dx, dy, dz] = dir[p];
        let (s, c) = angle.sin_cos();
        let d = [dx * c - dy * s, dx * s + dy * c, dz];
        dir[j] = d;
        pos[j] = [pos[p][0] + BONE_LENGTH * d[0], pos[p][1] + BONE_LENGTH * d[1], pos[p][2] + BONE_LENGTH * d[2]];
    }
    // joints unreachable from the root keep their own offsets along z
    for j in 0..m {
        if j != 0 && parents[j].is_none() {
            pos[j] = [0.0, 0.0, BONE_LENGTH * j as f64];
        }
    }
    pos
}

struct Wave {
    amp: [f64; 3],
    freq: f64,
    phase: f64,
}

fn random_unit(rng: &mut SeededRng) -> [f64; 3] {
    loop {
        let v = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn one_sequence(topo: &SkeletonTopology, cfg: &SynthConfig, rng: &mut SeededRng) -> Result<MotionSequence> {
    let m = topo.joints();
    let rest = rest_pose(topo);
    let parents = topo.parents();
    let order = topo.bfs_order();
    let waves: Vec<Vec<Wave>> = (0..m)
        .map(|_| {
            let count = 1 + rng.below(3);
            (0..count)
                .map(|_| {
                    let a = rng.uniform(0.2, 1.0) * cfg.amplitude * BONE_LENGTH;
                    Wave {
                        amp: random_unit(rng).map(|u| u * a),
                        freq: rng.uniform(0.0, cfg.max_freq),
                        phase: rng.uniform(0.0, std::f64::consts::TAU),
                    }
                })
                .collect()
        })
        .collect();

    let mut data = Vec::with_capacity(cfg.frames * m * 3);
    for t in 0..cfg.frames {
        let time = t as f64 / cfg.fps;
        let mut raw = rest.clone();
        for (j, ws) in waves.iter().enumerate() {
            if j == 0 {
                continue;
            }
            for w in ws {
                let s = (std::f64::consts::TAU * w.freq * time + w.phase).sin();
                for k in 0..3 {
                    raw[j][k] += w.amp[k] * s;
                }
            }
        }
        raw[0][0] += cfg.drift * t as f64;
        let mut pos = raw.clone();
        for &j in &order {
            let Some(p) = parents[j] else { continue };
            let v: Vec<f64> = (0..3).map(|k| raw[j][k] - raw[p][k]).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let len = rest_len(&rest, j, p);
            for k in 0..3 {
                pos[j][k] = pos[p][k] + len * v[k] / n.max(1e-12);
            }
        }
        data.extend(pos.iter().flatten());
    }
    MotionSequence::new(cfg.fps, Tensor::new(&[cfg.frames, m, 3], data)?, topo.bones().to_vec())
}

fn rest_len(rest: &[[f64; 3]], a: usize, b: usize) -> f64 {
    (0..3).map(|k| (rest[a][k] - rest[b][k]).powi(2)).sum::<f64>().sqrt()
}

/// Sinusoidal joint motion around the rest pose with every bone projected
/// back to its rest length; deterministic in `cfg.seed`.
pub fn synthesize(topo: &SkeletonTopology, cfg: &SynthConfig) -> Result<Vec<MotionSequence>> {
    if cfg.sequences == 0 || cfg.frames < 2 || !(cfg.fps > 0.0) || cfg.max_freq < 0.0 {
        return Err(Error::Config(
            "synthesis needs sequences >= 1, frames >= 2, fps > 0 and max_freq >= 0".into(),
        ));
    }
    (0..cfg.sequences)
        .map(|i| one_sequence(topo, cfg, &mut SeededRng::derive(cfg.seed, i as u64)))
        .collect()
}

/// [`synthesize`] with default motion settings.
pub fn synthesize_dataset(
    topo: &SkeletonTopology,
    n_sequences: usize,
    t_total: usize,
    seed: u64,
) -> Result<Vec<MotionSequence>> {
    synthesize(
        topo,
        &SynthConfig {
            sequences: n_sequences,
            frames: t_total,
            seed,
            ..SynthConfig::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Largest deviation of a parent link from its rest length.
    fn link_error(seq: &MotionSequence, topo: &SkeletonTopology) -> f64 {
        let rest = rest_pose(topo);
        let parents = topo.parents();
        let f = &seq.frames;
        let mut worst: f64 = 0.0;
        for t in 0..seq.len() {
            for (j, p) in parents.iter().enumerate() {
                let Some(p) = *p else { continue };
                let d = (0..3).map(|k| (f.get(&[t, j, k]) - f.get(&[t, p, k])).powi(2)).sum::<f64>().sqrt();
                worst = worst.max((d - rest_len(&rest, j, p)).abs());
            }
        }
        worst
    }

    #[test]
    fn bone_lengths_preserved() {
        for topo in [SkeletonTopology::chain(8, &[]).unwrap(), SkeletonTopology::h36m(&[]).unwrap()] {
            for s in synthesize_dataset(&topo, 3, 30, 4).unwrap() {
                assert!(link_error(&s, &topo) < 1e-9);
            }
        }
    }

    #[test]
    fn zero_frequency_is_static() {
        let topo = SkeletonTopology::chain(4, &[]).unwrap();
        let cfg = SynthConfig {
            sequences: 2,
            frames: 10,
            max_freq: 0.0,
            ..SynthConfig::default()
        };
        for s in synthesize(&topo, &cfg).unwrap() {
            let first = &s.frames.data()[..12];
            for frame in s.frames.data().chunks(12) {
                assert_eq!(frame, first);
            }
        }
    }

    #[test]
    fn seeded_and_root_fixed_without_drift() {
        let topo = SkeletonTopology::chain(5, &[]).unwrap();
        let a = synthesize_dataset(&topo, 3, 20, 9).unwrap();
        assert_eq!(a, synthesize_dataset(&topo, 3, 20, 9).unwrap());
        assert_ne!(a, synthesize_dataset(&topo, 3, 20, 10).unwrap());
        for s in &a {
            for t in 0..20 {
                for k in 0..3 {
                    assert!((s.frames.get(&[t, 0, k]) - s.frames.get(&[0, 0, k])).abs() < 1e-9);
                }
            }
        }
        assert!(synthesize_dataset(&topo, 0, 20, 9).is_err());
    }
}
