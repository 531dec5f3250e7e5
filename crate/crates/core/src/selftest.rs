//! Built-in verification suite.
//!
//! Each check compares a library path against an independent reference
//! written with plain loops, or measures a structural property. The
//! `selftest` command and the integration tests share these functions.

use std::time::{Duration, Instant};

use crate::data::{synthesize, DatasetSplit, SynthConfig};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::graph::{
    apply_transform, subgraph_mask, Adjacency4D, SkeletonKind, SkeletonTopology, SkeletonTransform,
    SubgraphKind, WeightInit,
};
use crate::layers::{
    aggregate, aggregate_masked, dynamic_weights, slmp_factorized_forward, slmp_forward,
    static_reduction_forward, update, Activation, FactorizedAdjacency, FactorizedParams,
    LevelParams, PhiMode,
};
use crate::model::{pad_history, Model, ModelConfig, RunMode};
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::{softsign_scalar, Tensor};
use crate::training::{
    fit, future_mpjpe, lr_at_epoch, FitReport, TrainConfig, ZeroVelocity, BATCH_SIZE, CLIP_NORM,
    EPOCHS,
};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckResult {
    /// `PASS name (detail) in 0.12s`
    pub fn line(&self) -> String {
        format!(
            "{} {} ({}) in {:.2}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

const ORACLE_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;

fn random_adjacency(topo: &SkeletonTopology, t: usize, rng: &mut SeededRng) -> Result<Adjacency4D> {
    let mut a = Adjacency4D::build(topo, t, WeightInit::RowNormalized)?;
    let m = topo.joints();
    a.set_weights(rng.uniform_tensor(&[t, m, t, m], -1.0, 1.0))?;
    Ok(a)
}

fn phi_of(mode: PhiMode, u: &[f64], v: &[f64]) -> f64 {
    let d = u.len() as f64;
    match mode {
        PhiMode::Off => 0.0,
        PhiMode::Phi1 => {
            let mu: f64 = u.iter().sum::<f64>() / d;
            let mv: f64 = v.iter().sum::<f64>() / d;
            softsign_scalar(mu - mv)
        }
        PhiMode::Phi2 => softsign_scalar(-u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()),
    }
}

/// Largest difference between [`aggregate`] and a four-deep loop over
/// `(i, j, m, n)` on random `T = 4, M = 3, d = 2` inputs, over every dynamic
/// mode and a batch of two samples.
pub fn aggregation_oracle(seed: u64) -> Result<f64> {
    let (t, m, d, d_out) = (4, 3, 2, 5);
    let mut rng = SeededRng::new(seed);
    let topo = SkeletonTopology::chain(m, &[])?;
    let adj = random_adjacency(&topo, t, &mut rng)?;
    let h = rng.uniform_tensor(&[2, t, m, d], -2.0, 2.0);
    let w = adj.weights();
    let scale = 1.0 / (d_out as f64).sqrt();
    let mut worst: f64 = 0.0;
    for mode in [PhiMode::Off, PhiMode::Phi1, PhiMode::Phi2] {
        let got = aggregate(&h, &adj, mode, d_out)?;
        for s in 0..2 {
            let node = |i: usize, j: usize| -> Vec<f64> { (0..d).map(|k| h.get(&[s, i, j, k])).collect() };
            for i in 0..t {
                for j in 0..m {
                    let deg = adj.degree(i, j) as f64;
                    let mut acc = vec![0.0; d];
                    for a in 0..t {
                        for b in 0..m {
                            let coef = w.get(&[i, j, a, b]) / deg + scale * phi_of(mode, &node(i, j), &node(a, b));
                            for (k, x) in acc.iter_mut().enumerate() {
                                *x += coef * h.get(&[s, a, b, k]);
                            }
                        }
                    }
                    for (k, x) in acc.iter().enumerate() {
                        worst = worst.max((got.get(&[s, i, j, k]) - x).abs());
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// Reference graph convolution on one subgraph: for each target node, sum
/// `A[target, source] / deg * h[source]` over the sources `sources` lists,
/// add the node's own feature, then `tanh(theta * . + bias)`.
fn reference_conv(
    h: &Tensor,
    adj: &Adjacency4D,
    theta: &Tensor,
    bias: &Tensor,
    sources: impl Fn(usize, usize) -> Vec<(usize, usize)>,
) -> Tensor {
    let s = h.shape();
    let (n, t, m, d) = (s[0], s[1], s[2], s[3]);
    let d_out = theta.shape()[0];
    let mut out = Tensor::zeros(&[n, t, m, d_out]);
    for b in 0..n {
        for i in 0..t {
            for j in 0..m {
                let src = sources(i, j);
                let deg = src.iter().filter(|&&(a, c)| adj.is_edge(i, j, a, c)).count() as f64;
                let mut x: Vec<f64> = (0..d).map(|k| h.get(&[b, i, j, k])).collect();
                for &(a, c) in &src {
                    let wgt = adj.weights().get(&[i, j, a, c]) / deg;
                    for (k, v) in x.iter_mut().enumerate() {
                        *v += wgt * h.get(&[b, a, c, k]);
                    }
                }
                for o in 0..d_out {
                    let z: f64 = (0..d).map(|k| theta.get(&[o, k]) * x[k]).sum::<f64>() + bias.get(&[o]);
                    out.set(&[b, i, j, o], z.tanh());
                }
            }
        }
    }
    out
}

fn reduction_case(seed: u64, kind: SubgraphKind) -> Result<f64> {
    let (t, m, d, d_out) = (5, 4, 3, 4);
    let mut rng = SeededRng::new(seed);
    let topo = SkeletonTopology::chain(m, &[])?;
    let adj = random_adjacency(&topo, t, &mut rng)?;
    let h = rng.uniform_tensor(&[2, t, m, d], -1.0, 1.0);
    let theta = rng.uniform_tensor(&[d_out, d], -1.0, 1.0);
    let bias = rng.uniform_tensor(&[d_out], -0.5, 0.5);
    let got = static_reduction_forward(&h, &adj, kind, &theta, &bias, Activation::Tanh)?;
    let expected = match kind {
        // one graph convolution per frame over that frame's joints
        SubgraphKind::Pose => reference_conv(&h, &adj, &theta, &bias, |i, _| (0..m).map(|c| (i, c)).collect()),
        // one temporal convolution per joint over that joint's frames
        SubgraphKind::Trajectory => {
            reference_conv(&h, &adj, &theta, &bias, |_, j| (0..t).map(|a| (a, j)).collect())
        }
    };
    Ok(got.max_abs_diff(&expected))
}

/// Pose-masked static block against `T` independent per-frame graph
/// convolutions sharing one projection.
pub fn spatial_reduction(seed: u64) -> Result<f64> {
    reduction_case(seed, SubgraphKind::Pose)
}

/// Trajectory-masked static block against `M` independent per-joint
/// temporal convolutions sharing one projection.
pub fn temporal_reduction(seed: u64) -> Result<f64> {
    reduction_case(seed, SubgraphKind::Trajectory)
}

/// Factorized SLMP against two masked dense steps, `g1 = h + pose(h)` then
/// `g2 = g1 + traj(g1)`, followed by the same update; worst case over every
/// dynamic mode.
pub fn factorized_equivalence(seed: u64) -> Result<f64> {
    let (t, m, d, d_out) = (4, 3, 3, 4);
    let mut rng = SeededRng::new(seed);
    let topo = SkeletonTopology::chain(m, &[])?;
    let mut worst: f64 = 0.0;
    for phi in [PhiMode::Off, PhiMode::Phi1, PhiMode::Phi2] {
        let adj = random_adjacency(&topo, t, &mut rng)?;
        let h = rng.uniform_tensor(&[2, t, m, d], -1.0, 1.0);
        let mut level = LevelParams::new(adj.clone(), d, d_out, phi, &mut rng);
        level.bias = rng.uniform_tensor(&[d_out], -0.5, 0.5);
        level.bn = None;
        level.dropout = 0.0;
        let mut fp = FactorizedParams::from_level(&level);
        let got = slmp_factorized_forward(&h, &mut fp, false, &mut rng)?;

        let pose = subgraph_mask(SubgraphKind::Pose, t, m);
        let traj = subgraph_mask(SubgraphKind::Trajectory, t, m);
        let g1 = h.add(&aggregate_masked(&h, &adj, phi, d_out, &pose)?)?;
        let g2 = g1.add(&aggregate_masked(&g1, &adj, phi, d_out, &traj)?)?;
        let expected = update(&g2, &Tensor::zeros(g2.shape()), &level.theta, &level.bias, Activation::Tanh)?;
        worst = worst.max(got.max_abs_diff(&expected));
    }
    Ok(worst)
}

/// The one-block toy network used for the gradient audit: 3 observed and 1
/// predicted frame, a 4-joint chain pooled to 2 and 1 parts, 8 channels.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        t_history: 3,
        t_future: 1,
        joints: 4,
        input_dim: 3,
        d_hidden: 8,
        blocks: 1,
        level_joint_counts: vec![4, 2, 1],
        skeleton: SkeletonKind::Chain,
        seed: 11,
        ..ModelConfig::default()
    }
}

/// Finite differences against tape gradients for every parameter of a
/// model, in training mode with a fixed dropout stream and an MPJPE loss.
pub fn gradient_audit_for(config: &ModelConfig, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let model = Model::init(config)?;
    let mut rng = SeededRng::new(seed);
    let c = model.config();
    let x = rng.uniform_tensor(&[2, c.t_history, c.joints, c.input_dim], -1.0, 1.0);
    let target = std::sync::Arc::new(rng.uniform_tensor(&[2, c.frames(), c.joints, c.input_dim], -1.0, 1.0));
    finite_diff_check(&model.params, eps, |tape, bound| {
        let mut drop_rng = SeededRng::new(seed ^ 0x5eed);
        let out = model.forward(tape, bound, &x, RunMode::Train(&mut drop_rng))?;
        tape.mpjpe(out.output, target.clone())
    })
}

pub fn gradient_audit() -> Result<GradCheckReport> {
    gradient_audit_for(&toy_config(), 1e-6, 21)
}

/// One row of the shape table.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRow {
    pub what: &'static str,
    pub expected: Vec<usize>,
    pub actual: Vec<usize>,
}

/// Shapes produced by the default configuration at batch size 16.
pub fn shape_table() -> Result<Vec<ShapeRow>> {
    let cfg = ModelConfig::default();
    let model = Model::init(&cfg)?;
    let (t, d) = (cfg.frames(), cfg.d_hidden);
    let mut rng = SeededRng::new(3);
    let x = rng.uniform_tensor(&[16, t, cfg.joints, cfg.input_dim], -1.0, 1.0);

    let g0 = model.level_graph(0)?;
    let mut enc0 = LevelParams::new(g0.clone(), cfg.input_dim, d, cfg.phi_mode, &mut rng);
    let h0 = slmp_forward(&x, &mut enc0, false, &mut rng)?;

    let zt = SkeletonTransform::init(model.topology(), 1)?;
    let x1 = apply_transform(&zt, &x)?;
    let mut enc1 = LevelParams::new(model.level_graph(1)?, cfg.input_dim, d, cfg.phi_mode, &mut rng);
    let h1 = slmp_forward(&x1, &mut enc1, false, &mut rng)?;

    let f = FactorizedAdjacency::from_4d(&g0);
    let row = |what, expected: &[usize], actual: &[usize]| ShapeRow {
        what,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    };
    Ok(vec![
        row("adjacency", &[50, 22, 50, 22], model.params.get("enc.0.adj")?.shape()),
        row("level-0 features", &[16, 50, 22, 128], h0.shape()),
        row("level-1 features", &[16, 50, 11, 128], h1.shape()),
        row("pose subgraphs", &[50, 22, 22], f.pose.shape()),
        row("trajectory subgraphs", &[22, 50, 50], f.trajectory.shape()),
    ])
}

/// Extremes of the dynamic weights over many random vector pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiReport {
    pub pairs: usize,
    pub max_abs_phi1: f64,
    pub max_abs_phi2: f64,
    /// Pairs where `phi1(u, v) != -phi1(v, u)` bitwise.
    pub antisymmetry_violations: usize,
    /// Largest `phi2(u, u)`.
    pub max_self_phi2: f64,
}

impl PhiReport {
    pub fn holds(&self) -> bool {
        self.max_abs_phi1 < 1.0
            && self.max_abs_phi2 < 1.0
            && self.antisymmetry_violations == 0
            && self.max_self_phi2 <= 0.0
    }
}

/// Evaluates both dynamic weights on `pairs` random pairs of vectors of
/// random width, through the same code the layers use.
pub fn phi_properties(pairs: usize, seed: u64) -> Result<PhiReport> {
    let mut rng = SeededRng::new(seed);
    let mut report = PhiReport {
        pairs,
        max_abs_phi1: 0.0,
        max_abs_phi2: 0.0,
        antisymmetry_violations: 0,
        max_self_phi2: f64::NEG_INFINITY,
    };
    for _ in 0..pairs {
        let d = 1 + rng.below(8);
        let spread = [0.01, 1.0, 10.0][rng.below(3)];
        // nodes u and v as a one-frame, two-joint feature map
        let h = rng.uniform_tensor(&[1, 2, d], -spread, spread);
        let p1 = dynamic_weights(&h, PhiMode::Phi1)?;
        let p2 = dynamic_weights(&h, PhiMode::Phi2)?;
        let (uv, vu) = (p1.get(&[0, 0, 0, 1]), p1.get(&[0, 1, 0, 0]));
        if uv != -vu {
            report.antisymmetry_violations += 1;
        }
        report.max_abs_phi1 = report.max_abs_phi1.max(uv.abs()).max(vu.abs());
        for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            report.max_abs_phi2 = report.max_abs_phi2.max(p2.get(&[0, a, 0, b]).abs());
        }
        report.max_self_phi2 = report.max_self_phi2.max(p2.get(&[0, 0, 0, 0])).max(p2.get(&[0, 1, 0, 1]));
    }
    Ok(report)
}

/// With every decode parameter zero the network returns its padded input
/// bitwise, in both evaluation and training mode, even with a nonzero input
/// offset and scale.
pub fn residual_identity() -> Result<bool> {
    let cfg = ModelConfig {
        t_history: 5,
        t_future: 5,
        joints: 6,
        input_dim: 3,
        d_hidden: 8,
        blocks: 2,
        level_joint_counts: vec![6, 3, 1],
        skeleton: SkeletonKind::Chain,
        seed: 4,
        input_scale: 0.37,
        ..ModelConfig::default()
    };
    let mut model = Model::init(&cfg)?;
    let mut rng = SeededRng::new(9);
    model.set_input_offset(rng.uniform_tensor(&[6, 3], -50.0, 50.0))?;
    let names: Vec<String> = model.params.names().filter(|n| n.starts_with("decode.")).map(str::to_string).collect();
    for name in names {
        let shape = model.params.get(&name)?.shape().to_vec();
        model.params.set(&name, Tensor::zeros(&shape))?;
    }
    let x = rng.uniform_tensor(&[3, 5, 6, 3], -100.0, 100.0);
    let padded = pad_history(&x, cfg.frames())?;
    let eval_ok = model.predict(&x)?.data().iter().zip(padded.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, &x, RunMode::Train(&mut rng))?;
    let train_ok = tape.value(out.output).data().iter().zip(padded.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(eval_ok && train_ok)
}

/// `(name, expected, actual)` for the optimization defaults.
pub fn hyperparameters() -> Vec<(&'static str, f64, f64)> {
    let t = TrainConfig::default();
    vec![
        ("lr at epoch 0", 1e-5, lr_at_epoch(0)),
        ("lr at epoch 4", 9.6e-6, lr_at_epoch(4)),
        ("clip norm", 1.0, CLIP_NORM),
        ("batch size", 16.0, BATCH_SIZE as f64),
        ("epochs", 50.0, EPOCHS as f64),
        ("config lr at epoch 4", 9.6e-6, t.lr_at(4)),
        ("config clip norm", 1.0, t.clip_norm),
        ("config batch size", 16.0, t.batch_size as f64),
        ("config epochs", 50.0, t.epochs as f64),
    ]
}

fn hyperparameters_hold() -> bool {
    hyperparameters().iter().all(|&(_, e, a)| (e - a).abs() <= 1e-15 * e.abs().max(1.0))
}

/// A small end-to-end training run on synthetic chain motion.
#[derive(Debug, Clone, PartialEq)]
pub struct SanitySetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub stride: usize,
    pub test_fraction: f64,
}

impl Default for SanitySetup {
    /// 200 sequences of an 8-joint chain, 10 observed and 10 predicted
    /// frames, a one-block 16-channel network trained for 50 epochs.
    fn default() -> Self {
        Self {
            model: ModelConfig {
                t_history: 10,
                t_future: 10,
                joints: 8,
                input_dim: 3,
                d_hidden: 16,
                blocks: 1,
                level_joint_counts: vec![8, 4, 2],
                phi_mode: PhiMode::Off,
                skeleton: SkeletonKind::Chain,
                seed: 7,
                input_scale: 0.1,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                base_lr: 1e-2,
                seed: 7,
                ..TrainConfig::default()
            },
            synth: SynthConfig {
                sequences: 200,
                frames: 40,
                ..SynthConfig::default()
            },
            stride: 5,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SanityReport {
    pub fit: FitReport,
    pub first_loss: f64,
    pub last_loss: f64,
    pub zero_velocity_mpjpe: f64,
    pub model_mpjpe: f64,
}

impl SanityReport {
    pub fn loss_ratio(&self) -> f64 {
        self.last_loss / self.first_loss
    }

    /// Fractional reduction of held-out future error relative to
    /// zero-velocity.
    pub fn improvement(&self) -> f64 {
        1.0 - self.model_mpjpe / self.zero_velocity_mpjpe
    }
}

/// Synthesizes the data, trains, and scores the model and the zero-velocity
/// baseline on the held-out sequences.
pub fn training_sanity(setup: &SanitySetup) -> Result<SanityReport> {
    let topo = setup.model.topology()?;
    let seqs = synthesize(&topo, &setup.synth)?;
    let c = &setup.model;
    let split = DatasetSplit::from_sequences(&seqs, c.t_history, c.t_future, setup.stride, 0.0, setup.test_fraction)?;
    let test = split
        .test
        .ok_or_else(|| crate::Error::Config("test fraction leaves no held-out sequences".into()))?;
    let mut model = Model::init(c)?;
    let fit = fit(&mut model, &setup.train, &split.train, None, None)?;
    let first_loss = fit.history.first().map_or(f64::NAN, |r| r.train_loss);
    let last_loss = fit.history.last().map_or(f64::NAN, |r| r.train_loss);
    Ok(SanityReport {
        first_loss,
        last_loss,
        zero_velocity_mpjpe: future_mpjpe(&ZeroVelocity { t_future: c.t_future }, &test)?,
        model_mpjpe: future_mpjpe(&model, &test)?,
        fit,
    })
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn within(diff: f64) -> (bool, String) {
    (diff < ORACLE_TOL, format!("max abs diff {diff:.3e}"))
}

/// Runs the fast checks; with `full`, also the training run.
pub fn run_suite(full: bool) -> Vec<CheckResult> {
    let mut out = vec![
        timed("aggregation-oracle", || aggregation_oracle(1).map(within)),
        timed("spatial-reduction", || spatial_reduction(2).map(within)),
        timed("temporal-reduction", || temporal_reduction(3).map(within)),
        timed("factorized-equivalence", || factorized_equivalence(4).map(within)),
        timed("gradient-audit", || {
            let r = gradient_audit()?;
            let worst = r.worst_group().map_or("-".to_string(), |g| g.name.clone());
            Ok((
                r.max_rel_error < GRAD_TOL,
                format!("max rel error {:.3e} in {worst} over {} elements", r.max_rel_error, r.elements),
            ))
        }),
        timed("shape-table", || {
            let rows = shape_table()?;
            let bad: Vec<String> = rows
                .iter()
                .filter(|r| r.expected != r.actual)
                .map(|r| format!("{} {:?} != {:?}", r.what, r.actual, r.expected))
                .collect();
            Ok((bad.is_empty(), if bad.is_empty() { format!("{} shapes", rows.len()) } else { bad.join("; ") }))
        }),
        timed("phi-properties", || {
            let r = phi_properties(100_000, 5)?;
            Ok((
                r.holds(),
                format!(
                    "|phi1| <= {:.6}, |phi2| <= {:.6}, {} antisymmetry violations, max phi2(u,u) {:.3e}",
                    r.max_abs_phi1, r.max_abs_phi2, r.antisymmetry_violations, r.max_self_phi2
                ),
            ))
        }),
        timed("residual-identity", || {
            residual_identity().map(|ok| (ok, if ok { "bitwise".into() } else { "output differs".into() }))
        }),
        timed("hyperparameters", || {
            let ok = hyperparameters_hold();
            Ok((ok, format!("{} values", hyperparameters().len())))
        }),
    ];
    if full {
        out.push(timed("training-sanity", || {
            let r = training_sanity(&SanitySetup::default())?;
            Ok((
                r.loss_ratio() < 0.5 && r.improvement() >= 0.2,
                format!(
                    "loss ratio {:.3}, future error {:.3} vs zero-velocity {:.3} ({:.1}% better)",
                    r.loss_ratio(),
                    r.model_mpjpe,
                    r.zero_velocity_mpjpe,
                    100.0 * r.improvement()
                ),
            ))
        }));
    }
    out
}
