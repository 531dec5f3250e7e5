//! The full network: per-level encoders, a stack of DD-GC blocks, a skip
//! path on the coarsest level, a linear decode and the global residual.

use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Adjacency4D, SkeletonKind, SkeletonTopology, SkeletonTransform, WeightInit};
use crate::kernels::{AggPlan, PhiMode};
use crate::layers::{clmp_tape, slmp_tape, xavier, Activation, SlmpTape, SlmpVars};
use crate::ops::{self, BN_EPS, BN_MOMENTUM};
use crate::params::{Bound, ParamSet};
use crate::rng::SeededRng;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

fn default_dropout() -> f64 {
    ops::DEFAULT_DROPOUT
}
fn default_bn_eps() -> f64 {
    BN_EPS
}
fn default_bn_momentum() -> f64 {
    BN_MOMENTUM
}
fn default_input_scale() -> f64 {
    1.0
}

/// Buffer holding the pose subtracted from encoder inputs, `[M, D]`.
pub const INPUT_OFFSET: &str = "input.offset";

/// Network shape and regularization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub t_history: usize,
    pub t_future: usize,
    pub joints: usize,
    pub input_dim: usize,
    pub d_hidden: usize,
    /// Number of DD-GC blocks.
    pub blocks: usize,
    /// Joint count per level, finest first; its length is `S + 1`.
    pub level_joint_counts: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub phi_mode: PhiMode,
    #[serde(default)]
    pub seed: u64,
    pub skeleton: SkeletonKind,
    #[serde(default)]
    pub weight_init: WeightInit,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    /// Encoders see `(x - offset) * input_scale`; the decoded correction is
    /// divided by it again before the residual.
    #[serde(default = "default_input_scale")]
    pub input_scale: f64,
}

impl Default for ModelConfig {
    /// 22 joints over 50 frames (10 observed), 128 hidden channels, three
    /// blocks and levels of 22, 11 and 2 nodes.
    fn default() -> Self {
        Self {
            t_history: 10,
            t_future: 40,
            joints: 22,
            input_dim: 3,
            d_hidden: 128,
            blocks: 3,
            level_joint_counts: vec![22, 11, 2],
            dropout: ops::DEFAULT_DROPOUT,
            phi_mode: PhiMode::default(),
            seed: 0,
            skeleton: SkeletonKind::H36m,
            weight_init: WeightInit::default(),
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
            input_scale: 1.0,
        }
    }
}

impl ModelConfig {
    /// `T = T_history + T_future`.
    pub fn frames(&self) -> usize {
        self.t_history + self.t_future
    }

    /// Extra levels `S`.
    pub fn extra_levels(&self) -> usize {
        self.level_joint_counts.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.blocks == 0 {
            return fail("blocks must be at least 1".into());
        }
        if self.t_history == 0 {
            return fail("t_history must be at least 1".into());
        }
        if self.frames() < 2 {
            return fail(format!("t_history + t_future = {} < 2", self.frames()));
        }
        if self.input_dim == 0 || self.d_hidden == 0 {
            return fail("input_dim and d_hidden must be positive".into());
        }
        if self.level_joint_counts.first() != Some(&self.joints) {
            return fail(format!(
                "level_joint_counts {:?} must start with joints = {}",
                self.level_joint_counts, self.joints
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail("bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return fail(format!("input_scale {} must be positive", self.input_scale));
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<SkeletonTopology> {
        self.validate()?;
        SkeletonTopology::from_kind(self.skeleton, self.joints, &self.level_joint_counts[1..])
    }
}

/// Replicates the last observed frame of `[T_h, M, D]` (or `[N, T_h, M, D]`)
/// until the sequence has `total` frames.
pub fn pad_history(x: &Tensor, total: usize) -> Result<Tensor> {
    let r = x.rank();
    if r < 3 {
        return Err(dim_err!("pad_history expects [.., T_h, M, D], got {:?}", x.shape()));
    }
    let th = x.shape()[r - 3];
    if th == 0 || total < th {
        return Err(Error::Config(format!(
            "cannot pad {th} observed frames to {total}"
        )));
    }
    let frame = x.shape()[r - 2] * x.shape()[r - 1];
    let mut shape = x.shape().to_vec();
    shape[r - 3] = total;
    let mut out = Vec::with_capacity(x.len() / th * total);
    for seq in x.data().chunks_exact(th * frame) {
        out.extend_from_slice(seq);
        let last = &seq[(th - 1) * frame..];
        for _ in th..total {
            out.extend_from_slice(last);
        }
    }
    Ok(Tensor::from_raw(&shape, out))
}

/// Whether a forward pass trains (batch statistics, dropout) or evaluates.
pub enum RunMode<'a> {
    Train(&'a mut SeededRng),
    Eval,
}

/// Output of [`Model::forward`].
pub struct ForwardOut {
    /// `[N, T, M, D]`.
    pub output: Var,
    pub padded: Tensor,
    /// Observed batch statistics per normalized block, in forward order.
    pub bn_updates: Vec<(String, BatchStats)>,
}

/// Parameter count, total and per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub groups: IndexMap<String, usize>,
}

/// Trainable parameters plus the fixed structure they act on.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    topology: SkeletonTopology,
    pub params: ParamSet,
    /// Batch-norm running statistics, `{layer}.running_mean` / `.running_var`,
    /// and the input offset.
    pub buffers: ParamSet,
    zbar: Vec<Tensor>,
    plans: Vec<Arc<AggPlan>>,
    decode_plan: Arc<AggPlan>,
}

const NORM_SUFFIXES: [&str; 2] = ["running_mean", "running_var"];

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let topology = config.topology()?;
        let mut rng = SeededRng::new(config.seed);
        let (t, d, dim) = (config.frames(), config.d_hidden, config.input_dim);
        let sizes = topology.level_sizes();
        let s_max = sizes.len() - 1;

        let mut graphs = Vec::with_capacity(sizes.len());
        let mut zbar = vec![Tensor::eye(config.joints)];
        let mut transforms = Vec::new();
        for s in 0..=s_max {
            let level_topo = if s == 0 {
                topology.clone()
            } else {
                level_topology(&topology, s)?
            };
            graphs.push(Adjacency4D::build(&level_topo, t, config.weight_init)?);
            if s > 0 {
                let zt = SkeletonTransform::init(&topology, s)?;
                zbar.push(zt.zbar.clone());
                transforms.push(zt);
            }
        }

        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        buffers.insert(INPUT_OFFSET, Tensor::zeros(&[config.joints, dim]))?;
        for zt in &transforms {
            params.insert(format!("transform.{}.z", zt.level), zt.z.clone())?;
        }
        let mut add_slmp = |prefix: &str, s: usize, d_in: usize, d_out: usize, norm: bool, rng: &mut SeededRng| -> Result<()> {
            let ms = sizes[s];
            params.insert(format!("{prefix}.adj"), graphs[s].weights().clone())?;
            params.insert(format!("{prefix}.theta"), xavier(&[ms, d_out, d_in], d_in, d_out, rng))?;
            params.insert(format!("{prefix}.bias"), Tensor::zeros(&[d_out]))?;
            if norm {
                params.insert(format!("{prefix}.gamma"), Tensor::filled(&[d_out], 1.0))?;
                params.insert(format!("{prefix}.beta"), Tensor::zeros(&[d_out]))?;
                buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[d_out]))?;
                buffers.insert(format!("{prefix}.running_var"), Tensor::filled(&[d_out], 1.0))?;
            }
            Ok(())
        };
        for s in 0..=s_max {
            add_slmp(&format!("enc.{s}"), s, dim, d, true, &mut rng)?;
        }
        for l in 0..config.blocks {
            for s in 0..=s_max {
                add_slmp(&format!("block.{l}.slmp.{s}"), s, d, d, true, &mut rng)?;
            }
        }
        add_slmp("skip", s_max, d, d, true, &mut rng)?;
        add_slmp("decode", 0, d, dim, false, &mut rng)?;
        for l in 0..config.blocks {
            for s in 1..=s_max {
                params.insert(format!("block.{l}.clmp.{s}.adj"), Tensor::eye(sizes[s]))?;
            }
        }

        let plans = graphs
            .iter()
            .map(|g| Arc::new(g.plan(config.phi_mode, d, None)))
            .collect();
        let decode_plan = Arc::new(graphs[0].plan(config.phi_mode, dim, None));
        Ok(Self {
            config: config.clone(),
            topology,
            params,
            buffers,
            zbar,
            plans,
            decode_plan,
        })
    }

    /// Rebuilds a model around stored parameters and buffers; every name and
    /// shape must match what `config` produces.
    pub fn from_parts(config: &ModelConfig, params: ParamSet, buffers: ParamSet) -> Result<Self> {
        let mut model = Self::init(config)?;
        for (fresh, given, what) in [
            (&mut model.params, params, "parameter"),
            (&mut model.buffers, buffers, "buffer"),
        ] {
            if given.len() != fresh.len() {
                return Err(Error::Checkpoint(format!(
                    "{} {what} tensors supplied, model has {}",
                    given.len(),
                    fresh.len()
                )));
            }
            for (name, value) in given.iter() {
                if !fresh.contains(name) {
                    return Err(Error::Checkpoint(format!("unknown {what} {name}")));
                }
                fresh.set(name, value.clone())?;
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topology
    }

    pub fn param_count(&self) -> ParamCount {
        param_count(&self.params)
    }

    fn slmp(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        h: Var,
        plan: &Arc<AggPlan>,
        mode: &mut RunMode<'_>,
        updates: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let var = |k: &str| bound.var(&format!("{prefix}.{k}"));
        let normalized = bound.var(&format!("{prefix}.gamma")).is_ok();
        let vars = SlmpVars {
            adj: var("adj")?,
            theta: var("theta")?,
            bias: var("bias")?,
            bn: if normalized { Some((var("gamma")?, var("beta")?)) } else { None },
        };
        let running = if normalized {
            let [m, v] = NORM_SUFFIXES.map(|k| self.buffers.get(&format!("{prefix}.{k}")));
            Some((m?.data(), v?.data()))
        } else {
            None
        };
        let spec = SlmpTape {
            plan: plan.clone(),
            activation: if normalized { Activation::Tanh } else { Activation::Identity },
            norm: running.map(|(m, v)| (m, v, self.config.bn_eps, self.config.dropout)),
        };
        let rng = match mode {
            RunMode::Train(rng) => Some(&mut **rng),
            RunMode::Eval => None,
        };
        let (out, stats) = slmp_tape(tape, h, vars, &spec, rng)?;
        if let Some(st) = stats {
            updates.push((prefix.to_string(), st));
        }
        Ok(out)
    }

    /// Records the whole network on `tape` for observed frames
    /// `x: [N, T_h, M, D]`, returning the `[N, T, M, D]` prediction.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: &Tensor, mut mode: RunMode<'_>) -> Result<ForwardOut> {
        let c = &self.config;
        if x.rank() != 4 || x.shape()[1..] != [c.t_history, c.joints, c.input_dim] {
            return Err(dim_err!(
                "model expects [N, {}, {}, {}], got {:?}",
                c.t_history,
                c.joints,
                c.input_dim,
                x.shape()
            ));
        }
        let padded = pad_history(x, c.frames())?;
        let p = tape.constant(padded.clone());
        let offset = self.buffers.get(INPUT_OFFSET)?.data();
        let mut centered = padded.clone();
        for frame in centered.data_mut().chunks_exact_mut(offset.len()) {
            for (v, o) in frame.iter_mut().zip(offset) {
                *v = (*v - o) * c.input_scale;
            }
        }
        let u = tape.constant(centered);
        let s_max = c.extra_levels();
        let mut updates = Vec::new();

        let mut hs = Vec::with_capacity(s_max + 1);
        for s in 0..=s_max {
            let f = if s == 0 {
                u
            } else {
                let z = bound.var(&format!("transform.{s}.z"))?;
                tape.mix_joints(z, u, true)?
            };
            hs.push(self.slmp(tape, bound, &format!("enc.{s}"), f, &self.plans[s], &mut mode, &mut updates)?);
        }
        let skip = self.slmp(tape, bound, "skip", hs[s_max], &self.plans[s_max], &mut mode, &mut updates)?;

        let zbar: Vec<Var> = self.zbar.iter().map(|z| tape.constant(z.clone())).collect();
        for l in 0..c.blocks {
            let mut outs = Vec::with_capacity(s_max + 1);
            for (s, &h) in hs.iter().enumerate() {
                let prefix = format!("block.{l}.slmp.{s}");
                outs.push(self.slmp(tape, bound, &prefix, h, &self.plans[s], &mut mode, &mut updates)?);
            }
            if l + 1 == c.blocks {
                outs[s_max] = tape.add(outs[s_max], skip)?;
            }
            let mut fused = outs[0];
            for s in 1..=s_max {
                let a = bound.var(&format!("block.{l}.clmp.{s}.adj"))?;
                let msg = clmp_tape(tape, outs[s], a, None, zbar[s])?;
                fused = tape.add(fused, msg)?;
            }
            outs[0] = fused;
            hs = outs;
        }
        let mut decoded = self.slmp(tape, bound, "decode", hs[0], &self.decode_plan, &mut mode, &mut updates)?;
        if c.input_scale != 1.0 {
            decoded = tape.scale(decoded, 1.0 / c.input_scale);
        }
        let output = tape.add(decoded, p)?;
        Ok(ForwardOut {
            output,
            padded,
            bn_updates: updates,
        })
    }

    /// Eval-mode prediction for `x: [N, T_h, M, D]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constants(&mut tape);
        let out = self.forward(&mut tape, &bound, x, RunMode::Eval)?;
        Ok(tape.value(out.output).clone())
    }

    /// Sets the pose subtracted from every input frame, `[M, D]`.
    pub fn set_input_offset(&mut self, offset: Tensor) -> Result<()> {
        self.buffers.set(INPUT_OFFSET, offset)
    }

    /// Folds observed batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, st) in updates {
            let mut mean = self.buffers.get(&format!("{prefix}.running_mean"))?.data().to_vec();
            let mut var = self.buffers.get(&format!("{prefix}.running_var"))?.data().to_vec();
            ops::update_running(&mut mean, &mut var, &st.mean, &st.var, st.count, self.config.bn_momentum);
            let n = mean.len();
            self.buffers.set(&format!("{prefix}.running_mean"), Tensor::from_raw(&[n], mean))?;
            self.buffers.set(&format!("{prefix}.running_var"), Tensor::from_raw(&[n], var))?;
        }
        Ok(())
    }

    /// Per-level adjacency structure (support and degrees) used by the plans.
    pub fn level_graph(&self, level: usize) -> Result<Adjacency4D> {
        let topo = if level == 0 {
            self.topology.clone()
        } else {
            level_topology(&self.topology, level)?
        };
        let mut g = Adjacency4D::build(&topo, self.config.frames(), self.config.weight_init)?;
        g.set_weights(self.params.get(&format!("block.0.slmp.{level}.adj"))?.clone())?;
        Ok(g)
    }
}

/// The coarse skeleton of level `s`: parts joined when any bone links their
/// members.
pub fn level_topology(topo: &SkeletonTopology, level: usize) -> Result<SkeletonTopology> {
    let grouping = topo.grouping(level)?;
    let mut owner = vec![0; topo.joints()];
    for (p, part) in grouping.iter().enumerate() {
        for &j in part {
            owner[j] = p;
        }
    }
    let mut bones = Vec::new();
    for &(a, b) in topo.bones() {
        let (pa, pb) = (owner[a].min(owner[b]), owner[a].max(owner[b]));
        if pa != pb && !bones.contains(&(pa, pb)) {
            bones.push((pa, pb));
        }
    }
    SkeletonTopology::new(grouping.len(), bones, vec![])
}

/// Scalar count of a parameter set grouped by layer (the name without its
/// final component).
pub fn param_count(params: &ParamSet) -> ParamCount {
    let mut groups: IndexMap<String, usize> = IndexMap::new();
    for (name, t) in params.iter() {
        let layer = name.rsplit_once('.').map_or(name, |(head, _)| head);
        *groups.entry(layer.to_string()).or_default() += t.len();
    }
    ParamCount {
        total: groups.values().sum(),
        groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            t_history: 3,
            t_future: 1,
            joints: 4,
            input_dim: 3,
            d_hidden: 8,
            blocks: 1,
            level_joint_counts: vec![4, 2, 1],
            dropout: 0.1,
            phi_mode: PhiMode::Phi1,
            seed: 11,
            skeleton: SkeletonKind::Chain,
            weight_init: WeightInit::RowNormalized,
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
            input_scale: 1.0,
        }
    }

    #[test]
    fn pad_examples() {
        let x = Tensor::new(&[2, 1, 1], vec![1.0, 2.0]).unwrap();
        let p = pad_history(&x, 4).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 2.0, 2.0]);
        assert_eq!(pad_history(&x, 2).unwrap(), x);
        assert!(matches!(pad_history(&x, 1), Err(Error::Config(_))));
        let b = Tensor::new(&[2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pad_history(&b, 3).unwrap().data(), &[1.0, 2.0, 2.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.blocks = 0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.level_joint_counts = vec![5, 2];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.t_history = 1;
        c.t_future = 0;
        assert!(c.validate().is_err());
        let json = r#"{"t_history":1,"t_future":1,"joints":2,"input_dim":3,"d_hidden":4,
            "blocks":1,"level_joint_counts":[2],"skeleton":"chain","bogus":1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }

    #[test]
    fn init_is_seeded_and_structured() {
        let a = Model::init(&tiny()).unwrap();
        let b = Model::init(&tiny()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.params.get("block.0.clmp.1.adj").unwrap(), &Tensor::eye(2));
        assert_eq!(a.params.get("block.0.clmp.2.adj").unwrap(), &Tensor::eye(1));
        for (name, t) in a.params.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert_eq!(a.params.get("decode.theta").unwrap().shape(), &[4, 3, 8]);
        assert_eq!(a.params.get("skip.adj").unwrap().shape(), &[4, 1, 4, 1]);
    }

    #[test]
    fn forward_shapes_and_eval_determinism() {
        let m = Model::init(&tiny()).unwrap();
        let mut rng = SeededRng::new(2);
        let x = rng.uniform_tensor(&[3, 3, 4, 3], -1.0, 1.0);
        let y1 = m.predict(&x).unwrap();
        let y2 = m.predict(&x).unwrap();
        assert_eq!(y1.shape(), &[3, 4, 4, 3]);
        assert_eq!(y1, y2);
        assert!(m.predict(&Tensor::zeros(&[3, 3, 5, 3])).is_err());
    }

    #[test]
    fn eval_permutes_with_batch() {
        let m = Model::init(&tiny()).unwrap();
        let mut rng = SeededRng::new(4);
        let x = rng.uniform_tensor(&[2, 3, 4, 3], -1.0, 1.0);
        let swapped = Tensor::new(
            x.shape(),
            [&x.data()[36..], &x.data()[..36]].concat(),
        )
        .unwrap();
        let y = m.predict(&x).unwrap();
        let ys = m.predict(&swapped).unwrap();
        assert_eq!(&y.data()[..48], &ys.data()[48..]);
        assert_eq!(&y.data()[48..], &ys.data()[..48]);
    }

    #[test]
    fn zero_decode_returns_padded_input() {
        let mut m = Model::init(&tiny()).unwrap();
        for k in ["adj", "theta", "bias"] {
            let name = format!("decode.{k}");
            let shape = m.params.get(&name).unwrap().shape().to_vec();
            m.params.set(&name, Tensor::zeros(&shape)).unwrap();
        }
        let mut rng = SeededRng::new(9);
        let x = rng.uniform_tensor(&[2, 3, 4, 3], -1.0, 1.0);
        assert_eq!(m.predict(&x).unwrap(), pad_history(&x, 4).unwrap());
    }

    #[test]
    fn counts() {
        let mut p = ParamSet::new();
        p.insert("l.theta", Tensor::zeros(&[2, 2])).unwrap();
        p.insert("l.bias", Tensor::zeros(&[2])).unwrap();
        assert_eq!(param_count(&p).total, 6);
        let mut p = ParamSet::new();
        p.insert("l.theta", Tensor::zeros(&[3, 2, 2])).unwrap();
        p.insert("l.bias", Tensor::zeros(&[2])).unwrap();
        let c = param_count(&p);
        assert_eq!(c.total, 14);
        assert_eq!(c.groups["l"], 14);
    }

    #[test]
    fn coarse_topologies_connect_parts() {
        let topo = SkeletonTopology::h36m(&[11, 2]).unwrap();
        let l1 = level_topology(&topo, 1).unwrap();
        assert_eq!(l1.joints(), 11);
        assert!(l1.parents().iter().skip(1).all(Option::is_some));
        assert_eq!(level_topology(&topo, 2).unwrap().bones(), &[(0, 1)]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = Model::init(&tiny()).unwrap();
        let mut rng = SeededRng::new(21);
        let x = rng.uniform_tensor(&[2, 3, 4, 3], -1.0, 1.0);
        let target = Arc::new(rng.uniform_tensor(&[2, 4, 4, 3], -1.0, 1.0));
        let report = crate::gradcheck::finite_diff_check(&m.params, 1e-6, |tape, bound| {
            let mut drop_rng = SeededRng::new(5);
            let out = m.forward(tape, bound, &x, RunMode::Train(&mut drop_rng))?;
            tape.mpjpe(out.output, target.clone())
        })
        .unwrap();
        let worst = report.worst_group().unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.to_csv());
        assert!(worst.elements > 0);
    }

    #[test]
    fn training_forward_reports_bn_stats() {
        let m = Model::init(&tiny()).unwrap();
        let mut rng = SeededRng::new(3);
        let x = rng.uniform_tensor(&[2, 3, 4, 3], -1.0, 1.0);
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape);
        let out = m.forward(&mut tape, &bound, &x, RunMode::Train(&mut rng)).unwrap();
        // encoders (3) + block slmps (3) + skip
        assert_eq!(out.bn_updates.len(), 7);
        assert_eq!(tape.value(out.output).shape(), &[2, 4, 4, 3]);
    }
}
