//! Forward and backward kernels over batched `[N, T, M, d]` node features.
//!
//! Samples are processed in parallel; any reduction across samples is done
//! sequentially in sample order so results never depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{softsign_grad_scalar, softsign_scalar};

/// Data-dependent edge weight added to the shared adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PhiMode {
    /// `softsign(mean(h_target) - mean(h_source))`
    #[default]
    Phi1,
    /// `softsign(-<h_target, h_source>)`
    Phi2,
    /// Static aggregation, no dynamic term.
    Off,
}

/// How adjacency weights are laid out and which source nodes a target row
/// reads from. Rows and columns index nodes as `frame * M + joint`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Weights `[T, M, T, M]`; every node is a candidate source.
    Dense,
    /// Weights `[T, M, M]`; sources share the target's frame.
    Pose,
    /// Weights `[M, T, T]`; sources share the target's joint.
    Trajectory,
}

/// Everything the aggregation kernel needs besides features and weights.
#[derive(Debug, Clone)]
pub(crate) struct AggPlan {
    pub frames: usize,
    pub joints: usize,
    pub layout: Layout,
    /// `1 / |N(v)|` per target node.
    pub inv_degree: Vec<f64>,
    /// Optional 0/1 edge mask, `[TM, TM]`, only with `Layout::Dense`.
    pub mask: Option<Vec<f64>>,
    pub phi: PhiMode,
    /// `1 / sqrt(d_out)`.
    pub scale: f64,
}

impl AggPlan {
    pub fn nodes(&self) -> usize {
        self.frames * self.joints
    }

    pub fn weight_len(&self) -> usize {
        let (t, m) = (self.frames, self.joints);
        match self.layout {
            Layout::Dense => t * m * t * m,
            Layout::Pose => t * m * m,
            Layout::Trajectory => m * t * t,
        }
    }

    /// `(first source, source stride, count, first weight index)`; the
    /// weight index advances by one per source.
    #[inline]
    fn sources(&self, r: usize) -> (usize, usize, usize, usize) {
        let (t, m) = (self.frames, self.joints);
        let (i, j) = (r / m, r % m);
        match self.layout {
            Layout::Dense => (0, 1, t * m, r * t * m),
            Layout::Pose => (i * m, 1, m, (i * m + j) * m),
            Layout::Trajectory => (j, m, t, (j * t + i) * t),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(out: &mut [f64], k: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += k * v;
    }
}

fn row_means(h: &[f64], d: usize) -> Vec<f64> {
    h.chunks_exact(d).map(|r| r.iter().sum::<f64>() / d as f64).collect()
}

fn aggregate_sample(plan: &AggPlan, w: &[f64], h: &[f64], d: usize, out: &mut [f64]) {
    let p = plan.nodes();
    let means = (plan.phi == PhiMode::Phi1).then(|| row_means(h, d));
    for r in 0..p {
        let (c0, cstep, count, w0) = plan.sources(r);
        let hr = &h[r * d..(r + 1) * d];
        let orow = &mut out[r * d..(r + 1) * d];
        let inv_deg = plan.inv_degree[r];
        for k in 0..count {
            let c = c0 + k * cstep;
            let hc = &h[c * d..(c + 1) * d];
            let mut coef = w[w0 + k] * inv_deg;
            match plan.phi {
                PhiMode::Off => {}
                PhiMode::Phi1 => {
                    let mm = means.as_ref().unwrap();
                    coef += plan.scale * softsign_scalar(mm[r] - mm[c]);
                }
                PhiMode::Phi2 => coef += plan.scale * softsign_scalar(-dot(hr, hc)),
            }
            if let Some(mask) = &plan.mask {
                coef *= mask[r * p + c];
            }
            axpy(orow, coef, hc);
        }
    }
}

/// Messages `m[r] = sum_c (w[r,c] / |N(r)| + phi(r,c) / sqrt(d_out)) h[c]`.
pub(crate) fn aggregate_forward(plan: &AggPlan, w: &[f64], h: &[f64], d: usize) -> Vec<f64> {
    let per = plan.nodes() * d;
    let mut out = vec![0.0; h.len()];
    out.par_chunks_mut(per)
        .zip(h.par_chunks(per))
        .for_each(|(o, hs)| aggregate_sample(plan, w, hs, d, o));
    out
}

fn aggregate_backward_sample(
    plan: &AggPlan,
    w: &[f64],
    h: &[f64],
    g: &[f64],
    d: usize,
    dh: &mut [f64],
    dw: &mut [f64],
) {
    let p = plan.nodes();
    let means = (plan.phi == PhiMode::Phi1).then(|| row_means(h, d));
    let mut dmean = vec![0.0; if means.is_some() { p } else { 0 }];
    for r in 0..p {
        let (c0, cstep, count, w0) = plan.sources(r);
        let inv_deg = plan.inv_degree[r];
        let gr = &g[r * d..(r + 1) * d];
        for k in 0..count {
            let c = c0 + k * cstep;
            let mk = plan.mask.as_ref().map_or(1.0, |mask| mask[r * p + c]);
            if mk == 0.0 {
                continue;
            }
            let hc = &h[c * d..(c + 1) * d];
            let gdot = dot(gr, hc) * mk;
            dw[w0 + k] += inv_deg * gdot;
            let mut coef = w[w0 + k] * inv_deg;
            match plan.phi {
                PhiMode::Off => {}
                PhiMode::Phi1 => {
                    let mm = means.as_ref().unwrap();
                    let x = mm[r] - mm[c];
                    coef += plan.scale * softsign_scalar(x);
                    let dx = plan.scale * gdot * softsign_grad_scalar(x);
                    dmean[r] += dx;
                    dmean[c] -= dx;
                }
                PhiMode::Phi2 => {
                    let hr = &h[r * d..(r + 1) * d];
                    let x = -dot(hr, hc);
                    coef += plan.scale * softsign_scalar(x);
                    let dx = plan.scale * gdot * softsign_grad_scalar(x);
                    for q in 0..d {
                        dh[r * d + q] -= dx * hc[q];
                        dh[c * d + q] -= dx * hr[q];
                    }
                }
            }
            coef *= mk;
            for q in 0..d {
                dh[c * d + q] += coef * gr[q];
            }
        }
    }
    if !dmean.is_empty() {
        let inv_d = 1.0 / d as f64;
        for (r, dm) in dmean.iter().enumerate() {
            for v in &mut dh[r * d..(r + 1) * d] {
                *v += dm * inv_d;
            }
        }
    }
}

/// Returns `(d loss / d h, d loss / d weights)`.
pub(crate) fn aggregate_backward(
    plan: &AggPlan,
    w: &[f64],
    h: &[f64],
    g: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let per = plan.nodes() * d;
    let wl = plan.weight_len();
    let mut dh = vec![0.0; h.len()];
    let partials: Vec<Vec<f64>> = dh
        .par_chunks_mut(per)
        .zip(h.par_chunks(per).zip(g.par_chunks(per)))
        .map(|(dhs, (hs, gs))| {
            let mut dw = vec![0.0; wl];
            aggregate_backward_sample(plan, w, hs, gs, d, dhs, &mut dw);
            dw
        })
        .collect();
    let mut dw = vec![0.0; wl];
    for part in &partials {
        for (a, b) in dw.iter_mut().zip(part) {
            *a += b;
        }
    }
    (dh, dw)
}

/// Rows are the flattened leading axes, one row per node; `joints` is the
/// extent of the joint axis just before the channel axis.
pub(crate) struct LinearShape {
    pub joints: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// One `[d_out, d_in]` matrix shared by all joints.
    pub shared: bool,
}

impl LinearShape {
    #[inline]
    fn theta_offset(&self, j: usize) -> usize {
        if self.shared {
            0
        } else {
            j * self.d_out * self.d_in
        }
    }
}

/// `out[.., j, :] = Theta_j x[.., j, :] + b`.
pub(crate) fn joint_linear_forward(
    s: &LinearShape,
    x: &[f64],
    theta: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let rows = x.len() / s.d_in;
    let mut out = vec![0.0; rows * s.d_out];
    let frame_in = s.joints * s.d_in;
    let frame_out = s.joints * s.d_out;
    out.par_chunks_mut(frame_out)
        .zip(x.par_chunks(frame_in))
        .for_each(|(o, xs)| {
            for j in 0..s.joints {
                let th = &theta[s.theta_offset(j)..s.theta_offset(j) + s.d_out * s.d_in];
                let xj = &xs[j * s.d_in..(j + 1) * s.d_in];
                for (q, ov) in o[j * s.d_out..(j + 1) * s.d_out].iter_mut().enumerate() {
                    *ov = dot(&th[q * s.d_in..(q + 1) * s.d_in], xj) + bias.map_or(0.0, |b| b[q]);
                }
            }
        });
    out
}

/// Returns `(dx, dtheta, dbias)`.
pub(crate) fn joint_linear_backward(
    s: &LinearShape,
    x: &[f64],
    theta: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let frame_in = s.joints * s.d_in;
    let frame_out = s.joints * s.d_out;
    let frames = x.len() / frame_in;
    let mut dx = vec![0.0; x.len()];
    dx.par_chunks_mut(frame_in)
        .zip(g.par_chunks(frame_out))
        .for_each(|(dxs, gs)| {
            for j in 0..s.joints {
                let th = &theta[s.theta_offset(j)..s.theta_offset(j) + s.d_out * s.d_in];
                let dxj = &mut dxs[j * s.d_in..(j + 1) * s.d_in];
                for q in 0..s.d_out {
                    axpy(dxj, gs[j * s.d_out + q], &th[q * s.d_in..(q + 1) * s.d_in]);
                }
            }
        });

    let block = s.d_out * s.d_in;
    // Per-joint parameter gradients; each joint sums its frames in order.
    let per_joint: Vec<Vec<f64>> = (0..s.joints)
        .into_par_iter()
        .map(|j| {
            let mut dth = vec![0.0; block];
            for f in 0..frames {
                let xj = &x[f * frame_in + j * s.d_in..f * frame_in + (j + 1) * s.d_in];
                let gj = &g[f * frame_out + j * s.d_out..f * frame_out + (j + 1) * s.d_out];
                for q in 0..s.d_out {
                    axpy(&mut dth[q * s.d_in..(q + 1) * s.d_in], gj[q], xj);
                }
            }
            dth
        })
        .collect();
    let dtheta = if s.shared {
        let mut acc = vec![0.0; block];
        for part in &per_joint {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        }
        acc
    } else {
        per_joint.concat()
    };

    let mut dbias = vec![0.0; s.d_out];
    for row in g.chunks_exact(s.d_out) {
        for (a, b) in dbias.iter_mut().zip(row) {
            *a += b;
        }
    }
    (dx, dtheta, dbias)
}

/// Mixes the joint axis: `out[.., p, :] = sum_q W[p, q] x[.., q, :]`, or
/// with `transpose`, `sum_q W[q, p] x[.., q, :]`.
pub(crate) struct MixShape {
    pub m_in: usize,
    pub m_out: usize,
    pub d: usize,
    pub transpose: bool,
}

impl MixShape {
    #[inline]
    fn w(&self, w: &[f64], p: usize, q: usize) -> f64 {
        if self.transpose {
            w[q * self.m_out + p]
        } else {
            w[p * self.m_in + q]
        }
    }

    #[inline]
    fn w_index(&self, p: usize, q: usize) -> usize {
        if self.transpose {
            q * self.m_out + p
        } else {
            p * self.m_in + q
        }
    }
}

pub(crate) fn mix_forward(s: &MixShape, w: &[f64], x: &[f64]) -> Vec<f64> {
    let fin = s.m_in * s.d;
    let fout = s.m_out * s.d;
    let frames = x.len() / fin;
    let mut out = vec![0.0; frames * fout];
    for f in 0..frames {
        let xs = &x[f * fin..(f + 1) * fin];
        let os = &mut out[f * fout..(f + 1) * fout];
        for p in 0..s.m_out {
            for q in 0..s.m_in {
                let k = s.w(w, p, q);
                if k != 0.0 {
                    axpy(&mut os[p * s.d..(p + 1) * s.d], k, &xs[q * s.d..(q + 1) * s.d]);
                }
            }
        }
    }
    out
}

/// Returns `(dx, dW)`.
pub(crate) fn mix_backward(s: &MixShape, w: &[f64], x: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let fin = s.m_in * s.d;
    let fout = s.m_out * s.d;
    let frames = x.len() / fin;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; s.m_in * s.m_out];
    for f in 0..frames {
        let xs = &x[f * fin..(f + 1) * fin];
        let gs = &g[f * fout..(f + 1) * fout];
        let dxs = &mut dx[f * fin..(f + 1) * fin];
        for p in 0..s.m_out {
            let gp = &gs[p * s.d..(p + 1) * s.d];
            for q in 0..s.m_in {
                dw[s.w_index(p, q)] += dot(gp, &xs[q * s.d..(q + 1) * s.d]);
                axpy(&mut dxs[q * s.d..(q + 1) * s.d], s.w(w, p, q), gp);
            }
        }
    }
    (dx, dw)
}
