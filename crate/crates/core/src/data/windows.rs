use crate::data::MotionSequence;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Cuts `(history [T_h, M, D], future [T_f, M, D])` windows starting at
/// frames `0, stride, 2 * stride, ...`.
pub fn split_windows(
    seq: &MotionSequence,
    t_h: usize,
    t_f: usize,
    stride: usize,
) -> Result<Vec<(Tensor, Tensor)>> {
    let total = seq.len();
    if t_h == 0 || stride == 0 {
        return Err(Error::Config("history length and stride must be positive".into()));
    }
    if t_h + t_f > total {
        return Err(Error::Config(format!(
            "window of {} frames is longer than the {total}-frame sequence",
            t_h + t_f
        )));
    }
    let frame = seq.joints() * seq.dims();
    let (m, d) = (seq.joints(), seq.dims());
    let data = seq.frames.data();
    Ok((0..=total - t_h - t_f)
        .step_by(stride)
        .map(|s| {
            let h = &data[s * frame..(s + t_h) * frame];
            let f = &data[(s + t_h) * frame..(s + t_h + t_f) * frame];
            (
                Tensor::from_raw(&[t_h, m, d], h.to_vec()),
                Tensor::from_raw(&[t_f, m, d], f.to_vec()),
            )
        })
        .collect())
}

/// A stack of windows: `history [N, T_h, M, D]`, `future [N, T_f, M, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Windows {
    pub history: Tensor,
    pub future: Tensor,
}

impl Windows {
    pub fn from_pairs(pairs: &[(Tensor, Tensor)]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Config("no windows to stack".into()))?;
        let (hs, fs) = (first.0.shape().to_vec(), first.1.shape().to_vec());
        let mut h = Vec::with_capacity(pairs.len() * first.0.len());
        let mut f = Vec::with_capacity(pairs.len() * first.1.len());
        for (a, b) in pairs {
            if a.shape() != hs || b.shape() != fs {
                return Err(dim_err!(
                    "window shapes differ: {:?}/{:?} vs {hs:?}/{fs:?}",
                    a.shape(),
                    b.shape()
                ));
            }
            h.extend_from_slice(a.data());
            f.extend_from_slice(b.data());
        }
        let stack = |s: &[usize]| [&[pairs.len()][..], s].concat();
        Ok(Self {
            history: Tensor::from_raw(&stack(&hs), h),
            future: Tensor::from_raw(&stack(&fs), f),
        })
    }

    pub fn len(&self) -> usize {
        self.history.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn t_history(&self) -> usize {
        self.history.shape()[1]
    }

    pub fn t_future(&self) -> usize {
        self.future.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.history.shape()[2]
    }

    pub fn dims(&self) -> usize {
        self.history.shape()[3]
    }

    /// Mean observed pose over every history frame, `[M, D]`.
    pub fn mean_pose(&self) -> Tensor {
        let frame = self.joints() * self.dims();
        let mut sum = vec![0.0; frame];
        for f in self.history.data().chunks_exact(frame) {
            for (s, v) in sum.iter_mut().zip(f) {
                *s += v;
            }
        }
        let n = (self.history.len() / frame).max(1) as f64;
        Tensor::from_raw(&[self.joints(), self.dims()], sum.into_iter().map(|s| s / n).collect())
    }

    /// Observed frames `[B, T_h, M, D]` and full targets `[B, T, M, D]` for
    /// the given window indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let (th, tf) = (self.t_history(), self.t_future());
        let frame = self.joints() * self.dims();
        let (hd, fd) = (self.history.data(), self.future.data());
        let mut x = Vec::with_capacity(indices.len() * th * frame);
        let mut y = Vec::with_capacity(indices.len() * (th + tf) * frame);
        for &i in indices {
            let h = &hd[i * th * frame..(i + 1) * th * frame];
            x.extend_from_slice(h);
            y.extend_from_slice(h);
            y.extend_from_slice(&fd[i * tf * frame..(i + 1) * tf * frame]);
        }
        let (m, d, b) = (self.joints(), self.dims(), indices.len());
        (
            Tensor::from_raw(&[b, th, m, d], x),
            Tensor::from_raw(&[b, th + tf, m, d], y),
        )
    }
}

/// Windows grouped by whole sequences, so no window mixes two splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Windows,
    pub val: Option<Windows>,
    pub test: Option<Windows>,
}

impl DatasetSplit {
    /// The last `val_fraction` and `test_fraction` of the sequences (rounded
    /// down) become validation and test data, in that order; the rest trains.
    pub fn from_sequences(
        seqs: &[MotionSequence],
        t_h: usize,
        t_f: usize,
        stride: usize,
        val_fraction: f64,
        test_fraction: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&(val_fraction + test_fraction)) || val_fraction < 0.0 || test_fraction < 0.0 {
            return Err(Error::Config("split fractions must be >= 0 and sum below 1".into()));
        }
        let n = seqs.len();
        let n_val = (n as f64 * val_fraction).floor() as usize;
        let n_test = (n as f64 * test_fraction).floor() as usize;
        let n_train = n - n_val - n_test;
        if n_train == 0 {
            return Err(Error::Config("no sequences left for training".into()));
        }
        let stack = |part: &[MotionSequence]| -> Result<Option<Windows>> {
            if part.is_empty() {
                return Ok(None);
            }
            let mut pairs = Vec::new();
            for s in part {
                pairs.extend(split_windows(s, t_h, t_f, stride)?);
            }
            Windows::from_pairs(&pairs).map(Some)
        };
        Ok(Self {
            train: stack(&seqs[..n_train])?.expect("non-empty train split"),
            val: stack(&seqs[n_train..n_train + n_val])?,
            test: stack(&seqs[n_train + n_val..])?,
        })
    }
}
