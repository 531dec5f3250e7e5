use crate::data::Windows;
use crate::error::{dim_err, Error, Result};
use crate::model::{pad_history, Model};
use crate::tensor::Tensor;
use crate::training::loss::mpjpe_per_frame;

/// Anything mapping observed frames `[N, T_h, M, D]` to a full
/// `[N, T, M, D]` sequence.
pub trait Predictor {
    fn predict(&self, history: &Tensor) -> Result<Tensor>;
}

impl Predictor for Model {
    fn predict(&self, history: &Tensor) -> Result<Tensor> {
        Model::predict(self, history)
    }
}

/// Repeats the last observed frame.
#[derive(Debug, Clone, Copy)]
pub struct ZeroVelocity {
    pub t_future: usize,
}

impl Predictor for ZeroVelocity {
    fn predict(&self, history: &Tensor) -> Result<Tensor> {
        let th = history.shape().get(1).copied().unwrap_or(0);
        pad_history(history, th + self.t_future)
    }
}

/// Future frame reached after `ms` milliseconds at `fps`, counting the first
/// predicted frame as 1.
pub fn horizon_offset(ms: f64, fps: f64) -> Result<usize> {
    if !(ms > 0.0) || !(fps > 0.0) {
        return Err(Error::Range(format!("horizon {ms} ms at {fps} fps")));
    }
    let k = (ms * fps / 1000.0).round();
    if k < 1.0 {
        return Err(Error::Range(format!(
            "horizon {ms} ms is shorter than one frame at {fps} fps"
        )));
    }
    Ok(k as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonRow {
    pub horizon_ms: f64,
    pub frame_offset: usize,
    /// Error on the single frame at the horizon.
    pub mpjpe: f64,
    /// Error averaged over every future frame up to the horizon.
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HorizonTable {
    pub rows: Vec<HorizonRow>,
}

impl HorizonTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon_ms,frame_offset,mpjpe_mm,cumulative_mm\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.horizon_ms, r.frame_offset, r.mpjpe, r.cumulative));
        }
        s
    }

    /// `(horizon_ms, single-frame error)` pairs.
    pub fn error_rows(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.horizon_ms, r.mpjpe)).collect()
    }
}

const EVAL_CHUNK: usize = 32;

/// Mean error of each future frame over all windows.
pub fn future_errors(p: &dyn Predictor, data: &Windows) -> Result<Vec<f64>> {
    let (th, tf) = (data.t_history(), data.t_future());
    let frame = data.joints() * data.dims();
    let mut sums = vec![0.0; tf];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let pred = p.predict(&x)?;
        if pred.shape() != y.shape() {
            return Err(dim_err!(
                "predictor returned {:?}, expected {:?}",
                pred.shape(),
                y.shape()
            ));
        }
        let b = chunk.len();
        let future = |t: &Tensor| -> Tensor {
            let mut out = Vec::with_capacity(b * tf * frame);
            for seq in t.data().chunks_exact((th + tf) * frame) {
                out.extend_from_slice(&seq[th * frame..]);
            }
            Tensor::from_raw(&[b, tf, data.joints(), data.dims()], out)
        };
        for (s, e) in sums.iter_mut().zip(mpjpe_per_frame(&future(&pred), &future(&y))?) {
            *s += e * b as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / data.len() as f64).collect())
}

/// Mean error over every future frame.
pub fn future_mpjpe(p: &dyn Predictor, data: &Windows) -> Result<f64> {
    let e = future_errors(p, data)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Single-frame and cumulative errors at each horizon.
pub fn evaluate_horizons(
    p: &dyn Predictor,
    data: &Windows,
    horizons_ms: &[f64],
    fps: f64,
) -> Result<HorizonTable> {
    let offsets = horizons_ms
        .iter()
        .map(|&ms| {
            let k = horizon_offset(ms, fps)?;
            if k > data.t_future() {
                return Err(Error::Range(format!(
                    "horizon {ms} ms is frame {k}, beyond the {} predicted frames",
                    data.t_future()
                )));
            }
            Ok(k)
        })
        .collect::<Result<Vec<_>>>()?;
    let per_frame = future_errors(p, data)?;
    let mut rows: Vec<HorizonRow> = horizons_ms
        .iter()
        .zip(offsets)
        .map(|(&ms, k)| HorizonRow {
            horizon_ms: ms,
            frame_offset: k,
            mpjpe: per_frame[k - 1],
            cumulative: per_frame[..k].iter().sum::<f64>() / k as f64,
        })
        .collect();
    rows.sort_by(|a, b| a.horizon_ms.total_cmp(&b.horizon_ms));
    Ok(HorizonTable { rows })
}
