use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Mean per-joint position error: the Euclidean norm along the last axis,
/// averaged over every leading index.
pub fn mpjpe(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rank() == 0 {
        return Err(dim_err!(
            "mpjpe: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    let d = *pred.shape().last().unwrap();
    let rows = pred.data().chunks_exact(d).zip(target.data().chunks_exact(d));
    let count = pred.len() / d;
    let total = compensated_sum(
        rows.map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()),
    );
    Ok(total / count as f64)
}

/// Neumaier summation; keeps the loss smooth enough for central differences
/// at small steps.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Error per frame of `[.., T, M, D]` data, averaged over every other
/// leading axis and the joints.
pub fn mpjpe_per_frame(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != target.shape() || pred.rank() < 3 {
        return Err(dim_err!(
            "mpjpe_per_frame needs matching [.., T, M, D], got {:?} vs {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    let r = pred.rank();
    let (t, m, d) = (pred.shape()[r - 3], pred.shape()[r - 2], pred.shape()[r - 1]);
    let mut sums = vec![0.0; t];
    let mut rows = 0usize;
    for (k, (p, q)) in pred.data().chunks_exact(d).zip(target.data().chunks_exact(d)).enumerate() {
        let frame = (k / m) % t;
        sums[frame] += p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        rows += 1;
    }
    let per_frame = (rows / t) as f64;
    Ok(sums.into_iter().map(|s| s / per_frame).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let p = Tensor::new(&[2, 3], vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let t = Tensor::zeros(&[2, 3]);
        assert_eq!(mpjpe(&p, &t).unwrap(), 2.5);
        assert_eq!(mpjpe(&t, &t).unwrap(), 0.0);
        assert!(mpjpe(&p, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn per_frame_averages_to_total() {
        let mut rng = crate::rng::SeededRng::new(3);
        let p = rng.uniform_tensor(&[2, 4, 3, 3], -1.0, 1.0);
        let t = rng.uniform_tensor(&[2, 4, 3, 3], -1.0, 1.0);
        let frames = mpjpe_per_frame(&p, &t).unwrap();
        let mean = frames.iter().sum::<f64>() / 4.0;
        assert!((mean - mpjpe(&p, &t).unwrap()).abs() < 1e-12);
    }
}
