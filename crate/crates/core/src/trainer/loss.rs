use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy `−[y·ln p + (1−y)·ln(1−p)]` of probabilities
/// `prob` against targets of the same shape.
pub fn bce_loss<'t>(prob: &Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if prob.shape() != target.shape() {
        return Err(Error::shape("bce_loss", prob.shape(), target.shape()));
    }
    let n = target.numel() as f64;
    let p = prob.value().data();
    let y = target.data();
    let loss: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
        })
        .sum::<f64>()
        / n;

    let (p, y) = (prob.value().clone(), target.clone());
    Var::from_op("bce_loss", Tensor::scalar(loss), &[prob], move |g, _| {
        let scale = g.item() / n;
        let dx = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| {
                if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                    0.0
                } else {
                    scale * (-y / p + (1.0 - y) / (1.0 - p))
                }
            })
            .collect();
        vec![Some(Tensor::new(p.shape().to_vec(), dx).expect("same shape as input"))]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn half_probability_gives_ln2() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::full([4, 4], 0.5));
        let y = Tensor::new([4, 4], (0..16).map(|i| (i % 2) as f64).collect()).unwrap();
        let l = bce_loss(&p, &y).unwrap();
        assert!((l.value().item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_is_clamped() {
        let tape = Tape::new();
        let y = Tensor::new([3], vec![0.0, 1.0, 1.0]).unwrap();
        let p = tape.leaf(y.clone());
        let l = bce_loss(&p, &y).unwrap().value().item();
        assert!(l > 0.0 && l < 2e-7, "{l}");
    }

    #[test]
    fn shape_mismatch() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::full([2], 0.5));
        assert!(bce_loss(&p, &Tensor::zeros([3])).is_err());
    }
}
