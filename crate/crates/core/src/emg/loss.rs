use super::config::Stage1Weights;
use super::{EmgError, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Mean over frames of the Euclidean distance between predicted and target
/// unit vectors (the norm itself, not its square).
pub fn loss_su<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(EmgError::Contract(format!(
            "unit prediction {:?} vs target {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let d = tape.sub(pred, target)?;
    let n = tape.row_norm(d);
    Ok(tape.mean(n))
}

/// Mean negative log-likelihood of the target phoneme per frame.
pub fn loss_phoneme<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits);
    let picked = tape
        .gather_last(lp, targets)
        .map_err(|e| EmgError::Contract(e.to_string()))?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

/// `λ_su·l_su + λ_p·l_p`.
pub fn loss_total<T: Scalar>(
    tape: &mut Tape<T>,
    l_su: Var,
    l_p: Var,
    w: &Stage1Weights,
) -> Result<Var> {
    w.validate()?;
    let a = tape.scale(l_su, w.su);
    let b = tape.scale(l_p, w.phoneme);
    Ok(tape.add(a, b)?)
}

/// Fraction of frames whose arg-max logit equals the label.
pub fn frame_accuracy(logits: &[f64], classes: usize, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = logits
        .chunks(classes)
        .zip(targets)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                );
            best.0 == t
        })
        .count();
    hits as f64 / targets.len() as f64
}
