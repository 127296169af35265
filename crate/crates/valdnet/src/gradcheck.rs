//! Finite-difference verification of tape gradients.
//!
//! A check builds the same scalar loss twice: once analytically through
//! [`Tape::backward`], and once numerically by central differences on each
//! input coordinate. The reported figure is the worst relative error
//! `|a - n| / max(floor, |a| + |n|)` over all coordinates of all inputs.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;

/// Denominator floor for the relative error. Central differences on f64
/// resolve a gradient to roughly `machine_eps * |loss| / FD_EPS` ≈ 1e-11
/// absolute, so below this magnitude a relative comparison measures rounding
/// noise; such coordinates are judged on the absolute scale instead.
const REL_FLOOR: f64 = 1e-6;

/// Worst-case relative error between analytic and central-difference
/// gradients of `build`, which must record a scalar loss from the given
/// inputs. `build` receives the inputs already registered as
/// `requires_grad` leaves, in order.
pub fn max_rel_err<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &ids)?;
    if tape.data(loss).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar loss".into()));
    }
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let l = build(&mut t, &ids)?;
        Ok(t.data(l)[0])
    };

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .ok_or_else(|| Error::Contract("missing gradient for input".into()))?
            .to_vec();
        for (coord, &a) in analytic.iter().enumerate() {
            let orig = work[which].data()[coord];
            work[which].set(coord, orig + FD_EPS);
            let plus = eval(&work)?;
            work[which].set(coord, orig - FD_EPS);
            let minus = eval(&work)?;
            work[which].set(coord, orig);

            let numeric = (plus - minus) / (2.0 * FD_EPS);
            let rel = (a - numeric).abs() / REL_FLOOR.max(a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
