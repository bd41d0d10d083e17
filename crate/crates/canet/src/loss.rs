//! Joint training objective: principal cross-entropy on the decoder output
//! plus a weighted auxiliary cross-entropy on the stage-3 head.

use crate::error::Result;
use crate::graph::Context;
use crate::tensor::{LabelMap, Val};

#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub principal: f64,
    pub auxiliary: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Builds `principal + lambda * auxiliary` on the tape and reports the three
/// values. When no auxiliary logits exist its term is zero.
pub fn joint_loss(
    cx: &mut Context,
    decoder_logits: Val,
    aux_logits: Option<Val>,
    labels: &LabelMap,
    lambda: f64,
    ignore: u8,
) -> Result<(Val, LossReport)> {
    let principal = cx.tape.softmax_cross_entropy(decoder_logits, labels, ignore)?;
    let principal_v = cx.tape.value(principal).scalar_value();
    let (total, aux_v) = match aux_logits {
        Some(aux) => {
            let aux = cx.tape.softmax_cross_entropy(aux, labels, ignore)?;
            let aux_v = cx.tape.value(aux).scalar_value();
            let scaled = cx.tape.scalar_scale(aux, lambda);
            (cx.tape.add(principal, scaled)?, aux_v)
        }
        None => (principal, 0.0),
    };
    let report = LossReport {
        principal: principal_v,
        auxiliary: aux_v,
        lambda,
        total: cx.tape.value(total).scalar_value(),
    };
    Ok((total, report))
}
