use crate::error::{Error, Result};
use crate::numerics::ParamVector;

/// Heavy-ball SGD state: `v <- m*v + g + wd*theta; theta <- theta - lr*v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub velocity: ParamVector,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptState {
    pub fn new(params: &ParamVector, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Input(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Input(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Input(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(OptState {
            velocity: params.zeros_like(),
            lr,
            momentum,
            weight_decay,
        })
    }
}

/// One SGD update in place. Refuses (leaving both arguments untouched) when
/// any gradient entry is non-finite.
pub fn sgd_step(params: &mut ParamVector, grads: &ParamVector, state: &mut OptState) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.velocity) {
        return Err(Error::Input("params, grads and optimizer state differ in layout".into()));
    }
    if let Some(location) = grads.first_non_finite() {
        return Err(Error::NonFinite { location });
    }
    let (m, wd, lr) = (state.momentum, state.weight_decay, state.lr);
    let grads: Vec<_> = grads.iter().map(|(_, g)| g).collect();
    for (((_, theta), (_, v)), g) in params
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(grads)
    {
        for ((t, v), g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = m * *v + g + wd * *t;
            *t -= lr * *v;
        }
    }
    Ok(())
}
