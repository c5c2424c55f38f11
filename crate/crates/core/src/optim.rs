//! Adam with global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::data_io::OptimizerState;
use crate::error::{CheckpointError, Result};
use crate::params::{NamedArray, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

pub struct Adam {
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    clip_norm: Option<f64>,
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(clip_norm: Option<f64>) -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            clip_norm,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter accepted by `trainable` that received a
    /// gradient. Parameters without a gradient keep their moments untouched.
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<StepInfo> {
        let active: Vec<(&String, &candle_core::Var, &Tensor)> = store
            .iter()
            .filter(|(name, _)| trainable(name))
            .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name, var, g)))
            .collect();
        let mut sq = 0.0;
        for (_, _, g) in &active {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        let grad_norm = sq.sqrt();
        let scale = match self.clip_norm {
            Some(max) if grad_norm > max => max / (grad_norm + 1e-12),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, var, g) in active {
            let g = if scale != 1.0 { (g.detach() * scale)? } else { g.detach() };
            let m = match self.m.get(name) {
                Some(m) => ((m * BETA1)? + (&g * (1.0 - BETA1))?)?,
                None => (&g * (1.0 - BETA1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?,
                None => (g.sqr()? * (1.0 - BETA2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + EPS)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(StepInfo {
            grad_norm,
            clipped: scale != 1.0,
        })
    }

    pub fn state(&self) -> Result<OptimizerState> {
        let dump = |map: &BTreeMap<String, Tensor>| {
            map.iter()
                .map(|(k, t)| NamedArray::from_tensor(k.clone(), t))
                .collect::<Result<Vec<_>>>()
        };
        Ok(OptimizerState {
            step: self.step,
            m: dump(&self.m)?,
            v: dump(&self.v)?,
        })
    }

    /// Restores moments saved by [`Adam::state`]; names must exist in `store`.
    pub fn restore(&mut self, state: &OptimizerState, store: &ParamStore) -> Result<()> {
        let load = |list: &[NamedArray]| -> Result<BTreeMap<String, Tensor>> {
            list.iter()
                .map(|a| {
                    let var = store.get(&a.name).ok_or_else(|| CheckpointError::UnexpectedParameter {
                        name: a.name.clone(),
                    })?;
                    if var.dims() != a.shape.as_slice() {
                        return Err(CheckpointError::ShapeMismatch {
                            name: a.name.clone(),
                            expected: var.dims().to_vec(),
                            found: a.shape.clone(),
                        }
                        .into());
                    }
                    Ok((a.name.clone(), a.to_tensor(store.dtype(), store.device())?))
                })
                .collect()
        };
        self.m = load(&state.m)?;
        self.v = load(&state.v)?;
        self.step = state.step;
        Ok(())
    }
}
