use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;

/// Linear interpolation from `start` to `end` over `horizon` steps, then flat.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            start: lr,
            end: lr,
            horizon: 1,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if self.horizon == 0 {
            return self.end;
        }
        if step >= self.horizon {
            return self.end;
        }
        let frac = step as f64 / self.horizon as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// Adagrad: `acc += g²; p -= lr · g / (sqrt(acc) + eps)`.
#[derive(Clone, Debug)]
pub struct Adagrad {
    accumulators: Vec<Vec<f64>>,
    epsilon: f64,
    schedule: LrSchedule,
    step: u64,
}

impl Adagrad {
    pub fn new(store: &ParamStore, schedule: LrSchedule, epsilon: f64) -> Self {
        Adagrad {
            accumulators: store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
            epsilon,
            schedule,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.at(self.step)
    }

    pub fn accumulator(&self, index: usize) -> &[f64] {
        &self.accumulators[index]
    }

    /// Applies the stored gradients and clears them. Parameters without a
    /// gradient are left untouched. A non-finite gradient aborts the step
    /// before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.accumulators.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.accumulators.len(),
                store.len()
            )));
        }
        for (id, name, t) in store.iter() {
            if let Some(g) = t.grad() {
                if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Divergence(format!(
                        "non-finite gradient in `{name}` at entry {pos} (step {}, param #{})",
                        self.step,
                        id.index()
                    )));
                }
            }
        }
        let lr = self.schedule.at(self.step);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            let Some(g) = t.take_grad() else { continue };
            let acc = &mut self.accumulators[id.index()];
            for ((p, a), gi) in t.data_mut().iter_mut().zip(acc.iter_mut()).zip(&g) {
                *a += gi * gi;
                *p -= lr * gi / (a.sqrt() + self.epsilon);
            }
        }
        self.step += 1;
        Ok(())
    }
}
