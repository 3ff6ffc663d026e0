//! Oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, Normal};

use coldrec::numerics::params::{ParamId, ParamStore};
use coldrec::numerics::tensor::Tensor;

/// AUC by enumerating every positive/negative pair; ties count 1/2.
pub fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        if !yi {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Overwrites every parameter with N(0, std²) draws.
pub fn randomize(store: &mut ParamStore, std: f64, rng: &mut impl Rng) {
    let nd = Normal::new(0.0, std).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x = nd.sample(rng);
        }
    }
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let nd = Normal::new(0.0, 1.0).unwrap();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| nd.sample(rng)).collect()).unwrap()
}

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences against the gradients already accumulated in
/// the store's grad slots, on up to `per_tensor` random coordinates of each
/// listed parameter. Returns `(name, ‖a − n‖ / max(‖a‖, ‖n‖))` per tensor,
/// with 0 when both are exactly zero.
pub fn fd_check<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    ids: &[ParamId],
    loss: impl Fn(&M) -> f64,
    per_tensor: usize,
    rng: &mut impl Rng,
) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for &id in ids {
        let (name, len, analytic) = {
            let s = store(model);
            let t = s.get(id);
            let g = t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
            (s.name(id).to_string(), t.len(), g)
        };
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for k in coords {
            let orig = store(model).get(id).data()[k];
            store(model).get_mut(id).data_mut()[k] = orig + FD_STEP;
            let up = loss(model);
            store(model).get_mut(id).data_mut()[k] = orig - FD_STEP;
            let down = loss(model);
            store(model).get_mut(id).data_mut()[k] = orig;
            let n = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k];
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
        }
        let denom = na.sqrt().max(nn.sqrt());
        out.push((name, if denom == 0.0 { 0.0 } else { diff.sqrt() / denom }));
    }
    out
}
