#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smoothkit::param_store::{InitRule, ParamStore, UnitKind, UnitSpec};
use smoothkit::tinynn::{Matrix, MlpModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Store with a weight, a bias and a buffer, filled uniformly.
pub fn mixed_store(seed: u64) -> ParamStore {
    ParamStore::new(
        &[
            UnitSpec::new("w", &[3, 4], UnitKind::Weight),
            UnitSpec::new("b", &[4], UnitKind::Bias),
            UnitSpec::new("v", &[4, 2], UnitKind::Weight),
            UnitSpec::new("stat", &[2], UnitKind::Buffer),
        ],
        InitRule::Uniform { bound: 1.0 },
        seed,
    )
    .unwrap()
}

/// Store of the same layout with every scalar drawn afresh.
pub fn randomized(store: &ParamStore, seed: u64) -> ParamStore {
    let mut out = store.clone();
    let mut r = rng(seed);
    for u in out.units_mut() {
        for v in u.data.iter_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
    out
}

/// Plain triple-loop MLP forward pass: ReLU on hidden layers only.
pub fn naive_forward(model: &MlpModel, inputs: &Matrix) -> Vec<Vec<f64>> {
    let dims = model.layer_dims();
    let layers = dims.len() - 1;
    let mut acts: Vec<Vec<f64>> = (0..inputs.rows()).map(|r| inputs.row(r).to_vec()).collect();
    for k in 0..layers {
        let w = &model.params.unit(&format!("l{k}.weight")).unwrap().data;
        let b = &model.params.unit(&format!("l{k}.bias")).unwrap().data;
        let (din, dout) = (dims[k], dims[k + 1]);
        acts = acts
            .iter()
            .map(|x| {
                (0..dout)
                    .map(|j| {
                        let mut s = b[j];
                        for i in 0..din {
                            s += x[i] * w[i * dout + j];
                        }
                        if k + 1 < layers { s.max(0.0) } else { s }
                    })
                    .collect()
            })
            .collect();
    }
    acts
}

/// Central finite differences of `f` with respect to every parameter.
pub fn numeric_grad(model: &MlpModel, h: f64, f: impl Fn(&MlpModel) -> f64) -> Vec<f64> {
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.params.numel());
    for u in 0..model.params.len() {
        for i in 0..model.params.units()[u].data.len() {
            let orig = probe.params.units()[u].data[i];
            probe.params.units_mut()[u].data[i] = orig + h;
            let plus = f(&probe);
            probe.params.units_mut()[u].data[i] = orig - h;
            let minus = f(&probe);
            probe.params.units_mut()[u].data[i] = orig;
            out.push((plus - minus) / (2.0 * h));
        }
    }
    out
}

/// Largest relative error between two gradient vectors. Components whose
/// magnitudes are both below `floor` are compared against `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Two-sided normal quantile for the 99.99% level.
pub const Z_9999: f64 = 3.890_591_886_413_094;

/// Wald interval for a binomial proportion.
pub fn binomial_interval(p: f64, n: usize, z: f64) -> (f64, f64) {
    let half = z * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}
