#![allow(dead_code)]

pub mod oracles;
pub mod render;

use tvlt::model::ModelConfig;
use tvlt::numerics::{Graph, ParamStore, Var};
use tvlt::trainer::{generate_synthetic_dataset, prepare_dataset, Dataset, Prepared, SyntheticSpec};

pub fn dataset(seed: u64) -> Dataset {
    generate_synthetic_dataset(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

pub fn desk_data(seed: u64) -> (ModelConfig, Vec<Prepared>) {
    let cfg = ModelConfig::desk();
    let data = prepare_dataset(&dataset(seed), &cfg).unwrap();
    (cfg, data)
}

/// Worst |analytic − numeric| / max(1, |analytic|) over the chosen
/// coordinates, numeric gradients from central differences with step 1e-5.
/// `pick(numel)` selects the coordinates of each tensor.
pub fn central_difference_error<F>(
    store: &ParamStore<f64>,
    loss: F,
    mut pick: impl FnMut(usize) -> Vec<usize>,
) -> f64
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> tvlt::Result<Var>,
{
    let h = 1e-5;
    let mut g = Graph::new();
    let l = loss(&mut g, store).unwrap();
    g.backward(l).unwrap();
    let grads = g.param_grads();
    let value = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = loss(&mut g, s).unwrap();
        g.value(l).item()
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let numel = store.get(&name).unwrap().numel();
        for i in pick(numel) {
            let x = store.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = x + h;
            let up = value(&probe);
            probe.get_mut(&name).unwrap().data_mut()[i] = x - h;
            let down = value(&probe);
            probe.get_mut(&name).unwrap().data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(&name).map_or(0.0, |t| t.data()[i]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
        }
    }
    worst
}
