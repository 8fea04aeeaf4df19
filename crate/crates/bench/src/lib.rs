//! Shared fixtures for the pipeline benchmarks.

use weakode::basis::make_sine_basis;
use weakode::conditions::ConditionSet;
use weakode::mc::{generate_data, Sampling};
use weakode::models::{model_by_name, ModelSpec};
use weakode::smoother::{gcv_select, fit, Observations, SplineFit};

/// A model with one noisy data set, its spline fit and a sine condition set.
pub struct Fixture {
    pub model: ModelSpec,
    pub obs: Observations,
    pub fit: SplineFit,
    pub set: ConditionSet,
}

pub fn fixture(name: &str, n: usize, sigma: f64, members: usize) -> Fixture {
    let model = model_by_name(name).expect("registered model");
    let obs = generate_data(&model, &model.true_params, n, sigma, false, Sampling::Equispaced, 1, 0, &Default::default()).expect("data");
    let knots = gcv_select(&obs, model.interval, 3, &[4, 6, 8, 10, 12, 15, 20], &[], None).expect("knots");
    let fit = fit(&obs, &knots, None).expect("fit");
    let tau = model.delay().unwrap_or(0.0);
    let basis = make_sine_basis(members, (model.interval.0 + tau, model.interval.1)).expect("basis");
    let set = ConditionSet::new(model.clone(), basis).expect("condition set");
    Fixture { model, obs, fit, set }
}
