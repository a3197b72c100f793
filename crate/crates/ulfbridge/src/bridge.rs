//! Discretized bridge trajectory: time grid, per-step interpolation
//! coefficients, endpoint prediction, and rollout.
//!
//! The translation runs over a grid 0 = t_0 < ... < t_K = 1. At step k the
//! generator predicts the target-domain endpoint from the current state, and
//! the next state interpolates toward it:
//!
//! ```text
//! x_{t_{k+1}} = (1 - a_k) x_{t_k} + a_k endpoint + s_k noise,
//! a_k = (t_{k+1} - t_k) / (1 - t_k)
//! ```
//!
//! The last step has a_{K-1} = 1 and s_{K-1} = 0, so the trajectory
//! terminates exactly at the final endpoint prediction. Inference zeroes all
//! noise, making the rollout a deterministic function of (weights, input,
//! schedule).

use crate::error::{Error, Result};
use crate::networks::EndpointPredictor;
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use ndarray::ArrayD;

/// Time grid with interpolation and noise coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSchedule {
    pub steps: usize,
    pub t: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Grid spec for [`make_schedule`].
#[derive(Debug, Clone)]
pub enum Grid {
    Uniform,
    Custom(Vec<f64>),
}

/// Build a bridge schedule over K refinement steps.
///
/// `sigma[k] = noise_scale * sqrt(alpha[k] (1 - alpha[k]))` for k < K-1;
/// the final step is always noiseless.
pub fn make_schedule(k: usize, noise_scale: f64, grid: Grid) -> Result<BridgeSchedule> {
    if k == 0 {
        return Err(Error::InvalidSchedule("K must be at least 1".into()));
    }
    if noise_scale < 0.0 {
        return Err(Error::InvalidSchedule("noise_scale must be >= 0".into()));
    }
    let t: Vec<f64> = match grid {
        Grid::Uniform => (0..=k).map(|i| i as f64 / k as f64).collect(),
        Grid::Custom(t) => t,
    };
    if t.len() != k + 1 {
        return Err(Error::InvalidSchedule(format!(
            "grid must have K+1={} points, got {}",
            k + 1,
            t.len()
        )));
    }
    if t[0] != 0.0 || t[k] != 1.0 {
        return Err(Error::InvalidSchedule(
            "grid must start at 0 and end at 1".into(),
        ));
    }
    if t.windows(2).any(|w| w[1] <= w[0]) || t.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSchedule(
            "grid must be strictly increasing and finite".into(),
        ));
    }
    let alpha: Vec<f64> = (0..k).map(|i| (t[i + 1] - t[i]) / (1.0 - t[i])).collect();
    let sigma: Vec<f64> = (0..k)
        .map(|i| {
            if i == k - 1 {
                0.0
            } else {
                noise_scale * (alpha[i] * (1.0 - alpha[i])).sqrt()
            }
        })
        .collect();
    Ok(BridgeSchedule {
        steps: k,
        t,
        alpha,
        sigma,
    })
}

/// Current point on a bridge trajectory.
#[derive(Debug, Clone)]
pub struct BridgeState<S: Scalar> {
    /// Current intermediate batch, (N, C, H, W).
    pub x: ArrayD<S>,
    /// Step index in [0, K].
    pub k: usize,
    /// Time value, equal to `schedule.t[k]`.
    pub t_k: f64,
}

impl<S: Scalar> BridgeState<S> {
    pub fn initial(x: ArrayD<S>) -> Self {
        BridgeState { x, k: 0, t_k: 0.0 }
    }
}

/// Generator endpoint prediction from the current state.
pub fn predict_endpoint<S: Scalar>(
    generator: &dyn EndpointPredictor<S>,
    state: &BridgeState<S>,
) -> Result<ArrayD<S>> {
    let y = generator.predict(&state.x, state.t_k)?;
    if y.shape() != state.x.shape() {
        return Err(Error::Shape(format!(
            "endpoint shape {:?} differs from state shape {:?}",
            y.shape(),
            state.x.shape()
        )));
    }
    Ok(y)
}

/// One interpolation step toward the predicted endpoint. `noise` is either
/// an array matching the state shape or `None` for a zero sample. The
/// interpolant is not clipped.
pub fn bridge_step<S: Scalar>(
    state: &BridgeState<S>,
    endpoint: &ArrayD<S>,
    schedule: &BridgeSchedule,
    noise: Option<&ArrayD<S>>,
) -> Result<BridgeState<S>> {
    if state.k >= schedule.steps {
        return Err(Error::StepPastEnd {
            k: state.k,
            last: schedule.steps,
        });
    }
    if endpoint.shape() != state.x.shape() {
        return Err(Error::Shape("endpoint shape mismatch".into()));
    }
    if let Some(n) = noise {
        if n.shape() != state.x.shape() {
            return Err(Error::Shape("noise shape mismatch".into()));
        }
    }
    let a = S::from_f64c(schedule.alpha[state.k]);
    let s = S::from_f64c(schedule.sigma[state.k]);
    let one = S::one();
    let mut x = state.x.mapv(|v| (one - a) * v);
    x.zip_mut_with(endpoint, |o, &e| *o = *o + a * e);
    if let Some(n) = noise {
        if schedule.sigma[state.k] != 0.0 {
            x.zip_mut_with(n, |o, &nv| *o = *o + s * nv);
        }
    }
    let k = state.k + 1;
    Ok(BridgeState {
        x,
        k,
        t_k: schedule.t[k],
    })
}

/// Rollout mode: training injects Gaussian noise at intermediate steps,
/// inference is fully deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    TrainStochastic,
    InferDeterministic,
}

/// Full trajectory plus the final endpoint prediction.
pub struct Rollout<S: Scalar> {
    /// K+1 states from x_{t_0} to x_{t_K}.
    pub trajectory: Vec<BridgeState<S>>,
    /// Endpoint predictions, one per step k = 0..K-1.
    pub endpoints: Vec<ArrayD<S>>,
    /// The translated output: the final endpoint prediction.
    pub y_hat: ArrayD<S>,
}

/// Run the bridge from `x0` to completion.
pub fn rollout<S: Scalar>(
    generator: &dyn EndpointPredictor<S>,
    x0: &ArrayD<S>,
    schedule: &BridgeSchedule,
    mode: RolloutMode,
    rng_seed: u64,
) -> Result<Rollout<S>> {
    let mut trajectory = Vec::with_capacity(schedule.steps + 1);
    let mut endpoints = Vec::with_capacity(schedule.steps);
    let mut state = BridgeState::initial(x0.clone());
    for k in 0..schedule.steps {
        let endpoint = predict_endpoint(generator, &state)?;
        let noise = match mode {
            RolloutMode::InferDeterministic => None,
            RolloutMode::TrainStochastic => {
                if schedule.sigma[k] != 0.0 {
                    let mut r = rng::rng_for(rng_seed, Stream::BridgeNoise, k as u64);
                    Some(rng::normal_array::<S>(&mut r, state.x.shape()))
                } else {
                    None
                }
            }
        };
        let next = bridge_step(&state, &endpoint, schedule, noise.as_ref())?;
        trajectory.push(state);
        endpoints.push(endpoint);
        state = next;
    }
    trajectory.push(state);
    let y_hat = endpoints.last().expect("K >= 1").clone();
    Ok(Rollout {
        trajectory,
        endpoints,
        y_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Generator, GeneratorConfig, IdentityGenerator};
    use ndarray::IxDyn;

    fn image(value: f64, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(shape), value)
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1, 0.0, Grid::Uniform).unwrap();
        assert_eq!(s.t, vec![0.0, 1.0]);
        assert_eq!(s.alpha, vec![1.0]);
        assert_eq!(s.sigma, vec![0.0]);

        let s = make_schedule(2, 0.05, Grid::Uniform).unwrap();
        assert_eq!(s.t, vec![0.0, 0.5, 1.0]);
        assert!((s.alpha[0] - 0.5).abs() < 1e-15);
        assert_eq!(s.alpha[1], 1.0);
        assert_eq!(s.sigma[1], 0.0);

        let s = make_schedule(4, 0.0, Grid::Uniform).unwrap();
        let expect = [0.25, 1.0 / 3.0, 0.5, 1.0];
        for (a, e) in s.alpha.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_final_step_exact() {
        for k in 1..=8 {
            let s = make_schedule(k, 0.3, Grid::Uniform).unwrap();
            assert_eq!(s.alpha[k - 1], 1.0, "alpha[K-1] must be exactly 1");
            assert_eq!(s.sigma[k - 1], 0.0, "sigma[K-1] must be exactly 0");
        }
    }

    #[test]
    fn schedule_consistency_recompute() {
        let s = make_schedule(5, 0.1, Grid::Uniform).unwrap();
        for k in 0..5 {
            let a = (s.t[k + 1] - s.t[k]) / (1.0 - s.t[k]);
            assert!((a - s.alpha[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_rejects_bad_grids() {
        assert!(matches!(
            make_schedule(0, 0.0, Grid::Uniform),
            Err(Error::InvalidSchedule(_))
        ));
        assert!(matches!(
            make_schedule(2, 0.0, Grid::Custom(vec![0.0, 0.6, 0.5])),
            Err(Error::InvalidSchedule(_))
        ));
        assert!(matches!(
            make_schedule(2, 0.0, Grid::Custom(vec![0.1, 0.6, 1.0])),
            Err(Error::InvalidSchedule(_))
        ));
    }

    #[test]
    fn custom_grid_accepted() {
        let s = make_schedule(3, 0.05, Grid::Custom(vec![0.0, 0.3, 0.8, 1.0])).unwrap();
        assert!((s.alpha[0] - 0.3).abs() < 1e-15);
        assert!((s.alpha[1] - 0.5 / 0.7).abs() < 1e-15);
        assert_eq!(s.alpha[2], 1.0);
    }

    #[test]
    fn step_formula_cases() {
        let sched = make_schedule(2, 0.0, Grid::Uniform).unwrap();
        // convex combination: x=0, endpoint=1, alpha=0.5, sigma=0
        let st = BridgeState::initial(image(0.0, &[1, 3, 4, 4]));
        let next = bridge_step(&st, &image(1.0, &[1, 3, 4, 4]), &sched, None).unwrap();
        assert!(next.x.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert_eq!(next.k, 1);
        // alpha = 1 at the last step: output equals endpoint exactly
        let endpoint = image(0.37, &[1, 3, 4, 4]);
        let noise = image(5.0, &[1, 3, 4, 4]);
        let last = bridge_step(&next, &endpoint, &sched, Some(&noise)).unwrap();
        assert_eq!(last.x, endpoint);
        // sigma path: x=0, endpoint=0, sigma=0.1
        let mut sched3 = make_schedule(3, 1.0, Grid::Uniform).unwrap();
        sched3.sigma[0] = 0.1;
        let st = BridgeState::initial(image(0.0, &[1, 3, 2, 2]));
        let z = image(0.0, &[1, 3, 2, 2]);
        let next = bridge_step(&st, &z, &sched3, Some(&image(1.0, &[1, 3, 2, 2]))).unwrap();
        assert!(next.x.iter().all(|&v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn step_past_end_errors() {
        let sched = make_schedule(1, 0.0, Grid::Uniform).unwrap();
        let st = BridgeState::initial(image(0.0, &[1, 3, 2, 2]));
        let next = bridge_step(&st, &image(0.0, &[1, 3, 2, 2]), &sched, None).unwrap();
        assert!(matches!(
            bridge_step(&next, &image(0.0, &[1, 3, 2, 2]), &sched, None),
            Err(Error::StepPastEnd { .. })
        ));
    }

    #[test]
    fn identity_generator_is_fixed_point() {
        let sched = make_schedule(3, 0.05, Grid::Uniform).unwrap();
        let x0 = image(0.25, &[1, 3, 4, 4]);
        let r = rollout(
            &IdentityGenerator,
            &x0,
            &sched,
            RolloutMode::InferDeterministic,
            0,
        )
        .unwrap();
        assert_eq!(r.trajectory.len(), 4);
        assert_eq!(r.y_hat, x0);
        for st in &r.trajectory {
            assert_eq!(st.x, x0);
        }
    }

    #[test]
    fn stochastic_rollout_seeded_reproducible() {
        let sched = make_schedule(3, 0.2, Grid::Uniform).unwrap();
        let x0 = image(0.0, &[2, 3, 8, 8]);
        let a = rollout(&IdentityGenerator, &x0, &sched, RolloutMode::TrainStochastic, 9).unwrap();
        let b = rollout(&IdentityGenerator, &x0, &sched, RolloutMode::TrainStochastic, 9).unwrap();
        for (sa, sb) in a.trajectory.iter().zip(b.trajectory.iter()) {
            assert_eq!(sa.x, sb.x);
        }
        let c =
            rollout(&IdentityGenerator, &x0, &sched, RolloutMode::TrainStochastic, 10).unwrap();
        let differs = a
            .trajectory
            .iter()
            .zip(c.trajectory.iter())
            .any(|(sa, sc)| sa.x != sc.x);
        assert!(differs, "different seeds must give different trajectories");
    }

    #[test]
    fn single_step_bridge_is_one_generator_call() {
        let gen = Generator::<f64>::init(GeneratorConfig::default(), 5);
        let sched = make_schedule(1, 0.0, Grid::Uniform).unwrap();
        let x0 = image(0.1, &[1, 3, 32, 32]);
        let r = rollout(&gen, &x0, &sched, RolloutMode::InferDeterministic, 0).unwrap();
        let direct = gen.predict(&x0, 0.0).unwrap();
        assert_eq!(r.y_hat, direct);
        assert_eq!(r.endpoints.len(), 1);
    }

    #[test]
    fn deterministic_rollout_bit_identical() {
        let gen = Generator::<f32>::init(GeneratorConfig::default(), 8);
        let sched = make_schedule(3, 0.05, Grid::Uniform).unwrap();
        let x0 = ArrayD::from_elem(IxDyn(&[1, 3, 32, 32]), 0.2f32);
        let a = rollout(&gen, &x0, &sched, RolloutMode::InferDeterministic, 1).unwrap();
        let b = rollout(&gen, &x0, &sched, RolloutMode::InferDeterministic, 2).unwrap();
        assert_eq!(a.y_hat, b.y_hat);
        for (sa, sb) in a.trajectory.iter().zip(b.trajectory.iter()) {
            assert_eq!(sa.x, sb.x);
        }
    }

    #[test]
    fn interpolation_bounded_when_noiseless() {
        let sched = make_schedule(4, 0.0, Grid::Uniform).unwrap();
        let mut rng = crate::rng::rng_for(3, Stream::Oracle, 0);
        let x0 = crate::rng::uniform_array::<f64>(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);
        let endpoint = crate::rng::uniform_array::<f64>(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);
        let mut st = BridgeState::initial(x0);
        for _ in 0..4 {
            st = bridge_step(&st, &endpoint, &sched, None).unwrap();
            assert!(st.x.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }
    }
}
