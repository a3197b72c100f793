//! Variance-preserving forward diffusion, score models, and denoising score
//! matching.
//!
//! The forward process at level tau is `u = gamma[tau] x + varsigma[tau] e`
//! with `gamma^2 + varsigma^2 = 1`. Networks predict the injected noise;
//! scores derive from the prediction as `-eps_hat / varsigma[tau]`, which is
//! undefined at tau = 0.
//!
//! Two score-model roles exist: a teacher fitted to the clean target pool
//! and then frozen, and a critic that keeps tracking the generator's output
//! distribution during training.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::networks::{ConvEpsNet, EpsilonNet};
use crate::nn::{bind, bind_frozen, Adam, ParamStore};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::synth::DatasetManifest;
use ndarray::{ArrayD, Axis};
use rand::Rng;
use std::path::Path;

/// Discrete noise schedule with signal/noise coefficient tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// Number of noise levels T; valid level indices are 0..=T.
    pub levels: usize,
    pub gamma: Vec<f64>,
    pub varsigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine-shaped signal coefficient, `gamma[t] = cos(0.5 pi (t/T) 0.98)`,
    /// strictly decreasing with gamma[0] = 1 and gamma[T] > 0.
    pub fn cosine(levels: usize) -> Self {
        assert!(levels >= 2, "need at least two noise levels");
        let gamma: Vec<f64> = (0..=levels)
            .map(|t| (0.5 * std::f64::consts::PI * (t as f64 / levels as f64) * 0.98).cos())
            .collect();
        let varsigma: Vec<f64> = gamma.iter().map(|g| (1.0 - g * g).sqrt()).collect();
        NoiseSchedule {
            levels,
            gamma,
            varsigma,
        }
    }

    /// Sampling range for loss levels: uniform over
    /// `{ceil(0.02 T) .. floor(0.98 T)}`, which always excludes tau = 0.
    pub fn tau_range(&self) -> (usize, usize) {
        let lo = ((0.02 * self.levels as f64).ceil() as usize).max(1);
        let hi = (0.98 * self.levels as f64).floor() as usize;
        (lo, hi)
    }

    pub fn sample_taus(&self, rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<usize> {
        let (lo, hi) = self.tau_range();
        (0..n).map(|_| rng.random_range(lo..=hi)).collect()
    }

    fn check_level(&self, tau: usize) -> Result<()> {
        if tau > self.levels {
            return Err(Error::InvalidLevel {
                tau,
                max: self.levels,
            });
        }
        Ok(())
    }
}

/// Diffuse a batch at a single level: `u = gamma x + varsigma e`.
pub fn forward_diffuse<S: Scalar>(
    x: &ArrayD<S>,
    tau: usize,
    noise: &ArrayD<S>,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<S>> {
    schedule.check_level(tau)?;
    if noise.shape() != x.shape() {
        return Err(Error::Shape("noise shape mismatch".into()));
    }
    let g = S::from_f64c(schedule.gamma[tau]);
    let s = S::from_f64c(schedule.varsigma[tau]);
    let mut u = x.mapv(|v| g * v);
    u.zip_mut_with(noise, |o, &n| *o = *o + s * n);
    Ok(u)
}

/// Per-sample variant with one level per slab along axis 0.
pub fn forward_diffuse_per_sample<S: Scalar>(
    x: &ArrayD<S>,
    taus: &[usize],
    noise: &ArrayD<S>,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<S>> {
    if noise.shape() != x.shape() || x.shape()[0] != taus.len() {
        return Err(Error::Shape("batch/noise/tau size mismatch".into()));
    }
    let mut u = x.clone();
    for (i, mut slab) in u.axis_iter_mut(Axis(0)).enumerate() {
        schedule.check_level(taus[i])?;
        let g = S::from_f64c(schedule.gamma[taus[i]]);
        let s = S::from_f64c(schedule.varsigma[taus[i]]);
        let nslab = noise.index_axis(Axis(0), i);
        ndarray::Zip::from(&mut slab).and(&nslab).for_each(|o, &n| {
            *o = g * *o + s * n;
        });
    }
    Ok(u)
}

/// Role of a score model in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScoreRole {
    #[serde(rename = "teacher_real")]
    TeacherReal,
    #[serde(rename = "critic_fake")]
    CriticFake,
}

impl ScoreRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreRole::TeacherReal => "teacher_real",
            ScoreRole::CriticFake => "critic_fake",
        }
    }
}

/// Noise-conditional score model: an epsilon-prediction network plus its
/// schedule, role, and freeze flag.
pub struct ScoreModel<S: Scalar> {
    pub net: Box<dyn EpsilonNet<S>>,
    pub role: ScoreRole,
    pub frozen: bool,
    pub schedule: NoiseSchedule,
}

impl<S: Scalar> Clone for ScoreModel<S> {
    fn clone(&self) -> Self {
        ScoreModel {
            net: self.net.clone(),
            role: self.role,
            frozen: self.frozen,
            schedule: self.schedule.clone(),
        }
    }
}

impl<S: Scalar> ScoreModel<S> {
    pub fn new(net: Box<dyn EpsilonNet<S>>, role: ScoreRole, schedule: NoiseSchedule) -> Self {
        ScoreModel {
            net,
            role,
            frozen: false,
            schedule,
        }
    }

    pub fn params(&self) -> &ParamStore<S> {
        self.net.params()
    }

    /// Mutable parameter access; rejected on frozen models.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore<S>> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        Ok(self.net.params_mut())
    }

    /// Inference-mode epsilon prediction with per-sample levels.
    pub fn eps(&self, u: &ArrayD<S>, taus: &[usize]) -> Result<ArrayD<S>> {
        if u.shape()[0] != taus.len() {
            return Err(Error::Shape("one tau per sample required".into()));
        }
        for &t in taus {
            self.schedule.check_level(t)?;
        }
        let mut g = Graph::new();
        let b = bind_frozen(&mut g, self.net.params());
        let uv = g.constant(u.clone());
        let (eps, _) = self.net.forward(&mut g, &b, uv, taus);
        Ok(g.value(eps).clone())
    }

    /// Score estimate `-eps_hat / varsigma[tau]`; undefined at tau = 0.
    pub fn score(&self, u: &ArrayD<S>, taus: &[usize]) -> Result<ArrayD<S>> {
        if taus.iter().any(|&t| t == 0) {
            return Err(Error::UndefinedScore);
        }
        let eps = self.eps(u, taus)?;
        let mut out = eps;
        for (i, mut slab) in out.axis_iter_mut(Axis(0)).enumerate() {
            let s = S::from_f64c(self.schedule.varsigma[taus[i]]);
            slab.mapv_inplace(|e| -e / s);
        }
        Ok(out)
    }
}

/// Draw per-sample (tau, noise) and build the denoising score-matching loss
/// node inside `graph`: mean over batch and elements of (eps_hat - eps)^2.
pub fn dsm_loss_graph<S: Scalar>(
    graph: &mut Graph<S>,
    net: &dyn EpsilonNet<S>,
    bound: &crate::nn::Bound,
    batch: &ArrayD<S>,
    schedule: &NoiseSchedule,
    rng_seed: u64,
) -> Result<Var> {
    if batch.shape()[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = batch.shape()[0];
    let mut tau_rng = rng::rng_for(rng_seed, Stream::DiffusionTau, 0);
    let taus = schedule.sample_taus(&mut tau_rng, n);
    let mut noise_rng = rng::rng_for(rng_seed, Stream::DiffusionNoise, 0);
    let noise = rng::normal_array::<S>(&mut noise_rng, batch.shape());
    let u = forward_diffuse_per_sample(batch, &taus, &noise, schedule)?;
    let uv = graph.constant(u);
    let (eps_hat, _) = net.forward(graph, bound, uv, &taus);
    let eps_true = graph.constant(noise);
    let diff = graph.sub(eps_hat, eps_true);
    let sq = graph.mul(diff, diff);
    Ok(graph.mean(sq))
}

/// Loss value only (no parameter gradients).
pub fn dsm_loss<S: Scalar>(
    model: &ScoreModel<S>,
    batch: &ArrayD<S>,
    rng_seed: u64,
) -> Result<S> {
    let mut g = Graph::new();
    let b = bind_frozen(&mut g, model.net.params());
    let loss = dsm_loss_graph(&mut g, model.net.as_ref(), &b, batch, &model.schedule, rng_seed)?;
    Ok(g.scalar_value(loss))
}

/// One DSM gradient step. Rejected on frozen models; returns the loss.
pub fn dsm_step<S: Scalar>(
    model: &mut ScoreModel<S>,
    opt: &mut Adam<S>,
    batch: &ArrayD<S>,
    rng_seed: u64,
) -> Result<S> {
    if model.frozen {
        return Err(Error::FrozenModel);
    }
    let mut g = Graph::new();
    let b = bind(&mut g, model.net.params());
    let loss = dsm_loss_graph(&mut g, model.net.as_ref(), &b, batch, &model.schedule, rng_seed)?;
    let value = g.scalar_value(loss);
    let mut grads = g.backward(loss);
    let pgrads = b.grads(model.net.params(), &mut grads);
    opt.step(model.net.params_mut()?, &pgrads);
    Ok(value)
}

/// Teacher pretraining configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub noise_levels: usize,
    pub base_width: usize,
    pub temb_dim: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
            seed: 11,
            noise_levels: 64,
            base_width: 24,
            temb_dim: 64,
        }
    }
}

/// Select rows of a sample-major pool.
pub fn take_batch<S: Scalar>(pool: &ArrayD<S>, indices: &[usize]) -> ArrayD<S> {
    let views: Vec<_> = indices
        .iter()
        .map(|&i| pool.index_axis(Axis(0), i))
        .collect();
    ndarray::stack(Axis(0), &views).expect("uniform slab shapes")
}

/// Fit an epsilon net to a sample pool by DSM; returns the per-interval
/// loss log.
pub fn fit_dsm<S: Scalar>(
    model: &mut ScoreModel<S>,
    pool: &ArrayD<S>,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if pool.shape()[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut opt = Adam::new(lr, 0.9, 0.999);
    let mut log = Vec::new();
    let n_pool = pool.shape()[0];
    for step in 0..steps {
        let mut idx_rng = rng::rng_for(seed, Stream::BatchSampling, step as u64);
        let idx: Vec<usize> = (0..batch_size)
            .map(|_| idx_rng.random_range(0..n_pool))
            .collect();
        let batch = take_batch(pool, &idx);
        let loss = dsm_step(
            model,
            &mut opt,
            &batch,
            rng::derive(seed, Stream::DiffusionNoise, step as u64),
        )?;
        log.push(loss.to_f64c());
    }
    Ok(log)
}

/// Pretrain the frozen teacher on the clean target pool of a dataset.
///
/// Returns the frozen model and the loss log. Rejects manifests whose
/// target pool shares subjects with any degraded cohort.
pub fn train_teacher<S: Scalar>(
    manifest: &DatasetManifest,
    data_root: &Path,
    cfg: &TeacherConfig,
) -> Result<(ScoreModel<S>, Vec<f64>)> {
    manifest.check_disjoint()?;
    let target = manifest
        .cohort(crate::synth::COHORT_TARGET)
        .ok_or_else(|| Error::IncompleteCohort("target pool missing".into()))?;
    for entry in target {
        for other in [crate::synth::COHORT_SOURCE, crate::synth::COHORT_PAIRED] {
            if let Some(cohort) = manifest.cohort(other) {
                if cohort.iter().any(|e| e.subject_id == entry.subject_id) {
                    return Err(Error::ContaminatedTeacherData(format!(
                        "subject {} appears in {}",
                        entry.subject_id, other
                    )));
                }
            }
        }
    }
    let pool: ArrayD<S> = manifest.load_cohort_slices(data_root, crate::synth::COHORT_TARGET)?;
    let schedule = NoiseSchedule::cosine(cfg.noise_levels);
    let net = ConvEpsNet::<S>::init(3, cfg.base_width, cfg.temb_dim, cfg.seed);
    let mut model = ScoreModel::new(Box::new(net), ScoreRole::TeacherReal, schedule);
    let log = fit_dsm(&mut model, &pool, cfg.steps, cfg.batch_size, cfg.lr, cfg.seed)?;
    model.frozen = true;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::MlpEpsNet;
    use crate::nn::Bound;
    use ndarray::IxDyn;

    /// Epsilon net computing `eps_hat = u / varsigma[tau]`, the perfect
    /// denoiser for all-zero data.
    struct PerfectZeroData {
        schedule: NoiseSchedule,
        params: ParamStore<f64>,
    }

    impl EpsilonNet<f64> for PerfectZeroData {
        fn params(&self) -> &ParamStore<f64> {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamStore<f64> {
            &mut self.params
        }
        fn forward(
            &self,
            g: &mut Graph<f64>,
            _b: &Bound,
            u: Var,
            taus: &[usize],
        ) -> (Var, Var) {
            let scales: Vec<f64> = taus
                .iter()
                .map(|&t| 1.0 / self.schedule.varsigma[t])
                .collect();
            let eps = g.per_sample_scale(u, scales);
            (eps, u)
        }
        fn clone_box(&self) -> Box<dyn EpsilonNet<f64>> {
            Box::new(PerfectZeroData {
                schedule: self.schedule.clone(),
                params: self.params.clone(),
            })
        }
        fn trunk_channels(&self) -> usize {
            1
        }
        fn trunk_is_spatial(&self) -> bool {
            false
        }
    }

    /// Epsilon net that always outputs zero.
    struct ZeroNet {
        params: ParamStore<f64>,
    }

    impl EpsilonNet<f64> for ZeroNet {
        fn params(&self) -> &ParamStore<f64> {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamStore<f64> {
            &mut self.params
        }
        fn forward(&self, g: &mut Graph<f64>, _b: &Bound, u: Var, _taus: &[usize]) -> (Var, Var) {
            let z = g.mul_scalar(u, 0.0);
            (z, u)
        }
        fn clone_box(&self) -> Box<dyn EpsilonNet<f64>> {
            Box::new(ZeroNet {
                params: self.params.clone(),
            })
        }
        fn trunk_channels(&self) -> usize {
            1
        }
        fn trunk_is_spatial(&self) -> bool {
            false
        }
    }

    #[test]
    fn vp_identity_holds() {
        let s = NoiseSchedule::cosine(64);
        assert_eq!(s.gamma[0], 1.0);
        assert_eq!(s.varsigma[0], 0.0);
        for t in 0..=64 {
            let vp = s.gamma[t] * s.gamma[t] + s.varsigma[t] * s.varsigma[t];
            assert!((vp - 1.0).abs() < 1e-12);
        }
        for t in 0..64 {
            assert!(s.gamma[t + 1] < s.gamma[t], "gamma must strictly decrease");
        }
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = NoiseSchedule::cosine(64);
        let x = ArrayD::from_elem(IxDyn(&[1, 4]), 0.7);
        let noise = ArrayD::from_elem(IxDyn(&[1, 4]), -0.3);
        // tau = 0: u = x exactly
        let u = forward_diffuse(&x, 0, &noise, &s).unwrap();
        assert_eq!(u, x);
        // tau = T: u close to noise within gamma[T] * max|x|
        let u = forward_diffuse(&x, 64, &noise, &s).unwrap();
        let bound = s.gamma[64] * 0.7 + (1.0 - s.varsigma[64]) * 0.3 + 1e-12;
        assert!(u
            .iter()
            .zip(noise.iter())
            .all(|(a, b)| (a - b).abs() < bound));
        // gamma = 0.8 gives varsigma = 0.6: ones in, ones noise -> 1.4
        let custom = NoiseSchedule {
            levels: 2,
            gamma: vec![1.0, 0.8, 0.0],
            varsigma: vec![0.0, 0.6, 1.0],
        };
        let ones = ArrayD::from_elem(IxDyn(&[2, 2]), 1.0);
        let u = forward_diffuse(&ones, 1, &ones, &custom).unwrap();
        assert!(u.iter().all(|&v| (v - 1.4).abs() < 1e-12));
        // out of range
        assert!(matches!(
            forward_diffuse(&ones, 3, &ones, &custom),
            Err(Error::InvalidLevel { .. })
        ));
    }

    #[test]
    fn score_parameterization_and_tau0() {
        let schedule = NoiseSchedule::cosine(8);
        let model = ScoreModel::new(
            Box::new(ZeroNet {
                params: ParamStore::new(),
            }),
            ScoreRole::CriticFake,
            schedule.clone(),
        );
        let u = ArrayD::from_elem(IxDyn(&[2, 3]), 0.5);
        // eps_hat = 0 predictor -> score = 0 everywhere
        let sc = model.score(&u, &[2, 3]).unwrap();
        assert!(sc.iter().all(|&v| v == 0.0));
        assert!(matches!(model.score(&u, &[0, 1]), Err(Error::UndefinedScore)));

        // score * varsigma = -eps_hat identically for a nontrivial net
        let net = MlpEpsNet::<f64>::init(3, 16, 8, 2);
        let model = ScoreModel::new(Box::new(net), ScoreRole::CriticFake, schedule.clone());
        let taus = vec![2usize, 5];
        let eps = model.eps(&u, &taus).unwrap();
        let sc = model.score(&u, &taus).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let lhs = sc[[i, j]] * schedule.varsigma[taus[i]];
                assert!((lhs + eps[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_gaussian_score_at_one() {
        // analytic "model": for data N(0,1) the diffused marginal stays
        // N(0,1); its score at u is -u, realized by eps_hat = varsigma * u.
        let schedule = NoiseSchedule::cosine(16);
        struct UnitGauss {
            schedule: NoiseSchedule,
            params: ParamStore<f64>,
        }
        impl EpsilonNet<f64> for UnitGauss {
            fn params(&self) -> &ParamStore<f64> {
                &self.params
            }
            fn params_mut(&mut self) -> &mut ParamStore<f64> {
                &mut self.params
            }
            fn forward(
                &self,
                g: &mut Graph<f64>,
                _b: &Bound,
                u: Var,
                taus: &[usize],
            ) -> (Var, Var) {
                let scales: Vec<f64> = taus.iter().map(|&t| self.schedule.varsigma[t]).collect();
                let eps = g.per_sample_scale(u, scales);
                (eps, u)
            }
            fn clone_box(&self) -> Box<dyn EpsilonNet<f64>> {
                unimplemented!()
            }
            fn trunk_channels(&self) -> usize {
                1
            }
            fn trunk_is_spatial(&self) -> bool {
                false
            }
        }
        let model = ScoreModel::new(
            Box::new(UnitGauss {
                schedule: schedule.clone(),
                params: ParamStore::new(),
            }),
            ScoreRole::TeacherReal,
            schedule,
        );
        let u = ArrayD::from_elem(IxDyn(&[1, 1]), 1.0);
        for tau in [1usize, 8, 15] {
            let sc = model.score(&u, &[tau]).unwrap();
            assert!((sc[[0, 0]] + 1.0).abs() < 1e-12, "score at u=1 must be -1");
        }
    }

    #[test]
    fn dsm_loss_perfect_and_zero_models() {
        let schedule = NoiseSchedule::cosine(32);
        let perfect = ScoreModel::new(
            Box::new(PerfectZeroData {
                schedule: schedule.clone(),
                params: ParamStore::new(),
            }),
            ScoreRole::TeacherReal,
            schedule.clone(),
        );
        let zeros = ArrayD::<f64>::zeros(IxDyn(&[64, 4]));
        let loss = dsm_loss(&perfect, &zeros, 3).unwrap();
        assert!(loss.abs() < 1e-20, "perfect denoiser loss must be 0");

        // eps_hat = 0: expected loss 1.0 per element over many draws
        let zero_model = ScoreModel::new(
            Box::new(ZeroNet {
                params: ParamStore::new(),
            }),
            ScoreRole::CriticFake,
            schedule,
        );
        let big = ArrayD::<f64>::zeros(IxDyn(&[500, 24]));
        let mut acc = 0.0;
        let trials = 2;
        for s in 0..trials {
            acc += dsm_loss(&zero_model, &big, s as u64).unwrap();
        }
        let mean = acc / trials as f64;
        assert!(
            (mean - 1.0).abs() < 0.05,
            "zero predictor mean loss {mean} should be 1.0 +- 0.05"
        );

        // seeded determinism
        let a = dsm_loss(&zero_model, &big, 7).unwrap();
        let b = dsm_loss(&zero_model, &big, 7).unwrap();
        assert_eq!(a, b);
        // empty batch
        let empty = ArrayD::<f64>::zeros(IxDyn(&[0, 4]));
        assert!(matches!(
            dsm_loss(&zero_model, &empty, 0),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn dsm_gradient_matches_finite_differences_small_model() {
        // 4-parameter toy model: eps_hat = w (2x2 diag-ish linear map on u)
        // realized by an MlpEpsNet is overkill; instead check through the
        // graph with a tiny Linear net on 2-d points.
        use crate::graph::{max_rel_err, numeric_grad};
        let schedule = NoiseSchedule::cosine(16);
        let net = MlpEpsNet::<f64>::init(2, 4, 4, 9);
        let pool = {
            let mut r = rng::rng_for(5, Stream::Oracle, 0);
            rng::normal_array::<f64>(&mut r, &[6, 2])
        };
        // pick one weight array and gradcheck the dsm loss wrt it
        let name = "s.fc1.w";
        let w0 = net.params().get(name).clone();
        let eval = |w: &ArrayD<f64>| -> f64 {
            let mut net2 = net.clone();
            *net2.params_mut().get_mut(name) = w.clone();
            let model = ScoreModel::new(Box::new(net2), ScoreRole::CriticFake, schedule.clone());
            dsm_loss(&model, &pool, 42).unwrap()
        };
        // analytic grad
        let model = ScoreModel::new(Box::new(net.clone()), ScoreRole::CriticFake, schedule.clone());
        let mut g = Graph::new();
        let b = bind(&mut g, model.net.params());
        let loss = dsm_loss_graph(&mut g, model.net.as_ref(), &b, &pool, &schedule, 42).unwrap();
        let mut grads = g.backward(loss);
        let pg = b.grads(model.net.params(), &mut grads);
        let analytic = pg.get(name).unwrap().clone();
        let mut f = |w: &ArrayD<f64>| eval(w);
        let numeric = numeric_grad(&mut f, &w0, 1e-6);
        assert!(max_rel_err(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn frozen_model_rejects_updates() {
        let schedule = NoiseSchedule::cosine(8);
        let net = MlpEpsNet::<f64>::init(2, 4, 4, 1);
        let mut model = ScoreModel::new(Box::new(net), ScoreRole::TeacherReal, schedule);
        model.frozen = true;
        assert!(matches!(model.params_mut(), Err(Error::FrozenModel)));
        let mut opt = Adam::new(1e-3, 0.9, 0.999);
        let batch = ArrayD::<f64>::zeros(IxDyn(&[4, 2]));
        assert!(matches!(
            dsm_step(&mut model, &mut opt, &batch, 0),
            Err(Error::FrozenModel)
        ));
    }

    #[test]
    fn teacher_training_reduces_loss_on_gaussian_points() {
        // 1-d data from N(0,1): trained score at u=0.5 and mid tau should be
        // within 10% of the analytic marginal score -u (marginal stays
        // N(0,1) under the VP process).
        let schedule = NoiseSchedule::cosine(16);
        let net = MlpEpsNet::<f64>::init(1, 32, 16, 3);
        let mut model = ScoreModel::new(Box::new(net), ScoreRole::TeacherReal, schedule.clone());
        let pool = {
            let mut r = rng::rng_for(17, Stream::Oracle, 1);
            rng::normal_array::<f64>(&mut r, &[4096, 1])
        };
        let log = fit_dsm(&mut model, &pool, 900, 128, 2e-3, 21).unwrap();
        let head: f64 = log[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = log[log.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!(tail < head, "dsm loss should decrease: {head} -> {tail}");
        let u = ArrayD::from_elem(IxDyn(&[1, 1]), 0.5);
        let tau = 8;
        let sc = model.score(&u, &[tau]).unwrap()[[0, 0]];
        let rel = (sc - (-0.5)).abs() / 0.5;
        assert!(rel <= 0.10, "score {sc} vs -0.5, rel err {rel}");
    }
}
