//! Central finite-difference checks of the hand-written backward passes.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use qplan::data::{Affine, Normalizer};
use qplan::denoiser::{
    loss_and_grad, Denoiser, MlpConfig, MlpDenoiser, TrainingBatch, WindowShape,
};
use qplan::guidance::{energy_in_world, guidance_gradient, DistanceMetric, RepulsiveEnergy};
use qplan::schedule::NoiseSchedule;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;
/// Entries smaller than this are compared in absolute terms; the
/// difference quotient itself is only good to about 1e-9 here.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default)]
pub struct Worst {
    pub rel: f64,
    pub checked: usize,
}

impl Worst {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(FLOOR);
        self.rel = self.rel.max((analytic - numeric).abs() / scale);
        self.checked += 1;
    }

    pub fn merge(self, other: Worst) -> Worst {
        Worst {
            rel: self.rel.max(other.rel),
            checked: self.checked + other.checked,
        }
    }
}

fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + STEP) - f(x - STEP)) / (2.0 * STEP)
}

/// A small random network with every parameter drawn at unit-ish scale, so
/// no layer sits in a flat or saturated regime.
pub struct Instance {
    pub net: MlpDenoiser,
    pub noisy: Array2<f64>,
    pub levels: Vec<usize>,
    pub obs: Array2<f64>,
    pub upstream: Array2<f64>,
    pub normalizer: Normalizer,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(2..=4);
    let shape = WindowShape {
        horizon,
        action_dim: 2,
        obs_len: rng.random_range(1..=2),
        obs_dim: rng.random_range(2..=3),
    };
    let tau = rng.random_range(1..=3);
    let schedule = NoiseSchedule::build(horizon * tau, horizon, 0.02, 0.3).unwrap();
    let arch = MlpConfig {
        embed_dim: 4,
        enc_width: rng.random_range(2..=4),
        mix_width: rng.random_range(3..=6),
        mix_channels: rng.random_range(1..=3),
        dec_width: rng.random_range(2..=5),
        sigma_data: 0.5,
    };
    let mut net = MlpDenoiser::new(shape, arch, schedule.clone(), &mut rng).unwrap();
    for p in net.params_mut() {
        *p = 0.6 * rng.sample::<f64, _>(StandardNormal);
    }
    let normal = |rng: &mut ChaCha8Rng, dim| {
        Array2::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal))
    };
    let noisy = normal(&mut rng, (horizon, 2));
    let levels = (0..horizon)
        .map(|_| rng.random_range(0..=schedule.steps()))
        .collect();
    let obs = normal(&mut rng, (shape.obs_len, shape.obs_dim));
    let upstream = normal(&mut rng, (horizon, 2));
    let mut affine = |d: usize| {
        let min: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..0.0)).collect();
        let max = min.iter().map(|m| m + rng.random_range(0.5..3.0)).collect();
        Affine { min, max }
    };
    let normalizer = Normalizer {
        obs: affine(shape.obs_dim),
        action: affine(2),
    };
    Instance {
        net,
        noisy,
        levels,
        obs,
        upstream,
        normalizer,
    }
}

fn weighted_output(net: &MlpDenoiser, inst: &Instance, noisy: ArrayView2<f64>) -> f64 {
    let out = net.forward(noisy, &inst.levels, inst.obs.view()).unwrap();
    (&out * &inst.upstream).sum()
}

/// Parameter gradient of `Σ U ⊙ x_θ(A, k, O)` from the backward pass.
pub fn check_params(inst: &Instance) -> Worst {
    let flat = inst
        .obs
        .clone()
        .into_shape_with_order((1, inst.obs.len()))
        .unwrap();
    let (_, tape) = inst
        .net
        .forward_batch(inst.noisy.view(), &inst.levels, flat.view())
        .unwrap();
    let mut grad = vec![0.0; inst.net.num_params()];
    inst.net
        .backward(&tape, inst.upstream.view(), Some(&mut grad), false);

    let mut worst = Worst::default();
    let mut net = inst.net.clone();
    for (i, &analytic) in grad.iter().enumerate() {
        let p0 = net.params()[i];
        let numeric = central(
            |x| {
                net.params_mut()[i] = x;
                weighted_output(&net, inst, inst.noisy.view())
            },
            p0,
        );
        net.params_mut()[i] = p0;
        worst.record(analytic, numeric);
    }
    worst
}

/// Parameter gradient of the training loss, with levels and noise redrawn
/// from the same seed on every evaluation.
pub fn check_training_loss(inst: &Instance, mix_ratio: f64) -> Worst {
    let (h, obs_flat) = (inst.noisy.nrows(), inst.obs.len());
    let clean = inst.noisy.mapv(f64::tanh);
    let obs = inst
        .obs
        .clone()
        .into_shape_with_order((1, obs_flat))
        .unwrap();
    let batch = TrainingBatch {
        clean: clean.view(),
        obs: obs.view(),
    };
    assert_eq!(clean.nrows(), h);
    let loss = |net: &MlpDenoiser| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        loss_and_grad(net, &batch, mix_ratio, &mut rng, 0).unwrap()
    };
    let (_, grad) = loss(&inst.net);
    let mut worst = Worst::default();
    let mut net = inst.net.clone();
    for (i, &analytic) in grad.iter().enumerate() {
        let p0 = net.params()[i];
        let numeric = central(
            |x| {
                net.params_mut()[i] = x;
                loss(&net).0
            },
            p0,
        );
        net.params_mut()[i] = p0;
        worst.record(analytic, numeric);
    }
    worst
}

/// Input gradient through the vector-Jacobian product.
pub fn check_input(inst: &Instance) -> Worst {
    let analytic = inst
        .net
        .input_grad(
            inst.noisy.view(),
            &inst.levels,
            inst.obs.view(),
            inst.upstream.view(),
        )
        .unwrap();
    let mut worst = Worst::default();
    let mut a = inst.noisy.clone();
    for idx in 0..a.len() {
        let (r, c) = (idx / a.ncols(), idx % a.ncols());
        let a0 = a[[r, c]];
        let numeric = central(
            |x| {
                a[[r, c]] = x;
                weighted_output(&inst.net, inst, a.view())
            },
            a0,
        );
        a[[r, c]] = a0;
        worst.record(analytic[[r, c]], numeric);
    }
    worst
}

/// Obstacles placed on the rising flank of the barrier around the current
/// prediction, where the energy has a gradient worth checking.
fn nearby_obstacles(inst: &Instance, energy: &RepulsiveEnergy, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let clean = inst
        .net
        .forward(inst.noisy.view(), &inst.levels, inst.obs.view())
        .unwrap();
    let world = inst.normalizer.action.denormalize(clean.view());
    let reach = match energy.metric {
        DistanceMetric::SquaredMinusRadius => energy.radius.sqrt(),
        DistanceMetric::DistanceMinusRadius => energy.radius,
    };
    (0..2)
        .map(|_| {
            let row = world.row(rng.random_range(0..world.nrows()));
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let d = reach * rng.random_range(0.9..1.1);
            vec![row[0] + d * angle.cos(), row[1] + d * angle.sin()]
        })
        .collect()
}

/// Gradient of `f(denormalise(x_θ(A)))` with respect to the noisy window,
/// the quantity the guidance step consumes.
pub fn check_guidance_chain(inst: &Instance, metric: DistanceMetric, seed: u64) -> Worst {
    let energy = RepulsiveEnergy {
        lambda: 50.0,
        omega: 100.0,
        radius: 0.6,
        metric,
    };
    let obstacles = nearby_obstacles(inst, &energy, seed);
    let (clean, tape) = inst
        .net
        .forward_taped(inst.noisy.view(), &inst.levels, inst.obs.view())
        .unwrap();
    let (_, analytic) = guidance_gradient(
        &inst.net,
        &tape,
        clean.view(),
        &energy,
        &obstacles,
        &inst.normalizer,
    )
    .unwrap();

    let value = |a: ArrayView2<f64>| {
        let clean = inst.net.forward(a, &inst.levels, inst.obs.view()).unwrap();
        energy_in_world(&energy, clean.view(), &obstacles, &inst.normalizer).0
    };
    let mut worst = Worst::default();
    let mut a = inst.noisy.clone();
    for idx in 0..a.len() {
        let (r, c) = (idx / a.ncols(), idx % a.ncols());
        let a0 = a[[r, c]];
        let numeric = central(
            |x| {
                a[[r, c]] = x;
                value(a.view())
            },
            a0,
        );
        a[[r, c]] = a0;
        worst.record(analytic[[r, c]], numeric);
    }
    worst
}

/// Every check on one instance.
pub fn check_all(seed: u64) -> Worst {
    let inst = instance(seed);
    let metric = if seed.is_multiple_of(2) {
        DistanceMetric::SquaredMinusRadius
    } else {
        DistanceMetric::DistanceMinusRadius
    };
    check_params(&inst)
        .merge(check_training_loss(&inst, 0.5))
        .merge(check_input(&inst))
        .merge(check_guidance_chain(&inst, metric, seed))
}
