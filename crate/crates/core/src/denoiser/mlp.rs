//! Desk-scale sample predictor.
//!
//! Each window row is encoded by a shared per-row encoder fed with the
//! scaled noisy action and a sinusoidal embedding of that row's own level.
//! The encodings of the whole window, together with the flattened
//! observation window, pass through two dense mixing layers, and a shared
//! per-row decoder turns `[encoding, mixed features, level embedding]` into
//! the network output `F`. The prediction is
//!
//! ```text
//! Â⁰ = c_skip(k)·A^k + c_out(k)·F
//! ```
//!
//! with variance-preserving skip/output coefficients, so a freshly
//! initialised network already returns the linear posterior mean for data
//! of standard deviation `sigma_data`, and level-0 rows come back unchanged.
//!
//! All parameters live in one flat vector; gradients are computed by hand.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Denoiser, WindowShape};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Width of the sinusoidal level embedding (even).
    pub embed_dim: usize,
    /// Per-row encoder width.
    pub enc_width: usize,
    /// Hidden width of the window mixing layers.
    pub mix_width: usize,
    /// Mixed features handed back to each row.
    pub mix_channels: usize,
    /// Per-row decoder width.
    pub dec_width: usize,
    /// Assumed standard deviation of normalised actions.
    pub sigma_data: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            enc_width: 16,
            mix_width: 256,
            mix_channels: 16,
            dec_width: 32,
            sigma_data: 0.5,
        }
    }
}

/// Per-level input, skip and output coefficients.
#[derive(Clone, Debug)]
pub struct Preconditioner {
    pub c_in: Vec<f64>,
    pub c_skip: Vec<f64>,
    pub c_out: Vec<f64>,
}

impl Preconditioner {
    pub fn new(schedule: &NoiseSchedule, sigma_data: f64) -> Self {
        let sd2 = sigma_data * sigma_data;
        let mut c_in = Vec::new();
        let mut c_skip = Vec::new();
        let mut c_out = Vec::new();
        for &ab in schedule.alpha_bars() {
            let var = 1.0 - ab;
            let total = ab * sd2 + var;
            c_in.push(1.0 / total.sqrt());
            c_skip.push(ab.sqrt() * sd2 / total);
            c_out.push(var.sqrt() * sigma_data / total.sqrt());
        }
        Self {
            c_in,
            c_skip,
            c_out,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Slot {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug)]
struct Layout {
    w_enc: Slot,
    b_enc: Slot,
    w_mix1: Slot,
    b_mix1: Slot,
    w_mix2: Slot,
    b_mix2: Slot,
    w_dec1: Slot,
    b_dec1: Slot,
    w_dec2: Slot,
    b_dec2: Slot,
    total: usize,
}

impl Layout {
    fn new(shape: &WindowShape, cfg: &MlpConfig) -> Self {
        let mut offset = 0;
        let mut slot = |rows, cols| {
            let s = Slot { offset, rows, cols };
            offset += rows * cols;
            s
        };
        let h = shape.horizon;
        let w_enc = slot(shape.action_dim + cfg.embed_dim, cfg.enc_width);
        let b_enc = slot(1, cfg.enc_width);
        let w_mix1 = slot(
            h * cfg.enc_width + shape.obs_len * shape.obs_dim,
            cfg.mix_width,
        );
        let b_mix1 = slot(1, cfg.mix_width);
        let w_mix2 = slot(cfg.mix_width, h * cfg.mix_channels);
        let b_mix2 = slot(1, h * cfg.mix_channels);
        let w_dec1 = slot(
            cfg.enc_width + cfg.mix_channels + cfg.embed_dim,
            cfg.dec_width,
        );
        let b_dec1 = slot(1, cfg.dec_width);
        let w_dec2 = slot(cfg.dec_width, shape.action_dim);
        let b_dec2 = slot(1, shape.action_dim);
        Self {
            w_enc,
            b_enc,
            w_mix1,
            b_mix1,
            w_mix2,
            b_mix2,
            w_dec1,
            b_dec1,
            w_dec2,
            b_dec2,
            total: offset,
        }
    }

    fn weights(&self) -> [Slot; 5] {
        [
            self.w_enc,
            self.w_mix1,
            self.w_mix2,
            self.w_dec1,
            self.w_dec2,
        ]
    }
}

/// Intermediate activations of a batched forward pass.
pub struct MlpTape {
    batch: usize,
    noisy: Array2<f64>,
    c_in: Array1<f64>,
    c_skip: Array1<f64>,
    c_out: Array1<f64>,
    x1: Array2<f64>,
    p1: Array2<f64>,
    x2: Array2<f64>,
    p2: Array2<f64>,
    h2: Array2<f64>,
    p3: Array2<f64>,
    x4: Array2<f64>,
    p4: Array2<f64>,
    h4: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct MlpDenoiser {
    shape: WindowShape,
    config: MlpConfig,
    schedule: NoiseSchedule,
    layout: Layout,
    params: Vec<f64>,
    embedding: Array2<f64>,
    precond: Preconditioner,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn accumulate_weight(
    grad: &mut Option<&mut [f64]>,
    slot: Slot,
    input: &Array2<f64>,
    delta: &Array2<f64>,
) {
    if let Some(grad) = grad.as_deref_mut() {
        let mut view = ArrayViewMut2::from_shape(
            (slot.rows, slot.cols),
            &mut grad[slot.offset..slot.offset + slot.len()],
        )
        .expect("layout slot fits");
        general_mat_mul(1.0, &input.t(), delta, 1.0, &mut view);
    }
}

fn accumulate_bias(grad: &mut Option<&mut [f64]>, slot: Slot, delta: &Array2<f64>) {
    if let Some(grad) = grad.as_deref_mut() {
        let sums = delta.sum_axis(Axis(0));
        for (g, s) in grad[slot.offset..slot.offset + slot.len()]
            .iter_mut()
            .zip(sums.iter())
        {
            *g += s;
        }
    }
}

fn level_embedding(steps: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            if half > 1 {
                (-(10_000f64.ln()) * i as f64 / (half - 1) as f64).exp()
            } else {
                1.0
            }
        })
        .collect();
    Array2::from_shape_fn((steps + 1, dim), |(k, j)| {
        if j < half {
            (k as f64 * freqs[j]).sin()
        } else {
            (k as f64 * freqs[j - half]).cos()
        }
    })
}

impl MlpDenoiser {
    /// Builds a network with LeCun-normal weights and zero biases. The output
    /// layer is scaled down so the initial prediction stays close to the
    /// skip path.
    pub fn new<R: Rng + ?Sized>(
        shape: WindowShape,
        config: MlpConfig,
        schedule: NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let layout = Layout::new(&shape, &config);
        let mut params = vec![0.0; layout.total];
        for (i, w) in layout.weights().iter().enumerate() {
            let gain = if i == 4 { 0.1 } else { 1.0 };
            let std = gain / (w.rows as f64).sqrt();
            for p in &mut params[w.offset..w.offset + w.len()] {
                *p = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Self::from_params(shape, config, schedule, params)
    }

    pub fn from_params(
        shape: WindowShape,
        config: MlpConfig,
        schedule: NoiseSchedule,
        params: Vec<f64>,
    ) -> Result<Self> {
        if config.embed_dim == 0 || !config.embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "embed_dim must be positive and even, got {}",
                config.embed_dim
            )));
        }
        if schedule.horizon() != shape.horizon {
            return Err(Error::Mismatch {
                what: "horizon",
                expected: shape.horizon.to_string(),
                found: schedule.horizon().to_string(),
            });
        }
        let layout = Layout::new(&shape, &config);
        if params.len() != layout.total {
            return Err(Error::Mismatch {
                what: "parameter count",
                expected: layout.total.to_string(),
                found: params.len().to_string(),
            });
        }
        let embedding = level_embedding(schedule.steps(), config.embed_dim);
        let precond = Preconditioner::new(&schedule, config.sigma_data);
        Ok(Self {
            shape,
            config,
            schedule,
            layout,
            params,
            embedding,
            precond,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn preconditioner(&self) -> &Preconditioner {
        &self.precond
    }

    fn mat(&self, slot: Slot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (slot.rows, slot.cols),
            &self.params[slot.offset..slot.offset + slot.len()],
        )
        .expect("layout slot fits")
    }

    fn bias(&self, slot: Slot) -> ArrayView2<'_, f64> {
        self.mat(slot)
    }

    /// Batched forward pass. `noisy` stacks `B` windows row-wise
    /// (`B·H × d_a`), `levels` has one entry per row and `obs` holds one
    /// flattened observation window per example (`B × N·d_o`).
    pub fn forward_batch(
        &self,
        noisy: ArrayView2<f64>,
        levels: &[usize],
        obs: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, MlpTape)> {
        let WindowShape {
            horizon,
            action_dim,
            obs_len,
            obs_dim,
        } = self.shape;
        let batch = obs.nrows();
        let rows = batch * horizon;
        if noisy.dim() != (rows, action_dim)
            || levels.len() != rows
            || obs.ncols() != obs_len * obs_dim
        {
            return Err(Error::Shape(format!(
                "batch of {batch}: actions {:?}, {} levels, observations {:?}",
                noisy.dim(),
                levels.len(),
                obs.dim()
            )));
        }
        if let Some(&k) = levels.iter().find(|&&k| k > self.schedule.steps()) {
            return Err(Error::Shape(format!(
                "level {k} exceeds K = {}",
                self.schedule.steps()
            )));
        }

        let cfg = &self.config;
        let c_in = Array1::from_iter(levels.iter().map(|&k| self.precond.c_in[k]));
        let c_skip = Array1::from_iter(levels.iter().map(|&k| self.precond.c_skip[k]));
        let c_out = Array1::from_iter(levels.iter().map(|&k| self.precond.c_out[k]));

        let emb = self.embedding.select(Axis(0), levels);
        let scaled = &noisy * &c_in.view().insert_axis(Axis(1));
        let x1 = concatenate![Axis(1), scaled, emb];
        let p1 = x1.dot(&self.mat(self.layout.w_enc)) + self.bias(self.layout.b_enc);
        let h1 = p1.mapv(silu);

        let h1_flat = h1
            .view()
            .into_shape_with_order((batch, horizon * cfg.enc_width))
            .expect("contiguous rows");
        let x2 = concatenate![Axis(1), h1_flat, obs];
        let p2 = x2.dot(&self.mat(self.layout.w_mix1)) + self.bias(self.layout.b_mix1);
        let h2 = p2.mapv(silu);
        let p3 = h2.dot(&self.mat(self.layout.w_mix2)) + self.bias(self.layout.b_mix2);
        let h3 = p3
            .mapv(silu)
            .into_shape_with_order((rows, cfg.mix_channels))
            .expect("contiguous rows");

        let x4 = concatenate![Axis(1), h1, h3, emb];
        let p4 = x4.dot(&self.mat(self.layout.w_dec1)) + self.bias(self.layout.b_dec1);
        let h4 = p4.mapv(silu);
        let f = h4.dot(&self.mat(self.layout.w_dec2)) + self.bias(self.layout.b_dec2);

        let out =
            &noisy * &c_skip.view().insert_axis(Axis(1)) + &f * &c_out.view().insert_axis(Axis(1));
        let tape = MlpTape {
            batch,
            noisy: noisy.to_owned(),
            c_in,
            c_skip,
            c_out,
            x1,
            p1,
            x2,
            p2,
            h2,
            p3,
            x4,
            p4,
            h4,
        };
        Ok((out, tape))
    }

    /// Backward pass for an upstream gradient on the output. Parameter
    /// gradients are accumulated into `param_grad` when given; the gradient
    /// on the noisy input is returned when `want_input` is set.
    pub fn backward(
        &self,
        tape: &MlpTape,
        d_out: ArrayView2<f64>,
        mut param_grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let cfg = &self.config;
        let l = &self.layout;
        let horizon = self.shape.horizon;
        let rows = tape.batch * horizon;

        let d_f = &d_out * &tape.c_out.view().insert_axis(Axis(1));
        accumulate_weight(&mut param_grad, l.w_dec2, &tape.h4, &d_f);
        let mut d_p4 = d_f.dot(&self.mat(l.w_dec2).t());
        Zip::from(&mut d_p4)
            .and(&tape.p4)
            .for_each(|d, &p| *d *= silu_grad(p));
        accumulate_weight(&mut param_grad, l.w_dec1, &tape.x4, &d_p4);

        let d_x4 = d_p4.dot(&self.mat(l.w_dec1).t());
        let mut d_h1 = d_x4.slice(s![.., ..cfg.enc_width]).to_owned();
        let mut d_p3 = d_x4
            .slice(s![.., cfg.enc_width..cfg.enc_width + cfg.mix_channels])
            .to_owned()
            .into_shape_with_order((tape.batch, horizon * cfg.mix_channels))
            .expect("contiguous rows");
        Zip::from(&mut d_p3)
            .and(&tape.p3)
            .for_each(|d, &p| *d *= silu_grad(p));
        accumulate_weight(&mut param_grad, l.w_mix2, &tape.h2, &d_p3);

        let mut d_p2 = d_p3.dot(&self.mat(l.w_mix2).t());
        Zip::from(&mut d_p2)
            .and(&tape.p2)
            .for_each(|d, &p| *d *= silu_grad(p));
        accumulate_weight(&mut param_grad, l.w_mix1, &tape.x2, &d_p2);

        let d_x2 = d_p2.dot(&self.mat(l.w_mix1).t());
        let d_h1_mix = d_x2
            .slice(s![.., ..horizon * cfg.enc_width])
            .to_owned()
            .into_shape_with_order((rows, cfg.enc_width))
            .expect("contiguous rows");
        d_h1 += &d_h1_mix;
        let mut d_p1 = d_h1;
        Zip::from(&mut d_p1)
            .and(&tape.p1)
            .for_each(|d, &p| *d *= silu_grad(p));
        accumulate_weight(&mut param_grad, l.w_enc, &tape.x1, &d_p1);

        accumulate_bias(&mut param_grad, l.b_dec2, &d_f);
        accumulate_bias(&mut param_grad, l.b_dec1, &d_p4);
        accumulate_bias(&mut param_grad, l.b_mix2, &d_p3);
        accumulate_bias(&mut param_grad, l.b_mix1, &d_p2);
        accumulate_bias(&mut param_grad, l.b_enc, &d_p1);

        if !want_input {
            return None;
        }
        let d_x1 = d_p1.dot(&self.mat(l.w_enc).t());
        let mut d_noisy = &d_out * &tape.c_skip.view().insert_axis(Axis(1));
        let through_net =
            &d_x1.slice(s![.., ..self.shape.action_dim]) * &tape.c_in.view().insert_axis(Axis(1));
        d_noisy += &through_net;
        Some(d_noisy)
    }

    fn single_obs(&self, obs: ArrayView2<f64>) -> Array2<f64> {
        obs.to_owned()
            .into_shape_with_order((1, self.shape.obs_len * self.shape.obs_dim))
            .expect("checked shape")
    }
}

impl Denoiser for MlpDenoiser {
    type Tape = MlpTape;

    fn shape(&self) -> WindowShape {
        self.shape
    }

    fn forward_taped(
        &self,
        noisy: ArrayView2<f64>,
        levels: &[usize],
        obs: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, MlpTape)> {
        self.shape.check(noisy, levels, obs)?;
        let flat = self.single_obs(obs);
        self.forward_batch(noisy, levels, flat.view())
    }

    fn vjp(&self, tape: &MlpTape, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        if upstream.dim() != tape.noisy.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?}, expected {:?}",
                upstream.dim(),
                tape.noisy.dim()
            )));
        }
        Ok(self
            .backward(tape, upstream, None, true)
            .expect("input gradient requested"))
    }
}
