//! Small analytic denoisers used as test oracles and for wiring checks.

use ndarray::{Array2, ArrayView2};

use super::{Denoiser, WindowShape};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Returns its input unchanged.
#[derive(Clone, Debug)]
pub struct IdentityDouble {
    pub shape: WindowShape,
}

impl Denoiser for IdentityDouble {
    type Tape = ();

    fn shape(&self) -> WindowShape {
        self.shape
    }

    fn forward_taped(
        &self,
        noisy: ArrayView2<f64>,
        levels: &[usize],
        obs: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, ())> {
        self.shape.check(noisy, levels, obs)?;
        Ok((noisy.to_owned(), ()))
    }

    fn vjp(&self, _: &(), upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.shape.check_upstream(upstream)?;
        Ok(upstream.to_owned())
    }
}

/// `vec(Â⁰) = M · vec(A^k)` with row-major flattening.
#[derive(Clone, Debug)]
pub struct LinearDouble {
    pub shape: WindowShape,
    pub matrix: Array2<f64>,
}

impl LinearDouble {
    pub fn new(shape: WindowShape, matrix: Array2<f64>) -> Result<Self> {
        let n = shape.horizon * shape.action_dim;
        if matrix.dim() != (n, n) {
            return Err(Error::Shape(format!(
                "matrix {:?}, expected ({n}, {n})",
                matrix.dim()
            )));
        }
        Ok(Self { shape, matrix })
    }
}

impl Denoiser for LinearDouble {
    type Tape = ();

    fn shape(&self) -> WindowShape {
        self.shape
    }

    fn forward_taped(
        &self,
        noisy: ArrayView2<f64>,
        levels: &[usize],
        obs: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, ())> {
        self.shape.check(noisy, levels, obs)?;
        let flat = noisy.iter().copied().collect::<ndarray::Array1<f64>>();
        let out = self.matrix.dot(&flat);
        let out = out
            .into_shape_with_order((self.shape.horizon, self.shape.action_dim))
            .expect("square matrix preserves size");
        Ok((out, ()))
    }

    fn vjp(&self, _: &(), upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.shape.check_upstream(upstream)?;
        let flat = upstream.iter().copied().collect::<ndarray::Array1<f64>>();
        let out = self.matrix.t().dot(&flat);
        Ok(out
            .into_shape_with_order((self.shape.horizon, self.shape.action_dim))
            .expect("square matrix preserves size"))
    }
}

/// Acts on every entry independently and never looks at the row index:
/// `x = g(k)·a + (1 − g(k))·anchor + 0.1·sin(a)`, where `g` decays with the
/// level and `anchor` is the first entry of the newest observation.
///
/// Because rows never interact and the row index is ignored, rolling the
/// action queue reproduces batch DDIM exactly for this double.
#[derive(Clone, Debug)]
pub struct SeparableDouble {
    pub shape: WindowShape,
    gains: Vec<f64>,
}

impl SeparableDouble {
    pub fn new(shape: WindowShape, schedule: &NoiseSchedule) -> Self {
        let gains = schedule
            .alpha_bars()
            .iter()
            .map(|&ab| {
                // posterior-mean gain for data of variance 0.25
                0.25 * ab.sqrt() / (0.25 * ab + (1.0 - ab))
            })
            .collect();
        Self { shape, gains }
    }

    /// Output gain for a row at `level`.
    pub fn gain(&self, level: usize) -> f64 {
        self.gains[level]
    }
}

pub struct SeparableTape {
    noisy: Array2<f64>,
    levels: Vec<usize>,
}

impl Denoiser for SeparableDouble {
    type Tape = SeparableTape;

    fn shape(&self) -> WindowShape {
        self.shape
    }

    fn forward_taped(
        &self,
        noisy: ArrayView2<f64>,
        levels: &[usize],
        obs: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, SeparableTape)> {
        self.shape.check(noisy, levels, obs)?;
        let anchor = obs[[obs.nrows() - 1, 0]];
        let mut out = noisy.to_owned();
        for (h, mut row) in out.rows_mut().into_iter().enumerate() {
            let g = self.gains[levels[h]];
            row.mapv_inplace(|a| g * a + (1.0 - g) * anchor + 0.1 * a.sin());
        }
        Ok((
            out,
            SeparableTape {
                noisy: noisy.to_owned(),
                levels: levels.to_vec(),
            },
        ))
    }

    fn vjp(&self, tape: &SeparableTape, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.shape.check_upstream(upstream)?;
        let mut out = upstream.to_owned();
        for (h, mut row) in out.rows_mut().into_iter().enumerate() {
            let g = self.gains[tape.levels[h]];
            for (u, a) in row.iter_mut().zip(tape.noisy.row(h)) {
                *u *= g + 0.1 * a.cos();
            }
        }
        Ok(out)
    }
}

/// Returns the observation window as its prediction; the observation window
/// must therefore have the action window's shape. Used to stand in for a
/// perfect predictor by passing the clean window as the observation.
#[derive(Clone, Debug)]
pub struct ObsEchoDouble {
    pub shape: WindowShape,
}

impl Denoiser for ObsEchoDouble {
    type Tape = ();

    fn shape(&self) -> WindowShape {
        self.shape
    }

    fn forward_taped(
        &self,
        noisy: ArrayView2<f64>,
        levels: &[usize],
        obs: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, ())> {
        self.shape.check(noisy, levels, obs)?;
        if obs.dim() != noisy.dim() {
            return Err(Error::Shape(
                "echo double needs obs shaped like actions".into(),
            ));
        }
        Ok((obs.to_owned(), ()))
    }

    fn vjp(&self, _: &(), upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(Array2::zeros(upstream.dim()))
    }
}
