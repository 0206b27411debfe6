//! Obstacle-free expert demonstrations, min-max normalisation and the
//! `(O_t, A_t)` window table the trainer samples from.
//!
//! On disk a dataset is one JSON header line followed by the raw payload:
//! for every demonstration its state rows then its action rows, as
//! little-endian `f64`s. See `docs/formats.md`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{geom, WorldConfig};
use crate::error::{Error, Result};
use crate::scenario::Scenario;

pub const DATASET_VERSION: u32 = 1;
const DATASET_MAGIC: &str = "qplan-dataset";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpertStyle {
    /// Equal steps along the segment, as few as the speed limit allows.
    #[default]
    Straight,
    /// Quintic minimum-jerk profile: slow at both ends.
    MinJerk,
}

impl std::str::FromStr for ExpertStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(Self::Straight),
            "min-jerk" | "min_jerk" => Ok(Self::MinJerk),
            _ => Err(Error::Config(format!("unknown expert style '{s}'"))),
        }
    }
}

/// One reaching trajectory. Row `t` of `states` is `o_t = [ee_t; goal]` and
/// row `t` of `actions` is the target position commanded at `t`, which is
/// where the end-effector is at `t + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub seed: u64,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.nrows() == 0
    }

    /// Expert path from `start` to `goal` never exceeding `v_max` per tick.
    pub fn expert(start: &[f64], goal: &[f64], v_max: f64, style: ExpertStyle, seed: u64) -> Self {
        let d = start.len();
        let dist = geom::dist(start, goal);
        let progress: Vec<f64> = if dist == 0.0 {
            vec![1.0]
        } else {
            match style {
                ExpertStyle::Straight => {
                    let n = (dist / v_max - 1e-9).ceil().max(1.0) as usize;
                    (1..=n).map(|i| i as f64 / n as f64).collect()
                }
                ExpertStyle::MinJerk => {
                    // peak speed of the quintic is 1.875 · dist / n
                    let n = (1.875 * dist / v_max - 1e-9).ceil().max(1.0) as usize;
                    (1..=n)
                        .map(|i| {
                            let s = i as f64 / n as f64;
                            s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
                        })
                        .collect()
                }
            }
        };
        let n = progress.len();
        let point = |f: f64| -> Vec<f64> {
            start
                .iter()
                .zip(goal)
                .map(|(a, b)| a + f * (b - a))
                .collect()
        };
        let mut states = Array2::zeros((n, 2 * d));
        let mut actions = Array2::zeros((n, d));
        let mut ee = start.to_vec();
        for (t, &f) in progress.iter().enumerate() {
            let target = if t + 1 == n { goal.to_vec() } else { point(f) };
            for j in 0..d {
                states[[t, j]] = ee[j];
                states[[t, d + j]] = goal[j];
                actions[[t, j]] = target[j];
            }
            ee = target;
        }
        Self {
            states,
            actions,
            seed,
            start: start.to_vec(),
            goal: goal.to_vec(),
        }
    }
}

/// Per-dimension affine map of `[min, max]` onto `[-1, 1]`. Constant
/// dimensions map to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Affine {
    pub fn fit(rows: impl IntoIterator<Item = Array1<f64>>, dim: usize) -> Self {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for row in rows {
            for j in 0..dim {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        Self { min, max }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Half-width `(max - min) / 2`, the derivative of denormalisation.
    pub fn scale(&self, j: usize) -> f64 {
        let half = 0.5 * (self.max[j] - self.min[j]);
        if half > 0.0 {
            half
        } else {
            1.0
        }
    }

    fn mid(&self, j: usize) -> f64 {
        0.5 * (self.max[j] + self.min[j])
    }

    pub fn normalize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mid(j)) / self.scale(j);
            }
        }
        out
    }

    pub fn denormalize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.scale(j) + self.mid(j);
            }
        }
        out
    }

    pub fn normalize_row(&self, x: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(
            x.iter()
                .enumerate()
                .map(|(j, v)| (v - self.mid(j)) / self.scale(j)),
        )
    }

    pub fn denormalize_row(&self, x: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(
            x.iter()
                .enumerate()
                .map(|(j, v)| v * self.scale(j) + self.mid(j)),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub obs: Affine,
    pub action: Affine,
}

impl Normalizer {
    pub fn fit(demos: &[Demonstration]) -> Result<Self> {
        let first = demos.first().ok_or_else(|| {
            Error::Config("cannot fit a normaliser to zero demonstrations".into())
        })?;
        let (d_o, d_a) = (first.states.ncols(), first.actions.ncols());
        let obs = Affine::fit(
            demos
                .iter()
                .flat_map(|d| d.states.rows().into_iter().map(|r| r.to_owned())),
            d_o,
        );
        let action = Affine::fit(
            demos
                .iter()
                .flat_map(|d| d.actions.rows().into_iter().map(|r| r.to_owned())),
            d_a,
        );
        Ok(Self { obs, action })
    }
}

/// Window geometry: `H` future actions, `N` past observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub horizon: usize,
    pub obs_len: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            horizon: 16,
            obs_len: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub style: ExpertStyle,
    pub seed: u64,
    pub world: WorldConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub demos: Vec<Demonstration>,
    pub normalizer: Normalizer,
    pub windows: WindowSpec,
    pub meta: DatasetMeta,
    /// `(demo, t)` for every window anchor.
    index: Vec<(usize, usize)>,
}

/// Draws `n` demonstrations between start and goal positions sampled from
/// `scenario` (its obstacles are ignored).
pub fn generate_expert(
    n: usize,
    scenario: &Scenario,
    style: ExpertStyle,
    windows: WindowSpec,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("need at least one demonstration".into()));
    }
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let demos = (0..n)
        .map(|_| {
            let demo_seed: u64 = rng.random();
            let mut demo_rng = ChaCha8Rng::seed_from_u64(demo_seed);
            let start = scenario.start.sample(&mut demo_rng);
            let goal = scenario.goal.sample(&mut demo_rng);
            Demonstration::expert(&start, &goal, scenario.world.v_max, style, demo_seed)
        })
        .collect();
    Dataset::new(
        demos,
        windows,
        DatasetMeta {
            style,
            seed,
            world: scenario.world.clone(),
        },
    )
}

impl Dataset {
    pub fn new(demos: Vec<Demonstration>, windows: WindowSpec, meta: DatasetMeta) -> Result<Self> {
        let normalizer = Normalizer::fit(&demos)?;
        Self::with_normalizer(demos, windows, meta, normalizer)
    }

    pub fn with_normalizer(
        demos: Vec<Demonstration>,
        windows: WindowSpec,
        meta: DatasetMeta,
        normalizer: Normalizer,
    ) -> Result<Self> {
        if windows.horizon == 0 || windows.obs_len == 0 {
            return Err(Error::Config(format!(
                "window geometry must be positive: {windows:?}"
            )));
        }
        for (i, d) in demos.iter().enumerate() {
            if d.is_empty()
                || d.states.nrows() != d.len()
                || d.states.ncols() != normalizer.obs.dim()
                || d.actions.ncols() != normalizer.action.dim()
            {
                return Err(Error::Corrupt {
                    what: "dataset",
                    detail: format!("demonstration {i} has inconsistent shapes"),
                });
            }
        }
        let index = demos
            .iter()
            .enumerate()
            .flat_map(|(i, d)| (0..d.len()).map(move |t| (i, t)))
            .collect();
        Ok(Self {
            demos,
            normalizer,
            windows,
            meta,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.normalizer.obs.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.normalizer.action.dim()
    }

    /// Raw `(O_t, A_t)` for window anchor `index`, padded at both episode
    /// edges.
    pub fn raw_window(&self, index: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        let &(demo, t) = self.index.get(index).ok_or(Error::OutOfRange {
            index,
            len: self.index.len(),
        })?;
        let d = &self.demos[demo];
        let (n, h) = (self.windows.obs_len, self.windows.horizon);
        let mut obs = Array2::zeros((n, self.obs_dim()));
        for i in 0..n {
            let src = (t + i + 1).saturating_sub(n);
            obs.row_mut(i).assign(&d.states.row(src));
        }
        let mut actions = Array2::zeros((h, self.action_dim()));
        for i in 0..h {
            let src = (t + i).min(d.len() - 1);
            actions.row_mut(i).assign(&d.actions.row(src));
        }
        Ok((obs, actions))
    }

    /// Normalised `(O_t, A⁰_t)`.
    pub fn window(&self, index: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        let (obs, actions) = self.raw_window(index)?;
        Ok((
            self.normalizer.obs.normalize(obs.view()),
            self.normalizer.action.normalize(actions.view()),
        ))
    }

    pub fn window_table(&self) -> Result<WindowTable> {
        let (h, n) = (self.windows.horizon, self.windows.obs_len);
        let (d_a, d_o) = (self.action_dim(), self.obs_dim());
        let mut actions = Array2::zeros((self.len() * h, d_a));
        let mut obs = Array2::zeros((self.len(), n * d_o));
        for i in 0..self.len() {
            let (o, a) = self.window(i)?;
            actions.slice_mut(s![i * h..(i + 1) * h, ..]).assign(&a);
            obs.row_mut(i).assign(&Array1::from_iter(o.iter().copied()));
        }
        Ok(WindowTable {
            horizon: h,
            actions,
            obs,
        })
    }

    fn header(&self) -> DatasetHeader {
        DatasetHeader {
            format: DATASET_MAGIC.into(),
            version: DATASET_VERSION,
            windows: self.windows,
            obs_dim: self.obs_dim(),
            action_dim: self.action_dim(),
            normalizer: self.normalizer.clone(),
            meta: self.meta.clone(),
            demos: self
                .demos
                .iter()
                .map(|d| DemoHeader {
                    len: d.len(),
                    seed: d.seed,
                    start: d.start.clone(),
                    goal: d.goal.clone(),
                })
                .collect(),
            payload_sha256: String::new(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for d in &self.demos {
            for v in d.states.iter().chain(d.actions.iter()) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    /// SHA-256 of the numeric payload.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.payload())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let payload = self.payload();
        let mut header = self.header();
        header.payload_sha256 = hex_digest(&payload);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, &header)?;
        f.write_all(b"\n")?;
        f.write_all(&payload)?;
        f.flush()?;
        Ok(())
    }

    /// Loads a dataset and checks it against the window geometry the caller
    /// expects, if any.
    pub fn load(path: &Path, expect: Option<WindowSpec>) -> Result<Self> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: DatasetHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Corrupt {
                what: "dataset header",
                detail: e.to_string(),
            })?;
        if header.format != DATASET_MAGIC {
            return Err(Error::Corrupt {
                what: "dataset header",
                detail: format!("format '{}' is not a dataset", header.format),
            });
        }
        if header.version != DATASET_VERSION {
            return Err(Error::Version {
                what: "dataset",
                expected: DATASET_VERSION,
                found: header.version,
            });
        }
        if let Some(expect) = expect {
            check_eq("horizon H", expect.horizon, header.windows.horizon)?;
            check_eq(
                "observation length N",
                expect.obs_len,
                header.windows.obs_len,
            )?;
        }
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        if hex_digest(&payload) != header.payload_sha256 {
            return Err(Error::Corrupt {
                what: "dataset payload",
                detail: "checksum mismatch".into(),
            });
        }
        let expected_len: usize = header
            .demos
            .iter()
            .map(|d| d.len * (header.obs_dim + header.action_dim) * 8)
            .sum();
        if payload.len() != expected_len {
            return Err(Error::Corrupt {
                what: "dataset payload",
                detail: format!("{} bytes, header describes {expected_len}", payload.len()),
            });
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut demos = Vec::with_capacity(header.demos.len());
        for d in &header.demos {
            let states = Array2::from_shape_fn((d.len, header.obs_dim), |_| {
                values.next().unwrap_or(f64::NAN)
            });
            let actions = Array2::from_shape_fn((d.len, header.action_dim), |_| {
                values.next().unwrap_or(f64::NAN)
            });
            demos.push(Demonstration {
                states,
                actions,
                seed: d.seed,
                start: d.start.clone(),
                goal: d.goal.clone(),
            });
        }
        Self::with_normalizer(demos, header.windows, header.meta, header.normalizer)
    }
}

pub(crate) fn check_eq(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Mismatch {
            what,
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct DemoHeader {
    len: usize,
    seed: u64,
    start: Vec<f64>,
    goal: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    windows: WindowSpec,
    obs_dim: usize,
    action_dim: usize,
    normalizer: Normalizer,
    meta: DatasetMeta,
    demos: Vec<DemoHeader>,
    payload_sha256: String,
}

/// All normalised training windows, stacked for batch gathering.
#[derive(Clone, Debug)]
pub struct WindowTable {
    horizon: usize,
    /// `W·H × d_a`
    actions: Array2<f64>,
    /// `W × N·d_o`
    obs: Array2<f64>,
}

impl WindowTable {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.nrows() == 0
    }

    pub fn obs(&self) -> &Array2<f64> {
        &self.obs
    }

    /// Clean action windows for `indices`, stacked to `B·H × d_a`.
    pub fn gather_actions(&self, indices: &[usize]) -> Array2<f64> {
        let h = self.horizon;
        let mut out = Array2::zeros((indices.len() * h, self.actions.ncols()));
        for (b, &i) in indices.iter().enumerate() {
            out.slice_mut(s![b * h..(b + 1) * h, ..])
                .assign(&self.actions.slice(s![i * h..(i + 1) * h, ..]));
        }
        out
    }

    /// Splits off every `every`-th window as a held-out set.
    pub fn split_holdout(&self, every: usize) -> (WindowTable, WindowTable) {
        let (train, held): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|i| every == 0 || i % every != 0);
        let pick = |idx: &[usize]| WindowTable {
            horizon: self.horizon,
            actions: self.gather_actions(idx),
            obs: self.obs.select(ndarray::Axis(0), idx),
        };
        (pick(&train), pick(&held))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> DatasetMeta {
        DatasetMeta {
            style: ExpertStyle::Straight,
            seed: 0,
            world: WorldConfig::default(),
        }
    }

    #[test]
    fn straight_expert_takes_equal_steps() {
        let d = Demonstration::expert(&[-0.5, 0.0], &[0.5, 0.0], 0.25, ExpertStyle::Straight, 0);
        assert_eq!(d.len(), 4);
        let xs: Vec<f64> = d.actions.column(0).to_vec();
        for (x, want) in xs.iter().zip([-0.25, 0.0, 0.25, 0.5]) {
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn start_equals_goal_is_a_single_step() {
        let d = Demonstration::expert(&[0.2, 0.3], &[0.2, 0.3], 0.1, ExpertStyle::MinJerk, 0);
        assert_eq!(d.len(), 1);
        assert_eq!(d.actions.row(0).to_vec(), vec![0.2, 0.3]);
        assert_eq!(d.states.row(0).to_vec(), vec![0.2, 0.3, 0.2, 0.3]);
    }

    #[test]
    fn min_jerk_respects_speed_limit() {
        let d = Demonstration::expert(&[-0.8, -0.1], &[0.7, 0.6], 0.1, ExpertStyle::MinJerk, 0);
        let mut prev = vec![-0.8, -0.1];
        for row in d.actions.rows() {
            assert!(geom::dist(&prev, &row.to_vec()) <= 0.1 + 1e-12);
            prev = row.to_vec();
        }
        assert_eq!(prev, vec![0.7, 0.6]);
    }

    #[test]
    fn padding_at_both_edges() {
        let d = Demonstration::expert(&[-0.5, 0.0], &[0.5, 0.0], 0.25, ExpertStyle::Straight, 0);
        let ds = Dataset::new(
            vec![d.clone()],
            WindowSpec {
                horizon: 6,
                obs_len: 2,
            },
            meta(),
        )
        .unwrap();
        let (o, a) = ds.raw_window(0).unwrap();
        assert_eq!(o.row(0), d.states.row(0));
        assert_eq!(o.row(1), d.states.row(0));
        assert_eq!(a.row(5), d.actions.row(3));
        assert!(ds.raw_window(4).is_err());
    }

    #[test]
    fn normalised_windows_in_unit_box() {
        let ds = generate_expert(
            20,
            &Scenario::reach(),
            ExpertStyle::Straight,
            WindowSpec::default(),
            3,
        )
        .unwrap();
        for i in (0..ds.len()).step_by(7) {
            let (o, a) = ds.window(i).unwrap();
            assert!(o.iter().chain(a.iter()).all(|v| v.abs() <= 1.0 + 1e-12));
        }
    }
}
