//! Dot reacher: a point mass in the unit square must come to rest on a
//! target whose height changes every episode.
//!
//! Observations are a 16x16 grayscale image (the dot and a horizontal bar at
//! the target height) plus proprioception `(p, v)`. The minimal state is five
//! numbers: position, velocity and target height.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_LEN: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const PROPRIO_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;
pub const OBS_DIM: usize = PROPRIO_DIM + IMAGE_LEN;
pub const DT: f64 = 0.1;
pub const V_MAX: f64 = 1.0;
pub const TARGET_X: f64 = 0.5;
pub const TARGET_Z_RANGE: (f64, f64) = (0.15, 0.45);
pub const SUCCESS_REWARD: f64 = -0.02;
pub const MAX_STEPS: usize = 20;
pub const SPEED_PENALTY: f64 = 0.3;
const BAR_INTENSITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DotReacherState {
    pub p: [f64; 2],
    pub v: [f64; 2],
    pub target_z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: Vec<f64>,
    pub proprio: [f64; 4],
}

impl Observation {
    /// Proprioception followed by the image, the layout the VAE consumes.
    pub fn to_row(&self) -> Vec<f64> {
        let mut row = Vec::with_capacity(OBS_DIM);
        row.extend_from_slice(&self.proprio);
        row.extend_from_slice(&self.image);
        row
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: DotReacherState,
    pub reward: f64,
    pub success: bool,
    pub observation: Observation,
}

impl DotReacherState {
    pub fn target(&self) -> [f64; 2] {
        [TARGET_X, self.target_z]
    }

    pub fn distance_to_target(&self) -> f64 {
        let t = self.target();
        ((self.p[0] - t[0]).powi(2) + (self.p[1] - t[1]).powi(2)).sqrt()
    }

    pub fn speed(&self) -> f64 {
        (self.v[0] * self.v[0] + self.v[1] * self.v[1]).sqrt()
    }

    pub fn observe(&self) -> Observation {
        Observation { image: render(self), proprio: [self.p[0], self.p[1], self.v[0], self.v[1]] }
    }

    /// Random target height; start 0.1-0.3 away from the target at rest.
    pub fn reset(rng: &mut impl Rng) -> Self {
        let target_z = rng.random_range(TARGET_Z_RANGE.0..TARGET_Z_RANGE.1);
        let radius = rng.random_range(0.1..0.3);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let p = [
            (TARGET_X + radius * angle.cos()).clamp(0.0, 1.0),
            (target_z + radius * angle.sin()).clamp(0.0, 1.0),
        ];
        Self { p, v: [0.0, 0.0], target_z }
    }
}

pub fn reward(state: &DotReacherState) -> f64 {
    -(state.distance_to_target() + SPEED_PENALTY * state.speed())
}

pub fn is_success(reward: f64) -> bool {
    reward >= SUCCESS_REWARD
}

/// Double integrator: `v <- clamp(v + dt a)`, `p <- clamp(p + dt v)`.
/// Actions are clipped to `[-1, 1]`.
pub fn env_step(state: &DotReacherState, action: [f64; 2]) -> StepOutcome {
    let mut next = *state;
    for d in 0..2 {
        let a = action[d].clamp(-1.0, 1.0);
        next.v[d] = (state.v[d] + DT * a).clamp(-V_MAX, V_MAX);
        next.p[d] = (state.p[d] + DT * next.v[d]).clamp(0.0, 1.0);
    }
    let r = reward(&next);
    StepOutcome { state: next, reward: r, success: is_success(r), observation: next.observe() }
}

/// Row-major 16x16 image. Row 0 is the top (`z = 1`), column 0 is `x = 0`.
/// The bar is split between the two nearest rows; the dot is splatted
/// bilinearly onto four pixels and added, saturating at 1.
pub fn render(state: &DotReacherState) -> Vec<f64> {
    let scale = (IMAGE_SIDE - 1) as f64;
    let mut img = vec![0.0; IMAGE_LEN];
    let bar = (1.0 - state.target_z) * scale;
    for (row, w) in splat_1d(bar) {
        for col in 0..IMAGE_SIDE {
            img[row * IMAGE_SIDE + col] += BAR_INTENSITY * w;
        }
    }
    let row_f = (1.0 - state.p[1]) * scale;
    let col_f = state.p[0] * scale;
    for (row, wr) in splat_1d(row_f) {
        for (col, wc) in splat_1d(col_f) {
            img[row * IMAGE_SIDE + col] += wr * wc;
        }
    }
    for v in &mut img {
        *v = v.min(1.0);
    }
    img
}

fn splat_1d(f: f64) -> Vec<(usize, f64)> {
    let f = f.clamp(0.0, (IMAGE_SIDE - 1) as f64);
    let lo = f.floor();
    let frac = f - lo;
    let lo = lo as usize;
    if frac == 0.0 || lo + 1 >= IMAGE_SIDE {
        vec![(lo, 1.0)]
    } else {
        vec![(lo, 1.0 - frac), (lo + 1, frac)]
    }
}

/// Gains of the noisy proportional-derivative data controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self { kp: 12.0, kd: 6.0 }
    }
}

pub fn controller_action(state: &DotReacherState, gains: ControllerGains) -> [f64; 2] {
    let t = state.target();
    let mut a = [0.0; 2];
    for d in 0..2 {
        a[d] = (gains.kp * (t[d] - state.p[d]) - gains.kd * state.v[d]).clamp(-1.0, 1.0);
    }
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: [f64; 2],
    pub next_obs: Observation,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplits {
    pub train: Vec<Transition>,
    pub validation: Vec<Transition>,
    pub test: Vec<Transition>,
}

impl DatasetSplits {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs `n_episodes` full-length episodes under the PD controller with
/// Gaussian action noise. Episode `i` goes to validation when `i % 20 == 18`,
/// to test when `i % 20 == 19`, and to train otherwise.
pub fn collect_dataset(n_episodes: usize, noise_std: f64, gains: ControllerGains, seed: u64) -> Result<DatasetSplits> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be at least 1".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Config(format!("noise_std must be nonnegative, got {noise_std}")));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = DatasetSplits::default();
    for i in 0..n_episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let episode = run_episode(&mut rng, noise_std, gains);
        let dst = match i % 20 {
            18 => &mut splits.validation,
            19 => &mut splits.test,
            _ => &mut splits.train,
        };
        dst.extend(episode);
    }
    Ok(splits)
}

fn run_episode(rng: &mut ChaCha8Rng, noise_std: f64, gains: ControllerGains) -> Vec<Transition> {
    let noise = Normal::new(0.0, noise_std).expect("validated noise std");
    let mut state = DotReacherState::reset(rng);
    let mut obs = state.observe();
    let mut out = Vec::with_capacity(MAX_STEPS);
    for _ in 0..MAX_STEPS {
        let base = controller_action(&state, gains);
        let action = [
            (base[0] + noise.sample(rng)).clamp(-1.0, 1.0),
            (base[1] + noise.sample(rng)).clamp(-1.0, 1.0),
        ];
        let step = env_step(&state, action);
        out.push(Transition { obs, action, next_obs: step.observation.clone(), reward: step.reward });
        state = step.state;
        obs = step.observation;
    }
    out
}

const TRANSITIONS_MAGIC: &[u8; 8] = b"DOTRTRN1";

/// Layout: magic `DOTRTRN1`, then u64 LE image height, image width, proprio
/// dim, action dim and record count, then per record the f64 LE values of
/// image, proprio, action, next image, next proprio and reward.
pub fn encode_transitions(transitions: &[Transition]) -> Vec<u8> {
    let rec = 2 * (IMAGE_LEN + PROPRIO_DIM) + ACTION_DIM + 1;
    let mut out = Vec::with_capacity(48 + transitions.len() * rec * 8);
    out.extend_from_slice(TRANSITIONS_MAGIC);
    for v in [IMAGE_SIDE, IMAGE_SIDE, PROPRIO_DIM, ACTION_DIM, transitions.len()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    for t in transitions {
        t.obs.image.iter().for_each(|&v| put(v));
        t.obs.proprio.iter().for_each(|&v| put(v));
        t.action.iter().for_each(|&v| put(v));
        t.next_obs.image.iter().for_each(|&v| put(v));
        t.next_obs.proprio.iter().for_each(|&v| put(v));
        put(t.reward);
    }
    out
}

pub fn decode_transitions(bytes: &[u8]) -> Result<Vec<Transition>> {
    let bad = |m: &str| Error::Format(format!("transition file: {m}"));
    if bytes.len() < 48 || &bytes[..8] != TRANSITIONS_MAGIC {
        return Err(bad("missing header"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize;
    let dims = [word(0), word(1), word(2), word(3)];
    if dims != [IMAGE_SIDE, IMAGE_SIDE, PROPRIO_DIM, ACTION_DIM] {
        return Err(bad(&format!("unsupported dimensions {dims:?}")));
    }
    let count = word(4);
    let rec = 2 * (IMAGE_LEN + PROPRIO_DIM) + ACTION_DIM + 1;
    let body = &bytes[48..];
    if body.len() != count * rec * 8 {
        return Err(bad(&format!("expected {count} records, found {} bytes", body.len())));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(values
        .chunks_exact(rec)
        .map(|r| {
            let mut it = r.iter().copied();
            let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<f64>>();
            let image = take(IMAGE_LEN);
            let proprio: [f64; 4] = take(PROPRIO_DIM).try_into().expect("4 values");
            let action: [f64; 2] = take(ACTION_DIM).try_into().expect("2 values");
            let next_image = take(IMAGE_LEN);
            let next_proprio: [f64; 4] = take(PROPRIO_DIM).try_into().expect("4 values");
            let reward = take(1)[0];
            Transition {
                obs: Observation { image, proprio },
                action,
                next_obs: Observation { image: next_image, proprio: next_proprio },
                reward,
            }
        })
        .collect())
}

pub fn write_transitions(path: &Path, transitions: &[Transition]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_transitions(transitions))?;
    Ok(())
}

pub fn read_transitions(path: &Path) -> Result<Vec<Transition>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    decode_transitions(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn at(p: [f64; 2], v: [f64; 2], target_z: f64) -> DotReacherState {
        DotReacherState { p, v, target_z }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward(&at([0.5, 0.3], [0.0, 0.0], 0.3)), 0.0);
        let r = reward(&at([0.5, 0.31], [0.0, 0.02], 0.3));
        assert_relative_eq!(r, -0.016, max_relative = 1e-12);
        assert!(is_success(r));
        let r = reward(&at([0.6, 0.3], [0.0, 0.0], 0.3));
        assert_relative_eq!(r, -0.1, max_relative = 1e-12);
        assert!(!is_success(r));
    }

    #[test]
    fn step_is_a_clamped_double_integrator() {
        let s = at([0.5, 0.5], [0.2, -0.3], 0.2);
        let out = env_step(&s, [1.0, 3.0]);
        assert_relative_eq!(out.state.v[0], 0.3, max_relative = 1e-12);
        assert_relative_eq!(out.state.v[1], -0.2, max_relative = 1e-12);
        assert_relative_eq!(out.state.p[0], 0.53, max_relative = 1e-12);
        assert_relative_eq!(out.state.p[1], 0.48, max_relative = 1e-12);
        let wall = env_step(&at([0.99, 0.0], [1.0, -1.0], 0.2), [1.0, -1.0]);
        assert_eq!(wall.state.p, [1.0, 0.0]);
        assert_eq!(wall.state.v, [1.0, -1.0]);
        assert_eq!(env_step(&s, [0.1, 0.2]), env_step(&s, [0.1, 0.2]));
    }

    #[test]
    fn corner_dot_lights_the_corner_pixel() {
        let img = render(&at([0.0, 1.0], [0.0, 0.0], 0.3));
        assert_eq!(img[0], 1.0);
        let img = render(&at([1.0, 0.0], [0.0, 0.0], 0.3));
        assert_eq!(img[IMAGE_LEN - 1], 1.0);
    }

    #[test]
    fn target_heights_differ_only_in_bar_rows() {
        let a = render(&at([0.2, 0.8], [0.0, 0.0], 0.2));
        let b = render(&at([0.2, 0.8], [0.0, 0.0], 0.4));
        let rows: std::collections::BTreeSet<usize> =
            (0..IMAGE_LEN).filter(|&i| a[i] != b[i]).map(|i| i / IMAGE_SIDE).collect();
        let bar_rows = |z: f64| {
            let f = (1.0 - z) * 15.0;
            [f.floor() as usize, f.ceil() as usize]
        };
        for r in &rows {
            assert!(bar_rows(0.2).contains(r) || bar_rows(0.4).contains(r), "row {r}");
        }
        assert!(!rows.is_empty());
    }

    // Recovers the bar height from per-row medians and the dot from the
    // intensity-weighted centroid of what remains.
    fn decode_image(img: &[f64]) -> ([f64; 2], f64) {
        let medians: Vec<f64> = (0..IMAGE_SIDE)
            .map(|r| {
                let mut row = img[r * IMAGE_SIDE..(r + 1) * IMAGE_SIDE].to_vec();
                row.sort_by(f64::total_cmp);
                row[IMAGE_SIDE / 2]
            })
            .collect();
        let mass: f64 = medians.iter().sum();
        let bar_row = medians.iter().enumerate().map(|(r, m)| r as f64 * m).sum::<f64>() / mass;
        let (mut w, mut rs, mut cs) = (0.0, 0.0, 0.0);
        for r in 0..IMAGE_SIDE {
            for c in 0..IMAGE_SIDE {
                let resid = img[r * IMAGE_SIDE + c] - medians[r];
                if resid > 0.0 {
                    w += resid;
                    rs += resid * r as f64;
                    cs += resid * c as f64;
                }
            }
        }
        ([cs / w / 15.0, 1.0 - rs / w / 15.0], 1.0 - bar_row / 15.0)
    }

    proptest! {
        #[test]
        fn image_determines_position_and_target(px in 0.0f64..1.0, pz in 0.0f64..1.0, tz in 0.15f64..0.45) {
            let s = at([px, pz], [0.0, 0.0], tz);
            let (p, z) = decode_image(&render(&s));
            let pixel = 1.0 / 15.0;
            prop_assert!((z - tz).abs() <= pixel);
            prop_assert!((p[0] - px).abs() <= pixel && (p[1] - pz).abs() <= pixel, "{:?} vs {:?}", p, s.p);
        }

        #[test]
        fn pixels_stay_in_unit_range(px in 0.0f64..1.0, pz in 0.0f64..1.0, tz in 0.15f64..0.45) {
            prop_assert!(render(&at([px, pz], [0.0, 0.0], tz)).iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn reward_is_bounded(px in 0.0f64..1.0, pz in 0.0f64..1.0, vx in -1.0f64..1.0, vz in -1.0f64..1.0,
                             tz in 0.15f64..0.45, ax in -2.0f64..2.0, az in -2.0f64..2.0) {
            let out = env_step(&at([px, pz], [vx, vz], tz), [ax, az]);
            let lo = -(2f64.sqrt() + SPEED_PENALTY * 2f64.sqrt() * V_MAX);
            prop_assert!(out.reward <= 0.0 && out.reward >= lo);
        }
    }

    #[test]
    fn noiseless_controller_succeeds_within_the_episode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut s = DotReacherState::reset(&mut rng);
            let mut ok = false;
            for _ in 0..MAX_STEPS {
                let out = env_step(&s, controller_action(&s, ControllerGains::default()));
                s = out.state;
                if out.success {
                    ok = true;
                    break;
                }
            }
            assert!(ok);
        }
    }

    #[test]
    fn dataset_is_deterministic_and_split_by_episode() {
        let a = collect_dataset(40, 0.1, ControllerGains::default(), 3).unwrap();
        let b = collect_dataset(40, 0.1, ControllerGains::default(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.validation.len(), a.test.len()), (720, 40, 40));
        assert_ne!(a, collect_dataset(40, 0.1, ControllerGains::default(), 4).unwrap());
        assert!(collect_dataset(0, 0.1, ControllerGains::default(), 3).is_err());
        let t = &a.train[5];
        let next = env_step(
            &DotReacherState { p: [t.obs.proprio[0], t.obs.proprio[1]], v: [t.obs.proprio[2], t.obs.proprio[3]], target_z: 0.0 },
            t.action,
        );
        assert_eq!(next.state.p, [t.next_obs.proprio[0], t.next_obs.proprio[1]]);
    }

    #[test]
    fn transition_file_round_trips() {
        let data = collect_dataset(2, 0.1, ControllerGains::default(), 1).unwrap();
        let bytes = encode_transitions(&data.train);
        assert_eq!(decode_transitions(&bytes).unwrap(), data.train);
        assert!(decode_transitions(&bytes[..bytes.len() - 1]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_transitions(&path, &data.train).unwrap();
        assert_eq!(read_transitions(&path).unwrap(), data.train);
        assert!(matches!(read_transitions(&dir.path().join("x")), Err(Error::MissingArtifact(_))));
    }
}
