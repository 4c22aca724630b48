//! Staged experiment: collect, train the VAE, analyse and mask the latent
//! space, train the world model, evaluate closed-loop control.
//!
//! Stages hand off through files in the output directory. A single master
//! seed fans out to per-stage seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cem::{plan, ActionBounds, CemConfig, PlanDiagnostics, PolicyParams};
use crate::diffnet::Mat;
use crate::env::{self, ControllerGains, DotReacherState, Transition, MAX_STEPS};
use crate::error::{Error, Result};
use crate::latent::{self, LatentMask};
use crate::qvae::{self, QvaeModel, QvaeSpec, TrainConfig};
use crate::tsallis::{check_sparsity_condition, QParams, SparsityReport, DEFAULT_MAX_EXPONENT};
use crate::world::{self, WorldDataset, WorldModel, WorldSpec, WorldTrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub collect: CollectConfig,
    pub vae: VaeConfig,
    pub analysis: AnalysisConfig,
    pub world: WorldConfig,
    pub planner: CemConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectConfig {
    pub episodes: usize,
    pub noise_std: f64,
    pub gains: ControllerGains,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_exponent: f64,
    pub qvae: QParams,
    pub beta_vae: BaselineConfig,
}

/// Weights of the `q = 1` baselines; `vae` uses these weights with `beta = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub beta: f64,
    pub class_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Hidden widths are these multiples of the state dimension.
    pub dynamics_width_mult: usize,
    pub reward_width_mult: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub dynamics_learning_rate: f64,
    pub reward_learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Start each planning call from the previous solution shifted by one step.
    pub warm_start: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let vae = QvaeSpec::dot_reacher(12);
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            collect: CollectConfig { episodes: 300, noise_std: 1.0, gains: ControllerGains::default() },
            vae: VaeConfig {
                latent_dim: vae.latent_dim,
                encoder_hidden: vae.encoder_hidden,
                decoder_hidden: vae.decoder_hidden,
                epochs: 200,
                batch_size: 256,
                learning_rate: 1e-3,
                max_exponent: DEFAULT_MAX_EXPONENT,
                qvae: QParams {
                    q: 0.95,
                    class_qs: vec![0.95, 0.999],
                    class_weights: vec![50.0, 1.0],
                    beta: 50.0,
                    gamma: 4.0,
                },
                beta_vae: BaselineConfig { beta: 0.3, class_weights: vec![50.0, 1.0] },
            },
            analysis: AnalysisConfig { threshold: latent::DEFAULT_THRESHOLD },
            world: WorldConfig {
                dynamics_width_mult: 3,
                reward_width_mult: 8,
                epochs: 300,
                batch_size: 64,
                dynamics_learning_rate: 1e-3,
                reward_learning_rate: 1e-3,
            },
            planner: CemConfig {
                candidates: 1_000,
                elite_ratio: 0.01,
                smoothing: 0.4,
                horizon: 5,
                max_iters: 20,
                time_budget: Some(0.1),
                bounds: ActionBounds::symmetric(env::ACTION_DIM, 1.0),
                return_best: false,
            },
            eval: EvalConfig { episodes: 50, warm_start: true },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Structural checks. The sparsity condition is reported, not enforced;
    /// enforcement happens when the q-VAE is trained.
    pub fn validate(&self) -> Result<()> {
        if self.collect.episodes == 0 {
            return Err(Error::Config("collect.episodes must be at least 1".into()));
        }
        if !(self.collect.noise_std >= 0.0 && self.collect.noise_std.is_finite()) {
            return Err(Error::Config("collect.noise_std must be nonnegative".into()));
        }
        self.vae_spec().validate()?;
        if self.vae.batch_size == 0 || self.world.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.vae.learning_rate > 0.0) || !(self.world.dynamics_learning_rate > 0.0) || !(self.world.reward_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.vae.max_exponent > 0.0) {
            return Err(Error::Config("vae.max_exponent must be positive".into()));
        }
        for variant in Variant::ALL {
            self.qparams(variant).validate()?;
        }
        if !(self.analysis.threshold >= 0.0 && self.analysis.threshold.is_finite()) {
            return Err(Error::Config("analysis.threshold must be nonnegative".into()));
        }
        if self.world.dynamics_width_mult == 0 || self.world.reward_width_mult == 0 {
            return Err(Error::Config("world width multipliers must be positive".into()));
        }
        self.planner.validate()?;
        if self.planner.bounds.dim() != env::ACTION_DIM {
            return Err(Error::Config(format!("planner.bounds must cover {} action dims", env::ACTION_DIM)));
        }
        Ok(())
    }

    pub fn sparsity_report(&self) -> SparsityReport {
        check_sparsity_condition(&self.vae.qvae)
    }

    pub fn vae_spec(&self) -> QvaeSpec {
        QvaeSpec {
            encoder_hidden: self.vae.encoder_hidden.clone(),
            decoder_hidden: self.vae.decoder_hidden.clone(),
            ..QvaeSpec::dot_reacher(self.vae.latent_dim)
        }
    }

    pub fn qparams(&self, variant: Variant) -> QParams {
        match variant {
            Variant::Qvae => self.vae.qvae.clone(),
            Variant::BetaVae => QParams::beta_vae(self.vae.beta_vae.beta, self.vae.beta_vae.class_weights.clone()),
            Variant::Vae => QParams::beta_vae(1.0, self.vae.beta_vae.class_weights.clone()),
        }
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stage as u64);
        rng.next_u64()
    }

    pub fn vae_train_config(&self, unsafe_condition: bool) -> TrainConfig {
        TrainConfig {
            epochs: self.vae.epochs,
            batch_size: self.vae.batch_size,
            seed: self.stage_seed(Stage::VaeTrain),
            learning_rate: self.vae.learning_rate,
            unsafe_condition,
            max_exponent: self.vae.max_exponent,
        }
    }

    pub fn world_spec(&self, state_dim: usize) -> WorldSpec {
        WorldSpec::scaled(state_dim, env::ACTION_DIM, self.world.dynamics_width_mult, self.world.reward_width_mult)
    }

    pub fn world_train_config(&self) -> WorldTrainConfig {
        WorldTrainConfig {
            epochs: self.world.epochs,
            batch_size: self.world.batch_size,
            seed: self.stage_seed(Stage::WorldTrain),
            dynamics_learning_rate: self.world.dynamics_learning_rate,
            reward_learning_rate: self.world.reward_learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    Collect = 1,
    VaeInit = 2,
    VaeTrain = 3,
    WorldInit = 4,
    WorldTrain = 5,
    Eval = 6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Qvae,
    BetaVae,
    Vae,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Qvae, Variant::BetaVae, Variant::Vae];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Qvae => "qvae",
            Variant::BetaVae => "beta_vae",
            Variant::Vae => "vae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected qvae, beta_vae or vae")))
    }
}

/// File layout of one experiment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.trn"))
    }

    pub fn vae(&self, v: Variant) -> PathBuf {
        self.dir.join(format!("vae_{}.ckpt", v.name()))
    }

    pub fn vae_log(&self, v: Variant) -> PathBuf {
        self.dir.join(format!("vae_{}.log", v.name()))
    }

    pub fn mask(&self, v: Variant) -> PathBuf {
        self.dir.join(format!("mask_{}.txt", v.name()))
    }

    pub fn analysis(&self, v: Variant) -> PathBuf {
        self.dir.join(format!("analysis_{}.txt", v.name()))
    }

    fn world_tag(v: Variant, masked: bool) -> String {
        format!("{}_{}", v.name(), if masked { "masked" } else { "unmasked" })
    }

    pub fn world(&self, v: Variant, masked: bool) -> PathBuf {
        self.dir.join(format!("world_{}.ckpt", Self::world_tag(v, masked)))
    }

    pub fn world_log(&self, v: Variant, masked: bool) -> PathBuf {
        self.dir.join(format!("world_{}.log", Self::world_tag(v, masked)))
    }

    pub fn eval(&self, v: Variant, masked: bool) -> PathBuf {
        self.dir.join(format!("eval_{}.tsv", Self::world_tag(v, masked)))
    }
}

pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.display().to_string()))
    }
}

/// Writes the resolved configuration next to the stage outputs.
pub fn echo_config(config: &ExperimentConfig, layout: &Layout) -> Result<()> {
    write_file(&layout.config(), config.to_toml()?)
}

pub fn read_split(layout: &Layout, name: &str) -> Result<Vec<Transition>> {
    let path = layout.split(name);
    require(&path)?;
    env::read_transitions(&path)
}

pub fn observation_matrix(transitions: &[Transition]) -> Mat {
    world::observation_rows(transitions.iter().map(|t| &t.obs))
}

pub fn load_vae(layout: &Layout, v: Variant) -> Result<QvaeModel> {
    let path = layout.vae(v);
    require(&path)?;
    QvaeModel::load(&path)
}

pub fn load_mask(layout: &Layout, v: Variant) -> Result<LatentMask> {
    let path = layout.mask(v);
    require(&path)?;
    LatentMask::read(&path)
}

pub fn load_world(layout: &Layout, v: Variant, masked: bool) -> Result<WorldModel> {
    let path = layout.world(v, masked);
    require(&path)?;
    WorldModel::load(&path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectSummary {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

pub fn collect(config: &ExperimentConfig, layout: &Layout) -> Result<CollectSummary> {
    let splits = env::collect_dataset(
        config.collect.episodes,
        config.collect.noise_std,
        config.collect.gains,
        config.stage_seed(Stage::Collect),
    )?;
    fs::create_dir_all(&layout.dir)?;
    for (name, data) in SPLITS.iter().zip([&splits.train, &splits.validation, &splits.test]) {
        env::write_transitions(&layout.split(name), data)?;
    }
    echo_config(config, layout)?;
    Ok(CollectSummary { train: splits.train.len(), validation: splits.validation.len(), test: splits.test.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeSummary {
    pub records: Vec<qvae::EpochRecord>,
    pub test_mse: f64,
}

/// Trains one variant on the training split. The q-VAE refuses
/// condition-violating parameters unless `unsafe_condition` is set.
pub fn train_vae(
    config: &ExperimentConfig,
    layout: &Layout,
    variant: Variant,
    unsafe_condition: bool,
    mut on_epoch: impl FnMut(&qvae::EpochRecord),
) -> Result<VaeSummary> {
    let params = config.qparams(variant);
    qvae::enforce_condition(&params, unsafe_condition)?;
    let train_x = observation_matrix(&read_split(layout, "train")?);
    let test_x = observation_matrix(&read_split(layout, "test")?);
    let mut model = QvaeModel::new(config.vae_spec(), config.stage_seed(Stage::VaeInit))?;
    let mut log = String::new();
    let outcome = qvae::train(&mut model, &train_x, &params, &config.vae_train_config(unsafe_condition), |r| {
        let _ = writeln!(log, "{}", r.log_line());
        on_epoch(r);
    });
    write_file(&layout.vae_log(variant), &log)?;
    let records = outcome.map_err(|abort| abort.error)?;
    model.save(&layout.vae(variant))?;
    echo_config(config, layout)?;
    Ok(VaeSummary { records, test_mse: model.reconstruction_mse(&test_x)? })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub hoyer: f64,
    pub zero_rows: usize,
    pub test_mse: f64,
    pub mask: LatentMask,
}

impl Analysis {
    pub fn report(&self) -> String {
        let mut order: Vec<usize> = (0..self.mask.importance.len()).collect();
        order.sort_by(|&a, &b| self.mask.importance[b].total_cmp(&self.mask.importance[a]).then(a.cmp(&b)));
        let mut s = format!(
            "hoyer_sparsity={}\nzero_rows={}\nreconstruction_mse={}\nthreshold={}\nkept={}/{}\nfallback={}\n",
            self.hoyer,
            self.zero_rows,
            self.test_mse,
            self.mask.threshold_used,
            self.mask.kept(),
            self.mask.latent_dim(),
            self.mask.fallback
        );
        s.push_str("dim\timportance\tkept\n");
        for d in order {
            let _ = writeln!(s, "{d}\t{}\t{}", self.mask.importance[d], self.mask.keep[d]);
        }
        s
    }
}

/// Sparsity and importance of the test-split encodings; writes the mask.
pub fn analyze(config: &ExperimentConfig, layout: &Layout, variant: Variant) -> Result<Analysis> {
    let model = load_vae(layout, variant)?;
    let test_x = observation_matrix(&read_split(layout, "test")?);
    let z = model.encode_means(&test_x)?;
    let (hoyer, zero_rows) = latent::hoyer_sparsity(&z)?;
    let importance = latent::dim_importance(&z)?;
    let mask = latent::build_mask(&importance, config.analysis.threshold)?;
    let analysis = Analysis { hoyer, zero_rows, test_mse: model.reconstruction_mse(&test_x)?, mask };
    analysis.mask.write(&layout.mask(variant))?;
    write_file(&layout.analysis(variant), analysis.report())?;
    echo_config(config, layout)?;
    Ok(analysis)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSummary {
    pub parameter_count: usize,
    /// Parameter count of the same architecture on the full latent space.
    pub unmasked_parameter_count: usize,
    pub records: Vec<world::WorldEpochRecord>,
}

/// Encodes the splits with the trained VAE, optionally masked, and trains a
/// world model on the training split with the validation split held out.
pub fn train_world(
    config: &ExperimentConfig,
    layout: &Layout,
    variant: Variant,
    masked: bool,
    mut on_epoch: impl FnMut(&world::WorldEpochRecord),
) -> Result<WorldSummary> {
    let vae = load_vae(layout, variant)?;
    let mask = if masked { Some(load_mask(layout, variant)?) } else { None };
    let train = world::encode_dataset(&vae, mask.as_ref(), &read_split(layout, "train")?)?;
    let heldout = world::encode_dataset(&vae, mask.as_ref(), &read_split(layout, "validation")?)?;
    let mut model = WorldModel::new(config.world_spec(train.state_dim()), config.stage_seed(Stage::WorldInit))?;
    let mut log = String::new();
    let outcome = world::train_world(&mut model, &train, Some(&heldout), &config.world_train_config(), |r| {
        let _ = writeln!(log, "{}", r.log_line());
        on_epoch(r);
    });
    write_file(&layout.world_log(variant, masked), &log)?;
    let records = outcome?;
    model.save(&layout.world(variant, masked))?;
    echo_config(config, layout)?;
    let full = WorldModel::new(config.world_spec(vae.latent_dim()), 0)?;
    Ok(WorldSummary { parameter_count: model.parameter_count(), unmasked_parameter_count: full.parameter_count(), records })
}

/// Test-split world dataset for a variant, masked or not.
pub fn encoded_test_split(layout: &Layout, variant: Variant, masked: bool) -> Result<WorldDataset> {
    let vae = load_vae(layout, variant)?;
    let mask = if masked { Some(load_mask(layout, variant)?) } else { None };
    world::encode_dataset(&vae, mask.as_ref(), &read_split(layout, "test")?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode: usize,
    pub steps: usize,
    pub success: bool,
    pub mean_reward: f64,
    pub mean_iterations: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: Vec<EpisodeResult>,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.clone().sum::<f64>() / n as f64;
    (m, (xs.map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt())
}

impl EvalSummary {
    pub fn success_rate(&self) -> f64 {
        mean_std(self.episodes.iter().map(|e| if e.success { 1.0 } else { 0.0 })).0
    }

    pub fn mean_steps(&self) -> f64 {
        mean_std(self.episodes.iter().map(|e| e.steps as f64)).0
    }

    pub fn mean_iterations(&self) -> f64 {
        mean_std(self.episodes.iter().map(|e| e.mean_iterations)).0
    }

    /// Tab-separated table with a header row, followed by `mean` and `std`
    /// rows when there is at least one episode.
    pub fn table(&self) -> String {
        let mut s = String::from("episode\tsteps\tsuccess\tmean_reward\tmean_iterations\n");
        for e in &self.episodes {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.6}\t{:.3}",
                e.episode, e.steps, e.success as u8, e.mean_reward, e.mean_iterations
            );
        }
        if !self.episodes.is_empty() {
            let cols = [
                mean_std(self.episodes.iter().map(|e| e.steps as f64)),
                mean_std(self.episodes.iter().map(|e| e.success as u8 as f64)),
                mean_std(self.episodes.iter().map(|e| e.mean_reward)),
                mean_std(self.episodes.iter().map(|e| e.mean_iterations)),
            ];
            for (label, pick) in [("mean", 0usize), ("std", 1)] {
                let v: Vec<f64> = cols.iter().map(|c| if pick == 0 { c.0 } else { c.1 }).collect();
                let _ = writeln!(s, "{label}\t{:.3}\t{:.3}\t{:.6}\t{:.3}", v[0], v[1], v[2], v[3]);
            }
        }
        s
    }
}

/// Closed-loop control: encode the observation mean, mask, plan, act.
/// An episode ends on success or after the step cap.
pub fn run_episodes(
    vae: &QvaeModel,
    mask: Option<&LatentMask>,
    model: &WorldModel,
    planner: &CemConfig,
    eval: &EvalConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, &PlanDiagnostics),
) -> Result<EvalSummary> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(eval.episodes);
    for episode in 0..eval.episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let mut state = DotReacherState::reset(&mut rng);
        let mut policy: Option<PolicyParams> = None;
        let (mut steps, mut reward_sum, mut iter_sum, mut success) = (0, 0.0, 0usize, false);
        while steps < MAX_STEPS && !success {
            let z = vae.encode(&state.observe().to_row())?;
            let s0 = match mask {
                Some(m) => latent::apply_mask(z.mean(), m)?,
                None => z.mean().to_vec(),
            };
            let init = if eval.warm_start { policy.as_ref().map(|p| p.shifted(&planner.bounds)) } else { None };
            let result = plan(model, &s0, planner, rng.random(), init)?;
            on_step(steps, &result.diagnostics);
            iter_sum += result.diagnostics.iterations_completed;
            let outcome = env::env_step(&state, [result.action[0], result.action[1]]);
            reward_sum += outcome.reward;
            success = outcome.success;
            state = outcome.state;
            policy = Some(result.policy);
            steps += 1;
        }
        episodes.push(EpisodeResult {
            episode,
            steps,
            success,
            mean_reward: reward_sum / steps as f64,
            mean_iterations: iter_sum as f64 / steps as f64,
        });
    }
    Ok(EvalSummary { episodes })
}

/// Evaluates a trained controller and writes the results table. Per-step
/// planner records go to the `planner` log target since they carry wall time.
pub fn evaluate(config: &ExperimentConfig, layout: &Layout, variant: Variant, masked: bool) -> Result<EvalSummary> {
    let vae = load_vae(layout, variant)?;
    let mask = if masked { Some(load_mask(layout, variant)?) } else { None };
    let model = load_world(layout, variant, masked)?;
    let summary = run_episodes(&vae, mask.as_ref(), &model, &config.planner, &config.eval, config.stage_seed(Stage::Eval), |step, d| {
        log::info!(target: "planner", "{}", d.log_line(step));
    })?;
    write_file(&layout.eval(variant, masked), summary.table())?;
    echo_config(config, layout)?;
    Ok(summary)
}
