use std::path::Path;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::dist::cb_mean_logit;
use crate::diffnet::{checkpoint, Activation, Graph, Mat, Mlp, MlpSpec, NormOrder, Normalization, ParamSet, Var};
use crate::error::{Error, Result};
use crate::tsallis::{DiagGaussian, LOG_STD_MAX, LOG_STD_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    ContinuousBernoulli,
    DiagGaussian,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationClass {
    pub name: String,
    pub kind: ClassKind,
    pub width: usize,
}

/// Ordered observation classes. Class `c` pairs with `class_qs[c]`, and an
/// observation row stores the classes side by side in this order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObservationClasses(Vec<ObservationClass>);

impl ObservationClasses {
    pub fn new(classes: Vec<ObservationClass>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Config("at least one observation class is required".into()));
        }
        if let Some(c) = classes.iter().find(|c| c.width == 0) {
            return Err(Error::Config(format!("observation class '{}' has zero width", c.name)));
        }
        Ok(Self(classes))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ObservationClass> {
        self.0.iter()
    }

    pub fn get(&self, c: usize) -> &ObservationClass {
        &self.0[c]
    }

    pub fn total_width(&self) -> usize {
        self.0.iter().map(|c| c.width).sum()
    }

    /// Column range of class `c` inside an observation row.
    pub fn range(&self, c: usize) -> std::ops::Range<usize> {
        let start: usize = self.0[..c].iter().map(|k| k.width).sum();
        start..start + self.0[c].width
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QvaeSpec {
    pub classes: ObservationClasses,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub normalization: Normalization,
    #[serde(default)]
    pub norm_order: NormOrder,
}

impl QvaeSpec {
    /// Proprioception (Gaussian, 4 wide) followed by a 16x16 image
    /// (continuous Bernoulli).
    pub fn dot_reacher(latent_dim: usize) -> Self {
        let classes = ObservationClasses(vec![
            ObservationClass { name: "proprio".into(), kind: ClassKind::DiagGaussian, width: 4 },
            ObservationClass { name: "image".into(), kind: ClassKind::ContinuousBernoulli, width: 256 },
        ]);
        Self {
            classes,
            latent_dim,
            encoder_hidden: vec![128, 64],
            decoder_hidden: vec![64, 128],
            activation: Activation::Swish,
            normalization: Normalization::LayerNorm,
            norm_order: NormOrder::PostActivation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ObservationClasses::new(self.classes.0.clone())?;
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.encoder_hidden.is_empty() || self.decoder_hidden.is_empty() {
            return Err(Error::Config("encoder and decoder need at least one hidden layer".into()));
        }
        Ok(())
    }

    fn mlp(&self, widths: Vec<usize>) -> MlpSpec {
        MlpSpec { layer_widths: widths, activation: self.activation, normalization: self.normalization, norm_order: self.norm_order }
    }

    fn encoder_spec(&self) -> MlpSpec {
        let mut w = vec![self.classes.total_width()];
        w.extend(&self.encoder_hidden);
        w.push(2 * self.latent_dim);
        self.mlp(w)
    }

    fn decoder_spec(&self, class: &ObservationClass) -> MlpSpec {
        let mut w = vec![self.latent_dim];
        w.extend(&self.decoder_hidden);
        w.push(match class.kind {
            ClassKind::ContinuousBernoulli => class.width,
            ClassKind::DiagGaussian => 2 * class.width,
        });
        self.mlp(w)
    }
}

/// Decoded distribution parameters of one observation class.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassParams {
    ContinuousBernoulli { lambda: Vec<f64> },
    DiagGaussian(DiagGaussian),
}

/// Encoder, one decoder per observation class and a standard-normal prior.
#[derive(Debug, Clone)]
pub struct QvaeModel {
    spec: QvaeSpec,
    params: ParamSet,
    encoder: Mlp,
    decoders: Vec<Mlp>,
}

impl QvaeModel {
    pub fn new(spec: QvaeSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let encoder = Mlp::new(spec.encoder_spec(), &mut params, "encoder", &mut rng)?;
        let decoders = spec
            .classes
            .iter()
            .map(|c| Mlp::new(spec.decoder_spec(c), &mut params, &format!("decoder.{}", c.name), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, params, encoder, decoders })
    }

    pub fn spec(&self) -> &QvaeSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoders(&self) -> &[Mlp] {
        &self.decoders
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn observation_width(&self) -> usize {
        self.spec.classes.total_width()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_width(&self, got: usize) -> Result<()> {
        let want = self.observation_width();
        if got != want {
            return Err(Error::Shape(format!("observation width {got}, expected {want}")));
        }
        Ok(())
    }

    /// Posterior means and clamped log standard deviations for a batch of rows.
    pub fn encode_batch(&self, x: &Mat) -> Result<(Mat, Mat)> {
        self.check_width(x.ncols())?;
        let out = self.encoder.forward_plain(&self.params, x)?;
        let z = self.spec.latent_dim;
        let mean = out.slice(s![.., ..z]).to_owned();
        let log_std = out.slice(s![.., z..]).mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok((mean, log_std))
    }

    pub fn encode(&self, x: &[f64]) -> Result<DiagGaussian> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        let (mean, log_std) = self.encode_batch(&row)?;
        DiagGaussian::new(mean.row(0).to_vec(), log_std.row(0).to_vec())
    }

    /// Posterior means only; the latent coordinates used downstream.
    pub fn encode_means(&self, x: &Mat) -> Result<Mat> {
        Ok(self.encode_batch(x)?.0)
    }

    /// Raw decoder outputs for a batch of latents, one matrix per class.
    pub fn decode_raw(&self, z: &Mat) -> Result<Vec<Mat>> {
        if z.ncols() != self.spec.latent_dim {
            return Err(Error::Shape(format!("latent width {}, expected {}", z.ncols(), self.spec.latent_dim)));
        }
        self.decoders.iter().map(|d| d.forward_plain(&self.params, z)).collect()
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<ClassParams>> {
        let row = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row shape");
        let raw = self.decode_raw(&row)?;
        self.spec
            .classes
            .iter()
            .zip(raw)
            .map(|(c, out)| {
                let out = out.row(0);
                Ok(match c.kind {
                    ClassKind::ContinuousBernoulli => ClassParams::ContinuousBernoulli {
                        lambda: out.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect(),
                    },
                    ClassKind::DiagGaussian => ClassParams::DiagGaussian(DiagGaussian::new(
                        out.slice(s![..c.width]).to_vec(),
                        out.slice(s![c.width..]).to_vec(),
                    )?),
                })
            })
            .collect()
    }

    /// Mean reconstruction of each row: decoder applied to the posterior mean,
    /// continuous-Bernoulli means for image classes and Gaussian means otherwise.
    pub fn reconstruct(&self, x: &Mat) -> Result<Mat> {
        let z = self.encode_means(x)?;
        self.reconstruct_from_latent(&z)
    }

    pub fn reconstruct_from_latent(&self, z: &Mat) -> Result<Mat> {
        let raw = self.decode_raw(z)?;
        let mut out = Mat::zeros((z.nrows(), self.observation_width()));
        for (c, head) in raw.iter().enumerate() {
            let class = self.spec.classes.get(c);
            let r = self.spec.classes.range(c);
            let mut dst = out.slice_mut(s![.., r]);
            match class.kind {
                ClassKind::ContinuousBernoulli => dst.assign(&head.mapv(cb_mean_logit)),
                ClassKind::DiagGaussian => dst.assign(&head.slice(s![.., ..class.width])),
            }
        }
        Ok(out)
    }

    /// Mean squared error between observations and their mean reconstructions.
    pub fn reconstruction_mse(&self, x: &Mat) -> Result<f64> {
        let rec = self.reconstruct(x)?;
        Ok((&rec - x).mapv(|v| v * v).mean().unwrap_or(0.0))
    }

    pub(crate) fn record_encoder(&self, g: &Graph, x: Var) -> Result<(Var, Var)> {
        let out = self.encoder.forward(g, &self.params, x)?;
        let z = self.spec.latent_dim;
        let mean = g.slice_cols(out, 0, z)?;
        let log_std = g.clamp(g.slice_cols(out, z, 2 * z)?, LOG_STD_MIN, LOG_STD_MAX);
        Ok((mean, log_std))
    }

    /// Per-row log likelihood of class `c` of `x` under the decoder at `z`.
    pub(crate) fn record_class_log_prob(&self, g: &Graph, c: usize, z: Var, x_c: Var) -> Result<Var> {
        let class = self.spec.classes.get(c);
        let out = self.decoders[c].forward(g, &self.params, z)?;
        match class.kind {
            ClassKind::ContinuousBernoulli => g.cb_log_prob(x_c, out),
            ClassKind::DiagGaussian => {
                let mean = g.slice_cols(out, 0, class.width)?;
                let log_std = g.clamp(g.slice_cols(out, class.width, 2 * class.width)?, LOG_STD_MIN, LOG_STD_MAX);
                g.gaussian_log_prob(x_c, mean, log_std)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.spec, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (spec, values): (QvaeSpec, Vec<f64>) = checkpoint::read(path)?;
        let mut model = Self::new(spec, 0)?;
        checkpoint::restore(&mut model.params, &values)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.spec, &self.params)
    }
}
