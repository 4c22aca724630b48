use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{tanh, Graph, Mat, Var};
use super::params::{ParamId, ParamSet};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Swish,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    LayerNorm,
    None,
}

/// Where layer normalisation sits relative to the activation of a hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    #[default]
    PostActivation,
    PreActivation,
}

/// Shape of a dense network: `layer_widths` lists input, hidden and output widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub normalization: Normalization,
    #[serde(default)]
    pub norm_order: NormOrder,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, normalization: Normalization) -> Self {
        Self { layer_widths, activation, normalization, norm_order: NormOrder::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::Config(format!(
                "an MLP needs input, at least one hidden and an output width, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config(format!("layer widths must be positive: {:?}", self.layer_widths)));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated widths")
    }
}

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / input as f64).sqrt();
        let w = Array2::from_shape_fn((input, output), |_| rng.random_range(-bound..bound));
        Self {
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), Array2::zeros((1, output))),
        }
    }

    pub fn forward(&self, g: &Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let h = g.matmul(x, g.param(params, self.weight))?;
        g.add_row(h, g.param(params, self.bias))
    }

    pub fn forward_plain(&self, params: &ParamSet, x: &Mat) -> Result<Mat> {
        let w = params.get(self.weight);
        if x.ncols() != w.nrows() {
            return Err(Error::Shape(format!("linear input width {} vs {}", x.ncols(), w.nrows())));
        }
        Ok(x.dot(w) + params.get(self.bias))
    }
}

#[derive(Debug, Clone)]
struct HiddenLayer {
    linear: Linear,
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    hidden: Vec<HiddenLayer>,
    output: Linear,
}

fn swish(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: &mut ParamSet, name: &str, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let w = &spec.layer_widths;
        let n = w.len();
        let hidden = (0..n - 2)
            .map(|i| {
                let linear = Linear::new(params, &format!("{name}.{i}"), w[i], w[i + 1], rng);
                let norm = (spec.normalization == Normalization::LayerNorm).then(|| {
                    (
                        params.add(format!("{name}.{i}.ln_gain"), Array2::ones((1, w[i + 1]))),
                        params.add(format!("{name}.{i}.ln_bias"), Array2::zeros((1, w[i + 1]))),
                    )
                });
                HiddenLayer { linear, norm }
            })
            .collect();
        let output = Linear::new(params, &format!("{name}.out"), w[n - 2], w[n - 1], rng);
        Ok(Self { spec, hidden, output })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn output_layer(&self) -> &Linear {
        &self.output
    }

    fn activate(&self, g: &Graph, h: Var) -> Var {
        match self.spec.activation {
            Activation::Swish => g.swish(h),
            Activation::Tanh => g.tanh(h),
        }
    }

    fn normalize(&self, g: &Graph, params: &ParamSet, h: Var, norm: (ParamId, ParamId)) -> Result<Var> {
        let n = g.layer_norm(h, LN_EPS);
        let n = g.mul_row(n, g.param(params, norm.0))?;
        g.add_row(n, g.param(params, norm.1))
    }

    /// Differentiable forward pass recorded on `g`.
    pub fn forward(&self, g: &Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let (_, width) = g.shape(x);
        if width != self.spec.input_width() {
            return Err(Error::Shape(format!(
                "network input width {width}, expected {}",
                self.spec.input_width()
            )));
        }
        let mut h = x;
        for layer in &self.hidden {
            h = layer.linear.forward(g, params, h)?;
            h = match (layer.norm, self.spec.norm_order) {
                (None, _) => self.activate(g, h),
                (Some(nm), NormOrder::PostActivation) => {
                    let a = self.activate(g, h);
                    self.normalize(g, params, a, nm)?
                }
                (Some(nm), NormOrder::PreActivation) => {
                    let n = self.normalize(g, params, h, nm)?;
                    self.activate(g, n)
                }
            };
        }
        self.output.forward(g, params, h)
    }

    /// Graph-free forward pass for inference.
    pub fn forward_plain(&self, params: &ParamSet, x: &Mat) -> Result<Mat> {
        if x.ncols() != self.spec.input_width() {
            return Err(Error::Shape(format!(
                "network input width {}, expected {}",
                x.ncols(),
                self.spec.input_width()
            )));
        }
        let act: fn(f64) -> f64 = match self.spec.activation {
            Activation::Swish => swish,
            Activation::Tanh => tanh,
        };
        let mut h = x.to_owned();
        for layer in &self.hidden {
            h = layer.linear.forward_plain(params, &h)?;
            let width = h.ncols();
            let data = h.as_slice_mut().expect("fresh matmul output is contiguous");
            let Some((gain, bias)) = layer.norm else {
                data.iter_mut().for_each(|v| *v = act(*v));
                continue;
            };
            let (gain, bias) = (params.get(gain).as_slice().unwrap(), params.get(bias).as_slice().unwrap());
            let post = self.spec.norm_order == NormOrder::PostActivation;
            // One pass per row for activation, normalisation and the affine map.
            for row in data.chunks_exact_mut(width) {
                if post {
                    row.iter_mut().for_each(|v| *v = act(*v));
                }
                let n = width as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let is = 1.0 / (var + LN_EPS).sqrt();
                for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
                    let y = (*v - mean) * is * g + b;
                    *v = if post { y } else { act(y) };
                }
            }
        }
        self.output.forward_plain(params, &h)
    }

    /// Number of trainable scalars owned by this network.
    pub fn parameter_count(&self, params: &ParamSet) -> usize {
        let mut ids = Vec::new();
        for layer in &self.hidden {
            ids.extend([layer.linear.weight, layer.linear.bias]);
            if let Some((a, b)) = layer.norm {
                ids.extend([a, b]);
            }
        }
        ids.extend([self.output.weight, self.output.bias]);
        ids.iter().map(|id| params.get(*id).len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line forward pass written against raw vectors.
    fn oracle_forward(params: &ParamSet, spec: &MlpSpec, x: &[f64]) -> Vec<f64> {
        let t = params.tensors();
        let mut h = x.to_vec();
        let mut at = 0;
        let n_hidden = spec.layer_widths.len() - 2;
        for layer in 0..=n_hidden {
            let (w, b) = (&t[at], &t[at + 1]);
            at += 2;
            let mut out = vec![0.0; w.ncols()];
            for (j, o) in out.iter_mut().enumerate() {
                *o = b[[0, j]];
                for (i, hv) in h.iter().enumerate() {
                    *o += hv * w[[i, j]];
                }
            }
            if layer < n_hidden {
                for o in out.iter_mut() {
                    *o = match spec.activation {
                        Activation::Swish => *o / (1.0 + (-*o).exp()),
                        Activation::Tanh => o.tanh(),
                    };
                }
                if spec.normalization == Normalization::LayerNorm {
                    let (gain, bias) = (&t[at], &t[at + 1]);
                    at += 2;
                    let n = out.len() as f64;
                    let mean: f64 = out.iter().sum::<f64>() / n;
                    let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    for (j, o) in out.iter_mut().enumerate() {
                        *o = (*o - mean) / (var + 1e-5).sqrt() * gain[[0, j]] + bias[[0, j]];
                    }
                }
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::default();
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Swish, Normalization::LayerNorm);
        let mlp = Mlp::new(spec, &mut ps, "net", &mut rng).unwrap();
        for t in ps.tensors_mut() {
            t.fill(0.0);
        }
        ps.get_mut(mlp.output_layer().bias).assign(&array![[0.25, -0.75]]);
        let out = mlp.forward_plain(&ps, &array![[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]]).unwrap();
        assert_eq!(out, array![[0.25, -0.75], [0.25, -0.75]]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::default();
        let lin = Linear::new(&mut ps, "id", 3, 3, &mut rng);
        *ps.get_mut(lin.weight) = Array2::eye(3);
        let v = array![[0.5, -2.0, 7.0]];
        let g = Graph::new();
        let x = g.constant(v.clone());
        let y = lin.forward(&g, &ps, x).unwrap();
        assert_eq!(*g.value(y), v);
        assert_eq!(lin.forward_plain(&ps, &v).unwrap(), v);
    }

    #[test]
    fn forward_matches_oracle() {
        for (seed, act, norm) in [
            (3, Activation::Swish, Normalization::LayerNorm),
            (4, Activation::Tanh, Normalization::LayerNorm),
            (5, Activation::Tanh, Normalization::None),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::default();
            let spec = MlpSpec::new(vec![4, 6, 5, 3], act, norm);
            let mlp = Mlp::new(spec.clone(), &mut ps, "net", &mut rng).unwrap();
            // Non-trivial normalisation affine terms.
            for t in ps.tensors_mut() {
                t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
            }
            let x = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
            let plain = mlp.forward_plain(&ps, &x).unwrap();
            let g = Graph::new();
            let xv = g.constant(x.clone());
            let graphed = mlp.forward(&g, &ps, xv).unwrap();
            for (r, row) in x.rows().into_iter().enumerate() {
                let expect = oracle_forward(&ps, &spec, row.as_slice().unwrap());
                for (c, e) in expect.iter().enumerate() {
                    assert!((plain[[r, c]] - e).abs() < 1e-10);
                    assert!((g.value(graphed)[[r, c]] - e).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let mut ps = ParamSet::default();
        let spec = MlpSpec::new(vec![2, 4, 1], Activation::Tanh, Normalization::LayerNorm);
        let mlp = Mlp::new(spec, &mut ps, "n", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let x = array![[0.1, 0.2]];
        let a = mlp.forward_plain(&ps, &x).unwrap();
        let b = mlp.forward_plain(&ps, &x).unwrap();
        assert_eq!(a.as_slice().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.as_slice().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(mlp.forward_plain(&ps, &array![[1.0, 2.0, 3.0]]).is_err());
        // 2*4+4 + 4+4 (norm) + 4*1+1
        assert_eq!(mlp.parameter_count(&ps), 25);
        assert_eq!(ps.scalar_count(), 25);
    }

    #[test]
    fn spec_requires_hidden_layer() {
        let bad = MlpSpec::new(vec![3, 2], Activation::Tanh, Normalization::None);
        assert!(bad.validate().is_err());
        let zero = MlpSpec::new(vec![3, 0, 2], Activation::Tanh, Normalization::None);
        assert!(zero.validate().is_err());
    }
}
