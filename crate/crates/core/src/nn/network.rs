use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, DenseLayer, Layer, LayerCache, LayerNoise};
use super::loss::{nll_with_head_grad, GaussianPrediction};
use crate::error::{Error, Result};

/// Per-feature standardization fitted on the training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Array1<f64>,
    pub stdev: Array1<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            stdev: Array1::ones(dim),
        }
    }

    /// Population mean/stdev per column; constant columns get unit scale.
    pub fn fit(inputs: ArrayView2<f64>) -> Self {
        let mean = inputs.mean_axis(Axis(0)).expect("non-empty inputs");
        let stdev = inputs
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 0.0 { s } else { 1.0 });
        Self { mean, stdev }
    }

    pub fn apply(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        let mut x = inputs.to_owned();
        x -= &self.mean;
        x /= &self.stdev;
        x
    }
}

/// Hidden-layer widths plus input size; the head is always 2 wide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub const OUTPUT_DIM: usize = 2;

    /// Three hidden ReLU layers of 100 units on the 13 pendulum inputs.
    pub fn benchmark() -> Self {
        Self {
            input_dim: 13,
            hidden: vec![100, 100, 100],
        }
    }

    /// `(input, output)` for every layer, head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, Self::OUTPUT_DIM));
        dims
    }
}

/// Flat gradients, one vector per parameter tensor in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            tensors: net.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.concat()
    }

    /// Gradient tensors belonging to layer `index`.
    pub fn layer_slice_mut<'a>(&'a mut self, net: &Network, index: usize) -> &'a mut [Vec<f64>] {
        let start: usize = net.layers[..index].iter().map(|l| l.params().len()).sum();
        let len = net.layers[index].params().len();
        &mut self.tensors[start..start + len]
    }
}

/// Feed-forward network with a Gaussian (mean, scale) head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub normalizer: Normalizer,
}

impl Network {
    pub fn new(layers: Vec<Layer>, normalizer: Normalizer) -> Result<Self> {
        let net = Self { layers, normalizer };
        net.validate()?;
        Ok(net)
    }

    /// Plain dense stack: ReLU hidden layers and an identity head.
    pub fn dense<R: Rng + ?Sized>(arch: &Architecture, normalizer: Normalizer, rng: &mut R) -> Result<Self> {
        let dims = arch.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .into_iter()
            .enumerate()
            .map(|(i, (fan_in, fan_out))| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::Dense(DenseLayer::he_init(fan_in, fan_out, act, rng))
            })
            .collect();
        Self::new(layers, normalizer)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Shape("network has no layers".into()))?;
        if first.input_dim() != self.normalizer.mean.len()
            || self.normalizer.mean.len() != self.normalizer.stdev.len()
        {
            return Err(Error::Shape(format!(
                "normalizer has {} features, first layer expects {}",
                self.normalizer.mean.len(),
                first.input_dim()
            )));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        let out = self.layers.last().map(Layer::output_dim).unwrap_or(0);
        if out != Architecture::OUTPUT_DIM {
            return Err(Error::Shape(format!("output head must be 2-dimensional, got {out}")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.normalizer.mean.len()
    }

    pub fn is_stochastic(&self) -> bool {
        self.layers.iter().any(Layer::is_stochastic)
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<LayerNoise> {
        self.layers.iter().map(|l| l.sample_noise(batch, rng)).collect()
    }

    pub fn no_noise(&self) -> Vec<LayerNoise> {
        vec![LayerNoise::None; self.layers.len()]
    }

    fn check_inputs(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "expected {} input features, got {}",
                self.input_dim(),
                inputs.ncols()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite input".into()));
        }
        Ok(())
    }

    fn run(
        &self,
        inputs: ArrayView2<f64>,
        noise: &[LayerNoise],
    ) -> Result<(Array2<f64>, Vec<LayerCache>)> {
        self.check_inputs(&inputs)?;
        if noise.len() != self.layers.len() {
            return Err(Error::Shape("one noise entry per layer required".into()));
        }
        let mut x = self.normalizer.apply(inputs);
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, (layer, n)) in self.layers.iter().zip(noise).enumerate() {
            let (out, cache) = layer.forward(x, n);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: i });
            }
            caches.push(cache);
            x = out;
        }
        Ok((x, caches))
    }

    /// Raw `batch × 2` head outputs.
    pub fn forward_raw(&self, inputs: ArrayView2<f64>, noise: &[LayerNoise]) -> Result<Array2<f64>> {
        self.run(inputs, noise).map(|(out, _)| out)
    }

    pub fn forward_batch(
        &self,
        inputs: ArrayView2<f64>,
        noise: &[LayerNoise],
    ) -> Result<Vec<GaussianPrediction>> {
        let raw = self.forward_raw(inputs, noise)?;
        Ok(raw
            .rows()
            .into_iter()
            .map(|r| GaussianPrediction::from_raw(r[0], r[1]))
            .collect())
    }

    /// Deterministic prediction for one raw (unstandardized) input vector.
    pub fn forward(&self, input: &[f64]) -> Result<GaussianPrediction> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward_batch(x, &self.no_noise())?[0])
    }

    /// Mean NLL over the batch and its exact gradient.
    pub fn loss_and_grad(
        &self,
        inputs: ArrayView2<f64>,
        targets: ArrayView1<f64>,
        noise: &[LayerNoise],
    ) -> Result<(f64, Gradients)> {
        let batch = inputs.nrows();
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if targets.len() != batch {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                batch,
                targets.len()
            )));
        }
        let (out, caches) = self.run(inputs, noise)?;
        let mut grad = Array2::zeros((batch, 2));
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let (l, dm, ds) = nll_with_head_grad(out[[i, 0]], out[[i, 1]], y);
            loss += l;
            grad[[i, 0]] = dm / batch as f64;
            grad[[i, 1]] = ds / batch as f64;
        }
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for ((layer, cache), n) in self.layers.iter().zip(&caches).zip(noise).rev() {
            let (dx, g) = layer.backward(cache, n, &grad);
            per_layer.push(g);
            grad = dx;
        }
        per_layer.reverse();
        Ok((
            loss / batch as f64,
            Gradients {
                tensors: per_layer.into_iter().flatten().collect(),
            },
        ))
    }

    pub fn mean_nll(
        &self,
        inputs: ArrayView2<f64>,
        targets: ArrayView1<f64>,
        noise: &[LayerNoise],
    ) -> Result<f64> {
        let preds = self.forward_batch(inputs, noise)?;
        Ok(preds
            .iter()
            .zip(targets)
            .map(|(p, &y)| super::loss::nll_loss(*p, y))
            .sum::<f64>()
            / preds.len() as f64)
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.params().concat()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }
}
