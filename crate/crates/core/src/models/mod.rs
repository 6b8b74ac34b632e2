//! Classifier and detector architectures.
//!
//! Every model maps a `[n, d]` batch to pre-activation logits of shape
//! `[n, outputs]`; detectors have a single output and sigmoid is applied only
//! inside losses and metrics.

mod checkpoint;
mod train;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{accuracy, predict, train_softmax_classifier, ClassifierTrainConfig, ClassifierTrainReport};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Image side length for [`ArchSpec::MnistConv`].
pub const MNIST_SIDE: usize = 28;
const KERNEL: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ArchSpec {
    /// conv(5×5, `conv1`) → 2×2 max-pool → conv(5×5, `conv2`) → 2×2 max-pool
    /// → dense(`hidden`) → dense(`outputs`), ReLU between layers, 28×28×1 input.
    MnistConv {
        conv1: usize,
        conv2: usize,
        hidden: usize,
        outputs: usize,
    },
    /// Dense ReLU network; `widths` lists input, hidden and output sizes.
    Mlp { widths: Vec<usize> },
}

impl ArchSpec {
    /// The 32/64-filter, 1024-unit MNIST network.
    pub fn mnist_conv(outputs: usize) -> Self {
        ArchSpec::MnistConv {
            conv1: 32,
            conv2: 64,
            hidden: 1024,
            outputs,
        }
    }

    pub fn mlp(widths: &[usize]) -> Self {
        ArchSpec::Mlp {
            widths: widths.to_vec(),
        }
    }

    /// The 2-500-500-500-500-500-1 network used for planar densities.
    pub fn toy_2d() -> Self {
        Self::mlp(&[2, 500, 500, 500, 500, 500, 1])
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ArchSpec::MnistConv { .. } => MNIST_SIDE * MNIST_SIDE,
            ArchSpec::Mlp { widths } => widths[0],
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            ArchSpec::MnistConv { outputs, .. } => *outputs,
            ArchSpec::Mlp { widths } => *widths.last().expect("validated widths"),
        }
    }

    pub fn with_outputs(&self, n: usize) -> Self {
        match self.clone() {
            ArchSpec::MnistConv { conv1, conv2, hidden, .. } => ArchSpec::MnistConv {
                conv1,
                conv2,
                hidden,
                outputs: n,
            },
            ArchSpec::Mlp { mut widths } => {
                *widths.last_mut().expect("validated widths") = n;
                ArchSpec::Mlp { widths }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ArchSpec::MnistConv { conv1, conv2, hidden, outputs } => {
                if [*conv1, *conv2, *hidden, *outputs].contains(&0) {
                    return Err(Error::invalid("mnist-conv widths must be positive"));
                }
            }
            ArchSpec::Mlp { widths } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(Error::invalid(format!(
                        "mlp needs at least input and output widths, all positive; got {widths:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parameter names, shapes and fan-in, in storage order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        match self {
            ArchSpec::MnistConv { conv1, conv2, hidden, outputs } => {
                let flat = conv2 * (MNIST_SIDE / 4) * (MNIST_SIDE / 4);
                vec![
                    ("conv1.weight".into(), vec![*conv1, 1, KERNEL, KERNEL], KERNEL * KERNEL),
                    ("conv1.bias".into(), vec![*conv1], KERNEL * KERNEL),
                    ("conv2.weight".into(), vec![*conv2, *conv1, KERNEL, KERNEL], conv1 * KERNEL * KERNEL),
                    ("conv2.bias".into(), vec![*conv2], conv1 * KERNEL * KERNEL),
                    ("fc.weight".into(), vec![flat, *hidden], flat),
                    ("fc.bias".into(), vec![*hidden], flat),
                    ("out.weight".into(), vec![*hidden, *outputs], *hidden),
                    ("out.bias".into(), vec![*outputs], *hidden),
                ]
            }
            ArchSpec::Mlp { widths } => widths
                .windows(2)
                .enumerate()
                .flat_map(|(i, w)| {
                    [
                        (format!("layer{i}.weight"), vec![w[0], w[1]], w[0]),
                        (format!("layer{i}.bias"), vec![w[1]], w[0]),
                    ]
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Parameterized differentiable map from a batch to logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: ArchSpec,
    params: Vec<Param>,
}

/// Rows evaluated per tape when no gradient is needed.
const EVAL_CHUNK: usize = 256;

impl Model {
    /// Fan-in-scaled uniform weights and biases, `U(−1/√fan_in, 1/√fan_in)`.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let mut value = Tensor::zeros(&shape);
                if fan_in > 0 {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for v in value.data_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                Param { name, value }
            })
            .collect();
        Ok(Self { arch, params })
    }

    /// Builds a model from explicit parameters, checking names and shapes.
    pub fn from_params(arch: ArchSpec, params: Vec<Param>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(&params) {
            if &p.name != name || p.value.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "model",
                    format!("parameter {} {:?} does not match {name} {shape:?}", p.name, p.value.shape()),
                ));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn outputs(&self) -> usize {
        self.arch.outputs()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.value.len()).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.params.iter_mut().map(|p| p.value.data_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records the forward pass of `x` (`[n, input_dim]`) on `tape`.
    ///
    /// Returns the logits node and the parameter leaves, which require
    /// gradients only when `trainable` is set.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::shape(
                "model",
                format!("expected [n, {}] input, got {shape:?}", self.input_dim()),
            ));
        }
        let n = shape[0];
        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf_ref(&p.value, trainable))
            .collect();
        let logits = match &self.arch {
            ArchSpec::MnistConv { conv1, conv2, .. } => {
                let pad = KERNEL / 2;
                let img = tape.reshape(x, &[n, 1, MNIST_SIDE, MNIST_SIDE])?;
                let c1 = tape.conv2d(img, pv[0], pad)?;
                let c1 = tape.add_bias(c1, pv[1])?;
                let c1 = tape.relu(c1)?;
                let p1 = tape.max_pool2(c1)?;
                debug_assert_eq!(tape.value(p1).shape()[1], *conv1);
                let c2 = tape.conv2d(p1, pv[2], pad)?;
                let c2 = tape.add_bias(c2, pv[3])?;
                let c2 = tape.relu(c2)?;
                let p2 = tape.max_pool2(c2)?;
                let flat = tape.reshape(p2, &[n, conv2 * (MNIST_SIDE / 4) * (MNIST_SIDE / 4)])?;
                let h = tape.matmul(flat, pv[4])?;
                let h = tape.add_bias(h, pv[5])?;
                let h = tape.relu(h)?;
                let o = tape.matmul(h, pv[6])?;
                tape.add_bias(o, pv[7])?
            }
            ArchSpec::Mlp { widths } => {
                let layers = widths.len() - 1;
                let mut h = x;
                for l in 0..layers {
                    h = tape.matmul(h, pv[2 * l])?;
                    h = tape.add_bias(h, pv[2 * l + 1])?;
                    if l + 1 < layers {
                        h = tape.relu(h)?;
                    }
                }
                h
            }
        };
        Ok((logits, pv))
    }

    /// Logits `[n, outputs]` for a batch `[n, input_dim]`.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let n = batch.rows();
        if batch.shape().len() != 2 || batch.row_len() != self.input_dim() {
            return Err(Error::shape(
                "model",
                format!("expected [n, {}] input, got {:?}", self.input_dim(), batch.shape()),
            ));
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(batch.select_rows(&idx), false);
            let (z, _) = self.forward(&mut tape, x, false)?;
            parts.push(tape.value(z).clone());
            start = end;
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.outputs()]));
        }
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    /// First-column logits; the detector score `z(h(x))` for single-output models.
    pub fn scores(&self, batch: &Tensor) -> Result<Vec<f64>> {
        Ok(self.logits(batch)?.column(0))
    }

    /// Single-output model computing logit `k` of this model, sharing every
    /// other parameter.
    pub fn logit_subnetwork(&self, k: usize) -> Result<Model> {
        let outputs = self.outputs();
        if k >= outputs {
            return Err(Error::invalid(format!("logit index {k} out of range for {outputs} outputs")));
        }
        let mut params = self.params.clone();
        let last = params.len() - 1;
        let w = &params[last - 1].value;
        let hidden = w.shape()[0];
        let col: Vec<f64> = (0..hidden).map(|i| w.data()[i * outputs + k]).collect();
        params[last - 1].value = Tensor::new(vec![hidden, 1], col)?;
        params[last].value = Tensor::vector(vec![params[last].value.data()[k]]);
        Model::from_params(self.arch.with_outputs(1), params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_conv() -> ArchSpec {
        ArchSpec::MnistConv {
            conv1: 2,
            conv2: 3,
            hidden: 8,
            outputs: 4,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Model::init(tiny_conv(), 7).unwrap();
        let b = Model::init(tiny_conv(), 7).unwrap();
        let c = Model::init(tiny_conv(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mlp_first_weight_shape() {
        let m = Model::init(ArchSpec::toy_2d(), 0).unwrap();
        assert_eq!(m.params()[0].value.shape(), &[2, 500]);
        assert_eq!(m.outputs(), 1);
        let bound = 1.0 / 2f64.sqrt();
        assert!(m.params()[1].value.data().iter().all(|&b| b.abs() < bound));
    }

    #[test]
    fn logits_shapes() {
        let det = Model::init(ArchSpec::mlp(&[784, 16, 1]), 1).unwrap();
        let x = Tensor::filled(&[5, 784], 0.3);
        assert_eq!(det.logits(&x).unwrap().shape(), &[5, 1]);
        let clf = Model::init(ArchSpec::mnist_conv(10), 1).unwrap();
        assert_eq!(clf.logits(&Tensor::zeros(&[2, 784])).unwrap().shape(), &[2, 10]);
        assert!(det.logits(&Tensor::zeros(&[2, 783])).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let mut m = Model::init(tiny_conv(), 3).unwrap();
        for s in m.param_slices_mut() {
            s.fill(0.0);
        }
        let x = Tensor::filled(&[3, 784], 0.5);
        assert!(m.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_permutation_permutes_rows() {
        let m = Model::init(tiny_conv(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new(vec![3, 784], (0..3 * 784).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let z = m.logits(&x).unwrap();
        let zp = m.logits(&x.select_rows(&[2, 0, 1])).unwrap();
        assert_eq!(zp.row(0), z.row(2));
        assert_eq!(zp.row(1), z.row(0));
        assert_eq!(zp.row(2), z.row(1));
    }

    #[test]
    fn subnetwork_reproduces_logit() {
        let m = Model::init(tiny_conv(), 5).unwrap();
        let x = Tensor::filled(&[2, 784], 0.25);
        let z = m.logits(&x).unwrap();
        let sub = m.logit_subnetwork(2).unwrap();
        assert_eq!(sub.scores(&x).unwrap(), z.column(2));
        assert!(m.logit_subnetwork(4).is_err());
    }
}
