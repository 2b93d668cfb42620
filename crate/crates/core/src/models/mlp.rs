use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{BatchNormMode, Graph, Var};
use crate::error::{contract, Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running estimate in batch-norm updates.
pub const BN_MOMENTUM: f64 = 0.9;

/// Layer widths and per-layer options of a ReLU multilayer perceptron.
///
/// `widths = [in, h1, ..., out]` gives `widths.len() - 1` linear layers.
/// Every hidden layer is followed by an optional batch norm and a ReLU; the
/// last linear layer has no activation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    /// One flag per hidden layer.
    pub batch_norm: Vec<bool>,
    /// L2-normalize output rows.
    pub normalize_output: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, batch_norm: Vec<bool>, normalize_output: bool) -> Result<Self> {
        if widths.len() < 2 {
            return Err(contract!("an MLP needs at least one layer, got widths {:?}", widths));
        }
        if widths.contains(&0) {
            return Err(contract!("MLP widths must be positive, got {:?}", widths));
        }
        if batch_norm.len() != widths.len() - 2 {
            return Err(contract!(
                "{} batch-norm flags for {} hidden layers",
                batch_norm.len(),
                widths.len() - 2
            ));
        }
        Ok(Self { widths, batch_norm, normalize_output })
    }

    /// No batch norm, no output normalization.
    pub fn plain(widths: Vec<usize>) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        Self::new(widths, vec![false; hidden], false)
    }

    /// Batch norm on every hidden layer.
    pub fn with_bn(widths: Vec<usize>, normalize_output: bool) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        Self::new(widths, vec![true; hidden], normalize_output)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Compact text form, e.g. `64,256,128;bn=1;norm=0`.
    pub fn encode(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
        format!(
            "{};bn={};norm={}",
            join(&mut self.widths.iter().map(|w| w.to_string())),
            join(&mut self.batch_norm.iter().map(|&b| String::from(if b { "1" } else { "0" }))),
            u8::from(self.normalize_output)
        )
    }

    pub fn decode(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed MLP spec {:?}", text));
        let mut parts = text.split(';');
        let widths = parts
            .next()
            .ok_or_else(bad)?
            .split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let bn = parts.next().and_then(|p| p.strip_prefix("bn=")).ok_or_else(bad)?;
        let batch_norm = if bn.is_empty() {
            Vec::new()
        } else {
            bn.split(',')
                .map(|b| match b {
                    "1" => Ok(true),
                    "0" => Ok(false),
                    _ => Err(bad()),
                })
                .collect::<Result<Vec<_>>>()?
        };
        let normalize_output = match parts.next().and_then(|p| p.strip_prefix("norm=")) {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Self::new(widths, batch_norm, normalize_output).map_err(|_| bad())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::full(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::full(&[width], 1.0),
        }
    }

    fn absorb(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
}

/// Graph handles for one bound [`Mlp`], in parameter order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    vars: Vec<Var>,
}

impl MlpVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// A ReLU MLP with optional hidden batch norm and output normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl Mlp {
    /// Uniform He-style initialization: weights in `±sqrt(6 / fan_in)`, zero biases.
    /// Values are rounded to `f32` so checkpoints reproduce them exactly.
    pub fn new(spec: MlpSpec, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(spec.layers());
        for l in 0..spec.layers() {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let bound = math::sqrt(6.0 / fan_in as f64);
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound) as f32 as f64)
                .collect();
            let weight = Tensor::matrix(fan_in, fan_out, data).expect("positive widths");
            let linear = Linear { weight, bias: Tensor::zeros(&[fan_out]) };
            let hidden = l + 1 < spec.layers();
            let norm = (hidden && spec.batch_norm[l]).then(|| BatchNorm::new(fan_out));
            layers.push(Layer { linear, norm });
        }
        Self { spec, layers }
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        if layers.len() != spec.layers() {
            return Err(contract!("{} layers for spec with {}", layers.len(), spec.layers()));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (i, o) = (spec.widths[l], spec.widths[l + 1]);
            if layer.linear.weight.shape() != [i, o] || layer.linear.bias.shape() != [o] {
                return Err(contract!("layer {} does not match widths {}x{}", l, i, o));
            }
            let wants_bn = l + 1 < spec.layers() && spec.batch_norm[l];
            match &layer.norm {
                Some(bn) if wants_bn => {
                    for t in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                        if t.shape() != [o] {
                            return Err(contract!("batch norm of layer {} must have shape [{}]", l, o));
                        }
                    }
                }
                None if !wants_bn => {}
                _ => return Err(contract!("batch-norm presence of layer {} disagrees with spec", l)),
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Trainable tensors in canonical order: per layer weight, bias, then gamma, beta.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.linear.weight);
            out.push(&layer.linear.bias);
            if let Some(bn) = &layer.norm {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.linear.weight);
            out.push(&mut layer.linear.bias);
            if let Some(bn) = &mut layer.norm {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Every stored tensor (parameters and running statistics) with its name.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{l}.weight"), &layer.linear.weight));
            out.push((format!("{prefix}.{l}.bias"), &layer.linear.bias));
            if let Some(bn) = &layer.norm {
                out.push((format!("{prefix}.{l}.bn.gamma"), &bn.gamma));
                out.push((format!("{prefix}.{l}.bn.beta"), &bn.beta));
                out.push((format!("{prefix}.{l}.bn.running_mean"), &bn.running_mean));
                out.push((format!("{prefix}.{l}.bn.running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn round_to_f32(&mut self) {
        for layer in &mut self.layers {
            layer.linear.weight.round_to_f32();
            layer.linear.bias.round_to_f32();
            if let Some(bn) = &mut layer.norm {
                for t in [&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var] {
                    t.round_to_f32();
                }
            }
        }
    }

    /// Insert the parameters into `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        let vars = self
            .params()
            .into_iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        MlpVars { vars }
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let t = g.value(x);
        if t.rank() != 2 || t.cols() != self.spec.input_dim() {
            return Err(contract!(
                "MLP expects rows of width {}, got shape {:?}",
                self.spec.input_dim(),
                t.shape()
            ));
        }
        Ok(())
    }

    /// Training-mode forward; batch-norm layers use batch statistics and
    /// update their running estimates.
    pub fn forward_train(&mut self, g: &mut Graph, vars: &MlpVars, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let last = self.layers.len() - 1;
        let mut h = x;
        let mut idx = 0;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            h = g.matmul(h, vars.vars[idx])?;
            h = g.add(h, vars.vars[idx + 1])?;
            idx += 2;
            if let Some(bn) = &mut layer.norm {
                let (y, stats) = g.batch_norm(h, vars.vars[idx], vars.vars[idx + 1], BatchNormMode::Train { eps: BN_EPS })?;
                idx += 2;
                let stats = stats.expect("training mode yields statistics");
                bn.absorb(&stats.mean, &stats.var, stats.count);
                h = y;
            }
            if l < last {
                h = g.relu(h)?;
            }
        }
        if self.spec.normalize_output {
            h = g.l2_normalize_rows(h)?;
        }
        Ok(h)
    }

    /// Evaluation-mode forward using running batch-norm statistics.
    pub fn forward_eval(&self, g: &mut Graph, vars: &MlpVars, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let last = self.layers.len() - 1;
        let mut h = x;
        let mut idx = 0;
        for (l, layer) in self.layers.iter().enumerate() {
            h = g.matmul(h, vars.vars[idx])?;
            h = g.add(h, vars.vars[idx + 1])?;
            idx += 2;
            if let Some(bn) = &layer.norm {
                let mode = BatchNormMode::Eval {
                    running_mean: bn.running_mean.data(),
                    running_var: bn.running_var.data(),
                    eps: BN_EPS,
                };
                h = g.batch_norm(h, vars.vars[idx], vars.vars[idx + 1], mode)?.0;
                idx += 2;
            }
            if l < last {
                h = g.relu(h)?;
            }
        }
        if self.spec.normalize_output {
            h = g.l2_normalize_rows(h)?;
        }
        Ok(h)
    }

    /// Evaluation-mode forward on a plain matrix.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward_eval(&mut g, &vars, xv)?;
        Ok(g.value(y).clone())
    }
}
