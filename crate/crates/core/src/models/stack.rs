use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use super::mlp::{BatchNorm, Layer, Linear, Mlp, MlpSpec, MlpVars};
use crate::autodiff::Graph;
use crate::error::{contract, Error, Result};
use crate::rng::Rng;
use crate::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Frozen: binds its parameters as constants.
    Teacher,
    Student,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

/// Architecture of an [`EncoderStack`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackSpec {
    pub backbone: MlpSpec,
    pub proj: MlpSpec,
    pub pred: MlpSpec,
    pub dist: Option<MlpSpec>,
}

impl StackSpec {
    /// Desk-scale architecture: backbone `[in, 256, 256, 128]`, projection
    /// `[128, 256, 256, 128]`, prediction `[128, 64, 128]`, batch norm on all
    /// hidden layers, normalized head outputs.
    pub fn desk(input_dim: usize) -> Self {
        Self::with_backbone(input_dim, &[256, 256], 128)
    }

    /// Same heads as [`StackSpec::desk`] on a backbone with the given hidden widths.
    pub fn with_backbone(input_dim: usize, hidden: &[usize], embed: usize) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(embed);
        Self {
            backbone: MlpSpec::with_bn(widths, false).expect("valid backbone widths"),
            proj: MlpSpec::with_bn(vec![embed, 256, 256, 128], true).expect("valid head"),
            pred: MlpSpec::with_bn(vec![128, 64, 128], true).expect("valid head"),
            dist: None,
        }
    }

    /// Add the 5-layer distillation head `[embed, 256, 256, 256, 64, out]`.
    pub fn with_distillation_head(mut self, out: usize) -> Self {
        let embed = self.backbone.output_dim();
        self.dist = Some(MlpSpec::with_bn(vec![embed, 256, 256, 256, 64, out], true).expect("valid head"));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let embed = self.backbone.output_dim();
        if self.proj.input_dim() != embed {
            return Err(contract!("projection head input {} != backbone output {}", self.proj.input_dim(), embed));
        }
        if self.pred.input_dim() != self.proj.output_dim() || self.pred.output_dim() != self.proj.output_dim() {
            return Err(contract!("prediction head must map projection space to itself"));
        }
        if let Some(d) = &self.dist {
            if d.input_dim() != embed {
                return Err(contract!("distillation head input {} != backbone output {}", d.input_dim(), embed));
            }
        }
        for (name, s) in self.heads() {
            if !s.normalize_output {
                return Err(contract!("{} head output must be L2-normalized", name));
            }
        }
        Ok(())
    }

    fn heads(&self) -> Vec<(&'static str, &MlpSpec)> {
        let mut v = vec![("proj", &self.proj), ("pred", &self.pred)];
        if let Some(d) = &self.dist {
            v.push(("dist", d));
        }
        v
    }
}

/// Graph handles of a bound stack.
#[derive(Clone, Debug)]
pub struct StackVars {
    pub backbone: MlpVars,
    pub proj: MlpVars,
    pub pred: MlpVars,
    pub dist: Option<MlpVars>,
}

impl StackVars {
    /// Accumulated gradients in [`EncoderStack::params`] order.
    pub fn grads(&self, g: &Graph) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        let parts = [Some(&self.backbone), Some(&self.proj), Some(&self.pred), self.dist.as_ref()];
        for vars in parts.into_iter().flatten() {
            for &v in vars.vars() {
                let grad = g.grad(v).ok_or_else(|| contract!("stack bound as constants has no gradients"))?;
                out.push(grad.clone());
            }
        }
        Ok(out)
    }
}

/// Backbone plus projection, prediction and optional distillation heads.
///
/// Evaluation-time forward methods (`forward_*`) run in eval mode on plain
/// matrices. Head calls are counted so callers can verify that few-shot
/// evaluation touches the backbone only.
#[derive(Debug)]
pub struct EncoderStack {
    backbone: Mlp,
    proj: Mlp,
    pred: Mlp,
    dist: Option<Mlp>,
    role: Role,
    head_calls: AtomicUsize,
}

impl Clone for EncoderStack {
    fn clone(&self) -> Self {
        Self {
            backbone: self.backbone.clone(),
            proj: self.proj.clone(),
            pred: self.pred.clone(),
            dist: self.dist.clone(),
            role: self.role,
            head_calls: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for EncoderStack {
    fn eq(&self, other: &Self) -> bool {
        self.backbone == other.backbone
            && self.proj == other.proj
            && self.pred == other.pred
            && self.dist == other.dist
            && self.role == other.role
    }
}

impl EncoderStack {
    /// Fresh stack; modules are initialized in the order backbone, proj, pred, dist.
    pub fn new(spec: StackSpec, role: Role, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let backbone = Mlp::new(spec.backbone, rng);
        let proj = Mlp::new(spec.proj, rng);
        let pred = Mlp::new(spec.pred, rng);
        let dist = spec.dist.map(|s| Mlp::new(s, rng));
        Ok(Self { backbone, proj, pred, dist, role, head_calls: AtomicUsize::new(0) })
    }

    pub fn spec(&self) -> StackSpec {
        StackSpec {
            backbone: self.backbone.spec().clone(),
            proj: self.proj.spec().clone(),
            pred: self.pred.spec().clone(),
            dist: self.dist.as_ref().map(|d| d.spec().clone()),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// The same weights re-labelled as a frozen teacher.
    pub fn into_teacher(mut self) -> Self {
        self.role = Role::Teacher;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.spec().input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone.spec().output_dim()
    }

    pub fn backbone(&self) -> &Mlp {
        &self.backbone
    }

    pub fn proj(&self) -> &Mlp {
        &self.proj
    }

    pub fn pred(&self) -> &Mlp {
        &self.pred
    }

    pub fn dist(&self) -> Option<&Mlp> {
        self.dist.as_ref()
    }

    /// Number of eval-mode head forwards (projection, prediction, distillation).
    pub fn head_forward_calls(&self) -> usize {
        self.head_calls.load(Ordering::Relaxed)
    }

    fn count_head_call(&self) {
        self.head_calls.fetch_add(1, Ordering::Relaxed);
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(contract!("stack expects rows of width {}, got shape {:?}", self.input_dim(), x.shape()));
        }
        Ok(())
    }

    /// Raw (unnormalized) backbone embeddings.
    pub fn forward_backbone(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        self.backbone.infer(x)
    }

    /// Projection-head outputs `z`, unit-norm rows.
    pub fn forward_proj(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        self.count_head_call();
        self.proj.infer(&self.backbone.infer(x)?)
    }

    /// Prediction-head outputs `p` for projections `z`, unit-norm rows.
    pub fn forward_pred(&self, z: &Tensor) -> Result<Tensor> {
        self.count_head_call();
        self.pred.infer(z)
    }

    /// Distillation-head outputs `d`, unit-norm rows.
    pub fn forward_dist(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        let dist = self.dist.as_ref().ok_or_else(|| contract!("stack has no distillation head"))?;
        self.count_head_call();
        dist.infer(&self.backbone.infer(x)?)
    }

    /// Insert parameters into `g`. Teacher stacks bind constants only.
    pub fn bind(&self, g: &mut Graph) -> StackVars {
        let trainable = self.role == Role::Student;
        StackVars {
            backbone: self.backbone.bind(g, trainable),
            proj: self.proj.bind(g, trainable),
            pred: self.pred.bind(g, trainable),
            dist: self.dist.as_ref().map(|d| d.bind(g, trainable)),
        }
    }

    /// Training-mode forward through backbone and projection head: `(h, z)`.
    pub fn train_backbone_proj(&mut self, g: &mut Graph, vars: &StackVars, x: Var) -> Result<(Var, Var)> {
        let h = self.backbone.forward_train(g, &vars.backbone, x)?;
        let z = self.proj.forward_train(g, &vars.proj, h)?;
        Ok((h, z))
    }

    pub fn train_backbone(&mut self, g: &mut Graph, vars: &StackVars, x: Var) -> Result<Var> {
        self.backbone.forward_train(g, &vars.backbone, x)
    }

    pub fn train_pred(&mut self, g: &mut Graph, vars: &StackVars, z: Var) -> Result<Var> {
        self.pred.forward_train(g, &vars.pred, z)
    }

    pub fn train_dist(&mut self, g: &mut Graph, vars: &StackVars, h: Var) -> Result<Var> {
        let dist = self.dist.as_mut().ok_or_else(|| contract!("stack has no distillation head"))?;
        let dv = vars.dist.as_ref().ok_or_else(|| contract!("distillation head not bound"))?;
        dist.forward_train(g, dv, h)
    }

    /// Trainable tensors in canonical order (backbone, proj, pred, dist).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.backbone.params();
        out.extend(self.proj.params());
        out.extend(self.pred.params());
        if let Some(d) = &self.dist {
            out.extend(d.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.params_mut();
        out.extend(self.proj.params_mut());
        out.extend(self.pred.params_mut());
        if let Some(d) = &mut self.dist {
            out.extend(d.params_mut());
        }
        out
    }

    /// Round parameters and running statistics to `f32` precision.
    pub fn round_to_f32(&mut self) {
        self.backbone.round_to_f32();
        self.proj.round_to_f32();
        self.pred.round_to_f32();
        if let Some(d) = &mut self.dist {
            d.round_to_f32();
        }
    }

    /// All stored tensors with stable names, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_tensors("backbone");
        out.extend(self.proj.named_tensors("proj"));
        out.extend(self.pred.named_tensors("pred"));
        if let Some(d) = &self.dist {
            out.extend(d.named_tensors("dist"));
        }
        out
    }

    /// Role and architecture as `key=value` lines.
    pub fn metadata(&self) -> String {
        let spec = self.spec();
        let mut s = format!(
            "role={}\nbackbone={}\nproj={}\npred={}\n",
            self.role.as_str(),
            spec.backbone.encode(),
            spec.proj.encode(),
            spec.pred.encode()
        );
        if let Some(d) = &spec.dist {
            s.push_str(&format!("dist={}\n", d.encode()));
        }
        s
    }

    /// Rebuild a stack from [`EncoderStack::metadata`] text and named tensors.
    pub fn from_parts(metadata: &str, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut role = None;
        let (mut backbone, mut proj, mut pred, mut dist) = (None, None, None, None);
        for line in metadata.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed metadata line {:?}", line)))?;
            match k {
                "role" => {
                    role = Some(match v {
                        "teacher" => Role::Teacher,
                        "student" => Role::Student,
                        _ => return Err(Error::Config(format!("unknown role {:?}", v))),
                    })
                }
                "backbone" => backbone = Some(MlpSpec::decode(v)?),
                "proj" => proj = Some(MlpSpec::decode(v)?),
                "pred" => pred = Some(MlpSpec::decode(v)?),
                "dist" => dist = Some(MlpSpec::decode(v)?),
                _ => return Err(Error::Config(format!("unknown metadata key {:?}", k))),
            }
        }
        let missing = |what: &str| Error::Config(format!("metadata lacks {}", what));
        let spec = StackSpec {
            backbone: backbone.ok_or_else(|| missing("backbone"))?,
            proj: proj.ok_or_else(|| missing("proj"))?,
            pred: pred.ok_or_else(|| missing("pred"))?,
            dist,
        };
        spec.validate().map_err(|e| Error::Config(format!("{}", e)))?;
        let mut tensors = tensors.into_iter();
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let (n, t) = tensors.next().ok_or_else(|| Error::Config(format!("missing tensor {}", name)))?;
            if n != name {
                return Err(Error::Config(format!("expected tensor {}, found {}", name, n)));
            }
            if t.shape() != shape {
                return Err(Error::Config(format!("tensor {} has shape {:?}, expected {:?}", name, t.shape(), shape)));
            }
            Ok(t)
        };
        let mut build = |prefix: &str, spec: MlpSpec| -> Result<Mlp> {
            let mut layers = Vec::new();
            for l in 0..spec.layers() {
                let (i, o) = (spec.widths[l], spec.widths[l + 1]);
                let weight = take(format!("{prefix}.{l}.weight"), &[i, o])?;
                let bias = take(format!("{prefix}.{l}.bias"), &[o])?;
                let norm = if l + 1 < spec.layers() && spec.batch_norm[l] {
                    Some(BatchNorm {
                        gamma: take(format!("{prefix}.{l}.bn.gamma"), &[o])?,
                        beta: take(format!("{prefix}.{l}.bn.beta"), &[o])?,
                        running_mean: take(format!("{prefix}.{l}.bn.running_mean"), &[o])?,
                        running_var: take(format!("{prefix}.{l}.bn.running_var"), &[o])?,
                    })
                } else {
                    None
                };
                layers.push(Layer { linear: Linear { weight, bias }, norm });
            }
            Mlp::from_layers(spec, layers)
        };
        let backbone = build("backbone", spec.backbone)?;
        let proj = build("proj", spec.proj)?;
        let pred = build("pred", spec.pred)?;
        let dist = spec.dist.map(|d| build("dist", d)).transpose()?;
        if let Some((n, _)) = tensors.next() {
            return Err(Error::Config(format!("unexpected extra tensor {}", n)));
        }
        Ok(Self {
            backbone,
            proj,
            pred,
            dist,
            role: role.ok_or_else(|| missing("role"))?,
            head_calls: AtomicUsize::new(0),
        })
    }
}
