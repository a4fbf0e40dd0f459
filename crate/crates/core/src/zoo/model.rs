use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::{ArchitectureSpec, Family, FlopCount, Head, COSINE_XE_SCALE};
use crate::tensor::{BatchStats, Element, Mode, Padding, PoolKind, RngStream, Tape, Tensor, Var};
use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    DenseWeight,
    Bias,
    BnGamma,
    BnBeta,
    Prototypes,
}

impl ParamKind {
    /// Whether weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::DenseWeight)
    }
}

/// Whether parameters bound to a tape receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamUse {
    Trainable,
    Frozen,
}

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    kind: ParamKind,
    value: Tensor<T>,
}

#[derive(Clone, Debug)]
struct RunningStats<T> {
    name: String,
    mean: Vec<T>,
    var: Vec<T>,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        kernel: usize,
        stride: usize,
    },
    Bn {
        gamma: usize,
        beta: usize,
        stats: usize,
    },
    Relu,
    MaxPool,
    AvgPool,
    Dropout(f64),
    /// `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
    /// `concat(x, body(x))` along channels.
    DenseUnit {
        body: Vec<Layer>,
    },
    GlobalPool,
    Flatten,
}

#[derive(Clone, Debug)]
enum HeadLayer {
    Linear { weight: usize, bias: usize },
    Prototypes { protos: usize },
}

/// Outputs of one forward pass.
pub struct ForwardPass<T> {
    /// Penultimate activations `[B, F]`.
    pub features: Var,
    /// Logits for the softmax head, cosine similarities `[B, K]` otherwise.
    pub output: Var,
    /// Train-mode batch statistics keyed by running-stat slot.
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

/// A built network: named parameter tensors, running statistics and the
/// layer topology.
#[derive(Clone, Debug)]
pub struct ModelInstance<T> {
    spec: ArchitectureSpec,
    params: Vec<Param<T>>,
    running: Vec<RunningStats<T>>,
    body: Vec<Layer>,
    head_dropout: f64,
    head: HeadLayer,
    stage_blocks: Vec<usize>,
    feature_dim: usize,
}

struct Builder<'a, T> {
    params: Vec<Param<T>>,
    running: Vec<RunningStats<T>>,
    rng: &'a mut RngStream,
}

impl<T: Element> Builder<'_, T> {
    fn gaussian(&mut self, name: String, kind: ParamKind, shape: &[usize], std: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(std * self.rng.normal())).collect();
        self.push(name, kind, Tensor::from_vec(shape, data).expect("shape"))
    }

    fn push(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> usize {
        self.params.push(Param { name, kind, value });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, stride: usize) -> Layer {
        let std = Float::sqrt(2.0 / (k * k * cin) as f64);
        let kernel = self.gaussian(
            format!("{}.kernel", name),
            ParamKind::ConvWeight,
            &[k, k, cin, cout],
            std,
        );
        Layer::Conv { kernel, stride }
    }

    fn bn(&mut self, name: &str, c: usize) -> Layer {
        let gamma = self.push(
            format!("{}.gamma", name),
            ParamKind::BnGamma,
            Tensor::full(&[c], T::one()),
        );
        let beta = self.push(format!("{}.beta", name), ParamKind::BnBeta, Tensor::zeros(&[c]));
        self.running.push(RunningStats {
            name: String::from(name),
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
        Layer::Bn {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }
}

impl<T: Element> ModelInstance<T> {
    /// Builds and initializes a network. Convolution and dense weights are
    /// fan-in scaled Gaussians; batch-norm starts at scale 1, shift 0.
    pub fn build(spec: &ArchitectureSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            running: Vec::new(),
            rng,
        };
        let [_, _, c] = spec.input;
        let mut body = Vec::new();
        let mut stage_blocks = Vec::new();
        let mut head_dropout = 0.0;
        let feature_dim;
        match spec.family {
            Family::ResNet | Family::Wrn => {
                let (stem_out, base) = match spec.family {
                    Family::ResNet => (spec.width, spec.width),
                    _ => (16, 16 * spec.width),
                };
                body.push(b.conv("stem.conv", 3, c, stem_out, 1));
                body.push(b.bn("stem.bn", stem_out));
                body.push(Layer::Relu);
                let block_dropout = if spec.family == Family::Wrn { spec.dropout } else { 0.0 };
                let mut cin = stem_out;
                for s in 0..3 {
                    let ws = base << s;
                    let n = spec.blocks_per_stage();
                    for i in 0..n {
                        let p = format!("stage{}.block{}", s + 1, i);
                        let stride = if s > 0 && i == 0 { 2 } else { 1 };
                        let mut inner = vec![
                            b.conv(&format!("{}.conv1", p), 3, cin, ws, stride),
                            b.bn(&format!("{}.bn1", p), ws),
                            Layer::Relu,
                        ];
                        if block_dropout > 0.0 {
                            inner.push(Layer::Dropout(block_dropout));
                        }
                        inner.push(b.conv(&format!("{}.conv2", p), 3, ws, ws, 1));
                        inner.push(b.bn(&format!("{}.bn2", p), ws));
                        let shortcut = if cin != ws || stride != 1 {
                            vec![
                                b.conv(&format!("{}.proj.conv", p), 1, cin, ws, stride),
                                b.bn(&format!("{}.proj.bn", p), ws),
                            ]
                        } else {
                            Vec::new()
                        };
                        body.push(Layer::Residual { body: inner, shortcut });
                        cin = ws;
                    }
                    stage_blocks.push(n);
                }
                body.push(Layer::GlobalPool);
                body.push(Layer::Flatten);
                if spec.family == Family::ResNet {
                    head_dropout = spec.dropout;
                }
                feature_dim = cin;
            }
            Family::Vgg => {
                let plan: &[&[usize]] = if spec.depth == 5 {
                    &[&[1], &[2], &[4], &[8]]
                } else {
                    &[&[1], &[2], &[4, 4], &[8, 8], &[8, 8]]
                };
                let mut cin = c;
                let [mut h, mut w, _] = spec.input;
                for (i, block) in plan.iter().enumerate() {
                    for (j, &m) in block.iter().enumerate() {
                        let cout = m * spec.width;
                        let p = format!("block{}.conv{}", i + 1, j + 1);
                        body.push(b.conv(&p, 3, cin, cout, 1));
                        body.push(b.bn(&format!("{}.bn", p), cout));
                        body.push(Layer::Relu);
                        cin = cout;
                    }
                    body.push(Layer::MaxPool);
                    h /= 2;
                    w /= 2;
                    stage_blocks.push(block.len());
                }
                body.push(Layer::Flatten);
                head_dropout = spec.dropout;
                feature_dim = h * w * cin;
            }
            Family::DenseNetBc => {
                let k = spec.width;
                let mut ch = 2 * k;
                body.push(b.conv("stem.conv", 3, c, ch, 1));
                for s in 0..3 {
                    let n = spec.blocks_per_stage();
                    for i in 0..n {
                        let p = format!("stack{}.unit{}", s + 1, i);
                        let unit = vec![
                            b.bn(&format!("{}.bn1", p), ch),
                            Layer::Relu,
                            b.conv(&format!("{}.conv1", p), 1, ch, 4 * k, 1),
                            b.bn(&format!("{}.bn2", p), 4 * k),
                            Layer::Relu,
                            b.conv(&format!("{}.conv2", p), 3, 4 * k, k, 1),
                        ];
                        body.push(Layer::DenseUnit { body: unit });
                        ch += k;
                    }
                    stage_blocks.push(n);
                    if s < 2 {
                        let p = format!("transition{}", s + 1);
                        body.push(b.bn(&format!("{}.bn", p), ch));
                        body.push(Layer::Relu);
                        body.push(b.conv(&format!("{}.conv", p), 1, ch, ch / 2, 1));
                        body.push(Layer::AvgPool);
                        ch /= 2;
                    }
                }
                body.push(b.bn("final.bn", ch));
                body.push(Layer::Relu);
                body.push(Layer::GlobalPool);
                body.push(Layer::Flatten);
                head_dropout = spec.dropout;
                feature_dim = ch;
            }
        }
        let kc = spec.num_classes;
        let head = match spec.head {
            Head::SoftmaxXe => {
                let std = Float::sqrt(1.0 / feature_dim as f64);
                let weight = b.gaussian("head.weight".into(), ParamKind::DenseWeight, &[feature_dim, kc], std);
                let bias = b.push("head.bias".into(), ParamKind::Bias, Tensor::zeros(&[kc]));
                HeadLayer::Linear { weight, bias }
            }
            Head::Cosine | Head::CosinePlusXe => {
                let protos = b.gaussian("head.prototypes".into(), ParamKind::Prototypes, &[kc, feature_dim], 1.0);
                HeadLayer::Prototypes { protos }
            }
        };
        Ok(ModelInstance {
            spec: spec.clone(),
            params: b.params,
            running: b.running,
            body,
            head_dropout,
            head,
            stage_blocks,
            feature_dim,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn head(&self) -> Head {
        self.spec.head
    }

    /// Width of the penultimate feature vector.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Residual blocks per stage (ResNet, WRN), bottleneck units per stack
    /// (DenseNet-BC) or convolutions per pooling block (VGG).
    pub fn stage_blocks(&self) -> &[usize] {
        &self.stage_blocks
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, i: usize) -> &Tensor<T> {
        &self.params[i].value
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.params[i].value
    }

    pub fn param_name(&self, i: usize) -> &str {
        &self.params[i].name
    }

    pub fn param_kind(&self, i: usize) -> ParamKind {
        self.params[i].kind
    }

    /// Sum of all trainable tensor sizes.
    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.value.len() as u64).sum()
    }

    /// Inference cost recounted by walking the built layers.
    pub fn topology_flops(&self) -> Result<FlopCount> {
        let [h, w, c] = self.spec.input;
        let (macs, shape) = self.walk(&self.body, [h, w, c])?;
        let features = shape[0] * shape[1] * shape[2];
        if features != self.feature_dim {
            return Err(Error::shape(
                "topology",
                format!("feature width {} != {}", features, self.feature_dim),
            ));
        }
        let head_macs = match self.head {
            HeadLayer::Linear { weight, .. } => self.params[weight].value.len(),
            HeadLayer::Prototypes { protos } => self.params[protos].value.len(),
        };
        Ok(FlopCount::from_macs(macs + head_macs as u64))
    }

    fn walk(&self, layers: &[Layer], mut shape: [usize; 3]) -> Result<(u64, [usize; 3])> {
        let mut macs = 0u64;
        for layer in layers {
            match layer {
                Layer::Conv { kernel, stride } => {
                    let ks = self.params[*kernel].value.shape();
                    if ks[2] != shape[2] {
                        return Err(Error::shape(
                            "topology",
                            format!("{} expects {} channels", self.params[*kernel].name, ks[2]),
                        ));
                    }
                    let (oh, ow) = (shape[0].div_ceil(*stride), shape[1].div_ceil(*stride));
                    macs += (oh * ow * ks[0] * ks[1] * ks[2] * ks[3]) as u64;
                    shape = [oh, ow, ks[3]];
                }
                Layer::MaxPool | Layer::AvgPool => shape = [shape[0] / 2, shape[1] / 2, shape[2]],
                Layer::Residual { body, shortcut } => {
                    let (a, s1) = self.walk(body, shape)?;
                    let (b, s2) = self.walk(shortcut, shape)?;
                    if s1 != s2 {
                        return Err(Error::shape("topology", "residual branches disagree"));
                    }
                    macs += a + b;
                    shape = s1;
                }
                Layer::DenseUnit { body } => {
                    let (a, s) = self.walk(body, shape)?;
                    macs += a;
                    shape[2] += s[2];
                }
                Layer::GlobalPool => shape = [1, 1, shape[2]],
                Layer::Flatten => shape = [1, 1, shape[0] * shape[1] * shape[2]],
                Layer::Bn { .. } | Layer::Relu | Layer::Dropout(_) => {}
            }
        }
        Ok((macs, shape))
    }

    /// Places every parameter on the tape, in index order.
    pub fn bind(&self, tape: &mut Tape<T>, usage: ParamUse) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| match usage {
                ParamUse::Trainable => tape.param(&p.value),
                ParamUse::Frozen => tape.constant(&p.value),
            })
            .collect()
    }

    /// Records a forward pass of `x` (`[B, H, W, C]`) using `params` from
    /// [`bind`](Self::bind).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<ForwardPass<T>> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter handles for {} tensors",
                params.len(),
                self.params.len()
            )));
        }
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1..] != self.spec.input {
            return Err(Error::shape(
                "forward",
                format!("input {:?} does not match [B, {:?}]", xs, self.spec.input),
            ));
        }
        let mut stats = Vec::new();
        let features = self.run(tape, params, &self.body, x, mode, rng, &mut stats)?;
        let h = tape.dropout(features, self.head_dropout, mode, rng)?;
        let output = match self.head {
            HeadLayer::Linear { weight, bias } => tape.dense(h, params[weight], Some(params[bias]))?,
            HeadLayer::Prototypes { protos } => {
                let f = tape.l2_normalize(h)?;
                let p = tape.l2_normalize(params[protos])?;
                tape.matmul_nt(f, p)?
            }
        };
        Ok(ForwardPass {
            features,
            output,
            batch_stats: stats,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        layers: &[Layer],
        mut x: Var,
        mode: Mode,
        rng: &mut RngStream,
        stats: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var> {
        for layer in layers {
            x = match layer {
                Layer::Conv { kernel, stride } => tape.conv2d(x, params[*kernel], None, *stride, Padding::Same)?,
                Layer::Bn {
                    gamma,
                    beta,
                    stats: slot,
                } => {
                    let r = &self.running[*slot];
                    let (y, s) = tape.batch_norm(x, params[*gamma], params[*beta], (&r.mean, &r.var), mode, BN_EPS)?;
                    if let Some(s) = s {
                        stats.push((*slot, s));
                    }
                    y
                }
                Layer::Relu => tape.relu(x)?,
                Layer::MaxPool => tape.pool(x, PoolKind::Max, 2, 2)?,
                Layer::AvgPool => tape.pool(x, PoolKind::Avg, 2, 2)?,
                Layer::Dropout(rate) => tape.dropout(x, *rate, mode, rng)?,
                Layer::Residual { body, shortcut } => {
                    let a = self.run(tape, params, body, x, mode, rng, stats)?;
                    let b = self.run(tape, params, shortcut, x, mode, rng, stats)?;
                    let s = tape.add(a, b)?;
                    tape.relu(s)?
                }
                Layer::DenseUnit { body } => {
                    let y = self.run(tape, params, body, x, mode, rng, stats)?;
                    tape.concat(&[x, y])?
                }
                Layer::GlobalPool => tape.global_avg_pool(x)?,
                Layer::Flatten => tape.flatten(x)?,
            };
        }
        Ok(x)
    }

    /// Folds train-mode batch statistics into the running averages:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats<T>)], momentum: f64) {
        let m = T::from_f64(momentum);
        let one_m = T::one() - m;
        for (slot, s) in stats {
            let r = &mut self.running[*slot];
            for (a, &b) in r.mean.iter_mut().zip(&s.mean) {
                *a = m * *a + one_m * b;
            }
            for (a, &b) in r.var.iter_mut().zip(&s.var) {
                *a = m * *a + one_m * b;
            }
        }
    }

    /// Penultimate features in eval mode.
    pub fn extract_features(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, ParamUse::Frozen);
        let x = tape.constant(batch);
        let mut rng = RngStream::new(0, 0);
        let pass = self.forward(&mut tape, &params, x, Mode::Eval, &mut rng)?;
        Ok(tape.value(pass.features).clone())
    }

    /// Every tensor with its name: parameters first, then running means and
    /// variances as `<layer>.running_mean` / `<layer>.running_var`.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for r in &self.running {
            let c = r.mean.len();
            out.push((
                format!("{}.running_mean", r.name),
                Tensor::from_vec(&[c], r.mean.clone()).expect("shape"),
            ));
            out.push((
                format!("{}.running_var", r.name),
                Tensor::from_vec(&[c], r.var.clone()).expect("shape"),
            ));
        }
        out
    }

    /// Replaces all tensors from a [`state`](Self::state) listing. Every
    /// name must be present exactly once with the expected shape.
    pub fn load_state(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        let expected = self.state();
        if entries.len() != expected.len() {
            return Err(Error::InvalidArgument(format!(
                "state has {} tensors, model needs {}",
                entries.len(),
                expected.len()
            )));
        }
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; expected.len()];
        for (name, t) in entries {
            let i = expected
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::InvalidArgument(format!("unexpected tensor `{}`", name)))?;
            if t.shape() != expected[i].1.shape() {
                return Err(Error::shape(
                    "load_state",
                    format!("`{}` has shape {:?}", name, t.shape()),
                ));
            }
            if slots[i].replace(t).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate tensor `{}`", name)));
            }
        }
        let mut it = slots.into_iter().map(|s| s.expect("all slots filled"));
        for p in &mut self.params {
            p.value = it.next().unwrap();
        }
        for r in &mut self.running {
            r.mean = it.next().unwrap().into_data();
            r.var = it.next().unwrap().into_data();
        }
        Ok(())
    }

    /// The same network with elements converted to `U`.
    pub fn cast<U: Element>(&self) -> ModelInstance<U> {
        ModelInstance {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    name: r.name.clone(),
                    mean: r.mean.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                    var: r.var.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
            body: self.body.clone(),
            head_dropout: self.head_dropout,
            head: self.head.clone(),
            stage_blocks: self.stage_blocks.clone(),
            feature_dim: self.feature_dim,
        }
    }
}

/// Training loss of a head given the forward output and one-hot targets.
///
/// `softmax-xe`: mean cross-entropy of the logits. `cosine`: mean of
/// `1 - s_y` where `s` are cosine similarities. `cosine-plus-xe`: the cosine
/// term plus cross-entropy over `16 * s`.
pub fn loss<T: Element>(tape: &mut Tape<T>, head: Head, output: Var, targets: &Tensor<T>) -> Result<Var> {
    match head {
        Head::SoftmaxXe => tape.softmax_cross_entropy(output, targets),
        Head::Cosine | Head::CosinePlusXe => {
            if tape.shape(output) != targets.shape() {
                return Err(Error::shape(
                    "loss",
                    format!("output {:?} vs targets {:?}", tape.shape(output), targets.shape()),
                ));
            }
            let k = targets.shape()[1];
            for (i, row) in targets.data().chunks_exact(k).enumerate() {
                let ones = row.iter().filter(|&&v| v == T::one()).count();
                let zeros = row.iter().filter(|&&v| v == T::zero()).count();
                if ones != 1 || zeros != k - 1 {
                    return Err(Error::InvalidTarget(format!("row {} is not one-hot", i)));
                }
            }
            let b = targets.shape()[0] as f64;
            let hit = tape.weighted_sum(output, targets.data())?;
            let cos = tape.affine(hit, -1.0 / b, 1.0)?;
            if head == Head::Cosine {
                return Ok(cos);
            }
            let scaled = tape.affine(output, COSINE_XE_SCALE, 0.0)?;
            let xe = tape.softmax_cross_entropy(scaled, targets)?;
            tape.add(cos, xe)
        }
    }
}
