//! The two-headed model: a shared trunk feeding a main classifier and a
//! 4-way rotation head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{rotate90k, LabeledImage};
use crate::error::{Error, Result};
use crate::numerics::gradcheck::{compare, FD_STEP};
use crate::numerics::{numeric_gradient, GradCheckReport, 
    softmax_cross_entropy, softmax_rows, LayerSpec, Network, ParamVector, Tensor,
};

/// Number of rotation classes (0, 90, 180, 270 degrees).
pub const ROTATIONS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// `[channels, height, width]`, height equal to width.
    pub input: Vec<usize>,
    pub num_classes: usize,
    pub trunk: Vec<LayerSpec>,
    pub main: Vec<LayerSpec>,
    pub aux: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
struct ArchSection {
    arch: ArchConfig,
}

impl ArchConfig {
    /// Two strided conv blocks in the trunk, one conv block plus pooling and
    /// a linear classifier per head.
    pub fn conv_stack(
        channels: usize,
        size: usize,
        num_classes: usize,
        widths: (usize, usize, usize),
    ) -> Self {
        let (w1, w2, wh) = widths;
        let head = |out: usize| {
            vec![
                LayerSpec::conv(w2, wh, 3, 1),
                LayerSpec::group_norm(wh),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::linear(wh, out),
                LayerSpec::SoftmaxCrossEntropy { classes: out },
            ]
        };
        ArchConfig {
            input: vec![channels, size, size],
            num_classes,
            trunk: vec![
                LayerSpec::conv(channels, w1, 3, 1),
                LayerSpec::group_norm(w1),
                LayerSpec::Relu,
                LayerSpec::conv(w1, w2, 3, 2),
                LayerSpec::group_norm(w2),
                LayerSpec::Relu,
            ],
            main: head(num_classes),
            aux: head(ROTATIONS),
        }
    }

    /// Default architecture: widths 16 / 32 in the trunk and 32 in each head.
    pub fn desk_default(channels: usize, size: usize, num_classes: usize) -> Self {
        Self::conv_stack(channels, size, num_classes, (16, 32, 32))
    }

    /// Harness-config text (`[arch]` section) describing this architecture.
    pub fn to_descriptor(&self) -> String {
        toml::to_string(&ArchSection { arch: self.clone() }).expect("architecture serializes")
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let section: ArchSection = toml::from_str(text)
            .map_err(|e| Error::config("arch", format!("bad descriptor: {e}")))?;
        Ok(section.arch)
    }

    /// Builds the three networks, checking the trunk/head shape contract.
    pub fn networks(&self) -> Result<(Network, Network, Network)> {
        if self.input.len() != 3 || self.input[1] != self.input[2] {
            return Err(Error::config(
                "arch.input",
                format!("expected [channels, size, size], got {:?}", self.input),
            ));
        }
        let trunk = Network::new(self.trunk.clone(), &self.input)
            .map_err(|e| prefix_layer("trunk", e))?;
        let main = Network::new(self.main.clone(), trunk.output_shape())
            .map_err(|e| prefix_layer("main", e))?;
        let aux = Network::new(self.aux.clone(), trunk.output_shape())
            .map_err(|e| prefix_layer("aux", e))?;
        if main.loss_classes() != Some(self.num_classes) {
            return Err(Error::config(
                "main",
                format!("must end in softmax_cross_entropy classes={}", self.num_classes),
            ));
        }
        if aux.loss_classes() != Some(ROTATIONS) {
            return Err(Error::config(
                "aux",
                "must end in softmax_cross_entropy classes=4",
            ));
        }
        Ok((trunk, main, aux))
    }
}

fn prefix_layer(part: &str, e: Error) -> Error {
    match e {
        Error::Config { layer, message } => Error::config(format!("{part} {layer}"), message),
        other => other,
    }
}

/// Which parameter partition a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    Shared,
    Main,
    Aux,
}

impl Partition {
    pub fn prefix(self) -> &'static str {
        match self {
            Partition::Shared => "trunk",
            Partition::Main => "main",
            Partition::Aux => "aux",
        }
    }
}

/// Loss value and gradients over the shared trunk and one head.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_s: ParamVector,
    pub grad_head: ParamVector,
    /// Softmax outputs of the head, one row per evaluated example.
    pub probs: Tensor,
}

/// Main-loss gradients plus the gradient with respect to the input pixels.
#[derive(Clone, Debug)]
pub struct InputGrad {
    pub loss: f64,
    pub input_grad: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    arch: ArchConfig,
    trunk_net: Network,
    main_net: Network,
    aux_net: Network,
    pub trunk: ParamVector,
    pub main: ParamVector,
    pub aux: ParamVector,
    seed: u64,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.trunk == other.trunk
            && self.main == other.main
            && self.aux == other.aux
    }
}

struct Pass {
    loss: f64,
    grad_s: ParamVector,
    grad_head: ParamVector,
    input_grad: Tensor,
    probs: Tensor,
}

impl Model {
    /// Seeded fan-in uniform initialization; deterministic per `(arch, seed)`.
    pub fn build(arch: ArchConfig, seed: u64) -> Result<Self> {
        let (trunk_net, main_net, aux_net) = arch.networks()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = trunk_net.init_params(&mut rng);
        let main = main_net.init_params(&mut rng);
        let aux = aux_net.init_params(&mut rng);
        Ok(Model {
            arch,
            trunk_net,
            main_net,
            aux_net,
            trunk,
            main,
            aux,
            seed,
        })
    }

    /// Reassembles a model from stored partitions, validating their layout.
    pub fn from_parts(
        arch: ArchConfig,
        trunk: ParamVector,
        main: ParamVector,
        aux: ParamVector,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Model::build(arch, seed)?;
        for (part, given) in [
            (Partition::Shared, trunk),
            (Partition::Main, main),
            (Partition::Aux, aux),
        ] {
            if !model.partition(part).same_layout(&given) {
                return Err(Error::config(
                    part.prefix(),
                    "stored parameters do not match the architecture",
                ));
            }
            *model.partition_mut(part) = given;
        }
        Ok(model)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input
    }

    pub fn partition(&self, p: Partition) -> &ParamVector {
        match p {
            Partition::Shared => &self.trunk,
            Partition::Main => &self.main,
            Partition::Aux => &self.aux,
        }
    }

    pub fn partition_mut(&mut self, p: Partition) -> &mut ParamVector {
        match p {
            Partition::Shared => &mut self.trunk,
            Partition::Main => &mut self.main,
            Partition::Aux => &mut self.aux,
        }
    }

    pub fn param_count(&self) -> usize {
        self.trunk.scalar_count() + self.main.scalar_count() + self.aux.scalar_count()
    }

    /// All parameters under `trunk.` / `main.` / `aux.` prefixes, in
    /// canonical order.
    pub fn named_params(&self) -> ParamVector {
        let mut all = ParamVector::new();
        for p in [Partition::Aux, Partition::Main, Partition::Shared] {
            for (k, t) in self.partition(p).clone().into_prefixed(p.prefix()) {
                all.insert(k, t);
            }
        }
        all
    }

    fn check_sample(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.arch.input.as_slice() {
            return Err(Error::Input(format!(
                "input shape {:?}, model expects {:?}",
                x.shape(),
                self.arch.input
            )));
        }
        Ok(())
    }

    fn check_batch(&self, xs: &Tensor) -> Result<()> {
        if xs.shape().len() != 4 || xs.shape()[1..] != self.arch.input[..] {
            return Err(Error::Input(format!(
                "batch shape {:?}, model expects [N, {:?}]",
                xs.shape(),
                self.arch.input
            )));
        }
        Ok(())
    }

    fn pass(&self, head_net: &Network, head: &ParamVector, xs: &Tensor, labels: &[usize]) -> Result<Pass> {
        let (features, trunk_tape) = self.trunk_net.forward(&self.trunk, xs)?;
        let (logits, head_tape) = head_net.forward(head, &features)?;
        let (loss, dlogits, probs) = softmax_cross_entropy(&logits, labels)?;
        let (grad_head, dfeatures) = head_net.backward(head, head_tape, &dlogits)?;
        let (grad_s, input_grad) = self.trunk_net.backward(&self.trunk, trunk_tape, &dfeatures)?;
        Ok(Pass {
            loss,
            grad_s,
            grad_head,
            input_grad,
            probs,
        })
    }

    /// Mean main-task cross-entropy over a batch `[N, C, H, W]`.
    pub fn main_loss_grad_batch(&self, xs: &Tensor, ys: &[usize]) -> Result<LossGrad> {
        self.check_batch(xs)?;
        if let Some(&y) = ys.iter().find(|&&y| y >= self.arch.num_classes) {
            return Err(Error::Input(format!(
                "label {y} out of range for {} classes",
                self.arch.num_classes
            )));
        }
        let p = self.pass(&self.main_net, &self.main, xs, ys)?;
        Ok(LossGrad {
            loss: p.loss,
            grad_s: p.grad_s,
            grad_head: p.grad_head,
            probs: p.probs,
        })
    }

    pub fn main_loss_grad(&self, x: &Tensor, y: usize) -> Result<LossGrad> {
        self.check_sample(x)?;
        self.main_loss_grad_batch(&x.unsqueeze0(), &[y])
    }

    /// Main loss and its gradient with respect to the input pixels.
    pub fn main_input_grad(&self, x: &Tensor, y: usize) -> Result<InputGrad> {
        self.check_sample(x)?;
        if y >= self.arch.num_classes {
            return Err(Error::Input(format!("label {y} out of range")));
        }
        let p = self.pass(&self.main_net, &self.main, &x.unsqueeze0(), &[y])?;
        Ok(InputGrad {
            loss: p.loss,
            input_grad: p.input_grad.index0(0),
        })
    }

    /// Rotation batch `[4N, C, H, W]` with labels `0..4` per sample.
    fn rotation_batch(&self, xs: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let n = xs.shape()[0];
        let mut items = Vec::with_capacity(n * ROTATIONS);
        let mut labels = Vec::with_capacity(n * ROTATIONS);
        for i in 0..n {
            let x = xs.index0(i);
            for k in 0..ROTATIONS {
                items.push(rotate90k(&x, k)?);
                labels.push(k);
            }
        }
        Ok((Tensor::stack(&items)?, labels))
    }

    /// Mean rotation cross-entropy over every sample of a batch and all four
    /// rotations of each.
    pub fn aux_loss_grad_batch(&self, xs: &Tensor) -> Result<LossGrad> {
        self.check_batch(xs)?;
        let (batch, labels) = self.rotation_batch(xs)?;
        let p = self.pass(&self.aux_net, &self.aux, &batch, &labels)?;
        Ok(LossGrad {
            loss: p.loss,
            grad_s: p.grad_s,
            grad_head: p.grad_head,
            probs: p.probs,
        })
    }

    pub fn aux_loss_grad(&self, x: &Tensor) -> Result<LossGrad> {
        if x.shape().len() != 3 || x.shape()[1] != x.shape()[2] {
            return Err(Error::Input(format!(
                "rotation task needs a square image, got {:?}",
                x.shape()
            )));
        }
        self.check_sample(x)?;
        self.aux_loss_grad_batch(&x.unsqueeze0())
    }

    /// Rotation-head logits for the four rotated copies of `x`, one row per
    /// rotation index.
    pub fn aux_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_sample(x)?;
        let (batch, _) = self.rotation_batch(&x.unsqueeze0())?;
        let features = self.trunk_net.infer(&self.trunk, &batch)?;
        self.aux_net.infer(&self.aux, &features)
    }

    /// Main-head logits `[N, num_classes]`.
    pub fn main_logits_batch(&self, xs: &Tensor) -> Result<Tensor> {
        self.check_batch(xs)?;
        let features = self.trunk_net.infer(&self.trunk, xs)?;
        self.main_net.infer(&self.main, &features)
    }

    /// Class probabilities of the main head.
    pub fn predict_main(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_sample(x)?;
        Ok(softmax_rows(&self.main_logits_batch(&x.unsqueeze0())?).into_data())
    }

    /// Accuracy and mean main loss over labelled images, evaluated in
    /// fixed-size chunks without touching parameters.
    pub fn evaluate(&self, images: &[LabeledImage]) -> Result<(f64, f64)> {
        if images.is_empty() {
            return Err(Error::Input("cannot evaluate on an empty set".into()));
        }
        let mut correct = 0usize;
        let mut losses = Vec::with_capacity(images.len().div_ceil(EVAL_CHUNK));
        for chunk in images.chunks(EVAL_CHUNK) {
            let xs = Tensor::stack(&chunk.iter().map(|i| i.pixels.clone()).collect::<Vec<_>>())?;
            let ys: Vec<usize> = chunk.iter().map(|i| i.label).collect();
            let logits = self.main_logits_batch(&xs)?;
            let (loss, _, probs) = softmax_cross_entropy(&logits, &ys)?;
            let k = self.arch.num_classes;
            for (row, &y) in probs.data().chunks(k).zip(&ys) {
                if crate::numerics::argmax(row) == y {
                    correct += 1;
                }
            }
            losses.push(loss * chunk.len() as f64);
        }
        let n = images.len() as f64;
        Ok((correct as f64 / n, crate::numerics::tree_sum(&losses) / n))
    }
}

const EVAL_CHUNK: usize = 128;

/// Inner product of two gradients restricted to the shared trunk.
pub fn shared_grad_inner(a: &LossGrad, b: &LossGrad) -> Result<f64> {
    a.grad_s.dot(&b.grad_s)
}

/// Which head's loss a gradient check exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Main,
    Aux,
}

/// Finite-difference check of a head's loss gradient over the trunk and
/// that head. Tensor names carry their partition prefix.
pub fn grad_check_head(model: &Model, x: &Tensor, y: usize, head: Head, tolerance: f64) -> Result<GradCheckReport> {
    let loss_of = |m: &Model| -> Result<f64> {
        match head {
            Head::Main => m.main_loss_grad(x, y).map(|g| g.loss),
            Head::Aux => m.aux_loss_grad(x).map(|g| g.loss),
        }
    };
    let analytic = match head {
        Head::Main => model.main_loss_grad(x, y)?,
        Head::Aux => model.aux_loss_grad(x)?,
    };
    let head_part = match head {
        Head::Main => Partition::Main,
        Head::Aux => Partition::Aux,
    };
    let mut scratch = model.clone();
    let num_s = numeric_gradient(&model.trunk, FD_STEP, |p| {
        scratch.trunk = p.clone();
        loss_of(&scratch)
    })?;
    let mut scratch = model.clone();
    let num_h = numeric_gradient(model.partition(head_part), FD_STEP, |p| {
        *scratch.partition_mut(head_part) = p.clone();
        loss_of(&scratch)
    })?;
    let rs = compare(&analytic.grad_s, &num_s, tolerance)?;
    let rh = compare(&analytic.grad_head, &num_h, tolerance)?;
    let max_errors = rs
        .max_errors
        .into_iter()
        .map(|(n, e)| (format!("trunk.{n}"), e))
        .chain(rh.max_errors.into_iter().map(|(n, e)| (format!("{}.{n}", head_part.prefix()), e)))
        .collect();
    Ok(GradCheckReport {
        tolerance,
        max_errors,
        passed: rs.passed && rh.passed,
    })
}
