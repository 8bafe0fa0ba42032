//! The CVR predictor: a small feed-forward network trained with
//! cross-entropy on mixed hard and soft labels.
//!
//! The model consumes [`RankingFeatures`] only; the type signature makes it
//! impossible to feed post-ranking signals into training or inference, which
//! must happen before those signals exist. Labels are f64 in [0, 1], so hard
//! (0/1) and soft labels train through the same loss.
//!
//! Training is single-threaded mini-batch SGD; given fixed seeds the trace
//! and the returned parameters are bit-identical across runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{sigmoid, RankingFeatures};
use crate::error::{Error, Result};
use crate::eval::pr_auc;
use crate::seeding::{self, tag};

/// Output probabilities are clamped into this open interval before any log.
const P_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    ReLU,
    Tanh,
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::ReLU => write!(f, "relu"),
            Activation::Tanh => write!(f, "tanh"),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::ReLU),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config(
                "activation",
                format!("unknown activation {other:?} (relu|tanh)"),
            )),
        }
    }
}

/// Network shape: `layer_widths` runs input -> hidden... -> 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpArch {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpArch {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let arch = MlpArch {
            layer_widths,
            activation,
            seed,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::config(
                "layer_widths",
                "need at least one hidden layer (input, hidden..., 1)",
            ));
        }
        if *self.layer_widths.last().unwrap() != 1 {
            return Err(Error::config("layer_widths", "last width must be 1"));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("layer_widths", "widths must be >= 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }
}

/// One dense layer: `w` is out_dim x in_dim row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DenseLayer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        // Uniform fan-in scaling; biases start at zero.
        let a = 1.0 / (in_dim as f64).sqrt();
        DenseLayer {
            in_dim,
            out_dim,
            w: (0..in_dim * out_dim).map(|_| rng.gen_range(-a..a)).collect(),
            b: vec![0.0; out_dim],
        }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.out_dim {
            let row = &self.w[r * self.in_dim..(r + 1) * self.in_dim];
            let mut acc = self.b[r];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// Trained parameters. `layers` is the trunk plus the main (hard) head as
/// its final entry; `soft_head` is the parallel head used by MTL training
/// for soft-labeled examples. Inference always uses the main head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: MlpArch,
    pub layers: Vec<DenseLayer>,
    pub soft_head: Option<DenseLayer>,
}

impl ModelParams {
    /// Seeded initialization. The soft head, when present, is drawn after
    /// the main layers, so the trunk and main head match a single-head
    /// initialization from the same seed.
    pub fn init(arch: &MlpArch, with_soft_head: bool) -> Result<Self> {
        arch.validate()?;
        let mut rng = seeding::rng(arch.seed, tag::ARCH_INIT);
        let mut layers = Vec::new();
        for win in arch.layer_widths.windows(2) {
            layers.push(DenseLayer::init(win[0], win[1], &mut rng));
        }
        let soft_head = with_soft_head.then(|| {
            let n = arch.layer_widths.len();
            DenseLayer::init(arch.layer_widths[n - 2], 1, &mut rng)
        });
        Ok(ModelParams {
            arch: arch.clone(),
            layers,
            soft_head,
        })
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        for l in &self.layers {
            n += l.w.len() + l.b.len();
        }
        if let Some(h) = &self.soft_head {
            n += h.w.len() + h.b.len();
        }
        n
    }

    /// Flatten all parameters (layer order, weights then biases, soft head
    /// last).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in self.layers.iter().chain(self.soft_head.iter()) {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    /// Overwrite all parameters from a flat vector laid out as `to_flat`.
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape {
                context: "flat parameter vector",
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut i = 0;
        for l in self.layers.iter_mut().chain(self.soft_head.iter_mut()) {
            let nw = l.w.len();
            l.w.copy_from_slice(&flat[i..i + nw]);
            i += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[i..i + nb]);
            i += nb;
        }
        Ok(())
    }
}

fn activate(a: Activation, pre: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(pre.iter().map(|&t| match a {
        Activation::ReLU => t.max(0.0),
        Activation::Tanh => t.tanh(),
    }));
}

fn activate_grad(a: Activation, pre: f64, post: f64) -> f64 {
    match a {
        Activation::ReLU => {
            if pre > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => 1.0 - post * post,
    }
}

/// Which head an example trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Head {
    Main,
    Soft,
}

/// One training example: ranking features and a label in [0, 1].
#[derive(Debug, Clone)]
pub struct CvrExample {
    pub features: RankingFeatures,
    pub target: f64,
}

/// Cross-entropy against a (possibly soft) label.
pub fn soft_xent_loss(p: f64, label: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&label) {
        return Err(Error::LabelDomain(label));
    }
    let p = p.clamp(P_EPS, 1.0 - P_EPS);
    Ok(-label * p.ln() - (1.0 - label) * (1.0 - p).ln())
}

/// Forward pass through the trunk and the main head. Output is strictly
/// inside (0, 1).
pub fn forward(params: &ModelParams, x: &RankingFeatures) -> Result<f64> {
    forward_head(params, x, Head::Main)
}

/// Forward pass through the soft head (MTL models only).
pub fn forward_soft(params: &ModelParams, x: &RankingFeatures) -> Result<f64> {
    if params.soft_head.is_none() {
        return Err(Error::Invalid("model has no soft head".into()));
    }
    forward_head(params, x, Head::Soft)
}

fn forward_head(params: &ModelParams, x: &RankingFeatures, head: Head) -> Result<f64> {
    if x.len() != params.arch.input_dim() {
        return Err(Error::Shape {
            context: "forward input",
            expected: params.arch.input_dim(),
            got: x.len(),
        });
    }
    let n_layers = params.layers.len();
    let mut cur = x.to_vec();
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for layer in &params.layers[..n_layers - 1] {
        layer.apply(&cur, &mut pre);
        activate(params.arch.activation, &pre, &mut post);
        std::mem::swap(&mut cur, &mut post);
    }
    let head_layer = match head {
        Head::Main => &params.layers[n_layers - 1],
        Head::Soft => params.soft_head.as_ref().expect("checked"),
    };
    head_layer.apply(&cur, &mut pre);
    Ok(sigmoid(pre[0]).clamp(P_EPS, 1.0 - P_EPS))
}

/// Gradient accumulator with the same layout as the parameters.
struct GradBuf {
    layers: Vec<DenseLayer>,
    soft_head: Option<DenseLayer>,
}

impl GradBuf {
    fn zeros_like(params: &ModelParams) -> Self {
        GradBuf {
            layers: params
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.in_dim, l.out_dim))
                .collect(),
            soft_head: params
                .soft_head
                .as_ref()
                .map(|h| DenseLayer::zeros(h.in_dim, h.out_dim)),
        }
    }

    fn reset(&mut self) {
        for l in self.layers.iter_mut().chain(self.soft_head.iter_mut()) {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.layers.iter().chain(self.soft_head.iter()) {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }
}

/// Scratch buffers reused across examples.
struct Workspace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    fn new(params: &ModelParams) -> Self {
        let n = params.layers.len();
        Workspace {
            pre: vec![Vec::new(); n],
            post: vec![Vec::new(); n],
            delta: Vec::new(),
            delta_prev: Vec::new(),
        }
    }
}

/// Forward + backward for one example; accumulates into `grads`, returns
/// the (weighted) loss.
fn backprop_example(
    params: &ModelParams,
    ws: &mut Workspace,
    grads: &mut GradBuf,
    x: &RankingFeatures,
    target: f64,
    head: Head,
    weight: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::LabelDomain(target));
    }
    if x.len() != params.arch.input_dim() {
        return Err(Error::Shape {
            context: "training input",
            expected: params.arch.input_dim(),
            got: x.len(),
        });
    }
    let n_layers = params.layers.len();
    let act = params.arch.activation;

    // Forward through the trunk, caching activations.
    for i in 0..n_layers - 1 {
        let input: &[f64] = if i == 0 { x } else { &ws.post[i - 1] };
        // Split borrows: apply writes pre[i], activate writes post[i].
        let (pre_i, post_i) = {
            let pre = &mut ws.pre[i];
            params.layers[i].apply(input, pre);
            (pre.clone(), &mut ws.post[i])
        };
        activate(act, &pre_i, post_i);
        ws.pre[i] = pre_i;
    }
    let trunk_out_idx = n_layers - 2;
    let head_layer = match head {
        Head::Main => &params.layers[n_layers - 1],
        Head::Soft => params
            .soft_head
            .as_ref()
            .ok_or_else(|| Error::Invalid("soft example routed to missing soft head".into()))?,
    };
    let trunk_out: &[f64] = if n_layers == 1 { x } else { &ws.post[trunk_out_idx] };
    let mut head_pre = Vec::new();
    head_layer.apply(trunk_out, &mut head_pre);
    let logit = head_pre[0];
    let p = sigmoid(logit);
    let loss = weight * soft_xent_loss(p, target)?;

    // d(loss)/d(logit) for sigmoid + cross-entropy.
    let dlogit = weight * (p - target);

    // Head gradients.
    let head_grad = match head {
        Head::Main => &mut grads.layers[n_layers - 1],
        Head::Soft => grads.soft_head.as_mut().expect("shape checked"),
    };
    for (g, h) in head_grad.w.iter_mut().zip(trunk_out) {
        *g += dlogit * h;
    }
    head_grad.b[0] += dlogit;

    // Delta flowing into the trunk output.
    ws.delta.clear();
    ws.delta
        .extend(head_layer.w.iter().map(|&w| w * dlogit));

    // Backward through the trunk.
    for i in (0..n_layers - 1).rev() {
        let layer = &params.layers[i];
        let input: &[f64] = if i == 0 { x } else { &ws.post[i - 1] };
        // delta currently holds d(loss)/d(post_i); convert to pre-activation.
        for r in 0..layer.out_dim {
            ws.delta[r] *= activate_grad(act, ws.pre[i][r], ws.post[i][r]);
        }
        let grad = &mut grads.layers[i];
        for r in 0..layer.out_dim {
            let d = ws.delta[r];
            let row = &mut grad.w[r * layer.in_dim..(r + 1) * layer.in_dim];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
            grad.b[r] += d;
        }
        if i > 0 {
            ws.delta_prev.clear();
            ws.delta_prev.resize(layer.in_dim, 0.0);
            for r in 0..layer.out_dim {
                let d = ws.delta[r];
                let row = &layer.w[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (dp, w) in ws.delta_prev.iter_mut().zip(row) {
                    *dp += d * w;
                }
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }
    Ok(loss)
}

/// Summed loss over hard and soft examples (soft routed to the soft head
/// when present), plus the flat gradient of that sum. The test suites check
/// this gradient against central finite differences.
pub fn sum_loss_and_grad(
    params: &ModelParams,
    hard: &[CvrExample],
    soft: &[CvrExample],
    soft_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut ws = Workspace::new(params);
    let mut grads = GradBuf::zeros_like(params);
    let mut loss = 0.0;
    for e in hard {
        loss += backprop_example(params, &mut ws, &mut grads, &e.features, e.target, Head::Main, 1.0)?;
    }
    let soft_head = if params.soft_head.is_some() {
        Head::Soft
    } else {
        Head::Main
    };
    for e in soft {
        loss += backprop_example(
            params,
            &mut ws,
            &mut grads,
            &e.features,
            e.target,
            soft_head,
            soft_weight,
        )?;
    }
    Ok((loss, grads.to_flat()))
}

/// Summed loss only (finite-difference side of the gradient checks).
pub fn sum_loss(
    params: &ModelParams,
    hard: &[CvrExample],
    soft: &[CvrExample],
    soft_weight: f64,
) -> Result<f64> {
    let mut loss = 0.0;
    for e in hard {
        loss += soft_xent_loss(forward_head(params, &e.features, Head::Main)?, e.target)?;
    }
    let head = if params.soft_head.is_some() {
        Head::Soft
    } else {
        Head::Main
    };
    for e in soft {
        loss += soft_weight * soft_xent_loss(forward_head(params, &e.features, head)?, e.target)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stopping {
    /// Stop after `patience` epochs without a validation PR-AUC improvement;
    /// restore the best epoch's parameters.
    EarlyStopping { patience: usize },
    /// Train exactly `n` epochs, ignoring `max_epochs`. The right `n` can
    /// only come from an oracle run on held-out data.
    FixedEpochs { n: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub stopping: Stopping,
    /// Fraction of hard-labeled rows held out for validation (stratified).
    pub validation_fraction: f64,
    pub seed: u64,
    /// SGD momentum; 0 disables it.
    pub momentum: f64,
    /// Loss weight for soft-labeled examples.
    pub soft_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 64,
            max_epochs: 200,
            stopping: Stopping::EarlyStopping { patience: 12 },
            validation_fraction: 0.15,
            seed: 1,
            momentum: 0.0,
            soft_weight: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(0.0 < self.validation_fraction && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction", "must be in (0, 1)"));
        }
        if let Stopping::EarlyStopping { patience } = self.stopping {
            if patience == 0 {
                return Err(Error::config("stopping.patience", "must be >= 1"));
            }
        }
        if self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if self.soft_weight < 0.0 {
            return Err(Error::config("soft_weight", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_pr_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were returned (early stopping only).
    pub best_epoch: Option<usize>,
}

/// Deterministic stratified split of hard examples into (train, validation)
/// index sets. Exposed so tests can reconstruct the validation set.
pub fn validation_split(
    labels: &[f64],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut rng = seeding::rng(seed, tag::VAL_SPLIT);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= 0.5).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] < 0.5).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut val = Vec::new();
    let mut train = Vec::new();
    for class in [pos, neg] {
        let n = class.len();
        let n_val = if n >= 2 {
            ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        val.extend_from_slice(&class[..n_val]);
        train.extend_from_slice(&class[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Train a single-head model on the union of hard and soft examples.
pub fn train(
    hard: &[CvrExample],
    soft: &[CvrExample],
    arch: &MlpArch,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainingTrace)> {
    train_inner(hard, soft, arch, cfg, false)
}

/// Train a shared trunk with separate hard and soft heads. Hard examples
/// drive the hard head, soft examples the soft head; both gradients flow
/// into the trunk. Inference uses the hard head.
pub fn train_mtl(
    hard: &[CvrExample],
    soft: &[CvrExample],
    arch: &MlpArch,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainingTrace)> {
    if soft.is_empty() {
        return Err(Error::config(
            "use_mtl",
            "no soft-labeled examples; use plain train for a single task",
        ));
    }
    if hard.is_empty() {
        return Err(Error::Invalid("MTL training requires hard examples".into()));
    }
    train_inner(hard, soft, arch, cfg, true)
}

fn train_inner(
    hard: &[CvrExample],
    soft: &[CvrExample],
    arch: &MlpArch,
    cfg: &TrainConfig,
    mtl: bool,
) -> Result<(ModelParams, TrainingTrace)> {
    use rand::seq::SliceRandom;
    arch.validate()?;
    cfg.validate()?;
    if hard.is_empty() && soft.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let early = matches!(cfg.stopping, Stopping::EarlyStopping { .. });
    if early && hard.is_empty() {
        return Err(Error::config(
            "stopping",
            "early stopping requires hard-labeled examples for validation",
        ));
    }

    // Validation split over hard examples (stratified by label).
    let hard_labels: Vec<f64> = hard.iter().map(|e| e.target).collect();
    let (train_idx, val_idx) = if hard.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        validation_split(&hard_labels, cfg.validation_fraction, cfg.seed)
    };
    let val_ok = val_idx.iter().any(|&i| hard[i].target >= 0.5)
        && val_idx.iter().any(|&i| hard[i].target < 0.5);
    if early && !val_ok {
        return Err(Error::DegenerateLabels(
            "validation split lacks a class; early stopping undefined".into(),
        ));
    }

    let mut params = ModelParams::init(arch, mtl)?;
    let mut velocity = vec![0.0; params.n_params()];
    let mut ws = Workspace::new(&params);
    let mut grads = GradBuf::zeros_like(&params);

    // (example index into hard/soft, head routing)
    enum Src {
        Hard(usize),
        Soft(usize),
    }
    let mut order: Vec<Src> = train_idx
        .iter()
        .map(|&i| Src::Hard(i))
        .chain((0..soft.len()).map(Src::Soft))
        .collect();

    let soft_head = if mtl { Head::Soft } else { Head::Main };
    let mut rng = seeding::rng(cfg.seed, tag::SHUFFLE);
    let n_epochs = match cfg.stopping {
        Stopping::EarlyStopping { .. } => cfg.max_epochs,
        Stopping::FixedEpochs { n } => n,
    };

    let mut trace = TrainingTrace::default();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 1..=n_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.reset();
            let mut batch_loss = 0.0;
            for src in batch {
                let (e, head, weight) = match src {
                    Src::Hard(i) => (&hard[*i], Head::Main, 1.0),
                    Src::Soft(i) => (&soft[*i], soft_head, cfg.soft_weight),
                };
                batch_loss +=
                    backprop_example(&params, &mut ws, &mut grads, &e.features, e.target, head, weight)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            let flat_grad = grads.to_flat();
            let mut k = 0;
            for l in params.layers.iter_mut().chain(params.soft_head.iter_mut()) {
                for w in l.w.iter_mut().chain(l.b.iter_mut()) {
                    let g = flat_grad[k] * scale;
                    velocity[k] = cfg.momentum * velocity[k] + g;
                    *w -= cfg.learning_rate * velocity[k];
                    k += 1;
                }
            }
        }
        let train_loss = epoch_loss / order.len().max(1) as f64;

        let val_pr_auc = if val_ok {
            let scores: Vec<f64> = val_idx
                .iter()
                .map(|&i| forward_head(&params, &hard[i].features, Head::Main))
                .collect::<Result<_>>()?;
            let labels: Vec<bool> = val_idx.iter().map(|&i| hard[i].target >= 0.5).collect();
            Some(pr_auc(&scores, &labels)?)
        } else {
            None
        };
        trace.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_pr_auc,
        });

        if early {
            let val = val_pr_auc.expect("validated above");
            let improved = best.as_ref().map_or(true, |(b, _, _)| val > *b);
            if improved {
                best = Some((val, epoch, params.clone()));
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                let Stopping::EarlyStopping { patience } = cfg.stopping else {
                    unreachable!()
                };
                if stale_epochs >= patience {
                    break;
                }
            }
        }
    }

    if early {
        let (_, epoch, best_params) = best.expect("at least one epoch ran");
        trace.best_epoch = Some(epoch);
        return Ok((best_params, trace));
    }
    Ok((params, trace))
}
