//! Dual-encoder reconstruction network.
//!
//! Encoder I reads the raw sinogram, Encoder II the beamformed image. Both are
//! five-level contracting paths (two 3x3 conv + BN + ReLU blocks per level,
//! 2x2 max pooling between levels). Encoder I ends with a strided
//! convolution that folds the time axis onto the image grid. The decoder
//! concatenates the admitted bottlenecks, climbs back through four
//! up-convolutions and merges skips from either encoder at every level;
//! Encoder I skips are bilinearly resized to the decoder's grid first.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NnError, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::kernels::{self, BatchStats, ConvSpec};
use crate::params::{ParamKind, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of encoder levels; the grid shrinks by `2^(LEVELS-1)`.
pub const LEVELS: usize = 5;
const DOWNSCALE: usize = 1 << (LEVELS - 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both encoders feed the decoder.
    Full,
    /// Only Encoder II is connected to the decoder.
    Enc2OnlySkips,
    /// Only Encoder I is connected to the decoder.
    Enc1OnlySkips,
    /// Plain U-Net over the beamformed image: Encoder II and the decoder,
    /// without the auxiliary loss.
    UnetPost,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::Enc2OnlySkips,
        Variant::Enc1OnlySkips,
        Variant::UnetPost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Enc2OnlySkips => "enc2_only_skips",
            Variant::Enc1OnlySkips => "enc1_only_skips",
            Variant::UnetPost => "unet_post",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                NnError::InvalidArgument(format!(
                    "unknown variant '{s}' (expected full, enc2_only_skips, enc1_only_skips or unet_post)"
                ))
            })
    }
}

/// What a single-encoder variant removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disconnection {
    /// The dropped encoder contributes neither skips nor its bottleneck.
    #[default]
    Full,
    /// Only the dropped encoder's skips are removed; both bottlenecks stay.
    SkipsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct YNetConfig {
    /// Channels of the first level; level `k` has `base_channels * 2^(k-1)`.
    pub base_channels: usize,
    pub variant: Variant,
    pub disconnection: Disconnection,
    /// Weight of the auxiliary bottleneck loss.
    pub aux_weight: f64,
    /// Sinogram `(time samples, sensors)`.
    pub signal_shape: [usize; 2],
    /// Image `(rows, columns)`.
    pub image_shape: [usize; 2],
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for YNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            variant: Variant::Full,
            disconnection: Disconnection::Full,
            aux_weight: 0.5,
            signal_shape: [2560, 128],
            image_shape: [128, 128],
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl YNetConfig {
    /// A small configuration with the same structure, for numerical checks.
    pub fn miniature() -> Self {
        Self {
            base_channels: 2,
            signal_shape: [320, 32],
            image_shape: [32, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::InvalidArgument(m));
        if self.base_channels == 0 {
            return bad("base_channels must be at least 1".into());
        }
        if !(self.aux_weight.is_finite() && self.aux_weight >= 0.0) {
            return bad(format!("aux_weight must be finite and >= 0, got {}", self.aux_weight));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0 && self.bn_eps > 0.0) {
            return bad("batch-norm momentum must lie in (0, 1] and epsilon be positive".into());
        }
        let [sh, sw] = self.signal_shape;
        let [ih, iw] = self.image_shape;
        for (what, v) in [("signal height", sh), ("signal width", sw), ("image height", ih), ("image width", iw)] {
            if v == 0 || v % DOWNSCALE != 0 {
                return bad(format!("{what} {v} must be a positive multiple of {DOWNSCALE}"));
            }
        }
        if sw != iw {
            return bad(format!("signal width {sw} must equal image width {iw}"));
        }
        if sh % ih != 0 {
            return bad(format!("signal height {sh} must be a multiple of image height {ih}"));
        }
        Ok(())
    }

    /// Channels at encoder level `k` (1-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Height of the kernel (and stride) that folds Encoder I's bottom
    /// feature map onto the bottleneck grid.
    pub fn fold_factor(&self) -> usize {
        self.signal_shape[0] / self.image_shape[0]
    }

    pub fn bottleneck_hw(&self) -> (usize, usize) {
        (self.image_shape[0] / DOWNSCALE, self.image_shape[1] / DOWNSCALE)
    }

    fn fold_spec(&self) -> ConvSpec {
        ConvSpec::new((self.fold_factor(), 1), (0, 1))
    }

    fn admits(&self) -> Admitted {
        use Disconnection as D;
        use Variant as V;
        let (bottleneck1, bottleneck2, skips1, skips2) = match (self.variant, self.disconnection) {
            (V::Full, _) => (true, true, true, true),
            (V::Enc2OnlySkips, D::Full) | (V::UnetPost, _) => (false, true, false, true),
            (V::Enc2OnlySkips, D::SkipsOnly) => (true, true, false, true),
            (V::Enc1OnlySkips, D::Full) => (true, false, true, false),
            (V::Enc1OnlySkips, D::SkipsOnly) => (true, true, true, false),
        };
        Admitted {
            bottleneck1,
            bottleneck2,
            skips1,
            skips2,
            aux: bottleneck2 && self.variant != V::UnetPost,
        }
    }

    pub fn uses_signal(&self) -> bool {
        let a = self.admits();
        a.bottleneck1 || a.skips1
    }

    pub fn uses_image(&self) -> bool {
        let a = self.admits();
        a.bottleneck2 || a.skips2
    }

    /// Whether the auxiliary bottleneck loss contributes.
    pub fn uses_aux_loss(&self) -> bool {
        self.admits().aux
    }
}

#[derive(Debug, Clone, Copy)]
struct Admitted {
    bottleneck1: bool,
    bottleneck2: bool,
    skips1: bool,
    skips2: bool,
    aux: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running estimates are reported for update.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Trainable parameters and running statistics of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct YNet<T> {
    pub config: YNetConfig,
    pub params: ParameterSet<T>,
}

/// A batch of training pairs, each tensor shaped `(B, 1, H, W)`.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub signals: Option<Tensor<T>>,
    pub images: Option<Tensor<T>>,
    pub targets: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub reconstruction: f64,
    pub auxiliary: f64,
    pub total: f64,
}

/// Running-statistic update produced by one training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub prefix: String,
    pub stats: BatchStats,
}

/// Loss, gradients aligned with the trainable entries, and pending
/// running-statistic updates of one training step.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: LossValues,
    pub grads: Vec<Tensor<T>>,
    pub bn_updates: Vec<BnUpdate>,
}

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

struct Builder<'a, T> {
    params: &'a mut ParameterSet<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, kh: usize, kw: usize) -> Result<()> {
        let w = he_normal(&[cout, cin, kh, kw], cin * kh * kw, &mut self.rng);
        self.params.insert(format!("{name}.weight"), ParamKind::Trainable, w)?;
        Ok(())
    }

    /// Up-convolution kernel `[cin, cout, 2, 2]`; with stride 2 every output
    /// pixel sees one tap per input channel, so the fan-in is `cin`.
    fn up(&mut self, name: &str, cin: usize, cout: usize) -> Result<()> {
        let w = he_normal(&[cin, cout, 2, 2], cin, &mut self.rng);
        self.params.insert(format!("{name}.weight"), ParamKind::Trainable, w)?;
        Ok(())
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<()> {
        self.params
            .insert(format!("{name}.scale"), ParamKind::Trainable, Tensor::full(&[c], T::one()))?;
        self.params
            .insert(format!("{name}.shift"), ParamKind::Trainable, Tensor::zeros(&[c]))?;
        self.params
            .insert(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[c]))?;
        self.params
            .insert(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[c], T::one()))?;
        Ok(())
    }

    fn conv_bn(&mut self, name: &str, cout: usize, cin: usize, kh: usize, kw: usize) -> Result<()> {
        self.conv(&format!("{name}.conv"), cout, cin, kh, kw)?;
        self.bn(&format!("{name}.bn"), cout)
    }

    fn encoder(&mut self, prefix: &str, cfg: &YNetConfig) -> Result<()> {
        let mut cin = 1;
        for level in 1..=LEVELS {
            let c = cfg.channels(level);
            self.conv_bn(&format!("{prefix}.l{level}.block1"), c, cin, 3, 3)?;
            self.conv_bn(&format!("{prefix}.l{level}.block2"), c, c, 3, 3)?;
            cin = c;
        }
        Ok(())
    }
}

/// Forward-pass state: the graph plus the parameter leaves bound so far.
struct Pass<'a, T> {
    graph: Graph<T>,
    model: &'a YNet<T>,
    bound: HashMap<usize, NodeId>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
    input_grads: bool,
}

impl<T: Scalar> Pass<'_, T> {
    fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        if self.input_grads {
            self.graph.param(t.clone())
        } else {
            self.graph.input(t.clone())
        }
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        let i = self.model.params.index_of(name)?;
        if let Some(&id) = self.bound.get(&i) {
            return Ok(id);
        }
        let id = self.graph.param(self.model.params.entry(i).value.clone());
        self.bound.insert(i, id);
        Ok(id)
    }

    fn bn(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let scale = self.param(&format!("{name}.scale"))?;
        let shift = self.param(&format!("{name}.shift"))?;
        let eps = self.model.config.bn_eps;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm_train(x, scale, shift, eps)?;
                self.bn_updates.push(BnUpdate {
                    prefix: name.to_string(),
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let p = &self.model.params;
                let mean = p.get(&format!("{name}.running_mean"))?;
                let var = p.get(&format!("{name}.running_var"))?;
                self.graph.batch_norm_eval(x, scale, shift, mean, var, eps)
            }
        }
    }

    /// Convolution (no bias) followed by batch norm and ReLU.
    fn conv_bn_relu(&mut self, x: NodeId, name: &str, spec: ConvSpec) -> Result<NodeId> {
        let w = self.param(&format!("{name}.conv.weight"))?;
        let y = self.graph.conv2d(x, w, spec)?;
        let y = self.bn(y, &format!("{name}.bn"))?;
        Ok(self.graph.relu(y))
    }

    /// Levels 1..=5 of a contracting path; returns the four skips and the
    /// level-5 feature map.
    fn encoder(&mut self, x: NodeId, prefix: &str) -> Result<(Vec<NodeId>, NodeId)> {
        let mut skips = Vec::with_capacity(LEVELS - 1);
        let mut h = x;
        for level in 1..=LEVELS {
            if level > 1 {
                h = self.graph.max_pool2x2(h)?;
            }
            h = self.conv_bn_relu(h, &format!("{prefix}.l{level}.block1"), ConvSpec::same3x3())?;
            h = self.conv_bn_relu(h, &format!("{prefix}.l{level}.block2"), ConvSpec::same3x3())?;
            if level < LEVELS {
                skips.push(h);
            }
        }
        Ok((skips, h))
    }
}

/// A recorded forward pass: the graph, its named nodes, the graph node of
/// each bound parameter and the batch-norm statistics it produced.
pub type ForwardOutput<T> = (Graph<T>, ForwardNodes, HashMap<usize, NodeId>, Vec<BnUpdate>);

/// Node handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub output: NodeId,
    pub z1: Option<NodeId>,
    pub z2: Option<NodeId>,
    pub skips1: Vec<NodeId>,
    pub skips2: Vec<NodeId>,
    /// Encoder I level-5 map before the folding convolution.
    pub encoder1_bottom: Option<NodeId>,
    pub signal_input: Option<NodeId>,
    pub image_input: Option<NodeId>,
}

fn check_input<T: Scalar>(what: &str, t: &Tensor<T>, h: usize, w: usize) -> Result<usize> {
    match t.shape() {
        &[b, 1, th, tw] if b > 0 && th == h && tw == w => Ok(b),
        other => Err(shape_err(
            "ynet input",
            format!("{what} must be (B, 1, {h}, {w}), got {other:?}"),
        )),
    }
}

impl<T: Scalar> YNet<T> {
    /// He-normal kernels, unit BN scales, zero shifts; deterministic per seed.
    pub fn init(config: YNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let top = config.channels(LEVELS);
        b.encoder("enc1", &config)?;
        b.conv_bn("enc1.fold", top, top, config.fold_factor(), 3)?;
        b.encoder("enc2", &config)?;
        let a = config.admits();
        let bottleneck_in = top * (a.bottleneck1 as usize + a.bottleneck2 as usize);
        let skip_sources = a.skips1 as usize + a.skips2 as usize;
        for level in (1..=LEVELS).rev() {
            let c = config.channels(level);
            let cin = if level == LEVELS {
                bottleneck_in
            } else {
                c * (1 + skip_sources)
            };
            b.conv_bn(&format!("dec.l{level}.block1"), c, cin, 3, 3)?;
            b.conv_bn(&format!("dec.l{level}.block2"), c, c, 3, 3)?;
            if level > 1 {
                b.up(&format!("dec.l{level}.up"), c, c / 2)?;
                b.bn(&format!("dec.l{level}.upbn"), c / 2)?;
            }
        }
        let c1 = config.channels(1);
        b.conv("dec.out", 1, c1, 1, 1)?;
        b.params
            .insert("dec.out.bias", ParamKind::Trainable, Tensor::zeros(&[1]))?;
        b.conv("aux", 1, top, 1, 1)?;
        Ok(Self { config, params })
    }

    /// Records the forward pass on `graph`. Inputs not used by the variant may
    /// be `None`; missing required inputs are an error.
    fn run(
        &self,
        pass: &mut Pass<'_, T>,
        signals: Option<&Tensor<T>>,
        images: Option<&Tensor<T>>,
    ) -> Result<ForwardNodes> {
        let cfg = &self.config;
        let a = cfg.admits();
        let [ih, iw] = cfg.image_shape;
        let mut batch = None;
        let mut enc1 = None;
        let mut enc1_bottom = None;
        let (mut signal_input, mut image_input) = (None, None);
        if a.bottleneck1 || a.skips1 {
            let s = signals.ok_or_else(|| {
                NnError::InvalidArgument(format!("variant {} needs sinogram input", cfg.variant))
            })?;
            batch = Some(check_input("sinogram", s, cfg.signal_shape[0], cfg.signal_shape[1])?);
            let x = pass.leaf(s);
            signal_input = Some(x);
            let (skips, bottom) = pass.encoder(x, "enc1")?;
            let z1 = pass.conv_bn_relu(bottom, "enc1.fold", cfg.fold_spec())?;
            enc1_bottom = Some(bottom);
            enc1 = Some((skips, z1));
        }
        let mut enc2 = None;
        if a.bottleneck2 || a.skips2 {
            let im = images.ok_or_else(|| {
                NnError::InvalidArgument(format!("variant {} needs beamformed image input", cfg.variant))
            })?;
            let b = check_input("image", im, ih, iw)?;
            if batch.is_some_and(|n| n != b) {
                return Err(shape_err("ynet input", "sinogram and image batches differ"));
            }
            let x = pass.leaf(im);
            image_input = Some(x);
            enc2 = Some(pass.encoder(x, "enc2")?);
        }

        let mut bottleneck = Vec::new();
        if a.bottleneck1 {
            bottleneck.push(enc1.as_ref().unwrap().1);
        }
        if a.bottleneck2 {
            bottleneck.push(enc2.as_ref().unwrap().1);
        }
        let mut h = if bottleneck.len() == 1 {
            bottleneck[0]
        } else {
            pass.graph.concat_channels(&bottleneck)?
        };
        for level in (1..=LEVELS).rev() {
            if level < LEVELS {
                let (lh, lw) = (ih >> (level - 1), iw >> (level - 1));
                let mut parts = vec![h];
                if a.skips2 {
                    parts.push(enc2.as_ref().unwrap().0[level - 1]);
                }
                if a.skips1 {
                    let s = enc1.as_ref().unwrap().0[level - 1];
                    parts.push(pass.graph.resize_bilinear(s, lh, lw)?);
                }
                h = pass.graph.concat_channels(&parts)?;
            }
            h = pass.conv_bn_relu(h, &format!("dec.l{level}.block1"), ConvSpec::same3x3())?;
            h = pass.conv_bn_relu(h, &format!("dec.l{level}.block2"), ConvSpec::same3x3())?;
            if level > 1 {
                let w = pass.param(&format!("dec.l{level}.up.weight"))?;
                h = pass.graph.conv_transpose2d(h, w, ConvSpec::new((2, 2), (0, 0)))?;
                h = pass.bn(h, &format!("dec.l{level}.upbn"))?;
                h = pass.graph.relu(h);
            }
        }
        let w = pass.param("dec.out.weight")?;
        let bias = pass.param("dec.out.bias")?;
        let out = pass.graph.conv2d(h, w, ConvSpec::UNIT)?;
        let output = pass.graph.add_channel_bias(out, bias)?;
        Ok(ForwardNodes {
            output,
            z1: enc1.as_ref().map(|e| e.1),
            z2: enc2.as_ref().map(|e| e.1),
            skips1: enc1.map(|e| e.0).unwrap_or_default(),
            skips2: enc2.map(|e| e.0).unwrap_or_default(),
            encoder1_bottom: enc1_bottom,
            signal_input,
            image_input,
        })
    }

    fn pass(&self, mode: Mode) -> Pass<'_, T> {
        Pass {
            graph: Graph::new(),
            model: self,
            bound: HashMap::new(),
            mode,
            bn_updates: Vec::new(),
            input_grads: false,
        }
    }

    /// Evaluates the network and returns the graph, node handles and the
    /// leaf bound to each parameter index. With `input_grads` the inputs are
    /// differentiable leaves.
    pub fn forward_graph(
        &self,
        signals: Option<&Tensor<T>>,
        images: Option<&Tensor<T>>,
        mode: Mode,
        input_grads: bool,
    ) -> Result<ForwardOutput<T>> {
        let mut pass = self.pass(mode);
        pass.input_grads = input_grads;
        let nodes = self.run(&mut pass, signals, images)?;
        Ok((pass.graph, nodes, pass.bound, pass.bn_updates))
    }

    /// Reconstruction `(B, 1, H, W)` with running statistics.
    pub fn predict(&self, signals: Option<&Tensor<T>>, images: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (g, nodes, _, _) = self.forward_graph(signals, images, Mode::Eval, false)?;
        Ok(g.value(nodes.output).clone())
    }

    /// The auxiliary target: ground truth block-averaged onto the bottleneck grid.
    pub fn aux_target(&self, targets: &Tensor<T>) -> Result<Tensor<T>> {
        let (bh, bw) = self.config.bottleneck_hw();
        kernels::area_downsample(targets, bh, bw)
    }

    fn loss_nodes(
        &self,
        pass: &mut Pass<'_, T>,
        nodes: &ForwardNodes,
        targets: &Tensor<T>,
    ) -> Result<(NodeId, NodeId, Option<NodeId>)> {
        let rec = pass.graph.mse(nodes.output, targets)?;
        let aux = match (self.config.uses_aux_loss(), nodes.z2) {
            (true, Some(z2)) => {
                let w = pass.param("aux.weight")?;
                let proj = pass.graph.conv2d(z2, w, ConvSpec::UNIT)?;
                Some(pass.graph.mse(proj, &self.aux_target(targets)?)?)
            }
            _ => None,
        };
        let total = match aux {
            Some(a) => pass.graph.weighted_sum(&[(rec, 1.0), (a, self.config.aux_weight)])?,
            None => rec,
        };
        Ok((total, rec, aux))
    }

    fn loss_values(graph: &Graph<T>, total: NodeId, rec: NodeId, aux: Option<NodeId>) -> Result<LossValues> {
        let v = LossValues {
            reconstruction: graph.value(rec).data()[0].as_f64(),
            auxiliary: aux.map_or(0.0, |a| graph.value(a).data()[0].as_f64()),
            total: graph.value(total).data()[0].as_f64(),
        };
        if !(v.total.is_finite() && v.reconstruction.is_finite() && v.auxiliary.is_finite()) {
            return Err(NnError::NonFinite("loss".into()));
        }
        Ok(v)
    }

    /// Loss of a batch without differentiation.
    pub fn loss(&self, batch: &Batch<T>, mode: Mode) -> Result<LossValues> {
        let mut pass = self.pass(mode);
        let nodes = self.run(&mut pass, batch.signals.as_ref(), batch.images.as_ref())?;
        let (total, rec, aux) = self.loss_nodes(&mut pass, &nodes, &batch.targets)?;
        Self::loss_values(&pass.graph, total, rec, aux)
    }

    /// Training-mode loss and gradients for every trainable entry (zeros for
    /// entries the variant does not use).
    pub fn step(&self, batch: &Batch<T>) -> Result<StepOutput<T>> {
        let mut pass = self.pass(Mode::Train);
        let nodes = self.run(&mut pass, batch.signals.as_ref(), batch.images.as_ref())?;
        let (total, rec, aux) = self.loss_nodes(&mut pass, &nodes, &batch.targets)?;
        let loss = Self::loss_values(&pass.graph, total, rec, aux)?;
        let mut grads = pass.graph.backward(total)?;
        let grads = self.gather(&pass.bound, &mut grads);
        Ok(StepOutput {
            loss,
            grads,
            bn_updates: pass.bn_updates,
        })
    }

    /// Gradients aligned with `params.trainable()`.
    pub fn gather(&self, bound: &HashMap<usize, NodeId>, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.params
            .trainable()
            .into_iter()
            .map(|i| {
                bound
                    .get(&i)
                    .and_then(|&id| grads.take(id))
                    .unwrap_or_else(|| Tensor::zeros(self.params.entry(i).value.shape()))
            })
            .collect()
    }

    /// Folds batch statistics into the running estimates:
    /// `running = (1 - momentum) running + momentum batch`, with the unbiased
    /// batch variance.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        let m = self.config.bn_momentum;
        for u in updates {
            let var = u.stats.unbiased_var();
            for (suffix, batch) in [("running_mean", &u.stats.mean), ("running_var", &var)] {
                let t = self.params.get_mut(&format!("{}.{suffix}", u.prefix))?;
                for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = T::from_f64((1.0 - m) * r.as_f64() + m * b);
                }
            }
        }
        Ok(())
    }

    /// Names of the parameters belonging to Encoder I.
    pub fn encoder1_names(&self) -> Vec<String> {
        self.params
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("enc1."))
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> YNet<U> {
        YNet {
            config: self.config,
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(YNetConfig::default().validate().is_ok());
        assert!(YNetConfig::miniature().validate().is_ok());
        let bad = [
            YNetConfig { base_channels: 0, ..YNetConfig::default() },
            YNetConfig { aux_weight: -1.0, ..YNetConfig::default() },
            YNetConfig { signal_shape: [2560, 64], ..YNetConfig::default() },
        ];
        assert!(bad.iter().all(|c| c.validate().is_err()));
        assert_eq!(YNetConfig::default().fold_factor(), 20);
        assert_eq!(YNetConfig::default().bottleneck_hw(), (8, 8));
    }

    #[test]
    fn variant_inputs() {
        let mut c = YNetConfig { variant: Variant::UnetPost, ..YNetConfig::default() };
        assert!(!c.uses_signal() && c.uses_image() && !c.uses_aux_loss());
        c.variant = Variant::Enc1OnlySkips;
        assert!(c.uses_signal() && !c.uses_image() && !c.uses_aux_loss());
        c.disconnection = Disconnection::SkipsOnly;
        assert!(c.uses_signal() && c.uses_image() && c.uses_aux_loss());
        c.variant = Variant::Full;
        assert!(c.uses_signal() && c.uses_image() && c.uses_aux_loss());
    }

    #[test]
    fn bn_update_formula() {
        let mut m = YNet::<f64>::init(YNetConfig::miniature(), 0).unwrap();
        let stats = BatchStats {
            mean: vec![1.0, 2.0],
            var: vec![0.5, 0.5],
            count: 2,
        };
        m.apply_bn_updates(&[BnUpdate {
            prefix: "enc2.l1.block1.bn".into(),
            stats,
        }])
        .unwrap();
        let rm = m.params.get("enc2.l1.block1.bn.running_mean").unwrap();
        assert!((rm.data()[1] - 0.2).abs() < 1e-15);
        let rv = m.params.get("enc2.l1.block1.bn.running_var").unwrap();
        // unbiased 0.5 * 2 / 1 = 1.0 blended with 1.0
        assert!((rv.data()[0] - 1.0).abs() < 1e-15);
    }
}
