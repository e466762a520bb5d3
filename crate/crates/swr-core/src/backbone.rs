//! A small convolutional feature extractor mixing one regular convolution
//! with alternating depthwise / pointwise blocks, batch norm and relu in
//! between, finished by global average pooling. Every convolution weight is
//! an entry in the reparametrizable-layer registry; batch-norm layers are
//! tracked but never eligible.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, Tape, Tensor};
use crate::error::{Result, SwrError};
use crate::rng::SwrRng;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "regular-conv")]
    RegularConv,
    #[serde(rename = "depthwise-conv")]
    DepthwiseConv,
    #[serde(rename = "pointwise-conv")]
    PointwiseConv,
    #[serde(rename = "batchnorm")]
    BatchNorm,
    #[serde(rename = "linear")]
    Linear,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LayerKind::RegularConv => "regular-conv",
            LayerKind::DepthwiseConv => "depthwise-conv",
            LayerKind::PointwiseConv => "pointwise-conv",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Linear => "linear",
        };
        f.write_str(s)
    }
}

/// One learnable layer in the backbone's registry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub weight_shape: Vec<usize>,
    pub param_count: usize,
    pub reparam_eligible: bool,
    /// 1-based position among eligible layers; `None` for batch norm.
    pub eligible_index: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnTransferMode {
    /// Running mean and variance adapt per task; affine scale/shift stay
    /// frozen and shared with the base model.
    #[serde(rename = "stats-only")]
    StatsOnly,
    /// Affine parameters adapt per task as well.
    #[serde(rename = "stats-and-affine")]
    StatsAndAffine,
}

impl std::fmt::Display for BnTransferMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BnTransferMode::StatsOnly => f.write_str("stats-only"),
            BnTransferMode::StatsAndAffine => f.write_str("stats-and-affine"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub freq_bins: usize,
    pub time_steps: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    /// Output channels of each block's pointwise convolution.
    pub block_channels: Vec<usize>,
    pub pool_after_stem: bool,
    /// 1-based block indices followed by a 2x2 average pool.
    pub pool_after_blocks: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            freq_bins: 16,
            time_steps: 32,
            stem_channels: 8,
            stem_kernel: 5,
            block_channels: vec![16, 16, 24, 24, 32, 32],
            pool_after_stem: true,
            pool_after_blocks: vec![2, 4],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.freq_bins == 0
            || self.time_steps == 0
            || self.stem_channels == 0
            || self.stem_kernel == 0
        {
            return Err(SwrError::Config("backbone extents must be positive".into()));
        }
        if self.block_channels.len() < 2 {
            return Err(SwrError::Config("backbone needs at least 2 blocks".into()));
        }
        if self.block_channels.iter().any(|&c| c == 0) {
            return Err(SwrError::Config("block widths must be >= 1".into()));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(SwrError::Config("stem kernel must be odd".into()));
        }
        for &b in &self.pool_after_blocks {
            if b == 0 || b > self.block_channels.len() {
                return Err(SwrError::Config(format!("pool_after_blocks index {b} out of range")));
            }
        }
        self.feature_extents().map(|_| ())
    }

    pub fn num_blocks(&self) -> usize {
        self.block_channels.len()
    }

    /// Spatial extents left when the graph reaches global average pooling.
    fn feature_extents(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.freq_bins, self.time_steps);
        let mut pool = |h: &mut usize, w: &mut usize| -> Result<()> {
            if *h < 2 || *w < 2 {
                return Err(SwrError::Config(format!(
                    "pooling below 2x2 is impossible at {h}x{w}"
                )));
            }
            *h = (*h - 2) / 2 + 1;
            *w = (*w - 2) / 2 + 1;
            Ok(())
        };
        if self.pool_after_stem {
            pool(&mut h, &mut w)?;
        }
        for b in 1..=self.num_blocks() {
            if self.pool_after_blocks.contains(&b) {
                pool(&mut h, &mut w)?;
            }
        }
        Ok((h, w))
    }

    /// Channel count entering each block (stem output, then pointwise outs).
    fn block_in_channels(&self) -> Vec<usize> {
        let mut ins = Vec::with_capacity(self.num_blocks());
        let mut c = self.stem_channels;
        for &next in &self.block_channels {
            ins.push(c);
            c = next;
        }
        ins
    }

    pub fn feature_dim(&self) -> usize {
        *self.block_channels.last().expect("validated")
    }
}

#[derive(Clone, Debug)]
enum Node {
    Stem,
    Depthwise(usize),
    Pointwise(usize),
    BatchNorm(usize),
    Relu,
    Pool,
    GlobalAvgPool,
}

#[derive(Clone, Debug)]
pub struct BnLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub channels: usize,
}

impl BnLayer {
    fn new(channels: usize) -> BnLayer {
        BnLayer {
            gamma: Tensor::param(vec![1.0; channels], &[channels]).expect("gamma"),
            beta: Tensor::param(vec![0.0; channels], &[channels]).expect("beta"),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            channels,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    specs: Vec<LayerSpec>,
    graph: Vec<Node>,
    /// Eligible-layer weights, indexed by eligible_index - 1.
    weights: Vec<Tensor>,
    bn: Vec<BnLayer>,
    bn_mode: BnTransferMode,
    pub(crate) wrapped: bool,
}

/// Multiplies of a regular convolution over `positions` output sites.
pub fn conv_mults(cin: usize, cout: usize, kh: usize, kw: usize, positions: usize) -> u64 {
    (positions * kh * kw * cin * cout) as u64
}

/// Multiplies of a depthwise convolution over `positions` output sites.
pub fn depthwise_mults(channels: usize, kh: usize, kw: usize, positions: usize) -> u64 {
    (positions * kh * kw * channels) as u64
}

/// Multiplies of a 1x1 convolution over `positions` output sites.
pub fn pointwise_mults(cin: usize, cout: usize, positions: usize) -> u64 {
    (positions * cin * cout) as u64
}

/// Multiplies of a fully connected layer (bias adds no multiply).
pub fn linear_mults(in_features: usize, out_features: usize) -> u64 {
    (in_features * out_features) as u64
}

/// Build the backbone with seeded uniform init (bound 1/sqrt(fan_in)).
pub fn build_tiny_bcnet(config: &BackboneConfig, rng: &mut SwrRng) -> Result<Backbone> {
    config.validate()?;
    let mut specs = Vec::new();
    let mut graph = Vec::new();
    let mut weights = Vec::new();
    let mut bn = Vec::new();
    let mut eligible = 0usize;

    let mut push_conv = |name: String,
                         kind: LayerKind,
                         shape: Vec<usize>,
                         fan_in: usize,
                         specs: &mut Vec<LayerSpec>,
                         weights: &mut Vec<Tensor>,
                         rng: &mut SwrRng|
     -> usize {
        eligible += 1;
        let count = shape.iter().product();
        specs.push(LayerSpec {
            name,
            kind,
            weight_shape: shape.clone(),
            param_count: count,
            reparam_eligible: true,
            eligible_index: Some(eligible),
        });
        let bound = 1.0 / (fan_in as f32).sqrt();
        weights.push(Tensor::uniform_param(&shape, bound, &mut rng.split(eligible as u64)));
        eligible - 1
    };

    let mut push_bn = |name: String,
                       channels: usize,
                       specs: &mut Vec<LayerSpec>,
                       bn: &mut Vec<BnLayer>|
     -> usize {
        specs.push(LayerSpec {
            name,
            kind: LayerKind::BatchNorm,
            weight_shape: vec![2, channels],
            param_count: 2 * channels,
            reparam_eligible: false,
            eligible_index: None,
        });
        bn.push(BnLayer::new(channels));
        bn.len() - 1
    };

    let k = config.stem_kernel;
    push_conv(
        "stem".into(),
        LayerKind::RegularConv,
        vec![config.stem_channels, config.in_channels, k, k],
        config.in_channels * k * k,
        &mut specs,
        &mut weights,
        rng,
    );
    graph.push(Node::Stem);
    let b0 = push_bn("stem.bn".into(), config.stem_channels, &mut specs, &mut bn);
    graph.push(Node::BatchNorm(b0));
    graph.push(Node::Relu);
    if config.pool_after_stem {
        graph.push(Node::Pool);
    }

    let ins = config.block_in_channels();
    for (i, (&cin, &cout)) in ins.iter().zip(&config.block_channels).enumerate() {
        let blk = i + 1;
        let dw = push_conv(
            format!("block{blk}.dw"),
            LayerKind::DepthwiseConv,
            vec![cin, 3, 3],
            9,
            &mut specs,
            &mut weights,
            rng,
        );
        graph.push(Node::Depthwise(dw));
        let bdw = push_bn(format!("block{blk}.dw.bn"), cin, &mut specs, &mut bn);
        graph.push(Node::BatchNorm(bdw));
        graph.push(Node::Relu);

        let pw = push_conv(
            format!("block{blk}.pw"),
            LayerKind::PointwiseConv,
            vec![cout, cin],
            cin,
            &mut specs,
            &mut weights,
            rng,
        );
        graph.push(Node::Pointwise(pw));
        let bpw = push_bn(format!("block{blk}.pw.bn"), cout, &mut specs, &mut bn);
        graph.push(Node::BatchNorm(bpw));
        graph.push(Node::Relu);
        if config.pool_after_blocks.contains(&blk) {
            graph.push(Node::Pool);
        }
    }
    graph.push(Node::GlobalAvgPool);

    if eligible == 0 {
        return Err(SwrError::Config("configuration yields no eligible layers".into()));
    }

    Ok(Backbone {
        config: config.clone(),
        specs,
        graph,
        weights,
        bn,
        bn_mode: BnTransferMode::StatsOnly,
        wrapped: false,
    })
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Full layer table, convolutions and batch norms in forward order.
    pub fn layer_table(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Specs of eligible layers, in eligible order (1..=L).
    pub fn eligible_layers(&self) -> Vec<&LayerSpec> {
        let mut v: Vec<&LayerSpec> = self.specs.iter().filter(|s| s.reparam_eligible).collect();
        v.sort_by_key(|s| s.eligible_index);
        v
    }

    /// L: the number of reparametrizable layers.
    pub fn eligible_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, eligible_idx: usize) -> &Tensor {
        &self.weights[eligible_idx]
    }

    pub fn set_weight(&mut self, eligible_idx: usize, t: Tensor) {
        assert_eq!(t.shape(), self.weights[eligible_idx].shape(), "weight shape change");
        self.weights[eligible_idx] = t;
    }

    pub fn bn_layers(&self) -> &[BnLayer] {
        &self.bn
    }

    pub fn bn_layers_mut(&mut self) -> &mut Vec<BnLayer> {
        &mut self.bn
    }

    pub fn bn_mode(&self) -> BnTransferMode {
        self.bn_mode
    }

    /// Switch which batch-norm pieces count as task-specific. Affine scale
    /// and shift are trainable only in [`BnTransferMode::StatsAndAffine`].
    /// Values are untouched, so forward output does not change.
    pub fn set_bn_transfer_mode(&mut self, mode: BnTransferMode) {
        self.bn_mode = mode;
        for layer in &mut self.bn {
            let (gamma, beta) = match mode {
                BnTransferMode::StatsAndAffine => (layer.gamma.as_param(), layer.beta.as_param()),
                BnTransferMode::StatsOnly => (layer.gamma.detached(), layer.beta.detached()),
            };
            layer.gamma = gamma;
            layer.beta = beta;
        }
    }

    /// Make every convolution weight trainable (true) or frozen (false).
    pub fn set_weights_trainable(&mut self, trainable: bool) {
        for w in &mut self.weights {
            *w = if trainable { w.as_param() } else { w.detached() };
        }
    }

    /// Forward to pooled features [batch, feature_dim]. Train mode updates
    /// batch-norm running statistics in place.
    pub fn forward_features(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
        override_weights: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        let (y, updates) = self.forward_impl(tape, x, mode, override_weights)?;
        for (bn_idx, mean, var) in updates {
            let layer = &mut self.bn[bn_idx];
            for c in 0..layer.channels {
                layer.running_mean[c] =
                    (1.0 - BN_MOMENTUM) * layer.running_mean[c] + BN_MOMENTUM * mean[c];
                layer.running_var[c] =
                    (1.0 - BN_MOMENTUM) * layer.running_var[c] + BN_MOMENTUM * var[c];
            }
        }
        Ok(y)
    }

    /// Eval-mode forward without any state mutation; safe to call from
    /// multiple threads on a shared reference.
    pub fn forward_features_shared(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        override_weights: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        let (y, updates) = self.forward_impl(tape, x, Mode::Eval, override_weights)?;
        debug_assert!(updates.is_empty());
        Ok(y)
    }

    #[allow(clippy::type_complexity)]
    fn forward_impl(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
        override_weights: Option<&[Tensor]>,
    ) -> Result<(Tensor, Vec<(usize, Vec<f32>, Vec<f32>)>)> {
        if x.shape().len() != 4
            || x.shape()[1] != self.config.in_channels
            || x.shape()[2] != self.config.freq_bins
            || x.shape()[3] != self.config.time_steps
        {
            return Err(SwrError::shape(
                "backbone",
                format!(
                    "input {:?} vs configured [batch, {}, {}, {}]",
                    x.shape(),
                    self.config.in_channels,
                    self.config.freq_bins,
                    self.config.time_steps
                ),
            ));
        }
        if let Some(ws) = override_weights {
            if ws.len() != self.weights.len() {
                return Err(SwrError::shape(
                    "backbone",
                    format!("{} override weights vs {} eligible layers", ws.len(), self.weights.len()),
                ));
            }
        }
        let weight_at = |idx: usize| -> &Tensor {
            match override_weights {
                Some(ws) => &ws[idx],
                None => &self.weights[idx],
            }
        };
        let pad = self.config.stem_kernel / 2;
        let mut updates = Vec::new();
        let mut cur = x.clone();
        for node in &self.graph {
            cur = match node {
                Node::Stem => ops::conv2d(tape, &cur, weight_at(0), 1, pad)?,
                Node::Depthwise(i) => ops::depthwise_conv2d(tape, &cur, weight_at(*i), 1, 1)?,
                Node::Pointwise(i) => ops::pointwise_conv2d(tape, &cur, weight_at(*i))?,
                Node::BatchNorm(b) => {
                    let layer = &self.bn[*b];
                    match mode {
                        Mode::Train => {
                            let (y, mean, var) = ops::batch_norm_train(
                                tape, &cur, &layer.gamma, &layer.beta, BN_EPS,
                            )?;
                            updates.push((*b, mean, var));
                            y
                        }
                        Mode::Eval => ops::batch_norm_eval(
                            tape,
                            &cur,
                            &layer.gamma,
                            &layer.beta,
                            &layer.running_mean,
                            &layer.running_var,
                            BN_EPS,
                        )?,
                    }
                }
                Node::Relu => ops::relu(tape, &cur)?,
                Node::Pool => ops::avg_pool2d(tape, &cur, 2, 2)?,
                Node::GlobalAvgPool => ops::global_avg_pool(tape, &cur)?,
            };
        }
        Ok((cur, updates))
    }

    /// Exact multiply count of one forward pass over a single example.
    /// Convolutions and linear layers multiply; batch norm folds into the
    /// preceding convolution at deployment and pooling only adds.
    pub fn count_mults(&self) -> u64 {
        let (mut h, mut w) = (self.config.freq_bins, self.config.time_steps);
        let mut total = 0u64;
        for node in &self.graph {
            match node {
                Node::Stem => {
                    let k = self.config.stem_kernel;
                    total += conv_mults(
                        self.config.in_channels,
                        self.config.stem_channels,
                        k,
                        k,
                        h * w,
                    );
                }
                Node::Depthwise(i) => {
                    let c = self.weights[*i].shape()[0];
                    total += depthwise_mults(c, 3, 3, h * w);
                }
                Node::Pointwise(i) => {
                    let (cout, cin) = (self.weights[*i].shape()[0], self.weights[*i].shape()[1]);
                    total += pointwise_mults(cin, cout, h * w);
                }
                Node::Pool => {
                    h = (h - 2) / 2 + 1;
                    w = (w - 2) / 2 + 1;
                }
                Node::BatchNorm(_) | Node::Relu | Node::GlobalAvgPool => {}
            }
        }
        total
    }

    /// Parameters of eligible layers only: the denominator of the
    /// layer-weighted budget.
    pub fn eligible_param_total(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.reparam_eligible)
            .map(|s| s.param_count)
            .sum()
    }

    /// Every stored number of the backbone: convolution weights, batch-norm
    /// affine parameters, and batch-norm running statistics. This is the
    /// base size against which multi-task storage ratios are reported.
    pub fn stored_count(&self) -> usize {
        let affine_and_stats: usize = self.bn.iter().map(|b| 4 * b.channels).sum();
        self.eligible_param_total() + affine_and_stats
    }

    pub fn bn_stat_count(&self) -> usize {
        self.bn.iter().map(|b| 2 * b.channels).sum()
    }

    pub fn bn_affine_count(&self) -> usize {
        self.bn.iter().map(|b| 2 * b.channels).sum()
    }
}

/// Per-task linear classifier g.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
    pub classes: usize,
}

impl ClassifierHead {
    /// Seeded init: small uniform weight, zero bias.
    pub fn new(features: usize, classes: usize, rng: &mut SwrRng) -> ClassifierHead {
        let bound = 1.0 / (features as f32).sqrt();
        ClassifierHead {
            weight: Tensor::uniform_param(&[features, classes], bound, rng),
            bias: Tensor::param(vec![0.0; classes], &[classes]).expect("bias"),
            classes,
        }
    }

    /// All-zero head; logits are identically zero regardless of features.
    pub fn zeros(features: usize, classes: usize) -> ClassifierHead {
        ClassifierHead {
            weight: Tensor::zeros_param(&[features, classes]),
            bias: Tensor::zeros_param(&[classes]),
            classes,
        }
    }

    pub fn logits(&self, tape: &mut Tape, features: &Tensor) -> Result<Tensor> {
        let y = ops::matmul(tape, features, &self.weight)?;
        ops::add_bias(tape, &y, &self.bias)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn mult_count(&self) -> u64 {
        linear_mults(self.weight.shape()[0], self.weight.shape()[1])
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        if trainable {
            self.weight = self.weight.as_param();
            self.bias = self.bias.as_param();
        } else {
            self.weight = self.weight.detached();
            self.bias = self.bias.detached();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_backbone() -> Backbone {
        build_tiny_bcnet(&BackboneConfig::default(), &mut SwrRng::seed(3)).unwrap()
    }

    #[test]
    fn default_registry_shape() {
        let bb = default_backbone();
        let eligible = bb.eligible_layers();
        let l = eligible.len();
        assert!((12..=24).contains(&l), "L = {l}");
        assert_eq!(bb.eligible_count(), l);
        for (i, spec) in eligible.iter().enumerate() {
            assert_eq!(spec.eligible_index, Some(i + 1));
            assert!(matches!(
                spec.kind,
                LayerKind::RegularConv | LayerKind::DepthwiseConv | LayerKind::PointwiseConv
            ));
        }
        let regs = eligible.iter().filter(|s| s.kind == LayerKind::RegularConv).count();
        let dws = eligible.iter().filter(|s| s.kind == LayerKind::DepthwiseConv).count();
        let pws = eligible.iter().filter(|s| s.kind == LayerKind::PointwiseConv).count();
        assert!(regs >= 1 && dws >= 4 && pws >= 4, "{regs}/{dws}/{pws}");
        // Batch norms are in the table but never eligible.
        assert!(bb
            .layer_table()
            .iter()
            .filter(|s| s.kind == LayerKind::BatchNorm)
            .all(|s| !s.reparam_eligible));
    }

    #[test]
    fn depthwise_param_count_is_channels_times_kernel() {
        let bb = default_backbone();
        for spec in bb.eligible_layers() {
            if spec.kind == LayerKind::DepthwiseConv {
                let c = spec.weight_shape[0];
                assert_eq!(spec.param_count, c * 3 * 3);
            }
        }
    }

    #[test]
    fn default_parameter_total_matches_hand_count() {
        // Summed layer by layer from the default configuration:
        //   stem 5*5*1*8, then per block [dw C*3*3, pw Cin*Cout] with
        //   channels 8 ->16 ->16 ->24 ->24 ->32 ->32.
        let hand: usize = 5 * 5 * 8
            + (8 * 9 + 8 * 16)
            + (16 * 9 + 16 * 16)
            + (16 * 9 + 16 * 24)
            + (24 * 9 + 24 * 24)
            + (24 * 9 + 24 * 32)
            + (32 * 9 + 32 * 32);
        assert_eq!(hand, 4416);
        let bb = default_backbone();
        assert_eq!(bb.eligible_param_total(), hand);
        assert!(bb.eligible_param_total() <= 50_000);
        // Stored numbers add 2*C affine + 2*C stats over BN channels
        // 8 + (8+16) + (16+16) + (16+24) + (24+24) + (24+32) + (32+32) = 272.
        assert_eq!(bb.bn_stat_count(), 2 * 272);
        assert_eq!(bb.stored_count(), 4416 + 4 * 272);
    }

    #[test]
    fn default_mult_total_matches_hand_count() {
        // 16x32 stem, pools after stem, block2, block4:
        //   stem:    512 * 25 * 1 * 8            = 102400
        //   b1 dw:   128 * 9 * 8                 = 9216
        //   b1 pw:   128 * 8 * 16                = 16384
        //   b2 dw:   128 * 9 * 16                = 18432
        //   b2 pw:   128 * 16 * 16               = 32768
        //   b3 dw:   32 * 9 * 16                 = 4608
        //   b3 pw:   32 * 16 * 24                = 12288
        //   b4 dw:   32 * 9 * 24                 = 6912
        //   b4 pw:   32 * 24 * 24                = 18432
        //   b5 dw:   8 * 9 * 24                  = 1728
        //   b5 pw:   8 * 24 * 32                 = 6144
        //   b6 dw:   8 * 9 * 32                  = 2304
        //   b6 pw:   8 * 32 * 32                 = 8192
        let hand: u64 = 102_400
            + 9216 + 16_384
            + 18_432 + 32_768
            + 4608 + 12_288
            + 6912 + 18_432
            + 1728 + 6144
            + 2304 + 8192;
        assert_eq!(hand, 239_808);
        assert_eq!(default_backbone().count_mults(), hand);
    }

    #[test]
    fn mult_helper_formulas() {
        // 1x1 conv with Cin=2, Cout=3 over a 4x4 map.
        assert_eq!(pointwise_mults(2, 3, 16), 96);
        assert_eq!(linear_mults(10, 12), 120);
        assert_eq!(depthwise_mults(8, 3, 3, 10), 720);
        assert_eq!(conv_mults(2, 4, 3, 3, 5), 360);
    }

    #[test]
    fn eval_forward_is_pure_and_deterministic() {
        let bb = default_backbone();
        let mut rng = SwrRng::seed(11);
        let x = Tensor::new(
            (0..2 * 16 * 32).map(|_| rng.normal()).collect(),
            &[2, 1, 16, 32],
        )
        .unwrap();
        let stats_before: Vec<f32> = bb.bn_layers()[0].running_mean.clone();
        let a = bb.forward_features_shared(&mut Tape::inference(), &x, None).unwrap();
        let b = bb.forward_features_shared(&mut Tape::inference(), &x, None).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(bb.bn_layers()[0].running_mean, stats_before);
        assert_eq!(a.shape(), &[2, bb.config().feature_dim()]);
    }

    #[test]
    fn train_forward_moves_running_mean_toward_batch_mean() {
        let mut bb = default_backbone();
        let x = Tensor::full(&[4, 1, 16, 32], 2.0);
        assert_eq!(bb.bn_layers()[0].running_mean[0], 0.0);
        bb.forward_features(&mut Tape::inference(), &x, Mode::Train, None).unwrap();
        // Stem output of a constant input is constant per channel; the
        // running mean moves from 0 toward that value by the momentum.
        let mean0 = bb.bn_layers()[0].running_mean[0];
        assert!(mean0 != 0.0);
        let mut tape = Tape::inference();
        let stem_out = ops::conv2d(&mut tape, &x, bb.weight(0), 1, 2).unwrap();
        let batch_mean: f32 =
            stem_out.data()[..16 * 32].iter().sum::<f32>() / (16.0 * 32.0);
        // One update with momentum 0.1 from an initial 0.
        let per_batch =
            stem_out.data().chunks(16 * 32).step_by(8).count() as f32;
        let _ = per_batch;
        assert!((mean0 - 0.1 * batch_mean).abs() < 0.05 * batch_mean.abs() + 1e-5);
    }

    #[test]
    fn zero_head_gives_equal_logits() {
        let bb = default_backbone();
        let mut rng = SwrRng::seed(5);
        let x = Tensor::new(
            (0..16 * 32).map(|_| rng.normal()).collect(),
            &[1, 1, 16, 32],
        )
        .unwrap();
        let head = ClassifierHead::zeros(bb.config().feature_dim(), 12);
        let mut tape = Tape::inference();
        let f = bb.forward_features_shared(&mut tape, &x, None).unwrap();
        let logits = head.logits(&mut tape, &f).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn registry_identical_across_instances() {
        let a = build_tiny_bcnet(&BackboneConfig::default(), &mut SwrRng::seed(1)).unwrap();
        let b = build_tiny_bcnet(&BackboneConfig::default(), &mut SwrRng::seed(2)).unwrap();
        let fmt = |bb: &Backbone| {
            bb.layer_table()
                .iter()
                .map(|s| format!("{}|{}|{:?}|{}|{:?}", s.name, s.kind, s.weight_shape, s.reparam_eligible, s.eligible_index))
                .collect::<Vec<_>>()
        };
        assert_eq!(fmt(&a), fmt(&b));
    }

    #[test]
    fn bn_mode_toggle_does_not_change_forward() {
        let mut bb = default_backbone();
        let mut rng = SwrRng::seed(17);
        let x = Tensor::new(
            (0..16 * 32).map(|_| rng.normal()).collect(),
            &[1, 1, 16, 32],
        )
        .unwrap();
        let before = bb.forward_features_shared(&mut Tape::inference(), &x, None).unwrap();
        bb.set_bn_transfer_mode(BnTransferMode::StatsAndAffine);
        let after = bb.forward_features_shared(&mut Tape::inference(), &x, None).unwrap();
        assert!(before.bitwise_eq(&after));
        assert!(bb.bn_layers().iter().all(|l| l.gamma.requires_grad()));
        bb.set_bn_transfer_mode(BnTransferMode::StatsOnly);
        assert!(bb.bn_layers().iter().all(|l| !l.gamma.requires_grad()));
    }

    #[test]
    fn bad_config_rejected() {
        let mut cfg = BackboneConfig { block_channels: vec![8], ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg.block_channels = vec![8, 0];
        assert!(cfg.validate().is_err());
        // Too many pools for the spatial extent.
        let cfg = BackboneConfig {
            freq_bins: 4,
            pool_after_blocks: vec![1, 2, 3, 4, 5, 6],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mismatched_input_shape_is_an_error() {
        let bb = default_backbone();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        let err = bb.forward_features_shared(&mut Tape::inference(), &x, None).unwrap_err();
        assert!(matches!(err, SwrError::ShapeMismatch { .. }));
    }
}
