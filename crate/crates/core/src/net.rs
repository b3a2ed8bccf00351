//! Fully-convolutional material network with configurable context injection.
//!
//! Layout (input H×W):
//!
//! ```text
//! conv1 → relu → pool1 (H/2) → conv2 → relu → pool2 (H/4)
//!   → conv3_3 (dilated) → relu → conv4_3 (dilated) → relu
//!   → up1 (×2) → relu → up2 (×2) → relu  [= "upsampling", H]
//!   → [skip: concat input] → head 1×1 → relu → final 1×1 → softmax
//! ```
//!
//! Context channels are concatenated after the layer named by
//! `injection_layer`, pooled down to that layer's extent.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{self, ContextSource};
use crate::error::{Error, Result};
use crate::gradcheck::{GradCheck, GradReport};
use crate::graph::{Feeds, Graph, NodeId, Op};
use crate::io::container::TensorContainer;
use crate::maps::{LabelMap, PredictionMap};
use crate::ops::ConvParams;
use crate::tensor::Tensor;

/// Total spatial downsampling of the encoder.
pub const DOWNSAMPLING: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InjectionLayer {
    #[serde(rename = "pool1")]
    Pool1,
    #[serde(rename = "pool2")]
    Pool2,
    #[serde(rename = "conv3_3")]
    Conv3_3,
    #[serde(rename = "conv4_3")]
    Conv4_3,
    #[serde(rename = "upsampling")]
    Upsampling,
}

impl InjectionLayer {
    pub const ALL: [InjectionLayer; 5] = [
        InjectionLayer::Pool1,
        InjectionLayer::Pool2,
        InjectionLayer::Conv3_3,
        InjectionLayer::Conv4_3,
        InjectionLayer::Upsampling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InjectionLayer::Pool1 => "pool1",
            InjectionLayer::Pool2 => "pool2",
            InjectionLayer::Conv3_3 => "conv3_3",
            InjectionLayer::Conv4_3 => "conv4_3",
            InjectionLayer::Upsampling => "upsampling",
        }
    }

    /// Spatial downsampling of the feature map at this layer.
    pub fn scale(self) -> usize {
        match self {
            InjectionLayer::Pool1 => 2,
            InjectionLayer::Upsampling => 1,
            _ => 4,
        }
    }
}

impl fmt::Display for InjectionLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InjectionLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InjectionLayer::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::UnknownLayer {
                name: s.to_string(),
                valid: InjectionLayer::ALL.map(|l| l.name()).join(", "),
            })
    }
}

/// How context maps are brought down to a coarser injection layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPooling {
    #[default]
    Average,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub num_materials: usize,
    pub input_channels: usize,
    /// conv1, conv2, conv3_3, conv4_3 widths.
    pub stage_widths: Vec<usize>,
    pub dilation_rates: Vec<usize>,
    pub injection_layer: InjectionLayer,
    /// 0 disables context.
    pub context_channels: usize,
    pub skip_connection: bool,
    /// Pass the skipped input through a learned 1×1 conv instead of
    /// concatenating raw pixels.
    pub skip_transform: bool,
    pub upsample_kernel: usize,
    /// Width of the 1×1 layer between fusion and the classifier; 0 feeds the
    /// fused features straight to the classifier.
    pub head_width: usize,
    pub context_pooling: ContextPooling,
    pub patch_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_materials: 16,
            input_channels: 3,
            stage_widths: vec![16, 32, 32, 32],
            dilation_rates: vec![2, 4],
            injection_layer: InjectionLayer::Upsampling,
            context_channels: 0,
            skip_connection: true,
            skip_transform: false,
            upsample_kernel: 2,
            head_width: 16,
            context_pooling: ContextPooling::Average,
            patch_size: 48,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_materials < 2 {
            return Err(Error::invalid("num_materials must be >= 2"));
        }
        if self.input_channels == 0 {
            return Err(Error::invalid("input_channels must be >= 1"));
        }
        if self.stage_widths.len() != 4 || self.stage_widths.contains(&0) {
            return Err(Error::invalid("stage_widths needs four positive widths"));
        }
        if self.dilation_rates.len() != 2 || self.dilation_rates.contains(&0) {
            return Err(Error::invalid("dilation_rates needs two positive rates"));
        }
        if self.upsample_kernel < 2 || self.upsample_kernel % 2 != 0 {
            return Err(Error::invalid(format!(
                "upsample_kernel {} must be even and >= 2",
                self.upsample_kernel
            )));
        }
        if self.patch_size == 0 || self.patch_size % DOWNSAMPLING != 0 {
            return Err(Error::invalid(format!(
                "patch_size {} must be a positive multiple of {DOWNSAMPLING}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Node ids a caller needs to feed and read the network.
#[derive(Debug, Clone, Copy)]
pub struct NetNodes {
    pub image: NodeId,
    pub context: Option<NodeId>,
    /// The concat that adds context, when context is enabled.
    pub inject: Option<NodeId>,
    pub logits: NodeId,
    pub probs: NodeId,
    pub labels: NodeId,
    pub loss: NodeId,
}

#[derive(Debug, Clone)]
pub struct MaterialNet {
    config: NetworkConfig,
    graph: Graph,
    nodes: NetNodes,
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Bilinear interpolation kernel for a learnable ×`stride` upsampler,
/// mapping input channel `c` to output channel `c % out`.
pub fn bilinear_kernel(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Tensor {
    let taps: Vec<f64> = if kernel <= stride {
        vec![1.0; kernel]
    } else {
        let factor = kernel.div_ceil(2) as f64;
        let center = if kernel % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
        (0..kernel).map(|i| 1.0 - (i as f64 - center).abs() / factor).collect()
    };
    let mut t = Tensor::zeros(&[in_ch, out_ch, kernel, kernel]);
    let data = t.data_mut();
    for c in 0..in_ch {
        let k = c % out_ch;
        for y in 0..kernel {
            for x in 0..kernel {
                data[((c * out_ch + k) * kernel + y) * kernel + x] = taps[y] * taps[x];
            }
        }
    }
    t
}

struct Builder<'a> {
    graph: Graph,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, x: NodeId, name: &str, in_ch: usize, out_ch: usize, k: usize, p: ConvParams) -> Result<NodeId> {
        let w = he_uniform(&[out_ch, in_ch, k, k], in_ch * k * k, self.rng);
        let w = self.graph.parameter(&format!("{name}.weight"), w, true)?;
        let b = self.graph.parameter(&format!("{name}.bias"), Tensor::zeros(&[out_ch]), true)?;
        self.graph.conv2d(x, w, b, p, name)
    }

    fn up(&mut self, x: NodeId, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<NodeId> {
        let w = bilinear_kernel(in_ch, out_ch, kernel, 2);
        let w = self.graph.parameter(&format!("{name}.weight"), w, true)?;
        let mut y = self.graph.conv_transpose2d(x, w, 2, name)?;
        if kernel > 2 {
            y = self
                .graph
                .unary(Op::Crop { border: (kernel - 2) / 2 }, y, &format!("{name}_crop"))?;
        }
        Ok(y)
    }

    fn relu(&mut self, x: NodeId, label: &str) -> Result<NodeId> {
        self.graph.unary(Op::Relu, x, label)
    }
}

/// Builds the network graph with weights drawn from `seed`.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<MaterialNet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        graph: Graph::new(),
        rng: &mut rng,
    };
    let [c1, c2, c3, c4] = [0, 1, 2, 3].map(|i| config.stage_widths[i]);
    let ctx = config.context_channels;
    let image = b.graph.input("image");
    let context = (ctx > 0).then(|| b.graph.input("context"));
    let mut inject = None;

    // Concatenates (pooled) context after `layer` and returns the new node
    // plus the added channel count.
    let mut maybe_inject = |b: &mut Builder, x: NodeId, layer: InjectionLayer| -> Result<(NodeId, usize)> {
        let Some(ctx_node) = context else { return Ok((x, 0)) };
        if config.injection_layer != layer {
            return Ok((x, 0));
        }
        let scale = layer.scale();
        let pooled = if scale == 1 {
            ctx_node
        } else {
            let op = match config.context_pooling {
                ContextPooling::Average => Op::AvgPool { factor: scale },
                ContextPooling::Nearest => Op::Subsample { factor: scale },
            };
            b.graph.unary(op, ctx_node, "context_pool")?
        };
        let node = b.graph.binary(Op::Concat, x, pooled, "inject")?;
        inject = Some(node);
        Ok((node, ctx))
    };

    let x = b.conv(image, "conv1", config.input_channels, c1, 3, ConvParams::dilated(1))?;
    let x = b.relu(x, "relu1")?;
    let x = b.graph.unary(Op::MaxPool2, x, "pool1")?;
    let (x, extra) = maybe_inject(&mut b, x, InjectionLayer::Pool1)?;
    let x = b.conv(x, "conv2", c1 + extra, c2, 3, ConvParams::dilated(1))?;
    let x = b.relu(x, "relu2")?;
    let x = b.graph.unary(Op::MaxPool2, x, "pool2")?;
    let (x, extra) = maybe_inject(&mut b, x, InjectionLayer::Pool2)?;
    let x = b.conv(x, "conv3_3", c2 + extra, c3, 3, ConvParams::dilated(config.dilation_rates[0]))?;
    let x = b.relu(x, "relu3")?;
    let (x, extra) = maybe_inject(&mut b, x, InjectionLayer::Conv3_3)?;
    let x = b.conv(x, "conv4_3", c3 + extra, c4, 3, ConvParams::dilated(config.dilation_rates[1]))?;
    let x = b.relu(x, "relu4")?;
    let (x, extra) = maybe_inject(&mut b, x, InjectionLayer::Conv4_3)?;
    let x = b.up(x, "up1", c4 + extra, c2, config.upsample_kernel)?;
    let x = b.relu(x, "up1_relu")?;
    let x = b.up(x, "up2", c2, c1, config.upsample_kernel)?;
    let x = b.relu(x, "upsampling")?;
    let (mut x, extra) = maybe_inject(&mut b, x, InjectionLayer::Upsampling)?;
    let mut width = c1 + extra;

    if config.skip_connection {
        let skip = if config.skip_transform {
            let s = b.conv(image, "skip", config.input_channels, config.input_channels, 1, ConvParams::default())?;
            b.relu(s, "skip_relu")?
        } else {
            image
        };
        x = b.graph.binary(Op::Concat, x, skip, "skip")?;
        width += config.input_channels;
    }
    if config.head_width > 0 {
        x = b.conv(x, "head", width, config.head_width, 1, ConvParams::default())?;
        x = b.relu(x, "head_relu")?;
        width = config.head_width;
    }
    let logits = b.conv(x, "final", width, config.num_materials, 1, ConvParams::default())?;
    let probs = b.graph.unary(Op::Softmax, logits, "probs")?;
    let labels = b.graph.input("labels");
    let loss = b.graph.binary(Op::MaskedCrossEntropy, logits, labels, "loss")?;

    Ok(MaterialNet {
        config: config.clone(),
        graph: b.graph,
        nodes: NetNodes {
            image,
            context,
            inject,
            logits,
            probs,
            labels,
            loss,
        },
    })
}

/// Inputs for one example: C×H×W image, optional C×H×W context, labels.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Tensor,
    pub context: Option<Tensor>,
    pub labels: LabelMap,
}

impl MaterialNet {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn nodes(&self) -> NetNodes {
        self.nodes
    }

    /// Checks image/context extents and channel counts against the config.
    fn check_inputs(&self, image: &Tensor, context: Option<&Tensor>) -> Result<(usize, usize)> {
        let (c, h, w) = image.dims3()?;
        if c != self.config.input_channels {
            return Err(Error::shape(format!(
                "image has {c} channels, network expects {}",
                self.config.input_channels
            )));
        }
        if h % DOWNSAMPLING != 0 || w % DOWNSAMPLING != 0 {
            return Err(Error::shape(format!(
                "image extent {h}×{w} is not divisible by {DOWNSAMPLING}"
            )));
        }
        match (self.config.context_channels, context) {
            (0, None) => {}
            (0, Some(_)) => return Err(Error::invalid("network was built without context but context was supplied")),
            (_, None) => return Err(Error::invalid("network needs context but none was supplied")),
            (n, Some(ctx)) => {
                let (cc, ch, cw) = ctx.dims3()?;
                if cc != n {
                    return Err(Error::shape(format!("context has {cc} channels, network expects {n}")));
                }
                if (ch, cw) != (h, w) {
                    return Err(Error::shape(format!(
                        "context extent {ch}×{cw} differs from image {h}×{w}"
                    )));
                }
            }
        }
        Ok((h, w))
    }

    fn feeds(&self, image: &Tensor, context: Option<&Tensor>, labels: Option<&LabelMap>) -> Result<Feeds> {
        self.check_inputs(image, context)?;
        let mut feeds = Feeds::new();
        feeds.insert("image".into(), image.clone().unsqueeze0());
        if let Some(ctx) = context {
            feeds.insert("context".into(), ctx.clone().unsqueeze0());
        }
        if let Some(l) = labels {
            let (_, h, w) = image.dims3()?;
            if (l.height(), l.width()) != (h, w) {
                return Err(Error::shape(format!(
                    "labels {}×{} do not match image {h}×{w}",
                    l.height(),
                    l.width()
                )));
            }
            feeds.insert("labels".into(), l.to_tensor());
        }
        Ok(feeds)
    }

    /// Per-pixel class probabilities for an image and its assembled context
    /// tensor.
    pub fn predict_tensor(&self, image: &Tensor, context: Option<&Tensor>) -> Result<PredictionMap> {
        let feeds = self.feeds(image, context, None)?;
        let eval = self.graph.forward_until(&feeds, self.nodes.probs)?;
        PredictionMap::from_probs(eval.into_value(self.nodes.probs))
    }

    /// Dense prediction from an image and its context sources; scene-wide
    /// sources are broadcast and all sources are stacked in order.
    pub fn predict(&self, image: &Tensor, context: &[ContextSource]) -> Result<PredictionMap> {
        let (_, h, w) = image.dims3()?;
        let ctx = context::assemble(context, h, w)?;
        self.predict_tensor(image, ctx.as_ref())
    }

    /// Masked loss and gradients for every trainable parameter.
    pub fn loss_and_gradients(
        &self,
        example: &Example,
    ) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
        let feeds = self.feeds(&example.image, example.context.as_ref(), Some(&example.labels))?;
        let eval = self.graph.forward(&feeds)?;
        let loss = eval.value(self.nodes.loss).item();
        let grads = self.graph.backward(&eval, self.nodes.loss)?;
        Ok((loss, grads.into_params()))
    }

    pub fn loss(&self, example: &Example) -> Result<f64> {
        let feeds = self.feeds(&example.image, example.context.as_ref(), Some(&example.labels))?;
        self.graph.eval_scalar(&feeds, self.nodes.loss)
    }

    /// Sets the classifier weights and bias to zero, making every output
    /// uniform.
    pub fn zero_classifier(&mut self) {
        for name in ["final.weight", "final.bias"] {
            let p = self.graph.param_mut(name).expect("classifier exists");
            p.data_mut().fill(0.0);
        }
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        for (name, p) in self.graph.params() {
            c.push(name.clone(), p.value.clone());
        }
        c.network_config = Some(serde_json::to_value(&self.config)?);
        Ok(c)
    }

    pub fn from_container(container: &TensorContainer) -> Result<Self> {
        let config: NetworkConfig = match &container.network_config {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::invalid("checkpoint has no network config")),
        };
        let mut net = build_network(&config, 0)?;
        let expected: Vec<String> = net.graph.params().keys().cloned().collect();
        for name in &expected {
            let t = container
                .get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing parameter `{name}`")))?;
            net.graph.set_param(name, t.clone())?;
        }
        if container.entries().len() != expected.len() {
            return Err(Error::invalid("checkpoint holds parameters the network does not have"));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&TensorContainer::read(path)?)
    }

    /// Finite-difference check of every parameter gradient of the masked loss
    /// on one example.
    pub fn gradcheck(&self, example: &Example, check: &GradCheck) -> Result<Vec<GradReport>> {
        let feeds = self.feeds(&example.image, example.context.as_ref(), Some(&example.labels))?;
        check.run(&self.graph, &feeds, self.nodes.loss)
    }

    /// Random jitter helper for tests that need a non-degenerate classifier.
    pub fn perturb_params(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = self.graph.trainable_names().map(str::to_string).collect();
        for name in names {
            for v in self.graph.param_mut(&name).unwrap().data_mut() {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }
}
