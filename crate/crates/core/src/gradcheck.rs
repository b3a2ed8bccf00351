//! Central finite-difference checks of [`Graph::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Feeds, Graph, NodeId, Op};
use crate::maps::LabelMap;
use crate::net::{build_network, Example, InjectionLayer, NetworkConfig};
use crate::ops::{ConvParams, UNLABELED_F64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub op: String,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude seen.
    pub max_abs_grad: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    fn new(op: impl Into<String>, max_rel_error: f64, tolerance: f64) -> Self {
        GradReport {
            op: op.into(),
            max_rel_error,
            max_abs_grad: 0.0,
            tolerance,
            passed: max_rel_error <= tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Added to every analytic gradient entry; only used to prove the
    /// checker catches wrong gradients.
    pub fault: Option<f64>,
}

impl GradCheck {
    pub fn new(epsilon: f64, tolerance: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1e-2) {
            return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 1e-2]")));
        }
        Ok(GradCheck {
            epsilon,
            tolerance,
            fault: None,
        })
    }

    pub fn with_fault(mut self, offset: f64) -> Self {
        self.fault = Some(offset);
        self
    }

    /// One report per trainable parameter, named after the parameter.
    pub fn run(&self, graph: &Graph, feeds: &Feeds, loss: NodeId) -> Result<Vec<GradReport>> {
        let eval = graph.forward(feeds)?;
        let analytic = graph.backward(&eval, loss)?;
        let mut probe = graph.clone();
        let mut reports = Vec::new();
        for name in graph.trainable_names() {
            let grad = analytic.param(name).expect("backward covers every trainable parameter");
            let mut worst = 0.0f64;
            for i in 0..grad.len() {
                let orig = probe.param(name).unwrap().data()[i];
                probe.param_mut(name).unwrap().data_mut()[i] = orig + self.epsilon;
                let plus = probe.eval_scalar(feeds, loss)?;
                probe.param_mut(name).unwrap().data_mut()[i] = orig - self.epsilon;
                let minus = probe.eval_scalar(feeds, loss)?;
                probe.param_mut(name).unwrap().data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.epsilon);
                let a = grad.data()[i] + self.fault.unwrap_or(0.0);
                worst = worst.max(relative_error(a, numeric));
            }
            let mut report = GradReport::new(name, worst, self.tolerance);
            report.max_abs_grad = grad.max_abs();
            reports.push(report);
        }
        Ok(reports)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn gradcheck(graph: &Graph, feeds: &Feeds, loss: NodeId, epsilon: f64, tolerance: f64) -> Result<Vec<GradReport>> {
    GradCheck::new(epsilon, tolerance)?.run(graph, feeds, loss)
}

/// Builds one micro-graph per differentiable op, with every op input held as
/// a trainable parameter, and checks all of them. Reports are named
/// `<op>/<input>`.
pub fn op_suite(seed: u64, epsilon: f64, tolerance: f64) -> Result<Vec<GradReport>> {
    let check = GradCheck::new(epsilon, tolerance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut run = |name: &str, build: &dyn Fn(&mut Graph, &mut ChaCha8Rng) -> Result<(NodeId, Feeds)>| -> Result<()> {
        let mut g = Graph::new();
        let (loss, feeds) = build(&mut g, &mut rng)?;
        for mut r in check.run(&g, &feeds, loss)? {
            r.op = format!("{name}/{}", r.op);
            reports.push(r);
        }
        Ok(())
    };

    fn param(g: &mut Graph, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> Result<NodeId> {
        g.parameter(name, Tensor::uniform(shape, -1.0, 1.0, rng), true)
    }

    /// Attaches `sum(y * r)` for a fixed random `r` shaped like `y`.
    fn project(g: &mut Graph, rng: &mut ChaCha8Rng, y: NodeId, shape: &[usize]) -> Result<(NodeId, Feeds)> {
        let r = g.input("r");
        let loss = g.binary(Op::WeightedSum, y, r, "loss")?;
        Ok((loss, Feeds::from([("r".to_string(), Tensor::uniform(shape, -1.0, 1.0, rng))])))
    }

    run("conv2d", &|g, rng| {
        let x = param(g, rng, "x", &[1, 2, 6, 6])?;
        let w = param(g, rng, "w", &[3, 2, 3, 3])?;
        let b = param(g, rng, "b", &[3])?;
        let y = g.conv2d(x, w, b, ConvParams::dilated(2), "y")?;
        project(g, rng, y, &[1, 3, 6, 6])
    })?;
    run("conv2d_strided", &|g, rng| {
        let x = param(g, rng, "x", &[2, 2, 5, 5])?;
        let w = param(g, rng, "w", &[2, 2, 3, 3])?;
        let b = param(g, rng, "b", &[2])?;
        let y = g.conv2d(x, w, b, ConvParams { stride: 2, dilation: 1, padding: 1 }, "y")?;
        project(g, rng, y, &[2, 2, 3, 3])
    })?;
    run("conv_transpose2d", &|g, rng| {
        let x = param(g, rng, "x", &[1, 3, 3, 3])?;
        let w = param(g, rng, "w", &[3, 2, 2, 2])?;
        let y = g.conv_transpose2d(x, w, 2, "y")?;
        project(g, rng, y, &[1, 2, 6, 6])
    })?;
    run("crop", &|g, rng| {
        let x = param(g, rng, "x", &[1, 2, 6, 6])?;
        let y = g.unary(Op::Crop { border: 1 }, x, "y")?;
        project(g, rng, y, &[1, 2, 4, 4])
    })?;
    run("maxpool2", &|g, rng| {
        let x = param(g, rng, "x", &[1, 3, 4, 4])?;
        let y = g.unary(Op::MaxPool2, x, "y")?;
        project(g, rng, y, &[1, 3, 2, 2])
    })?;
    run("avgpool", &|g, rng| {
        let x = param(g, rng, "x", &[1, 2, 4, 4])?;
        let y = g.unary(Op::AvgPool { factor: 2 }, x, "y")?;
        project(g, rng, y, &[1, 2, 2, 2])
    })?;
    run("subsample", &|g, rng| {
        let x = param(g, rng, "x", &[1, 2, 4, 4])?;
        let y = g.unary(Op::Subsample { factor: 2 }, x, "y")?;
        project(g, rng, y, &[1, 2, 2, 2])
    })?;
    run("concat", &|g, rng| {
        let a = param(g, rng, "a", &[1, 2, 3, 3])?;
        let b = param(g, rng, "b", &[1, 1, 3, 3])?;
        let y = g.binary(Op::Concat, a, b, "y")?;
        project(g, rng, y, &[1, 3, 3, 3])
    })?;
    run("relu", &|g, rng| {
        let x = param(g, rng, "x", &[1, 2, 3, 3])?;
        let y = g.unary(Op::Relu, x, "y")?;
        project(g, rng, y, &[1, 2, 3, 3])
    })?;
    run("softmax", &|g, rng| {
        let x = param(g, rng, "x", &[1, 4, 2, 3])?;
        let y = g.unary(Op::Softmax, x, "y")?;
        project(g, rng, y, &[1, 4, 2, 3])
    })?;
    run("add", &|g, rng| {
        let a = param(g, rng, "a", &[1, 2, 2, 2])?;
        let b = param(g, rng, "b", &[1, 2, 2, 2])?;
        let y = g.binary(Op::Add, a, b, "y")?;
        project(g, rng, y, &[1, 2, 2, 2])
    })?;
    run("masked_cross_entropy", &|g, rng| {
        let x = param(g, rng, "logits", &[1, 3, 3, 3])?;
        let labels = g.input("labels");
        let loss = g.binary(Op::MaskedCrossEntropy, x, labels, "loss")?;
        let mut lab = Tensor::full(&[1, 1, 3, 3], UNLABELED_F64);
        for (i, v) in lab.data_mut().iter_mut().enumerate() {
            if i % 3 != 1 {
                *v = (i % 3) as f64;
            }
        }
        Ok((loss, Feeds::from([("labels".to_string(), lab)])))
    })?;
    run("conv2d+masked_loss", &|g, rng| {
        let x = g.input("x");
        let w = param(g, rng, "w", &[3, 2, 3, 3])?;
        let b = param(g, rng, "b", &[3])?;
        let y = g.conv2d(x, w, b, ConvParams::dilated(1), "logits")?;
        let labels = g.input("labels");
        let loss = g.binary(Op::MaskedCrossEntropy, y, labels, "loss")?;
        let mut lab = Tensor::full(&[1, 1, 4, 4], UNLABELED_F64);
        for (i, v) in lab.data_mut().iter_mut().enumerate().step_by(2) {
            *v = (i % 3) as f64;
        }
        Ok((
            loss,
            Feeds::from([
                ("x".to_string(), Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, rng)),
                ("labels".to_string(), lab),
            ]),
        ))
    })?;
    Ok(reports)
}

/// End-to-end check of a micro material network: 8×8 input, 2 materials,
/// per-pixel context injected at `layer`, a learned skip transform and a few
/// unlabeled pixels.
pub fn network_suite(seed: u64, layer: InjectionLayer, epsilon: f64, tolerance: f64) -> Result<Vec<GradReport>> {
    let config = NetworkConfig {
        num_materials: 2,
        stage_widths: vec![3, 3, 3, 3],
        context_channels: 2,
        injection_layer: layer,
        skip_transform: true,
        head_width: 3,
        patch_size: 8,
        ..NetworkConfig::default()
    };
    let mut net = build_network(&config, seed)?;
    net.perturb_params(0.3, seed ^ 0x5eed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Positive biases keep every relu stage active so no gradient is
    // trivially zero.
    let biases: Vec<String> = net.graph().trainable_names().filter(|n| n.ends_with(".bias")).map(str::to_string).collect();
    for name in biases {
        for v in net.graph_mut().param_mut(&name).expect("listed parameter").data_mut() {
            *v = rng.gen_range(0.1..0.5);
        }
    }
    let image = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
    let context = Tensor::uniform(&[2, 8, 8], 0.0, 1.0, &mut rng);
    let labels: Vec<u16> = (0..64)
        .map(|_| match rng.gen_range(0..5) {
            0 => LabelMap::UNLABELED,
            v => (v % 2) as u16,
        })
        .collect();
    let example = Example {
        image,
        context: Some(context),
        labels: LabelMap::new(8, 8, labels)?,
    };
    let mut reports = net.gradcheck(&example, &GradCheck::new(epsilon, tolerance)?)?;
    for r in &mut reports {
        r.op = format!("net[{layer}]/{}", r.op);
    }
    Ok(reports)
}
