//! Inference-only loader for externally trained two-logit classifiers in
//! the ONNX interchange format.
//!
//! The interpreter covers the operators of an exported residual network:
//! Conv, BatchNormalization, Relu, MaxPool, AveragePool, GlobalAveragePool,
//! Add, Mul, Flatten, Reshape, Gemm, MatMul, Softmax, Sigmoid, Identity,
//! Dropout and Constant. Anything else is rejected at load time.

mod ops;
pub mod proto;
mod tensor;

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use prost::Message;

use crate::imaging::{PlaneTensor, PreprocessConfig};

use super::{check_threshold, Detector, DetectorError, DEFAULT_THRESHOLD};
use ops::{GemmAttrs, Window};
use proto::{AttributeProto, GraphProto, ModelProto, NodeProto, ValueInfoProto};
use tensor::Tensor;

/// Failure while compiling or executing the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeError(String);

impl RuntimeError {
    fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl std::fmt::Display for RuntimeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug)]
enum Op {
    Conv {
        window: Window,
        group: usize,
    },
    BatchNorm {
        epsilon: f32,
    },
    Relu,
    Sigmoid,
    MaxPool(Window),
    AveragePool {
        window: Window,
        count_include_pad: bool,
    },
    GlobalAveragePool,
    Add,
    Mul,
    Flatten {
        axis: i64,
    },
    Reshape,
    Gemm(GemmAttrs),
    MatMul,
    Softmax {
        axis: i64,
    },
    Identity,
    Constant(Arc<Tensor>),
}

impl std::fmt::Debug for GemmAttrs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Gemm(alpha={}, beta={}, tA={}, tB={})",
            self.alpha, self.beta, self.trans_a, self.trans_b
        )
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

struct Attrs<'a>(&'a [AttributeProto]);

impl Attrs<'_> {
    fn get(&self, name: &str) -> Option<&AttributeProto> {
        self.0.iter().find(|a| a.name == name)
    }

    fn int(&self, name: &str, default: i64) -> i64 {
        self.get(name).map_or(default, |a| a.i)
    }

    fn float(&self, name: &str, default: f32) -> f32 {
        self.get(name).map_or(default, |a| a.f)
    }

    fn ints(&self, name: &str) -> Option<&[i64]> {
        self.get(name).map(|a| a.ints.as_slice())
    }

    fn string(&self, name: &str) -> Option<String> {
        self.get(name)
            .map(|a| String::from_utf8_lossy(&a.s).into_owned())
    }
}

fn to_usize(v: &[i64], what: &str) -> Result<Vec<usize>, RuntimeError> {
    v.iter()
        .map(|&x| usize::try_from(x).map_err(|_| RuntimeError::new(format!("negative {what}"))))
        .collect()
}

fn pair(v: Option<&[i64]>, default: usize, what: &str) -> Result<[usize; 2], RuntimeError> {
    match v {
        None => Ok([default, default]),
        Some(v) => match to_usize(v, what)?.as_slice() {
            [a, b] => Ok([*a, *b]),
            _ => Err(RuntimeError::new(format!("only 2-D {what} is supported"))),
        },
    }
}

fn window(attrs: &Attrs, kernel: Option<[usize; 2]>) -> Result<Window, RuntimeError> {
    match attrs.string("auto_pad").as_deref() {
        None | Some("NOTSET") | Some("VALID") | Some("") => {}
        Some(mode) => return Err(RuntimeError::new(format!("auto_pad {mode} not supported"))),
    }
    if attrs.int("ceil_mode", 0) != 0 {
        return Err(RuntimeError::new("ceil_mode is not supported"));
    }
    let kernel = match (attrs.ints("kernel_shape"), kernel) {
        (Some(k), _) => pair(Some(k), 1, "kernel_shape")?,
        (None, Some(k)) => k,
        (None, None) => return Err(RuntimeError::new("kernel_shape is required")),
    };
    let pads = match attrs.ints("pads") {
        None => [0; 4],
        Some(p) => match to_usize(p, "pads")?.as_slice() {
            [t, l, b, r] => [*t, *l, *b, *r],
            _ => return Err(RuntimeError::new("only 2-D pads are supported")),
        },
    };
    let strides = pair(attrs.ints("strides"), 1, "strides")?;
    let dilations = pair(attrs.ints("dilations"), 1, "dilations")?;
    if strides.contains(&0) || dilations.contains(&0) || kernel.contains(&0) {
        return Err(RuntimeError::new("zero stride, dilation or kernel"));
    }
    Ok(Window {
        kernel,
        strides,
        pads,
        dilations,
    })
}

fn compile_node(
    node: &NodeProto,
    initializers: &HashMap<String, Arc<Tensor>>,
) -> Result<Node, RuntimeError> {
    if !(node.domain.is_empty() || node.domain == "ai.onnx") {
        return Err(RuntimeError::new(format!(
            "operator domain `{}` is not supported",
            node.domain
        )));
    }
    let attrs = Attrs(&node.attribute);
    let op = match node.op_type.as_str() {
        "Conv" => {
            let kernel = node
                .input
                .get(1)
                .and_then(|w| initializers.get(w))
                .and_then(|w| match w.shape() {
                    [_, _, kh, kw] => Some([*kh, *kw]),
                    _ => None,
                });
            Op::Conv {
                window: window(&attrs, kernel)?,
                group: usize::try_from(attrs.int("group", 1))
                    .map_err(|_| RuntimeError::new("negative group"))?,
            }
        }
        "BatchNormalization" => Op::BatchNorm {
            epsilon: attrs.float("epsilon", 1e-5),
        },
        "Relu" => Op::Relu,
        "Sigmoid" => Op::Sigmoid,
        "MaxPool" => {
            if node.output.len() > 1 {
                return Err(RuntimeError::new("MaxPool indices output is not supported"));
            }
            Op::MaxPool(window(&attrs, None)?)
        }
        "AveragePool" => Op::AveragePool {
            window: window(&attrs, None)?,
            count_include_pad: attrs.int("count_include_pad", 0) != 0,
        },
        "GlobalAveragePool" => Op::GlobalAveragePool,
        "Add" => Op::Add,
        "Mul" => Op::Mul,
        "Flatten" => Op::Flatten {
            axis: attrs.int("axis", 1),
        },
        "Reshape" => Op::Reshape,
        "Gemm" => Op::Gemm(GemmAttrs {
            alpha: attrs.float("alpha", 1.0),
            beta: attrs.float("beta", 1.0),
            trans_a: attrs.int("transA", 0) != 0,
            trans_b: attrs.int("transB", 0) != 0,
        }),
        "MatMul" => Op::MatMul,
        "Softmax" => Op::Softmax {
            axis: attrs.int("axis", -1),
        },
        "Identity" | "Dropout" => Op::Identity,
        "Constant" => {
            let value = attrs
                .get("value")
                .and_then(|a| a.t.as_ref())
                .ok_or_else(|| RuntimeError::new("Constant without a tensor value"))?;
            Op::Constant(Arc::new(Tensor::from_proto(value)?))
        }
        other => {
            return Err(RuntimeError::new(format!(
                "operator `{other}` is not supported"
            )))
        }
    };
    if node.output.is_empty() {
        return Err(RuntimeError::new(format!(
            "{} node without outputs",
            node.op_type
        )));
    }
    Ok(Node {
        op,
        inputs: node.input.clone(),
        outputs: node.output.clone(),
    })
}

/// Declared dimension: fixed size, or `None` for a symbolic/unknown one.
fn declared_dims(info: &ValueInfoProto) -> Option<Vec<Option<i64>>> {
    let shape = info.r#type.as_ref()?.tensor_type.as_ref()?.shape.as_ref()?;
    Some(shape.dim.iter().map(|d| d.dim_value).collect())
}

fn dims_match(declared: &[Option<i64>], expected: &[i64], batch_free: bool) -> bool {
    declared.len() == expected.len()
        && declared
            .iter()
            .zip(expected)
            .enumerate()
            .all(|(i, (d, e))| match d {
                Some(v) => v == e,
                None => batch_free && i == 0,
            })
}

/// Compiled graph.
#[derive(Debug)]
pub struct OnnxModel {
    nodes: Vec<Node>,
    initializers: HashMap<String, Arc<Tensor>>,
    input_name: String,
    output_name: String,
    input_side: usize,
}

impl OnnxModel {
    /// Decodes and validates a model that maps `1x3xSxS` to two logits.
    pub fn from_bytes(bytes: &[u8], input_side: usize) -> Result<Self, DetectorError> {
        let unreadable = |e: RuntimeError| DetectorError::UnreadableModel(e.0);
        let model = ModelProto::decode(bytes)
            .map_err(|e| DetectorError::UnreadableModel(format!("protobuf decode failed: {e}")))?;
        let graph: GraphProto = model
            .graph
            .ok_or_else(|| DetectorError::UnreadableModel("model has no graph".into()))?;

        let mut initializers = HashMap::new();
        for init in &graph.initializer {
            let t = Tensor::from_proto(init).map_err(unreadable)?;
            initializers.insert(init.name.clone(), Arc::new(t));
        }
        let inputs: Vec<&ValueInfoProto> = graph
            .input
            .iter()
            .filter(|i| !initializers.contains_key(&i.name))
            .collect();
        let [input] = inputs.as_slice() else {
            return Err(DetectorError::ShapeContractViolation(format!(
                "expected exactly one image input, found {}",
                inputs.len()
            )));
        };
        let [output] = graph.output.as_slice() else {
            return Err(DetectorError::ShapeContractViolation(format!(
                "expected exactly one output, found {}",
                graph.output.len()
            )));
        };
        let side = input_side as i64;
        match declared_dims(input) {
            Some(d) if dims_match(&d, &[1, 3, side, side], true) => {}
            other => {
                return Err(DetectorError::ShapeContractViolation(format!(
                    "input must be 1x3x{side}x{side}, declared {other:?}"
                )))
            }
        }
        if let Some(d) = declared_dims(output) {
            let fixed_ok = dims_match(&d, &[1, 2], true);
            let unknown_classes = d.len() == 2 && d[1].is_none();
            if !(fixed_ok || unknown_classes) {
                return Err(DetectorError::ShapeContractViolation(format!(
                    "output must be 1x2 logits, declared {d:?}"
                )));
            }
        }

        let mut available: HashSet<String> = initializers.keys().cloned().collect();
        available.insert(input.name.clone());
        let mut nodes = Vec::with_capacity(graph.node.len());
        for proto in &graph.node {
            let node = compile_node(proto, &initializers).map_err(unreadable)?;
            if let Some(missing) = node
                .inputs
                .iter()
                .find(|i| !i.is_empty() && !available.contains(*i))
            {
                return Err(DetectorError::UnreadableModel(format!(
                    "value `{missing}` used before it is produced"
                )));
            }
            available.extend(node.outputs.iter().cloned());
            nodes.push(node);
        }
        if !available.contains(&output.name) {
            return Err(DetectorError::UnreadableModel(format!(
                "graph output `{}` is never produced",
                output.name
            )));
        }

        let compiled = Self {
            nodes,
            initializers,
            input_name: input.name.clone(),
            output_name: output.name.clone(),
            input_side,
        };
        // Probe once so shape errors surface at load rather than per request.
        let probe = compiled
            .run(vec![0.0; 3 * input_side * input_side])
            .map_err(unreadable)?;
        if probe.len() != 2 {
            return Err(DetectorError::ShapeContractViolation(format!(
                "model emits {} values, expected 2 logits",
                probe.len()
            )));
        }
        Ok(compiled)
    }

    /// Runs the graph on one `3 x S x S` image and returns the raw output.
    fn run(&self, image: Vec<f32>) -> Result<Vec<f32>, RuntimeError> {
        let s = self.input_side;
        let mut values: HashMap<&str, Arc<Tensor>> = self
            .initializers
            .iter()
            .map(|(k, v)| (k.as_str(), Arc::clone(v)))
            .collect();
        values.insert(
            self.input_name.as_str(),
            Arc::new(Tensor::float(vec![1, 3, s, s], image)?),
        );
        for node in &self.nodes {
            let arg = |i: usize| -> Result<&Tensor, RuntimeError> {
                let name = node
                    .inputs
                    .get(i)
                    .filter(|n| !n.is_empty())
                    .ok_or_else(|| {
                        RuntimeError::new(format!("{:?}: missing input {i}", node.op))
                    })?;
                values
                    .get(name.as_str())
                    .map(|t| t.as_ref())
                    .ok_or_else(|| RuntimeError::new(format!("missing value `{name}`")))
            };
            let optional = |i: usize| -> Option<&Tensor> {
                node.inputs
                    .get(i)
                    .filter(|n| !n.is_empty())
                    .and_then(|n| values.get(n.as_str()))
                    .map(|t| t.as_ref())
            };
            let result = match &node.op {
                Op::Conv { window, group } => {
                    ops::conv(arg(0)?, arg(1)?, optional(2), window, *group)?
                }
                Op::BatchNorm { epsilon } => {
                    ops::batch_norm(arg(0)?, arg(1)?, arg(2)?, arg(3)?, arg(4)?, *epsilon)?
                }
                Op::Relu => ops::relu(arg(0)?)?,
                Op::Sigmoid => ops::sigmoid(arg(0)?)?,
                Op::MaxPool(window) => ops::pool(arg(0)?, window, true, false)?,
                Op::AveragePool {
                    window,
                    count_include_pad,
                } => ops::pool(arg(0)?, window, false, *count_include_pad)?,
                Op::GlobalAveragePool => ops::global_average_pool(arg(0)?)?,
                Op::Add => ops::binary(arg(0)?, arg(1)?, |a, b| a + b)?,
                Op::Mul => ops::binary(arg(0)?, arg(1)?, |a, b| a * b)?,
                Op::Flatten { axis } => ops::flatten(arg(0)?, *axis)?,
                Op::Reshape => ops::reshape(arg(0)?, arg(1)?.ints()?)?,
                Op::Gemm(attrs) => ops::gemm(arg(0)?, arg(1)?, optional(2), attrs)?,
                Op::MatMul => ops::matmul(arg(0)?, arg(1)?)?,
                Op::Softmax { axis } => ops::softmax(arg(0)?, *axis)?,
                Op::Identity => arg(0)?.clone(),
                Op::Constant(t) => t.as_ref().clone(),
            };
            values.insert(node.outputs[0].as_str(), Arc::new(result));
        }
        let out = values
            .get(self.output_name.as_str())
            .ok_or_else(|| RuntimeError::new("graph output missing after execution"))?;
        Ok(out.floats()?.to_vec())
    }
}

/// Options for [`load_external`].
#[derive(Debug, Clone)]
pub struct OnnxOptions {
    /// Which of the two logits is the positive class.
    pub positive_index: usize,
    pub threshold: f64,
    pub preprocess: PreprocessConfig,
}

impl Default for OnnxOptions {
    fn default() -> Self {
        Self {
            positive_index: 1,
            threshold: DEFAULT_THRESHOLD,
            preprocess: PreprocessConfig::default(),
        }
    }
}

/// Detector backed by an external two-logit network.
#[derive(Debug)]
pub struct OnnxDetector {
    model: OnnxModel,
    options: OnnxOptions,
}

impl OnnxDetector {
    pub fn from_bytes(bytes: &[u8], options: OnnxOptions) -> Result<Self, DetectorError> {
        if options.positive_index > 1 {
            return Err(DetectorError::InvalidConfig(format!(
                "positive_index {} must be 0 or 1",
                options.positive_index
            )));
        }
        check_threshold(options.threshold)?;
        options.preprocess.validate()?;
        let model = OnnxModel::from_bytes(bytes, options.preprocess.target_side as usize)?;
        Ok(Self { model, options })
    }

    pub fn options(&self) -> &OnnxOptions {
        &self.options
    }

    /// Softmax over the two logits produced for a standardized input.
    pub fn probabilities(&self, input: &PlaneTensor) -> Result<[f64; 2], DetectorError> {
        let s = self.model.input_side;
        if (input.channels(), input.height(), input.width()) != (3, s, s) {
            return Err(DetectorError::ShapeMismatch(format!(
                "expected 3x{s}x{s}, got {}x{}x{}",
                input.channels(),
                input.height(),
                input.width()
            )));
        }
        let prepared = self.options.preprocess.apply(input)?;
        let logits = self
            .model
            .run(prepared.into_data())
            .map_err(|e| DetectorError::UnreadableModel(e.0))?;
        let [a, b] = logits[..] else {
            return Err(DetectorError::ShapeContractViolation(format!(
                "model emitted {} values",
                logits.len()
            )));
        };
        let (a, b) = (f64::from(a), f64::from(b));
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let p = [ea / (ea + eb), eb / (ea + eb)];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(DetectorError::NonFiniteScore);
        }
        Ok(p)
    }
}

impl Detector for OnnxDetector {
    fn kind(&self) -> &'static str {
        "onnx"
    }

    fn threshold(&self) -> f64 {
        self.options.threshold
    }

    fn score(&self, input: &PlaneTensor) -> Result<f64, DetectorError> {
        Ok(self.probabilities(input)?[self.options.positive_index])
    }
}

/// Loads an ONNX file as a detector.
pub fn load_external(path: &Path, options: OnnxOptions) -> Result<OnnxDetector, DetectorError> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            DetectorError::UnreadableModel(format!("{} does not exist", path.display()))
        }
        _ => DetectorError::Io {
            path: path.display().to_string(),
            source: e,
        },
    })?;
    OnnxDetector::from_bytes(&bytes, options)
}

/// Builds a minimal model `GlobalAveragePool -> Flatten -> Gemm` whose
/// logits are `weights . channel_means + bias`. Useful for wiring tests.
pub fn linear_head_model(side: i64, weights: &[[f32; 3]], bias: &[f32]) -> Vec<u8> {
    use proto::{Dimension, OperatorSetIdProto, TensorProto};
    let classes = bias.len() as i64;
    let graph = GraphProto {
        name: "linear-head".into(),
        node: vec![
            NodeProto::new("GlobalAveragePool", &["image"], &["pooled"]),
            NodeProto::new("Flatten", &["pooled"], &["flat"])
                .with_attr(AttributeProto::int("axis", 1)),
            NodeProto::new("Gemm", &["flat", "W", "B"], &["logits"])
                .with_attr(AttributeProto::int("transB", 1)),
        ],
        initializer: vec![
            TensorProto::float(
                "W",
                &[classes, 3],
                weights.iter().flatten().copied().collect(),
            ),
            TensorProto::float("B", &[classes], bias.to_vec()),
        ],
        input: vec![ValueInfoProto::float_tensor(
            "image",
            vec![
                Dimension::symbolic("batch"),
                Dimension::fixed(3),
                Dimension::fixed(side),
                Dimension::fixed(side),
            ],
        )],
        output: vec![ValueInfoProto::float_tensor(
            "logits",
            vec![Dimension::symbolic("batch"), Dimension::fixed(classes)],
        )],
    };
    ModelProto {
        ir_version: 8,
        producer_name: "iris-gate".into(),
        graph: Some(graph),
        opset_import: vec![OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
    }
    .encode_to_vec()
}
