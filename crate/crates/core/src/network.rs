//! Small configurable models with a float path and a ternary path that share
//! one full-precision weight base.
//!
//! Architecture strings:
//!
//! * `mlp-D0-D1-...-Dk`: flatten, then dense layers with ReLU between them;
//! * `lenet-small`: two strided 4×4 convolutions (8 and 16 filters) on a
//!   1×28×28 input, then dense 784→64→10;
//! * a comma-separated layer list starting with the per-sample input shape,
//!   e.g. `in:1x28x28,conv:8:4:2:1,relu,flatten,dense:64,relu,dense:10`.
//!   `conv:F:K:S:P` and `dense:OUT` take an optional `:fp` suffix to keep the
//!   layer in full precision.
//!
//! Every parametric layer is quantized unless marked `:fp`, so the first and
//! last layers are ternarized by default. Biases are never ternarized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{conv_output_extent, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::ternarizer::{quantize_weight, QuantPhase, QuantizerState, TernaryCodes};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize, quantized: bool },
    Conv2d { in_channels: usize, filters: usize, kernel: usize, stride: usize, padding: usize, quantized: bool },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, Self::Dense { .. } | Self::Conv2d { .. })
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Self::Dense { quantized: true, .. } | Self::Conv2d { quantized: true, .. })
    }

    /// Weight tensor shape: `[in, out]` for dense, `[F, C, K, K]` for conv.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            Self::Dense { inputs, outputs, .. } => Some(vec![inputs, outputs]),
            Self::Conv2d { in_channels, filters, kernel, .. } => Some(vec![filters, in_channels, kernel, kernel]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            Self::Dense { outputs, .. } => Some(outputs),
            Self::Conv2d { filters, .. } => Some(filters),
            _ => None,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            Self::Dense { inputs, outputs, .. } => (inputs, outputs),
            Self::Conv2d { in_channels, filters, kernel, .. } => (in_channels * kernel * kernel, filters * kernel * kernel),
            _ => (0, 0),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Dense { .. } => "fc",
            Self::Conv2d { .. } => "conv",
            Self::Relu => "relu",
            Self::Flatten => "flatten",
        }
    }
}

/// Validated layer stack with its input shape (per sample, no batch axis).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    descriptor: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

fn arch_err(msg: impl Into<String>) -> Error {
    Error::Architecture(msg.into())
}

fn parse_usize(tok: &str, what: &str) -> Result<usize> {
    tok.trim().parse::<usize>().map_err(|_| arch_err(format!("bad {what} `{tok}`")))
}

impl Architecture {
    pub fn parse(descriptor: &str) -> Result<Self> {
        let descriptor = descriptor.trim();
        if descriptor.is_empty() {
            return Err(arch_err("empty architecture"));
        }
        if let Some(dims) = descriptor.strip_prefix("mlp-") {
            let dims: Vec<usize> = dims.split('-').map(|d| parse_usize(d, "mlp width")).collect::<Result<_>>()?;
            if dims.len() < 2 || dims.contains(&0) {
                return Err(arch_err(format!("`{descriptor}` needs at least two positive widths")));
            }
            let mut layers = vec![LayerSpec::Flatten];
            for (i, pair) in dims.windows(2).enumerate() {
                if i > 0 {
                    layers.push(LayerSpec::Relu);
                }
                layers.push(LayerSpec::Dense { inputs: pair[0], outputs: pair[1], quantized: true });
            }
            return Self::from_layers(descriptor, vec![dims[0]], layers);
        }
        if descriptor == "lenet-small" {
            return Self::parse_layer_list(
                descriptor,
                "in:1x28x28,conv:8:4:2:1,relu,conv:16:4:2:1,relu,flatten,dense:64,relu,dense:10",
            );
        }
        if descriptor.starts_with("in:") {
            return Self::parse_layer_list(descriptor, descriptor);
        }
        Err(arch_err(format!("unknown architecture `{descriptor}`")))
    }

    /// Builds from an explicit `in:...` layer list, keeping `descriptor` as the name.
    pub fn from_layer_list(descriptor: &str, list: &str) -> Result<Self> {
        Self::parse_layer_list(descriptor, list)
    }

    /// The `in:...` layer list that re-parses to this architecture.
    pub fn layer_list(&self) -> String {
        let dims: Vec<String> = self.input_shape.iter().map(usize::to_string).collect();
        let mut out = format!("in:{}", dims.join("x"));
        for spec in &self.layers {
            let (tok, quantized) = match *spec {
                LayerSpec::Relu => ("relu".to_string(), true),
                LayerSpec::Flatten => ("flatten".to_string(), true),
                LayerSpec::Dense { outputs, quantized, .. } => (format!("dense:{outputs}"), quantized),
                LayerSpec::Conv2d { filters, kernel, stride, padding, quantized, .. } => {
                    (format!("conv:{filters}:{kernel}:{stride}:{padding}"), quantized)
                }
            };
            out.push(',');
            out.push_str(&tok);
            if !quantized {
                out.push_str(":fp");
            }
        }
        out
    }

    fn parse_layer_list(descriptor: &str, list: &str) -> Result<Self> {
        let mut tokens = list.split(',').map(str::trim);
        let input = tokens.next().and_then(|t| t.strip_prefix("in:")).ok_or_else(|| arch_err("layer list must start with `in:`"))?;
        let input_shape: Vec<usize> = input.split('x').map(|d| parse_usize(d, "input extent")).collect::<Result<_>>()?;
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(arch_err(format!("bad input shape `{input}`")));
        }
        let mut shape = input_shape.clone();
        let mut layers = Vec::new();
        for tok in tokens {
            let mut parts: Vec<&str> = tok.split(':').collect();
            let quantized = if parts.last() == Some(&"fp") {
                parts.pop();
                false
            } else {
                true
            };
            let spec = match parts.as_slice() {
                ["relu"] => LayerSpec::Relu,
                ["flatten"] => LayerSpec::Flatten,
                ["dense", out] => {
                    if shape.len() != 1 {
                        return Err(arch_err(format!("dense layer needs a flat input, got {shape:?}")));
                    }
                    LayerSpec::Dense { inputs: shape[0], outputs: parse_usize(out, "dense width")?, quantized }
                }
                ["conv", f, k, s, p] => {
                    if shape.len() != 3 {
                        return Err(arch_err(format!("conv layer needs a C×H×W input, got {shape:?}")));
                    }
                    LayerSpec::Conv2d {
                        in_channels: shape[0],
                        filters: parse_usize(f, "filters")?,
                        kernel: parse_usize(k, "kernel")?,
                        stride: parse_usize(s, "stride")?,
                        padding: parse_usize(p, "padding")?,
                        quantized,
                    }
                }
                _ => return Err(arch_err(format!("bad layer token `{tok}`"))),
            };
            shape = next_shape(&spec, &shape)?;
            layers.push(spec);
        }
        Self::from_layers(descriptor, input_shape, layers)
    }

    pub fn from_layers(descriptor: &str, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() || !layers.iter().any(LayerSpec::is_parametric) {
            return Err(arch_err("architecture has no parametric layers"));
        }
        let mut shape = input_shape.clone();
        for spec in &layers {
            shape = next_shape(spec, &shape)?;
        }
        if shape.len() != 1 {
            return Err(arch_err(format!("network output must be flat, got {shape:?}")));
        }
        Ok(Self { descriptor: descriptor.to_string(), input_shape, layers })
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn parametric(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_parametric())
    }

    pub fn num_classes(&self) -> usize {
        let mut shape = self.input_shape.clone();
        for spec in &self.layers {
            shape = next_shape(spec, &shape).expect("validated at construction");
        }
        shape[0]
    }

    /// Parametric layer names: `fc1`, `conv1`, ... numbered per kind.
    pub fn layer_names(&self) -> Vec<String> {
        let (mut fc, mut conv) = (0, 0);
        self.parametric()
            .map(|l| {
                let n = if matches!(l, LayerSpec::Dense { .. }) {
                    fc += 1;
                    fc
                } else {
                    conv += 1;
                    conv
                };
                format!("{}{n}", l.kind())
            })
            .collect()
    }

    /// Checks a batched input shape against the first layer.
    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let per_sample = &shape[1.min(shape.len())..];
        let ok = if matches!(self.layers[0], LayerSpec::Flatten) {
            !shape.is_empty() && per_sample.iter().product::<usize>() == self.input_shape.iter().product::<usize>()
        } else {
            per_sample == self.input_shape.as_slice()
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch { op: "forward", detail: format!("input {shape:?} vs per-sample {:?}", self.input_shape) })
        }
    }
}

fn next_shape(spec: &LayerSpec, shape: &[usize]) -> Result<Vec<usize>> {
    match *spec {
        LayerSpec::Relu => Ok(shape.to_vec()),
        LayerSpec::Flatten => Ok(vec![shape.iter().product()]),
        LayerSpec::Dense { inputs, outputs, .. } => {
            if shape != [inputs] || outputs == 0 {
                return Err(arch_err(format!("dense {inputs}→{outputs} cannot follow shape {shape:?}")));
            }
            Ok(vec![outputs])
        }
        LayerSpec::Conv2d { in_channels, filters, kernel, stride, padding, .. } => {
            if shape.len() != 3 || shape[0] != in_channels || filters == 0 {
                return Err(arch_err(format!("conv with {in_channels} channels cannot follow shape {shape:?}")));
            }
            let (h, w) = conv_output_extent(shape[1], shape[2], kernel, kernel, stride, padding)
                .map_err(|e| arch_err(e.to_string()))?;
            Ok(vec![filters, h, w])
        }
    }
}

/// Trainable tensors of one dense or conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    /// Present exactly when the layer is quantized.
    pub quant: Option<QuantizerState>,
}

/// How the forward pass treats quantized layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Float,
    Ternary(QuantPhase),
}

impl ForwardMode {
    /// Ternary evaluation (the forward value does not depend on the phase).
    pub const TERNARY: Self = Self::Ternary(QuantPhase::Weight { grad_correctness: true });
}

/// Tape handles created for one parametric layer.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub weight: Var,
    pub bias: Var,
    pub delta: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub params: Vec<ParamVars>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: Vec<ParamLayer>,
}

/// Rounds to the nearest `f32`; stored parameters always hold 32-bit values.
#[inline]
pub fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

impl Model {
    /// Parses an architecture string and initializes it from `seed`.
    pub fn build_from_config(descriptor: &str, seed: u64) -> Result<Self> {
        Ok(Self::init(Architecture::parse(descriptor)?, seed))
    }

    /// Uniform `±√(6/(fan_in + fan_out))` weights, zero biases, `δ = 0`.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = arch.layer_names();
        let params = arch
            .parametric()
            .zip(names)
            .map(|(spec, name)| {
                let shape = spec.weight_shape().expect("parametric");
                let (fan_in, fan_out) = spec.fans();
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| to_f32_precision(rng.gen_range(-limit..limit))).collect();
                let weight = Tensor::new(shape, data).expect("shape from spec");
                let bias = Tensor::zeros(&[spec.bias_len().expect("parametric")]);
                let quant = spec.is_quantized().then(|| QuantizerState::new(0.0));
                ParamLayer { name, weight, bias, quant }
            })
            .collect();
        Self { arch, params }
    }

    /// Assembles a model from stored parameters, checking them against `arch`.
    pub fn from_parts(arch: Architecture, params: Vec<ParamLayer>) -> Result<Self> {
        let specs: Vec<&LayerSpec> = arch.parametric().collect();
        if specs.len() != params.len() {
            return Err(arch_err(format!("{} parametric layers, {} parameter records", specs.len(), params.len())));
        }
        for (spec, p) in specs.iter().zip(&params) {
            let ws = spec.weight_shape().expect("parametric");
            if p.weight.shape() != ws.as_slice() || p.bias.shape() != [spec.bias_len().expect("parametric")] {
                return Err(arch_err(format!("layer `{}` has shapes {:?}/{:?}, expected {ws:?}", p.name, p.weight.shape(), p.bias.shape())));
            }
            if spec.is_quantized() != p.quant.is_some() {
                return Err(arch_err(format!("layer `{}` quantizer presence disagrees with architecture", p.name)));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[ParamLayer] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamLayer] {
        &mut self.params
    }

    /// Weights plus biases; codes are derived, not counted.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Sets `δ = fraction·max|w|` on every quantized layer and refreshes.
    pub fn init_thresholds(&mut self, fraction: f64) -> Result<()> {
        for p in &mut self.params {
            if p.quant.is_some() {
                let s = QuantizerState::with_init_fraction(p.weight.data(), fraction).map_err(|e| in_layer(e, &p.name))?;
                p.quant = Some(s);
            }
        }
        Ok(())
    }

    /// Recomputes every quantizer's statistics from its current weights.
    pub fn refresh_quantizers(&mut self) -> Result<()> {
        for p in &mut self.params {
            if let Some(q) = &p.quant {
                p.quant = Some(q.refresh(p.weight.data()).map_err(|e| in_layer(e, &p.name))?);
            }
        }
        Ok(())
    }

    pub fn quantizers_fresh(&self) -> bool {
        self.params.iter().all(|p| p.quant.map_or(true, |q| q.is_fresh(p.weight.data())))
    }

    /// Codes of each parametric layer (`None` for full-precision layers).
    pub fn ternary_codes(&self) -> Vec<Option<TernaryCodes>> {
        self.params.iter().map(|p| p.quant.as_ref().map(|q| q.codes(&p.weight))).collect()
    }

    /// Records the forward pass on `tape`. In ternary modes each quantized
    /// layer computes `S·(x ⊛ Tern(w))`: the linear op runs on the codes and
    /// the scalar is applied to its output.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: ForwardMode) -> Result<ForwardPass> {
        self.arch.check_input(tape.value(x).shape())?;
        let mut vars = Vec::with_capacity(self.params.len());
        let logits = run_layers(&self.arch, tape, x, |tape, idx, spec, input| {
            let p = &self.params[idx];
            let trains_weights = !matches!(mode, ForwardMode::Ternary(QuantPhase::Threshold));
            let (weight, bias) = if trains_weights {
                (tape.leaf(p.weight.clone().with_grad()), tape.leaf(p.bias.clone().with_grad()))
            } else {
                (tape.constant(p.weight.clone()), tape.constant(p.bias.clone()))
            };
            let (out, delta) = match (mode, p.quant.as_ref()) {
                (ForwardMode::Ternary(phase), Some(state)) => {
                    let q = quantize_weight(tape, weight, state, phase).map_err(|e| in_layer(e, &p.name))?;
                    let acc = apply_linear(tape, spec, input, q.codes)?;
                    (tape.mul_scalar(q.scale, acc)?, q.delta)
                }
                _ => (apply_linear(tape, spec, input, weight)?, None),
            };
            vars.push(ParamVars { weight, bias, delta });
            tape.add_bias(out, bias)
        })?;
        Ok(ForwardPass { logits, params: vars })
    }

    /// Forward pass on a throwaway tape.
    pub fn logits(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let pass = self.forward(&mut tape, vx, mode)?;
        Ok(tape.value(pass.logits).clone())
    }
}

pub(crate) fn in_layer(e: Error, name: &str) -> Error {
    match e {
        Error::DegenerateLayer { count, .. } => Error::DegenerateLayer { layer: name.to_string(), count },
        Error::NonPositiveScale { scale, .. } => Error::NonPositiveScale { layer: name.to_string(), scale },
        Error::StaleQuantizer(_) => Error::StaleQuantizer(name.to_string()),
        other => other,
    }
}

/// Dense → matmul, conv → conv2d.
pub(crate) fn apply_linear(tape: &mut Tape, spec: &LayerSpec, x: Var, w: Var) -> Result<Var> {
    match *spec {
        LayerSpec::Dense { .. } => tape.matmul(x, w),
        LayerSpec::Conv2d { stride, padding, .. } => tape.conv2d(x, w, stride, padding),
        _ => unreachable!("apply_linear on non-parametric layer"),
    }
}

/// Walks the layer stack; `linear` produces the output of each parametric layer.
pub(crate) fn run_layers<F>(arch: &Architecture, tape: &mut Tape, x: Var, mut linear: F) -> Result<Var>
where
    F: FnMut(&mut Tape, usize, &LayerSpec, Var) -> Result<Var>,
{
    let mut h = x;
    let mut idx = 0;
    for spec in arch.layers() {
        h = match spec {
            LayerSpec::Relu => tape.relu(h),
            LayerSpec::Flatten => {
                let shape = tape.value(h).shape();
                let batch = shape[0];
                let rest = shape[1..].iter().product();
                tape.reshape(h, vec![batch, rest])?
            }
            _ => {
                let out = linear(tape, idx, spec, h)?;
                idx += 1;
                out
            }
        };
    }
    Ok(h)
}
