//! End-to-end model execution.
//!
//! Each layer gets a plan entry: the layout work needed before and after
//! the accelerator call, and which simulator (or host kernel) runs it.
//! Layout work is free in cycle terms.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::accelconfig::{ControllerType, ValidatedConfig};
use crate::graph::{infer_shapes, GraphError, KernelLayout, Layer, Layout, Model, Op, Shape};
use crate::mapping::{default_mapping, validate_mapping, Mapping, MappingError, MappingFile, Workload};
use crate::simulator::{
    simulate_flexible_conv, simulate_flexible_fc, simulate_sparse_gemm, simulate_systolic_gemm, SimError, SimMetrics,
    SimReport,
};
use crate::tensorops::{
    conv2d_ref, conv_kernel_dims, conv_output_dims, dense_ref, fallback_op, im2col_group, kernel_matrix_group,
    transpose, FallbackKind, LayoutTag, Tensor, TensorError, ValueMode,
};

/// Failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Model,
    Simulation,
    Io,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("layer '{id}': {message}")]
    Layer {
        id: String,
        message: String,
        class: ErrorClass,
    },
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl RunError {
    pub fn class(&self) -> ErrorClass {
        match self {
            RunError::Layer { class, .. } => *class,
            RunError::Input(_) | RunError::Graph(_) => ErrorClass::Model,
        }
    }

    fn layer(id: &str, class: ErrorClass, e: impl fmt::Display) -> Self {
        RunError::Layer {
            id: id.to_string(),
            message: e.to_string(),
            class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Input,
    Kernel,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoweringStep {
    Transpose {
        operand: Operand,
        from: LayoutTag,
        to: LayoutTag,
    },
    /// Per-group patch matrices of the input.
    Im2col { groups: usize },
    /// Per-group 2-D views of the kernel.
    KernelMatrix { groups: usize },
    /// Reinterpret the buffer under new dims and tag.
    Reshape {
        operand: Operand,
        dims: Vec<usize>,
        tag: LayoutTag,
    },
}

/// Operand order of a lowered convolution or dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GemmOrder {
    /// kernel matrix times patch matrix (NCHW/KCRS)
    WeightData,
    /// patch matrix times kernel matrix (NHWC/RSCK)
    DataWeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dispatch {
    FlexibleConv,
    FlexibleFc,
    SparseGemm(GemmOrder),
    SystolicGemm(GemmOrder),
    Fallback(FallbackKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub layer_id: String,
    pub offloaded: bool,
    /// Work before the accelerator call.
    pub pre: Vec<LoweringStep>,
    pub dispatch: Dispatch,
    /// Work turning the accelerator output into the model's layout.
    pub post: Vec<LoweringStep>,
    pub mapping: Option<Mapping>,
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionPlan {
    pub entries: Vec<PlanEntry>,
}

fn fallback_kind(op: &Op) -> Option<FallbackKind> {
    Some(match op {
        Op::Relu => FallbackKind::Relu,
        Op::MaxPool2d(pp) => FallbackKind::MaxPool2d {
            pool: pp.pool,
            stride: pp.stride,
        },
        Op::BiasAdd => FallbackKind::BiasAdd,
        Op::Flatten => FallbackKind::Flatten,
        Op::Conv2d { .. } | Op::Dense(_) => return None,
    })
}

/// Plans one layer. Shapes must be inferred. On FLEX_LINEAR a layer
/// without an entry in `mappings` runs the all-ones default, with a notice.
pub fn plan_layer(layer: &Layer, cfg: &ValidatedConfig, mappings: Option<&MappingFile>) -> Result<PlanEntry, RunError> {
    let id = layer.id.as_str();
    let model_err = |e: MappingError| RunError::layer(id, ErrorClass::Model, e);
    let mut entry = PlanEntry {
        layer_id: layer.id.clone(),
        offloaded: layer.op.is_offloadable(),
        pre: Vec::new(),
        dispatch: Dispatch::FlexibleConv,
        post: Vec::new(),
        mapping: None,
        notice: None,
    };
    let out_shape = layer
        .output_shape
        .clone()
        .ok_or_else(|| RunError::layer(id, ErrorClass::Model, "shapes not inferred"))?;
    let controller = cfg.controller();

    if controller == ControllerType::FlexLinear && layer.op.is_offloadable() {
        let workload = Workload::from_layer(layer).map_err(model_err)?;
        let m = match mappings.map(|f| f.get(layer)).transpose().map_err(model_err)?.flatten() {
            Some(m) => m,
            None => {
                entry.notice = Some(format!("layer '{id}': no mapping supplied, using the all-ones default"));
                default_mapping(layer).map_err(model_err)?
            }
        };
        validate_mapping(&m, &workload, cfg).map_err(model_err)?;
        entry.mapping = Some(m);
    }

    let gemm = |order| match controller {
        ControllerType::SparseGemm => Dispatch::SparseGemm(order),
        _ => Dispatch::SystolicGemm(order),
    };
    match &layer.op {
        Op::Conv2d {
            params,
            layout,
            kernel_layout,
        } => {
            let pairing_ok = matches!(
                (layout, kernel_layout),
                (Layout::Nchw, KernelLayout::Kcrs) | (Layout::Nhwc, KernelLayout::Rsck)
            );
            if !pairing_ok {
                return Err(RunError::layer(
                    id,
                    ErrorClass::Model,
                    format!("unsupported layout pairing {}/{}", layout.tag(), kernel_layout.tag()),
                ));
            }
            let to_nhwc = || {
                vec![
                    LoweringStep::Transpose {
                        operand: Operand::Input,
                        from: LayoutTag::Nchw,
                        to: LayoutTag::Nhwc,
                    },
                    LoweringStep::Transpose {
                        operand: Operand::Kernel,
                        from: LayoutTag::Kcrs,
                        to: LayoutTag::Rsck,
                    },
                ]
            };
            let out_transpose = |from, to| LoweringStep::Transpose {
                operand: Operand::Output,
                from,
                to,
            };
            let groups = params.g;
            match (controller, layout) {
                (ControllerType::FlexLinear, Layout::Nchw) => {
                    entry.pre = to_nhwc();
                    entry.post.push(out_transpose(LayoutTag::Npqk, LayoutTag::Nkpq));
                }
                (ControllerType::FlexLinear, Layout::Nhwc) => {}
                (ControllerType::SystolicOs, Layout::Nhwc) => {
                    // the mesh only takes NCHW convolutions
                    entry.pre = vec![
                        LoweringStep::Transpose {
                            operand: Operand::Input,
                            from: LayoutTag::Nhwc,
                            to: LayoutTag::Nchw,
                        },
                        LoweringStep::Transpose {
                            operand: Operand::Kernel,
                            from: LayoutTag::Rsck,
                            to: LayoutTag::Kcrs,
                        },
                        LoweringStep::Im2col { groups },
                        LoweringStep::KernelMatrix { groups },
                    ];
                    entry.dispatch = gemm(GemmOrder::WeightData);
                    entry.post.push(out_transpose(LayoutTag::Nkpq, LayoutTag::Npqk));
                }
                (_, layout) => {
                    entry.pre = vec![LoweringStep::Im2col { groups }, LoweringStep::KernelMatrix { groups }];
                    entry.dispatch = gemm(if *layout == Layout::Nchw {
                        GemmOrder::WeightData
                    } else {
                        GemmOrder::DataWeight
                    });
                }
            }
            entry.post.push(LoweringStep::Reshape {
                operand: Operand::Output,
                dims: conv_output_dims(params, layout.tag()),
                tag: layout.tag(),
            });
        }
        Op::Dense(_) => {
            entry.dispatch = match controller {
                ControllerType::FlexLinear => Dispatch::FlexibleFc,
                _ => gemm(GemmOrder::DataWeight),
            };
        }
        other => {
            entry.dispatch = Dispatch::Fallback(fallback_kind(other).expect("host op"));
        }
    }
    debug_assert_eq!(Some(&out_shape), layer.output_shape.as_ref());
    Ok(entry)
}

pub fn plan_model(
    model: &Model,
    cfg: &ValidatedConfig,
    mappings: Option<&MappingFile>,
) -> Result<ExecutionPlan, RunError> {
    let entries = model
        .layers
        .iter()
        .map(|l| plan_layer(l, cfg, mappings))
        .collect::<Result<_, _>>()?;
    Ok(ExecutionPlan { entries })
}

fn permute_shape(dims: &[usize], from: LayoutTag, to: LayoutTag) -> Option<Vec<usize>> {
    use LayoutTag::*;
    let d = dims;
    Some(match (from, to) {
        (Nchw, Nhwc) | (Nkpq, Npqk) => vec![d[0], d[2], d[3], d[1]],
        (Nhwc, Nchw) | (Npqk, Nkpq) => vec![d[0], d[3], d[1], d[2]],
        (Kcrs, Rsck) => vec![d[2], d[3], d[1], d[0]],
        (Rsck, Kcrs) => vec![d[3], d[2], d[0], d[1]],
        _ => return None,
    })
}

/// Propagates shapes through a plan entry without touching data and checks
/// them against what the simulator accepts and what the model expects.
pub fn dry_run_shapes(layer: &Layer, entry: &PlanEntry) -> Result<(), String> {
    let input = layer.input_shape.clone().ok_or("shapes not inferred")?;
    let output = layer.output_shape.clone().ok_or("shapes not inferred")?;
    let Op::Conv2d {
        params, kernel_layout, ..
    } = &layer.op
    else {
        return Ok(());
    };
    let mut cur_in = input;
    let mut cur_k = Shape::new(conv_kernel_dims(params, kernel_layout.tag()), kernel_layout.tag());
    let mut patches = false;
    for step in &entry.pre {
        match step {
            LoweringStep::Transpose { operand, from, to } => {
                let target = match operand {
                    Operand::Input => &mut cur_in,
                    Operand::Kernel => &mut cur_k,
                    Operand::Output => return Err("output transpose before dispatch".into()),
                };
                if target.tag != *from {
                    return Err(format!("transpose from {from} applied to {}", target.tag));
                }
                *target = Shape::new(permute_shape(&target.dims, *from, *to).ok_or("bad transpose")?, *to);
            }
            LoweringStep::Im2col { groups } | LoweringStep::KernelMatrix { groups } => {
                if *groups != params.g {
                    return Err(format!("{groups} groups planned for g={}", params.g));
                }
                patches = true;
            }
            LoweringStep::Reshape { .. } => return Err("reshape before dispatch".into()),
        }
    }
    let (want_in, want_k, produced) = match entry.dispatch {
        Dispatch::FlexibleConv => (LayoutTag::Nhwc, LayoutTag::Rsck, LayoutTag::Npqk),
        Dispatch::SparseGemm(o) | Dispatch::SystolicGemm(o) => {
            if !patches {
                return Err("GEMM dispatch without im2col".into());
            }
            match o {
                GemmOrder::WeightData => (LayoutTag::Nchw, LayoutTag::Kcrs, LayoutTag::Nkpq),
                GemmOrder::DataWeight => (LayoutTag::Nhwc, LayoutTag::Rsck, LayoutTag::Npqk),
            }
        }
        _ => return Err("conv planned on a non-conv entry point".into()),
    };
    let expect_in = Shape::new(crate::tensorops::conv_input_dims(params, want_in), want_in);
    let expect_k = Shape::new(conv_kernel_dims(params, want_k), want_k);
    if cur_in != expect_in || cur_k != expect_k {
        return Err(format!(
            "simulator wants {expect_in} / {expect_k}, plan delivers {cur_in} / {cur_k}"
        ));
    }
    let mut cur_out = Shape::new(conv_output_dims(params, produced), produced);
    for step in &entry.post {
        match step {
            LoweringStep::Transpose {
                operand: Operand::Output,
                from,
                to,
            } if cur_out.tag == *from => {
                cur_out = Shape::new(permute_shape(&cur_out.dims, *from, *to).ok_or("bad transpose")?, *to);
            }
            LoweringStep::Reshape {
                operand: Operand::Output,
                dims,
                tag,
            } => {
                if dims.iter().product::<usize>() != cur_out.numel() {
                    return Err("reshape changes element count".into());
                }
                cur_out = Shape::new(dims.clone(), *tag);
            }
            other => return Err(format!("unexpected step after dispatch: {other:?}")),
        }
    }
    if cur_out != output {
        return Err(format!("plan produces {cur_out}, model expects {output}"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Data seed; `None` uses the model's seed.
    pub seed: Option<u64>,
    pub value_mode: ValueMode,
    /// Keep every layer's output for verification.
    pub retain_outputs: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: None,
            value_mode: ValueMode::Integer,
            retain_outputs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub id: String,
    pub op: &'static str,
    pub offloaded: bool,
    /// `None` for host-executed layers.
    pub metrics: Option<SimMetrics>,
    pub output: Option<Tensor>,
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub layers: Vec<LayerReport>,
    /// Sums over offloaded layers.
    pub totals: SimMetrics,
    pub input: Tensor,
    pub output: Tensor,
    pub seed: u64,
    pub value_mode: ValueMode,
    pub sparsity_ratio: u32,
}

fn mix(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Seeded model input: whole numbers 0..=3 in integer mode.
pub fn generate_input(shape: &Shape, seed: u64, mode: ValueMode) -> Tensor {
    Tensor::random(shape.dims.clone(), shape.tag, seed, mode, (0, 3)).expect("consistent dims")
}

/// Parameter tensor of layer `index`: the blob named by the layer, or
/// seeded values in -1..=1 with `sparsity_ratio` percent pruned to zero.
pub fn layer_parameters(
    layer: &Layer,
    index: usize,
    seed: u64,
    mode: ValueMode,
    sparsity_ratio: u32,
) -> Result<Option<Tensor>, RunError> {
    let (dims, tag) = match &layer.op {
        Op::Conv2d {
            params, kernel_layout, ..
        } => (conv_kernel_dims(params, kernel_layout.tag()), kernel_layout.tag()),
        Op::Dense(fc) => (vec![fc.in_features, fc.out_features], LayoutTag::Matrix),
        Op::BiasAdd => {
            let shape = layer
                .input_shape
                .as_ref()
                .ok_or_else(|| RunError::layer(&layer.id, ErrorClass::Model, "shapes not inferred"))?;
            let channels = match shape.tag {
                LayoutTag::Nhwc => shape.dims[3],
                _ => shape.dims[1],
            };
            (vec![1, channels], LayoutTag::Matrix)
        }
        _ => return Ok(None),
    };
    if let Some(path) = &layer.weights {
        let bytes = std::fs::read(path)
            .map_err(|e| RunError::layer(&layer.id, ErrorClass::Io, format!("{}: {e}", path.display())))?;
        return Tensor::from_le_bytes(dims, tag, &bytes)
            .map(Some)
            .map_err(|e| RunError::layer(&layer.id, ErrorClass::Model, e));
    }
    let s = mix(seed, index);
    let mut t = Tensor::random(dims, tag, s, mode, (-1, 1)).expect("consistent dims");
    if sparsity_ratio > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xA5A5_A5A5);
        let p = f64::from(sparsity_ratio.min(100)) / 100.0;
        for v in t.data_mut() {
            if rng.gen_bool(p) {
                *v = 0.0;
            }
        }
    }
    Ok(Some(t))
}

fn sim_err(id: &str) -> impl Fn(SimError) -> RunError + '_ {
    move |e| RunError::layer(id, ErrorClass::Simulation, e)
}

fn tensor_err(id: &str) -> impl Fn(TensorError) -> RunError + '_ {
    move |e| RunError::layer(id, ErrorClass::Simulation, e)
}

fn gemm_sim(dispatch: Dispatch, a: &Tensor, b: &Tensor, cfg: &ValidatedConfig) -> Result<SimReport, SimError> {
    match dispatch {
        Dispatch::SparseGemm(_) => simulate_sparse_gemm(a, b, cfg),
        _ => simulate_systolic_gemm(a, b, cfg),
    }
}

/// Executes one offloaded layer according to its plan entry.
fn execute_offloaded(
    layer: &Layer,
    entry: &PlanEntry,
    input: &Tensor,
    weights: &Tensor,
    cfg: &ValidatedConfig,
) -> Result<(Tensor, SimMetrics), RunError> {
    let id = layer.id.as_str();
    let (mut x, mut w) = (input.clone(), weights.clone());
    for step in &entry.pre {
        if let LoweringStep::Transpose { operand, from, to } = step {
            match operand {
                Operand::Input => x = transpose(&x, *from, *to).map_err(tensor_err(id))?,
                Operand::Kernel => w = transpose(&w, *from, *to).map_err(tensor_err(id))?,
                Operand::Output => {}
            }
        }
    }
    let (mut out, metrics) = match (&layer.op, entry.dispatch, entry.mapping) {
        (Op::Conv2d { params, .. }, Dispatch::FlexibleConv, Some(Mapping::Conv(m))) => {
            let rep = simulate_flexible_conv(&x, &w, params, &m, cfg).map_err(sim_err(id))?;
            (rep.output.clone(), rep.metrics())
        }
        (Op::Dense(fc), Dispatch::FlexibleFc, Some(Mapping::Fc(m))) => {
            let rep = simulate_flexible_fc(&x, &w, fc, &m, cfg).map_err(sim_err(id))?;
            (rep.output.clone(), rep.metrics())
        }
        (Op::Dense(_), d @ (Dispatch::SparseGemm(_) | Dispatch::SystolicGemm(_)), _) => {
            let rep = gemm_sim(d, &x, &w, cfg).map_err(sim_err(id))?;
            (rep.output.clone(), rep.metrics())
        }
        (Op::Conv2d { params: p, .. }, d @ (Dispatch::SparseGemm(o) | Dispatch::SystolicGemm(o)), _) => {
            // one GEMM per channel group
            let (kg, fields) = (p.k_per_group(), p.p * p.q);
            let mut buf = vec![0f32; p.k * fields];
            let mut parts = Vec::with_capacity(p.g);
            for g in 0..p.g {
                let patches = im2col_group(&x, p, g).map_err(tensor_err(id))?;
                let kmat = kernel_matrix_group(&w, p, g).map_err(tensor_err(id))?;
                let rep = match o {
                    GemmOrder::WeightData => gemm_sim(d, &kmat, &patches, cfg),
                    GemmOrder::DataWeight => gemm_sim(d, &patches, &kmat, cfg),
                }
                .map_err(sim_err(id))?;
                let data = rep.output.data();
                match o {
                    // k_g x pq block: rows g*kg.. of a k x pq (NKPQ) buffer
                    GemmOrder::WeightData => buf[g * kg * fields..(g + 1) * kg * fields].copy_from_slice(data),
                    // pq x k_g block: columns g*kg.. of a pq x k (NPQK) buffer
                    GemmOrder::DataWeight => {
                        for f in 0..fields {
                            buf[f * p.k + g * kg..f * p.k + (g + 1) * kg].copy_from_slice(&data[f * kg..(f + 1) * kg]);
                        }
                    }
                }
                parts.push(rep.metrics());
            }
            let tag = match o {
                GemmOrder::WeightData => LayoutTag::Nkpq,
                GemmOrder::DataWeight => LayoutTag::Npqk,
            };
            let out = Tensor::new(conv_output_dims(p, tag), tag, buf).map_err(tensor_err(id))?;
            (out, SimMetrics::combine(&parts))
        }
        _ => {
            return Err(RunError::layer(
                id,
                ErrorClass::Simulation,
                "plan does not fit the layer",
            ));
        }
    };
    for step in &entry.post {
        match step {
            LoweringStep::Transpose {
                operand: Operand::Output,
                from,
                to,
            } => out = transpose(&out, *from, *to).map_err(tensor_err(id))?,
            LoweringStep::Reshape {
                operand: Operand::Output,
                dims,
                tag,
            } => out = out.reshape(dims.clone(), *tag).map_err(tensor_err(id))?,
            _ => {}
        }
    }
    Ok((out, metrics))
}

/// Runs a model layer by layer. `input` overrides the seeded input.
pub fn run_model(
    model: &Model,
    cfg: &ValidatedConfig,
    mappings: Option<&MappingFile>,
    input: Option<Tensor>,
    opts: &RunOptions,
) -> Result<RunReport, RunError> {
    let model = infer_shapes(model)?;
    let plan = plan_model(&model, cfg, mappings)?;
    let seed = opts.seed.unwrap_or(model.seed);
    let sparsity = cfg.config().sparsity_ratio;
    let in_shape = model.input_shape()?;
    let input = match input {
        Some(t) => {
            if t.dims() != in_shape.dims.as_slice() || t.tag() != in_shape.tag {
                return Err(RunError::Input(format!(
                    "tensor ({:?}) {} does not match model input {in_shape}",
                    t.dims(),
                    t.tag()
                )));
            }
            t
        }
        None => generate_input(&in_shape, seed, opts.value_mode),
    };

    let mut current = input.clone();
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut parts = Vec::new();
    for (i, (layer, entry)) in model.layers.iter().zip(&plan.entries).enumerate() {
        let params = layer_parameters(layer, i, seed, opts.value_mode, sparsity)?;
        let (out, metrics) = if entry.offloaded {
            let w = params.as_ref().expect("offloaded layers have weights");
            let (out, m) = execute_offloaded(layer, entry, &current, w, cfg)?;
            parts.push(m);
            (out, Some(m))
        } else {
            let Dispatch::Fallback(kind) = entry.dispatch else {
                unreachable!("host layers plan a fallback")
            };
            let mut args = vec![&current];
            args.extend(params.as_ref());
            (fallback_op(kind, &args).map_err(tensor_err(&layer.id))?, None)
        };
        layers.push(LayerReport {
            id: layer.id.clone(),
            op: layer.op.name(),
            offloaded: entry.offloaded,
            metrics,
            output: opts.retain_outputs.then(|| out.clone()),
            notice: entry.notice.clone(),
        });
        current = out;
    }
    let mut totals = SimMetrics::combine(&parts);
    if parts.is_empty() {
        totals = SimMetrics::default();
    }
    Ok(RunReport {
        layers,
        totals,
        input,
        output: current,
        seed,
        value_mode: opts.value_mode,
        sparsity_ratio: sparsity,
    })
}

/// `layer_id,op,offloaded,cycles,psums,macs,skipped_macs,utilization`,
/// then a `TOTAL` row.
pub fn report_csv(report: &RunReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "layer_id",
        "op",
        "offloaded",
        "cycles",
        "psums",
        "macs",
        "skipped_macs",
        "utilization",
    ])
    .unwrap();
    let row = |m: &SimMetrics| {
        [
            m.cycles.to_string(),
            m.psums.to_string(),
            m.macs.to_string(),
            m.skipped_macs.to_string(),
            format!("{:.6}", m.utilization),
        ]
    };
    for l in &report.layers {
        let m = l.metrics.unwrap_or_default();
        let mut rec = vec![l.id.clone(), l.op.to_string(), l.offloaded.to_string()];
        rec.extend(row(&m));
        w.write_record(&rec).unwrap();
    }
    let mut rec = vec!["TOTAL".to_string(), String::new(), String::new()];
    rec.extend(row(&report.totals));
    w.write_record(&rec).unwrap();
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub id: String,
    pub ok: bool,
    pub detail: Option<String>,
}

fn outputs_match(a: &Tensor, b: &Tensor, mode: ValueMode) -> Option<String> {
    if a.dims() != b.dims() || a.tag() != b.tag() {
        return Some(format!(
            "shape ({:?}) {} vs ({:?}) {}",
            a.dims(),
            a.tag(),
            b.dims(),
            b.tag()
        ));
    }
    let bad = a.data().iter().zip(b.data()).position(|(&x, &y)| match mode {
        ValueMode::Integer => x != y,
        ValueMode::Float => {
            let (x, y) = (x as f64, y as f64);
            (x - y).abs() > 1e-6 && (x - y).abs() > 1e-4 * x.abs().max(y.abs())
        }
    });
    bad.map(|i| format!("element {i}: {} vs reference {}", a.data()[i], b.data()[i]))
}

/// Recomputes every layer with the reference kernels from the previous
/// layer's recorded output and compares. Exact in integer mode, 1e-4
/// relative in float mode.
pub fn verify_against_reference(model: &Model, input: &Tensor, run: &RunReport) -> Vec<LayerCheck> {
    let model = match infer_shapes(model) {
        Ok(m) => m,
        Err(e) => {
            return vec![LayerCheck {
                id: String::new(),
                ok: false,
                detail: Some(e.to_string()),
            }]
        }
    };
    let mut prev = Some(input.clone());
    let mut checks = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let recorded = run
            .layers
            .get(i)
            .filter(|l| l.id == layer.id)
            .and_then(|l| l.output.clone());
        let reference = prev
            .as_ref()
            .ok_or("previous output not retained".to_string())
            .and_then(|x| {
                let params = layer_parameters(layer, i, run.seed, run.value_mode, run.sparsity_ratio)
                    .map_err(|e| e.to_string())?;
                let r = match (&layer.op, params.as_ref()) {
                    (Op::Conv2d { params: p, .. }, Some(w)) => conv2d_ref(x, w, p),
                    (Op::Dense(_), Some(w)) => dense_ref(x, w),
                    (op, params) => {
                        let mut args = vec![x];
                        args.extend(params);
                        fallback_op(fallback_kind(op).expect("host op"), &args)
                    }
                };
                r.map_err(|e| e.to_string())
            });
        let detail = match (&recorded, &reference) {
            (None, _) => Some("output not retained".to_string()),
            (_, Err(e)) => Some(e.clone()),
            (Some(got), Ok(want)) => outputs_match(got, want, run.value_mode),
        };
        checks.push(LayerCheck {
            id: layer.id.clone(),
            ok: detail.is_none(),
            detail,
        });
        prev = recorded;
    }
    checks
}
