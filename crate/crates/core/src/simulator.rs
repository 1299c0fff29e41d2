//! Analytical cycle models of the three accelerator families, executed
//! alongside the functional computation.
//!
//! Flexible linear array, per tile iteration:
//!
//! ```text
//! cost = ceil(delivered / dn_bw) + 1 + tree_levels + ceil(outputs / rn_bw)
//! ```
//!
//! Distribution, multiply, tree reduction and output collection are not
//! overlapped. Without an accumulation buffer, iterations that leave
//! partial sums behind move each of them out and back in, doubling the
//! collection traffic of that iteration.
//!
//! Sparse GEMM skips every product with an exactly-zero operand; the
//! systolic mesh charges fill, compute and drain per output block.

use thiserror::Error;

use crate::accelconfig::{ControllerType, ValidatedConfig};
use crate::graph::{ConvLayerParams, FcLayerParams};
use crate::mapping::{validate_mapping, ConvMapping, FcMapping, Mapping, MappingError, Workload};
use crate::tensorops::{LayoutTag, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("simulator expects controller {expected}, config has {found}")]
    WrongController {
        expected: ControllerType,
        found: ControllerType,
    },
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-layer counters without the output tensor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimMetrics {
    pub cycles: u64,
    pub psums: u64,
    pub macs: u64,
    pub skipped_macs: u64,
    pub utilization: f64,
}

impl SimMetrics {
    /// Sums counters; utilization becomes the cycle-weighted mean.
    pub fn combine(parts: &[SimMetrics]) -> SimMetrics {
        let mut out = SimMetrics::default();
        let mut weighted = 0f64;
        for p in parts {
            out.cycles += p.cycles;
            out.psums += p.psums;
            out.macs += p.macs;
            out.skipped_macs += p.skipped_macs;
            weighted += p.utilization * p.cycles as f64;
        }
        if out.cycles > 0 {
            out.utilization = weighted / out.cycles as f64;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub cycles: u64,
    pub psums: u64,
    pub macs: u64,
    pub skipped_macs: u64,
    pub utilization: f64,
    pub output: Tensor,
}

impl SimReport {
    pub fn metrics(&self) -> SimMetrics {
        SimMetrics {
            cycles: self.cycles,
            psums: self.psums,
            macs: self.macs,
            skipped_macs: self.skipped_macs,
            utilization: self.utilization,
        }
    }
}

fn expect_controller(cfg: &ValidatedConfig, expected: ControllerType) -> Result<(), SimError> {
    if cfg.controller() != expected {
        return Err(SimError::WrongController {
            expected,
            found: cfg.controller(),
        });
    }
    Ok(())
}

fn expect_dims(t: &Tensor, tag: LayoutTag, dims: &[usize], what: &str) -> Result<(), SimError> {
    if t.tag() != tag {
        return Err(TensorError::TagMismatch {
            expected: tag,
            found: t.tag(),
        }
        .into());
    }
    if t.dims() != dims {
        return Err(TensorError::Shape(format!("{what} dims {:?}, expected {dims:?}", t.dims())).into());
    }
    Ok(())
}

#[inline]
fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Cost of one flexible-array iteration: `(fixed part, final collection,
/// non-final collection)`.
fn flex_iteration_cost(delivered: u64, outputs: u64, cfg: &ValidatedConfig) -> (u64, u64, u64) {
    let fixed = ceil_div(delivered, cfg.dn_bw()) + 1 + cfg.tree_levels() as u64;
    let red = ceil_div(outputs, cfg.rn_bw());
    let red_partial = if cfg.config().accumulation_buffer {
        red
    } else {
        ceil_div(2 * outputs, cfg.rn_bw())
    };
    (fixed, red, red_partial)
}

/// Conv on the flexible linear array. Input NHWC, kernel RSCK, output NPQK.
pub fn simulate_flexible_conv(
    input: &Tensor,
    kernel: &Tensor,
    params: &ConvLayerParams,
    m: &ConvMapping,
    cfg: &ValidatedConfig,
) -> Result<SimReport, SimError> {
    expect_controller(cfg, ControllerType::FlexLinear)?;
    let p = params;
    validate_mapping(&Mapping::Conv(*m), &Workload::Conv(*p), cfg)?;
    let (cg, kg) = (p.c_per_group(), p.k_per_group());
    expect_dims(input, LayoutTag::Nhwc, &[1, p.h, p.w, p.c], "input")?;
    expect_dims(kernel, LayoutTag::Rsck, &[p.r, p.s, cg, p.k], "kernel")?;

    let window_h = (m.t_x - 1) * p.stride_h + m.t_r;
    let window_w = (m.t_y - 1) * p.stride_w + m.t_s;
    let delivered = (m.t_r * m.t_s * m.t_c * m.t_k * m.t_g + m.t_g * m.t_c * window_h * window_w) as u64;
    let mapped_outputs = (m.t_k * m.t_g * m.t_x * m.t_y * m.t_n) as u64;
    let (fixed, red, red_partial) = flex_iteration_cost(delivered, mapped_outputs, cfg);

    let x = input.data();
    let wt = kernel.data();
    let mut acc = vec![0f64; p.p * p.q * p.k];
    let (mut cycles, mut psums, mut macs) = (0u64, 0u64, 0u64);

    for g0 in (0..p.g).step_by(m.t_g) {
        let g1 = (g0 + m.t_g).min(p.g);
        for k0 in (0..kg).step_by(m.t_k) {
            let k1 = (k0 + m.t_k).min(kg);
            for x0 in (0..p.p).step_by(m.t_x) {
                let x1 = (x0 + m.t_x).min(p.p);
                for y0 in (0..p.q).step_by(m.t_y) {
                    let y1 = (y0 + m.t_y).min(p.q);
                    let outputs = ((g1 - g0) * (k1 - k0) * (x1 - x0) * (y1 - y0)) as u64;
                    for r0 in (0..p.r).step_by(m.t_r) {
                        let r1 = (r0 + m.t_r).min(p.r);
                        for s0 in (0..p.s).step_by(m.t_s) {
                            let s1 = (s0 + m.t_s).min(p.s);
                            for c0 in (0..cg).step_by(m.t_c) {
                                let c1 = (c0 + m.t_c).min(cg);
                                let last = r1 == p.r && s1 == p.s && c1 == cg;
                                cycles += fixed + if last { red } else { red_partial };
                                psums += outputs;
                                macs += outputs * ((r1 - r0) * (s1 - s0) * (c1 - c0)) as u64;
                                for gi in g0..g1 {
                                    for ki in k0..k1 {
                                        let oc = gi * kg + ki;
                                        for xi in x0..x1 {
                                            for yi in y0..y1 {
                                                let mut sum = 0f64;
                                                for ri in r0..r1 {
                                                    let ih = xi * p.stride_h + ri;
                                                    if ih < p.pad_h || ih - p.pad_h >= p.h {
                                                        continue;
                                                    }
                                                    let ih = ih - p.pad_h;
                                                    for si in s0..s1 {
                                                        let iw = yi * p.stride_w + si;
                                                        if iw < p.pad_w || iw - p.pad_w >= p.w {
                                                            continue;
                                                        }
                                                        let iw = iw - p.pad_w;
                                                        let xb = (ih * p.w + iw) * p.c + gi * cg;
                                                        let wb = (ri * p.s + si) * cg * p.k + oc;
                                                        for ci in c0..c1 {
                                                            sum += x[xb + ci] as f64 * wt[wb + ci * p.k] as f64;
                                                        }
                                                    }
                                                }
                                                acc[(xi * p.q + yi) * p.k + oc] += sum;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let output = Tensor::new(
        vec![1, p.p, p.q, p.k],
        LayoutTag::Npqk,
        acc.into_iter().map(|v| v as f32).collect(),
    )?;
    Ok(SimReport {
        cycles,
        psums,
        macs,
        skipped_macs: 0,
        utilization: m.footprint() as f64 / cfg.multipliers() as f64,
        output,
    })
}

/// Fully connected layer on the flexible linear array. Input `1 x in`,
/// weights `in x out`, output `1 x out`.
pub fn simulate_flexible_fc(
    input: &Tensor,
    weights: &Tensor,
    params: &FcLayerParams,
    m: &FcMapping,
    cfg: &ValidatedConfig,
) -> Result<SimReport, SimError> {
    expect_controller(cfg, ControllerType::FlexLinear)?;
    validate_mapping(&Mapping::Fc(*m), &Workload::Fc(*params), cfg)?;
    let (n_in, n_out) = (params.in_features, params.out_features);
    expect_dims(input, LayoutTag::Matrix, &[1, n_in], "input")?;
    expect_dims(weights, LayoutTag::Matrix, &[n_in, n_out], "weights")?;

    let delivered = (m.t_s * m.t_k + m.t_k) as u64;
    let (fixed, red, red_partial) = flex_iteration_cost(delivered, (m.t_s * m.t_n) as u64, cfg);
    let x = input.data();
    let wt = weights.data();
    let mut acc = vec![0f64; n_out];
    let (mut cycles, mut psums, mut macs) = (0u64, 0u64, 0u64);
    for s0 in (0..n_out).step_by(m.t_s) {
        let s1 = (s0 + m.t_s).min(n_out);
        for k0 in (0..n_in).step_by(m.t_k) {
            let k1 = (k0 + m.t_k).min(n_in);
            let last = k1 == n_in;
            cycles += fixed + if last { red } else { red_partial };
            psums += (s1 - s0) as u64;
            macs += ((s1 - s0) * (k1 - k0)) as u64;
            for (o, slot) in acc[s0..s1].iter_mut().enumerate() {
                let col = s0 + o;
                let mut sum = 0f64;
                for i in k0..k1 {
                    sum += x[i] as f64 * wt[i * n_out + col] as f64;
                }
                *slot += sum;
            }
        }
    }
    Ok(SimReport {
        cycles,
        psums,
        macs,
        skipped_macs: 0,
        utilization: m.footprint() as f64 / cfg.multipliers() as f64,
        output: Tensor::matrix(1, n_out, acc.into_iter().map(|v| v as f32).collect())?,
    })
}

fn gemm_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize), SimError> {
    if a.tag() != LayoutTag::Matrix || b.tag() != LayoutTag::Matrix {
        return Err(TensorError::Shape("GEMM operands must be matrices".into()).into());
    }
    if a.cols() != b.rows() {
        return Err(TensorError::Shape(format!(
            "inner dimensions differ: {}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ))
        .into());
    }
    Ok((a.rows(), a.cols(), b.cols()))
}

/// Sparse GEMM engine. Products with an exactly-zero operand are skipped;
/// the engine tiles internally, so no mapping is taken.
pub fn simulate_sparse_gemm(a: &Tensor, b: &Tensor, cfg: &ValidatedConfig) -> Result<SimReport, SimError> {
    expect_controller(cfg, ControllerType::SparseGemm)?;
    let (m, k, n) = gemm_dims(a, b)?;
    let ms = cfg.multipliers();
    let (ad, bd) = (a.data(), b.data());
    let mut acc = vec![0f64; m * n];
    let mut hits = vec![0u64; m * n];
    // nonzero column indices of each row of b
    let b_nz: Vec<Vec<usize>> = (0..k)
        .map(|row| (0..n).filter(|&j| bd[row * n + j] != 0.0).collect())
        .collect();
    for i in 0..m {
        let out = &mut acc[i * n..(i + 1) * n];
        let cnt = &mut hits[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &bd[kk * n..(kk + 1) * n];
            for &j in &b_nz[kk] {
                out[j] += av * brow[j] as f64;
                cnt[j] += 1;
            }
        }
    }
    let effective: u64 = hits.iter().sum();
    let nonzero = (ad.iter().filter(|v| **v != 0.0).count() + bd.iter().filter(|v| **v != 0.0).count()) as u64;
    let compute = ceil_div(effective, ms);
    let cycles = compute + ceil_div(nonzero, cfg.dn_bw()) + ceil_div((m * n) as u64, cfg.rn_bw());
    let psums = hits.iter().map(|&h| ceil_div(h, ms)).sum();
    let dense = (m * k * n) as u64;
    Ok(SimReport {
        cycles,
        psums,
        macs: effective,
        skipped_macs: dense - effective,
        utilization: if compute == 0 {
            0.0
        } else {
            effective as f64 / (compute * ms) as f64
        },
        output: Tensor::matrix(m, n, acc.into_iter().map(|v| v as f32).collect())?,
    })
}

/// Output-stationary systolic mesh: every `ms_rows x ms_cols` output block
/// costs `K + ms_rows + ms_cols - 1` cycles.
pub fn simulate_systolic_gemm(a: &Tensor, b: &Tensor, cfg: &ValidatedConfig) -> Result<SimReport, SimError> {
    expect_controller(cfg, ControllerType::SystolicOs)?;
    let (m, k, n) = gemm_dims(a, b)?;
    let (rows, cols) = cfg.mesh();
    let (ad, bd) = (a.data(), b.data());
    let mut acc = vec![0f64; m * n];
    for i in 0..m {
        let out = &mut acc[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = ad[i * k + kk] as f64;
            for (o, &bv) in out.iter_mut().zip(&bd[kk * n..(kk + 1) * n]) {
                *o += av * bv as f64;
            }
        }
    }
    let blocks = ceil_div(m as u64, rows) * ceil_div(n as u64, cols);
    let cycles = blocks * (k as u64 + rows + cols - 1);
    let macs = (m * k * n) as u64;
    Ok(SimReport {
        cycles,
        // each output accumulates once per reduction step in place
        psums: macs,
        macs,
        skipped_macs: 0,
        utilization: macs as f64 / (cycles * rows * cols) as f64,
        output: Tensor::matrix(m, n, acc.into_iter().map(|v| v as f32).collect())?,
    })
}

/// Partial-sum count of a layer under a mapping, without simulating.
///
/// Conv: `g * k_g * p * q * ceil(r/t_r) * ceil(s/t_s) * ceil(c_g/t_c)`.
/// Fc: `out * ceil(in/t_k)`.
pub fn count_psums(workload: &Workload, m: &Mapping) -> Result<u64, MappingError> {
    let bounds = workload.tile_bounds();
    if m.tiles().len() != bounds.len() || m.tiles().iter().zip(&bounds).any(|(&t, &b)| t == 0 || t > b) {
        return Err(MappingError::Invalid(crate::mapping::MappingDiagnostics(vec![
            format!("mapping {m} out of range for the layer"),
        ])));
    }
    let cd = |a: usize, b: usize| a.div_ceil(b) as u64;
    Ok(match (workload, m) {
        (Workload::Conv(p), Mapping::Conv(t)) => {
            (p.g * p.k_per_group() * p.p * p.q) as u64 * cd(p.r, t.t_r) * cd(p.s, t.t_s) * cd(p.c_per_group(), t.t_c)
        }
        (Workload::Fc(fc), Mapping::Fc(t)) => fc.out_features as u64 * cd(fc.in_features, t.t_k),
        _ => {
            return Err(MappingError::Invalid(crate::mapping::MappingDiagnostics(vec![
                "mapping kind does not match the layer kind".into(),
            ])))
        }
    })
}
