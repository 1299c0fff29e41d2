//! Independent oracles shared by the integration tests. Nothing here calls
//! the library's reference kernels or cost code.
#![allow(dead_code)]

use accelsim::accelconfig::ValidatedConfig;
use accelsim::graph::{ConvLayerParams, FcLayerParams};
use accelsim::mapping::{ConvMapping, FcMapping};
use accelsim::tensorops::{LayoutTag, Tensor};

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

/// Value of input element (channel, row, col) whatever the layout.
fn input_at(x: &Tensor, p: &ConvLayerParams, c: usize, h: usize, w: usize) -> f64 {
    let i = match x.tag() {
        LayoutTag::Nhwc => (h * p.w + w) * p.c + c,
        _ => (c * p.h + h) * p.w + w,
    };
    x.data()[i] as f64
}

/// Kernel element (out channel, in channel within group, r, s).
fn kernel_at(k: &Tensor, p: &ConvLayerParams, oc: usize, ic: usize, r: usize, s: usize) -> f64 {
    let cg = p.c / p.g;
    let i = match k.tag() {
        LayoutTag::Rsck => ((r * p.s + s) * cg + ic) * p.k + oc,
        _ => ((oc * cg + ic) * p.r + r) * p.s + s,
    };
    k.data()[i] as f64
}

/// Direct seven-loop convolution; result indexed `[oc][y][x]`.
pub fn naive_conv(x: &Tensor, k: &Tensor, p: &ConvLayerParams) -> Vec<f64> {
    let (cg, kg) = (p.c / p.g, p.k / p.g);
    let mut out = vec![0f64; p.k * p.p * p.q];
    for oc in 0..p.k {
        let g = oc / kg;
        for y in 0..p.p {
            for xo in 0..p.q {
                let mut acc = 0f64;
                for ic in 0..cg {
                    for r in 0..p.r {
                        for s in 0..p.s {
                            let ih = (y * p.stride_h + r) as isize - p.pad_h as isize;
                            let iw = (xo * p.stride_w + s) as isize - p.pad_w as isize;
                            if ih < 0 || iw < 0 || ih >= p.h as isize || iw >= p.w as isize {
                                continue;
                            }
                            acc +=
                                input_at(x, p, g * cg + ic, ih as usize, iw as usize) * kernel_at(k, p, oc, ic, r, s);
                        }
                    }
                }
                out[(oc * p.p + y) * p.q + xo] = acc;
            }
        }
    }
    out
}

/// Reads a conv output in any activation layout as `[oc][y][x]`.
pub fn conv_output_as_kpq(t: &Tensor, p: &ConvLayerParams) -> Vec<f64> {
    let mut out = vec![0f64; p.k * p.p * p.q];
    for oc in 0..p.k {
        for y in 0..p.p {
            for x in 0..p.q {
                let i = match t.tag() {
                    LayoutTag::Nhwc | LayoutTag::Npqk => (y * p.q + x) * p.k + oc,
                    _ => (oc * p.p + y) * p.q + x,
                };
                out[(oc * p.p + y) * p.q + x] = t.data()[i] as f64;
            }
        }
    }
    out
}

pub fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] as f64 * b[t * n + j] as f64).sum();
        }
    }
    out
}

pub fn as_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn cd(a: usize, b: usize) -> u64 {
    a.div_ceil(b) as u64
}

fn log2_ceil(v: u64) -> u64 {
    let mut levels = 0;
    while (1u64 << levels) < v {
        levels += 1;
    }
    levels
}

/// Closed-form flexible-array cycles for a conv mapping.
pub fn conv_cycles_formula(p: &ConvLayerParams, m: &ConvMapping, ms: u64, dn: u64, rn: u64, acc_buf: bool) -> u64 {
    let (cg, kg) = (p.c / p.g, p.k / p.g);
    let spatial = cd(kg, m.t_k) * cd(p.g, m.t_g) * cd(p.p, m.t_x) * cd(p.q, m.t_y);
    let steps = cd(p.r, m.t_r) * cd(p.s, m.t_s) * cd(cg, m.t_c);
    let inputs = m.t_g * m.t_c * ((m.t_x - 1) * p.stride_h + m.t_r) * ((m.t_y - 1) * p.stride_w + m.t_s);
    let elements = (m.t_r * m.t_s * m.t_c * m.t_k * m.t_g + inputs) as u64;
    let outputs = (m.t_k * m.t_g * m.t_x * m.t_y) as u64;
    let fixed = elements.div_ceil(dn) + 1 + log2_ceil(ms);
    let red = outputs.div_ceil(rn);
    let red_partial = if acc_buf { red } else { (2 * outputs).div_ceil(rn) };
    spatial * (steps * fixed + (steps - 1) * red_partial + red)
}

pub fn fc_cycles_formula(fc: &FcLayerParams, m: &FcMapping, ms: u64, dn: u64, rn: u64, acc_buf: bool) -> u64 {
    let spatial = cd(fc.out_features, m.t_s);
    let steps = cd(fc.in_features, m.t_k);
    let elements = (m.t_s * m.t_k + m.t_k) as u64;
    let fixed = elements.div_ceil(dn) + 1 + log2_ceil(ms);
    let red = (m.t_s as u64).div_ceil(rn);
    let red_partial = if acc_buf { red } else { (2 * m.t_s as u64).div_ceil(rn) };
    spatial * (steps * fixed + (steps - 1) * red_partial + red)
}

pub fn cfg_numbers(cfg: &ValidatedConfig) -> (u64, u64, u64, bool) {
    (
        cfg.multipliers(),
        cfg.dn_bw(),
        cfg.rn_bw(),
        cfg.config().accumulation_buffer,
    )
}

/// Every tile vector from the Cartesian product of `lists` whose product
/// fits `budget`, in no particular order.
pub fn brute_force_points(lists: &[Vec<usize>], budget: u64) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for l in lists {
        let mut next = Vec::new();
        for prefix in &out {
            for &v in l {
                let mut t = prefix.clone();
                t.push(v);
                next.push(t);
            }
        }
        out = next;
    }
    out.retain(|t| t.iter().map(|&v| v as u64).product::<u64>() <= budget);
    out
}

pub fn divisors_naive(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut r = vec![0f64; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
