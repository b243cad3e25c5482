//! Single-level 2D Haar wavelet transform and the wavelet-attention block.
//!
//! The transform follows the cyclic-filter-matrix form: with `L` the low-pass
//! and `H` the high-pass stride-2 filter matrices,
//! `ll = L I Lᵀ`, `lh = H I Lᵀ`, `hl = L I Hᵀ`, `hh = H I Hᵀ`.
//! For the 2-tap Haar pair this collapses to independent 2x2 block transforms,
//! which is what the kernels below compute; equivalence with the explicit
//! matrix products is covered by tests.

use crate::autodiff::{NodeId, Tape};
use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};

/// The orthonormal Haar analysis filter pair.
#[derive(Clone, Copy, Debug)]
pub struct HaarFilterBank {
    pub low: [f64; 2],
    pub high: [f64; 2],
}

impl HaarFilterBank {
    pub fn haar() -> Self {
        let c = std::f64::consts::FRAC_1_SQRT_2;
        HaarFilterBank {
            low: [c, c],
            high: [c, -c],
        }
    }

    /// low·low + high·high, which is 2 for an orthonormal pair.
    pub fn energy(&self) -> f64 {
        self.low[0] * self.low[0]
            + self.low[1] * self.low[1]
            + self.high[0] * self.high[0]
            + self.high[1] * self.high[1]
    }

    /// low·high, which is 0 for orthogonal filters.
    pub fn cross(&self) -> f64 {
        self.low[0] * self.high[0] + self.low[1] * self.high[1]
    }
}

/// The four half-resolution sub-bands of one N x N image.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBands {
    half: usize,
    pub ll: Vec<f64>,
    pub lh: Vec<f64>,
    pub hl: Vec<f64>,
    pub hh: Vec<f64>,
}

impl SubBands {
    pub fn new(half: usize, ll: Vec<f64>, lh: Vec<f64>, hl: Vec<f64>, hh: Vec<f64>) -> Result<Self> {
        let m = half * half;
        if ll.len() != m || lh.len() != m || hl.len() != m || hh.len() != m {
            return Err(invalid(format!(
                "sub-band lengths ({}, {}, {}, {}) do not match half-size {}",
                ll.len(),
                lh.len(),
                hl.len(),
                hh.len(),
                half
            )));
        }
        Ok(SubBands { half, ll, lh, hl, hh })
    }

    /// Side length of each band.
    pub fn half(&self) -> usize {
        self.half
    }

    pub fn band(&self, index: usize) -> &[f64] {
        match index {
            0 => &self.ll,
            1 => &self.lh,
            2 => &self.hl,
            3 => &self.hh,
            _ => panic!("band index {index} out of range"),
        }
    }

    pub const BAND_NAMES: [&'static str; 4] = ["ll", "lh", "hl", "hh"];

    /// Bands flattened in ll, lh, hl, hh order (the tape layout).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 * self.half * self.half);
        out.extend_from_slice(&self.ll);
        out.extend_from_slice(&self.lh);
        out.extend_from_slice(&self.hl);
        out.extend_from_slice(&self.hh);
        out
    }

    pub fn from_flat(half: usize, flat: &[f64]) -> Result<Self> {
        let m = half * half;
        if flat.len() != 4 * m {
            return Err(invalid(format!(
                "flat coefficient length {} does not match 4 x {half}^2",
                flat.len()
            )));
        }
        SubBands::new(
            half,
            flat[0..m].to_vec(),
            flat[m..2 * m].to_vec(),
            flat[2 * m..3 * m].to_vec(),
            flat[3 * m..4 * m].to_vec(),
        )
    }
}

/// Core analysis kernel over `channels` stacked N x N planes.
///
/// `out` is laid out `[4, channels, N/2, N/2]` in band order ll, lh, hl, hh.
/// The 2x2 block form below is the algebraic simplification of the two-pass
/// 1/sqrt(2) filtering, with the combined scale applied as an exact 0.5.
pub(crate) fn dwt2_channels(input: &[f64], channels: usize, n: usize, out: &mut [f64]) {
    let half = n / 2;
    let m = half * half;
    let plane = n * n;
    for ch in 0..channels {
        let src = &input[ch * plane..(ch + 1) * plane];
        for r in 0..half {
            let top = 2 * r * n;
            let bot = top + n;
            for k in 0..half {
                let a = src[top + 2 * k];
                let b = src[top + 2 * k + 1];
                let c = src[bot + 2 * k];
                let d = src[bot + 2 * k + 1];
                let idx = (ch * half + r) * half + k;
                out[idx] = (a + b + c + d) * 0.5;
                out[channels * m + idx] = (a + b - c - d) * 0.5;
                out[2 * channels * m + idx] = (a - b + c - d) * 0.5;
                out[3 * channels * m + idx] = (a - b - c + d) * 0.5;
            }
        }
    }
}

/// Exact inverse of [`dwt2_channels`] for the orthonormal Haar bank.
pub(crate) fn idwt2_channels(coeffs: &[f64], channels: usize, half: usize, out: &mut [f64]) {
    let n = 2 * half;
    let m = half * half;
    let plane = n * n;
    for ch in 0..channels {
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for r in 0..half {
            let top = 2 * r * n;
            let bot = top + n;
            for k in 0..half {
                let idx = (ch * half + r) * half + k;
                let ll = coeffs[idx];
                let lh = coeffs[channels * m + idx];
                let hl = coeffs[2 * channels * m + idx];
                let hh = coeffs[3 * channels * m + idx];
                dst[top + 2 * k] = (ll + lh + hl + hh) * 0.5;
                dst[top + 2 * k + 1] = (ll + lh - hl - hh) * 0.5;
                dst[bot + 2 * k] = (ll - lh + hl - hh) * 0.5;
                dst[bot + 2 * k + 1] = (ll - lh - hl + hh) * 0.5;
            }
        }
    }
}

/// Decomposes an N x N image into its four Haar sub-bands.
pub fn dwt2(values: &[f64], n: usize) -> Result<SubBands> {
    if n < 2 || n % 2 != 0 {
        return Err(invalid(format!("dwt2 requires even side length >= 2, got {n}")));
    }
    if values.len() != n * n {
        return Err(invalid(format!(
            "dwt2 input length {} does not match {n}x{n}",
            values.len()
        )));
    }
    let half = n / 2;
    let mut flat = vec![0.0; 4 * half * half];
    dwt2_channels(values, 1, n, &mut flat);
    SubBands::from_flat(half, &flat)
}

/// Reconstructs the N x N image from its sub-bands.
pub fn idwt2(sb: &SubBands) -> Vec<f64> {
    let half = sb.half;
    let flat = sb.to_flat();
    let mut out = vec![0.0; 4 * half * half];
    idwt2_channels(&flat, 1, half, &mut out);
    out
}

/// Ablation variants of the wavelet-attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaVariant {
    Standard,
    HhReplaced,
    LhRemoved,
    HlRemoved,
}

impl WaVariant {
    pub const ALL: [WaVariant; 4] = [
        WaVariant::Standard,
        WaVariant::HhReplaced,
        WaVariant::LhRemoved,
        WaVariant::HlRemoved,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            WaVariant::Standard => "standard",
            WaVariant::HhReplaced => "hh_replaced",
            WaVariant::LhRemoved => "lh_removed",
            WaVariant::HlRemoved => "hl_removed",
        }
    }
}

impl std::str::FromStr for WaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(WaVariant::Standard),
            "hh_replaced" => Ok(WaVariant::HhReplaced),
            "lh_removed" => Ok(WaVariant::LhRemoved),
            "hl_removed" => Ok(WaVariant::HlRemoved),
            other => Err(invalid(format!("unknown wa variant '{other}'"))),
        }
    }
}

/// Wavelet-attention block on the tape: decompose each channel, form a
/// spatial attention map from the detail bands, and fuse it with the
/// retained band. Maps `[C, N, N]` to `[C, N/2, N/2]`.
///
/// Standard: `z = ll + ll * softmax(lh + hl)`, hh discarded.
pub fn wa_block(tape: &mut Tape, features: NodeId, variant: WaVariant) -> Result<NodeId> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 3 {
        return Err(invalid(format!(
            "wa_block expects a [C, N, N] tensor, got shape {shape:?}"
        )));
    }
    let (c, n) = (shape[0], shape[1]);
    if shape[1] != shape[2] {
        return Err(invalid(format!("wa_block expects square maps, got {shape:?}")));
    }
    if !tape.value(features).all_finite() {
        return Err(invalid("wa_block input contains non-finite values"));
    }
    let half = n / 2;
    let m = half * half;

    let coeffs = tape.dwt2(features)?; // [4, C, half, half]
    let band = |tape: &mut Tape, index: usize| -> Result<NodeId> {
        let s = tape.slice(coeffs, 0, index, 1)?;
        tape.reshape(s, vec![c, m])
    };
    let ll = band(tape, 0)?;
    let lh = band(tape, 1)?;
    let hl = band(tape, 2)?;

    let base = match variant {
        WaVariant::HhReplaced => band(tape, 3)?,
        _ => ll,
    };
    let att_input = match variant {
        WaVariant::Standard | WaVariant::HhReplaced => tape.add(lh, hl)?,
        WaVariant::LhRemoved => hl,
        WaVariant::HlRemoved => lh,
    };
    // Attention over all spatial positions within each channel.
    let att = tape.softmax(att_input, 1)?;
    let scaled = tape.hadamard(base, att)?;
    let fused = tape.add(base, scaled)?;
    tape.reshape(fused, vec![c, half, half])
}
