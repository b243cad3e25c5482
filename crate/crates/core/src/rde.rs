//! Rate-distortion coefficient masks over the wavelet domain.
//!
//! For a frozen target model, a per-view mask s over Haar coefficients is
//! optimized to keep the target's embedding of the obfuscated sample close
//! to its embedding of the original while an l1 penalty drives s sparse:
//! minimize  mean_v || Q(idwt(h*s + v*(1-s))) - Q(x) ||^2 + lambda * |s|_1,
//! followed by projection of s back into [0, 1] after every step.
//!
//! The reference embedding is computed from the reconstruction idwt(h), so
//! at s = 1 the obfuscation is bit-identical to the reference input and the
//! distortion is exactly zero.

use crate::autodiff::{NodeId, Tape};
use crate::error::{invalid, Error, Result};
use crate::geometry::{DepthImage, ViewSet};
use crate::model::{leaf_views, Backbone, Role};
use crate::rng::{standard_normal, stream};
use crate::tensor::Tensor;
use crate::wavelet::{dwt2, idwt2, SubBands};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

const SIGMA_MIN: f64 = 1e-6;
const RDE_TAG: u64 = 0x4de;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RdeConfig {
    pub lambda: f64,
    pub mask_learning_rate: f64,
    pub steps: usize,
    pub noise_draws: usize,
}

impl Default for RdeConfig {
    fn default() -> Self {
        RdeConfig {
            lambda: 0.01,
            mask_learning_rate: 0.1,
            steps: 30,
            noise_draws: 4,
        }
    }
}

impl RdeConfig {
    pub fn validate(&self) -> Result<()> {
        // lambda 0 is accepted: the control pipeline uses it to disable sparsity.
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.mask_learning_rate <= 0.0 {
            return Err(Error::Config("mask learning rate must be positive".into()));
        }
        if self.steps < 1 || self.noise_draws < 1 {
            return Err(Error::Config("steps and noise draws must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-view relevance masks over wavelet coefficients, entries in [0, 1].
/// Each view holds a flat `[4, half, half]` grid in band order ll, lh, hl, hh.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMask {
    pub sample_id: String,
    half: usize,
    views: Vec<Vec<f64>>,
}

impl CoefficientMask {
    pub fn new(sample_id: String, half: usize, views: Vec<Vec<f64>>) -> Result<Self> {
        if views.len() != 6 {
            return Err(invalid(format!("mask needs 6 views, got {}", views.len())));
        }
        let expect = 4 * half * half;
        for (i, v) in views.iter().enumerate() {
            if v.len() != expect {
                return Err(invalid(format!(
                    "mask view {i} has {} entries, expected {expect}",
                    v.len()
                )));
            }
            if !v.iter().all(|x| (0.0..=1.0).contains(x)) {
                return Err(invalid(format!("mask view {i} has entries outside [0, 1]")));
            }
        }
        Ok(CoefficientMask {
            sample_id,
            half,
            views,
        })
    }

    pub fn all_ones(sample_id: String, half: usize) -> Self {
        CoefficientMask {
            sample_id,
            half,
            views: vec![vec![1.0; 4 * half * half]; 6],
        }
    }

    pub fn half(&self) -> usize {
        self.half
    }

    pub fn views(&self) -> &[Vec<f64>] {
        &self.views
    }

    /// Total entry count across the six views.
    pub fn coefficient_count(&self) -> usize {
        6 * 4 * self.half * self.half
    }

    pub fn l1(&self) -> f64 {
        self.views.iter().flatten().sum()
    }

    /// Mean mask value, |s|_1 / n.
    pub fn density(&self) -> f64 {
        self.l1() / self.coefficient_count() as f64
    }

    pub fn is_all_ones(&self) -> bool {
        self.views.iter().flatten().all(|v| *v == 1.0)
    }
}

/// Per-view, per-band Gaussian moments for obfuscation noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ObfuscationNoise {
    per_view: Vec<[(f64, f64); 4]>,
}

impl ObfuscationNoise {
    pub fn band_moments(&self, view: usize, band: usize) -> (f64, f64) {
        self.per_view[view][band]
    }
}

/// Per-band mean and standard deviation of each view's coefficients.
pub fn estimate_noise(vs: &ViewSet) -> ObfuscationNoise {
    let res = vs.resolution();
    let per_view = vs
        .views()
        .iter()
        .map(|view| {
            let sb = dwt2(view.values(), res).expect("views are square and even-sized");
            let mut bands = [(0.0, 0.0); 4];
            for b in 0..4 {
                let coeffs = sb.band(b);
                let n = coeffs.len() as f64;
                let mean = coeffs.iter().sum::<f64>() / n;
                let var = coeffs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
                bands[b] = (mean, var.sqrt().max(SIGMA_MIN));
            }
            bands
        })
        .collect();
    ObfuscationNoise { per_view }
}

/// One seeded noise field for a view, flat `[4, half, half]`.
fn noise_field(
    noise: &ObfuscationNoise,
    view: usize,
    half: usize,
    seed: u64,
    step: u64,
    draw: u64,
) -> Vec<f64> {
    let mut rng = stream(&[RDE_TAG, seed, step, draw, view as u64]);
    let m = half * half;
    let mut out = Vec::with_capacity(4 * m);
    for band in 0..4 {
        let (mu, sigma) = noise.per_view[view][band];
        for _ in 0..m {
            out.push(mu + sigma * standard_normal(&mut rng));
        }
    }
    out
}

fn check_mask_shape(vs: &ViewSet, mask: &CoefficientMask) -> Result<usize> {
    let half = vs.resolution() / 2;
    if mask.half != half {
        return Err(invalid(format!(
            "mask half-resolution {} does not match views ({half})",
            mask.half
        )));
    }
    Ok(half)
}

/// Wavelet coefficients of each view, flat in the tape layout.
fn view_coefficients(vs: &ViewSet) -> Vec<Vec<f64>> {
    let res = vs.resolution();
    vs.views()
        .iter()
        .map(|v| dwt2(v.values(), res).expect("views are square and even-sized").to_flat())
        .collect()
}

/// Randomizes masked-out coefficients: y = idwt(h*s + v*(1-s)), clipped to [0, 1].
pub fn obfuscate(
    vs: &ViewSet,
    mask: &CoefficientMask,
    noise: &ObfuscationNoise,
    seed: u64,
) -> Result<ViewSet> {
    let half = check_mask_shape(vs, mask)?;
    let coeffs = view_coefficients(vs);
    let views = coeffs
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let v = noise_field(noise, i, half, seed, 0, 0);
            let s = &mask.views[i];
            let mixed: Vec<f64> = h
                .iter()
                .zip(s)
                .zip(&v)
                .map(|((hj, sj), vj)| hj * sj + vj * (1.0 - sj))
                .collect();
            let sb = SubBands::from_flat(half, &mixed)?;
            let img: Vec<f64> = idwt2(&sb).iter().map(|x| x.clamp(0.0, 1.0)).collect();
            DepthImage::new(2 * half, img)
        })
        .collect::<Result<Vec<_>>>()?;
    ViewSet::new(views, vs.sample_id.clone(), vs.label.clone())
}

/// Deterministic masking: x-hat = idwt(h * s), clipped to [0, 1].
///
/// An exactly all-ones mask returns the input unchanged; the reconstruction
/// is the identity there up to rounding, and the exact path keeps the
/// lambda-to-zero control pipeline bit-identical to unmasked training.
pub fn apply_mask(vs: &ViewSet, mask: &CoefficientMask) -> Result<ViewSet> {
    let half = check_mask_shape(vs, mask)?;
    if mask.is_all_ones() {
        return Ok(vs.clone());
    }
    let coeffs = view_coefficients(vs);
    let views = coeffs
        .iter()
        .zip(&mask.views)
        .map(|(h, s)| {
            let kept: Vec<f64> = h.iter().zip(s).map(|(hj, sj)| hj * sj).collect();
            let sb = SubBands::from_flat(half, &kept)?;
            let img: Vec<f64> = idwt2(&sb).iter().map(|x| x.clamp(0.0, 1.0)).collect();
            DepthImage::new(2 * half, img)
        })
        .collect::<Result<Vec<_>>>()?;
    ViewSet::new(views, vs.sample_id.clone(), vs.label.clone())
}

/// The reference input: per-view reconstruction idwt(h), clipped, as tensors.
fn reference_views(vs: &ViewSet) -> Result<Vec<Tensor>> {
    let res = vs.resolution();
    vs.views()
        .iter()
        .map(|v| {
            let sb = dwt2(v.values(), res)?;
            let img: Vec<f64> = idwt2(&sb).iter().map(|x| x.clamp(0.0, 1.0)).collect();
            Tensor::new(vec![1, res, res], img)
        })
        .collect()
}

/// Embedding of six view tensors under a backbone (throwaway tape).
fn embed_view_tensors(target: &Backbone, views: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = target.leaf_params(&mut tape);
    let ids: Vec<NodeId> = views.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let ids: [NodeId; 6] = ids.try_into().expect("six views");
    let emb = target.forward_nodes(&mut tape, &params, &ids)?;
    Ok(tape.value(emb).clone())
}

fn ensure_frozen(target: &Backbone) -> Result<()> {
    if target.role() != Role::Frozen {
        return Err(Error::Contract(
            "mask optimization requires a frozen target model".into(),
        ));
    }
    Ok(())
}

/// Projected gradient descent on the rate-distortion mask objective.
///
/// Starts from `warm_start` when provided, otherwise all ones. Every step
/// estimates the expected distortion over `noise_draws` seeded draws,
/// descends on distortion + lambda * |s|_1 (gradient lambda per entry on the
/// non-negative domain), and clips the mask back into [0, 1].
pub fn optimize_mask(
    vs: &ViewSet,
    target: &Backbone,
    cfg: &RdeConfig,
    warm_start: Option<&CoefficientMask>,
    seed: u64,
) -> Result<CoefficientMask> {
    ensure_frozen(target)?;
    cfg.validate()?;
    let res = vs.resolution();
    let half = res / 2;
    if let Some(w) = warm_start {
        if w.half != half {
            return Err(invalid(format!(
                "warm-start mask half-resolution {} does not match views ({half})",
                w.half
            )));
        }
    }
    let noise = estimate_noise(vs);
    let coeffs = view_coefficients(vs);
    let reference = reference_views(vs)?;
    let ref_emb = embed_view_tensors(target, &reference)?;

    let mut mask_views: Vec<Vec<f64>> = match warm_start {
        Some(w) => w.views.clone(),
        None => vec![vec![1.0; 4 * half * half]; 6],
    };

    for step in 1..=cfg.steps {
        let mut tape = Tape::new();
        let params = target.leaf_params(&mut tape);
        let ref_leaf = tape.leaf(ref_emb.clone(), false);
        let ones = tape.leaf(Tensor::full(vec![4, 1, half, half], 1.0), false);
        let s_leaves: Vec<NodeId> = mask_views
            .iter()
            .map(|s| {
                let t = Tensor::new(vec![4, 1, half, half], s.clone())?;
                Ok(tape.leaf(t, true))
            })
            .collect::<Result<_>>()?;
        let h_leaves: Vec<NodeId> = coeffs
            .iter()
            .map(|h| {
                let t = Tensor::new(vec![4, 1, half, half], h.clone())?;
                Ok(tape.leaf(t, false))
            })
            .collect::<Result<_>>()?;

        let mut dist_total: Option<NodeId> = None;
        for draw in 0..cfg.noise_draws {
            let mut view_ids = Vec::with_capacity(6);
            for view in 0..6 {
                let v = noise_field(&noise, view, half, seed, step as u64, draw as u64);
                let v_leaf = tape.leaf(Tensor::new(vec![4, 1, half, half], v)?, false);
                let kept = tape.hadamard(h_leaves[view], s_leaves[view])?;
                let inverse_mask = tape.subtract(ones, s_leaves[view])?;
                let randomized = tape.hadamard(v_leaf, inverse_mask)?;
                let mixed = tape.add(kept, randomized)?;
                let img = tape.idwt2(mixed)?;
                view_ids.push(tape.clip_values(img, 0.0, 1.0)?);
            }
            let views: [NodeId; 6] = view_ids.try_into().expect("six views");
            let emb = target.forward_nodes(&mut tape, &params, &views)?;
            let d = tape.squared_l2_distance(emb, ref_leaf)?;
            dist_total = Some(match dist_total {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
        let distortion = tape.scalar_multiply(
            dist_total.expect("at least one draw"),
            1.0 / cfg.noise_draws as f64,
        )?;
        // |s|_1 = sum(s) on the projected non-negative domain.
        let mut l1_total: Option<NodeId> = None;
        for &s in &s_leaves {
            let part = tape.sum(s)?;
            l1_total = Some(match l1_total {
                Some(acc) => tape.add(acc, part)?,
                None => part,
            });
        }
        let penalty = tape.scalar_multiply(l1_total.expect("six views"), cfg.lambda)?;
        let loss = tape.add(distortion, penalty)?;
        let loss_value = tape.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(Error::Numeric {
                context: format!("mask optimization loss non-finite at step {step}"),
            });
        }
        tape.backward(loss)?;
        for (view, &s_id) in s_leaves.iter().enumerate() {
            let grad = tape.grad(s_id)?;
            let s = &mut mask_views[view];
            for (sj, gj) in s.iter_mut().zip(grad.data()) {
                *sj = (*sj - cfg.mask_learning_rate * gj).clamp(0.0, 1.0);
            }
        }
    }
    CoefficientMask::new(vs.sample_id.clone(), half, mask_views)
}

/// Seeded Monte-Carlo estimate of the mask objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct McObjective {
    pub distortion: f64,
    /// Standard error of the distortion mean.
    pub standard_error: f64,
    pub l1: f64,
    pub lambda: f64,
}

impl McObjective {
    pub fn objective(&self) -> f64 {
        self.distortion + self.lambda * self.l1
    }
}

/// Evaluates distortion + lambda * |s|_1 with `draws` seeded noise draws.
/// Identical seeds yield identical noise regardless of the mask, so two
/// masks can be compared on the same draws.
pub fn mc_objective(
    vs: &ViewSet,
    mask: &CoefficientMask,
    target: &Backbone,
    cfg: &RdeConfig,
    seed: u64,
    draws: usize,
) -> Result<McObjective> {
    ensure_frozen(target)?;
    if draws == 0 {
        return Err(invalid("mc_objective needs at least one draw"));
    }
    let half = check_mask_shape(vs, mask)?;
    let noise = estimate_noise(vs);
    let coeffs = view_coefficients(vs);
    let reference = reference_views(vs)?;
    let ref_emb = embed_view_tensors(target, &reference)?;
    let res = vs.resolution();

    let mut dists = Vec::with_capacity(draws);
    for draw in 0..draws {
        let views: Vec<Tensor> = (0..6)
            .map(|view| {
                let v = noise_field(&noise, view, half, seed, 0, draw as u64);
                let s = &mask.views[view];
                let h = &coeffs[view];
                let mixed: Vec<f64> = h
                    .iter()
                    .zip(s)
                    .zip(&v)
                    .map(|((hj, sj), vj)| hj * sj + vj * (1.0 - sj))
                    .collect();
                let sb = SubBands::from_flat(half, &mixed)?;
                let img: Vec<f64> = idwt2(&sb).iter().map(|x| x.clamp(0.0, 1.0)).collect();
                Tensor::new(vec![1, res, res], img)
            })
            .collect::<Result<_>>()?;
        let emb = embed_view_tensors(target, &views)?;
        let d: f64 = emb
            .data()
            .iter()
            .zip(ref_emb.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        dists.push(d);
    }
    let mean = dists.iter().sum::<f64>() / draws as f64;
    let se = if draws > 1 {
        let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (draws - 1) as f64;
        (var / draws as f64).sqrt()
    } else {
        0.0
    };
    Ok(McObjective {
        distortion: mean,
        standard_error: se,
        l1: mask.l1(),
        lambda: cfg.lambda,
    })
}

/// Associative store of the latest mask per sample.
#[derive(Default, Clone, Debug)]
pub struct MaskStore {
    map: HashMap<String, CoefficientMask>,
}

impl MaskStore {
    pub fn new() -> Self {
        MaskStore::default()
    }

    pub fn get(&self, sample_id: &str) -> Option<&CoefficientMask> {
        self.map.get(sample_id)
    }

    pub fn put(&mut self, mask: CoefficientMask) {
        self.map.insert(mask.sample_id.clone(), mask);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// (sample_id, density) rows sorted by sample id.
    pub fn densities(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), v.density()))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        rows
    }

    /// Writes a density CSV (sample_id, density) for run artifacts.
    pub fn write_densities_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("sample_id,density\n");
        for (id, density) in self.densities() {
            text.push_str(&format!("{id},{density}\n"));
        }
        crate::ioutil::write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_six_views, synth_shape, ShapeKind};
    use crate::model::ModelConfig;

    fn sample_views(seed: u64, res: usize) -> ViewSet {
        let pc = synth_shape(ShapeKind::Torus, 200, seed).unwrap();
        project_six_views(&pc, res).unwrap()
    }

    fn frozen_target(res: usize) -> Backbone {
        let mut cfg = ModelConfig::miniature();
        cfg.resolution = res;
        Backbone::new(cfg, Role::Frozen).unwrap()
    }

    #[test]
    fn estimate_noise_constant_views() {
        let views: Vec<DepthImage> = (0..6)
            .map(|_| DepthImage::new(8, vec![0.4; 64]).unwrap())
            .collect();
        let vs = ViewSet::new(views, "c".into(), "c".into()).unwrap();
        let noise = estimate_noise(&vs);
        for view in 0..6 {
            let (mu_ll, sigma_ll) = noise.band_moments(view, 0);
            assert!((mu_ll - 0.8).abs() < 1e-12);
            assert_eq!(sigma_ll, SIGMA_MIN);
            for band in 1..4 {
                let (mu, sigma) = noise.band_moments(view, band);
                assert_eq!(mu, 0.0);
                assert_eq!(sigma, SIGMA_MIN);
            }
        }
    }

    #[test]
    fn estimate_noise_matches_direct_statistics() {
        let vs = sample_views(3, 16);
        let noise = estimate_noise(&vs);
        for (i, view) in vs.views().iter().enumerate() {
            let sb = dwt2(view.values(), 16).unwrap();
            for band in 0..4 {
                let coeffs = sb.band(band);
                let n = coeffs.len() as f64;
                let mean = coeffs.iter().sum::<f64>() / n;
                let std =
                    (coeffs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n).sqrt();
                let (mu, sigma) = noise.band_moments(i, band);
                assert!((mu - mean).abs() < 1e-12);
                assert!((sigma - std.max(SIGMA_MIN)).abs() < 1e-12);
            }
        }
        assert_eq!(noise, estimate_noise(&vs));
    }

    #[test]
    fn obfuscate_with_full_mask_is_identity_within_tolerance() {
        let vs = sample_views(1, 16);
        let mask = CoefficientMask::all_ones(vs.sample_id.clone(), 8);
        let noise = estimate_noise(&vs);
        let y = obfuscate(&vs, &mask, &noise, 42).unwrap();
        for (a, b) in vs.views().iter().zip(y.views()) {
            for (x, z) in a.values().iter().zip(b.values()) {
                assert!((x - z).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn obfuscate_is_seed_deterministic() {
        let vs = sample_views(2, 16);
        let mask = CoefficientMask::new(
            vs.sample_id.clone(),
            8,
            vec![vec![0.5; 4 * 64]; 6],
        )
        .unwrap();
        let noise = estimate_noise(&vs);
        let a = obfuscate(&vs, &mask, &noise, 7).unwrap();
        let b = obfuscate(&vs, &mask, &noise, 7).unwrap();
        assert_eq!(a, b);
        let c = obfuscate(&vs, &mask, &noise, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_mask_with_zero_mean_noise_averages_to_black() {
        let vs = sample_views(5, 8);
        let mask = CoefficientMask::new(vs.sample_id.clone(), 4, vec![vec![0.0; 64]; 6]).unwrap();
        // Zero-mean noise with a fixed small sigma in every band.
        let noise = ObfuscationNoise {
            per_view: vec![[(0.0, 0.05); 4]; 6],
        };
        let draws = 400;
        let mut acc = vec![0.0; 64];
        for seed in 0..draws {
            let y = obfuscate(&vs, &mask, &noise, seed).unwrap();
            for (a, v) in acc.iter_mut().zip(y.views()[0].values()) {
                *a += v;
            }
        }
        // Clipping biases the mean up slightly; it must still approach 0.
        let worst = acc.iter().map(|a| a / draws as f64).fold(0.0f64, f64::max);
        assert!(worst < 0.04, "mean image peak {worst}");
    }

    #[test]
    fn apply_mask_all_ones_roundtrips() {
        let vs = sample_views(6, 16);
        let mask = CoefficientMask::all_ones(vs.sample_id.clone(), 8);
        let out = apply_mask(&vs, &mask).unwrap();
        assert_eq!(out, vs);
    }

    #[test]
    fn apply_mask_all_zeros_blanks_the_views() {
        let vs = sample_views(6, 16);
        let mask =
            CoefficientMask::new(vs.sample_id.clone(), 8, vec![vec![0.0; 4 * 64]; 6]).unwrap();
        let out = apply_mask(&vs, &mask).unwrap();
        for view in out.views() {
            assert!(view.values().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn apply_mask_ll_only_keeps_constants() {
        let views: Vec<DepthImage> = (0..6)
            .map(|_| DepthImage::new(8, vec![0.6; 64]).unwrap())
            .collect();
        let vs = ViewSet::new(views, "c".into(), "c".into()).unwrap();
        let mut mask_views = vec![vec![0.0; 4 * 16]; 6];
        for v in &mut mask_views {
            for j in 0..16 {
                v[j] = 1.0; // ll band only
            }
        }
        let mask = CoefficientMask::new("c".into(), 4, mask_views).unwrap();
        let out = apply_mask(&vs, &mask).unwrap();
        for view in out.views() {
            for v in view.values() {
                assert!((v - 0.6).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn optimize_mask_stationary_at_zero_lambda_single_step() {
        let vs = sample_views(7, 8);
        let target = frozen_target(8);
        let cfg = RdeConfig {
            lambda: 0.0,
            steps: 1,
            ..RdeConfig::default()
        };
        let mask = optimize_mask(&vs, &target, &cfg, None, 3).unwrap();
        assert!(mask.is_all_ones());
    }

    #[test]
    fn optimize_mask_decreases_objective_and_stays_in_range() {
        let vs = sample_views(8, 8);
        let target = frozen_target(8);
        let cfg = RdeConfig {
            steps: 15,
            ..RdeConfig::default()
        };
        let init = CoefficientMask::all_ones(vs.sample_id.clone(), 4);
        let mask = optimize_mask(&vs, &target, &cfg, None, 11).unwrap();
        for view in mask.views() {
            assert!(view.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let before = mc_objective(&vs, &init, &target, &cfg, 99, 8).unwrap();
        let after = mc_objective(&vs, &mask, &target, &cfg, 99, 8).unwrap();
        assert!(
            after.objective() <= before.objective(),
            "objective rose: {} -> {}",
            before.objective(),
            after.objective()
        );
        // Distortion stays within the sparsity budget it bought.
        let n = mask.coefficient_count() as f64;
        assert!(after.distortion <= cfg.lambda * (n - after.l1) + 3.0 * after.standard_error);
    }

    #[test]
    fn optimize_mask_is_seed_deterministic() {
        let vs = sample_views(9, 8);
        let target = frozen_target(8);
        let cfg = RdeConfig {
            steps: 5,
            ..RdeConfig::default()
        };
        let a = optimize_mask(&vs, &target, &cfg, None, 4).unwrap();
        let b = optimize_mask(&vs, &target, &cfg, None, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn optimize_mask_uses_warm_start() {
        let vs = sample_views(10, 8);
        let target = frozen_target(8);
        let cfg = RdeConfig {
            steps: 1,
            lambda: 0.0,
            ..RdeConfig::default()
        };
        let warm = CoefficientMask::new(vs.sample_id.clone(), 4, vec![vec![0.25; 64]; 6]).unwrap();
        let out = optimize_mask(&vs, &target, &cfg, Some(&warm), 4).unwrap();
        // One zero-lambda step from 0.25 cannot jump to all ones.
        assert!(out.density() < 0.9);
    }

    #[test]
    fn optimize_mask_requires_frozen_target() {
        let vs = sample_views(11, 8);
        let mut cfg = ModelConfig::miniature();
        cfg.resolution = 8;
        let target = Backbone::new(cfg, Role::Trainable).unwrap();
        let result = optimize_mask(&vs, &target, &RdeConfig::default(), None, 0);
        assert!(matches!(result, Err(Error::Contract(_))));
    }

    #[test]
    fn optimize_mask_reports_numeric_failures_with_step() {
        let vs = sample_views(12, 8);
        let mut target = frozen_target(8);
        // Poison the last MLP layer so the NaN first appears in the loss.
        let last = target.params().len() - 2;
        target.params_mut()[last].data_mut()[0] = f64::NAN;
        match optimize_mask(&vs, &target, &RdeConfig::default(), None, 0) {
            Err(Error::Numeric { context }) => assert!(context.contains("step 1"), "{context}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn higher_lambda_gives_sparser_masks() {
        let vs = sample_views(13, 8);
        let target = frozen_target(8);
        let mut densities = Vec::new();
        for lambda in [0.01, 10.0] {
            let cfg = RdeConfig {
                lambda,
                steps: 10,
                ..RdeConfig::default()
            };
            let mask = optimize_mask(&vs, &target, &cfg, None, 21).unwrap();
            densities.push(mask.density());
        }
        assert!(
            densities[1] <= densities[0] + 0.02,
            "densities not decreasing: {densities:?}"
        );
    }

    #[test]
    fn mask_store_semantics() {
        let mut store = MaskStore::new();
        assert!(store.get("missing").is_none());
        let a = CoefficientMask::all_ones("s1".into(), 4);
        store.put(a.clone());
        assert_eq!(store.get("s1"), Some(&a));
        let b = CoefficientMask::new("s1".into(), 4, vec![vec![0.5; 64]; 6]).unwrap();
        store.put(b.clone());
        assert_eq!(store.get("s1"), Some(&b));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn mask_constructor_validates() {
        assert!(CoefficientMask::new("x".into(), 4, vec![vec![0.5; 64]; 5]).is_err());
        assert!(CoefficientMask::new("x".into(), 4, vec![vec![1.5; 64]; 6]).is_err());
        assert!(CoefficientMask::new("x".into(), 4, vec![vec![0.5; 63]; 6]).is_err());
    }
}
