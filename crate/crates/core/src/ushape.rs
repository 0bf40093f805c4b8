//! Coarse-to-fine decision learning.
//!
//! The trained model couples the DCP stage, one Saab cascade, and a stack of
//! per-level, per-channel regressor pairs. Training walks the resolution
//! pyramid from coarse to fine: each level regresses the residual between
//! the downsampled clear image and the upsampled running prediction, then
//! folds its blended prediction back into that running prediction. Inference
//! replays the same walk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dcp::{dehaze_dcp, fit_omega_regressor, DcpParams};
use crate::error::{Error, Result};
use crate::image::{resize, ImageBuffer};
use crate::lnt::{apply_lnt_batch, default_ridge, make_level2, LntTransform};
use crate::rft::rft_select;
use crate::saab::{apply_cascade, fit_cascade, HopConfig, KeptFilters, SaabCascade, Tensor};
use crate::trees::{fit_gbt, GbtParams, TreeEnsembleModel};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// One resolution level of the U-shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelModel {
    /// Pixels per side at this level.
    pub resolution: usize,
    /// Index into the cascade whose pre-pool tensor feeds this level.
    pub cascade_hop: usize,
    /// Saab channels kept per color channel, by RFT rank.
    pub rft_selected: [Vec<usize>; 3],
    /// Secondary-feature transforms; absent when the level was trained
    /// raw-only or the target binning degenerated.
    pub lnt: [Option<LntTransform>; 3],
    pub regressor_raw: [TreeEnsembleModel; 3],
    pub regressor_lnt: [Option<TreeEnsembleModel>; 3],
    /// Mixing weight per channel: prediction = blend * raw + (1 - blend) * lnt.
    pub blend: [f64; 3],
    /// Channels whose validated contribution beats doing nothing.
    pub active: [bool; 3],
}

/// The full trained pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct UShapeModel {
    pub input_size: usize,
    /// Ordered coarse to fine; resolutions strictly increase and divide
    /// `input_size`.
    pub levels: Vec<LevelModel>,
    pub cascade: SaabCascade,
    pub dcp_params: DcpParams,
    pub omega_model: Option<TreeEnsembleModel>,
    pub version: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmegaMode {
    /// Use `DcpParams::omega` as-is.
    Fixed,
    /// Fit the random-forest omega regressor on the training pairs.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Selected raw features only (ablation baseline).
    RawOnly,
    /// Selected raw features plus LNT Level-2 features.
    RawPlusLnt,
}

/// Training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub input_size: usize,
    pub levels: usize,
    /// Fraction of pixels per image used as regression rows at each level.
    pub pixel_subsample: f64,
    pub rft_keep: usize,
    pub rft_bins: usize,
    pub lnt_bins: usize,
    pub gbt: GbtParams,
    pub seed: u64,
    pub dcp_params: DcpParams,
    pub omega_mode: OmegaMode,
    pub feature_mode: FeatureMode,
    /// Fraction of pairs held out for blend validation (at least one pair).
    pub val_fraction: f64,
    /// Override for the cascade layout; `None` derives one from `levels`.
    pub hops: Option<Vec<HopConfig>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            levels: 3,
            pixel_subsample: 0.25,
            rft_keep: 1000,
            rft_bins: 31,
            lnt_bins: 8,
            gbt: GbtParams::default(),
            seed: 0,
            dcp_params: DcpParams::default(),
            omega_mode: OmegaMode::Learned,
            feature_mode: FeatureMode::RawPlusLnt,
            val_fraction: 0.2,
            hops: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("at least one level required"));
        }
        if !self.input_size.is_multiple_of(1usize << self.levels) {
            return Err(Error::invalid(format!(
                "input size {} not divisible by 2^{}",
                self.input_size, self.levels
            )));
        }
        if !(self.pixel_subsample > 0.0 && self.pixel_subsample <= 1.0) {
            return Err(Error::invalid("pixel_subsample must lie in (0, 1]"));
        }
        if self.lnt_bins < 2 {
            return Err(Error::invalid("lnt_bins must be >= 2"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("val_fraction must lie in (0, 1)"));
        }
        if let Some(hops) = &self.hops {
            if hops.len() != self.levels {
                return Err(Error::invalid("hop count must equal level count"));
            }
        }
        self.dcp_params.validate()
    }

    /// Cascade layout: a 5x5 first hop, 3x3 deeper hops, 2x pooling after
    /// every hop but the last, energy threshold 0.98 capped at 24 channels.
    pub fn hop_configs(&self) -> Vec<HopConfig> {
        if let Some(hops) = &self.hops {
            return hops.clone();
        }
        (0..self.levels)
            .map(|i| {
                let filter = if i == 0 { 5 } else { 3 };
                HopConfig {
                    window: filter + 2,
                    filter,
                    pool: if i + 1 == self.levels { 1 } else { 2 },
                    kept: KeptFilters::Energy(0.98),
                    max_filters: Some(24),
                }
            })
            .collect()
    }

    /// Level resolutions ordered coarse to fine.
    pub fn level_resolutions(&self) -> Vec<usize> {
        (1..=self.levels)
            .rev()
            .map(|k| self.input_size >> k)
            .collect()
    }
}

/// Per-level training diagnostics (MSE of the running prediction against
/// the clear image at that level's resolution).
#[derive(Debug, Clone)]
pub struct LevelReport {
    pub resolution: usize,
    pub train_mse: [f64; 3],
    pub val_mse: [f64; 3],
    /// Validation MSE of the chosen blend on the gate's pixel rows.
    pub gate_val_mse: [f64; 3],
    /// Validation MSE of contributing nothing on the same rows; the gate
    /// guarantees `gate_val_mse <= gate_off_mse` per channel.
    pub gate_off_mse: [f64; 3],
    /// Feature-incorporation ablation on the same rows: the raw-features
    /// regressor alone, the LNT Level-2 regressor alone (NaN when the level
    /// has no transform for that channel), and the best blend of the two.
    /// `gate_blend_mse <= gate_raw_mse` holds by construction of the blend
    /// search.
    pub gate_raw_mse: [f64; 3],
    pub gate_lnt_mse: [f64; 3],
    pub gate_blend_mse: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub levels: Vec<LevelReport>,
    /// Final per-channel validation MSE (finest level).
    pub final_val_mse: [f64; 3],
}

/// Repeated bilinear half-downsampling, returned fine to coarse:
/// `[s/2, s/4, ...]`.
pub fn build_pyramid(img: &ImageBuffer, levels: usize, input_size: usize) -> Result<Vec<ImageBuffer>> {
    if levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    if !input_size.is_multiple_of(1usize << levels) {
        return Err(Error::invalid(format!(
            "input size {input_size} not divisible by 2^{levels}"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = if img.height() == input_size && img.width() == input_size {
        img.clone()
    } else {
        resize(img, input_size, input_size)?
    };
    for k in 1..=levels {
        let side = input_size >> k;
        current = resize(&current, side, side)?;
        out.push(current.clone());
    }
    Ok(out)
}

fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.rotate_left(17) ^ b.rotate_left(41) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic pixel subset: partial Fisher-Yates, returned ascending.
fn subsample_pixels(total: usize, fraction: f64, seed: u64) -> Vec<u32> {
    let count = ((total as f64 * fraction).ceil() as usize).clamp(1, total);
    if count == total {
        return (0..total as u32).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<u32> = (0..total as u32).collect();
    for k in 0..count {
        let j = rng.gen_range(k..pool.len());
        pool.swap(k, j);
    }
    let mut chosen = pool[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Feature row width for a level channel: selected Saab coefficients, three
/// DCP values, three coarse-prediction values, two normalized coordinates.
pub fn feature_row_width(selected: usize) -> usize {
    selected + 3 + 3 + 2
}

/// Assembles per-pixel feature rows for one color channel's selection.
/// `hop`, `dcp`, and `coarse` must share the level's spatial dims; `pixels`
/// restricts the rows (ascending pixel indices), `None` takes every pixel.
pub fn assemble_features(
    selected: &[usize],
    hop: &Tensor,
    dcp: &Tensor,
    coarse: &Tensor,
    pixels: Option<&[u32]>,
) -> Result<Vec<f64>> {
    let (h, w) = (hop.height, hop.width);
    if dcp.height != h || dcp.width != w || coarse.height != h || coarse.width != w {
        return Err(Error::shape(
            "assemble_features dims",
            format!("dcp {}x{}, coarse {}x{}", dcp.height, dcp.width, coarse.height, coarse.width),
            format!("{h}x{w}"),
        ));
    }
    if dcp.channels != 3 || coarse.channels != 3 {
        return Err(Error::shape("assemble_features channels", dcp.channels, 3));
    }
    let width = feature_row_width(selected.len());
    let all: Vec<u32>;
    let pixels = match pixels {
        Some(p) => p,
        None => {
            all = (0..(h * w) as u32).collect();
            &all
        }
    };
    let mut rows = Vec::with_capacity(pixels.len() * width);
    let inv_h = 1.0 / (h.max(2) - 1) as f64;
    let inv_w = 1.0 / (w.max(2) - 1) as f64;
    for &px in pixels {
        let px = px as usize;
        let (r, c) = (px / w, px % w);
        for &j in selected {
            rows.push(hop.data[px * hop.channels + j]);
        }
        for ch in 0..3 {
            rows.push(dcp.data[px * 3 + ch]);
        }
        for ch in 0..3 {
            rows.push(coarse.data[px * 3 + ch]);
        }
        rows.push(r as f64 * inv_h);
        rows.push(c as f64 * inv_w);
    }
    Ok(rows)
}

/// Everything one image contributes to one level.
struct LevelImageData {
    hop: Tensor,
    dcp: Tensor,
    clear: Tensor,
}

const BLEND_CANDIDATES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

struct ChannelFit {
    selected: Vec<usize>,
    lnt: Option<LntTransform>,
    regressor_raw: TreeEnsembleModel,
    regressor_lnt: Option<TreeEnsembleModel>,
    blend: f64,
    active: bool,
    gate_val_mse: f64,
    gate_off_mse: f64,
    gate_blend_mse: f64,
    gate_raw_mse: f64,
    gate_lnt_mse: f64,
}

/// Residual prediction for one channel over the given pixels.
fn predict_channel_residual(
    fit: &ChannelFit,
    hop: &Tensor,
    dcp: &Tensor,
    coarse: &Tensor,
    pixels: Option<&[u32]>,
) -> Result<Vec<f64>> {
    let rows = assemble_features(&fit.selected, hop, dcp, coarse, pixels)?;
    let width = feature_row_width(fit.selected.len());
    let count = rows.len() / width;
    if !fit.active {
        return Ok(vec![0.0; count]);
    }
    let raw = fit.regressor_raw.predict_batch(&rows, count)?;
    match (&fit.lnt, &fit.regressor_lnt) {
        (Some(lnt), Some(reg)) if fit.blend < 1.0 => {
            let level2 = apply_lnt_batch(lnt, &rows, count)?;
            let lnt_pred = reg.predict_batch(&level2, count)?;
            Ok(raw
                .iter()
                .zip(&lnt_pred)
                .map(|(r, l)| fit.blend * r + (1.0 - fit.blend) * l)
                .collect())
        }
        _ => Ok(raw),
    }
}

fn channel_plane_tensor(t: &Tensor, ch: usize) -> Vec<f64> {
    (0..t.height * t.width).map(|px| t.data[px * t.channels + ch]).collect()
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Trains the full pipeline on (hazy, clear) pairs, holding out the last
/// `val_fraction` of them for blend validation.
pub fn train_pipeline(pairs: &[(ImageBuffer, ImageBuffer)], cfg: &TrainConfig) -> Result<(UShapeModel, TrainReport)> {
    if pairs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "train_pipeline needs >= 8 pairs, got {}",
            pairs.len()
        )));
    }
    let n_val = ((pairs.len() as f64 * cfg.val_fraction).round() as usize)
        .clamp(1, pairs.len() - 1);
    let val_from = pairs.len() - n_val;
    train_pipeline_split(&pairs[..val_from], &pairs[val_from..], cfg)
}

/// Trains with an explicit train/validation pair split.
pub fn train_pipeline_split(
    train_pairs: &[(ImageBuffer, ImageBuffer)],
    val_pairs: &[(ImageBuffer, ImageBuffer)],
    cfg: &TrainConfig,
) -> Result<(UShapeModel, TrainReport)> {
    cfg.validate()?;
    if train_pairs.len() + val_pairs.len() < 8 {
        return Err(Error::InsufficientData(format!(
            "train_pipeline needs >= 8 pairs, got {}",
            train_pairs.len() + val_pairs.len()
        )));
    }
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::InsufficientData(
            "both train and validation splits must be non-empty".into(),
        ));
    }
    let s = cfg.input_size;
    let resized: Vec<(ImageBuffer, ImageBuffer)> = train_pairs
        .par_iter()
        .chain(val_pairs.par_iter())
        .map(|(hazy, clear)| Ok((resize(hazy, s, s)?, resize(clear, s, s)?)))
        .collect::<Result<_>>()?;
    let val_from = train_pairs.len();

    // stage 1: omega model and preliminary dehazing
    let omega_model = match cfg.omega_mode {
        OmegaMode::Learned => {
            let flipped: Vec<(ImageBuffer, ImageBuffer)> = resized[..val_from]
                .iter()
                .map(|(hazy, clear)| (clear.clone(), hazy.clone()))
                .collect();
            if flipped.len() >= 10 {
                Some(fit_omega_regressor(&flipped, &cfg.dcp_params, cfg.seed)?)
            } else {
                None
            }
        }
        OmegaMode::Fixed => None,
    };
    let dcp_outs: Vec<ImageBuffer> = resized
        .par_iter()
        .map(|(hazy, _)| dehaze_dcp(hazy, &cfg.dcp_params, omega_model.as_ref()))
        .collect::<Result<_>>()?;

    // stage 2: representation learning on the training images
    let cascade = fit_cascade(&dcp_outs[..val_from], &cfg.hop_configs())?;
    let hop_tensors: Vec<Vec<Tensor>> = dcp_outs
        .par_iter()
        .map(|img| apply_cascade(img, &cascade))
        .collect::<Result<_>>()?;

    // stage 3: coarse-to-fine residual regression
    let resolutions = cfg.level_resolutions();
    let n_images = resized.len();

    // running predictions start from the DCP output at the coarsest level
    let coarsest = resolutions[0];
    let mut running: Vec<Tensor> = dcp_outs
        .par_iter()
        .map(|img| Ok(Tensor::from_image(&resize(img, coarsest, coarsest)?)))
        .collect::<Result<_>>()?;

    let mut levels = Vec::with_capacity(cfg.levels);
    let mut reports = Vec::with_capacity(cfg.levels);

    for (level_idx, &res) in resolutions.iter().enumerate() {
        let hop_index = cfg.levels - 1 - level_idx;
        let data: Vec<LevelImageData> = (0..n_images)
            .into_par_iter()
            .map(|i| {
                Ok(LevelImageData {
                    hop: hop_tensors[i][hop_index].resize(res, res)?,
                    dcp: Tensor::from_image(&resize(&dcp_outs[i], res, res)?),
                    clear: Tensor::from_image(&resize(&resized[i].1, res, res)?),
                })
            })
            .collect::<Result<_>>()?;

        // upsample the running prediction into this level; at the coarsest
        // level it is already here and doubles as the coarse feature
        let bases: Vec<Tensor> = running
            .par_iter()
            .map(|t| if t.height == res { Ok(t.clone()) } else { t.resize(res, res) })
            .collect::<Result<_>>()?;

        let total_px = res * res;
        let train_px: Vec<Vec<u32>> = (0..val_from)
            .map(|i| {
                subsample_pixels(
                    total_px,
                    cfg.pixel_subsample,
                    mix_seed(cfg.seed, level_idx as u64, i as u64),
                )
            })
            .collect();
        let val_px: Vec<Vec<u32>> = (val_from..n_images)
            .map(|i| {
                subsample_pixels(
                    total_px,
                    cfg.pixel_subsample,
                    mix_seed(cfg.seed, 0x99 + level_idx as u64, i as u64),
                )
            })
            .collect();

        let hop_channels = data[0].hop.channels;
        let keep = cfg.rft_keep.min(hop_channels);

        let fits: Vec<ChannelFit> = (0..3usize)
            .map(|ch| {
                // gather training rows of hop features and residual targets
                let mut hop_rows = Vec::new();
                let mut target = Vec::new();
                for (i, px) in train_px.iter().enumerate() {
                    let d = &data[i];
                    for &p in px {
                        let p = p as usize;
                        for j in 0..hop_channels {
                            hop_rows.push(d.hop.data[p * hop_channels + j]);
                        }
                        target.push(d.clear.data[p * 3 + ch] - bases[i].data[p * 3 + ch]);
                    }
                }
                let rows = target.len();
                let report = rft_select(&hop_rows, rows, hop_channels, &target, keep, cfg.rft_bins)?;
                let selected = report.selected;

                let mut x = Vec::new();
                for (i, px) in train_px.iter().enumerate() {
                    x.extend(assemble_features(
                        &selected,
                        &data[i].hop,
                        &data[i].dcp,
                        &bases[i],
                        Some(px),
                    )?);
                }
                let width = feature_row_width(selected.len());

                let regressor_raw = fit_gbt(&x, width, &target, &cfg.gbt)?;

                let (lnt, regressor_lnt) = if cfg.feature_mode == FeatureMode::RawPlusLnt {
                    let ridge = default_ridge(&x, rows, width);
                    match make_level2(&x, rows, width, &target, cfg.lnt_bins, ridge) {
                        Ok((xform, level2)) => {
                            let reg = fit_gbt(&level2, cfg.lnt_bins, &target, &cfg.gbt)?;
                            (Some(xform), Some(reg))
                        }
                        // targets too concentrated to bin: fall back to raw
                        Err(Error::Degenerate(_)) => (None, None),
                        Err(e) => return Err(e),
                    }
                } else {
                    (None, None)
                };

                // validation rows for blend selection
                let mut xv = Vec::new();
                let mut yv = Vec::new();
                for (vi, px) in val_px.iter().enumerate() {
                    let i = val_from + vi;
                    xv.extend(assemble_features(
                        &selected,
                        &data[i].hop,
                        &data[i].dcp,
                        &bases[i],
                        Some(px),
                    )?);
                    for &p in px {
                        let p = p as usize;
                        yv.push(data[i].clear.data[p * 3 + ch] - bases[i].data[p * 3 + ch]);
                    }
                }
                let v_rows = yv.len();
                let raw_v = regressor_raw.predict_batch(&xv, v_rows)?;
                let lnt_v = match (&lnt, &regressor_lnt) {
                    (Some(xform), Some(reg)) => {
                        let l2 = apply_lnt_batch(xform, &xv, v_rows)?;
                        Some(reg.predict_batch(&l2, v_rows)?)
                    }
                    _ => None,
                };

                let mut best_blend = 1.0;
                let mut best_mse = f64::INFINITY;
                let mut raw_mse = f64::NAN;
                let mut lnt_mse = f64::NAN;
                for &b in &BLEND_CANDIDATES {
                    let pred_mse = match &lnt_v {
                        Some(lv) => {
                            let pred: Vec<f64> = raw_v
                                .iter()
                                .zip(lv)
                                .map(|(r, l)| b * r + (1.0 - b) * l)
                                .collect();
                            mse(&pred, &yv)
                        }
                        None => {
                            if b < 1.0 {
                                continue;
                            }
                            mse(&raw_v, &yv)
                        }
                    };
                    if b == 1.0 {
                        raw_mse = pred_mse;
                    }
                    if b == 0.0 {
                        lnt_mse = pred_mse;
                    }
                    if pred_mse < best_mse {
                        best_mse = pred_mse;
                        best_blend = b;
                    }
                }
                // contributing nothing stays available as a fallback
                let off_mse = yv.iter().map(|y| y * y).sum::<f64>() / v_rows as f64;
                let active = best_mse <= off_mse;

                Ok(ChannelFit {
                    selected,
                    lnt,
                    regressor_raw,
                    regressor_lnt,
                    blend: best_blend,
                    active,
                    gate_val_mse: if active { best_mse } else { off_mse },
                    gate_off_mse: off_mse,
                    gate_blend_mse: best_mse,
                    gate_raw_mse: raw_mse,
                    gate_lnt_mse: lnt_mse,
                })
            })
            .collect::<Result<_>>()?;

        // fold this level's predictions into the running state, everywhere
        let new_running: Vec<Tensor> = (0..n_images)
            .into_par_iter()
            .map(|i| {
                let mut out = bases[i].clone();
                for (ch, fit) in fits.iter().enumerate() {
                    let resid =
                        predict_channel_residual(fit, &data[i].hop, &data[i].dcp, &bases[i], None)?;
                    for (px, r) in resid.iter().enumerate() {
                        out.data[px * 3 + ch] += r;
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;

        let mut train_mse = [0.0; 3];
        let mut val_mse = [0.0; 3];
        for ch in 0..3 {
            let mut acc = [0.0; 2];
            let mut cnt = [0.0; 2];
            for i in 0..n_images {
                let which = usize::from(i >= val_from);
                acc[which] += mse(
                    &channel_plane_tensor(&new_running[i], ch),
                    &channel_plane_tensor(&data[i].clear, ch),
                );
                cnt[which] += 1.0;
            }
            train_mse[ch] = acc[0] / cnt[0];
            val_mse[ch] = acc[1] / cnt[1];
        }
        reports.push(LevelReport {
            resolution: res,
            train_mse,
            val_mse,
            gate_val_mse: [fits[0].gate_val_mse, fits[1].gate_val_mse, fits[2].gate_val_mse],
            gate_off_mse: [fits[0].gate_off_mse, fits[1].gate_off_mse, fits[2].gate_off_mse],
            gate_raw_mse: [fits[0].gate_raw_mse, fits[1].gate_raw_mse, fits[2].gate_raw_mse],
            gate_lnt_mse: [fits[0].gate_lnt_mse, fits[1].gate_lnt_mse, fits[2].gate_lnt_mse],
            gate_blend_mse: [fits[0].gate_blend_mse, fits[1].gate_blend_mse, fits[2].gate_blend_mse],
        });

        let mut selected: [Vec<usize>; 3] = Default::default();
        let mut lnt: [Option<LntTransform>; 3] = Default::default();
        let mut regressor_lnt: [Option<TreeEnsembleModel>; 3] = Default::default();
        let mut blend = [1.0; 3];
        let mut active = [true; 3];
        let mut raws = Vec::with_capacity(3);
        for (ch, fit) in fits.into_iter().enumerate() {
            selected[ch] = fit.selected;
            lnt[ch] = fit.lnt;
            regressor_lnt[ch] = fit.regressor_lnt;
            blend[ch] = fit.blend;
            active[ch] = fit.active;
            raws.push(fit.regressor_raw);
        }
        let regressor_raw: [TreeEnsembleModel; 3] = raws
            .try_into()
            .map_err(|_| Error::invalid("internal: expected three channel regressors"))?;

        levels.push(LevelModel {
            resolution: res,
            cascade_hop: hop_index,
            rft_selected: selected,
            lnt,
            regressor_raw,
            regressor_lnt,
            blend,
            active,
        });
        running = new_running;
    }

    let final_val_mse = reports
        .last()
        .map(|r| r.val_mse)
        .unwrap_or([f64::NAN; 3]);
    Ok((
        UShapeModel {
            input_size: s,
            levels,
            cascade,
            dcp_params: cfg.dcp_params.clone(),
            omega_model,
            version: MODEL_FORMAT_VERSION,
        },
        TrainReport {
            levels: reports,
            final_val_mse,
        },
    ))
}

fn level_channel_fit(level: &LevelModel, ch: usize) -> ChannelFit {
    ChannelFit {
        selected: level.rft_selected[ch].clone(),
        lnt: level.lnt[ch].clone(),
        regressor_raw: level.regressor_raw[ch].clone(),
        regressor_lnt: level.regressor_lnt[ch].clone(),
        blend: level.blend[ch],
        active: level.active[ch],
        gate_val_mse: f64::NAN,
        gate_off_mse: f64::NAN,
        gate_blend_mse: f64::NAN,
        gate_raw_mse: f64::NAN,
        gate_lnt_mse: f64::NAN,
    }
}

/// Runs the trained pipeline on an image of any size. The image is resized
/// to the model's input size, dehazed, refined coarse to fine, and resized
/// back.
pub fn infer(img: &ImageBuffer, model: &UShapeModel) -> Result<ImageBuffer> {
    if img.channels() != 3 {
        return Err(Error::shape("infer channels", img.channels(), 3));
    }
    if model.levels.is_empty() {
        return Err(Error::Integrity("model has no levels".into()));
    }
    let s = model.input_size;
    let (h0, w0) = (img.height(), img.width());
    let square = resize(img, s, s)?;
    let dcp_out = dehaze_dcp(&square, &model.dcp_params, model.omega_model.as_ref())?;
    let hops = apply_cascade(&dcp_out, &model.cascade)?;

    let mut running: Option<Tensor> = None;
    for level in &model.levels {
        let res = level.resolution;
        let hop = hops
            .get(level.cascade_hop)
            .ok_or_else(|| Error::Integrity("level references missing cascade hop".into()))?
            .resize(res, res)?;
        let dcp_l = Tensor::from_image(&resize(&dcp_out, res, res)?);
        let base = match running {
            Some(t) => t.resize(res, res)?,
            None => dcp_l.clone(),
        };
        let mut out = base.clone();
        for ch in 0..3 {
            let fit = level_channel_fit(level, ch);
            let resid = predict_channel_residual(&fit, &hop, &dcp_l, &base, None)?;
            for (px, r) in resid.iter().enumerate() {
                out.data[px * 3 + ch] += r;
            }
        }
        running = Some(out);
    }
    let finest = running.expect("at least one level ran");
    let full = finest.resize(s, s)?;
    let mut data = full.data;
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    let restored = ImageBuffer::new(s, s, 3, data)?;
    resize(&restored, h0, w0)
}

/// Parameter counts per component.
#[derive(Debug, Clone, Default)]
pub struct LevelParameterCounts {
    pub resolution: usize,
    pub saab: usize,
    pub rft: usize,
    pub lnt: usize,
    pub trees: usize,
}

impl LevelParameterCounts {
    pub fn total(&self) -> usize {
        self.saab + self.rft + self.lnt + self.trees
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParameterReport {
    pub per_level: Vec<LevelParameterCounts>,
    pub omega_forest: usize,
    pub dcp: usize,
}

impl ParameterReport {
    pub fn total(&self) -> usize {
        self.per_level.iter().map(|l| l.total()).sum::<usize>() + self.omega_forest + self.dcp
    }
}

/// Counts stored parameters: Saab filter entries and biases (attributed to
/// the level fed by each hop), RFT index lists, LNT matrices with their
/// bias, mean, and edges, and tree nodes under the 2-per-internal,
/// 1-per-leaf convention.
pub fn report_parameters(model: &UShapeModel) -> ParameterReport {
    let mut report = ParameterReport {
        dcp: 6,
        omega_forest: model
            .omega_model
            .as_ref()
            .map(crate::trees::count_parameters)
            .unwrap_or(0),
        ..ParameterReport::default()
    };
    for level in &model.levels {
        let mut counts = LevelParameterCounts {
            resolution: level.resolution,
            ..LevelParameterCounts::default()
        };
        if let Some((_, bank)) = model.cascade.hops.get(level.cascade_hop) {
            counts.saab = bank.dc_vector.len() + bank.ac_vectors.len() + bank.biases.len();
        }
        for ch in 0..3 {
            counts.rft += level.rft_selected[ch].len();
            if let Some(lnt) = &level.lnt[ch] {
                counts.lnt +=
                    lnt.a_matrix.len() + lnt.b_bias.len() + lnt.x_mean.len() + lnt.bin_edges.len();
            }
            counts.trees += crate::trees::count_parameters(&level.regressor_raw[ch]);
            if let Some(reg) = &level.regressor_lnt[ch] {
                counts.trees += crate::trees::count_parameters(reg);
            }
        }
        report.per_level.push(counts);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_clear_image, synthesize_haze, DepthModel, HazeSpec};
    use crate::dcp::Airlight;
    use crate::image::psnr;
    use approx::assert_abs_diff_eq;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            input_size: 32,
            levels: 3,
            pixel_subsample: 0.5,
            rft_keep: 8,
            rft_bins: 9,
            lnt_bins: 4,
            gbt: GbtParams {
                rounds: 10,
                eta: 0.4,
                max_depth: 3,
                ..GbtParams::default()
            },
            seed: 5,
            dcp_params: DcpParams {
                patch_radius: 2,
                gf_radius: 3,
                ..DcpParams::default()
            },
            omega_mode: OmegaMode::Fixed,
            feature_mode: FeatureMode::RawPlusLnt,
            val_fraction: 0.25,
            hops: None,
        }
    }

    fn tiny_pairs(count: usize) -> Vec<(ImageBuffer, ImageBuffer)> {
        (0..count)
            .map(|i| {
                let clear = generate_clear_image(300 + i as u64, 32, 32);
                let spec = HazeSpec {
                    beta: 0.8 + 0.1 * (i % 5) as f64,
                    airlight: Airlight::new([0.85, 0.87, 0.83]).unwrap(),
                    depth: DepthModel::Ramp { near: 0.2, far: 1.0 },
                };
                let hazy = synthesize_haze(&clear, &spec).unwrap();
                (hazy, clear)
            })
            .collect()
    }

    #[test]
    fn pyramid_resolutions_halve() {
        let img = generate_clear_image(1, 64, 64);
        let pyr = build_pyramid(&img, 3, 64).unwrap();
        let sizes: Vec<usize> = pyr.iter().map(|p| p.height()).collect();
        assert_eq!(sizes, vec![32, 16, 8]);

        // the production geometry: 256 inputs feed 128/64/32 maps
        let img = ImageBuffer::filled(256, 256, 3, 0.5);
        let pyr = build_pyramid(&img, 3, 256).unwrap();
        let sizes: Vec<usize> = pyr.iter().map(|p| p.height()).collect();
        assert_eq!(sizes, vec![128, 64, 32]);
    }

    #[test]
    fn pyramid_of_constant_is_constant() {
        let img = ImageBuffer::filled(32, 32, 3, 0.6);
        for level in build_pyramid(&img, 2, 32).unwrap() {
            assert!(level.data().iter().all(|&v| v == 0.6));
        }
    }

    #[test]
    fn pyramid_levels_match_direct_resize() {
        let img = generate_clear_image(2, 64, 64);
        let pyr = build_pyramid(&img, 3, 64).unwrap();
        for (k, level) in pyr.iter().enumerate() {
            let side = 64 >> (k + 1);
            let direct = resize(&img, side, side).unwrap();
            for (a, b) in level.data().iter().zip(direct.data()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn pyramid_rejects_indivisible_sizes() {
        let img = ImageBuffer::filled(20, 20, 3, 0.5);
        assert!(build_pyramid(&img, 3, 20).is_err());
    }

    #[test]
    fn feature_rows_have_declared_width() {
        let hop = Tensor::new(4, 4, 5, vec![0.3; 80]).unwrap();
        let dcp = Tensor::new(4, 4, 3, vec![0.5; 48]).unwrap();
        let coarse = Tensor::new(4, 4, 3, vec![0.4; 48]).unwrap();
        let selected = vec![0, 2, 4];
        let rows = assemble_features(&selected, &hop, &dcp, &coarse, None).unwrap();
        assert_eq!(rows.len(), 16 * feature_row_width(3));
        assert_eq!(feature_row_width(3), 3 + 3 + 3 + 2);
    }

    #[test]
    fn identical_pixels_produce_identical_rows() {
        // constant planes: every row differs only in its coordinates
        let hop = Tensor::new(3, 3, 2, vec![0.7; 18]).unwrap();
        let dcp = Tensor::new(3, 3, 3, vec![0.2; 27]).unwrap();
        let coarse = Tensor::new(3, 3, 3, vec![0.1; 27]).unwrap();
        let rows = assemble_features(&[0, 1], &hop, &dcp, &coarse, None).unwrap();
        let w = feature_row_width(2);
        for px in 1..9 {
            assert_eq!(rows[..w - 2], rows[px * w..(px + 1) * w - 2]);
        }
    }

    #[test]
    fn trained_pipeline_improves_on_training_data_and_stays_deterministic() {
        let pairs = tiny_pairs(8);
        let cfg = tiny_config();
        let (model, report) = train_pipeline(&pairs, &cfg).unwrap();
        let (model2, _) = train_pipeline(&pairs, &cfg).unwrap();
        assert_eq!(model, model2, "same seed must give identical models");

        assert_eq!(model.levels.len(), 3);
        let resolutions: Vec<usize> = model.levels.iter().map(|l| l.resolution).collect();
        assert_eq!(resolutions, vec![4, 8, 16]);

        // every level's validated contribution must beat contributing
        // nothing on its gate rows (zero prediction is always an option)
        for level in &report.levels {
            for ch in 0..3 {
                assert!(
                    level.gate_val_mse[ch] <= level.gate_off_mse[ch],
                    "level {} channel {ch} lost to the no-op option",
                    level.resolution
                );
            }
        }

        // inference output shape, range, determinism
        let out = infer(&pairs[0].0, &model).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (32, 32, 3));
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let out2 = infer(&pairs[0].0, &model).unwrap();
        assert_eq!(out.data(), out2.data());

        // non-square inputs come back at their own shape
        let wide = resize(&pairs[0].0, 24, 40).unwrap();
        let out = infer(&wide, &model).unwrap();
        assert_eq!((out.height(), out.width()), (24, 40));
    }

    #[test]
    fn identity_task_beats_dcp_only_on_training_data() {
        // hazy = clear: the residual levels learn to undo the damage the
        // fixed-omega DCP stage does to an already-clear input
        let pairs: Vec<(ImageBuffer, ImageBuffer)> = (0..8)
            .map(|i| {
                let clear = generate_clear_image(500 + i as u64, 32, 32);
                (clear.clone(), clear)
            })
            .collect();
        let cfg = tiny_config();
        let (model, _) = train_pipeline(&pairs, &cfg).unwrap();
        let mut infer_psnr = 0.0;
        let mut dcp_psnr = 0.0;
        for (hazy, clear) in &pairs {
            infer_psnr += psnr(&infer(hazy, &model).unwrap(), clear).unwrap();
            let d = dehaze_dcp(hazy, &model.dcp_params, None).unwrap();
            dcp_psnr += psnr(&d, clear).unwrap();
        }
        assert!(
            infer_psnr >= dcp_psnr,
            "identity task: infer {:.2} dB < dcp-only {:.2} dB",
            infer_psnr / 8.0,
            dcp_psnr / 8.0
        );
    }

    #[test]
    fn residual_telescoping_reconstructs_final_output() {
        let pairs = tiny_pairs(8);
        let cfg = tiny_config();
        let (model, _) = train_pipeline(&pairs, &cfg).unwrap();
        let img = &pairs[0].0;

        // replay inference, capturing the base and residual at each level
        let square = resize(img, 32, 32).unwrap();
        let dcp_out = dehaze_dcp(&square, &model.dcp_params, None).unwrap();
        let hops = apply_cascade(&dcp_out, &model.cascade).unwrap();
        let mut running: Option<Tensor> = None;
        for level in &model.levels {
            let res = level.resolution;
            let hop = hops[level.cascade_hop].resize(res, res).unwrap();
            let dcp_l = Tensor::from_image(&resize(&dcp_out, res, res).unwrap());
            let base = match running {
                Some(t) => t.resize(res, res).unwrap(),
                None => dcp_l.clone(),
            };
            let mut resid_sum = vec![0.0; res * res * 3];
            for ch in 0..3 {
                let fit = level_channel_fit(level, ch);
                let resid = predict_channel_residual(&fit, &hop, &dcp_l, &base, None).unwrap();
                for (px, r) in resid.iter().enumerate() {
                    resid_sum[px * 3 + ch] = *r;
                }
            }
            // telescoping: new running = base + residual, bitwise
            let mut next = base.clone();
            for (o, r) in next.data.iter_mut().zip(&resid_sum) {
                *o += r;
            }
            running = Some(next);
        }
        let finest = running.unwrap().resize(32, 32).unwrap();
        let reference = infer(img, &model).unwrap();
        for (a, b) in finest.data.iter().zip(reference.data()) {
            assert_abs_diff_eq!(a.clamp(0.0, 1.0), *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn parameter_report_is_additive() {
        let pairs = tiny_pairs(8);
        let (model, _) = train_pipeline(&pairs, &tiny_config()).unwrap();
        let report = report_parameters(&model);
        assert_eq!(report.per_level.len(), 3);
        let sum: usize = report.per_level.iter().map(|l| l.total()).sum::<usize>()
            + report.omega_forest
            + report.dcp;
        assert_eq!(report.total(), sum);
        for level in &report.per_level {
            assert!(level.trees > 0);
            assert!(level.saab > 0);
        }
    }
}
