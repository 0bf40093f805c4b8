//! Modified Dark Channel Prior dehazing.
//!
//! The classic DCP chain (dark channel, atmospheric light from the brightest
//! dark-channel pixels, transmission estimate, guided-filter refinement,
//! radiance recovery) with one twist: the haze-removal strength omega is not
//! fixed but regressed per image by a random forest over global color
//! statistics, so thin haze is not over-corrected and dense haze is not
//! under-corrected.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{psnr, rgb_to_yuv, ImageBuffer, ScalarMap};
use crate::trees::{fit_random_forest, ForestParams, TreeEnsembleModel};

/// Lowest airlight component kept after estimation; the recovery divides by
/// the airlight, so it must stay away from zero.
pub const AIRLIGHT_FLOOR: f64 = 0.05;

/// Clamp range for regressed omega values.
pub const OMEGA_MIN: f64 = 0.5;
pub const OMEGA_MAX: f64 = 0.98;

/// Parameters of the DCP stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DcpParams {
    /// Haze-removal strength in (0, 1]; overridden by a fitted omega model.
    pub omega: f64,
    /// Transmission floor in (0, 1).
    pub t0: f64,
    /// Half-width of the dark-channel window (radius 7 = 15x15).
    pub patch_radius: usize,
    /// Fraction of brightest dark-channel pixels considered for airlight.
    pub bright_fraction: f64,
    /// Guided-filter window radius.
    pub gf_radius: usize,
    /// Guided-filter regularizer.
    pub gf_eps: f64,
}

impl Default for DcpParams {
    fn default() -> Self {
        Self {
            omega: 0.95,
            t0: 0.1,
            patch_radius: 7,
            bright_fraction: 0.001,
            gf_radius: 20,
            gf_eps: 1e-3,
        }
    }
}

impl DcpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::invalid("omega must lie in (0, 1]"));
        }
        if !(self.t0 > 0.0 && self.t0 < 1.0) {
            return Err(Error::invalid("t0 must lie in (0, 1)"));
        }
        if self.patch_radius == 0 {
            return Err(Error::invalid("patch_radius must be >= 1"));
        }
        if !(self.bright_fraction > 0.0 && self.bright_fraction <= 1.0) {
            return Err(Error::invalid("bright_fraction must lie in (0, 1]"));
        }
        if self.gf_eps <= 0.0 {
            return Err(Error::invalid("gf_eps must be > 0"));
        }
        Ok(())
    }
}

/// Per-channel atmospheric light, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Airlight {
    pub values: [f64; 3],
}

impl Airlight {
    pub fn new(values: [f64; 3]) -> Result<Self> {
        if values.iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("airlight components must be > 0"));
        }
        Ok(Self { values })
    }
}

/// Per-pixel channel minimum followed by a windowed minimum with edge
/// replication (separable passes).
pub fn dark_channel(img: &ImageBuffer, radius: usize) -> Result<ScalarMap> {
    if img.channels() != 3 {
        return Err(Error::shape("dark_channel channels", img.channels(), 3));
    }
    let (h, w) = (img.height(), img.width());
    let mut pixel_min = vec![0.0; h * w];
    for px in 0..h * w {
        let d = img.data();
        pixel_min[px] = d[px * 3].min(d[px * 3 + 1]).min(d[px * 3 + 2]);
    }
    let r = radius as isize;
    // horizontal pass
    let mut horiz = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut lo = f64::INFINITY;
            for dc in -r..=r {
                let cc = (col as isize + dc).clamp(0, w as isize - 1) as usize;
                lo = lo.min(pixel_min[row * w + cc]);
            }
            horiz[row * w + col] = lo;
        }
    }
    // vertical pass
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut lo = f64::INFINITY;
            for dr in -r..=r {
                let rr = (row as isize + dr).clamp(0, h as isize - 1) as usize;
                lo = lo.min(horiz[rr * w + col]);
            }
            out[row * w + col] = lo;
        }
    }
    ScalarMap::new(h, w, out)
}

/// Atmospheric light: among the brightest `bright_fraction` of dark-channel
/// pixels, take the RGB of the one with the highest luminance. Components
/// are floored at [`AIRLIGHT_FLOOR`].
pub fn estimate_airlight(
    img: &ImageBuffer,
    dark: &ScalarMap,
    bright_fraction: f64,
) -> Result<Airlight> {
    if img.channels() != 3 {
        return Err(Error::shape("estimate_airlight channels", img.channels(), 3));
    }
    if img.height() != dark.height() || img.width() != dark.width() {
        return Err(Error::shape(
            "estimate_airlight dark map",
            format!("{}x{}", dark.height(), dark.width()),
            format!("{}x{}", img.height(), img.width()),
        ));
    }
    if !(bright_fraction > 0.0 && bright_fraction <= 1.0) {
        return Err(Error::invalid("bright_fraction must lie in (0, 1]"));
    }
    let total = img.height() * img.width();
    let k = ((bright_fraction * total as f64).ceil() as usize).clamp(1, total);
    let mut order: Vec<u32> = (0..total as u32).collect();
    order.sort_by(|&a, &b| {
        dark.data()[b as usize]
            .total_cmp(&dark.data()[a as usize])
            .then(a.cmp(&b))
    });
    let luma = img.luminance();
    let mut best = order[0] as usize;
    for &cand in order[..k].iter().skip(1) {
        if luma.data()[cand as usize] > luma.data()[best] {
            best = cand as usize;
        }
    }
    let d = img.data();
    Airlight::new([
        d[best * 3].max(AIRLIGHT_FLOOR),
        d[best * 3 + 1].max(AIRLIGHT_FLOOR),
        d[best * 3 + 2].max(AIRLIGHT_FLOOR),
    ])
}

/// Raw transmission estimate `1 - omega * dark_channel(I / A)`, with the
/// normalized intensities capped at 1 so the estimate stays in
/// `[1 - omega, 1]`.
pub fn estimate_transmission(
    img: &ImageBuffer,
    a: &Airlight,
    omega: f64,
    radius: usize,
) -> Result<ScalarMap> {
    if img.channels() != 3 {
        return Err(Error::shape("estimate_transmission channels", img.channels(), 3));
    }
    if a.values.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("airlight components must be > 0"));
    }
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::invalid("omega must lie in (0, 1]"));
    }
    let mut normalized = Vec::with_capacity(img.data().len());
    for px in 0..img.height() * img.width() {
        for ch in 0..3 {
            normalized.push((img.data()[px * 3 + ch] / a.values[ch]).min(1.0));
        }
    }
    let norm_img = ImageBuffer::new(img.height(), img.width(), 3, normalized)?;
    let dark = dark_channel(&norm_img, radius)?;
    let data = dark.data().iter().map(|&d| 1.0 - omega * d).collect();
    ScalarMap::new(img.height(), img.width(), data)
}

/// Mean anchored at the first element: exact for constant inputs.
fn anchored_mean(values: &[f64]) -> f64 {
    let anchor = values[0];
    let acc: f64 = values.iter().map(|v| v - anchor).sum();
    anchor + acc / values.len() as f64
}

/// Box mean with edge replication via an integral image over the padded map.
fn box_mean(map: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut integral = vec![0.0; (ph + 1) * (pw + 1)];
    for row in 0..ph {
        let src_row = row.saturating_sub(r).min(h - 1);
        let mut run = 0.0;
        for col in 0..pw {
            let src_col = col.saturating_sub(r).min(w - 1);
            run += map[src_row * w + src_col];
            integral[(row + 1) * (pw + 1) + col + 1] = integral[row * (pw + 1) + col + 1] + run;
        }
    }
    let side = 2 * r + 1;
    let area = (side * side) as f64;
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let (r0, c0) = (row, col);
            let (r1, c1) = (row + side, col + side);
            let sum = integral[r1 * (pw + 1) + c1] - integral[r0 * (pw + 1) + c1]
                - integral[r1 * (pw + 1) + c0]
                + integral[r0 * (pw + 1) + c0];
            out[row * w + col] = sum / area;
        }
    }
    out
}

/// Standard guided filter: per-window linear model of the input in the
/// guide, box-averaged coefficients. Three-channel guides are reduced to
/// luminance. Both maps are shifted by their global means before filtering,
/// which keeps the algebra identical and constant inputs exactly fixed.
pub fn guided_filter(
    guide: &ImageBuffer,
    input: &ScalarMap,
    radius: usize,
    eps: f64,
) -> Result<ScalarMap> {
    if guide.height() != input.height() || guide.width() != input.width() {
        return Err(Error::shape(
            "guided_filter dims",
            format!("{}x{}", input.height(), input.width()),
            format!("{}x{}", guide.height(), guide.width()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("guided_filter eps must be > 0"));
    }
    let (h, w) = (input.height(), input.width());
    let g_full = guide.luminance();
    let mg = anchored_mean(g_full.data());
    let mp = anchored_mean(input.data());
    let gs: Vec<f64> = g_full.data().iter().map(|v| v - mg).collect();
    let ps: Vec<f64> = input.data().iter().map(|v| v - mp).collect();

    let mean_g = box_mean(&gs, h, w, radius);
    let mean_p = box_mean(&ps, h, w, radius);
    let gg: Vec<f64> = gs.iter().map(|v| v * v).collect();
    let gp: Vec<f64> = gs.iter().zip(&ps).map(|(g, p)| g * p).collect();
    let corr_gg = box_mean(&gg, h, w, radius);
    let corr_gp = box_mean(&gp, h, w, radius);

    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    for i in 0..h * w {
        let var = (corr_gg[i] - mean_g[i] * mean_g[i]).max(0.0);
        let cov = corr_gp[i] - mean_g[i] * mean_p[i];
        a[i] = cov / (var + eps);
        b[i] = mean_p[i] - a[i] * mean_g[i];
    }
    let mean_a = box_mean(&a, h, w, radius);
    let mean_b = box_mean(&b, h, w, radius);
    let out: Vec<f64> = (0..h * w)
        .map(|i| mean_a[i] * gs[i] + mean_b[i] + mp)
        .collect();
    ScalarMap::new(h, w, out)
}

/// Scene radiance recovery `J = (I - A) / max(t, t0) + A`, clamped to unit
/// range.
pub fn recover_radiance(
    img: &ImageBuffer,
    a: &Airlight,
    t: &ScalarMap,
    t0: f64,
) -> Result<ImageBuffer> {
    if img.height() != t.height() || img.width() != t.width() {
        return Err(Error::shape(
            "recover_radiance transmission",
            format!("{}x{}", t.height(), t.width()),
            format!("{}x{}", img.height(), img.width()),
        ));
    }
    if img.channels() != 3 {
        return Err(Error::shape("recover_radiance channels", img.channels(), 3));
    }
    if !(t0 > 0.0 && t0 < 1.0) {
        return Err(Error::invalid("t0 must lie in (0, 1)"));
    }
    let mut data = Vec::with_capacity(img.data().len());
    for px in 0..img.height() * img.width() {
        let denom = t.data()[px].max(t0);
        for ch in 0..3 {
            let v = (img.data()[px * 3 + ch] - a.values[ch]) / denom + a.values[ch];
            data.push(v.clamp(0.0, 1.0));
        }
    }
    ImageBuffer::new(img.height(), img.width(), 3, data)
}

/// Global statistics over R, G, B, Y, U, V: mean, min, max, and population
/// variance per channel, channel-major. 24 values.
pub fn global_stats_features(img: &ImageBuffer) -> Result<Vec<f64>> {
    if img.channels() != 3 {
        return Err(Error::shape("global_stats channels", img.channels(), 3));
    }
    let yuv = rgb_to_yuv(img)?;
    let mut feats = Vec::with_capacity(24);
    for (source, ch) in [(img, 0), (img, 1), (img, 2), (&yuv, 0), (&yuv, 1), (&yuv, 2)] {
        let plane = source.channel_plane(ch);
        let values = plane.data();
        let mean = anchored_mean(values);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut var = 0.0;
        for &v in values {
            lo = lo.min(v);
            hi = hi.max(v);
            var += (v - mean) * (v - mean);
        }
        feats.extend_from_slice(&[mean, lo, hi, var / values.len() as f64]);
    }
    Ok(feats)
}

/// Forest prediction clamped into the usable omega range.
pub fn predict_omega(model: &TreeEnsembleModel, feats: &[f64]) -> Result<f64> {
    Ok(model.predict(feats)?.clamp(OMEGA_MIN, OMEGA_MAX))
}

/// Label grid for the omega sweep: 0.50 to 0.95 in steps of 0.05, plus the
/// 0.98 endpoint.
pub fn omega_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect();
    grid.push(0.98);
    grid
}

/// Full DCP chain at a fixed omega.
pub fn dehaze_dcp_with_omega(img: &ImageBuffer, params: &DcpParams, omega: f64) -> Result<ImageBuffer> {
    params.validate()?;
    let dark = dark_channel(img, params.patch_radius)?;
    let a = estimate_airlight(img, &dark, params.bright_fraction)?;
    let t_raw = estimate_transmission(img, &a, omega, params.patch_radius)?;
    let t = guided_filter(img, &t_raw, params.gf_radius, params.gf_eps)?;
    recover_radiance(img, &a, &t, params.t0)
}

/// Best-PSNR omega for one clear/hazy pair, swept over [`omega_grid`].
/// Ties keep the smaller omega.
pub fn omega_sweep_label(clear: &ImageBuffer, hazy: &ImageBuffer, params: &DcpParams) -> Result<f64> {
    let mut best_omega = OMEGA_MIN;
    let mut best_psnr = f64::NEG_INFINITY;
    for omega in omega_grid() {
        let restored = dehaze_dcp_with_omega(hazy, params, omega)?;
        let score = psnr(&restored, clear)?;
        if score > best_psnr {
            best_psnr = score;
            best_omega = omega;
        }
    }
    Ok(best_omega)
}

/// Trains the omega regressor: sweeps every pair for its best-PSNR omega,
/// then fits a random forest from global color statistics of the hazy image
/// to that label.
pub fn fit_omega_regressor(
    pairs: &[(ImageBuffer, ImageBuffer)],
    params: &DcpParams,
    seed: u64,
) -> Result<TreeEnsembleModel> {
    if pairs.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "omega regressor needs >= 10 pairs, got {}",
            pairs.len()
        )));
    }
    let labeled: Vec<(Vec<f64>, f64)> = pairs
        .par_iter()
        .map(|(clear, hazy)| {
            let label = omega_sweep_label(clear, hazy, params)?;
            let feats = global_stats_features(hazy)?;
            Ok((feats, label))
        })
        .collect::<Result<_>>()?;
    let mut features = Vec::with_capacity(labeled.len() * 24);
    let mut labels = Vec::with_capacity(labeled.len());
    for (f, l) in labeled {
        features.extend(f);
        labels.push(l);
    }
    fit_random_forest(
        &features,
        24,
        &labels,
        &ForestParams {
            seed,
            ..ForestParams::default()
        },
    )
}

/// Preliminary dehazing: the full modified-DCP chain, with omega taken from
/// the fitted regressor when present.
pub fn dehaze_dcp(
    img: &ImageBuffer,
    params: &DcpParams,
    omega_model: Option<&TreeEnsembleModel>,
) -> Result<ImageBuffer> {
    let omega = match omega_model {
        Some(model) => predict_omega(model, &global_stats_features(img)?)?,
        None => params.omega,
    };
    dehaze_dcp_with_omega(img, params, omega)
}
