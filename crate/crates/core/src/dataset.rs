//! Dataset synthesis, manifests, and benchmark scoring.
//!
//! Hazy images are synthesized from clear ones through the atmospheric
//! scattering model `I = J e^{-beta d} + A (1 - e^{-beta d})` with recorded
//! ground-truth beta and airlight, so the pipeline can be trained and scored
//! without external benchmark downloads.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dcp::{dehaze_dcp, Airlight};
use crate::error::{Error, Result};
use crate::image::{load_image, psnr, resize, save_image, ssim, ImageBuffer, ScalarMap};
use crate::ushape::{infer, UShapeModel};

/// Scene depth used for haze synthesis.
#[derive(Debug, Clone, PartialEq)]
pub enum DepthModel {
    Constant(f64),
    /// Vertical linear ramp from `near` (top row) to `far` (bottom row).
    Ramp { near: f64, far: f64 },
    Map(ScalarMap),
}

impl DepthModel {
    pub fn to_map(&self, height: usize, width: usize) -> Result<ScalarMap> {
        match self {
            DepthModel::Constant(d) => Ok(ScalarMap::filled(height, width, *d)),
            DepthModel::Ramp { near, far } => {
                let mut data = Vec::with_capacity(height * width);
                for r in 0..height {
                    let t = if height > 1 { r as f64 / (height - 1) as f64 } else { 0.0 };
                    let d = near + (far - near) * t;
                    for _ in 0..width {
                        data.push(d);
                    }
                }
                ScalarMap::new(height, width, data)
            }
            DepthModel::Map(map) => {
                if map.height() != height || map.width() != width {
                    return Err(Error::shape(
                        "depth map dims",
                        format!("{}x{}", map.height(), map.width()),
                        format!("{height}x{width}"),
                    ));
                }
                Ok(map.clone())
            }
        }
    }
}

/// One haze realization.
#[derive(Debug, Clone, PartialEq)]
pub struct HazeSpec {
    pub beta: f64,
    pub airlight: Airlight,
    pub depth: DepthModel,
}

impl HazeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::invalid("beta must be >= 0"));
        }
        Ok(())
    }
}

/// `I = J e^{-beta d} + A(1 - e^{-beta d})`, clamped to unit range.
pub fn synthesize_haze(clear: &ImageBuffer, spec: &HazeSpec) -> Result<ImageBuffer> {
    spec.validate()?;
    if clear.channels() != 3 {
        return Err(Error::shape("synthesize_haze channels", clear.channels(), 3));
    }
    let depth = spec.depth.to_map(clear.height(), clear.width())?;
    let mut data = Vec::with_capacity(clear.data().len());
    for px in 0..clear.height() * clear.width() {
        let t = (-spec.beta * depth.data()[px]).exp();
        for ch in 0..3 {
            let j = clear.data()[px * 3 + ch];
            let a = spec.airlight.values[ch];
            data.push((j * t + a * (1.0 - t)).clamp(0.0, 1.0));
        }
    }
    ImageBuffer::new(clear.height(), clear.width(), 3, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// One clear/hazy pair with optional synthesis labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub clear: PathBuf,
    pub hazy: PathBuf,
    pub beta: Option<f64>,
    pub airlight: Option<[f64; 3]>,
    pub split: Split,
}

/// A manifest-backed set of pairs with disjoint splits.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<PairRecord>,
    pub seed: u64,
}

impl PairSet {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PairRecord> {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Configuration for synthetic-haze generation.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub beta_range: (f64, f64),
    /// Airlight luminance range; channels jitter around one gray sample.
    pub airlight_range: (f64, f64),
    pub depth: DepthModel,
    /// Train/val fractions; the remainder becomes the test split.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            beta_range: (0.6, 1.8),
            airlight_range: (0.7, 1.0),
            depth: DepthModel::Ramp { near: 0.2, far: 1.0 },
            train_fraction: 0.7,
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

/// Draws one haze realization: beta uniform in range, airlight gray-biased
/// with +-0.05 chroma jitter.
pub fn sample_haze_spec(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<HazeSpec> {
    let (b0, b1) = cfg.beta_range;
    if b1 < b0 || b0 < 0.0 {
        return Err(Error::invalid("invalid beta range"));
    }
    let beta = if b1 > b0 { rng.gen_range(b0..=b1) } else { b0 };
    let (a0, a1) = cfg.airlight_range;
    if !(a0 > 0.0 && a1 <= 1.0 && a0 <= a1) {
        return Err(Error::invalid("airlight range must lie in (0, 1]"));
    }
    let lum = if a1 > a0 { rng.gen_range(a0..=a1) } else { a0 };
    let mut values = [0.0; 3];
    for v in &mut values {
        *v = (lum + rng.gen_range(-0.05..=0.05)).clamp(0.05, 1.0);
    }
    Ok(HazeSpec {
        beta,
        airlight: Airlight::new(values)?,
        depth: cfg.depth.clone(),
    })
}

/// Deterministic split assignment: seeded shuffle, then contiguous cuts.
pub fn assign_splits(count: usize, train_fraction: f64, val_fraction: f64, seed: u64) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed_5911));
    order.shuffle(&mut rng);
    let n_train = (count as f64 * train_fraction).round() as usize;
    let n_val = (count as f64 * val_fraction).round() as usize;
    let mut splits = vec![Split::Test; count];
    for (pos, &idx) in order.iter().enumerate() {
        splits[idx] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Synthesizes one hazy image per clear image, writes the hazy PNGs into
/// `out_dir`, and returns the labeled pair set. Fully determined by the
/// config seed.
pub fn make_synthetic_set(
    clears: &[(PathBuf, ImageBuffer)],
    out_dir: &Path,
    cfg: &SynthConfig,
) -> Result<PairSet> {
    if clears.is_empty() {
        return Err(Error::InsufficientData("no clear images to synthesize from".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let splits = assign_splits(clears.len(), cfg.train_fraction, cfg.val_fraction, cfg.seed);
    let mut pairs = Vec::with_capacity(clears.len());
    for (i, (clear_path, clear)) in clears.iter().enumerate() {
        let spec = sample_haze_spec(cfg, &mut rng)?;
        let hazy = synthesize_haze(clear, &spec)?;
        let hazy_path = out_dir.join(format!("hazy_{i:04}.png"));
        save_image(&hazy, &hazy_path)?;
        pairs.push(PairRecord {
            clear: clear_path.clone(),
            hazy: hazy_path,
            beta: Some(spec.beta),
            airlight: Some(spec.airlight.values),
            split: splits[i],
        });
    }
    Ok(PairSet {
        pairs,
        seed: cfg.seed,
    })
}

/// Writes the tab-separated manifest: clear path, hazy path, then optional
/// beta, airlight components, and split. Lines starting with '#' are
/// comments.
pub fn write_manifest(set: &PairSet, path: &Path) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::new();
    out.push_str("# clear\thazy\tbeta\ta_r\ta_g\ta_b\tsplit\n");
    out.push_str(&format!("# seed={}\n", set.seed));
    for p in &set.pairs {
        out.push_str(&format!("{}\t{}", p.clear.display(), p.hazy.display()));
        if let (Some(beta), Some(a)) = (p.beta, p.airlight) {
            out.push_str(&format!(
                "\t{}\t{}\t{}\t{}",
                fmt_f64(beta),
                fmt_f64(a[0]),
                fmt_f64(a[1]),
                fmt_f64(a[2])
            ));
        }
        out.push_str(&format!("\t{}\n", p.split));
    }
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(out.as_bytes()).map_err(io_err)
}

/// Decimal text with 17 significant digits; round-trips any finite f64.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn load_manifest(path: &Path) -> Result<PairSet> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut pairs = Vec::new();
    let mut seed = 0u64;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(s) = comment.trim().strip_prefix("seed=") {
                seed = s.trim().parse().unwrap_or(0);
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no + 1,
            message,
        };
        if fields.len() < 2 {
            return Err(parse_err("expected at least clear and hazy paths".into()));
        }
        let mut record = PairRecord {
            clear: PathBuf::from(fields[0]),
            hazy: PathBuf::from(fields[1]),
            beta: None,
            airlight: None,
            split: Split::Train,
        };
        let mut rest: Vec<&str> = fields[2..].to_vec();
        // trailing split token is optional
        if let Some(last) = rest.last() {
            if let Ok(split) = last.parse::<Split>() {
                record.split = split;
                rest.pop();
            }
        }
        match rest.len() {
            0 => {}
            4 => {
                let mut nums = [0.0; 4];
                for (i, tok) in rest.iter().enumerate() {
                    nums[i] = tok
                        .parse()
                        .map_err(|e| parse_err(format!("bad numeric field '{tok}': {e}")))?;
                }
                record.beta = Some(nums[0]);
                record.airlight = Some([nums[1], nums[2], nums[3]]);
            }
            n => {
                return Err(parse_err(format!(
                    "expected 0 or 4 label fields plus optional split, got {n}"
                )))
            }
        }
        pairs.push(record);
    }
    Ok(PairSet { pairs, seed })
}

/// Procedurally generated clear test image: smooth multi-scale color fields
/// with scattered dark wells so the dark-channel prior holds.
pub fn generate_clear_image(seed: u64, height: usize, width: usize) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let mut data = vec![0.0; height * width * 3];

    // smooth base: a gradient plus a handful of wide gaussian color bumps
    let (gx, gy) = (rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25));
    let base: [f64; 3] = [
        rng.gen_range(0.5..0.75),
        rng.gen_range(0.5..0.75),
        rng.gen_range(0.5..0.75),
    ];
    struct Bump {
        cy: f64,
        cx: f64,
        inv2s2: f64,
        amp: [f64; 3],
    }
    let bumps: Vec<Bump> = (0..6)
        .map(|_| {
            let sigma = rng.gen_range(0.15..0.45) * height.max(width) as f64;
            Bump {
                cy: rng.gen_range(0.0..height as f64),
                cx: rng.gen_range(0.0..width as f64),
                inv2s2: 1.0 / (2.0 * sigma * sigma),
                amp: [
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                ],
            }
        })
        .collect();
    for r in 0..height {
        for c in 0..width {
            let fy = r as f64 / height.max(2) as f64;
            let fx = c as f64 / width.max(2) as f64;
            for ch in 0..3 {
                let mut v = base[ch] + gy * fy + gx * fx;
                for b in &bumps {
                    let dy = r as f64 - b.cy;
                    let dx = c as f64 - b.cx;
                    v += b.amp[ch] * (-(dy * dy + dx * dx) * b.inv2s2).exp();
                }
                data[(r * width + c) * 3 + ch] = v;
            }
        }
    }

    // dark wells on a jittered grid; each takes the local value close to
    // black so every 15x15 window holds a near-zero minimum, wide enough to
    // survive a 2x resolution round trip but sparse enough that the scene
    // between them stays bright
    let spacing = 10usize;
    for gy in (0..height).step_by(spacing) {
        for gx in (0..width).step_by(spacing) {
            let cy = (gy as f64 + rng.gen_range(0.0..5.0)).min(height as f64 - 1.0);
            let cx = (gx as f64 + rng.gen_range(0.0..5.0)).min(width as f64 - 1.0);
            let sigma: f64 = rng.gen_range(1.8..2.6);
            let depth: f64 = rng.gen_range(0.8..0.95);
            let reach = (3.0 * sigma).ceil() as isize;
            let inv2s2 = 1.0 / (2.0 * sigma * sigma);
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let rr = cy as isize + dy;
                    let cc = cx as isize + dx;
                    if rr < 0 || cc < 0 || rr >= height as isize || cc >= width as isize {
                        continue;
                    }
                    let fall = (-(dy * dy + dx * dx) as f64 * inv2s2).exp();
                    let scale = 1.0 - depth * fall;
                    for ch in 0..3 {
                        data[(rr as usize * width + cc as usize) * 3 + ch] *= scale;
                    }
                }
            }
        }
    }

    for v in &mut data {
        *v = v.clamp(0.02, 0.98);
    }
    ImageBuffer::new(height, width, 3, data).expect("generated image shape is valid")
}

/// Per-image and mean scores for a split.
#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub split: Split,
    pub rows: Vec<ImageScores>,
    pub mean_model: (f64, f64),
    pub mean_dcp: (f64, f64),
    pub mean_hazy: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct ImageScores {
    pub hazy_path: PathBuf,
    /// (PSNR, SSIM) for the full pipeline, the DCP stage alone, and the raw
    /// hazy input, each against the clear reference.
    pub model: (f64, f64),
    pub dcp_only: (f64, f64),
    pub hazy: (f64, f64),
}

/// Scores a trained model over one split of a pair set, alongside the
/// DCP-only and raw-hazy baselines.
pub fn evaluate(model: &UShapeModel, set: &PairSet, split: Split) -> Result<ScoreReport> {
    let records: Vec<&PairRecord> = set.split(split).collect();
    if records.is_empty() {
        return Err(Error::InsufficientData(format!("split '{split}' is empty")));
    }
    let rows: Vec<ImageScores> = records
        .par_iter()
        .map(|record| {
            let clear = load_image(&record.clear)?;
            let hazy = load_image(&record.hazy)?;
            let restored = infer(&hazy, model)?;
            let dcp_out = {
                let side = model.input_size;
                let small = resize(&hazy, side, side)?;
                let out = dehaze_dcp(&small, &model.dcp_params, model.omega_model.as_ref())?;
                resize(&out, hazy.height(), hazy.width())?
            };
            Ok(ImageScores {
                hazy_path: record.hazy.clone(),
                model: (psnr(&restored, &clear)?, ssim(&restored, &clear)?),
                dcp_only: (psnr(&dcp_out, &clear)?, ssim(&dcp_out, &clear)?),
                hazy: (psnr(&hazy, &clear)?, ssim(&hazy, &clear)?),
            })
        })
        .collect::<Result<_>>()?;
    let mean = |f: &dyn Fn(&ImageScores) -> (f64, f64)| -> (f64, f64) {
        let n = rows.len() as f64;
        let (mut p, mut s) = (0.0, 0.0);
        for row in &rows {
            let (pi, si) = f(row);
            p += pi;
            s += si;
        }
        (p / n, s / n)
    };
    Ok(ScoreReport {
        split,
        mean_model: mean(&|r| r.model),
        mean_dcp: mean(&|r| r.dcp_only),
        mean_hazy: mean(&|r| r.hazy),
        rows,
    })
}
