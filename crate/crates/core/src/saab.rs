//! PixelHop feature extraction with the Saab transform.
//!
//! Each hop gathers m x m x C neighborhoods, projects them onto a constant
//! DC kernel plus the principal components of the DC-removed residual, and
//! adds per-filter non-negativity biases. Hops cascade with 2x max pooling
//! in between, growing the receptive field while PCA keeps the channel count
//! in check.
//!
//! The AC eigenproblem is solved in an explicit orthonormal complement of
//! the DC direction (a Householder basis), which keeps every AC filter
//! orthogonal to DC at working precision and gives exactly D-1 candidate
//! filters for D-dimensional patches.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Dense H x W x C feature tensor, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "tensor data length",
                data.len(),
                height * width * channels,
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_image(img: &ImageBuffer) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            channels: img.channels(),
            data: img.data().to_vec(),
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Bilinear resample of every channel plane; values are not clamped.
    pub fn resize(&self, new_h: usize, new_w: usize) -> Result<Tensor> {
        if new_h == 0 || new_w == 0 {
            return Err(Error::invalid("tensor resize target must be nonzero"));
        }
        let mut data = vec![0.0; new_h * new_w * self.channels];
        let mut plane = vec![0.0; self.height * self.width];
        for ch in 0..self.channels {
            for px in 0..self.height * self.width {
                plane[px] = self.data[px * self.channels + ch];
            }
            let resized = crate::image::resize_plane(&plane, self.height, self.width, new_h, new_w);
            for (px, v) in resized.into_iter().enumerate() {
                data[px * self.channels + ch] = v;
            }
        }
        Tensor::new(new_h, new_w, self.channels, data)
    }
}

/// Row-major matrix of flattened patches.
#[derive(Debug, Clone)]
pub struct PatchMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PatchMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// How many filters a hop keeps, counting the DC filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeptFilters {
    /// Keep exactly this many output channels (DC included).
    Count(usize),
    /// Keep AC filters until this fraction of residual energy is covered.
    Energy(f64),
}

/// Configuration of one hop.
#[derive(Debug, Clone, PartialEq)]
pub struct HopConfig {
    /// Neighborhood size n gathered around each output site.
    pub window: usize,
    /// Saab filter size m (m <= n).
    pub filter: usize,
    /// Pooling factor after the hop: 1 (none) or 2.
    pub pool: usize,
    pub kept: KeptFilters,
    /// Hard cap on output channels regardless of the energy rule.
    pub max_filters: Option<usize>,
}

impl HopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filter == 0 || self.filter > self.window {
            return Err(Error::invalid(format!(
                "hop filter size {} must lie in 1..= window {}",
                self.filter, self.window
            )));
        }
        if self.pool != 1 && self.pool != 2 {
            return Err(Error::invalid("hop pool factor must be 1 or 2"));
        }
        if let KeptFilters::Count(0) = self.kept {
            return Err(Error::invalid("hop must keep at least the DC filter"));
        }
        Ok(())
    }
}

/// A fitted Saab filter bank.
#[derive(Debug, Clone, PartialEq)]
pub struct SaabBank {
    pub spatial_size: usize,
    pub in_channels: usize,
    /// Constant unit vector of length `spatial_size^2 * in_channels`.
    pub dc_vector: Vec<f64>,
    /// Kept AC filters, row-major `L x D`, descending energy.
    pub ac_vectors: Vec<f64>,
    /// Non-negativity offsets, one per filter: `[c_dc, d_1, .., d_L]`.
    pub biases: Vec<f64>,
    /// AC eigenvalue fractions of the residual variance, descending.
    pub energies: Vec<f64>,
    /// Training variance of the DC projection.
    pub dc_variance: f64,
    /// Total training variance of the DC-removed residual (all eigenvalues,
    /// kept or not).
    pub residual_variance: f64,
}

impl SaabBank {
    pub fn patch_dim(&self) -> usize {
        self.spatial_size * self.spatial_size * self.in_channels
    }

    pub fn ac_count(&self) -> usize {
        if self.patch_dim() == 0 {
            0
        } else {
            self.ac_vectors.len() / self.patch_dim()
        }
    }

    /// Output channels: DC plus kept AC filters.
    pub fn out_channels(&self) -> usize {
        1 + self.ac_count()
    }

    fn sqrt_dim(&self) -> f64 {
        (self.patch_dim() as f64).sqrt()
    }

    /// Responses before biases: DC projection, then AC projections of the
    /// mean-removed window. Shared by fitting and application so training
    /// coefficients reproduce exactly.
    fn raw_responses(&self, window: &[f64], centered: &mut [f64], out: &mut [f64]) {
        let d = self.patch_dim();
        // anchored mean is exact on constant windows
        let anchor = window[0];
        let mut acc = 0.0;
        for v in window {
            acc += v - anchor;
        }
        let mean = anchor + acc / d as f64;
        out[0] = mean * self.sqrt_dim();
        for (c, v) in centered.iter_mut().zip(window) {
            *c = v - mean;
        }
        for l in 0..self.ac_count() {
            let row = &self.ac_vectors[l * d..(l + 1) * d];
            let mut dot = 0.0;
            for (a, b) in row.iter().zip(centered.iter()) {
                dot += a * b;
            }
            out[l + 1] = dot;
        }
    }
}

/// Multi-hop cascade; hop i+1 consumes the pooled output of hop i.
#[derive(Debug, Clone, PartialEq)]
pub struct SaabCascade {
    pub hops: Vec<(HopConfig, SaabBank)>,
}

/// Gathers every valid m x m x C window (stride along both axes) into a row,
/// flattened row-major with channels fastest.
pub fn extract_patches(tensor: &Tensor, m: usize, stride: usize) -> Result<PatchMatrix> {
    if m == 0 || m > tensor.height.min(tensor.width) {
        return Err(Error::invalid(format!(
            "patch size {m} exceeds tensor {}x{}",
            tensor.height, tensor.width
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let c = tensor.channels;
    let dim = m * m * c;
    let out_h = (tensor.height - m) / stride + 1;
    let out_w = (tensor.width - m) / stride + 1;
    let mut data = Vec::with_capacity(out_h * out_w * dim);
    for r in 0..out_h {
        for col in 0..out_w {
            let (r0, c0) = (r * stride, col * stride);
            for dy in 0..m {
                let base = ((r0 + dy) * tensor.width + c0) * c;
                data.extend_from_slice(&tensor.data[base..base + m * c]);
            }
        }
    }
    Ok(PatchMatrix {
        rows: out_h * out_w,
        dim,
        data,
    })
}

/// Householder basis of the orthogonal complement of the constant direction:
/// columns 1.. of the reflection mapping e_0 onto the unit constant vector.
fn dc_complement_basis(d: usize) -> DMatrix<f64> {
    let u0 = 1.0 / (d as f64).sqrt();
    let mut w = DVector::from_element(d, -u0);
    w[0] += 1.0; // w = e0 - u0 * 1
    let norm = w.norm();
    w /= norm;
    let mut h = DMatrix::identity(d, d);
    for i in 0..d {
        for j in 0..d {
            h[(i, j)] -= 2.0 * w[i] * w[j];
        }
    }
    h.columns(1, d - 1).into_owned()
}

/// Accumulates patch statistics across shards (one shard per image during
/// cascade fitting) with a deterministic merge order.
struct SaabFitStats {
    dim: usize,
    count: usize,
    /// first patch seen; summing deviations from it keeps the mean exact on
    /// constant data
    anchor: Option<DVector<f64>>,
    deviation_sum: DVector<f64>,
}

impl SaabFitStats {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            anchor: None,
            deviation_sum: DVector::zeros(dim),
        }
    }

    fn add_for_mean(&mut self, patches: &PatchMatrix) {
        debug_assert_eq!(patches.dim, self.dim);
        if patches.rows == 0 {
            return;
        }
        if self.anchor.is_none() {
            self.anchor = Some(DVector::from_column_slice(patches.row(0)));
        }
        let anchor = self.anchor.as_ref().unwrap();
        for i in 0..patches.rows {
            for (j, v) in patches.row(i).iter().enumerate() {
                self.deviation_sum[j] += v - anchor[j];
            }
        }
        self.count += patches.rows;
    }

    fn mean(&self) -> DVector<f64> {
        let anchor = self.anchor.as_ref().expect("mean of empty statistics");
        anchor + &self.deviation_sum / self.count as f64
    }
}

fn centered_scatter(patches: &PatchMatrix, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut centered = DMatrix::zeros(patches.rows, patches.dim);
    for i in 0..patches.rows {
        for j in 0..patches.dim {
            centered[(i, j)] = patches.data[i * patches.dim + j] - mean[j];
        }
    }
    centered.transpose() * centered
}

/// Builds the bank (filters, energies) from the patch covariance; biases are
/// filled in afterwards from training responses.
fn bank_from_covariance(
    m: usize,
    in_channels: usize,
    cov: &DMatrix<f64>,
    kept: &KeptFilters,
    max_filters: Option<usize>,
) -> Result<SaabBank> {
    let d = m * m * in_channels;
    let dc_vector = vec![1.0 / (d as f64).sqrt(); d];
    let dc_variance = {
        let u = &dc_vector;
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                acc += u[i] * cov[(i, j)] * u[j];
            }
        }
        acc
    };
    if d == 1 {
        return Ok(SaabBank {
            spatial_size: m,
            in_channels,
            dc_vector,
            ac_vectors: vec![],
            biases: vec![0.0],
            energies: vec![],
            dc_variance,
            residual_variance: 0.0,
        });
    }

    let basis = dc_complement_basis(d);
    let reduced = basis.transpose() * cov * &basis;
    let eig = nalgebra::SymmetricEigen::new(reduced);

    let mut order: Vec<usize> = (0..d - 1).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total_residual: f64 = eigenvalues.iter().sum();

    let keepable = eigenvalues.iter().filter(|&&v| v > 0.0).count();
    let mut ac_keep = match kept {
        KeptFilters::Count(k) => {
            if *k == 0 {
                return Err(Error::invalid("kept filter count must be >= 1"));
            }
            (k - 1).min(keepable)
        }
        KeptFilters::Energy(threshold) => {
            if total_residual <= 0.0 {
                0
            } else {
                let mut cum = 0.0;
                let mut l = keepable;
                for (i, v) in eigenvalues.iter().enumerate() {
                    cum += v;
                    if cum >= threshold * total_residual {
                        l = i + 1;
                        break;
                    }
                }
                l.min(keepable)
            }
        }
    };
    if let Some(max) = max_filters {
        ac_keep = ac_keep.min(max.saturating_sub(1));
    }

    let mut ac_vectors = Vec::with_capacity(ac_keep * d);
    for &idx in order.iter().take(ac_keep) {
        let w = eig.eigenvectors.column(idx);
        let mut phi = (&basis * w).into_owned();
        // deterministic sign: largest-magnitude component made positive
        let mut max_i = 0;
        for i in 1..d {
            if phi[i].abs() > phi[max_i].abs() {
                max_i = i;
            }
        }
        if phi[max_i] < 0.0 {
            phi.neg_mut();
        }
        ac_vectors.extend(phi.iter());
    }
    let energies: Vec<f64> = if total_residual > 0.0 {
        eigenvalues[..ac_keep].iter().map(|v| v / total_residual).collect()
    } else {
        vec![]
    };

    Ok(SaabBank {
        spatial_size: m,
        in_channels,
        dc_vector,
        ac_vectors,
        biases: vec![0.0; 1 + ac_keep],
        energies,
        dc_variance,
        residual_variance: total_residual,
    })
}

/// Non-negativity biases: per filter, `max(0, -min training response)`.
fn biases_from_min_responses(bank: &mut SaabBank, min_responses: &[f64]) {
    for (bias, &lo) in bank.biases.iter_mut().zip(min_responses) {
        *bias = (-lo).max(0.0);
    }
}

fn update_min_responses(bank: &SaabBank, patches: &PatchMatrix, mins: &mut [f64]) {
    let k = bank.out_channels();
    let mut centered = vec![0.0; bank.patch_dim()];
    let mut responses = vec![0.0; k];
    for i in 0..patches.rows {
        bank.raw_responses(patches.row(i), &mut centered, &mut responses);
        for (lo, r) in mins.iter_mut().zip(&responses) {
            if *r < *lo {
                *lo = *r;
            }
        }
    }
}

/// Fits a Saab bank on a patch matrix: constant DC kernel, PCA of the
/// DC-removed residual, and non-negativity biases from training responses.
pub fn fit_saab(patches: &PatchMatrix, m: usize, in_channels: usize, kept: &KeptFilters, max_filters: Option<usize>) -> Result<SaabBank> {
    if patches.rows < 2 {
        return Err(Error::InsufficientData("fit_saab needs at least 2 patches".into()));
    }
    if patches.dim != m * m * in_channels {
        return Err(Error::shape("fit_saab patch dim", patches.dim, m * m * in_channels));
    }
    let mut stats = SaabFitStats::new(patches.dim);
    stats.add_for_mean(patches);
    let mean = stats.mean();
    let cov = centered_scatter(patches, &mean) / patches.rows as f64;
    let mut bank = bank_from_covariance(m, in_channels, &cov, kept, max_filters)?;
    let mut mins = vec![f64::INFINITY; bank.out_channels()];
    update_min_responses(&bank, patches, &mut mins);
    biases_from_min_responses(&mut bank, &mins);
    Ok(bank)
}

/// Applies a fitted bank over every stride-spaced window; output channel 0
/// is the DC coefficient, channels 1.. the AC coefficients, biases included.
pub fn apply_saab(tensor: &Tensor, bank: &SaabBank, stride: usize) -> Result<Tensor> {
    if tensor.channels != bank.in_channels {
        return Err(Error::shape("apply_saab channels", tensor.channels, bank.in_channels));
    }
    let m = bank.spatial_size;
    if m > tensor.height.min(tensor.width) {
        return Err(Error::invalid(format!(
            "tensor {}x{} too small for {}x{} filters",
            tensor.height, tensor.width, m, m
        )));
    }
    let out_h = (tensor.height - m) / stride + 1;
    let out_w = (tensor.width - m) / stride + 1;
    let k = bank.out_channels();
    let d = bank.patch_dim();
    let mut data = vec![0.0; out_h * out_w * k];
    let mut window = vec![0.0; d];
    let mut centered = vec![0.0; d];
    let mut responses = vec![0.0; k];
    let c = tensor.channels;
    for r in 0..out_h {
        for col in 0..out_w {
            let (r0, c0) = (r * stride, col * stride);
            for dy in 0..m {
                let base = ((r0 + dy) * tensor.width + c0) * c;
                window[dy * m * c..(dy + 1) * m * c].copy_from_slice(&tensor.data[base..base + m * c]);
            }
            bank.raw_responses(&window, &mut centered, &mut responses);
            let out_base = (r * out_w + col) * k;
            for (f, resp) in responses.iter().enumerate() {
                data[out_base + f] = resp + bank.biases[f];
            }
        }
    }
    Tensor::new(out_h, out_w, k, data)
}

/// Per-channel non-overlapping 2x2 max pooling.
pub fn max_pool(tensor: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(tensor.clone());
    }
    if factor != 2 {
        return Err(Error::invalid("max_pool supports factors 1 and 2"));
    }
    if !tensor.height.is_multiple_of(2) || !tensor.width.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "max_pool requires even spatial dims, got {}x{}",
            tensor.height, tensor.width
        )));
    }
    let (oh, ow, c) = (tensor.height / 2, tensor.width / 2, tensor.channels);
    let mut data = vec![0.0; oh * ow * c];
    for r in 0..oh {
        for col in 0..ow {
            for ch in 0..c {
                let v = tensor
                    .get(2 * r, 2 * col, ch)
                    .max(tensor.get(2 * r, 2 * col + 1, ch))
                    .max(tensor.get(2 * r + 1, 2 * col, ch))
                    .max(tensor.get(2 * r + 1, 2 * col + 1, ch));
                data[(r * ow + col) * c + ch] = v;
            }
        }
    }
    Tensor::new(oh, ow, c, data)
}

/// Fits the whole cascade: hop 1 on raw image patches, every further hop on
/// the pooled outputs of the previous hop across all images.
pub fn fit_cascade(images: &[ImageBuffer], configs: &[HopConfig]) -> Result<SaabCascade> {
    if images.is_empty() {
        return Err(Error::InsufficientData("fit_cascade needs at least one image".into()));
    }
    if configs.is_empty() {
        return Err(Error::invalid("fit_cascade needs at least one hop config"));
    }
    for cfg in configs {
        cfg.validate()?;
    }
    let mut inputs: Vec<Tensor> = images.iter().map(Tensor::from_image).collect();
    let mut hops = Vec::with_capacity(configs.len());
    for cfg in configs {
        let m = cfg.filter;
        let in_channels = inputs[0].channels;
        let dim = m * m * in_channels;

        let mut stats = SaabFitStats::new(dim);
        for t in &inputs {
            stats.add_for_mean(&extract_patches(t, m, 1)?);
        }
        if stats.count < 2 {
            return Err(Error::InsufficientData("cascade hop saw fewer than 2 patches".into()));
        }
        let mean = stats.mean();
        let mut scatter = DMatrix::zeros(dim, dim);
        for t in &inputs {
            scatter += centered_scatter(&extract_patches(t, m, 1)?, &mean);
        }
        let cov = scatter / stats.count as f64;
        let mut bank = bank_from_covariance(m, in_channels, &cov, &cfg.kept, cfg.max_filters)?;
        let mut mins = vec![f64::INFINITY; bank.out_channels()];
        for t in &inputs {
            update_min_responses(&bank, &extract_patches(t, m, 1)?, &mut mins);
        }
        biases_from_min_responses(&mut bank, &mins);

        let mut next = Vec::with_capacity(inputs.len());
        for t in &inputs {
            let hopped = apply_saab(t, &bank, 1)?;
            next.push(max_pool(&hopped, cfg.pool)?);
        }
        inputs = next;
        hops.push((cfg.clone(), bank));
    }
    Ok(SaabCascade { hops })
}

/// Runs a fitted cascade on one image and returns every hop's pre-pool
/// feature tensor for per-level harvesting.
pub fn apply_cascade(img: &ImageBuffer, cascade: &SaabCascade) -> Result<Vec<Tensor>> {
    let mut current = Tensor::from_image(img);
    let mut outputs = Vec::with_capacity(cascade.hops.len());
    for (cfg, bank) in &cascade.hops {
        let hopped = apply_saab(&current, bank, 1)?;
        current = max_pool(&hopped, cfg.pool)?;
        outputs.push(hopped);
    }
    Ok(outputs)
}
