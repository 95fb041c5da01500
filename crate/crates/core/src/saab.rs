//! Unsupervised convolutional module: Saab layers, 2×2 max pooling,
//! channel-wise PCA and the spatial correlation diagnostic.

use std::io::Write;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, ArrayViewMut3, Axis, Zip};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{fit_pca, rng_from_seed, symmetric_eigen_desc, CovarianceAccumulator, PcaBasis, PcaTarget};

/// Upper bound on the number of patches used to estimate a layer's
/// covariance.
pub const DEFAULT_MAX_PATCHES: usize = 200_000;

const PATCH_CHUNK: usize = 4096;

/// A stack of multi-channel response maps, `images × spectral × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array4<f32>,
}

impl FeatureMap {
    pub fn new(data: Array4<f32>) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView4<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spectral(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn height(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn width(&self) -> usize {
        self.data.len_of(Axis(3))
    }

    /// `(S, H, W)` of one image.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.spectral(), self.height(), self.width())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self { data: self.data.select(Axis(0), indices) }
    }
}

/// Filter size and kernel count of one conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub size: usize,
    pub kernels: usize,
}

/// Two-layer conv architecture, each layer followed by 2×2 max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvArch {
    pub input_channels: usize,
    pub layers: [LayerSpec; 2],
}

impl ConvArch {
    pub fn new(input_channels: usize, sizes: (usize, usize), kernels: (usize, usize)) -> Self {
        Self { input_channels, layers: [LayerSpec { size: sizes.0, kernels: kernels.0 }, LayerSpec { size: sizes.1, kernels: kernels.1 }] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(invalid("conv arch with zero input channels"));
        }
        let mut channels = self.input_channels;
        for (l, spec) in self.layers.iter().enumerate() {
            if spec.size == 0 || spec.kernels == 0 {
                return Err(invalid(format!("layer {} has size {} and {} kernels", l + 1, spec.size, spec.kernels)));
            }
            let n = spec.size * spec.size * channels;
            if spec.kernels > n {
                return Err(invalid(format!("layer {} asks for {} kernels from {n}-dim patches", l + 1, spec.kernels)));
            }
            channels = spec.kernels;
        }
        Ok(())
    }

    /// Pooled output `(S, H, W)` of each layer for a square input of side
    /// `input`.
    pub fn output_shapes(&self, input: usize) -> Result<[(usize, usize, usize); 2]> {
        let mut side = input;
        let mut out = [(0, 0, 0); 2];
        for (l, spec) in self.layers.iter().enumerate() {
            if spec.size > side {
                return Err(shape_err(format!("layer {} filter {} exceeds input side {side}", l + 1, spec.size)));
            }
            side = (side - spec.size).div_ceil(2);
            if side == 0 {
                return Err(shape_err(format!("layer {} output vanishes", l + 1)));
            }
            out[l] = (spec.kernels, side, side);
        }
        Ok(out)
    }
}

/// One fitted Saab transform. Row 0 of `kernels` is the constant DC kernel,
/// the remaining rows are orthonormal AC kernels orthogonal to it.
#[derive(Debug, Clone, PartialEq)]
pub struct SaabLayer {
    pub size: usize,
    pub in_channels: usize,
    /// `M × N`, `N = size² · in_channels`.
    pub kernels: Array2<f64>,
    pub bias: f64,
}

impl SaabLayer {
    pub fn from_parts(size: usize, in_channels: usize, kernels: Array2<f64>, bias: f64) -> Result<Self> {
        let n = size * size * in_channels;
        if kernels.ncols() != n || kernels.nrows() == 0 {
            return Err(shape_err(format!("kernel matrix {:?} for {size}×{size}×{in_channels} patches", kernels.dim())));
        }
        if !(bias >= 0.0 && bias.is_finite()) {
            return Err(invalid(format!("Saab bias must be finite and nonnegative, got {bias}")));
        }
        crate::numerics::ensure_finite(&kernels.view(), "Saab kernels")?;
        Ok(Self { size, in_channels, kernels, bias })
    }

    pub fn kernel_count(&self) -> usize {
        self.kernels.nrows()
    }

    pub fn patch_dim(&self) -> usize {
        self.kernels.ncols()
    }

    fn check_input(&self, maps: &ArrayView4<'_, f32>) -> Result<()> {
        let (_, c, h, w) = maps.dim();
        if c != self.in_channels {
            return Err(shape_err(format!("{c}-channel maps into a layer expecting {}", self.in_channels)));
        }
        if h < self.size || w < self.size {
            return Err(shape_err(format!("{h}×{w} maps smaller than filter {}", self.size)));
        }
        Ok(())
    }

    /// Responses of one image as a `P × M` matrix (raster order, before clipping).
    fn responses(&self, image: ArrayView3<'_, f32>) -> Array2<f64> {
        let cols = im2col(image, self.size);
        let mut y = cols.dot(&self.kernels.t());
        y.mapv_inplace(|v| v + self.bias);
        y
    }

    /// Writes clipped responses into `out` (`M × H' × W'`) and returns the
    /// number of entries that were negative before clipping.
    fn apply_image(&self, image: ArrayView3<'_, f32>, mut out: ArrayViewMut3<'_, f32>) -> usize {
        let (_, oh, ow) = out.dim();
        let y = self.responses(image);
        let mut clipped = 0;
        for r in 0..oh {
            for c in 0..ow {
                let row = y.row(r * ow + c);
                for (k, &v) in row.iter().enumerate() {
                    if v < 0.0 {
                        clipped += 1;
                    }
                    out[[k, r, c]] = v.max(0.0) as f32;
                }
            }
        }
        clipped
    }
}

/// Flattens every `size × size` window (stride 1, raster order) of one
/// `C × H × W` image into a row of length `size² · C`, channel-major.
fn im2col(image: ArrayView3<'_, f32>, size: usize) -> Array2<f64> {
    let (ch, h, w) = image.dim();
    let (oh, ow) = (h - size + 1, w - size + 1);
    let n = size * size * ch;
    let mut cols = Array2::<f64>::zeros((oh * ow, n));
    for r in 0..oh {
        for c in 0..ow {
            let mut row = cols.row_mut(r * ow + c);
            write_patch(image, r, c, size, row.as_slice_mut().expect("contiguous row"));
        }
    }
    cols
}

fn write_patch(image: ArrayView3<'_, f32>, r: usize, c: usize, size: usize, dst: &mut [f64]) {
    let mut i = 0;
    for plane in image.outer_iter() {
        for dy in 0..size {
            for dx in 0..size {
                dst[i] = plane[[r + dy, c + dx]] as f64;
                i += 1;
            }
        }
    }
}

/// All `size × size` patches of every image, one per row, images in order
/// and positions in raster order within each image.
pub fn extract_patches(maps: ArrayView4<'_, f32>, size: usize) -> Result<Array2<f64>> {
    let (n, ch, h, w) = maps.dim();
    if size == 0 || size > h || size > w {
        return Err(shape_err(format!("filter {size} on {h}×{w} maps")));
    }
    let per = (h - size + 1) * (w - size + 1);
    let mut out = Array2::<f64>::zeros((n * per, size * size * ch));
    for (i, image) in maps.outer_iter().enumerate() {
        out.slice_mut(s![i * per..(i + 1) * per, ..]).assign(&im2col(image, size));
    }
    Ok(out)
}

fn remove_dc(mut rows: Array2<f64>) -> Array2<f64> {
    for mut row in rows.rows_mut() {
        let mean = row.mean().unwrap_or(0.0);
        row.mapv_inplace(|v| v - mean);
    }
    rows
}

/// DC kernel plus the leading `kernel_count − 1` principal directions of the
/// DC-removed patch covariance, made exactly orthogonal to the DC kernel.
fn saab_kernels(cov: &Array2<f64>, kernel_count: usize) -> Result<Array2<f64>> {
    let n = cov.nrows();
    let (_, vectors) = symmetric_eigen_desc(cov)?;
    let dc = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut rows: Vec<Array1<f64>> = vec![dc];
    for col in vectors.columns() {
        if rows.len() == kernel_count {
            break;
        }
        let mut v = col.to_owned();
        for _ in 0..2 {
            for u in &rows {
                let p = u.dot(&v);
                v.scaled_add(-p, u);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-3 {
            continue;
        }
        v /= norm;
        let pivot = v.iter().fold(0.0f64, |p, &x| if x.abs() > p.abs() { x } else { p });
        if pivot < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        rows.push(v);
    }
    if rows.len() < kernel_count {
        return Err(Error::Numerical(format!("only {} orthogonal Saab kernels of {kernel_count} could be formed", rows.len())));
    }
    let mut k = Array2::<f64>::zeros((kernel_count, n));
    for (i, r) in rows.iter().enumerate() {
        k.row_mut(i).assign(r);
    }
    Ok(k)
}

fn check_kernel_count(kernel_count: usize, n: usize) -> Result<()> {
    if kernel_count == 0 || kernel_count > n {
        return Err(invalid(format!("{kernel_count} Saab kernels from {n}-dim patches")));
    }
    Ok(())
}

/// Fits a Saab layer on an explicit patch matrix (one flattened
/// `size × size × in_channels` patch per row). The bias is the largest patch
/// norm in `patches`.
pub fn fit_saab(patches: ArrayView2<'_, f64>, size: usize, in_channels: usize, kernel_count: usize) -> Result<SaabLayer> {
    let (count, n) = patches.dim();
    if n != size * size * in_channels {
        return Err(shape_err(format!("{n}-dim patches for {size}×{size}×{in_channels} windows")));
    }
    check_kernel_count(kernel_count, n)?;
    if count < 2 {
        return Err(Error::Degenerate(format!("Saab fit needs at least 2 patches, got {count}")));
    }
    crate::numerics::ensure_finite(&patches, "Saab patches")?;
    let mut acc = CovarianceAccumulator::new(n);
    acc.push_rows(remove_dc(patches.to_owned()).view())?;
    let bias = patches.rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max);
    SaabLayer::from_parts(size, in_channels, saab_kernels(&acc.covariance()?, kernel_count)?, bias)
}

/// Largest patch norm over every window of every image, from box sums of the
/// channel-summed squared maps.
fn max_patch_norm(maps: ArrayView4<'_, f32>, size: usize) -> f64 {
    maps.outer_iter()
        .into_par_iter()
        .map(|image| {
            let (_, h, w) = image.dim();
            let mut sq = Array2::<f64>::zeros((h, w));
            for plane in image.outer_iter() {
                Zip::from(&mut sq).and(&plane).for_each(|a, &v| *a += v as f64 * v as f64);
            }
            let mut best = 0.0f64;
            for r in 0..=h - size {
                for c in 0..=w - size {
                    let e = sq.slice(s![r..r + size, c..c + size]).sum();
                    best = best.max(e);
                }
            }
            best.sqrt()
        })
        .reduce(|| 0.0, f64::max)
}

/// Fits a Saab layer directly on feature maps. The covariance is estimated
/// from at most `max_patches` windows drawn uniformly with `seed`, the bias
/// from every window.
pub fn fit_saab_on_maps(maps: ArrayView4<'_, f32>, size: usize, kernel_count: usize, seed: u64, max_patches: usize) -> Result<SaabLayer> {
    let (count, ch, h, w) = maps.dim();
    if size == 0 || size > h || size > w {
        return Err(shape_err(format!("filter {size} on {h}×{w} maps")));
    }
    let n = size * size * ch;
    check_kernel_count(kernel_count, n)?;
    let (oh, ow) = (h - size + 1, w - size + 1);
    let per = oh * ow;
    let total = count * per;
    if total < 2 {
        return Err(Error::Degenerate(format!("Saab fit needs at least 2 patches, got {total}")));
    }
    if max_patches < 2 {
        return Err(invalid(format!("patch budget {max_patches} below 2")));
    }
    let chosen: Vec<usize> = if total <= max_patches {
        (0..total).collect()
    } else {
        let mut v = sample(&mut rng_from_seed(seed), total, max_patches).into_vec();
        v.sort_unstable();
        v
    };
    let partials: Vec<CovarianceAccumulator> = chosen
        .par_chunks(PATCH_CHUNK)
        .map(|chunk| {
            let mut rows = Array2::<f64>::zeros((chunk.len(), n));
            for (mut row, &idx) in rows.rows_mut().into_iter().zip(chunk) {
                let (img, pos) = (idx / per, idx % per);
                write_patch(maps.index_axis(Axis(0), img), pos / ow, pos % ow, size, row.as_slice_mut().expect("contiguous row"));
            }
            let mut acc = CovarianceAccumulator::new(n);
            acc.push_rows(remove_dc(rows).view()).map(|_| acc)
        })
        .collect::<Result<_>>()?;
    let cov = merged_covariance(&partials)?;
    let bias = max_patch_norm(maps, size);
    SaabLayer::from_parts(size, ch, saab_kernels(&cov, kernel_count)?, bias)
}

/// Pools per-chunk accumulators in chunk order.
fn merged_covariance(parts: &[CovarianceAccumulator]) -> Result<Array2<f64>> {
    let n: usize = parts.iter().map(|p| p.count()).sum();
    if n < 2 {
        return Err(Error::Degenerate("fewer than 2 patches for covariance".into()));
    }
    let dim = parts[0].dim();
    let mut mean = Array1::<f64>::zeros(dim);
    for p in parts {
        mean.scaled_add(p.count() as f64 / n as f64, &p.mean());
    }
    let mut scatter = Array2::<f64>::zeros((dim, dim));
    for p in parts {
        let k = p.count() as f64;
        if p.count() >= 2 {
            scatter.scaled_add(k - 1.0, &p.covariance()?);
        }
        let d = &p.mean() - &mean;
        let outer = d.view().insert_axis(Axis(1)).dot(&d.view().insert_axis(Axis(0)));
        scatter.scaled_add(k, &outer);
    }
    scatter /= (n - 1) as f64;
    Ok(scatter)
}

/// Saab responses clipped at zero, without pooling.
pub fn apply_saab(maps: ArrayView4<'_, f32>, layer: &SaabLayer) -> Result<FeatureMap> {
    apply_saab_counting(maps, layer).map(|(m, _)| m)
}

/// Like [`apply_saab`], also returning how many responses were negative
/// before clipping.
pub fn apply_saab_counting(maps: ArrayView4<'_, f32>, layer: &SaabLayer) -> Result<(FeatureMap, usize)> {
    layer.check_input(&maps)?;
    let (n, _, h, w) = maps.dim();
    let (oh, ow) = (h - layer.size + 1, w - layer.size + 1);
    let mut out = Array4::<f32>::zeros((n, layer.kernel_count(), oh, ow));
    let clipped = Zip::from(out.outer_iter_mut()).and(maps.outer_iter()).par_map_collect(|dst, src| layer.apply_image(src, dst)).sum();
    Ok((FeatureMap::new(out), clipped))
}

/// Non-overlapping 2×2 max pooling.
pub fn max_pool(maps: ArrayView4<'_, f32>) -> Result<FeatureMap> {
    let (n, c, h, w) = maps.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("2×2 pooling of odd {h}×{w} maps")));
    }
    let mut out = Array4::<f32>::zeros((n, c, h / 2, w / 2));
    Zip::from(out.outer_iter_mut()).and(maps.outer_iter()).par_for_each(|dst, src| pool_image(src, dst));
    Ok(FeatureMap::new(out))
}

fn pool_image(src: ArrayView3<'_, f32>, mut dst: ArrayViewMut3<'_, f32>) {
    let (c, ph, pw) = dst.dim();
    for k in 0..c {
        for r in 0..ph {
            for q in 0..pw {
                let a = src[[k, 2 * r, 2 * q]];
                let b = src[[k, 2 * r, 2 * q + 1]];
                let cc = src[[k, 2 * r + 1, 2 * q]];
                let d = src[[k, 2 * r + 1, 2 * q + 1]];
                dst[[k, r, q]] = a.max(b).max(cc.max(d));
            }
        }
    }
}

/// Drops a trailing row and/or column so both spatial sides are even.
pub fn crop_to_even(maps: ArrayView4<'_, f32>) -> ArrayView4<'_, f32> {
    let (_, _, h, w) = maps.dim();
    maps.slice_move(s![.., .., ..h - h % 2, ..w - w % 2])
}

/// Pooled outputs of both conv layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvOutputs {
    pub conv1: FeatureMap,
    pub conv2: FeatureMap,
}

/// Two fitted Saab layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvModel {
    pub arch: ConvArch,
    pub layers: [SaabLayer; 2],
}

impl ConvModel {
    /// Saab transform, crop-to-even and pooling of one layer, one image at a
    /// time so the unpooled responses are never held for the whole set.
    pub fn layer_forward(&self, layer: usize, maps: ArrayView4<'_, f32>) -> Result<(FeatureMap, usize)> {
        let saab = &self.layers[layer];
        saab.check_input(&maps)?;
        let (n, _, h, w) = maps.dim();
        let (oh, ow) = (h - saab.size + 1, w - saab.size + 1);
        let (ph, pw) = (oh / 2, ow / 2);
        if ph == 0 || pw == 0 {
            return Err(shape_err(format!("layer {} output {oh}×{ow} too small to pool", layer + 1)));
        }
        let mut out = Array4::<f32>::zeros((n, saab.kernel_count(), ph, pw));
        let clipped = Zip::from(out.outer_iter_mut())
            .and(maps.outer_iter())
            .par_map_collect(|dst, src| {
                let mut full = Array3::<f32>::zeros((saab.kernel_count(), oh, ow));
                let clipped = saab.apply_image(src, full.view_mut());
                pool_image(full.slice(s![.., ..2 * ph, ..2 * pw]), dst);
                clipped
            })
            .sum();
        Ok((FeatureMap::new(out), clipped))
    }

    pub fn forward(&self, images: ArrayView4<'_, f32>) -> Result<ConvOutputs> {
        let (conv1, _) = self.layer_forward(0, images)?;
        let (conv2, _) = self.layer_forward(1, conv1.view())?;
        Ok(ConvOutputs { conv1, conv2 })
    }
}

/// Fits both layers without labels and returns the model with the pooled
/// outputs of the training images.
pub fn fit_conv_pipeline(train: &LabeledImageSet, arch: &ConvArch, seed: u64) -> Result<(ConvModel, ConvOutputs)> {
    fit_conv_pipeline_with(train.images.view(), arch, seed, DEFAULT_MAX_PATCHES)
}

pub fn fit_conv_pipeline_with(
    images: ArrayView4<'_, f32>,
    arch: &ConvArch,
    seed: u64,
    max_patches: usize,
) -> Result<(ConvModel, ConvOutputs)> {
    arch.validate()?;
    if images.len_of(Axis(1)) != arch.input_channels {
        return Err(shape_err(format!("{}-channel images for an arch expecting {}", images.len_of(Axis(1)), arch.input_channels)));
    }
    let l1 = fit_saab_on_maps(images, arch.layers[0].size, arch.layers[0].kernels, crate::numerics::derive_seed(seed, 1), max_patches)?;
    // The second layer is fit after the first is in place; start with a
    // placeholder so layer_forward can be reused.
    let mut model = ConvModel { arch: *arch, layers: [l1.clone(), l1] };
    let (conv1, _) = model.layer_forward(0, images)?;
    model.layers[1] =
        fit_saab_on_maps(conv1.view(), arch.layers[1].size, arch.layers[1].kernels, crate::numerics::derive_seed(seed, 2), max_patches)?;
    let (conv2, _) = model.layer_forward(1, conv1.view())?;
    Ok((model, ConvOutputs { conv1, conv2 }))
}

/// PCA over a subset of spatial positions of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPca {
    /// Raster indices `row · W + col`, sorted and unique.
    pub positions: Vec<usize>,
    pub basis: PcaBasis,
}

/// Channel-wise PCA: one spatial PCA per spectral channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CpcaBank {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<ChannelPca>,
}

impl CpcaBank {
    pub fn output_dim(&self) -> usize {
        self.channels.iter().map(|c| c.basis.n_components()).sum()
    }
}

fn gather_positions(maps: ArrayView4<'_, f32>, channel: usize, positions: &[usize]) -> Array2<f64> {
    let w = maps.len_of(Axis(3));
    let n = maps.len_of(Axis(0));
    let mut out = Array2::<f64>::zeros((n, positions.len()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let plane = maps.slice(s![i, channel, .., ..]);
        for (dst, &p) in row.iter_mut().zip(positions) {
            *dst = plane[[p / w, p % w]] as f64;
        }
    }
    out
}

/// Fits a C-PCA bank over every spatial position of every channel, keeping
/// `target` components per channel.
pub fn fit_cpca(maps: ArrayView4<'_, f32>, target: usize) -> Result<CpcaBank> {
    let (_, c, h, w) = maps.dim();
    let all: Vec<usize> = (0..h * w).collect();
    fit_cpca_on(maps, &vec![all; c], target)
}

/// C-PCA restricted to the given per-channel position lists. Each channel
/// keeps `target` components, which must be fewer than its position count.
pub fn fit_cpca_on(maps: ArrayView4<'_, f32>, positions: &[Vec<usize>], target: usize) -> Result<CpcaBank> {
    let (n, c, h, w) = maps.dim();
    if positions.len() != c {
        return Err(shape_err(format!("{} position lists for {c} channels", positions.len())));
    }
    for (k, pos) in positions.iter().enumerate() {
        if pos.windows(2).any(|p| p[0] >= p[1]) || pos.last().is_some_and(|&p| p >= h * w) {
            return Err(invalid(format!("channel {k} positions must be sorted, unique and below {}", h * w)));
        }
        if target == 0 || target >= pos.len() {
            return Err(invalid(format!("C-PCA target {target} must lie in [1, {}) for channel {k}", pos.len())));
        }
    }
    if n < 2 {
        return Err(Error::Degenerate(format!("C-PCA needs at least 2 images, got {n}")));
    }
    let channels = positions
        .par_iter()
        .enumerate()
        .map(|(k, pos)| {
            let x = gather_positions(maps, k, pos);
            let basis = fit_pca(x.view(), PcaTarget::Components(target.min(n)))?;
            Ok(ChannelPca { positions: pos.clone(), basis })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CpcaBank { height: h, width: w, channels })
}

/// Projects each channel and concatenates the coordinates channel by channel.
pub fn apply_cpca(bank: &CpcaBank, maps: ArrayView4<'_, f32>) -> Result<Array2<f64>> {
    let (n, c, h, w) = maps.dim();
    if c != bank.channels.len() || h != bank.height || w != bank.width {
        return Err(shape_err(format!("maps {c}×{h}×{w} vs bank {}×{}×{}", bank.channels.len(), bank.height, bank.width)));
    }
    let mut out = Array2::<f64>::zeros((n, bank.output_dim()));
    let mut col = 0;
    for (k, ch) in bank.channels.iter().enumerate() {
        let m = ch.basis.n_components();
        let proj = ch.basis.project(gather_positions(maps, k, &ch.positions).view())?;
        out.slice_mut(s![.., col..col + m]).assign(&proj);
        col += m;
    }
    Ok(out)
}

/// Pearson correlation between spatial positions of one channel across
/// images.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    /// `(H·W) × (H·W)`
    pub values: Array2<f64>,
    /// Positions with zero variance; their rows and columns are zero.
    pub degenerate: Vec<bool>,
}

impl CorrelationMatrix {
    pub fn has_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }

    /// Mean absolute off-diagonal entry.
    pub fn mean_abs_off_diagonal(&self) -> f64 {
        let d = self.values.nrows();
        if d < 2 {
            return 0.0;
        }
        let total: f64 = self.values.iter().map(|v| v.abs()).sum::<f64>() - self.values.diag().iter().map(|v| v.abs()).sum::<f64>();
        total / (d * (d - 1)) as f64
    }

    /// Long-format CSV with header `row,col,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "row,col,value")?;
        for ((r, c), v) in self.values.indexed_iter() {
            writeln!(out, "{r},{c},{v}")?;
        }
        Ok(())
    }
}

pub fn channel_correlation(maps: ArrayView4<'_, f32>, channel: usize) -> Result<CorrelationMatrix> {
    let (n, c, h, w) = maps.dim();
    if channel >= c {
        return Err(invalid(format!("channel {channel} of {c}")));
    }
    if n < 2 {
        return Err(Error::Degenerate(format!("correlation needs at least 2 images, got {n}")));
    }
    let all: Vec<usize> = (0..h * w).collect();
    let x = gather_positions(maps, channel, &all);
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &x - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered);
    let sd: Vec<f64> = cov.diag().iter().map(|v| v.max(0.0).sqrt()).collect();
    let scale = sd.iter().copied().fold(0.0, f64::max);
    let degenerate: Vec<bool> = sd.iter().map(|&s| s <= 1e-12 * scale.max(f64::MIN_POSITIVE) || s == 0.0).collect();
    let values = Array2::from_shape_fn(cov.dim(), |(i, j)| {
        if degenerate[i] || degenerate[j] {
            0.0
        } else if i == j {
            1.0
        } else {
            (cov[[i, j]] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
        }
    });
    Ok(CorrelationMatrix { values, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_maps(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, c, h, w), |_| rng.random::<f32>())
    }

    #[test]
    fn patch_counts() {
        let maps = random_maps(2, 1, 32, 32, 0);
        let p = extract_patches(maps.view(), 5).unwrap();
        assert_eq!(p.dim(), (2 * 784, 25));
        let pooled = random_maps(1, 6, 14, 14, 1);
        assert_eq!(extract_patches(pooled.view(), 5).unwrap().dim(), (100, 150));
        assert!(extract_patches(pooled.view(), 15).is_err());
        let flat = Array4::from_elem((1, 1, 6, 6), 0.3f32);
        let p = extract_patches(flat.view(), 3).unwrap();
        assert!(p.rows().into_iter().all(|r| r == p.row(0)));
    }

    #[test]
    fn patch_layout_is_channel_major() {
        let maps = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, r, q)| (c * 100 + r * 10 + q) as f32);
        let p = extract_patches(maps.view(), 2).unwrap();
        assert_eq!(p.row(3).to_vec(), vec![11.0, 12.0, 21.0, 22.0, 111.0, 112.0, 121.0, 122.0]);
    }

    #[test]
    fn dc_kernel_and_orthonormal_rows() {
        let maps = random_maps(20, 1, 8, 8, 2);
        let patches = extract_patches(maps.view(), 5).unwrap();
        let layer = fit_saab(patches.view(), 5, 1, 6).unwrap();
        assert!(layer.kernels.row(0).iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let gram = layer.kernels.dot(&layer.kernels.t());
        let eye = Array2::<f64>::eye(6);
        assert!((&gram - &eye).iter().all(|v| v.abs() < 1e-8));
        assert_eq!(layer.kernel_count(), 6);
        assert!(fit_saab(patches.view(), 5, 1, 26).is_err());
    }

    #[test]
    fn single_direction_patches() {
        // DC-free direction u; patches = c + t·u with random offsets c·1.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut u = Array1::from_shape_fn(9, |i| (i as f64 * 0.7).sin());
        let m = u.mean().unwrap();
        u.mapv_inplace(|v| v - m);
        let norm = u.dot(&u).sqrt();
        u /= norm;
        let mut patches = Array2::<f64>::zeros((200, 9));
        for mut row in patches.rows_mut() {
            let t: f64 = rng.random_range(-1.0..1.0);
            let c: f64 = rng.random_range(0.0..1.0);
            row.assign(&(&u * t + c));
        }
        let layer = fit_saab(patches.view(), 3, 1, 3).unwrap();
        let cos = layer.kernels.row(1).dot(&u).abs();
        assert!(cos > 0.999, "{cos}");
    }

    #[test]
    fn full_rank_transform_preserves_energy() {
        let maps = random_maps(6, 2, 4, 4, 4);
        let patches = extract_patches(maps.view(), 2).unwrap();
        let layer = fit_saab(patches.view(), 2, 2, 8).unwrap();
        for x in patches.rows() {
            let y = layer.kernels.dot(&x);
            let energy: f64 = y.iter().map(|v| v * v).sum();
            assert!((energy - x.dot(&x)).abs() < 1e-10);
        }
    }

    #[test]
    fn no_clipping_on_training_maps() {
        let maps = random_maps(10, 1, 12, 12, 5);
        let layer = fit_saab_on_maps(maps.view(), 5, 6, 0, DEFAULT_MAX_PATCHES).unwrap();
        let (out, clipped) = apply_saab_counting(maps.view(), &layer).unwrap();
        assert_eq!(clipped, 0);
        assert_eq!(out.shape(), (6, 8, 8));
        let zero = Array4::<f32>::zeros((1, 1, 12, 12));
        let (z, clipped) = apply_saab_counting(zero.view(), &layer).unwrap();
        assert_eq!(clipped, 0);
        assert!(z.data().iter().all(|&v| (v as f64 - layer.bias).abs() < 1e-5 * layer.bias.max(1.0)));
    }

    #[test]
    fn test_time_overshoot_is_clipped() {
        let train = random_maps(5, 1, 6, 6, 6).mapv(|v| v * 0.1);
        let layer = fit_saab_on_maps(train.view(), 3, 4, 0, DEFAULT_MAX_PATCHES).unwrap();
        let big = Array4::from_shape_fn((1, 1, 6, 6), |(_, _, r, c)| if (r + c) % 2 == 0 { 10.0 } else { 0.0 });
        let (out, clipped) = apply_saab_counting(big.view(), &layer).unwrap();
        assert!(clipped > 0);
        assert!(out.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn subsampled_fit_matches_map_statistics() {
        let maps = random_maps(4, 1, 10, 10, 7);
        let layer_all = fit_saab_on_maps(maps.view(), 3, 5, 0, DEFAULT_MAX_PATCHES).unwrap();
        let explicit = fit_saab(extract_patches(maps.view(), 3).unwrap().view(), 3, 1, 5).unwrap();
        assert!((layer_all.bias - explicit.bias).abs() < 1e-12);
        assert!((&layer_all.kernels - &explicit.kernels).iter().all(|v| v.abs() < 1e-8));
        let a = fit_saab_on_maps(maps.view(), 3, 5, 11, 50).unwrap();
        let b = fit_saab_on_maps(maps.view(), 3, 5, 11, 50).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.bias, layer_all.bias);
    }

    #[test]
    fn pooling() {
        let maps = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max_pool(maps.view()).unwrap().data()[[0, 0, 0, 0]], 4.0);
        let maps = random_maps(2, 6, 28, 28, 8);
        assert_eq!(max_pool(maps.view()).unwrap().shape(), (6, 14, 14));
        let maps = random_maps(1, 16, 10, 10, 8);
        assert_eq!(max_pool(maps.view()).unwrap().shape(), (16, 5, 5));
        let odd = random_maps(1, 1, 13, 13, 8);
        assert!(max_pool(odd.view()).is_err());
        assert_eq!(max_pool(crop_to_even(odd.view())).unwrap().shape(), (1, 6, 6));
    }

    #[test]
    fn pipeline_shapes() {
        let images = random_maps(6, 1, 32, 32, 10);
        let arch = ConvArch::new(1, (5, 5), (6, 16));
        let (model, out) = fit_conv_pipeline_with(images.view(), &arch, 0, 5000).unwrap();
        assert_eq!(out.conv1.shape(), (6, 14, 14));
        assert_eq!(out.conv2.shape(), (16, 5, 5));
        assert_eq!(model.forward(images.view()).unwrap(), out);
        assert_eq!(arch.output_shapes(32).unwrap(), [(6, 14, 14), (16, 5, 5)]);

        let arch = ConvArch::new(1, (3, 3), (3, 3));
        let (_, out) = fit_conv_pipeline_with(images.view(), &arch, 0, 5000).unwrap();
        assert_eq!(out.conv1.shape(), (3, 15, 15));
        assert_eq!(out.conv2.shape(), (3, 6, 6));
        assert_eq!(arch.output_shapes(32).unwrap(), [(3, 15, 15), (3, 6, 6)]);

        assert_eq!(ConvArch::new(3, (5, 3), (24, 64)).output_shapes(32).unwrap()[1], (64, 6, 6));
        assert_eq!(ConvArch::new(3, (3, 5), (32, 64)).output_shapes(32).unwrap()[1], (64, 5, 5));
        assert!(ConvArch::new(1, (5, 5), (26, 16)).validate().is_err());
        assert!(fit_conv_pipeline_with(random_maps(2, 3, 32, 32, 0).view(), &ConvArch::new(1, (5, 5), (6, 16)), 0, 100).is_err());
    }

    #[test]
    fn cpca_dimensions_and_errors() {
        let maps = random_maps(30, 4, 5, 5, 12);
        let bank = fit_cpca(maps.view(), 20).unwrap();
        assert_eq!(bank.output_dim(), 80);
        assert_eq!(apply_cpca(&bank, maps.view()).unwrap().dim(), (30, 80));
        assert!(fit_cpca(maps.view(), 25).is_err());
        assert!(apply_cpca(&bank, random_maps(2, 3, 5, 5, 0).view()).is_err());
        let subset = vec![vec![0, 2, 4, 6, 8]; 4];
        let bank = fit_cpca_on(maps.view(), &subset, 3).unwrap();
        assert_eq!(bank.output_dim(), 12);
        assert!(fit_cpca_on(maps.view(), &vec![vec![2, 1, 3]; 4], 1).is_err());
    }

    #[test]
    fn cpca_reconstruction_improves_with_rank() {
        let maps = random_maps(40, 2, 4, 4, 13);
        let mut last = f64::INFINITY;
        for l in 1..16 {
            let bank = fit_cpca(maps.view(), l).unwrap();
            let mut err = 0.0;
            for (k, ch) in bank.channels.iter().enumerate() {
                let x = gather_positions(maps.view(), k, &ch.positions);
                let back = ch.basis.back_project(ch.basis.project(x.view()).unwrap().view()).unwrap();
                err += (&x - &back).mapv(|v| v * v).sum();
            }
            assert!(err <= last + 1e-9);
            last = err;
        }
    }

    #[test]
    fn correlation_basics() {
        let maps = random_maps(50, 2, 3, 3, 14);
        let corr = channel_correlation(maps.view(), 1).unwrap();
        assert_eq!(corr.values.dim(), (9, 9));
        assert!(corr.values.diag().iter().all(|&v| v == 1.0));
        assert!(!corr.has_degenerate());
        let same = Array4::from_elem((4, 1, 2, 2), 0.5f32);
        let corr = channel_correlation(same.view(), 0).unwrap();
        assert!(corr.has_degenerate());
        assert!(corr.values.iter().all(|&v| v == 0.0));
        let mut csv = Vec::new();
        corr.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 16);
        assert!(channel_correlation(maps.view(), 2).is_err());
    }
}
