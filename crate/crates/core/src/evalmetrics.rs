//! Localization and background-preservation metrics.

use crate::dlc::binarize_map;
use crate::error::{Error, Result};
use crate::mmdit::Grid;
use crate::psl::RefinedMap;

/// SSIM Gaussian window side.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Latent values mapped to `[0, 1]` by `(x - LO) / (HI - LO)` with clamping.
pub const LATENT_VIEW_RANGE: (f64, f64) = (-3.0, 3.0);

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::shape("GrayImage", format!("{width}x{height}"), pixels.len()));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig("image has non-finite pixels".into()));
        }
        Ok(Self { width, height, pixels })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// One grayscale view per latent channel.
pub fn latent_channels(grid: &Grid) -> Vec<GrayImage> {
    let (lo, hi) = LATENT_VIEW_RANGE;
    (0..grid.c)
        .map(|ch| GrayImage {
            width: grid.w,
            height: grid.h,
            pixels: (0..grid.cells())
                .map(|cell| ((grid.data[cell * grid.c + ch] - lo) / (hi - lo)).clamp(0.0, 1.0))
                .collect(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl GroundTruthMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::shape("GroundTruthMask", format!("{width}x{height}"), bits.len()));
        }
        Ok(Self { width, height, bits })
    }

    pub fn filled(width: usize, height: usize, bit: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![bit; width * height],
        }
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
            ..self.clone()
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// IoU is only informative when both classes are present.
    pub fn is_informative(&self) -> bool {
        let ones = self.count_ones();
        ones > 0 && ones < self.bits.len()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }
}

/// Majority vote over each target cell's source footprint, ties → 1.
/// Upsampling degenerates to nearest neighbour.
pub fn resample_mask(mask: &GroundTruthMask, width: usize, height: usize) -> GroundTruthMask {
    assert!(width > 0 && height > 0, "target grid must be non-empty");
    if (mask.width, mask.height) == (width, height) {
        return mask.clone();
    }
    let span = |t: usize, src: usize, dst: usize| {
        let start = t * src / dst;
        let end = ((t + 1) * src).div_ceil(dst).max(start + 1);
        start..end.min(src)
    };
    let mut bits = Vec::with_capacity(width * height);
    for ty in 0..height {
        for tx in 0..width {
            let (mut ones, mut total) = (0usize, 0usize);
            for y in span(ty, mask.height, height) {
                for x in span(tx, mask.width, width) {
                    ones += mask.at(x, y) as usize;
                    total += 1;
                }
            }
            bits.push(2 * ones >= total);
        }
    }
    GroundTruthMask { width, height, bits }
}

fn check_map_dims(map: &RefinedMap, gt: &GroundTruthMask) -> Result<()> {
    if (map.grid_w, map.grid_h) != (gt.width, gt.height) {
        return Err(Error::shape(
            "map metric",
            format!("{}x{} map", map.grid_w, map.grid_h),
            format!("{}x{} mask", gt.width, gt.height),
        ));
    }
    Ok(())
}

/// Mean squared difference between a map and a binary mask.
pub fn map_mse(map: &RefinedMap, gt: &GroundTruthMask) -> Result<f64> {
    check_map_dims(map, gt)?;
    let sum: f64 = map
        .as_slice()
        .iter()
        .zip(&gt.bits)
        .map(|(&m, &g)| {
            let d = m - g as u8 as f64;
            d * d
        })
        .sum();
    Ok(sum / gt.bits.len() as f64)
}

/// IoU between the λ-binarized map and the mask; 1 when both are empty.
pub fn map_iou(map: &RefinedMap, gt: &GroundTruthMask, lambda: f64) -> Result<f64> {
    check_map_dims(map, gt)?;
    let pred = binarize_map(map, lambda)?;
    Ok(iou(&pred.bits, &gt.bits))
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_pair(a: &GrayImage, b: &GrayImage, region: &GroundTruthMask) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) || (a.width, a.height) != (region.width, region.height) {
        return Err(Error::shape(
            "image metric",
            format!("{}x{}", a.width, a.height),
            format!("{}x{} / region {}x{}", b.width, b.height, region.width, region.height),
        ));
    }
    Ok(())
}

/// Mean squared pixel difference over pixels where `region` is set.
pub fn masked_mse(a: &GrayImage, b: &GrayImage, region: &GroundTruthMask) -> Result<f64> {
    check_pair(a, b, region)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((&x, &y), &r) in a.pixels.iter().zip(&b.pixels).zip(&region.bits) {
        if r {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / n as f64)
}

/// `10 log10(1 / mse)` for a unit peak, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(a: &GrayImage, b: &GrayImage, region: &GroundTruthMask) -> Result<f64> {
    masked_mse(a, b, region).map(psnr_from_mse)
}

/// Normalized 11×11 Gaussian weights, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|&a| g.iter().map(move |&b| a * b)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// SSIM for one window given local statistics.
#[inline]
pub fn ssim_index(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Mean SSIM over all fully-contained 11×11 Gaussian windows whose centre
/// pixel lies in `region`.
pub fn ssim(a: &GrayImage, b: &GrayImage, region: &GroundTruthMask) -> Result<f64> {
    check_pair(a, b, region)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width,
            height: a.height,
            window: SSIM_WINDOW,
        });
    }
    let w = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let (mut total, mut n) = (0.0, 0usize);
    for y0 in 0..=a.height - SSIM_WINDOW {
        for x0 in 0..=a.width - SSIM_WINDOW {
            if !region.at(x0 + half, y0 + half) {
                continue;
            }
            let (mut mu_a, mut mu_b) = (0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = w[dy * SSIM_WINDOW + dx];
                    mu_a += k * a.at(x0 + dx, y0 + dy);
                    mu_b += k * b.at(x0 + dx, y0 + dy);
                }
            }
            let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = w[dy * SSIM_WINDOW + dx];
                    let da = a.at(x0 + dx, y0 + dy) - mu_a;
                    let db = b.at(x0 + dx, y0 + dy) - mu_b;
                    var_a += k * da * da;
                    var_b += k * db * db;
                    cov += k * da * db;
                }
            }
            total += ssim_index(mu_a, mu_b, var_a, var_b, cov);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(total / n as f64)
}

/// Applies an image metric per latent channel and averages.
pub fn per_channel<F>(a: &Grid, b: &Grid, region: &GroundTruthMask, metric: F) -> Result<f64>
where
    F: Fn(&GrayImage, &GrayImage, &GroundTruthMask) -> Result<f64>,
{
    if !a.same_dims(b) {
        return Err(Error::shape("per_channel", format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    let (ca, cb) = (latent_channels(a), latent_channels(b));
    let mut sum = 0.0;
    for (x, y) in ca.iter().zip(&cb) {
        sum += metric(x, y, region)?;
    }
    Ok(sum / ca.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f64) -> GrayImage {
        let mut px = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                px.push(f(x, y));
            }
        }
        GrayImage::new(w, h, px).unwrap()
    }

    #[test]
    fn map_mse_examples() {
        let gt = GroundTruthMask::new(2, 2, vec![true, false, false, true]).unwrap();
        let same = RefinedMap::new(vec![1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        assert_eq!(map_mse(&same, &gt).unwrap(), 0.0);
        assert_eq!(map_mse(&RefinedMap::filled(2, 2, 0.5), &gt).unwrap(), 0.25);
        assert!(map_mse(&RefinedMap::filled(1, 4, 0.5), &gt).is_err());
    }

    #[test]
    fn map_mse_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..35).map(|_| rng.gen()).collect();
        let bits: Vec<bool> = (0..35).map(|_| rng.gen()).collect();
        let map = RefinedMap::new(vals.clone(), 5, 7).unwrap();
        let gt = GroundTruthMask::new(7, 5, bits.clone()).unwrap();
        let mut acc = 0.0;
        for i in 0..35 {
            let g = if bits[i] { 1.0 } else { 0.0 };
            acc += (vals[i] - g).powi(2);
        }
        assert!((map_mse(&map, &gt).unwrap() - acc / 35.0).abs() <= 1e-9);
    }

    #[test]
    fn map_iou_examples() {
        let gt = GroundTruthMask::new(4, 1, vec![true, true, false, false]).unwrap();
        let exact = RefinedMap::new(vec![1.0, 1.0, 0.0, 0.0], 1, 4).unwrap();
        assert_eq!(map_iou(&exact, &gt, 75.0).unwrap(), 1.0);
        let disjoint = RefinedMap::new(vec![0.0, 0.0, 1.0, 1.0], 1, 4).unwrap();
        assert_eq!(map_iou(&disjoint, &gt, 75.0).unwrap(), 0.0);

        // |gt| = 4, predicted 2 cells inside gt and nothing else.
        let gt = GroundTruthMask::new(8, 1, vec![true, true, true, true, false, false, false, false]).unwrap();
        let half = RefinedMap::new(vec![1.0, 0.9, 0.1, 0.1, 0.0, 0.0, 0.0, 0.0], 1, 8).unwrap();
        assert_eq!(map_iou(&half, &gt, 80.0).unwrap(), 0.5);
        assert_eq!(iou(&[false; 3], &[false; 3]), 1.0);
    }

    #[test]
    fn masked_mse_and_psnr_examples() {
        let a = img(4, 4, |x, y| (x + y) as f64 / 8.0);
        let b = img(4, 4, |x, y| (x + y) as f64 / 8.0 + 0.1);
        let all = GroundTruthMask::filled(4, 4, true);
        assert_eq!(masked_mse(&a, &a, &all).unwrap(), 0.0);
        assert!((masked_mse(&a, &b, &all).unwrap() - 0.01).abs() < 1e-15);
        assert!(matches!(masked_mse(&a, &b, &GroundTruthMask::filled(4, 4, false)), Err(Error::EmptyRegion)));
        assert_eq!(psnr(&a, &a, &all).unwrap(), 100.0);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!((psnr_from_mse(1e-4) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_monotone_over_mse_sweep() {
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let mse = 1e-12 * 1.2f64.powi(i);
            let p = psnr_from_mse(mse);
            assert!(p <= prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = img(13, 12, |_, _| rng.gen());
        let all = GroundTruthMask::filled(13, 12, true);
        assert_eq!(ssim(&a, &a, &all).unwrap(), 1.0);
        let small = img(10, 12, |_, _| 0.5);
        assert!(matches!(
            ssim(&small, &small, &GroundTruthMask::filled(10, 12, true)),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn ssim_constant_patches_closed_form() {
        let a = img(11, 11, |_, _| 0.0);
        let b = img(11, 11, |_, _| 1.0);
        let s = ssim(&a, &b, &GroundTruthMask::filled(11, 11, true)).unwrap();
        // mu_a = 0, mu_b = 1, zero variances.
        let expect = (SSIM_C1 * SSIM_C2) / ((1.0 + SSIM_C1) * SSIM_C2);
        assert!((s - expect).abs() <= 1e-12, "{s} vs {expect}");
    }

    #[test]
    fn resample_examples() {
        let m = GroundTruthMask::new(3, 2, vec![true, false, true, false, false, true]).unwrap();
        assert_eq!(resample_mask(&m, 3, 2), m);
        let ones = GroundTruthMask::filled(2, 2, true);
        assert_eq!(resample_mask(&ones, 1, 1).bits, vec![true]);
        let checker = GroundTruthMask::new(4, 4, (0..16).map(|i| (i / 4 + i % 4) % 2 == 0).collect()).unwrap();
        assert_eq!(resample_mask(&checker, 2, 2).bits, vec![true; 4]);
        // 3 of 4 zeros in one footprint → 0
        let mostly_zero = GroundTruthMask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert_eq!(resample_mask(&mostly_zero, 1, 1).bits, vec![false]);
        // upsampling
        let up = resample_mask(&GroundTruthMask::new(2, 1, vec![true, false]).unwrap(), 4, 2);
        assert_eq!(up.bits, vec![true, true, false, false, true, true, false, false]);
    }

    #[test]
    fn metrics_ignore_pixels_outside_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = img(12, 12, |_, _| rng.gen());
        let b0 = img(12, 12, |_, _| rng.gen());
        let region = GroundTruthMask::new(12, 12, (0..144).map(|i| i % 12 < 6).collect()).unwrap();
        let mut b1 = b0.clone();
        for y in 0..12 {
            for x in 6..12 {
                b1.pixels[y * 12 + x] = 0.123;
            }
        }
        assert_eq!(masked_mse(&a, &b0, &region).unwrap(), masked_mse(&a, &b1, &region).unwrap());
        assert_eq!(psnr(&a, &b0, &region).unwrap(), psnr(&a, &b1, &region).unwrap());
    }

    #[test]
    fn latent_view_clamps() {
        let g = Grid::new(1, 2, 2, vec![-10.0, 0.0, 3.0, 10.0]).unwrap();
        let ch = latent_channels(&g);
        assert_eq!(ch[0].pixels, vec![0.0, 1.0]);
        assert_eq!(ch[1].pixels, vec![0.5, 1.0]);
    }
}
