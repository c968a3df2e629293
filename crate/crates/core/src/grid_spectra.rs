//! Log-magnitude Fourier spectra, artifact difference maps, and the
//! additivity regression between generator artifacts.
//!
//! A spectrum here is `log(1 + |F|)` of the unnormalized 2D DFT, with the
//! quadrants swapped so the DC bin sits at `(h/2, w/2)` (integer division).
//! Averaging over a corpus computes per-image spectra concurrently and then
//! reduces them sequentially in input order, so the result does not depend on
//! the number of workers.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::par;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "image has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite pixel at row {}, col {}",
                i / width,
                i % width
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn clip_unit(&mut self) {
        for v in &mut self.values {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// DC-centered log-magnitude spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

/// Elementwise absolute difference of two spectra.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

macro_rules! grid_accessors {
    ($ty:ty) => {
        impl $ty {
            pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
                if width == 0 || height == 0 || values.len() != width * height {
                    return Err(Error::shape(format!(
                        "{} values do not fill a {}x{} grid",
                        values.len(),
                        width,
                        height
                    )));
                }
                if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::invalid("grid values must be finite and non-negative"));
                }
                Ok(Self {
                    width,
                    height,
                    values,
                })
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn values(&self) -> &[f64] {
                &self.values
            }

            pub fn get(&self, row: usize, col: usize) -> f64 {
                self.values[row * self.width + col]
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.height, self.width)
            }
        }
    };
}

grid_accessors!(SpectrumMap);
grid_accessors!(ArtifactMap);

impl SpectrumMap {
    /// Position of the DC bin after centering, as `(row, col)`.
    pub fn dc(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }
}

/// How per-image spectra are combined into a corpus average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AvgMode {
    /// Mean of per-image `log(1 + |F|)`.
    #[default]
    MeanLog,
    /// `log(1 + sqrt(mean |F|^2))`: log of the averaged power, in magnitude units.
    LogMean,
}

impl std::str::FromStr for AvgMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-log" => Ok(AvgMode::MeanLog),
            "log-mean" => Ok(AvgMode::LogMean),
            other => Err(Error::config(
                "avg_mode",
                format!("expected `mean-log` or `log-mean`, got `{other}`"),
            )),
        }
    }
}

/// Result of the additivity regression for one generator pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditivityReport {
    pub pair_name: String,
    pub pcc: f64,
    pub cosine_similarity: f64,
    pub n_bins: usize,
}

impl AdditivityReport {
    pub const CSV_HEADER: &'static str = "pair_name,pcc,cosine_similarity,n_bins";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.pair_name, self.pcc, self.cosine_similarity, self.n_bins
        )
    }

    /// Mean PCC and CS over a set of reports; `n_bins` is carried from the first.
    pub fn average(reports: &[AdditivityReport], name: &str) -> Result<AdditivityReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::invalid("no reports to average"))?;
        let n = reports.len() as f64;
        Ok(AdditivityReport {
            pair_name: name.to_string(),
            pcc: reports.iter().map(|r| r.pcc).sum::<f64>() / n,
            cosine_similarity: reports.iter().map(|r| r.cosine_similarity).sum::<f64>() / n,
            n_bins: first.n_bins,
        })
    }
}

/// In-place unnormalized 2D DFT (forward or inverse) of a row-major buffer.
pub(crate) fn fft2(
    buf: &mut [Complex<f64>],
    width: usize,
    height: usize,
    inverse: bool,
    planner: &mut FftPlanner<f64>,
) {
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for row in buf.chunks_mut(width) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for c in 0..width {
        for r in 0..height {
            col[r] = buf[r * width + c];
        }
        col_fft.process(&mut col);
        for r in 0..height {
            buf[r * width + c] = col[r];
        }
    }
}

/// Unnormalized forward 2D DFT magnitudes, row-major, not yet centered.
fn dft_magnitudes(image: &ImageGrid, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = image
        .values
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .collect();
    fft2(&mut buf, image.width, image.height, false, planner);
    buf.iter().map(|z| z.norm()).collect()
}

/// Swaps quadrants so index `(0, 0)` moves to `(h/2, w/2)`.
fn fftshift(values: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for r in 0..height {
        let rr = (r + height / 2) % height;
        for c in 0..width {
            let cc = (c + width / 2) % width;
            out[rr * width + cc] = values[r * width + c];
        }
    }
    out
}

/// Centered `log(1 + |F|)` spectrum of an image.
pub fn log_magnitude_spectrum(image: &ImageGrid) -> SpectrumMap {
    let mut planner = FftPlanner::new();
    let mags = dft_magnitudes(image, &mut planner);
    let logs: Vec<f64> = mags.iter().map(|m| m.ln_1p()).collect();
    SpectrumMap {
        width: image.width,
        height: image.height,
        values: fftshift(&logs, image.width, image.height),
    }
}

/// Corpus-average spectrum using the default [`AvgMode::MeanLog`].
pub fn average_spectrum(images: &[ImageGrid]) -> Result<SpectrumMap> {
    average_spectrum_with(images, AvgMode::MeanLog)
}

pub fn average_spectrum_with(images: &[ImageGrid], mode: AvgMode) -> Result<SpectrumMap> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot average an empty image list"))?;
    let (w, h) = (first.width, first.height);
    if let Some((i, img)) = images
        .iter()
        .enumerate()
        .find(|(_, img)| img.width != w || img.height != h)
    {
        return Err(Error::shape(format!(
            "image {i} is {}x{}, expected {w}x{h}",
            img.width, img.height
        )));
    }

    let per_image: Vec<Vec<f64>> = par::map_slice(images, |img| {
        let mut planner = FftPlanner::new();
        let mags = dft_magnitudes(img, &mut planner);
        match mode {
            AvgMode::MeanLog => mags.iter().map(|m| m.ln_1p()).collect(),
            AvgMode::LogMean => mags.iter().map(|m| m * m).collect(),
        }
    });

    // Fixed-order reduction.
    let mut acc = vec![0.0; w * h];
    for spec in &per_image {
        for (a, v) in acc.iter_mut().zip(spec) {
            *a += v;
        }
    }
    let n = images.len() as f64;
    let values: Vec<f64> = match mode {
        AvgMode::MeanLog => acc.iter().map(|v| v / n).collect(),
        AvgMode::LogMean => acc.iter().map(|v| (v / n).sqrt().ln_1p()).collect(),
    };
    Ok(SpectrumMap {
        width: w,
        height: h,
        values: fftshift(&values, w, h),
    })
}

fn check_same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.1, a.0, b.1, b.0
        )));
    }
    Ok(())
}

/// Elementwise `|s_a - s_b|`.
pub fn artifact_map(s_a: &SpectrumMap, s_b: &SpectrumMap) -> Result<ArtifactMap> {
    check_same_dims(s_a.dims(), s_b.dims(), "artifact map inputs differ")?;
    Ok(ArtifactMap {
        width: s_a.width,
        height: s_a.height,
        values: s_a
            .values
            .iter()
            .zip(&s_b.values)
            .map(|(a, b)| (a - b).abs())
            .collect(),
    })
}

/// Flattened `(P_sum, D_AB)` pairs, one per frequency bin, where
/// `P_sum = |S_A - S_real| + |S_B - S_real|` and `D_AB = |S_A - S_B|`.
pub fn additivity_scatter(
    s_real: &SpectrumMap,
    s_gen_a: &SpectrumMap,
    s_gen_b: &SpectrumMap,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_same_dims(s_real.dims(), s_gen_a.dims(), "real vs generator A")?;
    check_same_dims(s_real.dims(), s_gen_b.dims(), "real vs generator B")?;
    let d_a = artifact_map(s_gen_a, s_real)?;
    let d_b = artifact_map(s_gen_b, s_real)?;
    let d_ab = artifact_map(s_gen_a, s_gen_b)?;
    let p_sum: Vec<f64> = d_a.values.iter().zip(&d_b.values).map(|(a, b)| a + b).collect();
    Ok((p_sum, d_ab.values))
}

/// Pearson correlation and cosine similarity between the predicted
/// superposition and the observed cross-generator difference.
pub fn additivity_report(
    s_real: &SpectrumMap,
    s_gen_a: &SpectrumMap,
    s_gen_b: &SpectrumMap,
    pair_name: &str,
) -> Result<AdditivityReport> {
    let (p_sum, d_ab) = additivity_scatter(s_real, s_gen_a, s_gen_b)?;
    let pcc = metrics::pearson(&p_sum, &d_ab)?;
    let cosine_similarity = metrics::cosine_similarity(&p_sum, &d_ab)?;
    Ok(AdditivityReport {
        pair_name: pair_name.to_string(),
        pcc,
        cosine_similarity,
        n_bins: p_sum.len(),
    })
}

/// Centered index of the bin mirroring `(row, col)` through DC.
pub fn mirror_bin(row: usize, col: usize, height: usize, width: usize) -> (usize, usize) {
    (
        (2 * (height / 2) + height - row) % height,
        (2 * (width / 2) + width - col) % width,
    )
}

/// Radially averaged profile: mean of `values` over integer-radius rings
/// around the DC bin, for radii `0..=min(h, w)/2`.
pub fn radial_profile(map: &SpectrumMap) -> Vec<f64> {
    let (dr, dc) = map.dc();
    let max_r = map.height.min(map.width) / 2;
    let mut sums = vec![0.0; max_r + 1];
    let mut counts = vec![0usize; max_r + 1];
    for r in 0..map.height {
        for c in 0..map.width {
            let dy = r as f64 - dr as f64;
            let dx = c as f64 - dc as f64;
            let rad = (dx * dx + dy * dy).sqrt().round() as usize;
            if rad <= max_r {
                sums[rad] += map.get(r, c);
                counts[rad] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force O(N^4) DFT magnitude, centered. Independent of rustfft.
    fn brute_force_spectrum(img: &ImageGrid) -> Vec<f64> {
        let (w, h) = (img.width(), img.height());
        let mut out = vec![0.0; w * h];
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        re += img.get(y, x) * ang.cos();
                        im += img.get(y, x) * ang.sin();
                    }
                }
                let ru = (u + h / 2) % h;
                let rv = (v + w / 2) % w;
                out[ru * w + rv] = (re * re + im * im).sqrt().ln_1p();
            }
        }
        out
    }

    fn cosine_image(n: usize, k: usize) -> ImageGrid {
        let vals = (0..n * n)
            .map(|i| {
                let x = (i % n) as f64;
                0.5 + 0.25 * (2.0 * std::f64::consts::PI * k as f64 * x / n as f64).cos()
            })
            .collect();
        ImageGrid::new(n, n, vals).unwrap()
    }

    #[test]
    fn impulse_gives_uniform_log2() {
        let mut vals = vec![0.0; 64];
        vals[0] = 1.0;
        let s = log_magnitude_spectrum(&ImageGrid::new(8, 8, vals).unwrap());
        for v in s.values() {
            assert!((v - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_has_only_dc() {
        let n = 16;
        let s = log_magnitude_spectrum(&ImageGrid::filled(n, n, 1.0).unwrap());
        let (dr, dc) = s.dc();
        for r in 0..n {
            for c in 0..n {
                let expected = if (r, c) == (dr, dc) {
                    ((n * n) as f64).ln_1p()
                } else {
                    0.0
                };
                assert!((s.get(r, c) - expected).abs() < 1e-9, "bin ({r},{c})");
            }
        }
    }

    #[test]
    fn cosine_matches_brute_force_and_has_two_peaks() {
        let n = 12;
        let img = cosine_image(n, 3);
        let fast = log_magnitude_spectrum(&img);
        let slow = brute_force_spectrum(&img);
        for (a, b) in fast.values().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-6);
        }
        let (dr, dc) = fast.dc();
        let peaks: Vec<(usize, usize)> = (0..n * n)
            .filter(|&i| i != dr * n + dc && fast.values()[i] > 1e-6)
            .map(|i| (i / n, i % n))
            .collect();
        assert_eq!(peaks, vec![(dr, dc - 3), (dr, dc + 3)]);
    }

    #[test]
    fn odd_sizes_center_dc() {
        let s = log_magnitude_spectrum(&ImageGrid::filled(7, 5, 0.5).unwrap());
        let (dr, dc) = s.dc();
        assert_eq!((dr, dc), (2, 3));
        assert!(s.get(dr, dc) > 0.0);
    }

    #[test]
    fn rejects_non_finite_pixels() {
        let err = ImageGrid::new(2, 1, vec![0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn average_of_one_and_duplicates() {
        let img = cosine_image(8, 2);
        let single = log_magnitude_spectrum(&img);
        assert_eq!(average_spectrum(std::slice::from_ref(&img)).unwrap(), single);
        let twice = average_spectrum(&[img.clone(), img]).unwrap();
        for (a, b) in twice.values().iter().zip(single.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn average_rejects_empty_and_mismatched() {
        assert!(average_spectrum(&[]).is_err());
        let a = ImageGrid::filled(4, 4, 0.1).unwrap();
        let b = ImageGrid::filled(4, 5, 0.1).unwrap();
        assert!(matches!(average_spectrum(&[a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn log_mean_of_single_image_matches_per_image() {
        let img = cosine_image(8, 1);
        let a = average_spectrum_with(std::slice::from_ref(&img), AvgMode::LogMean).unwrap();
        let b = log_magnitude_spectrum(&img);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn artifact_map_identity_and_recovery() {
        let phi = SpectrumMap::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gen = SpectrumMap::from_values(2, 2, vec![1.0, 2.5, 3.0, 4.75]).unwrap();
        assert!(artifact_map(&phi, &phi).unwrap().values().iter().all(|&v| v == 0.0));
        assert_eq!(
            artifact_map(&gen, &phi).unwrap().values(),
            &[0.0, 0.5, 0.0, 0.75]
        );
        let other = SpectrumMap::from_values(1, 4, vec![0.0; 4]).unwrap();
        assert!(artifact_map(&phi, &other).is_err());
    }

    #[test]
    fn identical_generators_are_degenerate() {
        let real = SpectrumMap::from_values(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let gen = SpectrumMap::from_values(2, 2, vec![1.0, 2.0, 1.0, 1.5]).unwrap();
        let err = additivity_report(&real, &gen, &gen, "same").unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn disjoint_supports_are_perfectly_additive() {
        // Stripe bins vs spot bins on a flat base: P_sum == D_AB exactly.
        let n = 8;
        let base = vec![1.0; n * n];
        let mut a = base.clone();
        let mut b = base.clone();
        a[3 * n + 1] += 2.0;
        a[3 * n + 5] += 2.0;
        b[6 * n + 6] += 1.5;
        b[n + 2] += 0.5;
        let real = SpectrumMap::from_values(n, n, base).unwrap();
        let a = SpectrumMap::from_values(n, n, a).unwrap();
        let b = SpectrumMap::from_values(n, n, b).unwrap();
        let rep = additivity_report(&real, &a, &b, "a-b").unwrap();
        assert!((rep.pcc - 1.0).abs() < 1e-12);
        assert!((rep.cosine_similarity - 1.0).abs() < 1e-12);
        assert_eq!(rep.n_bins, n * n);
    }

    #[test]
    fn mirror_bin_matches_even_and_odd_offsets() {
        assert_eq!(mirror_bin(4, 4, 8, 8), (4, 4));
        assert_eq!(mirror_bin(1, 2, 8, 8), (7, 6));
        assert_eq!(mirror_bin(0, 0, 7, 7), (6, 6));
        assert_eq!(mirror_bin(3, 3, 7, 7), (3, 3));
    }
}
