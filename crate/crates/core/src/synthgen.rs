//! Synthetic data with known structure.
//!
//! Images: power-law noise standing in for natural scenes, plus additive
//! stripe and spot gratings standing in for generator artifacts. Corpora for
//! different "generators" share their base images, so the only systematic
//! spectral difference between two corpora is the injected artifact.
//!
//! Features: `z = y·a + b_g + s_c + noise`, with the universal signature `a`
//! on channel set U, per-generator fingerprints `b_g` on S and per-class
//! semantic signatures `s_c` on N. Every signature has unit norm.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_spectra::{fft2, ImageGrid};
use crate::par;
use crate::rng::{stream, substream};

/// Standard deviation real images are normalized to before clipping.
pub const REAL_IMAGE_STD: f64 = 0.12;

/// Cosine between the held-out generator's fingerprint and the real-camera
/// fingerprint `b_0`.
pub const UNSEEN_REAL_COSINE: f64 = 0.95;

/// An additive periodic artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ArtifactSpec {
    /// `amplitude · sin(2π x / period)` along columns: vertical stripes.
    Stripe { period: f64, amplitude: f64 },
    /// One cosine grating per `(u, v)` bin, `u` vertical and `v` horizontal
    /// frequency in cycles per image.
    Spot { bins: Vec<(i64, i64)>, amplitude: f64 },
}

impl ArtifactSpec {
    pub fn amplitude(&self) -> f64 {
        match self {
            ArtifactSpec::Stripe { amplitude, .. } | ArtifactSpec::Spot { amplitude, .. } => {
                *amplitude
            }
        }
    }

    /// Checks the spec against an image of `width x height`.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let amp = self.amplitude();
        if !amp.is_finite() || amp < 0.0 {
            return Err(Error::config("amplitude", "must be finite and non-negative"));
        }
        match self {
            ArtifactSpec::Stripe { period, .. } => {
                if !period.is_finite() || *period < 2.0 {
                    return Err(Error::config("period", "stripe period must be at least 2 px"));
                }
            }
            ArtifactSpec::Spot { bins, .. } => {
                if bins.is_empty() {
                    return Err(Error::config("bins", "spot artifact needs at least one bin"));
                }
                let (nu, nv) = ((height / 2) as i64, (width / 2) as i64);
                for &(u, v) in bins {
                    if u.abs() > nu || v.abs() > nv {
                        return Err(Error::config(
                            "bins",
                            format!("({u}, {v}) is outside the Nyquist range ±({nu}, {nv})"),
                        ));
                    }
                    if u == 0 && v == 0 {
                        return Err(Error::config("bins", "(0, 0) is the DC bin"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Random-phase image whose expected power spectrum falls as `1/f^alpha`,
/// normalized to mean 0.5 and standard deviation [`REAL_IMAGE_STD`], then
/// clipped to `[0, 1]`.
pub fn gen_real_image(side: usize, alpha: f64, seed: u64) -> Result<ImageGrid> {
    if side < 16 {
        return Err(Error::config("side", "must be at least 16"));
    }
    if !(0.5..=3.0).contains(&alpha) {
        return Err(Error::config("alpha", "must lie in [0.5, 3]"));
    }
    let mut rng = substream(seed, stream::IMAGE, 0);
    let mut buf: Vec<Complex<f64>> = (0..side * side)
        .map(|_| Complex::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    fft2(&mut buf, side, side, false, &mut planner);

    let signed = |k: usize| if k <= side / 2 { k as f64 } else { k as f64 - side as f64 };
    for r in 0..side {
        for c in 0..side {
            let f = signed(r).hypot(signed(c));
            buf[r * side + c] *= if f == 0.0 { 0.0 } else { f.powf(-alpha / 2.0) };
        }
    }
    fft2(&mut buf, side, side, true, &mut planner);

    let re: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let n = re.len() as f64;
    let mean = re.iter().sum::<f64>() / n;
    let std = (re.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let values = re
        .iter()
        .map(|v| (0.5 + (v - mean) / std * REAL_IMAGE_STD).clamp(0.0, 1.0))
        .collect();
    ImageGrid::new(side, side, values)
}

/// Adds an artifact in the spatial domain and clips to `[0, 1]`. The seed
/// picks the grating phases of spot artifacts; stripes have zero phase.
pub fn apply_artifact(image: &ImageGrid, spec: &ArtifactSpec, seed: u64) -> Result<ImageGrid> {
    let (w, h) = (image.width(), image.height());
    spec.validate(w, h)?;
    let mut out = image.clone();
    if spec.amplitude() == 0.0 {
        return Ok(out);
    }
    let tau = std::f64::consts::TAU;
    match spec {
        ArtifactSpec::Stripe { period, amplitude } => {
            let wave: Vec<f64> = (0..w)
                .map(|x| amplitude * (tau * x as f64 / period).sin())
                .collect();
            for row in out.values_mut().chunks_mut(w) {
                for (v, s) in row.iter_mut().zip(&wave) {
                    *v += s;
                }
            }
        }
        ArtifactSpec::Spot { bins, amplitude } => {
            let mut rng = substream(seed, stream::IMAGE, 1);
            for &(u, v) in bins {
                let phase = rng.random_range(0.0..tau);
                let vals = out.values_mut();
                for y in 0..h {
                    for x in 0..w {
                        let arg = tau * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                        vals[y * w + x] += amplitude * (arg + phase).cos();
                    }
                }
            }
        }
    }
    out.clip_unit();
    Ok(out)
}

/// A named image source: the artifacts layered on every base image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub name: String,
    pub artifacts: Vec<ArtifactSpec>,
}

/// Configuration for a family of image corpora sharing base images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageCorpusConfig {
    pub side: usize,
    pub n_images: usize,
    pub alpha: f64,
    /// Std of independent Gaussian pixel noise added to every image.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Artifact generators; a clean `real` corpus is always produced as well.
    pub generators: Vec<GeneratorSpec>,
}

/// Stripe bins of the default stripe generator, in cycles per 256 px.
const STRIPE_BINS: [i64; 4] = [16, 32, 48, 64];
/// Default spot bins that avoid every stripe bin and its mirror.
const OFF_AXIS_SPOTS: [(i64, i64); 4] = [(24, 40), (-40, 20), (56, -12), (12, 72)];

impl Default for ImageCorpusConfig {
    fn default() -> Self {
        Self::stripe_spot(0.0)
    }
}

impl ImageCorpusConfig {
    /// A stripe generator and a spot generator at 256 px. `overlap` is the
    /// fraction of spot gratings moved onto stripe frequencies.
    pub fn stripe_spot(overlap: f64) -> Self {
        let side = 256usize;
        let amplitude = 0.03;
        let stripes = STRIPE_BINS
            .iter()
            .map(|&k| ArtifactSpec::Stripe {
                period: side as f64 / k as f64,
                amplitude,
            })
            .collect();
        let n_shared = (overlap.clamp(0.0, 1.0) * OFF_AXIS_SPOTS.len() as f64).round() as usize;
        let bins = OFF_AXIS_SPOTS
            .iter()
            .enumerate()
            .map(|(i, &b)| if i < n_shared { (0, STRIPE_BINS[i]) } else { b })
            .collect();
        Self {
            side,
            n_images: 64,
            alpha: 2.0,
            noise_sigma: 0.002,
            seed: 0,
            generators: vec![
                GeneratorSpec {
                    name: "stripe".into(),
                    artifacts: stripes,
                },
                GeneratorSpec {
                    name: "spot".into(),
                    artifacts: vec![ArtifactSpec::Spot { bins, amplitude }],
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::config("n_images", "must be at least 1"));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma", "must be finite and non-negative"));
        }
        let mut names = BTreeSet::from(["real"]);
        for g in &self.generators {
            if !names.insert(g.name.as_str()) {
                return Err(Error::config("generators", format!("duplicate name `{}`", g.name)));
            }
            for a in &g.artifacts {
                a.validate(self.side, self.side)?;
            }
        }
        // Side and alpha are checked by gen_real_image.
        gen_real_image_check(self.side, self.alpha)
    }
}

fn gen_real_image_check(side: usize, alpha: f64) -> Result<()> {
    if side < 16 {
        return Err(Error::config("side", "must be at least 16"));
    }
    if !(0.5..=3.0).contains(&alpha) {
        return Err(Error::config("alpha", "must lie in [0.5, 3]"));
    }
    Ok(())
}

/// Generates the `real` corpus followed by one corpus per generator.
pub fn gen_image_corpora(cfg: &ImageCorpusConfig) -> Result<Vec<(String, Vec<ImageGrid>)>> {
    cfg.validate()?;
    let bases: Vec<Result<ImageGrid>> = par::map_indexed(cfg.n_images, |i| {
        let seed: u64 = substream(cfg.seed, stream::IMAGE, i as u64).random();
        gen_real_image(cfg.side, cfg.alpha, seed)
    });
    let bases: Vec<ImageGrid> = bases.into_iter().collect::<Result<_>>()?;

    let mut sources: Vec<(&str, &[ArtifactSpec])> = vec![("real", &[])];
    sources.extend(cfg.generators.iter().map(|g| (g.name.as_str(), g.artifacts.as_slice())));

    let mut out = Vec::with_capacity(sources.len());
    for (gi, (name, artifacts)) in sources.iter().enumerate() {
        let images: Vec<Result<ImageGrid>> = par::map_indexed(cfg.n_images, |i| {
            let key = ((gi as u64) << 32) | i as u64;
            let art_seed: u64 = substream(cfg.seed, stream::IMAGE, key).random();
            let mut img = bases[i].clone();
            for (ai, spec) in artifacts.iter().enumerate() {
                img = apply_artifact(&img, spec, art_seed.wrapping_add(ai as u64))?;
            }
            if cfg.noise_sigma > 0.0 {
                let mut rng = substream(cfg.seed, stream::NOISE, key);
                for v in img.values_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v += cfg.noise_sigma * n;
                }
                img.clip_unit();
            }
            Ok(img)
        });
        out.push((name.to_string(), images.into_iter().collect::<Result<_>>()?));
    }
    Ok(out)
}

/// Parameters of a synthetic entangled-feature dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureDatasetConfig {
    pub dim: usize,
    pub n_universal: usize,
    pub n_specific: usize,
    pub n_generators: usize,
    pub n_semantic: usize,
    pub n_samples: usize,
    pub noise_sigma: f64,
    pub leakage_eps: f64,
    pub shortcut_bias: bool,
    pub unseen_generator: bool,
    pub seed: u64,
}

impl Default for FeatureDatasetConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            n_universal: 16,
            n_specific: 16,
            n_generators: 4,
            n_semantic: 8,
            n_samples: 8000,
            noise_sigma: 0.1,
            leakage_eps: 0.0,
            shortcut_bias: false,
            unseen_generator: false,
            seed: 0,
        }
    }
}

impl FeatureDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_universal == 0 || self.n_specific == 0 {
            return Err(Error::config("n_universal", "U and S must be non-empty"));
        }
        if self.n_universal + self.n_specific >= self.dim {
            return Err(Error::config("dim", "n_universal + n_specific must be < dim"));
        }
        if self.n_generators < 2 {
            return Err(Error::config("n_generators", "must be at least 2"));
        }
        if self.n_generators + 1 >= usize::from(u16::MAX) {
            return Err(Error::config("n_generators", "too large for a u16 id"));
        }
        if self.n_semantic < 2 || self.n_semantic > usize::from(u16::MAX) {
            return Err(Error::config("n_semantic", "must be in [2, 65535]"));
        }
        if self.n_samples == 0 {
            return Err(Error::config("n_samples", "must be at least 1"));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma", "must be finite and non-negative"));
        }
        if !(0.0..0.5).contains(&self.leakage_eps) {
            return Err(Error::config("leakage_eps", "must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// One feature vector with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSample {
    pub z: Vec<f64>,
    /// 0 = real, 1 = fake.
    pub y: u8,
    /// 0 = real domain, 1..=K seen generators, K+1 held-out generator.
    pub g: u16,
    /// Semantic class, 1..=C.
    pub c: u16,
}

/// A set of samples plus the header fields of its file format.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub n_generators: usize,
    pub n_semantic: usize,
    pub shortcut_bias: bool,
    pub unseen_generator: bool,
    pub samples: Vec<FeatureSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.y).collect()
    }

    /// Checks the per-sample invariants against the header.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.z.len() != self.dim {
                return Err(Error::shape(format!("sample {i} has {} features, expected {}", s.z.len(), self.dim)));
            }
            if s.z.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("sample {i} has a non-finite feature")));
            }
            if s.y > 1 || (s.y == 0) != (s.g == 0) {
                return Err(Error::invalid(format!("sample {i}: label y={} inconsistent with generator g={}", s.y, s.g)));
            }
            if usize::from(s.g) > self.n_generators + 1 {
                return Err(Error::invalid(format!("sample {i}: generator id {} out of range", s.g)));
            }
        }
        Ok(())
    }
}

/// Ground-truth channel partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthSubspaces {
    #[serde(rename = "U")]
    pub u: Vec<usize>,
    #[serde(rename = "S")]
    pub s: Vec<usize>,
    #[serde(rename = "N")]
    pub n: Vec<usize>,
}

impl GroundTruthSubspaces {
    /// Checks disjointness and coverage of `0..dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let mut seen = vec![false; dim];
        for &i in self.u.iter().chain(&self.s).chain(&self.n) {
            if i >= dim || seen[i] {
                return Err(Error::invalid(format!("channel {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("subspaces do not cover every channel"));
        }
        Ok(())
    }
}

/// Which split to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Unit-norm signatures placed in full `D`-dimensional space.
struct Signatures {
    universal: Vec<f64>,
    /// `b_0..=b_{K+1}`.
    fingerprints: Vec<Vec<f64>>,
    /// `s_1..=s_C`, stored at index `c - 1`.
    semantic: Vec<Vec<f64>>,
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Random-sign vector with equal magnitudes `1/sqrt(n)`, so every channel
/// of a subspace carries the same share of its signature.
fn random_sign_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let m = 1.0 / (n as f64).sqrt();
    (0..n).map(|_| if rng.random_bool(0.5) { m } else { -m }).collect()
}

/// Places a unit vector on `channels`, moving an `eps` share of its energy
/// onto `ceil(eps·D)` random channels outside `channels`.
fn embed(rng: &mut ChaCha8Rng, dim: usize, channels: &[usize], unit: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let keep = (1.0 - eps).sqrt();
    for (&ch, &v) in channels.iter().zip(unit) {
        out[ch] = keep * v;
    }
    if eps > 0.0 {
        let inside: BTreeSet<usize> = channels.iter().copied().collect();
        let mut outside: Vec<usize> = (0..dim).filter(|c| !inside.contains(c)).collect();
        outside.shuffle(rng);
        let n_leak = ((eps * dim as f64).ceil() as usize).min(outside.len());
        let leak = random_unit(rng, n_leak);
        for (&ch, &v) in outside[..n_leak].iter().zip(&leak) {
            out[ch] += eps.sqrt() * v;
        }
    }
    out
}

fn draw_subspaces(cfg: &FeatureDatasetConfig) -> GroundTruthSubspaces {
    let mut rng = substream(cfg.seed, stream::SUBSPACES, 0);
    let mut perm: Vec<usize> = (0..cfg.dim).collect();
    perm.shuffle(&mut rng);
    let (nu, ns) = (cfg.n_universal, cfg.n_specific);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    GroundTruthSubspaces {
        u: sorted(&perm[..nu]),
        s: sorted(&perm[nu..nu + ns]),
        n: sorted(&perm[nu + ns..]),
    }
}

fn draw_signatures(cfg: &FeatureDatasetConfig, truth: &GroundTruthSubspaces) -> Signatures {
    let mut rng = substream(cfg.seed, stream::SIGNATURES, 0);
    let eps = cfg.leakage_eps;
    let a = random_sign_unit(&mut rng, truth.u.len());
    let universal = embed(&mut rng, cfg.dim, &truth.u, &a, eps);

    let seen: Vec<Vec<f64>> = (0..=cfg.n_generators)
        .map(|_| random_sign_unit(&mut rng, truth.s.len()))
        .collect();
    // Held-out fingerprint: tilted away from b_0 by a fixed angle.
    let b0 = &seen[0];
    let r = random_unit(&mut rng, truth.s.len());
    let proj: f64 = r.iter().zip(b0).map(|(x, y)| x * y).sum();
    let perp: Vec<f64> = r.iter().zip(b0).map(|(x, y)| x - proj * y).collect();
    let pn = perp.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sin = (1.0 - UNSEEN_REAL_COSINE * UNSEEN_REAL_COSINE).sqrt();
    let unseen: Vec<f64> = b0
        .iter()
        .zip(&perp)
        .map(|(b, p)| UNSEEN_REAL_COSINE * b + sin * p / pn)
        .collect();

    let fingerprints = seen
        .iter()
        .chain(std::iter::once(&unseen))
        .map(|b| embed(&mut rng, cfg.dim, &truth.s, b, eps))
        .collect();
    let semantic = (0..cfg.n_semantic)
        .map(|_| {
            let s = random_sign_unit(&mut rng, truth.n.len());
            embed(&mut rng, cfg.dim, &truth.n, &s, eps)
        })
        .collect();
    Signatures {
        universal,
        fingerprints,
        semantic,
    }
}

/// Rounds to the nearest `f32`, so in-memory datasets equal their files.
fn to_f32_precision(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Draws one split of the dataset. Subspaces and signatures depend only on
/// the seed, so the two splits share them.
pub fn gen_feature_split(cfg: &FeatureDatasetConfig, split: Split) -> Result<(Dataset, GroundTruthSubspaces)> {
    cfg.validate()?;
    let truth = draw_subspaces(cfg);
    let sigs = draw_signatures(cfg, &truth);
    let stream_name = match split {
        Split::Train => stream::SAMPLES_TRAIN,
        Split::Test => stream::SAMPLES_TEST,
    };
    let k = cfg.n_generators;
    let samples = par::map_indexed(cfg.n_samples, |i| {
        let mut rng = substream(cfg.seed, stream_name, i as u64);
        let y: u8 = u8::from(i % 2 == 0);
        let c: u16 = rng.random_range(1..=cfg.n_semantic as u16);
        let g: u16 = if y == 0 {
            0
        } else {
            match split {
                Split::Train if cfg.shortcut_bias => 1 + (c - 1) % k as u16,
                Split::Test if cfg.unseen_generator => k as u16 + 1,
                _ => rng.random_range(1..=k as u16),
            }
        };
        let b = &sigs.fingerprints[usize::from(g)];
        let s = &sigs.semantic[usize::from(c) - 1];
        let z = (0..cfg.dim)
            .map(|d| {
                let n: f64 = StandardNormal.sample(&mut rng);
                let u = if y == 1 { sigs.universal[d] } else { 0.0 };
                to_f32_precision(u + b[d] + s[d] + cfg.noise_sigma * n)
            })
            .collect();
        FeatureSample { z, y, g, c }
    });
    let ds = Dataset {
        dim: cfg.dim,
        n_generators: k,
        n_semantic: cfg.n_semantic,
        shortcut_bias: cfg.shortcut_bias,
        unseen_generator: cfg.unseen_generator,
        samples,
    };
    Ok((ds, truth))
}

/// The training split and its ground truth.
pub fn gen_feature_dataset(cfg: &FeatureDatasetConfig) -> Result<(Dataset, GroundTruthSubspaces)> {
    gen_feature_split(cfg, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_spectra::{average_spectrum, log_magnitude_spectrum};

    fn small_cfg() -> FeatureDatasetConfig {
        FeatureDatasetConfig {
            dim: 32,
            n_universal: 4,
            n_specific: 6,
            n_samples: 101,
            ..Default::default()
        }
    }

    #[test]
    fn real_image_is_deterministic_and_bounded() {
        let a = gen_real_image(32, 2.0, 5).unwrap();
        let b = gen_real_image(32, 2.0, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, gen_real_image(32, 2.0, 6).unwrap());
    }

    #[test]
    fn real_image_preconditions() {
        assert!(gen_real_image(8, 2.0, 0).is_err());
        assert!(gen_real_image(32, 3.5, 0).is_err());
    }

    #[test]
    fn steeper_slope_has_less_high_frequency_energy() {
        let band = |alpha: f64| {
            let imgs: Vec<_> = (0..8).map(|s| gen_real_image(64, alpha, s).unwrap()).collect();
            let spec = average_spectrum(&imgs).unwrap();
            let (dr, dc) = spec.dc();
            let mut e = 0.0;
            for r in 0..64 {
                for c in 0..64 {
                    let f = (r as f64 - dr as f64).hypot(c as f64 - dc as f64);
                    if f > 20.0 {
                        e += spec.get(r, c);
                    }
                }
            }
            e
        };
        assert!(band(3.0) < band(0.5));
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let img = gen_real_image(32, 2.0, 1).unwrap();
        let stripe = ArtifactSpec::Stripe { period: 8.0, amplitude: 0.0 };
        assert_eq!(apply_artifact(&img, &stripe, 0).unwrap(), img);
        let spot = ArtifactSpec::Spot { bins: vec![(3, 4)], amplitude: 0.0 };
        assert_eq!(apply_artifact(&img, &spot, 0).unwrap(), img);
    }

    #[test]
    fn stripe_on_flat_image_peaks_on_the_dc_row() {
        let flat = ImageGrid::filled(32, 32, 0.5).unwrap();
        let spec = ArtifactSpec::Stripe { period: 8.0, amplitude: 0.2 };
        let s = log_magnitude_spectrum(&apply_artifact(&flat, &spec, 0).unwrap());
        let (dr, dc) = s.dc();
        for r in 0..32 {
            for c in 0..32 {
                let peak = r == dr && (c == dc + 4 || c == dc - 4);
                if peak {
                    assert!(s.get(r, c) > 4.0);
                } else if (r, c) != (dr, dc) {
                    assert!(s.get(r, c) < 1e-6, "({r},{c}) = {}", s.get(r, c));
                }
            }
        }
    }

    #[test]
    fn spot_validation() {
        let ok = ArtifactSpec::Spot { bins: vec![(16, -16)], amplitude: 0.1 };
        assert!(ok.validate(32, 32).is_ok());
        let far = ArtifactSpec::Spot { bins: vec![(17, 0)], amplitude: 0.1 };
        assert!(far.validate(32, 32).is_err());
        let dc = ArtifactSpec::Spot { bins: vec![(0, 0)], amplitude: 0.1 };
        assert!(dc.validate(32, 32).is_err());
        let short = ArtifactSpec::Stripe { period: 1.5, amplitude: 0.1 };
        assert!(short.validate(32, 32).is_err());
    }

    #[test]
    fn artifact_spec_json_shape() {
        let s: ArtifactSpec =
            serde_json::from_str(r#"{"kind":"spot","bins":[[1,2]],"amplitude":0.5}"#).unwrap();
        assert_eq!(s, ArtifactSpec::Spot { bins: vec![(1, 2)], amplitude: 0.5 });
    }

    #[test]
    fn corpora_share_bases() {
        let mut cfg = ImageCorpusConfig::stripe_spot(0.0);
        cfg.side = 32;
        cfg.n_images = 2;
        cfg.noise_sigma = 0.0;
        cfg.generators[0].artifacts = vec![ArtifactSpec::Stripe { period: 8.0, amplitude: 0.0 }];
        cfg.generators[1].artifacts.clear();
        let c = gen_image_corpora(&cfg).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[0].1, c[1].1);
        assert_eq!(c[0].1, c[2].1);
    }

    #[test]
    fn noiseless_universal_channels_are_exact() {
        let cfg = FeatureDatasetConfig { noise_sigma: 0.0, ..small_cfg() };
        let (ds, truth) = gen_feature_dataset(&cfg).unwrap();
        let fake = ds.samples.iter().find(|s| s.y == 1).unwrap();
        let real = ds.samples.iter().find(|s| s.y == 0).unwrap();
        for &ch in &truth.u {
            assert_eq!(real.z[ch], 0.0);
        }
        let norm: f64 = truth.u.iter().map(|&ch| fake.z[ch].powi(2)).sum();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn splits_are_balanced_and_deterministic() {
        let cfg = small_cfg();
        let (a, ta) = gen_feature_dataset(&cfg).unwrap();
        let (b, tb) = gen_feature_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        ta.validate(cfg.dim).unwrap();
        a.validate().unwrap();
        let fakes = a.samples.iter().filter(|s| s.y == 1).count();
        assert_eq!(fakes, 51);
        assert_eq!(a.len() - fakes, 50);
    }

    #[test]
    fn shortcut_and_unseen_generator_rules() {
        let cfg = FeatureDatasetConfig {
            shortcut_bias: true,
            unseen_generator: true,
            ..small_cfg()
        };
        let (train, _) = gen_feature_split(&cfg, Split::Train).unwrap();
        for s in train.samples.iter().filter(|s| s.y == 1) {
            assert_eq!(s.g, 1 + (s.c - 1) % 4);
        }
        let (test, _) = gen_feature_split(&cfg, Split::Test).unwrap();
        assert!(test.samples.iter().filter(|s| s.y == 1).all(|s| s.g == 5));
        assert!(test.samples.iter().filter(|s| s.y == 0).all(|s| s.g == 0));
    }

    #[test]
    fn leakage_moves_an_eps_share_of_energy() {
        let mut rng = substream(0, "test", 0);
        let channels = [1, 4, 7, 9];
        let unit = random_unit(&mut rng, 4);
        let v = embed(&mut rng, 32, &channels, &unit, 0.25);
        let inside: f64 = channels.iter().map(|&c| v[c] * v[c]).sum();
        let total: f64 = v.iter().map(|x| x * x).sum();
        assert!((inside - 0.75).abs() < 1e-12);
        assert!((total - 1.0).abs() < 1e-12);
        let off = (0..32).filter(|c| !channels.contains(c) && v[*c] != 0.0).count();
        assert_eq!(off, 8);
        assert!(FeatureDatasetConfig { leakage_eps: 0.5, ..small_cfg() }.validate().is_err());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let bad = FeatureDatasetConfig { n_generators: 1, ..small_cfg() };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "n_generators"),
            other => panic!("{other:?}"),
        }
        let bad = FeatureDatasetConfig { dim: 10, ..small_cfg() };
        assert!(bad.validate().is_err());
    }
}
