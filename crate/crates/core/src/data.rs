//! Datasets and two-view augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::InputLayout;
use crate::rng::{stream, tag};

/// Labelled inputs, one row per item.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub layout: InputLayout,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            layout: self.layout,
        }
    }
}

/// Train, held-out test and out-of-distribution splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Option<Dataset>,
}

/// Latent-class generator: class centres in a latent space, pushed through
/// a fixed random linear map into the observed space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub latent_dim: usize,
    pub observed_dim: usize,
    /// Standard deviation of the class centres.
    pub center_scale: f64,
    /// Within-class latent noise.
    pub noise: f64,
    /// Additive noise in the observed space.
    pub observed_noise: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub ood_samples: usize,
    /// OOD centres are drawn with `center_scale · ood_shift`.
    pub ood_shift: f64,
    /// OOD within-cluster noise is `noise · ood_scale`.
    pub ood_scale: f64,
    pub ood_clusters: usize,
    /// Generator seed, separate from the run seed so seed sweeps share
    /// one dataset.
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            latent_dim: 16,
            observed_dim: 64,
            center_scale: 3.0,
            noise: 1.0,
            observed_noise: 0.1,
            train_samples: 4096,
            test_samples: 1024,
            ood_samples: 1024,
            ood_shift: 2.0,
            ood_scale: 2.0,
            ood_clusters: 3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn issues(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (k, v) in [
            ("classes", self.classes),
            ("latent_dim", self.latent_dim),
            ("observed_dim", self.observed_dim),
            ("train_samples", self.train_samples),
            ("test_samples", self.test_samples),
        ] {
            if v == 0 {
                out.push((k, "must be positive".to_string()));
            }
        }
        if self.classes < 2 {
            out.push(("classes", "need at least two classes".into()));
        }
        for (k, v) in [
            ("center_scale", self.center_scale),
            ("noise", self.noise),
            ("observed_noise", self.observed_noise),
            ("ood_shift", self.ood_shift),
            ("ood_scale", self.ood_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                out.push((k, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.ood_samples > 0 && self.ood_clusters == 0 {
            out.push(("ood_clusters", "must be positive when ood_samples > 0".into()));
        }
        out
    }
}

fn normal_matrix<R: Rng + ?Sized>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Generates all splits from `seed`. Each split has its own RNG stream so
/// changing one split's size leaves the others unchanged.
pub fn synth_multiview_dataset(spec: &SynthSpec, seed: u64) -> Result<Splits> {
    if let Some((k, m)) = spec.issues().first() {
        return Err(Error::InvalidArgument(format!("{k}: {m}")));
    }
    let mut structure = stream(seed, &[tag::DATA, 0]);
    let centers = normal_matrix((spec.classes, spec.latent_dim), spec.center_scale, &mut structure);
    let mixing = normal_matrix(
        (spec.latent_dim, spec.observed_dim),
        1.0 / (spec.latent_dim as f64).sqrt(),
        &mut structure,
    );
    let ood_centers = normal_matrix(
        (spec.ood_clusters.max(1), spec.latent_dim),
        spec.center_scale * spec.ood_shift,
        &mut structure,
    );
    let layout = InputLayout::Flat { dim: spec.observed_dim };

    let draw = |split: u64, n: usize, centers: &Array2<f64>, noise: f64| -> Dataset {
        let mut r = stream(seed, &[tag::DATA, split]);
        let k = centers.nrows();
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut latent = normal_matrix((n, spec.latent_dim), noise, &mut r);
        for (i, &c) in labels.iter().enumerate() {
            let mut row = latent.row_mut(i);
            row += &centers.row(c);
        }
        let x = latent.dot(&mixing) + normal_matrix((n, spec.observed_dim), spec.observed_noise, &mut r);
        Dataset { x, labels, classes: k, layout }
    };
    let train = draw(1, spec.train_samples, &centers, spec.noise);
    let test = draw(2, spec.test_samples, &centers, spec.noise);
    let ood = (spec.ood_samples > 0).then(|| {
        let mut d = draw(3, spec.ood_samples, &ood_centers, spec.noise * spec.ood_scale);
        d.classes = spec.classes;
        d
    });
    Ok(Splits { train, test, ood })
}

/// Records of the CIFAR binary format: one label byte followed by a
/// 3×32×32 channel-major image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarSpec {
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    #[serde(default)]
    pub ood_files: Vec<PathBuf>,
    /// Keep at most this many records per split.
    #[serde(default)]
    pub limit: Option<usize>,
}

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

pub fn parse_cifar_records(bytes: &[u8], limit: Option<usize>) -> Result<Dataset> {
    let rec = CIFAR_PIXELS + 1;
    if bytes.len() % rec != 0 {
        return Err(Error::InvalidArgument(format!(
            "CIFAR file length {} is not a multiple of {rec}",
            bytes.len()
        )));
    }
    let n = (bytes.len() / rec).min(limit.unwrap_or(usize::MAX));
    let mut x = Array2::zeros((n, CIFAR_PIXELS));
    let mut labels = Vec::with_capacity(n);
    for (i, chunk) in bytes.chunks_exact(rec).take(n).enumerate() {
        labels.push(chunk[0] as usize);
        for (j, &b) in chunk[1..].iter().enumerate() {
            x[[i, j]] = b as f64 / 255.0;
        }
    }
    Ok(Dataset {
        x,
        labels,
        classes: 10,
        layout: InputLayout::Image { channels: 3, height: CIFAR_SIDE, width: CIFAR_SIDE },
    })
}

fn load_cifar_files(files: &[PathBuf], limit: Option<usize>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(fs::read(f)?);
    }
    parse_cifar_records(&bytes, limit)
}

pub fn load_cifar(spec: &CifarSpec, base: &Path) -> Result<Splits> {
    let resolve = |fs: &[PathBuf]| fs.iter().map(|p| base.join(p)).collect::<Vec<_>>();
    let train = load_cifar_files(&resolve(&spec.train_files), spec.limit)?;
    let test = load_cifar_files(&resolve(&spec.test_files), spec.limit)?;
    let ood = if spec.ood_files.is_empty() {
        None
    } else {
        Some(load_cifar_files(&resolve(&spec.ood_files), spec.limit)?)
    };
    Ok(Splits { train, test, ood })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic(SynthSpec),
    Cifar(CifarSpec),
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic(SynthSpec::default())
    }
}

impl DataSpec {
    /// Relative CIFAR paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Splits> {
        match self {
            DataSpec::Synthetic(s) => synth_multiview_dataset(s, s.seed),
            DataSpec::Cifar(c) => load_cifar(c, base),
        }
    }
}

/// Transform strengths; zero everywhere gives identical views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Vector data: std of additive Gaussian noise.
    pub noise_std: f64,
    /// Vector data: probability of zeroing each coordinate.
    pub mask_prob: f64,
    /// Vector data: gain drawn from `[1 - gain, 1 + gain]`.
    pub gain: f64,
    /// Images: minimum side fraction of the random crop.
    pub crop_min: f64,
    pub flip: bool,
    /// Images: additive brightness offset range.
    pub brightness: f64,
    /// Images: contrast factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            noise_std: 0.5,
            mask_prob: 0.2,
            gain: 0.2,
            crop_min: 0.6,
            flip: true,
            brightness: 0.2,
            contrast: 0.3,
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            noise_std: 0.0,
            mask_prob: 0.0,
            gain: 0.0,
            crop_min: 1.0,
            flip: false,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn issues(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (k, v) in [
            ("noise_std", self.noise_std),
            ("brightness", self.brightness),
        ] {
            if !v.is_finite() || v < 0.0 {
                out.push((k, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (k, v) in [("mask_prob", self.mask_prob), ("gain", self.gain), ("contrast", self.contrast)] {
            if !(0.0..=1.0).contains(&v) {
                out.push((k, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(self.crop_min > 0.0 && self.crop_min <= 1.0) {
            out.push(("crop_min", format!("must lie in (0, 1], got {}", self.crop_min)));
        }
        out
    }
}

fn augment_vector<R: Rng + ?Sized>(x: ArrayView1<f64>, spec: &AugmentSpec, rng: &mut R) -> Array1<f64> {
    let gain = if spec.gain > 0.0 {
        rng.random_range(1.0 - spec.gain..=1.0 + spec.gain)
    } else {
        1.0
    };
    x.mapv(|v| {
        let noisy = if spec.noise_std > 0.0 {
            let e: f64 = StandardNormal.sample(rng);
            v + spec.noise_std * e
        } else {
            v
        };
        let keep = spec.mask_prob == 0.0 || rng.random::<f64>() >= spec.mask_prob;
        if keep {
            gain * noisy
        } else {
            0.0
        }
    })
}

fn bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = (y.floor().max(0.0) as usize).min(h - 1);
    let x0 = (x.floor().max(0.0) as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (dy, dx) = ((y - y0 as f64).clamp(0.0, 1.0), (x - x0 as f64).clamp(0.0, 1.0));
    let at = |yy: usize, xx: usize| img[yy * w + xx];
    (1.0 - dy) * ((1.0 - dx) * at(y0, x0) + dx * at(y0, x1)) + dy * ((1.0 - dx) * at(y1, x0) + dx * at(y1, x1))
}

fn augment_image<R: Rng + ?Sized>(
    x: ArrayView1<f64>,
    (c, h, w): (usize, usize, usize),
    spec: &AugmentSpec,
    rng: &mut R,
) -> Array1<f64> {
    let frac = if spec.crop_min < 1.0 {
        rng.random_range(spec.crop_min..=1.0)
    } else {
        1.0
    };
    let (ch, cw) = (frac * h as f64, frac * w as f64);
    let oy = rng.random_range(0.0..=(h as f64 - ch));
    let ox = rng.random_range(0.0..=(w as f64 - cw));
    let flip = spec.flip && rng.random::<bool>();
    let bright = if spec.brightness > 0.0 {
        rng.random_range(-spec.brightness..=spec.brightness)
    } else {
        0.0
    };
    let contrast = if spec.contrast > 0.0 {
        rng.random_range(1.0 - spec.contrast..=1.0 + spec.contrast)
    } else {
        1.0
    };
    let src = x.to_vec();
    let mut out = Array1::zeros(c * h * w);
    for k in 0..c {
        let plane = &src[k * h * w..(k + 1) * h * w];
        let mut chan = vec![0.0; h * w];
        for yy in 0..h {
            for xx in 0..w {
                let sx = if flip { w - 1 - xx } else { xx };
                // centre-aligned sampling of the crop window
                let fy = oy + (yy as f64 + 0.5) * ch / h as f64 - 0.5;
                let fx = ox + (sx as f64 + 0.5) * cw / w as f64 - 0.5;
                chan[yy * w + xx] = bilinear(plane, h, w, fy, fx);
            }
        }
        let mean = chan.iter().sum::<f64>() / chan.len() as f64;
        for (i, v) in chan.into_iter().enumerate() {
            out[k * h * w + i] = (v - mean) * contrast + mean + bright;
        }
    }
    out
}

/// One random transform of a single item.
pub fn augment<R: Rng + ?Sized>(x: ArrayView1<f64>, layout: InputLayout, spec: &AugmentSpec, rng: &mut R) -> Array1<f64> {
    match layout {
        InputLayout::Flat { .. } => augment_vector(x, spec, rng),
        InputLayout::Image { channels, height, width } => augment_image(x, (channels, height, width), spec, rng),
    }
}

/// Two views of a batch, each item transformed by two independent draws.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub v: Array2<f64>,
    pub v_prime: Array2<f64>,
    /// Dataset indices of the source items.
    pub items: Vec<usize>,
}

/// Builds the view pair for `items` of `data`. Each item's transforms come
/// from an RNG keyed by `(seed, epoch, item)`, so views do not depend on
/// batch composition.
pub fn make_views(data: &Dataset, items: &[usize], epoch: usize, seed: u64, spec: &AugmentSpec) -> ViewPair {
    let d = data.x.ncols();
    let mut v = Array2::zeros((items.len(), d));
    let mut vp = Array2::zeros((items.len(), d));
    for (row, &i) in items.iter().enumerate() {
        let mut r = stream(seed, &[tag::VIEW, epoch as u64, i as u64]);
        v.row_mut(row).assign(&augment(data.x.row(i), data.layout, spec, &mut r));
        vp.row_mut(row).assign(&augment(data.x.row(i), data.layout, spec, &mut r));
    }
    ViewPair { v, v_prime: vp, items: items.to_vec() }
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates with an explicit uniform draw so the order is stable
    // across rand versions
    for i in (1..n).rev() {
        let j = Uniform::new_inclusive(0, i).expect("non-empty").sample(rng);
        idx.swap(i, j);
    }
    idx
}

/// Stratified subset keeping `fraction` of every class (at least one
/// item per class), in dataset order.
pub fn stratified_subset<R: Rng + ?Sized>(labels: &[usize], classes: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidArgument(format!("label {l} out of range")));
        }
        by_class[l].push(i);
    }
    let mut keep = Vec::new();
    for members in by_class.iter().filter(|m| !m.is_empty()) {
        let k = ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len());
        let order = shuffled_indices(members.len(), rng);
        keep.extend(order[..k].iter().map(|&j| members[j]));
    }
    keep.sort_unstable();
    Ok(keep)
}

/// `n` draws of two `dims`-wide standard Gaussians whose matching
/// coordinates have correlation `rho`.
pub fn gaussian_pairs<R: Rng + ?Sized>(n: usize, dims: usize, rho: f64, rng: &mut R) -> (Array2<f64>, Array2<f64>) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let x = Array2::from_shape_simple_fn((n, dims), || normal.sample(rng));
    let e = Array2::from_shape_simple_fn((n, dims), || normal.sample(rng));
    let y = &x * rho + e * (1.0 - rho * rho).sqrt();
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SynthSpec {
        SynthSpec {
            classes: 3,
            latent_dim: 4,
            observed_dim: 6,
            train_samples: 30,
            test_samples: 9,
            ood_samples: 6,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_makes_class_members_identical() {
        let spec = SynthSpec { noise: 0.0, observed_noise: 0.0, ..tiny() };
        let s = synth_multiview_dataset(&spec, 1).unwrap();
        for c in 0..3 {
            let rows: Vec<_> = (0..30).filter(|&i| s.train.labels[i] == c).collect();
            for &i in &rows[1..] {
                assert_eq!(s.train.x.row(i), s.train.x.row(rows[0]));
            }
        }
    }

    #[test]
    fn regeneration_is_identical_and_seed_sensitive() {
        let a = synth_multiview_dataset(&tiny(), 5).unwrap();
        let b = synth_multiview_dataset(&tiny(), 5).unwrap();
        assert_eq!(a, b);
        let bits = |d: &Dataset| d.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.train), bits(&b.train));
        let c = synth_multiview_dataset(&tiny(), 6).unwrap();
        assert_ne!(a.train.x, c.train.x);
        assert_eq!(a.ood.as_ref().unwrap().len(), 6);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = SynthSpec { classes: 1, noise: -1.0, ..tiny() };
        let keys: Vec<_> = spec.issues().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, vec!["classes", "noise"]);
        assert!(synth_multiview_dataset(&spec, 1).is_err());
    }

    #[test]
    fn identity_augmentation_copies_input() {
        let s = synth_multiview_dataset(&tiny(), 2).unwrap();
        let items: Vec<usize> = (0..10).collect();
        let vp = make_views(&s.train, &items, 0, 3, &AugmentSpec::identity());
        assert_eq!(vp.v, s.train.x.select(Axis(0), &items));
        assert_eq!(vp.v, vp.v_prime);

        let img = Dataset {
            x: Array2::from_shape_fn((2, 2 * 4 * 4), |(i, j)| (i * 7 + j) as f64 / 50.0),
            labels: vec![0, 1],
            classes: 2,
            layout: InputLayout::Image { channels: 2, height: 4, width: 4 },
        };
        let vp = make_views(&img, &[0, 1], 0, 3, &AugmentSpec::identity());
        for (a, b) in vp.v.iter().zip(img.x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_masking_zeroes_views() {
        let s = synth_multiview_dataset(&tiny(), 2).unwrap();
        let spec = AugmentSpec { mask_prob: 1.0, ..Default::default() };
        let vp = make_views(&s.train, &[0, 1, 2], 0, 3, &spec);
        assert!(vp.v.iter().chain(vp.v_prime.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn views_depend_only_on_item_epoch_and_seed() {
        let s = synth_multiview_dataset(&tiny(), 2).unwrap();
        let spec = AugmentSpec::default();
        let a = make_views(&s.train, &[4, 7, 9], 1, 11, &spec);
        let b = make_views(&s.train, &[9, 4], 1, 11, &spec);
        assert_eq!(a.v.row(0), b.v.row(1));
        assert_eq!(a.v_prime.row(2), b.v_prime.row(0));
        assert_ne!(a.v.row(0), a.v_prime.row(0));
        let c = make_views(&s.train, &[4], 2, 11, &spec);
        assert_ne!(a.v.row(0), c.v.row(0));
    }

    #[test]
    fn additive_noise_has_zero_mean() {
        let spec = AugmentSpec { noise_std: 1.0, mask_prob: 0.0, gain: 0.0, ..AugmentSpec::identity() };
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let zero = Array1::zeros(1);
        let draws = 100_000;
        let sum: f64 = (0..draws).map(|_| augment(zero.view(), InputLayout::Flat { dim: 1 }, &spec, &mut r)[0]).sum();
        let mean = sum / draws as f64;
        assert!(mean.abs() < 4.0 / (draws as f64).sqrt(), "{mean}");
    }

    #[test]
    fn image_flip_mirrors_rows() {
        let x = Array1::from_iter((0..16).map(|v| v as f64));
        let spec = AugmentSpec { flip: true, ..AugmentSpec::identity() };
        let layout = InputLayout::Image { channels: 1, height: 4, width: 4 };
        let mut flipped_seen = false;
        for seed in 0..16 {
            let out = augment(x.view(), layout, &spec, &mut ChaCha8Rng::seed_from_u64(seed));
            if (out[0] - 3.0).abs() < 1e-12 {
                flipped_seen = true;
                assert!((out[5] - 6.0).abs() < 1e-12);
            } else {
                assert!((out[0] - 0.0).abs() < 1e-12);
            }
        }
        assert!(flipped_seen);
    }

    #[test]
    fn cifar_records_parse() {
        let mut bytes = vec![0u8; 2 * (CIFAR_PIXELS + 1)];
        bytes[0] = 7;
        bytes[1] = 255;
        bytes[CIFAR_PIXELS + 1] = 2;
        let d = parse_cifar_records(&bytes, None).unwrap();
        assert_eq!(d.labels, vec![7, 2]);
        assert_eq!(d.x[[0, 0]], 1.0);
        assert_eq!(d.x.dim(), (2, CIFAR_PIXELS));
        assert_eq!(parse_cifar_records(&bytes, Some(1)).unwrap().len(), 1);
        assert!(parse_cifar_records(&bytes[1..], None).is_err());
    }

    #[test]
    fn stratified_subset_preserves_proportions() {
        let labels: Vec<usize> = (0..1000).map(|i| if i % 4 == 0 { 1 } else { 0 }).collect();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let keep = stratified_subset(&labels, 2, 0.1, &mut r).unwrap();
        let ones = keep.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(keep.len(), 100);
        assert_eq!(ones, 25);
        let keep = stratified_subset(&labels, 2, 0.001, &mut r).unwrap();
        assert_eq!(keep.len(), 2);
        assert!(stratified_subset(&labels, 2, 0.0, &mut r).is_err());
    }
}
