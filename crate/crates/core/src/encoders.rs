//! Frozen dual image encoders.
//!
//! Both branches patchify the image and apply a fixed seeded linear
//! projection plus sinusoidal position encoding. The general branch first
//! applies an integer box blur, which destroys the low-contrast marks the
//! synthetic corpus hides its fine detail in; the detail branch sees raw
//! pixels. Parameters are generated once from the seed and never trained.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fingerprint::digest_named;
use crate::ppm::Image;
use crate::tensor::{randn_mat, sinusoidal_pos, Mat};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    General,
    Detail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub image_size: usize,
    pub patch_size: usize,
    pub dims: usize,
    /// Odd box-blur kernel; present iff `kind == General`.
    pub blur_kernel: Option<usize>,
    pub seed: u64,
}

impl EncoderSpec {
    pub fn general_default() -> Self {
        EncoderSpec {
            kind: EncoderKind::General,
            image_size: 64,
            patch_size: 16,
            dims: 32,
            blur_kernel: Some(9),
            seed: 101,
        }
    }

    pub fn detail_default() -> Self {
        EncoderSpec {
            kind: EncoderKind::Detail,
            image_size: 64,
            patch_size: 8,
            dims: 48,
            blur_kernel: None,
            seed: 202,
        }
    }

    pub fn rows(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        match (self.kind, self.blur_kernel) {
            (EncoderKind::General, Some(k)) if k % 2 == 1 => Ok(()),
            (EncoderKind::General, Some(k)) => Err(Error::Config(format!(
                "blur kernel must be odd, got {k}"
            ))),
            (EncoderKind::General, None) => Err(Error::Config(
                "general encoder requires a blur kernel".into(),
            )),
            (EncoderKind::Detail, None) => Ok(()),
            (EncoderKind::Detail, Some(_)) => Err(Error::Config(
                "detail encoder must not set a blur kernel".into(),
            )),
        }
    }
}

/// A sequence of image feature vectors (rows x dims), all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    values: Mat,
}

impl FeatureSeq {
    pub fn new(values: Mat) -> Result<Self> {
        if !crate::tensor::all_finite(&values) {
            return Err(Error::Numeric("non-finite feature values".into()));
        }
        Ok(FeatureSeq { values })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    /// Column means over rows; the probe input.
    pub fn mean_pooled(&self) -> Vec<f64> {
        let rows = self.values.nrows() as f64;
        (0..self.values.ncols())
            .map(|c| self.values.column(c).sum() / rows)
            .collect()
    }
}

pub struct Encoder {
    spec: EncoderSpec,
    proj: Mat,
    pos: Mat,
    fingerprint: String,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.patch_size * spec.patch_size * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let proj = randn_mat(&mut rng, fan_in, spec.dims, 1.0 / (fan_in as f64).sqrt());
        let pos = sinusoidal_pos(spec.rows(), spec.dims);
        let spec_json = serde_json::to_string(&spec).expect("spec serializes");
        let fingerprint = digest_named([
            (spec_json.as_str(), &Mat::zeros((0, 0))),
            ("proj", &proj),
            ("pos", &pos),
        ]);
        Ok(Encoder {
            spec,
            proj,
            pos,
            fingerprint,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Stable content hash of the frozen weights and spec.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureSeq> {
        if image.width != self.spec.image_size || image.height != self.spec.image_size {
            return Err(Error::Shape(format!(
                "expected {0}x{0} image, got {1}x{2}",
                self.spec.image_size, image.width, image.height
            )));
        }
        let working = match self.spec.blur_kernel {
            Some(k) => box_blur_u8(image, k),
            None => image.clone(),
        };
        let patches = patchify(&working, self.spec.patch_size);
        let feats = patches.dot(&self.proj) + &self.pos;
        FeatureSeq::new(feats)
    }
}

/// Integer box blur: each output channel value is the rounded mean over the
/// clamped k x k window. Operating in u8 is what makes sub-rounding detail
/// vanish exactly on the general branch.
pub fn box_blur_u8(image: &Image, kernel: usize) -> Image {
    let r = (kernel / 2) as i32;
    let (w, h) = (image.width as i32, image.height as i32);
    let mut out = Image::filled(image.width, image.height, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = ((x - r).max(0), (x + r).min(w - 1));
            let (y0, y1) = ((y - r).max(0), (y + r).min(h - 1));
            let count = ((x1 - x0 + 1) * (y1 - y0 + 1)) as u32;
            let mut sums = [0u32; 3];
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    let px = image.get(xx as usize, yy as usize);
                    for c in 0..3 {
                        sums[c] += px[c] as u32;
                    }
                }
            }
            let rgb = [
                ((sums[0] + count / 2) / count) as u8,
                ((sums[1] + count / 2) / count) as u8,
                ((sums[2] + count / 2) / count) as u8,
            ];
            out.set(x as usize, y as usize, rgb);
        }
    }
    out
}

/// Rows are patches in row-major patch order; columns are the patch pixels
/// in row-major (y, x, rgb) order, scaled to [0, 1].
fn patchify(image: &Image, patch: usize) -> Mat {
    let per_side = image.width / patch;
    let fan_in = patch * patch * 3;
    let mut m = Mat::zeros((per_side * per_side, fan_in));
    for py in 0..per_side {
        for px in 0..per_side {
            let row = py * per_side + px;
            let mut col = 0;
            for y in 0..patch {
                for x in 0..patch {
                    let rgb = image.get(px * patch + x, py * patch + y);
                    for c in 0..3 {
                        m[[row, col]] = rgb[c] as f64 / 255.0;
                        col += 1;
                    }
                }
            }
        }
    }
    m
}

/// Dominant covariance eigenvector by power iteration on centered rows.
fn top_principal_component(rows: &[Vec<f64>], mean: &[f64], iters: usize) -> Vec<f64> {
    let d = mean.len();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    for _ in 0..iters {
        let mut next = vec![0.0; d];
        for row in rows {
            let dot: f64 = (0..d).map(|j| (row[j] - mean[j]) * v[j]).sum();
            for j in 0..d {
                next[j] += dot * (row[j] - mean[j]);
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return vec![0.0; d];
        }
        for j in 0..d {
            v[j] = next[j] / norm;
        }
    }
    v
}

/// Multinomial logistic probe on fixed feature vectors.
///
/// Centers on the train portion, projects out the dominant principal
/// component (nuisance variation such as global brightness), standardizes,
/// then runs full-batch gradient descent. Reports held-out accuracy.
/// Deterministic.
pub fn linear_probe_accuracy(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    train_fraction: f64,
    steps: usize,
    lr: f64,
) -> f64 {
    assert_eq!(features.len(), labels.len());
    let n = features.len();
    let d = features[0].len();
    // Per-class split so train and test are both class-balanced.
    let mut train: Vec<usize> = Vec::new();
    let mut test: Vec<usize> = Vec::new();
    for class in 0..n_classes {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        let cut = ((members.len() as f64) * train_fraction).round() as usize;
        train.extend(&members[..cut]);
        test.extend(&members[cut..]);
    }

    let mut mean = vec![0.0; d];
    for &i in &train {
        for j in 0..d {
            mean[j] += features[i][j];
        }
    }
    for m in &mut mean {
        *m /= train.len() as f64;
    }
    let train_rows: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
    let pc = top_principal_component(&train_rows, &mean, 60);
    let deflate = |i: usize| -> Vec<f64> {
        let centered: Vec<f64> = (0..d).map(|j| features[i][j] - mean[j]).collect();
        let dot: f64 = centered.iter().zip(&pc).map(|(a, b)| a * b).sum();
        (0..d).map(|j| centered[j] - dot * pc[j]).collect()
    };

    let mut var = vec![0.0; d];
    for &i in &train {
        let f = deflate(i);
        for j in 0..d {
            var[j] += f[j] * f[j];
        }
    }
    let sd: Vec<f64> = var
        .iter()
        .map(|v| (v / train.len() as f64).sqrt().max(1e-9))
        .collect();
    let std_feat = |i: usize| -> Vec<f64> {
        let f = deflate(i);
        (0..d).map(|j| f[j] / sd[j]).collect()
    };

    let mut w = vec![vec![0.0; d + 1]; n_classes];
    for _ in 0..steps {
        let mut grad = vec![vec![0.0; d + 1]; n_classes];
        for &i in &train {
            let x = std_feat(i);
            let logits: Vec<f64> = w
                .iter()
                .map(|wk| {
                    wk[d] + wk[..d].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for k in 0..n_classes {
                let p = exps[k] / z - if labels[i] == k { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[k][j] += p * x[j];
                }
                grad[k][d] += p;
            }
        }
        for k in 0..n_classes {
            for j in 0..=d {
                w[k][j] -= lr * grad[k][j] / train.len() as f64;
            }
        }
    }

    let mut correct = 0usize;
    for &i in &test {
        let x = std_feat(i);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for k in 0..n_classes {
            let l = w[k][d] + w[k][..d].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            if l > best.0 {
                best = (l, k);
            }
        }
        if best.1 == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{draw_mark, sample_medical_scene};
    use rand_chacha::rand_core::SeedableRng;
    use std::collections::BTreeSet;

    #[test]
    fn shapes_match_spec() {
        let enc = Encoder::new(EncoderSpec::general_default()).unwrap();
        let img = Image::filled(64, 64, [120, 10, 70]);
        let f = enc.encode(&img).unwrap();
        assert_eq!((f.rows(), f.dims()), (16, 32));

        let enc = Encoder::new(EncoderSpec::detail_default()).unwrap();
        let f = enc.encode(&img).unwrap();
        assert_eq!((f.rows(), f.dims()), (64, 48));
    }

    #[test]
    fn encoding_is_deterministic() {
        let enc = Encoder::new(EncoderSpec::general_default()).unwrap();
        let img = Image::filled(64, 64, [7, 77, 177]);
        assert_eq!(enc.encode(&img).unwrap(), enc.encode(&img).unwrap());
    }

    #[test]
    fn wrong_image_size_errors() {
        let enc = Encoder::new(EncoderSpec::general_default()).unwrap();
        let img = Image::filled(32, 32, [0, 0, 0]);
        assert!(enc.encode(&img).is_err());
    }

    #[test]
    fn blur_erases_marks_exactly() {
        // Two medical images differing only in mark placement become
        // pixel-identical after the general branch's blur.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc = Encoder::new(EncoderSpec::general_default()).unwrap();
        let mut identical_pairs = 0;
        let total = 50;
        for _ in 0..total {
            let mut scene = sample_medical_scene(&mut rng, 64);
            let img_a = scene.render(64);
            // Move the first mark by a couple of pixels (stays in its zone's
            // jitter envelope, so the uniformity argument still applies).
            scene.marks[0].cx += 2;
            scene.marks[0].cy -= 2;
            let img_b = scene.render(64);
            assert_ne!(img_a, img_b, "moving a mark must change raw pixels");
            let blurred_a = box_blur_u8(&img_a, 9);
            let blurred_b = box_blur_u8(&img_b, 9);
            if blurred_a == blurred_b {
                identical_pairs += 1;
            }
            // The encoded general features agree bit-for-bit too.
            assert_eq!(enc.encode(&img_a).unwrap(), enc.encode(&img_b).unwrap());
        }
        assert!(identical_pairs as f64 / total as f64 >= 0.99);
    }

    #[test]
    fn detail_branch_sees_marks() {
        let enc = Encoder::new(EncoderSpec::detail_default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let scene = sample_medical_scene(&mut rng, 64);
            let img_a = scene.render(64);
            let mut img_b = scene.render(64);
            // Redraw the first mark one pixel to the right.
            let m = scene.marks[0];
            draw_mark(&mut img_b, m.kind, m.cx + 1, m.cy);
            let fa = enc.encode(&img_a).unwrap();
            let fb = enc.encode(&img_b).unwrap();
            let differing_rows = (0..fa.rows())
                .filter(|&r| fa.values().row(r) != fb.values().row(r))
                .count();
            assert!(differing_rows >= 1);
        }
    }

    #[test]
    fn zero_image_encodes_to_position_encoding() {
        let enc = Encoder::new(EncoderSpec::detail_default()).unwrap();
        let img = Image::filled(64, 64, [0, 0, 0]);
        let f = enc.encode(&img).unwrap();
        assert_eq!(f.values(), &sinusoidal_pos(64, 48));
    }

    #[test]
    fn fingerprint_stable_and_seed_sensitive() {
        let spec = EncoderSpec::general_default();
        let a = Encoder::new(spec).unwrap();
        let b = Encoder::new(spec).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());

        let mut seen = BTreeSet::new();
        for seed in 0..100 {
            let enc = Encoder::new(EncoderSpec {
                seed,
                ..EncoderSpec::detail_default()
            })
            .unwrap();
            seen.insert(enc.fingerprint().to_string());
        }
        assert_eq!(seen.len(), 100, "fingerprint collision across seeds");
    }

    #[test]
    fn spec_validation_rejects_bad_combinations() {
        let mut s = EncoderSpec::general_default();
        s.blur_kernel = None;
        assert!(Encoder::new(s).is_err());
        let mut s = EncoderSpec::detail_default();
        s.blur_kernel = Some(9);
        assert!(Encoder::new(s).is_err());
        let mut s = EncoderSpec::general_default();
        s.patch_size = 24;
        assert!(Encoder::new(s).is_err());
    }
}
