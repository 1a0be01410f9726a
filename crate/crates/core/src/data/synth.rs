//! Synthetic coarse-vs-fine caption corpus.
//!
//! General samples are large colored shapes with captions naming them.
//! Medical-style samples add 1-2 small low-contrast marks whose identity and
//! region are the caption content. Marks are exactly five pixels at +8 over a
//! locally uniform background, which an integer box blur with kernel 9 erases
//! exactly: the blurred mean shifts by at most 5*8 = 40 < 81/2, so rounding
//! returns the background value for every window. The detail branch sees the
//! raw pixels, so mark information survives only on that path.

use std::fs;
use std::path::Path;

use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{write_manifest, CaptionSample, Domain, Split};
use crate::ppm::Image;
use crate::{Error, Result};

pub const MARK_NAMES: [&str; 4] = ["cross", "saltire", "tee", "hook"];
pub const REGION_NAMES: [&str; 5] = [
    "upper left",
    "upper right",
    "lower left",
    "lower right",
    "center",
];

const SHAPE_NAMES: [&str; 3] = ["circle", "square", "triangle"];
const COLOR_NAMES: [&str; 4] = ["red", "green", "blue", "yellow"];
const COLORS: [[u8; 3]; 4] = [
    [200, 40, 40],
    [40, 170, 60],
    [50, 70, 200],
    [220, 200, 40],
];

/// Five-pixel stencils inside a 3x3 box.
const MARK_STENCILS: [[(i32, i32); 5]; 4] = [
    // cross
    [(1, 0), (0, 1), (1, 1), (2, 1), (1, 2)],
    // saltire
    [(0, 0), (2, 0), (1, 1), (0, 2), (2, 2)],
    // tee
    [(0, 0), (1, 0), (2, 0), (1, 1), (1, 2)],
    // hook
    [(0, 0), (0, 1), (0, 2), (1, 2), (2, 2)],
];

/// Per-kind channel tint. Each lit channel shifts by `MARK_DELTA` over the
/// five stencil pixels, so any single blur window moves by at most
/// 5 * 8 = 40 < ceil(81/2) per channel and the rounded box blur erases the
/// mark exactly regardless of kind or placement.
const MARK_CHANNELS: [[bool; 3]; 4] = [
    [true, false, false],
    [false, true, false],
    [false, false, true],
    [true, true, false],
];

const MARK_DELTA: u8 = 8;
/// Pixels inside `center +/- ZONE` must be uniform for the blur-erasure
/// argument to hold (3x3 mark + 8px blur reach for kernel 9).
const ZONE: i32 = 9;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub general_train: usize,
    pub general_test: usize,
    pub medical_train: usize,
    pub medical_test: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 64,
            general_train: 200,
            general_test: 50,
            medical_train: 200,
            medical_test: 50,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ShapeSpec {
    pub kind: usize,
    pub color: usize,
    pub cx: i32,
    pub cy: i32,
    pub r: i32,
}

#[derive(Debug, Clone, Copy)]
pub struct MarkSpec {
    pub kind: usize,
    pub region: usize,
    pub cx: i32,
    pub cy: i32,
}

/// Full description of one medical-style image; rendering is a pure function
/// of this and the image size.
#[derive(Debug, Clone)]
pub struct MedicalScene {
    pub background: u8,
    pub shapes: Vec<ShapeSpec>,
    pub marks: Vec<MarkSpec>,
}

impl MedicalScene {
    pub fn render(&self, size: usize) -> Image {
        let mut img = Image::filled(size, size, [self.background; 3]);
        for s in &self.shapes {
            draw_shape(&mut img, s);
        }
        for m in &self.marks {
            draw_mark(&mut img, m.kind, m.cx, m.cy);
        }
        img
    }

    pub fn caption(&self) -> String {
        let mut marks = self.marks.clone();
        marks.sort_by_key(|m| m.region);
        marks
            .iter()
            .map(|m| {
                format!(
                    "tiny {} mark in the {} region",
                    MARK_NAMES[m.kind], REGION_NAMES[m.region]
                )
            })
            .collect::<Vec<_>>()
            .join(" and ")
    }
}

/// Marks sit on an 8-pixel grid (center = 4 mod 8), so a mark occupies the
/// same within-patch pixel indices wherever it lands. Region jitter moves in
/// whole grid steps.
const MARK_GRID: i32 = 8;

fn snap_to_grid(v: i32) -> i32 {
    (v / MARK_GRID) * MARK_GRID + MARK_GRID / 2
}

fn region_center(region: usize, size: usize) -> (i32, i32) {
    let scale = size as i32;
    let base = |x: i32, y: i32| (snap_to_grid(x * scale / 64), snap_to_grid(y * scale / 64));
    match region {
        0 => base(12, 12),
        1 => base(44, 12),
        2 => base(12, 44),
        3 => base(44, 44),
        _ => base(28, 28),
    }
}

fn grid_jitter(rng: &mut ChaCha8Rng) -> i32 {
    rng.random_range(0..=1) * MARK_GRID
}

fn draw_shape(img: &mut Image, s: &ShapeSpec) {
    let color = COLORS[s.color];
    let size = img.width as i32;
    for dy in -s.r..=s.r {
        for dx in -s.r..=s.r {
            let (x, y) = (s.cx + dx, s.cy + dy);
            if x < 0 || y < 0 || x >= size || y >= size {
                continue;
            }
            let inside = match s.kind {
                0 => dx * dx + dy * dy <= s.r * s.r,
                1 => dx.abs() <= s.r * 4 / 5 && dy.abs() <= s.r * 4 / 5,
                _ => {
                    // Upward triangle: width grows linearly from apex.
                    let row = dy + s.r; // 0 at apex, 2r at base
                    dx.abs() * 2 <= row
                }
            };
            if inside {
                img.set(x as usize, y as usize, color);
            }
        }
    }
}

/// Adds the five stencil pixels at `+MARK_DELTA` on the kind's tint
/// channels over whatever is underneath.
pub fn draw_mark(img: &mut Image, kind: usize, cx: i32, cy: i32) {
    let channels = MARK_CHANNELS[kind];
    for &(sx, sy) in &MARK_STENCILS[kind] {
        let (x, y) = ((cx - 1 + sx) as usize, (cy - 1 + sy) as usize);
        let mut px = img.get(x, y);
        for (c, &lit) in channels.iter().enumerate() {
            if lit {
                px[c] = px[c].saturating_add(MARK_DELTA);
            }
        }
        img.set(x, y, px);
    }
}

fn sample_marks(rng: &mut ChaCha8Rng, size: usize) -> Vec<MarkSpec> {
    let n = rng.random_range(1..=2usize);
    let regions: Vec<usize> = if n == 1 {
        vec![rng.random_range(0..REGION_NAMES.len())]
    } else {
        // Two marks go to distinct corner regions so their uniformity zones
        // cannot overlap even after jitter.
        let a = rng.random_range(0..4usize);
        let mut b = rng.random_range(0..3usize);
        if b >= a {
            b += 1;
        }
        vec![a, b]
    };
    regions
        .into_iter()
        .map(|region| {
            let (cx0, cy0) = region_center(region, size);
            let cx = cx0 + grid_jitter(rng);
            let cy = cy0 + grid_jitter(rng);
            MarkSpec {
                kind: rng.random_range(0..MARK_NAMES.len()),
                region,
                cx,
                cy,
            }
        })
        .collect()
}

fn shape_clears_marks(s: &ShapeSpec, marks: &[MarkSpec]) -> bool {
    // Margin of 3 keeps the zone intact even when a mark is nudged a couple
    // of pixels, which the placement-invariance checks rely on.
    marks.iter().all(|m| {
        let d = (s.cx - m.cx).abs().max((s.cy - m.cy).abs());
        d > s.r + ZONE + 3
    })
}

fn sample_shape(rng: &mut ChaCha8Rng, size: usize, r: i32) -> ShapeSpec {
    let lo = r + 2;
    let hi = size as i32 - r - 3;
    ShapeSpec {
        kind: rng.random_range(0..SHAPE_NAMES.len()),
        color: rng.random_range(0..COLOR_NAMES.len()),
        cx: rng.random_range(lo..=hi),
        cy: rng.random_range(lo..=hi),
        r,
    }
}

pub fn sample_medical_scene(rng: &mut ChaCha8Rng, size: usize) -> MedicalScene {
    let background = 197 + rng.random_range(0..=6) as u8;
    let marks = sample_marks(rng, size);
    let mut shapes = Vec::new();
    let n_shapes = rng.random_range(1..=2usize);
    for _ in 0..n_shapes {
        let mut r = rng.random_range(8..=12);
        'placed: while r >= 6 {
            for _ in 0..40 {
                let s = sample_shape(rng, size, r);
                if shape_clears_marks(&s, &marks) {
                    shapes.push(s);
                    break 'placed;
                }
            }
            r -= 1;
        }
    }
    MedicalScene {
        background,
        shapes,
        marks,
    }
}

fn sample_general_scene(rng: &mut ChaCha8Rng, size: usize) -> (Image, String) {
    let background = 197 + rng.random_range(0..=6) as u8;
    let mut img = Image::filled(size, size, [background; 3]);
    let n = rng.random_range(1..=3usize);
    let mut shapes = Vec::new();
    for _ in 0..n {
        let r = rng.random_range(8..=12);
        shapes.push(sample_shape(rng, size, r));
    }
    for s in &shapes {
        draw_shape(&mut img, s);
    }
    shapes.sort_by_key(|s| (s.cx, s.cy));
    let caption = shapes
        .iter()
        .map(|s| format!("a {} {}", COLOR_NAMES[s.color], SHAPE_NAMES[s.kind]))
        .collect::<Vec<_>>()
        .join(" and ");
    (img, caption)
}

/// Writes PPM images plus `general.jsonl` / `medical.jsonl` under `out_dir`.
/// Deterministic in `(cfg, seed)`.
pub fn generate_synthetic_corpus(
    cfg: &GeneratorConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<(Vec<CaptionSample>, Vec<CaptionSample>)> {
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut general = Vec::new();
    let mut medical = Vec::new();
    let plan = [
        (Domain::General, Split::Train, cfg.general_train),
        (Domain::General, Split::Test, cfg.general_test),
        (Domain::Medical, Split::Train, cfg.medical_train),
        (Domain::Medical, Split::Test, cfg.medical_test),
    ];
    for (domain, split, count) in plan {
        for idx in 0..count {
            let name = format!("{}_{}_{idx:04}.ppm", domain.as_str(), split.as_str());
            let (img, caption) = match domain {
                Domain::General => sample_general_scene(&mut rng, cfg.image_size),
                Domain::Medical => {
                    let scene = sample_medical_scene(&mut rng, cfg.image_size);
                    (scene.render(cfg.image_size), scene.caption())
                }
            };
            img.write_ppm(&images_dir.join(&name))?;
            let sample = CaptionSample {
                image_ref: format!("images/{name}"),
                caption,
                domain,
                split,
            };
            match domain {
                Domain::General => general.push(sample),
                Domain::Medical => medical.push(sample),
            }
        }
    }
    write_manifest(&out_dir.join("general.jsonl"), &general)?;
    write_manifest(&out_dir.join("medical.jsonl"), &medical)?;
    Ok((general, medical))
}

/// One probe image: a single mark on plain background, labeled by mark kind.
pub struct ProbeSample {
    pub image: Image,
    pub mark_kind: usize,
}

/// Mark-identity probe set: `n_per_class` single-mark images per mark kind,
/// cycling regions, with background jitter. No shapes, so the label is the
/// only systematic pixel difference.
pub fn generate_probe_set(n_per_class: usize, seed: u64, size: usize) -> Vec<ProbeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in 0..MARK_NAMES.len() {
        for i in 0..n_per_class {
            let background = 197 + rng.random_range(0..=6) as u8;
            let region = i % REGION_NAMES.len();
            let (cx0, cy0) = region_center(region, size);
            let cx = cx0 + grid_jitter(&mut rng);
            let cy = cy0 + grid_jitter(&mut rng);
            let mut image = Image::filled(size, size, [background; 3]);
            draw_mark(&mut image, kind, cx, cy);
            out.push(ProbeSample {
                image,
                mark_kind: kind,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;
    use sha2::{Digest, Sha256};

    fn dir_digest(dir: &Path) -> Vec<u8> {
        let mut paths: Vec<_> = walk(dir);
        paths.sort();
        let mut h = Sha256::new();
        for p in paths {
            h.update(p.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
            h.update(fs::read(&p).unwrap());
        }
        h.finalize().to_vec()
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = GeneratorConfig {
            general_train: 4,
            general_test: 0,
            medical_train: 4,
            medical_test: 0,
            ..GeneratorConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&cfg, 7, d1.path()).unwrap();
        generate_synthetic_corpus(&cfg, 7, d2.path()).unwrap();
        assert_eq!(dir_digest(d1.path()), dir_digest(d2.path()));
        let d3 = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&cfg, 8, d3.path()).unwrap();
        assert_ne!(dir_digest(d1.path()), dir_digest(d3.path()));
    }

    #[test]
    fn medical_captions_mention_a_mark_token() {
        let cfg = GeneratorConfig {
            general_train: 0,
            general_test: 0,
            medical_train: 30,
            medical_test: 0,
            ..GeneratorConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (_, medical) = generate_synthetic_corpus(&cfg, 3, dir.path()).unwrap();
        for s in &medical {
            assert!(
                MARK_NAMES.iter().any(|m| s.caption.contains(m)),
                "caption missing mark token: {}",
                s.caption
            );
            assert!(s.caption.contains("region"));
        }
    }

    #[test]
    fn counts_and_manifest_lines_match() {
        let cfg = GeneratorConfig {
            general_train: 80,
            general_test: 20,
            medical_train: 80,
            medical_test: 20,
            ..GeneratorConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&cfg, 5, dir.path()).unwrap();
        let ppms = walk(&dir.path().join("images"));
        assert_eq!(ppms.len(), 200);
        let g = load_manifest(&dir.path().join("general.jsonl")).unwrap();
        let m = load_manifest(&dir.path().join("medical.jsonl")).unwrap();
        assert_eq!(g.samples.len(), 100);
        assert_eq!(m.samples.len(), 100);
    }

    #[test]
    fn shapes_keep_out_of_mark_zones() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let scene = sample_medical_scene(&mut rng, 64);
            let img = scene.render(64);
            for m in &scene.marks {
                // Everything in the zone is background except the stencil.
                let stencil: Vec<(i32, i32)> = MARK_STENCILS[m.kind]
                    .iter()
                    .map(|&(sx, sy)| (m.cx - 1 + sx, m.cy - 1 + sy))
                    .collect();
                for dy in -ZONE..=ZONE {
                    for dx in -ZONE..=ZONE {
                        let (x, y) = (m.cx + dx, m.cy + dy);
                        let px = img.get(x as usize, y as usize);
                        let expected = if stencil.contains(&(x, y)) {
                            let mut p = [scene.background; 3];
                            for (c, &lit) in MARK_CHANNELS[m.kind].iter().enumerate() {
                                if lit {
                                    p[c] += MARK_DELTA;
                                }
                            }
                            p
                        } else {
                            [scene.background; 3]
                        };
                        assert_eq!(px, expected, "zone violated at ({x},{y})");
                    }
                }
            }
        }
    }
}
