//! Biased dataset generation: 100%-biased training corpora with IID, OOD,
//! and systematic-shift test splits, plus debiased teacher inputs.
//!
//! Two procedural families mirror the classic designs: colored glyphs
//! (class ↔ foreground color, 28×28) and shapes over class-correlated
//! background textures (64×64, with foreground masks). Real MNIST can be
//! ingested from IDX files as an alternative foreground source.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{Real, Tensor};

/// Which input feature carries the spurious correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    ForegroundColor,
    BackgroundTexture,
}

/// Bias configuration for a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasSpec {
    pub kind: BiasKind,
    pub class_count: usize,
    /// Fraction of train/val samples whose bias matches their class.
    pub confounder_strength: Real,
    /// Fixed-point-free permutation: class c wears class perm[c]'s training
    /// bias in the shift test set. Defaults to rotation by one.
    pub shift_permutation: Option<Vec<usize>>,
    pub seed: u64,
}

impl BiasSpec {
    pub fn colored_glyphs(seed: u64) -> Self {
        BiasSpec {
            kind: BiasKind::ForegroundColor,
            class_count: 10,
            confounder_strength: 1.0,
            shift_permutation: None,
            seed,
        }
    }

    pub fn background_texture(seed: u64) -> Self {
        BiasSpec {
            kind: BiasKind::BackgroundTexture,
            class_count: 6,
            confounder_strength: 1.0,
            shift_permutation: None,
            seed,
        }
    }

    /// Resolved shift permutation, validated to have no fixed point.
    pub fn shift_perm(&self) -> Result<Vec<usize>> {
        let c = self.class_count;
        let perm = match &self.shift_permutation {
            Some(p) => p.clone(),
            None => (0..c).map(|i| (i + 1) % c).collect(),
        };
        if perm.len() != c {
            return Err(Error::contract("shift permutation length != class count"));
        }
        let mut seen = vec![false; c];
        for (i, &p) in perm.iter().enumerate() {
            if p >= c || seen[p] {
                return Err(Error::contract("shift permutation is not a permutation"));
            }
            if p == i {
                return Err(Error::contract(format!(
                    "shift permutation has a fixed point at class {i}"
                )));
            }
            seen[p] = true;
        }
        Ok(perm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if !(0.0..=1.0).contains(&self.confounder_strength) {
            return Err(Error::config("confounder strength must lie in [0,1]"));
        }
        match self.kind {
            BiasKind::ForegroundColor => {
                if self.class_count > GLYPH_SEGMENTS.len() {
                    return Err(Error::config(format!(
                        "at most {} procedural glyph classes",
                        GLYPH_SEGMENTS.len()
                    )));
                }
            }
            BiasKind::BackgroundTexture => {
                if self.class_count > SHAPE_COUNT {
                    return Err(Error::config(format!(
                        "at most {SHAPE_COUNT} procedural shape classes"
                    )));
                }
            }
        }
        self.shift_perm()?;
        Ok(())
    }
}

/// Samples per class for each split.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl SplitCounts {
    pub fn colored_default() -> Self {
        SplitCounts {
            train_per_class: 500,
            val_per_class: 100,
            test_per_class: 100,
        }
    }

    pub fn background_default() -> Self {
        SplitCounts {
            train_per_class: 400,
            val_per_class: 80,
            test_per_class: 80,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    TestIid,
    TestOod,
    TestShift,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::Val,
        Split::TestIid,
        Split::TestOod,
        Split::TestShift,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestIid => "test-iid",
            Split::TestOod => "test-ood",
            Split::TestShift => "test-shift",
        }
    }
}

/// One fully materialized sample.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    /// Image, [3, H, W], values in [0, 1].
    pub x: Tensor,
    /// Debiased twin (background replaced by uniform noise), if produced.
    pub x_debiased: Option<Tensor>,
    /// Foreground mask [H, W] (1 = foreground), if recorded.
    pub mask: Option<Tensor>,
    pub label: usize,
}

/// Paired biased/debiased samples across five splits.
#[derive(Debug, Clone)]
pub struct BiasedDataset {
    pub class_count: usize,
    pub image_shape: Vec<usize>,
    pub splits: BTreeMap<Split, Vec<SampleRecord>>,
}

impl BiasedDataset {
    pub fn split(&self, s: Split) -> &[SampleRecord] {
        self.splits.get(&s).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

// ---- colored glyphs ---------------------------------------------------------

// seven-segment layout: A top, B upper-right, C lower-right, D bottom,
// E lower-left, F upper-left, G middle
const SEG_ENDPOINTS: [((Real, Real), (Real, Real)); 7] = [
    ((0.22, 0.15), (0.78, 0.15)), // A
    ((0.78, 0.15), (0.78, 0.50)), // B
    ((0.78, 0.50), (0.78, 0.85)), // C
    ((0.22, 0.85), (0.78, 0.85)), // D
    ((0.22, 0.50), (0.22, 0.85)), // E
    ((0.22, 0.15), (0.22, 0.50)), // F
    ((0.22, 0.50), (0.78, 0.50)), // G
];

const GLYPH_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 4, 3, 2, 6],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

const GLYPH_SIZE: usize = 28;

fn dist_to_segment(px: Real, py: Real, a: (Real, Real), b: (Real, Real)) -> Real {
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len_sq = dx * dx + dy * dy;
    let t = (((px - ax) * dx + (py - ay) * dy) / len_sq).clamp(0.0, 1.0);
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Renders one grayscale glyph with strong per-sample jitter: rotation,
/// shear, shift, scale, stroke width, and intensity. The jitter keeps
/// shape recognition a real learning problem, while a color shortcut
/// stays one convolution away. Values in [0, 1].
fn render_glyph(digit: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let shift_x: Real = rng.gen_range(-0.15..0.15);
    let shift_y: Real = rng.gen_range(-0.15..0.15);
    let scale: Real = rng.gen_range(0.6..1.15);
    let angle: Real = rng.gen_range(-0.4..0.4);
    let shear: Real = rng.gen_range(-0.35..0.35);
    let thickness: Real = rng.gen_range(0.03..0.055);
    let intensity: Real = rng.gen_range(0.6..1.0);
    let soften: Real = 0.04;
    let (sin_a, cos_a) = (angle.sin(), angle.cos());
    // handwriting-like intra-class variance: every segment gets its own
    // endpoint jitter and a bowed midpoint, approximated by two strokes
    let strokes: Vec<((Real, Real), (Real, Real))> = GLYPH_SEGMENTS[digit]
        .iter()
        .flat_map(|&seg| {
            let ((ax, ay), (bx, by)) = SEG_ENDPOINTS[seg];
            let a = (ax + rng.gen_range(-0.06..0.06), ay + rng.gen_range(-0.06..0.06));
            let b = (bx + rng.gen_range(-0.06..0.06), by + rng.gen_range(-0.06..0.06));
            let bow: Real = rng.gen_range(-0.11..0.11);
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len = (dx * dx + dy * dy).sqrt().max(1e-6);
            let mid = (
                (a.0 + b.0) / 2.0 - bow * dy / len,
                (a.1 + b.1) / 2.0 + bow * dx / len,
            );
            [(a, mid), (mid, b)]
        })
        .collect();
    let n = GLYPH_SIZE;
    let mut noise_rng = rng.clone();
    Tensor::from_fn(&[n, n], |i| {
        let y = (i / n) as Real / (n - 1) as Real;
        let x = (i % n) as Real / (n - 1) as Real;
        // pixel → glyph frame: undo shift, rotation, shear, scale
        let px = x - 0.5 - shift_x;
        let py = y - 0.5 - shift_y;
        let rx = cos_a * px + sin_a * py;
        let ry = -sin_a * px + cos_a * py;
        let gx = (rx - shear * ry) / scale + 0.5;
        let gy = ry / scale + 0.5;
        let mut best = Real::INFINITY;
        for &(a, b) in &strokes {
            best = best.min(dist_to_segment(gx, gy, a, b));
        }
        let v = intensity * (1.0 - (best - thickness) / soften).clamp(0.0, 1.0);
        // speckle on the strokes distorts shape cues, never the hue
        let speckle: Real = noise_rng.gen_range(-0.35..0.35);
        (v * (1.0 + speckle)).clamp(0.0, 1.0)
    })
}

/// Hue (0..1) to fully saturated RGB.
fn hue_to_rgb(h: Real) -> [Real; 3] {
    let h6 = (h.fract() + 1.0).fract() * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Training palette: evenly spaced hues. The OOD pool sits half a step
/// off the wheel, disjoint from every training assignment.
fn class_hue(c: usize, class_count: usize) -> Real {
    c as Real / class_count as Real
}

fn ood_hue(i: usize, class_count: usize) -> Real {
    (i as Real + 0.5) / class_count as Real
}

fn colorize(gray: &Tensor, rgb: [Real; 3]) -> Tensor {
    let n = gray.numel();
    let hw = gray.shape();
    Tensor::from_fn(&[3, hw[0], hw[1]], |i| gray.data()[i % n] * rgb[i / n])
}

/// Grayscale foreground source for the colored family.
pub enum GlyphSource<'a> {
    Procedural,
    /// Real images (e.g. MNIST), [H, W] in [0, 1], with labels.
    Images(&'a [(Tensor, usize)]),
}

/// Colored-glyph corpus: foreground shapes tinted by a class-correlated
/// color. At confounder strength 0 the colors are random per sample.
pub fn gen_colored_glyphs(spec: &BiasSpec, counts: &SplitCounts) -> Result<BiasedDataset> {
    gen_colored_glyphs_from(spec, counts, &GlyphSource::Procedural)
}

pub fn gen_colored_glyphs_from(
    spec: &BiasSpec,
    counts: &SplitCounts,
    source: &GlyphSource,
) -> Result<BiasedDataset> {
    if spec.kind != BiasKind::ForegroundColor {
        return Err(Error::contract("spec kind must be foreground-color"));
    }
    spec.validate()?;
    let c = spec.class_count;
    let perm = spec.shift_perm()?;

    // pre-bucket real images per class; train/val/test draw disjoint ranges
    let buckets: Option<Vec<Vec<&Tensor>>> = match source {
        GlyphSource::Procedural => None,
        GlyphSource::Images(images) => {
            let mut b: Vec<Vec<&Tensor>> = vec![Vec::new(); spec.class_count];
            for (img, label) in images.iter() {
                if *label < c {
                    b[*label].push(img);
                }
            }
            let need = counts.train_per_class + counts.val_per_class + counts.test_per_class;
            for (cls, v) in b.iter().enumerate() {
                if v.len() < need {
                    return Err(Error::contract(format!(
                        "class {cls}: {} source images, need {need}",
                        v.len()
                    )));
                }
            }
            Some(b)
        }
    };

    let foreground = |cls: usize, tag: &str, idx: usize| -> Tensor {
        match &buckets {
            None => {
                let mut rng = seeds::rng(spec.seed, tag, (cls * 1_000_003 + idx) as u64);
                render_glyph(cls, &mut rng)
            }
            Some(b) => {
                let offset = match tag {
                    "glyph-train" => 0,
                    "glyph-val" => counts.train_per_class,
                    _ => counts.train_per_class + counts.val_per_class,
                };
                b[cls][offset + idx].clone()
            }
        }
    };

    let mut splits = BTreeMap::new();

    // train and val: bias applied at the confounder strength
    for (split, tag, per_class) in [
        (Split::Train, "glyph-train", counts.train_per_class),
        (Split::Val, "glyph-val", counts.val_per_class),
    ] {
        let mut records = Vec::with_capacity(c * per_class);
        for cls in 0..c {
            for i in 0..per_class {
                let gray = foreground(cls, tag, i);
                let mut rng = seeds::rng(
                    spec.seed,
                    "color",
                    (cls * 1_000_003 + i) as u64 + split_salt(split),
                );
                let biased = rng.gen_range(0.0..1.0) < spec.confounder_strength;
                let hue = if biased {
                    class_hue(cls, c)
                } else {
                    rng.gen_range(0.0..1.0)
                };
                records.push(SampleRecord {
                    x: colorize(&gray, hue_to_rgb(hue)),
                    x_debiased: None,
                    mask: None,
                    label: cls,
                });
            }
        }
        splits.insert(split, records);
    }

    // test: identical foregrounds across the three bias variants
    let mut iid = Vec::new();
    let mut ood = Vec::new();
    let mut shift = Vec::new();
    for cls in 0..c {
        for i in 0..counts.test_per_class {
            let gray = foreground(cls, "glyph-test", i);
            let mut rng = seeds::rng(spec.seed, "ood-color", (cls * 1_000_003 + i) as u64);
            let ood_pick = ood_hue(rng.gen_range(0..c), c);
            iid.push(SampleRecord {
                x: colorize(&gray, hue_to_rgb(class_hue(cls, c))),
                x_debiased: None,
                mask: None,
                label: cls,
            });
            ood.push(SampleRecord {
                x: colorize(&gray, hue_to_rgb(ood_pick)),
                x_debiased: None,
                mask: None,
                label: cls,
            });
            shift.push(SampleRecord {
                x: colorize(&gray, hue_to_rgb(class_hue(perm[cls], c))),
                x_debiased: None,
                mask: None,
                label: cls,
            });
        }
    }
    splits.insert(Split::TestIid, iid);
    splits.insert(Split::TestOod, ood);
    splits.insert(Split::TestShift, shift);

    Ok(BiasedDataset {
        class_count: c,
        image_shape: vec![3, GLYPH_SIZE, GLYPH_SIZE],
        splits,
    })
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1 << 40,
        Split::TestIid => 2 << 40,
        Split::TestOod => 3 << 40,
        Split::TestShift => 4 << 40,
    }
}

// ---- background-texture bias ----------------------------------------------

const SHAPE_COUNT: usize = 6;
const TEXTURE_SIZE: usize = 64;

/// "Inside" test for the six foreground shapes, in unit coordinates
/// centered at (cx, cy) with radius r.
fn shape_inside(shape: usize, x: Real, y: Real, cx: Real, cy: Real, r: Real) -> bool {
    let dx = x - cx;
    let dy = y - cy;
    match shape {
        0 => dx * dx + dy * dy <= r * r,                   // disc
        1 => dx.abs() <= r * 0.82 && dy.abs() <= r * 0.82, // square
        2 => {
            // upward triangle
            let yy = dy / r;
            let xx = dx / r;
            yy <= 0.75 && yy >= -0.75 && xx.abs() <= (yy + 0.75) * 0.6
        }
        3 => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r), // plus
        4 => {
            // ring
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
        }
        _ => dx.abs() + dy.abs() <= r, // diamond
    }
}

const TAU: Real = std::f64::consts::TAU as Real;

/// Deterministic plaid-plus-gradient texture per id; per-sample phases
/// keep instances distinct while the look stays id-specific.
fn texture_pixel(id: usize, x: Real, y: Real, phase: (Real, Real)) -> [Real; 3] {
    let fx = 3.0 + 2.0 * (id % 4) as Real;
    let fy = 3.0 + 2.0 * ((id / 4) % 4) as Real;
    let diag = 0.5 + 0.5 * (id % 3) as Real;
    let base = hue_to_rgb(id as Real * 0.618_034);
    let wave = 0.5
        + 0.22 * (fx * x * TAU + phase.0).sin()
        + 0.22 * (fy * y * TAU + phase.1).sin()
        + 0.06 * (diag * (x + y) * TAU).sin();
    [
        (0.25 + 0.6 * base[0]) * wave,
        (0.25 + 0.6 * base[1]) * wave,
        (0.25 + 0.6 * base[2]) * wave,
    ]
}

fn render_textured_sample(
    shape: usize,
    texture_id: usize,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor) {
    let n = TEXTURE_SIZE;
    let phase = (rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU));
    let cx: Real = rng.gen_range(0.35..0.65);
    let cy: Real = rng.gen_range(0.35..0.65);
    let r: Real = rng.gen_range(0.16..0.24);
    let tone: Real = rng.gen_range(0.75..0.95);
    let mut img = Tensor::zeros(&[3, n, n]);
    let mut mask = Tensor::zeros(&[n, n]);
    for yy in 0..n {
        for xx in 0..n {
            let x = xx as Real / (n - 1) as Real;
            let y = yy as Real / (n - 1) as Real;
            let inside = shape_inside(shape, x, y, cx, cy, r);
            let px = if inside {
                mask.data_mut()[yy * n + xx] = 1.0;
                [tone, tone, tone]
            } else {
                let t = texture_pixel(texture_id, x, y, phase);
                [
                    t[0].clamp(0.0, 1.0),
                    t[1].clamp(0.0, 1.0),
                    t[2].clamp(0.0, 1.0),
                ]
            };
            for ch in 0..3 {
                img.data_mut()[(ch * n + yy) * n + xx] = px[ch];
            }
        }
    }
    (img, mask)
}

/// Background-texture corpus: class-correlated textures behind neutral
/// shapes, with foreground masks and debiased (noise-background) twins.
///
/// Texture ids 0..C are the training assignment, ids C..2C the OOD pool.
pub fn gen_background_bias(spec: &BiasSpec, counts: &SplitCounts) -> Result<BiasedDataset> {
    if spec.kind != BiasKind::BackgroundTexture {
        return Err(Error::contract("spec kind must be background-texture"));
    }
    spec.validate()?;
    let c = spec.class_count;
    let perm = spec.shift_perm()?;

    let make =
        |cls: usize, tag: &str, idx: usize, texture: usize, with_debias: bool| -> SampleRecord {
            let mut rng = seeds::rng(spec.seed, tag, (cls * 1_000_003 + idx) as u64);
            let (x, mask) = render_textured_sample(cls, texture, &mut rng);
            let x_debiased = with_debias.then(|| {
                let mut nrng =
                    seeds::rng(spec.seed, "debias-noise", (cls * 1_000_003 + idx) as u64);
                debias_background(&x, &mask, &mut nrng).expect("mask shape")
            });
            SampleRecord {
                x,
                x_debiased,
                mask: Some(mask),
                label: cls,
            }
        };

    let mut splits = BTreeMap::new();
    for (split, tag, per_class) in [
        (Split::Train, "bg-train", counts.train_per_class),
        (Split::Val, "bg-val", counts.val_per_class),
    ] {
        let mut records = Vec::with_capacity(c * per_class);
        for cls in 0..c {
            for i in 0..per_class {
                let mut brng = seeds::rng(
                    spec.seed,
                    "bg-bias",
                    (cls * 1_000_003 + i) as u64 + split_salt(split),
                );
                let biased = brng.gen_range(0.0..1.0) < spec.confounder_strength;
                let texture = if biased { cls } else { brng.gen_range(0..2 * c) };
                records.push(make(cls, tag, i, texture, true));
            }
        }
        splits.insert(split, records);
    }

    let mut iid = Vec::new();
    let mut ood = Vec::new();
    let mut shift = Vec::new();
    for cls in 0..c {
        for i in 0..counts.test_per_class {
            let mut orng = seeds::rng(spec.seed, "bg-ood", (cls * 1_000_003 + i) as u64);
            let ood_texture = c + orng.gen_range(0..c);
            // identical foreground across the three variants: same tag+idx
            iid.push(make(cls, "bg-test", i, cls, true));
            ood.push(make(cls, "bg-test", i, ood_texture, true));
            shift.push(make(cls, "bg-test", i, perm[cls], true));
        }
    }
    splits.insert(Split::TestIid, iid);
    splits.insert(Split::TestOod, ood);
    splits.insert(Split::TestShift, shift);

    Ok(BiasedDataset {
        class_count: c,
        image_shape: vec![3, TEXTURE_SIZE, TEXTURE_SIZE],
        splits,
    })
}

/// Replaces background pixels (mask = 0) with i.i.d. uniform noise on
/// [0, 1]; foreground pixels pass through, so the result stays spatially
/// aligned with the input.
pub fn debias_background(x: &Tensor, mask: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 3 || mask.shape() != [xs[1], xs[2]] {
        return Err(Error::dimension(format!(
            "mask {:?} does not match image {:?}",
            mask.shape(),
            xs
        )));
    }
    let hw = xs[1] * xs[2];
    let mut out = x.clone();
    for p in 0..hw {
        if mask.data()[p] == 0.0 {
            for ch in 0..xs[0] {
                out.data_mut()[ch * hw + p] = rng.gen_range(0.0..1.0);
            }
        }
    }
    Ok(out)
}

// ---- IDX ingestion -----------------------------------------------------------

/// Raw images and labels decoded from the IDX format.
pub struct MnistData {
    /// [H, W] tensors scaled to [0, 1].
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl MnistData {
    pub fn pairs(&self) -> Vec<(Tensor, usize)> {
        self.images
            .iter()
            .cloned()
            .zip(self.labels.iter().copied())
            .collect()
    }
}

fn read_be_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("truncated IDX header"))?;
    Ok(u32::from_be_bytes(b))
}

/// Parses big-endian IDX image (magic 0x00000803) and label (0x00000801)
/// files, as distributed for MNIST.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<MnistData> {
    let mut ir = std::io::BufReader::new(std::fs::File::open(images_path)?);
    let magic = read_be_u32(&mut ir)?;
    if magic != 0x0000_0803 {
        return Err(Error::format(format!(
            "bad IDX image magic {magic:#010x}, want 0x00000803"
        )));
    }
    let count = read_be_u32(&mut ir)? as usize;
    let rows = read_be_u32(&mut ir)? as usize;
    let cols = read_be_u32(&mut ir)? as usize;
    let mut payload = vec![0u8; count * rows * cols];
    ir.read_exact(&mut payload)
        .map_err(|_| Error::format("truncated IDX image payload"))?;

    let mut lr = std::io::BufReader::new(std::fs::File::open(labels_path)?);
    let magic = read_be_u32(&mut lr)?;
    if magic != 0x0000_0801 {
        return Err(Error::format(format!(
            "bad IDX label magic {magic:#010x}, want 0x00000801"
        )));
    }
    let lcount = read_be_u32(&mut lr)? as usize;
    if lcount != count {
        return Err(Error::format(format!(
            "IDX count mismatch: {count} images, {lcount} labels"
        )));
    }
    let mut labels_raw = vec![0u8; lcount];
    lr.read_exact(&mut labels_raw)
        .map_err(|_| Error::format("truncated IDX label payload"))?;

    let images = (0..count)
        .map(|i| {
            Tensor::from_fn(&[rows, cols], |p| payload[i * rows * cols + p] as Real / 255.0)
        })
        .collect();
    Ok(MnistData {
        images,
        labels: labels_raw.iter().map(|&l| l as usize).collect(),
    })
}

// ---- on-disk layout ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    kind: BiasKind,
    class_count: usize,
    image_shape: Vec<usize>,
    splits: BTreeMap<String, usize>,
    has_masks: bool,
    has_debiased: bool,
}

/// Writes `manifest.json` plus per-split XTSR shards:
/// `{split}/images.xtsr`, `{split}/labels.xtsr`, and when present
/// `{split}/masks.xtsr`, `{split}/debiased.xtsr`.
pub fn save_dataset(ds: &BiasedDataset, kind: BiasKind, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let has_masks = ds
        .splits
        .values()
        .flatten()
        .next()
        .map(|r| r.mask.is_some())
        .unwrap_or(false);
    let has_debiased = ds
        .splits
        .values()
        .flatten()
        .next()
        .map(|r| r.x_debiased.is_some())
        .unwrap_or(false);
    let mut split_counts = BTreeMap::new();
    for (&split, records) in &ds.splits {
        let sdir = dir.join(split.dir_name());
        std::fs::create_dir_all(&sdir)?;
        split_counts.insert(split.dir_name().to_string(), records.len());
        stack(records.iter().map(|r| &r.x), &ds.image_shape)?
            .save_xtsr(sdir.join("images.xtsr"))?;
        Tensor::new(
            vec![records.len()],
            records.iter().map(|r| r.label as Real).collect(),
        )?
        .save_xtsr(sdir.join("labels.xtsr"))?;
        if has_masks {
            let mshape = vec![ds.image_shape[1], ds.image_shape[2]];
            stack(
                records.iter().map(|r| r.mask.as_ref().expect("mask")),
                &mshape,
            )?
            .save_xtsr(sdir.join("masks.xtsr"))?;
        }
        if has_debiased {
            stack(
                records
                    .iter()
                    .map(|r| r.x_debiased.as_ref().expect("debiased")),
                &ds.image_shape,
            )?
            .save_xtsr(sdir.join("debiased.xtsr"))?;
        }
    }
    let manifest = DatasetManifest {
        kind,
        class_count: ds.class_count,
        image_shape: ds.image_shape.clone(),
        splits: split_counts,
        has_masks,
        has_debiased,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn stack<'a>(tensors: impl Iterator<Item = &'a Tensor>, item_shape: &[usize]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for t in tensors {
        if t.shape() != item_shape {
            return Err(Error::dimension("inconsistent shard item shape"));
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    let mut shape = vec![n];
    shape.extend_from_slice(item_shape);
    Tensor::new(shape, data)
}

fn unstack(t: &Tensor) -> Vec<Tensor> {
    let n = t.shape()[0];
    let item_shape = t.shape()[1..].to_vec();
    let item_len: usize = item_shape.iter().product();
    (0..n)
        .map(|i| {
            Tensor::new(
                item_shape.clone(),
                t.data()[i * item_len..(i + 1) * item_len].to_vec(),
            )
            .expect("unstack shape")
        })
        .collect()
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<BiasedDataset> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let sdir = dir.join(split.dir_name());
        if !manifest.splits.contains_key(split.dir_name()) {
            continue;
        }
        let images = unstack(&Tensor::load_xtsr(sdir.join("images.xtsr"))?);
        let labels_t = Tensor::load_xtsr(sdir.join("labels.xtsr"))?;
        if labels_t.numel() != images.len() {
            return Err(Error::format("image/label count mismatch"));
        }
        let masks = if manifest.has_masks {
            Some(unstack(&Tensor::load_xtsr(sdir.join("masks.xtsr"))?))
        } else {
            None
        };
        let debiased = if manifest.has_debiased {
            Some(unstack(&Tensor::load_xtsr(sdir.join("debiased.xtsr"))?))
        } else {
            None
        };
        let records = images
            .into_iter()
            .enumerate()
            .map(|(i, x)| SampleRecord {
                x,
                x_debiased: debiased.as_ref().map(|d| d[i].clone()),
                mask: masks.as_ref().map(|m| m[i].clone()),
                label: labels_t.data()[i] as usize,
            })
            .collect();
        splits.insert(split, records);
    }
    Ok(BiasedDataset {
        class_count: manifest.class_count,
        image_shape: manifest.image_shape,
        splits,
    })
}
