//! Samples, the line-based manifest, PGM I/O, augmentation, cropping,
//! subject-disjoint folds and the synthetic face-factor generator.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, GrayImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: u32 = 60;
pub const CROP_SIZE: u32 = 48;
pub const MAX_CROP_OFFSET: u32 = IMAGE_SIZE - CROP_SIZE;
pub const ROTATION_ANGLES: [i32; 6] = [-15, -10, -5, 5, 10, 15];
pub const AUGMENT_FACTOR: usize = 2 + 2 * ROTATION_ANGLES.len();
pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Flip,
    Rotation(i32),
    FlipRotation(i32),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Original => f.write_str("original"),
            Provenance::Flip => f.write_str("flip"),
            Provenance::Rotation(a) => write!(f, "rotation({a})"),
            Provenance::FlipRotation(a) => write!(f, "flip+rotation({a})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub expression: usize,
    pub identity: usize,
    pub subject: usize,
    pub provenance: Provenance,
}

impl Sample {
    pub fn new(image: GrayImage, expression: usize, identity: usize, subject: usize) -> Result<Self> {
        check_dims(&image)?;
        Ok(Self { image, expression, identity, subject, provenance: Provenance::Original })
    }

    fn derived(&self, image: GrayImage, provenance: Provenance) -> Self {
        Self { image, provenance, ..*self }
    }

    pub fn labels(&self) -> (usize, usize, usize) {
        (self.expression, self.identity, self.subject)
    }
}

fn check_dims(image: &GrayImage) -> Result<()> {
    if image.dimensions() != (IMAGE_SIZE, IMAGE_SIZE) {
        let (w, h) = image.dimensions();
        return Err(Error::InvalidArgument(format!("expected a 60x60 image, got {w}x{h}")));
    }
    Ok(())
}

/// Number of classes implied by the largest expression and identity labels.
pub fn class_counts(samples: &[Sample]) -> (usize, usize) {
    let e = samples.iter().map(|s| s.expression + 1).max().unwrap_or(0);
    let i = samples.iter().map(|s| s.identity + 1).max().unwrap_or(0);
    (e, i)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let image_err = |msg: String| Error::Image { path: path.to_path_buf(), msg };
    let file = fs::File::open(path)?;
    let decoder = PnmDecoder::new(BufReader::new(file)).map_err(|e| image_err(e.to_string()))?;
    match decoder.subtype() {
        PnmSubtype::Graymap(SampleEncoding::Binary) => {}
        other => return Err(image_err(format!("expected binary PGM (P5), found {other:?}"))),
    }
    match DynamicImage::from_decoder(decoder).map_err(|e| image_err(e.to_string()))? {
        DynamicImage::ImageLuma8(img) => Ok(img),
        other => Err(image_err(format!("expected 8-bit grayscale, found {:?}", other.color()))),
    }
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .encode(image.as_raw().as_slice(), image.width(), image.height(), ExtendedColorType::L8)
        .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?;
    out.flush()?;
    Ok(())
}

/// Reads `<relpath>\t<expression>\t<identity>\t<subject>` lines; paths are
/// relative to the manifest's directory and `#` lines are comments.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |msg: String| Error::Manifest { path: path.to_path_buf(), line: line_no, msg };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let num = |i: usize, what: &str| -> Result<usize> {
            fields[i].trim().parse().map_err(|_| err(format!("invalid {what} {:?}", fields[i])))
        };
        let (expression, identity, subject) = (num(1, "expression label")?, num(2, "identity label")?, num(3, "subject id")?);
        let image = read_pgm(&base.join(fields[0])).map_err(|e| err(e.to_string()))?;
        let sample = Sample::new(image, expression, identity, subject).map_err(|e| err(e.to_string()))?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes one PGM per sample plus `manifest.tsv` into `dir`; returns the
/// manifest path.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut out = BufWriter::new(fs::File::create(&manifest)?);
    writeln!(out, "# path\texpression\tidentity\tsubject")?;
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:06}.pgm");
        write_pgm(&dir.join(&rel), &s.image)?;
        writeln!(out, "{rel}\t{}\t{}\t{}", s.expression, s.identity, s.subject)?;
    }
    out.flush()?;
    Ok(manifest)
}

pub fn flip_horizontal(image: &GrayImage) -> GrayImage {
    image::imageops::flip_horizontal(image)
}

fn sample_clamped(image: &GrayImage, x: f64, y: f64) -> f64 {
    let (w, h) = image.dimensions();
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as u32;
    let y0 = yc.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let p = |x, y| image.get_pixel(x, y).0[0] as f64;
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotates about the image center by `angle_deg` (positive turns the content
/// counter-clockwise as displayed). Bilinear sampling; coordinates outside
/// the source take the nearest edge pixel.
pub fn rotate_image(image: &GrayImage, angle_deg: f64) -> GrayImage {
    let (w, h) = image.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    GrayImage::from_fn(w, h, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        // inverse map with y pointing down
        let sx = cos * dx - sin * dy + cx;
        let sy = sin * dx + cos * dy + cy;
        image::Luma([sample_clamped(image, sx, sy).round().clamp(0.0, 255.0) as u8])
    })
}

/// Each input becomes 14 samples: original, flip, the six rotations and the
/// six rotations of the flipped image, in that order.
pub fn augment(samples: &[Sample]) -> Vec<Sample> {
    let mut out = Vec::with_capacity(samples.len() * AUGMENT_FACTOR);
    for s in samples {
        let flipped = flip_horizontal(&s.image);
        out.push(s.derived(s.image.clone(), Provenance::Original));
        out.push(s.derived(flipped.clone(), Provenance::Flip));
        for a in ROTATION_ANGLES {
            out.push(s.derived(rotate_image(&s.image, a as f64), Provenance::Rotation(a)));
        }
        for a in ROTATION_ANGLES {
            out.push(s.derived(rotate_image(&flipped, a as f64), Provenance::FlipRotation(a)));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    Train,
    Eval,
}

/// Top-left corner `(x, y)` of the 48×48 window.
pub fn crop_offset<R: Rng + ?Sized>(mode: CropMode, rng: &mut R) -> (u32, u32) {
    match mode {
        CropMode::Train => (rng.random_range(0..=MAX_CROP_OFFSET), rng.random_range(0..=MAX_CROP_OFFSET)),
        CropMode::Eval => (MAX_CROP_OFFSET / 2, MAX_CROP_OFFSET / 2),
    }
}

pub fn crop<R: Rng + ?Sized>(image: &GrayImage, mode: CropMode, rng: &mut R) -> GrayImage {
    let (x, y) = crop_offset(mode, rng);
    crop_at(image, x, y)
}

pub fn crop_at(image: &GrayImage, x: u32, y: u32) -> GrayImage {
    image::imageops::crop_imm(image, x, y, CROP_SIZE, CROP_SIZE).to_image()
}

/// Stacks equally sized images into a `(B, H, W, 1)` tensor scaled to [0, 1].
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a GrayImage>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut count = 0;
    for img in images {
        match dims {
            None => dims = Some(img.dimensions()),
            Some(d) if d != img.dimensions() => {
                return Err(Error::InvalidArgument(format!("mixed image sizes {d:?} and {:?}", img.dimensions())))
            }
            _ => {}
        }
        data.extend(img.as_raw().iter().map(|&v| v as f32 / 255.0));
        count += 1;
    }
    let (w, h) = dims.ok_or_else(|| Error::InvalidArgument("no images to stack".into()))?;
    Tensor::new(&[count, h as usize, w as usize, 1], data)
}

/// Assignment of every subject to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<usize, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, subject: usize) -> Option<usize> {
        self.assignments.get(&subject).copied()
    }

    pub fn subjects_in(&self, fold: usize) -> Vec<usize> {
        self.assignments.iter().filter(|&(_, &f)| f == fold).map(|(&s, _)| s).collect()
    }

    /// Indices of `samples` outside and inside `fold`.
    pub fn split(&self, samples: &[Sample], fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let f = self
                .fold_of(s.subject)
                .ok_or_else(|| Error::InvalidArgument(format!("subject {} has no fold", s.subject)))?;
            if f == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((train, test))
    }
}

/// Shuffles the distinct subjects with `seed` and deals them round-robin.
pub fn make_folds(samples: &[Sample], k: usize, seed: u64) -> Result<FoldSplit> {
    let mut subjects: Vec<usize> = samples.iter().map(|s| s.subject).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if k == 0 || subjects.len() < k {
        return Err(Error::InvalidArgument(format!("{} subjects cannot fill {k} folds", subjects.len())));
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = subjects.into_iter().enumerate().map(|(i, s)| (s, i % k)).collect();
    Ok(FoldSplit { k, assignments })
}

/// Controlled face-factor dataset parameters.
///
/// `signature_seed` fixes identity textures, facial geometry and each
/// identity's rendition of every expression; `seed` fixes the pixel noise.
/// Two specs that share `signature_seed` describe the same people.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub num_expressions: usize,
    pub samples_per_cell: usize,
    /// How far an identity's rendition of an expression departs from the
    /// shared prototype, in [0, 1].
    pub variation_strength: f64,
    pub noise_sigma: f64,
    /// Recording sessions per identity; subject id = identity·sessions + session.
    pub sessions: usize,
    pub signature_seed: u64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_identities: 8,
            num_expressions: 6,
            samples_per_cell: 40,
            variation_strength: 0.6,
            noise_sigma: 24.0,
            sessions: 5,
            signature_seed: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.num_expressions == 0 || self.samples_per_cell == 0 || self.sessions == 0 {
            return Err(Error::Config("synthetic dataset sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.variation_strength) {
            return Err(Error::Config(format!("variation_strength must lie in [0, 1], got {}", self.variation_strength)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_identities * self.num_expressions * self.samples_per_cell
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-identity texture seeds.
    pub fn identity_signatures(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.signature_seed);
        (0..self.num_identities).map(|_| rng.random()).collect()
    }
}

/// Facial action parameters rendered onto a face.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Action {
    brow_tilt: f64,
    brow_raise: f64,
    eye_open: f64,
    mouth_curve: f64,
    mouth_open: f64,
    mouth_width: f64,
    wrinkle: f64,
}

impl Action {
    const PROTOTYPES: [Action; 6] = [
        Action { brow_tilt: 0.35, brow_raise: -2.0, eye_open: 0.8, mouth_curve: -0.02, mouth_open: 0.0, mouth_width: 7.0, wrinkle: 0.0 },
        Action { brow_tilt: 0.15, brow_raise: -1.0, eye_open: 0.7, mouth_curve: -0.04, mouth_open: 1.0, mouth_width: 6.0, wrinkle: 1.0 },
        Action { brow_tilt: -0.25, brow_raise: 2.0, eye_open: 1.4, mouth_curve: -0.01, mouth_open: 2.0, mouth_width: 8.0, wrinkle: 0.0 },
        Action { brow_tilt: 0.0, brow_raise: 0.0, eye_open: 0.9, mouth_curve: 0.06, mouth_open: 1.0, mouth_width: 10.0, wrinkle: 0.0 },
        Action { brow_tilt: -0.35, brow_raise: 0.0, eye_open: 0.8, mouth_curve: -0.05, mouth_open: 0.0, mouth_width: 7.0, wrinkle: 0.0 },
        Action { brow_tilt: 0.0, brow_raise: 3.0, eye_open: 1.6, mouth_curve: 0.0, mouth_open: 4.0, mouth_width: 6.0, wrinkle: 0.0 },
    ];

    /// Spread of each parameter across the prototypes.
    const SCALE: Action = Action {
        brow_tilt: 0.35,
        brow_raise: 2.5,
        eye_open: 0.5,
        mouth_curve: 0.06,
        mouth_open: 2.5,
        mouth_width: 3.0,
        wrinkle: 1.0,
    };

    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let s = Self::SCALE;
        Action {
            brow_tilt: rng.random_range(-s.brow_tilt..=s.brow_tilt),
            brow_raise: rng.random_range(-s.brow_raise..=s.brow_raise),
            eye_open: 1.0 + rng.random_range(-s.eye_open..=s.eye_open),
            mouth_curve: rng.random_range(-s.mouth_curve..=s.mouth_curve),
            mouth_open: rng.random_range(0.0..=s.mouth_open),
            mouth_width: 8.0 + rng.random_range(-s.mouth_width..=s.mouth_width),
            wrinkle: rng.random_range(0.0..=s.wrinkle),
        }
    }

    /// Prototype shifted by `strength` times a uniform draw in ±SCALE.
    fn varied<R: Rng + ?Sized>(self, strength: f64, rng: &mut R) -> Self {
        let s = Self::SCALE;
        let mut d = |scale: f64| strength * scale * rng.random_range(-1.0..=1.0);
        Action {
            brow_tilt: self.brow_tilt + d(s.brow_tilt),
            brow_raise: self.brow_raise + d(s.brow_raise),
            eye_open: (self.eye_open + d(s.eye_open)).max(0.2),
            mouth_curve: self.mouth_curve + d(s.mouth_curve),
            mouth_open: (self.mouth_open + d(s.mouth_open)).max(0.0),
            mouth_width: (self.mouth_width + d(s.mouth_width)).max(3.0),
            wrinkle: (self.wrinkle + d(s.wrinkle)).max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f64,
}

/// Identity appearance: smooth base texture plus facial geometry.
#[derive(Debug, Clone)]
struct Face {
    texture: Vec<f64>,
    eye_gap: f64,
    feature_shift: f64,
    ink: f64,
}

impl Face {
    fn new(signature: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(signature);
        let n = IMAGE_SIZE as usize;
        let brightness = 128.0 + rng.random_range(-20.0..=20.0);
        let blobs: Vec<Blob> = (0..6)
            .map(|_| Blob {
                x: rng.random_range(0.0..n as f64),
                y: rng.random_range(0.0..n as f64),
                sigma: rng.random_range(6.0..15.0),
                amp: rng.random_range(-40.0..=40.0),
            })
            .collect();
        let (fx, fy, phase, wave) = (
            rng.random_range(0.05..0.25),
            rng.random_range(0.05..0.25),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(5.0..15.0),
        );
        let mut texture = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let (xf, yf) = (x as f64, y as f64);
                let mut v = brightness + wave * (fx * xf + fy * yf + phase).sin();
                for b in &blobs {
                    let r2 = (xf - b.x).powi(2) + (yf - b.y).powi(2);
                    v += b.amp * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                texture.push(v);
            }
        }
        Self {
            texture,
            eye_gap: 20.0 + rng.random_range(-2.0..=2.0),
            feature_shift: rng.random_range(-2.0..=2.0),
            ink: rng.random_range(0.8..1.2),
        }
    }

    fn render(&self, a: &Action) -> Vec<f64> {
        let n = IMAGE_SIZE as usize;
        let mut img = self.texture.clone();
        let cx = (n as f64 - 1.0) / 2.0;
        let dy = self.feature_shift;
        let half_gap = self.eye_gap / 2.0;
        let mut strokes: Vec<Stroke> = Vec::new();
        for side in [-1.0, 1.0] {
            // brows tilt mirror-symmetrically; positive tilt lowers the inner ends
            strokes.push(Stroke {
                x: cx + side * half_gap,
                y: 16.0 + dy - a.brow_raise,
                angle: side * a.brow_tilt,
                half_len: 5.0,
                width: 1.2,
                bend: 0.0,
                amp: -70.0,
            });
            strokes.push(Stroke {
                x: cx + side * half_gap,
                y: 24.0 + dy,
                angle: 0.0,
                half_len: 2.5,
                width: 1.0 * a.eye_open,
                bend: 0.0,
                amp: -60.0,
            });
            if a.wrinkle > 0.0 {
                strokes.push(Stroke {
                    x: cx + side * 3.0,
                    y: 32.0 + dy,
                    angle: std::f64::consts::FRAC_PI_2,
                    half_len: 2.5,
                    width: 0.8,
                    bend: 0.0,
                    amp: -40.0 * a.wrinkle,
                });
            }
        }
        strokes.push(Stroke {
            x: cx,
            y: 43.0 + dy,
            angle: 0.0,
            half_len: a.mouth_width,
            width: 1.2,
            bend: a.mouth_curve,
            amp: -70.0,
        });
        if a.mouth_open > 0.0 {
            strokes.push(Stroke {
                x: cx,
                y: 43.0 + dy + a.mouth_open / 2.0,
                angle: 0.0,
                half_len: 0.6 * a.mouth_width,
                width: 0.5 * a.mouth_open,
                bend: a.mouth_curve,
                amp: -50.0,
            });
        }
        for y in 0..n {
            for x in 0..n {
                let v: f64 = strokes.iter().map(|s| s.at(x as f64, y as f64)).sum();
                img[y * n + x] += self.ink * v;
            }
        }
        img
    }
}

#[derive(Debug, Clone, Copy)]
struct Stroke {
    x: f64,
    y: f64,
    angle: f64,
    half_len: f64,
    width: f64,
    /// Parabolic bend; positive curves the ends upward.
    bend: f64,
    amp: f64,
}

impl Stroke {
    fn at(&self, px: f64, py: f64) -> f64 {
        let (sin, cos) = self.angle.sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        let t = cos * dx + sin * dy;
        let n = -sin * dx + cos * dy + self.bend * t * t;
        let overhang = (t.abs() - self.half_len).max(0.0);
        let w2 = 2.0 * self.width * self.width;
        self.amp * (-(n * n) / w2).exp() * (-(overhang * overhang) / w2).exp()
    }
}

/// Renders `num_identities · num_expressions · samples_per_cell` samples,
/// ordered by identity, then expression, then repetition.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let faces: Vec<Face> = spec.identity_signatures().into_iter().map(Face::new).collect();
    let mut pattern_rng = ChaCha8Rng::seed_from_u64(spec.signature_seed ^ 0x9e37_79b9_7f4a_7c15);
    let prototypes: Vec<Action> = (0..spec.num_expressions)
        .map(|e| Action::PROTOTYPES.get(e).copied().unwrap_or_else(|| Action::random(&mut pattern_rng)))
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.len());
    for (id, face) in faces.iter().enumerate() {
        for (expr, proto) in prototypes.iter().enumerate() {
            let action = proto.varied(spec.variation_strength, &mut pattern_rng);
            let clean = face.render(&action);
            for rep in 0..spec.samples_per_cell {
                let pixels: Vec<u8> = clean
                    .iter()
                    .map(|&v| (v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
                    .collect();
                let image = GrayImage::from_raw(IMAGE_SIZE, IMAGE_SIZE, pixels).expect("60x60 buffer");
                let subject = id * spec.sessions + rep % spec.sessions;
                samples.push(Sample::new(image, expr, id, subject)?);
            }
        }
    }
    Ok(samples)
}
