//! Procedural multi-domain digits.
//!
//! Each image is a class glyph (content) rendered in a domain style
//! (background texture, palettes, noise, blur). Glyph geometry is drawn from
//! the instance stream before any style draw, so the foreground mask depends
//! only on the class and the instance stream, never on the domain.

pub mod glyphs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DomainData, DomainDataset, Manifest, Samples};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_SHAPE: [usize; 3] = [CHANNELS, IMAGE_SIZE, IMAGE_SIZE];

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Solid,
    Stripes,
    Checker,
    /// Per-pixel speckle between two palette colors.
    Noise,
}

/// Rendering style of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub background: Background,
    pub background_palette: Vec<Rgb>,
    pub foreground_palette: Vec<Rgb>,
    /// Stripe width or checker cell size in pixels.
    pub period: usize,
    /// Amplitude of additive uniform pixel noise.
    pub noise: f64,
    /// Box-blur radius in pixels.
    pub blur: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: u32,
    pub name: String,
    pub style: Style,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let s = &self.style;
        let bad = |msg: String| Err(Error::Config(format!("domain `{}`: {msg}", self.name)));
        if s.background_palette.is_empty() || s.foreground_palette.is_empty() {
            return bad("palettes must be non-empty".into());
        }
        if s.background != Background::Solid && s.background_palette.len() < 2 {
            return bad(format!(
                "{:?} background needs two palette colors",
                s.background
            ));
        }
        let colors = s.background_palette.iter().chain(&s.foreground_palette);
        if colors.flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("palette channels must lie in [0, 1]".into());
        }
        if s.period < 2 {
            return bad(format!("period must be >= 2, got {}", s.period));
        }
        if !(0.0..=1.0).contains(&s.noise) {
            return bad(format!("noise amplitude {} outside [0, 1]", s.noise));
        }
        if s.blur > IMAGE_SIZE / 4 {
            return bad(format!("blur radius {} too large", s.blur));
        }
        Ok(())
    }
}

/// Four visually distinct styles: solid, stripes, checker and speckle.
pub fn default_domains() -> Vec<DomainSpec> {
    let domain =
        |id, name: &str, background, bg: Vec<Rgb>, fg: Vec<Rgb>, period, noise, blur| DomainSpec {
            id,
            name: name.into(),
            style: Style {
                background,
                background_palette: bg,
                foreground_palette: fg,
                period,
                noise,
                blur,
            },
        };
    vec![
        domain(
            0,
            "solid",
            Background::Solid,
            vec![[0.05, 0.05, 0.25], [0.2, 0.08, 0.08], [0.08, 0.2, 0.12]],
            vec![[1.0, 0.9, 0.2], [0.95, 0.95, 0.95], [0.95, 0.55, 0.1]],
            2,
            0.03,
            0,
        ),
        domain(
            1,
            "stripes",
            Background::Stripes,
            vec![[0.25, 0.65, 0.25], [0.05, 0.3, 0.05], [0.6, 0.85, 0.35]],
            vec![[0.9, 0.1, 0.1], [0.85, 0.2, 0.8]],
            4,
            0.05,
            0,
        ),
        domain(
            2,
            "checker",
            Background::Checker,
            vec![[0.95, 0.95, 0.95], [0.9, 0.7, 0.75], [0.78, 0.8, 0.95]],
            vec![[0.05, 0.05, 0.05], [0.1, 0.1, 0.45]],
            3,
            0.02,
            1,
        ),
        domain(
            3,
            "speckle",
            Background::Noise,
            vec![[0.45, 0.45, 0.45], [0.7, 0.6, 0.5], [0.3, 0.35, 0.55]],
            vec![[0.2, 0.9, 0.9], [0.1, 0.8, 0.3]],
            2,
            0.12,
            0,
        ),
    ]
}

/// Binary glyph mask for `class`, jittered by scale, rotation and shift.
///
/// Consumes exactly four draws from `rng`.
pub fn glyph_mask<R: Rng + ?Sized>(class: usize, rng: &mut R) -> Result<Vec<bool>> {
    if class >= glyphs::COUNT {
        return Err(Error::InvalidArgument(format!(
            "class {class} outside the {} built-in glyphs",
            glyphs::COUNT
        )));
    }
    let scale: f64 = rng.gen_range(3.0..3.6);
    let angle: f64 = rng.gen_range(-0.2..0.2);
    let tx: f64 = rng.gen_range(-2.5..2.5);
    let ty: f64 = rng.gen_range(-2.0..2.0);
    let (sin, cos) = angle.sin_cos();
    let centre = IMAGE_SIZE as f64 / 2.0;
    let mut mask = vec![false; IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let qx = x as f64 + 0.5 - centre - tx;
            let qy = y as f64 + 0.5 - centre - ty;
            // Inverse rotation, then back to glyph cells.
            let u = (cos * qx + sin * qy) / scale + glyphs::WIDTH as f64 / 2.0;
            let v = (-sin * qx + cos * qy) / scale + glyphs::HEIGHT as f64 / 2.0;
            if u >= 0.0 && v >= 0.0 {
                let (col, row) = (u as usize, v as usize);
                if col < glyphs::WIDTH && row < glyphs::HEIGHT && glyphs::ink(class, row, col) {
                    mask[y * IMAGE_SIZE + x] = true;
                }
            }
        }
    }
    Ok(mask)
}

fn pick<R: Rng + ?Sized>(palette: &[Rgb], rng: &mut R) -> Rgb {
    palette[rng.gen_range(0..palette.len())]
}

/// Two distinct palette entries.
fn pick_pair<R: Rng + ?Sized>(palette: &[Rgb], rng: &mut R) -> (Rgb, Rgb) {
    let i = rng.gen_range(0..palette.len());
    let j = (i + rng.gen_range(1..palette.len())) % palette.len();
    (palette[i], palette[j])
}

/// Renders one `[3,32,32]` image and returns it with its glyph mask.
///
/// Pixels are in `[0, 1]` and exactly representable as `f32`.
pub fn render_sample<R: Rng + ?Sized>(
    class: usize,
    spec: &DomainSpec,
    rng: &mut R,
) -> Result<(Tensor, Vec<bool>)> {
    spec.validate()?;
    let mask = glyph_mask(class, rng)?;
    let s = &spec.style;
    let fg = pick(&s.foreground_palette, rng);
    let area = IMAGE_SIZE * IMAGE_SIZE;
    let mut bg = vec![[0.0; 3]; area];
    match s.background {
        Background::Solid => bg.fill(pick(&s.background_palette, rng)),
        Background::Stripes | Background::Checker => {
            let (a, b) = pick_pair(&s.background_palette, rng);
            let vertical = rng.gen_bool(0.5);
            let (px, py) = (rng.gen_range(0..s.period), rng.gen_range(0..s.period));
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let cx = (x + px) / s.period;
                    let cy = (y + py) / s.period;
                    let band = match s.background {
                        Background::Stripes if vertical => cx,
                        Background::Stripes => cy,
                        _ => cx + cy,
                    };
                    bg[y * IMAGE_SIZE + x] = if band % 2 == 0 { a } else { b };
                }
            }
        }
        Background::Noise => {
            let (a, b) = pick_pair(&s.background_palette, rng);
            for px in bg.iter_mut() {
                *px = if rng.gen_bool(0.5) { a } else { b };
            }
        }
    }
    let mut planes = vec![0.0; CHANNELS * area];
    for p in 0..area {
        let color = if mask[p] { fg } else { bg[p] };
        for c in 0..CHANNELS {
            let jitter = if s.noise > 0.0 {
                rng.gen_range(-s.noise..=s.noise)
            } else {
                0.0
            };
            planes[c * area + p] = color[c] + jitter;
        }
    }
    if s.blur > 0 {
        for plane in planes.chunks_mut(area) {
            box_blur(plane, s.blur);
        }
    }
    for v in planes.iter_mut() {
        *v = f64::from(v.clamp(0.0, 1.0) as f32);
    }
    Ok((Tensor::new(IMAGE_SHAPE.to_vec(), planes)?, mask))
}

/// Mean over the `(2r+1)²` window, truncated at the borders.
fn box_blur(plane: &mut [f64], r: usize) {
    let n = IMAGE_SIZE;
    let src = plane.to_vec();
    for y in 0..n {
        for x in 0..n {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(n - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(n - 1));
            let mut acc = 0.0;
            for yy in y0..=y1 {
                acc += src[yy * n + x0..=yy * n + x1].iter().sum::<f64>();
            }
            plane[y * n + x] = acc / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
}

/// What to generate; serialized as the `generate` config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub name: String,
    pub classes: usize,
    /// Images per class in every domain.
    pub per_class: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            name: "synthetic-digits".into(),
            classes: 10,
            per_class: 600,
            train_fraction: 0.8,
            seed: 0,
            domains: default_domains(),
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 3 {
            return Err(Error::Config(format!(
                "need at least 3 domains for leave-one-out, got {}",
                self.domains.len()
            )));
        }
        if !(2..=glyphs::COUNT).contains(&self.classes) {
            return Err(Error::Config(format!(
                "classes must be in 2..={}, got {}",
                glyphs::COUNT,
                self.classes
            )));
        }
        let train = self.train_count();
        if train == 0 || train == self.per_class {
            return Err(Error::Config(format!(
                "{} images per class with train fraction {} leaves a split empty",
                self.per_class, self.train_fraction
            )));
        }
        let mut ids: Vec<u32> = self.domains.iter().map(|d| d.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.domains.len() {
            return Err(Error::Config("domain ids must be unique".into()));
        }
        self.domains.iter().try_for_each(DomainSpec::validate)
    }

    /// Training images per (domain, class).
    pub fn train_count(&self) -> usize {
        (self.per_class as f64 * self.train_fraction).round() as usize
    }
}

/// Independent stream for one sample, derived from the master seed by
/// counter so any schedule yields the same images.
pub fn instance_rng(seed: u64, domain: u32, class: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(domain) << 48) | ((class as u64) << 32) | index as u64);
    rng
}

/// Renders the whole benchmark in memory. Classes interleave within each
/// split so every prefix of `classes` samples is class-balanced.
pub fn generate_dataset(config: &GenerateConfig) -> Result<DomainDataset> {
    config.validate()?;
    let train_n = config.train_count();
    let mut domains = Vec::with_capacity(config.domains.len());
    for spec in &config.domains {
        let mut train = Samples::with_capacity(IMAGE_SHAPE, train_n * config.classes);
        let mut val =
            Samples::with_capacity(IMAGE_SHAPE, (config.per_class - train_n) * config.classes);
        for index in 0..config.per_class {
            for class in 0..config.classes {
                let mut rng = instance_rng(config.seed, spec.id, class, index);
                let (image, _) = render_sample(class, spec, &mut rng)?;
                let split = if index < train_n {
                    &mut train
                } else {
                    &mut val
                };
                split.push(&image, class)?;
            }
        }
        domains.push(DomainData {
            spec: spec.clone(),
            train,
            val,
        });
    }
    let manifest = Manifest::describe(&config.name, config.classes, config.seed, &domains);
    DomainDataset::new(manifest, domains)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_ignores_style() {
        let domains = default_domains();
        for class in 0..10 {
            for seed in 0..5 {
                let mut masks = Vec::new();
                let mut images = Vec::new();
                for spec in &domains {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let (img, mask) = render_sample(class, spec, &mut rng).unwrap();
                    masks.push(mask);
                    images.push(img);
                }
                assert!(masks.windows(2).all(|w| w[0] == w[1]));
                assert!(!images[0].bit_eq(&images[1]));
                // The same mask falls out of the geometry stream alone.
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                assert_eq!(glyph_mask(class, &mut rng).unwrap(), masks[0]);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = &default_domains()[1];
        let a = render_sample(4, spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = render_sample(4, spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(a.0.bit_eq(&b.0));
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn pixels_in_range_over_many_draws() {
        let domains = default_domains();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..1000 {
            let spec = &domains[i % domains.len()];
            let (img, mask) = render_sample(i % 10, spec, &mut rng).unwrap();
            assert_eq!(img.shape(), &IMAGE_SHAPE);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(img.data().iter().all(|&v| f64::from(v as f32) == v));
            let inked = mask.iter().filter(|&&m| m).count();
            assert!(inked > 40 && inked < 600, "mask has {inked} pixels");
        }
    }

    #[test]
    fn invalid_class_and_spec_rejected() {
        let mut spec = default_domains()[0].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            render_sample(10, &spec, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
        spec.style.period = 1;
        assert!(matches!(
            render_sample(0, &spec, &mut rng),
            Err(Error::Config(_))
        ));
        let mut spec = default_domains()[1].clone();
        spec.style.background_palette.truncate(1);
        assert!(spec.validate().is_err());
        let mut spec = default_domains()[0].clone();
        spec.style.foreground_palette.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn blur_preserves_constant_planes() {
        let mut plane = vec![0.4; IMAGE_SIZE * IMAGE_SIZE];
        box_blur(&mut plane, 2);
        assert!(plane.iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn request_validation() {
        let ok = GenerateConfig {
            per_class: 5,
            ..Default::default()
        };
        ok.validate().unwrap();
        let mut c = ok.clone();
        c.domains.truncate(2);
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.classes = 1;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.per_class = 1;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.domains[1].id = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn generation_is_balanced_and_deterministic() {
        let config = GenerateConfig {
            classes: 4,
            per_class: 5,
            seed: 3,
            ..Default::default()
        };
        let a = generate_dataset(&config).unwrap();
        let b = generate_dataset(&config).unwrap();
        for (da, db) in a.domains().iter().zip(b.domains()) {
            assert_eq!(da.train, db.train);
            assert_eq!(da.val, db.val);
            assert_eq!(da.train.len(), 16);
            assert_eq!(da.val.len(), 4);
            for split in [&da.train, &da.val] {
                let mut hist = [0usize; 4];
                split.labels().iter().for_each(|&l| hist[l] += 1);
                assert!(hist.iter().all(|&h| h == split.len() / 4));
            }
        }
    }
}
