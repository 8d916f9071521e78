//! Procedural dataset of anti-aliased colored shapes on a gray background.

use std::sync::OnceLock;

use super::prompt::{Color, Prompt, Shape};
use crate::error::{arg_err, Result};
use crate::numerics::{Rng, Tensor};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const BACKGROUND: f32 = 0.5;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Tensor,
    pub prompt: Prompt,
    /// Fractional shape coverage per pixel, `[S, S]`.
    pub coverage: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub cx: f32,
    pub cy: f32,
    /// Circumradius in pixels.
    pub radius: f32,
}

fn inside(shape: Shape, p: Placement, x: f32, y: f32) -> bool {
    let (dx, dy) = (x - p.cx, y - p.cy);
    match shape {
        Shape::Circle => dx * dx + dy * dy <= p.radius * p.radius,
        Shape::Square => {
            let half = 0.8 * p.radius;
            dx.abs() <= half && dy.abs() <= half
        }
        Shape::Triangle => {
            // equilateral, apex up
            let r = p.radius;
            let v = [
                (0.0, -r),
                (r * 3f32.sqrt() / 2.0, r / 2.0),
                (-r * 3f32.sqrt() / 2.0, r / 2.0),
            ];
            (0..3).all(|i| {
                let (ax, ay) = v[i];
                let (bx, by) = v[(i + 1) % 3];
                (bx - ax) * (dy - ay) - (by - ay) * (dx - ax) >= 0.0
            })
        }
    }
}

/// Render one shape at `size × size` with 4×4 supersampled coverage.
pub fn render(color: Color, shape: Shape, placement: Placement, size: usize) -> (Tensor, Tensor) {
    let mut coverage = vec![0.0f32; size * size];
    let step = 1.0 / SUPERSAMPLE as f32;
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f32 + (sx as f32 + 0.5) * step;
                    let py = y as f32 + (sy as f32 + 0.5) * step;
                    hits += inside(shape, placement, px, py) as usize;
                }
            }
            coverage[y * size + x] = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
        }
    }
    let rgb = color.rgb();
    let mut image = Vec::with_capacity(CHANNELS * size * size);
    for &c in &rgb {
        image.extend(coverage.iter().map(|&a| BACKGROUND * (1.0 - a) + c * a));
    }
    (
        Tensor::from_parts(vec![CHANNELS, size, size], image),
        Tensor::from_parts(vec![size, size], coverage),
    )
}

pub fn random_sample(rng: &mut Rng, size: usize) -> Sample {
    let color = Color::ALL[rng.below(3)];
    let shape = Shape::ALL[rng.below(3)];
    let s = size as f32;
    let radius = rng.uniform_range(0.19 * s, 0.31 * s);
    let margin = radius + 1.0;
    let placement = Placement {
        cx: rng.uniform_range(margin, s - margin),
        cy: rng.uniform_range(margin, s - margin),
        radius,
    };
    let (image, coverage) = render(color, shape, placement, size);
    Sample {
        image,
        prompt: Prompt::new(color, shape),
        coverage,
    }
}

/// `count` samples drawn from independent per-index streams of `rng`.
pub fn generate_dataset(rng: &Rng, count: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(arg_err!("dataset size must be at least 1"));
    }
    Ok((0..count)
        .map(|i| random_sample(&mut rng.split(i as u64, 0xda7a), IMAGE_SIZE))
        .collect())
}

/// Map `[0, 1]` pixels to the model's `[-1, 1]` latent range.
pub fn image_to_latent(image: &Tensor) -> Result<Tensor> {
    image.map(|v| 2.0 * v - 1.0)
}

/// Inverse of [`image_to_latent`], clamped to `[0, 1]`.
pub fn latent_to_image(z: &Tensor) -> Result<Tensor> {
    z.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

const SATURATION: f32 = 0.3;
const MIN_PIXELS: usize = 12;
const MIN_IOU: f64 = 0.4;

/// A binary shape mask as bit words, one bit per pixel.
struct Template {
    shape: Shape,
    bits: Vec<u64>,
    count: u32,
}

fn pixel_bits(size: usize, mut on: impl FnMut(usize, usize) -> bool) -> Vec<u64> {
    let mut bits = vec![0u64; (size * size).div_ceil(64)];
    for y in 0..size {
        for x in 0..size {
            if on(x, y) {
                let i = y * size + x;
                bits[i / 64] |= 1 << (i % 64);
            }
        }
    }
    bits
}

/// Every shape at whole-pixel radii and centers covering the placements
/// `random_sample` draws, with a pixel of slack.
fn templates(size: usize) -> Vec<Template> {
    let s = size as f32;
    let (r_lo, r_hi) = ((0.19 * s).floor() as usize, (0.31 * s).ceil() as usize);
    let mut out = Vec::new();
    for shape in Shape::ALL {
        for r in r_lo..=r_hi {
            let margin = r as f32;
            let centers: Vec<f32> = (0..size)
                .map(|c| c as f32 + 0.5)
                .filter(|&c| c >= margin && c <= s - margin)
                .collect();
            for &cy in &centers {
                for &cx in &centers {
                    let p = Placement {
                        cx,
                        cy,
                        radius: r as f32,
                    };
                    let bits = pixel_bits(size, |x, y| {
                        inside(shape, p, x as f32 + 0.5, y as f32 + 0.5)
                    });
                    let count = bits.iter().map(|w| w.count_ones()).sum();
                    out.push(Template { shape, bits, count });
                }
            }
        }
    }
    out
}

fn with_templates<R>(size: usize, f: impl FnOnce(&[Template]) -> R) -> R {
    static DEFAULT: OnceLock<Vec<Template>> = OnceLock::new();
    if size == IMAGE_SIZE {
        f(DEFAULT.get_or_init(|| templates(IMAGE_SIZE)))
    } else {
        f(&templates(size))
    }
}

/// Procedural classifier. Foreground pixels are the saturated ones; the
/// color is their dominant channel and the shape is that of the rendered
/// template with the highest intersection-over-union with them. Returns
/// `None` for square images with too little foreground or no template
/// reaching an IoU of 0.4.
pub fn classify(image: &Tensor) -> Option<(Color, Shape)> {
    let &[3, h, w] = image.shape() else {
        return None;
    };
    if h != w {
        return None;
    }
    let plane = h * w;
    let d = image.data();
    let mut sums = [0.0f32; 3];
    let mask = pixel_bits(w, |x, y| {
        let i = y * w + x;
        let px = [d[i], d[plane + i], d[2 * plane + i]];
        let max = px.iter().copied().fold(f32::MIN, f32::max);
        let min = px.iter().copied().fold(f32::MAX, f32::min);
        let on = max - min >= SATURATION;
        if on {
            for c in 0..3 {
                sums[c] += px[c];
            }
        }
        on
    });
    let count: u32 = mask.iter().map(|w| w.count_ones()).sum();
    if (count as usize) < MIN_PIXELS {
        return None;
    }
    let dominant = (0..3).max_by(|&a, &b| sums[a].total_cmp(&sums[b]))?;
    let (shape, iou) = with_templates(w, |all| {
        all.iter()
            .map(|t| {
                let both: u32 = t
                    .bits
                    .iter()
                    .zip(&mask)
                    .map(|(a, b)| (a & b).count_ones())
                    .sum();
                (t.shape, both as f64 / (t.count + count - both) as f64)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
    })?;
    (iou >= MIN_IOU).then_some((Color::ALL[dominant], shape))
}
