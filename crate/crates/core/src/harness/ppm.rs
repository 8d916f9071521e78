//! Binary PPM (P6, maxval 255) images and heatmap rendering.

use std::path::Path;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl Ppm {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(dim_err!(
                "{} bytes for a {width}x{height} image",
                pixels.len()
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses the subset written by [`Ppm::encode`] (no comments).
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("PPM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?,
            );
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("only P6 with maxval 255 is supported"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
        let (w, h) = (num(fields[1])?, num(fields[2])?);
        let data = bytes
            .get(pos + 1..)
            .ok_or_else(|| bad("missing pixel data"))?;
        Self::new(w, h, data.to_vec()).map_err(|_| bad("pixel data length mismatch"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Place images left to right with a one-pixel gap of `gap` color.
    pub fn tile(images: &[Ppm], gap: [u8; 3]) -> Result<Ppm> {
        let Some(first) = images.first() else {
            return Err(arg_err!("nothing to tile"));
        };
        let (w, h) = (first.width, first.height);
        if images.iter().any(|i| i.width != w || i.height != h) {
            return Err(dim_err!("tiled images must share a size"));
        }
        let total_w = images.len() * (w + 1) - 1;
        let mut pixels = Vec::with_capacity(3 * total_w * h);
        for y in 0..h {
            for (k, img) in images.iter().enumerate() {
                if k > 0 {
                    pixels.extend_from_slice(&gap);
                }
                pixels.extend_from_slice(&img.pixels[3 * y * w..3 * (y + 1) * w]);
            }
        }
        Ppm::new(total_w, h, pixels)
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` image in `[0, 1]` (values clamped).
pub fn image_to_ppm(image: &Tensor) -> Result<Ppm> {
    let &[3, h, w] = image.shape() else {
        return Err(dim_err!(
            "expected a [3, H, W] image, got {:?}",
            image.shape()
        ));
    };
    let d = image.data();
    let plane = h * w;
    let pixels = (0..plane)
        .flat_map(|i| {
            [
                to_byte(d[i]),
                to_byte(d[plane + i]),
                to_byte(d[2 * plane + i]),
            ]
        })
        .collect();
    Ppm::new(w, h, pixels)
}

/// `[H, W]` map in `[0, 1]` as gray.
pub fn gray_to_ppm(map: &Tensor) -> Result<Ppm> {
    let &[h, w] = map.shape() else {
        return Err(dim_err!("expected an [H, W] map, got {:?}", map.shape()));
    };
    let pixels = map.data().iter().flat_map(|&v| [to_byte(v); 3]).collect();
    Ppm::new(w, h, pixels)
}

const ANCHORS: [[u8; 3]; 5] = [
    [0, 0, 4],
    [87, 16, 110],
    [188, 55, 84],
    [249, 142, 9],
    [252, 255, 164],
];

/// Fixed 256-entry dark-to-bright color table.
pub fn color_table() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    let segments = ANCHORS.len() - 1;
    for (i, entry) in table.iter_mut().enumerate() {
        let pos = i * segments * 1000 / 255;
        let (seg, frac) = (
            (pos / 1000).min(segments - 1),
            pos - (pos / 1000).min(segments - 1) * 1000,
        );
        let (a, b) = (ANCHORS[seg], ANCHORS[seg + 1]);
        for c in 0..3 {
            let v = a[c] as i32 * 1000 + (b[c] as i32 - a[c] as i32) * frac as i32;
            entry[c] = ((v + 500) / 1000) as u8;
        }
    }
    table
}

/// Heatmap of a captured term: `[M]` values, or `[.., M, d]` summed over
/// the last axis; `M` must be a perfect square. Values are min-max
/// normalised onto [`color_table`]; a constant map uses the first entry.
pub fn render_heatmap(t: &Tensor) -> Result<Ppm> {
    let values: Vec<f32> = if t.rank() == 1 {
        t.data().to_vec()
    } else {
        let d = *t.shape().last().unwrap();
        t.data()
            .chunks(d)
            .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect()
    };
    let m = values.len();
    let side = (m as f64).sqrt().round() as usize;
    if side * side != m {
        return Err(arg_err!("{m} positions do not form a square grid"));
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let table = color_table();
    let pixels = values
        .iter()
        .flat_map(|&v| {
            let idx = if hi > lo {
                (((v - lo) / (hi - lo)) * 255.0).round() as usize
            } else {
                0
            };
            table[idx.min(255)]
        })
        .collect();
    Ppm::new(side, side, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn encode_decode() {
        let img = Ppm::new(2, 1, vec![1, 2, 3, 250, 251, 252]).unwrap();
        let bytes = img.encode();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(Ppm::decode(&bytes).unwrap(), img);
        assert!(Ppm::decode(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(Ppm::decode(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn table_endpoints() {
        let t = color_table();
        assert_eq!(t[0], ANCHORS[0]);
        assert_eq!(t[255], ANCHORS[4]);
    }

    #[test]
    fn heatmap_examples() {
        let constant = render_heatmap(&Tensor::full(&[16, 4], 0.3).unwrap()).unwrap();
        assert_eq!((constant.width, constant.height), (4, 4));
        assert!(constant.pixels.chunks(3).all(|p| p == ANCHORS[0]));

        let two = Tensor::from_fn(&[9], |i| if i % 2 == 0 { -1.0 } else { 2.0 }).unwrap();
        let img = render_heatmap(&two).unwrap();
        for (i, p) in img.pixels.chunks(3).enumerate() {
            assert_eq!(p, if i % 2 == 0 { ANCHORS[0] } else { ANCHORS[4] });
        }
        assert!(render_heatmap(&Tensor::zeros(&[8])).is_err());
    }

    #[test]
    fn heatmap_normalisation_by_lookup() {
        let t = Rng::new(1).randn(&[25, 3]);
        let sums: Vec<f32> = t
            .data()
            .chunks(3)
            .map(|r| r.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        let (lo, hi) = sums
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let table = color_table();
        let img = render_heatmap(&t).unwrap();
        for (i, &s) in sums.iter().enumerate() {
            let idx = ((s - lo) / (hi - lo) * 255.0).round() as usize;
            assert_eq!(img.pixel(i % 5, i / 5), table[idx]);
        }
    }

    #[test]
    fn image_conversion() {
        let img = Tensor::from_fn(&[3, 2, 2], |i| i as f32 / 11.0).unwrap();
        let p = image_to_ppm(&img).unwrap();
        assert_eq!(p.pixel(0, 0), [0, 93, 185]);
        assert_eq!(p.pixel(1, 1), [70, 162, 255]);
        let tiled = Ppm::tile(&[p.clone(), p], [9, 9, 9]).unwrap();
        assert_eq!(tiled.width, 5);
        assert_eq!(tiled.pixel(2, 0), [9, 9, 9]);
    }
}
