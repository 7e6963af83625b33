//! PNG rendering of a decision map.

use crate::error::{Error, Result};
use crate::pipeline::DecisionMap;

pub type Rgb = [u8; 3];

/// Default categorical palette.
pub const PALETTE: [Rgb; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Pixels per grid cell along each axis.
    pub cell_pixels: usize,
    pub point_radius: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            cell_pixels: 4,
            point_radius: 3.0,
        }
    }
}

/// Opacity `0.15 + 0.85 (1 − H / ln C)`.
pub fn alpha(entropy: f64, classes: usize) -> f64 {
    let max = (classes as f64).ln();
    let certainty = if max > 0.0 { 1.0 - (entropy / max).clamp(0.0, 1.0) } else { 1.0 };
    0.15 + 0.85 * certainty
}

fn over_white(color: Rgb, a: f64) -> Rgb {
    color.map(|c| (a * c as f64 + (1.0 - a) * 255.0).round().clamp(0.0, 255.0) as u8)
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let o = 3 * (y as usize * self.w + x as usize);
            self.px[o..o + 3].copy_from_slice(&c);
        }
    }
}

/// RGB pixels (row-major, top row first) and dimensions.
pub fn render_rgb(map: &DecisionMap, palette: &[Rgb], opts: &RenderOptions) -> Result<(usize, usize, Vec<u8>)> {
    if map.classes > palette.len() {
        return Err(Error::param(format!(
            "{} classes but only {} palette colors",
            map.classes,
            palette.len()
        )));
    }
    if opts.cell_pixels == 0 {
        return Err(Error::param("cell_pixels must be positive"));
    }
    let [gw, gh] = map.resolution;
    let s = opts.cell_pixels;
    let mut canvas = Canvas {
        w: gw * s,
        h: gh * s,
        px: vec![255; gw * s * gh * s * 3],
    };
    for row in 0..gh {
        for col in 0..gw {
            let label = map.grid_labels[row][col];
            let c = over_white(palette[label], alpha(map.grid_entropy[row][col], map.classes));
            // image rows run top-down, grid rows bottom-up
            let top = (gh - 1 - row) * s;
            for y in top..top + s {
                for x in col * s..(col + 1) * s {
                    canvas.put(x as i64, y as i64, c);
                }
            }
        }
    }

    let [x0, x1, y0, y1] = map.viewport;
    let (cw, ch) = (canvas.w as f64, canvas.h as f64);
    let to_px = |x: f64, y: f64| ((x - x0) / (x1 - x0) * cw, (y1 - y) / (y1 - y0) * ch);
    let r = opts.point_radius;
    let ri = r.ceil() as i64 + 1;
    let outline: Rgb = [40, 40, 40];
    for p in &map.scatter {
        let (cx, cy) = to_px(p.0, p.1);
        let fill = palette[p.3.unwrap_or(p.2).min(palette.len() - 1)];
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let (px, py) = (cx.floor() as i64 + dx, cy.floor() as i64 + dy);
                let d = ((px as f64 + 0.5 - cx).powi(2) + (py as f64 + 0.5 - cy).powi(2)).sqrt();
                if d <= r - 1.0 {
                    canvas.put(px, py, fill);
                } else if d <= r {
                    canvas.put(px, py, outline);
                }
            }
        }
    }
    let arm = (r + 2.0).round() as i64;
    for p in &map.scatter {
        if p.3.is_some_and(|t| t != p.2) {
            let (cx, cy) = to_px(p.0, p.1);
            let (cx, cy) = (cx.floor() as i64, cy.floor() as i64);
            let c = palette[p.2];
            for t in -arm..=arm {
                for w in 0..2 {
                    canvas.put(cx + t + w, cy + t, c);
                    canvas.put(cx + t + w, cy - t, c);
                }
            }
        }
    }
    Ok((canvas.w, canvas.h, canvas.px))
}

/// Encodes the map as PNG bytes.
pub fn render_png(map: &DecisionMap, palette: &[Rgb], opts: &RenderOptions) -> Result<Vec<u8>> {
    let (w, h, px) = render_rgb(map, palette, opts)?;
    encode_rgb(w, h, &px)
}

pub fn encode_rgb(w: usize, h: usize, px: &[u8]) -> Result<Vec<u8>> {
    encode(w, h, px, png::ColorType::Rgb)
}

/// Grayscale or RGB image from raw intensities in `[0, 1]` (values outside
/// are clamped), `shape = [height, width, channels]` with 1 or 3 channels.
pub fn encode_image(values: &[f64], shape: [usize; 3]) -> Result<Vec<u8>> {
    let [h, w, c] = shape;
    if h * w * c != values.len() {
        return Err(Error::Dimension {
            expected: h * w * c,
            actual: values.len(),
        });
    }
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Unsupported(format!("{c} channels"))),
    };
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode(w, h, &bytes, color)
}

fn encode(w: usize, h: usize, px: &[u8], color: png::ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer
            .write_image_data(px)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}
