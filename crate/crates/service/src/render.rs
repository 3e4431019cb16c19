//! PNG rendering of slices, predictions and truth.

use odes_core::segcore::{LabelMap, SliceImage};
use odes_harness::experiment::class_names;

use crate::api::{PaletteEntry, Window};

const COLOURS: [[u8; 3]; 5] = [[0, 0, 0], [220, 80, 60], [60, 150, 230], [80, 200, 120], [240, 200, 60]];

/// Colour of every class. Classes past the fixed table get a hue from the
/// golden-angle sequence.
pub fn palette(classes: usize) -> Vec<PaletteEntry> {
    class_names(classes)
        .into_iter()
        .enumerate()
        .map(|(c, name)| PaletteEntry {
            class: c as u8,
            name,
            rgb: COLOURS.get(c).copied().unwrap_or_else(|| hue(c as f64 * 137.508)),
        })
        .collect()
}

fn hue(deg: f64) -> [u8; 3] {
    let h = (deg % 360.0) / 60.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Full intensity range of the slice.
pub fn default_window(image: &SliceImage) -> Window {
    let (lo, hi) = image
        .pixels()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return Window { center: 0.5, width: 1.0 };
    }
    Window {
        center: 0.5 * (lo + hi),
        width: (hi - lo).max(1e-6),
    }
}

fn encode(width: usize, height: usize, data: &[u8], setup: impl FnOnce(&mut png::Encoder<&mut Vec<u8>>)) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_depth(png::BitDepth::Eight);
        setup(&mut enc);
        // Writing into a Vec only fails on inconsistent dimensions, which the
        // callers rule out.
        let mut w = enc.write_header().expect("valid png header");
        w.write_image_data(data).expect("buffer matches dimensions");
    }
    out
}

pub fn grayscale_png(image: &SliceImage, window: Window) -> Vec<u8> {
    let lo = window.center - 0.5 * window.width;
    let data: Vec<u8> = image
        .pixels()
        .iter()
        .map(|&v| (((v - lo) / window.width).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode(image.width(), image.height(), &data, |e| e.set_color(png::ColorType::Grayscale))
}

/// Indexed-colour PNG with a transparent background entry.
pub fn label_png(labels: &LabelMap, palette: &[PaletteEntry]) -> Vec<u8> {
    let rgb: Vec<u8> = palette.iter().flat_map(|p| p.rgb).collect();
    let mut alpha = vec![255u8; palette.len()];
    alpha[0] = 0;
    encode(labels.width, labels.height, &labels.labels, |e| {
        e.set_color(png::ColorType::Indexed);
        e.set_palette(rgb);
        e.set_trns(alpha);
    })
}

pub fn raw_f32(image: &SliceImage) -> Vec<u8> {
    image.pixels().iter().flat_map(|v| v.to_le_bytes()).collect()
}
