//! Minimal PNG line charts for energy traces.

use deepcv::energy::EnergyBreakdown;
use deepcv::Result;
use image::{Rgb, RgbImage};
use std::path::Path;

const WIDTH: u32 = 900;
const HEIGHT: u32 = 540;
const MARGIN: u32 = 50;

const SERIES: [(&str, fn(&EnergyBreakdown) -> f64, [u8; 3]); 7] = [
    ("reconstruction", |b| b.reconstruction, [214, 69, 65]),
    ("kl", |b| b.kl, [31, 119, 180]),
    ("tv", |b| b.tv, [44, 160, 44]),
    ("penalty", |b| b.penalty, [148, 103, 189]),
    ("aug_bce", |b| b.aug_bce, [255, 127, 14]),
    ("cri", |b| b.cri, [23, 190, 207]),
    ("total", |b| b.total, [0, 0, 0]),
];

/// Renders all energy components against the iteration index.
pub fn plot_trace(trace: &[EnergyBreakdown], path: impl AsRef<Path>) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for b in trace {
        for (_, get, _) in SERIES {
            lo = lo.min(get(b));
            hi = hi.max(get(b));
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }

    let x_of = |i: usize| -> f64 {
        let n = trace.len().max(2) - 1;
        MARGIN as f64 + (WIDTH - 2 * MARGIN) as f64 * i as f64 / n as f64
    };
    let y_of =
        |v: f64| -> f64 { (HEIGHT - MARGIN) as f64 - (HEIGHT - 2 * MARGIN) as f64 * (v - lo) / (hi - lo) };

    // axes
    draw_line(
        &mut img,
        (MARGIN as f64, MARGIN as f64),
        (MARGIN as f64, (HEIGHT - MARGIN) as f64),
        Rgb([120, 120, 120]),
    );
    draw_line(
        &mut img,
        (MARGIN as f64, (HEIGHT - MARGIN) as f64),
        ((WIDTH - MARGIN) as f64, (HEIGHT - MARGIN) as f64),
        Rgb([120, 120, 120]),
    );

    for (si, (_, get, rgb)) in SERIES.iter().enumerate() {
        let color = Rgb(*rgb);
        for i in 1..trace.len() {
            draw_line(
                &mut img,
                (x_of(i - 1), y_of(get(&trace[i - 1]))),
                (x_of(i), y_of(get(&trace[i]))),
                color,
            );
        }
        // legend swatch
        let ly = MARGIN + 14 * si as u32;
        for dx in 0..10u32 {
            for dy in 0..10u32 {
                let (px, py) = (WIDTH - MARGIN - 120 + dx, ly + dy);
                if px < WIDTH && py < HEIGHT {
                    img.put_pixel(px, py, color);
                }
            }
        }
    }

    img.save(path.as_ref())
        .map_err(|e| deepcv::Error::io(format!("cannot write plot: {e}")))?;
    Ok(())
}

fn draw_line(img: &mut RgbImage, from: (f64, f64), to: (f64, f64), color: Rgb<u8>) {
    let steps = ((to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = from.0 + (to.0 - from.0) * t;
        let y = from.1 + (to.1 - from.1) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}
