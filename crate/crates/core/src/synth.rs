//! Procedural night-street scenes.
//!
//! Used as clear fixtures wherever real photographs are unavailable: a dark
//! sky gradient over a row of buildings with lit windows, a road, and a few
//! point lamps.

use crate::error::Result;
use crate::image::{clamp_unit, Image, LUMA_WEIGHTS};
use crate::rng::RngStream;

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
}

/// Renders one scene of the requested size.
pub fn night_scene(
    height: usize,
    width: usize,
    channels: usize,
    rng: &mut RngStream,
) -> Result<Image> {
    let (h, w) = (height as f64, width as f64);
    let mut px = vec![[0.0f64; 3]; height * width];

    let zenith = [
        rng.uniform_range(0.0, 0.03),
        rng.uniform_range(0.0, 0.04),
        rng.uniform_range(0.04, 0.1),
    ];
    let horizon = [
        rng.uniform_range(0.1, 0.25),
        rng.uniform_range(0.08, 0.18),
        rng.uniform_range(0.08, 0.2),
    ];
    let ground_y = (h * rng.uniform_range(0.78, 0.9)) as usize;
    for y in 0..height {
        let t = (y as f64 / ground_y.max(1) as f64).min(1.0);
        let sky = mix(zenith, horizon, t * t);
        for x in 0..width {
            px[y * width + x] = sky;
        }
    }

    // buildings with window grids
    let cell = (width / 14).max(4);
    let mut x0 = 0usize;
    while x0 < width {
        let bw = ((w * rng.uniform_range(0.1, 0.28)) as usize).max(cell);
        let top = (h * rng.uniform_range(0.15, 0.6)) as usize;
        let shade = rng.uniform_range(0.03, 0.16);
        let wall = [shade, shade * rng.uniform_range(0.9, 1.1), shade * rng.uniform_range(0.9, 1.3)];
        let lit_prob = rng.uniform_range(0.2, 0.6);
        let x1 = (x0 + bw).min(width);
        for y in top..ground_y {
            for x in x0..x1 {
                px[y * width + x] = wall;
            }
        }
        let mut wy = top + cell / 2;
        while wy + cell / 2 < ground_y {
            let mut wx = x0 + cell / 3;
            while wx + cell / 2 < x1 {
                let color = if rng.bernoulli(lit_prob) {
                    let v = rng.uniform_range(0.65, 1.0);
                    [v, v * rng.uniform_range(0.75, 0.95), v * rng.uniform_range(0.4, 0.7)]
                } else {
                    wall.map(|c| c * 0.6)
                };
                for y in wy..(wy + cell / 2).min(ground_y) {
                    for x in wx..(wx + cell / 2).min(x1) {
                        px[y * width + x] = color;
                    }
                }
                wx += cell;
            }
            wy += cell;
        }
        x0 = x1 + rng.int_inclusive(0, cell);
    }

    // road with dashed centre line
    let road = rng.uniform_range(0.04, 0.1);
    let line_y = ground_y + (height - ground_y) / 2;
    for y in ground_y..height {
        for x in 0..width {
            let dash = y == line_y && (x / cell) % 2 == 0;
            px[y * width + x] = if dash { [0.7, 0.7, 0.6] } else { [road, road, road * 1.05] };
        }
    }

    // lamps: bright cores with a soft halo
    let lamps = rng.int_inclusive(1, 3);
    for _ in 0..lamps {
        let cy = rng.uniform_range(h * 0.3, ground_y as f64);
        let cx = rng.uniform_range(0.0, w);
        let radius = (w / 40.0).max(1.0);
        let warm = [1.0, rng.uniform_range(0.8, 0.95), rng.uniform_range(0.5, 0.8)];
        for y in 0..height {
            for x in 0..width {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let core = if d2 <= radius * radius { 1.0 } else { 0.0 };
                let halo = 0.35 * (-d2 / (2.0 * (3.0 * radius).powi(2))).exp();
                let p = &mut px[y * width + x];
                for c in 0..3 {
                    p[c] = p[c].max(core * warm[c]) + halo * warm[c];
                }
            }
        }
    }

    let mut data = Vec::with_capacity(height * width * channels);
    for p in &px {
        let grain = rng.uniform_range(-0.015, 0.015);
        if channels == 1 {
            let y = LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2];
            data.push(clamp_unit(y + grain));
        } else {
            data.extend(p.iter().map(|v| clamp_unit(v + grain)));
        }
    }
    Image::new(height, width, channels, data)
}

/// `count` scenes drawn from child streams of `(seed, 0)`.
pub fn night_scenes(
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<Image>> {
    let base = RngStream::new(seed, 0);
    (0..count)
        .map(|i| night_scene(height, width, channels, &mut base.child(i as u64)))
        .collect()
}
