//! Procedural desk-scale data: moving textured scenes for videos and the
//! meta-set, plus a differently distributed still-image set for pretraining.
//!
//! Scene content drifts slowly and one foreground object is replaced every
//! `refresh_frames` frames, so neighbouring chunks share most of their
//! content while no two chunks are identical.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EmtError, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub fps: f64,
    pub iframe_interval: usize,
    /// Frames between foreground object replacements.
    pub refresh_frames: usize,
    pub seed: u64,
}

impl VideoSpec {
    /// 96x96 at 6 fps with an I-frame every 10 frames.
    pub fn desk(seconds: f64, seed: u64) -> Self {
        let fps = 6.0;
        VideoSpec {
            height: 96,
            width: 96,
            frames: (seconds * fps).round() as usize,
            fps,
            iframe_interval: 10,
            refresh_frames: 30,
            seed,
        }
    }

    pub fn iframes(&self) -> Vec<usize> {
        (0..self.frames).step_by(self.iframe_interval.max(1)).collect()
    }
}

#[derive(Clone, Debug)]
struct Grating {
    amp: f64,
    freq: f64,
    angle: f64,
    spin: f64,
    phase: f64,
    speed: f64,
    color: [f64; 3],
}

#[derive(Clone, Debug)]
struct Blob {
    square: bool,
    radius: f64,
    pos: [f64; 2],
    vel: [f64; 2],
    color: [f64; 3],
    stripe_freq: f64,
    stripe_angle: f64,
}

struct Scene {
    base: [f64; 3],
    gratings: Vec<Grating>,
    blobs: Vec<Blob>,
    hue: f64,
}

fn palette_color(rng: &mut ChaCha8Rng, hue: f64) -> [f64; 3] {
    let h = hue + rng.gen_range(-0.12..0.12);
    let v = rng.gen_range(0.35..0.95);
    let s = rng.gen_range(0.3..0.9);
    [0.0, 1.0 / 3.0, 2.0 / 3.0].map(|off| {
        let c = 0.5 + 0.5 * (TAU * (h + off)).cos();
        v * (1.0 - s + s * c)
    })
}

fn new_blob(rng: &mut ChaCha8Rng, h: usize, w: usize, hue: f64) -> Blob {
    let speed = rng.gen_range(0.3..1.2);
    let dir = rng.gen_range(0.0..TAU);
    Blob {
        square: rng.gen_bool(0.5),
        radius: rng.gen_range(5.0..(h.min(w) as f64 / 5.0).max(6.0)),
        pos: [rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)],
        vel: [speed * dir.sin(), speed * dir.cos()],
        color: palette_color(rng, hue),
        stripe_freq: rng.gen_range(0.08..0.3),
        stripe_angle: rng.gen_range(0.0..TAU),
    }
}

impl Scene {
    fn new(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let hue = rng.gen_range(0.0..1.0);
        let gratings = (0..3)
            .map(|_| Grating {
                amp: rng.gen_range(0.05..0.16),
                freq: rng.gen_range(0.03..0.22),
                angle: rng.gen_range(0.0..TAU),
                spin: rng.gen_range(-0.004..0.004),
                phase: rng.gen_range(0.0..TAU),
                speed: rng.gen_range(-0.25..0.25),
                color: palette_color(rng, hue),
            })
            .collect();
        let blobs = (0..4).map(|_| new_blob(rng, h, w, hue)).collect();
        Scene {
            base: palette_color(rng, hue + 0.5).map(|c| 0.3 + 0.4 * c),
            gratings,
            blobs,
            hue,
        }
    }

    fn render(&self, t: f64, h: usize, w: usize) -> Tensor {
        let mut img = Tensor::zeros([1, 3, h, w]);
        let data = img.data_mut();
        let plane = h * w;
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f64, x as f64);
                let mut px = self.base;
                for g in &self.gratings {
                    let a = g.angle + g.spin * t;
                    let arg = TAU * g.freq * (fx * a.cos() + fy * a.sin()) + g.phase + g.speed * t;
                    let v = g.amp * arg.sin();
                    for (c, p) in px.iter_mut().enumerate() {
                        *p += v * (2.0 * g.color[c] - 1.0);
                    }
                }
                for b in &self.blobs {
                    let cy = (b.pos[0] + b.vel[0] * t).rem_euclid(h as f64);
                    let cx = (b.pos[1] + b.vel[1] * t).rem_euclid(w as f64);
                    // wrap-around distance so objects re-enter on the far side
                    let wrap = |d: f64, n: f64| {
                        let d = d.abs() % n;
                        d.min(n - d)
                    };
                    let (dy, dx) = (wrap(fy - cy, h as f64), wrap(fx - cx, w as f64));
                    let inside = if b.square {
                        dy.max(dx) <= b.radius
                    } else {
                        dy * dy + dx * dx <= b.radius * b.radius
                    };
                    if inside {
                        let s = (TAU * b.stripe_freq * (fx * b.stripe_angle.cos() + fy * b.stripe_angle.sin())).sin();
                        let shade = 0.8 + 0.2 * s.signum();
                        px = b.color.map(|c| c * shade);
                    }
                }
                for (c, p) in px.iter().enumerate() {
                    data[c * plane + y * w + x] = quantize(*p);
                }
            }
        }
        img
    }
}

/// Round to the nearest 8-bit level so frames survive a PNG round trip.
fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Render every frame of a procedural video.
pub fn synth_video(spec: &VideoSpec) -> Result<Vec<Tensor>> {
    if spec.frames == 0 || spec.height == 0 || spec.width == 0 {
        return Err(EmtError::invalid("synthetic video needs frames and a non-empty size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scene = Scene::new(&mut rng, spec.height, spec.width);
    let refresh = spec.refresh_frames.max(1);
    let mut frames = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        if f > 0 && f % refresh == 0 {
            let slot = (f / refresh) % scene.blobs.len();
            // new objects start where they are at time f
            let mut b = new_blob(&mut rng, spec.height, spec.width, scene.hue);
            b.pos = [b.pos[0] - b.vel[0] * f as f64, b.pos[1] - b.vel[1] * f as f64];
            scene.blobs[slot] = b;
            for g in &mut scene.gratings {
                g.freq = (g.freq * rng.gen_range(0.9..1.1)).clamp(0.03, 0.24);
            }
        }
        frames.push(scene.render(f as f64, spec.height, spec.width));
    }
    Ok(frames)
}

/// Still images from a different family than the videos: smooth value
/// noise with random polygons and soft-edged ellipses, broad colour range.
pub fn synth_pretrain_images(count: usize, height: usize, width: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| pretrain_image(&mut rng, height, width)).collect()
}

fn pretrain_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    // coarse random lattice, bilinearly interpolated
    let cell = rng.gen_range(8..24) as f64;
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<[f64; 3]> = (0..gh * gw)
        .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
        .collect();
    struct Shape {
        center: [f64; 2],
        radii: [f64; 2],
        angle: f64,
        sides: usize,
        color: [f64; 3],
    }
    let shapes: Vec<Shape> = (0..rng.gen_range(2..6))
        .map(|_| Shape {
            center: [rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)],
            radii: [rng.gen_range(4.0..h as f64 / 3.0), rng.gen_range(4.0..w as f64 / 3.0)],
            angle: rng.gen_range(0.0..TAU),
            sides: rng.gen_range(0..6),
            color: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
        })
        .collect();
    let mut img = Tensor::zeros([1, 3, h, w]);
    let plane = h * w;
    let data = img.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (gy, gx) = (y as f64 / cell, x as f64 / cell);
            let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
            let (ty, tx) = (gy - iy as f64, gx - ix as f64);
            let at = |r: usize, c: usize| lattice[r * gw + c];
            let mut px = [0.0; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let top = at(iy, ix)[c] * (1.0 - tx) + at(iy, ix + 1)[c] * tx;
                let bot = at(iy + 1, ix)[c] * (1.0 - tx) + at(iy + 1, ix + 1)[c] * tx;
                *p = top * (1.0 - ty) + bot * ty;
            }
            for s in &shapes {
                let (dy, dx) = (y as f64 - s.center[0], x as f64 - s.center[1]);
                let (ry, rx) = (
                    dy * s.angle.cos() - dx * s.angle.sin(),
                    dy * s.angle.sin() + dx * s.angle.cos(),
                );
                let (u, v) = (ry / s.radii[0], rx / s.radii[1]);
                let inside = if s.sides < 3 {
                    u * u + v * v <= 1.0
                } else {
                    // regular polygon in the stretched frame
                    let theta = v.atan2(u);
                    let sector = TAU / s.sides as f64;
                    let local = (theta.rem_euclid(sector)) - sector / 2.0;
                    (u * u + v * v).sqrt() * local.cos() <= (sector / 2.0).cos()
                };
                if inside {
                    px = s.color;
                }
            }
            for (c, p) in px.iter().enumerate() {
                data[c * plane + y * w + x] = quantize(*p);
            }
        }
    }
    img
}
