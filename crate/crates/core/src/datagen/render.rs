//! 2-D sprite compositing: procedural backgrounds, textured sprites, camera
//! panning, and the pop injection that edits a scene before rendering.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Annotation, BackgroundKind, BugClass, DatagenError, GenConfig, TitleStyle};
use crate::bbox::BoundingBox;

/// Minimum sprite area eligible for a pop.
pub const MIN_POP_AREA: f64 = 16.0;
/// Downsampling factor of the degraded level-of-detail sprite.
pub const LOD_FACTOR: usize = 4;

/// Per-title colors derived from `palette_seed`.
#[derive(Clone, Debug)]
pub struct Palette {
    pub ground: [[u8; 3]; 3],
    pub sprites: Vec<[u8; 3]>,
    pub pattern_scale: f64,
}

impl Palette {
    pub fn from_style(style: &TitleStyle) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(style.palette_seed);
        let base: [[u8; 3]; 3] = match style.background_kind {
            BackgroundKind::Park => [[70, 130, 60], [95, 160, 75], [150, 135, 95]],
            BackgroundKind::Indoor => [[180, 170, 150], [140, 130, 120], [90, 80, 75]],
            BackgroundKind::Terrain => [[160, 120, 80], [120, 95, 70], [200, 180, 140]],
        };
        let ground = base.map(|c| c.map(|v| jitter(&mut rng, v, 20)));
        let sprites = (0..8)
            .map(|_| [rng.gen_range(20..=235), rng.gen_range(20..=235), rng.gen_range(20..=235)])
            .collect();
        Self {
            ground,
            sprites,
            pattern_scale: rng.gen_range(0.8..1.25),
        }
    }
}

fn jitter<R: Rng>(rng: &mut R, v: u8, amount: i32) -> u8 {
    (v as i32 + rng.gen_range(-amount..=amount)).clamp(0, 255) as u8
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [0, 1, 2].map(|i| (a[i] as f64 + (b[i] as f64 - a[i] as f64) * t).round() as u8)
}

/// Background color at integer world coordinates.
pub fn background_pixel(kind: BackgroundKind, palette: &Palette, wx: i64, wy: i64) -> [u8; 3] {
    let (x, y) = (wx as f64 * palette.pattern_scale, wy as f64 * palette.pattern_scale);
    let [c0, c1, c2] = palette.ground;
    match kind {
        BackgroundKind::Park => {
            let grass = 0.5 + 0.25 * (x * 0.21).sin() * (y * 0.17).cos() + 0.25 * ((x + 2.0 * y) * 0.05).sin();
            let path = ((x * 0.03 + y * 0.09).sin()).abs() < 0.12;
            if path {
                c2
            } else {
                lerp(c0, c1, grass)
            }
        }
        BackgroundKind::Indoor => {
            let tile = 10;
            let (tx, ty) = (wx.rem_euclid(tile), wy.rem_euclid(tile));
            if tx == 0 || ty == 0 {
                c2
            } else if (wx.div_euclid(tile) + wy.div_euclid(tile)) % 2 == 0 {
                c0
            } else {
                c1
            }
        }
        BackgroundKind::Terrain => {
            let h = (x * 0.07).sin() + (y * 0.045).cos() + 0.5 * ((x - y) * 0.11).sin();
            let band = ((h + 2.5) / 5.0 * 4.0).floor() as i64;
            match band.rem_euclid(3) {
                0 => c0,
                1 => c1,
                _ => lerp(c1, c2, 0.5),
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Ellipse,
    Diamond,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Stripes { period: usize, vertical: bool },
    Checker { period: usize },
    Dots { period: usize },
}

/// Rasterized sprite; `None` pixels are transparent.
#[derive(Clone, Debug, PartialEq)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Option<[u8; 3]>>,
}

impl Bitmap {
    pub fn get(&self, x: usize, y: usize) -> Option<[u8; 3]> {
        self.pixels[y * self.width + x]
    }

    pub fn coverage(&self) -> usize {
        self.pixels.iter().filter(|p| p.is_some()).count()
    }

    pub fn rasterize(shape: Shape, pattern: Pattern, w: usize, h: usize, base: [u8; 3], accent: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                let v = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                let inside = match shape {
                    Shape::Rect => true,
                    Shape::Ellipse => u * u + v * v <= 1.0,
                    Shape::Diamond => u.abs() + v.abs() <= 1.0,
                };
                if !inside {
                    pixels.push(None);
                    continue;
                }
                let on = match pattern {
                    Pattern::Stripes { period, vertical } => {
                        let t = if vertical { x } else { y };
                        (t / period) % 2 == 0
                    }
                    Pattern::Checker { period } => ((x / period) + (y / period)) % 2 == 0,
                    Pattern::Dots { period } => x % period == 0 && y % period == 0,
                };
                pixels.push(Some(if on { accent } else { base }));
            }
        }
        Self {
            width: w,
            height: h,
            pixels,
        }
    }

    /// Level-of-detail degradation: bilinear downsample by `factor`, then
    /// nearest-neighbour upsample back to the original size. Coverage is
    /// kept; transparent pixels do not contribute color.
    pub fn degraded(&self, factor: usize) -> Self {
        let sw = self.width.div_ceil(factor);
        let sh = self.height.div_ceil(factor);
        let mut small = vec![[0u8; 3]; sw * sh];
        for by in 0..sh {
            for bx in 0..sw {
                // bilinear sample at the centre of the source block
                let cx = (bx * factor) as f64 + (factor as f64 - 1.0) / 2.0;
                let cy = (by * factor) as f64 + (factor as f64 - 1.0) / 2.0;
                small[by * sw + bx] = self
                    .bilinear(cx, cy)
                    .or_else(|| self.block_mean(bx * factor, by * factor, factor))
                    .unwrap_or([0, 0, 0]);
            }
        }
        let pixels = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .map(|(x, y)| {
                self.get(x, y)
                    .map(|_| small[(y / factor) * sw + (x / factor)])
            })
            .collect();
        Self {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    fn block_mean(&self, x0: usize, y0: usize, size: usize) -> Option<[u8; 3]> {
        let mut acc = [0u32; 3];
        let mut n = 0;
        for y in y0..(y0 + size).min(self.height) {
            for x in x0..(x0 + size).min(self.width) {
                if let Some(c) = self.get(x, y) {
                    for i in 0..3 {
                        acc[i] += c[i] as u32;
                    }
                    n += 1;
                }
            }
        }
        (n > 0).then(|| acc.map(|v| ((v + n / 2) / n) as u8))
    }

    /// Bilinear sample over covered pixels only; `None` when no tap is covered.
    fn bilinear(&self, x: f64, y: f64) -> Option<[u8; 3]> {
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ];
        let mut acc = [0.0f64; 3];
        let mut wsum = 0.0;
        for (px, py, w) in taps {
            if let Some(c) = self.get(px, py) {
                for i in 0..3 {
                    acc[i] += w * c[i] as f64;
                }
                wsum += w;
            }
        }
        if wsum == 0.0 {
            return None;
        }
        Some(acc.map(|v| (v / wsum).round().clamp(0.0, 255.0) as u8))
    }
}

/// How a sprite misbehaves across the four frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PopEffect {
    /// Visible in frames 2..=3 only.
    Appear,
    /// Visible in frames 0..=1 only.
    Disappear,
    /// Degraded sprite from frame 2 on.
    LodSwap,
}

#[derive(Clone, Debug)]
pub struct SceneObject {
    /// World position of the top-left corner.
    pub world_x: i64,
    pub world_y: i64,
    pub sprite: Bitmap,
    pub pop: Option<PopEffect>,
}

/// A procedurally generated scene viewed through a panning camera.
#[derive(Clone, Debug)]
pub struct Scene {
    pub kind: BackgroundKind,
    pub palette: Palette,
    pub width: usize,
    pub height: usize,
    /// Integer camera offsets (world coordinates of the top-left pixel), one
    /// per frame.
    pub camera: [(i64, i64); 4],
    pub objects: Vec<SceneObject>,
    pub noise_sigma: f64,
}

impl Scene {
    pub fn random<R: Rng>(style: &TitleStyle, palette: &Palette, cfg: &GenConfig, rng: &mut R) -> Self {
        let (w, h) = (cfg.width, cfg.height);
        let start = (rng.gen_range(-10_000i64..10_000), rng.gen_range(-10_000i64..10_000));
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let path = |t: usize| {
            let d = style.camera_speed_px_per_frame * t as f64;
            (
                start.0 + (d * angle.cos()).round() as i64,
                start.1 + (d * angle.sin()).round() as i64,
            )
        };
        let camera = if cfg.static_pop_window {
            [path(2); 4]
        } else {
            [path(0), path(1), path(2), path(3)]
        };

        let expected = style.object_density * cfg.max_objects as f64;
        let jittered = expected * rng.gen_range(0.75..1.25);
        let count = (jittered.round() as usize).clamp(1, cfg.max_objects.max(1));
        let shapes = [Shape::Rect, Shape::Ellipse, Shape::Diamond];
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let ow = rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
            let oh = rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
            let shape = shapes[rng.gen_range(0..shapes.len())];
            let pattern = match rng.gen_range(0..3) {
                0 => Pattern::Stripes {
                    period: rng.gen_range(1..=2),
                    vertical: rng.gen(),
                },
                1 => Pattern::Checker {
                    period: rng.gen_range(1..=2),
                },
                _ => Pattern::Dots { period: 2 },
            };
            let base = palette.sprites[rng.gen_range(0..palette.sprites.len())];
            let accent = palette.sprites[rng.gen_range(0..palette.sprites.len())];
            let accent = if accent == base { base.map(|v| 255 - v) } else { accent };
            let sprite = Bitmap::rasterize(shape, pattern, ow, oh, base, accent);
            // place relative to the frame-2 view so most sprites are on screen
            let (cx, cy) = camera[2];
            let sx = rng.gen_range(-(ow as i64) / 2..(w as i64 - ow as i64 / 2));
            let sy = rng.gen_range(-(oh as i64) / 2..(h as i64 - oh as i64 / 2));
            objects.push(SceneObject {
                world_x: cx + sx,
                world_y: cy + sy,
                sprite,
                pop: None,
            });
        }
        Self {
            kind: style.background_kind,
            palette: palette.clone(),
            width: w,
            height: h,
            camera,
            objects,
            noise_sigma: style.noise_sigma,
        }
    }

    /// Screen-space box of object `i` in frame `t`.
    pub fn object_box(&self, i: usize, t: usize) -> BoundingBox {
        let o = &self.objects[i];
        let x = (o.world_x - self.camera[t].0) as f64;
        let y = (o.world_y - self.camera[t].1) as f64;
        BoundingBox::raw(x, y, x + o.sprite.width as f64, y + o.sprite.height as f64)
    }

    /// Renders the four frames without noise. Popped objects are drawn last.
    pub fn render_clean(&self) -> [RgbImage; 4] {
        let mut backgrounds: Vec<((i64, i64), RgbImage)> = Vec::new();
        std::array::from_fn(|t| {
            let pose = self.camera[t];
            let bg = match backgrounds.iter().find(|(p, _)| *p == pose) {
                Some((_, img)) => img.clone(),
                None => {
                    let img = self.render_background(pose);
                    backgrounds.push((pose, img.clone()));
                    img
                }
            };
            self.draw_objects(bg, t)
        })
    }

    fn render_background(&self, (cx, cy): (i64, i64)) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let c = background_pixel(self.kind, &self.palette, cx + x as i64, cy + y as i64);
                img.put_pixel(x as u32, y as u32, Rgb(c));
            }
        }
        img
    }

    fn draw_objects(&self, mut img: RgbImage, t: usize) -> RgbImage {
        let (cx, cy) = self.camera[t];
        let order = self
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.pop.is_none())
            .chain(self.objects.iter().enumerate().filter(|(_, o)| o.pop.is_some()));
        for (_, o) in order {
            let sprite = match o.pop {
                Some(PopEffect::Appear) if t < 2 => continue,
                Some(PopEffect::Disappear) if t >= 2 => continue,
                Some(PopEffect::LodSwap) if t >= 2 => o.sprite.degraded(LOD_FACTOR),
                _ => o.sprite.clone(),
            };
            let ox = o.world_x - cx;
            let oy = o.world_y - cy;
            for sy in 0..sprite.height {
                for sx in 0..sprite.width {
                    let (px, py) = (ox + sx as i64, oy + sy as i64);
                    if px < 0 || py < 0 || px >= self.width as i64 || py >= self.height as i64 {
                        continue;
                    }
                    if let Some(c) = sprite.get(sx, sy) {
                        img.put_pixel(px as u32, py as u32, Rgb(c));
                    }
                }
            }
        }
        img
    }

    /// Renders the frames and adds independent Gaussian pixel noise.
    pub fn render<R: Rng>(&self, rng: &mut R) -> [RgbImage; 4] {
        let mut frames = self.render_clean();
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
            for f in &mut frames {
                for p in f.pixels_mut() {
                    for c in p.0.iter_mut() {
                        let v = *c as f64 + normal.sample(rng);
                        *c = v.round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
        frames
    }
}

/// Marks one eligible object of `scene` as popped and returns the frames
/// rendered with the bug plus its annotation in frame-2 coordinates.
///
/// An object is eligible when it is fully visible in frame 2, covers at
/// least [`MIN_POP_AREA`] pixels of box area, is not already popped and, for
/// LOD pops, actually changes when degraded.
pub fn inject_pop<R: Rng>(
    scene: &mut Scene,
    bug_class: BugClass,
    rng: &mut R,
) -> Result<([RgbImage; 4], Annotation), DatagenError> {
    let annotation = mark_pop(scene, bug_class, rng)?;
    Ok((scene.render_clean(), annotation))
}

/// [`inject_pop`] without rendering.
pub(crate) fn mark_pop<R: Rng>(
    scene: &mut Scene,
    bug_class: BugClass,
    rng: &mut R,
) -> Result<Annotation, DatagenError> {
    let (w, h) = (scene.width as f64, scene.height as f64);
    let eligible: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| {
            let b = scene.object_box(i, 2);
            let o = &scene.objects[i];
            o.pop.is_none()
                && b.inside(w, h)
                && b.area() >= MIN_POP_AREA
                && (bug_class != BugClass::LodPop || o.sprite.degraded(LOD_FACTOR) != o.sprite)
        })
        .collect();
    if eligible.is_empty() {
        return Err(DatagenError::NoEligibleObject);
    }
    let target = eligible[rng.gen_range(0..eligible.len())];
    let effect = match bug_class {
        BugClass::CullingPop => {
            if rng.gen_bool(0.5) {
                PopEffect::Appear
            } else {
                PopEffect::Disappear
            }
        }
        BugClass::LodPop => PopEffect::LodSwap,
    };
    scene.objects[target].pop = Some(effect);
    Ok(Annotation {
        bbox: scene.object_box(target, 2),
        bug_class,
        frame_index: 2,
    })
}
