//! Procedural faces: a smooth-shaded color "photo" and a stroke "sketch" of
//! the same identity. The sketch can be rendered from a geometrically
//! perturbed copy of the face so that the two domains disagree on feature
//! placement the way hand-drawn sketches do.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureStyle {
    /// Thin graphite lines with hatched hair and paper grain.
    Pencil,
    /// Heavy smudged strokes with tonal shading.
    Charcoal,
    /// Clean uniform outlines with flat fills, like assembled composites.
    Composite,
}

impl TextureStyle {
    pub const ALL: [TextureStyle; 3] = [TextureStyle::Pencil, TextureStyle::Charcoal, TextureStyle::Composite];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFaceParams {
    pub identity_seed: u64,
    /// Landmark displacement applied to the sketch only, as a fraction of the
    /// face height.
    pub geometry_jitter: f64,
    pub texture_style: TextureStyle,
}

impl SyntheticFaceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.geometry_jitter >= 0.0 && self.geometry_jitter.is_finite()) {
            return Err(Error::Domain(format!("geometry jitter {} must be a nonnegative real", self.geometry_jitter)));
        }
        Ok(())
    }
}

type Rgb = [f64; 3];

/// Placement and size of every facial part in unit image coordinates
/// (`x` right, `y` down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceGeometry {
    pub head_center: [f64; 2],
    pub head_radii: [f64; 2],
    pub hairline: f64,
    pub hair_volume: f64,
    pub hair_length: f64,
    pub eyes: [[f64; 2]; 2],
    pub eye_radii: [f64; 2],
    pub eye_tilt: f64,
    pub brows: [[f64; 2]; 2],
    pub brow_half_length: f64,
    pub brow_thickness: f64,
    pub brow_tilt: f64,
    pub nose_tip: [f64; 2],
    pub nose_length: f64,
    pub nose_width: f64,
    pub mouth: [f64; 2],
    pub mouth_half_width: f64,
    pub lip_thickness: f64,
    pub ear_radii: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceAppearance {
    pub skin: Rgb,
    pub hair: Rgb,
    pub iris: Rgb,
    pub lips: Rgb,
    pub background: Rgb,
    pub light: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFace {
    pub geometry: FaceGeometry,
    pub appearance: FaceAppearance,
}

/// Nuisance variation for extra photos of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct PhotoVariation {
    pub shift: [f64; 2],
    pub scale: f64,
    pub light: [f64; 3],
    pub background: Rgb,
    pub color_gain: Rgb,
    pub noise_seed: u64,
}

/// Named landmark positions in unit coordinates.
pub type Landmarks = Vec<(&'static str, [f64; 2])>;

fn range<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn scale_rgb(a: Rgb, s: f64) -> Rgb {
    [a[0] * s, a[1] * s, a[2] * s]
}

impl SyntheticFace {
    /// Samples an identity. The same seed always yields the same face.
    pub fn sample(identity_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(identity_seed);
        let rng = &mut rng;
        let cx = 0.5 + range(rng, -0.015, 0.015);
        let cy = 0.53 + range(rng, -0.02, 0.02);
        let rx = range(rng, 0.25, 0.33);
        let ry = range(rng, 0.33, 0.41);
        let eye_y = cy + ry * range(rng, -0.25, -0.05);
        let eye_dx = rx * range(rng, 0.32, 0.48);
        let eye_radii = [rx * range(rng, 0.13, 0.22), ry * range(rng, 0.05, 0.09)];
        let brow_gap = ry * range(rng, 0.12, 0.22);
        let nose_tip_y = cy + ry * range(rng, 0.12, 0.30);
        let mouth_y = nose_tip_y + ry * range(rng, 0.18, 0.30);
        let geometry = FaceGeometry {
            head_center: [cx, cy],
            head_radii: [rx, ry],
            hairline: cy - ry * range(rng, 0.45, 0.75),
            hair_volume: range(rng, 1.0, 1.18),
            hair_length: range(rng, -0.2, 0.5),
            eyes: [[cx - eye_dx, eye_y], [cx + eye_dx, eye_y]],
            eye_radii,
            eye_tilt: range(rng, -0.15, 0.15),
            brows: [[cx - eye_dx, eye_y - brow_gap], [cx + eye_dx, eye_y - brow_gap]],
            brow_half_length: eye_radii[0] * range(rng, 1.0, 1.5),
            brow_thickness: ry * range(rng, 0.015, 0.045),
            brow_tilt: range(rng, -0.25, 0.25),
            nose_tip: [cx + range(rng, -0.008, 0.008), nose_tip_y],
            nose_length: ry * range(rng, 0.25, 0.45),
            nose_width: rx * range(rng, 0.14, 0.26),
            mouth: [cx + range(rng, -0.008, 0.008), mouth_y.min(cy + ry * 0.75)],
            mouth_half_width: rx * range(rng, 0.25, 0.45),
            lip_thickness: ry * range(rng, 0.03, 0.07),
            ear_radii: [rx * range(rng, 0.12, 0.2), ry * range(rng, 0.15, 0.25)],
        };
        let tone = range(rng, 0.0, 1.0);
        let skin = mix([0.96, 0.80, 0.68], [0.45, 0.29, 0.19], tone);
        let hair_shade = range(rng, 0.0, 1.0);
        let hair = mix([0.78, 0.62, 0.36], [0.08, 0.06, 0.05], hair_shade);
        let hair = mix(hair, [0.45, 0.18, 0.08], range(rng, 0.0, 0.4));
        let iris = mix([0.25, 0.45, 0.70], [0.25, 0.15, 0.08], range(rng, 0.0, 1.0));
        let lips = mix(scale_rgb(skin, 0.85), [0.70, 0.25, 0.28], range(rng, 0.3, 0.8));
        let background = mix([0.62, 0.66, 0.72], [range(rng, 0.4, 0.9), range(rng, 0.4, 0.9), range(rng, 0.4, 0.9)], 0.2);
        let light = normalize([range(rng, -0.5, 0.5), range(rng, -0.6, -0.1), 1.0]);
        Self { geometry, appearance: FaceAppearance { skin, hair, iris, lips, background, light } }
    }

    /// A random nuisance variation for pretraining data.
    pub fn variation<R: Rng>(&self, rng: &mut R) -> PhotoVariation {
        let bg = self.appearance.background;
        PhotoVariation {
            shift: [range(rng, -0.02, 0.02), range(rng, -0.02, 0.02)],
            scale: range(rng, 0.96, 1.04),
            light: normalize([range(rng, -0.5, 0.5), range(rng, -0.6, 0.0), 1.0]),
            background: [bg[0] + range(rng, -0.1, 0.1), bg[1] + range(rng, -0.1, 0.1), bg[2] + range(rng, -0.1, 0.1)],
            color_gain: [range(rng, 0.92, 1.08), range(rng, 0.92, 1.08), range(rng, 0.92, 1.08)],
            noise_seed: rng.random(),
        }
    }

    pub fn landmarks(&self) -> Landmarks {
        landmarks_of(&self.geometry)
    }

    /// Copy of the geometry with every part displaced by up to `jitter` face
    /// heights. The displacement directions come from `jitter_seed`, so the
    /// mean landmark offset grows linearly with `jitter`.
    pub fn jittered_geometry(&self, jitter: f64, jitter_seed: u64) -> FaceGeometry {
        let mut g = self.geometry.clone();
        if jitter == 0.0 {
            return g;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let face_h = 2.0 * g.head_radii[1];
        let offset = |rng: &mut ChaCha8Rng| {
            let a = range(rng, 0.0, std::f64::consts::TAU);
            let m = range(rng, 0.5, 1.0) * jitter * face_h;
            [m * a.cos(), m * a.sin()]
        };
        let shift = |p: &mut [f64; 2], rng: &mut ChaCha8Rng| {
            let d = offset(rng);
            p[0] += d[0];
            p[1] += d[1];
        };
        for p in g.eyes.iter_mut() {
            shift(p, &mut rng);
        }
        for p in g.brows.iter_mut() {
            shift(p, &mut rng);
        }
        shift(&mut g.nose_tip, &mut rng);
        shift(&mut g.mouth, &mut rng);
        let grow = |v: &mut f64, rng: &mut ChaCha8Rng| {
            let s: f64 = unit.sample(rng);
            *v *= (1.0 + 2.0 * jitter * s.clamp(-2.0, 2.0)).max(0.5);
        };
        grow(&mut g.head_radii[0], &mut rng);
        grow(&mut g.head_radii[1], &mut rng);
        grow(&mut g.eye_radii[0], &mut rng);
        grow(&mut g.nose_length, &mut rng);
        grow(&mut g.mouth_half_width, &mut rng);
        g.hairline += range(&mut rng, -1.0, 1.0) * jitter * face_h * 0.5;
        g
    }

    pub fn render_photo(&self, resolution: usize) -> Vec<[f64; 3]> {
        let canonical = PhotoVariation {
            shift: [0.0, 0.0],
            scale: 1.0,
            light: self.appearance.light,
            background: self.appearance.background,
            color_gain: [1.0; 3],
            noise_seed: 0,
        };
        self.render_photo_with(resolution, &canonical)
    }

    /// Row-major RGB pixels in `[0, 1]`.
    pub fn render_photo_with(&self, resolution: usize, var: &PhotoVariation) -> Vec<[f64; 3]> {
        let g = &self.geometry;
        let a = &self.appearance;
        let px = 1.0 / resolution as f64;
        let grain = ValueNoise::new(var.noise_seed ^ 0x5eed, 24.0);
        let mut sensor = ChaCha8Rng::seed_from_u64(var.noise_seed);
        let sensor_noise = Normal::new(0.0, 0.012).expect("normal");
        let [cx, cy] = g.head_center;
        let [rx, ry] = g.head_radii;
        let mut out = Vec::with_capacity(resolution * resolution);
        for j in 0..resolution {
            for i in 0..resolution {
                let u0 = (i as f64 + 0.5) * px;
                let v0 = (j as f64 + 0.5) * px;
                let u = (u0 - 0.5 - var.shift[0]) / var.scale + 0.5;
                let v = (v0 - 0.5 - var.shift[1]) / var.scale + 0.5;
                let p = [u, v];
                let aa = px / var.scale;
                let mut c = mix(var.background, scale_rgb(var.background, 0.8), v0);

                let hair_back = cov(sd_ellipse(p, [cx, cy - ry * 0.08], [rx * g.hair_volume * 1.05, ry * g.hair_volume]), aa)
                    * cov(v - (cy + ry * g.hair_length), aa);
                c = mix(c, scale_rgb(a.hair, 0.8), hair_back);
                let neck = cov(sd_box(p, [cx, cy + ry * 1.1], [rx * 0.45, ry * 0.45]), aa);
                c = mix(c, scale_rgb(a.skin, 0.7), neck);
                for s in [-1.0, 1.0] {
                    let ear = cov(sd_ellipse(p, [cx + s * rx, g.eyes[0][1] + ry * 0.15], g.ear_radii), aa);
                    c = mix(c, scale_rgb(a.skin, 0.85), ear);
                }

                let head = cov(sd_ellipse(p, [cx, cy], [rx, ry]), aa);
                let nx = ((u - cx) / rx).clamp(-1.0, 1.0);
                let ny = ((v - cy) / ry).clamp(-1.0, 1.0);
                let nz = (1.0 - nx * nx - ny * ny).max(0.0).sqrt();
                let lambert = (nx * var.light[0] + ny * var.light[1] + nz * var.light[2]).max(0.0);
                let skin = scale_rgb(a.skin, 0.55 + 0.5 * lambert + 0.04 * grain.at(u, v));
                c = mix(c, skin, head);

                let fringe = g.hairline + 0.03 * (((u - cx) / rx) * 3.0).cos();
                let cap = head * cov(v - fringe, aa) * cov(sd_ellipse(p, [cx, cy - ry * 0.08], [rx * 1.05, ry]), aa);
                let hair_col = scale_rgb(a.hair, 0.85 + 0.3 * lambert + 0.08 * grain.at(u * 3.0, v * 0.5));
                c = mix(c, hair_col, cap);

                for (k, e) in g.eyes.iter().enumerate() {
                    let tilt = if k == 0 { g.eye_tilt } else { -g.eye_tilt };
                    let q = rotate(p, *e, tilt);
                    c = mix(c, scale_rgb(a.skin, 0.75), cov(sd_ellipse(q, [e[0], e[1] - g.eye_radii[1] * 0.4], [g.eye_radii[0] * 1.2, g.eye_radii[1] * 1.4]), aa) * 0.5);
                    c = mix(c, [0.93, 0.92, 0.9], cov(sd_ellipse(q, *e, g.eye_radii), aa));
                    let iris_r = g.eye_radii[1] * 0.95;
                    c = mix(c, a.iris, cov(sd_circle(p, *e, iris_r), aa) * cov(sd_ellipse(q, *e, g.eye_radii), aa));
                    c = mix(c, [0.03, 0.03, 0.03], cov(sd_circle(p, *e, iris_r * 0.45), aa));
                }
                for (k, b) in g.brows.iter().enumerate() {
                    let t = if k == 0 { g.brow_tilt } else { -g.brow_tilt };
                    let d = [g.brow_half_length * t.cos(), g.brow_half_length * t.sin()];
                    let brow = cov(sd_segment(p, [b[0] - d[0], b[1] - d[1]], [b[0] + d[0], b[1] + d[1]]) - g.brow_thickness, aa);
                    c = mix(c, scale_rgb(a.hair, 0.8), brow);
                }
                let n = g.nose_tip;
                let ridge = cov(sd_segment(p, [n[0] + g.nose_width * 0.4, n[1] - g.nose_length], [n[0] + g.nose_width * 0.5, n[1]]) - px * 0.8, aa);
                c = mix(c, scale_rgb(a.skin, 0.7), ridge * 0.6);
                c = mix(c, scale_rgb(a.skin, 0.8), cov(sd_ellipse(p, [n[0], n[1] - g.nose_length * 0.1], [g.nose_width * 0.6, g.nose_length * 0.25]), aa) * 0.4);
                for s in [-1.0, 1.0] {
                    let nostril = cov(sd_ellipse(p, [n[0] + s * g.nose_width * 0.45, n[1]], [g.nose_width * 0.22, g.nose_width * 0.13]), aa);
                    c = mix(c, scale_rgb(a.skin, 0.35), nostril);
                }
                let m = g.mouth;
                let lips = cov(sd_ellipse(p, m, [g.mouth_half_width, g.lip_thickness * 1.6]), aa);
                c = mix(c, a.lips, lips);
                let seam = cov(sd_segment(p, [m[0] - g.mouth_half_width, m[1]], [m[0] + g.mouth_half_width, m[1]]) - px * 0.6, aa);
                c = mix(c, scale_rgb(a.lips, 0.4), seam);

                let mut rgb = [0.0; 3];
                for ch in 0..3 {
                    rgb[ch] = (c[ch] * var.color_gain[ch] + sensor_noise.sample(&mut sensor)).clamp(0.0, 1.0);
                }
                out.push(rgb);
            }
        }
        out
    }

    /// Row-major gray values in `[0, 1]` (paper white is near 1).
    pub fn render_sketch(&self, resolution: usize, style: TextureStyle, geometry: &FaceGeometry, seed: u64) -> Vec<f64> {
        let g = geometry;
        let a = &self.appearance;
        let px = 1.0 / resolution as f64;
        let (width, ink, smudge) = match style {
            TextureStyle::Pencil => (0.6, 0.75, 0.0),
            TextureStyle::Charcoal => (1.3, 0.95, 1.0),
            TextureStyle::Composite => (0.8, 0.9, 0.0),
        };
        let w = width * px;
        let paper = ValueNoise::new(seed ^ 0xa11ce, 40.0);
        let fiber = ValueNoise::new(seed ^ 0xf1be, 9.0);
        let hair_tone = 1.0 - luminance(a.hair);
        let skin_tone = ((1.0 - luminance(a.skin) - 0.15) / 0.55).clamp(0.0, 1.0);
        let [cx, cy] = g.head_center;
        let [rx, ry] = g.head_radii;
        let mut out = Vec::with_capacity(resolution * resolution);
        for j in 0..resolution {
            for i in 0..resolution {
                let u = (i as f64 + 0.5) * px;
                let v = (j as f64 + 0.5) * px;
                let p = [u, v];
                let grain = paper.at(u, v);
                let mut dark: f64 = 0.0;
                let stroke = |sd: f64, strength: f64| cov(sd.abs() - w, px) * strength;

                let hair_shape = sd_ellipse(p, [cx, cy - ry * 0.08], [rx * g.hair_volume * 1.05, ry * g.hair_volume]).max(v - (cy + ry * g.hair_length));
                let head_sd = sd_ellipse(p, [cx, cy], [rx, ry]);
                let fringe = g.hairline + 0.03 * (((u - cx) / rx) * 3.0).cos();
                let cap_sd = head_sd.max(v - fringe);
                dark = dark.max(stroke(hair_shape.max(-head_sd), ink * 0.8));
                dark = dark.max(stroke(head_sd, ink * cov(fringe - v, px)));
                dark = dark.max(stroke(v - fringe, ink * 0.8 * cov(head_sd, px)));
                for s in [-1.0, 1.0] {
                    dark = dark.max(stroke(sd_ellipse(p, [cx + s * rx, g.eyes[0][1] + ry * 0.15], g.ear_radii).max(-head_sd), ink * 0.8));
                }
                dark = dark.max(stroke(sd_box(p, [cx, cy + ry * 1.1], [rx * 0.45, ry * 0.45]).max(-head_sd), ink * 0.7));
                for (k, e) in g.eyes.iter().enumerate() {
                    let tilt = if k == 0 { g.eye_tilt } else { -g.eye_tilt };
                    let q = rotate(p, *e, tilt);
                    dark = dark.max(stroke(sd_ellipse(q, *e, g.eye_radii), ink));
                    let iris = cov(sd_circle(p, *e, g.eye_radii[1] * 0.9), px) * cov(sd_ellipse(q, *e, g.eye_radii), px);
                    dark = dark.max(iris * ink * 0.85);
                }
                for (k, b) in g.brows.iter().enumerate() {
                    let t = if k == 0 { g.brow_tilt } else { -g.brow_tilt };
                    let d = [g.brow_half_length * t.cos(), g.brow_half_length * t.sin()];
                    let sd = sd_segment(p, [b[0] - d[0], b[1] - d[1]], [b[0] + d[0], b[1] + d[1]]) - g.brow_thickness;
                    let fill = cov(sd, px) * (0.35 + 0.5 * hair_tone);
                    dark = dark.max(fill * ink);
                }
                let n = g.nose_tip;
                dark = dark.max(stroke(sd_segment(p, [n[0] + g.nose_width * 0.4, n[1] - g.nose_length], [n[0] + g.nose_width * 0.5, n[1]]), ink * 0.6));
                for s in [-1.0, 1.0] {
                    dark = dark.max(stroke(sd_ellipse(p, [n[0] + s * g.nose_width * 0.45, n[1]], [g.nose_width * 0.22, g.nose_width * 0.13]), ink * 0.8));
                }
                let m = g.mouth;
                dark = dark.max(stroke(sd_ellipse(p, m, [g.mouth_half_width, g.lip_thickness * 1.6]), ink * 0.7));
                dark = dark.max(stroke(sd_segment(p, [m[0] - g.mouth_half_width, m[1]], [m[0] + g.mouth_half_width, m[1]]), ink));

                let in_hair = cov(hair_shape, px) * (1.0 - cov(head_sd, px) * (1.0 - cov(cap_sd, px)));
                let in_face = cov(head_sd, px) * (1.0 - cov(cap_sd, px));
                let shade = 0.04 + 0.26 * skin_tone;
                let tone = match style {
                    TextureStyle::Pencil => {
                        let hatch = (((u + v) / px * 0.9).sin() * 0.5 + 0.5).powi(3);
                        let cross = (((u - v) / px * 0.7).sin() * 0.5 + 0.5).powi(3);
                        in_hair * hair_tone * 0.6 * hatch + in_face * shade * 1.4 * cross
                    }
                    TextureStyle::Charcoal => {
                        let nx = ((u - cx) / rx).clamp(-1.0, 1.0);
                        let side = cov(head_sd, px) * (0.25 * nx.abs().powi(3));
                        in_hair * (0.25 + 0.55 * hair_tone) + in_face * shade + side + 0.1 * fiber.at(u, v).abs()
                    }
                    TextureStyle::Composite => in_hair * (0.1 + 0.6 * hair_tone) + in_face * shade,
                };
                dark = dark.max(tone);
                let texture = match style {
                    TextureStyle::Pencil => 1.0 - 0.35 * fiber.at(u * 2.0, v * 2.0).abs(),
                    TextureStyle::Charcoal => 1.0 - 0.2 * fiber.at(u, v).abs(),
                    TextureStyle::Composite => 1.0,
                };
                let blur = smudge * 0.05 * grain;
                let paper_white = 0.97 - 0.03 * grain.abs();
                out.push((paper_white - dark * texture - blur).clamp(0.0, 1.0));
            }
        }
        out
    }
}

fn landmarks_of(g: &FaceGeometry) -> Landmarks {
    let [cx, cy] = g.head_center;
    let [rx, ry] = g.head_radii;
    vec![
        ("eye_left", g.eyes[0]),
        ("eye_right", g.eyes[1]),
        ("brow_left", g.brows[0]),
        ("brow_right", g.brows[1]),
        ("nose_tip", g.nose_tip),
        ("mouth_center", g.mouth),
        ("mouth_left", [g.mouth[0] - g.mouth_half_width, g.mouth[1]]),
        ("mouth_right", [g.mouth[0] + g.mouth_half_width, g.mouth[1]]),
        ("nose_bridge", [g.nose_tip[0], g.nose_tip[1] - g.nose_length]),
        ("chin", [cx, cy + ry]),
        ("jaw_left", [cx - rx, cy]),
        ("jaw_right", [cx + rx, cy]),
        ("hairline", [cx, g.hairline]),
    ]
}

/// Landmarks of an arbitrary geometry.
pub fn geometry_landmarks(g: &FaceGeometry) -> Landmarks {
    landmarks_of(g)
}

/// Mean Euclidean distance between corresponding landmarks, in unit coordinates.
pub fn mean_landmark_offset(a: &Landmarks, b: &Landmarks) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|((_, p), (_, q))| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum();
    total / a.len().max(1) as f64
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn luminance(c: Rgb) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Coverage of a shape with signed distance `sd`, anti-aliased over `aa`.
fn cov(sd: f64, aa: f64) -> f64 {
    (0.5 - sd / aa).clamp(0.0, 1.0)
}

fn sd_circle(p: [f64; 2], c: [f64; 2], r: f64) -> f64 {
    ((p[0] - c[0]).hypot(p[1] - c[1])) - r
}

/// Approximate signed distance to an axis-aligned ellipse.
fn sd_ellipse(p: [f64; 2], c: [f64; 2], r: [f64; 2]) -> f64 {
    let dx = (p[0] - c[0]) / r[0];
    let dy = (p[1] - c[1]) / r[1];
    let k = dx.hypot(dy);
    if k == 0.0 {
        return -r[0].min(r[1]);
    }
    let gx = dx / r[0];
    let gy = dy / r[1];
    (k - 1.0) * k / gx.hypot(gy).max(1e-12)
}

fn sd_box(p: [f64; 2], c: [f64; 2], half: [f64; 2]) -> f64 {
    let dx = (p[0] - c[0]).abs() - half[0];
    let dy = (p[1] - c[1]).abs() - half[1];
    dx.max(0.0).hypot(dy.max(0.0)) + dx.max(dy).min(0.0)
}

fn sd_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let pa = [p[0] - a[0], p[1] - a[1]];
    let ba = [b[0] - a[0], b[1] - a[1]];
    let h = ((pa[0] * ba[0] + pa[1] * ba[1]) / (ba[0] * ba[0] + ba[1] * ba[1]).max(1e-12)).clamp(0.0, 1.0);
    (pa[0] - ba[0] * h).hypot(pa[1] - ba[1] * h)
}

fn rotate(p: [f64; 2], c: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, co) = angle.sin_cos();
    let d = [p[0] - c[0], p[1] - c[1]];
    [c[0] + co * d[0] + s * d[1], c[1] - s * d[0] + co * d[1]]
}

/// Smooth lattice noise in roughly `[-1, 1]`.
struct ValueNoise {
    table: Vec<f64>,
    freq: f64,
}

impl ValueNoise {
    const N: usize = 64;

    fn new(seed: u64, freq: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..Self::N * Self::N).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { table, freq }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let x = u * self.freq;
        let y = v * self.freq;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let n = Self::N as i64;
        let idx = |a: f64, b: f64| {
            let i = (a as i64).rem_euclid(n) as usize;
            let j = (b as i64).rem_euclid(n) as usize;
            self.table[j * Self::N + i]
        };
        let top = idx(x0, y0) + (idx(x0 + 1.0, y0) - idx(x0, y0)) * s(fx);
        let bottom = idx(x0, y0 + 1.0) + (idx(x0 + 1.0, y0 + 1.0) - idx(x0, y0 + 1.0)) * s(fx);
        top + (bottom - top) * s(fy)
    }
}
