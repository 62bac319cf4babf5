//! Deterministic synthetic datasets.
//!
//! `synth_blobs` is the fast 2-D property-test fixture. `synth_digits` and
//! `synth_garments` render 28x28 grayscale images procedurally (stroke
//! glyphs vs. filled textured silhouettes) so the desk-scale pipelines can
//! run in environments where the real IDX archives are not present.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numeric::derive_seed;

use super::{Dataset, Split};

/// K isotropic Gaussian clusters in 2-D, min-max scaled into [0,1]^2.
/// Cluster centers sit on a circle of radius `separation` (cluster std is 1),
/// so large separation means linearly separable.
pub fn synth_blobs(n: usize, k: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if k == 0 || n < k {
        return Err(crate::error::Error::Argument(format!(
            "synth_blobs needs n >= K >= 1, got n={n}, K={k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x626c_6f62, 0));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut points = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let angle = 2.0 * std::f64::consts::PI * class as f64 / k as f64;
        let cx = separation * angle.cos();
        let cy = separation * angle.sin();
        points.push(cx + normal.sample(&mut rng));
        points.push(cy + normal.sample(&mut rng));
        labels.push(class as i32);
    }
    // min-max scale each coordinate into [0, 1]
    for dim in 0..2 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            lo = lo.min(points[2 * i + dim]);
            hi = hi.max(points[2 * i + dim]);
        }
        let range = (hi - lo).max(1e-12);
        for i in 0..n {
            points[2 * i + dim] = (points[2 * i + dim] - lo) / range;
        }
    }
    let inputs = Array4::from_shape_vec((n, 1, 1, 2), points)
        .map_err(|e| crate::error::Error::Consistency(e.to_string()))?;
    Dataset::new(inputs, labels, k, format!("blobs{k}"), Split::Train)
}

const SIDE: usize = 28;

#[derive(Clone, Copy)]
struct Affine {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    tx: f64,
    ty: f64,
}

impl Affine {
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y + self.tx, self.c * x + self.d * y + self.ty)
    }
}

fn random_affine(rng: &mut ChaCha8Rng) -> Affine {
    let angle: f64 = rng.random_range(-0.22..0.22);
    let sx: f64 = rng.random_range(0.82..1.12);
    let sy: f64 = rng.random_range(0.82..1.12);
    let shear: f64 = rng.random_range(-0.15..0.15);
    let (s, c) = angle.sin_cos();
    // rotate * shear * scale around the glyph center (0.5, 0.5)
    let a = c * sx + (-s) * shear * sx;
    let b = -s * sy;
    let cc = s * sx + c * shear * sx;
    let d = c * sy;
    let tx: f64 = 0.5 + rng.random_range(-0.06..0.06) - (a * 0.5 + b * 0.5);
    let ty: f64 = 0.5 + rng.random_range(-0.06..0.06) - (cc * 0.5 + d * 0.5);
    Affine { a, b, c: cc, d, tx, ty }
}

fn dist_to_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let vx = bx - ax;
    let vy = by - ay;
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let dx = px - (ax + t * vx);
    let dy = py - (ay + t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, n: usize) -> Vec<(f64, f64)> {
    (0..=n)
        .map(|i| {
            let t = from + (to - from) * i as f64 / n as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke polylines for each digit class, in unit glyph coordinates
/// (x right, y down).
fn digit_strokes(class: usize) -> Vec<Vec<(f64, f64)>> {
    use std::f64::consts::PI;
    let l = 0.28;
    let r = 0.72;
    let t = 0.14;
    let b = 0.86;
    match class {
        0 => vec![arc(0.5, 0.5, 0.24, 0.36, 0.0, 2.0 * PI, 24)],
        1 => vec![vec![(0.42, 0.26), (0.54, t)], vec![(0.54, t), (0.54, b)]],
        2 => vec![
            arc(0.5, 0.32, 0.22, 0.18, -PI, 0.0, 12),
            vec![(r, 0.32), (l, b)],
            vec![(l, b), (r, b)],
        ],
        3 => vec![
            arc(0.47, 0.32, 0.23, 0.18, -PI, PI * 0.5, 14),
            arc(0.47, 0.68, 0.25, 0.19, -PI * 0.5, PI, 14),
        ],
        4 => vec![
            vec![(0.62, t), (l, 0.62)],
            vec![(l, 0.62), (0.78, 0.62)],
            vec![(0.62, 0.38), (0.62, b)],
        ],
        5 => vec![
            vec![(r, t), (0.32, t)],
            vec![(0.32, t), (0.3, 0.48)],
            arc(0.48, 0.66, 0.24, 0.21, -PI * 0.55, PI * 0.85, 16),
        ],
        6 => vec![
            vec![(0.66, t), (0.36, 0.52)],
            arc(0.5, 0.66, 0.21, 0.2, 0.0, 2.0 * PI, 20),
        ],
        7 => vec![vec![(l, t), (r, t)], vec![(r, t), (0.44, b)]],
        8 => vec![
            arc(0.5, 0.32, 0.19, 0.17, 0.0, 2.0 * PI, 18),
            arc(0.5, 0.68, 0.23, 0.19, 0.0, 2.0 * PI, 18),
        ],
        9 => vec![
            arc(0.5, 0.34, 0.21, 0.2, 0.0, 2.0 * PI, 20),
            vec![(0.68, 0.42), (0.56, b)],
        ],
        _ => unreachable!("digit class out of range"),
    }
}

fn render_digit(class: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let aff = random_affine(rng);
    let jitter = Normal::new(0.0, 0.014).unwrap();
    let strokes: Vec<Vec<(f64, f64)>> = digit_strokes(class)
        .into_iter()
        .map(|poly| {
            poly.into_iter()
                .map(|(x, y)| {
                    let (x, y) = aff.apply(x, y);
                    (x + jitter.sample(rng), y + jitter.sample(rng))
                })
                .collect()
        })
        .collect();
    let thick: f64 = rng.random_range(0.040..0.068);
    let ink: f64 = rng.random_range(0.78..1.0);
    let aa = 0.03;
    let noise = Normal::new(0.0, 0.02).unwrap();
    for py in 0..SIDE {
        for px in 0..SIDE {
            let x = (px as f64 + 0.5) / SIDE as f64;
            let y = (py as f64 + 0.5) / SIDE as f64;
            let mut dist = f64::INFINITY;
            for poly in &strokes {
                for seg in poly.windows(2) {
                    dist = dist.min(dist_to_segment(x, y, seg[0].0, seg[0].1, seg[1].0, seg[1].1));
                }
            }
            let coverage = ((thick - dist) / aa + 0.5).clamp(0.0, 1.0);
            let v = ink * coverage + noise.sample(rng);
            out[py * SIDE + px] = v.clamp(0.0, 1.0);
        }
    }
}

/// Outline polygon per garment class, unit coordinates. These are filled
/// shapes (much higher ink coverage than digit strokes), which is what makes
/// the distribution semantically distinct.
fn garment_polygon(class: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let j = |rng: &mut ChaCha8Rng| rng.random_range(-0.025..0.025f64);
    let mut poly: Vec<(f64, f64)> = match class {
        // t-shirt/top: body with short sleeves
        0 => vec![
            (0.3, 0.2), (0.42, 0.14), (0.58, 0.14), (0.7, 0.2), (0.88, 0.32), (0.8, 0.45),
            (0.68, 0.4), (0.68, 0.84), (0.32, 0.84), (0.32, 0.4), (0.2, 0.45), (0.12, 0.32),
        ],
        // trouser: two legs
        1 => vec![
            (0.34, 0.12), (0.66, 0.12), (0.7, 0.88), (0.56, 0.88), (0.5, 0.4), (0.44, 0.88),
            (0.3, 0.88),
        ],
        // pullover: long sleeves hugging the body
        2 => vec![
            (0.3, 0.18), (0.44, 0.12), (0.56, 0.12), (0.7, 0.18), (0.86, 0.3), (0.86, 0.78),
            (0.72, 0.78), (0.72, 0.42), (0.7, 0.86), (0.3, 0.86), (0.28, 0.42), (0.28, 0.78),
            (0.14, 0.78), (0.14, 0.3),
        ],
        // dress: fitted top, flared skirt
        3 => vec![
            (0.4, 0.1), (0.6, 0.1), (0.62, 0.34), (0.78, 0.88), (0.22, 0.88), (0.38, 0.34),
        ],
        // coat: boxy with open front hint
        4 => vec![
            (0.28, 0.14), (0.72, 0.14), (0.84, 0.26), (0.84, 0.88), (0.16, 0.88), (0.16, 0.26),
        ],
        // sandal: low wedge
        5 => vec![
            (0.12, 0.62), (0.62, 0.52), (0.88, 0.58), (0.9, 0.74), (0.12, 0.78),
        ],
        // shirt: body with collar notch
        6 => vec![
            (0.3, 0.16), (0.44, 0.22), (0.5, 0.12), (0.56, 0.22), (0.7, 0.16), (0.82, 0.3),
            (0.72, 0.4), (0.72, 0.86), (0.28, 0.86), (0.28, 0.4), (0.18, 0.3),
        ],
        // sneaker: chunky profile
        7 => vec![
            (0.1, 0.66), (0.4, 0.44), (0.62, 0.42), (0.72, 0.52), (0.9, 0.58), (0.9, 0.76),
            (0.1, 0.76),
        ],
        // bag: rectangle with flap
        8 => vec![
            (0.18, 0.34), (0.82, 0.34), (0.86, 0.84), (0.14, 0.84),
        ],
        // ankle boot: tall shaft over a sole
        9 => vec![
            (0.3, 0.14), (0.56, 0.14), (0.56, 0.44), (0.84, 0.6), (0.86, 0.78), (0.16, 0.78),
            (0.2, 0.58), (0.3, 0.5),
        ],
        _ => unreachable!("garment class out of range"),
    };
    for p in &mut poly {
        // inflate around the glyph center, then jitter
        p.0 = (0.5 + (p.0 - 0.5) * 1.12 + j(rng)).clamp(0.03, 0.97);
        p.1 = (0.5 + (p.1 - 0.5) * 1.12 + j(rng)).clamp(0.03, 0.97);
    }
    poly
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if ((yi > py) != (yj > py)) && (px < (xj - xi) * (py - yi) / (yj - yi) + xi) {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn render_garment(class: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let aff = random_affine(rng);
    let poly: Vec<(f64, f64)> =
        garment_polygon(class, rng).into_iter().map(|(x, y)| aff.apply(x, y)).collect();
    let base: f64 = rng.random_range(0.55..0.9);
    let stripe_amp: f64 = rng.random_range(0.05..0.22);
    let stripe_freq: f64 = rng.random_range(14.0..40.0);
    let stripe_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let aa = 0.02;
    let noise = Normal::new(0.0, 0.025).unwrap();
    for py in 0..SIDE {
        for px in 0..SIDE {
            let x = (px as f64 + 0.5) / SIDE as f64;
            let y = (py as f64 + 0.5) / SIDE as f64;
            let mut edge = f64::INFINITY;
            for i in 0..poly.len() {
                let a = poly[i];
                let b = poly[(i + 1) % poly.len()];
                edge = edge.min(dist_to_segment(x, y, a.0, a.1, b.0, b.1));
            }
            let inside = point_in_polygon(x, y, &poly);
            let coverage = if inside { (edge / aa).clamp(0.0, 1.0).max(0.8) } else { 0.0 };
            let texture = base + stripe_amp * (stripe_freq * y + stripe_phase).sin();
            let v = texture * coverage + noise.sample(rng);
            out[py * SIDE + px] = v.clamp(0.0, 1.0);
        }
    }
}

fn render_set(
    n: usize,
    seed: u64,
    stream: u64,
    name: &str,
    split: Split,
    render: impl Fn(usize, &mut ChaCha8Rng, &mut [f64]),
) -> Dataset {
    let mut pixels = vec![0.0f64; n * SIDE * SIDE];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, i as u64));
        render(class, &mut rng, &mut pixels[i * SIDE * SIDE..(i + 1) * SIDE * SIDE]);
        labels.push(class as i32);
    }
    let inputs = Array4::from_shape_vec((n, 1, SIDE, SIDE), pixels).expect("shape");
    Dataset { inputs, labels, num_classes: 10, name: name.to_string(), split }
}

/// Procedurally rendered handwritten-style digits (28x28, 10 classes,
/// classes cycle 0..9 through the index order).
pub fn synth_digits(n: usize, seed: u64, split: Split) -> Dataset {
    let stream = match split {
        Split::Train => 0x6467_7472,
        Split::Validation => 0x6467_7661,
        Split::Test => 0x6467_7465,
    };
    render_set(n, seed, stream, "synth-digits", split, render_digit)
}

/// Procedurally rendered garment silhouettes (28x28, 10 classes). Used as
/// the semantically-shifted counterpart of [`synth_digits`].
pub fn synth_garments(n: usize, seed: u64, split: Split) -> Dataset {
    let stream = match split {
        Split::Train => 0x676d_7472,
        Split::Validation => 0x676d_7661,
        Split::Test => 0x676d_7465,
    };
    render_set(n, seed, stream, "synth-garments", split, render_garment)
}
