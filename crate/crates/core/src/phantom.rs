//! Parametric beating-heart phantom: parameter draws, cine rendering and
//! threshold-based phenotype measurement.

use std::f64::consts::PI;

use crate::numerics::Rng;
use crate::{Error, Result};

/// Single-channel cine, voxels stored frame-major (T, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct Cine {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Cine {
    pub fn new(t: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if t < 2 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("cine extents ({t},{h},{w}) need T ≥ 2 and H, W > 0")));
        }
        if data.len() != t * h * w {
            return Err(Error::shape("cine", format!("{} voxels for (1,{t},{h},{w})", data.len())));
        }
        Ok(Cine { t, h, w, data })
    }

    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        Cine { t, h, w, data: vec![0.0; t * h * w] }
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn dims(&self) -> [usize; 4] {
        [1, self.t, self.h, self.w]
    }
}

pub const PHENOTYPE_NAMES: [&str; 8] = ["eda", "esa", "ef_area", "wall", "cx", "cy", "noise", "phase"];
pub const P: usize = PHENOTYPE_NAMES.len();
/// Column of `ef_area` within a phenotype vector.
pub const EF: usize = 2;
/// Reduced-EF threshold for the binary label.
pub const EF_THRESHOLD: f64 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomParams {
    pub r_ed: f64,
    pub r_es: f64,
    pub wall: f64,
    pub cx: f64,
    pub cy: f64,
    pub blood: f64,
    pub myo: f64,
    pub noise: f64,
    pub phase: f64,
}

pub const BACKGROUND: f64 = 0.1;
const MAX_TRIES: usize = 100;

impl PhantomParams {
    pub fn ef_area(&self) -> f64 {
        1.0 - (self.r_es / self.r_ed).powi(2)
    }

    /// Blood-pool radius at frame `t` of `frames`.
    pub fn radius(&self, t: usize, frames: usize) -> f64 {
        let c = (2.0 * PI * t as f64 / frames as f64 + self.phase).cos();
        self.r_ed - (self.r_ed - self.r_es) * (1.0 - c) / 2.0
    }

    /// Whole heart, with one pixel of margin, inside an (h, w) frame.
    pub fn fits(&self, h: usize, w: usize) -> bool {
        let outer = self.r_ed + self.wall + 1.0;
        self.r_es < self.r_ed
            && self.wall >= 1.0
            && self.cx - outer >= -0.5
            && self.cx + outer <= w as f64 - 0.5
            && self.cy - outer >= -0.5
            && self.cy + outer <= h as f64 - 0.5
    }
}

/// Draws phantom parameters for an (h, w) frame, resampling until the
/// geometry fits.
pub fn sample_params(rng: &mut Rng, h: usize, w: usize) -> Result<PhantomParams> {
    let side = h.min(w) as f64;
    for _ in 0..MAX_TRIES {
        let r_ed = rng.uniform_range(0.20, 0.35) * side;
        let ef = rng.uniform_range(0.15, 0.75);
        let wall = rng.uniform_range(2.0, 4.0);
        // One acquisition factor drives position, noise and phase together,
        // so the phenotype vector varies along four directions only.
        let a = rng.uniform_range(-1.0, 1.0);
        let p = PhantomParams {
            r_ed,
            r_es: r_ed * (1.0 - ef).sqrt(),
            wall,
            cx: (w as f64 - 1.0) / 2.0 + 1.5 * a,
            cy: (h as f64 - 1.0) / 2.0 - 1.5 * a,
            blood: rng.uniform_range(0.5, 0.6),
            myo: rng.uniform_range(0.9, 1.0),
            noise: 0.025 * (1.0 + a),
            phase: 0.25 * a,
        };
        if p.fits(h, w) {
            return Ok(p);
        }
    }
    Err(Error::RejectionExhausted {
        tries: MAX_TRIES,
        detail: format!("no phantom geometry fits a {h}×{w} frame"),
    })
}

/// Sub-pixel samples per axis for partial-volume rendering.
const SUPERSAMPLE: usize = 4;

/// Renders one cardiac cycle with partial-volume edges: each pixel is the
/// mean tissue intensity over a 4×4 grid of sub-pixel samples. `rng`
/// supplies the additive noise only.
pub fn render_cine(p: &PhantomParams, t: usize, h: usize, w: usize, rng: &mut Rng) -> Result<Cine> {
    if !p.fits(h, w) {
        return Err(Error::invalid(format!("phantom {p:?} does not fit a {h}×{w} frame")));
    }
    let offs: Vec<f64> = (0..SUPERSAMPLE).map(|k| (k as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5).collect();
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut data = Vec::with_capacity(t * h * w);
    for f in 0..t {
        let r = p.radius(f, t);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for oy in &offs {
                    for ox in &offs {
                        let d = (x as f64 + ox - p.cx).hypot(y as f64 + oy - p.cy);
                        acc += if d < r {
                            p.blood
                        } else if d < r + p.wall {
                            p.myo
                        } else {
                            BACKGROUND
                        };
                    }
                }
                let base = acc * inv;
                let v = if p.noise > 0.0 { base + p.noise * rng.normal() } else { base };
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Cine::new(t, h, w, data)
}

/// Pixels at or above this are myocardium.
const BRIGHT: f32 = 0.75;
/// Pixels at or below this are background.
const BLOOD_LO: f32 = 0.3;

/// Myocardium mask dilated by one pixel (8-neighbourhood), which closes
/// partial-volume gaps in thin walls.
fn barrier(frame: &[f32], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if frame[y * w + x] >= BRIGHT {
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        out[yy * w + xx] = true;
                    }
                }
            }
        }
    }
    out
}

/// Region enclosed by the myocardium barrier around (cx, cy), holes filled.
/// `None` when no seed lies near the center or the region escapes to the
/// frame border.
fn blood_pool(frame: &[f32], h: usize, w: usize, cx: f64, cy: f64) -> Option<Vec<bool>> {
    let wall = barrier(frame, h, w);
    let mut seed = None;
    let (sx, sy) = (cx.round() as isize, cy.round() as isize);
    'search: for rad in 0..=2isize {
        for dy in -rad..=rad {
            for dx in -rad..=rad {
                let (x, y) = (sx + dx, sy + dy);
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    let i = y as usize * w + x as usize;
                    if !wall[i] && frame[i] > BLOOD_LO {
                        seed = Some(i);
                        break 'search;
                    }
                }
            }
        }
    }
    let seed = seed?;
    let mut mask = vec![false; h * w];
    let mut stack = vec![seed];
    mask[seed] = true;
    while let Some(i) = stack.pop() {
        let (y, x) = (i / w, i % w);
        if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
            return None;
        }
        for j in neighbours(i, h, w) {
            if !mask[j] && !wall[j] {
                mask[j] = true;
                stack.push(j);
            }
        }
    }
    fill_holes(&mut mask, h, w);
    Some(mask)
}

fn dilate4(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    (0..h * w).map(|i| mask[i] || neighbours(i, h, w).any(|j| mask[j])).collect()
}

/// Adds every pixel not connected to the frame border through unmasked
/// pixels; removes noise dropouts inside the pool.
fn fill_holes(mask: &mut [bool], h: usize, w: usize) {
    let mut outside = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w)
        .filter(|&i| (i % w == 0 || i % w == w - 1 || i / w == 0 || i / w == h - 1) && !mask[i])
        .collect();
    for &i in &stack {
        outside[i] = true;
    }
    while let Some(i) = stack.pop() {
        for j in neighbours(i, h, w) {
            if !mask[j] && !outside[j] {
                outside[j] = true;
                stack.push(j);
            }
        }
    }
    for (m, o) in mask.iter_mut().zip(outside) {
        *m = !o;
    }
}

/// Robust spread (scaled median absolute deviation) of dark background
/// pixels over all frames; partial-volume edge pixels do not inflate it.
fn background_noise(c: &Cine) -> f64 {
    let mut dark: Vec<f64> = c.data.iter().filter(|&&v| v <= BLOOD_LO).map(|&v| v as f64).collect();
    if dark.len() < 2 {
        return 0.0;
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let m = median(&mut dark);
    let mut dev: Vec<f64> = dark.iter().map(|v| (v - m).abs()).collect();
    1.4826 * median(&mut dev)
}

fn neighbours(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (i / w, i % w);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

fn mean_of(vals: impl Iterator<Item = f32>) -> Option<f64> {
    let (s, n) = vals.fold((0.0, 0usize), |(s, n), v| (s + v as f64, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Blood-pool area per frame plus the heart center; `None` if any frame
/// fails to segment.
///
/// The pool is the region enclosed by the myocardium. Its area is measured
/// by intensity unmixing over the pool and a two-pixel rim:
/// each pixel contributes (m − v)/(m − b), with b and m the mean blood and
/// myocardium levels, so partial-volume edge pixels count fractionally.
pub fn pool_areas(c: &Cine) -> Option<(Vec<f64>, f64, f64)> {
    let (h, w) = (c.h, c.w);
    // Heart center: centroid of myocardium over the whole cycle.
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for f in 0..c.t {
        for (i, &v) in c.frame(f).iter().enumerate() {
            if v >= BRIGHT {
                sx += (i % w) as f64;
                sy += (i / w) as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return None;
    }
    let (cx, cy) = (sx / n as f64, sy / n as f64);
    let mut masks = Vec::with_capacity(c.t);
    for f in 0..c.t {
        masks.push(blood_pool(c.frame(f), h, w, cx, cy)?);
    }

    let (mut pool_all, mut pool_inner, mut bright_all, mut bright_solid) = (vec![], vec![], vec![], vec![]);
    for (f, mask) in masks.iter().enumerate() {
        let frame = c.frame(f);
        for i in 0..h * w {
            if mask[i] {
                pool_all.push(frame[i]);
                if neighbours(i, h, w).all(|j| mask[j]) {
                    pool_inner.push(frame[i]);
                }
            }
            if frame[i] >= BRIGHT {
                bright_all.push(frame[i]);
                if neighbours(i, h, w).all(|j| frame[j] >= BRIGHT) {
                    bright_solid.push(frame[i]);
                }
            }
        }
    }
    let blood = mean_of(pool_inner.into_iter()).or_else(|| mean_of(pool_all.into_iter()))?;
    let myo = mean_of(bright_solid.into_iter()).or_else(|| mean_of(bright_all.into_iter()))?;
    if myo - blood < 0.1 {
        return None;
    }

    let mut areas = Vec::with_capacity(c.t);
    for (f, mask) in masks.iter().enumerate() {
        let frame = c.frame(f);
        let region = dilate4(&dilate4(mask, h, w), h, w);
        let a: f64 = (0..h * w)
            .filter(|&i| region[i])
            .map(|i| (myo - frame[i] as f64) / (myo - blood))
            .sum();
        areas.push(a);
    }
    Some((areas, cx, cy))
}

/// Phenotype vector of a cine in the order of [`PHENOTYPE_NAMES`], or `None`
/// when segmentation fails (no myocardium, or no blood pool in some frame).
pub fn measure_phenotypes(c: &Cine) -> Option<[f64; P]> {
    let (areas, cx, cy) = pool_areas(c)?;
    let (ed, eda) = areas
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::MIN), |b, (i, a)| if a > b.1 { (i, a) } else { b });
    let esa = areas.iter().copied().fold(f64::MAX, f64::min);
    if eda <= 0.0 {
        return None;
    }
    let ring = c.frame(ed).iter().filter(|&&v| v >= BRIGHT).count() as f64;
    let r = (eda / PI).sqrt();
    let wall = (ring / PI + r * r).sqrt() - r;

    let noise = background_noise(c);

    // Phase from the first temporal harmonic: for area ∝ a + b·cos(θ_t + φ),
    // arg Σ A_t e^{−iθ_t} = φ.
    let (mut re, mut im) = (0.0, 0.0);
    for (f, a) in areas.iter().enumerate() {
        let th = 2.0 * PI * f as f64 / c.t as f64;
        re += a * th.cos();
        im -= a * th.sin();
    }
    let phase = if re == 0.0 && im == 0.0 { 0.0 } else { im.atan2(re) };

    Some([eda, esa, (eda - esa) / eda, wall, cx, cy, noise, phase])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(r_ed: f64, r_es: f64) -> PhantomParams {
        PhantomParams {
            r_ed,
            r_es,
            wall: 3.0,
            cx: 15.5,
            cy: 15.5,
            blood: 0.55,
            myo: 0.95,
            noise: 0.0,
            phase: 0.0,
        }
    }

    #[test]
    fn draws_are_valid() {
        let mut rng = Rng::new(3);
        for _ in 0..500 {
            let p = sample_params(&mut rng, 32, 32).unwrap();
            assert!(p.r_es < p.r_ed && p.fits(32, 32));
            assert!((0.15..=0.75).contains(&p.ef_area()));
        }
    }

    #[test]
    fn ef_mean_matches_uniform_midpoint() {
        let mut rng = Rng::new(17);
        let m: f64 = (0..1000).map(|_| sample_params(&mut rng, 32, 32).unwrap().ef_area()).sum::<f64>() / 1000.0;
        assert!((m - 0.45).abs() < 0.05, "{m}");
    }

    #[test]
    fn radius_at_ed_and_es_frames() {
        let p = clean(10.0, 8.0);
        assert_eq!(p.radius(0, 8), 10.0);
        assert!((p.radius(4, 8) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn rendered_frame_zero_is_disk_of_r_ed() {
        let p = clean(10.0, 8.0);
        let c = render_cine(&p, 8, 32, 32, &mut Rng::new(0)).unwrap();
        for (i, &v) in c.frame(0).iter().enumerate() {
            let d = ((i % 32) as f64 - 15.5).hypot((i / 32) as f64 - 15.5);
            if d < 10.0 - 0.75 {
                assert_eq!(v, p.blood as f32);
            }
            if d > 10.0 + 0.75 && d < 13.0 - 0.75 {
                assert_eq!(v, p.myo as f32);
            }
        }
        // Unmixed blood coverage of frame 0 is the disk area.
        let cover: f64 = c
            .frame(0)
            .iter()
            .enumerate()
            .filter(|(i, _)| ((i % 32) as f64 - 15.5).hypot((i / 32) as f64 - 15.5) < 12.0)
            .map(|(_, &v)| (p.myo - v as f64) / (p.myo - p.blood))
            .sum();
        assert!((cover - 100.0 * PI).abs() < 2.0, "{cover}");
        assert!(c.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pixel_area_tracks_disk_area() {
        for r in [8.0, 9.3, 10.0, 11.0] {
            let p = clean(r, r * 0.8);
            let c = render_cine(&p, 8, 32, 32, &mut Rng::new(0)).unwrap();
            let (areas, _, _) = pool_areas(&c).unwrap();
            for (f, a) in areas.iter().enumerate() {
                let rf = p.radius(f, 8);
                if rf >= 8.0 {
                    let want = PI * rf * rf;
                    assert!((a - want).abs() / want < 0.05, "r={rf} area={a} want={want}");
                }
            }
        }
    }

    #[test]
    fn noiseless_ef_and_eda() {
        let p = clean(10.0, 8.0);
        let c = render_cine(&p, 8, 32, 32, &mut Rng::new(0)).unwrap();
        let m = measure_phenotypes(&c).unwrap();
        assert!((m[EF] - 0.36).abs() < 0.03, "{}", m[EF]);
        assert!((m[0] - 100.0 * PI).abs() / (100.0 * PI) < 0.05, "{}", m[0]);
        assert!((m[3] - 3.0).abs() < 0.5, "wall {}", m[3]);
        assert!((m[4] - 15.5).abs() < 0.3 && (m[5] - 15.5).abs() < 0.3);
        assert_eq!(m[6], 0.0);
    }

    #[test]
    fn blank_cine_is_invalid() {
        assert!(measure_phenotypes(&Cine::zeros(8, 32, 32)).is_none());
    }

    #[test]
    fn same_stream_same_cine() {
        let mut a = Rng::stream(5, &[1]);
        let mut b = Rng::stream(5, &[1]);
        let p = sample_params(&mut a, 32, 32).unwrap();
        assert_eq!(p, sample_params(&mut b, 32, 32).unwrap());
        assert_eq!(render_cine(&p, 8, 32, 32, &mut a).unwrap(), render_cine(&p, 8, 32, 32, &mut b).unwrap());
    }
}
