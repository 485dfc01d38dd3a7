//! Weak geometric and strong photometric image perturbations.
//!
//! Weak augmentation (flip → stretch → rotate) moves scene geometry, so for
//! labelled samples the layout is transformed alongside and the target is
//! recomputed from it. Strong augmentation (histogram equalisation followed
//! by a frequency-domain high-pass) only changes intensities.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::geometry::{
    column_longitude, flip_layout, rotate_layout_quarters, row_latitude, stretch_layout, LayoutTarget, Panorama,
    RoomLayout,
};

/// Geometric perturbation of one panorama.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakAugParams {
    pub flip: bool,
    pub k_x: f64,
    pub k_z: f64,
    pub rotate_cols: usize,
}

impl WeakAugParams {
    pub const IDENTITY: Self = Self {
        flip: false,
        k_x: 1.0,
        k_z: 1.0,
        rotate_cols: 0,
    };

    pub fn validate(&self, width: usize) -> Result<()> {
        if !(0.5..=2.0).contains(&self.k_x) || !(0.5..=2.0).contains(&self.k_z) {
            return Err(Error::invalid(format!(
                "stretch factors ({}, {}) outside [0.5, 2]",
                self.k_x, self.k_z
            )));
        }
        if self.rotate_cols >= width {
            return Err(Error::invalid(format!(
                "rotation of {} columns outside [0, {width})",
                self.rotate_cols
            )));
        }
        Ok(())
    }
}

/// Flip with probability 0.5, `k_x, k_z ~ U[0.5, 2]`, any column shift.
pub fn sample_weak_params<R: rand::Rng + ?Sized>(rng: &mut R, width: usize) -> WeakAugParams {
    WeakAugParams {
        flip: rng.random_bool(0.5),
        k_x: rng.random_range(0.5..=2.0),
        k_z: rng.random_range(0.5..=2.0),
        rotate_cols: rng.random_range(0..width),
    }
}

/// Same distribution, but the rotation is restricted to quarter turns so a
/// stretched Manhattan layout stays axis-aligned. Needs `width % 4 == 0`.
pub fn sample_weak_params_labeled<R: rand::Rng + ?Sized>(rng: &mut R, width: usize) -> WeakAugParams {
    debug_assert_eq!(width % 4, 0);
    let mut p = sample_weak_params(rng, width);
    p.rotate_cols = rng.random_range(0..4usize) * (width / 4);
    p
}

/// Bilinear sample at continuous `(row, col)`: periodic in columns, clamped in
/// rows.
fn sample_bilinear(img: &Panorama, row: f64, col: f64) -> [f64; 3] {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let r = row.clamp(0.0, (h - 1) as f64);
    let r0 = (r.floor() as isize).min(h - 1);
    let r1 = (r0 + 1).min(h - 1);
    let fr = r - r0 as f64;
    let c0f = col.floor();
    let fc = col - c0f;
    let c0 = (c0f as isize).rem_euclid(w);
    let c1 = (c0 + 1) % w;
    std::array::from_fn(|c| {
        let p = |rr: isize, cc: isize| img.get(rr as usize, cc as usize, c);
        let top = p(r0, c0) * (1.0 - fc) + p(r0, c1) * fc;
        let bot = p(r1, c0) * (1.0 - fc) + p(r1, c1) * fc;
        top * (1.0 - fr) + bot * fr
    })
}

/// Panoramic stretch by inverse mapping: the output ray `d` samples the
/// source ray `normalize(d_x/k_x, d_y, d_z/k_z)`.
pub fn stretch_image(img: &Panorama, k_x: f64, k_z: f64) -> Panorama {
    let (h, w) = (img.height(), img.width());
    let mut data = vec![0.0; h * w * 3];
    for u in 0..w {
        let (s, c) = column_longitude(u, w).sin_cos();
        let (sx, sz) = (c / k_x, s / k_z);
        let theta_src = sz.atan2(sx);
        let horiz = sx.hypot(sz);
        let col = (theta_src + PI) / TAU * w as f64 - 0.5;
        for v in 0..h {
            let phi = row_latitude(v, h);
            // Direction (cos φ·sx, sin φ, cos φ·sz) up to the common cos φ.
            let phi_src = phi.sin().atan2(phi.cos() * horiz);
            let row = (FRAC_PI_2 - phi_src) / PI * h as f64 - 0.5;
            let px = sample_bilinear(img, row, col);
            data[(v * w + u) * 3..(v * w + u) * 3 + 3].copy_from_slice(&px);
        }
    }
    Panorama::from_raw(h, w, data)
}

/// Applies flip, then stretch, then the exact column rotation.
pub fn weak_augment_image(img: &Panorama, p: &WeakAugParams) -> Result<Panorama> {
    p.validate(img.width())?;
    let mut out = if p.flip { img.mirror_cols() } else { img.clone() };
    if p.k_x != 1.0 || p.k_z != 1.0 {
        out = stretch_image(&out, p.k_x, p.k_z);
    }
    if p.rotate_cols != 0 {
        out = out.shift_cols(p.rotate_cols);
    }
    Ok(out)
}

/// Transforms the layout in the same order as the image and recomputes the
/// target from it. Rotation must be a quarter turn.
pub fn weak_augment_target(
    target: &LayoutTarget,
    layout: &RoomLayout,
    p: &WeakAugParams,
) -> Result<(LayoutTarget, RoomLayout)> {
    let width = target.width();
    p.validate(width)?;
    if *p == WeakAugParams::IDENTITY {
        return Ok((target.clone(), layout.clone()));
    }
    if width % 4 != 0 || p.rotate_cols % (width / 4) != 0 {
        return Err(Error::invalid(format!(
            "labelled rotation of {} columns is not a quarter turn of {width}",
            p.rotate_cols
        )));
    }
    let mut out = if p.flip { flip_layout(layout) } else { layout.clone() };
    if p.k_x != 1.0 || p.k_z != 1.0 {
        out = stretch_layout(&out, p.k_x, p.k_z)?;
    }
    out = rotate_layout_quarters(&out, p.rotate_cols / (width / 4));
    Ok((LayoutTarget::from_layout(&out, width), out))
}

/// Per-channel histogram equalisation over 256 bins: `v ↦ CDF(bin(v))`.
pub fn hist_equalize(img: &Panorama) -> Panorama {
    const BINS: usize = 256;
    let n = img.height() * img.width();
    let bin = |v: f64| ((v * BINS as f64).floor().max(0.0) as usize).min(BINS - 1);
    let mut out = img.data().to_vec();
    for c in 0..3 {
        let mut counts = [0usize; BINS];
        for i in 0..n {
            counts[bin(img.data()[i * 3 + c])] += 1;
        }
        let mut cdf = [0.0; BINS];
        let mut acc = 0usize;
        for b in 0..BINS {
            acc += counts[b];
            cdf[b] = acc as f64 / n as f64;
        }
        for i in 0..n {
            out[i * 3 + c] = cdf[bin(out[i * 3 + c])];
        }
    }
    Panorama::from_raw(img.height(), img.width(), out)
}

/// Strong-augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongAugParams {
    pub hist_eq: bool,
    /// Gaussian cutoff as a fraction of the corner frequency radius.
    pub hp_cutoff: f64,
    /// Gain kept at DC.
    pub hp_floor: f64,
    /// Weight of the filtered image in the output.
    pub hp_blend: f64,
}

impl Default for StrongAugParams {
    fn default() -> Self {
        Self {
            hist_eq: true,
            hp_cutoff: 0.1,
            hp_floor: 0.3,
            hp_blend: 1.0,
        }
    }
}

impl StrongAugParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.hp_cutoff > 0.0 && self.hp_cutoff <= 1.0)
            || !(0.0..=1.0).contains(&self.hp_floor)
            || !(0.0..=1.0).contains(&self.hp_blend)
        {
            return Err(Error::invalid(format!("strong augmentation parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Gain `G(D) = a + (1 − a)(1 − exp(−D²/(2D₀²)))` at signed frequency
/// `(fy, fx)` in cycles per image of an `H×W` plane.
pub fn highpass_gain(fy: f64, fx: f64, height: usize, width: usize, cutoff: f64, floor: f64) -> f64 {
    let d0 = cutoff * ((height as f64 / 2.0).powi(2) + (width as f64 / 2.0).powi(2)).sqrt();
    let d2 = fy * fy + fx * fx;
    floor + (1.0 - floor) * (1.0 - (-d2 / (2.0 * d0 * d0)).exp())
}

fn signed(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Filters one `H×W` plane in the frequency domain; returns the real part of
/// the inverse transform without clamping.
///
/// Columns are periodic already. Rows are mirrored to `2H` before the
/// transform so the top and bottom of the panorama do not bleed into each
/// other; the gain is evaluated in frequencies of the original plane.
pub fn highpass_plane(plane: &[f64], height: usize, width: usize, cutoff: f64, floor: f64) -> Vec<f64> {
    let ph = 2 * height;
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(width);
    let col_fft = planner.plan_fft_forward(ph);
    let row_ifft = planner.plan_fft_inverse(width);
    let col_ifft = planner.plan_fft_inverse(ph);

    let mut buf: Vec<Complex<f64>> = Vec::with_capacity(ph * width);
    for v in (0..height).chain((0..height).rev()) {
        buf.extend(plane[v * width..(v + 1) * width].iter().map(|&x| Complex::new(x, 0.0)));
    }
    for row in buf.chunks_mut(width) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); ph];
    for kx in 0..width {
        for ky in 0..ph {
            col[ky] = buf[ky * width + kx];
        }
        col_fft.process(&mut col);
        let fx = signed(kx, width);
        for (ky, value) in col.iter_mut().enumerate() {
            *value *= highpass_gain(signed(ky, ph) / 2.0, fx, height, width, cutoff, floor);
        }
        col_ifft.process(&mut col);
        for ky in 0..height {
            buf[ky * width + kx] = col[ky];
        }
    }
    buf.truncate(height * width);
    for row in buf.chunks_mut(width) {
        row_ifft.process(row);
    }
    let scale = 1.0 / (ph * width) as f64;
    buf.iter().map(|z| z.re * scale).collect()
}

/// Frequency-domain high-pass with blend and clamp to `[0, 1]`.
pub fn fft_highpass(img: &Panorama, cutoff: f64, floor: f64, blend: f64) -> Result<Panorama> {
    StrongAugParams {
        hist_eq: false,
        hp_cutoff: cutoff,
        hp_floor: floor,
        hp_blend: blend,
    }
    .validate()?;
    let (h, w) = (img.height(), img.width());
    if floor == 1.0 {
        return Ok(img.clone());
    }
    let planes: [Vec<f64>; 3] = std::array::from_fn(|c| {
        let src = img.channel(c);
        let filtered = highpass_plane(&src, h, w, cutoff, floor);
        src.iter()
            .zip(filtered)
            .map(|(&x, f)| ((1.0 - blend) * x + blend * f).clamp(0.0, 1.0))
            .collect()
    });
    Ok(Panorama::from_channels(h, w, &planes))
}

/// Histogram equalisation followed by the high-pass. Pixel positions are
/// unchanged.
pub fn strong_augment(img: &Panorama, p: &StrongAugParams) -> Result<Panorama> {
    p.validate()?;
    let eq = if p.hist_eq { hist_equalize(img) } else { img.clone() };
    fft_highpass(&eq, p.hp_cutoff, p.hp_floor, p.hp_blend)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_room, horizon_depth, GenConfig, RoomLayout};
    use crate::rng::{stream, Stream};

    fn ramp(h: usize, w: usize) -> Panorama {
        let n = h * w;
        let data = (0..n * 3).map(|i| (i / 3) as f64 / (n - 1) as f64).collect();
        Panorama::new(h, w, data).unwrap()
    }

    #[test]
    fn weak_sampler_statistics() {
        let mut rng = stream(1, Stream::Check, 0);
        let n = 100_000;
        let (mut flips, mut kx) = (0usize, 0.0);
        for _ in 0..n {
            let p = sample_weak_params(&mut rng, 128);
            assert!(p.validate(128).is_ok());
            flips += p.flip as usize;
            kx += p.k_x;
        }
        assert!((flips as f64 / n as f64 - 0.5).abs() < 0.01);
        assert!((kx / n as f64 - 1.25).abs() < 0.01);
        let a = sample_weak_params(&mut stream(9, Stream::Check, 1), 128);
        let b = sample_weak_params(&mut stream(9, Stream::Check, 1), 128);
        assert_eq!(a, b);
        let l = sample_weak_params_labeled(&mut rng, 128);
        assert_eq!(l.rotate_cols % 32, 0);
    }

    #[test]
    fn weak_identity_and_half_turn() {
        let img = ramp(8, 16);
        assert_eq!(weak_augment_image(&img, &WeakAugParams::IDENTITY).unwrap(), img);
        let half = WeakAugParams {
            rotate_cols: 8,
            ..WeakAugParams::IDENTITY
        };
        let twice = weak_augment_image(&weak_augment_image(&img, &half).unwrap(), &half).unwrap();
        assert_eq!(twice, img);
        let bad = WeakAugParams {
            k_x: 3.0,
            ..WeakAugParams::IDENTITY
        };
        assert!(weak_augment_image(&img, &bad).is_err());
    }

    #[test]
    fn weak_target_follows_layout() {
        let sq = RoomLayout::rectangle(-2.0, 2.0, -2.0, 2.0, 1.6, 3.0).unwrap();
        let t = LayoutTarget::from_layout(&sq, 64);
        let (same, _) = weak_augment_target(&t, &sq, &WeakAugParams::IDENTITY).unwrap();
        assert_eq!(same, t);

        let l = generate_room(4, &GenConfig::default()).unwrap();
        let tl = LayoutTarget::from_layout(&l, 64);
        let flip = WeakAugParams {
            flip: true,
            ..WeakAugParams::IDENTITY
        };
        let (f, _) = weak_augment_target(&tl, &l, &flip).unwrap();
        for u in 0..64 {
            assert!((f.depth[u] - tl.depth[63 - u]).abs() < 1e-12);
        }

        let st = WeakAugParams {
            k_x: 2.0,
            ..WeakAugParams::IDENTITY
        };
        let (s, sl) = weak_augment_target(&t, &sq, &st).unwrap();
        assert!((crate::geometry::depth_at(&sl, 0.0) - 4.0).abs() < 1e-12);
        assert!((crate::geometry::depth_at(&sl, FRAC_PI_2) - 2.0).abs() < 1e-12);
        assert_eq!(s.depth, horizon_depth(&sl, 64));

        let odd = WeakAugParams {
            rotate_cols: 5,
            ..WeakAugParams::IDENTITY
        };
        assert!(weak_augment_target(&t, &sq, &odd).is_err());
    }

    #[test]
    fn hist_eq_examples() {
        let c = Panorama::filled(8, 16, 0.4);
        assert!(hist_equalize(&c).data().iter().all(|&v| v == 1.0));
        let r = ramp(16, 32);
        let eq = hist_equalize(&r);
        let max_change = r.data().iter().zip(eq.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_change < 2.0 / 256.0, "max change {max_change}");
    }

    #[test]
    fn highpass_identities() {
        let c = Panorama::filled(16, 32, 0.7);
        let plane = highpass_plane(&c.channel(0), 16, 32, 0.1, 0.0);
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        assert!(mean.abs() < 1e-6);
        let r = ramp(16, 32);
        assert_eq!(fft_highpass(&r, 0.1, 1.0, 1.0).unwrap(), r);
        let plane = highpass_plane(&r.channel(1), 16, 32, 0.2, 1.0);
        for (a, b) in plane.iter().zip(r.channel(1)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(fft_highpass(&r, 0.0, 0.3, 1.0).is_err());
    }

    #[test]
    fn strong_blend_zero_constant() {
        let c = Panorama::filled(8, 16, 0.25);
        let p = StrongAugParams {
            hp_blend: 0.0,
            ..StrongAugParams::default()
        };
        let out = strong_augment(&c, &p).unwrap();
        let first = out.data()[0];
        assert!(out.data().iter().all(|&v| v == first));
    }
}
