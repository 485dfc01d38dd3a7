//! Self-check suite run by the `verify` command.

use rand::Rng as _;

use crate::augment::{hist_equalize, stretch_image, strong_augment, StrongAugParams};
use crate::error::Result;
use crate::geometry::{
    generate_room, locate_boundaries, render_panorama, rotate_layout_quarters, stretch_layout, GenConfig,
    LayoutTarget, Panorama, RoomLayout, SceneStyle,
};
use crate::losses::{ramp_weight, supervised_loss, LossWeights, RampSchedule};
use crate::mask::{build_mask, MaskConfig};
use crate::metrics::{iou2d, iou3d, raster_overlap, rmse_delta1, IOU_GRID};
use crate::model::{Gradients, Model, Param, ParamStore};
use crate::rng::{derive_seed, stream, Stream};
use crate::trainer::ema_update;

/// Result of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: String,
}

impl Check {
    fn le(name: &'static str, measured: f64, tol: f64) -> Self {
        Self {
            name,
            passed: measured <= tol,
            measured,
            tolerance: format!("<= {tol:e}"),
        }
    }

    fn ge(name: &'static str, measured: f64, tol: f64) -> Self {
        Self {
            name,
            passed: measured >= tol,
            measured,
            tolerance: format!(">= {tol}"),
        }
    }

    /// `check=… status=… measured=… tolerance=…`
    pub fn line(&self) -> String {
        format!(
            "check={} status={} measured={:e} tolerance={}",
            self.name,
            if self.passed { "pass" } else { "fail" },
            self.measured,
            self.tolerance.replace(' ', "")
        )
    }
}

fn sample_room(seed: u64, i: u64, h: usize, w: usize) -> Result<(RoomLayout, Panorama)> {
    let layout = generate_room(derive_seed(seed, Stream::Room, i), &GenConfig::default())?;
    let style = SceneStyle::sample(derive_seed(seed, Stream::Style, i), layout.corners().len(), 0.0);
    let img = render_panorama(&layout, &style, h, w, derive_seed(seed, Stream::Render, i))?;
    Ok((layout, img))
}

/// Relative error `|a − n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let d = a.abs().max(n.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - n).abs() / d
    }
}

/// Central finite differences of the supervised loss on `n` random
/// parameters. Returns the relative errors.
pub fn gradient_check(h: usize, w: usize, n: usize, eps: f64, seed: u64) -> Result<Vec<f64>> {
    let model = Model::new(h, w)?;
    let mut params = model.init_params(seed);
    let (layout, img) = sample_room(seed, 0, h, w)?;
    let target = LayoutTarget::from_layout(&layout, w);
    let lw = LossWeights::default();
    let loss = |p: &ParamStore| -> Result<f64> {
        let pred = model.infer(&img, p, None)?;
        Ok(supervised_loss(&pred, &target, &lw)?.0.total)
    };
    let (pred, tape) = model.forward(&img, &params, None)?;
    let (_, g) = supervised_loss(&pred, &target, &lw)?;
    let mut grads = Gradients::zeros_like(&params);
    model.backward(&tape, &g, &params, &mut grads)?;
    let mut rng = stream(seed, Stream::Check, 0);
    let total = params.num_scalars();
    let mut errs = Vec::with_capacity(n);
    for _ in 0..n {
        let flat = rng.random_range(0..total);
        let (pi, ei) = params.flat_index(flat);
        let orig = params.params()[pi].value[ei];
        params.params_mut()[pi].value[ei] = orig + eps;
        let hi = loss(&params)?;
        params.params_mut()[pi].value[ei] = orig - eps;
        let lo = loss(&params)?;
        params.params_mut()[pi].value[ei] = orig;
        errs.push(relative_error(grads.flat(flat), (hi - lo) / (2.0 * eps)));
    }
    Ok(errs)
}

fn check_gradients() -> Result<Vec<Check>> {
    let errs = gradient_check(64, 128, 200, 1e-3, 11)?;
    let max = errs.iter().copied().fold(0.0, f64::max);
    let frac = errs.iter().filter(|&&e| e < 1e-4).count() as f64 / errs.len() as f64;
    Ok(vec![Check::le("gradient_max_rel_error", max, 1e-3), Check::ge("gradient_frac_below_1e-4", frac, 0.95)])
}

fn check_mask() -> Result<Vec<Check>> {
    // Five rows put y exactly on {−1, −0.5, 0, 0.5, 1}.
    let cfg = MaskConfig {
        p_channel: 1.0,
        ..MaskConfig::default()
    };
    let (h, w, reps) = (5, 10_000, 100);
    let mut drops = [0usize; 5];
    let mut worst_scale = 0.0f64;
    let mut rng = stream(0, Stream::Check, 1);
    for _ in 0..reps {
        let m = build_mask(1, h, w, &cfg, &mut rng)?;
        for (v, d) in drops.iter_mut().enumerate() {
            *d += m.keep()[v * w..(v + 1) * w].iter().filter(|&&k| !k).count();
        }
        let (kept, total) = m.counts();
        // S = total/kept by construction; the float product may round.
        worst_scale = worst_scale.max((m.scale() * m.kept_fraction() - 1.0).abs());
        if kept == 0 || total == 0 {
            worst_scale = f64::INFINITY;
        }
    }
    let expected = [0.8, 0.35, 0.2, 0.35, 0.8];
    let dev = drops
        .iter()
        .zip(expected)
        .map(|(&d, e)| (d as f64 / (w * reps) as f64 - e).abs())
        .fold(0.0, f64::max);
    Ok(vec![Check::le("mask_drop_rate_deviation", dev, 0.005), Check::le("mask_scale_times_kept_minus_one", worst_scale, f64::EPSILON)])
}

fn check_ema() -> Result<Vec<Check>> {
    let mut rng = stream(0, Stream::Check, 2);
    let n = 64;
    let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let student = ParamStore::new(vec![Param::new("w", vec![n], s.clone())]);
    let mut teacher = ParamStore::new(vec![Param::new("w", vec![n], t0.clone())]);
    for _ in 0..1000 {
        ema_update(&mut teacher, &student, 0.999)?;
    }
    let decay = 0.999f64.powi(1000);
    let err = (0..n)
        .map(|i| (teacher.get(0)[i] - (s[i] + (t0[i] - s[i]) * decay)).abs())
        .fold(0.0, f64::max);
    Ok(vec![Check::le("ema_closed_form", err, 1e-9)])
}

fn check_ramp() -> Result<Vec<Check>> {
    let sched = RampSchedule::from_fraction(10_000, 0.3)?;
    let i = sched.rampup_end;
    let mut mono = 0.0f64;
    let mut prev = 0.0;
    for k in 0..=10_000 {
        let l = ramp_weight(k, &sched);
        mono = mono.max(prev - l);
        prev = l;
    }
    Ok(vec![
        Check::le("ramp_start", (ramp_weight(0, &sched) - (-5f64).exp()).abs(), 1e-12),
        Check::le("ramp_half", (ramp_weight(i / 2, &sched) - (-1.25f64).exp()).abs(), 1e-12),
        Check::le("ramp_end", (ramp_weight(i, &sched) - 1.0).abs(), 0.0),
        Check::le("ramp_monotone_violation", mono, 0.0),
    ])
}

fn check_strong() -> Result<Vec<Check>> {
    let c = Panorama::filled(32, 64, 0.6);
    let dc = crate::augment::highpass_plane(&c.channel(0), 32, 64, 0.1, 0.0);
    let dc_mean = dc.iter().sum::<f64>().abs() / dc.len() as f64;
    let (_, img) = sample_room(3, 0, 64, 128)?;
    // the plane filter itself, not the early return in fft_highpass
    let id_err = (0..3)
        .flat_map(|ch| {
            let src = img.channel(ch);
            let out = crate::augment::highpass_plane(&src, 64, 128, 0.1, 1.0);
            src.into_iter().zip(out).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    let mut non_mono = 0usize;
    let mut shift = 0usize;
    for k in 0..50 {
        let (_, img) = sample_room(3, k, 64, 128)?;
        let eq = hist_equalize(&img);
        for ch in 0..3 {
            let mut pairs: Vec<(f64, f64)> = img.channel(ch).into_iter().zip(eq.channel(ch)).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            non_mono += pairs.windows(2).filter(|p| p[1].1 < p[0].1).count();
        }
        let a = locate_boundaries(&img);
        let b = locate_boundaries(&strong_augment(&img, &StrongAugParams::default())?);
        for (x, y) in a.ceiling.iter().zip(&b.ceiling).chain(a.floor.iter().zip(&b.floor)) {
            shift = shift.max(x.abs_diff(*y));
        }
    }
    Ok(vec![
        Check::le("highpass_dc_removed", dc_mean, 1e-6),
        Check::le("highpass_allpass_identity", id_err, 1e-6),
        Check::le("hist_eq_monotone_violations", non_mono as f64, 0.0),
        Check::le("strong_aug_boundary_shift_px", shift as f64, 1.0),
    ])
}

fn check_geometry() -> Result<Vec<Check>> {
    let (h, w) = (64, 128);
    let mut worst = 0usize;
    let mut smooth_bad = 0usize;
    let mut rot = 0.0f64;
    for k in 0..20u64 {
        let layout = generate_room(derive_seed(5, Stream::Room, k), &GenConfig::default())?;
        let style = SceneStyle::sample(derive_seed(5, Stream::Style, k), layout.corners().len(), 0.0);
        let base = render_panorama(&layout, &style, h, w, 0)?;
        for s in [0.7, 1.5] {
            for (kx, kz) in [(s, 1.0), (1.0, s)] {
                let direct = render_panorama(&stretch_layout(&layout, kx, kz)?, &style, h, w, 0)?;
                let a = locate_boundaries(&direct);
                let b = locate_boundaries(&stretch_image(&base, kx, kz));
                for (ra, rb) in [(&a.ceiling, &b.ceiling), (&a.floor, &b.floor)] {
                    for u in 0..w {
                        let d = ra[u].abs_diff(rb[u]);
                        worst = worst.max(d);
                        // a jump between neighbouring columns marks an occluding corner
                        let jump = |v: usize| ra[u].abs_diff(ra[v % w]) > 1;
                        if d > 1 && !jump(u + 1) && !jump(u + w - 1) {
                            smooth_bad += 1;
                        }
                    }
                }
            }
        }
        let back = base.shift_cols(37).shift_cols(w - 37);
        rot = rot.max(if back == base { 0.0 } else { 1.0 });
        let q = rotate_layout_quarters(&rotate_layout_quarters(&layout, 1), 3);
        rot = rot.max(if q == layout { 0.0 } else { 1.0 });
    }
    Ok(vec![
        Check::le("stretch_boundary_agreement_px", worst as f64, 1.0),
        Check::le("stretch_columns_over_1px_off_occlusions", smooth_bad as f64, 0.0),
        Check::le("rotation_round_trip_mismatch", rot, 0.0),
    ])
}

fn check_metrics() -> Result<Vec<Check>> {
    let mut rng = stream(0, Stream::Check, 3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut rect = || -> [f64; 4] {
            let (x0, z0) = (rng.random_range(-3.0..0.0), rng.random_range(-3.0..0.0));
            [x0, x0 + rng.random_range(0.5..4.0), z0, z0 + rng.random_range(0.5..4.0)]
        };
        let (a, b) = (rect(), rect());
        let ix = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
        let iz = (a[3].min(b[3]) - a[2].max(b[2])).max(0.0);
        let inter = ix * iz;
        let union = (a[1] - a[0]) * (a[3] - a[2]) + (b[1] - b[0]) * (b[3] - b[2]) - inter;
        let poly = |r: [f64; 4]| vec![[r[0], r[2]], [r[1], r[2]], [r[1], r[3]], [r[0], r[3]]];
        let raster = raster_overlap(&poly(a), &poly(b), IOU_GRID).iou();
        worst = worst.max((raster - inter / union).abs());
    }
    let d1 = crate::geometry::horizon_depth(&RoomLayout::rectangle(-2.0, 3.0, -1.5, 2.0, 1.6, 2.8)?, 128);
    let d2 = crate::geometry::horizon_depth(&RoomLayout::rectangle(-1.0, 2.5, -2.5, 1.0, 1.6, 2.8)?, 128);
    let eq = (iou3d(&d1, 2.8, &d2, 2.8) - iou2d(&d1, &d2)).abs();
    let strict = rmse_delta1(&[2.5], &[2.0]).1;
    Ok(vec![
        Check::le("rect_iou_raster_error", worst, 0.01),
        Check::le("iou3d_equals_iou2d_equal_heights", eq, 1e-6),
        Check::le("delta1_boundary_excluded", strict, 0.0),
    ])
}

/// Runs every check in order.
pub fn run_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for f in [check_gradients, check_mask, check_ema, check_ramp, check_strong, check_geometry, check_metrics] {
        out.extend(f()?);
    }
    Ok(out)
}
