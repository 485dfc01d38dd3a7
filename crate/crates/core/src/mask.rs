//! Distortion-aware feature masking.
//!
//! A fraction of encoder channels is selected; inside them each element is
//! dropped with a probability that grows quadratically from the vertical
//! centre of the feature map to its top and bottom rows. Survivors are
//! rescaled by `S = 1/P_f`, `P_f` being the kept fraction of the selected
//! elements.

use rand::seq::index;

use crate::error::{Error, Result};

/// Masking probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub p_center: f64,
    pub p_edge: f64,
    pub p_channel: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            p_center: 0.2,
            p_edge: 0.8,
            p_channel: 0.2,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_center", self.p_center),
            ("p_edge", self.p_edge),
            ("p_channel", self.p_channel),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Drop probability at normalised vertical coordinate `y ∈ [−1, 1]`.
pub fn mask_probability(y: f64, cfg: &MaskConfig) -> Result<f64> {
    if !(-1.0..=1.0).contains(&y) {
        return Err(Error::invalid(format!("normalised row {y} outside [-1, 1]")));
    }
    Ok(cfg.p_center + (cfg.p_edge - cfg.p_center) * y * y)
}

/// Normalised coordinate of row `v` in an `h`-row map.
#[inline]
pub fn row_coordinate(v: usize, h: usize) -> f64 {
    2.0 * v as f64 / (h - 1) as f64 - 1.0
}

/// A realised mask over a `C × H × W` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMask {
    channels: usize,
    height: usize,
    width: usize,
    channel_selected: Vec<bool>,
    /// Keep flags for the selected channels in ascending channel order.
    keep: Vec<bool>,
    kept: usize,
    total: usize,
}

impl FeatureMask {
    /// Mask that selects no channel (`S = 1`).
    pub fn identity(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            channel_selected: vec![false; channels],
            keep: Vec::new(),
            kept: 0,
            total: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channel_selected(&self) -> &[bool] {
        &self.channel_selected
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_identity(&self) -> bool {
        self.total == 0
    }

    /// Kept and total element counts over the selected channels.
    pub fn counts(&self) -> (usize, usize) {
        (self.kept, self.total)
    }

    /// `P_f`: fraction of selected elements kept (1 for the identity mask).
    pub fn kept_fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.kept as f64 / self.total as f64
        }
    }

    /// `S = 1/P_f`, computed from the integer counts.
    pub fn scale(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.total as f64 / self.kept as f64
        }
    }

    /// Per-element multiplier for the full `C×H×W` map.
    pub fn multipliers(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![1.0; self.channels * plane];
        let s = self.scale();
        let mut k = 0;
        for (c, &sel) in self.channel_selected.iter().enumerate() {
            if sel {
                for (o, &kept) in out[c * plane..(c + 1) * plane].iter_mut().zip(&self.keep[k * plane..(k + 1) * plane]) {
                    *o = if kept { s } else { 0.0 };
                }
                k += 1;
            }
        }
        out
    }
}

const MAX_RESAMPLES: usize = 100;

/// Draws a mask: `round(P_channel·C)` channels chosen without replacement,
/// then an independent Bernoulli drop per selected element with probability
/// `P(y_v)`. A mask that drops everything is redrawn.
pub fn build_mask<R: rand::Rng + ?Sized>(
    channels: usize,
    height: usize,
    width: usize,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<FeatureMask> {
    cfg.validate()?;
    if height < 2 {
        return Err(Error::invalid(format!("feature map needs at least 2 rows, got {height}")));
    }
    let n_sel = (cfg.p_channel * channels as f64).round() as usize;
    if n_sel == 0 || width == 0 {
        return Ok(FeatureMask::identity(channels, height, width));
    }
    let drop_p: Vec<f64> = (0..height)
        .map(|v| mask_probability(row_coordinate(v, height), cfg))
        .collect::<Result<_>>()?;
    let plane = height * width;
    for _ in 0..MAX_RESAMPLES {
        let mut channel_selected = vec![false; channels];
        for c in index::sample(rng, channels, n_sel).iter() {
            channel_selected[c] = true;
        }
        let mut keep = Vec::with_capacity(n_sel * plane);
        for _ in 0..n_sel {
            for p in &drop_p {
                for _ in 0..width {
                    keep.push(rng.random::<f64>() >= *p);
                }
            }
        }
        let kept = keep.iter().filter(|&&k| k).count();
        if kept > 0 {
            return Ok(FeatureMask {
                channels,
                height,
                width,
                channel_selected,
                keep,
                kept,
                total: n_sel * plane,
            });
        }
    }
    Err(Error::Numerical(format!(
        "feature mask dropped every element {MAX_RESAMPLES} times in a row"
    )))
}

/// Applies the mask to a `C×H×W` tensor: untouched channels pass through,
/// selected ones become `x·keep·S`.
pub fn apply_mask(features: &[f64], mask: &FeatureMask) -> Result<Vec<f64>> {
    let (c, h, w) = mask.shape();
    if features.len() != c * h * w {
        return Err(Error::Shape(format!(
            "mask is {c}x{h}x{w} but features have {} elements",
            features.len()
        )));
    }
    if mask.is_identity() {
        return Ok(features.to_vec());
    }
    let plane = h * w;
    let s = mask.scale();
    let mut out = features.to_vec();
    let mut k = 0;
    for (ch, &sel) in mask.channel_selected.iter().enumerate() {
        if sel {
            let keep = &mask.keep[k * plane..(k + 1) * plane];
            for (o, &kept) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(keep) {
                *o = if kept { *o * s } else { 0.0 };
            }
            k += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    #[test]
    fn probability_profile() {
        let cfg = MaskConfig::default();
        assert!((mask_probability(0.0, &cfg).unwrap() - 0.2).abs() < 1e-15);
        assert!((mask_probability(1.0, &cfg).unwrap() - 0.8).abs() < 1e-15);
        assert!((mask_probability(-1.0, &cfg).unwrap() - 0.8).abs() < 1e-15);
        assert!((mask_probability(0.5, &cfg).unwrap() - 0.35).abs() < 1e-15);
        assert!(mask_probability(1.01, &cfg).is_err());
    }

    #[test]
    fn channel_count_and_identity() {
        let mut rng = stream(0, Stream::Mask, 0);
        let m = build_mask(10, 5, 7, &MaskConfig::default(), &mut rng).unwrap();
        assert_eq!(m.channel_selected().iter().filter(|&&s| s).count(), 2);
        let none = MaskConfig {
            p_channel: 0.04,
            ..MaskConfig::default()
        };
        let id = build_mask(10, 5, 7, &none, &mut rng).unwrap();
        assert!(id.is_identity());
        assert_eq!(id.scale(), 1.0);
        let x: Vec<f64> = (0..350).map(|i| (i as f64).sin()).collect();
        assert_eq!(apply_mask(&x, &id).unwrap(), x);
        assert!(build_mask(10, 1, 7, &MaskConfig::default(), &mut rng).is_err());
        assert!(apply_mask(&x[..10], &id).is_err());
    }

    #[test]
    fn half_kept_gives_scale_two() {
        let mut m = FeatureMask::identity(2, 2, 2);
        m.channel_selected = vec![true, false];
        m.keep = vec![true, false, true, false];
        m.kept = 2;
        m.total = 4;
        assert_eq!(m.kept_fraction(), 0.5);
        assert_eq!(m.scale(), 2.0);
    }

    #[test]
    fn everything_dropped_is_rejected() {
        let cfg = MaskConfig {
            p_center: 1.0,
            p_edge: 1.0,
            p_channel: 0.5,
        };
        let mut rng = stream(0, Stream::Mask, 1);
        assert!(matches!(build_mask(4, 3, 3, &cfg, &mut rng), Err(Error::Numerical(_))));
    }

    #[test]
    fn constant_input_sum_preserved() {
        let mut rng = stream(2, Stream::Mask, 0);
        let (c, h, w) = (10, 9, 16);
        let m = build_mask(c, h, w, &MaskConfig::default(), &mut rng).unwrap();
        let x = vec![1.0; c * h * w];
        let y = apply_mask(&x, &m).unwrap();
        let plane = h * w;
        let (mut sin, mut sout) = (0.0, 0.0);
        for ch in 0..c {
            if m.channel_selected()[ch] {
                sin += x[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                sout += y[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
            } else {
                assert_eq!(&y[ch * plane..(ch + 1) * plane], &x[ch * plane..(ch + 1) * plane]);
            }
        }
        assert!((sin - sout).abs() < 1e-9 * sin);
    }

    proptest! {
        #[test]
        fn mask_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = stream(seed, Stream::Mask, 0);
            let m = build_mask(5, 4, 6, &MaskConfig::default(), &mut rng).unwrap();
            let x: Vec<f64> = (0..120).map(|i| ((i as f64) * 0.37 + seed as f64).sin()).collect();
            let y: Vec<f64> = (0..120).map(|i| ((i as f64) * 1.3).cos()).collect();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = apply_mask(&combo, &m).unwrap();
            let mx = apply_mask(&x, &m).unwrap();
            let my = apply_mask(&y, &m).unwrap();
            for i in 0..120 {
                prop_assert!((lhs[i] - (a * mx[i] + b * my[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn scale_inverts_kept_fraction(seed in 0u64..10_000) {
            let mut rng = stream(seed, Stream::Mask, 3);
            let m = build_mask(32, 8, 16, &MaskConfig::default(), &mut rng).unwrap();
            let (kept, total) = m.counts();
            // Rationally exact: (total/kept)·(kept/total) = 1.
            prop_assert!(kept > 0 && total == 6 * 8 * 16);
            prop_assert!((m.scale() * m.kept_fraction() - 1.0).abs() <= f64::EPSILON);
        }
    }
}
