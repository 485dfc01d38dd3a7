//! Toy encoder–decoder producing a `3×1×W` layout prediction.
//!
//! Encoder: three 3×3 stride-2 convolutions (3→16→32→32) with SiLU, circular
//! padding in width and zero padding in height, giving a `32×H/8×W/8`
//! feature map. Decoder: mean over rows, two circular 1-D convolutions
//! (32→64→64, kernel 3) with SiLU, linear ×8 upsampling back to `W`, and a
//! final circular 1-D convolution to the three raw channels
//! `(depth, height, corner)`.
//!
//! Differentiation is reverse mode at layer granularity: [`Model::forward`]
//! records a [`Tape`] of the intermediate buffers, and [`Model::backward`]
//! replays it in reverse given the loss gradient with respect to the raw
//! prediction.

pub mod adam;
mod layers;
pub mod params;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::Panorama;
use crate::mask::FeatureMask;
use crate::rng::{self, Stream};

use layers::*;
pub use adam::{optimizer_step, AdamState};
pub use params::{Gradients, Param, ParamStore};

pub const ENCODER_CHANNELS: [usize; 4] = [3, 16, 32, 32];
pub const DECODER_CHANNELS: usize = 64;
pub const OUTPUT_CHANNELS: usize = 3;
/// Total encoder stride.
pub const STRIDE: usize = 8;

pub const DEPTH_FLOOR: f64 = 0.1;
pub const HEIGHT_FLOOR: f64 = 1.0;

const ENC1: usize = 0;
const ENC2: usize = 2;
const ENC3: usize = 4;
const DEC1: usize = 6;
const DEC2: usize = 8;
const HEAD: usize = 10;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw `3×1×W` network output plus decoded views.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTensor {
    pub depth_raw: Vec<f64>,
    pub height_raw: Vec<f64>,
    pub corner_raw: Vec<f64>,
    /// Whether a gradient tape exists for this prediction.
    tracked: bool,
}

impl PredictionTensor {
    /// Untracked prediction built from raw channels.
    pub fn from_raw(depth_raw: Vec<f64>, height_raw: Vec<f64>, corner_raw: Vec<f64>) -> Result<Self> {
        let w = depth_raw.len();
        if w == 0 || height_raw.len() != w || corner_raw.len() != w {
            return Err(Error::Shape("prediction channels must share a nonzero width".into()));
        }
        Ok(Self {
            depth_raw,
            height_raw,
            corner_raw,
            tracked: false,
        })
    }

    pub fn width(&self) -> usize {
        self.depth_raw.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked
    }

    /// Copy without gradient tracking.
    pub fn detached(&self) -> Self {
        Self {
            tracked: false,
            ..self.clone()
        }
    }

    /// `softplus(depth_raw) + 0.1` metres per column.
    pub fn depth(&self) -> Vec<f64> {
        self.depth_raw.iter().map(|&x| softplus(x) + DEPTH_FLOOR).collect()
    }

    /// `mean(softplus(height_raw)) + 1.0` metres.
    pub fn height(&self) -> f64 {
        self.height_raw.iter().map(|&x| softplus(x)).sum::<f64>() / self.width() as f64 + HEIGHT_FLOOR
    }

    pub fn corner_score(&self) -> Vec<f64> {
        self.corner_raw.iter().map(|&x| sigmoid(x)).collect()
    }

    /// Chains gradients with respect to decoded depth and height back to the
    /// raw channels.
    pub fn chain(&self, d_depth: &[f64], d_height: f64) -> PredictionGrad {
        let w = self.width() as f64;
        PredictionGrad {
            depth_raw: self.depth_raw.iter().zip(d_depth).map(|(&x, &g)| g * sigmoid(x)).collect(),
            height_raw: self.height_raw.iter().map(|&x| d_height * sigmoid(x) / w).collect(),
        }
    }
}

/// Loss gradient with respect to the raw depth and height channels. The
/// corner channel never receives gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrad {
    pub depth_raw: Vec<f64>,
    pub height_raw: Vec<f64>,
}

impl PredictionGrad {
    pub fn zeros(width: usize) -> Self {
        Self {
            depth_raw: vec![0.0; width],
            height_raw: vec![0.0; width],
        }
    }

    pub fn add_scaled(&mut self, other: &PredictionGrad, s: f64) {
        for (a, b) in self.depth_raw.iter_mut().zip(&other.depth_raw) {
            *a += s * b;
        }
        for (a, b) in self.height_raw.iter_mut().zip(&other.height_raw) {
            *a += s * b;
        }
    }
}

/// `C×H_f×W_f` encoder activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Intermediate buffers recorded by a tracked forward pass.
#[derive(Debug)]
pub struct Tape {
    cols1: Vec<f64>,
    z1: Vec<f64>,
    cols2: Vec<f64>,
    z2: Vec<f64>,
    cols3: Vec<f64>,
    z3: Vec<f64>,
    mask: Option<Vec<f64>>,
    cols_d1: Vec<f64>,
    y1: Vec<f64>,
    cols_d2: Vec<f64>,
    y2: Vec<f64>,
    cols_head: Vec<f64>,
}

/// Network geometry; parameters live in a separate [`ParamStore`] so student
/// and teacher share one `Model`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    height: usize,
    width: usize,
    taps: Vec<(usize, usize, f64)>,
}

impl Model {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height % STRIDE != 0 || width % STRIDE != 0 || height / STRIDE < 2 || width / STRIDE < 3 {
            return Err(Error::Shape(format!(
                "model input {height}x{width} must be divisible by {STRIDE} with at least 2 feature rows and 3 feature columns"
            )));
        }
        Ok(Self {
            height,
            width,
            taps: upsample_taps(width / STRIDE, STRIDE),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(C, H_f, W_f)` of the encoder output.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        (ENCODER_CHANNELS[3], self.height / STRIDE, self.width / STRIDE)
    }

    /// He-normal weights, zero hidden biases, and head biases that decode to
    /// a 3 m depth and 2.95 m height.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = rng::stream(seed, Stream::Init, 0);
        let mut he = |n: usize, fan_in: usize, gain: f64| -> Vec<f64> {
            let normal = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("valid std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let [c0, c1, c2, c3] = ENCODER_CHANNELS;
        let d = DECODER_CHANNELS;
        let inv_softplus = |y: f64| y.exp_m1().ln();
        let head_bias = vec![inv_softplus(3.0 - DEPTH_FLOOR), inv_softplus(2.95 - HEIGHT_FLOOR), 0.0];
        let params = vec![
            Param::new("enc1.weight", vec![c1, c0, 3, 3], he(c1 * c0 * 9, c0 * 9, 1.0)),
            Param::new("enc1.bias", vec![c1], vec![0.0; c1]),
            Param::new("enc2.weight", vec![c2, c1, 3, 3], he(c2 * c1 * 9, c1 * 9, 1.0)),
            Param::new("enc2.bias", vec![c2], vec![0.0; c2]),
            Param::new("enc3.weight", vec![c3, c2, 3, 3], he(c3 * c2 * 9, c2 * 9, 1.0)),
            Param::new("enc3.bias", vec![c3], vec![0.0; c3]),
            Param::new("dec1.weight", vec![d, c3, 3], he(d * c3 * 3, c3 * 3, 1.0)),
            Param::new("dec1.bias", vec![d], vec![0.0; d]),
            Param::new("dec2.weight", vec![d, d, 3], he(d * d * 3, d * 3, 1.0)),
            Param::new("dec2.bias", vec![d], vec![0.0; d]),
            Param::new("head.weight", vec![OUTPUT_CHANNELS, d, 3], he(OUTPUT_CHANNELS * d * 3, d * 3, 0.1)),
            Param::new("head.bias", vec![OUTPUT_CHANNELS], head_bias),
        ];
        ParamStore::new(params)
    }

    fn check_input(&self, img: &Panorama) -> Result<()> {
        if img.height() != self.height || img.width() != self.width {
            return Err(Error::Shape(format!(
                "model expects {}x{} input, got {}x{}",
                self.height,
                self.width,
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    fn check_params(&self, params: &ParamStore) -> Result<()> {
        let reference = self.init_shapes();
        if params.params().len() != reference.len()
            || params.params().iter().zip(&reference).any(|(p, s)| &p.shape != s)
        {
            return Err(Error::Shape("parameter store does not match the model".into()));
        }
        Ok(())
    }

    fn init_shapes(&self) -> Vec<Vec<usize>> {
        let [c0, c1, c2, c3] = ENCODER_CHANNELS;
        let d = DECODER_CHANNELS;
        vec![
            vec![c1, c0, 3, 3],
            vec![c1],
            vec![c2, c1, 3, 3],
            vec![c2],
            vec![c3, c2, 3, 3],
            vec![c3],
            vec![d, c3, 3],
            vec![d],
            vec![d, d, 3],
            vec![d],
            vec![OUTPUT_CHANNELS, d, 3],
            vec![OUTPUT_CHANNELS],
        ]
    }

    /// Planar `3×H×W` copy of the interleaved image.
    fn planar_input(img: &Panorama) -> Vec<f64> {
        let mut x = Vec::with_capacity(img.data().len());
        for c in 0..3 {
            x.extend(img.data().iter().skip(c).step_by(3));
        }
        x
    }

    fn encode_inner(&self, img: &Panorama, params: &ParamStore) -> EncodeState {
        let [c0, c1, c2, c3] = ENCODER_CHANNELS;
        let (h, w) = (self.height, self.width);
        let x = Self::planar_input(img);

        let cols1 = im2col_s2(&x, c0, h, w);
        let z1 = conv_forward(params.get(ENC1), params.get(ENC1 + 1), &cols1, c1, c0 * 9, (h / 2) * (w / 2));
        let mut a1 = z1.clone();
        silu_inplace(&mut a1);

        let cols2 = im2col_s2(&a1, c1, h / 2, w / 2);
        let z2 = conv_forward(params.get(ENC2), params.get(ENC2 + 1), &cols2, c2, c1 * 9, (h / 4) * (w / 4));
        let mut a2 = z2.clone();
        silu_inplace(&mut a2);

        let cols3 = im2col_s2(&a2, c2, h / 4, w / 4);
        let z3 = conv_forward(params.get(ENC3), params.get(ENC3 + 1), &cols3, c3, c2 * 9, (h / 8) * (w / 8));
        let mut a3 = z3.clone();
        silu_inplace(&mut a3);

        EncodeState {
            cols1,
            z1,
            cols2,
            z2,
            cols3,
            z3,
            features: a3,
        }
    }

    /// Encoder activations for an image.
    pub fn encode(&self, img: &Panorama, params: &ParamStore) -> Result<FeatureMap> {
        self.check_input(img)?;
        self.check_params(params)?;
        let (c, hf, wf) = self.feature_shape();
        Ok(FeatureMap {
            channels: c,
            height: hf,
            width: wf,
            data: self.encode_inner(img, params).features,
        })
    }

    fn decode_inner(&self, features: &[f64], params: &ParamStore) -> DecodeState {
        let (c3, hf, wf) = self.feature_shape();
        let d = DECODER_CHANNELS;
        let mut r = vec![0.0; c3 * wf];
        for c in 0..c3 {
            for i in 0..hf {
                let row = &features[(c * hf + i) * wf..(c * hf + i + 1) * wf];
                for (acc, v) in r[c * wf..(c + 1) * wf].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / hf as f64;
        r.iter_mut().for_each(|v| *v *= inv);

        let cols_d1 = im2col_1d(&r, c3, wf);
        let y1 = conv_forward(params.get(DEC1), params.get(DEC1 + 1), &cols_d1, d, c3 * 3, wf);
        let mut b1 = y1.clone();
        silu_inplace(&mut b1);

        let cols_d2 = im2col_1d(&b1, d, wf);
        let y2 = conv_forward(params.get(DEC2), params.get(DEC2 + 1), &cols_d2, d, d * 3, wf);
        let mut b2 = y2.clone();
        silu_inplace(&mut b2);

        let up = upsample(&b2, d, wf, &self.taps);
        let cols_head = im2col_1d(&up, d, self.width);
        let out = conv_forward(params.get(HEAD), params.get(HEAD + 1), &cols_head, OUTPUT_CHANNELS, d * 3, self.width);

        DecodeState {
            cols_d1,
            y1,
            cols_d2,
            y2,
            cols_head,
            out,
        }
    }

    fn prediction(&self, out: &[f64], tracked: bool) -> PredictionTensor {
        let w = self.width;
        PredictionTensor {
            depth_raw: out[..w].to_vec(),
            height_raw: out[w..2 * w].to_vec(),
            corner_raw: out[2 * w..3 * w].to_vec(),
            tracked,
        }
    }

    /// Decodes a (possibly perturbed) feature map.
    pub fn decode(&self, features: &FeatureMap, params: &ParamStore) -> Result<PredictionTensor> {
        self.check_params(params)?;
        if (features.channels, features.height, features.width) != self.feature_shape()
            || features.data.len() != features.channels * features.height * features.width
        {
            return Err(Error::Shape("feature map does not match the model".into()));
        }
        Ok(self.prediction(&self.decode_inner(&features.data, params).out, false))
    }

    fn check_mask(&self, mask: Option<&FeatureMask>) -> Result<()> {
        if let Some(m) = mask {
            if m.shape() != self.feature_shape() {
                return Err(Error::Shape(format!(
                    "mask shape {:?} does not match features {:?}",
                    m.shape(),
                    self.feature_shape()
                )));
            }
        }
        Ok(())
    }

    /// Tracked forward pass: `decode(apply_mask(encode(img)))`.
    pub fn forward(&self, img: &Panorama, params: &ParamStore, mask: Option<&FeatureMask>) -> Result<(PredictionTensor, Tape)> {
        self.check_input(img)?;
        self.check_params(params)?;
        self.check_mask(mask)?;
        let enc = self.encode_inner(img, params);
        let mult = mask.filter(|m| !m.is_identity()).map(FeatureMask::multipliers);
        let features = match &mult {
            Some(m) => enc.features.iter().zip(m).map(|(x, s)| x * s).collect(),
            None => enc.features,
        };
        let dec = self.decode_inner(&features, params);
        let pred = self.prediction(&dec.out, true);
        let tape = Tape {
            cols1: enc.cols1,
            z1: enc.z1,
            cols2: enc.cols2,
            z2: enc.z2,
            cols3: enc.cols3,
            z3: enc.z3,
            mask: mult,
            cols_d1: dec.cols_d1,
            y1: dec.y1,
            cols_d2: dec.cols_d2,
            y2: dec.y2,
            cols_head: dec.cols_head,
        };
        Ok((pred, tape))
    }

    /// Untracked forward pass (teacher and evaluation).
    pub fn infer(&self, img: &Panorama, params: &ParamStore, mask: Option<&FeatureMask>) -> Result<PredictionTensor> {
        self.check_input(img)?;
        self.check_params(params)?;
        self.check_mask(mask)?;
        let mut features = self.encode_inner(img, params).features;
        if let Some(m) = mask.filter(|m| !m.is_identity()) {
            for (x, s) in features.iter_mut().zip(m.multipliers()) {
                *x *= s;
            }
        }
        Ok(self.prediction(&self.decode_inner(&features, params).out, false))
    }

    /// Reverse pass: accumulates `∂loss/∂θ` into `grads` given the loss
    /// gradient with respect to the raw prediction of the recorded forward.
    pub fn backward(&self, tape: &Tape, grad: &PredictionGrad, params: &ParamStore, grads: &mut Gradients) -> Result<()> {
        let w = self.width;
        if grad.depth_raw.len() != w || grad.height_raw.len() != w {
            return Err(Error::Shape("prediction gradient width mismatch".into()));
        }
        let [c0, c1, c2, c3] = ENCODER_CHANNELS;
        let d = DECODER_CHANNELS;
        let (h, _) = (self.height, self.width);
        let (_, hf, wf) = self.feature_shape();
        let g = &mut grads.0;

        let mut dout = Vec::with_capacity(OUTPUT_CHANNELS * w);
        dout.extend_from_slice(&grad.depth_raw);
        dout.extend_from_slice(&grad.height_raw);
        dout.extend(std::iter::repeat_n(0.0, w));

        let (gw, gb) = split_pair(g, HEAD);
        let dcols = conv_backward(params.get(HEAD), &tape.cols_head, &dout, OUTPUT_CHANNELS, d * 3, w, gw, gb, true).unwrap();
        let dup = col2im_1d(&dcols, d, w);
        let mut db2 = upsample_backward(&dup, d, wf, &self.taps);
        silu_backward(&tape.y2, &mut db2);

        let (gw, gb) = split_pair(g, DEC2);
        let dcols = conv_backward(params.get(DEC2), &tape.cols_d2, &db2, d, d * 3, wf, gw, gb, true).unwrap();
        let mut db1 = col2im_1d(&dcols, d, wf);
        silu_backward(&tape.y1, &mut db1);

        let (gw, gb) = split_pair(g, DEC1);
        let dcols = conv_backward(params.get(DEC1), &tape.cols_d1, &db1, d, c3 * 3, wf, gw, gb, true).unwrap();
        let dr = col2im_1d(&dcols, c3, wf);

        let inv = 1.0 / hf as f64;
        let mut da3 = vec![0.0; c3 * hf * wf];
        for c in 0..c3 {
            for i in 0..hf {
                for j in 0..wf {
                    da3[(c * hf + i) * wf + j] = dr[c * wf + j] * inv;
                }
            }
        }
        if let Some(m) = &tape.mask {
            for (x, s) in da3.iter_mut().zip(m) {
                *x *= s;
            }
        }
        silu_backward(&tape.z3, &mut da3);

        let (gw, gb) = split_pair(g, ENC3);
        let dcols = conv_backward(params.get(ENC3), &tape.cols3, &da3, c3, c2 * 9, hf * wf, gw, gb, true).unwrap();
        let mut da2 = col2im_s2(&dcols, c2, h / 4, self.width / 4);
        silu_backward(&tape.z2, &mut da2);

        let (gw, gb) = split_pair(g, ENC2);
        let dcols = conv_backward(params.get(ENC2), &tape.cols2, &da2, c2, c1 * 9, (h / 4) * (self.width / 4), gw, gb, true).unwrap();
        let mut da1 = col2im_s2(&dcols, c1, h / 2, self.width / 2);
        silu_backward(&tape.z1, &mut da1);

        let (gw, gb) = split_pair(g, ENC1);
        conv_backward(params.get(ENC1), &tape.cols1, &da1, c1, c0 * 9, (h / 2) * (self.width / 2), gw, gb, false);
        Ok(())
    }
}

fn split_pair(g: &mut [Vec<f64>], i: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = g[i..i + 2].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

struct EncodeState {
    cols1: Vec<f64>,
    z1: Vec<f64>,
    cols2: Vec<f64>,
    z2: Vec<f64>,
    cols3: Vec<f64>,
    z3: Vec<f64>,
    features: Vec<f64>,
}

struct DecodeState {
    cols_d1: Vec<f64>,
    y1: Vec<f64>,
    cols_d2: Vec<f64>,
    y2: Vec<f64>,
    cols_head: Vec<f64>,
    out: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{apply_mask, build_mask, MaskConfig};

    fn test_image(h: usize, w: usize, seed: f64) -> Panorama {
        let data = (0..h * w * 3).map(|i| 0.5 + 0.5 * ((i as f64) * seed).sin()).collect();
        Panorama::new(h, w, data).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Model::new(60, 128).is_err());
        assert!(Model::new(8, 128).is_err());
        let m = Model::new(32, 64).unwrap();
        let p = m.init_params(0);
        assert!(m.forward(&test_image(32, 48, 0.1), &p, None).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let m = Model::new(32, 64).unwrap();
        let mut p = m.init_params(1);
        for t in p.params_mut() {
            if t.name.ends_with(".bias") {
                t.value.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let f = m.encode(&Panorama::filled(32, 64, 0.0), &p).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_shift_equivariant() {
        let m = Model::new(32, 64).unwrap();
        let p = m.init_params(2);
        let img = test_image(32, 64, 0.013);
        let a = m.encode(&img.shift_cols(8), &p).unwrap();
        let b = m.encode(&img, &p).unwrap();
        let (c, hf, wf) = m.feature_shape();
        for ch in 0..c {
            for i in 0..hf {
                for j in 0..wf {
                    let shifted = b.data[(ch * hf + i) * wf + (j + wf - 1) % wf];
                    assert!((a.data[(ch * hf + i) * wf + j] - shifted).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn decode_constant_features_is_constant() {
        let m = Model::new(32, 64).unwrap();
        let p = m.init_params(3);
        let (c, hf, wf) = m.feature_shape();
        let mut data = vec![0.0; c * hf * wf];
        for ch in 0..c {
            data[ch * hf * wf..(ch + 1) * hf * wf].iter_mut().for_each(|v| *v = ch as f64 * 0.1);
        }
        let pred = m.decode(&FeatureMap { channels: c, height: hf, width: wf, data }, &p).unwrap();
        assert_eq!(pred.width(), 64);
        let d0 = pred.depth_raw[0];
        assert!(pred.depth_raw.iter().all(|&v| (v - d0).abs() < 1e-12));
    }

    #[test]
    fn identity_mask_matches_no_mask() {
        let m = Model::new(32, 64).unwrap();
        let p = m.init_params(4);
        let img = test_image(32, 64, 0.31);
        let (c, hf, wf) = m.feature_shape();
        let id = FeatureMask::identity(c, hf, wf);
        let (a, _) = m.forward(&img, &p, None).unwrap();
        let (b, _) = m.forward(&img, &p, Some(&id)).unwrap();
        assert_eq!(a, b);
        let f = m.encode(&img, &p).unwrap();
        let masked = FeatureMap { data: apply_mask(&f.data, &id).unwrap(), ..f.clone() };
        assert_eq!(m.decode(&masked, &p).unwrap(), m.decode(&f, &p).unwrap());
        assert_eq!(m.infer(&img, &p, None).unwrap(), a.detached());
        let (again, _) = m.forward(&img, &p, None).unwrap();
        assert_eq!(again, a);

        let mut rng = rng::stream(0, Stream::Mask, 0);
        let mask = build_mask(c, hf, wf, &MaskConfig::default(), &mut rng).unwrap();
        let (masked, _) = m.forward(&img, &p, Some(&mask)).unwrap();
        assert!(masked.depth().iter().all(|v| v.is_finite() && *v >= DEPTH_FLOOR));
        assert!(masked.height() >= HEIGHT_FLOOR);
    }

    #[test]
    fn decoded_floors_hold_for_extreme_raw_values() {
        let p = PredictionTensor::from_raw(vec![-800.0, 0.0, 800.0], vec![-900.0; 3], vec![-50.0, 0.0, 50.0]).unwrap();
        assert!(p.depth().iter().all(|&d| d >= DEPTH_FLOOR));
        assert!(p.height() >= HEIGHT_FLOOR);
        assert!(p.corner_score().iter().all(|&s| (0.0..=1.0).contains(&s)));
    }

    #[test]
    fn head_bias_gradient_for_sum_of_depth_raw() {
        // loss = Σ_u depth_raw[u] → ∂loss/∂head.bias[0] = W, others 0.
        let m = Model::new(32, 64).unwrap();
        let p = m.init_params(5);
        let (_, tape) = m.forward(&test_image(32, 64, 0.2), &p, None).unwrap();
        let grad = PredictionGrad {
            depth_raw: vec![1.0; 64],
            height_raw: vec![0.0; 64],
        };
        let mut g = Gradients::zeros_like(&p);
        m.backward(&tape, &grad, &p, &mut g).unwrap();
        assert_eq!(g.0[HEAD + 1], vec![64.0, 0.0, 0.0]);
        let mut z = Gradients::zeros_like(&p);
        m.backward(&tape, &PredictionGrad::zeros(64), &p, &mut z).unwrap();
        assert!(z.0.iter().flatten().all(|&v| v == 0.0));
    }
}
