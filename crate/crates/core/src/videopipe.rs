//! Sequence preprocessing: face crops, temporal normalization, spatial
//! resize, and augmentation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Cursor, Tensor};

pub const PSQ1_MAGIC: &[u8; 4] = b"PSQ1";
pub const DEFAULT_SIZE: usize = 112;
pub const MIN_GRADE: u8 = 1;
pub const MAX_GRADE: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionLabel {
    NoMotion,
    Smile,
    MouthOpen,
    Other,
}

impl MotionLabel {
    pub const ALL: [MotionLabel; 4] = [
        MotionLabel::NoMotion,
        MotionLabel::Smile,
        MotionLabel::MouthOpen,
        MotionLabel::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionLabel::NoMotion => "no_motion",
            MotionLabel::Smile => "smile",
            MotionLabel::MouthOpen => "mouth_open",
            MotionLabel::Other => "other",
        }
    }
}

impl fmt::Display for MotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown motion label {s:?}")))
    }
}

pub fn check_grade(grade: u8) -> Result<()> {
    if !(MIN_GRADE..=MAX_GRADE).contains(&grade) {
        return Err(Error::Invalid(format!(
            "palsy grade {grade} outside {MIN_GRADE}..{MAX_GRADE}"
        )));
    }
    Ok(())
}

/// A labelled clip: frames are `T × H × W × C` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence<S = f32> {
    frames: Tensor<S>,
    pub subject_id: String,
    pub motion_label: MotionLabel,
    pub palsy_grade: u8,
}

impl<S: Scalar> VideoSequence<S> {
    pub fn new(
        frames: Tensor<S>,
        subject_id: impl Into<String>,
        motion_label: MotionLabel,
        palsy_grade: u8,
    ) -> Result<Self> {
        check_frames(&frames)?;
        check_grade(palsy_grade)?;
        Ok(VideoSequence {
            frames,
            subject_id: subject_id.into(),
            motion_label,
            palsy_grade,
        })
    }

    pub fn frames(&self) -> &Tensor<S> {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor<S> {
        self.frames
    }

    /// `(T, H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Same labels, new pixels.
    pub fn with_frames(&self, frames: Tensor<S>) -> Result<Self> {
        check_frames(&frames)?;
        Ok(VideoSequence {
            frames,
            subject_id: self.subject_id.clone(),
            motion_label: self.motion_label,
            palsy_grade: self.palsy_grade,
        })
    }

    /// Channels-first `C × T × H × W` copy, the layout the network consumes.
    pub fn to_channels_first(&self) -> Tensor<S> {
        let (t, h, w, c) = self.dims();
        let src = self.frames.data();
        let mut out = vec![S::zero(); src.len()];
        let plane = t * h * w;
        for (p, px) in src.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * plane + p] = v;
            }
        }
        Tensor::new(vec![c, t, h, w], out).unwrap()
    }
}

fn check_frames<S: Scalar>(frames: &Tensor<S>) -> Result<()> {
    if frames.rank() != 4 || frames.shape()[0] == 0 || frames.numel() == 0 {
        return Err(Error::shape(
            "video",
            format!("frames must be non-empty T×H×W×C, got {:?}", frames.shape()),
        ));
    }
    if let Some(v) = frames
        .data()
        .iter()
        .find(|&&v| !(v >= S::zero() && v <= S::one()))
    {
        return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Encodes frames as `PSQ1`: magic, u32 `T H W C`, then f32 pixels.
pub fn encode_psq1<S: Scalar>(frames: &Tensor<S>) -> Result<Vec<u8>> {
    check_frames(frames)?;
    let mut out = Vec::with_capacity(20 + frames.numel() * 4);
    out.extend_from_slice(PSQ1_MAGIC);
    for &d in frames.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in frames.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_psq1<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != PSQ1_MAGIC {
        return Err(Error::Format("bad sequence magic, expected PSQ1".into()));
    }
    let mut shape = Vec::with_capacity(4);
    for _ in 0..4 {
        shape.push(cur.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = cur.take(numel * 4)?;
    if cur.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after sequence",
            cur.remaining()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let frames = Tensor::new(shape, data)?;
    check_frames(&frames)?;
    Ok(frames)
}

pub fn save_psq1<S: Scalar>(path: impl AsRef<Path>, frames: &Tensor<S>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_psq1(frames)?).map_err(|e| Error::io(path, e))
}

pub fn load_psq1<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_psq1(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Source frame of each output frame: `floor(i·T/n)`.
pub fn normalized_indices(t: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| i * t / n).collect()
}

/// Resamples the clip to exactly `n` frames, duplicating or dropping at
/// evenly spaced positions.
pub fn normalize_frames<S: Scalar>(seq: &VideoSequence<S>, n: usize) -> Result<VideoSequence<S>> {
    if n < 1 {
        return Err(Error::Invalid(
            "target frame count must be at least 1".into(),
        ));
    }
    let (t, h, w, c) = seq.dims();
    let frame = h * w * c;
    let src = seq.frames.data();
    let mut out = Vec::with_capacity(n * frame);
    for i in normalized_indices(t, n) {
        out.extend_from_slice(&src[i * frame..(i + 1) * frame]);
    }
    seq.with_frames(Tensor::new(vec![n, h, w, c], out)?)
}

/// Half-pixel-centred source coordinate of each output cell, as
/// `(lower index, upper index, upper weight)`.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn resize_frames<S: Scalar>(frames: &Tensor<S>, rows: usize, cols: usize) -> Tensor<S> {
    let s = frames.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (rows, cols) {
        return frames.clone();
    }
    let (ty, tx) = (bilinear_taps(h, rows), bilinear_taps(w, cols));
    let src = frames.data();
    let mut out = Vec::with_capacity(t * rows * cols * c);
    for f in 0..t {
        let base = f * h * w * c;
        for &(y0, y1, fy) in &ty {
            let fy = S::lit(fy);
            for &(x0, x1, fx) in &tx {
                let fx = S::lit(fx);
                for ch in 0..c {
                    let at = |y: usize, x: usize| src[base + (y * w + x) * c + ch];
                    let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                    let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                    // Rounding can push a convex combination a hair past
                    // its inputs.
                    let v = top + (bottom - top) * fy;
                    let (lo, hi) = minmax4(at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                    out.push(v.max(lo).min(hi));
                }
            }
        }
    }
    Tensor::new(vec![t, rows, cols, c], out).unwrap()
}

fn minmax4<S: Scalar>(a: S, b: S, c: S, d: S) -> (S, S) {
    (a.min(b).min(c.min(d)), a.max(b).max(c.max(d)))
}

/// Bilinearly resamples every frame to `size × size`.
pub fn resize_spatial<S: Scalar>(seq: &VideoSequence<S>, size: usize) -> Result<VideoSequence<S>> {
    if size == 0 {
        return Err(Error::Invalid("resize target must be positive".into()));
    }
    seq.with_frames(resize_frames(&seq.frames, size, size))
}

/// Face box in pixels: left column, top row, width, height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Parses box lines `frame_index x y w h`; every frame in `0..frames`
/// must appear exactly once.
pub fn parse_boxes(text: &str, frames: usize) -> Result<Vec<FaceBox>> {
    let mut boxes: Vec<Option<FaceBox>> = vec![None; frames];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<usize> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("box line {}: {e}", i + 1)))?;
        let [f, x, y, w, h] = fields[..] else {
            return Err(Error::Format(format!(
                "box line {}: expected 5 fields",
                i + 1
            )));
        };
        let slot = boxes
            .get_mut(f)
            .ok_or_else(|| Error::Format(format!("box line {}: frame {f} out of range", i + 1)))?;
        if slot.replace(FaceBox { x, y, w, h }).is_some() {
            return Err(Error::Format(format!("frame {f} has two boxes")));
        }
    }
    boxes
        .into_iter()
        .enumerate()
        .map(|(f, b)| b.ok_or_else(|| Error::Format(format!("frame {f} has no box"))))
        .collect()
}

pub fn load_boxes(path: impl AsRef<Path>, frames: usize) -> Result<Vec<FaceBox>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text, frames)
}

/// Replaces each frame by its box region. Boxes of differing size are
/// resampled to the first box's size so the clip stays rectangular.
pub fn crop_face<S: Scalar>(seq: &VideoSequence<S>, boxes: &[FaceBox]) -> Result<VideoSequence<S>> {
    let (t, h, w, c) = seq.dims();
    if boxes.len() != t {
        return Err(Error::Invalid(format!(
            "{} boxes for {t} frames",
            boxes.len()
        )));
    }
    for (f, b) in boxes.iter().enumerate() {
        if b.w == 0 || b.h == 0 || b.x + b.w > w || b.y + b.h > h {
            return Err(Error::Invalid(format!(
                "box {b:?} on frame {f} exceeds the {w}×{h} frame"
            )));
        }
    }
    let (rows, cols) = (boxes[0].h, boxes[0].w);
    let src = seq.frames.data();
    let mut out = Vec::with_capacity(t * rows * cols * c);
    for (f, b) in boxes.iter().enumerate() {
        let mut region = Vec::with_capacity(b.h * b.w * c);
        for y in b.y..b.y + b.h {
            let start = ((f * h + y) * w + b.x) * c;
            region.extend_from_slice(&src[start..start + b.w * c]);
        }
        let region = Tensor::new(vec![1, b.h, b.w, c], region)?;
        out.extend_from_slice(resize_frames(&region, rows, cols).data());
    }
    seq.with_frames(Tensor::new(vec![t, rows, cols, c], out)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    pub rotation_prob: f64,
    pub max_rotation_deg: f64,
    pub jitter_prob: f64,
    pub max_jitter: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip_prob: 0.5,
            rotation_prob: 0.5,
            max_rotation_deg: 10.0,
            jitter_prob: 0.5,
            max_jitter: 0.1,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No transform ever fires.
    pub fn disabled() -> Self {
        AugmentationConfig {
            flip_prob: 0.0,
            rotation_prob: 0.0,
            jitter_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("rotation_prob", self.rotation_prob),
            ("jitter_prob", self.jitter_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_jitter >= 0.0) {
            return Err(Error::Config(
                "augmentation bounds must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Stream for one sample in one epoch, independent of processing order.
    pub fn rng_for(&self, sample: u64, epoch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(sample.wrapping_mul(0x1_0000_0001).wrapping_add(epoch));
        rng
    }
}

/// Transform parameters drawn for one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationDraw {
    pub flip: bool,
    pub rotation_deg: Option<f64>,
    pub jitter: Option<[f64; 3]>,
}

impl AugmentationDraw {
    /// Draws exactly three uniforms (flip, rotation, jitter). A variate that
    /// fires is uniform below its probability, so it is rescaled to supply
    /// the transform's parameter; the jitter variate seeds the per-channel
    /// scales.
    pub fn sample(cfg: &AugmentationConfig, rng: &mut impl Rng) -> Self {
        let (u_flip, u_rot, u_jit): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let rotation_deg = (u_rot < cfg.rotation_prob)
            .then(|| (2.0 * u_rot / cfg.rotation_prob - 1.0) * cfg.max_rotation_deg);
        let jitter = (u_jit < cfg.jitter_prob).then(|| {
            let mut sub = ChaCha8Rng::seed_from_u64(u_jit.to_bits());
            [0; 3].map(|_| 1.0 + sub.random_range(-1.0..=1.0) * cfg.max_jitter)
        });
        AugmentationDraw {
            flip: u_flip < cfg.flip_prob,
            rotation_deg,
            jitter,
        }
    }
}

/// Mirrors every frame left to right.
pub fn flip_horizontal<S: Scalar>(seq: &VideoSequence<S>) -> VideoSequence<S> {
    let (_, _, w, c) = seq.dims();
    let mut out = Vec::with_capacity(seq.frames.numel());
    for row in seq.frames.data().chunks(w * c) {
        for px in row.chunks(c).rev() {
            out.extend_from_slice(px);
        }
    }
    seq.with_frames(Tensor::new(seq.frames.shape().to_vec(), out).unwrap())
        .unwrap()
}

/// Rotates every frame by `degrees` (counter-clockwise) about its centre,
/// bilinear, with edge replication outside the source.
pub fn rotate<S: Scalar>(seq: &VideoSequence<S>, degrees: f64) -> VideoSequence<S> {
    let (t, h, w, c) = seq.dims();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = seq.frames.data();
    // Source sample of each destination pixel, shared by all frames.
    let taps: Vec<(usize, usize, usize, usize, S, S)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = (cos * dx - sin * dy + cx).clamp(0.0, (w - 1) as f64);
            let sy = (sin * dx + cos * dy + cy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            (
                y0,
                (y0 + 1).min(h - 1),
                x0,
                (x0 + 1).min(w - 1),
                S::lit(sy - y0 as f64),
                S::lit(sx - x0 as f64),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(src.len());
    for f in 0..t {
        let base = f * h * w * c;
        for &(y0, y1, x0, x1, fy, fx) in &taps {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[base + (y * w + x) * c + ch];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                let (lo, hi) = minmax4(at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                out.push((top + (bottom - top) * fy).max(lo).min(hi));
            }
        }
    }
    seq.with_frames(Tensor::new(vec![t, h, w, c], out).unwrap())
        .unwrap()
}

/// Multiplies channel `k` by `scales[k % 3]`, clamping to `[0, 1]`.
pub fn jitter<S: Scalar>(seq: &VideoSequence<S>, scales: [f64; 3]) -> VideoSequence<S> {
    let c = seq.dims().3;
    let scales = scales.map(S::lit);
    let mut frames = seq.frames.clone();
    for px in frames.data_mut().chunks_mut(c) {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = (*v * scales[ch % 3]).max(S::zero()).min(S::one());
        }
    }
    seq.with_frames(frames).unwrap()
}

pub fn apply_draw<S: Scalar>(seq: &VideoSequence<S>, draw: &AugmentationDraw) -> VideoSequence<S> {
    let mut out = if draw.flip {
        flip_horizontal(seq)
    } else {
        seq.clone()
    };
    if let Some(deg) = draw.rotation_deg {
        out = rotate(&out, deg);
    }
    if let Some(scales) = draw.jitter {
        out = jitter(&out, scales);
    }
    out
}

/// Flip, rotation and colour jitter, each applied to the whole clip with its
/// configured probability.
pub fn augment<S: Scalar>(
    seq: &VideoSequence<S>,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> VideoSequence<S> {
    apply_draw(seq, &AugmentationDraw::sample(cfg, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, h: usize, w: usize) -> VideoSequence<f64> {
        let frames = Tensor::from_fn(vec![t, h, w, 3], |i| ((i * 37) % 101) as f64 / 100.0);
        VideoSequence::new(frames, "s01", MotionLabel::Smile, 3).unwrap()
    }

    fn smooth(h: usize, w: usize) -> VideoSequence<f64> {
        let frames = Tensor::from_fn(vec![1, h, w, 3], |i| {
            let (y, x) = ((i / 3) / w, (i / 3) % w);
            0.5 + 0.4 * ((x as f64 / 9.0).sin() * (y as f64 / 7.0).cos())
        });
        VideoSequence::new(frames, "s", MotionLabel::Other, 1).unwrap()
    }

    #[test]
    fn index_map_examples() {
        assert_eq!(normalized_indices(8, 8), (0..8).collect::<Vec<_>>());
        assert_eq!(normalized_indices(16, 8), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(normalized_indices(4, 8), vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn normalize_copies_frames_and_keeps_labels() {
        let seq = ramp(4, 3, 2);
        let out = normalize_frames(&seq, 8).unwrap();
        assert_eq!(out.dims(), (8, 3, 2, 3));
        let frame = 18;
        assert_eq!(
            &out.frames().data()[frame * 3..frame * 4],
            &seq.frames().data()[frame..frame * 2]
        );
        assert_eq!(
            (out.subject_id.as_str(), out.motion_label, out.palsy_grade),
            ("s01", MotionLabel::Smile, 3)
        );
        assert!(normalize_frames(&seq, 0).is_err());
    }

    #[test]
    fn sequence_validation() {
        let bad = Tensor::full(vec![1, 2, 2, 3], 1.5f32);
        assert!(VideoSequence::new(bad, "s", MotionLabel::Other, 1).is_err());
        let ok = Tensor::full(vec![1, 2, 2, 3], 0.5f32);
        let err = VideoSequence::new(ok, "s", MotionLabel::Other, 7).unwrap_err();
        assert!(err.to_string().contains("1..6"), "{err}");
    }

    #[test]
    fn resize_examples() {
        let c = VideoSequence::new(
            Tensor::full(vec![2, 37, 53, 3], 0.3f64),
            "s",
            MotionLabel::Other,
            1,
        )
        .unwrap();
        let r = resize_spatial(&c, 112).unwrap();
        assert_eq!(r.dims(), (2, 112, 112, 3));
        assert!(r.frames().data().iter().all(|&v| v == 0.3));
        let big = ramp(1, 224, 224);
        assert_eq!(resize_spatial(&big, 112).unwrap().dims(), (1, 112, 112, 3));
        let same = ramp(2, 112, 112);
        assert!(resize_spatial(&same, 112)
            .unwrap()
            .frames()
            .bitwise_eq(same.frames()));
    }

    #[test]
    fn psq1_round_trip() {
        let seq = ramp(2, 3, 4);
        let bytes = encode_psq1(seq.frames()).unwrap();
        assert_eq!(&bytes[..4], b"PSQ1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        let back: Tensor<f64> = decode_psq1(&bytes).unwrap();
        assert_eq!(back.shape(), seq.frames().shape());
        assert!(back.max_abs_diff(seq.frames()).unwrap() < 1e-7);
        assert!(decode_psq1::<f32>(b"PSQ2\0\0\0\0").is_err());
        assert!(decode_psq1::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn crop_examples() {
        let seq = ramp(4, 100, 100);
        let full = vec![
            FaceBox {
                x: 0,
                y: 0,
                w: 100,
                h: 100
            };
            4
        ];
        assert!(crop_face(&seq, &full)
            .unwrap()
            .frames()
            .bitwise_eq(seq.frames()));
        let b = vec![
            FaceBox {
                x: 10,
                y: 10,
                w: 50,
                h: 40
            };
            4
        ];
        assert_eq!(crop_face(&seq, &b).unwrap().dims(), (4, 40, 50, 3));
        let mut bad = b.clone();
        bad[3] = FaceBox {
            x: 80,
            y: 10,
            w: 50,
            h: 40,
        };
        let err = crop_face(&seq, &bad).unwrap_err().to_string();
        assert!(err.contains("frame 3"), "{err}");
    }

    #[test]
    fn box_file_parsing() {
        let boxes = parse_boxes("1 0 0 2 2\n0 1 1 3 3\n", 2).unwrap();
        assert_eq!(
            boxes[0],
            FaceBox {
                x: 1,
                y: 1,
                w: 3,
                h: 3
            }
        );
        assert!(parse_boxes("0 0 0 2 2\n", 2).is_err());
        assert!(parse_boxes("0 0 0 2 2\n0 0 0 2 2\n", 1).is_err());
        assert!(parse_boxes("0 0 0 2\n", 1).is_err());
    }

    #[test]
    fn augmentation_identity_and_determinism() {
        let seq = ramp(3, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(augment(&seq, &AugmentationConfig::disabled(), &mut rng)
            .frames()
            .bitwise_eq(seq.frames()));
        let cfg = AugmentationConfig::default();
        for sample in 0..20 {
            let a = augment(&seq, &cfg, &mut cfg.rng_for(sample, 0));
            let b = augment(&seq, &cfg, &mut cfg.rng_for(sample, 0));
            assert!(a.frames().bitwise_eq(b.frames()));
            assert_eq!(
                (a.motion_label, a.palsy_grade),
                (seq.motion_label, seq.palsy_grade)
            );
        }
    }

    #[test]
    fn draw_uses_three_variates() {
        let cfg = AugmentationConfig::default();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = a.clone();
        AugmentationDraw::sample(&cfg, &mut a);
        for _ in 0..3 {
            b.random::<f64>();
        }
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn draws_respect_bounds() {
        let cfg = AugmentationConfig {
            flip_prob: 1.0,
            rotation_prob: 1.0,
            jitter_prob: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d = AugmentationDraw::sample(&cfg, &mut rng);
            assert!(d.flip);
            assert!(d.rotation_deg.unwrap().abs() <= 10.0);
            assert!(d.jitter.unwrap().iter().all(|s| (s - 1.0).abs() <= 0.1));
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let seq = ramp(2, 5, 7);
        assert!(flip_horizontal(&flip_horizontal(&seq))
            .frames()
            .bitwise_eq(seq.frames()));
        assert!(!flip_horizontal(&seq).frames().bitwise_eq(seq.frames()));
    }

    #[test]
    fn rotation_round_trip_is_close() {
        let seq = smooth(64, 64);
        for deg in [3.0, -7.5, 10.0] {
            let back = rotate(&rotate(&seq, deg), -deg);
            let mae = back
                .frames()
                .zip_map(seq.frames(), |a, b| (a - b).abs())
                .unwrap()
                .mean();
            assert!(mae < 2e-2, "{deg}: {mae}");
        }
        assert!(
            rotate(&seq, 0.0)
                .frames()
                .max_abs_diff(seq.frames())
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn jitter_stays_in_range() {
        let seq = ramp(1, 4, 4);
        let out = jitter(&seq, [1.1, 0.9, 1.0]);
        assert!(out
            .frames()
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn channels_first_layout() {
        let seq = ramp(2, 2, 3);
        let cf = seq.to_channels_first();
        assert_eq!(cf.shape(), &[3, 2, 2, 3]);
        assert_eq!(cf.at(&[2, 1, 0, 1]), seq.frames().at(&[1, 0, 1, 2]));
    }
}
