//! Face-probability fusion: heatmap confidence, small-face penalty, fused
//! score, and the binary detection loss.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Faces narrower than this percentage of the image width are penalized.
pub const SMALL_FACE_PERCENT: f64 = 2.0;
pub const SMALL_FACE_PENALTY: f64 = 0.7;
/// Weight of landmarks that are not visible in every pose.
pub const OCCLUDED_LANDMARK_WEIGHT: f64 = 0.75;
pub const LOG_CLAMP: f64 = 1e-7;

fn in_unit<S: Scalar>(v: S) -> bool {
    v >= S::zero() && v <= S::one()
}

/// `n` landmark heatmaps sharing one `rows × cols` grid, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkHeatmaps<S = f64> {
    maps: Tensor<S>,
}

impl<S: Scalar> LandmarkHeatmaps<S> {
    pub fn new(maps: Tensor<S>) -> Result<Self> {
        if maps.rank() != 3 || maps.numel() == 0 {
            return Err(Error::Format(format!(
                "heatmaps must be a non-empty n×rows×cols tensor, got shape {:?}",
                maps.shape()
            )));
        }
        if let Some(pos) = maps.data().iter().position(|&v| !in_unit(v)) {
            let plane = maps.shape()[1] * maps.shape()[2];
            return Err(Error::Invalid(format!(
                "heatmap {} holds {} outside [0, 1]",
                pos / plane,
                maps.data()[pos]
            )));
        }
        Ok(LandmarkHeatmaps { maps })
    }

    /// Reads a `PTNS` tensor of shape `n × rows × cols`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(Tensor::load(path)?)
    }

    pub fn len(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn maps(&self) -> &Tensor<S> {
        &self.maps
    }

    /// Peak value of each map.
    pub fn maxima(&self) -> Vec<S> {
        let plane = self.maps.shape()[1] * self.maps.shape()[2];
        self.maps
            .data()
            .chunks(plane)
            .map(|m| m.iter().fold(S::zero(), |a, &v| a.max(v)))
            .collect()
    }
}

/// Per-landmark visibility weights γ, each 1.0 or 0.75.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityWeights<S = f64>(Vec<S>);

impl<S: Scalar> VisibilityWeights<S> {
    pub fn new(weights: Vec<S>) -> Result<Self> {
        let allowed = [S::one(), S::lit(OCCLUDED_LANDMARK_WEIGHT)];
        if let Some(w) = weights.iter().find(|w| !allowed.contains(w)) {
            return Err(Error::Invalid(format!(
                "visibility weight {w} is neither 1.0 nor 0.75"
            )));
        }
        Ok(VisibilityWeights(weights))
    }

    /// Every landmark fully visible.
    pub fn uniform(n: usize) -> Self {
        VisibilityWeights(vec![S::one(); n])
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }
}

/// A detector box with its probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceCandidate<S = f64> {
    pub x: S,
    pub y: S,
    /// Box width in pixels.
    pub det: S,
    pub height: S,
    pub p_faster: S,
    pub img_width: S,
}

impl<S: Scalar> FaceCandidate<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.det > S::zero() && self.det <= self.img_width) {
            return Err(Error::Invalid(format!(
                "box width {} must lie in (0, image width {}]",
                self.det, self.img_width
            )));
        }
        if !in_unit(self.p_faster) {
            return Err(Error::Invalid(format!(
                "detector probability {} outside [0, 1]",
                self.p_faster
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedScore<S = f64> {
    pub p_fan: S,
    pub delta: S,
    pub p_face: S,
}

/// `p_fan = (1/n) Σ max(h_i)·γ_i`.
pub fn heatmap_confidence<S: Scalar>(
    h: &LandmarkHeatmaps<S>,
    gamma: &VisibilityWeights<S>,
) -> Result<S> {
    if h.len() != gamma.0.len() {
        return Err(Error::shape(
            "heatmap_confidence",
            format!(
                "{} heatmaps but {} visibility weights",
                h.len(),
                gamma.0.len()
            ),
        ));
    }
    let total: S = h.maxima().iter().zip(&gamma.0).map(|(&m, &g)| m * g).sum();
    Ok(total / S::from_usize(h.len()).unwrap())
}

/// δ = 0.7 when the box spans at most 2% of the image width, else 1.
pub fn size_penalty<S: Scalar>(c: &FaceCandidate<S>) -> Result<S> {
    c.validate()?;
    let percent = c.det * (S::lit(100.0) / c.img_width);
    Ok(if percent <= S::lit(SMALL_FACE_PERCENT) {
        S::lit(SMALL_FACE_PENALTY)
    } else {
        S::one()
    })
}

/// `p_face = (p_fan + p_faster·δ) / 2`.
pub fn fuse<S: Scalar>(p_fan: S, c: &FaceCandidate<S>) -> Result<FusedScore<S>> {
    if !in_unit(p_fan) {
        return Err(Error::Invalid(format!("p_fan {p_fan} outside [0, 1]")));
    }
    let delta = size_penalty(c)?;
    Ok(FusedScore {
        p_fan,
        delta,
        p_face: (p_fan + c.p_faster * delta) / S::lit(2.0),
    })
}

/// Mean binary cross-entropy of fused scores against 0/1 truth, with
/// scores clamped to `[ε, 1 − ε]`.
pub fn detection_loss<S: Scalar>(scores: &[S], truth: &[S]) -> Result<S> {
    if scores.len() != truth.len() {
        return Err(Error::shape(
            "detection_loss",
            format!("{} scores but {} labels", scores.len(), truth.len()),
        ));
    }
    if scores.is_empty() {
        return Err(Error::Invalid("detection_loss of no candidates".into()));
    }
    let eps = S::lit(LOG_CLAMP);
    let total: S = scores
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let p = p.max(eps).min(S::one() - eps);
            -(S::one() - t) * (S::one() - p).ln() - t * p.ln()
        })
        .sum();
    Ok(total / S::from_usize(scores.len()).unwrap())
}

/// Parses candidate lines `x y det height p_faster img_width`. Blank lines
/// and `#` comments are skipped.
pub fn parse_candidates<S: Scalar>(text: &str) -> Result<Vec<FaceCandidate<S>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("candidate line {}: {e}", i + 1)))?;
        let [x, y, det, height, p_faster, img_width] = fields[..] else {
            return Err(Error::Format(format!(
                "candidate line {}: expected 6 fields, got {}",
                i + 1,
                fields.len()
            )));
        };
        let c = FaceCandidate {
            x: S::lit(x),
            y: S::lit(y),
            det: S::lit(det),
            height: S::lit(height),
            p_faster: S::lit(p_faster),
            img_width: S::lit(img_width),
        };
        c.validate()
            .map_err(|e| Error::Format(format!("candidate line {}: {e}", i + 1)))?;
        out.push(c);
    }
    Ok(out)
}

pub fn load_candidates<S: Scalar>(path: impl AsRef<Path>) -> Result<Vec<FaceCandidate<S>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_candidates(&text)
}

/// Scores every candidate against one heatmap set.
pub fn score_candidates<S: Scalar>(
    h: &LandmarkHeatmaps<S>,
    gamma: &VisibilityWeights<S>,
    candidates: &[FaceCandidate<S>],
) -> Result<Vec<FusedScore<S>>> {
    let p_fan = heatmap_confidence(h, gamma)?;
    candidates.iter().map(|c| fuse(p_fan, c)).collect()
}
