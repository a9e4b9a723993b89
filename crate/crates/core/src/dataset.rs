//! Synthetic face-motion clips, manifests, and class-balanced sampling.
//!
//! The generator draws a schematic face (textured background, skin ellipse,
//! two eyes, a mouth band). Motion class sets the mouth trajectory; palsy
//! grade scales the left half's movement by `a(g)` and adds a resting droop
//! and slack lower lip on that side, both proportional to `1 − a(g)`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::fnv1a;
use crate::videopipe::{self, check_grade, MotionLabel, VideoSequence, MAX_GRADE, MIN_GRADE};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Geometry constants below are in pixels of a 128-pixel frame.
const REFERENCE_SIZE: f64 = 128.0;

/// Which label a task reads from a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelField {
    Motion,
    Grade,
}

impl LabelField {
    pub fn classes(self) -> usize {
        match self {
            LabelField::Motion => MotionLabel::ALL.len(),
            LabelField::Grade => (MAX_GRADE - MIN_GRADE + 1) as usize,
        }
    }

    /// Zero-based class index of a record.
    pub fn label(self, r: &SampleRecord) -> usize {
        match self {
            LabelField::Motion => r.motion_label.index(),
            LabelField::Grade => (r.palsy_grade - MIN_GRADE) as usize,
        }
    }

    pub fn class_name(self, class: usize) -> String {
        match self {
            LabelField::Motion => {
                MotionLabel::from_index(class).map_or("?".into(), |m| m.name().into())
            }
            LabelField::Grade => format!("grade{}", class + MIN_GRADE as usize),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelField::Motion => "motion",
            LabelField::Grade => "grade",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub subject_id: String,
    pub motion_label: MotionLabel,
    pub palsy_grade: u8,
    /// Relative to the manifest's directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn new(records: Vec<SampleRecord>) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            records,
        }
    }

    /// Checks labels and version; paths are checked by [`load_manifest`].
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.records.is_empty() {
            return Err(Error::Manifest("manifest has no records".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            check_grade(r.palsy_grade)
                .map_err(|e| Error::Manifest(format!("record {i} ({}): {e}", r.path)))?;
            if r.subject_id.is_empty() {
                return Err(Error::Manifest(format!(
                    "record {i} ({}): empty subject_id",
                    r.path
                )));
            }
        }
        Ok(())
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.subject_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn labels(&self, field: LabelField) -> Vec<usize> {
        self.records.iter().map(|r| field.label(r)).collect()
    }
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads and validates a manifest; every record's file must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for (i, r) in manifest.records.iter().enumerate() {
        if !dir.join(&r.path).is_file() {
            return Err(Error::Manifest(format!(
                "record {i} ({} {} grade {}): file {} is missing",
                r.subject_id, r.motion_label, r.palsy_grade, r.path
            )));
        }
    }
    Ok(manifest)
}

/// How palsy subjects receive grades.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradeAssignment {
    /// Palsy subject `k` always carries grade `2 + k`.
    PerSubject,
    /// Each palsy subject cycles through grades 2–6 across repetitions.
    PerRepetition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub subjects: usize,
    /// The first `palsy_subjects` subjects have grades above 1.
    pub palsy_subjects: usize,
    pub motions: Vec<MotionLabel>,
    pub reps: usize,
    pub frames: usize,
    pub size: usize,
    pub motion_amplitude: f64,
    /// Resting drop of the affected mouth corner at total paralysis.
    pub droop_px: f64,
    /// Resting lower-lip thickening of the affected half at total paralysis.
    pub sag_px: f64,
    /// `a(g)` for grades 1..6.
    pub asymmetry: Vec<f64>,
    pub grade_assignment: GradeAssignment,
    /// Uniform pixel noise half-width.
    pub noise: f64,
    /// Scale of per-subject colour and texture variation, 0 for identical
    /// subjects.
    pub appearance_variation: f64,
    /// Optional appearance seed per subject; derived from `seed` otherwise.
    pub appearance_seeds: Vec<u64>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            subjects: 10,
            palsy_subjects: 5,
            motions: MotionLabel::ALL.to_vec(),
            reps: 10,
            frames: 24,
            size: 128,
            motion_amplitude: 1.0,
            droop_px: 16.0,
            sag_px: 12.0,
            asymmetry: (1..=6).map(linear_asymmetry).collect(),
            grade_assignment: GradeAssignment::PerRepetition,
            noise: 0.02,
            appearance_variation: 1.0,
            appearance_seeds: Vec::new(),
            seed: 0,
        }
    }
}

/// `a(g) = (6 − g) / 5`.
pub fn linear_asymmetry(grade: u8) -> f64 {
    f64::from(MAX_GRADE - grade) / f64::from(MAX_GRADE - MIN_GRADE)
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.subjects == 0 || self.reps == 0 || self.motions.is_empty() {
            return bad("subjects, reps and motions must be nonempty".into());
        }
        if self.palsy_subjects > self.subjects {
            return bad(format!(
                "{} palsy subjects out of {}",
                self.palsy_subjects, self.subjects
            ));
        }
        if self.frames == 0 || self.size < 16 {
            return bad("frames must be ≥ 1 and size ≥ 16".into());
        }
        let a = &self.asymmetry;
        if a.len() != 6 || a[0] != 1.0 || a[5] != 0.0 || a.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!(
                "asymmetry map {a:?} must run strictly down from 1 at grade 1 to 0 at grade 6"
            ));
        }
        if !(self.motion_amplitude >= 0.0
            && self.droop_px >= 0.0
            && self.sag_px >= 0.0
            && (0.0..0.5).contains(&self.noise))
        {
            return bad("amplitude, droop and sag must be ≥ 0, noise in [0, 0.5)".into());
        }
        if !(0.0..=1.0).contains(&self.appearance_variation) {
            return bad("appearance_variation must lie in [0, 1]".into());
        }
        if !self.appearance_seeds.is_empty() && self.appearance_seeds.len() != self.subjects {
            return bad("appearance_seeds needs one entry per subject".into());
        }
        if self.grade_assignment == GradeAssignment::PerSubject && self.palsy_subjects > 5 {
            return bad("per-subject grading supports at most 5 palsy subjects".into());
        }
        Ok(())
    }

    pub fn a(&self, grade: u8) -> f64 {
        self.asymmetry[(grade - MIN_GRADE) as usize]
    }

    pub fn subject_id(&self, index: usize) -> String {
        format!("s{:02}", index + 1)
    }

    /// Grade of repetition `rep` of subject `index`.
    pub fn grade_of(&self, index: usize, rep: usize) -> u8 {
        if index >= self.palsy_subjects {
            return 1;
        }
        let k = match self.grade_assignment {
            GradeAssignment::PerSubject => index,
            GradeAssignment::PerRepetition => rep,
        };
        2 + (k % 5) as u8
    }

    fn px(&self, v: f64) -> f64 {
        v * self.size as f64 / REFERENCE_SIZE
    }

    fn appearance_seed(&self, subject_id: &str) -> u64 {
        let index = subject_id
            .strip_prefix('s')
            .and_then(|s| s.parse::<usize>().ok())
            .and_then(|n| n.checked_sub(1));
        match index {
            Some(i) if i < self.appearance_seeds.len() => self.appearance_seeds[i],
            _ => fnv1a(format!("appearance:{}:{subject_id}", self.seed).as_bytes()),
        }
    }
}

/// Subject-level look: placement, colours, background texture.
#[derive(Debug, Clone)]
struct Appearance {
    center: (f64, f64),
    scale: f64,
    skin: [f64; 3],
    background: [f64; 3],
    lip: [f64; 3],
    texture: [(f64, f64, f64, f64); 3],
    eye_radius: f64,
}

impl Appearance {
    fn sample(cfg: &SyntheticConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mid = cfg.size as f64 / 2.0;
        let v = cfg.appearance_variation;
        let mut col = |mid: f64, half: f64| [0; 3].map(|_| mid + v * rng.random_range(-half..half));
        let skin = col(0.7, 0.15);
        let background = col(0.25, 0.15);
        let lip = col(0.17, 0.12);
        let texture = [0; 3].map(|_| {
            (
                rng.random_range(0.02..0.15),
                rng.random_range(0.02..0.15),
                rng.random_range(0.0..2.0 * PI),
                v * rng.random_range(0.02..0.06),
            )
        });
        Appearance {
            // Faces arrive detected and cropped, so placement varies little.
            center: (
                mid + cfg.px(rng.random_range(-1.5..1.5)),
                mid + cfg.px(rng.random_range(-1.5..1.5)),
            ),
            scale: rng.random_range(0.97..1.03),
            skin,
            background,
            lip,
            texture,
            eye_radius: cfg.px(6.0 + v * rng.random_range(-0.5..0.5)),
        }
    }
}

/// Sequence-level motion parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub motion: MotionLabel,
    pub gain: f64,
    /// Fraction of the clip before the motion starts.
    pub onset: f64,
    /// Fraction of the clip the motion lasts.
    pub duration: f64,
    pub other_lift: f64,
    pub other_narrow: f64,
    pub other_open: f64,
    pub cycles: f64,
    pub phase: f64,
    pub head_offset: (f64, f64),
}

impl Trajectory {
    fn sample(motion: MotionLabel, rng: &mut impl Rng) -> Self {
        let onset = rng.random_range(0.0..0.2);
        Trajectory {
            motion,
            gain: rng.random_range(0.8..1.2),
            onset,
            duration: rng.random_range(0.6..(1.0 - onset)),
            other_lift: rng.random_range(4.0..7.0),
            other_narrow: rng.random_range(8.0..12.0),
            other_open: rng.random_range(4.0..8.0),
            cycles: rng.random_range(1.5..3.0),
            phase: rng.random_range(0.0..PI),
            head_offset: (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
        }
    }

    /// Motion envelope in `[0, 1]` at clip position `s ∈ [0, 1]`.
    pub fn envelope(&self, s: f64) -> f64 {
        let x = ((s - self.onset) / self.duration).clamp(0.0, 1.0);
        (PI * x).sin()
    }
}

/// Mouth shape at one instant, in pixels of a 128-pixel frame. Index 0 is
/// the affected (left) side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MouthPose {
    /// Upward movement of each corner.
    pub lift: [f64; 2],
    /// Outward movement of each corner.
    pub widen: [f64; 2],
    pub aperture: f64,
    /// Scale of the aperture at the affected corner.
    pub affected_scale: f64,
    /// Static downward offset of the affected corner.
    pub droop: f64,
    /// Static thickening of the affected half's slack lower lip.
    pub sag: f64,
    /// Teeth visibility in the opening, 0..1.
    pub teeth: f64,
}

impl MouthPose {
    /// Movement magnitude of each corner relative to rest.
    pub fn corner_displacement(&self) -> [f64; 2] {
        [0, 1].map(|s| self.lift[s].hypot(self.widen[s]))
    }
}

/// Mouth pose of frame `t` of `frames`.
pub fn mouth_pose(
    cfg: &SyntheticConfig,
    traj: &Trajectory,
    grade: u8,
    t: usize,
    frames: usize,
) -> MouthPose {
    let s = if frames > 1 {
        t as f64 / (frames - 1) as f64
    } else {
        0.0
    };
    let e = traj.envelope(s) * traj.gain * cfg.motion_amplitude;
    let (lift, widen, aperture) = match traj.motion {
        MotionLabel::NoMotion => (0.0, 0.0, 0.0),
        MotionLabel::Smile => (14.0 * e, 6.0 * e, 10.0 * e),
        MotionLabel::MouthOpen => (0.0, -3.0 * e, 20.0 * e),
        MotionLabel::Other => {
            let osc = (2.0 * PI * traj.cycles * s + traj.phase).sin().abs();
            (
                -traj.other_lift * e,
                -traj.other_narrow * e,
                traj.other_open * osc * e,
            )
        }
    };
    let a = cfg.a(grade);
    MouthPose {
        lift: [a * lift, lift],
        widen: [a * widen, widen],
        aperture,
        affected_scale: a,
        droop: (1.0 - a) * cfg.droop_px,
        sag: (1.0 - a) * cfg.sag_px,
        teeth: if traj.motion == MotionLabel::Smile {
            1.0
        } else {
            0.0
        },
    }
}

fn soft(d: f64) -> f64 {
    (d + 0.5).clamp(0.0, 1.0)
}

fn mix(a: [f64; 3], b: [f64; 3], w: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * w)
}

/// Static background, face and eyes.
fn base_layer(cfg: &SyntheticConfig, look: &Appearance, offset: (f64, f64)) -> Vec<[f64; 3]> {
    let n = cfg.size;
    let (cx, cy) = (look.center.0 + offset.0, look.center.1 + offset.1);
    let (rx, ry) = (cfg.px(46.0) * look.scale, cfg.px(56.0) * look.scale);
    let eyes = [-1.0, 1.0].map(|side| {
        (
            cx + side * cfg.px(18.0) * look.scale,
            cy - cfg.px(16.0) * look.scale,
        )
    });
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let mut px = [0, 1, 2].map(|c| {
                let (fx, fy, ph, amp) = look.texture[c];
                look.background[c] + amp * (fx * xf + fy * yf + ph).sin()
            });
            // Signed distance to the face ellipse, approximately in pixels.
            let r = (((xf - cx) / rx).powi(2) + ((yf - cy) / ry).powi(2)).sqrt();
            px = mix(px, look.skin, soft((1.0 - r) * rx.min(ry)));
            for &(ex, ey) in &eyes {
                let d = ((xf - ex).powi(2) + (yf - ey).powi(2)).sqrt();
                px = mix(px, [0.05, 0.05, 0.08], soft(look.eye_radius - d));
            }
            out.push(px);
        }
    }
    out
}

/// Draws the mouth band onto `frame`.
fn draw_mouth(
    cfg: &SyntheticConfig,
    look: &Appearance,
    offset: (f64, f64),
    pose: &MouthPose,
    frame: &mut [[f64; 3]],
) {
    let n = cfg.size;
    let k = look.scale * cfg.size as f64 / REFERENCE_SIZE;
    let mx = look.center.0 + offset.0;
    let my = look.center.1 + offset.1 + 14.0 * k;
    let half = [0, 1].map(|s| (30.0 + pose.widen[s]).max(4.0) * k);
    let th = 5.0 * k;
    let interior = mix([0.02, 0.0, 0.0], [0.95, 0.93, 0.88], pose.teeth);
    let top = my - 18.0 * k;
    let bottom = my + (pose.aperture + pose.droop + pose.sag + 18.0) * k;
    let x0 = (mx - half[0] - 2.0).floor().max(0.0) as usize;
    let x1 = ((mx + half[1] + 2.0).ceil() as usize).min(n - 1);
    let y0 = top.floor().max(0.0) as usize;
    let y1 = (bottom.ceil() as usize).min(n - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (xf, yf) = (x as f64, y as f64);
            let side = usize::from(xf >= mx);
            let u = (xf - mx) / half[side];
            let inside_x = soft((1.0 - u.abs()) * half[side]);
            if inside_x == 0.0 {
                continue;
            }
            let u = u.clamp(-1.0, 1.0);
            let (corner_lift, ap_scale, slack) = if side == 0 {
                (
                    pose.lift[0] - pose.droop,
                    1.0 + (pose.affected_scale - 1.0) * -u,
                    pose.sag * (-2.0 * u).min(1.0),
                )
            } else {
                (pose.lift[1], 1.0, 0.0)
            };
            let upper = my - corner_lift * k * u * u;
            let gap = pose.aperture * (1.0 - u * u) * ap_scale * k;
            let lower = upper + gap;
            let lip =
                soft(yf - (upper - th / 2.0)) * soft(lower + th / 2.0 + slack * k - yf) * inside_x;
            if lip == 0.0 {
                continue;
            }
            let hole = soft(yf - (upper + th / 2.0)) * soft(lower - th / 2.0 - yf);
            let colour = mix(look.lip, interior, hole);
            let p = &mut frame[y * n + x];
            *p = mix(*p, colour, lip);
        }
    }
}

/// Renders one labelled clip. Deterministic in all arguments.
pub fn generate_sequence(
    cfg: &SyntheticConfig,
    subject_id: &str,
    motion: MotionLabel,
    grade: u8,
    seed: u64,
) -> Result<VideoSequence<f32>> {
    check_grade(grade)?;
    cfg.validate()?;
    let look = Appearance::sample(cfg, cfg.appearance_seed(subject_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj = Trajectory::sample(motion, &mut rng);
    let offset = (cfg.px(traj.head_offset.0), cfg.px(traj.head_offset.1));
    let base = base_layer(cfg, &look, offset);
    let (t, n) = (cfg.frames, cfg.size);
    let mut data = Vec::with_capacity(t * n * n * 3);
    let mut frame = base.clone();
    for f in 0..t {
        frame.copy_from_slice(&base);
        let pose = mouth_pose(cfg, &traj, grade, f, t);
        draw_mouth(cfg, &look, offset, &pose, &mut frame);
        for px in &frame {
            for &v in px {
                let noisy = v + rng.random_range(-1.0..=1.0) * cfg.noise;
                data.push(noisy.clamp(0.0, 1.0) as f32);
            }
        }
    }
    VideoSequence::new(
        Tensor::new(vec![t, n, n, 3], data)?,
        subject_id,
        motion,
        grade,
    )
}

/// Seed of one clip, derived from the global seed and its identity.
pub fn sequence_seed(
    cfg: &SyntheticConfig,
    subject_id: &str,
    motion: MotionLabel,
    rep: usize,
) -> u64 {
    fnv1a(format!("sequence:{}:{subject_id}:{motion}:{rep}", cfg.seed).as_bytes())
}

/// Writes every clip plus `manifest.json` under `out_dir`.
pub fn generate_dataset(cfg: &SyntheticConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let mut records = Vec::new();
    for index in 0..cfg.subjects {
        let subject = cfg.subject_id(index);
        let dir = out_dir.join(&subject);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for rep in 0..cfg.reps {
            let grade = cfg.grade_of(index, rep);
            for &motion in &cfg.motions {
                let seed = sequence_seed(cfg, &subject, motion, rep);
                let seq = generate_sequence(cfg, &subject, motion, grade, seed)?;
                let rel = format!("{subject}/{motion}_r{rep:02}.psq");
                videopipe::save_psq1(out_dir.join(&rel), seq.frames())?;
                records.push(SampleRecord {
                    subject_id: subject.clone(),
                    motion_label: motion,
                    palsy_grade: grade,
                    path: rel,
                });
            }
        }
    }
    let manifest = Manifest::new(records);
    save_manifest(out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads the clip of one record.
pub fn load_record(manifest_dir: &Path, r: &SampleRecord) -> Result<VideoSequence<f32>> {
    let frames = videopipe::load_psq1(manifest_dir.join(&r.path))?;
    VideoSequence::new(frames, r.subject_id.clone(), r.motion_label, r.palsy_grade)
}

pub fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Draws record indices with replacement, each weighted by the inverse of
/// its class count, so every class is equally likely.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    batch_size: usize,
}

impl WeightedSampler {
    pub fn new(labels: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if labels.is_empty() || batch_size == 0 {
            return Err(Error::Invalid(
                "sampler needs records and a positive batch size".into(),
            ));
        }
        let classes = labels.iter().max().unwrap() + 1;
        let mut counts = vec![0usize; classes];
        for &y in labels {
            counts[y] += 1;
        }
        let weights: Vec<f64> = labels.iter().map(|&y| 1.0 / counts[y] as f64).collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::Invalid(format!("sampler weights: {e}")))?;
        Ok(WeightedSampler {
            dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch_size,
        })
    }

    /// Like [`WeightedSampler::new`] but requires every class in
    /// `0..classes` to be present.
    pub fn for_classes(
        labels: &[usize],
        classes: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let present: BTreeSet<usize> = labels.iter().copied().collect();
        if let Some(missing) = (0..classes).find(|c| !present.contains(c)) {
            return Err(Error::Invalid(format!("class {missing} has no records")));
        }
        if let Some(&bad) = present.iter().find(|&&c| c >= classes) {
            return Err(Error::Label {
                label: bad,
                classes,
            });
        }
        Self::new(labels, batch_size, seed)
    }

    pub fn draw(&mut self) -> usize {
        self.dist.sample(&mut self.rng)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        (0..self.batch_size).map(|_| self.draw()).collect()
    }
}

impl Iterator for WeightedSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// Number of records per class.
pub fn class_counts(labels: &[usize], classes: usize) -> BTreeMap<usize, usize> {
    let mut counts: BTreeMap<usize, usize> = (0..classes).map(|c| (c, 0)).collect();
    for &y in labels {
        *counts.entry(y).or_default() += 1;
    }
    counts
}
