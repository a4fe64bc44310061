//! Procedural walkers rendered as binary silhouettes.
//!
//! Each identity is an articulated stick figure with its own proportions and
//! gait. A view angle `θ` is rendered from the canonical side view by scaling
//! widths by `0.4 + 0.6 |sin θ|` and shearing by `0.25 cos θ` about the hip
//! line. Bags add a rigid ellipse at hip height; coats widen the torso and
//! extend it over the thighs.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Condition, SilhouetteFrame};
use crate::{Error, Result};

pub const DEFAULT_CONDITIONS: &str = "nm:6,bg:2,cl:2";

const CANVAS: usize = 128;
const GROUND: f64 = 116.0;

/// Parses `nm:6,bg:2,cl:2` into per-condition sequence counts.
pub fn parse_conditions(spec: &str) -> Result<Vec<(Condition, u32)>> {
    let mut out: Vec<(Condition, u32)> = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let bad = || Error::InvalidArgument(format!("bad condition spec `{item}`"));
        let (cond, count) = item.split_once(':').ok_or_else(bad)?;
        let cond: Condition = cond.parse()?;
        let count: u32 = count.parse().map_err(|_| bad())?;
        if cond == Condition::Session || count == 0 || out.iter().any(|(c, _)| *c == cond) {
            return Err(bad());
        }
        out.push((cond, count));
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no conditions given".into()));
    }
    Ok(out)
}

/// Body and gait parameters of one synthetic identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityTraits {
    /// Standing height in canvas pixels.
    pub height: f64,
    /// Leg length as a fraction of height.
    pub leg: f64,
    /// Hip-to-shoulder length as a fraction of height.
    pub torso: f64,
    pub head: f64,
    pub width: f64,
    pub limb: f64,
    /// Peak thigh angle in radians.
    pub stride: f64,
    /// Gait cycles per frame.
    pub cadence: f64,
    pub arm_swing: f64,
    pub knee: f64,
    pub lean: f64,
}

/// Additive recurrence with the generalized golden ratio in `dims` dimensions.
fn kronecker_steps(dims: usize) -> Vec<f64> {
    let mut g: f64 = 1.5;
    for _ in 0..64 {
        let f = g.powi(dims as i32 + 1) - g - 1.0;
        let df = (dims as f64 + 1.0) * g.powi(dims as i32) - 1.0;
        g -= f / df;
    }
    (1..=dims).map(|k| (1.0 / g.powi(k as i32)).fract()).collect()
}

impl IdentityTraits {
    /// Traits of identity `i`: a low-discrepancy point in the trait box,
    /// offset by `seed`, so that identities spread evenly.
    pub fn for_identity(i: usize, seed: u64) -> Self {
        let steps = kronecker_steps(11);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1d);
        let u: Vec<f64> = steps
            .iter()
            .map(|a| (rng.gen::<f64>() + (i + 1) as f64 * a).fract())
            .collect();
        let lerp = |k: usize, lo: f64, hi: f64| lo + (hi - lo) * u[k];
        IdentityTraits {
            height: lerp(0, 80.0, 98.0),
            leg: lerp(1, 0.43, 0.55),
            torso: lerp(2, 0.26, 0.34),
            head: lerp(3, 0.05, 0.08),
            width: lerp(4, 0.12, 0.26),
            limb: lerp(5, 0.045, 0.085),
            stride: lerp(6, 0.2, 0.6),
            cadence: lerp(7, 1.0 / 18.0, 1.0 / 9.0),
            arm_swing: lerp(8, 0.05, 0.7),
            knee: lerp(9, 0.2, 1.0),
            lean: lerp(10, -0.12, 0.12),
        }
    }
}

type P = (f64, f64);

fn seg_dist2(p: P, a: P, b: P) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

enum Part {
    Capsule(P, P, f64),
    Ellipse(P, f64, f64),
}

impl Part {
    fn contains(&self, p: P) -> bool {
        match *self {
            Part::Capsule(a, b, r) => seg_dist2(p, a, b) <= r * r,
            Part::Ellipse(c, rx, ry) => {
                let (x, y) = ((p.0 - c.0) / rx, (p.1 - c.1) / ry);
                x * x + y * y <= 1.0
            }
        }
    }
}

fn offset(p: P, len: f64, angle: f64) -> P {
    // angle from straight down, positive towards +x (walking direction)
    (p.0 + len * angle.sin(), p.1 + len * angle.cos())
}

/// Canonical side-view parts at gait phase `phi`.
fn body(t: &IdentityTraits, condition: Condition, phi: f64, scale: f64) -> (Vec<Part>, f64) {
    let h = t.height * scale;
    let leg = t.leg * h;
    let limb = t.limb * h / 2.0;
    let hip_y = GROUND - leg * 0.97 - 0.015 * h * (2.0 * phi).cos();
    let hip = (64.0, hip_y);
    let shoulder = offset(hip, -t.torso * h, t.lean);
    let head = offset(shoulder, -(t.head * h * 1.25), t.lean);
    let mut parts = vec![Part::Ellipse(head, t.head * h, t.head * h * 1.1)];
    let torso_r = t.width * h / 2.0;
    match condition {
        Condition::Cl => {
            parts.push(Part::Capsule(hip, shoulder, torso_r * 1.45));
            let hem = offset(hip, leg * 0.3, 0.0);
            parts.push(Part::Capsule(hem, offset(hip, -t.torso * h * 0.4, t.lean), torso_r * 1.35));
        }
        _ => parts.push(Part::Capsule(hip, shoulder, torso_r)),
    }
    if condition == Condition::Bg {
        let c = (hip.0 - torso_r - 0.06 * h, hip.1 - 0.08 * h);
        parts.push(Part::Ellipse(c, 0.085 * h, 0.12 * h));
    }
    for side in [0.0, PI] {
        let ph = phi + side;
        let thigh = t.stride * ph.sin();
        let bend = t.knee * (0.5 + 0.5 * (ph + 1.9).sin()).powi(2);
        let knee = offset(hip, leg * 0.5, thigh);
        let ankle = offset(knee, leg * 0.5, thigh - bend);
        let toe = (ankle.0 + 0.11 * h, ankle.1);
        parts.push(Part::Capsule(hip, knee, limb * 1.15));
        parts.push(Part::Capsule(knee, ankle, limb));
        parts.push(Part::Capsule(ankle, toe, limb * 0.7));

        let upper = -t.arm_swing * ph.sin();
        let elbow = offset(shoulder, 0.19 * h, upper);
        let wrist = offset(elbow, 0.17 * h, upper + 0.25 + 0.3 * t.arm_swing);
        parts.push(Part::Capsule(shoulder, elbow, limb * 0.85));
        parts.push(Part::Capsule(elbow, wrist, limb * 0.75));
    }
    (parts, hip_y)
}

/// One frame on a 128×128 canvas.
fn render(t: &IdentityTraits, view: u32, condition: Condition, phi: f64, scale: f64, shift: P) -> SilhouetteFrame {
    let theta = f64::from(view).to_radians();
    let squeeze = 0.4 + 0.6 * theta.sin().abs();
    let shear = 0.25 * theta.cos();
    let (parts, hip_y) = body(t, condition, phi, scale);
    SilhouetteFrame::from_fn(CANVAS, CANVAS, |r, c| {
        let y = r as f64 + 0.5 - shift.1;
        let x = c as f64 + 0.5 - shift.0;
        let canonical = (64.0 + (x - 64.0 - shear * (y - hip_y)) / squeeze, y);
        parts.iter().any(|p| p.contains(canonical))
    })
}

fn sequence_seed(seed: u64, identity: usize, condition: Condition, seq: u32, view: u32) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [identity as u64, condition as u64, u64::from(seq), u64::from(view)] {
        h = (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(23);
    }
    h
}

/// Frames of one synthetic sequence.
pub fn synth_sequence(
    traits: &IdentityTraits,
    view: u32,
    condition: Condition,
    frames: usize,
    seed: u64,
) -> Vec<SilhouetteFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let scale = rng.gen_range(0.98..1.02);
    (0..frames)
        .map(|f| {
            let phi = phase + 2.0 * PI * traits.cadence * f as f64;
            let shift = (rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5));
            render(traits, view, condition, phi, scale, shift)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSummary {
    pub identities: usize,
    pub views: usize,
    pub sequences: usize,
    pub frames: usize,
}

/// Writes a CASIA-B-layout dataset under `root`. The output is a pure
/// function of the arguments.
pub fn synth_dataset(
    root: &Path,
    n_identities: usize,
    views: &[u32],
    conditions: &[(Condition, u32)],
    frames_per_seq: usize,
    seed: u64,
) -> Result<SynthSummary> {
    if n_identities < 2 {
        return Err(Error::InvalidArgument("need at least 2 identities".into()));
    }
    let mut sorted = views.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() < 2 || sorted.len() != views.len() {
        return Err(Error::InvalidArgument("need at least 2 distinct views".into()));
    }
    if frames_per_seq == 0 || conditions.is_empty() {
        return Err(Error::InvalidArgument("need frames and conditions".into()));
    }
    let mut jobs = Vec::new();
    for id in 0..n_identities {
        for &(cond, count) in conditions {
            for seq in 1..=count {
                for &view in views {
                    jobs.push((id, cond, seq, view));
                }
            }
        }
    }
    jobs.par_iter().try_for_each(|&(id, cond, seq, view)| {
        let traits = IdentityTraits::for_identity(id, seed);
        let dir = root
            .join(format!("{:03}", id + 1))
            .join(format!("{cond}-{seq:02}"))
            .join(format!("{view:03}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let frames = synth_sequence(&traits, view, cond, frames_per_seq, sequence_seed(seed, id, cond, seq, view));
        frames
            .iter()
            .enumerate()
            .try_for_each(|(i, f)| f.write_png(&dir.join(format!("{i:03}.png"))))
    })?;
    Ok(SynthSummary {
        identities: n_identities,
        views: views.len(),
        sequences: jobs.len(),
        frames: jobs.len() * frames_per_seq,
    })
}
