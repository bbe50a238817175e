//! Parametric motion families, their caption templates and trajectory synthesis.
//!
//! Each [`MotionClass`] is one caption class: a family plus its discrete
//! parameters (direction, count, degrees). Captions are rendered from a fixed
//! template grammar and parse back to exactly one class. Continuous parameters
//! (speed, amplitude, radius, gait phase) are jittered per sequence; frames
//! carry no additional per-frame noise.

use std::f64::consts::{PI, TAU};
use std::fmt;

use glam::{DQuat, DVec3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::motion::MotionSequence;
use crate::rng::Rng;
use crate::skeleton::{forward_kinematics, Skeleton};

pub const PELVIS_HEIGHT: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    WalkStraight,
    WalkCircleCw,
    WalkCircleCcw,
    #[serde(rename = "figure-8")]
    Figure8,
    #[serde(rename = "turn-n-degrees")]
    TurnNDegrees,
    ArmRaiseLeft,
    ArmRaiseRight,
    KickKTimes,
    JumpKTimes,
    Sidestep,
}

impl Family {
    pub const ALL: [Family; 10] = [
        Family::WalkStraight,
        Family::WalkCircleCw,
        Family::WalkCircleCcw,
        Family::Figure8,
        Family::TurnNDegrees,
        Family::ArmRaiseLeft,
        Family::ArmRaiseRight,
        Family::KickKTimes,
        Family::JumpKTimes,
        Family::Sidestep,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Family::WalkStraight => "walk-straight",
            Family::WalkCircleCw => "walk-circle-cw",
            Family::WalkCircleCcw => "walk-circle-ccw",
            Family::Figure8 => "figure-8",
            Family::TurnNDegrees => "turn-n-degrees",
            Family::ArmRaiseLeft => "arm-raise-left",
            Family::ArmRaiseRight => "arm-raise-right",
            Family::KickKTimes => "kick-k-times",
            Family::JumpKTimes => "jump-k-times",
            Family::Sidestep => "sidestep",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.tag() == tag)
    }

    pub fn classes(self) -> Vec<MotionClass> {
        MotionClass::all().into_iter().filter(|c| c.family() == self).collect()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One caption class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotionClass {
    WalkStraight { backward: bool, quick: bool },
    Circle { clockwise: bool, full: bool },
    Figure8,
    Turn { left: bool, degrees: u32 },
    ArmRaise { left: bool, count: u32 },
    Kick { left: bool, count: u32 },
    Jump { count: u32 },
    Sidestep { left: bool },
}

pub const TURN_DEGREES: [u32; 4] = [45, 90, 135, 180];
pub const SUBJECTS: [&str; 2] = ["a person", "someone"];

fn side(left: bool) -> &'static str {
    if left {
        "left"
    } else {
        "right"
    }
}

fn count_word(k: u32) -> &'static str {
    match k {
        1 => "once",
        2 => "twice",
        _ => "three times",
    }
}

impl MotionClass {
    /// Every caption class, in a fixed order; the position is the class id.
    pub fn all() -> Vec<MotionClass> {
        let mut v = Vec::new();
        for backward in [false, true] {
            for quick in [false, true] {
                v.push(MotionClass::WalkStraight { backward, quick });
            }
        }
        for clockwise in [true, false] {
            for full in [false, true] {
                v.push(MotionClass::Circle { clockwise, full });
            }
        }
        v.push(MotionClass::Figure8);
        for left in [true, false] {
            for degrees in TURN_DEGREES {
                v.push(MotionClass::Turn { left, degrees });
            }
        }
        for left in [true, false] {
            for count in 1..=3 {
                v.push(MotionClass::ArmRaise { left, count });
            }
        }
        for left in [true, false] {
            for count in 1..=3 {
                v.push(MotionClass::Kick { left, count });
            }
        }
        for count in 1..=3 {
            v.push(MotionClass::Jump { count });
        }
        for left in [true, false] {
            v.push(MotionClass::Sidestep { left });
        }
        v
    }

    pub fn id(self) -> usize {
        MotionClass::all().iter().position(|&c| c == self).expect("class is enumerated")
    }

    pub fn family(self) -> Family {
        match self {
            MotionClass::WalkStraight { .. } => Family::WalkStraight,
            MotionClass::Circle { clockwise: true, .. } => Family::WalkCircleCw,
            MotionClass::Circle { clockwise: false, .. } => Family::WalkCircleCcw,
            MotionClass::Figure8 => Family::Figure8,
            MotionClass::Turn { .. } => Family::TurnNDegrees,
            MotionClass::ArmRaise { left: true, .. } => Family::ArmRaiseLeft,
            MotionClass::ArmRaise { left: false, .. } => Family::ArmRaiseRight,
            MotionClass::Kick { .. } => Family::KickKTimes,
            MotionClass::Jump { .. } => Family::JumpKTimes,
            MotionClass::Sidestep { .. } => Family::Sidestep,
        }
    }

    /// Compact stable label, e.g. `turn-left-90`.
    pub fn label(self) -> String {
        match self {
            MotionClass::WalkStraight { backward, quick } => {
                format!("walk-{}-{}", if backward { "backward" } else { "forward" }, if quick { "quickly" } else { "slowly" })
            }
            MotionClass::Circle { clockwise, full } => {
                format!("circle-{}-{}", if clockwise { "cw" } else { "ccw" }, if full { "full" } else { "half" })
            }
            MotionClass::Figure8 => "figure-8".into(),
            MotionClass::Turn { left, degrees } => format!("turn-{}-{degrees}", side(left)),
            MotionClass::ArmRaise { left, count } => format!("arm-raise-{}-{count}", side(left)),
            MotionClass::Kick { left, count } => format!("kick-{}-{count}", side(left)),
            MotionClass::Jump { count } => format!("jump-{count}"),
            MotionClass::Sidestep { left } => format!("sidestep-{}", side(left)),
        }
    }

    pub fn from_label(label: &str) -> Option<MotionClass> {
        MotionClass::all().into_iter().find(|c| c.label() == label)
    }

    /// Caption from the template grammar; `subject` indexes [`SUBJECTS`].
    pub fn caption(self, subject: usize) -> String {
        let s = SUBJECTS[subject % SUBJECTS.len()];
        match self {
            MotionClass::WalkStraight { backward, quick } => {
                format!("{s} walks {} {}", if backward { "backward" } else { "forward" }, if quick { "quickly" } else { "slowly" })
            }
            MotionClass::Circle { clockwise, full } => format!(
                "{s} walks in a {} {} circle",
                if clockwise { "clockwise" } else { "counterclockwise" },
                if full { "full" } else { "half" }
            ),
            MotionClass::Figure8 => format!("{s} walks in a figure 8"),
            MotionClass::Turn { left, degrees } => {
                format!("{s} walks forward and turns {} {degrees} degrees", side(left))
            }
            MotionClass::ArmRaise { left, count } => {
                format!("{s} raises the {} arm {}", side(left), count_word(count))
            }
            MotionClass::Kick { left, count } => {
                format!("{s} kicks with the {} leg {}", side(left), count_word(count))
            }
            MotionClass::Jump { count } => format!("{s} jumps in place {}", count_word(count)),
            MotionClass::Sidestep { left } => format!("{s} steps sideways to the {}", side(left)),
        }
    }
}

fn normalize_words(text: &str) -> String {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" ")
}

/// Parses a template caption back to its class; `None` for free text.
pub fn parse_caption(caption: &str) -> Option<MotionClass> {
    let norm = normalize_words(caption);
    MotionClass::all().into_iter().find(|c| (0..SUBJECTS.len()).any(|s| c.caption(s) == norm))
}

/// Continuous per-sequence parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    /// Multiplies the family's nominal speed.
    pub speed_scale: f64,
    /// Multiplies limb and jump amplitudes.
    pub amp_scale: f64,
    /// Circle radius in meters; `None` derives it from speed and duration.
    pub radius: Option<f64>,
    /// Initial gait phase in radians.
    pub phase: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self { speed_scale: 1.0, amp_scale: 1.0, radius: None, phase: 0.0 }
    }
}

impl MotionParams {
    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            speed_scale: rng.random_range(0.9..1.1),
            amp_scale: rng.random_range(0.9..1.1),
            radius: None,
            phase: rng.random_range(0.0..TAU),
        }
    }
}

/// Root path sample: position on the ground plane, heading of travel/facing.
#[derive(Debug, Clone, Copy)]
struct PathPoint {
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
}

/// Angle-swept arc starting at the origin heading +x; `sign` +1 turns left.
fn arc(radius: f64, swept: f64, sign: f64) -> (f64, f64, f64) {
    (radius * swept.sin(), sign * radius * (1.0 - swept.cos()), sign * swept)
}

fn root_path(class: MotionClass, p: &MotionParams, s: f64, duration: f64) -> PathPoint {
    let u = (s / duration).clamp(0.0, 1.0);
    let walk = 1.1 * p.speed_scale;
    match class {
        MotionClass::WalkStraight { backward, quick } => {
            let v = if quick { 1.5 } else { 0.7 } * p.speed_scale;
            let dir = if backward { -1.0 } else { 1.0 };
            PathPoint { x: dir * v * s, y: 0.0, heading: 0.0, speed: v }
        }
        MotionClass::Circle { clockwise, full } => {
            let extent = if full { TAU } else { PI };
            let r = p.radius.unwrap_or_else(|| (walk * duration / extent).clamp(0.3, 3.0));
            let sign = if clockwise { -1.0 } else { 1.0 };
            let (x, y, heading) = arc(r, extent * u, sign);
            PathPoint { x, y, heading, speed: r * extent / duration }
        }
        MotionClass::Figure8 => {
            let r = p.radius.unwrap_or_else(|| (walk * duration / (2.0 * TAU)).clamp(0.3, 3.0));
            let (x, y, heading) = if u < 0.5 { arc(r, TAU * 2.0 * u, 1.0) } else { arc(r, TAU * (2.0 * u - 1.0), -1.0) };
            PathPoint { x, y, heading, speed: 2.0 * r * TAU / duration }
        }
        MotionClass::Turn { left, degrees } => {
            let sign = if left { 1.0 } else { -1.0 };
            let total = (degrees as f64).to_radians();
            let (s1, s2) = (0.25 * duration, 0.75 * duration);
            if s <= s1 {
                PathPoint { x: walk * s, y: 0.0, heading: 0.0, speed: walk }
            } else {
                let omega = total / (s2 - s1);
                let radius = walk / omega;
                let swept = omega * (s.min(s2) - s1);
                let (ax, ay, heading) = arc(radius, swept, sign);
                let (mut x, mut y) = (walk * s1 + ax, ay);
                if s > s2 {
                    x += walk * (s - s2) * heading.cos();
                    y += walk * (s - s2) * heading.sin();
                }
                PathPoint { x, y, heading, speed: walk }
            }
        }
        MotionClass::Sidestep { left } => {
            let v = 0.5 * p.speed_scale;
            PathPoint { x: 0.0, y: if left { v * s } else { -v * s }, heading: 0.0, speed: v }
        }
        MotionClass::ArmRaise { .. } | MotionClass::Kick { .. } | MotionClass::Jump { .. } => {
            let sway = 0.01 * (TAU * 0.3 * s + p.phase).sin();
            PathPoint { x: sway, y: 0.0, heading: 0.0, speed: 0.0 }
        }
    }
}

/// Raised-cosine bumps, one per repetition, each inside its own window.
fn repetition_bump(u: f64, count: u32, active: (f64, f64)) -> f64 {
    let k = count.max(1) as f64;
    let w = (u * k).min(k - 1e-12);
    let local = w - w.floor();
    let (a, b) = active;
    if local <= a || local >= b {
        0.0
    } else {
        let x = (local - a) / (b - a);
        (PI * x).sin().powi(2)
    }
}

/// Local joint rotations and root height for one frame.
fn pose(class: MotionClass, p: &MotionParams, s: f64, duration: f64, speed: f64) -> (f64, [DQuat; 9]) {
    let u = (s / duration).clamp(0.0, 1.0);
    let mut rot = [DQuat::IDENTITY; 9];
    let mut height = PELVIS_HEIGHT;
    // Flexion moves the child forward (+x): negative rotation about y.
    let flex = |a: f64| DQuat::from_rotation_y(-a);
    // Abduction about x: positive moves the child toward +y.
    let abduct = |a: f64| DQuat::from_rotation_x(a);

    let gait = |stride_amp: f64, rot: &mut [DQuat; 9], height: &mut f64| {
        let cadence = 0.8 + 0.4 * speed;
        let phi = p.phase + TAU * cadence * s;
        let a = stride_amp * phi.sin();
        rot[1] = flex(a);
        rot[3] = flex(-a);
        rot[5] = flex(-0.6 * a);
        rot[7] = flex(0.6 * a);
        *height += 0.02 * (2.0 * phi).cos();
    };

    match class {
        MotionClass::WalkStraight { .. } | MotionClass::Circle { .. } | MotionClass::Figure8 | MotionClass::Turn { .. } => {
            let amp = (0.25 + 0.1 * speed) * p.amp_scale;
            gait(amp, &mut rot, &mut height);
        }
        MotionClass::Sidestep { left } => {
            let cadence = 1.2;
            let phi = p.phase + TAU * cadence * s;
            let b = 0.25 * p.amp_scale;
            let lead = b * phi.sin().max(0.0);
            let trail = b * (-phi.sin()).max(0.0);
            let (l, r) = if left { (lead, trail) } else { (trail, lead) };
            rot[1] = abduct(l);
            rot[3] = abduct(-r);
            height += 0.015 * (2.0 * phi).cos();
        }
        MotionClass::ArmRaise { left, count } => {
            let a = 2.5 * p.amp_scale * repetition_bump(u, count, (0.1, 0.9));
            let (j, sign) = if left { (5, 1.0) } else { (7, -1.0) };
            rot[j] = abduct(sign * a);
            let other = if left { 7 } else { 5 };
            rot[other] = flex(0.05 * (TAU * 0.3 * s + p.phase).sin());
        }
        MotionClass::Kick { left, count } => {
            let a = 1.2 * p.amp_scale * repetition_bump(u, count, (0.15, 0.85));
            let (j, arm) = if left { (1, 7) } else { (3, 5) };
            rot[j] = flex(a);
            rot[arm] = flex(0.4 * a);
        }
        MotionClass::Jump { count } => {
            let h = 0.28 * p.amp_scale * repetition_bump(u, count, (0.2, 0.8)).sqrt();
            height += h;
            let tuck = 0.3 * h / 0.28;
            rot[1] = flex(tuck);
            rot[3] = flex(tuck);
            rot[5] = abduct(0.6 * tuck);
            rot[7] = abduct(-0.6 * tuck);
        }
    }
    (height, rot)
}

/// Synthesizes one captioned sequence on the desk skeleton.
pub fn synthesize(
    class: MotionClass,
    params: &MotionParams,
    num_frames: usize,
    fps: f64,
    subject: usize,
    skeleton: &Skeleton,
) -> Result<MotionSequence> {
    assert_eq!(skeleton.num_joints(), 9, "families are authored for the 9-joint desk skeleton");
    let duration = (num_frames.max(2) - 1) as f64 / fps;
    let mut roots = Vec::with_capacity(num_frames);
    let mut rots = Vec::with_capacity(num_frames);
    for i in 0..num_frames {
        let s = i as f64 / fps;
        let path = root_path(class, params, s, duration);
        let (height, mut local) = pose(class, params, s, duration, path.speed);
        local[0] = DQuat::from_rotation_z(path.heading);
        roots.push(DVec3::new(path.x, path.y, height));
        rots.push(local.to_vec());
    }
    let pos = forward_kinematics(skeleton, &roots, &rots)?;
    let frames: Vec<f32> = pos.iter().flat_map(|f| f.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])).collect();
    MotionSequence::full(frames, num_frames, skeleton.num_joints(), fps as f32, class.caption(subject))
}
