//! Legged-robot morphology descriptors.
//!
//! Conventions: legs are numbered clockwise about the body z-axis and joints
//! are numbered outward from the body. The order of `legs` and of each leg's
//! `joints` is that numbering.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

pub const MIN_LEGS: usize = 4;
pub const MAX_LEGS: usize = 6;
pub const MIN_JOINTS: usize = 2;
pub const MAX_JOINTS: usize = 3;

/// Per-joint feature width: pos, vel, link length, range lo/hi, axis xyz.
pub const JOINT_FEATURES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct JointDescriptor {
    pub range: (f64, f64),
    pub axis: [f64; 3],
    pub link_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LegDescriptor {
    /// Attach point relative to the body's centre of mass (m).
    pub attach: [f64; 3],
    pub joints: Vec<JointDescriptor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeggedMorphology {
    pub legs: Vec<LegDescriptor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LegLayout {
    /// Legs evenly spaced on a circle around the body.
    Radial,
    /// Two parallel rows of legs along the body's y-axis.
    Line,
}

impl LeggedMorphology {
    pub fn new(legs: Vec<LegDescriptor>) -> Result<Self> {
        let m = Self { legs };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.legs.len();
        if !(MIN_LEGS..=MAX_LEGS).contains(&n) {
            return Err(Error::Parameter(format!("{n} legs, expected {MIN_LEGS}..={MAX_LEGS}")));
        }
        for (i, leg) in self.legs.iter().enumerate() {
            let j = leg.joints.len();
            if !(MIN_JOINTS..=MAX_JOINTS).contains(&j) {
                return Err(Error::Parameter(format!("leg {i} has {j} joints, expected {MIN_JOINTS}..={MAX_JOINTS}")));
            }
            for (k, joint) in leg.joints.iter().enumerate() {
                let [x, y, z] = joint.axis;
                if (math::sqrt(x * x + y * y + z * z) - 1.0).abs() > 1e-9 {
                    return Err(Error::Parameter(format!("leg {i} joint {k}: axis is not a unit vector")));
                }
                if !(joint.range.0 < joint.range.1) {
                    return Err(Error::Parameter(format!("leg {i} joint {k}: empty joint range")));
                }
                if !(joint.link_length > 0.0) {
                    return Err(Error::Parameter(format!("leg {i} joint {k}: non-positive link length")));
                }
            }
        }
        Ok(())
    }

    pub fn total_joints(&self) -> usize {
        self.legs.iter().map(|l| l.joints.len()).sum()
    }

    pub fn dofs_per_leg(&self) -> Vec<usize> {
        self.legs.iter().map(|l| l.joints.len()).collect()
    }

    /// Standard body with the given joint count per leg.
    pub fn standard(layout: LegLayout, dofs: &[usize]) -> Result<Self> {
        let n = dofs.len();
        if let Some(d) = dofs.iter().find(|d| !(MIN_JOINTS..=MAX_JOINTS).contains(d)) {
            return Err(Error::Parameter(format!("{d} joints per leg, expected {MIN_JOINTS}..={MAX_JOINTS}")));
        }
        let legs = dofs
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let attach = attach_point(layout, i, n);
                let heading = libm::atan2(attach[1], attach[0]);
                LegDescriptor { attach, joints: standard_joints(d, heading) }
            })
            .collect();
        Self::new(legs)
    }
}

fn attach_point(layout: LegLayout, i: usize, n: usize) -> [f64; 3] {
    match layout {
        LegLayout::Radial => {
            // Clockwise from the front (+y) when viewed from +z.
            let a = core::f64::consts::FRAC_PI_2 - core::f64::consts::TAU * (i as f64 + 0.5) / n as f64;
            [0.25 * math::cos(a), 0.25 * math::sin(a), 0.0]
        }
        LegLayout::Line => {
            // Right side front to back, then left side back to front.
            let per_side = n / 2;
            let row = |k: usize| 0.3 - 0.6 * k as f64 / (per_side.max(2) - 1) as f64;
            if i < per_side {
                [0.15, row(i), 0.0]
            } else {
                [-0.15, row(n - 1 - i), 0.0]
            }
        }
    }
}

fn standard_joints(count: usize, heading: f64) -> Vec<JointDescriptor> {
    // Hip swings about z; outer joints pitch about the horizontal axis
    // perpendicular to the leg.
    let pitch = [-math::sin(heading), math::cos(heading), 0.0];
    let hip = JointDescriptor { range: (-0.52, 0.52), axis: [0.0, 0.0, 1.0], link_length: 0.2 };
    let ankle = JointDescriptor { range: (0.52, 1.22), axis: pitch, link_length: 0.4 };
    let foot = JointDescriptor { range: (-0.7, 0.7), axis: pitch, link_length: 0.3 };
    [hip, ankle, foot].into_iter().take(count).collect()
}

/// Named structural variants: (name, layout, DOF per leg, train member).
/// Variants that alter only joint limits or link lengths are not listed
/// since their altered values are not specified.
pub const STRUCTURAL_VARIANTS: &[(&str, LegLayout, &[usize], bool)] = &[
    ("Quadrupled_10", LegLayout::Radial, &[2, 2, 2, 2], true),
    ("Quadrupled_11", LegLayout::Radial, &[3, 2, 2, 2], true),
    ("Quadrupled_12", LegLayout::Radial, &[3, 3, 2, 2], false),
    ("Quadrupled_13", LegLayout::Radial, &[3, 3, 3, 2], true),
    ("Quadrupled_14", LegLayout::Radial, &[3, 3, 3, 3], true),
    ("Quadrupled_20", LegLayout::Line, &[2, 2, 2, 2], true),
    ("Quadrupled_21", LegLayout::Line, &[3, 2, 2, 2], false),
    ("Quadrupled_22", LegLayout::Line, &[2, 3, 2, 2], false),
    ("Quadrupled_23", LegLayout::Line, &[2, 2, 3, 2], true),
    ("Quadrupled_24", LegLayout::Line, &[2, 2, 2, 3], false),
    ("Quadrupled_25", LegLayout::Line, &[3, 2, 3, 2], true),
    ("Quadrupled_26", LegLayout::Line, &[3, 3, 3, 3], true),
    ("Hexapod_10", LegLayout::Radial, &[2, 2, 2, 2, 2, 2], true),
    ("Hexapod_11", LegLayout::Radial, &[2, 3, 2, 2, 2, 2], false),
    ("Hexapod_12", LegLayout::Radial, &[2, 3, 2, 2, 2, 3], true),
    ("Hexapod_13", LegLayout::Radial, &[3, 2, 3, 2, 3, 2], false),
    ("Hexapod_14", LegLayout::Radial, &[3, 3, 2, 3, 2, 3], true),
    ("Hexapod_15", LegLayout::Radial, &[3, 3, 3, 3, 2, 3], false),
    ("Hexapod_16", LegLayout::Radial, &[3, 3, 3, 3, 3, 3], true),
    ("Hexapod_20", LegLayout::Line, &[2, 2, 2, 2, 2, 2], true),
    ("Hexapod_21", LegLayout::Line, &[3, 2, 2, 2, 2, 2], true),
    ("Hexapod_22", LegLayout::Line, &[3, 2, 3, 2, 2, 2], false),
    ("Hexapod_23", LegLayout::Line, &[3, 2, 3, 2, 3, 2], false),
    ("Hexapod_24", LegLayout::Line, &[3, 3, 3, 2, 3, 2], false),
    ("Hexapod_25", LegLayout::Line, &[3, 3, 3, 3, 3, 2], true),
    ("Hexapod_26", LegLayout::Line, &[3, 3, 3, 3, 3, 3], false),
];

pub fn structural_variant(name: &str) -> Result<LeggedMorphology> {
    let (_, layout, dofs, _) = STRUCTURAL_VARIANTS
        .iter()
        .find(|v| v.0 == name)
        .ok_or_else(|| Error::Lookup(format!("unknown morphology {name:?}")))?;
    LeggedMorphology::standard(*layout, dofs)
}

pub fn structural_variant_names() -> Vec<String> {
    STRUCTURAL_VARIANTS.iter().map(|v| String::from(v.0)).collect()
}
