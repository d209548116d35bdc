//! Spatial pose-injection images: for each arm, a shaded circle at the
//! projected EEF position (shade encodes openness) plus three orientation
//! axis segments, drawn on black.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    project, ActionFrame, ActionState, ActionTrajectory, ArmId, CameraModel, CameraRig, GeometryError,
    RigidTransform,
};
use crate::image::RgbImage;
use crate::raster::{draw_line, fill_circle, round_px};

/// Colours for one arm's glyph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmPalette {
    /// Per-channel multiplier (0 or 1) applied to the openness shade.
    pub circle_tint: [u8; 3],
    /// Colours of the x, y, z axis segments.
    pub axes: [[u8; 3]; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlyphStyle {
    pub left: ArmPalette,
    pub right: ArmPalette,
    pub circle_radius_m: f64,
    pub axis_length_m: f64,
    pub min_shade: u8,
    pub max_shade: u8,
    pub min_radius_px: i64,
    pub max_radius_px: i64,
}

impl Default for GlyphStyle {
    fn default() -> Self {
        Self {
            left: ArmPalette { circle_tint: [1, 1, 0], axes: [[255, 0, 0], [0, 255, 0], [0, 0, 255]] },
            right: ArmPalette { circle_tint: [0, 1, 1], axes: [[255, 128, 0], [128, 0, 255], [255, 0, 128]] },
            circle_radius_m: 0.03,
            axis_length_m: 0.10,
            min_shade: 64,
            max_shade: 255,
            min_radius_px: 2,
            max_radius_px: 12,
        }
    }
}

impl GlyphStyle {
    pub fn palette(&self, arm: ArmId) -> &ArmPalette {
        match arm {
            ArmId::Left => &self.left,
            ArmId::Right => &self.right,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.left == self.right {
            return Err("left and right palettes must differ".into());
        }
        if self.min_shade < 16 || self.min_shade > self.max_shade {
            return Err(format!("shade range [{}, {}] outside [16, 255]", self.min_shade, self.max_shade));
        }
        Ok(())
    }

    /// `min + openness * (max - min)`, rounded.
    pub fn shade(&self, openness: f64) -> u8 {
        let (lo, hi) = (self.min_shade as f64, self.max_shade as f64);
        (lo + openness.clamp(0.0, 1.0) * (hi - lo)).round() as u8
    }
}

/// Image-space layout of one arm's glyph.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphLayout {
    pub arm: ArmId,
    pub center: (f64, f64),
    pub depth: f64,
    pub radius_px: i64,
    pub shade: u8,
    /// Projected endpoints of the x, y, z segments; `None` when behind the camera.
    pub axis_ends: [Option<(f64, f64)>; 3],
}

pub fn layout_glyph(
    state: &ActionState,
    camera: &CameraModel,
    camera_to_world: &RigidTransform,
    style: &GlyphStyle,
) -> Result<GlyphLayout, GeometryError> {
    let center = project(&state.pose.position, camera, camera_to_world)?;
    let radius = (camera.fx * style.circle_radius_m / center.depth).round() as i64;
    let rot = state.pose.to_transform().rotation;
    let mut axis_ends = [None; 3];
    for (i, end) in axis_ends.iter_mut().enumerate() {
        let mut e = Vector3::zeros();
        e[i] = style.axis_length_m;
        let tip = state.pose.position + rot * e;
        *end = project(&tip, camera, camera_to_world).ok().map(|p| (p.u, p.v));
    }
    Ok(GlyphLayout {
        arm: state.arm,
        center: (center.u, center.v),
        depth: center.depth,
        radius_px: radius.clamp(style.min_radius_px, style.max_radius_px),
        shade: style.shade(state.openness),
        axis_ends,
    })
}

/// Draws every arm of `states` whose EEF projects in front of the camera.
/// Arms behind the camera are skipped; if none is visible the map is black.
pub fn render_action_map(
    states: &ActionFrame,
    camera: &CameraModel,
    camera_to_world: &RigidTransform,
    style: &GlyphStyle,
) -> RgbImage {
    let mut img = RgbImage::new(camera.width, camera.height);
    for state in states {
        let layout = match layout_glyph(state, camera, camera_to_world, style) {
            Ok(l) => l,
            Err(e) => {
                log::debug!("arm {:?} not drawn: {e}", state.arm);
                continue;
            }
        };
        let palette = style.palette(state.arm);
        let (cx, cy) = (round_px(layout.center.0), round_px(layout.center.1));
        let tint = palette.circle_tint;
        let fill = [tint[0] * layout.shade, tint[1] * layout.shade, tint[2] * layout.shade];
        fill_circle(&mut img, cx, cy, layout.radius_px, fill);
        for (end, colour) in layout.axis_ends.iter().zip(palette.axes) {
            if let Some((u, v)) = end {
                draw_line(&mut img, cx, cy, round_px(*u), round_px(*v), colour);
            }
        }
    }
    img
}

/// Action maps for every view and frame, indexed `[view][frame]`. Wrist
/// views use the camera pose implied by the same frame's action.
pub fn render_action_map_sequence(
    traj: &ActionTrajectory,
    rig: &CameraRig,
    style: &GlyphStyle,
) -> Result<Vec<Vec<RgbImage>>, GeometryError> {
    rig.views
        .iter()
        .map(|view| {
            traj.frames()
                .iter()
                .map(|frame| {
                    let c2w = view.extrinsics.camera_to_world(Some(frame))?;
                    Ok(render_action_map(frame, &view.camera, &c2w, style))
                })
                .collect()
        })
        .collect()
}
