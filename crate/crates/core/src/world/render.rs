use nalgebra::Vector3;

use super::scene::{ObjectShape, SceneConfig};
use super::WorldState;
use crate::geometry::{CameraExtrinsics, CameraKind, CameraModel, CameraRig, CameraView, GeometryError};
use crate::image::RgbImage;
use crate::raster::{convex_hull, fill_circle, fill_polygon, round_px};

const NEAR: f64 = 0.01;
const BODY_RADIUS: f64 = 0.022;
const FINGER_RADIUS: f64 = 0.01;
const BODY_COLOR: [u8; 3] = [225, 225, 230];
const FINGER_COLOR: [u8; 3] = [110, 110, 125];

fn project_unbounded(cam: &CameraModel, p: &Vector3<f64>) -> (f64, f64) {
    match cam.kind {
        CameraKind::Pinhole => (cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy),
        CameraKind::EquidistantFisheye { .. } => {
            let rxy = (p.x * p.x + p.y * p.y).sqrt();
            if rxy == 0.0 {
                return (cam.cx, cam.cy);
            }
            let theta = rxy.atan2(p.z);
            (cam.fx * theta * p.x / rxy + cam.cx, cam.fy * theta * p.y / rxy + cam.cy)
        }
    }
}

fn focal_at(cam: &CameraModel) -> f64 {
    0.5 * (cam.fx + cam.fy)
}

/// Sutherland-Hodgman clip of a camera-frame polygon against z >= NEAR.
fn clip_near(poly: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (ina, inb) = (a.z >= NEAR, b.z >= NEAR);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (NEAR - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

fn shade(c: [u8; 3], f: f64) -> [u8; 3] {
    c.map(|v| (v as f64 * f).round().min(255.0) as u8)
}

enum Prim {
    Disc { center: Vector3<f64>, radius: f64, color: [u8; 3] },
    Block { corners: [Vector3<f64>; 8], color: [u8; 3] },
}

/// Renders one view. Painter's order: background, table, then objects and
/// gripper parts far to near. A wrist camera does not see its own gripper body.
pub fn render(state: &WorldState, scene: &SceneConfig, view: &CameraView) -> Result<RgbImage, GeometryError> {
    let cam = &view.camera;
    let c2w = view.extrinsics.camera_to_world(Some(&vec![state.gripper]))?;
    let w2c = c2w.inverse();
    let mut img = RgbImage::filled(cam.width, cam.height, scene.background);

    let t = &scene.table;
    let corners: Vec<Vector3<f64>> = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
        .iter()
        .map(|(sx, sy)| {
            w2c.transform_point(&Vector3::new(
                t.center[0] + sx * t.half_size[0],
                t.center[1] + sy * t.half_size[1],
                t.height,
            ))
        })
        .collect();
    let clipped = clip_near(&corners);
    let pts: Vec<(f64, f64)> = clipped.iter().map(|p| project_unbounded(cam, p)).collect();
    fill_polygon(&mut img, &pts, t.color);

    let mut prims: Vec<(f64, Prim)> = Vec::new();
    for o in &state.objects {
        let c = w2c.transform_point(&o.position);
        let prim = match o.shape {
            ObjectShape::Sphere => Prim::Disc { center: c, radius: o.half_extent, color: o.color },
            ObjectShape::Box => {
                let (s, co) = o.yaw.sin_cos();
                let h = o.half_extent;
                let mut corners = [Vector3::zeros(); 8];
                for (k, corner) in corners.iter_mut().enumerate() {
                    let lx = if k & 1 == 0 { -h } else { h };
                    let ly = if k & 2 == 0 { -h } else { h };
                    let lz = if k & 4 == 0 { -h } else { h };
                    let pw = o.position + Vector3::new(co * lx - s * ly, s * lx + co * ly, lz);
                    *corner = w2c.transform_point(&pw);
                }
                Prim::Block { corners, color: o.color }
            }
        };
        prims.push((c.z, prim));
    }

    let g = &state.gripper;
    let own_wrist = matches!(view.extrinsics, CameraExtrinsics::Wrist { arm, .. } if arm == g.arm);
    let rot = g.pose.to_transform().rotation;
    if !own_wrist {
        let c = w2c.transform_point(&g.pose.position);
        prims.push((c.z, Prim::Disc { center: c, radius: BODY_RADIUS, color: BODY_COLOR }));
    }
    let spread = 0.015 + 0.03 * g.openness.clamp(0.0, 1.0);
    for side in [-1.0, 1.0] {
        let pw = g.pose.position + rot * Vector3::new(0.0, side * spread, 0.0);
        let c = w2c.transform_point(&pw);
        prims.push((c.z, Prim::Disc { center: c, radius: FINGER_RADIUS, color: FINGER_COLOR }));
    }

    prims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let f = focal_at(cam);
    for (_, prim) in prims {
        match prim {
            Prim::Disc { center, radius, color } => {
                if center.z < NEAR {
                    continue;
                }
                let (u, v) = project_unbounded(cam, &center);
                let r = (f * radius / center.z).round() as i64;
                fill_circle(&mut img, round_px(u), round_px(v), r.max(1), color);
            }
            Prim::Block { corners, color } => {
                if corners.iter().any(|c| c.z < NEAR) {
                    continue;
                }
                let px: Vec<(f64, f64)> = corners.iter().map(|c| project_unbounded(cam, c)).collect();
                fill_polygon(&mut img, &convex_hull(px.clone()), shade(color, 0.7));
                // top face: corners 4..8 in loop order
                let top = [px[4], px[5], px[7], px[6]];
                fill_polygon(&mut img, &top, color);
            }
        }
    }
    Ok(img)
}

/// One frame per rig view.
pub fn render_views(state: &WorldState, scene: &SceneConfig, rig: &CameraRig) -> Result<Vec<RgbImage>, GeometryError> {
    rig.views.iter().map(|v| render(state, scene, v)).collect()
}
