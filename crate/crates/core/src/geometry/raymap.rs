use nalgebra::Vector3;

use super::camera::CameraModel;
use super::rotation::RigidTransform;

/// Per-pixel ray origins and unit directions on the latent grid, expressed
/// in an anchor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RayMap {
    pub height: usize,
    pub width: usize,
    pub origins: Vec<Vector3<f64>>,
    pub directions: Vec<Vector3<f64>>,
}

impl RayMap {
    /// Frame-pixel coordinates of the center of latent cell `(i, j)` when a
    /// `frame_w x frame_h` raster is tiled into `width x height` cells.
    pub fn cell_center(frame_w: usize, frame_h: usize, grid_w: usize, grid_h: usize, i: usize, j: usize) -> (f64, f64) {
        let sx = frame_w as f64 / grid_w as f64;
        let sy = frame_h as f64 / grid_h as f64;
        ((j as f64 + 0.5) * sx - 0.5, (i as f64 + 0.5) * sy - 0.5)
    }

    /// Six planes, origins xyz then directions xyz, each `height * width`, row-major.
    pub fn to_channels(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 6 * n];
        for (k, (o, d)) in self.origins.iter().zip(&self.directions).enumerate() {
            for c in 0..3 {
                out[c * n + k] = o[c];
                out[(3 + c) * n + k] = d[c];
            }
        }
        out
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        Self { height, width, origins: vec![Vector3::zeros(); n], directions: vec![Vector3::zeros(); n] }
    }
}

/// Rays of `camera` posed at `camera_to_world`, sampled at latent-grid cell
/// centers and expressed in the frame of `anchor_to_world`.
pub fn compute_ray_map(
    camera: &CameraModel,
    camera_to_world: &RigidTransform,
    anchor_to_world: &RigidTransform,
    grid_h: usize,
    grid_w: usize,
) -> RayMap {
    let cam_in_anchor = anchor_to_world.inverse().compose(camera_to_world);
    let origin = cam_in_anchor.translation;
    let mut origins = Vec::with_capacity(grid_h * grid_w);
    let mut directions = Vec::with_capacity(grid_h * grid_w);
    for i in 0..grid_h {
        for j in 0..grid_w {
            let (u, v) = RayMap::cell_center(camera.width, camera.height, grid_w, grid_h, i, j);
            let d = cam_in_anchor.transform_vector(&camera.back_project(u, v)).normalize();
            origins.push(origin);
            directions.push(d);
        }
    }
    RayMap { height: grid_h, width: grid_w, origins, directions }
}
