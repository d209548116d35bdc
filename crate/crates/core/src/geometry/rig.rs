use serde::{Deserialize, Serialize};

use super::action::ActionFrame;
use super::camera::{CameraExtrinsics, CameraModel};
use super::raymap::{compute_ray_map, RayMap};
use super::rotation::RigidTransform;
use super::GeometryError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub name: String,
    pub camera: CameraModel,
    pub extrinsics: CameraExtrinsics,
}

/// Ordered set of calibrated views. View 0 is the anchor view for ray maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub views: Vec<CameraView>,
}

impl CameraRig {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.views.is_empty() {
            return Err(GeometryError::InvalidCamera("rig has no views".into()));
        }
        let (w, h) = (self.views[0].camera.width, self.views[0].camera.height);
        for v in &self.views {
            v.camera.validate()?;
            v.extrinsics.validate()?;
            if v.camera.width != w || v.camera.height != h {
                return Err(GeometryError::InvalidCamera(format!("view {} resolution differs", v.name)));
            }
        }
        Ok(())
    }

    pub fn view_index(&self, name: &str) -> Option<usize> {
        self.views.iter().position(|v| v.name == name)
    }

    /// Keeps the named views, in the given order.
    pub fn select(&self, names: &[String]) -> Result<CameraRig, GeometryError> {
        let views = names
            .iter()
            .map(|n| {
                self.views
                    .iter()
                    .find(|v| &v.name == n)
                    .cloned()
                    .ok_or_else(|| GeometryError::InvalidCamera(format!("unknown view {n}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CameraRig { views })
    }

    /// Anchor frame for ray maps: the first view's pose at `condition`.
    pub fn anchor(&self, condition: &ActionFrame) -> Result<RigidTransform, GeometryError> {
        self.views[0].extrinsics.camera_to_world(Some(condition))
    }

    /// One ray map per view for the action frame `at`, anchored at `anchor`.
    pub fn ray_maps(
        &self,
        at: &ActionFrame,
        anchor: &RigidTransform,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Vec<RayMap>, GeometryError> {
        self.views
            .iter()
            .map(|v| {
                let c2w = v.extrinsics.camera_to_world(Some(at))?;
                Ok(compute_ray_map(&v.camera, &c2w, anchor, grid_h, grid_w))
            })
            .collect()
    }
}
