//! Point clouds and meshes from height maps, PLY export, and a simulated
//! single-pass flight fused back into one height map.

mod flight;
mod ply;

pub use flight::{fuse_flight, simulate_flight, FlightFrame, FlightPlan, FusedFlight, Pose};
pub use ply::{
    decode_ply, encode_cloud_ply, encode_mesh_ply, read_ply, write_cloud_ply, write_mesh_ply,
    PlyData,
};

use crate::error::{invalid, shape, Result};
use crate::raster::{surface_normals, LabelGrid, NormalMap, NormalOptions, RasterGrid};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    /// `(x, y, z)` in meters: `x = col * gsd`, `y = row * gsd`, `z = height`.
    pub points: Vec<[f32; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub labels: Option<Vec<u16>>,
    pub normals: Option<Vec<[f32; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        let lens = [
            self.colors.as_ref().map(Vec::len),
            self.labels.as_ref().map(Vec::len),
            self.normals.as_ref().map(Vec::len),
        ];
        if lens.iter().flatten().any(|&l| l != n) {
            return Err(shape(format!("point cloud attribute lengths {lens:?} differ from {n} points")));
        }
        if let Some(normals) = &self.normals {
            for v in normals {
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if (len - 1.0).abs() > 1e-4 {
                    return Err(invalid(format!("normal {v:?} is not unit length")));
                }
            }
        }
        Ok(())
    }

    /// Replaces colors with the palette entry of each point's label.
    pub fn colorize_by_label(&mut self, palette: &[[u8; 3]]) -> Result<()> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| invalid("point cloud has no labels to colorize"))?;
        let colors = labels
            .iter()
            .map(|&l| {
                palette
                    .get(l as usize)
                    .copied()
                    .ok_or_else(|| invalid(format!("label {l} has no palette entry")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.colors = Some(colors);
        Ok(())
    }
}

/// Optional per-pixel attributes, all aligned with the height grid.
#[derive(Debug, Clone, Copy, Default)]
pub struct CloudAttributes<'a> {
    /// RGB in `[0, 1]`, quantized to 8 bits.
    pub rgb: Option<&'a RasterGrid>,
    pub labels: Option<&'a LabelGrid>,
    pub normals: Option<&'a NormalMap>,
    /// Pixels to keep; `None` keeps all.
    pub valid: Option<&'a [bool]>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One point per (valid) pixel, row-major.
pub fn heightmap_to_pointcloud(height: &RasterGrid, attrs: &CloudAttributes<'_>) -> Result<PointCloud> {
    height.require_single_channel("point cloud height")?;
    let (h, w, gsd) = (height.height(), height.width(), height.gsd_m());
    if let Some(rgb) = attrs.rgb {
        if (rgb.height(), rgb.width(), rgb.channels()) != (h, w, 3) {
            return Err(shape(format!("rgb {:?} not aligned with height {h}x{w}", rgb.shape())));
        }
    }
    if let Some(l) = attrs.labels {
        if (l.height(), l.width()) != (h, w) {
            return Err(shape("labels not aligned with height"));
        }
    }
    if let Some(n) = attrs.normals {
        if (n.grid.height(), n.grid.width(), n.grid.channels()) != (h, w, 3) {
            return Err(shape("normals not aligned with height"));
        }
    }
    if let Some(v) = attrs.valid {
        if v.len() != h * w {
            return Err(shape("validity mask not aligned with height"));
        }
    }

    let mut cloud = PointCloud {
        colors: attrs.rgb.map(|_| Vec::new()),
        labels: attrs.labels.map(|_| Vec::new()),
        normals: attrs.normals.map(|_| Vec::new()),
        ..PointCloud::default()
    };
    for r in 0..h {
        for c in 0..w {
            if attrs.valid.is_some_and(|v| !v[r * w + c]) {
                continue;
            }
            cloud.points.push([c as f32 * gsd, r as f32 * gsd, height.get(r, c, 0)]);
            if let (Some(dst), Some(rgb)) = (cloud.colors.as_mut(), attrs.rgb) {
                let p = rgb.pixel(r, c);
                dst.push([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]);
            }
            if let (Some(dst), Some(l)) = (cloud.labels.as_mut(), attrs.labels) {
                dst.push(l.get(r, c));
            }
            if let (Some(dst), Some(n)) = (cloud.normals.as_mut(), attrs.normals) {
                dst.push(n.decoded(r, c));
            }
        }
    }
    Ok(cloud)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridMesh {
    pub vertices: Vec<[f32; 3]>,
    /// Counter-clockwise seen from above (+z).
    pub faces: Vec<[u32; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub normals: Option<Vec<[f32; 3]>>,
}

impl GridMesh {
    pub fn face_normal(&self, f: usize) -> [f32; 3] {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i as usize]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        n.map(|x| x / len)
    }

    /// Vertices as a point cloud carrying the mesh's per-vertex attributes.
    pub fn vertex_cloud(&self) -> PointCloud {
        PointCloud {
            points: self.vertices.clone(),
            colors: self.colors.clone(),
            labels: None,
            normals: self.normals.clone(),
        }
    }
}

/// Regular heightfield triangulation, two triangles per pixel quad. Vertex
/// normals come from the Sobel surface normals of the height grid.
pub fn grid_mesh(height: &RasterGrid, rgb: Option<&RasterGrid>, normals: NormalOptions) -> Result<GridMesh> {
    height.require_single_channel("mesh height")?;
    let (h, w) = (height.height(), height.width());
    if h < 2 || w < 2 {
        return Err(invalid(format!("mesh needs at least a 2x2 grid, got {h}x{w}")));
    }
    let nmap = surface_normals(height, normals)?;
    let cloud = heightmap_to_pointcloud(
        height,
        &CloudAttributes {
            rgb,
            normals: Some(&nmap),
            ..CloudAttributes::default()
        },
    )?;
    let mut faces = Vec::with_capacity(2 * (h - 1) * (w - 1));
    let idx = |r: usize, c: usize| (r * w + c) as u32;
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            faces.push([idx(r, c), idx(r, c + 1), idx(r + 1, c)]);
            faces.push([idx(r, c + 1), idx(r + 1, c + 1), idx(r + 1, c)]);
        }
    }
    Ok(GridMesh {
        vertices: cloud.points,
        faces,
        colors: cloud.colors,
        normals: cloud.normals,
    })
}
