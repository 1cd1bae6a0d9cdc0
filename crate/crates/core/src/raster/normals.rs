use serde::{Deserialize, Serialize};

use super::RasterGrid;
use crate::error::Result;

/// Direction of the Sobel derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SobelAxis {
    /// Derivative along columns, kernel `[[-1,0,1],[-2,0,2],[-1,0,1]]`.
    Horizontal,
    /// Derivative along rows, the transposed kernel.
    Vertical,
}

impl SobelAxis {
    pub fn from_index(axis: usize) -> Option<Self> {
        match axis {
            0 => Some(SobelAxis::Horizontal),
            1 => Some(SobelAxis::Vertical),
            _ => None,
        }
    }
}

const SOBEL_X: [[f32; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// 3x3 Sobel response with replicate padding at the border.
pub fn sobel(height: &RasterGrid, axis: SobelAxis) -> Result<RasterGrid> {
    height.require_single_channel("sobel")?;
    let (h, w) = (height.height(), height.width());
    let data = height.data();
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0f32;
            for dr in 0..3 {
                for dc in 0..3 {
                    let k = match axis {
                        SobelAxis::Horizontal => SOBEL_X[dr][dc],
                        SobelAxis::Vertical => SOBEL_X[dc][dr],
                    };
                    if k == 0.0 {
                        continue;
                    }
                    let rr = (r + dr).saturating_sub(1).min(h - 1);
                    let cc = (c + dc).saturating_sub(1).min(w - 1);
                    acc += k * data[rr * w + cc];
                }
            }
            out[r * w + c] = acc;
        }
    }
    RasterGrid::new(h, w, 1, height.gsd_m(), out)
}

/// Affine storage encoding for unit normals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalEncoding {
    /// `n / 2 + 1`, components in `[0.5, 1.5]`.
    #[default]
    PaperLiteral,
    /// `(n + 1) / 2`, components in `[0, 1]`.
    UnitInterval,
}

impl NormalEncoding {
    #[inline]
    pub fn encode(self, n: [f32; 3]) -> [f32; 3] {
        match self {
            NormalEncoding::PaperLiteral => n.map(|v| v / 2.0 + 1.0),
            NormalEncoding::UnitInterval => n.map(|v| (v + 1.0) / 2.0),
        }
    }

    /// Inverts the affine map and renormalizes to unit length.
    #[inline]
    pub fn decode(self, e: [f32; 3]) -> [f32; 3] {
        let raw = match self {
            NormalEncoding::PaperLiteral => e.map(|v| (v - 1.0) * 2.0),
            NormalEncoding::UnitInterval => e.map(|v| v * 2.0 - 1.0),
        };
        let len = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]).sqrt();
        if len > 0.0 {
            raw.map(|v| v / len)
        } else {
            [0.0, 0.0, 1.0]
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            NormalEncoding::PaperLiteral => "paper_literal",
            NormalEncoding::UnitInterval => "unit_interval",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalOptions {
    pub encoding: NormalEncoding,
    /// Divide the Sobel responses by `8 * gsd` to get metric slopes.
    #[serde(default)]
    pub metric_gradient: bool,
}

/// A 3-channel encoded normal grid together with the encoding that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub grid: RasterGrid,
    pub encoding: NormalEncoding,
}

impl NormalMap {
    pub fn decoded(&self, row: usize, col: usize) -> [f32; 3] {
        let p = self.grid.pixel(row, col);
        self.encoding.decode([p[0], p[1], p[2]])
    }

    /// All decoded unit normals in row-major order.
    pub fn decoded_all(&self) -> Vec<[f32; 3]> {
        self.grid
            .data()
            .chunks_exact(3)
            .map(|p| self.encoding.decode([p[0], p[1], p[2]]))
            .collect()
    }
}

/// Per-pixel normals of a height grid: `N = (-zx, -zy, 1)`, normalized, then encoded.
pub fn surface_normals(height: &RasterGrid, opts: NormalOptions) -> Result<NormalMap> {
    let zx = sobel(height, SobelAxis::Horizontal)?;
    let zy = sobel(height, SobelAxis::Vertical)?;
    let scale = if opts.metric_gradient {
        1.0 / (8.0 * height.gsd_m())
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(height.height() * height.width() * 3);
    for (&gx, &gy) in zx.data().iter().zip(zy.data()) {
        let n = [-gx * scale, -gy * scale, 1.0];
        let len = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
        out.extend_from_slice(&opts.encoding.encode(n.map(|v| v / len)));
    }
    Ok(NormalMap {
        grid: RasterGrid::new(height.height(), height.width(), 3, height.gsd_m(), out)?,
        encoding: opts.encoding,
    })
}
