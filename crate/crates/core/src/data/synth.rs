//! Procedural city tiles: flat ground, box buildings, roads, vegetation
//! blobs, cars and bare-soil clutter, rendered to RGB with Lambertian
//! shading from the true normals plus cast shadows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SceneTile;
use crate::error::{invalid, Result};
use crate::raster::{LabelGrid, NormalOptions, RasterGrid};

pub const GROUND: u16 = 0;
pub const ROAD: u16 = 1;
pub const BUILDING: u16 = 2;
pub const TREE: u16 = 3;
pub const CAR: u16 = 4;
pub const CLUTTER: u16 = 5;

pub const CLASS_NAMES: [&str; 6] = ["ground", "road", "building", "tree", "car", "clutter"];

const BASE_COLORS: [[f32; 3]; 6] = [
    [0.42, 0.55, 0.30],
    [0.47, 0.47, 0.49],
    [0.70, 0.45, 0.38],
    [0.16, 0.36, 0.14],
    [0.80, 0.15, 0.15],
    [0.55, 0.44, 0.30],
];

const ROOF_TONES: [[f32; 3]; 4] = [
    [0.72, 0.40, 0.33],
    [0.62, 0.62, 0.64],
    [0.52, 0.38, 0.28],
    [0.80, 0.76, 0.70],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub gsd_m: f32,
    /// Structure counts per 100x100 pixels.
    pub buildings_per_10k_px: f32,
    pub roads_per_100_px: f32,
    pub trees_per_10k_px: f32,
    pub cars_per_10k_px: f32,
    pub clutter_per_10k_px: f32,
    pub building_height_m: (f32, f32),
    pub building_side_px: (usize, usize),
    pub tree_height_m: (f32, f32),
    pub tree_radius_px: (usize, usize),
    pub road_width_px: usize,
    pub pixel_noise_std: f32,
    pub sun_elevation_deg: f32,
    pub sun_azimuth_deg: f32,
    pub shadows: bool,
    pub normals: NormalOptions,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            gsd_m: 1.0,
            buildings_per_10k_px: 7.0,
            roads_per_100_px: 0.8,
            trees_per_10k_px: 6.0,
            cars_per_10k_px: 3.0,
            clutter_per_10k_px: 1.0,
            building_height_m: (3.0, 30.0),
            building_side_px: (8, 28),
            tree_height_m: (1.0, 8.0),
            tree_radius_px: (3, 7),
            road_width_px: 6,
            pixel_noise_std: 0.02,
            sun_elevation_deg: 50.0,
            sun_azimuth_deg: 135.0,
            shadows: true,
            normals: NormalOptions::default(),
        }
    }
}

impl SynthParams {
    /// A world without structures: flat ground only.
    pub fn empty() -> Self {
        Self {
            buildings_per_10k_px: 0.0,
            roads_per_100_px: 0.0,
            trees_per_10k_px: 0.0,
            cars_per_10k_px: 0.0,
            clutter_per_10k_px: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub seed: u64,
    pub buildings: usize,
    pub building_pixels: usize,
    pub building_fraction: f64,
    /// Set when the tile has no buildings.
    pub degenerate: bool,
}

fn count(density: f32, area: f32) -> usize {
    (density * area).round().max(0.0) as usize
}

/// Generates one tile of `size_px x size_px` pixels. Deterministic per seed.
pub fn synth_city(
    seed: u64,
    size_px: usize,
    num_classes: usize,
    params: &SynthParams,
) -> Result<(SceneTile, SynthMeta)> {
    if size_px < 4 {
        return Err(invalid("synthetic tiles need at least 4x4 pixels"));
    }
    if num_classes < 4 {
        return Err(invalid(format!(
            "synthetic city needs at least 4 classes (ground, road, building, tree), got {num_classes}"
        )));
    }
    let (lo, hi) = params.building_side_px;
    if lo == 0 || lo > hi || params.building_height_m.0 > params.building_height_m.1 {
        return Err(invalid("inverted synth parameter ranges"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size_px;
    let area = (n * n) as f32 / 10_000.0;
    let mut height = vec![0.0f32; n * n];
    let mut labels = vec![GROUND; n * n];
    let mut colors: Vec<[f32; 3]> = vec![BASE_COLORS[GROUND as usize]; n * n];

    // roads: full-length horizontal and vertical bands
    let roads = count(params.roads_per_100_px, n as f32 / 100.0);
    let rw = params.road_width_px.max(1).min(n);
    for i in 0..roads {
        let pos = rng.random_range(0..=n - rw);
        for a in 0..n {
            for b in pos..pos + rw {
                let idx = if i % 2 == 0 { b * n + a } else { a * n + b };
                labels[idx] = ROAD;
                colors[idx] = BASE_COLORS[ROAD as usize];
            }
        }
    }

    // clutter patches on ground
    if num_classes > CLUTTER as usize {
        for _ in 0..count(params.clutter_per_10k_px, area) {
            let (h, w) = (rng.random_range(4..=12).min(n), rng.random_range(4..=12).min(n));
            let (r0, c0) = (rng.random_range(0..=n - h), rng.random_range(0..=n - w));
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    if labels[r * n + c] == GROUND {
                        labels[r * n + c] = CLUTTER;
                        colors[r * n + c] = BASE_COLORS[CLUTTER as usize];
                    }
                }
            }
        }
    }

    // buildings: axis-aligned boxes that keep a 2 px margin from roads and each other
    let mut buildings = 0;
    let wanted = count(params.buildings_per_10k_px, area);
    let hi_side = hi.min(n);
    let lo_side = lo.min(hi_side);
    for _ in 0..wanted * 20 {
        if buildings == wanted {
            break;
        }
        let h = rng.random_range(lo_side..=hi_side);
        let w = rng.random_range(lo_side..=hi_side);
        let (r0, c0) = (rng.random_range(0..=n - h), rng.random_range(0..=n - w));
        let free = (r0.saturating_sub(2)..(r0 + h + 2).min(n)).all(|r| {
            (c0.saturating_sub(2)..(c0 + w + 2).min(n))
                .all(|c| !matches!(labels[r * n + c], ROAD | BUILDING))
        });
        if !free {
            continue;
        }
        let bh = rng.random_range(params.building_height_m.0..=params.building_height_m.1);
        let tone = ROOF_TONES[rng.random_range(0..ROOF_TONES.len())];
        let jitter: f32 = rng.random_range(-0.05..0.05);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                height[r * n + c] = bh;
                labels[r * n + c] = BUILDING;
                colors[r * n + c] = tone.map(|v| (v + jitter).clamp(0.0, 1.0));
            }
        }
        buildings += 1;
    }

    // vegetation: dome-shaped blobs with noisy heights on free ground
    let noise_m = Normal::new(0.0f32, 0.4).expect("valid std");
    for _ in 0..count(params.trees_per_10k_px, area) {
        let rad = rng.random_range(params.tree_radius_px.0..=params.tree_radius_px.1.max(params.tree_radius_px.0)) as f32;
        let top = rng.random_range(params.tree_height_m.0..=params.tree_height_m.1);
        let (cr, cc) = (rng.random_range(0..n) as f32, rng.random_range(0..n) as f32);
        let r_lo = (cr - rad).floor().max(0.0) as usize;
        let r_hi = ((cr + rad).ceil() as usize).min(n - 1);
        let c_lo = (cc - rad).floor().max(0.0) as usize;
        let c_hi = ((cc + rad).ceil() as usize).min(n - 1);
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                let d = ((r as f32 - cr).powi(2) + (c as f32 - cc).powi(2)).sqrt() / rad;
                let idx = r * n + c;
                if d > 1.0 || !matches!(labels[idx], GROUND | CLUTTER | TREE) {
                    continue;
                }
                let h = (top * (1.0 - d * d).sqrt() + noise_m.sample(&mut rng))
                    .clamp(params.tree_height_m.0, params.tree_height_m.1);
                if labels[idx] != TREE || h > height[idx] {
                    height[idx] = h;
                }
                labels[idx] = TREE;
                colors[idx] = BASE_COLORS[TREE as usize];
            }
        }
    }

    // cars: small 1.5 m boxes on roads
    if num_classes > CAR as usize {
        for _ in 0..count(params.cars_per_10k_px, area) {
            let (h, w) = if rng.random_bool(0.5) { (2, 4) } else { (4, 2) };
            let (h, w) = (h.min(n), w.min(n));
            let (r0, c0) = (rng.random_range(0..=n - h), rng.random_range(0..=n - w));
            let on_road = (r0..r0 + h).all(|r| (c0..c0 + w).all(|c| labels[r * n + c] == ROAD));
            if !on_road {
                continue;
            }
            let paint = [rng.random_range(0.1..0.95), rng.random_range(0.1..0.95), rng.random_range(0.1..0.95)];
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    height[r * n + c] = 1.5;
                    labels[r * n + c] = CAR;
                    colors[r * n + c] = paint;
                }
            }
        }
    }

    let height_grid = RasterGrid::new(n, n, 1, params.gsd_m, height)?;
    let labels_grid = LabelGrid::new(n, n, num_classes, labels)?;
    let normals = crate::raster::surface_normals(&height_grid, params.normals)?;
    let decoded = normals.decoded_all();

    let elev = params.sun_elevation_deg.to_radians();
    let azim = params.sun_azimuth_deg.to_radians();
    let light = [azim.sin() * elev.cos(), -azim.cos() * elev.cos(), elev.sin()];
    let flat_shade = 0.35 + 0.65 * light[2];
    let shadow = if params.shadows {
        cast_shadows(&height_grid, [-azim.cos(), azim.sin()], elev)
    } else {
        vec![false; n * n]
    };
    let pixel_noise = Normal::new(0.0f32, params.pixel_noise_std.max(0.0)).expect("valid std");
    let mut rgb = Vec::with_capacity(n * n * 3);
    for i in 0..n * n {
        let nd = decoded[i];
        let lambert = (nd[0] * light[0] + nd[1] * light[1] + nd[2] * light[2]).max(0.0);
        let mut shade = (0.35 + 0.65 * lambert) / flat_shade;
        if shadow[i] {
            shade *= 0.45;
        }
        for k in 0..3 {
            let v = colors[i][k] * shade + pixel_noise.sample(&mut rng);
            rgb.push(v.clamp(0.0, 1.0));
        }
    }
    let rgb_grid = RasterGrid::new(n, n, 3, params.gsd_m, rgb)?;

    let building_pixels = labels_grid.labels().iter().filter(|&&l| l == BUILDING).count();
    let meta = SynthMeta {
        seed,
        buildings,
        building_pixels,
        building_fraction: building_pixels as f64 / (n * n) as f64,
        degenerate: buildings == 0,
    };
    let tile = SceneTile {
        tile_id: format!("synth-{seed}"),
        rgb: rgb_grid,
        height_gt: height_grid,
        labels_gt: labels_grid,
        normals_gt: normals,
    };
    Ok((tile, meta))
}

/// Marks pixels occluded from the sun. `toward_sun` is the in-image
/// (row, col) direction pointing at the sun.
fn cast_shadows(height: &RasterGrid, toward_sun: [f32; 2], elevation: f32) -> Vec<bool> {
    let (h, w) = (height.height(), height.width());
    let data = height.data();
    let max_h = data.iter().copied().fold(0.0f32, f32::max);
    let rise_per_px = elevation.tan() * height.gsd_m();
    let max_steps = if rise_per_px > 0.0 {
        (max_h / rise_per_px).ceil() as usize + 1
    } else {
        0
    };
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let base = data[r * w + c];
            for t in 1..=max_steps {
                let rr = (r as f32 + toward_sun[0] * t as f32).round();
                let cc = (c as f32 + toward_sun[1] * t as f32).round();
                if rr < 0.0 || cc < 0.0 || rr >= h as f32 || cc >= w as f32 {
                    break;
                }
                if data[rr as usize * w + cc as usize] > base + t as f32 * rise_per_px {
                    out[r * w + c] = true;
                    break;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_world_is_flat_ground() {
        let (t, meta) = synth_city(1, 32, 6, &SynthParams::empty()).unwrap();
        assert!(meta.degenerate);
        assert!(t.height_gt.data().iter().all(|&v| v == 0.0));
        assert!(t.labels_gt.labels().iter().all(|&l| l == GROUND));
        for p in t.normals_gt.grid.data().chunks(3) {
            assert_eq!(p, &[1.0, 1.0, 1.5]);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let p = SynthParams::default();
        let (a, ma) = synth_city(11, 96, 6, &p).unwrap();
        let (b, mb) = synth_city(11, 96, 6, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let (c, _) = synth_city(12, 96, 6, &p).unwrap();
        assert_ne!(a.height_gt, c.height_gt);
    }

    #[test]
    fn tile_invariants_hold() {
        let p = SynthParams::default();
        let (t, _) = synth_city(5, 128, 6, &p).unwrap();
        assert!(t.rgb.same_footprint(&t.height_gt));
        assert_eq!(t.normal_consistency_error(p.normals).unwrap(), 0.0);
        let lo = p.building_height_m.0;
        for (h, l) in t.height_gt.data().iter().zip(t.labels_gt.labels()) {
            match *l {
                BUILDING => assert!(*h >= lo && *h <= p.building_height_m.1),
                GROUND | ROAD | CLUTTER => assert_eq!(*h, 0.0),
                TREE => assert!(*h >= 1.0 && *h <= 8.0),
                _ => {}
            }
        }
        assert!(t.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn building_fraction_anchor_seed_7() {
        let (_, meta) = synth_city(7, 256, 6, &SynthParams::default()).unwrap();
        // regression anchor recorded from the first run of the generator
        assert_eq!(meta.building_pixels, 13594);
        assert_eq!(meta.buildings, 46);
        assert!(
            (0.1..=0.5).contains(&meta.building_fraction),
            "building fraction {}",
            meta.building_fraction
        );
    }

    #[test]
    fn too_few_classes_rejected() {
        assert!(synth_city(1, 32, 3, &SynthParams::default()).is_err());
    }

    #[test]
    fn shadows_fall_away_from_sun() {
        let mut h = vec![0.0f32; 21 * 21];
        h[10 * 21 + 10] = 10.0;
        let g = RasterGrid::new(21, 21, 1, 1.0, h).unwrap();
        // sun toward -col: shadow extends toward +col
        let s = cast_shadows(&g, [0.0, -1.0], 45f32.to_radians());
        assert!(s[10 * 21 + 11]);
        assert!(!s[10 * 21 + 9]);
    }
}
