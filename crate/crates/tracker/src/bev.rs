//! Point-cloud cropping, voxel statistics, the dense BEV encoder, and the
//! footprint occupancy mask.

use crate::config::RegionConfig;
use crate::geometry::{world_to_track_point, OrientedBox3D};
use crate::params::{Init, ParamSpec, Params};
use mtm_tensor::{Tape, Tensor, Var};

/// Per-voxel statistics: occupancy, clipped count, mean offset (x, y, z).
pub const VOXEL_STATS: usize = 5;
/// Point-count feature ceiling, bounding feature magnitude on dense scans.
pub const COUNT_CLIP: f32 = 32.0;

/// Converts sensor records to bare xyz points, dropping intensity.
pub fn points_from_kitti(records: &[[f32; 4]]) -> Vec<[f64; 3]> {
    records.iter().map(|r| [r[0] as f64, r[1] as f64, r[2] as f64]).collect()
}

/// Expresses `points` in the frame of `reference` and keeps those inside
/// the region ranges (half-open upper bounds so every survivor voxelizes).
pub fn crop_region(points: &[[f64; 3]], reference: &OrientedBox3D, region: &RegionConfig) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|&p| world_to_track_point(p, reference))
        .filter(|p| {
            p[0] >= region.x_min
                && p[0] < region.x_max
                && p[1] >= region.y_min
                && p[1] < region.y_max
                && p[2] >= region.z_min
                && p[2] < region.z_max
        })
        .collect()
}

/// Channel count of the voxel grid after flattening z and stats.
pub fn voxel_channels(region: &RegionConfig) -> usize {
    let (_, _, z) = region.grid_extents().expect("validated region");
    z * VOXEL_STATS
}

/// Builds the H×L×(Z·S) statistics grid. Points are bucketed per voxel and
/// sorted before accumulation so the result is bit-identical under any
/// input permutation; offsets are measured from the voxel center and
/// normalized by voxel size into [−0.5, 0.5].
pub fn voxelize(points_track: &[[f64; 3]], region: &RegionConfig) -> Tensor {
    let (h, l, z) = region.grid_extents().expect("validated region");
    let mut buckets: Vec<Vec<[f64; 3]>> = vec![Vec::new(); h * l * z];
    for &p in points_track {
        let i = ((p[0] - region.x_min) / region.voxel_x).floor() as isize;
        let j = ((p[1] - region.y_min) / region.voxel_y).floor() as isize;
        let k = ((p[2] - region.z_min) / region.voxel_z).floor() as isize;
        if i < 0 || j < 0 || k < 0 || i >= h as isize || j >= l as isize || k >= z as isize {
            continue;
        }
        buckets[(i as usize * l + j as usize) * z + k as usize].push(p);
    }

    let mut grid = Tensor::zeros(&[h, l, z * VOXEL_STATS]);
    let data = grid.data_mut();
    for i in 0..h {
        for j in 0..l {
            for k in 0..z {
                let bucket = &mut buckets[(i * l + j) * z + k];
                if bucket.is_empty() {
                    continue;
                }
                bucket.sort_by(|a, b| {
                    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
                });
                let mut mean = [0.0f64; 3];
                for p in bucket.iter() {
                    for (m, v) in mean.iter_mut().zip(p) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= bucket.len() as f64;
                }
                let center = [
                    region.x_min + (i as f64 + 0.5) * region.voxel_x,
                    region.y_min + (j as f64 + 0.5) * region.voxel_y,
                    region.z_min + (k as f64 + 0.5) * region.voxel_z,
                ];
                let base = (i * l + j) * z * VOXEL_STATS + k * VOXEL_STATS;
                data[base] = 1.0;
                data[base + 1] = (bucket.len() as f32).min(COUNT_CLIP);
                data[base + 2] = ((mean[0] - center[0]) / region.voxel_x) as f32;
                data[base + 3] = ((mean[1] - center[1]) / region.voxel_y) as f32;
                data[base + 4] = ((mean[2] - center[2]) / region.voxel_z) as f32;
            }
        }
    }
    grid
}

pub fn param_specs(region: &RegionConfig, channels: usize) -> Vec<ParamSpec> {
    let c_in = voxel_channels(region);
    vec![
        ParamSpec::new("bev.conv1.weight", &[3, 3, c_in, channels], Init::HeUniform),
        ParamSpec::new("bev.conv1.bias", &[channels], Init::Zeros),
        ParamSpec::new("bev.conv2.weight", &[3, 3, channels, channels], Init::HeUniform),
        ParamSpec::new("bev.conv2.bias", &[channels], Init::Zeros),
    ]
}

/// Two conv+ReLU blocks over the flattened voxel grid; the first applies
/// the configured BEV stride. Template and search branches must call this
/// with the same `Params` (the backbone is weight-shared).
pub fn encode_bev(
    tape: &mut Tape,
    voxels: Var,
    params: &Params,
    region: &RegionConfig,
) -> anyhow::Result<Var> {
    let w1 = params.var("bev.conv1.weight")?;
    let b1 = params.var("bev.conv1.bias")?;
    let w2 = params.var("bev.conv2.weight")?;
    let b2 = params.var("bev.conv2.bias")?;
    let y = tape.conv2d(voxels, w1, Some(b1), region.bev_stride, 1)?;
    let y = tape.relu(y)?;
    let y = tape.conv2d(y, w2, Some(b2), 1, 1)?;
    Ok(tape.relu(y)?)
}

/// Occupancy of the box footprint on the BEV grid: a cell is set iff its
/// center lies inside the yaw-rotated footprint (boundary inclusive).
pub fn footprint_mask(boxed: &OrientedBox3D, region: &RegionConfig) -> Tensor {
    let (h, l) = region.bev_extents().expect("validated region");
    let (cx, cy) = (region.cell_size_x(), region.cell_size_y());
    let (cos, sin) = (boxed.yaw.cos(), boxed.yaw.sin());
    Tensor::from_fn(&[h, l, 1], |idx| {
        let (i, j) = (idx / l, idx % l);
        let px = region.x_min + (i as f64 + 0.5) * cx - boxed.center[0];
        let py = region.y_min + (j as f64 + 0.5) * cy - boxed.center[1];
        let lx = cos * px + sin * py;
        let ly = -sin * px + cos * py;
        let inside =
            lx.abs() <= boxed.size[0] / 2.0 + 1e-12 && ly.abs() <= boxed.size[1] / 2.0 + 1e-12;
        if inside {
            1.0
        } else {
            0.0
        }
    })
}
