//! Region sampling over the patch grid.
//!
//! Candidate windows are the disjoint `region_side`-strided tiles of the
//! grid that contain at least one retained patch, enumerated row-major.
//! Training draws uniformly (without replacement while distinct windows
//! last, with replacement otherwise); validation takes the row-major prefix,
//! honoring the "up to n" semantics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainerError;
use crate::preprocess::PatchGrid;
use crate::vit::Region;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Train,
    Validation,
}

/// Samples `n` regions from the grid. Train mode always returns exactly `n`
/// (duplicating windows when fewer exist); validation returns
/// `min(n, windows)` in row-major order.
pub fn sample_regions(
    grid: &PatchGrid,
    n: usize,
    region_side: u32,
    seed: u64,
    mode: SamplingMode,
) -> Result<Vec<Region>, TrainerError> {
    if grid.records.is_empty() {
        return Err(TrainerError::Contract(format!(
            "slide {:?} has an empty patch grid",
            grid.slide_id
        )));
    }
    if n == 0 || region_side == 0 {
        return Err(TrainerError::Config(
            "region count and side must be positive".into(),
        ));
    }

    // Row-major origins of tiles with at least one retained patch.
    let mut occupied = std::collections::BTreeSet::new();
    for r in &grid.records {
        let ox = (r.grid_x / region_side) * region_side;
        let oy = (r.grid_y / region_side) * region_side;
        occupied.insert((oy, ox));
    }
    let origins: Vec<(u32, u32)> = occupied.iter().map(|(oy, ox)| (*ox, *oy)).collect();

    let build = |&(ox, oy): &(u32, u32)| -> Result<Region, TrainerError> {
        let mut members = Vec::new();
        let mut rel_coords = Vec::new();
        for (idx, r) in grid.records.iter().enumerate() {
            if r.grid_x >= ox
                && r.grid_x < ox + region_side
                && r.grid_y >= oy
                && r.grid_y < oy + region_side
            {
                members.push(idx);
                rel_coords.push((r.grid_x - ox, r.grid_y - oy));
            }
        }
        Region::new(grid.slide_id.clone(), (ox, oy), members, rel_coords, region_side)
            .map_err(TrainerError::from)
    };

    match mode {
        SamplingMode::Validation => origins.iter().take(n).map(build).collect(),
        SamplingMode::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picks: Vec<usize> = if origins.len() >= n {
                // Partial Fisher-Yates for n distinct draws.
                let mut indices: Vec<usize> = (0..origins.len()).collect();
                for i in 0..n {
                    let j = rng.gen_range(i..indices.len());
                    indices.swap(i, j);
                }
                indices[..n].to_vec()
            } else {
                (0..n).map(|_| rng.gen_range(0..origins.len())).collect()
            };
            picks.iter().map(|&i| build(&origins[i])).collect()
        }
    }
}
