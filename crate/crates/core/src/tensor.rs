//! Hash-indexed sparse voxel tensors with dyadic up/down sampling and
//! child-group partitioning for multi-stage processing.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Integer voxel coordinate at some scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord3 {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Coord3 {
    pub fn new(x: i32, y: i32, z: i32) -> Self {
        Coord3 { x, y, z }
    }

    /// Parent coordinate one scale down (component-wise floor division by 2).
    pub fn parent(self) -> Coord3 {
        Coord3::new(self.x >> 1, self.y >> 1, self.z >> 1)
    }

    /// Child coordinate `2c + o` for an offset in {0,1}^3.
    pub fn child(self, offset: ChildOffset) -> Coord3 {
        Coord3::new(
            2 * self.x + offset.0[0] as i32,
            2 * self.y + offset.0[1] as i32,
            2 * self.z + offset.0[2] as i32,
        )
    }

    pub fn offset_by(self, d: [i32; 3]) -> Coord3 {
        Coord3::new(self.x + d[0], self.y + d[1], self.z + d[2])
    }

    /// Morton code with interleaved bits, z least significant.
    ///
    /// Supports components up to 21 bits, well past the N = 18 precision cap.
    pub fn morton(self) -> u64 {
        spread(self.x as u32) << 2 | spread(self.y as u32) << 1 | spread(self.z as u32)
    }
}

fn spread(w: u32) -> u64 {
    let mut w = w as u64 & 0x1f_ffff;
    w = (w | w << 32) & 0x001f_0000_0000_ffff;
    w = (w | w << 16) & 0x001f_0000_ff00_00ff;
    w = (w | w << 8) & 0x100f_00f0_0f00_f00f;
    w = (w | w << 4) & 0x10c3_0c30_c30c_30c3;
    w = (w | w << 2) & 0x1249_2492_4924_9249;
    w
}

/// One of the 8 child positions of a parent voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChildOffset(pub [u8; 3]);

impl ChildOffset {
    /// All 8 offsets in Morton order (z least significant).
    pub fn all() -> [ChildOffset; 8] {
        let mut out = [ChildOffset([0, 0, 0]); 8];
        for (r, slot) in out.iter_mut().enumerate() {
            *slot = ChildOffset([(r >> 2) as u8 & 1, (r >> 1) as u8 & 1, r as u8 & 1]);
        }
        out
    }

    /// Morton rank in 0..8 (x most significant bit, z least).
    pub fn morton_rank(self) -> usize {
        ((self.0[0] as usize) << 2) | ((self.0[1] as usize) << 1) | self.0[2] as usize
    }

    pub fn hamming_weight(self) -> usize {
        (self.0[0] + self.0[1] + self.0[2]) as usize
    }
}

/// Offset of a child coordinate inside its parent's 2x2x2 box.
pub fn child_offset(child: Coord3) -> ChildOffset {
    ChildOffset([
        (child.x & 1) as u8,
        (child.y & 1) as u8,
        (child.z & 1) as u8,
    ])
}

/// Occupancy interpretation of the coordinate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccupancyRole {
    /// Positively occupied voxels (known occupancy).
    Pov,
    /// Most-probable POVs: children of upscaled POVs whose occupancy is
    /// not yet decided.
    MpPov,
}

/// Sparse voxel tensor: unique Morton-ordered coordinates plus a fixed-width
/// feature vector per coordinate. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SparseTensor {
    scale: u32,
    coords: Vec<Coord3>,
    features: Vec<f64>,
    width: usize,
    role: OccupancyRole,
    index: HashMap<Coord3, usize>,
}

impl SparseTensor {
    /// Builds a tensor from raw coordinates and aligned features.
    /// Coordinates are sorted into Morton order; features follow their
    /// coordinate. Duplicate coordinates are an error.
    pub fn new(
        scale: u32,
        coords: Vec<Coord3>,
        features: Vec<f64>,
        width: usize,
        role: OccupancyRole,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::Tensor("feature width must be >= 1".into()));
        }
        if features.len() != coords.len() * width {
            return Err(Error::Tensor(format!(
                "feature length {} does not match {} coords x width {}",
                features.len(),
                coords.len(),
                width
            )));
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| coords[i].morton());
        let mut sorted_coords = Vec::with_capacity(coords.len());
        let mut sorted_features = Vec::with_capacity(features.len());
        for &i in &order {
            sorted_coords.push(coords[i]);
            sorted_features.extend_from_slice(&features[i * width..(i + 1) * width]);
        }
        let mut index = HashMap::with_capacity(sorted_coords.len());
        for (row, &c) in sorted_coords.iter().enumerate() {
            if index.insert(c, row).is_some() {
                return Err(Error::Tensor(format!("duplicate coordinate {:?}", c)));
            }
        }
        Ok(SparseTensor {
            scale,
            coords: sorted_coords,
            features: sorted_features,
            width,
            role,
            index,
        })
    }

    /// Geometry-only tensor with the constant scalar 1 as feature.
    pub fn from_coords(scale: u32, coords: Vec<Coord3>, role: OccupancyRole) -> Result<Self> {
        let features = vec![1.0; coords.len()];
        SparseTensor::new(scale, coords, features, 1, role)
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn role(&self) -> OccupancyRole {
        self.role
    }

    /// Coordinates in canonical (Morton) order.
    pub fn coords(&self) -> &[Coord3] {
        &self.coords
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, row: usize) -> &[f64] {
        &self.features[row * self.width..(row + 1) * self.width]
    }

    pub fn contains(&self, c: Coord3) -> bool {
        self.index.contains_key(&c)
    }

    pub fn row_of(&self, c: Coord3) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Dyadic geometry downscale: unique parents, constant-1 features.
    pub fn voxel_downscale_geom(&self) -> Result<SparseTensor> {
        if self.scale == 0 {
            return Err(Error::Tensor("cannot downscale root".into()));
        }
        let mut parents: Vec<Coord3> = self.coords.iter().map(|c| c.parent()).collect();
        parents.sort_by_key(|c| c.morton());
        parents.dedup();
        SparseTensor::from_coords(self.scale - 1, parents, OccupancyRole::Pov)
    }

    /// Dyadic geometry upscale: all 8 children of every coordinate, marked
    /// MP-POV with constant-1 features.
    pub fn voxel_upscale_geom(&self) -> SparseTensor {
        let mut children = Vec::with_capacity(self.coords.len() * 8);
        for &c in &self.coords {
            for o in ChildOffset::all() {
                children.push(c.child(o));
            }
        }
        SparseTensor::from_coords(self.scale + 1, children, OccupancyRole::MpPov)
            .expect("children of unique parents are unique")
    }

    /// Keeps exactly `keep`, carrying each coordinate's features over.
    pub fn prune(&self, keep: &[Coord3]) -> Result<SparseTensor> {
        let mut coords = Vec::with_capacity(keep.len());
        let mut features = Vec::with_capacity(keep.len() * self.width);
        for &c in keep {
            let row = self
                .row_of(c)
                .ok_or_else(|| Error::Tensor(format!("prune: coordinate {:?} not in tensor", c)))?;
            coords.push(c);
            features.extend_from_slice(self.feature(row));
        }
        SparseTensor::new(self.scale, coords, features, self.width, self.role)
    }

    /// Same coordinates, new feature matrix.
    pub fn with_features(&self, features: Vec<f64>, width: usize) -> Result<SparseTensor> {
        SparseTensor::new(self.scale, self.coords.clone(), features, width, self.role)
    }
}

/// Grouping variant of Fig-5-style multi-stage arrangements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupingVariant {
    OneStage,
    ThreeStage,
    EightStage,
}

/// Maps the 8 child offsets onto ordered processing stages.
#[derive(Debug, Clone)]
pub struct GroupingArrangement {
    variant: GroupingVariant,
    stages: Vec<Vec<ChildOffset>>,
}

impl GroupingArrangement {
    pub fn new(variant: GroupingVariant) -> Self {
        let stages = match variant {
            GroupingVariant::OneStage => vec![ChildOffset::all().to_vec()],
            GroupingVariant::ThreeStage => {
                // Stages stratified by Hamming weight: {0}, {1}, {2,3}.
                let mut stages = vec![Vec::new(), Vec::new(), Vec::new()];
                for o in ChildOffset::all() {
                    let s = match o.hamming_weight() {
                        0 => 0,
                        1 => 1,
                        _ => 2,
                    };
                    stages[s].push(o);
                }
                stages
            }
            GroupingVariant::EightStage => {
                ChildOffset::all().iter().map(|&o| vec![o]).collect()
            }
        };
        GroupingArrangement { variant, stages }
    }

    pub fn variant(&self) -> GroupingVariant {
        self.variant
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Offsets of stage `stage_id` (0-based), in Morton order.
    pub fn stage_offsets(&self, stage_id: usize) -> &[ChildOffset] {
        &self.stages[stage_id]
    }

    /// (group_id, stage_id), both 1-based as in the grouping figure.
    pub fn group_of(&self, offset: ChildOffset) -> (usize, usize) {
        match self.variant {
            GroupingVariant::OneStage => (1 + offset.morton_rank(), 1),
            GroupingVariant::EightStage => {
                let g = 1 + offset.morton_rank();
                (g, g)
            }
            GroupingVariant::ThreeStage => {
                let stage = match offset.hamming_weight() {
                    0 => 1,
                    1 => 2,
                    _ => 3,
                };
                (1 + offset.morton_rank(), stage)
            }
        }
    }
}
