use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::changes::Geometry;
use crate::error::{Error, Result};

/// Land-cover vocabulary of a tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Cover {
    Other = 0,
    Building = 1,
    Road = 2,
    Water = 3,
}

impl Cover {
    pub const ALL: [Cover; 4] = [Cover::Other, Cover::Building, Cover::Road, Cover::Water];
    pub const OBJECTS: [Cover; 3] = [Cover::Building, Cover::Road, Cover::Water];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }
}

/// Row-major raster of small integer codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<u8>,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, cells: vec![0; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.cells[row * self.width + col] = v;
    }

    pub fn count(&self, v: u8) -> usize {
        self.cells.iter().filter(|&&c| c == v).count()
    }
}

/// Land cover of one epoch; every cell is a [`Cover`] code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LandCoverMap(pub Grid);

impl LandCoverMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self(Grid::new(height, width))
    }

    pub fn cover(&self, row: usize, col: usize) -> Cover {
        Cover::from_u8(self.0.get(row, col)).expect("land cover codes are validated on construction")
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn paint(&mut self, cells: &[(usize, usize)], cover: Cover) {
        for &(r, c) in cells {
            self.0.set(r, c, cover as u8);
        }
    }
}

/// Directional change raster: 0 background, 1..=3 added, 4..=6 disappeared.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeLabelMap(pub Grid);

impl ChangeLabelMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid::new(height, width))
    }

    pub fn from_cells(height: usize, width: usize, cells: Vec<u8>, num_classes: usize) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::Shape(format!("{} cells for a {height}x{width} label map", cells.len())));
        }
        if let Some(&bad) = cells.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::InvalidLabel { label: bad as usize, max: num_classes - 1 });
        }
        Ok(Self(Grid { height, width, cells }))
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn cells(&self) -> &[u8] {
        &self.0.cells
    }
}

/// One object painted into a generated base scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedObject {
    pub cover: Cover,
    pub geometry: Geometry,
}

/// Object-count and size ranges for base scenes at the 64-pixel reference
/// size; counts scale with tile area.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub roads: (usize, usize),
    pub buildings: (usize, usize),
    pub water_bodies: (usize, usize),
    pub road_width: (usize, usize),
    pub building_side: (usize, usize),
    pub water_radius: (usize, usize),
    /// Change events per tile.
    pub events: (usize, usize),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            roads: (1, 2),
            buildings: (3, 6),
            water_bodies: (1, 2),
            road_width: (4, 6),
            building_side: (6, 12),
            water_radius: (5, 8),
            events: (1, 4),
        }
    }
}

impl SceneConfig {
    /// A configuration that places nothing.
    pub fn empty() -> Self {
        Self { roads: (0, 0), buildings: (0, 0), water_bodies: (0, 0), events: (0, 0), ..Self::default() }
    }

    pub fn places_objects(&self) -> bool {
        self.roads.1 + self.buildings.1 + self.water_bodies.1 > 0
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("roads", self.roads),
            ("buildings", self.buildings),
            ("water_bodies", self.water_bodies),
            ("road_width", self.road_width),
            ("building_side", self.building_side),
            ("water_radius", self.water_radius),
            ("events", self.events),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        if self.road_width.0 == 0 || self.building_side.0 == 0 || self.water_radius.0 == 0 {
            return Err(Error::InvalidArgument("object sizes must be positive".into()));
        }
        Ok(())
    }
}

pub const MIN_TILE_SIZE: usize = 32;
const PLACEMENT_TRIES: usize = 200;

/// Generates a base land-cover map; see [`synth_scene`].
pub fn synth_landcover(seed: u64, size: usize, config: &SceneConfig) -> Result<LandCoverMap> {
    synth_scene(seed, size, config).map(|(m, _)| m)
}

/// Generates a base land-cover map and the list of objects painted into it.
///
/// Objects never touch each other (one-cell margin) except where roads cross,
/// so every placed building or water body can later be removed as a whole.
pub fn synth_scene(seed: u64, size: usize, config: &SceneConfig) -> Result<(LandCoverMap, Vec<PlacedObject>)> {
    config.validate()?;
    if size == 0 || (config.places_objects() && size < MIN_TILE_SIZE) {
        return Err(Error::InvalidArgument(format!("tile size {size} below minimum {MIN_TILE_SIZE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = LandCoverMap::empty(size, size);
    let mut objects = Vec::new();
    let area_scale = ((size * size) as f64 / (64.0 * 64.0)).max(1.0);
    let scaled = |rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)| -> usize {
        let n = rng.random_range(lo..=hi);
        ((n as f64) * area_scale).round() as usize
    };
    // Small tiles are guaranteed one instance of every object class.
    let guarantee = size >= 64;

    let n_roads = scaled(&mut rng, config.roads);
    for _ in 0..n_roads.max(usize::from(guarantee && config.roads.1 > 0)) {
        let width = rng.random_range(config.road_width.0..=config.road_width.1);
        let geometry = random_road(&mut rng, size, width);
        let cells = geometry.cells(size, size)?;
        map.paint(&cells, Cover::Road);
        objects.push(PlacedObject { cover: Cover::Road, geometry });
    }

    let n_water = scaled(&mut rng, config.water_bodies).max(usize::from(guarantee && config.water_bodies.1 > 0));
    place_many(&mut rng, &mut map, &mut objects, n_water, Cover::Water, |rng| {
        let r = rng.random_range(config.water_radius.0..=config.water_radius.1);
        random_disk(rng, size, r)
    });
    let n_build = scaled(&mut rng, config.buildings).max(usize::from(guarantee && config.buildings.1 > 0));
    place_many(&mut rng, &mut map, &mut objects, n_build, Cover::Building, |rng| {
        let h = rng.random_range(config.building_side.0..=config.building_side.1);
        let w = rng.random_range(config.building_side.0..=config.building_side.1);
        random_rect(rng, size, h, w)
    });
    Ok((map, objects))
}

fn place_many(
    rng: &mut ChaCha8Rng,
    map: &mut LandCoverMap,
    objects: &mut Vec<PlacedObject>,
    count: usize,
    cover: Cover,
    mut propose: impl FnMut(&mut ChaCha8Rng) -> Option<Geometry>,
) {
    let size = map.height();
    for _ in 0..count {
        for _ in 0..PLACEMENT_TRIES {
            let Some(geometry) = propose(rng) else { continue };
            let Ok(cells) = geometry.cells(size, size) else { continue };
            if region_is_clear(map, &cells, 1) {
                map.paint(&cells, cover);
                objects.push(PlacedObject { cover, geometry });
                break;
            }
        }
    }
}

/// True when every cell within `margin` (Chebyshev) of `cells` is class 0.
pub(crate) fn region_is_clear(map: &LandCoverMap, cells: &[(usize, usize)], margin: usize) -> bool {
    let (h, w) = (map.height(), map.width());
    cells.iter().all(|&(r, c)| {
        let (r0, r1) = (r.saturating_sub(margin), (r + margin).min(h - 1));
        let (c0, c1) = (c.saturating_sub(margin), (c + margin).min(w - 1));
        (r0..=r1).all(|rr| (c0..=c1).all(|cc| map.0.get(rr, cc) == 0))
    })
}

pub(crate) fn random_rect(rng: &mut ChaCha8Rng, size: usize, h: usize, w: usize) -> Option<Geometry> {
    if h + 2 > size || w + 2 > size {
        return None;
    }
    let row = rng.random_range(1..=size - h - 1);
    let col = rng.random_range(1..=size - w - 1);
    Some(Geometry::Rect { row, col, height: h, width: w })
}

pub(crate) fn random_disk(rng: &mut ChaCha8Rng, size: usize, radius: usize) -> Option<Geometry> {
    if 2 * radius + 3 > size {
        return None;
    }
    let row = rng.random_range(radius + 1..=size - radius - 2);
    let col = rng.random_range(radius + 1..=size - radius - 2);
    Some(Geometry::Disk { row, col, radius })
}

/// Straight or L-shaped road crossing the tile edge to edge.
fn random_road(rng: &mut ChaCha8Rng, size: usize, width: usize) -> Geometry {
    let lo = width;
    let hi = size - width - 1;
    let last = (size - 1) as isize;
    let points = match rng.random_range(0..3) {
        0 => {
            let r = rng.random_range(lo..=hi) as isize;
            vec![(r, 0), (r, last)]
        }
        1 => {
            let c = rng.random_range(lo..=hi) as isize;
            vec![(0, c), (last, c)]
        }
        _ => {
            let r = rng.random_range(lo..=hi) as isize;
            let c = rng.random_range(lo..=hi) as isize;
            let start_col = if rng.random_bool(0.5) { 0 } else { last };
            let end_row = if rng.random_bool(0.5) { 0 } else { last };
            vec![(r, start_col), (r, c), (end_row, c)]
        }
    };
    Geometry::Polyline { points, width }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = SceneConfig::default();
        let a = synth_landcover(7, 64, &cfg).unwrap();
        let b = synth_landcover(7, 64, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = SceneConfig::default();
        let a = synth_landcover(7, 64, &cfg).unwrap();
        let b = synth_landcover(8, 64, &cfg).unwrap();
        let diff = a.0.cells.iter().zip(&b.0.cells).filter(|(x, y)| x != y).count();
        assert!(diff >= 1);
    }

    #[test]
    fn empty_config_gives_blank_tile_even_when_small() {
        let m = synth_landcover(0, 16, &SceneConfig::empty()).unwrap();
        assert!(m.0.cells.iter().all(|&c| c == 0));
    }

    #[test]
    fn too_small_tile_is_rejected() {
        assert!(matches!(synth_landcover(0, 16, &SceneConfig::default()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn every_object_class_present_and_background_dominates() {
        for seed in 0..50 {
            let m = synth_landcover(seed, 64, &SceneConfig::default()).unwrap();
            for cover in Cover::OBJECTS {
                assert!(m.0.count(cover as u8) > 0, "seed {seed} lacks {cover:?}");
            }
            assert!(m.0.count(0) * 2 > 64 * 64, "seed {seed}: background is not the majority");
        }
    }
}
