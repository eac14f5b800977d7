use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::landcover::{random_disk, random_rect, region_is_clear, ChangeLabelMap, Cover, LandCoverMap, PlacedObject, SceneConfig};
use crate::error::{Error, Result};

/// Event footprint in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Geometry {
    /// Top-left corner and extent.
    Rect { row: usize, col: usize, height: usize, width: usize },
    /// Cells whose centre lies within `radius` of the centre cell.
    Disk { row: usize, col: usize, radius: usize },
    /// Axis-aligned segments between consecutive vertices, `width` cells thick.
    Polyline { points: Vec<(isize, isize)>, width: usize },
}

impl Geometry {
    /// Footprint cells, sorted and de-duplicated. Fails if any cell falls outside
    /// an `h × w` tile or the geometry is malformed.
    pub fn cells(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let outside = || Error::InvalidArgument(format!("geometry {self:?} leaves the {h}x{w} tile"));
        let mut cells = Vec::new();
        match *self {
            Geometry::Rect { row, col, height, width } => {
                if height == 0 || width == 0 {
                    return Err(Error::InvalidArgument("empty rectangle".into()));
                }
                if row + height > h || col + width > w {
                    return Err(outside());
                }
                for r in row..row + height {
                    for c in col..col + width {
                        cells.push((r, c));
                    }
                }
            }
            Geometry::Disk { row, col, radius } => {
                if row < radius || col < radius || row + radius >= h || col + radius >= w {
                    return Err(outside());
                }
                let r2 = (radius * radius) as isize;
                for r in row - radius..=row + radius {
                    for c in col - radius..=col + radius {
                        let (dr, dc) = (r as isize - row as isize, c as isize - col as isize);
                        if dr * dr + dc * dc <= r2 {
                            cells.push((r, c));
                        }
                    }
                }
            }
            Geometry::Polyline { ref points, width } => {
                if points.len() < 2 || width == 0 {
                    return Err(Error::InvalidArgument("polyline needs two vertices and positive width".into()));
                }
                let lo = (width as isize - 1) / 2;
                let hi = width as isize / 2;
                for seg in points.windows(2) {
                    let ((r0, c0), (r1, c1)) = (seg[0], seg[1]);
                    if r0 != r1 && c0 != c1 {
                        return Err(Error::InvalidArgument(format!("polyline segment {seg:?} is not axis-aligned")));
                    }
                    let (rmin, rmax, cmin, cmax) = if r0 == r1 {
                        (r0 - lo, r0 + hi, c0.min(c1), c0.max(c1))
                    } else {
                        (r0.min(r1), r0.max(r1), c0 - lo, c0 + hi)
                    };
                    if rmin < 0 || cmin < 0 || rmax >= h as isize || cmax >= w as isize {
                        return Err(outside());
                    }
                    for r in rmin..=rmax {
                        for c in cmin..=cmax {
                            cells.push((r as usize, c as usize));
                        }
                    }
                }
            }
        }
        cells.sort_unstable();
        cells.dedup();
        Ok(cells)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Add,
    Remove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub geometry: Geometry,
    pub cover: Cover,
    pub direction: Direction,
}

impl ChangeEvent {
    /// Change label painted by this event.
    pub fn label(&self) -> u8 {
        match self.direction {
            Direction::Add => self.cover as u8,
            Direction::Remove => 3 + self.cover as u8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChangeSpec {
    pub events: Vec<ChangeEvent>,
    pub seed: u64,
}

/// Label implied by an epoch-1 → epoch-2 cover transition.
pub fn label_from_covers(before: Cover, after: Cover) -> Result<u8> {
    match (before, after) {
        (a, b) if a == b => Ok(0),
        (Cover::Other, b) => Ok(b as u8),
        (a, Cover::Other) => Ok(3 + a as u8),
        (a, b) => Err(Error::InvalidArgument(format!("transition {a:?} -> {b:?} has no directional label"))),
    }
}

/// Applies planted events to `base`, returning the epoch-2 map and the exact label map.
pub fn apply_changes(base: &LandCoverMap, spec: &ChangeSpec) -> Result<(LandCoverMap, ChangeLabelMap)> {
    let (h, w) = (base.height(), base.width());
    let mut after = base.clone();
    let mut label = ChangeLabelMap::zeros(h, w);
    let mut owner: HashMap<(usize, usize), (Cover, Direction)> = HashMap::new();
    for ev in &spec.events {
        if ev.cover == Cover::Other {
            return Err(Error::InvalidArgument("change events must target building, road or water".into()));
        }
        let cells = ev.geometry.cells(h, w)?;
        for &(r, c) in &cells {
            let current = base.cover(r, c);
            let ok = match ev.direction {
                Direction::Add => current == Cover::Other,
                Direction::Remove => current == ev.cover,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "{:?} {:?} event covers cell ({r}, {c}) holding {current:?}",
                    ev.direction, ev.cover
                )));
            }
            match owner.get(&(r, c)) {
                Some(&prev) if prev != (ev.cover, ev.direction) => return Err(Error::Conflict { row: r, col: c }),
                _ => {
                    owner.insert((r, c), (ev.cover, ev.direction));
                }
            }
        }
        let painted = match ev.direction {
            Direction::Add => ev.cover,
            Direction::Remove => Cover::Other,
        };
        after.paint(&cells, painted);
        for &(r, c) in &cells {
            label.0.set(r, c, ev.label());
        }
    }
    Ok((after, label))
}

const EVENT_TRIES: usize = 100;

/// Draws 1..=N change events, uniform over cover × direction.
///
/// Removals delete a whole object listed in `objects`; additions place new
/// geometry on clear ground away from every object and earlier event.
pub fn random_change_spec(base: &LandCoverMap, objects: &[PlacedObject], seed: u64, config: &SceneConfig) -> ChangeSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = base.height();
    let target = rng.random_range(config.events.0..=config.events.1);
    let mut events: Vec<ChangeEvent> = Vec::new();
    // Working map marks event footprints so later additions keep clear of them.
    let mut occupied = base.clone();
    let mut removed = vec![false; objects.len()];
    let mut attempts = 0;
    while events.len() < target && attempts < EVENT_TRIES {
        attempts += 1;
        let cover = Cover::OBJECTS[rng.random_range(0..3)];
        let direction = if rng.random_bool(0.5) { Direction::Add } else { Direction::Remove };
        let event = match direction {
            Direction::Remove => {
                let candidates: Vec<usize> = (0..objects.len())
                    .filter(|&i| !removed[i] && objects[i].cover == cover && removable(base, &objects[i], &events))
                    .collect();
                if candidates.is_empty() {
                    continue;
                }
                let i = candidates[rng.random_range(0..candidates.len())];
                removed[i] = true;
                ChangeEvent { geometry: objects[i].geometry.clone(), cover, direction }
            }
            Direction::Add => {
                let Some(geometry) = propose_addition(&mut rng, &occupied, cover, config) else { continue };
                ChangeEvent { geometry, cover, direction }
            }
        };
        let cells = event.geometry.cells(size, size).expect("proposals stay inside the tile");
        // Any non-zero marker blocks later additions.
        occupied.paint(&cells, Cover::Building);
        events.push(event);
    }
    ChangeSpec { events, seed }
}

/// A removal is valid when all footprint cells still hold the object's cover
/// and no earlier event touched them.
fn removable(base: &LandCoverMap, obj: &PlacedObject, events: &[ChangeEvent]) -> bool {
    let (h, w) = (base.height(), base.width());
    let Ok(cells) = obj.geometry.cells(h, w) else { return false };
    if !cells.iter().all(|&(r, c)| base.cover(r, c) == obj.cover) {
        return false;
    }
    events.iter().all(|ev| {
        let other = ev.geometry.cells(h, w).unwrap_or_default();
        other.iter().all(|p| cells.binary_search(p).is_err())
    })
}

fn propose_addition(rng: &mut ChaCha8Rng, occupied: &LandCoverMap, cover: Cover, config: &SceneConfig) -> Option<Geometry> {
    let size = occupied.height();
    for _ in 0..EVENT_TRIES {
        let geometry = match cover {
            Cover::Building => {
                let h = rng.random_range(config.building_side.0..=config.building_side.1);
                let w = rng.random_range(config.building_side.0..=config.building_side.1);
                random_rect(rng, size, h, w)
            }
            Cover::Water => {
                let r = rng.random_range(config.water_radius.0..=config.water_radius.1);
                random_disk(rng, size, r)
            }
            Cover::Road => random_road_segment(rng, size, config),
            Cover::Other => None,
        };
        let Some(geometry) = geometry else { continue };
        let Ok(cells) = geometry.cells(size, size) else { continue };
        if region_is_clear(occupied, &cells, 1) {
            return Some(geometry);
        }
    }
    None
}

fn random_road_segment(rng: &mut ChaCha8Rng, size: usize, config: &SceneConfig) -> Option<Geometry> {
    let width = rng.random_range(config.road_width.0..=config.road_width.1);
    let min_len = size / 4;
    let max_len = size / 2;
    if width + 2 >= size || min_len < 2 {
        return None;
    }
    let len = rng.random_range(min_len..=max_len) as isize;
    let across = rng.random_range(width..size - width) as isize;
    let start = rng.random_range(1..(size - len as usize - 1).max(2)) as isize;
    let points = if rng.random_bool(0.5) {
        vec![(across, start), (across, start + len)]
    } else {
        vec![(start, across), (start + len, across)]
    };
    Some(Geometry::Polyline { points, width })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::landcover::synth_scene;

    fn water_base() -> LandCoverMap {
        let mut m = LandCoverMap::empty(32, 32);
        let cells = Geometry::Rect { row: 4, col: 4, height: 20, width: 20 }.cells(32, 32).unwrap();
        m.paint(&cells, Cover::Water);
        m
    }

    #[test]
    fn empty_spec_is_identity() {
        let base = synth_scene(3, 64, &SceneConfig::default()).unwrap().0;
        let (after, label) = apply_changes(&base, &ChangeSpec::default()).unwrap();
        assert_eq!(after, base);
        assert!(label.cells().iter().all(|&v| v == 0));
    }

    #[test]
    fn added_building_labels_exact_footprint() {
        let base = LandCoverMap::empty(32, 32);
        let spec = ChangeSpec {
            events: vec![ChangeEvent {
                geometry: Geometry::Rect { row: 5, col: 7, height: 10, width: 10 },
                cover: Cover::Building,
                direction: Direction::Add,
            }],
            seed: 0,
        };
        let (after, label) = apply_changes(&base, &spec).unwrap();
        assert_eq!(label.0.count(1), 100);
        assert_eq!(after.0.count(Cover::Building as u8), 100);
    }

    #[test]
    fn removed_water_disk_matches_enumeration() {
        let base = water_base();
        let spec = ChangeSpec {
            events: vec![ChangeEvent {
                geometry: Geometry::Disk { row: 14, col: 14, radius: 5 },
                cover: Cover::Water,
                direction: Direction::Remove,
            }],
            seed: 0,
        };
        let (_, label) = apply_changes(&base, &spec).unwrap();
        // brute-force: integer offsets with dr² + dc² ≤ 25
        let mut expected = 0;
        for dr in -5i32..=5 {
            for dc in -5i32..=5 {
                if dr * dr + dc * dc <= 25 {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 81);
        assert_eq!(label.0.count(6), expected);
    }

    #[test]
    fn conflicting_overlap_is_rejected() {
        let mut base = LandCoverMap::empty(32, 32);
        let b = Geometry::Rect { row: 0, col: 0, height: 4, width: 4 };
        base.paint(&b.cells(32, 32).unwrap(), Cover::Building);
        let spec = ChangeSpec {
            events: vec![
                ChangeEvent { geometry: Geometry::Rect { row: 5, col: 5, height: 4, width: 4 }, cover: Cover::Building, direction: Direction::Add },
                ChangeEvent { geometry: Geometry::Rect { row: 6, col: 6, height: 4, width: 4 }, cover: Cover::Water, direction: Direction::Add },
            ],
            seed: 0,
        };
        assert!(matches!(apply_changes(&base, &spec), Err(Error::Conflict { .. })));
    }

    #[test]
    fn add_on_occupied_cell_is_invalid() {
        let base = water_base();
        let spec = ChangeSpec {
            events: vec![ChangeEvent { geometry: Geometry::Rect { row: 3, col: 3, height: 3, width: 3 }, cover: Cover::Road, direction: Direction::Add }],
            seed: 0,
        };
        assert!(matches!(apply_changes(&base, &spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn geometry_outside_tile_is_invalid() {
        assert!(Geometry::Disk { row: 3, col: 10, radius: 4 }.cells(32, 32).is_err());
        assert!(Geometry::Polyline { points: vec![(0, 0), (5, 5)], width: 2 }.cells(32, 32).is_err());
    }

    #[test]
    fn random_specs_apply_cleanly() {
        let cfg = SceneConfig::default();
        for seed in 0..100 {
            let (base, objects) = synth_scene(seed, 64, &cfg).unwrap();
            let spec = random_change_spec(&base, &objects, seed + 1000, &cfg);
            assert!(!spec.events.is_empty() && spec.events.len() <= 4, "seed {seed}: {} events", spec.events.len());
            apply_changes(&base, &spec).unwrap();
        }
    }
}
