//! Panoptic label format: a per-pixel segment-id grid plus a segment table.
//! Id 0 is void (unlabeled) and never appears in the table.

use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;
use ndarray::Array2;
use std::collections::BTreeMap;

pub const VOID_ID: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentInfo {
    pub class: usize,
    pub is_thing: bool,
}

/// Per-pixel segment ids with a table describing each segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticMap {
    pub ids: Array2<u32>,
    pub segments: BTreeMap<u32, SegmentInfo>,
}

impl PanopticMap {
    pub fn empty(height: usize, width: usize) -> Self {
        PanopticMap {
            ids: Array2::zeros((height, width)),
            segments: BTreeMap::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.ids.dim().0
    }

    pub fn width(&self) -> usize {
        self.ids.dim().1
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn class_of(&self, id: u32) -> Option<usize> {
        self.segments.get(&id).map(|s| s.class)
    }

    /// Pixel count per segment id (void excluded).
    pub fn areas(&self) -> BTreeMap<u32, usize> {
        let mut areas = BTreeMap::new();
        for &id in self.ids.iter() {
            if id != VOID_ID {
                *areas.entry(id).or_insert(0) += 1;
            }
        }
        areas
    }

    /// Flat `H*W` binary mask of one segment, row-major.
    pub fn segment_mask(&self, id: u32) -> Vec<bool> {
        self.ids.iter().map(|&v| v == id).collect()
    }

    /// Checks the structural invariants: every nonzero id in the grid has a
    /// table entry, no table entry is empty, and stuff segments are unique
    /// per class.
    pub fn validate(&self) -> Result<()> {
        let areas = self.areas();
        for (&id, _) in &areas {
            if !self.segments.contains_key(&id) {
                return Err(Error::config(format!("grid id {id} missing from table")));
            }
        }
        for (&id, info) in &self.segments {
            if id == VOID_ID {
                return Err(Error::config("void id 0 must not appear in the table"));
            }
            if !areas.contains_key(&id) {
                return Err(Error::config(format!("segment {id} is empty")));
            }
            let _ = info;
        }
        let mut stuff_seen = BTreeMap::new();
        for (&id, info) in &self.segments {
            if !info.is_thing {
                if let Some(prev) = stuff_seen.insert(info.class, id) {
                    return Err(Error::config(format!(
                        "stuff class {} has multiple segments ({prev}, {id})",
                        info.class
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-pixel class view; void pixels map to `None`.
    pub fn semantic(&self) -> Array2<Option<usize>> {
        self.ids.map(|&id| self.segments.get(&id).map(|s| s.class))
    }

    /// Fresh id strictly above every id in use.
    pub fn next_free_id(&self) -> u32 {
        self.segments.keys().max().copied().unwrap_or(VOID_ID) + 1
    }
}

/// Class-agnostic region map: same id-grid layout as `PanopticMap` but with
/// no class table. Regions partition the labeled (non-void) area.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassAgnosticMap {
    pub ids: Array2<u32>,
}

impl ClassAgnosticMap {
    pub fn height(&self) -> usize {
        self.ids.dim().0
    }

    pub fn width(&self) -> usize {
        self.ids.dim().1
    }

    pub fn region_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .ids
            .iter()
            .filter(|&&id| id != VOID_ID)
            .copied()
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn region_mask(&self, id: u32) -> Vec<bool> {
        self.ids.iter().map(|&v| v == id).collect()
    }
}

/// Merges every stuff segment into a single background segment while leaving
/// thing segments and void pixels untouched.
pub fn remap_stuff_to_background(label: &PanopticMap, taxonomy: &Taxonomy) -> Result<PanopticMap> {
    let background = taxonomy
        .background_class()
        .ok_or_else(|| Error::config("taxonomy has no designated background class"))?;

    let stuff_ids: Vec<u32> = label
        .segments
        .iter()
        .filter(|(_, info)| !info.is_thing)
        .map(|(&id, _)| id)
        .collect();

    if stuff_ids.is_empty() {
        return Ok(label.clone());
    }

    let background_id = label.next_free_id();
    let mut ids = label.ids.clone();
    for v in ids.iter_mut() {
        if stuff_ids.binary_search(v).is_ok() {
            *v = background_id;
        }
    }

    let mut segments: BTreeMap<u32, SegmentInfo> = label
        .segments
        .iter()
        .filter(|(_, info)| info.is_thing)
        .map(|(&id, &info)| (id, info))
        .collect();
    segments.insert(
        background_id,
        SegmentInfo {
            class: background,
            is_thing: false,
        },
    );

    Ok(PanopticMap { ids, segments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_map() -> PanopticMap {
        // 2 is a thing, 1 and 3 are stuff of different classes
        let ids = array![[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 3, 0], [3, 3, 3, 0]];
        let mut segments = BTreeMap::new();
        segments.insert(1, SegmentInfo { class: 2, is_thing: false });
        segments.insert(2, SegmentInfo { class: 0, is_thing: true });
        segments.insert(3, SegmentInfo { class: 3, is_thing: false });
        PanopticMap { ids, segments }
    }

    #[test]
    fn validate_accepts_wellformed() {
        toy_map().validate().unwrap();
    }

    #[test]
    fn validate_rejects_duplicate_stuff() {
        let mut map = toy_map();
        map.segments.get_mut(&3).unwrap().class = 2;
        assert!(map.validate().is_err());
    }

    #[test]
    fn validate_rejects_empty_segment() {
        let mut map = toy_map();
        map.segments.insert(9, SegmentInfo { class: 1, is_thing: true });
        assert!(map.validate().is_err());
    }

    #[test]
    fn remap_merges_stuff_keeps_things_and_void() {
        let tax = Taxonomy::synthetic(2, 2).unwrap().with_background(3).unwrap();
        let map = toy_map();
        let thing_pixels_before = map.ids.iter().filter(|&&id| id == 2).count();
        let stuff_pixels_before = map
            .ids
            .iter()
            .filter(|&&id| id == 1 || id == 3)
            .count();

        let out = remap_stuff_to_background(&map, &tax).unwrap();
        out.validate().unwrap();

        // exactly one stuff segment remains and it is the background class
        let stuff: Vec<_> = out.segments.values().filter(|s| !s.is_thing).collect();
        assert_eq!(stuff.len(), 1);
        assert_eq!(stuff[0].class, 3);

        let thing_pixels_after = out.ids.iter().filter(|&&id| id == 2).count();
        assert_eq!(thing_pixels_before, thing_pixels_after);

        let background_id = out
            .segments
            .iter()
            .find(|(_, s)| !s.is_thing)
            .map(|(&id, _)| id)
            .unwrap();
        let background_pixels = out.ids.iter().filter(|&&id| id == background_id).count();
        assert_eq!(stuff_pixels_before, background_pixels);

        // void is untouched
        let voids = out.ids.iter().filter(|&&id| id == VOID_ID).count();
        assert_eq!(voids, 2);
    }

    #[test]
    fn remap_stuff_only_label_collapses_to_one_segment() {
        let tax = Taxonomy::synthetic(2, 2).unwrap().with_background(2).unwrap();
        let ids = array![[1, 1], [4, 4]];
        let mut segments = BTreeMap::new();
        segments.insert(1, SegmentInfo { class: 2, is_thing: false });
        segments.insert(4, SegmentInfo { class: 3, is_thing: false });
        let map = PanopticMap { ids, segments };

        let out = remap_stuff_to_background(&map, &tax).unwrap();
        assert_eq!(out.num_segments(), 1);
        let labeled = out.ids.iter().filter(|&&id| id != VOID_ID).count();
        assert_eq!(labeled, 4);
    }
}
