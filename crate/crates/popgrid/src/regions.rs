//! Administrative regions: GeoJSON-subset parsing, rasterization to
//! region-index maps, size-driven region merging, and IoU matching
//! between two partitions of the same raster.

use std::collections::{BTreeMap, BTreeSet};

use crate::grid::Transform;
use crate::{Error, Result};

/// Sentinel index for pixels belonging to no region.
pub const NODATA: u32 = 0xFFFF_FFFF;

/// One linear ring, closed (first vertex equals last).
pub type Ring = Vec<(f64, f64)>;

/// One polygon: exterior ring first, holes after.
pub type Polygon = Vec<Ring>;

/// A region with an id and one or more polygons.
#[derive(Debug, Clone)]
pub struct Region {
    pub id: u32,
    pub polygons: Vec<Polygon>,
}

/// A set of regions with unique ids.
#[derive(Debug, Clone)]
pub struct RegionPartition {
    pub regions: Vec<Region>,
}

/// Per-pixel region-index raster aligned to a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    width: usize,
    height: usize,
    transform: Transform,
    indices: Vec<u32>,
}

impl RegionMap {
    pub fn from_indices(
        width: usize,
        height: usize,
        transform: Transform,
        indices: Vec<u32>,
    ) -> Result<Self> {
        if indices.len() != width * height {
            return Err(Error::InvalidGrid(format!(
                "region map expects {} indices, got {}",
                width * height,
                indices.len()
            )));
        }
        Ok(RegionMap { width, height, transform, indices })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn transform(&self) -> Transform {
        self.transform
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    #[inline]
    pub fn index_at(&self, x: usize, y: usize) -> u32 {
        self.indices[y * self.width + x]
    }

    /// Sorted list of region ids present in the map.
    pub fn ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.indices.iter().copied().filter(|&i| i != NODATA).collect();
        set.into_iter().collect()
    }

    /// Number of non-sentinel pixels.
    pub fn assigned_pixels(&self) -> usize {
        self.indices.iter().filter(|&&i| i != NODATA).count()
    }

    /// Linear pixel indices per region, in raster order, keyed by id.
    pub fn pixels_by_region(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in self.indices.iter().enumerate() {
            if id != NODATA {
                out.entry(id).or_default().push(i);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// GeoJSON-subset parsing
// ---------------------------------------------------------------------------

/// Parse a FeatureCollection of Polygon/MultiPolygon features carrying an
/// integer `region_id` property. Geometry is preserved exactly.
pub fn parse_regions(text: &str) -> Result<RegionPartition> {
    let doc: serde_json::Value = serde_json::from_str(text)?;
    let obj = doc.as_object().ok_or_else(|| Error::Json("document is not an object".into()))?;
    match obj.get("type").and_then(|t| t.as_str()) {
        Some("FeatureCollection") => {}
        other => {
            return Err(Error::Json(format!(
                "expected a FeatureCollection, found type {other:?}"
            )))
        }
    }
    let features = obj
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| Error::Json("missing features array".into()))?;

    let mut regions = Vec::with_capacity(features.len());
    let mut seen = BTreeSet::new();
    for feature in features {
        let id = feature
            .get("properties")
            .and_then(|p| p.get("region_id"))
            .and_then(|v| v.as_u64())
            .filter(|&v| v <= u32::MAX as u64)
            .ok_or(Error::MissingRegionId)? as u32;
        if !seen.insert(id) {
            return Err(Error::DuplicateRegionId(id));
        }
        let geometry = feature
            .get("geometry")
            .and_then(|g| g.as_object())
            .ok_or_else(|| Error::Json("feature missing geometry".into()))?;
        let gtype = geometry
            .get("type")
            .and_then(|t| t.as_str())
            .ok_or_else(|| Error::Json("geometry missing type".into()))?;
        let coords = geometry
            .get("coordinates")
            .ok_or_else(|| Error::Json("geometry missing coordinates".into()))?;
        let polygons = match gtype {
            "Polygon" => vec![parse_polygon(coords)?],
            "MultiPolygon" => {
                let polys = coords
                    .as_array()
                    .ok_or_else(|| Error::Json("MultiPolygon coordinates not an array".into()))?;
                polys.iter().map(parse_polygon).collect::<Result<Vec<_>>>()?
            }
            other => return Err(Error::UnsupportedGeometry(other.to_string())),
        };
        regions.push(Region { id, polygons });
    }
    Ok(RegionPartition { regions })
}

fn parse_polygon(coords: &serde_json::Value) -> Result<Polygon> {
    let rings = coords
        .as_array()
        .ok_or_else(|| Error::Json("Polygon coordinates not an array".into()))?;
    if rings.is_empty() {
        return Err(Error::BadRing("polygon has no rings".into()));
    }
    let mut out = Vec::with_capacity(rings.len());
    for ring in rings {
        let pts = ring
            .as_array()
            .ok_or_else(|| Error::Json("ring is not an array".into()))?;
        let mut parsed: Ring = Vec::with_capacity(pts.len());
        for pt in pts {
            let pair = pt
                .as_array()
                .filter(|a| a.len() >= 2)
                .ok_or_else(|| Error::Json("coordinate is not an [x, y] pair".into()))?;
            let x = pair[0].as_f64().ok_or_else(|| Error::Json("x is not a number".into()))?;
            let y = pair[1].as_f64().ok_or_else(|| Error::Json("y is not a number".into()))?;
            parsed.push((x, y));
        }
        validate_ring(&parsed)?;
        out.push(parsed);
    }
    Ok(out)
}

fn validate_ring(ring: &Ring) -> Result<()> {
    if ring.len() < 4 {
        return Err(Error::BadRing(format!(
            "ring has {} vertices, need at least 3 distinct plus closure",
            ring.len()
        )));
    }
    if ring.first() != ring.last() {
        return Err(Error::BadRing("ring is not closed".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

/// Closed-set even-odd containment: points exactly on a ring edge count
/// as inside, otherwise parity of scanline crossings over all rings.
pub fn point_in_polygons(polygons: &[Polygon], px: f64, py: f64) -> bool {
    let mut inside = false;
    for polygon in polygons {
        for ring in polygon {
            for seg in ring.windows(2) {
                let (ax, ay) = seg[0];
                let (bx, by) = seg[1];
                if on_segment(ax, ay, bx, by, px, py) {
                    return true;
                }
                if (ay > py) != (by > py) {
                    let x_cross = ax + (py - ay) * (bx - ax) / (by - ay);
                    if px < x_cross {
                        inside = !inside;
                    }
                }
            }
        }
    }
    inside
}

fn on_segment(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> bool {
    let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
    if cross != 0.0 {
        return false;
    }
    px >= ax.min(bx) && px <= ax.max(bx) && py >= ay.min(by) && py <= ay.max(by)
}

/// Assign each pixel whose center lies inside a region's polygon set.
/// Edge ties go to the lower region id; uncovered pixels get the
/// sentinel.
pub fn rasterize(
    partition: &RegionPartition,
    transform: Transform,
    width: usize,
    height: usize,
) -> Result<RegionMap> {
    if width == 0 || height == 0 {
        return Err(Error::ZeroAreaRaster);
    }
    let mut indices = vec![NODATA; width * height];

    let mut order: Vec<&Region> = partition.regions.iter().collect();
    order.sort_by_key(|r| r.id);

    for region in order {
        let Some((min_x, min_y, max_x, max_y)) = bounding_box(&region.polygons) else {
            continue;
        };
        // Pixel range whose centers can fall inside the bbox.
        let x0 = ((min_x - transform.origin_x) / transform.pixel_size_x - 0.5).floor().max(0.0)
            as usize;
        let y0 = ((min_y - transform.origin_y) / transform.pixel_size_y - 0.5).floor().max(0.0)
            as usize;
        let x1 = (((max_x - transform.origin_x) / transform.pixel_size_x + 0.5).ceil() as usize)
            .min(width);
        let y1 = (((max_y - transform.origin_y) / transform.pixel_size_y + 0.5).ceil() as usize)
            .min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * width + x;
                if indices[i] != NODATA {
                    continue;
                }
                let (cx, cy) = transform.pixel_center(x, y);
                if point_in_polygons(&region.polygons, cx, cy) {
                    indices[i] = region.id;
                }
            }
        }
    }
    RegionMap::from_indices(width, height, transform, indices)
}

fn bounding_box(polygons: &[Polygon]) -> Option<(f64, f64, f64, f64)> {
    let mut bbox: Option<(f64, f64, f64, f64)> = None;
    for polygon in polygons {
        for ring in polygon {
            for &(x, y) in ring {
                bbox = Some(match bbox {
                    None => (x, y, x, y),
                    Some((mnx, mny, mxx, mxy)) => {
                        (mnx.min(x), mny.min(y), mxx.max(x), mxy.max(y))
                    }
                });
            }
        }
    }
    bbox
}

// ---------------------------------------------------------------------------
// Region merging
// ---------------------------------------------------------------------------

/// One merge step: `absorbed` was folded into `kept`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeEvent {
    pub kept: u32,
    pub absorbed: u32,
    /// True when the smallest region had no raster neighbor and was
    /// merged with the region of nearest centroid instead.
    pub fallback: bool,
}

/// Repeatedly merge the region with the fewest pixels into its smallest
/// 4-connected neighbor until `target_count` regions remain. The merged
/// region keeps the smaller of the two ids. Ties are broken toward the
/// lower id so the merge log is reproducible.
pub fn merge_smallest(map: &RegionMap, target_count: usize) -> Result<(RegionMap, Vec<MergeEvent>)> {
    let ids = map.ids();
    let current = ids.len();
    if target_count < 1 || target_count > current {
        return Err(Error::BadMergeTarget { current, target: target_count });
    }

    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    let mut centroid_sums: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    for (i, &id) in map.indices.iter().enumerate() {
        if id == NODATA {
            continue;
        }
        *counts.entry(id).or_insert(0) += 1;
        let e = centroid_sums.entry(id).or_insert((0.0, 0.0));
        e.0 += (i % map.width) as f64;
        e.1 += (i / map.width) as f64;
    }

    let mut adjacency: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for id in &ids {
        adjacency.insert(*id, BTreeSet::new());
    }
    for y in 0..map.height {
        for x in 0..map.width {
            let a = map.index_at(x, y);
            if a == NODATA {
                continue;
            }
            if x + 1 < map.width {
                let b = map.index_at(x + 1, y);
                if b != NODATA && b != a {
                    adjacency.get_mut(&a).unwrap().insert(b);
                    adjacency.get_mut(&b).unwrap().insert(a);
                }
            }
            if y + 1 < map.height {
                let b = map.index_at(x, y + 1);
                if b != NODATA && b != a {
                    adjacency.get_mut(&a).unwrap().insert(b);
                    adjacency.get_mut(&b).unwrap().insert(a);
                }
            }
        }
    }

    // Original id -> surviving id, resolved transitively at the end.
    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
    let mut log = Vec::new();

    while counts.len() > target_count {
        let (&smallest, _) = counts
            .iter()
            .min_by_key(|(id, count)| (**count, **id))
            .expect("nonempty");
        let neighbor = adjacency[&smallest]
            .iter()
            .map(|&n| (counts[&n], n))
            .min()
            .map(|(_, n)| n);
        let (partner, fallback) = match neighbor {
            Some(n) => (n, false),
            None => {
                let (sx, sy) = centroid_sums[&smallest];
                let sc = counts[&smallest] as f64;
                let (cx, cy) = (sx / sc, sy / sc);
                let nearest = counts
                    .keys()
                    .filter(|&&id| id != smallest)
                    .map(|&id| {
                        let (ox, oy) = centroid_sums[&id];
                        let oc = counts[&id] as f64;
                        let dx = ox / oc - cx;
                        let dy = oy / oc - cy;
                        // Total order: distances are finite by construction.
                        (FloatOrd(dx * dx + dy * dy), id)
                    })
                    .min()
                    .map(|(_, id)| id)
                    .expect("target_count >= 1 leaves a partner");
                (nearest, true)
            }
        };

        let kept = smallest.min(partner);
        let absorbed = smallest.max(partner);
        log.push(MergeEvent { kept, absorbed, fallback });

        let absorbed_count = counts.remove(&absorbed).unwrap();
        *counts.get_mut(&kept).unwrap() += absorbed_count;
        let (ax, ay) = centroid_sums.remove(&absorbed).unwrap();
        let e = centroid_sums.get_mut(&kept).unwrap();
        e.0 += ax;
        e.1 += ay;

        let absorbed_adj = adjacency.remove(&absorbed).unwrap();
        for n in absorbed_adj {
            if n == kept {
                continue;
            }
            let set = adjacency.get_mut(&n).unwrap();
            set.remove(&absorbed);
            set.insert(kept);
            adjacency.get_mut(&kept).unwrap().insert(n);
        }
        adjacency.get_mut(&kept).unwrap().remove(&absorbed);
        remap.insert(absorbed, kept);
    }

    let resolve = |mut id: u32| {
        while let Some(&next) = remap.get(&id) {
            id = next;
        }
        id
    };
    let indices: Vec<u32> = map
        .indices
        .iter()
        .map(|&id| if id == NODATA { NODATA } else { resolve(id) })
        .collect();
    let merged = RegionMap::from_indices(map.width, map.height, map.transform, indices)?;
    Ok((merged, log))
}

#[derive(PartialEq, PartialOrd)]
struct FloatOrd(f64);

impl Eq for FloatOrd {}

#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for FloatOrd {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).expect("finite distances")
    }
}

// ---------------------------------------------------------------------------
// IoU matching
// ---------------------------------------------------------------------------

/// Best-IoU partner in `b` for each region of `a`, reported when the
/// IoU meets the threshold. IoU is computed on pixel sets.
pub fn iou_match(a: &RegionMap, b: &RegionMap, threshold: f64) -> Result<Vec<(u32, u32, f64)>> {
    assert!(threshold > 0.0 && threshold <= 1.0, "threshold must be in (0, 1]");
    if a.width != b.width || a.height != b.height || a.transform != b.transform {
        return Err(Error::Misaligned("region maps differ in dims or transform".into()));
    }
    let mut area_a: BTreeMap<u32, u64> = BTreeMap::new();
    let mut area_b: BTreeMap<u32, u64> = BTreeMap::new();
    let mut inter: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (&ia, &ib) in a.indices.iter().zip(&b.indices) {
        if ia != NODATA {
            *area_a.entry(ia).or_insert(0) += 1;
        }
        if ib != NODATA {
            *area_b.entry(ib).or_insert(0) += 1;
        }
        if ia != NODATA && ib != NODATA {
            *inter.entry((ia, ib)).or_insert(0) += 1;
        }
    }
    let mut out = Vec::new();
    for (&id_a, &na) in &area_a {
        let mut best: Option<(f64, u32)> = None;
        for ((ia, ib), &ni) in inter.range((id_a, 0)..=(id_a, u32::MAX - 1)) {
            debug_assert_eq!(*ia, id_a);
            let union = na + area_b[ib] - ni;
            let iou = ni as f64 / union as f64;
            let better = match best {
                None => true,
                Some((best_iou, best_id)) => {
                    iou > best_iou || (iou == best_iou && *ib < best_id)
                }
            };
            if better {
                best = Some((iou, *ib));
            }
        }
        if let Some((iou, id_b)) = best {
            if iou >= threshold {
                out.push((id_a, id_b, iou));
            }
        }
    }
    Ok(out)
}
