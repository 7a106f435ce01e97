//! Three-dimensional R-tree over (latitude, longitude, time-of-day).
//!
//! Guttman's original structure with quadratic split. Latitude and longitude
//! are plain box coordinates at this layer; callers convert geodesic radii
//! into boxes. Time-of-day wraparound is the caller's concern too: a box whose
//! time range crosses midnight is answered as two sub-queries by
//! [`RTreeIndex::range`].

use std::collections::HashMap;

use thiserror::Error;

use crate::clock::SECONDS_PER_DAY;

pub const DEFAULT_MAX_ENTRIES: usize = 8;
pub const DEFAULT_MIN_ENTRIES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RTreeError {
    #[error("id {0} already indexed")]
    DuplicateId(u64),
    #[error("id {0} not indexed")]
    UnknownId(u64),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("invalid key: {0}")]
    InvalidKey(String),
}

/// A point in (lat, lon, time-of-day seconds) space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatioTemporalKey {
    pub lat: f64,
    pub lon: f64,
    pub tod_s: f64,
}

impl SpatioTemporalKey {
    pub fn new(lat: f64, lon: f64, tod_s: f64) -> Result<Self, RTreeError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(RTreeError::InvalidKey(format!("lat/lon out of bounds: ({lat}, {lon})")));
        }
        if !(0.0..SECONDS_PER_DAY as f64).contains(&tod_s) {
            return Err(RTreeError::InvalidKey(format!("time of day out of bounds: {tod_s}")));
        }
        Ok(Self { lat, lon, tod_s })
    }

    fn point(&self) -> [f64; 3] {
        [self.lat, self.lon, self.tod_s]
    }
}

/// Query box. `tod_lo > tod_hi` denotes a range that wraps past midnight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StBox {
    pub lat_lo: f64,
    pub lat_hi: f64,
    pub lon_lo: f64,
    pub lon_hi: f64,
    pub tod_lo: f64,
    pub tod_hi: f64,
}

impl StBox {
    pub fn everything() -> Self {
        Self {
            lat_lo: -90.0,
            lat_hi: 90.0,
            lon_lo: -180.0,
            lon_hi: 180.0,
            tod_lo: 0.0,
            tod_hi: (SECONDS_PER_DAY - 1) as f64,
        }
    }

    pub fn contains(&self, key: &SpatioTemporalKey) -> bool {
        let tod_ok = if self.tod_lo <= self.tod_hi {
            key.tod_s >= self.tod_lo && key.tod_s <= self.tod_hi
        } else {
            key.tod_s >= self.tod_lo || key.tod_s <= self.tod_hi
        };
        tod_ok && key.lat >= self.lat_lo && key.lat <= self.lat_hi && key.lon >= self.lon_lo && key.lon <= self.lon_hi
    }

    fn validate(&self) -> Result<(), RTreeError> {
        let ordered = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.lat_lo, self.lat_hi) || self.lat_lo < -90.0 || self.lat_hi > 90.0 {
            return Err(RTreeError::InvalidRange(format!("latitude [{}, {}]", self.lat_lo, self.lat_hi)));
        }
        if !ordered(self.lon_lo, self.lon_hi) || self.lon_lo < -180.0 || self.lon_hi > 180.0 {
            return Err(RTreeError::InvalidRange(format!("longitude [{}, {}]", self.lon_lo, self.lon_hi)));
        }
        let day = 0.0..SECONDS_PER_DAY as f64;
        if !day.contains(&self.tod_lo) || !day.contains(&self.tod_hi) {
            return Err(RTreeError::InvalidRange(format!("time of day [{}, {}]", self.tod_lo, self.tod_hi)));
        }
        Ok(())
    }

    fn rects(&self) -> Vec<Rect> {
        let rect = |t0: f64, t1: f64| Rect { min: [self.lat_lo, self.lon_lo, t0], max: [self.lat_hi, self.lon_hi, t1] };
        if self.tod_lo <= self.tod_hi {
            vec![rect(self.tod_lo, self.tod_hi)]
        } else {
            vec![rect(self.tod_lo, SECONDS_PER_DAY as f64), rect(0.0, self.tod_hi)]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Rect {
    min: [f64; 3],
    max: [f64; 3],
}

impl Rect {
    fn point(p: [f64; 3]) -> Self {
        Self { min: p, max: p }
    }

    fn union(&self, o: &Rect) -> Rect {
        let mut r = *self;
        for d in 0..3 {
            r.min[d] = r.min[d].min(o.min[d]);
            r.max[d] = r.max[d].max(o.max[d]);
        }
        r
    }

    fn intersects(&self, o: &Rect) -> bool {
        (0..3).all(|d| self.min[d] <= o.max[d] && o.min[d] <= self.max[d])
    }

    fn contains_rect(&self, o: &Rect) -> bool {
        (0..3).all(|d| self.min[d] <= o.min[d] && o.max[d] <= self.max[d])
    }

    fn contains_point(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|d| self.min[d] <= p[d] && p[d] <= self.max[d])
    }

    /// Volume, with half-perimeter as a tie-breaker for degenerate boxes.
    fn measure(&self) -> (f64, f64) {
        let ext = [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]];
        (ext[0] * ext[1] * ext[2], ext[0] + ext[1] + ext[2])
    }
}

fn sub(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 - b.0, a.1 - b.1)
}

fn less(a: (f64, f64), b: (f64, f64)) -> bool {
    a.partial_cmp(&b) == Some(std::cmp::Ordering::Less)
}

type LeafEntry = ([f64; 3], u64);
type Child = (Rect, Box<Node>);

#[derive(Debug, Clone)]
enum Node {
    Leaf(Vec<LeafEntry>),
    Inner(Vec<Child>),
}

impl Node {
    fn len(&self) -> usize {
        match self {
            Node::Leaf(v) => v.len(),
            Node::Inner(v) => v.len(),
        }
    }

    fn bbox(&self) -> Option<Rect> {
        match self {
            Node::Leaf(v) => v.iter().map(|(p, _)| Rect::point(*p)).reduce(|a, b| a.union(&b)),
            Node::Inner(v) => v.iter().map(|(r, _)| *r).reduce(|a, b| a.union(&b)),
        }
    }

    fn collect_points(self, out: &mut Vec<LeafEntry>) {
        match self {
            Node::Leaf(v) => out.extend(v),
            Node::Inner(v) => v.into_iter().for_each(|(_, c)| c.collect_points(out)),
        }
    }
}

/// Quadratic split: pick the two seeds wasting the most space together, then
/// repeatedly assign the entry with the strongest group preference, honoring
/// the minimum fill of both groups.
fn quadratic_split<T>(entries: Vec<T>, rect_of: impl Fn(&T) -> Rect, min_fill: usize) -> (Vec<T>, Vec<T>) {
    let rects: Vec<Rect> = entries.iter().map(&rect_of).collect();
    let n = rects.len();
    let (mut s1, mut s2) = (0, 1);
    let mut worst = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in i + 1..n {
            let union = rects[i].union(&rects[j]).measure();
            let waste = sub(sub(union, rects[i].measure()), rects[j].measure());
            if less(worst, waste) {
                worst = waste;
                s1 = i;
                s2 = j;
            }
        }
    }

    let mut slots: Vec<Option<T>> = entries.into_iter().map(Some).collect();
    let mut g1 = vec![slots[s1].take().unwrap()];
    let mut g2 = vec![slots[s2].take().unwrap()];
    let (mut r1, mut r2) = (rects[s1], rects[s2]);
    let mut remaining: Vec<usize> = (0..n).filter(|&i| i != s1 && i != s2).collect();

    while !remaining.is_empty() {
        if g1.len() + remaining.len() == min_fill {
            for i in remaining.drain(..) {
                r1 = r1.union(&rects[i]);
                g1.push(slots[i].take().unwrap());
            }
            break;
        }
        if g2.len() + remaining.len() == min_fill {
            for i in remaining.drain(..) {
                r2 = r2.union(&rects[i]);
                g2.push(slots[i].take().unwrap());
            }
            break;
        }
        let mut pick = 0;
        let mut best_pref = f64::NEG_INFINITY;
        let mut pick_costs = ((0.0, 0.0), (0.0, 0.0));
        for (pos, &i) in remaining.iter().enumerate() {
            let d1 = sub(r1.union(&rects[i]).measure(), r1.measure());
            let d2 = sub(r2.union(&rects[i]).measure(), r2.measure());
            let pref = (d1.0 - d2.0).abs() + 1e-12 * (d1.1 - d2.1).abs();
            if pref > best_pref {
                best_pref = pref;
                pick = pos;
                pick_costs = (d1, d2);
            }
        }
        let i = remaining.swap_remove(pick);
        let (d1, d2) = pick_costs;
        let to_first = if less(d1, d2) {
            true
        } else if less(d2, d1) {
            false
        } else if less(r1.measure(), r2.measure()) {
            true
        } else if less(r2.measure(), r1.measure()) {
            false
        } else {
            g1.len() <= g2.len()
        };
        if to_first {
            r1 = r1.union(&rects[i]);
            g1.push(slots[i].take().unwrap());
        } else {
            r2 = r2.union(&rects[i]);
            g2.push(slots[i].take().unwrap());
        }
    }
    (g1, g2)
}

#[derive(Debug, Clone)]
pub struct RTreeIndex {
    root: Node,
    keys: HashMap<u64, [f64; 3]>,
    max_entries: usize,
    min_entries: usize,
}

impl Default for RTreeIndex {
    fn default() -> Self {
        Self::new()
    }
}

impl RTreeIndex {
    pub fn new() -> Self {
        Self::with_capacity(DEFAULT_MAX_ENTRIES, DEFAULT_MIN_ENTRIES)
    }

    pub fn with_capacity(max_entries: usize, min_entries: usize) -> Self {
        assert!(max_entries >= 2 && min_entries >= 1 && min_entries <= max_entries / 2);
        Self { root: Node::Leaf(Vec::new()), keys: HashMap::new(), max_entries, min_entries }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.keys.contains_key(&id)
    }

    pub fn root_is_leaf(&self) -> bool {
        matches!(self.root, Node::Leaf(_))
    }

    /// Number of leaf nodes.
    pub fn leaf_count(&self) -> usize {
        fn walk(n: &Node) -> usize {
            match n {
                Node::Leaf(_) => 1,
                Node::Inner(c) => c.iter().map(|(_, n)| walk(n)).sum(),
            }
        }
        walk(&self.root)
    }

    pub fn height(&self) -> usize {
        let mut h = 1;
        let mut n = &self.root;
        while let Node::Inner(c) = n {
            h += 1;
            n = &c[0].1;
        }
        h
    }

    pub fn insert(&mut self, key: SpatioTemporalKey, id: u64) -> Result<(), RTreeError> {
        if self.keys.contains_key(&id) {
            return Err(RTreeError::DuplicateId(id));
        }
        let p = key.point();
        self.keys.insert(id, p);
        self.insert_point(p, id);
        Ok(())
    }

    fn insert_point(&mut self, p: [f64; 3], id: u64) {
        if let Some(sibling) = Self::insert_rec(&mut self.root, p, id, self.max_entries, self.min_entries) {
            let old = std::mem::replace(&mut self.root, Node::Leaf(Vec::new()));
            let old_rect = old.bbox().expect("split node is non-empty");
            self.root = Node::Inner(vec![(old_rect, Box::new(old)), sibling]);
        }
    }

    fn insert_rec(node: &mut Node, p: [f64; 3], id: u64, max: usize, min: usize) -> Option<Child> {
        match node {
            Node::Leaf(entries) => {
                entries.push((p, id));
                if entries.len() <= max {
                    return None;
                }
                let (a, b) = quadratic_split(std::mem::take(entries), |e| Rect::point(e.0), min);
                *entries = a;
                let sibling = Node::Leaf(b);
                Some((sibling.bbox().unwrap(), Box::new(sibling)))
            }
            Node::Inner(children) => {
                let target = Rect::point(p);
                let mut best = 0;
                let mut best_cost = ((f64::INFINITY, f64::INFINITY), (f64::INFINITY, f64::INFINITY));
                for (i, (r, _)) in children.iter().enumerate() {
                    let m = r.measure();
                    let cost = (sub(r.union(&target).measure(), m), m);
                    if cost.partial_cmp(&best_cost) == Some(std::cmp::Ordering::Less) {
                        best_cost = cost;
                        best = i;
                    }
                }
                let split = Self::insert_rec(&mut children[best].1, p, id, max, min);
                children[best].0 = children[best].1.bbox().unwrap();
                if let Some(s) = split {
                    children.push(s);
                }
                if children.len() <= max {
                    return None;
                }
                let (a, b) = quadratic_split(std::mem::take(children), |c| c.0, min);
                *children = a;
                let sibling = Node::Inner(b);
                Some((sibling.bbox().unwrap(), Box::new(sibling)))
            }
        }
    }

    pub fn remove(&mut self, id: u64) -> Result<(), RTreeError> {
        let p = self.keys.remove(&id).ok_or(RTreeError::UnknownId(id))?;
        let mut orphans = Vec::new();
        let found = Self::remove_rec(&mut self.root, &p, id, self.min_entries, &mut orphans);
        debug_assert!(found, "key map and tree disagree for id {id}");
        loop {
            match &mut self.root {
                Node::Inner(c) if c.len() == 1 => {
                    let (_, only) = c.pop().unwrap();
                    self.root = *only;
                }
                Node::Inner(c) if c.is_empty() => self.root = Node::Leaf(Vec::new()),
                _ => break,
            }
        }
        for (p, id) in orphans {
            self.insert_point(p, id);
        }
        Ok(())
    }

    fn remove_rec(node: &mut Node, p: &[f64; 3], id: u64, min: usize, orphans: &mut Vec<LeafEntry>) -> bool {
        match node {
            Node::Leaf(entries) => match entries.iter().position(|e| e.1 == id) {
                Some(i) => {
                    entries.swap_remove(i);
                    true
                }
                None => false,
            },
            Node::Inner(children) => {
                for i in 0..children.len() {
                    if !children[i].0.contains_point(p) {
                        continue;
                    }
                    if Self::remove_rec(&mut children[i].1, p, id, min, orphans) {
                        if children[i].1.len() < min {
                            let (_, dead) = children.swap_remove(i);
                            dead.collect_points(orphans);
                        } else {
                            children[i].0 = children[i].1.bbox().unwrap();
                        }
                        return true;
                    }
                }
                false
            }
        }
    }

    /// Ids whose keys fall inside `b`, ascending.
    pub fn range(&self, b: &StBox) -> Result<Vec<u64>, RTreeError> {
        b.validate()?;
        let mut out = Vec::new();
        for r in b.rects() {
            Self::search_rec(&self.root, &r, &mut out);
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    fn search_rec(node: &Node, q: &Rect, out: &mut Vec<u64>) {
        match node {
            Node::Leaf(entries) => out.extend(entries.iter().filter(|(p, _)| q.contains_point(p)).map(|e| e.1)),
            Node::Inner(children) => {
                for (r, c) in children {
                    if r.intersects(q) {
                        Self::search_rec(c, q, out);
                    }
                }
            }
        }
    }

    /// Walks the whole tree checking bounding-box containment, fill bounds,
    /// uniform leaf depth and entry count.
    pub fn check_invariants(&self) -> Result<(), String> {
        fn walk(
            n: &Node,
            is_root: bool,
            depth: usize,
            max: usize,
            min: usize,
            leaf_depth: &mut Option<usize>,
            count: &mut usize,
        ) -> Result<(), String> {
            if n.len() > max {
                return Err(format!("node at depth {depth} has {} > {max} entries", n.len()));
            }
            if !is_root && n.len() < min {
                return Err(format!("node at depth {depth} has {} < {min} entries", n.len()));
            }
            match n {
                Node::Leaf(e) => {
                    *count += e.len();
                    match leaf_depth {
                        Some(d) if *d != depth => return Err(format!("leaf depth {depth} != {d}")),
                        _ => *leaf_depth = Some(depth),
                    }
                }
                Node::Inner(children) => {
                    if is_root && children.len() < 2 {
                        return Err("inner root with fewer than two children".into());
                    }
                    for (r, c) in children {
                        let actual = c.bbox().ok_or("empty child node")?;
                        if !r.contains_rect(&actual) {
                            return Err(format!("child box {actual:?} escapes parent entry {r:?}"));
                        }
                        walk(c, false, depth + 1, max, min, leaf_depth, count)?;
                    }
                }
            }
            Ok(())
        }
        let mut count = 0;
        walk(&self.root, true, 0, self.max_entries, self.min_entries, &mut None, &mut count)?;
        if count != self.keys.len() {
            return Err(format!("tree holds {count} entries, key map {}", self.keys.len()));
        }
        Ok(())
    }
}
