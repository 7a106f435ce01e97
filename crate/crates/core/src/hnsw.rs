//! Hierarchical navigable small world graph for approximate k-NN search
//! over unit embeddings under cosine distance (`1 - dot`).
//!
//! Node levels are drawn from a seeded ChaCha generator, so an identical
//! seed and insertion sequence always produces the identical graph.
//! Deletion tombstones the node; tombstones stay navigable but never appear
//! in results, and the graph is rebuilt from the live nodes once more than a
//! quarter of all nodes are tombstoned.

use std::cell::RefCell;
use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::embed::{cosine_distance, fnv1a64, Embedding};

const MAX_LEVEL: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HnswError {
    #[error("id {0} already indexed")]
    DuplicateId(u64),
    #[error("id {0} not indexed")]
    UnknownId(u64),
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("index is empty")]
    EmptyIndex,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HnswParams {
    /// Max neighbors per node on layers >= 1; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self { m: 16, ef_construction: 200, ef_search: 64, seed: 42 }
    }
}

impl HnswParams {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }

    fn level_mult(&self) -> f64 {
        1.0 / (self.m as f64).ln()
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Scored {
    dist: f32,
    node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.node.cmp(&other.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Generation-stamped visited marks, reused per thread.
struct Visited {
    marks: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    /// Returns true if `i` was not yet visited.
    fn insert(&mut self, i: u32) -> bool {
        let slot = &mut self.marks[i as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }
}

thread_local! {
    static VISITED: RefCell<Visited> = const { RefCell::new(Visited { marks: Vec::new(), epoch: 0 }) };
}

#[derive(Debug, Clone)]
pub struct HnswIndex {
    params: HnswParams,
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<f32>,
    /// `links[node][layer]`, one adjacency list per layer the node lives on.
    links: Vec<Vec<Vec<u32>>>,
    deleted: Vec<bool>,
    index_of: HashMap<u64, u32>,
    entry: Option<u32>,
    top_level: usize,
    rng: ChaCha8Rng,
    live: usize,
    rebuilds: usize,
}

impl HnswIndex {
    pub fn new(dim: usize, params: HnswParams) -> Self {
        assert!(dim > 0 && params.m >= 2 && params.ef_construction >= 1);
        Self {
            params,
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            links: Vec::new(),
            deleted: Vec::new(),
            index_of: HashMap::new(),
            entry: None,
            top_level: 0,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            live: 0,
            rebuilds: 0,
        }
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Live (non-tombstoned) node count.
    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn tombstones(&self) -> usize {
        self.ids.len() - self.live
    }

    /// How many times the graph has been rebuilt to shed tombstones.
    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index_of.get(&id).is_some_and(|&i| !self.deleted[i as usize])
    }

    pub fn entry_point(&self) -> Option<u64> {
        self.entry.map(|e| self.ids[e as usize])
    }

    pub fn level_of(&self, id: u64) -> Option<usize> {
        self.index_of.get(&id).map(|&i| self.links[i as usize].len() - 1)
    }

    pub fn neighbors(&self, id: u64, layer: usize) -> Option<Vec<u64>> {
        let &i = self.index_of.get(&id)?;
        let adj = self.links[i as usize].get(layer)?;
        Some(adj.iter().map(|&n| self.ids[n as usize]).collect())
    }

    /// FNV digest over the graph topology (ids, levels, adjacency order).
    pub fn structure_digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.ids.len() * 64);
        for (i, layers) in self.links.iter().enumerate() {
            bytes.extend_from_slice(&self.ids[i].to_le_bytes());
            bytes.push(u8::from(self.deleted[i]));
            bytes.extend_from_slice(&(layers.len() as u32).to_le_bytes());
            for adj in layers {
                bytes.extend_from_slice(&(adj.len() as u32).to_le_bytes());
                for n in adj {
                    bytes.extend_from_slice(&n.to_le_bytes());
                }
            }
        }
        if let Some(e) = self.entry {
            bytes.extend_from_slice(&e.to_le_bytes());
        }
        fnv1a64(&bytes)
    }

    fn vector(&self, i: u32) -> &[f32] {
        let start = i as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    fn dist(&self, q: &[f32], i: u32) -> f32 {
        cosine_distance(q, self.vector(i))
    }

    fn draw_level(&mut self) -> usize {
        let u: f64 = 1.0 - self.rng.random::<f64>();
        ((-u.ln() * self.params.level_mult()).floor() as usize).min(MAX_LEVEL)
    }

    pub fn insert(&mut self, id: u64, v: &Embedding) -> Result<(), HnswError> {
        if v.dim() != self.dim {
            return Err(HnswError::DimensionMismatch { expected: self.dim, actual: v.dim() });
        }
        if self.index_of.contains_key(&id) {
            return Err(HnswError::DuplicateId(id));
        }
        self.insert_raw(id, v.as_slice());
        Ok(())
    }

    fn insert_raw(&mut self, id: u64, v: &[f32]) {
        let level = self.draw_level();
        let node = self.ids.len() as u32;
        self.ids.push(id);
        self.vectors.extend_from_slice(v);
        self.links.push(vec![Vec::new(); level + 1]);
        self.deleted.push(false);
        self.index_of.insert(id, node);
        self.live += 1;

        let Some(mut ep) = self.entry else {
            self.entry = Some(node);
            self.top_level = level;
            return;
        };

        let q = v.to_vec();
        let mut ep_dist = self.dist(&q, ep);
        for layer in (level + 1..=self.top_level).rev() {
            (ep, ep_dist) = self.greedy_closest(&q, ep, ep_dist, layer);
        }
        let mut entry_points = vec![Scored { dist: ep_dist, node: ep }];
        for layer in (0..=level.min(self.top_level)).rev() {
            let found = self.search_layer(&q, &entry_points, self.params.ef_construction, layer, true);
            let selected = self.select_neighbors(&found, self.params.m);
            self.links[node as usize][layer] = selected.iter().map(|s| s.node).collect();
            for s in &selected {
                self.connect(s.node, node, layer);
            }
            if !found.is_empty() {
                entry_points = found;
            }
        }
        if level > self.top_level {
            self.top_level = level;
            self.entry = Some(node);
        }
    }

    /// Adds the `from -> to` edge on `layer`, pruning `from`'s list with the
    /// selection heuristic when it overflows.
    fn connect(&mut self, from: u32, to: u32, layer: usize) {
        let cap = self.params.max_degree(layer);
        self.links[from as usize][layer].push(to);
        if self.links[from as usize][layer].len() <= cap {
            return;
        }
        let base = self.vector(from).to_vec();
        let mut cands: Vec<Scored> =
            self.links[from as usize][layer].iter().map(|&n| Scored { dist: self.dist(&base, n), node: n }).collect();
        cands.sort();
        let kept = self.select_neighbors(&cands, cap);
        self.links[from as usize][layer] = kept.into_iter().map(|s| s.node).collect();
    }

    /// Diversity heuristic: walk candidates nearest-first and keep one only if
    /// it is closer to the base than to every neighbor already kept. Free
    /// slots are then filled with the nearest pruned candidates.
    fn select_neighbors(&self, sorted: &[Scored], m: usize) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        let mut pruned: Vec<Scored> = Vec::new();
        for c in sorted {
            if kept.len() >= m {
                break;
            }
            let cv = self.vector(c.node);
            if kept.iter().all(|k| cosine_distance(cv, self.vector(k.node)) > c.dist) {
                kept.push(*c);
            } else {
                pruned.push(*c);
            }
        }
        let free = m - kept.len();
        kept.extend(pruned.into_iter().take(free));
        kept.sort();
        kept
    }

    fn greedy_closest(&self, q: &[f32], mut ep: u32, mut ep_dist: f32, layer: usize) -> (u32, f32) {
        loop {
            let mut improved = false;
            for &n in &self.links[ep as usize][layer] {
                let d = self.dist(q, n);
                if (Scored { dist: d, node: n }) < (Scored { dist: ep_dist, node: ep }) {
                    ep = n;
                    ep_dist = d;
                    improved = true;
                }
            }
            if !improved {
                return (ep, ep_dist);
            }
        }
    }

    /// Best-first beam search on one layer. Tombstoned nodes are traversed
    /// but only admitted to the result set when `live_only` is false.
    fn search_layer(
        &self,
        q: &[f32],
        entry_points: &[Scored],
        ef: usize,
        layer: usize,
        live_only: bool,
    ) -> Vec<Scored> {
        VISITED.with(|cell| {
            let mut visited = cell.borrow_mut();
            visited.reset(self.ids.len());
            let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
            let mut results: BinaryHeap<Scored> = BinaryHeap::new();
            for &ep in entry_points {
                if visited.insert(ep.node) {
                    candidates.push(Reverse(ep));
                    if !live_only || !self.deleted[ep.node as usize] {
                        results.push(ep);
                    }
                }
            }
            while results.len() > ef {
                results.pop();
            }
            while let Some(Reverse(c)) = candidates.pop() {
                if results.len() >= ef && c > *results.peek().unwrap() {
                    break;
                }
                for &n in &self.links[c.node as usize][layer] {
                    if !visited.insert(n) {
                        continue;
                    }
                    let s = Scored { dist: self.dist(q, n), node: n };
                    if results.len() < ef || s < *results.peek().unwrap() {
                        candidates.push(Reverse(s));
                        if !live_only || !self.deleted[n as usize] {
                            results.push(s);
                            if results.len() > ef {
                                results.pop();
                            }
                        }
                    }
                }
            }
            results.into_sorted_vec()
        })
    }

    /// Up to `k` nearest live ids, ascending by cosine distance.
    pub fn search(&self, q: &Embedding, k: usize, ef: usize) -> Result<Vec<(u64, f32)>, HnswError> {
        if q.dim() != self.dim {
            return Err(HnswError::DimensionMismatch { expected: self.dim, actual: q.dim() });
        }
        let Some(mut ep) = self.entry else {
            return Err(HnswError::EmptyIndex);
        };
        if self.live == 0 {
            return Err(HnswError::EmptyIndex);
        }
        let q = q.as_slice();
        let mut ep_dist = self.dist(q, ep);
        for layer in (1..=self.top_level).rev() {
            (ep, ep_dist) = self.greedy_closest(q, ep, ep_dist, layer);
        }
        let found = self.search_layer(q, &[Scored { dist: ep_dist, node: ep }], ef.max(k), 0, true);
        Ok(found.into_iter().take(k).map(|s| (self.ids[s.node as usize], s.dist)).collect())
    }

    pub fn remove(&mut self, id: u64) -> Result<(), HnswError> {
        let i = match self.index_of.get(&id) {
            Some(&i) if !self.deleted[i as usize] => i,
            _ => return Err(HnswError::UnknownId(id)),
        };
        self.deleted[i as usize] = true;
        self.live -= 1;
        if self.tombstones() * 4 > self.ids.len() {
            self.rebuild();
        } else if self.entry == Some(i) {
            self.reanchor();
        }
        Ok(())
    }

    fn reanchor(&mut self) {
        let best = (0..self.ids.len() as u32)
            .filter(|&n| !self.deleted[n as usize])
            .max_by(|&a, &b| self.links[a as usize].len().cmp(&self.links[b as usize].len()).then(b.cmp(&a)));
        self.entry = best;
        self.top_level = best.map_or(0, |b| self.links[b as usize].len() - 1);
    }

    /// Reinserts the live nodes, in their original order, into a fresh graph
    /// whose level generator restarts from the configured seed.
    fn rebuild(&mut self) {
        let survivors: Vec<(u64, Vec<f32>)> = (0..self.ids.len() as u32)
            .filter(|&n| !self.deleted[n as usize])
            .map(|n| (self.ids[n as usize], self.vector(n).to_vec()))
            .collect();
        let rebuilds = self.rebuilds + 1;
        *self = Self::new(self.dim, self.params);
        self.rebuilds = rebuilds;
        for (id, v) in survivors {
            self.insert_raw(id, &v);
        }
    }

    /// Degree bounds, layer membership, and entry-point placement.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, layers) in self.links.iter().enumerate() {
            for (layer, adj) in layers.iter().enumerate() {
                if adj.len() > self.params.max_degree(layer) {
                    return Err(format!("node {} layer {layer} degree {}", self.ids[i], adj.len()));
                }
                for &n in adj {
                    if self.links[n as usize].len() <= layer {
                        return Err(format!("node {} links to {} above its level", self.ids[i], self.ids[n as usize]));
                    }
                    if n as usize == i {
                        return Err(format!("self loop at {}", self.ids[i]));
                    }
                }
            }
        }
        match self.entry {
            None if self.live > 0 => return Err("live nodes but no entry point".into()),
            Some(e) => {
                if self.deleted[e as usize] {
                    return Err("entry point is tombstoned".into());
                }
                if self.links[e as usize].len() - 1 != self.top_level {
                    return Err("entry point is not on the top layer".into());
                }
                let max_live = (0..self.ids.len())
                    .filter(|&n| !self.deleted[n])
                    .map(|n| self.links[n].len() - 1)
                    .max()
                    .unwrap_or(0);
                if max_live > self.top_level {
                    return Err("a live node sits above the entry point".into());
                }
            }
            None => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
        Embedding::new((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
    }

    fn brute(data: &[(u64, Embedding)], q: &Embedding, k: usize) -> Vec<u64> {
        let mut d: Vec<(f32, u64)> =
            data.iter().map(|(id, v)| (cosine_distance(q.as_slice(), v.as_slice()), *id)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|x| x.1).collect()
    }

    fn recall(index: &HnswIndex, data: &[(u64, Embedding)], queries: &[Embedding], k: usize, ef: usize) -> f64 {
        let mut hits = 0;
        for q in queries {
            let truth = brute(data, q, k);
            let got = index.search(q, k, ef).unwrap();
            hits += got.iter().filter(|(id, _)| truth.contains(id)).count();
        }
        hits as f64 / (queries.len() * k) as f64
    }

    #[test]
    fn first_insert_is_entry_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut h = HnswIndex::new(8, HnswParams::default());
        h.insert(5, &random_unit(&mut rng, 8)).unwrap();
        assert_eq!(h.entry_point(), Some(5));
        assert_eq!(h.level_of(5).unwrap(), h.top_level);
    }

    #[test]
    fn two_inserts_are_mutual_neighbors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut h = HnswIndex::new(8, HnswParams::default());
        h.insert(1, &random_unit(&mut rng, 8)).unwrap();
        h.insert(2, &random_unit(&mut rng, 8)).unwrap();
        assert_eq!(h.neighbors(1, 0).unwrap(), vec![2]);
        assert_eq!(h.neighbors(2, 0).unwrap(), vec![1]);
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut h = HnswIndex::new(8, HnswParams::default());
        assert_eq!(h.search(&random_unit(&mut rng, 8), 1, 10).unwrap_err(), HnswError::EmptyIndex);
        let v = random_unit(&mut rng, 8);
        h.insert(1, &v).unwrap();
        assert_eq!(h.insert(1, &v).unwrap_err(), HnswError::DuplicateId(1));
        assert!(matches!(h.insert(2, &random_unit(&mut rng, 4)), Err(HnswError::DimensionMismatch { .. })));
        assert!(matches!(h.search(&random_unit(&mut rng, 4), 1, 1), Err(HnswError::DimensionMismatch { .. })));
        assert_eq!(h.remove(9).unwrap_err(), HnswError::UnknownId(9));
    }

    #[test]
    fn exact_hit_and_small_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut h = HnswIndex::new(16, HnswParams::default());
        let data: Vec<(u64, Embedding)> = (0..5).map(|i| (i, random_unit(&mut rng, 16))).collect();
        for (id, v) in &data {
            h.insert(*id, v).unwrap();
        }
        let got = h.search(&data[3].1, 1, 10).unwrap();
        assert_eq!(got[0].0, 3);
        assert!(got[0].1.abs() < 1e-6);
        let all = h.search(&data[0].1, 50, 50).unwrap();
        assert_eq!(all.len(), 5);
        assert!(all.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn remove_last_empties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut h = HnswIndex::new(8, HnswParams::default());
        let v = random_unit(&mut rng, 8);
        h.insert(1, &v).unwrap();
        h.remove(1).unwrap();
        assert_eq!(h.search(&v, 1, 10).unwrap_err(), HnswError::EmptyIndex);
        assert_eq!(h.remove(1).unwrap_err(), HnswError::UnknownId(1));
    }

    #[test]
    fn remove_nearest_promotes_second() {
        let mk = |v: Vec<f32>| Embedding::new(v).unwrap();
        let mut h = HnswIndex::new(3, HnswParams::default());
        h.insert(1, &mk(vec![1.0, 0.0, 0.0])).unwrap();
        h.insert(2, &mk(vec![0.9, 0.1, 0.0])).unwrap();
        h.insert(3, &mk(vec![0.0, 0.0, 1.0])).unwrap();
        let q = mk(vec![1.0, 0.01, 0.0]);
        assert_eq!(h.search(&q, 1, 10).unwrap()[0].0, 1);
        // three nodes: one tombstone is 33% and triggers a rebuild
        h.remove(1).unwrap();
        assert_eq!(h.search(&q, 1, 10).unwrap()[0].0, 2);
        assert_eq!(h.rebuilds(), 1);
        h.check_invariants().unwrap();
    }

    #[test]
    fn tombstones_without_rebuild_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut h = HnswIndex::new(16, HnswParams::default());
        let data: Vec<(u64, Embedding)> = (0..100).map(|i| (i, random_unit(&mut rng, 16))).collect();
        for (id, v) in &data {
            h.insert(*id, v).unwrap();
        }
        let entry = h.entry_point().unwrap();
        h.remove(entry).unwrap();
        assert_eq!(h.rebuilds(), 0);
        assert_ne!(h.entry_point(), Some(entry));
        h.check_invariants().unwrap();
        let got = h.search(&data[entry as usize].1, 100, 200).unwrap();
        assert_eq!(got.len(), 99);
        assert!(got.iter().all(|(id, _)| *id != entry));
    }

    #[test]
    fn audit_after_every_insert() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut h = HnswIndex::new(8, HnswParams { m: 4, ef_construction: 20, ..HnswParams::default() });
        for i in 0..300 {
            h.insert(i, &random_unit(&mut rng, 8)).unwrap();
            h.check_invariants().unwrap();
        }
    }

    #[test]
    fn distances_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut h = HnswIndex::new(32, HnswParams::default());
        let data: Vec<(u64, Embedding)> = (0..500).map(|i| (i, random_unit(&mut rng, 32))).collect();
        for (id, v) in &data {
            h.insert(*id, v).unwrap();
        }
        let q = random_unit(&mut rng, 32);
        for (id, d) in h.search(&q, 10, 64).unwrap() {
            let v = &data[id as usize].1;
            let exact = 1.0 - crate::embed::cosine(&q, v).unwrap();
            assert!((d - exact).abs() < 1e-6);
        }
    }

    #[test]
    fn recall_survives_heavy_deletion() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut h = HnswIndex::new(32, HnswParams::default());
        let data: Vec<(u64, Embedding)> = (0..1_000).map(|i| (i, random_unit(&mut rng, 32))).collect();
        for (id, v) in &data {
            h.insert(*id, v).unwrap();
        }
        let mut survivors = Vec::new();
        for (id, v) in &data {
            if id % 10 < 3 {
                h.remove(*id).unwrap();
            } else {
                survivors.push((*id, v.clone()));
            }
        }
        assert!(h.rebuilds() >= 1);
        assert_eq!(h.len(), 700);
        h.check_invariants().unwrap();
        let queries: Vec<Embedding> = (0..50).map(|_| random_unit(&mut rng, 32)).collect();
        let r = recall(&h, &survivors, &queries, 10, 128);
        assert!(r >= 0.95, "recall {r}");
    }

    #[test]
    fn increasing_ef_does_not_hurt_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut h = HnswIndex::new(32, HnswParams { ef_construction: 40, m: 8, ..HnswParams::default() });
        let data: Vec<(u64, Embedding)> = (0..3_000).map(|i| (i, random_unit(&mut rng, 32))).collect();
        for (id, v) in &data {
            h.insert(*id, v).unwrap();
        }
        let queries: Vec<Embedding> = (0..60).map(|_| random_unit(&mut rng, 32)).collect();
        let r: Vec<f64> = [10, 40, 160].iter().map(|&ef| recall(&h, &data, &queries, 10, ef)).collect();
        assert!(r[0] <= r[1] + 1e-9 && r[1] <= r[2] + 1e-9, "{r:?}");
    }
}
