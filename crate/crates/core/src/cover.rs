//! Viewing graph, triplet scoring and selection of a connected triplet cover.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use petgraph::unionfind::UnionFind;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{decompose_essential, EssentialBlock, Rotation};
use crate::nview::MultiviewEssential;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphEdge {
    pub weight: f64,
    /// `E_ij` for the stored orientation `i < j`.
    pub measurement: Matrix3<f64>,
}

/// Cameras as nodes, measured essential matrices as weighted edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewingGraph {
    n: usize,
    edges: BTreeMap<(usize, usize), GraphEdge>,
}

impl ViewingGraph {
    pub fn new(n: usize) -> ViewingGraph {
        ViewingGraph {
            n,
            edges: BTreeMap::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn add_edge(&mut self, i: usize, j: usize, measurement: Matrix3<f64>, weight: f64) -> Result<()> {
        for index in [i, j] {
            if index >= self.n {
                return Err(Error::IndexOutOfRange { index, n: self.n });
            }
        }
        if i == j {
            return Err(Error::InvalidBlock {
                i,
                j,
                reason: "self loop".into(),
            });
        }
        if !weight.is_finite() || !measurement.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidBlock {
                i,
                j,
                reason: "non-finite entry".into(),
            });
        }
        let (key, m) = if i < j {
            ((i, j), measurement)
        } else {
            ((j, i), measurement.transpose())
        };
        self.edges.insert(key, GraphEdge { weight, measurement: m });
        Ok(())
    }

    pub fn remove_edge(&mut self, i: usize, j: usize) -> Option<GraphEdge> {
        self.edges.remove(&(i.min(j), i.max(j)))
    }

    /// Measurement `E_ij` in the requested orientation.
    pub fn measurement(&self, i: usize, j: usize) -> Option<Matrix3<f64>> {
        if i < j {
            self.edges.get(&(i, j)).map(|e| e.measurement)
        } else {
            self.edges.get(&(j, i)).map(|e| e.measurement.transpose())
        }
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.edges.get(&(i.min(j), i.max(j))).map(|e| e.weight)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains_key(&(i.min(j), i.max(j)))
    }

    /// Edges `(i, j, edge)` with `i < j` in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, &GraphEdge)> + '_ {
        self.edges.iter().map(|(&(i, j), e)| (i, j, e))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_connected(&self) -> bool {
        let mut uf = UnionFind::<usize>::new(self.n);
        let mut parts = self.n;
        for &(i, j) in self.edges.keys() {
            if uf.union(i, j) {
                parts -= 1;
            }
        }
        parts <= 1
    }

    pub fn to_multiview(&self) -> Result<MultiviewEssential> {
        let mut m = MultiviewEssential::new(self.n)?;
        for (i, j, e) in self.edges() {
            m.insert_unchecked(i, j, e.measurement)?;
        }
        Ok(m)
    }

    /// Graph with unit weights holding every observed block of `m`.
    pub fn from_multiview(m: &MultiviewEssential) -> ViewingGraph {
        let mut g = ViewingGraph::new(m.n());
        for (i, j, e) in m.observed() {
            g.edges.insert(
                (i, j),
                GraphEdge {
                    weight: 1.0,
                    measurement: *e,
                },
            );
        }
        g
    }
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Interior angles `(th_i, th_j, th_k)` of the camera triangle, given
/// `t_ij`, `t_ik`, `t_jk` proportional to `c_i - c_j`, `c_i - c_k`, `c_j - c_k`
/// expressed in one frame.
pub fn triangle_angles(t_ij: &Vector3<f64>, t_ik: &Vector3<f64>, t_jk: &Vector3<f64>) -> Result<[f64; 3]> {
    if [t_ij, t_ik, t_jk].iter().any(|t| !(t.norm() > 0.0)) {
        return Err(Error::ZeroTranslation);
    }
    Ok([
        angle_between(t_ij, t_ik),
        angle_between(&-t_ij, t_jk),
        angle_between(t_ik, t_jk),
    ])
}

/// Smallest interior angle of the camera triangle, in radians.
pub fn collinearity_score(t_ij: &Vector3<f64>, t_ik: &Vector3<f64>, t_jk: &Vector3<f64>) -> Result<f64> {
    let a = triangle_angles(t_ij, t_ik, t_jk)?;
    Ok(a[0].min(a[1]).min(a[2]))
}

/// `|th_i + th_j + th_k - pi|`.
pub fn translation_consistency_score(theta_i: f64, theta_j: f64, theta_k: f64) -> f64 {
    (theta_i + theta_j + theta_k - PI).abs()
}

/// `|R_ij R_jk R_ki - I|_F`.
pub fn rotation_consistency_score(r_ij: &Rotation, r_jk: &Rotation, r_ki: &Rotation) -> f64 {
    (r_ij.matrix() * r_jk.matrix() * r_ki.matrix() - Matrix3::identity()).norm()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletScores {
    pub collinearity: f64,
    pub rotation: f64,
    pub translation: f64,
}

/// Scores a triplet from its three measured blocks. The relative rotations
/// are the decomposition choice closing the loop best; translation axes are
/// signed to make the triangle most consistent, so the result does not depend
/// on pairwise scales.
pub fn score_triplet(e_ij: &Matrix3<f64>, e_ik: &Matrix3<f64>, e_jk: &Matrix3<f64>) -> Result<TripletScores> {
    let d_ij = decompose_essential(&EssentialBlock::nearest(e_ij)?)?;
    let d_ik = decompose_essential(&EssentialBlock::nearest(e_ik)?)?;
    let d_jk = decompose_essential(&EssentialBlock::nearest(e_jk)?)?;
    let mut best: Option<(f64, usize)> = None;
    for k in 0..8 {
        let r = rotation_consistency_score(
            &d_ij[k & 1].rotation,
            &d_jk[k >> 1 & 1].rotation,
            &d_ik[k >> 2 & 1].rotation.transpose(),
        );
        if best.is_none_or(|(b, _)| r < b) {
            best = Some((r, k));
        }
    }
    let (rotation, k) = best.expect("eight combinations");
    let a = d_ij[k & 1].direction;
    let b = d_ik[k >> 2 & 1].direction;
    let c = d_ij[k & 1].rotation.matrix() * d_jk[k >> 1 & 1].direction;
    let mut scores: Option<(f64, f64)> = None;
    for s in 0..8 {
        let sign = |bit: usize| if s >> bit & 1 == 1 { -1.0 } else { 1.0 };
        let th = triangle_angles(&(a * sign(0)), &(b * sign(1)), &(c * sign(2)))?;
        let t = translation_consistency_score(th[0], th[1], th[2]);
        if scores.is_none_or(|(best, _)| t < best) {
            scores = Some((t, th[0].min(th[1]).min(th[2])));
        }
    }
    let (translation, collinearity) = scores.expect("eight sign choices");
    Ok(TripletScores {
        collinearity,
        rotation,
        translation,
    })
}

/// Union of `count` edge-disjoint maximum-weight spanning forests, drawn one
/// after another from the remaining edges. Ties in weight go to the
/// lexicographically smaller edge.
pub fn select_spanning_trees(g: &ViewingGraph, count: usize) -> Result<BTreeSet<(usize, usize)>> {
    let mut order: Vec<(usize, usize, f64)> = g.edges().map(|(i, j, e)| (i, j, e.weight)).collect();
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut chosen = BTreeSet::new();
    for round in 0..count {
        let mut uf = UnionFind::<usize>::new(g.n());
        let mut taken = 0;
        for &(i, j, _) in &order {
            if !chosen.contains(&(i, j)) && uf.union(i, j) {
                chosen.insert((i, j));
                taken += 1;
            }
        }
        if round == 0 && taken + 1 < g.n() {
            return Err(Error::DisconnectedGraph);
        }
    }
    Ok(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverConfig {
    /// Smallest interior angle accepted, radians.
    pub collinearity_min: f64,
    pub rotation_max: f64,
    /// Radians.
    pub translation_max: f64,
    pub tree_count: usize,
}

impl Default for CoverConfig {
    fn default() -> Self {
        CoverConfig {
            collinearity_min: 0.17,
            rotation_max: 1.1,
            translation_max: 1.0,
            tree_count: 2,
        }
    }
}

impl CoverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tree_count == 0 {
            return Err(Error::InvalidConfig("tree count must be positive".into()));
        }
        if [self.collinearity_min, self.rotation_max, self.translation_max]
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return Err(Error::InvalidConfig("cover thresholds must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn accepts(&self, s: &TripletScores) -> bool {
        s.collinearity >= self.collinearity_min
            && s.rotation <= self.rotation_max
            && s.translation <= self.translation_max
    }
}

/// A camera 3-clique; `views` is sorted ascending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub views: [usize; 3],
    pub scores: TripletScores,
}

impl Triplet {
    pub fn contains(&self, v: usize) -> bool {
        self.views.contains(&v)
    }

    /// The two views shared with `other`, if exactly two are shared.
    pub fn shared_pair(&self, other: &Triplet) -> Option<[usize; 2]> {
        let shared: Vec<usize> = self.views.iter().copied().filter(|&v| other.contains(v)).collect();
        (shared.len() == 2).then(|| [shared[0], shared[1]])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletCover {
    pub triplets: Vec<Triplet>,
    /// Index pairs `(a, b)`, `a < b`, of triplets sharing two cameras.
    pub triplet_edges: Vec<(usize, usize)>,
    pub covered_views: BTreeSet<usize>,
    /// Tree-anchored triangles before threshold filtering.
    pub initial_count: usize,
    /// Triplets passing the thresholds in the retained component, before pruning.
    pub filtered_count: usize,
    pub filtered_views: usize,
    /// Removed triplets' views in removal order.
    pub pruned: Vec<[usize; 3]>,
}

fn triplet_edges(triplets: &[Triplet]) -> Vec<(usize, usize)> {
    let mut by_pair: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (k, t) in triplets.iter().enumerate() {
        let [a, b, c] = t.views;
        for p in [(a, b), (a, c), (b, c)] {
            by_pair.entry(p).or_default().push(k);
        }
    }
    let mut edges = BTreeSet::new();
    for ks in by_pair.values() {
        for x in 0..ks.len() {
            for y in x + 1..ks.len() {
                edges.insert((ks[x].min(ks[y]), ks[x].max(ks[y])));
            }
        }
    }
    edges.into_iter().collect()
}

fn components(count: usize, edges: &[(usize, usize)], alive: &[bool]) -> (UnionFind<usize>, usize) {
    let mut uf = UnionFind::<usize>::new(count);
    let mut parts = alive.iter().filter(|&&a| a).count();
    for &(a, b) in edges {
        if alive[a] && alive[b] && uf.union(a, b) {
            parts -= 1;
        }
    }
    (uf, parts)
}

fn coverage(triplets: &[Triplet], alive: &[bool]) -> usize {
    triplets
        .iter()
        .zip(alive)
        .filter(|(_, &a)| a)
        .flat_map(|(t, _)| t.views)
        .collect::<BTreeSet<_>>()
        .len()
}

impl TripletCover {
    pub fn from_triplets(triplets: Vec<Triplet>) -> TripletCover {
        let triplet_edges = triplet_edges(&triplets);
        let covered_views = triplets.iter().flat_map(|t| t.views).collect();
        let count = triplets.len();
        TripletCover {
            triplets,
            triplet_edges,
            covered_views,
            initial_count: count,
            filtered_count: count,
            filtered_views: 0,
            pruned: Vec::new(),
        }
    }

    pub fn is_connected(&self) -> bool {
        let alive = vec![true; self.triplets.len()];
        components(self.triplets.len(), &self.triplet_edges, &alive).1 <= 1
    }

    /// Neighbours of triplet `k` in the triplet graph, ascending.
    pub fn neighbours(&self, k: usize) -> Vec<usize> {
        self.triplet_edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == k {
                    Some(b)
                } else if b == k {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }
}

/// Triangles of `g` with at least two edges in `trees`, ascending.
fn anchored_triangles(g: &ViewingGraph, trees: &BTreeSet<(usize, usize)>) -> Vec<[usize; 3]> {
    let mut adj = vec![BTreeSet::new(); g.n()];
    for (i, j, _) in g.edges() {
        adj[i].insert(j);
        adj[j].insert(i);
    }
    let mut out = Vec::new();
    for i in 0..g.n() {
        for &j in adj[i].range(i + 1..) {
            for &k in adj[j].range(j + 1..) {
                if adj[i].contains(&k) {
                    let in_tree = [(i, j), (i, k), (j, k)].iter().filter(|p| trees.contains(p)).count();
                    if in_tree >= 2 {
                        out.push([i, j, k]);
                    }
                }
            }
        }
    }
    out
}

/// Selects, filters and greedily prunes triplets into a connected cover.
pub fn build_cover(g: &ViewingGraph, cfg: &CoverConfig) -> Result<TripletCover> {
    cfg.validate()?;
    let trees = select_spanning_trees(g, cfg.tree_count)?;
    let candidates = anchored_triangles(g, &trees);
    let initial_count = candidates.len();
    let measured = |a: usize, b: usize| g.measurement(a, b).expect("triangle edge");
    let scored: Vec<Triplet> = candidates
        .par_iter()
        .filter_map(|&[i, j, k]| {
            score_triplet(&measured(i, j), &measured(i, k), &measured(j, k))
                .ok()
                .map(|scores| Triplet { views: [i, j, k], scores })
        })
        .collect();
    let kept: Vec<Triplet> = scored.into_iter().filter(|t| cfg.accepts(&t.scores)).collect();
    if kept.is_empty() {
        return Err(Error::EmptyCover {
            reason: format!("none of {initial_count} candidate triplets passed the thresholds"),
        });
    }

    let edges = triplet_edges(&kept);
    let alive = vec![true; kept.len()];
    let (mut uf, _) = components(kept.len(), &edges, &alive);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for k in 0..kept.len() {
        groups.entry(uf.find_mut(k)).or_default().push(k);
    }
    let largest = groups
        .values()
        .max_by(|a, b| {
            let va = coverage_of(&kept, a);
            let vb = coverage_of(&kept, b);
            va.cmp(&vb).then(b[0].cmp(&a[0]))
        })
        .expect("non-empty");
    let component: Vec<Triplet> = largest.iter().map(|&k| kept[k]).collect();

    let filtered_count = component.len();
    let edges = triplet_edges(&component);
    let mut alive = vec![true; component.len()];
    let views = coverage(&component, &alive);
    let mut order: Vec<usize> = (0..component.len()).collect();
    order.sort_by(|&a, &b| {
        component[b]
            .scores
            .rotation
            .total_cmp(&component[a].scores.rotation)
            .then(component[a].views.cmp(&component[b].views))
    });
    let mut pruned = Vec::new();
    for k in order {
        alive[k] = false;
        let connected = components(component.len(), &edges, &alive).1 <= 1;
        if connected && coverage(&component, &alive) == views {
            pruned.push(component[k].views);
        } else {
            alive[k] = true;
        }
    }
    let triplets: Vec<Triplet> = component
        .into_iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(t, _)| t)
        .collect();
    let mut cover = TripletCover::from_triplets(triplets);
    cover.initial_count = initial_count;
    cover.filtered_count = filtered_count;
    cover.filtered_views = views;
    cover.pruned = pruned;
    Ok(cover)
}

fn coverage_of(triplets: &[Triplet], members: &[usize]) -> usize {
    members
        .iter()
        .flat_map(|&k| triplets[k].views)
        .collect::<BTreeSet<_>>()
        .len()
}
