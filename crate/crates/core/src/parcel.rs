//! Spatially-constrained Ward agglomeration of voxels into parcels, parcel
//! averaging, two-group ANOVA feature selection and back-projection of parcel
//! weights onto voxels.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use crate::error::{Error, Result};
use crate::volume::{selection_count, AdjacencyGraph, MaskedVector};

/// One agglomeration step. Clusters `0..p` are voxels; the cluster created by
/// merge `m` has id `p + m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: u32,
    pub b: u32,
    /// Increase of the within-cluster sum of squares caused by the merge.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parcellation {
    mask_id: u64,
    n_parcels: usize,
    assignment: Vec<u32>,
    merge_tree: Vec<Merge>,
    sizes: Vec<usize>,
}

impl Parcellation {
    pub fn identity(mask_id: u64, p: usize) -> Self {
        Self::from_assignment(mask_id, (0..p as u32).collect(), p, Vec::new())
    }

    fn from_assignment(mask_id: u64, assignment: Vec<u32>, n_parcels: usize, merge_tree: Vec<Merge>) -> Self {
        let mut sizes = vec![0; n_parcels];
        for &a in &assignment {
            sizes[a as usize] += 1;
        }
        Self {
            mask_id,
            n_parcels,
            assignment,
            merge_tree,
            sizes,
        }
    }

    pub fn mask_id(&self) -> u64 {
        self.mask_id
    }

    pub fn n_parcels(&self) -> usize {
        self.n_parcels
    }

    pub fn p(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn merge_tree(&self) -> &[Merge] {
        &self.merge_tree
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_parcels];
        for (v, &a) in self.assignment.iter().enumerate() {
            out[a as usize].push(v);
        }
        out
    }

    /// `PARC1\n`, u64 mask id, u32 p, u32 n_parcels, u32 n_merges, then p u32
    /// assignments and (u32 a, u32 b, f64 cost) per merge; little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(26 + 4 * self.p() + 16 * self.merge_tree.len());
        out.extend_from_slice(b"PARC1\n");
        out.extend_from_slice(&self.mask_id.to_le_bytes());
        out.extend_from_slice(&(self.p() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_parcels as u32).to_le_bytes());
        out.extend_from_slice(&(self.merge_tree.len() as u32).to_le_bytes());
        for a in &self.assignment {
            out.extend_from_slice(&a.to_le_bytes());
        }
        for m in &self.merge_tree {
            out.extend_from_slice(&m.a.to_le_bytes());
            out.extend_from_slice(&m.b.to_le_bytes());
            out.extend_from_slice(&m.cost.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("parcellation", d.to_owned());
        if bytes.len() < 26 || &bytes[..6] != b"PARC1\n" {
            return Err(bad("bad header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let mask_id = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let p = u32_at(14) as usize;
        let n_parcels = u32_at(18) as usize;
        let n_merges = u32_at(22) as usize;
        if bytes.len() != 26 + 4 * p + 16 * n_merges {
            return Err(bad("length does not match header"));
        }
        let assignment: Vec<u32> = (0..p).map(|v| u32_at(26 + 4 * v)).collect();
        if assignment.iter().any(|&a| a as usize >= n_parcels) {
            return Err(bad("assignment out of range"));
        }
        let base = 26 + 4 * p;
        let merge_tree = (0..n_merges)
            .map(|m| {
                let o = base + 16 * m;
                Merge {
                    a: u32_at(o),
                    b: u32_at(o + 4),
                    cost: f64::from_le_bytes(bytes[o + 8..o + 16].try_into().unwrap()),
                }
            })
            .collect();
        let parc = Self::from_assignment(mask_id, assignment, n_parcels, merge_tree);
        if parc.sizes.contains(&0) {
            return Err(bad("empty parcel"));
        }
        Ok(parc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    cost: f64,
    a: u32,
    b: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // reversed so BinaryHeap pops the cheapest, then the lowest id pair
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then(other.a.cmp(&self.a))
            .then(other.b.cmp(&self.b))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Result of a Ward fit, including whether merging stopped early because the
/// graph has more connected components than requested parcels.
#[derive(Debug, Clone)]
pub struct WardOutcome {
    pub parcellation: Parcellation,
    pub stopped_early: bool,
}

/// Ward agglomeration restricted to graph-adjacent clusters.
///
/// `train_maps` is `n x p` row-major; `rows` selects the training maps
/// (all rows when `None`). Each step merges the adjacent pair with the
/// smallest increase in within-cluster sum of squares
/// `|A||B| / (|A|+|B|) * |mean_A - mean_B|^2`; ties go to the lowest
/// `(a, b)` id pair.
pub fn ward_parcellate(
    train_maps: &[f64],
    p: usize,
    rows: Option<&[usize]>,
    adjacency: &AdjacencyGraph,
    n_parcels: usize,
    mask_id: u64,
) -> Result<WardOutcome> {
    if adjacency.n_nodes() != p {
        return Err(Error::InvalidArgument(format!(
            "adjacency has {} nodes for {p} voxels",
            adjacency.n_nodes()
        )));
    }
    if n_parcels == 0 || n_parcels > p {
        return Err(Error::InvalidArgument(format!("n_parcels must be in 1..={p}, got {n_parcels}")));
    }
    let n_total = if p == 0 { 0 } else { train_maps.len() / p };
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..n_total).collect();
            &all
        }
    };

    // voxel-major centroids, indexed by cluster id
    let mut centroid: Vec<Option<Vec<f64>>> = (0..p)
        .map(|v| Some(rows.iter().map(|&r| train_maps[r * p + v]).collect()))
        .collect();
    centroid.resize(2 * p, None);
    let mut size = vec![1usize; p];
    size.resize(2 * p, 0);
    let mut members: Vec<Vec<u32>> = (0..p as u32).map(|v| vec![v]).collect();
    members.resize(2 * p, Vec::new());
    let mut neighbours: Vec<BTreeSet<u32>> = (0..p)
        .map(|v| adjacency.neighbors(v).iter().copied().collect())
        .collect();
    neighbours.resize(2 * p, BTreeSet::new());
    let mut alive = vec![true; p];
    alive.resize(2 * p, false);

    let cost = |ca: &[f64], na: usize, cb: &[f64], nb: usize| -> f64 {
        let d2: f64 = ca.iter().zip(cb).map(|(x, y)| (x - y) * (x - y)).sum();
        (na * nb) as f64 / (na + nb) as f64 * d2
    };

    let mut heap = BinaryHeap::with_capacity(adjacency.edges().len());
    for &(a, b) in adjacency.edges() {
        let c = cost(
            centroid[a as usize].as_ref().unwrap(),
            1,
            centroid[b as usize].as_ref().unwrap(),
            1,
        );
        heap.push(Candidate { cost: c, a, b });
    }

    let mut merges = Vec::new();
    let mut n_clusters = p;
    while n_clusters > n_parcels {
        let Some(best) = heap.pop() else { break };
        let (a, b) = (best.a as usize, best.b as usize);
        if !alive[a] || !alive[b] {
            continue;
        }
        let new = p + merges.len();
        merges.push(Merge {
            a: best.a,
            b: best.b,
            cost: best.cost,
        });
        let (na, nb) = (size[a], size[b]);
        let mut ca = centroid[a].take().unwrap();
        let cb = centroid[b].take().unwrap();
        let (wa, wb) = (na as f64 / (na + nb) as f64, nb as f64 / (na + nb) as f64);
        for (x, y) in ca.iter_mut().zip(&cb) {
            *x = wa * *x + wb * y;
        }
        centroid[new] = Some(ca);
        size[new] = na + nb;
        alive[a] = false;
        alive[b] = false;
        alive[new] = true;
        let mut m = std::mem::take(&mut members[a]);
        m.extend(std::mem::take(&mut members[b]));
        members[new] = m;

        let mut adj: BTreeSet<u32> = std::mem::take(&mut neighbours[a]);
        adj.extend(std::mem::take(&mut neighbours[b]));
        adj.remove(&best.a);
        adj.remove(&best.b);
        for &c in &adj {
            let c = c as usize;
            neighbours[c].remove(&best.a);
            neighbours[c].remove(&best.b);
            neighbours[c].insert(new as u32);
            let w = cost(
                centroid[c].as_ref().unwrap(),
                size[c],
                centroid[new].as_ref().unwrap(),
                size[new],
            );
            heap.push(Candidate {
                cost: w,
                a: c as u32,
                b: new as u32,
            });
        }
        neighbours[new] = adj;
        n_clusters -= 1;
    }
    let stopped_early = n_clusters > n_parcels;
    if stopped_early {
        log::warn!(
            "ward: graph has {n_clusters} connected components, more than the {n_parcels} requested parcels"
        );
    }

    // number parcels by their lowest voxel index
    let mut roots: Vec<(u32, usize)> = (0..2 * p)
        .filter(|&c| alive[c])
        .map(|c| (*members[c].iter().min().unwrap(), c))
        .collect();
    roots.sort_unstable();
    let mut assignment = vec![0u32; p];
    for (parcel, &(_, c)) in roots.iter().enumerate() {
        for &v in &members[c] {
            assignment[v as usize] = parcel as u32;
        }
    }
    Ok(WardOutcome {
        parcellation: Parcellation::from_assignment(mask_id, assignment, roots.len(), merges),
        stopped_early,
    })
}

/// Parcel means of the selected rows of an `n x p` matrix; returns
/// `rows.len() x n_parcels`, row-major.
pub fn reduce(maps: &[f64], p: usize, rows: &[usize], parcellation: &Parcellation) -> Result<Vec<f64>> {
    if p != parcellation.p() {
        return Err(Error::InvalidArgument(format!(
            "parcellation covers {} voxels, maps have {p}",
            parcellation.p()
        )));
    }
    let q = parcellation.n_parcels();
    let inv: Vec<f64> = parcellation.sizes().iter().map(|&s| 1.0 / s as f64).collect();
    let mut out = vec![0.0; rows.len() * q];
    for (o, &r) in rows.iter().enumerate() {
        let dst = &mut out[o * q..(o + 1) * q];
        for (&a, &x) in parcellation.assignment().iter().zip(&maps[r * p..(r + 1) * p]) {
            dst[a as usize] += x;
        }
        for (d, s) in dst.iter_mut().zip(&inv) {
            *d *= s;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSelection {
    pub f_scores: Vec<f64>,
    /// Selected feature indices, ascending.
    pub selected: Vec<usize>,
}

/// Per-feature one-way F statistic between the two label groups.
/// `features` is row-major with `q` columns; `rows` picks the samples and
/// `labels[i]` is the class of `rows[i]`.
pub fn f_scores(features: &[f64], q: usize, rows: &[usize], labels: &[bool]) -> Result<Vec<f64>> {
    if rows.len() != labels.len() {
        return Err(Error::LengthMismatch {
            entity: "anova labels".into(),
            expected: rows.len(),
            actual: labels.len(),
        });
    }
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::SingleClass {
            context: "anova selection".into(),
        });
    }
    let mut sum = [vec![0.0; q], vec![0.0; q]];
    for (&r, &l) in rows.iter().zip(labels) {
        let s = &mut sum[usize::from(l)];
        for (acc, &x) in s.iter_mut().zip(&features[r * q..(r + 1) * q]) {
            *acc += x;
        }
    }
    let mean0: Vec<f64> = sum[0].iter().map(|s| s / n0 as f64).collect();
    let mean1: Vec<f64> = sum[1].iter().map(|s| s / n1 as f64).collect();
    let mut ssw = vec![0.0; q];
    for (&r, &l) in rows.iter().zip(labels) {
        let m = if l { &mean1 } else { &mean0 };
        for ((acc, &x), &mu) in ssw.iter_mut().zip(&features[r * q..(r + 1) * q]).zip(m) {
            let d = x - mu;
            *acc += d * d;
        }
    }
    let n = (n0 + n1) as f64;
    Ok((0..q)
        .map(|j| {
            let grand = (n0 as f64 * mean0[j] + n1 as f64 * mean1[j]) / n;
            let ssb = n0 as f64 * (mean0[j] - grand).powi(2) + n1 as f64 * (mean1[j] - grand).powi(2);
            let msw = ssw[j] / (n - 2.0);
            if ssb == 0.0 {
                0.0
            } else if msw == 0.0 {
                f64::INFINITY
            } else {
                ssb / msw
            }
        })
        .collect())
}

/// Keep the `ceil(fraction * q)` features with the highest F (ties to the
/// lower index).
pub fn anova_select(features: &[f64], q: usize, rows: &[usize], labels: &[bool], fraction: f64) -> Result<FeatureSelection> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("selection fraction must be in (0, 1], got {fraction}")));
    }
    let f = f_scores(features, q, rows, labels)?;
    let count = selection_count(q, fraction);
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| f[b].total_cmp(&f[a]).then(a.cmp(&b)));
    let mut selected = order[..count].to_vec();
    selected.sort_unstable();
    Ok(FeatureSelection { f_scores: f, selected })
}

/// Paint each selected parcel's weight onto its voxels; other voxels are 0.
pub fn backproject(weights: &[f64], selection: &FeatureSelection, parcellation: &Parcellation) -> Result<MaskedVector> {
    if weights.len() != selection.selected.len() {
        return Err(Error::LengthMismatch {
            entity: "back-projected weights".into(),
            expected: selection.selected.len(),
            actual: weights.len(),
        });
    }
    let mut per_parcel = vec![0.0; parcellation.n_parcels()];
    for (&w, &j) in weights.iter().zip(&selection.selected) {
        if j >= per_parcel.len() {
            return Err(Error::InvalidArgument(format!("selected parcel {j} out of range")));
        }
        per_parcel[j] = w;
    }
    let data = parcellation.assignment().iter().map(|&a| per_parcel[a as usize]).collect();
    Ok(MaskedVector::from_parts(parcellation.mask_id(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{build_adjacency, BrainMask, VolumeGrid};
    use rand::{Rng, SeedableRng};

    fn line_graph(p: usize) -> AdjacencyGraph {
        AdjacencyGraph::from_edges(p, (0..p - 1).map(|i| (i, i + 1))).unwrap()
    }

    /// rows of `cols` are voxels; returns n x p row-major
    fn voxel_major(cols: &[&[f64]]) -> Vec<f64> {
        let p = cols.len();
        let n = cols[0].len();
        let mut out = vec![0.0; n * p];
        for (v, col) in cols.iter().enumerate() {
            for (i, &x) in col.iter().enumerate() {
                out[i * p + v] = x;
            }
        }
        out
    }

    #[test]
    fn identical_neighbours_merge_first() {
        let data = voxel_major(&[&[0.0, 5.0], &[1.0, 2.0], &[1.0, 2.0], &[4.0, -1.0]]);
        let out = ward_parcellate(&data, 4, None, &line_graph(4), 3, 0).unwrap();
        let first = out.parcellation.merge_tree()[0];
        assert_eq!((first.a, first.b), (1, 2));
        assert_eq!(first.cost, 0.0);
        assert_eq!(out.parcellation.assignment(), &[0, 1, 1, 2]);
    }

    #[test]
    fn identity_when_no_merge_requested() {
        let data = voxel_major(&[&[0.0], &[1.0], &[3.0]]);
        let out = ward_parcellate(&data, 3, None, &line_graph(3), 3, 0).unwrap();
        assert!(out.parcellation.merge_tree().is_empty());
        assert_eq!(out.parcellation.assignment(), &[0, 1, 2]);
        assert!(ward_parcellate(&data, 3, None, &line_graph(3), 4, 0).is_err());
    }

    #[test]
    fn disconnected_graph_stops_early() {
        let g = AdjacencyGraph::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        let data = voxel_major(&[&[0.0], &[1.0], &[3.0], &[7.0]]);
        let out = ward_parcellate(&data, 4, None, &g, 1, 0).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.parcellation.n_parcels(), 2);
    }

    fn sse(data: &[f64], p: usize, voxels: &[usize]) -> f64 {
        let n = data.len() / p;
        let mut total = 0.0;
        for i in 0..n {
            let mean = voxels.iter().map(|&v| data[i * p + v]).sum::<f64>() / voxels.len() as f64;
            total += voxels.iter().map(|&v| (data[i * p + v] - mean).powi(2)).sum::<f64>();
        }
        total
    }

    #[test]
    fn merge_costs_are_exact_variance_increase() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mask = BrainMask::full(VolumeGrid::new([4, 2, 2], [1.0; 3]).unwrap());
        let p = mask.p();
        let data: Vec<f64> = (0..5 * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = ward_parcellate(&data, p, None, &build_adjacency(&mask), 1, 0).unwrap();
        let mut members: Vec<Vec<usize>> = (0..p).map(|v| vec![v]).collect();
        for m in out.parcellation.merge_tree() {
            let (a, b) = (members[m.a as usize].clone(), members[m.b as usize].clone());
            let mut u = a.clone();
            u.extend(&b);
            let direct = sse(&data, p, &u) - sse(&data, p, &a) - sse(&data, p, &b);
            assert!((direct - m.cost).abs() <= 1e-10 * direct.abs().max(1.0));
            members.push(u);
        }
    }

    #[test]
    fn parcels_are_connected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mask = BrainMask::ellipsoid(VolumeGrid::new([7, 6, 5], [1.0; 3]).unwrap(), [3.3, 2.9, 2.4]).unwrap();
        let p = mask.p();
        let g = build_adjacency(&mask);
        let data: Vec<f64> = (0..6 * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let parc = ward_parcellate(&data, p, Some(&[0, 2, 4, 5]), &g, p / 4, mask.id()).unwrap().parcellation;
        for members in parc.members() {
            assert!(!members.is_empty());
            let set: BTreeSet<usize> = members.iter().copied().collect();
            let mut seen = BTreeSet::from([members[0]]);
            let mut stack = vec![members[0]];
            while let Some(u) = stack.pop() {
                for &v in g.neighbors(u) {
                    let v = v as usize;
                    if set.contains(&v) && seen.insert(v) {
                        stack.push(v);
                    }
                }
            }
            assert_eq!(seen, set);
        }
        let back = Parcellation::from_bytes(&parc.to_bytes()).unwrap();
        assert_eq!(back, parc);
    }

    #[test]
    fn reduce_examples() {
        let maps = [1.0, 2.0, 6.0, 4.0, 7.0, 7.0, 7.0, 7.0];
        let id = Parcellation::identity(0, 4);
        assert_eq!(reduce(&maps, 4, &[0, 1], &id).unwrap(), maps.to_vec());
        let parc = Parcellation::from_assignment(0, vec![0, 0, 0, 1], 2, vec![]);
        let r = reduce(&maps, 4, &[0, 1], &parc).unwrap();
        assert_eq!(r, vec![3.0, 4.0, 7.0, 7.0]);
        assert!(reduce(&maps, 2, &[0], &parc).is_err());
    }

    #[test]
    fn anova_examples() {
        // between SS 54 on 1 df, within SS 4 on 4 df
        let feats = [1.0, 2.0, 3.0, 7.0, 8.0, 9.0];
        let rows: Vec<usize> = (0..6).collect();
        let labels = [false, false, false, true, true, true];
        let f = f_scores(&feats, 1, &rows, &labels).unwrap();
        assert!((f[0] - 54.0).abs() < 1e-12);

        let constant = [5.0; 6];
        assert_eq!(f_scores(&constant, 1, &rows, &labels).unwrap()[0], 0.0);
        assert!(matches!(f_scores(&feats, 1, &rows, &[true; 6]), Err(Error::SingleClass { .. })));

        let q = 15_000;
        let rows: Vec<usize> = (0..4).collect();
        let feats: Vec<f64> = (0..4 * q).map(|i| ((i * 7919) % 1013) as f64).collect();
        let sel = anova_select(&feats, q, &rows, &[true, false, true, false], 0.3).unwrap();
        assert_eq!(sel.selected.len(), 4500);
    }

    #[test]
    fn anova_affine_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let rows: Vec<usize> = (0..n).collect();
        let f = f_scores(&x, 1, &rows, &labels).unwrap()[0];
        let y: Vec<f64> = x.iter().map(|v| -3.7 * v + 12.5).collect();
        let g = f_scores(&y, 1, &rows, &labels).unwrap()[0];
        assert!((f - g).abs() <= 1e-10 * f.max(1.0));
    }

    #[test]
    fn backproject_examples() {
        let parc = Parcellation::from_assignment(0, vec![0, 1, 1, 2, 0], 3, vec![]);
        let sel = FeatureSelection {
            f_scores: vec![0.0; 3],
            selected: vec![1],
        };
        let m = backproject(&[1.0], &sel, &parc).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0, 0.0]);
        let sel2 = FeatureSelection {
            f_scores: vec![0.0; 3],
            selected: vec![0, 2],
        };
        let z = backproject(&[0.0, 0.0], &sel2, &parc).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(backproject(&[1.0], &sel2, &parc).is_err());

        // reduce(backproject(w)) == w on the selected parcels
        let w = [2.5, -1.25];
        let bp = backproject(&w, &sel2, &parc).unwrap();
        let r = reduce(bp.data(), 5, &[0], &parc).unwrap();
        assert_eq!(vec![r[0], r[2]], w.to_vec());
    }
}
