//! Voxel-grid geometry, brain masks, spatial adjacency, masked Gaussian
//! smoothing and top-fraction thresholding.

use crate::error::{Error, Result};

pub mod bmap;

/// Regular 3-D voxel grid. Cells are addressed in C order: `z` varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: [usize; 3],
    voxel_size: [f64; 3],
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "grid dims must be >= 1, got {dims:?}"
            )));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "voxel sizes must be positive, got {voxel_size:?}"
            )));
        }
        Ok(Self { dims, voxel_size })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn n_cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn cell_index(&self, [x, y, z]: [usize; 3]) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn cell_coords(&self, cell: usize) -> [usize; 3] {
        let z = cell % self.dims[2];
        let rest = cell / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], z]
    }
}

/// In-brain support of a grid. In-mask voxels are numbered `0..p` in C order.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainMask {
    grid: VolumeGrid,
    in_mask: Vec<bool>,
    cells: Vec<usize>,
    voxel_of_cell: Vec<u32>,
}

const OUTSIDE: u32 = u32::MAX;

impl BrainMask {
    pub fn new(grid: VolumeGrid, in_mask: Vec<bool>) -> Result<Self> {
        if in_mask.len() != grid.n_cells() {
            return Err(Error::LengthMismatch {
                entity: "mask".into(),
                expected: grid.n_cells(),
                actual: in_mask.len(),
            });
        }
        let mut cells = Vec::new();
        let mut voxel_of_cell = vec![OUTSIDE; in_mask.len()];
        for (cell, &inside) in in_mask.iter().enumerate() {
            if inside {
                voxel_of_cell[cell] = cells.len() as u32;
                cells.push(cell);
            }
        }
        if cells.is_empty() {
            return Err(Error::InvalidArgument("mask has no in-brain voxel".into()));
        }
        Ok(Self {
            grid,
            in_mask,
            cells,
            voxel_of_cell,
        })
    }

    pub fn full(grid: VolumeGrid) -> Self {
        let n = grid.n_cells();
        Self::new(grid, vec![true; n]).expect("non-empty grid")
    }

    /// Ellipsoid centred in the grid with the given semi-axes (in voxels).
    pub fn ellipsoid(grid: VolumeGrid, semi_axes: [f64; 3]) -> Result<Self> {
        let [nx, ny, nz] = grid.dims();
        let centre = [
            (nx as f64 - 1.0) / 2.0,
            (ny as f64 - 1.0) / 2.0,
            (nz as f64 - 1.0) / 2.0,
        ];
        let in_mask = (0..grid.n_cells())
            .map(|cell| {
                let c = grid.cell_coords(cell);
                (0..3)
                    .map(|a| ((c[a] as f64 - centre[a]) / semi_axes[a]).powi(2))
                    .sum::<f64>()
                    <= 1.0
            })
            .collect();
        Self::new(grid, in_mask)
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.grid
    }

    /// Number of in-mask voxels.
    pub fn p(&self) -> usize {
        self.cells.len()
    }

    pub fn in_mask(&self) -> &[bool] {
        &self.in_mask
    }

    pub fn cell_of(&self, voxel: usize) -> usize {
        self.cells[voxel]
    }

    pub fn voxel_of(&self, cell: usize) -> Option<usize> {
        match self.voxel_of_cell[cell] {
            OUTSIDE => None,
            v => Some(v as usize),
        }
    }

    pub fn coords_of(&self, voxel: usize) -> [usize; 3] {
        self.grid.cell_coords(self.cells[voxel])
    }

    /// Content fingerprint used to check that vectors and parcellations refer
    /// to the same mask.
    pub fn id(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for b in v.to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
            }
        };
        for d in self.grid.dims {
            feed(d as u64);
        }
        for &c in &self.cells {
            feed(c as u64);
        }
        h
    }

    /// Scatter a masked vector into a full grid volume, filling outside cells.
    pub fn unmask(&self, data: &[f64], fill: f64) -> Vec<f64> {
        let mut out = vec![fill; self.grid.n_cells()];
        for (&cell, &v) in self.cells.iter().zip(data) {
            out[cell] = v;
        }
        out
    }

    pub fn mask_volume(&self, volume: &[f64]) -> Vec<f64> {
        self.cells.iter().map(|&c| volume[c]).collect()
    }
}

/// Activation values over the in-mask voxels of one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedVector {
    mask_id: u64,
    data: Vec<f64>,
}

impl MaskedVector {
    pub fn new(mask: &BrainMask, data: Vec<f64>) -> Result<Self> {
        if data.len() != mask.p() {
            return Err(Error::LengthMismatch {
                entity: "masked vector".into(),
                expected: mask.p(),
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("masked vector at voxel {i}")));
        }
        Ok(Self {
            mask_id: mask.id(),
            data,
        })
    }

    pub(crate) fn from_parts(mask_id: u64, data: Vec<f64>) -> Self {
        Self { mask_id, data }
    }

    pub fn zeros(mask: &BrainMask) -> Self {
        Self {
            mask_id: mask.id(),
            data: vec![0.0; mask.p()],
        }
    }

    pub fn mask_id(&self) -> u64 {
        self.mask_id
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Face-neighbour (6-connectivity) graph over in-mask voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    n_nodes: usize,
    edges: Vec<(u32, u32)>,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
}

impl AdjacencyGraph {
    /// Builds a graph from an explicit edge list; pairs are normalised to
    /// `(low, high)`, deduplicated and sorted.
    pub fn from_edges(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut list: Vec<(u32, u32)> = Vec::new();
        for (a, b) in edges {
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a}, {b}) outside 0..{n_nodes}"
                )));
            }
            if a == b {
                return Err(Error::InvalidArgument(format!("self edge on node {a}")));
            }
            list.push((a.min(b) as u32, a.max(b) as u32));
        }
        list.sort_unstable();
        list.dedup();
        let mut degree = vec![0usize; n_nodes + 1];
        for &(a, b) in &list {
            degree[a as usize + 1] += 1;
            degree[b as usize + 1] += 1;
        }
        for i in 0..n_nodes {
            degree[i + 1] += degree[i];
        }
        let offsets = degree;
        let mut fill = offsets.clone();
        let mut neighbors = vec![0u32; 2 * list.len()];
        for &(a, b) in &list {
            neighbors[fill[a as usize]] = b;
            fill[a as usize] += 1;
            neighbors[fill[b as usize]] = a;
            fill[b as usize] += 1;
        }
        for i in 0..n_nodes {
            neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Ok(Self {
            n_nodes,
            edges: list,
            offsets,
            neighbors,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[u32] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    /// Connected-component label per node, components numbered by their
    /// lowest node.
    pub fn components(&self) -> Vec<usize> {
        let mut label = vec![usize::MAX; self.n_nodes];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..self.n_nodes {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = next;
            stack.push(start);
            while let Some(u) = stack.pop() {
                for &v in self.neighbors(u) {
                    let v = v as usize;
                    if label[v] == usize::MAX {
                        label[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn n_components(&self) -> usize {
        self.components().into_iter().max().map_or(0, |m| m + 1)
    }
}

/// Edges between in-mask voxels that differ by one step along exactly one axis.
pub fn build_adjacency(mask: &BrainMask) -> AdjacencyGraph {
    let grid = mask.grid();
    let dims = grid.dims();
    let mut edges = Vec::with_capacity(3 * mask.p());
    for voxel in 0..mask.p() {
        let c = mask.coords_of(voxel);
        for axis in 0..3 {
            if c[axis] + 1 < dims[axis] {
                let mut n = c;
                n[axis] += 1;
                if let Some(other) = mask.voxel_of(grid.cell_index(n)) {
                    edges.push((voxel, other));
                }
            }
        }
    }
    AdjacencyGraph::from_edges(mask.p(), edges).expect("grid neighbours are valid edges")
}

/// Isotropic Gaussian smoothing restricted to a mask. The kernel is truncated
/// at 4 sigma along each axis and renormalised over the in-mask support, so
/// constant maps are preserved up to rounding.
#[derive(Debug, Clone)]
pub struct Smoother {
    mask: BrainMask,
    sigma: f64,
    taps: Vec<f64>,
    denominator: Vec<f64>,
}

impl Smoother {
    pub fn new(mask: &BrainMask, sigma_voxels: f64) -> Result<Self> {
        if !(sigma_voxels >= 0.0) || !sigma_voxels.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "smoothing sigma must be >= 0, got {sigma_voxels}"
            )));
        }
        let taps = gaussian_taps(sigma_voxels);
        let ones = vec![1.0; mask.p()];
        let denominator = if sigma_voxels == 0.0 {
            ones
        } else {
            let vol = convolve_separable(mask, &ones, &taps);
            mask.mask_volume(&vol)
        };
        Ok(Self {
            mask: mask.clone(),
            sigma: sigma_voxels,
            taps,
            denominator,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn apply(&self, data: &[f64]) -> Vec<f64> {
        assert_eq!(data.len(), self.mask.p(), "smoothing input length");
        if self.sigma == 0.0 {
            return data.to_vec();
        }
        let vol = convolve_separable(&self.mask, data, &self.taps);
        self.mask
            .mask_volume(&vol)
            .into_iter()
            .zip(&self.denominator)
            .map(|(num, den)| num / den)
            .collect()
    }

    /// Per-voxel standard deviation of the smoothed output when the input is
    /// unit-variance white noise.
    pub fn white_noise_sd(&self) -> Vec<f64> {
        if self.sigma == 0.0 {
            return vec![1.0; self.mask.p()];
        }
        let squared: Vec<f64> = self.taps.iter().map(|t| t * t).collect();
        let ones = vec![1.0; self.mask.p()];
        let vol = convolve_separable(&self.mask, &ones, &squared);
        self.mask
            .mask_volume(&vol)
            .into_iter()
            .zip(&self.denominator)
            .map(|(sq, den)| sq.sqrt() / den)
            .collect()
    }
}

pub fn smooth(vec: &MaskedVector, mask: &BrainMask, sigma_voxels: f64) -> Result<MaskedVector> {
    if vec.mask_id() != mask.id() {
        return Err(Error::InvalidArgument("vector does not belong to mask".into()));
    }
    let smoother = Smoother::new(mask, sigma_voxels)?;
    Ok(MaskedVector {
        mask_id: vec.mask_id,
        data: smoother.apply(vec.data()),
    })
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).floor() as i64;
    (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Zero-padded separable convolution of a masked vector on the full grid.
fn convolve_separable(mask: &BrainMask, data: &[f64], taps: &[f64]) -> Vec<f64> {
    let grid = mask.grid();
    let dims = grid.dims();
    let mut vol = mask.unmask(data, 0.0);
    let mut scratch = vec![0.0; vol.len()];
    let radius = (taps.len() / 2) as isize;
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let len = dims[axis] as isize;
        let stride = strides[axis];
        for cell in 0..vol.len() {
            let pos = grid.cell_coords(cell)[axis] as isize;
            let lo = (-radius).max(-pos);
            let hi = radius.min(len - 1 - pos);
            let mut acc = 0.0;
            for off in lo..=hi {
                let src = (cell as isize + off * stride as isize) as usize;
                acc += taps[(off + radius) as usize] * vol[src];
            }
            scratch[cell] = acc;
        }
        std::mem::swap(&mut vol, &mut scratch);
    }
    vol
}

/// Boolean selection of the `ceil(fraction * p)` largest values; ties go to
/// the lower voxel index.
pub fn top_fraction_mask(values: &[f64], fraction: f64) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let count = selection_count(values.len(), fraction);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut out = vec![false; values.len()];
    for &i in &order[..count] {
        out[i] = true;
    }
    Ok(out)
}

/// `ceil(fraction * n)`, robust to the representation error of decimal
/// fractions such as 0.05.
pub fn selection_count(n: usize, fraction: f64) -> usize {
    let raw = fraction * n as f64;
    let count = (raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize;
    count.min(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(dims: [usize; 3]) -> VolumeGrid {
        VolumeGrid::new(dims, [1.0; 3]).unwrap()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(VolumeGrid::new([0, 1, 1], [1.0; 3]).is_err());
        assert!(VolumeGrid::new([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
        assert!(BrainMask::new(grid([2, 1, 1]), vec![false, false]).is_err());
    }

    #[test]
    fn adjacency_small_cases() {
        let g = build_adjacency(&BrainMask::full(grid([2, 1, 1])));
        assert_eq!(g.edges(), &[(0, 1)]);

        let g = build_adjacency(&BrainMask::full(grid([3, 3, 1])));
        assert_eq!(g.edges().len(), 12);

        let gap = BrainMask::new(grid([3, 1, 1]), vec![true, false, true]).unwrap();
        assert!(build_adjacency(&gap).edges().is_empty());
        assert_eq!(build_adjacency(&gap).n_components(), 2);
    }

    #[test]
    fn adjacency_matches_enumeration() {
        // brute force over all voxel pairs at city-block distance one
        let mask = BrainMask::ellipsoid(grid([5, 4, 3]), [2.2, 1.8, 1.4]).unwrap();
        let mut expected = Vec::new();
        for a in 0..mask.p() {
            for b in a + 1..mask.p() {
                let (ca, cb) = (mask.coords_of(a), mask.coords_of(b));
                let l1: usize = (0..3).map(|k| ca[k].abs_diff(cb[k])).sum();
                if l1 == 1 {
                    expected.push((a as u32, b as u32));
                }
            }
        }
        assert_eq!(build_adjacency(&mask).edges(), expected.as_slice());
    }

    #[test]
    fn adjacency_edge_count_formula() {
        for nx in 1..=4 {
            for ny in 1..=4 {
                for nz in 1..=4 {
                    let g = build_adjacency(&BrainMask::full(grid([nx, ny, nz])));
                    let expected =
                        (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1);
                    assert_eq!(g.edges().len(), expected, "{nx}x{ny}x{nz}");
                }
            }
        }
    }

    #[test]
    fn smoothing_preserves_constants_and_identity() {
        let mask = BrainMask::ellipsoid(grid([10, 9, 8]), [4.5, 4.0, 3.5]).unwrap();
        let c = MaskedVector::new(&mask, vec![3.25; mask.p()]).unwrap();
        let s = smooth(&c, &mask, 2.0).unwrap();
        for v in s.data() {
            assert!((v - 3.25).abs() <= 1e-6 * 3.25);
        }
        let x: Vec<f64> = (0..mask.p()).map(|i| (i as f64 * 0.37).sin()).collect();
        let xv = MaskedVector::new(&mask, x.clone()).unwrap();
        assert_eq!(smooth(&xv, &mask, 0.0).unwrap().data(), x.as_slice());
        assert!(Smoother::new(&mask, -1.0).is_err());
    }

    #[test]
    fn impulse_response_matches_direct_kernel() {
        // direct 3-D evaluation of the truncated kernel, independent of the
        // separable implementation
        let mask = BrainMask::full(grid([13, 13, 13]));
        let sigma = 1.0;
        let centre = mask.voxel_of(mask.grid().cell_index([6, 6, 6])).unwrap();
        let mut x = vec![0.0; mask.p()];
        x[centre] = 1.0;
        let out = Smoother::new(&mask, sigma).unwrap().apply(&x);
        let mut total = 0.0;
        for dx in -4i32..=4 {
            for dy in -4i32..=4 {
                for dz in -4i32..=4 {
                    let r2 = (dx * dx + dy * dy + dz * dz) as f64;
                    total += (-r2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        let expected = 1.0 / total;
        assert!((out[centre] - expected).abs() < 1e-12, "{} vs {expected}", out[centre]);
    }

    #[test]
    fn white_noise_sd_matches_weights() {
        let mask = BrainMask::ellipsoid(grid([8, 8, 6]), [3.8, 3.8, 2.8]).unwrap();
        let sm = Smoother::new(&mask, 1.2).unwrap();
        let sd = sm.white_noise_sd();
        // column j of the smoothing operator is the response to an impulse at j;
        // row i's squared norm is the variance at i
        let p = mask.p();
        let mut var = vec![0.0; p];
        for j in 0..p {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            for (i, w) in sm.apply(&e).into_iter().enumerate() {
                var[i] += w * w;
            }
        }
        for i in 0..p {
            assert!((sd[i] - var[i].sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn top_fraction_examples() {
        let vals: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
        let m = top_fraction_mask(&vals, 0.05).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 5);

        let m = top_fraction_mask(&[1.0; 10], 0.3).unwrap();
        let idx: Vec<usize> = (0..10).filter(|&i| m[i]).collect();
        assert_eq!(idx, vec![0, 1, 2]);

        assert!(top_fraction_mask(&vals, 1.0).unwrap().iter().all(|&b| b));
        assert!(top_fraction_mask(&vals, 0.0).is_err());
        assert!(top_fraction_mask(&vals, 1.5).is_err());
    }

    fn test_mask() -> BrainMask {
        BrainMask::ellipsoid(grid([9, 8, 7]), [4.2, 3.9, 3.3]).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn smoothing_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mask = test_mask();
            let sm = Smoother::new(&mask, 1.5).unwrap();
            let p = mask.p();
            let u: Vec<f64> = (0..p).map(|i| ((i as u64 * 7919 + seed) % 101) as f64 - 50.0).collect();
            let v: Vec<f64> = (0..p).map(|i| ((i as u64 * 104_729 + 3 * seed) % 89) as f64 / 7.0).collect();
            let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
            let lhs = sm.apply(&combo);
            let (su, sv) = (sm.apply(&u), sm.apply(&v));
            let scale = lhs.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            for i in 0..p {
                let rhs = a * su[i] + b * sv[i];
                prop_assert!((lhs[i] - rhs).abs() <= 1e-10 * scale);
            }
        }

        #[test]
        fn top_fraction_cardinality(vals in proptest::collection::vec(-10.0f64..10.0, 1..200), f in 0.001f64..1.0) {
            let m = top_fraction_mask(&vals, f).unwrap();
            let expected = (f * vals.len() as f64 - 1e-9 * (f * vals.len() as f64).max(1.0)).ceil() as usize;
            prop_assert_eq!(m.iter().filter(|&&b| b).count(), expected);
        }

        #[test]
        fn smoothing_keeps_mean_sign_on_full_mask(seed in 0u64..1000) {
            let mask = BrainMask::full(grid([7, 6, 5]));
            let sm = Smoother::new(&mask, 1.0).unwrap();
            let x: Vec<f64> = (0..mask.p()).map(|i| (((i as u64 + seed) * 2_654_435_761) % 1000) as f64 / 1000.0 - 0.45).collect();
            let mean_in = x.iter().sum::<f64>() / x.len() as f64;
            let y = sm.apply(&x);
            let mean_out = y.iter().sum::<f64>() / y.len() as f64;
            prop_assert!(mean_in.signum() == mean_out.signum() || mean_out.abs() <= 1e-10 * mean_in.abs().max(1e-300));
        }
    }
}
