mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use termatlas::parcel::ward_parcellate;
use termatlas::volume::{build_adjacency, BrainMask, VolumeGrid};

fn run_grid(dims: [usize; 3], data: &[f64], n: usize) {
    let mask = BrainMask::full(VolumeGrid::new(dims, [1.0; 3]).unwrap());
    let p = mask.p();
    let coords = common::grid_coords(dims);
    for (v, c) in coords.iter().enumerate() {
        assert_eq!(mask.coords_of(v), *c);
    }
    let adjacency = build_adjacency(&mask);
    let got = ward_parcellate(data, p, None, &adjacency, 1, mask.id()).unwrap();
    let want = common::brute_force_ward(data, n, &coords);
    let tree = got.parcellation.merge_tree();
    assert_eq!(tree.len(), want.len(), "{dims:?}");
    for (m, (a, b, cost)) in tree.iter().zip(&want) {
        assert_eq!((m.a as usize, m.b as usize), (*a, *b), "{dims:?}");
        assert!((m.cost - cost).abs() <= 1e-9 * cost.abs().max(1.0));
    }
}

#[test]
fn merge_sequence_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for dims in [[3, 3, 1], [2, 2, 2], [1, 4, 2], [1, 1, 7]] {
        for _ in 0..5 {
            let n = rng.gen_range(1..=3);
            let p: usize = dims.iter().product();
            let data: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
            run_grid(dims, &data, n);
        }
    }
}

#[test]
fn ties_go_to_the_lowest_pair() {
    // Constant data: every merge costs zero.
    run_grid([2, 2, 2], &[1.5; 8], 1);
    run_grid([1, 3, 3], &[0.0; 18], 2);
}
