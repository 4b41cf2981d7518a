use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use termatlas::classify::balance_weights;
use termatlas::corpus::DesignMatrix;
use termatlas::cv::{permute_within_groups, precision_recall};
use termatlas::glm::fit_glm;
use termatlas::volume::bmap::{Bmap, Payload};
use termatlas::volume::{selection_count, top_fraction_mask, BrainMask, Smoother, VolumeGrid};

proptest! {
    #[test]
    fn top_fraction_selects_the_largest(values in prop::collection::vec(-1e3f64..1e3, 1..200), fraction in 0.01f64..1.0) {
        let mask = top_fraction_mask(&values, fraction).unwrap();
        let count = mask.iter().filter(|&&b| b).count();
        prop_assert_eq!(count, selection_count(values.len(), fraction));
        prop_assert!(count as f64 >= fraction * values.len() as f64 - 1e-6);
        let lo = values.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let hi = values.iter().zip(&mask).filter(|(_, &m)| !m).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo >= hi);
    }

    #[test]
    fn precision_and_recall_are_bounded(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..100)) {
        let (pred, truth): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let pr = precision_recall(&pred, &truth);
        prop_assert_eq!(pr.tp + pr.fn_, truth.iter().filter(|&&t| t).count());
        prop_assert_eq!(pr.tp + pr.fp, pred.iter().filter(|&&p| p).count());
        prop_assert!((0.0..=1.0).contains(&pr.precision));
        prop_assert!((0.0..=1.0).contains(&pr.recall));
    }

    #[test]
    fn balanced_weights_equalise_class_mass(labels in prop::collection::vec(any::<bool>(), 2..100)) {
        prop_assume!(labels.iter().any(|&v| v) && labels.iter().any(|&v| !v));
        let w = balance_weights(&labels).unwrap();
        let pos: f64 = w.iter().zip(&labels).filter(|(_, &l)| l).map(|(w, _)| w).sum();
        let neg: f64 = w.iter().zip(&labels).filter(|(_, &l)| !l).map(|(w, _)| w).sum();
        prop_assert!((pos - neg).abs() < 1e-9 * labels.len() as f64);
        prop_assert!((pos + neg - labels.len() as f64).abs() < 1e-9 * labels.len() as f64);
    }

    #[test]
    fn group_permutation_keeps_group_counts(
        items in prop::collection::vec((any::<bool>(), 0usize..4), 1..80),
        seed in any::<u64>(),
    ) {
        let (labels, groups): (Vec<bool>, Vec<usize>) = items.into_iter().unzip();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = permute_within_groups(&labels, &groups, &mut rng);
        for g in 0..4 {
            let before = labels.iter().zip(&groups).filter(|(&l, &h)| l && h == g).count();
            let after = out.iter().zip(&groups).filter(|(&l, &h)| l && h == g).count();
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn bmap_round_trips(values in prop::collection::vec(-1e6f32..1e6, 24), name in "[a-z]{1,8}\\.bmap") {
        let b = Bmap { dims: [2, 3, 4], payload: Payload::Masked { mask_name: name, values } };
        prop_assert_eq!(Bmap::decode(&b.encode()).unwrap(), b);
    }

    #[test]
    fn glm_ignores_row_order(seed in any::<u64>(), shift in 1usize..30) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, p) = (30, 4);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![f64::from(u8::from(i % 3 == 0)), f64::from(u8::from(rng.gen_bool(0.5)))]).collect();
        let y: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let design = DesignMatrix::from_rows(vec!["a".into(), "b".into()], &rows, true);
        prop_assume!(design.is_ok());
        let design = design.unwrap();
        let Ok(fit) = fit_glm(&y, p, &design) else { return Ok(()) };
        let order: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let rows2: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
        let y2: Vec<f64> = order.iter().flat_map(|&i| y[i * p..(i + 1) * p].to_vec()).collect();
        let fit2 = fit_glm(&y2, p, &DesignMatrix::from_rows(vec!["a".into(), "b".into()], &rows2, true).unwrap()).unwrap();
        for (a, b) in fit.beta.iter().zip(&fit2.beta) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn smoothing_preserves_constants(c in -100.0f64..100.0, sigma in 0.5f64..3.0) {
        let grid = VolumeGrid::new([6, 5, 4], [2.0; 3]).unwrap();
        let mask = BrainMask::ellipsoid(grid, [3.0, 2.5, 2.0]).unwrap();
        let s = Smoother::new(&mask, sigma).unwrap();
        let out = s.apply(&vec![c; mask.p()]);
        for v in out {
            prop_assert!((v - c).abs() <= 1e-9 * c.abs().max(1.0));
        }
    }
}
