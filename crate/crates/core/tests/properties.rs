use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tilesparse::engine::{gemm_tew_workers, gemm_tw_workers, spmm_csc};
use tilesparse::io;
use tilesparse::matrix::{gemm_dense, to_csc, DenseMatrix};
use tilesparse::pattern::{compact, TilePattern};
use tilesparse::prune::{prune_stage, prune_stage_pooled, StageInput};
use tilesparse::score::magnitude_scores;

fn pattern(k: usize, n: usize, g: usize, s: f64, seed: u64, irregular: bool) -> TilePattern {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if irregular {
        TilePattern::random_irregular(k, n, g, s, &mut rng)
    } else {
        TilePattern::random_uniform(k, n, g, s, &mut rng)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tile_gemm_matches_zero_filled_dense(
        m in 1usize..80, k in 1usize..120, n in 1usize..150,
        g in prop::sample::select(vec![8usize, 16, 32]),
        s in 0.0f64..0.95, seed in any::<u64>(), irregular in any::<bool>(),
    ) {
        let a = DenseMatrix::random(m, k, seed);
        let w = DenseMatrix::random(k, n, seed ^ 1);
        let p = pattern(k, n, g, s, seed, irregular);
        let tiles = compact(&w, &p).unwrap();
        let got = gemm_tw_workers(&a, &tiles, 1).unwrap();
        let want = gemm_dense(&a, &p.zero_fill(&w).unwrap()).unwrap();
        prop_assert!(got.max_abs_diff(&want).unwrap() <= 1e-4 * k as f32);
        prop_assert!(p.zero_fill(&w).unwrap().bit_eq(&tiles.expand()));
    }

    #[test]
    fn workers_never_change_bits(
        m in 1usize..64, k in 1usize..96, n in 1usize..128,
        workers in 2usize..9, seed in any::<u64>(),
    ) {
        let a = DenseMatrix::random(m, k, seed);
        let w = DenseMatrix::random(k, n, seed ^ 2);
        let p = pattern(k, n, 16, 0.5, seed, true);
        let tiles = compact(&w, &p).unwrap();
        let keep = p.keep_mask();
        let overlay = to_csc(&w, |i, j, _| !keep.get(i, j) && (i + j) % 5 == 0);
        prop_assert!(gemm_tw_workers(&a, &tiles, workers).unwrap().bit_eq(&gemm_tw_workers(&a, &tiles, 1).unwrap()));
        prop_assert!(gemm_tew_workers(&a, &tiles, &overlay, workers)
            .unwrap()
            .bit_eq(&gemm_tew_workers(&a, &tiles, &overlay, 1).unwrap()));
    }

    #[test]
    fn spmm_matches_dense(m in 1usize..40, k in 1usize..60, n in 1usize..60, seed in any::<u64>()) {
        let a = DenseMatrix::random(m, k, seed);
        let w = DenseMatrix::random(k, n, seed ^ 3);
        let sparse = to_csc(&w, |i, j, _| (i * 31 + j * 17 + seed as usize % 7) % 4 == 0);
        let got = spmm_csc(&a, &sparse).unwrap();
        let want = gemm_dense(&a, &sparse.to_dense()).unwrap();
        prop_assert!(got.max_abs_diff(&want).unwrap() <= 1e-4 * k as f32);
    }

    #[test]
    fn files_roundtrip(k in 1usize..70, n in 1usize..70, g in 1usize..20, s in 0.0f64..1.0, seed in any::<u64>()) {
        let w = DenseMatrix::random(k, n, seed);
        let p = pattern(k, n, g, s, seed, true);
        let csc = to_csc(&w, |i, j, _| (i ^ j) % 3 == 0);

        let mut buf = Vec::new();
        io::write_matrix_to(&mut buf, &w).unwrap();
        io::write_pattern_to(&mut buf, &p).unwrap();
        io::write_csc_to(&mut buf, &csc).unwrap();
        let mut r = buf.as_slice();
        prop_assert!(io::read_matrix_from(&mut r).unwrap().bit_eq(&w));
        prop_assert_eq!(io::read_pattern_from(&mut r).unwrap(), p);
        prop_assert_eq!(io::read_csc_from(&mut r).unwrap(), csc);
        prop_assert!(r.is_empty());

        // Every strict prefix of a pattern file is rejected as a format error.
        let mut one = Vec::new();
        io::write_pattern_to(&mut one, &pattern(k, n, g, s, seed, false)).unwrap();
        let cut = (seed as usize) % one.len();
        let err = io::read_pattern_from(&mut &one[..cut]).unwrap_err();
        prop_assert!(err.is_format(), "{err}");
    }

    #[test]
    fn stages_hit_targets_and_never_regrow(
        k in 4usize..48, n in 4usize..48, g in 1usize..12,
        s1 in 0.0f64..0.6, ds in 0.0f64..0.35, seed in any::<u64>(),
    ) {
        let scores = magnitude_scores(&DenseMatrix::random(k, n, seed));
        let first = prune_stage(&scores, s1, g).unwrap();
        // A stage may not target less than what is already pruned.
        let s2 = (s1 + ds).max(first.sparsity());
        let input = StageInput { prior: Some(&first), ..StageInput::new(&scores) };
        if first.sparsity() > 0.01 {
            prop_assert!(prune_stage_pooled(&[input], first.sparsity() - 0.01, g).is_err());
        }
        let second = prune_stage_pooled(&[input], s2, g).unwrap().remove(0);
        for (p, s) in [(&first, s1), (&second, s2)] {
            // Reaches the target, overshooting by less than one row unit.
            prop_assert!(p.sparsity() >= s - 1e-9);
            prop_assert!(p.sparsity() < s + g as f64 / (k * n) as f64 + 1e-9);
            prop_assert!(p.tiles().iter().all(|t| t.width() <= g));
        }
        let survivors = second.surviving_columns();
        prop_assert!(survivors.iter().all(|c| first.surviving_columns().contains(c)));
    }
}
