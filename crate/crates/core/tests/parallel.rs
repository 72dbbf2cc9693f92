use std::thread::available_parallelism;
use std::time::Instant;

use tilesparse::engine::gemm_tw_workers;
use tilesparse::mask::RowMask;
use tilesparse::matrix::DenseMatrix;
use tilesparse::pattern::{compact, Tile, TilePattern};

/// One full-height tile followed by many that keep a sixteenth of the rows.
fn imbalanced(k: usize, n: usize) -> TilePattern {
    let g = 32;
    let short: Vec<usize> = (0..k).step_by(16).collect();
    let tiles = (0..n / g)
        .map(|t| {
            let rows = if t == 0 { RowMask::full(k) } else { RowMask::from_kept(k, &short).unwrap() };
            Tile::new((t * g..(t + 1) * g).collect(), rows)
        })
        .collect();
    TilePattern::new(k, n, g, tiles).unwrap()
}

#[test]
fn more_workers_finish_sooner_on_imbalanced_tiles() {
    let (m, k, n) = (512, 512, 512);
    let a = DenseMatrix::random(m, k, 1);
    let w = DenseMatrix::random(k, n, 2);
    let tiles = compact(&w, &imbalanced(k, n)).unwrap();

    let one = gemm_tw_workers(&a, &tiles, 1).unwrap();
    assert!(gemm_tw_workers(&a, &tiles, 8).unwrap().bit_eq(&one));

    let cores = available_parallelism().map_or(1, |c| c.get());
    if cores < 2 {
        eprintln!("skipping timing half: {cores} core available");
        return;
    }
    let best = |workers| {
        (0..5)
            .map(|_| {
                let t = Instant::now();
                gemm_tw_workers(&a, &tiles, workers).unwrap();
                t.elapsed()
            })
            .min()
            .unwrap()
    };
    let (t1, t8) = (best(1), best(8));
    assert!(t8 < t1, "8 workers {t8:?} vs 1 worker {t1:?}");
}
