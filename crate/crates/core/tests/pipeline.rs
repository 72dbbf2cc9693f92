use tilesparse::bench::verify_patterns;
use tilesparse::io;
use tilesparse::matrix::DenseMatrix;
use tilesparse::prune::{multi_stage_prune, tew_overlay, PruneOptions, PruneSchedule, Ranking, TewConfig};
use tilesparse::trainer::{
    evaluate, layer_scores, train, DatasetConfig, MaskedFineTune, MlpModel, SyntheticDataset, TrainConfig,
};

fn small() -> (MlpModel, SyntheticDataset) {
    let data = SyntheticDataset::generate(&DatasetConfig {
        train: 1024,
        test: 256,
        dim: 32,
        classes: 4,
        ..DatasetConfig::default()
    })
    .unwrap();
    let mut model = MlpModel::new(&[32, 128, 128, 4], 3).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    train(&mut model, &data.train, &cfg).unwrap();
    (model, data)
}

#[test]
fn prune_then_checkpoint_roundtrip() {
    let (mut model, data) = small();
    let dense = evaluate(&model, &data.test, None).unwrap();
    assert!(dense > 0.9, "dense accuracy {dense}");

    let scores = layer_scores(&model, &data.train).unwrap();
    let schedule = PruneSchedule::gradual(0.5, 1).unwrap();
    let opts = PruneOptions {
        g: 32,
        ranking: Ranking::PerMatrix,
        apriori: None,
    };
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut ft = MaskedFineTune::new(&mut model, &data.train, cfg);
    ft.eval = Some(&data.test);
    let out = multi_stage_prune(scores, &schedule, &opts, &mut ft).unwrap();
    assert_eq!(ft.stage_accuracy.len(), schedule.stages().len());
    model.apply_masks(&out.masks).unwrap();

    // Stage sparsities only grow, and the last lands on the target.
    let agg: Vec<f64> = out.history.iter().map(|h| h.aggregate).collect();
    assert!(agg.windows(2).all(|w| w[0] <= w[1]), "{agg:?}");
    assert!((agg.last().unwrap() - 0.5).abs() < 0.02);

    // Pruned weights are exactly zero and TW execution agrees with dense.
    let tw = evaluate(&model, &data.test, Some(&out.patterns)).unwrap();
    assert_eq!(tw, evaluate(&model, &data.test, None).unwrap());
    let weights: Vec<DenseMatrix> = model.prunable_weights().into_iter().cloned().collect();
    assert!(verify_patterns(&weights, &out.patterns, 3, 16, 1, 2).unwrap().passed());

    let dir = tempdir();
    let path = dir.join("model.twml");
    io::write_layers(&model.to_records(), &path).unwrap();
    let back = MlpModel::from_records(io::read_layers(&path).unwrap()).unwrap();
    assert_eq!(evaluate(&back, &data.test, None).unwrap(), tw);
    for (i, p) in out.patterns.iter().enumerate() {
        let f = dir.join(format!("layer{i}.twpt"));
        io::write_pattern(p, &f).unwrap();
        assert_eq!(&io::read_pattern(&f).unwrap(), p);
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn overlay_restores_the_highest_scored_pruned_weights() {
    let (model, data) = small();
    let scores = layer_scores(&model, &data.train).unwrap();
    let cfg = TewConfig::new(0.5, 0.05).unwrap();
    let w = model.prunable_weights()[1];
    let p = tilesparse::prune::prune_stage(&scores[1], cfg.tile_sparsity(), 16).unwrap();
    let (same, csc) = tew_overlay(w, &scores[1], &p, &cfg).unwrap();
    assert_eq!(same, p);
    let (k, n) = w.shape();
    assert_eq!(csc.nnz(), (0.05 * (k * n) as f64).floor() as usize);

    let keep = p.keep_mask();
    let mut restored_min = f32::INFINITY;
    for j in 0..n {
        for (i, v) in csc.column(j) {
            assert!(!keep.get(i, j), "overlay overlaps the tile pattern at ({i},{j})");
            assert_eq!(v, w.get(i, j));
            restored_min = restored_min.min(scores[1].get(i, j));
        }
    }
    // Nothing left out scores strictly above what was restored.
    let restored = csc.to_dense();
    let left_out_max = (0..k)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| !keep.get(i, j) && restored.get(i, j) == 0.0)
        .map(|(i, j)| scores[1].get(i, j))
        .fold(0.0f32, f32::max);
    assert!(left_out_max <= restored_min);
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("tilesparse-pipeline-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
