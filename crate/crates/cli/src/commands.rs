use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};

use tilesparse::bench::{self, BenchCase, BenchOptions, BENCH_HEADER, CDF_HEADER, LAYER_HEADER};
use tilesparse::io;
use tilesparse::pattern::{TileConfig, TilePattern};
use tilesparse::prune::{multi_stage_prune, tew_overlay, PruneOptions, PruneSchedule, Ranking, TewConfig};
use tilesparse::score::ScoreMap;
use tilesparse::trainer::{
    evaluate, layer_scores, train, DatasetConfig, MaskedFineTune, MlpModel, SyntheticDataset, TrainConfig,
    DEFAULT_WIDTHS,
};

use crate::{AnalyzeArgs, BenchArgs, Command, PruneArgs, RankingArg, TrainArgs, VerifyArgs};

pub enum Outcome {
    Success,
    VerifyFailed,
}

/// 3 for I/O and file-format problems, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> ExitCode {
    for cause in e.chain() {
        if let Some(t) = cause.downcast_ref::<tilesparse::error::Error>() {
            if t.is_format() || matches!(t, tilesparse::error::Error::Io(_)) {
                return ExitCode::from(3);
            }
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return ExitCode::from(3);
        }
    }
    ExitCode::from(2)
}

pub fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

fn dataset(seed: u64) -> Result<SyntheticDataset> {
    Ok(SyntheticDataset::generate(&DatasetConfig {
        seed,
        ..DatasetConfig::default()
    })?)
}

fn load_model(path: &Path) -> Result<MlpModel> {
    let records = io::read_layers(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(MlpModel::from_records(records)?)
}

fn write_csv(path: Option<&Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<Outcome> {
    let data = dataset(a.data.seed)?;
    let mut model = MlpModel::new(&DEFAULT_WIDTHS, a.data.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch: a.batch,
        seed: a.data.seed,
        workers: a.data.workers,
    };
    let report = train(&mut model, &data.train, &cfg)?;
    for (e, l) in report.epoch_loss.iter().enumerate() {
        println!("epoch {:>3}  loss {l:.5}", e + 1);
    }
    let acc = evaluate(&model, &data.test, None)?;
    println!("loss {:.5} -> {:.5}, test accuracy {acc:.4}", report.initial_loss, report.final_loss());
    io::write_layers(&model.to_records(), &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(Outcome::Success)
}

fn pattern_path(dir: &Path, layer: usize) -> PathBuf {
    dir.join(format!("layer{layer}.twpt"))
}

fn cmd_prune(a: PruneArgs) -> Result<Outcome> {
    TileConfig::new(a.granularity, 0)?;
    if !(0.0..1.0).contains(&a.sparsity) {
        bail!("sparsity {} outside [0, 1)", a.sparsity);
    }
    let tew = TewConfig::new(a.sparsity, a.delta)?;
    let tile_target = tew.tile_sparsity();
    let mut model = load_model(&a.model)?;
    let original = model.clone();
    let data = dataset(a.data.seed)?;
    let before = evaluate(&model, &data.test, None)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let weights: Vec<_> = model.prunable_weights().into_iter().cloned().collect();
    let patterns: Vec<TilePattern> = if tile_target == 0.0 {
        weights
            .iter()
            .map(|w| TilePattern::dense(w.rows(), w.cols(), a.granularity))
            .collect()
    } else {
        let schedule = if a.schedule.is_empty() {
            PruneSchedule::gradual(tile_target, a.epochs)?
        } else {
            let s = PruneSchedule::new(a.schedule.clone(), a.epochs)?;
            if (s.target() - tile_target).abs() > 1e-9 {
                bail!("schedule ends at {} but sparsity + delta is {tile_target}", s.target());
            }
            s
        };
        let opts = PruneOptions {
            g: a.granularity,
            ranking: match a.ranking {
                RankingArg::PerMatrix => Ranking::PerMatrix,
                RankingArg::Global => Ranking::Global,
            },
            apriori: match a.apriori[..] {
                [] => None,
                [n1, n2] => Some((n1, n2)),
                _ => bail!("--apriori takes N1,N2"),
            },
        };
        let scores = layer_scores(&model, &data.train)?;
        let cfg = TrainConfig {
            epochs: schedule.fine_tune_epochs(),
            lr: a.lr,
            seed: a.data.seed,
            workers: a.data.workers,
            ..TrainConfig::default()
        };
        let mut ft = MaskedFineTune::new(&mut model, &data.train, cfg);
        let outcome = multi_stage_prune(scores, &schedule, &opts, &mut ft)?;
        for (i, h) in outcome.history.iter().enumerate() {
            let per: Vec<String> = h.sparsity.iter().map(|s| format!("{s:.4}")).collect();
            println!("stage {i}: target {:.4}  aggregate {:.4}  per-layer [{}]", h.target, h.aggregate, per.join(", "));
        }
        model.apply_masks(&outcome.masks)?;
        outcome.patterns
    };

    let mut overlays = Vec::new();
    if a.delta > 0.0 {
        let scores = layer_scores(&original, &data.train)?;
        for (i, ((p, s), w)) in patterns.iter().zip(&scores).zip(original.prunable_weights()).enumerate() {
            // Under global ranking layers land on uneven tile sparsities; each
            // restores delta of its own elements, so the pool still ends at alpha.
            let cfg = match a.ranking {
                RankingArg::PerMatrix => tew,
                RankingArg::Global => TewConfig::new(p.sparsity() - a.delta, a.delta)
                    .with_context(|| format!("layer {i} is only {:.4} sparse, below delta", p.sparsity()))?,
            };
            let (_, csc) = tew_overlay(w, s, p, &cfg)?;
            let layer = &mut model.layers_mut()[i];
            for j in 0..csc.cols() {
                for (r, v) in csc.column(j) {
                    layer.w.set(r, j, v);
                }
            }
            io::write_csc(&csc, a.out.join(format!("layer{i}.twcs")))?;
            overlays.push(csc.nnz());
        }
    }

    let mut rows = Vec::new();
    for (i, p) in patterns.iter().enumerate() {
        io::write_pattern(p, pattern_path(&a.out, i))?;
        let stats = tilesparse::pattern::pattern_stats(p, 1);
        let extra = overlays.get(i).copied().unwrap_or(0);
        let sparsity = 1.0 - (p.kept_elements() + extra) as f64 / (p.k() * p.n()) as f64;
        rows.push(vec![
            i.to_string(),
            p.k().to_string(),
            p.n().to_string(),
            format!("{sparsity:.6}"),
            format!("{:.6}", p.sparsity()),
            p.tiles().len().to_string(),
            stats.dropped_tiles.to_string(),
            extra.to_string(),
        ]);
    }
    let ckpt = a.out.join("model.twml");
    io::write_layers(&model.to_records(), &ckpt)?;
    write_csv(
        Some(&a.out.join("summary.csv")),
        &["layer", "rows", "cols", "sparsity", "tile_sparsity", "tiles", "dropped_tiles", "overlay_nnz"],
        &rows,
    )?;
    // The overlay lives outside the tile pattern, so score TEW models densely.
    let after = if overlays.is_empty() {
        evaluate(&model, &data.test, Some(&patterns))?
    } else {
        evaluate(&model, &data.test, None)?
    };
    let aggregate = tilesparse::prune::aggregate_sparsity(&patterns);
    println!("aggregate tile sparsity {aggregate:.4}; test accuracy {before:.4} -> {after:.4}");
    println!("wrote {} pattern files and {}", patterns.len(), ckpt.display());
    Ok(Outcome::Success)
}

fn pattern_files(paths: &[PathBuf], layers: usize) -> Result<Vec<PathBuf>> {
    if let [dir] = paths {
        if dir.is_dir() {
            return Ok((0..layers).map(|i| pattern_path(dir, i)).collect());
        }
    }
    Ok(paths.to_vec())
}

fn cmd_verify(a: VerifyArgs) -> Result<Outcome> {
    let model = load_model(&a.model)?;
    let files = pattern_files(&a.patterns, model.prunable())?;
    if files.len() != model.prunable() {
        bail!("{} pattern files for {} prunable layers", files.len(), model.prunable());
    }
    let patterns: Vec<TilePattern> = files
        .iter()
        .map(|f| io::read_pattern(f).with_context(|| format!("reading pattern {}", f.display())))
        .collect::<Result<_>>()?;
    let weights: Vec<_> = model.prunable_weights().into_iter().cloned().collect();
    let report = bench::verify_patterns(&weights, &patterns, a.probes, a.rows, a.data.seed, a.data.workers)?;
    println!(
        "{} probes, {} failed, worst diff {:e} ({:.4} of tolerance)",
        report.probes, report.failures, report.worst_diff, report.worst_ratio
    );
    Ok(if report.passed() {
        println!("PASS");
        Outcome::Success
    } else {
        println!("FAIL");
        Outcome::VerifyFailed
    })
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| anyhow!("shape {s:?}: {e}"))?;
    match dims[..] {
        [m, k, n] if m > 0 && k > 0 && n > 0 => Ok((m, k, n)),
        _ => bail!("shape {s:?} must be MxKxN with positive extents"),
    }
}

fn cmd_bench(a: BenchArgs) -> Result<Outcome> {
    let shapes: Vec<_> = a.shapes.iter().map(|s| parse_shape(s)).collect::<Result<_>>()?;
    for &g in &a.granularity {
        TileConfig::new(g, 0)?;
    }
    let opts = BenchOptions {
        repeats: a.repeats,
        workers: a.data.workers,
        seed: a.data.seed,
    };
    let mut rows = Vec::new();
    for &(m, k, n) in &shapes {
        for &g in &a.granularity {
            let cases: Vec<BenchCase> = a
                .sparsity
                .iter()
                .map(|&sparsity| BenchCase {
                    m,
                    k,
                    n,
                    g,
                    sparsity,
                    delta: a.delta,
                })
                .collect();
            let results = bench::run_bench(&cases, &opts)?;
            match bench::crossover(&results) {
                Some(s) => eprintln!("{m}x{k}x{n} G={g}: sparse faster from sparsity {s}"),
                None => eprintln!("{m}x{k}x{n} G={g}: sparse never faster in this sweep"),
            }
            rows.extend(results);
        }
    }
    let records: Vec<Vec<String>> = rows.iter().map(|r| r.record()).collect();
    write_csv(a.out.as_deref(), &BENCH_HEADER, &records)?;
    Ok(Outcome::Success)
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<Outcome> {
    let scores: Vec<ScoreMap> = match &a.model {
        Some(path) => {
            let model = load_model(path)?;
            layer_scores(&model, &dataset(a.data.seed)?.train)?
        }
        None => a
            .scores
            .iter()
            .map(|p| {
                let m = io::read_matrix(p).with_context(|| format!("reading scores {}", p.display()))?;
                Ok(ScoreMap::new(m)?)
            })
            .collect::<Result<_>>()?,
    };
    let analysis = bench::analyze(&scores, a.sparsity, a.granularity, &a.blocks)?;
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            write_csv(Some(&dir.join("layers.csv")), &LAYER_HEADER, &analysis.layer_records())?;
            write_csv(Some(&dir.join("cdf.csv")), &CDF_HEADER, &analysis.cdf_records())?;
        }
        None => {
            write_csv(None, &LAYER_HEADER, &analysis.layer_records())?;
            println!();
            write_csv(None, &CDF_HEADER, &analysis.cdf_records())?;
        }
    }
    for (z, excess) in analysis.capture[1..].iter().zip(&analysis.strip_excess) {
        let verdict = if *excess <= 1e-12 {
            "strips capture at least as many zeros everywhere".to_string()
        } else {
            format!("strip CDF exceeds block CDF by up to {excess:.4}")
        };
        eprintln!("1x{} strips vs {}x{} blocks: {verdict}", a.granularity, z.shape.0, z.shape.1);
    }
    Ok(Outcome::Success)
}
