use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use milslide::mil::{read_checkpoint_file, write_checkpoint_file, MilModel};
use milslide::store::{make_split, read_bag_file, write_bag_file, SplitItem};
use milslide::synthetic::{
    generate_bags, generate_regression_bags, mock_embed, RegressionRule, RegressionTarget,
    SyntheticSpec,
};
use milslide::tiler::{build_tissue_mask, downsample_area, extract_tiles_with, plan_grid};
use milslide::train::{epoch_log_csv, LossKind, Task, TrainConfig};
use milslide::viz::{
    export_features, export_topk, features_csv, grid_extent, render_heatmap, tile_file_name,
};
use milslide::{evaluate, DatasetManifest, EmbeddingBag, LabelSet, TileCoord};

use crate::{
    Command, EmbedArgs, EvalArgs, ExportArgs, HeatmapArgs, SplitArgs, SynthArgs, TileArgs,
    TrainArgs,
};

/// Name of the grid description written next to extracted tiles.
pub const GRID_SIDECAR: &str = "grid.txt";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Tile(a) => tile(a),
        Command::Embed(a) => embed(a),
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Heatmap(a) => heatmap(a),
        Command::ExportFeatures(a) => export(a),
    }
}

fn tile(a: TileArgs) -> Result<()> {
    let base = image::open(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?
        .to_rgb8();
    let grid = plan_grid(base.width(), base.height(), a.tile, a.scale)?;
    let level = downsample_area(&base, a.scale);
    let mask = build_tissue_mask(&level, &grid, a.min_tissue)?;
    let tiles = extract_tiles_with(&level, &grid, &mask, !a.sequential)?;
    fs::create_dir_all(&a.out_dir)?;
    for t in &tiles {
        let path = a.out_dir.join(tile_file_name(t.coord));
        t.image
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    fs::write(a.out_dir.join(GRID_SIDECAR), grid.sidecar())?;
    println!(
        "kept {} of {} tiles ({}x{} grid, otsu level {})",
        tiles.len(),
        grid.n_tiles(),
        grid.cols,
        grid.rows,
        mask.otsu_level
    );
    Ok(())
}

/// Parses `x{col}_y{row}.png`.
pub fn parse_tile_name(name: &str) -> Option<TileCoord> {
    let stem = name.strip_suffix(".png")?;
    let (x, y) = stem.split_once('_')?;
    let col = x.strip_prefix('x')?;
    let row = y.strip_prefix('y')?;
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !digits(col) || !digits(row) {
        return None;
    }
    Some(TileCoord::new(col.parse().ok()?, row.parse().ok()?))
}

fn embed(a: EmbedArgs) -> Result<()> {
    let mut tiles = Vec::new();
    for entry in fs::read_dir(&a.dir).with_context(|| format!("reading {}", a.dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == GRID_SIDECAR {
            continue;
        }
        let coord =
            parse_tile_name(&name).ok_or_else(|| anyhow!("malformed tile filename `{name}`"))?;
        tiles.push((coord, entry.path()));
    }
    if tiles.is_empty() {
        bail!("no tiles in {}", a.dir.display());
    }
    tiles.sort_by_key(|(c, _)| (c.row, c.col));
    let mut features = Vec::with_capacity(tiles.len() * a.dim);
    for (_, path) in &tiles {
        let img = image::open(path)
            .with_context(|| format!("reading {}", path.display()))?
            .to_rgb8();
        features.extend(mock_embed(&img, a.dim));
    }
    let slide_id = match a.slide_id {
        Some(id) => id,
        None => a
            .dir
            .canonicalize()?
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| anyhow!("cannot derive a slide id from {}", a.dir.display()))?,
    };
    let labels = LabelSet {
        mir_stage: a.mir_stage,
        wbc: a.wbc,
        t_max: a.tmax,
    };
    let coords = tiles.iter().map(|(c, _)| *c).collect();
    let bag = EmbeddingBag::new(slide_id, a.dim, coords, features, labels)?;
    write_bag_file(&bag, &a.out)?;
    println!(
        "{}: {} patches, dim {}",
        bag.slide_id(),
        bag.n_patches(),
        bag.dim()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_bags: a.bags,
        instances_per_bag: a.instances,
        dim: a.dim,
        pos_fraction_range: a.pos_frac,
        signal_shift: a.shift,
        signal_dims: a.signal_dims,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let (bags, planted) = match a.regression {
        None => {
            let set = generate_bags(&spec)?;
            (set.bags, set.planted)
        }
        Some(task) => {
            let rule = RegressionRule {
                target: if task == Task::Wbc {
                    RegressionTarget::Wbc
                } else {
                    RegressionTarget::TMax
                },
                ..Default::default()
            };
            let set = generate_regression_bags(&spec, &rule)?;
            (set.bags, set.planted)
        }
    };
    fs::create_dir_all(&a.out)?;
    let mut truth = String::new();
    for (bag, idx) in bags.iter().zip(&planted) {
        write_bag_file(bag, &a.out.join(format!("{}.milb", bag.slide_id())))?;
        let list: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
        truth.push_str(&format!("{}\t{}\n", bag.slide_id(), list.join(",")));
    }
    fs::write(a.out.join("planted.txt"), truth)?;
    println!("wrote {} bags to {}", bags.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| a.dir.join("manifest.tsv"));
    let dir = a
        .dir
        .canonicalize()
        .with_context(|| format!("reading {}", a.dir.display()))?;
    let manifest_dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.canonicalize()?,
        _ => std::env::current_dir()?,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "milb"));
    paths.sort();
    if paths.is_empty() {
        bail!("no .milb bags in {}", dir.display());
    }
    let items = paths
        .iter()
        .map(|p| {
            let bag = read_bag_file(p).with_context(|| format!("reading {}", p.display()))?;
            let rel = if manifest_dir == dir {
                PathBuf::from(p.file_name().expect("file path"))
            } else {
                p.clone()
            };
            Ok(SplitItem {
                path: rel,
                slide_id: bag.slide_id().to_string(),
                class: bag.labels().mir_binary(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = make_split(&items, a.frac, a.seed)?;
    manifest.save(&out)?;
    println!(
        "train {} / valid {} / test {} -> {}",
        manifest.count(milslide::Split::Train),
        manifest.count(milslide::Split::Valid),
        manifest.count(milslide::Split::Test),
        out.display()
    );
    Ok(())
}

fn manifest_base(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let loss = a.loss.unwrap_or(if a.task.is_classification() {
        LossKind::Hinge
    } else {
        LossKind::Mse
    });
    let config = TrainConfig {
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        max_epochs: a.epochs,
        patience: a.patience,
        seed: a.seed,
        class_weighting: a.class_weights,
        loss,
        bins: a.bins,
        hidden: a.hidden,
        attention: a.attention,
    };
    log::info!("train config: {config:?}");
    let outcome = milslide::train(&manifest, &manifest_base(&a.manifest), a.task, &config)?;
    write_checkpoint_file(&outcome.model, &a.out)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".epochs.csv");
        PathBuf::from(p)
    });
    fs::write(&log_path, epoch_log_csv(&outcome.log))?;
    let best = &outcome.log[outcome.best_epoch - 1];
    println!(
        "best epoch {} of {}: validation {} = {:.6}",
        outcome.best_epoch,
        outcome.log.len(),
        if a.task.is_classification() {
            "balanced accuracy"
        } else {
            "rmse"
        },
        best.val_metric
    );
    Ok(())
}

fn load_split(manifest_path: &Path, split: milslide::Split) -> Result<Vec<EmbeddingBag>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    if manifest.count(split) == 0 {
        bail!(
            "manifest {} has no `{split}` split",
            manifest_path.display()
        );
    }
    Ok(manifest.load_bags(&manifest_base(manifest_path), split)?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let bags = load_split(&a.manifest, a.split)?;
    let model = read_checkpoint_file(&a.model)?;
    let (report, preds) = evaluate(&model, &bags, a.task)?;
    print!("{}", report.text());
    if let Some(out) = &a.out {
        fs::write(out, report.csv())?;
    }
    if let Some(out) = &a.predictions {
        fs::write(out, milslide::evaluate::predictions_csv(&preds))?;
    }
    Ok(())
}

fn read_grid_sidecar(path: &Path) -> Result<(u32, u32)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut fields = text.split_whitespace();
    let mut next = || -> Result<u32> {
        Ok(fields
            .next()
            .ok_or_else(|| anyhow!("short grid sidecar {}", path.display()))?
            .parse()?)
    };
    Ok((next()?, next()?))
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let model = read_checkpoint_file(&a.model)?;
    let bag = read_bag_file(&a.bag)?;
    let attention = match &model {
        MilModel::Classifier(m) => m.forward(&bag)?.attention,
        MilModel::Regressor(m) => m.forward(&bag)?.attention,
    };
    let weights = attention.branch(a.branch)?.to_vec();
    let (cols, rows) = match &a.grid {
        Some(p) => read_grid_sidecar(p)?,
        None => grid_extent(bag.coords()),
    };
    let map = render_heatmap(&weights, bag.coords(), cols, rows, a.upscale)?;
    map.image
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{}x{} heatmap -> {}",
        map.image.width(),
        map.image.height(),
        a.out.display()
    );
    if let (Some(tiles), Some(out)) = (&a.tiles, &a.topk_out) {
        let k = a.top_k.min(bag.n_patches());
        let entries = export_topk(&bag, &weights, k, tiles, out)?;
        println!("exported top {} tiles -> {}", entries.len(), out.display());
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let model = match read_checkpoint_file(&a.model)? {
        MilModel::Classifier(m) => m,
        MilModel::Regressor(_) => bail!("feature export needs a classifier checkpoint"),
    };
    let bags = load_split(&a.manifest, a.split)?;
    let rows = export_features(&model, &bags, a.branch)?;
    fs::write(&a.out, features_csv(&rows))?;
    println!("{} rows -> {}", rows.len(), a.out.display());
    Ok(())
}
