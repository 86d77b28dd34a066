//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde_json::json;

use bcd_core::checkpoint::{load_checkpoint, save_checkpoint};
use bcd_core::config::{apply_ablation_row, ExperimentConfig};
use bcd_core::eval::{evaluate as evaluate_items, Metrics, RetrievalItem};
use bcd_core::model::BcdModel;
use bcd_core::objective::sample_pk;
use bcd_core::synth::{load_dataset, save_dataset, Dataset, SynthConfig};
use bcd_core::train::{evaluate_retrieval, train as train_model};
use bcd_core::{read_tns, write_tns, Error, Result, Tensor};

use crate::{
    AblateArgs, DumpArgs, DumpSupervisionArgs, EvaluateArgs, GenerateArgs, TrainArgs,
};

/// Dataset root: the explicit flag wins, then $BCD_DATA_DIR.
fn data_dir(flag: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(d) = flag {
        return Ok(d.clone());
    }
    match std::env::var_os("BCD_DATA_DIR") {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(Error::config(
            "no dataset directory: pass --data or set BCD_DATA_DIR",
        )),
    }
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        seed: args.seed.unwrap_or(d.seed),
        num_train_ids: args.num_train_ids.unwrap_or(d.num_train_ids),
        images_per_train_id: args.images_per_train_id.unwrap_or(d.images_per_train_id),
        num_test_ids: args.num_test_ids.unwrap_or(d.num_test_ids),
        images_per_test_id: args.images_per_test_id.unwrap_or(d.images_per_test_id),
        num_cameras: args.num_cameras.unwrap_or(d.num_cameras),
        parts: args.parts.unwrap_or(d.parts),
        height: args.height.unwrap_or(d.height),
        width: args.width.unwrap_or(d.width),
        max_shift: args.max_shift.unwrap_or(d.max_shift),
        jitter: args.jitter.unwrap_or(d.jitter),
        gen_flip_prob: args.gen_flip_prob.unwrap_or(d.gen_flip_prob),
    };
    let dataset = Dataset::generate(cfg)?;
    save_dataset(&args.out, &dataset)?;
    println!(
        "wrote {} images ({} train / {} query / {} gallery) to {}",
        dataset.images.len(),
        dataset.indices_of(bcd_core::synth::Split::Train).len(),
        dataset.indices_of(bcd_core::synth::Split::Query).len(),
        dataset.indices_of(bcd_core::synth::Split::Gallery).len(),
        args.out.display()
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let config = args.overrides.resolve()?;
    let dataset = load_dataset(data_dir(&args.data)?)?;
    let outcome = train_model(&config, &dataset)?;
    fs::create_dir_all(&args.out)?;

    let mut log = String::new();
    log.push_str(
        &json!({
            "config": config,
            "config_hash": config.content_hash(),
        })
        .to_string(),
    );
    log.push('\n');
    for entry in &outcome.logs {
        log.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        log.push('\n');
    }
    fs::write(args.out.join("train_log.jsonl"), log)?;

    let mut model = outcome.model;
    save_checkpoint(args.out.join("checkpoint"), &mut model)?;
    let last = outcome.logs.last().expect("at least one epoch");
    println!(
        "trained {} epochs; final loss {:.4}; checkpoint at {}",
        outcome.logs.len(),
        last.losses.total,
        args.out.join("checkpoint").display()
    );
    Ok(())
}

fn write_metrics(
    path: &Path,
    metrics: &Metrics,
    config: Option<&ExperimentConfig>,
) -> Result<()> {
    let mut value = json!({
        "rank1": metrics.rank1,
        "map": metrics.map,
        "cmc": metrics.cmc,
        "excluded_queries": metrics.excluded_queries,
        "evaluated_queries": metrics.evaluated_queries,
    });
    if let Some(cfg) = config {
        value["config"] = serde_json::to_value(cfg).expect("config serializes");
        value["config_hash"] = json!(cfg.content_hash());
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, serde_json::to_string_pretty(&value).expect("metrics serialize") + "\n")?;
    Ok(())
}

/// CSV with header `identity,camera`, one row per embedding.
fn read_labels(path: &Path) -> Result<Vec<(usize, usize)>> {
    let raw = fs::read_to_string(path)?;
    let mut lines = raw.lines();
    let header = lines.next().unwrap_or("");
    if header != "identity,camera" {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("expected header 'identity,camera', got '{header}'"),
        });
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let bad = || Error::Format {
            path: path.display().to_string(),
            reason: format!("line {}: expected identity,camera", lineno + 2),
        };
        let id: usize = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let cam: usize = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if it.next().is_some() {
            return Err(bad());
        }
        out.push((id, cam));
    }
    Ok(out)
}

fn items_from_files(embeddings: &Path, labels: &Path) -> Result<Vec<RetrievalItem>> {
    let e = read_tns(embeddings)?;
    let labels = read_labels(labels)?;
    let shape = e.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::contract(format!(
            "embeddings {shape:?} do not match {} label rows",
            labels.len()
        )));
    }
    let d = shape[1];
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, (identity, camera))| RetrievalItem {
            embedding: e.data()[i * d..(i + 1) * d].to_vec(),
            identity,
            camera,
        })
        .collect())
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (metrics, config) = if let Some(ckpt) = &args.checkpoint {
        let mut model = load_checkpoint(ckpt)?;
        let dataset = load_dataset(data_dir(&args.data)?)?;
        let m = evaluate_retrieval(&mut model, &dataset)?;
        (m, Some(model.config.clone()))
    } else if let Some(qe) = &args.query_embeddings {
        let queries = items_from_files(qe, args.query_labels.as_ref().expect("clap requires"))?;
        let gallery = items_from_files(
            args.gallery_embeddings.as_ref().expect("clap requires"),
            args.gallery_labels.as_ref().expect("clap requires"),
        )?;
        (evaluate_items(&queries, &gallery)?, None)
    } else {
        return Err(Error::config(
            "evaluate needs either --checkpoint or the raw embedding files",
        ));
    };
    write_metrics(&args.out, &metrics, config.as_ref())?;
    println!(
        "rank1 {:.4}  mAP {:.4}  ({} queries, {} excluded) -> {}",
        metrics.rank1,
        metrics.map,
        metrics.evaluated_queries,
        metrics.excluded_queries,
        args.out.display()
    );
    Ok(())
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let base = args.overrides.resolve()?;
    let dataset = load_dataset(data_dir(&args.data)?)?;
    let mut csv = String::from("row,seed,rank1,map,config_hash\n");
    let mut configs = serde_json::Map::new();
    let mut means: Vec<(String, f64, f64)> = Vec::new();
    for (row_index, row) in args.rows.iter().enumerate() {
        let row_cfg = apply_ablation_row(&base, row)?;
        let mut rank1_sum = 0.0;
        let mut map_sum = 0.0;
        for &seed in &args.seeds {
            let cfg = ExperimentConfig {
                seed: seed + row_index as u64,
                ..row_cfg.clone()
            };
            let outcome = train_model(&cfg, &dataset)?;
            let mut model = outcome.model;
            let metrics = evaluate_retrieval(&mut model, &dataset)?;
            csv.push_str(&format!(
                "{row},{seed},{:.6},{:.6},{}\n",
                metrics.rank1,
                metrics.map,
                cfg.content_hash()
            ));
            rank1_sum += metrics.rank1;
            map_sum += metrics.map;
            println!(
                "{row} (seed {seed}): rank1 {:.4}  mAP {:.4}",
                metrics.rank1, metrics.map
            );
        }
        let n = args.seeds.len() as f64;
        means.push((row.clone(), rank1_sum / n, map_sum / n));
        configs.insert(
            row.clone(),
            serde_json::to_value(&row_cfg).expect("config serializes"),
        );
    }
    for (row, rank1, map) in &means {
        csv.push_str(&format!("{row},mean,{rank1:.6},{map:.6},\n"));
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, csv)?;
    let configs_path = args.out.with_extension("configs.json");
    fs::write(
        &configs_path,
        serde_json::to_string_pretty(&serde_json::Value::Object(configs)).expect("serializes")
            + "\n",
    )?;
    println!("comparison table -> {}", args.out.display());
    Ok(())
}

/// One deterministic PK batch from the training split, no augmentation.
fn diagnostic_batch(dataset: &Dataset, config: &ExperimentConfig) -> Result<(Tensor, Vec<usize>)> {
    let by_id = dataset.train_identity_images();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let batch = sample_pk(&by_id, config.p_identities, config.a_images, &mut rng)?;
    let (h, w) = (dataset.config.height, dataset.config.width);
    let mut data = Vec::with_capacity(batch.len() * 3 * h * w);
    for &i in &batch.image_indices {
        data.extend_from_slice(dataset.images[i].data());
    }
    Ok((
        Tensor::new(vec![batch.len(), 3, h, w], data)?,
        batch.labels,
    ))
}

fn model_for_dump(
    checkpoint: &Option<PathBuf>,
    overrides: &crate::overrides::ConfigOverrides,
    dataset: &Dataset,
) -> Result<BcdModel> {
    match checkpoint {
        Some(dir) => load_checkpoint(dir),
        None => {
            let config = overrides.resolve()?;
            BcdModel::new(&config, dataset.config.num_train_ids)
        }
    }
}

pub fn dump_supervision(args: DumpSupervisionArgs) -> Result<()> {
    let dataset = load_dataset(data_dir(&args.data)?)?;
    let mut model = model_for_dump(&args.checkpoint, &args.overrides, &dataset)?;
    let (images, _) = diagnostic_batch(&dataset, &model.config.clone())?;
    let matrix = model.supervision_for(&images)?;
    fs::create_dir_all(&args.out)?;
    write_tns(args.out.join("supervision.tns"), &matrix.to_tensor())?;
    fs::write(args.out.join("supervision.csv"), matrix.to_csv())?;
    let nonzero = (0..matrix.parts).filter(|&k| !matrix.column_is_zero(k)).count();
    println!(
        "supervision matrix {}x{} ({} parts with surviving channels) -> {}",
        matrix.channels,
        matrix.parts,
        nonzero,
        args.out.display()
    );
    Ok(())
}

pub fn dump_attention(args: DumpArgs) -> Result<()> {
    let dataset = load_dataset(data_dir(&args.data)?)?;
    let mut model = load_checkpoint(&args.checkpoint)?;
    let (images, _) = diagnostic_batch(&dataset, &model.config.clone())?;
    let dump = model.attention_weights(&images)?;
    fs::create_dir_all(&args.out)?;
    let channels = dump.mean[0].numel();
    let mut csv = String::from("part,image");
    for c in 0..channels {
        csv.push_str(&format!(",c{c}"));
    }
    csv.push('\n');
    for (k, (per_image, mean)) in dump.per_image.iter().zip(&dump.mean).enumerate() {
        write_tns(args.out.join(format!("attention_part{k}.tns")), per_image)?;
        write_tns(args.out.join(format!("attention_mean_part{k}.tns")), mean)?;
        let n = per_image.shape()[0];
        for i in 0..n {
            csv.push_str(&format!("{k},{i}"));
            for c in 0..channels {
                csv.push_str(&format!(",{}", per_image.data()[i * channels + c]));
            }
            csv.push('\n');
        }
        csv.push_str(&format!("{k},mean"));
        for c in 0..channels {
            csv.push_str(&format!(",{}", mean.data()[c]));
        }
        csv.push('\n');
    }
    fs::write(args.out.join("attention.csv"), csv)?;
    println!(
        "attention weights for {} parts -> {}",
        dump.mean.len(),
        args.out.display()
    );
    Ok(())
}

pub fn dump_profiles(args: DumpArgs) -> Result<()> {
    let dataset = load_dataset(data_dir(&args.data)?)?;
    let mut model = load_checkpoint(&args.checkpoint)?;
    let (images, _) = diagnostic_batch(&dataset, &model.config.clone())?;
    let dump = model.height_profiles(&images)?;
    fs::create_dir_all(&args.out)?;
    let h = dump.holistic.numel();
    let mut csv = String::from("kind,part");
    for r in 0..h {
        csv.push_str(&format!(",row{r}"));
    }
    csv.push('\n');
    let mut push_row = |kind: &str, part: String, values: &[f64]| {
        csv.push_str(&format!("{kind},{part}"));
        for v in values {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    };
    for (k, (p, t)) in dump
        .part_profiles
        .iter()
        .zip(&dump.part_targets)
        .enumerate()
    {
        push_row("profile", k.to_string(), p.data());
        push_row("target", k.to_string(), t.data());
    }
    push_row("holistic_profile", "-".to_string(), dump.holistic.data());
    push_row("holistic_target", "-".to_string(), dump.holistic_target.data());
    fs::write(args.out.join("profiles.csv"), csv)?;
    println!(
        "height profiles for {} parts -> {}",
        dump.part_profiles.len(),
        args.out.display()
    );
    Ok(())
}
