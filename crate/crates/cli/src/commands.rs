use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use moral_align_core::agreement::{agreement_report, RatingsTable};
use moral_align_core::alignment::{
    encode, lambda_sweep, parse_lambdas, record_embeddings, train, EncoderPair, TrainConfig,
};
use moral_align_core::annotation::{plan_batches, PlanConfig};
use moral_align_core::checkpoint::{read_checkpoint, write_checkpoint};
use moral_align_core::compass::{
    evaluate_compass, label_records, train_compass, CompassConfig, CompassModel,
};
use moral_align_core::dataset::{
    augment_replicate, mft_swap, preprocess_smid, read_manifest, read_smid_ratings,
    stratified_split, write_manifest, DatasetVariant, SampleRecord, Split, SwapConfig,
};
use moral_align_core::evaluation::{
    evaluate_embeddings, write_metric_reports, write_retrievals, Direction, RetrievalCorpus,
};
use moral_align_core::features::{
    read_bank, synthesize_corpus, write_bank, FeatureBank, SyntheticCorpusConfig,
};
use moral_align_core::{Error, KvConfig, Result};
use moral_align_service::ServiceConfig;
use serde::Deserialize;

use crate::args::{Command, Common, Data, Side, SplitArg, SwapModeArg, TrainFlags};
use crate::manifest::RunManifest;

pub struct Ctx<'a> {
    pub common: &'a Common,
    pub run: &'a mut RunManifest,
}

impl Ctx<'_> {
    fn seed(&mut self) -> u64 {
        let s = self.common.seed.unwrap_or(0);
        self.run.seed = s;
        s
    }

    fn out(&mut self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.common.out)?;
        let p = self.common.out.join(name);
        self.run.output(&p);
        Ok(p)
    }

    fn input(&mut self, name: &str, path: &Path) -> PathBuf {
        self.run.input(name, path);
        path.to_path_buf()
    }

    /// Defaults, then the config file, then `--set`, then named flags, then `--seed`.
    fn resolve<C: KvConfig>(&mut self, flags: Vec<(&str, Option<String>)>) -> Result<C> {
        let mut cfg = C::default();
        if let Some(path) = &self.common.config {
            self.run.input("config", path);
            cfg.apply_kv_text(&std::fs::read_to_string(path)?)?;
        }
        for entry in &self.common.set {
            let (k, v) = entry.split_once('=').ok_or_else(|| {
                Error::validation("set", format!("expected KEY=VALUE, got {entry:?}"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if let Some(seed) = self.common.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        let entries = cfg.entries();
        if let Some((_, s)) = entries.iter().find(|(k, _)| *k == "seed") {
            self.run.seed = s.parse().unwrap_or(0);
        }
        self.run.config(entries);
        Ok(cfg)
    }

    /// For commands whose only settings are their flags.
    fn flags_only(&mut self, entries: Vec<(&'static str, String)>) -> Result<()> {
        if self.common.config.is_some() || !self.common.set.is_empty() {
            return Err(Error::validation(
                "config",
                "this command takes no configuration file or --set entries",
            ));
        }
        self.run.config(entries);
        Ok(())
    }
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn manifest_in(ctx: &mut Ctx, path: &Path) -> Result<Vec<SampleRecord>> {
    read_manifest(ctx.input("manifest", path))
}

fn bank_in(ctx: &mut Ctx, name: &str, path: &Path) -> Result<FeatureBank> {
    read_bank(ctx.input(name, path))
}

fn in_split(records: Vec<SampleRecord>, split: SplitArg) -> Result<Vec<SampleRecord>> {
    let want = match split {
        SplitArg::All => return Ok(records),
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let out: Vec<_> = records.into_iter().filter(|r| r.is_split(want)).collect();
    if out.is_empty() {
        return Err(Error::validation(
            "split",
            format!("no records in the {want:?} split"),
        ));
    }
    Ok(out)
}

fn write_csv_file(path: &Path, f: impl FnOnce(BufWriter<File>) -> Result<()>) -> Result<()> {
    f(BufWriter::new(File::create(path)?))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn run(cmd: &Command, ctx: &mut Ctx) -> Result<()> {
    match cmd {
        Command::PreprocessSmid { ratings, captions } => preprocess(ctx, ratings, captions),
        Command::Synth {
            n_samples,
            feature_dim,
            signal,
            foundation_signal,
        } => {
            let cfg: SyntheticCorpusConfig = ctx.resolve(vec![
                ("n_samples", opt(n_samples)),
                ("feature_dim", opt(feature_dim)),
                ("moral_signal_strength", opt(signal)),
                ("foundation_signal", opt(foundation_signal)),
            ])?;
            let corpus = synthesize_corpus(&cfg)?;
            write_manifest(&corpus.records, ctx.out("manifest.jsonl")?)?;
            write_bank(&corpus.images, ctx.out("images.mcfb")?)?;
            write_bank(&corpus.texts, ctx.out("texts.mcfb")?)?;
            Ok(())
        }
        Command::CompassTrain {
            manifest,
            image_bank,
            learning_rate,
            max_epochs,
            batch_size,
        } => {
            let cfg: CompassConfig = ctx.resolve(vec![
                ("learning_rate", opt(learning_rate)),
                ("max_epochs", opt(max_epochs)),
                ("batch_size", opt(batch_size)),
            ])?;
            let records = manifest_in(ctx, manifest)?;
            let images = bank_in(ctx, "image_bank", image_bank)?;
            let out = train_compass(&cfg, &records, &images)?;
            write_checkpoint(&out.best.to_checkpoint(&cfg), ctx.out("compass.mckp")?)?;
            write_csv_file(&ctx.out("compass_history.csv")?, |w| {
                out.history.write_csv(w)
            })?;
            let held_out = in_split(records.clone(), SplitArg::Test)
                .or_else(|_| in_split(records, SplitArg::Val))?;
            let metrics = evaluate_compass(&out.best, &held_out, &images)?;
            write_csv_file(&ctx.out("compass_metrics.csv")?, |w| metrics.write_csv(w))
        }
        Command::CompassLabel {
            checkpoint,
            manifest,
            image_bank,
        } => {
            ctx.flags_only(vec![])?;
            let (cfg, model) = CompassModel::from_checkpoint(&read_checkpoint(
                ctx.input("checkpoint", checkpoint),
            )?)?;
            ctx.run.config(cfg.entries());
            let records = manifest_in(ctx, manifest)?;
            let images = bank_in(ctx, "image_bank", image_bank)?;
            write_manifest(
                &label_records(&model, &records, &images)?,
                ctx.out("manifest.jsonl")?,
            )
        }
        Command::Split {
            manifest,
            val,
            test,
        } => {
            ctx.flags_only(vec![("val", val.to_string()), ("test", test.to_string())])?;
            let seed = ctx.seed();
            let records = manifest_in(ctx, manifest)?;
            write_manifest(
                &stratified_split(records, *val, *test, seed)?,
                ctx.out("manifest.jsonl")?,
            )
        }
        Command::Augment { manifest, copies } => {
            ctx.flags_only(vec![("copies", copies.to_string())])?;
            let seed = ctx.seed();
            let records = manifest_in(ctx, manifest)?;
            write_manifest(
                &augment_replicate(&records, *copies, seed)?,
                ctx.out("manifest.jsonl")?,
            )
        }
        Command::Swap {
            manifest,
            mode,
            mix_fraction,
            cap,
        } => swap(ctx, manifest, *mode, *mix_fraction, *cap),
        Command::Train(flags) => {
            let (cfg, variant) = train_config(ctx, flags)?;
            let (records, images, texts) = load_data(ctx, &flags.data)?;
            let out = train(&cfg, &records, &images, &texts, variant)?;
            write_checkpoint(&out.best.to_checkpoint(&cfg), ctx.out("alignment.mckp")?)?;
            write_checkpoint(
                &out.last.to_checkpoint(&cfg),
                ctx.out("alignment_last.mckp")?,
            )?;
            write_csv_file(&ctx.out("history.csv")?, |w| out.history.write_csv(w))
        }
        Command::Sweep { train, lambdas } => {
            let values = parse_lambdas(lambdas)?;
            let (cfg, variant) = train_config(ctx, train)?;
            ctx.run.config.insert("lambdas".into(), lambdas.clone());
            let (records, images, texts) = load_data(ctx, &train.data)?;
            let result = lambda_sweep(&cfg, &records, &images, &texts, variant, &values)?;
            write_csv_file(&ctx.out("sweep.csv")?, |w| result.write_csv(w))?;
            if let Some(i) = result.best_index() {
                let best = TrainConfig {
                    lambda: values[i],
                    ..cfg
                };
                write_checkpoint(
                    &result.outcomes[i].best.to_checkpoint(&best),
                    ctx.out("best_alignment.mckp")?,
                )?;
            }
            Ok(())
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            metrics,
            bootstrap,
        } => {
            let wanted = parse_metric_families(metrics)?;
            ctx.flags_only(vec![
                ("split", format!("{split:?}").to_lowercase()),
                ("metrics", metrics.clone()),
                ("bootstrap", bootstrap.to_string()),
            ])?;
            let seed = ctx.seed();
            let pair = load_pair(ctx, checkpoint.as_deref())?;
            let (records, images, texts) = load_data(ctx, data)?;
            let records = in_split(records, *split)?;
            let (img, txt) = record_embeddings(pair.as_ref(), &records, &images, &texts)?;
            let reports: Vec<_> = evaluate_embeddings(&img, &txt, *bootstrap, seed)?
                .into_iter()
                .filter(|r| wanted.iter().any(|f| r.metric.starts_with(f)))
                .collect();
            write_csv_file(&ctx.out("metrics.csv")?, |w| {
                write_metric_reports(&reports, w)
            })
        }
        Command::Retrieve {
            data,
            checkpoint,
            split,
            direction,
            k,
            queries,
        } => {
            let dir: Direction = direction.parse()?;
            ctx.flags_only(vec![
                ("split", format!("{split:?}").to_lowercase()),
                ("direction", direction.clone()),
                ("k", k.to_string()),
            ])?;
            let pair = load_pair(ctx, checkpoint.as_deref())?;
            let (records, images, texts) = load_data(ctx, data)?;
            let records = in_split(records, *split)?;
            let (images, texts) = record_embeddings(pair.as_ref(), &records, &images, &texts)?;
            let corpus = RetrievalCorpus { images, texts };
            let ids: Vec<String> = if queries.is_empty() {
                records.iter().map(|r| r.id.clone()).collect()
            } else {
                queries.clone()
            };
            let results = ids
                .iter()
                .map(|q| corpus.rank_retrieve(q, dir, *k))
                .collect::<Result<Vec<_>>>()?;
            write_retrievals(&results, ctx.out("retrievals.jsonl")?)
        }
        Command::Agreement {
            ratings,
            model_labels,
            min_std,
            bootstrap,
        } => {
            ctx.flags_only(vec![
                ("min_std", min_std.to_string()),
                ("bootstrap", bootstrap.to_string()),
            ])?;
            let seed = ctx.seed();
            let table = RatingsTable::from_export_csv(File::open(ctx.input("ratings", ratings))?)?;
            let labels = match model_labels {
                Some(p) => Some(
                    read_manifest(ctx.input("model_labels", p))?
                        .into_iter()
                        .map(|r| (r.id, r.label))
                        .collect::<BTreeMap<_, _>>(),
                ),
                None => None,
            };
            let report = agreement_report(&table, labels.as_ref(), *min_std, *bootstrap, seed)?;
            write_csv_file(&ctx.out("agreement.csv")?, |w| report.write_csv(w))?;
            write_json(&ctx.out("screening.json")?, &report.screening)
        }
        Command::ExportEmbeddings {
            checkpoint,
            bank,
            side,
        } => {
            ctx.flags_only(vec![("side", format!("{side:?}").to_lowercase())])?;
            let pair = load_pair(ctx, Some(checkpoint))?.expect("checkpoint given");
            let features = bank_in(ctx, "bank", bank)?;
            let (encoder, name) = match side {
                Side::Image => (&pair.image, "image_embeddings.mcfb"),
                Side::Text => (&pair.text, "text_embeddings.mcfb"),
            };
            write_bank(&encode(encoder, &features)?, ctx.out(name)?)
        }
        Command::Plan {
            manifest,
            n_batches,
            per_batch,
            annotators_per_batch,
        } => {
            let plan_cfg = PlanConfig {
                n_batches: *n_batches,
                per_batch: *per_batch,
                annotators_per_batch: *annotators_per_batch,
                seed: ctx.seed(),
            };
            ctx.flags_only(vec![
                ("n_batches", n_batches.to_string()),
                ("per_batch", per_batch.to_string()),
                ("annotators_per_batch", annotators_per_batch.to_string()),
            ])?;
            let ids: Vec<String> = manifest_in(ctx, manifest)?
                .into_iter()
                .map(|r| r.image_feature_id)
                .collect();
            plan_batches(&ids, &plan_cfg)?.write(ctx.out("batch_plan.json")?)
        }
        Command::Serve {
            listen,
            image_dir,
            plan,
            store,
            instructions,
        } => {
            let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
            let cfg: ServiceConfig = ctx.resolve_service(vec![
                ("listen", listen.clone()),
                ("image_dir", show(image_dir)),
                ("plan_path", show(plan)),
                ("store_path", show(store)),
                ("instructions_path", show(instructions)),
            ])?;
            let state = std::sync::Arc::new(moral_align_service::AppState::open(&cfg)?);
            std::fs::create_dir_all(&ctx.common.out)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
                eprintln!("listening on {}", listener.local_addr()?);
                moral_align_service::serve_on(listener, state).await
            })
        }
    }
}

impl Ctx<'_> {
    /// The service config has no seed, so `--seed` is only recorded.
    fn resolve_service(&mut self, flags: Vec<(&str, Option<String>)>) -> Result<ServiceConfig> {
        let seed = self.common.seed;
        let mut cfg = ServiceConfig::default();
        if let Some(path) = &self.common.config {
            self.run.input("config", path);
            cfg.apply_kv_text(&std::fs::read_to_string(path)?)?;
        }
        for entry in &self.common.set {
            let (k, v) = entry.split_once('=').ok_or_else(|| {
                Error::validation("set", format!("expected KEY=VALUE, got {entry:?}"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        self.run.seed = seed.unwrap_or(0);
        self.run.config(cfg.entries());
        Ok(cfg)
    }
}

fn parse_metric_families(spec: &str) -> Result<Vec<&'static str>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|m| match m {
            "map" => Ok("map_"),
            "dp" => Ok("dp_"),
            "silhouette" => Ok("silhouette_"),
            other => Err(Error::validation(
                "metrics",
                format!("unknown metric {other:?}"),
            )),
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::validation("metrics", "no metrics given"))
            } else {
                Ok(v)
            }
        })
}

fn train_config(ctx: &mut Ctx, flags: &TrainFlags) -> Result<(TrainConfig, DatasetVariant)> {
    let variant: DatasetVariant = flags.variant.parse()?;
    let cfg: TrainConfig = ctx.resolve(vec![
        ("lambda", opt(&flags.lambda)),
        ("epochs", opt(&flags.epochs)),
        ("learning_rate", opt(&flags.learning_rate)),
        ("batch_size", opt(&flags.batch_size)),
        ("temperature", opt(&flags.temperature)),
        ("moral_scale", flags.moral_scale.clone()),
    ])?;
    ctx.run.config.insert("variant".into(), variant.to_string());
    cfg.validate()?;
    Ok((cfg, variant))
}

fn load_data(ctx: &mut Ctx, data: &Data) -> Result<(Vec<SampleRecord>, FeatureBank, FeatureBank)> {
    Ok((
        manifest_in(ctx, &data.manifest)?,
        bank_in(ctx, "image_bank", &data.image_bank)?,
        bank_in(ctx, "text_bank", &data.text_bank)?,
    ))
}

fn load_pair(ctx: &mut Ctx, checkpoint: Option<&Path>) -> Result<Option<EncoderPair>> {
    let Some(path) = checkpoint else {
        return Ok(None);
    };
    let (cfg, pair) =
        EncoderPair::from_checkpoint(&read_checkpoint(ctx.input("checkpoint", path))?)?;
    for (k, v) in cfg.entries() {
        ctx.run.config.insert(format!("checkpoint.{k}"), v);
    }
    Ok(Some(pair))
}

#[derive(Deserialize)]
struct CaptionRow {
    image_id: String,
    caption: String,
}

fn preprocess(ctx: &mut Ctx, ratings: &Path, captions: &Path) -> Result<()> {
    ctx.flags_only(vec![])?;
    let rows = read_smid_ratings(ctx.input("ratings", ratings))?;
    let mut caps: HashMap<String, Vec<String>> = HashMap::new();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(ctx.input("captions", captions))?;
    for row in rdr.deserialize::<CaptionRow>() {
        let row = row?;
        caps.entry(row.image_id).or_default().push(row.caption);
    }
    let out = preprocess_smid(&rows, &caps)?;
    write_manifest(&out.records, ctx.out("manifest.jsonl")?)?;
    write_json(&ctx.out("exclusion_report.json")?, &out.report)
}

fn swap(
    ctx: &mut Ctx,
    manifest: &Path,
    mode: SwapModeArg,
    mix_fraction: Option<f64>,
    cap: Option<usize>,
) -> Result<()> {
    let seed = ctx.seed();
    let mut cfg = match mode {
        SwapModeArg::Mild => SwapConfig::mild(seed),
        SwapModeArg::Strong => SwapConfig::strong(seed),
    };
    if let Some(m) = mix_fraction {
        cfg.mix_fraction = m;
    }
    if let Some(c) = cap {
        if mode == SwapModeArg::Strong {
            return Err(Error::validation("cap", "only mild swaps are capped"));
        }
        cfg.per_group_cap = Some(c);
    }
    ctx.flags_only(vec![
        ("mode", format!("{mode:?}").to_lowercase()),
        ("mix_fraction", cfg.mix_fraction.to_string()),
        (
            "cap",
            cfg.per_group_cap.map(|c| c.to_string()).unwrap_or_default(),
        ),
    ])?;
    let records = manifest_in(ctx, manifest)?;
    let out = mft_swap(&records, &cfg)?;
    write_manifest(&out.records, ctx.out("manifest.jsonl")?)?;
    let per_group: BTreeMap<String, usize> = out
        .swaps_per_group
        .iter()
        .map(|(l, n)| (l.encode(), *n))
        .collect();
    write_json(
        &ctx.out("swap_report.json")?,
        &serde_json::json!({
            "n_targets": out.n_targets,
            "n_swaps": out.swaps.len(),
            "swaps_per_group": per_group,
            "skipped": out.skipped,
            "swaps": out.swaps,
        }),
    )
}
