use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use halm_core::analysis::{
    default_ratios, histogram_by_class, histogram_tsv, lambda_sweep, tradeoff_curve, tradeoff_tsv,
    HistogramSpec, Transform,
};
use halm_core::corpus::{ingest as ingest_file, Corpus, QaRecord, Split};
use halm_core::evaluator::{evaluate_pair, judge, judge_pair, EvalReport, Output, SearchMarkers};
use halm_core::inference::{
    run_corpus, Endpoint, FewShotPool, GenerationClient, Generator, PartialProgress, Prediction,
    PromptBuilder, PromptStyle, ResponseCache, RetryPolicy, IDK_ANSWER,
};
use halm_core::io::{read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use halm_core::labeler::{build_masked_dataset, emit_dataset, manifest_path, read_dataset};
use halm_core::ppl_baseline::{calibrate as fit_threshold, route, PplThreshold, Scored};
use halm_core::{Error, Judgment, Result};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;

/// Sidecar written next to the ingested per-split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub name: String,
    pub splits: BTreeMap<Split, usize>,
    pub config_hash: String,
    pub profile_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsManifest {
    pub corpus: String,
    pub split: Split,
    pub model_tag: String,
    pub prompt_style: PromptStyle,
    pub max_new_tokens: u32,
    pub n: usize,
    pub config_hash: String,
    pub profile_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialManifest {
    #[serde(flatten)]
    pub progress: PartialProgress,
    pub config_hash: String,
    pub profile_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFile {
    #[serde(flatten)]
    pub threshold: PplThreshold,
    pub config_hash: String,
    pub profile_hash: String,
}

#[derive(Debug, Clone)]
pub enum Policy {
    Adapted(PathBuf),
    Threshold(PathBuf),
}

struct Stamp {
    config_hash: String,
    profile_hash: String,
}

impl Stamp {
    fn new(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            config_hash: cfg.hash(),
            profile_hash: cfg.profile()?.hash(),
        })
    }

    fn comments(&self, source: &Path) -> Vec<String> {
        vec![
            format!("source: {}", file_name(source)),
            format!("config_hash: {}", self.config_hash),
            format!("profile_hash: {}", self.profile_hash),
        ]
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// File name without its last extension (`.jsonl` / `.json`).
fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string())
}

fn safe_component(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

fn corpus_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir().join("corpus")
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} not found", path.display())))
    }
}

pub fn ingest(cfg: &PipelineConfig) -> Result<()> {
    if cfg.corpus.splits.is_empty() {
        return Err(Error::Config("no corpus splits configured under [corpus.splits]".to_string()));
    }
    let profile = cfg.profile()?;
    let mut records = Vec::new();
    for (split, src) in &cfg.corpus.splits {
        let path = cfg.resolve(&src.path);
        require_file(&path, &format!("corpus file for split `{split}`"))?;
        records.extend(ingest_file(&path, src.format, *split, profile.clone())?.records);
    }
    let corpus = Corpus::from_records(cfg.corpus_name(), records, profile.clone())?;

    let stamp = Stamp::new(cfg)?;
    let dir = corpus_dir(cfg);
    let mut counts = BTreeMap::new();
    for split in [Split::Train, Split::Dev, Split::Test] {
        let part: Vec<&QaRecord> = corpus.iter().filter(|r| r.split == split).collect();
        if part.is_empty() && !cfg.corpus.splits.contains_key(&split) {
            continue;
        }
        write_jsonl(&dir.join(format!("{split}.jsonl")), &part)?;
        counts.insert(split, part.len());
    }
    for (split, n) in &counts {
        println!("{split}\t{n}");
    }
    write_json(
        &dir.join("manifest.json"),
        &CorpusManifest {
            name: corpus.name.clone(),
            splits: counts,
            config_hash: stamp.config_hash,
            profile_hash: stamp.profile_hash,
        },
    )?;
    println!("wrote {} records to {}", corpus.len(), dir.display());
    Ok(())
}

/// The ingested corpus, all splits, in split then file order.
pub fn load_corpus(cfg: &PipelineConfig) -> Result<Corpus> {
    let dir = corpus_dir(cfg);
    let manifest_file = dir.join("manifest.json");
    if !manifest_file.is_file() {
        return Err(Error::Config(format!(
            "no ingested corpus at {} (run `halm ingest` first)",
            dir.display()
        )));
    }
    let manifest: CorpusManifest = read_json(&manifest_file)?;
    let mut records = Vec::new();
    for split in manifest.splits.keys() {
        records.extend(read_jsonl::<QaRecord>(&dir.join(format!("{split}.jsonl")))?);
    }
    Corpus::from_records(manifest.name, records, cfg.profile()?)
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    require_file(path, "predictions file")?;
    let preds: Vec<Prediction> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for p in &preds {
        if !seen.insert(p.record_id.as_str()) {
            return Err(Error::DuplicateId(p.record_id.clone()));
        }
    }
    Ok(preds)
}

/// Corpus records for the given predictions, in corpus order.
fn records_for(corpus: &Corpus, preds: &[Prediction]) -> Result<Vec<QaRecord>> {
    let index = corpus.index();
    let mut positions = preds
        .iter()
        .map(|p| {
            index
                .get(p.record_id.as_str())
                .copied()
                .ok_or_else(|| Error::UnknownId(p.record_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    positions.sort_unstable();
    Ok(positions.into_iter().map(|i| corpus.records[i].clone()).collect())
}

fn prompt_builder(cfg: &PipelineConfig) -> Result<PromptBuilder> {
    Ok(match cfg.prompt.style {
        PromptStyle::ZeroshotQa => PromptBuilder::ZeroShot {
            template: cfg.prompt.template.clone(),
        },
        PromptStyle::InstructIdk => PromptBuilder::Instruct,
        PromptStyle::FewshotBalanced => {
            let pool_path = cfg.prompt.pool.as_deref().ok_or_else(|| {
                Error::Config("prompt.style = \"fewshot-balanced\" needs prompt.pool".to_string())
            })?;
            let pool_path = cfg.resolve(pool_path);
            require_file(&pool_path, "few-shot pool")?;
            let dataset = read_dataset(&pool_path)?;
            let pool = FewShotPool::from_masked(&dataset, cfg.prompt.seed);
            pool.select(cfg.prompt.k)?;
            PromptBuilder::FewShot {
                pool,
                k: cfg.prompt.k,
            }
        }
    })
}

pub fn predictions_path(cfg: &PipelineConfig, split: Split) -> PathBuf {
    cfg.output_dir().join("predictions").join(format!(
        "{}.{}.{split}.jsonl",
        safe_component(&cfg.endpoint.model_tag),
        cfg.prompt.style
    ))
}

pub fn infer(cfg: &PipelineConfig, split: Split) -> Result<()> {
    let url = cfg
        .endpoint
        .url
        .clone()
        .ok_or_else(|| Error::Config("no endpoint configured (endpoint.url or --endpoint)".to_string()))?;
    let corpus = load_corpus(cfg)?;
    let part = Corpus::from_records(
        corpus.name.clone(),
        corpus.iter().filter(|r| r.split == split).cloned().collect(),
        corpus.normalization_profile.clone(),
    )?;
    let prompts = prompt_builder(cfg)?;
    let stamp = Stamp::new(cfg)?;

    let cache_dir = cfg
        .cache_dir()
        .unwrap_or_else(|| cfg.output_dir().join("cache"));
    let client = GenerationClient::new(
        Endpoint::new(url).with_timeout(cfg.endpoint.timeout()).with_token_from_env(),
        RetryPolicy {
            max_retries: cfg.endpoint.max_retries,
            ..RetryPolicy::default()
        },
    )?;
    let generator = Generator::new(
        client,
        Some(ResponseCache::open(cache_dir)?),
        cfg.endpoint.model_tag.clone(),
    );

    let out = predictions_path(cfg, split);
    let partial = out.with_extension("partial.json");
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Config(format!("cannot start async runtime: {e}")))?;
    let result = runtime.block_on(run_corpus(
        &part,
        &prompts,
        &generator,
        cfg.endpoint.max_new_tokens,
        cfg.endpoint.max_in_flight,
    ));
    let preds = match result {
        Ok(p) => p,
        Err(err) => {
            if let Some(progress) = PartialProgress::from_error(&err) {
                write_json(
                    &partial,
                    &PartialManifest {
                        progress,
                        config_hash: stamp.config_hash.clone(),
                        profile_hash: stamp.profile_hash.clone(),
                    },
                )?;
                eprintln!("partial progress written to {}", partial.display());
            }
            return Err(err);
        }
    };
    if partial.exists() {
        std::fs::remove_file(&partial).map_err(|e| Error::io(&partial, e))?;
    }
    write_jsonl(&out, &preds)?;
    write_json(
        &manifest_path(&out),
        &PredictionsManifest {
            corpus: part.name.clone(),
            split,
            model_tag: cfg.endpoint.model_tag.clone(),
            prompt_style: cfg.prompt.style,
            max_new_tokens: cfg.endpoint.max_new_tokens,
            n: preds.len(),
            config_hash: stamp.config_hash,
            profile_hash: stamp.profile_hash,
        },
    )?;
    println!("{} predictions written to {}", preds.len(), out.display());
    Ok(())
}

pub fn label(cfg: &PipelineConfig, predictions: &Path) -> Result<()> {
    let preds = read_predictions(predictions)?;
    let corpus = load_corpus(cfg)?;
    let profile = cfg.profile()?;
    let token = cfg.search_token()?;
    let dataset = build_masked_dataset(&preds, &corpus, &profile, &token)?;
    let out = cfg
        .output_dir()
        .join("labels")
        .join(format!("{}.masked.jsonl", stem(predictions)));
    let stamp = Stamp::new(cfg)?;
    emit_dataset(
        &dataset,
        &corpus,
        &out,
        Some(&stamp.config_hash),
        cfg.labels.training.clone(),
    )?;
    let s = dataset.stats;
    match s.mask_rate() {
        Some(rate) => println!(
            "{} examples: {} answered, {} masked (mask rate {:.1}%)",
            s.n_total,
            s.n_answer,
            s.n_masked,
            rate * 100.0
        ),
        None => eprintln!(
            "warning: {} holds no predictions; wrote an empty dataset",
            predictions.display()
        ),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn markers(cfg: &PipelineConfig, preds: &[Prediction]) -> Result<SearchMarkers> {
    let m = SearchMarkers::new(cfg.search_token()?);
    Ok(if preds.iter().any(|p| p.prompt_style == PromptStyle::InstructIdk) {
        m.with_alias(IDK_ANSWER)
    } else {
        m
    })
}

pub fn calibrate(cfg: &PipelineConfig, predictions: &Path) -> Result<()> {
    let preds = read_predictions(predictions)?;
    let corpus = load_corpus(cfg)?;
    let profile = cfg.profile()?;
    let normalizer = profile.normalizer();
    let markers = markers(cfg, &preds)?;
    let scored = preds
        .iter()
        .map(|p| {
            let record = corpus
                .get(&p.record_id)
                .ok_or_else(|| Error::UnknownId(p.record_id.clone()))?;
            let j = judge(&markers.classify(&p.text, &normalizer), record, &normalizer);
            Ok(Scored::new(p.perplexity, j == Judgment::Correct))
        })
        .collect::<Result<Vec<_>>>()?;
    let threshold = fit_threshold(
        &scored,
        cfg.calibration.strategy,
        cfg.calibration.target_rate,
        file_name(predictions),
    )?;
    let stamp = Stamp::new(cfg)?;
    let out = cfg
        .output_dir()
        .join("thresholds")
        .join(format!("{}.threshold.json", stem(predictions)));
    println!("tau = {} ({:?}, fitted on {} items)", threshold.tau, threshold.strategy, scored.len());
    write_json(
        &out,
        &ThresholdFile {
            threshold,
            config_hash: stamp.config_hash,
            profile_hash: stamp.profile_hash,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn model_tag(preds: &[Prediction]) -> Option<String> {
    preds.first().map(|p| p.model_tag.clone())
}

pub fn evaluate(cfg: &PipelineConfig, base: &Path, policy: &Policy, name: Option<&str>) -> Result<()> {
    let base_preds = read_predictions(base)?;
    let corpus = load_corpus(cfg)?;
    let profile = cfg.profile()?;
    let normalizer = profile.normalizer();
    let records = records_for(&corpus, &base_preds)?;

    let base_out: HashMap<&str, Output> = base_preds
        .iter()
        .map(|p| (p.record_id.as_str(), Output::Text(p.text.clone())))
        .collect();

    let adapted_preds;
    let (adapted_out, adapted_name, default_name): (HashMap<&str, Output>, String, String) = match policy {
        Policy::Adapted(path) => {
            adapted_preds = read_predictions(path)?;
            let m = markers(cfg, &adapted_preds)?;
            let out = adapted_preds
                .iter()
                .map(|p| (p.record_id.as_str(), m.classify(&p.text, &normalizer)))
                .collect();
            (out, model_tag(&adapted_preds).unwrap_or_default(), stem(path))
        }
        Policy::Threshold(path) => {
            require_file(path, "threshold file")?;
            let t: ThresholdFile = read_json(path)?;
            t.threshold.validate()?;
            let out = base_preds
                .iter()
                .map(|p| Ok((p.record_id.as_str(), route(p, &t.threshold)?)))
                .collect::<Result<_>>()?;
            let tag = format!("{}+ppl-t", model_tag(&base_preds).unwrap_or_default());
            (out, tag, format!("{}.ppl-t", stem(base)))
        }
    };

    let (b, a) = judge_pair(&records, &base_out, &adapted_out, &normalizer)?;
    let mut report = evaluate_pair(&b, &a, cfg.evaluation.lambda)?;
    let stamp = Stamp::new(cfg)?;
    let base_name = model_tag(&base_preds).unwrap_or_default();
    report.provenance.base_model = Some(base_name.clone());
    report.provenance.adapted_model = Some(adapted_name.clone());
    report.provenance.corpus = Some(corpus.name.clone());
    report.provenance.config_hash = Some(stamp.config_hash.clone());
    report.provenance.profile_hash = Some(stamp.profile_hash.clone());

    let name = safe_component(name.unwrap_or(&default_name));
    let dir = cfg.output_dir().join("reports");
    let json_path = dir.join(format!("{name}.json"));
    write_json(&json_path, &report)?;
    let table = report.render_table(&base_name, &adapted_name);
    let mut text = table.clone();
    text.push_str(&format!(
        "\nn = {}, lambda = {}, budget cost = {:.4}\nconfig_hash: {}\nprofile_hash: {}\n",
        report.n, report.lambda, report.budget_cost, stamp.config_hash, stamp.profile_hash
    ));
    write_atomic(&dir.join(format!("{name}.txt")), text.as_bytes())?;
    print!("{text}");
    println!("wrote {}", json_path.display());
    Ok(())
}

pub fn tradeoff(
    cfg: &PipelineConfig,
    report_path: &Path,
    ratios: Option<Vec<f64>>,
    lambdas: Option<Vec<f64>>,
) -> Result<()> {
    require_file(report_path, "report file")?;
    let report: EvalReport = read_json(report_path)?;
    let r = report.adapted;
    let ratios = ratios.unwrap_or_else(default_ratios);
    let points = tradeoff_curve(r.c * 100.0, r.h * 100.0, r.s * 100.0, &ratios)?;
    let stamp = Stamp::new(cfg)?;
    let comments = stamp.comments(report_path);
    let dir = cfg.output_dir().join("reports");
    let name = stem(report_path);

    let tsv = tradeoff_tsv(&points, &comments);
    let path = dir.join(format!("{name}.tradeoff.tsv"));
    write_atomic(&path, tsv.as_bytes())?;
    print!("{tsv}");
    println!("wrote {}", path.display());

    if let Some(lambdas) = lambdas {
        let sweep = lambda_sweep(r.s, r.h, &lambdas)?;
        let tsv = halm_core::analysis::lambda_tsv(&sweep, &comments);
        let path = dir.join(format!("{name}.lambda.tsv"));
        write_atomic(&path, tsv.as_bytes())?;
        print!("{tsv}");
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn histogram(
    cfg: &PipelineConfig,
    predictions: &Path,
    bins: usize,
    edges: Option<Vec<f64>>,
    raw: bool,
) -> Result<()> {
    let preds = read_predictions(predictions)?;
    if preds.is_empty() {
        return Err(Error::Domain(format!("{} holds no predictions", predictions.display())));
    }
    let corpus = load_corpus(cfg)?;
    let profile = cfg.profile()?;
    let normalizer = profile.normalizer();
    let markers = markers(cfg, &preds)?;
    let transform = if raw { Transform::Identity } else { Transform::Log };

    let items = preds
        .iter()
        .map(|p| {
            let record = corpus
                .get(&p.record_id)
                .ok_or_else(|| Error::UnknownId(p.record_id.clone()))?;
            let j = judge(&markers.classify(&p.text, &normalizer), record, &normalizer);
            Ok((j, p.perplexity))
        })
        .collect::<Result<Vec<_>>>()?;

    let edges = match edges {
        Some(e) => HistogramSpec::new(e, transform)?.bin_edges,
        None => {
            let t: Vec<f64> = items
                .iter()
                .map(|(_, v)| if raw { *v } else { v.ln() })
                .collect();
            let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
            HistogramSpec::uniform(lo, hi, bins, transform)?.bin_edges
        }
    };
    let classes = histogram_by_class(&items, &edges, transform)?;
    let stamp = Stamp::new(cfg)?;
    let tsv = histogram_tsv(&edges, &classes, &stamp.comments(predictions));
    let path = cfg
        .output_dir()
        .join("reports")
        .join(format!("{}.histogram.tsv", stem(predictions)));
    write_atomic(&path, tsv.as_bytes())?;
    print!("{tsv}");
    println!("wrote {}", path.display());
    Ok(())
}
