//! Command-line front end. Every flag may also come from a JSON `--config`
//! file; flags win. Exit codes: 0 success, 1 data error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datamodel::{load_annotations, load_embeddings, load_labels, load_probs, SampleId};
use crate::error::Error;
use crate::reference::{fit_nb, NbModel, ReferencePredictor};
use crate::report::{write_json, Meta};
use crate::synth::{self, WorldSpec};
use crate::vision::{self, VisionInputs, VisionOptions};
use crate::vlm::{self, SearchMode, VlmInputs, VlmOptions};

#[derive(Debug, Parser)]
#[command(name = "dejavu", version, about = "Measure déjà vu memorization in representation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the Naive Bayes reference on object annotations and labels.
    NbFit(NbFitArgs),
    /// Image test: target KNN label attack against a reference predictor.
    Vision(VisionArgs),
    /// Vision-language test: object prediction from caption embeddings.
    Vlm(VlmArgs),
    /// Generate a synthetic world with planted memorization.
    Synth(SynthArgs),
    /// Compare reference predictions across several vision reports.
    Agree(AgreeArgs),
}

#[derive(Debug, clap::Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct NbFitArgs {
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Keep only this many top-scoring objects per sample (default: all).
    #[arg(long)]
    top_k_features: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[serde(skip)]
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ReferenceKind {
    Nb,
    Ingested,
    AltKnn,
}

#[derive(Debug, clap::Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct VisionArgs {
    /// Target-model embeddings of the evaluated samples (DVEM).
    #[arg(long)]
    target: Option<PathBuf>,
    /// Target-model embeddings of the labeled public set (DVEM).
    #[arg(long)]
    public: Option<PathBuf>,
    #[arg(long)]
    public_labels: Option<PathBuf>,
    /// Foreground labels of the evaluated samples.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum)]
    reference: Option<ReferenceKind>,
    /// Fitted model from `nb-fit` (reference nb).
    #[arg(long)]
    nb_model: Option<PathBuf>,
    /// Object annotations of the evaluated samples (reference nb).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// External classifier probabilities (reference ingested).
    #[arg(long)]
    probs: Option<PathBuf>,
    /// Second model's embeddings of the evaluated samples (reference alt-knn).
    #[arg(long)]
    alt_target: Option<PathBuf>,
    /// Second model's embeddings of its public set (reference alt-knn).
    #[arg(long)]
    alt_public: Option<PathBuf>,
    /// Labels of the second public set (default: --public-labels).
    #[arg(long)]
    alt_public_labels: Option<PathBuf>,
    /// Neighbors per query (default 10).
    #[arg(long)]
    k: Option<usize>,
    /// Percent for score@p; repeatable (default 20 and 100).
    #[arg(long = "p")]
    p: Vec<f64>,
    /// Histogram bins (default 20).
    #[arg(long)]
    bins: Option<usize>,
    /// Agreement on correctness instead of predicted class.
    #[arg(long)]
    agreement_by_correctness: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[serde(skip)]
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    T2i,
    T2t,
}

#[derive(Debug, clap::Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct VlmArgs {
    /// t2i (default) or t2t.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Target text embeddings of the training captions.
    #[arg(long)]
    target_captions: Option<PathBuf>,
    /// Target image embeddings of the public set (t2i).
    #[arg(long)]
    target_public_img: Option<PathBuf>,
    /// Target text embeddings of the public captions (t2t).
    #[arg(long)]
    target_public_text: Option<PathBuf>,
    /// Reference text embeddings of the training captions.
    #[arg(long)]
    ref_captions: Option<PathBuf>,
    /// Reference text embeddings of the public captions.
    #[arg(long)]
    ref_public: Option<PathBuf>,
    /// Ground-truth objects of the training images.
    #[arg(long)]
    train_objects: Option<PathBuf>,
    #[arg(long)]
    public_objects: Option<PathBuf>,
    /// Neighbors per caption (default 10).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    top_k_objects: Option<usize>,
    /// Neighbor counts for the metric grid; repeatable.
    #[arg(long)]
    grid_k: Vec<usize>,
    /// Object caps for the metric grid (`all` or a number); repeatable.
    #[arg(long)]
    grid_top_k: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[serde(skip)]
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum WorldKind {
    Vision,
    Vlm,
}

#[derive(Debug, clap::Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct SynthArgs {
    /// vision (default) or vlm.
    #[arg(long, value_enum)]
    mode: Option<WorldKind>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    n_objects: Option<usize>,
    /// Correlation strength between class and signature object.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    mem_rate: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_public: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[serde(skip)]
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, clap::Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct AgreeArgs {
    /// `NAME=PATH` of a vision report; repeat for each predictor.
    #[arg(long)]
    report: Vec<String>,
    /// Compare correctness instead of predicted class.
    #[arg(long)]
    by_correctness: bool,
    /// Report whose accuracy is measured on the others' common-correct set.
    #[arg(long)]
    probe: Option<String>,
    /// Restrict to the probe's most confident percent first.
    #[arg(long)]
    top_percent: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[serde(skip)]
    #[command(flatten)]
    common: Common,
}

/// Options shared by every subcommand; never part of the recorded config.
#[derive(Debug, clap::Args, Default)]
struct Common {
    /// JSON file with default values for any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {}", one_line(&e));
            1
        }
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}

fn dispatch(command: Command) -> CliResult<()> {
    let common = match &command {
        Command::NbFit(a) => &a.common,
        Command::Vision(a) => &a.common,
        Command::Vlm(a) => &a.common,
        Command::Synth(a) => &a.common,
        Command::Agree(a) => &a.common,
    };
    let config = common.config.clone();
    let threads = common.threads;
    with_threads(threads, || match command {
        Command::NbFit(a) => nb_fit(merge(&a, config.as_deref())?),
        Command::Vision(a) => run_vision(merge(&a, config.as_deref())?),
        Command::Vlm(a) => run_vlm(merge(&a, config.as_deref())?),
        Command::Synth(a) => run_synth(merge(&a, config.as_deref())?),
        Command::Agree(a) => run_agree(merge(&a, config.as_deref())?),
    })
}

fn with_threads<F>(threads: Option<usize>, f: F) -> CliResult<()>
where
    F: FnOnce() -> CliResult<()> + Send,
{
    match threads {
        None => f(),
        Some(0) => Err(Failure::Usage("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Usage(format!("cannot start {n} threads: {e}")))?
            .install(f),
    }
}

/// Overlays the flags that were actually given onto the config file.
fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> CliResult<T> {
    let given = serde_json::to_value(flags).map_err(Error::from)?;
    let mut base = match config {
        None => serde_json::Value::Object(Default::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
    };
    let Some(base_map) = base.as_object_mut() else {
        return Err(Failure::Usage("config file must hold a JSON object".into()));
    };
    if let serde_json::Value::Object(given) = given {
        for (k, v) in given {
            let unset = match &v {
                serde_json::Value::Null => true,
                serde_json::Value::Bool(b) => !b,
                serde_json::Value::Array(a) => a.is_empty(),
                _ => false,
            };
            if !unset {
                base_map.insert(k, v);
            }
        }
    }
    serde_json::from_value(base).map_err(|e| Failure::Usage(format!("config: {e}")))
}

/// Config recorded in `meta`: everything except where the output goes.
fn meta_config<T: Serialize>(args: &T) -> CliResult<serde_json::Value> {
    let mut v = serde_json::to_value(args).map_err(Error::from)?;
    if let Some(m) = v.as_object_mut() {
        m.remove("out");
        m.remove("out_dir");
    }
    Ok(v)
}

fn need<'a, T>(value: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Failure::Usage(format!("missing required option --{flag}")))
}

/// `<out stem>.<suffix>` next to the report.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

fn nb_fit(a: NbFitArgs) -> CliResult<()> {
    let ann_path = need(&a.annotations, "annotations")?;
    let labels_path = need(&a.labels, "labels")?;
    let out = need(&a.out, "out")?;
    let alpha = a.alpha.unwrap_or(1.0);
    let ann = load_annotations(ann_path)?;
    let labels = load_labels(labels_path)?;
    let top_k = a.top_k_features.unwrap_or(ann.vocabulary().len().max(1));
    let model = fit_nb(&ann, &labels, alpha, top_k)?;

    let mut meta = Meta::new("nb-fit", meta_config(&a)?);
    meta.add_input("annotations", ann_path)?;
    meta.add_input("labels", labels_path)?;

    #[derive(Serialize)]
    struct Saved<'a> {
        meta: Meta,
        #[serde(flatten)]
        model: &'a NbModel,
    }
    write_json(out, &Saved { meta, model: &model })?;
    Ok(())
}

fn run_vision(a: VisionArgs) -> CliResult<()> {
    let target_path = need(&a.target, "target")?;
    let public_path = need(&a.public, "public")?;
    let public_labels_path = need(&a.public_labels, "public-labels")?;
    let labels_path = need(&a.labels, "labels")?;
    let kind = *need(&a.reference, "reference")?;
    let out = need(&a.out, "out")?;
    let k = a.k.unwrap_or(10);
    let mut meta = Meta::new("vision", meta_config(&a)?);

    let reference = match kind {
        ReferenceKind::Nb => {
            let model_path = need(&a.nb_model, "nb-model")?;
            let ann_path = need(&a.annotations, "annotations")?;
            let model = NbModel::load(model_path)?;
            let ann = load_annotations(ann_path)?;
            meta.add_input("nb_model", model_path)?;
            meta.add_input("annotations", ann_path)?;
            ReferencePredictor::naive_bayes(model, &ann)?
        }
        ReferenceKind::Ingested => {
            let probs_path = need(&a.probs, "probs")?;
            let probs = load_probs(probs_path)?;
            meta.add_input("probs", probs_path)?;
            ReferencePredictor::Ingested(probs)
        }
        ReferenceKind::AltKnn => {
            let alt_target = need(&a.alt_target, "alt-target")?;
            let alt_public = need(&a.alt_public, "alt-public")?;
            let alt_labels = a.alt_public_labels.as_ref().unwrap_or(public_labels_path);
            let queries = load_embeddings(alt_target)?;
            let base = load_embeddings(alt_public)?;
            let labels = load_labels(alt_labels)?;
            meta.add_input("alt_target", alt_target)?;
            meta.add_input("alt_public", alt_public)?;
            meta.add_input("alt_public_labels", alt_labels)?;
            ReferencePredictor::alt_knn(&base, labels, k, queries)?
        }
    };

    let inputs = VisionInputs {
        target: load_embeddings(target_path)?,
        public: load_embeddings(public_path)?,
        public_labels: load_labels(public_labels_path)?,
        eval_labels: load_labels(labels_path)?,
        reference,
    };
    meta.add_input("target", target_path)?;
    meta.add_input("public", public_path)?;
    meta.add_input("public_labels", public_labels_path)?;
    meta.add_input("labels", labels_path)?;
    meta.notes.push("score@p ranks samples by target-vote confidence (negative entropy), ties by id".into());

    let opts = VisionOptions {
        k,
        percents: if a.p.is_empty() { VisionOptions::default().percents } else { a.p.clone() },
        hist_bins: a.bins.unwrap_or(VisionOptions::default().hist_bins),
        agreement_by_correctness: a.agreement_by_correctness,
    };
    let mut report = vision::run_vision_test(&inputs, &opts)?;
    report.meta = Some(meta);
    write_json(out, &report)?;
    vision::write_histogram_csv(&sibling(out, "memconf_hist.csv"), &report.histogram_all)?;
    if let Some(h) = &report.histogram_target_correct_ref_wrong {
        vision::write_histogram_csv(&sibling(out, "memconf_hist_target_correct_ref_wrong.csv"), h)?;
    }
    Ok(())
}

fn parse_top_k(s: &str) -> CliResult<Option<usize>> {
    if s == "all" {
        return Ok(None);
    }
    s.parse::<usize>()
        .map(Some)
        .map_err(|_| Failure::Usage(format!("--grid-top-k expects `all` or a number, got {s:?}")))
}

fn run_vlm(a: VlmArgs) -> CliResult<()> {
    let mode = a.mode.unwrap_or(ModeArg::T2i);
    let captions = need(&a.target_captions, "target-captions")?;
    let (public_role, target_public) = match mode {
        ModeArg::T2i => ("target_public_img", need(&a.target_public_img, "target-public-img")?),
        ModeArg::T2t => ("target_public_text", need(&a.target_public_text, "target-public-text")?),
    };
    let ref_captions = need(&a.ref_captions, "ref-captions")?;
    let ref_public = need(&a.ref_public, "ref-public")?;
    let train_objects = need(&a.train_objects, "train-objects")?;
    let public_objects = need(&a.public_objects, "public-objects")?;
    let out = need(&a.out, "out")?;
    let grid_top_k = a
        .grid_top_k
        .iter()
        .map(|s| parse_top_k(s))
        .collect::<CliResult<Vec<_>>>()?;
    if a.grid_k.is_empty() != grid_top_k.is_empty() {
        return Err(Failure::Usage("--grid-k and --grid-top-k must be given together".into()));
    }

    let inputs = VlmInputs {
        target_captions: load_embeddings(captions)?,
        target_public: load_embeddings(target_public)?,
        ref_captions: load_embeddings(ref_captions)?,
        ref_public: load_embeddings(ref_public)?,
        train_objects: load_annotations(train_objects)?,
        public_objects: load_annotations(public_objects)?,
    };
    let mut meta = Meta::new("vlm", meta_config(&a)?);
    meta.add_input("target_captions", captions)?;
    meta.add_input(public_role, target_public)?;
    meta.add_input("ref_captions", ref_captions)?;
    meta.add_input("ref_public", ref_public)?;
    meta.add_input("train_objects", train_objects)?;
    meta.add_input("public_objects", public_objects)?;

    let opts = VlmOptions {
        mode: match mode {
            ModeArg::T2i => SearchMode::T2i,
            ModeArg::T2t => SearchMode::T2t,
        },
        k: a.k.unwrap_or(10),
        top_k_objects: a.top_k_objects,
        grid_k: a.grid_k.clone(),
        grid_top_k,
    };
    let mut report = vlm::run_vlm_test(&inputs, &opts)?;
    report.meta = Some(meta);
    write_json(out, &report)?;
    if !report.grid.is_empty() {
        vlm::write_grid_csv(&sibling(out, "jaccard.csv"), &report, |c| c.jaccard)?;
    }
    Ok(())
}

fn run_synth(a: SynthArgs) -> CliResult<()> {
    let out_dir = need(&a.out_dir, "out-dir")?;
    let d = WorldSpec::default();
    let spec = WorldSpec {
        n_classes: a.n_classes.unwrap_or(d.n_classes),
        n_objects: a.n_objects.unwrap_or(d.n_objects),
        correlation_strength: a.rho.unwrap_or(d.correlation_strength),
        mem_rate: a.mem_rate.unwrap_or(d.mem_rate),
        n_train: a.n_train.unwrap_or(d.n_train),
        n_public: a.n_public.unwrap_or(d.n_public),
        noise_sigma: a.sigma.unwrap_or(d.noise_sigma),
        seed: a.seed.unwrap_or(d.seed),
    };
    let meta = Meta::new("synth", meta_config(&a)?);
    match a.mode.unwrap_or(WorldKind::Vision) {
        WorldKind::Vision => synth::generate(&spec)?.save(out_dir, Some(&meta))?,
        WorldKind::Vlm => synth::generate_vlm(&spec)?.save(out_dir, Some(&meta))?,
    }
    Ok(())
}

/// Per-sample reference outcome read back from a vision report.
struct RefOutcome {
    pred: String,
    correct: bool,
    confidence: f64,
}

fn read_vision_report(path: &Path) -> CliResult<BTreeMap<SampleId, RefOutcome>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
    let bad = |what: &str| {
        Failure::Data(Error::InvalidParameter(format!(
            "{}: not a vision report ({what})",
            path.display()
        )))
    };
    let rows = v["per_sample"].as_array().ok_or_else(|| bad("no per_sample"))?;
    let mut out = BTreeMap::new();
    for row in rows {
        let id = row["id"].as_str().ok_or_else(|| bad("id"))?;
        let outcome = RefOutcome {
            pred: row["pred_ref"].as_str().ok_or_else(|| bad("pred_ref"))?.to_string(),
            correct: row["correct_ref"].as_u64().ok_or_else(|| bad("correct_ref"))? == 1,
            confidence: row["ref_confidence"].as_f64().ok_or_else(|| bad("ref_confidence"))?,
        };
        out.insert(SampleId::new(id)?, outcome);
    }
    Ok(out)
}

#[derive(Serialize)]
struct Intersection {
    probe: String,
    base: Vec<String>,
    top_percent: Option<f64>,
    accuracy: f64,
}

#[derive(Serialize)]
struct AgreeReport {
    meta: Meta,
    mode: &'static str,
    names: Vec<String>,
    matrix: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    intersection: Option<Intersection>,
}

fn run_agree(a: AgreeArgs) -> CliResult<()> {
    let out = need(&a.out, "out")?;
    if a.report.len() < 2 {
        return Err(Failure::Usage("agree needs at least two --report NAME=PATH".into()));
    }
    let mut meta = Meta::new("agree", meta_config(&a)?);
    let mut names = Vec::new();
    let mut reports = Vec::new();
    for spec in &a.report {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--report expects NAME=PATH, got {spec:?}")))?;
        if names.iter().any(|n| n == name) {
            return Err(Failure::Usage(format!("duplicate report name {name:?}")));
        }
        let path = Path::new(path);
        reports.push(read_vision_report(path)?);
        meta.add_input(name, path)?;
        names.push(name.to_string());
    }

    let n = reports.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            matrix[i][j] = if a.by_correctness {
                let x: BTreeMap<_, _> = reports[i].iter().map(|(id, o)| (id.clone(), o.correct)).collect();
                let y: BTreeMap<_, _> = reports[j].iter().map(|(id, o)| (id.clone(), o.correct)).collect();
                vision::agreement_fraction(&x, &y)?
            } else {
                let x: BTreeMap<_, _> = reports[i].iter().map(|(id, o)| (id.clone(), o.pred.clone())).collect();
                let y: BTreeMap<_, _> = reports[j].iter().map(|(id, o)| (id.clone(), o.pred.clone())).collect();
                vision::agreement_fraction(&x, &y)?
            };
        }
    }

    let intersection = match &a.probe {
        None => None,
        Some(probe) => {
            let pi = names
                .iter()
                .position(|n| n == probe)
                .ok_or_else(|| Failure::Usage(format!("--probe {probe:?} is not a report name")))?;
            let correct = |r: &BTreeMap<SampleId, RefOutcome>| -> BTreeMap<SampleId, bool> {
                r.iter().map(|(id, o)| (id.clone(), o.correct)).collect()
            };
            let base: Vec<_> = (0..n).filter(|&i| i != pi).map(|i| correct(&reports[i])).collect();
            let conf: BTreeMap<SampleId, f64> =
                reports[pi].iter().map(|(id, o)| (id.clone(), o.confidence)).collect();
            let accuracy = vision::intersection_accuracy(
                &base,
                &correct(&reports[pi]),
                a.top_percent.map(|p| (p, &conf)),
            )?;
            meta.notes.push(
                "top_percent keeps the probe's most confident samples; a top-N-predictions reading is not implemented"
                    .into(),
            );
            Some(Intersection {
                probe: probe.clone(),
                base: names.iter().filter(|n| *n != probe).cloned().collect(),
                top_percent: a.top_percent,
                accuracy,
            })
        }
    };

    let report = AgreeReport {
        meta,
        mode: if a.by_correctness { "correctness" } else { "prediction" },
        names: names.clone(),
        matrix,
        intersection,
    };
    write_json(out, &report)?;

    let csv_path = sibling(out, "agreement.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(Error::from)?;
    let mut header = vec![String::new()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(Error::from)?;
    for (name, row) in names.iter().zip(&report.matrix) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| crate::report::format_sig17(*v)));
        w.write_record(&rec).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}
