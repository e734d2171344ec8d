//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code: 0 on success, 1 for user
//! errors (bad input, bad flags, unreadable files) and 2 for internal
//! failures.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use concept_reasoner::alignment::{
    compute_heatmap, concept_scores, filter_concepts, prune_low_similarity,
    threshold_labels, FilterConfig, LABEL_THRESHOLD, PRUNE_FLOOR, CLASS_SIMILARITY,
    MAX_NAME_CHARS, PAIRWISE_SIMILARITY,
};
use concept_reasoner::formats::pgm::save_pgm;
use concept_reasoner::formats::synthetic::{gen_synthetic, SyntheticSpec};
use concept_reasoner::formats::{
    load_checkpoint, load_concept_set, load_manifest, load_tensor, perturb_stability,
    save_checkpoint, save_concept_set, save_tensor, write_concept_labels, write_dataset,
    ConceptLabelTable, LoadedConceptSet, ManifestFile, PerturbationConfig,
};
use concept_reasoner::fuzzy::{format_rule, BOOLEAN_THRESHOLD};
use concept_reasoner::metrics::MetricsBundle;
use concept_reasoner::symbolic::{extract_local_rule, Semantics};
use concept_reasoner::training::{
    argmax, concept_weight_report, evaluate, forward_full, train, Hyperparams, LossCurve,
    ModelParams,
};
use concept_reasoner::{Dataset, Error, Tensor};

pub const OUT_ENV: &str = "CONCEPT_REASONER_OUT";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Parser, Serialize)]
#[command(name = "concept-reasoner", version, about = "Concept labeling, rule learning and evaluation")]
pub struct Cli {
    /// Root for default output directories (`<root>/<subcommand>`).
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Filter a candidate concept set.
    FilterConcepts(FilterArgs),
    /// Pseudo-label concepts from image/text similarity.
    Label(LabelArgs),
    /// Generate a planted-rule synthetic dataset.
    GenSynth(GenSynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a trained model.
    Eval(EvalArgs),
    /// Per-sample explanations.
    Explain(ExplainArgs),
    /// Prediction and explanation stability under feature perturbations.
    Stability(StabilityArgs),
    /// Normalized fusion-head weights per concept and class.
    ReportWeights(ReportWeightsArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::FilterConcepts(_) => "filter-concepts",
            Command::Label(_) => "label",
            Command::GenSynth(_) => "gen-synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Explain(_) => "explain",
            Command::Stability(_) => "stability",
            Command::ReportWeights(_) => "report-weights",
        }
    }

    fn out(&self) -> Option<&PathBuf> {
        match self {
            Command::FilterConcepts(a) => a.out.as_ref(),
            Command::Label(a) => a.out.as_ref(),
            Command::GenSynth(a) => a.out.as_ref(),
            Command::Train(a) => a.out.as_ref(),
            Command::Eval(a) => a.model.out.as_ref(),
            Command::Explain(a) => a.model.out.as_ref(),
            Command::Stability(a) => a.model.out.as_ref(),
            Command::ReportWeights(a) => a.out.as_ref(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FilterArgs {
    /// Concept-set JSON with text embeddings (and class embeddings for the class filter).
    #[arg(long)]
    pub concepts: PathBuf,
    /// Manifest whose feature maps provide scores for the projection filter.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Precomputed `M × N` score tensor for the projection filter.
    #[arg(long, conflicts_with = "manifest")]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = MAX_NAME_CHARS)]
    pub max_name_chars: usize,
    #[arg(long, default_value_t = CLASS_SIMILARITY)]
    pub class_similarity: f64,
    #[arg(long, default_value_t = PAIRWISE_SIMILARITY)]
    pub pairwise_similarity: f64,
    #[arg(long, default_value_t = PRUNE_FLOOR)]
    pub prune_floor: f64,
    #[arg(long)]
    pub no_length_filter: bool,
    /// Disables both the class-similarity and the pairwise filter.
    #[arg(long)]
    pub no_similarity_filter: bool,
    #[arg(long)]
    pub no_class_similarity_filter: bool,
    #[arg(long)]
    pub no_pairwise_filter: bool,
    #[arg(long)]
    pub no_projection_filter: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct LabelArgs {
    /// Manifest whose samples list feature maps.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Concept set to score against; defaults to the manifest's.
    #[arg(long)]
    pub concepts: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = LABEL_THRESHOLD)]
    pub tau: f64,
    #[arg(long, default_value_t = PRUNE_FLOOR)]
    pub prune_floor: f64,
    /// Keep every concept regardless of its best score.
    #[arg(long)]
    pub no_prune: bool,
    /// Also write per-concept heatmaps (PGM and raw tensors).
    #[arg(long)]
    pub saliency: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub concepts: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_concept: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_neural: f64,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `literal` or `filtered`.
    #[arg(long, default_value = "literal")]
    pub semantics: Semantics,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    /// Sets the concept-loss weight to 0.
    #[arg(long)]
    pub no_concept_loss: bool,
    /// Sets the rule-head loss weight to 0.
    #[arg(long)]
    pub no_neural_loss: bool,
}

impl TrainArgs {
    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            lambda_concept: if self.no_concept_loss { 0.0 } else { self.lambda_concept },
            lambda_neural: if self.no_neural_loss { 0.0 } else { self.lambda_neural },
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            semantics: self.semantics,
            hidden: self.hidden,
            width: self.width,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ExplainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Sample ids to explain; all samples when omitted.
    #[arg(long = "sample")]
    pub samples: Vec<String>,
    /// Write concept heatmaps for samples that have feature maps.
    #[arg(long)]
    pub saliency: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct StabilityArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.05)]
    pub eps: f64,
    #[arg(long, default_value_t = 8)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportWeightsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest for concept and class names; indices are used without it.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the exit code. Diagnostics go to standard error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match std::panic::catch_unwind(|| execute(&cli)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
        Err(_) => {
            eprintln!("error: internal failure");
            2
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(core) if !core.is_user_error() => 2,
        _ => 1,
    }
}

/// Output directory for a command: `--out` if given, else `<root>/<name>`.
pub fn resolve_out(cli: &Cli) -> PathBuf {
    cli.command
        .out()
        .cloned()
        .unwrap_or_else(|| cli.out_root.join(cli.command.name()))
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    validate(&cli.command)?;
    let out = resolve_out(cli);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join(RESOLVED_CONFIG), &ResolvedConfig { out: &out, command: &cli.command })?;
    match &cli.command {
        Command::FilterConcepts(a) => filter_cmd(a, &out),
        Command::Label(a) => label_cmd(a, &out),
        Command::GenSynth(a) => gen_synth_cmd(a, &out),
        Command::Train(a) => train_cmd(a, &out),
        Command::Eval(a) => eval_cmd(a, &out),
        Command::Explain(a) => explain_cmd(a, &out),
        Command::Stability(a) => stability_cmd(a, &out),
        Command::ReportWeights(a) => weights_cmd(a, &out),
    }
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    out: &'a Path,
    #[serde(flatten)]
    command: &'a Command,
}

fn check_range(name: &str, v: f64, lo: f64, hi: f64) -> anyhow::Result<()> {
    if !(v.is_finite() && v >= lo && v <= hi) {
        bail!(Error::InvalidConfig(format!("--{name} must lie in [{lo}, {hi}], got {v}")));
    }
    Ok(())
}

fn validate(cmd: &Command) -> anyhow::Result<()> {
    match cmd {
        Command::FilterConcepts(a) => {
            check_range("class-similarity", a.class_similarity, -1.0, 1.0)?;
            check_range("pairwise-similarity", a.pairwise_similarity, -1.0, 1.0)?;
            check_range("prune-floor", a.prune_floor, -1.0, 1.0)?;
        }
        Command::Label(a) => {
            check_range("tau", a.tau, -1.0, 1.0)?;
            check_range("prune-floor", a.prune_floor, -1.0, 1.0)?;
        }
        Command::GenSynth(a) => check_range("noise", a.noise, 0.0, f64::MAX)?,
        Command::Train(a) => a.hyperparams().validate()?,
        Command::Stability(a) => check_range("eps", a.eps, 0.0, f64::MAX)?,
        Command::Eval(_) | Command::Explain(_) | Command::ReportWeights(_) => {}
    }
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn csv_line(fields: &[String]) -> String {
    let mut s = fields
        .iter()
        .map(|f| {
            if f.contains([',', '"', '\n']) {
                format!("\"{}\"", f.replace('"', "\"\""))
            } else {
                f.clone()
            }
        })
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    s
}

/// `M × N` pooled scores for every sample of `manifest` against `concepts`.
fn score_matrix(manifest: &ManifestFile, concepts: &LoadedConceptSet) -> anyhow::Result<Tensor> {
    let n = concepts.concepts.len();
    let m = manifest.manifest.samples.len();
    let mut data = Vec::with_capacity(m * n);
    for s in 0..m {
        let map = manifest.feature_map(s)?;
        data.extend(concept_scores(&map, &concepts.concepts)?);
    }
    Ok(Tensor::new(vec![m, n], data)?)
}

fn filter_cmd(a: &FilterArgs, out: &Path) -> anyhow::Result<()> {
    let set = load_concept_set(&a.concepts)?;
    let scores = match (&a.manifest, &a.scores) {
        (Some(m), _) => Some(score_matrix(&load_manifest(m)?, &set)?),
        (None, Some(p)) => Some(load_tensor(p)?),
        (None, None) => None,
    };
    let cfg = FilterConfig {
        max_name_chars: a.max_name_chars,
        class_similarity: a.class_similarity,
        pairwise_similarity: a.pairwise_similarity,
        projection_floor: a.prune_floor,
        length: !a.no_length_filter,
        class_filter: !(a.no_similarity_filter || a.no_class_similarity_filter),
        pairwise: !(a.no_similarity_filter || a.no_pairwise_filter),
        projection: !a.no_projection_filter,
    };
    let outcome = filter_concepts(&set.concepts, set.class_embeddings.as_ref(), scores.as_ref(), &cfg)?;
    let filtered = LoadedConceptSet {
        concepts: outcome.concepts.clone(),
        class_names: set.class_names.clone(),
        class_embeddings: set.class_embeddings.clone(),
        provenance: Some(outcome.provenance.clone()),
    };
    save_concept_set(out, "concepts", &filtered)?;
    #[derive(Serialize)]
    struct Provenance<'a> {
        kept: &'a [usize],
        stages_run: &'a [concept_reasoner::alignment::FilterStage],
        concepts: &'a [concept_reasoner::alignment::ConceptProvenance],
    }
    write_json(
        &out.join("provenance.json"),
        &Provenance {
            kept: &outcome.kept,
            stages_run: &outcome.stages_run,
            concepts: &outcome.provenance,
        },
    )?;
    eprintln!("kept {} of {} concepts", outcome.kept.len(), set.concepts.len());
    Ok(())
}

fn write_saliency(
    dir: &Path,
    map: &concept_reasoner::alignment::FeatureMap,
    set: &LoadedConceptSet,
) -> anyhow::Result<()> {
    let emb = set.concepts.require_embeddings()?;
    for i in 0..set.concepts.len() {
        let h = compute_heatmap(map, emb.row(i))?;
        save_pgm(dir.join(format!("concept{i:03}.pgm")), &h)?;
        save_tensor(dir.join(format!("concept{i:03}.micn")), &h)?;
    }
    Ok(())
}

fn label_cmd(a: &LabelArgs, out: &Path) -> anyhow::Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let set = match &a.concepts {
        Some(p) => load_concept_set(p)?,
        None => manifest.concept_set()?,
    };
    let scores = score_matrix(&manifest, &set)?;
    save_tensor(out.join("scores.micn"), &scores)?;
    let kept = if a.no_prune {
        (0..set.concepts.len()).collect()
    } else {
        prune_low_similarity(&scores, a.prune_floor)?
    };
    let pruned: Vec<&str> = (0..set.concepts.len())
        .filter(|i| !kept.contains(i))
        .map(|i| set.concepts.names()[i].as_str())
        .collect();
    let labels = threshold_labels(&scores.select_cols(&kept)?, a.tau)?;
    let ids: Vec<String> = manifest.manifest.samples.iter().map(|s| s.id.clone()).collect();
    write_concept_labels(
        out.join("concept_labels.csv"),
        &ConceptLabelTable {
            sample_ids: ids.clone(),
            concept_names: kept.iter().map(|&i| set.concepts.names()[i].clone()).collect(),
            labels,
        },
    )?;
    #[derive(Serialize)]
    struct Pruned<'a> {
        floor: f64,
        kept: &'a [usize],
        pruned: &'a [&'a str],
    }
    write_json(
        &out.join("pruned.json"),
        &Pruned {
            floor: a.prune_floor,
            kept: &kept,
            pruned: &pruned,
        },
    )?;
    if a.saliency {
        for (s, id) in ids.iter().enumerate() {
            write_saliency(&out.join("saliency").join(id), &manifest.feature_map(s)?, &set)?;
        }
    }
    Ok(())
}

fn gen_synth_cmd(a: &GenSynthArgs, out: &Path) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        num_concepts: a.concepts,
        num_classes: a.classes,
        rules: None,
        samples_per_class: a.samples_per_class,
        feature_dim: a.feature_dim,
        noise_std: a.noise,
        seed: a.seed,
    };
    let data = gen_synthetic(&spec)?;
    write_dataset(out, &data.dataset)?;
    let names = &data.dataset.concept_names;
    #[derive(Serialize)]
    struct Planted {
        class: usize,
        text: String,
        literals: Vec<concept_reasoner::fuzzy::Literal>,
    }
    let planted = data
        .rules
        .iter()
        .map(|r| {
            Ok(Planted {
                class: r.class,
                text: format_rule(r, names)?,
                literals: r.literals().to_vec(),
            })
        })
        .collect::<concept_reasoner::Result<Vec<_>>>()?;
    write_json(&out.join("planted_rules.json"), &planted)?;
    Ok(())
}

fn loss_csv(curve: &LossCurve) -> String {
    let mut s = csv_line(&LossCurve::CSV_HEADER.map(String::from));
    for e in &curve.epochs {
        let l = e.loss;
        s.push_str(&csv_line(&[
            e.epoch.to_string(),
            l.task.to_string(),
            l.concept.to_string(),
            l.neural.to_string(),
            l.total.to_string(),
        ]));
    }
    s
}

fn train_cmd(a: &TrainArgs, out: &Path) -> anyhow::Result<()> {
    let dataset = load_manifest(&a.manifest)?.dataset()?;
    let hyper = a.hyperparams();
    let (model, curve) = train(&dataset, &hyper)?;
    save_checkpoint(out.join("checkpoint"), &model)?;
    write_text(&out.join("loss.csv"), &loss_csv(&curve))?;
    if let Some(last) = curve.last() {
        eprintln!(
            "final loss: total {:.6} (task {:.6}, concept {:.6}, rule head {:.6})",
            last.total, last.task, last.concept, last.neural
        );
    }
    Ok(())
}

fn load_model(a: &ModelArgs) -> anyhow::Result<(ModelParams, Dataset, ManifestFile)> {
    let manifest = load_manifest(&a.manifest)?;
    let dataset = manifest.dataset()?;
    let model = load_checkpoint(&a.checkpoint)?;
    Ok((model, dataset, manifest))
}

fn eval_cmd(a: &EvalArgs, out: &Path) -> anyhow::Result<()> {
    let (model, dataset, _) = load_model(&a.model)?;
    let report = evaluate(&model, &dataset)?;
    #[derive(Serialize)]
    struct Metrics<'a> {
        fused: &'a MetricsBundle,
        neural: &'a MetricsBundle,
        rule_error: concept_reasoner::fuzzy::ErrorStat,
    }
    write_json(
        &out.join("metrics.json"),
        &Metrics {
            fused: &report.fused,
            neural: &report.neural,
            rule_error: report.rule_error,
        },
    )?;
    let mut csv = csv_line(&MetricsBundle::CSV_HEADER.map(String::from));
    csv.push_str(&csv_line(&report.fused.csv_record("fused")));
    csv.push_str(&csv_line(&report.neural.csv_record("neural")));
    write_text(&out.join("metrics.csv"), &csv)?;
    write_json(&out.join("rules.json"), &report.rules.to_document(&dataset.concept_names)?)?;
    eprintln!(
        "accuracy: fused {:.4}, rule head {:.4}; rule error {:.4}",
        report.fused.accuracy, report.neural.accuracy, report.rule_error.mean
    );
    Ok(())
}

fn explain_cmd(a: &ExplainArgs, out: &Path) -> anyhow::Result<()> {
    let (model, dataset, manifest) = load_model(&a.model)?;
    let rows: Vec<usize> = if a.samples.is_empty() {
        (0..dataset.len()).collect()
    } else {
        a.samples
            .iter()
            .map(|id| {
                dataset
                    .sample_ids
                    .iter()
                    .position(|s| s == id)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown sample `{id}`")))
            })
            .collect::<Result<_, _>>()?
    };
    let outputs = forward_full(&model, &dataset.features.select_rows(&rows)?)?;
    let concepts = manifest.concept_set()?;
    let names = &dataset.concept_names;

    #[derive(Serialize)]
    struct ConceptScore<'a> {
        concept: &'a str,
        probability: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        alignment: Option<f64>,
    }
    #[derive(Serialize)]
    struct Explanation<'a> {
        id: &'a str,
        label: usize,
        predicted: usize,
        class_probabilities: Vec<f64>,
        truth_degrees: Vec<f64>,
        rule: String,
        concepts: Vec<ConceptScore<'a>>,
    }
    let probs = concept_reasoner::training::softmax_rows(&outputs.logits);
    let mut all = Vec::with_capacity(rows.len());
    for (k, &s) in rows.iter().enumerate() {
        let predicted = argmax(outputs.logits.row(k));
        let rule = extract_local_rule(&outputs.indicators[k], predicted, BOOLEAN_THRESHOLD)?;
        let id = dataset.sample_ids[s].as_str();
        let map = match &manifest.manifest.samples[s].feature_map {
            Some(_) if concepts.concepts.embeddings().is_some() => Some(manifest.feature_map(s)?),
            _ => None,
        };
        let alignment = match &map {
            Some(m) => Some(concept_scores(m, &concepts.concepts)?),
            None => None,
        };
        if let (true, Some(m)) = (a.saliency, &map) {
            write_saliency(&out.join("saliency").join(id), m, &concepts)?;
        }
        all.push(Explanation {
            id,
            label: dataset.labels[s],
            predicted,
            class_probabilities: probs.row(k).to_vec(),
            truth_degrees: outputs.y_neural.row(k).to_vec(),
            rule: format_rule(&rule, names)?,
            concepts: names
                .iter()
                .enumerate()
                .map(|(i, n)| ConceptScore {
                    concept: n,
                    probability: outputs.concept_probs.row(k)[i],
                    alignment: alignment.as_ref().map(|v| v[i]),
                })
                .collect(),
        });
    }
    write_json(&out.join("explanations.json"), &all)?;
    Ok(())
}

fn stability_cmd(a: &StabilityArgs, out: &Path) -> anyhow::Result<()> {
    let (model, dataset, _) = load_model(&a.model)?;
    let cfg = PerturbationConfig {
        eps: a.eps,
        draws: a.draws,
        seed: a.seed,
    };
    let report = perturb_stability(&model, &dataset, &cfg)?;
    write_json(&out.join("stability.json"), &report)?;
    Ok(())
}

fn weights_cmd(a: &ReportWeightsArgs, out: &Path) -> anyhow::Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let cfg = model.config;
    let (concepts, classes) = match &a.manifest {
        Some(p) => {
            let m = load_manifest(p)?;
            let names = m.concept_set()?.concepts.names().to_vec();
            if names.len() != cfg.num_concepts || m.manifest.class_names.len() != cfg.num_classes {
                bail!(Error::InvalidConfig(
                    "manifest concept or class count differs from the checkpoint".into()
                ));
            }
            (names, m.manifest.class_names.clone())
        }
        None => (
            (0..cfg.num_concepts).map(|i| format!("c{i}")).collect(),
            (0..cfg.num_classes).map(|j| format!("class{j}")).collect(),
        ),
    };
    let w = concept_weight_report(&model)?;
    let mut csv = csv_line(&["concept".into(), "class".into(), "weight".into()]);
    for (i, c) in concepts.iter().enumerate() {
        for (j, k) in classes.iter().enumerate() {
            csv.push_str(&csv_line(&[c.clone(), k.clone(), w.get(&[i, j]).to_string()]));
        }
    }
    write_text(&out.join("concept_weights.csv"), &csv)?;
    #[derive(Serialize)]
    struct Counts {
        encoder: usize,
        indicators: usize,
        fusion: usize,
        total: usize,
    }
    write_json(
        &out.join("param_counts.json"),
        &Counts {
            encoder: cfg.encoder().param_count(),
            indicators: cfg.indicators().param_count(),
            fusion: cfg.fusion_param_count(),
            total: cfg.param_count(),
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_a_user_error() {
        assert_eq!(run(["concept-reasoner", "frobnicate"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["concept-reasoner", "--help"]), 0);
    }

    #[test]
    fn ablation_flags_zero_the_weights() {
        let cli = Cli::try_parse_from([
            "x",
            "train",
            "--manifest",
            "m.json",
            "--no-concept-loss",
            "--no-neural-loss",
        ])
        .unwrap();
        let Command::Train(a) = &cli.command else { panic!() };
        let h = a.hyperparams();
        assert_eq!((h.lambda_concept, h.lambda_neural), (0.0, 0.0));
        assert_eq!(h.lr, 5e-5);
        assert_eq!(h.epochs, 100);
    }

    #[test]
    fn default_out_uses_root() {
        let cli = Cli::try_parse_from(["x", "--out-root", "/tmp/r", "gen-synth"]).unwrap();
        assert_eq!(resolve_out(&cli), PathBuf::from("/tmp/r/gen-synth"));
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_line(&["a,b".into(), "c".into()]), "\"a,b\",c\n");
    }
}
