use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use condcause::corpus::{
    aggregate_annotations, apply_label, duplicate_per_pair, load_corpus, load_judgments, load_raw_records,
    AnnotatorJudgment, Corpus, Embeddings, TypeCounts,
};
use condcause::eval::{make_report, ConfigRun, FoldMetrics, RunReport};
use condcause::model::{load_checkpoint, save_checkpoint, Encoder, ModelConfig};
use condcause::rng::RngStream;
use condcause::sampler::{build_dataset, published_totals_note, realized_counts, solve_n, SamplePlan};
use condcause::synth::{generate_corpus, synthetic_embeddings, SynthConfig};
use condcause::train::{
    apply_settings, evaluate, gradcheck_objective, grid_search, micro_batch, parse_settings, run_cv, settings_echo,
    TrainConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "condcause",
    version,
    about = "Conditional emotion-cause relationship recognition"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, embeddings and its causal table.
    Gen(GenArgs),
    /// Merge three annotators' judgments into a labeled corpus.
    Aggregate(AggregateArgs),
    /// Print the sampling plan and optionally build the sampled corpus.
    Negsample(NegsampleArgs),
    /// Cross-validate one model configuration.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Finite-difference check of the training objective on a micro-batch.
    Gradcheck(GradcheckArgs),
    /// Cross-validate over an eta/tau grid.
    Gridsearch(GridArgs),
    /// Merge metrics files into one table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory for corpus.jsonl, embeddings.txt and table.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_docs: usize,
    #[arg(long, default_value_t = 400)]
    vocab_size: usize,
    /// Maximum clause length.
    #[arg(long, default_value_t = 5)]
    clause_len: usize,
    /// Maximum number of context clauses.
    #[arg(long, default_value_t = 4)]
    max_context: usize,
    #[arg(long, default_value_t = 0.4)]
    fraction_conditional: f64,
    /// Share of conditional documents without their condition clause.
    #[arg(long, default_value_t = 0.2)]
    fraction_missing: f64,
    #[arg(long, default_value_t = 20)]
    n_events: usize,
    #[arg(long, default_value_t = 20)]
    n_cond_events: usize,
    /// Emotion tokens per polarity group.
    #[arg(long, default_value_t = 4)]
    n_emotions: usize,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    /// Multi-pair source records, one JSON object per line.
    #[arg(long)]
    raw: PathBuf,
    /// The three annotators' judgment files.
    #[arg(long, num_args = 3, required = true)]
    annotators: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct NegsampleArgs {
    /// Labeled corpus to sample from.
    #[arg(long, conflicts_with = "counts")]
    corpus: Option<PathBuf>,
    /// Plan only, for counts "not_causal,conditional,others".
    #[arg(long)]
    counts: Option<String>,
    /// Samples per document.
    #[arg(long, default_value_t = 2)]
    n: usize,
    /// Upper bound for the suggested n.
    #[arg(long, default_value_t = 5)]
    n_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the sampled corpus here (needs --corpus).
    #[arg(long, requires = "corpus")]
    out: Option<PathBuf>,
}

/// Model settings. Field names double as config-file keys.
#[derive(Args, Debug)]
struct ModelFlags {
    /// Context encoder: cc, bl or sa.
    #[arg(long, default_value = "sa")]
    encoder: String,
    /// Context mask module.
    #[arg(long, default_value = "true", num_args = 0..=1, default_missing_value = "true")]
    cmm: String,
    /// Blend the with-context and context-free predictions.
    #[arg(long, default_value = "true", num_args = 0..=1, default_missing_value = "true")]
    pam: String,
    #[arg(long, default_value = "100")]
    hidden: String,
    #[arg(long, default_value = "32")]
    embed_dim: String,
    #[arg(long, default_value = "1")]
    heads: String,
    #[arg(long, default_value = "0.2")]
    dropout: String,
    /// Mask probability at or above which a clause counts as PR.
    #[arg(long, default_value = "0.1")]
    threshold: String,
    /// Half-width of the uniform parameter initialization.
    #[arg(long, default_value = "0.1")]
    init_scale: String,
}

impl ModelFlags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        vec![
            ("encoder", &self.encoder),
            ("cmm", &self.cmm),
            ("pam", &self.pam),
            ("hidden", &self.hidden),
            ("embed_dim", &self.embed_dim),
            ("heads", &self.heads),
            ("dropout", &self.dropout),
            ("threshold", &self.threshold),
            ("init_scale", &self.init_scale),
        ]
    }
}

/// Training settings. Field names double as config-file keys.
#[derive(Args, Debug)]
struct TrainFlags {
    /// Weight of the classification loss.
    #[arg(long, default_value = "0.1")]
    eta: String,
    /// Weight of the mask loss.
    #[arg(long, default_value = "10")]
    tau: String,
    /// L2 weight.
    #[arg(long, default_value = "0.00001")]
    gamma: String,
    #[arg(long, default_value = "0.001")]
    lr: String,
    #[arg(long, default_value = "128")]
    batch: String,
    #[arg(long, default_value = "30")]
    epochs: String,
    #[arg(long, default_value = "0")]
    seed: String,
    #[arg(long, default_value = "5")]
    folds: String,
    /// Cross-entropy terms: comma-separated subset of y, yo, yc.
    #[arg(long, default_value = "y,yo")]
    loss_terms: String,
    /// Global gradient-norm clip, or "off".
    #[arg(long, default_value = "5")]
    clip: String,
    /// Share of training sources held out for checkpoint selection.
    #[arg(long, default_value = "0.1")]
    val_fraction: String,
    /// Epochs without validation improvement before stopping, or "off".
    #[arg(long, default_value = "off")]
    patience: String,
    /// Folds trained concurrently.
    #[arg(long, default_value = "1")]
    parallel_folds: String,
}

impl TrainFlags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        vec![
            ("eta", &self.eta),
            ("tau", &self.tau),
            ("gamma", &self.gamma),
            ("lr", &self.lr),
            ("batch", &self.batch),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("folds", &self.folds),
            ("loss_terms", &self.loss_terms),
            ("clip", &self.clip),
            ("val_fraction", &self.val_fraction),
            ("patience", &self.patience),
            ("parallel_folds", &self.parallel_folds),
        ]
    }
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct TrainArgs {
    /// Sampled corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Pretrained word embeddings.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Settings file of `key = value` lines; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for report.txt, metrics.json and per-fold checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    /// Also write the metrics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct GradcheckArgs {
    /// Seeds the micro-batch corpus and the parameters.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Check one encoder (with --cmm/--pam); all twelve variants otherwise.
    #[arg(long)]
    encoder: Option<Encoder>,
    #[arg(long, default_value = "true", num_args = 0..=1, default_missing_value = "true")]
    cmm: String,
    #[arg(long, default_value = "true", num_args = 0..=1, default_missing_value = "true")]
    pam: String,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct GridArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated eta values.
    #[arg(long, default_value = "0.01,0.1,0.5,1")]
    etas: String,
    /// Comma-separated tau values.
    #[arg(long, default_value = "1,5,10,100")]
    taus: String,
    /// Write the grid table here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// metrics.json files written by train or eval.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Write the merged table here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let sub = matches.subcommand().map(|(_, m)| m);
    match run(cli.command, sub) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command, sub: Option<&ArgMatches>) -> Result<ExitCode> {
    match command {
        Command::Gen(a) => gen(&a),
        Command::Aggregate(a) => aggregate(&a),
        Command::Negsample(a) => negsample(&a),
        Command::Train(a) => train(&a, sub),
        Command::Eval(a) => eval(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Gridsearch(a) => gridsearch(&a, sub),
        Command::Report(a) => report(&a),
    }
}

fn gen(a: &GenArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        vocab_size: a.vocab_size,
        n_docs: a.n_docs,
        clause_len: a.clause_len,
        max_context: a.max_context,
        fraction_conditional: a.fraction_conditional,
        fraction_missing_condition: a.fraction_missing,
        seed: a.seed,
        n_events: a.n_events,
        n_cond_events: a.n_cond_events,
        n_emotions: a.n_emotions,
    };
    let (corpus, table) = generate_corpus(&cfg)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    corpus.save(&a.out_dir.join("corpus.jsonl"))?;
    synthetic_embeddings(&cfg, a.embed_dim).save(&a.out_dir.join("embeddings.txt"))?;
    table.save(&a.out_dir.join("table.json"))?;
    let c = corpus.counts();
    println!(
        "wrote {} documents (not causal {}, conditional {}, others {}) to {}",
        corpus.len(),
        c.not_causal,
        c.conditional,
        c.others,
        a.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn aggregate(a: &AggregateArgs) -> Result<ExitCode> {
    let raw = load_raw_records(&a.raw)?;
    let mut docs = duplicate_per_pair(&raw);
    let mut per_annotator: Vec<HashMap<String, AnnotatorJudgment>> = Vec::new();
    for path in &a.annotators {
        let items = load_judgments(path).with_context(|| format!("reading {}", path.display()))?;
        per_annotator.push(items.into_iter().map(|j| (j.doc_id.clone(), j)).collect());
    }
    for doc in &mut docs {
        let get = |k: usize| {
            per_annotator[k]
                .get(&doc.id)
                .cloned()
                .with_context(|| format!("annotator {} has no judgment for {}", k + 1, doc.id))
        };
        let label = aggregate_annotations(&[get(0)?, get(1)?, get(2)?])?;
        apply_label(doc, &label)?;
    }
    let corpus = Corpus::new(docs)?;
    corpus.save(&a.out)?;
    let c = corpus.counts();
    println!(
        "wrote {} documents (not causal {}, conditional {}, others {}) to {}",
        corpus.len(),
        c.not_causal,
        c.conditional,
        c.others,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_counts(s: &str) -> Result<TypeCounts> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("counts must be three integers, got {s:?}"))?;
    match parts[..] {
        [nc, con, o] => Ok(TypeCounts::new(nc, con, o)),
        _ => bail!("counts must be three integers, got {s:?}"),
    }
}

fn negsample(a: &NegsampleArgs) -> Result<ExitCode> {
    let corpus = a.corpus.as_deref().map(load_corpus).transpose()?;
    let counts = match (&corpus, &a.counts) {
        (Some(c), _) => c.counts(),
        (None, Some(s)) => parse_counts(s)?,
        (None, None) => bail!("give --corpus or --counts"),
    };
    let plan = SamplePlan::new(counts, a.n);
    println!(
        "counts: not causal {}, conditional {}, others {}",
        counts.not_causal, counts.conditional, counts.others
    );
    println!(
        "n = {}: N_pos = {}, N_neg = {}, ratio = {:.4}",
        plan.n, plan.n_pos, plan.n_neg, plan.ratio
    );
    match solve_n(counts, a.n_max) {
        Ok(best) => {
            let p = SamplePlan::new(counts, best);
            println!(
                "advisory: n = {best} is closest to balance for n <= {} (N_pos = {}, N_neg = {}, |ratio - 1| = {:.4})",
                a.n_max,
                p.n_pos,
                p.n_neg,
                (p.ratio - 1.0).abs()
            );
        }
        Err(e) => println!("advisory: none ({e})"),
    }
    if let Some(note) = published_totals_note(counts, a.n) {
        println!("note: {note}");
    }
    if let (Some(c), Some(out)) = (&corpus, &a.out) {
        let sampled = build_dataset(c, a.n, &RngStream::new(a.seed))?;
        sampled.save(out)?;
        let (pos, neg) = realized_counts(sampled.documents());
        println!(
            "wrote {} documents ({pos} positive, {neg} negative) to {}",
            sampled.len(),
            out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

/// Defaults, then the settings file, then flags given on the command line.
fn resolve(
    model: &ModelFlags,
    train: &TrainFlags,
    config: Option<&Path>,
    matches: Option<&ArgMatches>,
) -> Result<(ModelConfig, TrainConfig)> {
    let explicit = |key: &str| matches.and_then(|m| m.value_source(key)) == Some(ValueSource::CommandLine);
    let flags: Vec<(&str, &str)> = model.pairs().into_iter().chain(train.pairs()).collect();
    let own = |v: &[(&str, &str)], cli: bool| -> Vec<(String, String)> {
        v.iter()
            .filter(|(k, _)| explicit(k) == cli)
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    };
    let mut settings = own(&flags, false);
    if let Some(path) = config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        settings.extend(parse_settings(&text).with_context(|| format!("in {}", path.display()))?);
    }
    settings.extend(own(&flags, true));
    let (mut mc, mut tc) = (ModelConfig::default(), TrainConfig::default());
    apply_settings(&settings, &mut mc, &mut tc)?;
    mc.validate()?;
    tc.validate()?;
    Ok((mc, tc))
}

fn load_embeddings(path: Option<&Path>) -> Result<Option<Embeddings>> {
    path.map(|p| Embeddings::load(p).with_context(|| format!("reading {}", p.display())))
        .transpose()
}

fn train(a: &TrainArgs, sub: Option<&ArgMatches>) -> Result<ExitCode> {
    let (mc, tc) = resolve(&a.model, &a.train, a.config.as_deref(), sub)?;
    let corpus = load_corpus(&a.corpus)?;
    let emb = load_embeddings(a.embeddings.as_deref())?;
    let (report, models) = run_cv(&corpus, &mc, &tc, emb.as_ref())?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (k, m) in models.iter().enumerate() {
        save_checkpoint(m, &a.out_dir.join(format!("fold{}.ckpt", k + 1)))?;
    }
    let text = report.to_text();
    fs::write(a.out_dir.join("report.txt"), &text)?;
    fs::write(a.out_dir.join("metrics.json"), report.to_json()?)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let model = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let (counts, mask) = evaluate(&model, corpus.documents(), a.batch)?;
    let run = ConfigRun {
        label: model.config().label(),
        folds: vec![FoldMetrics::new(0, counts, mask)],
    };
    let settings = vec![
        ("checkpoint".to_string(), a.checkpoint.display().to_string()),
        ("corpus".to_string(), a.corpus.display().to_string()),
    ];
    let report = make_report(vec![run], settings)?;
    if let Some(path) = &a.json {
        fs::write(path, report.to_json()?)?;
    }
    print!("{}", report.to_text());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let synth = SynthConfig {
        n_docs: 40,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let (corpus, _) = generate_corpus(&synth)?;
    let docs = micro_batch(corpus.documents())?;
    let base = ModelConfig {
        hidden: a.hidden,
        embed_dim: a.embed_dim,
        max_context: synth.max_context,
        clause_len: synth.clause_len,
        ..ModelConfig::default()
    };
    let variants: Vec<ModelConfig> = match a.encoder {
        Some(encoder) => vec![ModelConfig {
            encoder,
            use_cmm: condcause::train::parse_bool("cmm", &a.cmm)?,
            use_pam: condcause::train::parse_bool("pam", &a.pam)?,
            ..base
        }],
        None => Encoder::ALL
            .into_iter()
            .flat_map(|encoder| {
                [(false, false), (false, true), (true, false), (true, true)].map(|(use_cmm, use_pam)| ModelConfig {
                    encoder,
                    use_cmm,
                    use_pam,
                    ..base.clone()
                })
            })
            .collect(),
    };
    let tc = TrainConfig::default();
    let mut worst: f64 = 0.0;
    for mc in &variants {
        let r = gradcheck_objective(mc, &tc, &docs, a.seed, a.h)?;
        let at = r.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")).unwrap_or_default();
        println!(
            "{:<8} max relative error {:.3e} over {} coordinates (worst {at}, |a - n| = {:.1e}); failing coordinates {}",
            mc.label(),
            r.max_rel_error,
            r.checked,
            (r.worst_analytic - r.worst_numeric).abs(),
            r.failures(a.tol)
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e} (tolerance {:e})", a.tol);
    if worst < a.tol {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient check above tolerance");
        Ok(ExitCode::from(1))
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number {p:?} in {s:?}"))
        })
        .collect()
}

fn gridsearch(a: &GridArgs, sub: Option<&ArgMatches>) -> Result<ExitCode> {
    let (mc, tc) = resolve(&a.model, &a.train, a.config.as_deref(), sub)?;
    let corpus = load_corpus(&a.corpus)?;
    let emb = load_embeddings(a.embeddings.as_deref())?;
    let grid = grid_search(
        &corpus,
        &mc,
        &tc,
        &parse_list(&a.etas)?,
        &parse_list(&a.taus)?,
        emb.as_ref(),
    )?;
    let mut text = String::new();
    for (k, v) in settings_echo(&mc, &tc).iter().filter(|(k, _)| k != "eta" && k != "tau") {
        text.push_str(&format!("# {k} = {v}\n"));
    }
    text.push_str(&grid.to_text());
    if let Some(out) = &a.out {
        fs::write(out, &text)?;
    }
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn report(a: &ReportArgs) -> Result<ExitCode> {
    let mut reports = Vec::new();
    for path in &a.inputs {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let r = RunReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
        reports.push(r);
    }
    let merged = RunReport::merge(&reports)?;
    let text = merged.to_text();
    if let Some(out) = &a.out {
        fs::write(out, &text)?;
    }
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}
