//! Command-line front end. Every subcommand reads the same TOML run file,
//! writes its artifacts under `--out` together with a checksum manifest, and
//! appends one record to `<out>/audit.jsonl`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 usage error, 3 any other
//! failure (bad input, failed check, I/O).

use crate::corpus::{
    config_hash, doctrine_principles, gen_synthetic_corpus, lexicon_terms, read_jsonl, write_jsonl, ArtifactMeta, CorpusRecord,
    CorpusSpec, DocumentSegment,
};
use crate::dedup::{lsh_dedup, DedupConfig};
use crate::diagnostics::{gradient_suite, GRAD_TOLERANCE};
use crate::error::{bail, Error, Result};
use crate::eval::{
    anova_f, brier_score, cohen_kappa, fleiss_kappa, model_perplexity, read_forecasts, read_rows, reliability_report,
    simulate_calibrated, write_forecasts,
};
use crate::model::{load_checkpoint, save_checkpoint, InferenceModel, Model, ModelConfig, PackedContext};
use crate::profile::{attention_profile, latency_profile, write_profile_csv, AttentionKernel};
use crate::tokenizer::{train_bpe, Vocabulary};
use crate::train::{
    fisher_diag, kl_divergence_rows, planted_preference_fixture, train, train_reward_model, write_metrics_csv, EwcState,
    Objective, PreferencePair, RewardModel, RewardTrainConfig, StepMetrics, TrainConfig,
};
use crate::wargame::{
    format_trace, normalized_alignment, read_trace, run_scenario, smith_waterman, throughput_bench, AlignmentScoring, OpforProfile,
    Scenario, Side,
};
use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

#[derive(Parser, Debug)]
#[command(name = "stratlab", version, about = "Desk-scale document-aware language model laboratory")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML run file; omitted sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the run file's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, short, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the seeded synthetic corpus and its cross-document probes.
    GenCorpus,
    /// Remove near-duplicate documents with MinHash LSH.
    Dedup {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train a byte-pair vocabulary and extend it with the unit lexicon.
    TrainBpe {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Pretrain a model on a corpus with the composite objective.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Fine-tune with cross-entropy plus KL to a reference model.
    Sft {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Reference checkpoint; defaults to the starting model.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Train a pairwise reward model on preference pairs or the planted fixture.
    RewardTrain {
        /// JSONL preference pairs; the last fifth is held out.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Continue training on task B with an EWC anchor computed on task A.
    EwcUpdate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task_a: PathBuf,
        #[arg(long)]
        task_b: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Evaluation statistics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Symbolic wargame tools.
    #[command(subcommand)]
    Wargame(WargameCommand),
    /// Compare dense and INT8 weight-quantised perplexity.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Latency versus context length for attention kernels and, optionally, a model.
    ProfileLatency {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Finite-difference gradient suite.
    GradCheck,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    Perplexity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        int8: bool,
    },
    /// Brier score of `probability,outcome,horizon_months` rows.
    Brier {
        #[arg(long)]
        forecasts: PathBuf,
    },
    /// Reliability bins and ECE of a forecast file or of simulated calibrated forecasts.
    Calibration {
        #[arg(long, required_unless_present = "simulate")]
        forecasts: Option<PathBuf>,
        #[arg(long, conflicts_with = "forecasts")]
        simulate: Option<usize>,
    },
    /// Cohen's kappa for two rating columns, Fleiss' kappa for more.
    Kappa {
        #[arg(long)]
        ratings: PathBuf,
    },
    /// One-way ANOVA over `group,value` rows.
    Anova {
        #[arg(long)]
        groups: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum WargameCommand {
    /// Play a scenario between two scripted policies.
    Run {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        blue: Option<String>,
        #[arg(long)]
        red: Option<String>,
    },
    /// Local alignment of two action-trace files.
    Align { a: PathBuf, b: PathBuf },
    /// Adjudication throughput over a fixed wall-clock budget.
    Bench {
        #[arg(long)]
        scenario: Vec<PathBuf>,
        #[arg(long)]
        seconds: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Trailing share of packed contexts held out for validation.
    pub validation_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { validation_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    pub lexicon: bool,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { vocab_size: 448, lexicon: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub model: ModelConfig,
    pub train: RewardTrainConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub token_start: usize,
    pub token_end: usize,
    pub completion_len: usize,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            model: ModelConfig { d_model: 16, d_head: 8, n_heads: 2, mlp_hidden: 32, d_doc: 16, max_context: 16, ..ModelConfig::tiny(40) },
            train: RewardTrainConfig::default(),
            n_train: 400,
            n_test: 200,
            token_start: 20,
            token_end: 36,
            completion_len: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bins: usize,
    pub horizon_months: u32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { bins: 10, horizon_months: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WargameSection {
    pub blue: OpforProfile,
    pub red: OpforProfile,
    pub scoring: AlignmentScoring,
    pub bench_seconds: f64,
}

impl Default for WargameSection {
    fn default() -> Self {
        Self {
            blue: OpforProfile::Aggressive,
            red: OpforProfile::StaticDefense,
            scoring: AlignmentScoring::default(),
            bench_seconds: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub lengths: Vec<usize>,
    pub model_lengths: Vec<usize>,
    pub d_head: usize,
    pub repetitions: usize,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self { lengths: vec![256, 512, 1024, 2048, 4096], model_lengths: vec![32, 64, 128, 256], d_head: 64, repetitions: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: GRAD_TOLERANCE }
    }
}

/// The single run-file schema shared by every subcommand.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    pub seed: u64,
    pub data: DataSection,
    pub corpus: CorpusSpec,
    pub dedup: DedupConfig,
    pub tokenizer: TokenizerSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reward: RewardSection,
    pub eval: EvalSection,
    pub wargame: WargameSection,
    pub profile: ProfileSection,
    pub gradcheck: GradCheckSection,
}

impl RunFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    /// Applies a seed override and propagates the seed to every seeded section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        let s = self.seed;
        self.dedup.seed = s;
        self.model.seed = s;
        self.train.seed = s;
        self.reward.model.seed = s;
        self.reward.train.seed = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("[{name}] {e}")));
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            bail!(Config, "[data] validation_fraction must lie in [0, 1)");
        }
        field("corpus", self.corpus.validate())?;
        field("model", self.model.validate())?;
        field("train", self.train.validate())?;
        field("reward.model", self.reward.model.validate())?;
        field("reward.train", self.reward.train.optimizer.validate())?;
        field("wargame.scoring", self.wargame.scoring.validate())?;
        if self.tokenizer.vocab_size < 2 {
            bail!(Config, "[tokenizer] vocab_size must be at least 2");
        }
        if self.eval.bins == 0 {
            bail!(Config, "[eval] bins must be positive");
        }
        if self.reward.token_end < self.reward.token_start + 2 || self.reward.completion_len == 0 {
            bail!(Config, "[reward] needs token_end >= token_start + 2 and completion_len >= 1");
        }
        if self.profile.repetitions < 3 || self.profile.d_head == 0 {
            bail!(Config, "[profile] needs repetitions >= 3 and d_head >= 1");
        }
        Ok(())
    }
}

/// Formats a metric with at most 12 decimals and no trailing zeros, so
/// last-place rounding noise does not reach the terminal.
pub fn fmt_metric(x: f64) -> String {
    if x != 0.0 && x.abs() < 1e-6 {
        return format!("{x:e}");
    }
    let s = format!("{x:.12}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

struct Run {
    cfg: RunFile,
    hash: String,
    out: PathBuf,
    quiet: bool,
    verbose: bool,
    artifacts: Vec<String>,
}

impl Run {
    fn meta(&self) -> ArtifactMeta {
        ArtifactMeta { seed: self.cfg.seed, config_hash: self.hash.clone() }
    }

    fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn artifact(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.out.join(name)
    }

    /// Writes a JSON report stamped with seed and config hash.
    fn report(&mut self, name: &str, mut body: Value) -> Result<()> {
        if let Value::Object(m) = &mut body {
            m.insert("seed".into(), json!(self.cfg.seed));
            m.insert("config_hash".into(), json!(self.hash));
        }
        let path = self.artifact(name);
        std::fs::write(path, serde_json::to_string_pretty(&body)? + "\n")?;
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.artifact(name);
        std::fs::write(path, body)?;
        Ok(())
    }

    fn write_manifest(&self, slug: &str) -> Result<()> {
        let mut files = IndexMap::new();
        for name in &self.artifacts {
            let bytes = std::fs::read(self.out.join(name))?;
            let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            files.insert(name.clone(), digest);
        }
        let body = json!({ "subcommand": slug, "seed": self.cfg.seed, "config_hash": self.hash, "artifacts": files });
        std::fs::write(self.out.join(format!("{slug}.manifest.json")), serde_json::to_string_pretty(&body)? + "\n")?;
        Ok(())
    }

    fn split<'a>(&self, data: &'a [PackedContext]) -> (&'a [PackedContext], &'a [PackedContext]) {
        let n_val = ((data.len() as f64) * self.cfg.data.validation_fraction).ceil() as usize;
        let n_val = if data.len() > 1 { n_val.min(data.len() - 1) } else { 0 };
        data.split_at(data.len() - n_val)
    }

    fn step_logger(&self) -> impl FnMut(&StepMetrics, &Model) -> Result<()> + '_ {
        move |m: &StepMetrics, _: &Model| {
            if self.verbose {
                eprintln!("step {:>6} lr {:.3e} clm {:.4} total {:.4} grad {:.3}", m.step, m.lr, m.l_clm, m.total, m.grad_norm);
            }
            Ok(())
        }
    }
}

fn slug(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenCorpus => "gen-corpus",
        Command::Dedup { .. } => "dedup",
        Command::TrainBpe { .. } => "train-bpe",
        Command::Pretrain { .. } => "pretrain",
        Command::Sft { .. } => "sft",
        Command::RewardTrain { .. } => "reward-train",
        Command::EwcUpdate { .. } => "ewc-update",
        Command::Eval(e) => match e {
            EvalCommand::Perplexity { .. } => "eval-perplexity",
            EvalCommand::Brier { .. } => "eval-brier",
            EvalCommand::Calibration { .. } => "eval-calibration",
            EvalCommand::Kappa { .. } => "eval-kappa",
            EvalCommand::Anova { .. } => "eval-anova",
        },
        Command::Wargame(w) => match w {
            WargameCommand::Run { .. } => "wargame-run",
            WargameCommand::Align { .. } => "wargame-align",
            WargameCommand::Bench { .. } => "wargame-bench",
        },
        Command::Quantize { .. } => "quantize",
        Command::ProfileLatency { .. } => "profile-latency",
        Command::GradCheck => "grad-check",
    }
}

fn load_run_file(common: &Common) -> Result<RunFile> {
    let base = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunFile::from_toml(&text)?
        }
        None => RunFile::default(),
    };
    let cfg = base.with_seed(common.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn audit(out: &Path, slug: &str, hash: Option<&str>, seed: Option<u64>, outcome: &str, detail: Option<&str>) {
    let line = json!({
        "timestamp": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        "subcommand": slug,
        "config_hash": hash,
        "seed": seed,
        "outcome": outcome,
        "detail": detail,
    });
    let res = std::fs::create_dir_all(out).and_then(|_| {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(out.join("audit.jsonl"))?;
        writeln!(f, "{line}")
    });
    if let Err(e) = res {
        eprintln!("warning: audit log not written: {e}");
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let name = slug(&cli.command);
    let cfg = match load_run_file(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            audit(&cli.common.out, name, None, cli.common.seed, "config-error", Some(&e.to_string()));
            return 1;
        }
    };
    let hash = match config_hash(&cfg) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: {e}");
            return 3;
        }
    };
    let mut run = Run { cfg, hash, out: cli.common.out.clone(), quiet: cli.common.quiet, verbose: cli.common.verbose, artifacts: vec![] };
    let result = std::fs::create_dir_all(&run.out).map_err(Error::from).and_then(|_| execute(&mut run, &cli.command)).and_then(|_| run.write_manifest(name));
    let (code, outcome, detail) = match &result {
        Ok(()) => (0, "ok", None),
        Err(Error::Config(m)) => (1, "config-error", Some(m.clone())),
        Err(e) => (3, "error", Some(e.to_string())),
    };
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    audit(&run.out, name, Some(&run.hash), Some(run.cfg.seed), outcome, detail.as_deref());
    code
}

fn load_segments(path: &Path, vocab: &Vocabulary) -> Result<Vec<DocumentSegment>> {
    let recs: Vec<CorpusRecord> = read_jsonl(path)?;
    if recs.is_empty() {
        bail!(Input, "{} holds no documents", path.display());
    }
    Ok(recs.iter().map(|r| DocumentSegment::from_record(r, vocab)).collect())
}

fn pack_for(model_cfg: &ModelConfig, window: usize, segs: &[DocumentSegment]) -> Result<Vec<PackedContext>> {
    PackedContext::pack_stream(segs, window.min(model_cfg.max_context))
}

fn check_vocab(model: &Model, vocab: &Vocabulary) -> Result<()> {
    if model.cfg.vocab_size < vocab.len() {
        bail!(Input, "model vocabulary {} smaller than tokenizer vocabulary {}", model.cfg.vocab_size, vocab.len());
    }
    Ok(())
}

fn mean_kl(model: &Model, reference: &InferenceModel, data: &[PackedContext]) -> Result<f64> {
    let cur = InferenceModel::new(model)?;
    let mut total = 0.0;
    for c in data {
        let flags: Vec<bool> = c.targets.iter().map(Option::is_some).collect();
        total += kl_divergence_rows(&cur.logits(c)?, &reference.logits(c)?, &flags)?;
    }
    Ok(total / data.len().max(1) as f64)
}

fn opt_ppl(model: &InferenceModel, data: &[PackedContext]) -> Result<Option<f64>> {
    if data.is_empty() { Ok(None) } else { model_perplexity(model, data).map(Some) }
}

fn execute(run: &mut Run, cmd: &Command) -> Result<()> {
    let seed = run.cfg.seed;
    match cmd {
        Command::GenCorpus => {
            let c = gen_synthetic_corpus(&run.cfg.corpus, seed)?;
            let meta = run.meta();
            write_jsonl(&run.artifact("corpus.jsonl"), Some(&meta), &c.records)?;
            write_jsonl(&run.artifact("probes.jsonl"), Some(&meta), &c.probes)?;
            println!("documents {} probes {}", c.records.len(), c.probes.len());
        }
        Command::Dedup { corpus } => {
            let vocab = Vocabulary::character_level();
            let segs = load_segments(corpus, &vocab)?;
            let (kept, report) = lsh_dedup(&segs, &run.cfg.dedup)?;
            let recs: Vec<CorpusRecord> = kept.iter().map(DocumentSegment::to_record).collect();
            let meta = run.meta();
            write_jsonl(&run.artifact("dedup.jsonl"), Some(&meta), &recs)?;
            run.report("dedup_report.json", json!({ "input": segs.len(), "kept": kept.len(), "candidate_pairs": report.candidate_pairs, "removals": report.removals }))?;
            println!("kept {} of {} ({} removed)", kept.len(), segs.len(), report.removals.len());
        }
        Command::TrainBpe { corpus } => {
            let recs: Vec<CorpusRecord> = read_jsonl(corpus)?;
            let texts: Vec<&str> = recs.iter().map(|r| r.text.as_str()).collect();
            let mut vocab = train_bpe(&texts, run.cfg.tokenizer.vocab_size)?;
            if run.cfg.tokenizer.lexicon {
                vocab.extend_lexicon(&lexicon_terms())?;
            }
            vocab.save(&run.artifact("vocab.json"))?;
            println!("vocabulary {} tokens ({} merges, {} lexicon)", vocab.len(), vocab.merges().len(), vocab.lexicon().len());
        }
        Command::Pretrain { corpus, vocab } => {
            let vocab = Vocabulary::load(vocab)?;
            let segs = load_segments(corpus, &vocab)?;
            let mcfg = ModelConfig { vocab_size: vocab.len(), ..run.cfg.model.clone() };
            let mut model = Model::init(mcfg)?;
            if model.cfg.lambda_doc > 0.0 {
                model.attach_doctrine(&doctrine_principles(), &vocab)?;
            }
            let data = pack_for(&model.cfg, run.cfg.train.window, &segs)?;
            let (train_set, val) = run.split(&data);
            let before = opt_ppl(&InferenceModel::new(&model)?, val)?;
            run.info(format!("pretraining on {} contexts, {} held out", train_set.len(), val.len()));
            let every = run.cfg.train.checkpoint_every;
            let mut snapshots = Vec::new();
            let log = {
                let mut logger = run.step_logger();
                train(&mut model, train_set, &run.cfg.train, Objective::Pretrain { contrastive_weight: run.cfg.train.contrastive_weight }, None, |m, cur| {
                    if every > 0 && m.step % every == 0 {
                        snapshots.push((m.step, cur.clone()));
                    }
                    logger(m, cur)
                })?
            };
            for (step, snap) in &snapshots {
                save_checkpoint(snap, &run.artifact(&format!("model-step{step}.ckpt")))?;
            }
            let after = opt_ppl(&InferenceModel::new(&model)?, val)?;
            save_checkpoint(&model, &run.artifact("model.ckpt"))?;
            let comment = run.meta().csv_comment();
            write_metrics_csv(&run.artifact("metrics.csv"), Some(&comment), &log)?;
            run.report("pretrain_report.json", json!({ "steps": log.len(), "validation_perplexity_initial": before, "validation_perplexity_final": after, "final_loss": log.last().map(|m| m.total) }))?;
            match (before, after) {
                (Some(b), Some(a)) => println!("validation perplexity {} -> {}", fmt_metric(b), fmt_metric(a)),
                _ => println!("trained {} steps (no validation split)", log.len()),
            }
        }
        Command::Sft { model, corpus, vocab, reference } => {
            let vocab = Vocabulary::load(vocab)?;
            let mut m = load_checkpoint(model)?;
            check_vocab(&m, &vocab)?;
            let ref_path = reference.clone().or_else(|| run.cfg.train.sft.reference.as_ref().map(PathBuf::from));
            let refm = match ref_path {
                Some(p) => load_checkpoint(&p)?,
                None => m.clone(),
            };
            let reference_model = InferenceModel::new(&refm)?;
            let segs = load_segments(corpus, &vocab)?;
            let data = pack_for(&m.cfg, run.cfg.train.window, &segs)?;
            let (train_set, val) = run.split(&data);
            let kl_weight = run.cfg.train.sft.kl_weight;
            let log = train(&mut m, train_set, &run.cfg.train, Objective::Sft { reference: &reference_model, kl_weight }, None, run.step_logger())?;
            let kl = if val.is_empty() { None } else { Some(mean_kl(&m, &reference_model, val)?) };
            save_checkpoint(&m, &run.artifact("sft.ckpt"))?;
            let comment = run.meta().csv_comment();
            write_metrics_csv(&run.artifact("sft_metrics.csv"), Some(&comment), &log)?;
            let ppl = opt_ppl(&InferenceModel::new(&m)?, val)?;
            run.report("sft_report.json", json!({ "steps": log.len(), "kl_weight": kl_weight, "validation_kl_to_reference": kl, "validation_perplexity": ppl }))?;
            println!("kl to reference {}", kl.map_or("n/a".into(), fmt_metric));
        }
        Command::RewardTrain { pairs } => {
            let r = &run.cfg.reward;
            let (train_pairs, test_pairs): (Vec<PreferencePair>, Vec<PreferencePair>) = match pairs {
                Some(p) => {
                    let mut all: Vec<PreferencePair> = read_jsonl(p)?;
                    if all.len() < 2 {
                        bail!(Input, "need at least two preference pairs");
                    }
                    let test = all.split_off(all.len() - (all.len() / 5).max(1));
                    (all, test)
                }
                None => {
                    let fx = planted_preference_fixture(r.n_train, r.n_test, r.token_start..r.token_end, r.completion_len, seed)?;
                    (fx.train, fx.test)
                }
            };
            let max_tok = train_pairs
                .iter()
                .chain(&test_pairs)
                .flat_map(|p| p.prompt.iter().chain(&p.completion_a).chain(&p.completion_b))
                .max()
                .copied()
                .unwrap_or(0);
            let longest = train_pairs.iter().chain(&test_pairs).map(|p| p.prompt.len() + p.completion_a.len().max(p.completion_b.len())).max().unwrap_or(1);
            let mcfg = ModelConfig {
                vocab_size: r.model.vocab_size.max(max_tok + 1),
                max_context: r.model.max_context.max(longest),
                ..r.model.clone()
            };
            let mut rm = RewardModel::new(mcfg)?;
            let losses = train_reward_model(&mut rm, &train_pairs, &r.train)?;
            let (train_acc, test_acc) = (rm.accuracy(&train_pairs)?, rm.accuracy(&test_pairs)?);
            save_checkpoint(&rm.model, &run.artifact("reward.ckpt"))?;
            run.report("reward_report.json", json!({ "train_pairs": train_pairs.len(), "test_pairs": test_pairs.len(), "final_loss": losses.last(), "train_accuracy": train_acc, "test_accuracy": test_acc }))?;
            println!("held-out pairwise accuracy {}", fmt_metric(test_acc));
        }
        Command::EwcUpdate { model, task_a, task_b, vocab } => {
            let vocab = Vocabulary::load(vocab)?;
            let anchor = load_checkpoint(model)?;
            check_vocab(&anchor, &vocab)?;
            let window = run.cfg.train.window;
            let data_a = pack_for(&anchor.cfg, window, &load_segments(task_a, &vocab)?)?;
            let data_b = pack_for(&anchor.cfg, window, &load_segments(task_b, &vocab)?)?;
            let n_fisher = run.cfg.train.ewc.fisher_samples.min(data_a.len());
            run.info(format!("estimating Fisher diagonal on {n_fisher} task-A contexts"));
            let fisher = fisher_diag(&anchor, &data_a[..n_fisher])?;
            let state = EwcState::new(&anchor.params, fisher, run.cfg.train.ewc.ewc_lambda)?;
            let before = model_perplexity(&InferenceModel::new(&anchor)?, &data_a)?;
            let mut m = anchor.clone();
            let objective = Objective::Pretrain { contrastive_weight: run.cfg.train.contrastive_weight };
            let log = train(&mut m, &data_b, &run.cfg.train, objective, Some(&state), run.step_logger())?;
            let after = model_perplexity(&InferenceModel::new(&m)?, &data_a)?;
            let penalty = crate::train::ewc_penalty(&m.params, &state)?;
            save_checkpoint(&m, &run.artifact("ewc.ckpt"))?;
            let comment = run.meta().csv_comment();
            write_metrics_csv(&run.artifact("ewc_metrics.csv"), Some(&comment), &log)?;
            run.report("ewc_report.json", json!({ "ewc_lambda": state.ewc_lambda, "task_a_perplexity_before": before, "task_a_perplexity_after": after, "final_penalty": penalty }))?;
            println!("task-A perplexity {} -> {}", fmt_metric(before), fmt_metric(after));
        }
        Command::Eval(e) => eval(run, e)?,
        Command::Wargame(w) => wargame(run, w)?,
        Command::Quantize { model, corpus, vocab } => {
            let vocab = Vocabulary::load(vocab)?;
            let m = load_checkpoint(model)?;
            check_vocab(&m, &vocab)?;
            let data = pack_for(&m.cfg, m.cfg.max_context, &load_segments(corpus, &vocab)?)?;
            let (dense, int8) = (InferenceModel::new(&m)?, InferenceModel::quantized(&m)?);
            let (pd, pq) = (model_perplexity(&dense, &data)?, model_perplexity(&int8, &data)?);
            let rel = (pq - pd) / pd;
            run.report("quantize_report.json", json!({ "dense_perplexity": pd, "int8_perplexity": pq, "relative_degradation": rel, "dense_weight_bytes": dense.weight_bytes(), "int8_weight_bytes": int8.weight_bytes() }))?;
            println!("perplexity dense {} int8 {} ({:+.3}%)", fmt_metric(pd), fmt_metric(pq), rel * 100.0);
        }
        Command::ProfileLatency { model } => {
            let p = run.cfg.profile.clone();
            let mut profiles = vec![
                attention_profile(&p.lengths, p.d_head, p.repetitions, AttentionKernel::Naive, seed)?,
                attention_profile(&p.lengths, p.d_head, p.repetitions, AttentionKernel::Blocked, seed)?,
            ];
            if let Some(path) = model {
                let m = load_checkpoint(path)?;
                let lengths: Vec<usize> = p.model_lengths.iter().copied().filter(|&l| l <= m.cfg.max_context).collect();
                if lengths.len() < 2 {
                    bail!(Config, "[profile] model_lengths needs two lengths within the model context {}", m.cfg.max_context);
                }
                profiles.push(latency_profile(&InferenceModel::new(&m)?, &lengths, p.repetitions, seed)?);
                profiles.push(latency_profile(&InferenceModel::quantized(&m)?, &lengths, p.repetitions, seed)?);
            }
            let comment = run.meta().csv_comment();
            write_profile_csv(&run.artifact("latency.csv"), &comment, &profiles)?;
            for pr in &profiles {
                println!("{} log-log slope {:.3}", pr.variant, pr.fit.slope);
            }
        }
        Command::GradCheck => {
            let g = run.cfg.gradcheck.clone();
            let cases = gradient_suite(seed, g.step)?;
            let mut csv = format!("{}\nname,coordinates,max_rel_error\n", run.meta().csv_comment());
            for c in &cases {
                csv.push_str(&format!("{},{},{:e}\n", c.name, c.coordinates, c.max_rel_error));
                if run.verbose {
                    eprintln!("{:<34} {:>6} {:.3e}", c.name, c.coordinates, c.max_rel_error);
                }
            }
            run.text("grad_check.csv", &csv)?;
            let failed: Vec<&str> = cases.iter().filter(|c| !c.passes(g.tolerance)).map(|c| c.name.as_str()).collect();
            let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
            println!("{} cases, worst relative error {worst:.3e}", cases.len());
            if !failed.is_empty() {
                bail!(Contract, "gradient check failed for {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn eval(run: &mut Run, cmd: &EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Perplexity { model, corpus, vocab, int8 } => {
            let vocab = Vocabulary::load(vocab)?;
            let m = load_checkpoint(model)?;
            check_vocab(&m, &vocab)?;
            let data = pack_for(&m.cfg, m.cfg.max_context, &load_segments(corpus, &vocab)?)?;
            let im = if *int8 { InferenceModel::quantized(&m)? } else { InferenceModel::new(&m)? };
            let ppl = model_perplexity(&im, &data)?;
            run.report("perplexity.json", json!({ "perplexity": ppl, "contexts": data.len(), "int8": int8 }))?;
            println!("{}", fmt_metric(ppl));
        }
        EvalCommand::Brier { forecasts } => {
            let recs = read_forecasts(forecasts)?;
            let b = brier_score(&recs)?;
            run.report("brier.json", json!({ "brier": b, "n": recs.len() }))?;
            println!("{}", fmt_metric(b));
        }
        EvalCommand::Calibration { forecasts, simulate } => {
            let recs = match (forecasts, simulate) {
                (Some(p), _) => read_forecasts(p)?,
                (None, Some(n)) => {
                    let recs = simulate_calibrated(*n, run.cfg.eval.horizon_months, run.cfg.seed);
                    let comment = run.meta().csv_comment();
                    write_forecasts(&run.artifact("simulated_forecasts.csv"), &comment, &recs)?;
                    recs
                }
                (None, None) => bail!(Input, "give --forecasts or --simulate"),
            };
            let rep = reliability_report(&recs, run.cfg.eval.bins)?;
            let mut csv = format!("{}\nlower,upper,count,mean_predicted,frequency\n", run.meta().csv_comment());
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
            for b in &rep.bins {
                csv.push_str(&format!("{},{},{},{},{}\n", b.lower, b.upper, b.count, opt(b.mean_predicted), opt(b.frequency)));
            }
            run.text("reliability.csv", &csv)?;
            run.report("calibration.json", json!({ "n": rep.n, "ece": rep.ece, "brier": rep.brier, "mean_abs_gap": rep.mean_abs_gap() }))?;
            println!("ece {} brier {} mean |gap| {}", fmt_metric(rep.ece), fmt_metric(rep.brier), fmt_metric(rep.mean_abs_gap()));
        }
        EvalCommand::Kappa { ratings } => {
            let rows = read_rows(ratings)?;
            let Some(width) = rows.first().map(Vec::len) else { bail!(Input, "no ratings") };
            if width < 2 || rows.iter().any(|r| r.len() != width) {
                bail!(Input, "every row needs the same number (>= 2) of rater labels");
            }
            let (kind, k) = if width == 2 {
                let a: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
                let b: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
                ("cohen", cohen_kappa(&a, &b)?)
            } else {
                let mut labels: Vec<&str> = rows.iter().flatten().map(String::as_str).collect();
                labels.sort_unstable();
                labels.dedup();
                let counts: Vec<Vec<usize>> = rows
                    .iter()
                    .map(|r| labels.iter().map(|l| r.iter().filter(|x| x == l).count()).collect())
                    .collect();
                ("fleiss", fleiss_kappa(&counts, width)?)
            };
            run.report("kappa.json", json!({ "statistic": kind, "kappa": k, "items": rows.len(), "raters": width }))?;
            println!("{kind} kappa {}", fmt_metric(k));
        }
        EvalCommand::Anova { groups } => {
            let rows = read_rows(groups)?;
            let mut by: IndexMap<String, Vec<f64>> = IndexMap::new();
            for (i, r) in rows.iter().enumerate() {
                let [g, v] = r.as_slice() else { bail!(Input, "row {}: expected group,value", i + 1) };
                let v: f64 = v.parse().map_err(|_| Error::Input(format!("row {}: '{v}' is not a number", i + 1)))?;
                by.entry(g.clone()).or_default().push(v);
            }
            let groups: Vec<Vec<f64>> = by.values().cloned().collect();
            let res = anova_f(&groups)?;
            run.report("anova.json", json!({ "f": res.f, "df_between": res.df_between, "df_within": res.df_within, "groups": by.keys().collect::<Vec<_>>() }))?;
            println!("F({}, {}) = {}", res.df_between, res.df_within, fmt_metric(res.f));
        }
    }
    Ok(())
}

fn wargame(run: &mut Run, cmd: &WargameCommand) -> Result<()> {
    match cmd {
        WargameCommand::Run { scenario, blue, red } => {
            let sc = match scenario {
                Some(p) => Scenario::load(p)?,
                None => Scenario::border_clash(),
            };
            let pick = |s: &Option<String>, d: OpforProfile| s.as_deref().map_or(Ok(d), OpforProfile::parse);
            let (b, r) = (pick(blue, run.cfg.wargame.blue)?, pick(red, run.cfg.wargame.red)?);
            let mut res = run_scenario(&sc, b, r, run.cfg.seed)?;
            let mean_latency = res.decisions.iter().map(|d| d.latency_micros as f64).sum::<f64>() / res.decisions.len().max(1) as f64;
            // wall-clock latency would make the artifact differ between identical runs
            res.decisions.iter_mut().for_each(|d| d.latency_micros = 0);
            run.text("blue.trace", &(format_trace(&res.blue_trace) + "\n"))?;
            run.text("red.trace", &(format_trace(&res.red_trace) + "\n"))?;
            let summary = json!({
                "scenario": sc.name,
                "blue_profile": b.name(),
                "red_profile": r.name(),
                "decisions": res.decisions,
                "final_state": res.final_state,
                "blue_strength": res.final_state.total_strength(Side::Blue),
                "red_strength": res.final_state.total_strength(Side::Red),
            });
            run.report("wargame_run.json", summary)?;
            println!(
                "{} turns, {} decisions, strength blue {} red {}, mean adjudication {:.1} us",
                res.final_state.turn,
                res.decisions.len(),
                res.final_state.total_strength(Side::Blue),
                res.final_state.total_strength(Side::Red),
                mean_latency
            );
        }
        WargameCommand::Align { a, b } => {
            let (ta, tb) = (read_trace(a)?, read_trace(b)?);
            let sc = run.cfg.wargame.scoring;
            let al = smith_waterman(&ta, &tb, &sc)?;
            let norm = normalized_alignment(&ta, &tb, &sc)?;
            run.report("alignment.json", json!({ "score": al.score, "normalized": norm, "columns": al.columns }))?;
            println!("score {} normalized {}", al.score, fmt_metric(norm));
        }
        WargameCommand::Bench { scenario, seconds } => {
            let scs = if scenario.is_empty() {
                vec![Scenario::border_clash()]
            } else {
                scenario.iter().map(|p| Scenario::load(p)).collect::<Result<Vec<_>>>()?
            };
            let secs = seconds.unwrap_or(run.cfg.wargame.bench_seconds);
            if !(secs.is_finite() && secs > 0.0) {
                bail!(Config, "bench duration must be positive");
            }
            let rep = throughput_bench(&scs, Duration::from_secs_f64(secs))?;
            let comment = run.meta().csv_comment();
            rep.write_csv(&run.artifact("bench.csv"), &comment)?;
            println!("{} decisions, {:.0} decisions/hour", rep.total_decisions, rep.rate_per_hour);
        }
    }
    Ok(())
}
