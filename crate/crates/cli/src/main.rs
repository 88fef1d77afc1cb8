use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use medunic::pipeline::{
    self, apply_ablation, build_vocab, diagnose, grad_check_suite, json, prepare, random_f1_baseline,
    retrieval_ks, retrieval_metrics, run_mlm, run_seeds, run_vlp, schema_help, zero_shot_metrics,
    Checkpoint, Manifest, RunConfig, GRAD_TOL,
};
use medunic::synth::{read_dataset, write_dataset, Language, DATASET_FILE};
use medunic::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "medunic", version, about = "Cross-lingual vision-language pre-training at desk scale")]
#[command(after_help = after_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn after_help() -> String {
    format!(
        "{}\nKeys go in --config files or --set key=value.\n\
         Exit codes: 0 success, 2 invalid input or configuration, 3 numeric failure.",
        schema_help()
    )
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file; defaults are used for keys it does not set.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set vlp.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> medunic::Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        base.with_overrides(&self.sets)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LanguageArg {
    En,
    Sp,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic bilingual dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-token pre-training of the text encoder.
    PretrainMlm {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Image/report alignment starting from a masked-token checkpoint.
    PretrainVlp {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint from pretrain-mlm; not needed with `--ablate mlm-init`.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Components to switch off: ssv, cvl, ctr, tf, tt, mlm-init.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
    },
    /// Zero-shot classification and cross-lingual retrieval on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        language: LanguageArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Language-bias report, PCA coordinates and similarity matrices.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss and encoder gradient.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full pipeline over several seeds with mean and std per metric.
    Seeds {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Core(Error),
    GradCheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::GradCheck) => ExitCode::from(3),
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numeric(_) => 3,
                _ => 2,
            })
        }
    }
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenData { cfg, out } => gen_data(&cfg.load()?, &out),
        Command::PretrainMlm { cfg, data, out } => pretrain_mlm(&cfg.load()?, &data, &out),
        Command::PretrainVlp {
            cfg,
            data,
            init,
            out,
            ablate,
        } => pretrain_vlp(cfg.load()?, &data, init.as_deref(), &out, &ablate),
        Command::Eval {
            checkpoint,
            data,
            language,
            out,
        } => eval(&checkpoint, &data, language, &out),
        Command::Diagnose { checkpoint, data, out } => diagnose_cmd(&checkpoint, &data, &out),
        Command::GradCheck { seed } => grad_check(seed),
        Command::Seeds { cfg, seeds, out } => seeds_cmd(&cfg.load()?, &seeds, out.as_deref()),
    }
}

fn existing(path: &Path, what: &str) -> medunic::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn load_splits(cfg: &RunConfig, data: &Path) -> medunic::Result<pipeline::Splits> {
    existing(&data.join(DATASET_FILE), "dataset")?;
    prepare(cfg, read_dataset(data)?)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> CmdResult {
    let samples = pipeline::generate(cfg)?;
    write_dataset(out, &samples)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let count = |l: Language| samples.iter().filter(|s| s.language == l).count();
    let mut m = Manifest::new("gen-data", cfg);
    m.details = json!({
        "samples": samples.len(),
        "en": count(Language::En),
        "sp": count(Language::Sp),
        "findings": cfg.data.findings,
    });
    m.finish(out, &[DATASET_FILE.into(), "images".into(), "config.txt".into()])?;
    info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

const CHECKPOINT_FILES: [&str; 5] = ["model.ckpt", "model.json", "vocab.txt", "metrics.jsonl", "config.txt"];

fn finish_checkpoint(ckpt: &Checkpoint, cfg: &RunConfig, command: &str, inputs: &[(&str, &Path)], out: &Path) -> CmdResult {
    ckpt.save(out, cfg)?;
    let mut m = Manifest::new(command, cfg);
    for (label, path) in inputs {
        m.input(label, path)?;
    }
    m.details = json!({ "steps": ckpt.records.len() });
    let names: Vec<String> = CHECKPOINT_FILES.iter().map(|s| s.to_string()).collect();
    m.finish(out, &names)?;
    info!("checkpoint written to {}", out.display());
    Ok(())
}

fn pretrain_mlm(cfg: &RunConfig, data: &Path, out: &Path) -> CmdResult {
    let splits = load_splits(cfg, data)?;
    let vocab = build_vocab(&splits.train, cfg.data.sp_vocab)?;
    info!("vocabulary: {} tokens; {} training reports", vocab.len(), splits.train.len());
    let ckpt = run_mlm(cfg, &splits, &vocab)?;
    finish_checkpoint(&ckpt, cfg, "pretrain-mlm", &[("data", data)], out)
}

fn pretrain_vlp(mut cfg: RunConfig, data: &Path, init: Option<&Path>, out: &Path, ablate: &[String]) -> CmdResult {
    for a in ablate {
        apply_ablation(&mut cfg, a)?;
    }
    let splits = load_splits(&cfg, data)?;
    let init_ckpt = match init {
        Some(p) if cfg.mlm_init => {
            existing(p, "checkpoint")?;
            Some(Checkpoint::load(p)?)
        }
        _ => None,
    };
    let vocab = match &init_ckpt {
        Some(c) => c.vocab.clone(),
        None => build_vocab(&splits.train, cfg.data.sp_vocab)?,
    };
    let ckpt = run_vlp(&cfg, init_ckpt.as_ref(), &splits, &vocab)?;
    let mut inputs = vec![("data", data)];
    if let (Some(p), Some(_)) = (init, &init_ckpt) {
        inputs.push(("init", p));
    }
    finish_checkpoint(&ckpt, &cfg, "pretrain-vlp", &inputs, out)
}

fn load_trained(checkpoint: &Path, data: &Path) -> medunic::Result<(RunConfig, Checkpoint, pipeline::Splits)> {
    existing(checkpoint, "checkpoint")?;
    let cfg = Checkpoint::config(checkpoint)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let splits = load_splits(&cfg, data)?;
    Ok((cfg, ckpt, splits))
}

fn eval(checkpoint: &Path, data: &Path, language: LanguageArg, out: &Path) -> CmdResult {
    let (cfg, ckpt, splits) = load_trained(checkpoint, data)?;
    let langs: &[Language] = match language {
        LanguageArg::En => &[Language::En],
        LanguageArg::Sp => &[Language::Sp],
        LanguageArg::Both => &Language::ALL,
    };
    let zero_shot = langs
        .iter()
        .map(|&l| zero_shot_metrics(&ckpt, &splits.test, l))
        .collect::<medunic::Result<Vec<_>>>()?;
    for z in &zero_shot {
        info!("zero-shot {}: macro AUC {:?}, macro F1 {:?}", z.language, z.macro_auc, z.macro_f1);
    }
    let retrieval = retrieval_metrics(&ckpt, &splits.test, cfg.eval.text_space, &retrieval_ks(&cfg))?;
    fs::create_dir_all(out)?;
    json::write_pretty(
        &out.join("zeroshot_metrics.json"),
        &json!({ "random_f1": random_f1_baseline(&splits.test), "languages": zero_shot }),
    )?;
    json::write_pretty(&out.join("retrieval_metrics.json"), &retrieval)?;
    let mut m = Manifest::new("eval", &cfg);
    m.input("checkpoint", checkpoint)?;
    m.input("data", data)?;
    m.finish(out, &["zeroshot_metrics.json".into(), "retrieval_metrics.json".into()])?;
    Ok(())
}

fn diagnose_cmd(checkpoint: &Path, data: &Path, out: &Path) -> CmdResult {
    let (cfg, ckpt, splits) = load_trained(checkpoint, data)?;
    let d = diagnose(&cfg, &ckpt, &splits.test)?;
    let r = &d.report;
    info!(
        "text probe {:.3}, image probe {:.3}, text centroid gap {:.3}",
        r.text.probe_accuracy, r.image.probe_accuracy, r.text.centroid_gap
    );
    let names = d.write(out)?;
    let mut m = Manifest::new("diagnose", &cfg);
    m.input("checkpoint", checkpoint)?;
    m.input("data", data)?;
    m.finish(out, &names)?;
    Ok(())
}

fn grad_check(seed: u64) -> CmdResult {
    let rows = grad_check_suite(seed)?;
    println!("{:<16} {:>6} {:>14}  result", "check", "points", "max rel error");
    for r in &rows {
        let status = if r.pass { "pass" } else { "FAIL" };
        println!("{:<16} {:>6} {:>14.3e}  {status}", r.name, r.points, r.max_rel_error);
    }
    if rows.iter().all(|r| r.pass) {
        println!("all rows below {GRAD_TOL:e}");
        Ok(())
    } else {
        eprintln!("error: gradient check failed (tolerance {GRAD_TOL:e})");
        Err(Failure::GradCheck)
    }
}

fn seeds_cmd(cfg: &RunConfig, seeds: &[u64], out: Option<&Path>) -> CmdResult {
    if seeds.is_empty() {
        return Err(Error::Config("--seeds needs at least one seed".into()).into());
    }
    let report = run_seeds(cfg, seeds)?;
    print!("{}", report.table());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        json::write_pretty(&dir.join("seeds_report.json"), &report)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
        Manifest::new("seeds", cfg).finish(dir, &["seeds_report.json".into(), "config.txt".into()])?;
    }
    Ok(())
}
