use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use tkgr_core::config::{ConfigError, RunConfig};
use tkgr_core::evaluator::MetricsReport;
use tkgr_core::pipeline::{Dataset, EvalSplit, Pipeline, PipelineError};
use tkgr_core::synthetic::{generate, SyntheticConfig, SyntheticTkg};
use tkgr_core::tkg::{Quadruple, Vocabularies};
use tkgr_core::trainer::{load_checkpoint, FreezePolicy, TrainError};

#[derive(Parser)]
#[command(name = "tkgr", version, about = "Temporal knowledge graph completion with prefix-tuned text encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a dataset, write vocabularies and inverse-augmented facts, print statistics.
    PrepareData {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Entity descriptions, `name<TAB>description` per line.
        #[arg(long)]
        descriptions: Option<PathBuf>,
        #[arg(long)]
        relation_descriptions: Option<PathBuf>,
        /// Unseen entity names, one per line, for an out-of-graph split.
        #[arg(long)]
        ooc_entities: Option<PathBuf>,
        /// Support facts kept per unseen entity.
        #[arg(long, requires = "ooc_entities")]
        shots: Option<usize>,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the effective config, logs and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print the metrics report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Also write per-query ranks here.
        #[arg(long)]
        per_query: Option<PathBuf>,
    },
    /// Rank every entity for one query `subject|relation|time`.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Description of a subject that is not in the dataset.
        #[arg(long)]
        subject_desc: Option<String>,
    },
    /// Train and evaluate every variant along one dimension.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dimension: String,
    },
    /// Write verbalised `query<TAB>candidate<TAB>label` lines.
    ExportCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a periodic toy dataset (train.txt, valid.txt, test.txt).
    GenerateSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        entities: usize,
        #[arg(long, default_value_t = 5)]
        relations: usize,
        #[arg(long, default_value_t = 60)]
        timestamps: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Valid,
    Test,
}

impl From<Split> for EvalSplit {
    fn from(s: Split) -> Self {
        match s {
            Split::Valid => EvalSplit::Valid,
            Split::Test => EvalSplit::Test,
        }
    }
}

/// Errors that map to exit code 2.
#[derive(Debug, thiserror::Error)]
enum UsageError {
    #[error("unknown ablation dimension {0:?}; expected one of history_order, context_form, prefix_length, freeze_policy, negatives")]
    UnknownDimension(String),
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>()
            || e.is::<ConfigError>()
            || matches!(e.downcast_ref::<PipelineError>(), Some(PipelineError::Usage(_) | PipelineError::Config(_)))
    })
}

/// Reads a config file; relative data paths are taken from the config's directory.
fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = RunConfig::parse(&text)?;
    cfg.validate()?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [
        &mut cfg.train,
        &mut cfg.valid,
        &mut cfg.test,
        &mut cfg.entity_descriptions,
        &mut cfg.relation_descriptions,
        &mut cfg.unseen_entities,
        &mut cfg.output_dir,
    ] {
        if !p.as_os_str().is_empty() && p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let ds = Dataset::load(cfg)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    Ok(ds)
}

fn facts_tsv(facts: &[Quadruple], vocabs: &Vocabularies) -> String {
    let mut out = String::new();
    for q in facts {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            vocabs.entity_name(q.s),
            vocabs.relation_name(q.p),
            vocabs.entity_name(q.o),
            vocabs.times.entry(q.t).text
        );
    }
    out
}

fn ids_tsv(facts: &[Quadruple]) -> String {
    facts.iter().map(|q| format!("{}\t{}\t{}\t{}\n", q.s.0, q.p.0, q.o.0, q.t.0)).collect()
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn prepare_data(
    train: &Path,
    valid: &Path,
    test: &Path,
    descriptions: Option<PathBuf>,
    relation_descriptions: Option<PathBuf>,
    ooc_entities: Option<PathBuf>,
    shots: Option<usize>,
    split_seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let cfg = RunConfig {
        train: train.into(),
        valid: valid.into(),
        test: test.into(),
        entity_descriptions: descriptions.unwrap_or_default(),
        relation_descriptions: relation_descriptions.unwrap_or_default(),
        unseen_entities: ooc_entities.unwrap_or_default(),
        shots: shots.unwrap_or(0),
        split_seed,
        ..RunConfig::default()
    };
    let ds = load_dataset(&cfg)?;
    fs::create_dir_all(out)?;
    let v = &ds.vocabs;
    write(&out.join("entities.txt"), &(0..v.num_entities()).map(|i| format!("{i}\t{}\n", v.entities.name(i as u32))).collect::<String>())?;
    write(&out.join("relations.txt"), &(0..v.num_relations()).map(|i| format!("{i}\t{}\n", v.relations.name(i as u32))).collect::<String>())?;
    write(&out.join("timestamps.txt"), &v.times.entries().iter().enumerate().map(|(i, e)| format!("{i}\t{}\n", e.text)).collect::<String>())?;
    for (name, facts) in [("train", &ds.train), ("valid", &ds.valid), ("test", &ds.test)] {
        let both = tkgr_core::tkg::invert_facts(facts, &ds.inverse);
        write(&out.join(format!("{name}.txt")), &facts_tsv(&both, v))?;
        write(&out.join(format!("{name}.ids")), &ids_tsv(&both))?;
    }
    if let Some(ind) = &ds.inductive {
        let dir = out.join("ooc");
        fs::create_dir_all(&dir)?;
        write(&dir.join("unseen.txt"), &ind.unseen.iter().map(|&e| format!("{}\n", v.entity_name(e))).collect::<String>())?;
        write(&dir.join("background.txt"), &facts_tsv(ind.background.facts(), v))?;
        write(&dir.join("support.txt"), &facts_tsv(&ind.support_facts(), v))?;
        write(&dir.join("query_train.txt"), &facts_tsv(&ind.query_train, v))?;
        write(&dir.join("query_valid.txt"), &facts_tsv(&ind.query_valid, v))?;
        write(&dir.join("query_test.txt"), &facts_tsv(&ind.query_test, v))?;
    }
    let stats = ds.stats();
    write(&out.join("stats.txt"), &stats)?;
    print!("{stats}");
    Ok(())
}

fn load_model(p: &Pipeline, checkpoint: &Path) -> anyhow::Result<tkgr_core::model::TwoTowerModel> {
    let mut model = p.new_model()?;
    load_checkpoint(checkpoint, &mut model).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok(model)
}

/// Variants of one ablation dimension as `(label, config)`.
fn ablation_variants(base: &RunConfig, dimension: &str) -> anyhow::Result<Vec<(String, RunConfig)>> {
    let with = |label: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (label.to_string(), c)
    };
    Ok(match dimension {
        "history_order" => ["descending", "ascending", "random"].iter().map(|o| with(o, &|c| c.history_order = o.to_string())).collect(),
        "context_form" => ["pairs", "entities"].iter().map(|f| with(f, &|c| c.context_form = f.to_string())).collect(),
        "prefix_length" => [2, 4, 6, 10, 15, 20, 50].iter().map(|&m| with(&format!("m={m}"), &|c| c.prefix_len = m)).collect(),
        "freeze_policy" => FreezePolicy::ALL.iter().map(|p| with(p.as_str(), &|c| c.freeze_policy = p.as_str().into())).collect(),
        "negatives" => {
            let depth = if base.pre_batch_depth > 0 { base.pre_batch_depth } else { 2 };
            vec![
                with("full", &|c| {
                    c.pre_batch_depth = depth;
                    c.self_negatives = true;
                }),
                with("w/o pre-batch", &|c| {
                    c.pre_batch_depth = 0;
                    c.self_negatives = true;
                }),
                with("w/o self", &|c| {
                    c.pre_batch_depth = depth;
                    c.self_negatives = false;
                }),
                with("w/o both", &|c| {
                    c.pre_batch_depth = 0;
                    c.self_negatives = false;
                }),
            ]
        }
        other => return Err(UsageError::UnknownDimension(other.into()).into()),
    })
}

/// Metrics-format table with one column per variant.
fn comparison_table(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("metric");
    for (label, _) in rows {
        out.push('\t');
        out.push_str(label);
    }
    out.push('\n');
    let parsed: Vec<Vec<(String, String)>> = rows
        .iter()
        .map(|(_, r)| r.to_tsv().lines().filter_map(|l| l.split_once('\t')).map(|(k, v)| (k.to_string(), v.to_string())).collect())
        .collect();
    for (i, (key, _)) in parsed[0].iter().enumerate() {
        out.push_str(key);
        for p in &parsed {
            out.push('\t');
            out.push_str(p.get(i).map_or("-", |x| x.1.as_str()));
        }
        out.push('\n');
    }
    out
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::PrepareData { train, valid, test, descriptions, relation_descriptions, ooc_entities, shots, split_seed, out } => {
            prepare_data(&train, &valid, &test, descriptions, relation_descriptions, ooc_entities, shots, split_seed, &out)
        }
        Command::Train { config, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let ds = load_dataset(&cfg)?;
            let p = Pipeline::new(&ds, cfg.clone())?;
            let outcome = p.train(Some(&cfg.output_dir))?;
            for line in &outcome.log {
                println!("{line}");
            }
            println!("best epoch {}", outcome.best_epoch);
            if let Some(v) = &outcome.best_valid {
                print!("{}", v.to_tsv());
            }
            Ok(())
        }
        Command::Evaluate { config, checkpoint, split, per_query } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&cfg)?;
            let p = Pipeline::new(&ds, cfg.clone())?;
            let model = load_model(&p, &checkpoint)?;
            let ev = p.evaluate(&model, cfg.protocol_kind()?, split.into())?;
            if let Some(path) = per_query {
                write(&path, &p.per_query_tsv(&ev.results))?;
            }
            print!("{}", ev.report.to_tsv());
            Ok(())
        }
        Command::Predict { config, checkpoint, query, k, subject_desc } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&cfg)?;
            let p = Pipeline::new(&ds, cfg)?;
            let model = load_model(&p, &checkpoint)?;
            for (name, score) in p.predict(&model, &query, k, subject_desc.as_deref())? {
                println!("{name}\t{score:.6}");
            }
            Ok(())
        }
        Command::Ablate { config, dimension } => {
            let cfg = load_config(&config)?;
            let variants = ablation_variants(&cfg, &dimension)?;
            let ds = load_dataset(&cfg)?;
            let mut rows = Vec::new();
            for (label, vcfg) in variants {
                eprintln!("variant {label}");
                let p = Pipeline::new(&ds, vcfg.clone())?;
                let outcome = p.train(None)?;
                let ev = p.evaluate(&outcome.model, vcfg.protocol_kind()?, EvalSplit::Test)?;
                rows.push((label, ev.report));
            }
            let table = comparison_table(&rows);
            fs::create_dir_all(&cfg.output_dir)?;
            write(&cfg.output_dir.join(format!("ablation_{dimension}.tsv")), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::ExportCorpus { config, split, out } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&cfg)?;
            let p = Pipeline::new(&ds, cfg)?;
            write(&out, &p.export_corpus(split.into())?)
        }
        Command::GenerateSynthetic { out, seed, entities, relations, timestamps } => {
            let base = SyntheticConfig::default();
            let scfg = SyntheticConfig {
                entities,
                relations,
                timestamps,
                pairs: base.pairs.min(entities * relations),
                valid_from: timestamps * 4 / 5,
                test_from: timestamps * 9 / 10,
                seed,
                ..base
            };
            if entities <= scfg.cycle || timestamps < 10 {
                return Err(PipelineError::Usage(format!("need more than {} entities and at least 10 timestamps", scfg.cycle)).into());
            }
            let g = generate(&scfg);
            fs::create_dir_all(&out)?;
            write(&out.join("train.txt"), &SyntheticTkg::to_tsv(&g.train))?;
            write(&out.join("valid.txt"), &SyntheticTkg::to_tsv(&g.valid))?;
            write(&out.join("test.txt"), &SyntheticTkg::to_tsv(&g.test))?;
            println!("{} facts written to {}", g.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                if e.chain().any(|c| matches!(c.downcast_ref::<TrainError>(), Some(TrainError::NonFiniteLoss { .. }))) {
                    eprintln!("hint: lower the learning rate or raise tau_min");
                }
                ExitCode::from(1)
            }
        }
    }
}
