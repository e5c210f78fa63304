//! `mathgen`: preprocess, lda-fit, kg-pretrain, train, generate, evaluate.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use log::{error, info};
use mathgen_core::metrics::NumberBasis;
use mathgen_core::model::DecodeOptions;
use mathgen_core::pipeline::{self, KgOptions, LdaOptions, PreprocessOptions, TrainInputs};
use mathgen_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use config::{resolve, Failure};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateOptions {
    number_basis: NumberBasis,
}

/// Subcommand name, summary, path arguments, option defaults, whether a seed is required.
struct Stage {
    name: &'static str,
    about: &'static str,
    paths: Vec<PathArg>,
    defaults: serde_json::Value,
    needs_seed: bool,
}

struct PathArg {
    name: &'static str,
    help: &'static str,
    required: bool,
    many: bool,
}

const fn req(name: &'static str, help: &'static str) -> PathArg {
    PathArg { name, help, required: true, many: false }
}

const fn opt(name: &'static str, help: &'static str) -> PathArg {
    PathArg { name, help, required: false, many: false }
}

fn stages() -> Vec<Stage> {
    let v = |x: serde_json::Result<serde_json::Value>| x.expect("defaults serialize");
    vec![
        Stage {
            name: "preprocess",
            about: "Clean raw JSONL problems into examples, splits and a report",
            paths: vec![req("input", "raw JSONL with `equations` and `problem`")],
            defaults: v(serde_json::to_value(PreprocessOptions::default())),
            needs_seed: false,
        },
        Stage {
            name: "lda-fit",
            about: "Fit the topic model on training examples and label every split",
            paths: vec![
                req("train", "training examples JSONL"),
                PathArg { name: "label", help: "further example files to label (repeatable)", required: false, many: true },
            ],
            defaults: v(serde_json::to_value(LdaOptions::default())),
            needs_seed: true,
        },
        Stage {
            name: "kg-pretrain",
            about: "Load a concept graph edge list and pretrain node embeddings",
            paths: vec![req("edges", "TSV edge list"), opt("examples", "restrict the graph to these examples' vocabulary")],
            defaults: v(serde_json::to_value(KgOptions::default())),
            needs_seed: true,
        },
        Stage {
            name: "train",
            about: "Train the generator and write checkpoints and the loss log",
            paths: vec![
                req("train", "training examples JSONL (with topics)"),
                opt("dev", "dev examples JSONL for checkpoint selection"),
                opt("graph", "graph.tsv from kg-pretrain"),
                opt("embeddings", "node_embeddings.bin from kg-pretrain"),
                opt("keywords", "keywords.json from lda-fit"),
                opt("resume", "checkpoint to resume from"),
            ],
            defaults: v(serde_json::to_value(TrainConfig::default())),
            needs_seed: true,
        },
        Stage {
            name: "generate",
            about: "Decode problems for equation sets with a trained checkpoint",
            paths: vec![req("checkpoint", "trained checkpoint"), req("input", "JSONL with `id` and `equations`")],
            defaults: v(serde_json::to_value(DecodeOptions::default())),
            needs_seed: false,
        },
        Stage {
            name: "evaluate",
            about: "Score generated problems against references",
            paths: vec![req("candidates", "generated JSONL"), req("references", "reference JSONL")],
            defaults: v(serde_json::to_value(EvaluateOptions::default())),
            needs_seed: false,
        },
    ]
}

fn command(stages: &[Stage]) -> Command {
    let mut cmd = Command::new("mathgen")
        .about("Generate math word problems from equations")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(Arg::new("verbose").short('v').long("verbose").action(ArgAction::Count).global(true).help("more logging"))
        .arg(Arg::new("quiet").short('q').long("quiet").action(ArgAction::SetTrue).global(true).help("errors only"));
    for s in stages {
        let mut sub = Command::new(s.name)
            .about(s.about)
            .arg(Arg::new("out-dir").long("out-dir").required(true).value_name("DIR").value_parser(clap::value_parser!(PathBuf)).help("where all outputs and manifest.json go"))
            .arg(Arg::new("config").long("config").value_name("FILE").value_parser(clap::value_parser!(PathBuf)).help("key=value or JSON config; flags win over it"));
        for p in &s.paths {
            let mut a = Arg::new(p.name).long(p.name).value_name("FILE").value_parser(clap::value_parser!(PathBuf)).help(p.help).required(p.required);
            if p.many {
                a = a.action(ArgAction::Append);
            }
            sub = sub.arg(a);
        }
        sub = sub.next_help_heading("Config keys");
        for (key, default) in s.defaults.as_object().expect("options are objects") {
            let shown = match default {
                serde_json::Value::Null => "none".to_string(),
                serde_json::Value::String(x) => x.clone(),
                other => other.to_string(),
            };
            let mut help = format!("[default: {shown}]");
            if key == "seed" && s.needs_seed {
                help = "required, here or in --config".to_string();
            }
            sub = sub.arg(Arg::new(key.clone()).long(key.replace('_', "-")).value_name("VALUE").help(help));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn main() -> ExitCode {
    let stages = stages();
    let matches = match command(&stages).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = if matches.get_flag("quiet") {
        log::LevelFilter::Error
    } else {
        match matches.get_count("verbose") {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let stage = stages.iter().find(|s| s.name == name).expect("known subcommand");
    match run(stage, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            error!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            error!("{m}");
            ExitCode::from(2)
        }
    }
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> Option<&'a Path> {
    m.get_one::<PathBuf>(name).map(PathBuf::as_path)
}

fn run(stage: &Stage, m: &ArgMatches) -> Result<(), Failure> {
    let out = path(m, "out-dir").expect("required");
    for p in &stage.paths {
        let given: Vec<&PathBuf> = m.get_many::<PathBuf>(p.name).map(|v| v.collect()).unwrap_or_default();
        for f in given {
            if !f.is_file() {
                return Err(Failure::Data(format!("missing file: {}", f.display())));
            }
        }
    }
    let flags: Vec<(String, String)> = stage
        .defaults
        .as_object()
        .expect("options are objects")
        .keys()
        .filter_map(|k| m.get_one::<String>(k).map(|v| (k.clone(), v.clone())))
        .collect();
    let cfg = resolve(&stage.defaults, path(m, "config"), &flags, stage.needs_seed)?;
    match stage.name {
        "preprocess" => {
            let opts: PreprocessOptions = config::typed(cfg)?;
            let report = pipeline::preprocess(path(m, "input").expect("required"), out, &opts)?;
            print!("{}", report.to_text());
        }
        "lda-fit" => {
            let opts: LdaOptions = config::typed(cfg)?;
            let others: Vec<PathBuf> = m.get_many::<PathBuf>("label").map(|v| v.cloned().collect()).unwrap_or_default();
            let res = pipeline::lda_fit_stage(path(m, "train").expect("required"), &others, out, &opts)?;
            for (k, words) in res.keywords.iter().enumerate() {
                println!("topic {}: {}", k + 1, words.iter().take(10).cloned().collect::<Vec<_>>().join(" "));
            }
        }
        "kg-pretrain" => {
            let opts: KgOptions = config::typed(cfg)?;
            let (graph, report) = pipeline::kg_pretrain_stage(path(m, "edges").expect("required"), path(m, "examples"), out, &opts)?;
            println!("{} nodes, {} edges kept of {} rows", graph.num_nodes(), report.kept, report.rows);
        }
        "train" => {
            let config: TrainConfig = config::typed(cfg)?;
            let inputs = TrainInputs {
                train: path(m, "train").expect("required"),
                dev: path(m, "dev"),
                graph: path(m, "graph"),
                embeddings: path(m, "embeddings"),
                keywords: path(m, "keywords"),
                resume: path(m, "resume"),
            };
            let trainer = pipeline::train_stage(&inputs, out, &config)?;
            if let Some(last) = trainer.log.last() {
                println!("step {} nll {:.4} kl {:.4} topic_ce {:.4}", last.step, last.nll, last.kl, last.topic_ce);
            }
        }
        "generate" => {
            let opts: DecodeOptions = config::typed(cfg)?;
            let recs = pipeline::generate_stage(path(m, "checkpoint").expect("required"), path(m, "input").expect("required"), out, &opts)?;
            info!("wrote {} problems", recs.len());
        }
        "evaluate" => {
            let opts: EvaluateOptions = config::typed(cfg)?;
            let report = pipeline::evaluate_stage(
                path(m, "candidates").expect("required"),
                path(m, "references").expect("required"),
                out,
                opts.number_basis,
            )?;
            println!(
                "bleu2 {:.4} rouge_l {:.4} dist1 {:.4} dist2 {:.4} number_recall {}",
                report.bleu2,
                report.rouge_l,
                report.dist1,
                report.dist2,
                if report.number_recall_defined { format!("{:.4}", report.number_recall) } else { "undefined".into() }
            );
        }
        _ => unreachable!("stage table and dispatch agree"),
    }
    Ok(())
}
