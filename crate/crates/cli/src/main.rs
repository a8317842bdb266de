use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ctxf::checkpoint::average_checkpoints;
use ctxf::dataset::{
    align_hypotheses, read_conversations, read_hypotheses, write_conversations, write_hypotheses,
};
use ctxf::gradcheck::{Stencil, MODEL_STEP};
use ctxf::params::Graph;
use ctxf::synthetic::{generate_dataset, score, Dataset, Framing};
use ctxf::conversation::{time_ordered_schedule, Conversation, HistoryIndex};
use ctxf::decoder::{context_fold, decode_forward};
use ctxf::encoder::encode_on_graph;
use ctxf::training::{
    context_state, decode_dataset, hypothesis_records, model_gradcheck, run_ablation, teacher_forcing_pair, train,
    training_history, Variant,
};
use ctxf::{Checkpoint, Config, Error, Model, Tensor};

const GRADCHECK_LIMIT: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "ctxf", version, about = "Conversational-context transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for all randomness.
    #[arg(long, env = "CTXF_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train, valid and heldout splits).
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and keep the best checkpoint by validation loss.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `gen`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a dataset file conversation by conversation.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long, env = "CTXF_SEED")]
        seed: Option<u64>,
    },
    /// Score a hypothesis file against a dataset file.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        /// Require hypotheses of reference length.
        #[arg(long)]
        classification: bool,
    },
    /// Compare tape gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = MODEL_STEP)]
        step: f64,
        /// Difference formula.
        #[arg(long, value_enum, default_value_t = StencilArg::Central6)]
        stencil: StencilArg,
    },
    /// Train every variant for every seed and write a result table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Write one attention map of a teacher-forced pass as a text grid.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        utterance: String,
        /// 0-based decoder layer.
        #[arg(long)]
        layer: usize,
        /// 0-based head.
        #[arg(long)]
        head: usize,
        #[arg(long, value_enum, default_value_t = Kind::SelfAttention)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average the parameters of several checkpoints.
    Average {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StencilArg {
    Central2,
    Central4,
    Central6,
}

impl From<StencilArg> for Stencil {
    fn from(s: StencilArg) -> Self {
        match s {
            StencilArg::Central2 => Stencil::Central2,
            StencilArg::Central4 => Stencil::Central4,
            StencilArg::Central6 => Stencil::Central6,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    #[value(name = "self")]
    SelfAttention,
    #[value(name = "cross")]
    Cross,
    #[value(name = "encoder")]
    Encoder,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::SelfAttention => "self",
            Kind::Cross => "cross",
            Kind::Encoder => "encoder",
        }
    }
}

fn resolve(common: &Common) -> Result<Config, Error> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `manifest.cfg`: the resolved config plus comment lines naming the
/// command, its inputs and the tool version. It loads as a config file.
fn write_manifest(dir: &Path, command: &str, inputs: &[(&str, &Path)], cfg: &Config) -> Result<(), Error> {
    let mut text = format!("# ctxf {}\n# command: {command}\n", env!("CARGO_PKG_VERSION"));
    for (name, path) in inputs {
        text.push_str(&format!("# {name}: {}\n", path.display()));
    }
    text.push_str(&format!("# output: {}\n", dir.display()));
    text.push_str(&cfg.to_text());
    fs::write(dir.join("manifest.cfg"), text)?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset, Error> {
    Ok(Dataset {
        train: read_conversations(&dir.join("train.jsonl"))?,
        valid: read_conversations(&dir.join("valid.jsonl"))?,
        heldout: read_conversations(&dir.join("heldout.jsonl"))?,
    })
}

fn dataset_for(cfg: &Config, data: &Option<PathBuf>) -> Result<Dataset, Error> {
    match data {
        Some(dir) => load_dataset(dir),
        None => generate_dataset(&cfg.task),
    }
}

fn json_line<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable record")
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Gen { mut common, out } => {
            let seed = common.seed.take();
            let mut cfg = resolve(&common)?;
            if let Some(s) = seed {
                cfg.task.seed = s;
            }
            let data = generate_dataset(&cfg.task)?;
            fs::create_dir_all(&out)?;
            write_conversations(&out.join("train.jsonl"), &data.train)?;
            write_conversations(&out.join("valid.jsonl"), &data.valid)?;
            write_conversations(&out.join("heldout.jsonl"), &data.heldout)?;
            write_manifest(&out, "gen", &[], &cfg)?;
            println!(
                "{} train, {} valid, {} heldout conversations",
                data.train.len(),
                data.valid.len(),
                data.heldout.len()
            );
        }
        Command::Train { common, data, out } => {
            let cfg = resolve(&common)?;
            let dataset = dataset_for(&cfg, &data)?;
            fs::create_dir_all(&out)?;
            let mut log = String::new();
            let outcome = train(&cfg, &dataset, |rec| {
                let line = json_line(rec);
                println!("{line}");
                log.push_str(&line);
                log.push('\n');
            })?;
            fs::write(out.join("train_log.jsonl"), log)?;
            outcome.best.save(&out.join("best.ckpt"))?;
            outcome.last.save(&out.join("last.ckpt"))?;
            let inputs: Vec<(&str, &Path)> = data.iter().map(|d| ("data", d.as_path())).collect();
            write_manifest(&out, "train", &inputs, &cfg)?;
        }
        Command::Decode {
            checkpoint,
            data,
            out,
            beam,
            max_len,
            seed,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut cfg = ckpt.config.clone();
            if let Some(b) = beam {
                cfg.train.beam = b;
            }
            if let Some(m) = max_len {
                cfg.train.max_decode_len = m;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let model = ckpt.model()?;
            let convs = read_conversations(&data)?;
            let decoded = decode_dataset(&model, &convs, cfg.train.beam, cfg.train.max_decode_len)?;
            fs::create_dir_all(&out)?;
            write_hypotheses(&out.join("hypotheses.jsonl"), &hypothesis_records(&convs, &decoded))?;
            write_manifest(&out, "decode", &[("checkpoint", &checkpoint), ("data", &data)], &cfg)?;
        }
        Command::Eval {
            data,
            hyp,
            classification,
        } => {
            let convs = read_conversations(&data)?;
            let preds = align_hypotheses(&read_hypotheses(&hyp)?, &convs)?;
            let framing = if classification {
                Framing::Classification
            } else {
                Framing::Decoded
            };
            println!("{}", json_line(&score(&preds, &convs, framing)?));
        }
        Command::Gradcheck { common, step, stencil } => {
            let cfg = resolve(&common)?;
            let report = model_gradcheck(&cfg, cfg.train.seed, step, stencil.into())?;
            println!(
                "max relative error {:.3e} over {} coordinates (worst: {:?}, tape {:e}, numeric {:e})",
                report.max_rel_error, report.coordinates, report.worst, report.worst_tape, report.worst_numeric
            );
            if !(report.max_rel_error < GRADCHECK_LIMIT) {
                eprintln!("gradient check failed: limit {GRADCHECK_LIMIT:e}");
                return Ok(ExitCode::from(4));
            }
        }
        Command::Ablate {
            common,
            data,
            out,
            seeds,
            variants,
        } => {
            let cfg = resolve(&common)?;
            let variants = if variants.is_empty() {
                Variant::TABLE.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>, _>>()?
            };
            let dataset = dataset_for(&cfg, &data)?;
            fs::create_dir_all(&out)?;
            let rows = run_ablation(&cfg, &dataset, &variants, &seeds, |row| println!("{}", json_line(row)))?;
            let table: String = rows.iter().map(|r| json_line(r) + "\n").collect();
            fs::write(out.join("ablation.jsonl"), table)?;
            let inputs: Vec<(&str, &Path)> = data.iter().map(|d| ("data", d.as_path())).collect();
            write_manifest(&out, "ablate", &inputs, &cfg)?;
        }
        Command::DumpAttention {
            checkpoint,
            data,
            utterance,
            layer,
            head,
            kind,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = ckpt.model()?;
            let convs = read_conversations(&data)?;
            let grid = attention_grid(&model, &convs, &utterance, layer, head, kind)?;
            fs::create_dir_all(&out)?;
            let file = out.join(format!("attention_{}_l{layer}_h{head}.txt", kind.name()));
            let mut text = format!(
                "# utterance={utterance} kind={} layer={layer} head={head} shape={}x{}\n",
                kind.name(),
                grid.rows(),
                grid.cols()
            );
            for i in 0..grid.rows() {
                let row: Vec<String> = grid.row(i).iter().map(|v| v.to_string()).collect();
                text.push_str(&row.join(" "));
                text.push('\n');
            }
            fs::write(&file, text)?;
            write_manifest(&out, "dump-attention", &[("checkpoint", &checkpoint), ("data", &data)], &ckpt.config)?;
            println!("{}", file.display());
        }
        Command::Average { checkpoints, out } => {
            let ckpts = checkpoints
                .iter()
                .map(|p| Checkpoint::load(p))
                .collect::<Result<Vec<_>, _>>()?;
            let avg = average_checkpoints(&ckpts)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            avg.save(&out)?;
            let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let inputs: Vec<(&str, &Path)> = checkpoints.iter().map(|p| ("checkpoint", p.as_path())).collect();
            write_manifest(dir, "average", &inputs, &avg.config)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Attention weights of one head from a teacher-forced pass over the
/// reference transcript with reference history.
fn attention_grid(
    model: &Model,
    convs: &[Conversation],
    utterance: &str,
    layer: usize,
    head: usize,
    kind: Kind,
) -> Result<Tensor, Error> {
    let cfg = &model.config;
    let layers = if kind == Kind::Encoder { cfg.enc_layers } else { cfg.dec_layers };
    if layer >= layers || head >= cfg.heads {
        return Err(Error::Config(format!(
            "layer {layer} head {head} outside {layers} layers x {} heads",
            cfg.heads
        )));
    }
    let index = HistoryIndex::build(convs, cfg.decoder_history);
    let item = time_ordered_schedule(convs, &index, cfg.history_policy)
        .into_iter()
        .find(|it| it.item.get(convs).id == utterance)
        .ok_or_else(|| Error::Contract(format!("no utterance {utterance:?} in the dataset")))?;
    let utt = item.item.get(convs);
    let history = training_history(model, convs, &item);
    let state = context_state(model, convs, &index, item.encoder_context)?;
    let mut g = Graph::inference(&model.store);
    let enc = encode_on_graph(&mut g, model, &utt.features, state.as_ref())?;
    if kind == Kind::Encoder {
        let scores = g.value(enc.layer_scores[layer][head]).clone();
        return scores.softmax_rows();
    }
    let memory = if history.is_empty() {
        None
    } else {
        Some(context_fold(&mut g, model, &history)?)
    };
    let (input, _) = teacher_forcing_pair(&utt.transcript);
    let fwd = decode_forward(&mut g, model, &input, memory, enc.hidden)?;
    let weights = match kind {
        Kind::SelfAttention => fwd.self_weights[layer][head],
        _ => fwd.cross_weights[layer][head],
    };
    Ok(g.value(weights).clone())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 3,
                Error::Numeric(_) => 4,
                _ => 1,
            })
        }
    }
}
