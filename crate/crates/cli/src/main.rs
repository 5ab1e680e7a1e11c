use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hybridvc::checkpoint::{load_backbone, load_speaker, save_backbone, save_speaker};
use hybridvc::data::{synth_dataset, Corpus};
use hybridvc::encoders::{pretrain_speaker_encoder, SpeakerPretrainConfig};
use hybridvc::eval::{evaluate_pairs, read_pairs};
use hybridvc::inference::{
    convert, griffin_lim, write_mel, ConversionRequest, Prompt, DEFAULT_TEMPERATURE, GRIFFIN_LIM_ITERATIONS,
};
use hybridvc::latent::{pretrain_backbone, BackboneConfig};
use hybridvc::signal::wav::{read_wav, write_wav};
use hybridvc::training::{
    alpha_sweep, train_hybrid, write_sweep_csv, write_sweep_svg, Checkpoint, RunOutput, TrainConfig,
};
use hybridvc::Error;

#[derive(Parser, Debug)]
#[command(name = "hybridvc", version, about = "Text- and audio-prompted voice conversion")]
struct Cli {
    /// Directory that every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    root: PathBuf,
    /// TOML file with optional [speaker], [backbone] and [train] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-speaker corpus with style prompts.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        speakers: usize,
        #[arg(long, default_value_t = 20)]
        utterances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the speaker encoder by speaker classification.
    PretrainSpeaker {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the posterior encoder and decoder.
    PretrainBackbone {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        speaker: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hybrid training of flow, prior, bottleneck, text encoder and temperature.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a hybrid checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train once per alpha and write aligned loss curves.
    AlphaSweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.5, 0.9])]
        alphas: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    Convert(ConvertArgs),
    /// Score (source, converted) pairs listed in a CSV file.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        /// Output directory for report.csv and report.json.
        #[arg(long)]
        report: PathBuf,
        /// Hybrid checkpoint; enables cosine consistency and Fréchet distance.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Convert a source utterance under an audio or text prompt.
#[derive(Args, Debug)]
#[command(group(ArgGroup::new("prompt").required(true).args(["prompt_audio", "prompt_text"])))]
struct ConvertArgs {
    #[arg(long, default_value = "checkpoint.hvc")]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    prompt_audio: Option<PathBuf>,
    #[arg(long)]
    prompt_text: Option<String>,
    /// Output path; `.wav` writes Griffin-Lim audio, anything else a mel file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    speaker: SpeakerPretrainConfig,
    backbone: BackboneConfig,
    train: TrainConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> hybridvc::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn log_config<T: Serialize>(section: &str, cfg: &T) {
    let text = toml::to_string(cfg).expect("config serializes");
    eprintln!("[{section}]\n{}", text.trim_end());
}

fn run(cli: Cli) -> hybridvc::Result<()> {
    let at = |p: &Path| cli.root.join(p);
    let cfg = RunConfig::load(cli.config.as_deref().map(at).as_deref())?;
    match cli.command {
        Command::SynthData {
            out,
            speakers,
            utterances,
            seed,
        } => {
            eprintln!("synth-data speakers={speakers} utterances={utterances} seed={seed}");
            let manifest = synth_dataset(speakers, utterances, &at(&out), seed)?;
            println!("{}", manifest.display());
        }
        Command::PretrainSpeaker { manifest, out } => {
            log_config("speaker", &cfg.speaker);
            let corpus = Corpus::load(&at(&manifest))?;
            let (enc, report) = pretrain_speaker_encoder(&corpus, &cfg.speaker)?;
            save_speaker(&at(&out), &enc, cfg.speaker.seed)?;
            println!(
                "speakers={} train_accuracy={:.4} final_loss={:.5}",
                report.speakers, report.train_accuracy, report.final_loss
            );
        }
        Command::PretrainBackbone { manifest, speaker, out } => {
            log_config("backbone", &cfg.backbone);
            let corpus = Corpus::load(&at(&manifest))?;
            let enc = load_speaker(&at(&speaker))?;
            let (backbone, report) = pretrain_backbone(&corpus, &enc, &cfg.backbone)?;
            save_backbone(&at(&out), &enc, &backbone, cfg.backbone.seed)?;
            println!(
                "final_loss={:.5} final_l1={:.5} val_l1={:.5}",
                report.final_loss, report.final_l1, report.val_l1
            );
        }
        Command::Train {
            manifest,
            backbone,
            out_dir,
            resume,
        } => {
            log_config("train", &cfg.train);
            let corpus = Corpus::load(&at(&manifest))?;
            let out = RunOutput {
                dir: Some(at(&out_dir)),
                stop_at: None,
            };
            let resume = resume.map(|r| at(&r));
            let (ckpt, rows) = train_hybrid(&corpus, &at(&backbone), &cfg.train, resume.as_deref(), &out)?;
            if let Some(last) = rows.last() {
                println!("{}", last.csv_row());
            }
            eprintln!("trained to step {}", ckpt.step);
        }
        Command::AlphaSweep {
            manifest,
            backbone,
            alphas,
            out_dir,
        } => {
            log_config("train", &cfg.train);
            eprintln!("alphas={alphas:?}");
            let corpus = Corpus::load(&at(&manifest))?;
            let (speaker, bb) = load_backbone(&at(&backbone))?;
            let result = alpha_sweep(&corpus, &speaker, &bb, &alphas, &cfg.train)?;
            let dir = at(&out_dir);
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            write_sweep_csv(&result, &dir.join("alpha_sweep.csv"))?;
            write_sweep_svg(&result, &dir.join("alpha_sweep.svg"))?;
            for (alpha, ckpt) in result.alphas.iter().zip(&result.checkpoints) {
                ckpt.save(&dir.join(format!("alpha_{alpha}.hvc")))?;
            }
            for (alpha, curve) in result.alphas.iter().zip(&result.curves) {
                if let Some(last) = curve.last() {
                    println!("alpha={alpha} {}", last.csv_row());
                }
            }
        }
        Command::Convert(a) => {
            eprintln!("convert seed={} temperature={}", a.seed, a.temperature);
            let ckpt = Checkpoint::load(&at(&a.checkpoint))?;
            let prompt = match (a.prompt_audio, a.prompt_text) {
                (Some(p), None) => Prompt::Audio(read_wav(at(&p))?),
                (None, Some(t)) => Prompt::Text(t),
                _ => {
                    return Err(Error::Input(
                        "give exactly one of --prompt-audio and --prompt-text".into(),
                    ))
                }
            };
            let req = ConversionRequest {
                source: read_wav(at(&a.source))?,
                prompt,
                seed: a.seed,
                temperature: a.temperature,
            };
            let result = convert(&req, &ckpt)?;
            let out = at(&a.out);
            if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                write_wav(&out, &griffin_lim(&result.mel, GRIFFIN_LIM_ITERATIONS)?)?;
            } else {
                write_mel(&out, &result.mel)?;
            }
            println!("{}", out.display());
        }
        Command::Eval {
            pairs,
            report,
            checkpoint,
        } => {
            let specs = read_pairs(&at(&pairs))?;
            let ckpt = checkpoint.map(|c| Checkpoint::load(&at(&c))).transpose()?;
            let mut rep = evaluate_pairs(&specs, ckpt.as_ref().map(|c| &c.model))?;
            rep.metadata
                .insert("pairs_file".into(), at(&pairs).display().to_string());
            rep.metadata.insert("pairs".into(), specs.len().to_string());
            let dir = at(&report);
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            rep.write(&dir.join("report.csv"), &dir.join("report.json"))?;
            println!("{}", serde_json::to_string(&rep.summary).expect("summary serializes"));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Input(_) | Error::Config(_) | Error::Manifest { .. } | Error::MissingAudio(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
