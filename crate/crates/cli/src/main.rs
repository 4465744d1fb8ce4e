use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use speech2code::features::{compute_mfcc, CorpusStats};
use speech2code::inverter::InverterModel;
use speech2code::io::{read_code_lines, read_wav, write_code_lines, write_wav};
use speech2code::pipeline::{
    evaluate_run, load_stats, make_toy_corpus, prepare_features, run_grid, run_split_inference, run_stage2,
    train_inverter, train_vqvae, write_inference, ExperimentConfig, Manifest, RunArtifacts, Split, Translator,
};
use speech2code::vqvae::VqVaeModel;

#[derive(Parser)]
#[command(name = "speech2code", version, about = "Textless speech-to-speech translation through discrete acoustic units")]
struct Cli {
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML experiment config; defaults to the run directory's stored config,
    /// then to the built-in toy configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to `<output_root>/<config hash>`.
    #[arg(long, global = true, env = "SPEECH2CODE_RUN_DIR")]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic paired tone corpus and its manifest.
    MakeCorpus {
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        pairs: usize,
    },
    /// Computes MFCC and spectrogram files for every manifest entry.
    ExtractFeatures {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Trains the VQ-VAE and extracts target codes for all splits.
    TrainVqvae {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Trains the codebook inverter on the extracted training codes.
    TrainInverter {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Target-language speech to codes with the trained VQ-VAE.
    Encode {
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// A one-line codes file to speech with the inverter and Griffin-Lim.
    Synthesize {
        codes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the translation model on stage-1 codes.
    TrainS2s {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Source speech to target speech; writes WAV, codes and diagnostics.
    Translate {
        wav: PathBuf,
        /// Output WAV; codes and diagnostics go next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Translates a split and scores the codes against the stage-1 codes.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// Hypothesis transcripts for word-level BLEU.
        #[arg(long)]
        transcripts: Option<PathBuf>,
        /// Also synthesise a WAV per utterance.
        #[arg(long)]
        synthesize: bool,
        /// Score existing inference outputs instead of translating again.
        #[arg(long)]
        reuse: bool,
    },
    /// Trains and scores every codebook size x time reduction cell.
    Grid {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run cells one after another.
        #[arg(long)]
        sequential: bool,
    },
}

struct Resolved {
    cfg: ExperimentConfig,
    run_dir: PathBuf,
}

fn resolve(cli: &Cli) -> Result<Resolved> {
    let stored = cli.run_dir.as_ref().map(|d| d.join("config.toml")).filter(|p| p.is_file());
    let mut cfg = match (&cli.config, &stored) {
        (Some(p), _) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        (None, Some(p)) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let run_dir = cli.run_dir.clone().unwrap_or_else(|| cfg.default_run_dir());
    Ok(Resolved { cfg, run_dir })
}

fn open_run(cli: &Cli) -> Result<(RunArtifacts, ExperimentConfig)> {
    let ctx = resolve(cli)?;
    let run = RunArtifacts::create(&ctx.run_dir, &ctx.cfg)?;
    Ok((run, ctx.cfg))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::MakeCorpus { out, pairs } => {
            let seed = cli.seed.unwrap_or(resolve(cli)?.cfg.seed);
            let m = make_toy_corpus(out, seed, *pairs)?;
            Ok(format!(
                "make-corpus manifest={} pairs={} train={} dev={} test={}",
                out.join("manifest.tsv").display(),
                m.entries.len(),
                m.count(Split::Train),
                m.count(Split::Dev),
                m.count(Split::Test)
            ))
        }
        Command::ExtractFeatures { manifest } => {
            let (run, cfg) = open_run(cli)?;
            let m = load_manifest(manifest)?;
            let f = prepare_features(&m, &cfg.features, &run)?;
            Ok(format!(
                "extract-features run_dir={} utterances={}",
                run.root.display(),
                f.src_mfcc.len()
            ))
        }
        Command::TrainVqvae { manifest } => {
            let (run, cfg) = open_run(cli)?;
            let m = load_manifest(manifest)?;
            let s = train_vqvae(&m, &cfg, &run)?;
            Ok(format!(
                "train-vqvae run_dir={} hash={} steps={} recon_first={:.6} recon_last={:.6} perplexity={:.3} coded={}",
                run.root.display(),
                run.config_hash(),
                s.last.step,
                s.first.recon,
                s.last.recon,
                s.last.perplexity,
                s.coded_utterances
            ))
        }
        Command::TrainInverter { manifest } => {
            let (run, cfg) = open_run(cli)?;
            let m = load_manifest(manifest)?;
            let s = train_inverter(&m, &cfg, &run)?;
            Ok(format!(
                "train-inverter run_dir={} hash={} steps={} loss_first={:.6} loss_last={:.6}",
                run.root.display(),
                run.config_hash(),
                s.last.step,
                s.first.loss,
                s.last.loss
            ))
        }
        Command::Encode { wav, out } => {
            let (run, cfg) = open_run(cli)?;
            let model = VqVaeModel::load(&run.vqvae_checkpoint(), Some(&cfg.vqvae))
                .context("encode needs a trained VQ-VAE (run train-vqvae)")?;
            let stats: CorpusStats = load_stats(&run)?.tgt_mfcc;
            let w = read_wav(wav)?;
            let codes = model.extract_codes(&stats.normalize(&compute_mfcc(&w, &cfg.features)?)?)?;
            write_code_lines(out, std::slice::from_ref(&codes))?;
            Ok(format!("encode out={} codes={}", out.display(), codes.len()))
        }
        Command::Synthesize { codes, out } => {
            let (run, cfg) = open_run(cli)?;
            let model = InverterModel::load(&run.inverter_checkpoint())
                .context("synthesize needs a trained inverter (run train-inverter)")?;
            let lines = read_code_lines(codes)?;
            let [seq] = lines.as_slice() else {
                bail!("{} must hold exactly one code sequence, found {}", codes.display(), lines.len());
            };
            let syn = model.synthesize(seq, &cfg.features)?;
            write_wav(out, &syn.waveform)?;
            Ok(format!(
                "synthesize out={} samples={} spectral_convergence={:.6}",
                out.display(),
                syn.waveform.len(),
                syn.spectral_convergence
            ))
        }
        Command::TrainS2s { manifest } => {
            let (run, cfg) = open_run(cli)?;
            let m = load_manifest(manifest)?;
            let s = run_stage2(&m, &cfg, &run)?;
            let dev = s.dev.map_or_else(|| "-".to_string(), |d| format!("{:.4}", d.dev_token_acc));
            Ok(format!(
                "train-s2s run_dir={} hash={} steps={} loss_first={:.6} loss_last={:.6} dev_token_acc={dev}",
                run.root.display(),
                run.config_hash(),
                s.last.step,
                s.first.loss,
                s.last.loss
            ))
        }
        Command::Translate { wav, out } => {
            let (run, cfg) = open_run(cli)?;
            let translator = Translator::load(&run, &cfg)?;
            let w = read_wav(wav)?;
            let result = translator.run(&w)?;
            let out = out.clone().unwrap_or_else(|| wav.with_extension("translated.wav"));
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let stem = out
                .file_stem()
                .and_then(|s| s.to_str())
                .context("output path needs a file name")?;
            write_inference(&result, dir, stem)?;
            Ok(format!(
                "translate out={} codes={} tokens={} truncated={} spectral_convergence={:.6}",
                out.display(),
                dir.join(format!("{stem}.codes")).display(),
                result.codes.len(),
                result.diagnostics.truncated,
                result.diagnostics.spectral_convergence
            ))
        }
        Command::Evaluate {
            manifest,
            split,
            transcripts,
            synthesize,
            reuse,
        } => {
            let (run, cfg) = open_run(cli)?;
            let m = load_manifest(manifest)?;
            let split: Split = split.as_deref().unwrap_or(&cfg.eval.split).parse()?;
            if !*reuse {
                let translator = Translator::load(&run, &cfg)?;
                run_split_inference(&m, &translator, &run, split, *synthesize)?;
            }
            let r = evaluate_run(&m, &run, split, transcripts.as_deref(), cfg.eval.smoothing)?;
            let word = r.word_bleu.as_ref().map_or_else(|| "-".to_string(), |b| format!("{:.2}", b.bleu));
            Ok(format!(
                "evaluate split={split} utterances={} missing={} token_bleu={:.2} token_error_rate={:.4} exact={:.4} word_bleu={word} report={}",
                r.utterances.len(),
                r.missing.len(),
                r.corpus.bleu,
                r.token_error_rate,
                r.exact_match_rate,
                run.eval_dir().join(format!("{split}.tsv")).display()
            ))
        }
        Command::Grid {
            manifest,
            out,
            sequential,
        } => {
            let mut ctx = resolve(cli)?;
            if *sequential {
                ctx.cfg.grid.parallel = false;
            }
            let m = load_manifest(manifest)?;
            let out = out.clone().unwrap_or_else(|| ctx.run_dir.join("grid"));
            let report = run_grid(&m, &ctx.cfg, &out)?;
            print!("{}", report.to_tsv());
            let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
            Ok(format!(
                "grid rows={} failed={failed} table={}",
                report.rows.len(),
                out.join("grid.tsv").display()
            ))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
