use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use vqw2v::audio::{read_wav, synth_dataset, write_wav, Generator, SynthSpec, Waveform};
use vqw2v::bitrate::{eval_bitrate, sweep_tsv};
use vqw2v::mlm::{build_vocab, MaskedEncoderConfig, SpanMaskConfig, Vocabulary};
use vqw2v::model::VqConfig;
use vqw2v::quantizer::{codeword_usage, Backend};
use vqw2v::tokens::{read_tokens, write_tokens, TokenForm, TokenStream};
use vqw2v::train::{load_vq_model, Checkpoint, MlmTrainer, StepRecord, TrainPlan, VqTrainer};
use vqw2v::{Error, Result};

#[derive(Parser)]
#[command(name = "vqw2v", version, about = "Learn discrete speech tokens and pretrain a masked model over them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic 16 kHz dataset as WAV files.
    GenSynth(GenSynth),
    /// Train the quantized contrastive model on WAV files.
    TrainVq(TrainVq),
    /// Turn WAV files into token streams with a trained model.
    Tokenize(Tokenize),
    /// Collect the tuple vocabulary of token streams.
    BuildVocab(BuildVocab),
    /// Pretrain the masked model on token streams.
    TrainMlm(TrainMlm),
    /// Dump final-layer features of a token stream as TSV, one frame per line.
    ExtractFeatures(ExtractFeatures),
    /// Print the bitrate r * G * log2(V).
    EvalBitrate(EvalBitrate),
    /// Count distinct codewords in token streams.
    CodebookStats(CodebookStats),
}

#[derive(Args)]
struct GenSynth {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    clips: usize,
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "filtered-noise-segments")]
    generator: Generator,
}

#[derive(Clone, Copy, ValueEnum)]
enum VqPreset {
    Small,
    Full,
}

#[derive(Args)]
struct TrainVq {
    /// WAV files or directories of them.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "small")]
    preset: VqPreset,
    #[arg(long, default_value = "gumbel")]
    backend: Backend,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    vars: Option<usize>,
    #[command(flatten)]
    plan: PlanArgs,
    /// Continue from a stage-one checkpoint; model flags are taken from it.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    lr_peak: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Save `<out>.step<N>` every N steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Telemetry destination; standard output when absent.
    #[arg(long)]
    telemetry: Option<PathBuf>,
}

impl PlanArgs {
    fn apply(&self, mut plan: TrainPlan) -> TrainPlan {
        if let Some(steps) = self.steps {
            plan = plan.shortened(steps);
        }
        if let Some(b) = self.batch {
            plan.batch_size = b;
        }
        if let Some(c) = self.crop {
            plan.crop = c;
        }
        if let Some(lr) = self.lr_peak {
            plan.lr.lr_peak = lr;
        }
        if let Some(s) = self.seed {
            plan.seed = s;
        }
        if self.checkpoint_every.is_some() {
            plan.checkpoint_every = self.checkpoint_every;
        }
        plan
    }

    fn sink(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.telemetry {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(io::stdout()),
        })
    }
}

#[derive(Args)]
struct Tokenize {
    #[arg(long)]
    checkpoint: PathBuf,
    /// WAV files or directories of them.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Output directory; one stream per input, named after it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "binary")]
    format: TokenForm,
}

#[derive(Args)]
struct BuildVocab {
    #[arg(long, required = true, num_args = 1..)]
    tokens: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MlmPreset {
    Small,
    Tiny,
}

#[derive(Args)]
struct TrainMlm {
    #[arg(long, required = true, num_args = 1..)]
    tokens: Vec<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "small")]
    preset: MlmPreset,
    #[arg(long)]
    mask_prob: Option<f64>,
    #[arg(long)]
    mask_span: Option<usize>,
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractFeatures {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokens: PathBuf,
    /// Standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalBitrate {
    #[arg(long, required_unless_present = "sweep")]
    groups: Option<usize>,
    #[arg(long, required_unless_present = "sweep")]
    vars: Option<usize>,
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    /// Print the G x V grid as TSV instead.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args)]
struct CodebookStats {
    #[arg(long, required = true, num_args = 1..)]
    tokens: Vec<PathBuf>,
}

/// Expands directories into their sorted files with one of `exts`.
fn expand(inputs: &[PathBuf], exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| exts.iter().any(|e| x == *e)))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("no .{} inputs", exts.join("/."))));
    }
    Ok(out)
}

fn read_streams(paths: &[PathBuf]) -> Result<Vec<TokenStream>> {
    expand(paths, &["tok", "tsv"])?.iter().map(|p| read_tokens(p)).collect()
}

fn emit(out: &mut dyn Write, rec: &StepRecord) {
    // telemetry is best effort; a closed pipe must not abort training
    let _ = writeln!(out, "{rec}");
}

fn numbered(out: &Path, step: u64) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(format!(".step{step}"));
    PathBuf::from(s)
}

fn gen_synth(a: GenSynth) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let clips = synth_dataset(&SynthSpec::new(a.clips, a.seconds, a.seed, a.generator))?;
    for (i, c) in clips.iter().enumerate() {
        write_wav(&a.out.join(format!("clip_{i:04}.wav")), &c.wave)?;
    }
    println!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

fn train_vq(a: TrainVq) -> Result<()> {
    let data: Vec<Waveform> = expand(&a.data, &["wav"])?.iter().map(|p| read_wav(p)).collect::<Result<_>>()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = VqTrainer::from_checkpoint(&Checkpoint::load(path)?)?;
            t.plan = a.plan.apply(t.plan.clone());
            t
        }
        None => {
            let mut cfg = match a.preset {
                VqPreset::Small => VqConfig::small(a.backend),
                VqPreset::Full => VqConfig::full(a.backend),
            };
            if let Some(c) = a.channels {
                cfg = cfg.with_channels(c);
            }
            let (g, v) = (a.groups.unwrap_or(cfg.quantizer.groups), a.vars.unwrap_or(cfg.quantizer.vars));
            cfg = cfg.with_codebook(g, v);
            VqTrainer::new(&cfg, &a.plan.apply(TrainPlan::vq()))?
        }
    };
    let mut sink = a.plan.sink()?;
    trainer.run(&data, |r| emit(&mut *sink, r), |ck| ck.save(&numbered(&a.out, ck.step)))?;
    sink.flush()?;
    trainer.checkpoint()?.save(&a.out)
}

fn tokenize(a: Tokenize) -> Result<()> {
    let model = load_vq_model(&Checkpoint::load(&a.checkpoint)?)?;
    fs::create_dir_all(&a.out)?;
    let ext = match a.format {
        TokenForm::Text => "tsv",
        TokenForm::Binary => "tok",
    };
    let inputs = expand(&a.input, &["wav"])?;
    inputs.par_iter().try_for_each(|p| {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let stream = model.token_stream(&read_wav(p)?.samples, stem.clone())?;
        write_tokens(&stream, &a.out.join(format!("{stem}.{ext}")), a.format)
    })?;
    println!("tokenized {} files into {}", inputs.len(), a.out.display());
    Ok(())
}

fn build_vocab_cmd(a: BuildVocab) -> Result<()> {
    let vocab = build_vocab(&read_streams(&a.tokens)?)?;
    vocab.save(&a.out)?;
    println!("vocabulary size={} tuples={}", vocab.len(), vocab.tuple_count());
    Ok(())
}

fn train_mlm(a: TrainMlm) -> Result<()> {
    let streams = read_streams(&a.tokens)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = MlmTrainer::from_checkpoint(&Checkpoint::load(path)?)?;
            if t.vocab != vocab {
                return Err(Error::Incompatible("vocabulary differs from the checkpoint's".into()));
            }
            t.plan = a.plan.apply(t.plan.clone());
            t
        }
        None => {
            let cfg = match a.preset {
                MlmPreset::Small => MaskedEncoderConfig::small(),
                MlmPreset::Tiny => MaskedEncoderConfig::tiny(),
            };
            let d = SpanMaskConfig::default();
            let mask = SpanMaskConfig { p: a.mask_prob.unwrap_or(d.p), span: a.mask_span.unwrap_or(d.span) };
            MlmTrainer::new(&cfg, &vocab, &mask, &a.plan.apply(TrainPlan::mlm()))?
        }
    };
    let data = trainer.encode(&streams)?;
    let mut sink = a.plan.sink()?;
    trainer.run(&data, |r| emit(&mut *sink, r), |ck| ck.save(&numbered(&a.out, ck.step)))?;
    sink.flush()?;
    trainer.checkpoint()?.save(&a.out)
}

fn extract_features(a: ExtractFeatures) -> Result<()> {
    let trainer = MlmTrainer::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let stream = read_tokens(&a.tokens)?;
    let ids = trainer.vocab.encode(&stream)?;
    let f = trainer.model.extract_features(&ids)?;
    let (dim, t) = f.dims2()?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    };
    for ti in 0..t {
        let row: Vec<String> = (0..dim).map(|r| f.data()[r * t + ti].to_string()).collect();
        writeln!(out, "{}", row.join("\t"))?;
    }
    out.flush()?;
    Ok(())
}

fn eval_bitrate_cmd(a: EvalBitrate) -> Result<()> {
    if a.sweep {
        print!("{}", sweep_tsv(a.rate)?);
    } else {
        // clap guarantees both are present without --sweep
        println!("{:.2}", eval_bitrate(a.groups.unwrap_or(0), a.vars.unwrap_or(0), a.rate)?);
    }
    Ok(())
}

fn codebook_stats(a: CodebookStats) -> Result<()> {
    let u = codeword_usage(&read_streams(&a.tokens)?)?;
    println!(
        "unique={} fraction={} tokens={} possible={} fraction_of_possible={}",
        u.unique, u.fraction, u.tokens, u.possible, u.fraction_of_possible
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let detail: Vec<&str> =
                msg.lines().map(str::trim).take_while(|l| !l.starts_with("Usage:")).filter(|l| !l.is_empty()).collect();
            eprintln!("error: usage: {}", detail.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::TrainVq(a) => train_vq(a),
        Command::Tokenize(a) => tokenize(a),
        Command::BuildVocab(a) => build_vocab_cmd(a),
        Command::TrainMlm(a) => train_mlm(a),
        Command::ExtractFeatures(a) => extract_features(a),
        Command::EvalBitrate(a) => eval_bitrate_cmd(a),
        Command::CodebookStats(a) => codebook_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.one_line());
            ExitCode::FAILURE
        }
    }
}
