use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use xpi::bench::{self, argmax, BreakdownOptions};
use xpi::format::correlations::{read_correlations, write_correlations};
use xpi::format::vectors::{read_vectors, write_vectors, TestVector};
use xpi::format::weights::{model_hash, read_weights, write_weights};
use xpi::session::{client_infer, run_local, server_serve, LocalOptions, SessionParams};
use xpi::transcript::Transcript;
use xpi::transport::{self, LinkShaping, TransportKind};
use xpi::{Result, XpiError};
use xpi_core::model::synth::{random_images, synthetic_model};
use xpi_core::{
    dealer_gen, forward_plain_fixed, forward_plain_float, CorrelatedRandomness, FixedPointConfig, ModelConfig,
    ModelWeights, Program, RealTensor, TruncMode,
};

#[derive(Parser)]
#[command(name = "xpi", version, about = "Two-party private inference for square-activation xMLP models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded synthetic weights (and optionally float test vectors).
    GenWeights(GenWeightsArgs),
    /// Deal correlated randomness for one session into client.xpc and server.xpc.
    Dealer(DealerArgs),
    /// Serve one private inference session over TCP.
    Serve(ServeArgs),
    /// Run one private inference as the client.
    Infer(InferArgs),
    /// Plaintext fixed-point and float forward passes.
    Plain(PlainArgs),
    /// Per-element latency of the private square protocol.
    BenchSquare(BenchSquareArgs),
    /// Linear/non-linear latency breakdown at several batch sizes.
    Breakdown(BreakdownArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// XMW1 weight file; without it, seeded synthetic weights for --model.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Preset: toy, mnist, m16, t16, s16, ...
    #[arg(long, default_value = "toy")]
    model: String,
    /// Seed for synthetic weights.
    #[arg(long, default_value_t = 0)]
    weights_seed: u64,
}

#[derive(Args, Clone)]
struct ModeArgs {
    #[arg(long, default_value_t = 16)]
    frac_bits: u32,
    /// exact | local | pair (long names insecure-exact, local-probabilistic, dealer-pair also accepted).
    #[arg(long = "trunc-mode", visible_alias = "mode", default_value = "local", value_parser = parse_mode)]
    trunc_mode: TruncMode,
}

impl ModeArgs {
    fn fp(&self) -> Result<FixedPointConfig> {
        Ok(FixedPointConfig::new(self.frac_bits, self.trunc_mode)?)
    }
}

#[derive(Args)]
struct GenWeightsArgs {
    #[arg(long, default_value = "toy")]
    model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write this many random images with their float logits.
    #[arg(long)]
    vectors: Option<usize>,
    #[arg(long, requires = "vectors")]
    vectors_out: Option<PathBuf>,
}

#[derive(Args)]
struct DealerArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    mode: ModeArgs,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for client.xpc and server.xpc.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    mode: ModeArgs,
    #[arg(long)]
    corr: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7070")]
    addr: String,
    #[arg(long)]
    batch: Option<usize>,
    /// Agree to let the client reveal the logits to this server.
    #[arg(long)]
    reveal_to_server: bool,
    /// Transcript output (.json or .csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Artificial round-trip latency per frame exchange; 0 disables.
    #[arg(long, default_value_t = 0.1)]
    inject_rtt_ms: f64,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    mode: ModeArgs,
    /// Client correlation bundle; not needed with --selftest.
    #[arg(long, required_unless_present = "selftest")]
    corr: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:7070")]
    addr: String,
    #[arg(long)]
    batch: Option<usize>,
    /// Seed for random input images (and, with --selftest, the dealer).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// XMV1 file to take input images from instead of random ones.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Run dealer, server and client in this process over loopback.
    #[arg(long)]
    selftest: bool,
    #[arg(long)]
    reveal_to_server: bool,
    /// Result JSON (logits, argmax, transcript); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step transcript as CSV.
    #[arg(long)]
    transcript_csv: Option<PathBuf>,
    /// Artificial round-trip latency per frame exchange; 0 disables.
    #[arg(long, default_value_t = 0.1)]
    inject_rtt_ms: f64,
}

#[derive(Args)]
struct PlainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 16)]
    frac_bits: u32,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchSquareArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,64,4096,262144")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "loopback", value_parser = parse_transport)]
    transport: TransportKind,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BreakdownArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    mode: ModeArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,32,512")]
    batches: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "loopback", value_parser = parse_transport)]
    transport: TransportKind,
    /// Artificial round-trip latency per frame exchange; 0 disables.
    #[arg(long, default_value_t = 0.1)]
    inject_rtt_ms: f64,
    /// Output path stem: writes <out>.csv and <out>.json; CSV to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<TruncMode, String> {
    TruncMode::from_name(s).ok_or_else(|| format!("unknown truncation mode {s:?} (exact, local, pair)"))
}

fn parse_transport(s: &str) -> std::result::Result<TransportKind, String> {
    match s {
        "loopback" => Ok(TransportKind::Loopback),
        "tcp" => Ok(TransportKind::Tcp),
        _ => Err(format!("unknown transport {s:?} (loopback, tcp)")),
    }
}

fn preset(name: &str) -> Result<ModelConfig> {
    ModelConfig::preset(name).ok_or_else(|| XpiError::Invalid(format!("unknown model preset {name:?}")))
}

fn load_model(args: &ModelArgs) -> Result<ModelWeights> {
    match &args.weights {
        Some(path) => read_weights(path),
        None => Ok(synthetic_model(&preset(&args.model)?, &mut ChaCha20Rng::seed_from_u64(args.weights_seed))?),
    }
}

fn shaping(rtt_ms: f64) -> Result<LinkShaping> {
    if !(rtt_ms >= 0.0 && rtt_ms.is_finite()) {
        return Err(XpiError::Invalid(format!("--inject-rtt-ms {rtt_ms}")));
    }
    Ok(LinkShaping::rtt_ms(rtt_ms))
}

/// Batch implied by the bundle's first square layer.
fn bundle_batch(cfg: &ModelConfig, corr: &CorrelatedRandomness, flag: Option<usize>) -> Result<usize> {
    let per_image = cfg.positions() * cfg.channel_mix_dim;
    let implied = corr.square_counts().first().map(|&n| n / per_image);
    match (implied, flag) {
        (Some(b), Some(f)) if b != f => Err(XpiError::Invalid(format!(
            "--batch {f} but the correlation bundle was dealt for batch {b}"
        ))),
        (Some(b), _) | (None, Some(b)) => Ok(b),
        (None, None) => Err(XpiError::Invalid("--batch is required for a model without square layers".into())),
    }
}

fn params_for(weights: &ModelWeights, mode: &ModeArgs, corr: &CorrelatedRandomness, batch: usize, reveal: bool) -> SessionParams {
    SessionParams {
        model_hash: model_hash(weights),
        frac_bits: mode.frac_bits,
        trunc_mode: mode.trunc_mode,
        batch,
        corr_seed: corr.seed(),
        reveal_to_server: reveal,
    }
}

fn input_images(cfg: &ModelConfig, images: Option<&Path>, batch: usize, seed: u64) -> Result<RealTensor> {
    let s = cfg.image_size;
    match images {
        Some(path) => {
            let vectors = read_vectors(path)?;
            if vectors.len() < batch {
                return Err(XpiError::Invalid(format!("{} holds {} images, batch is {batch}", path.display(), vectors.len())));
            }
            if let Some(v) = vectors.iter().find(|v| v.image.len() != cfg.image_numel()) {
                return Err(XpiError::Invalid(format!("image of {} values, model expects {}", v.image.len(), cfg.image_numel())));
            }
            let data = vectors[..batch].iter().flat_map(|v| v.image.iter().copied()).collect();
            Ok(RealTensor::new(vec![batch, 3, s, s], data)?)
        }
        None => Ok(random_images(cfg, batch, &mut ChaCha20Rng::seed_from_u64(seed))),
    }
}

fn rows(t: &RealTensor, width: usize) -> Vec<Vec<f64>> {
    t.data().chunks(width.max(1)).map(<[f64]>::to_vec).collect()
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| XpiError::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn write_transcript(path: &Path, t: &Transcript) -> Result<()> {
    if path.extension().is_some_and(|e| e == "csv") {
        let f = fs::File::create(path).map_err(|e| XpiError::io(path, e))?;
        t.write_csv(f)
    } else {
        emit(Some(path), &t.to_json()?)
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| XpiError::Invalid(format!("json: {e}")))
}

fn cmd_gen_weights(a: GenWeightsArgs) -> Result<()> {
    let cfg = preset(&a.model)?;
    let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
    let weights = synthetic_model(&cfg, &mut rng)?;
    write_weights(&a.out, &weights)?;
    log::info!("wrote {} ({} parameters)", a.out.display(), cfg.param_count());
    if let (Some(n), Some(path)) = (a.vectors, a.vectors_out) {
        // Reload so the expected logits come from the float32 weights on disk.
        let weights = read_weights(&a.out)?;
        let images = random_images(&cfg, n, &mut rng);
        let per = cfg.image_numel();
        let vectors = (0..n)
            .map(|b| {
                let img = RealTensor::new(vec![3, cfg.image_size, cfg.image_size], images.data()[b * per..(b + 1) * per].to_vec())?;
                let logits = forward_plain_float(&weights, &img)?;
                Ok(TestVector { image: img.into_data(), logits: logits.into_data() })
            })
            .collect::<Result<Vec<_>>>()?;
        write_vectors(&path, &vectors)?;
        log::info!("wrote {n} test vectors to {}", path.display());
    }
    Ok(())
}

fn cmd_dealer(a: DealerArgs) -> Result<()> {
    let cfg = match &a.model.weights {
        Some(p) => read_weights(p)?.config,
        None => preset(&a.model.model)?,
    };
    let fp = a.mode.fp()?;
    let (c0, c1) = dealer_gen(&cfg, a.batch, fp.frac_bits(), fp.trunc_mode == TruncMode::DealerPair, a.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| XpiError::io(&a.out, e))?;
    write_correlations(&a.out.join("client.xpc"), &c0)?;
    write_correlations(&a.out.join("server.xpc"), &c1)?;
    log::info!(
        "dealt {} square layers and {} truncation sites for batch {} into {}",
        c0.square_counts().len(),
        c0.trunc_counts().len(),
        a.batch,
        a.out.display()
    );
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let weights = load_model(&a.model)?;
    let mut corr = read_correlations(&a.corr)?;
    let batch = bundle_batch(&weights.config, &corr, a.batch)?;
    let params = params_for(&weights, &a.mode, &corr, batch, a.reveal_to_server);
    let program = Program::compile(&weights, a.mode.frac_bits)?;
    let listener = TcpListener::bind(&a.addr)?;
    log::info!("listening on {}", listener.local_addr()?);
    let mut ep = transport::accept(&listener)?.with_shaping(shaping(a.inject_rtt_ms)?);
    let outcome = server_serve(&mut ep, &program, &mut corr, &params)?;
    log::info!(
        "session done: {} rounds, {} bytes sent",
        outcome.transcript.totals.rounds,
        outcome.transcript.totals.bytes_sent
    );
    if let Some(logits) = &outcome.revealed_logits {
        log::info!("revealed logits: {:?}", logits.data());
    }
    match &a.out {
        Some(p) => write_transcript(p, &outcome.transcript),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct InferReport<'a> {
    logits: Vec<Vec<f64>>,
    argmax: Vec<usize>,
    /// Max |private - plaintext fixed-point| when run as a self-test.
    #[serde(skip_serializing_if = "Option::is_none")]
    max_abs_deviation: Option<f64>,
    transcript: &'a Transcript,
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let weights = load_model(&a.model)?;
    let cfg = weights.config;
    let fp = a.mode.fp()?;
    let (logits, transcript, deviation) = if a.selftest {
        let batch = a.batch.unwrap_or(1);
        let images = input_images(&cfg, a.images.as_deref(), batch, a.seed)?;
        let opts = LocalOptions {
            fp,
            transport: TransportKind::Loopback,
            shaping: shaping(a.inject_rtt_ms)?,
            seed: a.seed,
            reveal_to_server: a.reveal_to_server,
        };
        let run = run_local(&weights, &images, &opts)?;
        let plain = forward_plain_fixed(&weights, &images, &fp)?.decode();
        let dev = plain.max_abs_diff(&run.client.logits);
        (run.client.logits, run.client.transcript, Some(dev))
    } else {
        let corr_path = a.corr.as_ref().expect("clap requires --corr");
        let mut corr = read_correlations(corr_path)?;
        let batch = bundle_batch(&cfg, &corr, a.batch)?;
        let images = input_images(&cfg, a.images.as_deref(), batch, a.seed)?;
        let params = params_for(&weights, &a.mode, &corr, batch, a.reveal_to_server);
        let program = Program::compile(&weights, a.mode.frac_bits)?;
        let mut ep = transport::connect(a.addr.as_str(), Duration::from_secs(10))?.with_shaping(shaping(a.inject_rtt_ms)?);
        let mut rng = ChaCha20Rng::seed_from_u64(a.seed ^ 0x00C1_1E47);
        let out = client_infer(&mut ep, &program, &mut corr, &params, &images, &mut rng)?;
        (out.logits, out.transcript, None)
    };
    let table = rows(&logits, cfg.num_classes);
    let report = InferReport {
        argmax: table.iter().map(|r| argmax(r)).collect(),
        logits: table,
        max_abs_deviation: deviation,
        transcript: &transcript,
    };
    if let Some(p) = &a.transcript_csv {
        write_transcript(p, &transcript)?;
    }
    emit(a.out.as_deref(), &json(&report)?)
}

#[derive(Serialize)]
struct PlainReport {
    fixed: Vec<Vec<f64>>,
    float: Vec<Vec<f64>>,
    max_abs_difference: f64,
}

fn cmd_plain(a: PlainArgs) -> Result<()> {
    let weights = load_model(&a.model)?;
    let cfg = weights.config;
    let images = input_images(&cfg, a.images.as_deref(), a.batch, a.seed)?;
    let fp = FixedPointConfig::new(a.frac_bits, TruncMode::InsecureExact)?;
    let fixed = rows(&forward_plain_fixed(&weights, &images, &fp)?.decode(), cfg.num_classes);
    let per = cfg.image_numel();
    let float = (0..a.batch)
        .map(|b| {
            let img = RealTensor::new(vec![3, cfg.image_size, cfg.image_size], images.data()[b * per..(b + 1) * per].to_vec())?;
            Ok(forward_plain_float(&weights, &img)?.into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    let max_abs_difference = fixed
        .iter()
        .flatten()
        .zip(float.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    emit(a.out.as_deref(), &json(&PlainReport { fixed, float, max_abs_difference })?)
}

fn cmd_bench_square(a: BenchSquareArgs) -> Result<()> {
    let rows = bench::bench_square(&a.sizes, a.repeats, a.seed, a.transport)?;
    match &a.out {
        Some(p) => bench::write_csv(&rows, fs::File::create(p).map_err(|e| XpiError::io(p, e))?),
        None => bench::write_csv(&rows, std::io::stdout().lock()),
    }
}

fn cmd_breakdown(a: BreakdownArgs) -> Result<()> {
    let weights = load_model(&a.model)?;
    let name = match &a.model.weights {
        Some(p) => p.file_stem().map_or("weights".into(), |s| s.to_string_lossy().into_owned()),
        None => a.model.model.clone(),
    };
    let opts = BreakdownOptions {
        model: name,
        fp: a.mode.fp()?,
        transport: a.transport,
        shaping: shaping(a.inject_rtt_ms)?,
        seed: a.seed,
    };
    let rows = bench::breakdown(&weights, &a.batches, &opts)?;
    match &a.out {
        Some(stem) => {
            let csv_path = stem.with_extension("csv");
            bench::write_csv(&rows, fs::File::create(&csv_path).map_err(|e| XpiError::io(&csv_path, e))?)?;
            emit(Some(&stem.with_extension("json")), &bench::to_json(&rows)?)
        }
        None => bench::write_csv(&rows, std::io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("XPI_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenWeights(a) => cmd_gen_weights(a),
        Command::Dealer(a) => cmd_dealer(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Plain(a) => cmd_plain(a),
        Command::BenchSquare(a) => cmd_bench_square(a),
        Command::Breakdown(a) => cmd_breakdown(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
