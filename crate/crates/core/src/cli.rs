//! Command-line front end: WAV I/O and the `refine`, `mcwf`, `simulate` and
//! `metrics` subcommands.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use crate::diffusion::{Denoiser, DiffusionSchedule, GaussianDenoiser, NoiseCoef};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::external::{parse_endpoint, serve, ExternalDenoiser, DEFAULT_TIMEOUT};
use crate::fcp::FcpParams;
use crate::guidance::JacobianPolicy;
use crate::noise_model::{mcwf, McwfParams};
use crate::sampler::{noise_precision, refine, refine_trace, RefineConfig};
use crate::simulate::{gen_mixture, si_sdr, MixtureSpec, NoiseKind};
use crate::spectral::{compress, istft, stft, ComplexSpectrogram, Domain, StftParams};

/// Sample rate the refinement pipeline is built for.
pub const SAMPLE_RATE: u32 = 16_000;

/// Prior variance of `analytic:degenerate`.
const DEGENERATE_VARIANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub sample_rate: u32,
    /// One vector per channel.
    pub channels: Vec<Vec<f64>>,
}

impl Audio {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads 16-bit integer or 32-bit float WAV files.
pub fn read_wav(path: &Path) -> Result<Audio> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| invalid_input(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => {
            return Err(invalid_input(format!(
                "{}: unsupported sample format {fmt:?} {bits}-bit",
                path.display()
            )))
        }
    }
    .map_err(|e| invalid_input(format!("{}: {e}", path.display())))?;
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch.max(1)); n_ch];
    for (i, v) in interleaved.into_iter().enumerate() {
        channels[i % n_ch].push(v);
    }
    Ok(Audio {
        sample_rate: spec.sample_rate,
        channels,
    })
}

/// Writes 32-bit float WAV.
pub fn write_wav(path: &Path, audio: &Audio) -> Result<()> {
    let n_ch = audio.channels.len();
    if n_ch == 0 || audio.channels.iter().any(|c| c.len() != audio.len()) {
        return Err(invalid_input(
            "audio channels must be non-empty and equally long",
        ));
    }
    let spec = hound::WavSpec {
        channels: n_ch as u16,
        sample_rate: audio.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let external = |e: hound::Error| Error::External(format!("{}: {e}", path.display()));
    let mut writer = hound::WavWriter::create(path, spec).map_err(external)?;
    for i in 0..audio.len() {
        for ch in &audio.channels {
            writer.write_sample(ch[i] as f32).map_err(external)?;
        }
    }
    writer.finalize().map_err(external)
}

#[derive(Debug, Parser)]
#[command(
    name = "dps-refine",
    version,
    about = "Diffusion-posterior refinement of multichannel speech estimates"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Refine a single-channel speech estimate against a multichannel mixture.
    Refine(RefineArgs),
    /// Multi-channel Wiener filter toward the speech estimate.
    Mcwf(McwfArgs),
    /// Build a synthetic multichannel mixture from a clean recording.
    Simulate(SimulateArgs),
    /// SI-SDR of an estimate against a reference.
    Metrics(MetricsArgs),
    /// Serve a built-in denoiser over stdin/stdout using the external protocol.
    #[command(hide = true)]
    ServeDenoiser(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum JacobianArg {
    Auto,
    Exact,
    Tweedie,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NoiseCoefArg {
    Sigma2,
    Sigma,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NoiseKindArg {
    White,
    Diffuse,
}

#[derive(Debug, Args)]
struct RefineArgs {
    /// Multichannel mixture WAV.
    mixture: PathBuf,
    /// Single-channel speech estimate WAV.
    estimate: PathBuf,
    /// Output WAV.
    output: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    xi: f64,
    #[arg(long, default_value_t = 300)]
    t_start: usize,
    #[arg(long, default_value_t = 0.95)]
    scm_alpha: f64,
    /// FCP filter length in frames.
    #[arg(long, default_value_t = 13)]
    nh: usize,
    #[arg(long, default_value_t = 1e-3)]
    fcp_eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// analytic:degenerate | analytic:enhanced[:S2] | analytic:zero:S2 | external:CMD-OR-HOST:PORT
    #[arg(long, default_value = "analytic:degenerate")]
    denoiser: String,
    #[arg(long, value_enum, default_value_t = JacobianArg::Auto)]
    jacobian: JacobianArg,
    #[arg(long, value_enum, default_value_t = NoiseCoefArg::Sigma2)]
    noise_coef: NoiseCoefArg,
    /// Write one JSON line per reverse step.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Skip peak normalisation of the inputs.
    #[arg(long)]
    no_normalize: bool,
    /// Seconds to wait for each external denoiser response.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs_f64())]
    denoiser_timeout: f64,
}

#[derive(Debug, Args)]
struct McwfArgs {
    mixture: PathBuf,
    estimate: PathBuf,
    output: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Clean single-channel WAV.
    clean: PathBuf,
    /// Output prefix; writes PREFIXmixture.wav, PREFIXimage.wav, PREFIXnoise.wav and PREFIXmeta.txt.
    prefix: String,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    taps: usize,
    #[arg(long, value_enum, default_value_t = NoiseKindArg::Diffuse)]
    noise: NoiseKindArg,
    /// Reference-channel SNR in dB, or `inf`.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    estimate: PathBuf,
    reference: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// zero | gaussian:S2 (zero-mean isotropic prior)
    #[arg(long, default_value = "zero")]
    model: String,
    /// Frames and bins the server expects, required for gaussian models.
    #[arg(long)]
    shape: Option<String>,
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on a
/// runtime failure, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Cmd::Refine(a) => cmd_refine(&a),
        Cmd::Mcwf(a) => cmd_mcwf(&a),
        Cmd::Simulate(a) => cmd_simulate(&a),
        Cmd::Metrics(a) => cmd_metrics(&a),
        Cmd::ServeDenoiser(a) => cmd_serve(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => 2,
                _ => 1,
            }
        }
    }
}

fn mono(audio: Audio, what: &str) -> Result<Vec<f64>> {
    if audio.channels.len() != 1 {
        return Err(invalid_input(format!(
            "{what} must be single-channel, got {} channels",
            audio.channels.len()
        )));
    }
    Ok(audio.channels.into_iter().next().expect("one channel"))
}

/// Pads or truncates `channels` to `len` after checking they differ by at
/// most `tolerance` samples.
fn match_length(channels: &mut [Vec<f64>], len: usize, tolerance: usize, what: &str) -> Result<()> {
    for ch in channels.iter_mut() {
        if ch.len().abs_diff(len) > tolerance {
            return Err(invalid_input(format!(
                "{what} has {} samples, expected {len} (within {tolerance})",
                ch.len()
            )));
        }
        ch.resize(len, 0.0);
    }
    Ok(())
}

fn load_pair(mixture: &Path, estimate: &Path, hop: usize) -> Result<(Audio, Vec<f64>)> {
    let mut mix = read_wav(mixture)?;
    let est = read_wav(estimate)?;
    if mix.sample_rate != est.sample_rate {
        return Err(invalid_input(format!(
            "sample rates differ: mixture {} Hz, estimate {} Hz",
            mix.sample_rate, est.sample_rate
        )));
    }
    let est = mono(est, "speech estimate")?;
    if est.is_empty() || mix.is_empty() {
        return Err(invalid_input("empty audio"));
    }
    match_length(&mut mix.channels, est.len(), hop, "mixture")?;
    Ok((mix, est))
}

fn peak(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

fn parse_variance(s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| invalid_config(format!("bad prior variance `{s}`")))?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(invalid_config(format!(
            "prior variance must be positive, got {v}"
        )));
    }
    Ok(v)
}

fn build_denoiser(
    spec: &str,
    x_tilde: &ComplexSpectrogram,
    sched: &DiffusionSchedule,
    timeout: Duration,
) -> Result<Box<dyn Denoiser>> {
    let analytic = |mu: ComplexSpectrogram, s2: f64| -> Result<Box<dyn Denoiser>> {
        Ok(Box::new(GaussianDenoiser::isotropic(
            mu,
            s2,
            sched.clone(),
        )?))
    };
    if let Some(rest) = spec.strip_prefix("external:") {
        return Ok(Box::new(ExternalDenoiser::connect(
            &parse_endpoint(rest),
            timeout,
        )?));
    }
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        ["analytic", "degenerate"] => analytic(compress(x_tilde)?, DEGENERATE_VARIANCE),
        ["analytic", "enhanced"] => analytic(compress(x_tilde)?, 1.0),
        ["analytic", "enhanced", s2] => analytic(compress(x_tilde)?, parse_variance(s2)?),
        ["analytic", "zero", s2] => analytic(compress(x_tilde)?.scale(0.0), parse_variance(s2)?),
        _ => Err(invalid_config(format!("unknown denoiser `{spec}`"))),
    }
}

fn cmd_refine(a: &RefineArgs) -> Result<()> {
    let params = StftParams::default();
    let (mix, est) = load_pair(&a.mixture, &a.estimate, params.hop_size)?;
    if mix.sample_rate != SAMPLE_RATE {
        return Err(invalid_input(format!(
            "refinement expects {SAMPLE_RATE} Hz audio, got {} Hz",
            mix.sample_rate
        )));
    }
    if !(a.denoiser_timeout > 0.0) || !a.denoiser_timeout.is_finite() {
        return Err(invalid_config("denoiser timeout must be positive"));
    }
    let gain = if a.no_normalize {
        1.0
    } else {
        match peak(&est) {
            p if p > 0.0 => 1.0 / p,
            _ => 1.0,
        }
    };
    let scaled = |x: &[f64]| x.iter().map(|v| v * gain).collect::<Vec<f64>>();
    let mix_ch: Vec<Vec<f64>> = mix.channels.iter().map(|c| scaled(c)).collect();
    let y = stft(&mix_ch, params)?;
    let x_tilde = stft(&[scaled(&est)], params)?;

    let config = RefineConfig {
        t_start: a.t_start,
        xi: a.xi,
        scm_alpha: a.scm_alpha,
        fcp: FcpParams {
            n_taps: a.nh,
            eps: a.fcp_eps,
        },
        seed: a.seed,
        jacobian: match a.jacobian {
            JacobianArg::Auto => None,
            JacobianArg::Exact => Some(JacobianPolicy::ExactVjp),
            JacobianArg::Tweedie => Some(JacobianPolicy::TweedieIdentity),
        },
        noise_coef: match a.noise_coef {
            NoiseCoefArg::Sigma2 => NoiseCoef::Sigma2,
            NoiseCoefArg::Sigma => NoiseCoef::Sigma,
        },
        ..RefineConfig::default()
    };
    let sched = DiffusionSchedule::default();
    config.validate(&sched)?;
    let timeout = Duration::from_secs_f64(a.denoiser_timeout);
    let mut denoiser = build_denoiser(&a.denoiser, &x_tilde, &sched, timeout)?;

    let started = Instant::now();
    let phi_inv = noise_precision(&y, &x_tilde, config.fcp, config.scm_alpha)?;
    let refined = match &a.trace {
        Some(path) => {
            let (out, trace) =
                refine_trace(&y, &x_tilde, &phi_inv, &mut denoiser, &config, &sched)?;
            let mut w = BufWriter::new(File::create(path)?);
            for rec in &trace {
                serde_json::to_writer(&mut w, rec).map_err(|e| Error::External(e.to_string()))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            out
        }
        None => refine(&y, &x_tilde, &phi_inv, &mut denoiser, &config, &sched)?,
    };
    let wave = istft(&refined, params)?.remove(0);
    let out: Vec<f64> = wave.iter().map(|v| v / gain).collect();
    write_wav(
        &a.output,
        &Audio {
            sample_rate: mix.sample_rate,
            channels: vec![out],
        },
    )?;
    println!(
        "steps={} xi={} seed={} elapsed_s={:.3}",
        config.t_start,
        config.xi,
        config.seed,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_mcwf(a: &McwfArgs) -> Result<()> {
    let params = StftParams::mcwf();
    let (mix, est) = load_pair(&a.mixture, &a.estimate, params.hop_size)?;
    let y = stft(&mix.channels, params)?;
    let x_tilde = stft(&[est], params)?;
    let out = mcwf(&y, &x_tilde, McwfParams::default())?;
    let wave = istft(&out, params)?;
    write_wav(
        &a.output,
        &Audio {
            sample_rate: mix.sample_rate,
            channels: wave,
        },
    )
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let clean_audio = read_wav(&a.clean)?;
    let rate = clean_audio.sample_rate;
    let clean = mono(clean_audio, "clean source")?;
    if clean.is_empty() {
        return Err(invalid_input("clean source is empty"));
    }
    let spec = MixtureSpec {
        channels: a.channels,
        n_taps: a.taps,
        noise: match a.noise {
            NoiseKindArg::White => NoiseKind::White,
            NoiseKindArg::Diffuse => NoiseKind::Diffuse,
        },
        snr_db: a.snr,
        seed: a.seed,
    };
    let params = StftParams::default();
    let x = stft(&[clean], params)?;
    let m = gen_mixture(&x, &spec)?;
    let image = istft(&m.image, params)?;
    let mut noise = istft(&m.n_true, params)?;

    // Re-level the noise so the written files hit the requested SNR.
    let realized = if a.snr.is_finite() {
        let (pi, pn) = (energy(&image[0]), energy(&noise[0]));
        if !(pn > 0.0) {
            return Err(invalid_input("synthesised noise is silent"));
        }
        let g = (pi / (pn * 10f64.powf(a.snr / 10.0))).sqrt();
        noise
            .iter_mut()
            .for_each(|ch| ch.iter_mut().for_each(|v| *v *= g));
        10.0 * (pi / energy(&noise[0])).log10()
    } else {
        noise
            .iter_mut()
            .for_each(|ch| ch.iter_mut().for_each(|v| *v = 0.0));
        f64::INFINITY
    };
    let mixture: Vec<Vec<f64>> = image
        .iter()
        .zip(&noise)
        .map(|(i, n)| i.iter().zip(n).map(|(a, b)| a + b).collect())
        .collect();

    let path = |name: &str| PathBuf::from(format!("{}{name}", a.prefix));
    write_wav(
        &path("mixture.wav"),
        &Audio {
            sample_rate: rate,
            channels: mixture,
        },
    )?;
    write_wav(
        &path("image.wav"),
        &Audio {
            sample_rate: rate,
            channels: image,
        },
    )?;
    write_wav(
        &path("noise.wav"),
        &Audio {
            sample_rate: rate,
            channels: noise,
        },
    )?;
    let mut meta = BufWriter::new(File::create(path("meta.txt"))?);
    writeln!(meta, "seed={}", a.seed)?;
    writeln!(meta, "channels={}", a.channels)?;
    writeln!(meta, "taps={}", a.taps)?;
    writeln!(meta, "noise={:?}", spec.noise)?;
    writeln!(meta, "snr_db={}", a.snr)?;
    writeln!(meta, "realized_snr_db={realized}")?;
    meta.flush()?;
    println!("realized_snr_db={realized}");
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let est = read_wav(&a.estimate)?;
    let reference = read_wav(&a.reference)?;
    let mut est = est
        .channels
        .into_iter()
        .next()
        .ok_or_else(|| invalid_input("estimate has no channels"))?;
    let mut reference = reference
        .channels
        .into_iter()
        .next()
        .ok_or_else(|| invalid_input("reference has no channels"))?;
    let hop = StftParams::default().hop_size;
    if est.len().abs_diff(reference.len()) > hop {
        return Err(invalid_input(format!(
            "estimate has {} samples, reference {} (more than {hop} apart)",
            est.len(),
            reference.len()
        )));
    }
    let n = est.len().min(reference.len());
    est.truncate(n);
    reference.truncate(n);
    println!("si_sdr_db={:.4}", si_sdr(&est, &reference)?);
    Ok(())
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let (l, k) = s
        .split_once('x')
        .ok_or_else(|| invalid_config(format!("shape must be LxK, got `{s}`")))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| invalid_config(format!("bad shape `{s}`")))
    };
    Ok((parse(l)?, parse(k)?))
}

fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let mut denoiser: Box<dyn Denoiser> = match a.model.split_once(':') {
        None if a.model == "zero" => Box::new(crate::diffusion::ZeroDenoiser),
        Some(("gaussian", s2)) => {
            let shape = a
                .shape
                .as_deref()
                .ok_or_else(|| invalid_config("gaussian model needs --shape"))?;
            let (l, k) = parse_shape(shape)?;
            let mu = ComplexSpectrogram::zeros(l, k, 1, Domain::Compressive);
            let s2 = parse_variance(s2)?;
            Box::new(GaussianDenoiser::new(
                mu,
                Array2::from_elem((l, k), s2),
                DiffusionSchedule::default(),
            )?)
        }
        _ => return Err(invalid_config(format!("unknown model `{}`", a.model))),
    };
    serve(
        &mut denoiser,
        std::io::stdin().lock(),
        std::io::stdout().lock(),
    )
}
