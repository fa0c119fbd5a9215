use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use promptcir::checkpoint::Checkpoint;
use promptcir::codec::{jpeg_degrade, ChromaUpsampling, DegradeSpec, Subsampling};
use promptcir::harness::data::{draw_blind_qfs, list_images, make_blind_set, QfPolicy};
use promptcir::harness::eval::{evaluate, CodecSettings, EvalMode, Restorer, NONBLIND_QFS};
use promptcir::harness::gradsuite::{run_module, MODULES};
use promptcir::harness::train::{init_stage, train, NetworkSpec, RunConfig};
use promptcir::harness::{DatasetManifest, TrainData};
use promptcir::image::ImageBuffer;
use promptcir::iqm::MetricReport;
use promptcir::network::{NetworkConfig, PromptCir};

type Error = Box<dyn std::error::Error>;

/// Blind JPEG artifact removal: degradation, training, restoration and evaluation.
#[derive(Parser)]
#[command(name = "pcir", version)]
struct Cli {
    /// Seed for every random choice made by the command (default 0; for
    /// `train`, overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// JPEG-compress an image or a directory of images.
    Degrade(DegradeArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Restore an image or a directory of images with a trained model.
    Restore(RestoreArgs),
    /// Score a model (or the compressed inputs themselves) on a dataset.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Parameter counts of a network configuration.
    Params(ParamsArgs),
}

#[derive(Args, Clone, Copy)]
struct CodecArgs {
    #[arg(long, default_value = "420", value_parser = parse_subsampling)]
    subsampling: Subsampling,
    #[arg(long, default_value = "fancy", value_parser = parse_upsampling)]
    upsampling: ChromaUpsampling,
}

fn parse_subsampling(s: &str) -> Result<Subsampling, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_upsampling(s: &str) -> Result<ChromaUpsampling, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("level").required(true).args(["qf", "blind"]))]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fixed quality factor (1–100).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=100))]
    qf: Option<u32>,
    /// Draw each image's quality factor uniformly from [10, 70]; a directory
    /// input also gets a manifest.jsonl.
    #[arg(long)]
    blind: bool,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Checkpoint to resume (same stage) or fine-tune (stage-1 checkpoint for
    /// stage 2). Stage 2 defaults to `<output_dir>/stage1-final.pcir`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the stage-1 compressed training set to `<output_dir>/precomputed`.
    #[arg(long)]
    precompute: bool,
}

#[derive(Args)]
struct RestoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Blind,
    Nonblind,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("model").required(true).args(["ckpt", "identity"]))]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Score the compressed inputs unchanged (the JPEG baseline).
    #[arg(long)]
    identity: bool,
    /// Manifest (.jsonl) or directory of clean images.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, value_delimiter = ',', default_values_t = NONBLIND_QFS)]
    qfs: Vec<u32>,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check one module only.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(MODULES))]
    module: Option<String>,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

#[derive(Args)]
struct ParamsArgs {
    /// Preset name (reference, toy, micro) or JSON network config file.
    #[arg(long)]
    config: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Degrade(a) => degrade(a, cli.seed.unwrap_or(0)),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Restore(a) => restore(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Params(a) => params(a),
    }
}

fn degrade(a: DegradeArgs, seed: u64) -> Result<ExitCode, Error> {
    let CodecArgs { subsampling, upsampling } = a.codec;
    if a.input.is_dir() {
        if a.blind {
            let m = make_blind_set(&a.input, &a.out, seed, subsampling, upsampling)?;
            println!("{} images written to {} with manifest.jsonl", m.records.len(), a.out.display());
        } else {
            let spec = DegradeSpec::new(a.qf.expect("group requires qf"), subsampling)?.with_upsampling(upsampling);
            std::fs::create_dir_all(&a.out)?;
            for p in list_images(&a.input)? {
                let out = a.out.join(p.file_name().expect("listed files have names")).with_extension("png");
                report_degrade(&p, &out, &spec)?;
            }
        }
        return Ok(ExitCode::SUCCESS);
    }
    let qf = match a.qf {
        Some(q) => q,
        None => draw_blind_qfs(1, seed)[0],
    };
    report_degrade(&a.input, &a.out, &DegradeSpec::new(qf, subsampling)?.with_upsampling(upsampling))?;
    Ok(ExitCode::SUCCESS)
}

fn report_degrade(input: &Path, out: &Path, spec: &DegradeSpec) -> Result<(), Error> {
    let img = ImageBuffer::load(input)?;
    let degraded = jpeg_degrade(&img, spec)?;
    degraded.save(out)?;
    let m = MetricReport::measure(&img, &degraded);
    match m {
        Ok(m) => println!(
            "{} qf={} psnr={:.4} ssim={:.4} psnrb={:.4}",
            out.display(),
            spec.quality(),
            m.psnr,
            m.ssim,
            m.psnrb
        ),
        Err(e) => println!("{} qf={} (metrics unavailable: {e})", out.display(), spec.quality()),
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Result<ExitCode, Error> {
    let text = std::fs::read_to_string(&a.config).map_err(|e| format!("{}: {e}", a.config.display()))?;
    let run: RunConfig = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", a.config.display()))?;
    let net_cfg = run.network.resolve()?;
    let mut cfg = run.stage(a.stage)?.clone();
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    // relative paths in the config are relative to the config file
    let base = a.config.parent().unwrap_or(Path::new("."));
    let data_root = base.join(&run.data);
    let output_dir = base.join(&run.output_dir);
    let manifest = DatasetManifest::open(&data_root)?;
    let mut data = TrainData::from_manifest(&manifest, cfg.subsampling, cfg.upsampling)?;
    std::fs::create_dir_all(&output_dir)?;
    if a.precompute {
        if let QfPolicy::Fixed(levels) = &cfg.qf_policy {
            data.precompute(levels, &output_dir.join("precomputed"))?;
        } else {
            return Err("--precompute applies to the fixed-level stage 1 only".into());
        }
    }
    let resume = match (&a.resume, a.stage) {
        (Some(p), _) => Some(p.clone()),
        (None, 2) => Some(output_dir.join("stage1-final.pcir")).filter(|p| p.exists()),
        (None, _) => None,
    };
    let from = resume.as_ref().map(Checkpoint::load).transpose()?;
    let (net, mut state) = init_stage(&net_cfg, &cfg, from.as_ref())?;
    eprintln!(
        "stage {}: {} parameters, iterations {}..{}",
        cfg.stage,
        state.params.count(),
        state.iteration,
        cfg.iterations
    );
    let stage = cfg.stage;
    let out_dir = output_dir.clone();
    let report = train(&net, &mut state, &cfg, &mut data, |c| {
        let it = c.training.iteration;
        let name = if it == cfg.iterations { format!("stage{stage}-final.pcir") } else { format!("stage{stage}-{it:07}.pcir") };
        c.save(out_dir.join(&name))?;
        eprintln!("saved {name}");
        Ok(())
    })?;
    for p in &report.loss_curve {
        eprintln!("step {:>7}  lr {:.3e}  loss {:.6}", p.step, p.lr, p.loss);
    }
    std::fs::write(out_dir.join(format!("stage{stage}-report.json")), serde_json::to_string_pretty(&report)?)?;
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path) -> Result<(PromptCir, promptcir::nn::ParamStore<f32>), Error> {
    let ckpt = Checkpoint::load(path)?;
    let (net, template) = PromptCir::build::<f32>(&ckpt.config, 0)?;
    let params = ckpt.load_into(&template)?.frozen();
    Ok((net, params))
}

fn restore(a: RestoreArgs) -> Result<ExitCode, Error> {
    let (net, params) = load_model(&a.ckpt)?;
    let restorer = Restorer::Model { net: &net, params: &params };
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        std::fs::create_dir_all(&a.out)?;
        list_images(&a.input)?
            .into_iter()
            .map(|p| {
                let out = a.out.join(p.file_name().expect("listed files have names")).with_extension("png");
                (p, out)
            })
            .collect()
    } else {
        vec![(a.input.clone(), a.out.clone())]
    };
    for (input, out) in jobs {
        let img = ImageBuffer::load(&input)?;
        let restored = restorer.restore(&img)?;
        restored.save(&out)?;
        println!("{} -> {} ({}x{})", input.display(), out.display(), restored.width(), restored.height());
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode, Error> {
    let manifest = DatasetManifest::open(&a.dataset)?;
    let model = a.ckpt.as_deref().map(load_model).transpose()?;
    let restorer = match &model {
        Some((net, params)) => Restorer::Model { net, params },
        None => Restorer::Identity,
    };
    let mode = match a.mode {
        ModeArg::Blind => EvalMode::Blind,
        ModeArg::Nonblind => EvalMode::Nonblind(a.qfs.clone()),
    };
    let codec = CodecSettings { subsampling: a.codec.subsampling, upsampling: a.codec.upsampling };
    let report = evaluate(&restorer, &manifest, &mode, codec)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.json {
        std::fs::write(p, report.to_json())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode, Error> {
    let modules: Vec<&str> = match &a.module {
        Some(m) => vec![m.as_str()],
        None => MODULES.to_vec(),
    };
    let mut all_ok = true;
    for m in modules {
        let results = run_module(m, a.seeds)?;
        let worst = results.iter().map(|r| r.rel_err).fold(0.0, f64::max);
        let ok = results.iter().all(|r| r.passed);
        all_ok &= ok;
        println!(
            "{:<18} {}  worst rel err {:.2e} (< {:.0e}) over {} seeds",
            m,
            if ok { "PASS" } else { "FAIL" },
            worst,
            results[0].tolerance,
            results.len()
        );
    }
    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn params(a: ParamsArgs) -> Result<ExitCode, Error> {
    let cfg = match NetworkConfig::preset(&a.config) {
        Some(c) => c,
        None => {
            let text = std::fs::read_to_string(&a.config).map_err(|e| format!("{}: {e}", a.config))?;
            let spec: NetworkSpec = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", a.config))?;
            spec.resolve()?
        }
    };
    let (net, store) = PromptCir::build::<f32>(&cfg, 0)?;
    let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
    for (name, t) in store.iter() {
        *groups.entry(name.split('.').next().unwrap_or(name)).or_default() += t.numel();
    }
    for (g, n) in &groups {
        println!("{g:<24} {n:>12}");
    }
    println!("{:<24} {:>12}", "prompt generators", net.prompt_generator_params(&store));
    println!("{:<24} {:>12}", "total", store.count());
    Ok(ExitCode::SUCCESS)
}
