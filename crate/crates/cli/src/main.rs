//! Command-line driver for the whole pipeline: corpus generation, the three
//! training phases, inference, evaluation, schedule inspection, and
//! finite-difference gradient validation. Every artifact-producing command
//! writes a `run.json` (resolved configuration, seed, input hashes) next to
//! its outputs so a run can be reproduced exactly; failures print one
//! machine-readable JSON object to stderr and exit nonzero.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde_json::json;

use autograd::{FixedParams, GradCheck, ParamNodes, ParamStore, Tensor};
use glyphshift::config::{self, RunConfig};
use glyphshift::data::{Corpus, Geometry, Split};
use glyphshift::image::{read_pgm, write_pgm};
use glyphshift::metrics::{loss_total, LossWeights};
use glyphshift::models::{load_checkpoint, Models, CODEC_KEY};
use glyphshift::rng::stream;
use glyphshift::sampler::{infer_batch, trim_trailing_blanks, Sampler, TraceMode};
use glyphshift::schedules::make_shift_schedule;
use glyphshift::text_diffusion::CharState;
use glyphshift::trainer::{StepRecord, Trainer};

#[derive(Parser)]
#[command(
    name = "glyphshift",
    about = "Confidence-guided text-image super-resolution pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a synthetic text corpus and write its manifest.
    GenData(GenData),
    /// Phase 1: train the recognizability head on clean renders.
    PretrainOcr(PretrainOcr),
    /// Phase 2: train the text decoder against the frozen recognizer.
    PretrainTau(PhaseArgs),
    /// Phase 3: run the staged main training loop.
    Train(PhaseArgs),
    /// Restore one image, or every sample of a manifest.
    Infer(Infer),
    /// Score a checkpoint on a manifest split.
    Eval(Eval),
    /// Print the image-chain schedule for a given step count.
    ScheduleDump(ScheduleDump),
    /// Validate analytic gradients of the training objective numerically.
    Gradcheck(Gradcheck),
}

/// Configuration source shared by commands that start from scratch.
#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file; omitted keys take their documented defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted-path override like `trainer.steps=100` (repeatable; later
    /// entries win).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// File < `--set` < dedicated flags (passed here as `extra`).
    fn resolve(&self, extra: &[String]) -> anyhow::Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?,
            ),
            None => None,
        };
        let mut overrides = self.set.clone();
        overrides.extend_from_slice(extra);
        Ok(config::resolve(text.as_deref(), &overrides)?)
    }

    fn input(&self) -> Vec<(&'static str, &Path)> {
        self.config.as_deref().map(|p| ("config", p)).into_iter().collect()
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    config: ConfigArgs,
    /// Alphabet size including the blank (shorthand for --set data.K=…).
    #[arg(long = "K", value_name = "K")]
    k: Option<usize>,
    /// Corpus size (shorthand for --set data.n=…).
    #[arg(long)]
    n: Option<usize>,
    /// Root seed (shorthand for --set seed=…).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the first N samples as hr_/lr_ PGM pairs.
    #[arg(long, value_name = "N", default_value_t = 0)]
    dump_images: usize,
    /// Output directory for corpus.jsonl (and run.json).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainOcr {
    #[command(flatten)]
    config: ConfigArgs,
    /// Root seed (shorthand for --set seed=…).
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus manifest from gen-data.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Output directory for checkpoints and the step log.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

/// Arguments of the two resumed phases (pretrain-tau, train). The
/// configuration rides in the checkpoint; `--set` patches it (trainer knobs
/// such as step counts or the curriculum — structural keys would no longer
/// match the stored parameters).
#[derive(Args)]
struct PhaseArgs {
    /// Checkpoint of the completed previous phase.
    #[arg(long, value_name = "FILE")]
    from: PathBuf,
    /// Corpus manifest from gen-data.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Dotted-path override applied on top of the checkpoint's configuration.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for checkpoints and the step log.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct Infer {
    /// One degraded PGM to restore (exclusive with --manifest).
    #[arg(long, value_name = "FILE", required_unless_present = "manifest",
          conflicts_with = "manifest")]
    input: Option<PathBuf>,
    /// Corpus manifest: restore every sample into --out.
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Seed for the run's noise and text draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write a JSON-lines per-step trace here (single-input mode only).
    #[arg(long, value_name = "FILE", conflicts_with = "manifest")]
    trace: Option<PathBuf>,
    /// Take the modal symbol at each text step instead of sampling.
    #[arg(long)]
    argmax_text: bool,
    /// Output PGM (single input) or output directory (manifest mode).
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    /// Corpus manifest from gen-data.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Seed for the evaluation's inference runs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Which manifest split to score.
    #[arg(long, default_value = "test", value_parser = ["train", "test", "all"])]
    split: String,
    /// Take the modal symbol at each text step instead of sampling.
    #[arg(long)]
    argmax_text: bool,
    /// Output directory for restored images and metrics.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct ScheduleDump {
    #[command(flatten)]
    config: ConfigArgs,
    /// Step count (shorthand for --set schedule.T=…).
    #[arg(long = "T", value_name = "T")]
    t: Option<usize>,
}

#[derive(Args)]
struct Gradcheck {
    #[command(flatten)]
    config: ConfigArgs,
    /// Root seed (shorthand for --set seed=…).
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum relative error between analytic and numeric derivatives.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Random directions compared per case.
    #[arg(long, default_value_t = 3)]
    directions: usize,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprintln!("{}", json!({ "kind": "usage", "error": e.to_string() }));
            std::process::exit(2);
        }
        // --help / --version print normally and exit 0.
        Err(e) => e.exit(),
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", json!({ "kind": error_kind(&e), "error": format!("{e:#}") }));
        std::process::exit(1);
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use glyphshift::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::InvalidArgument(_)) => "invalid_argument",
        Some(E::ShapeMismatch(_)) => "shape_mismatch",
        Some(E::Config(_)) => "config",
        Some(E::NonFinite(_)) => "non_finite",
        Some(E::Diverged(_)) => "diverged",
        Some(E::NotConverged(_)) => "not_converged",
        Some(E::Format(_)) => "format",
        Some(E::Autograd(_)) => "autograd",
        Some(E::Io(_)) => "io",
        Some(E::Json(_)) => "json",
        None if e.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "error",
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::PretrainOcr(a) => pretrain_ocr(a),
        Cmd::PretrainTau(a) => resumed_phase(a, "pretrain-tau"),
        Cmd::Train(a) => resumed_phase(a, "train"),
        Cmd::Infer(a) => infer(a),
        Cmd::Eval(a) => eval(a),
        Cmd::ScheduleDump(a) => schedule_dump(a),
        Cmd::Gradcheck(a) => gradcheck(a),
    }
}

fn sha256_hex(path: &Path) -> anyhow::Result<String> {
    use sha2::{Digest, Sha256};
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing input {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

/// Reproducibility record: the command, the fully resolved configuration,
/// the seed, and a content hash per input file. Deliberately no timestamp —
/// identical runs must produce identical bytes.
fn write_run_json(
    path: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[(&str, &Path)],
) -> anyhow::Result<()> {
    let mut hashed = serde_json::Map::new();
    for (label, p) in inputs {
        hashed.insert(
            (*label).to_string(),
            json!({ "path": p.display().to_string(), "sha256": sha256_hex(p)? }),
        );
    }
    let doc = json!({
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_value(),
        "inputs": hashed,
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

/// Step printer for the training phases: one JSON line every `every` steps.
/// The full log always lands in the out directory.
fn progress(every: usize) -> impl FnMut(&StepRecord) {
    move |rec| {
        if rec.step % every == 0 {
            println!("{}", serde_json::to_string(rec).expect("step record serializes"));
        }
    }
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    let mut extra = Vec::new();
    if let Some(k) = a.k {
        extra.push(format!("data.K={k}"));
    }
    if let Some(n) = a.n {
        extra.push(format!("data.n={n}"));
    }
    if let Some(s) = a.seed {
        extra.push(format!("seed={s}"));
    }
    let cfg = a.config.resolve(&extra)?;
    cfg.validate()?;
    let geom = Geometry::new(cfg.data.height, cfg.data.width, cfg.data.max_len)?;
    let corpus = Corpus::generate(cfg.data.k, geom, cfg.data.min_len, cfg.data.n, cfg.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let manifest = a.out.join("corpus.jsonl");
    corpus.save_manifest(&manifest)?;
    for i in 0..a.dump_images.min(corpus.len()) {
        write_pgm(&a.out.join(format!("hr_{i:05}.pgm")), &corpus.hr_image(i)?)?;
        write_pgm(&a.out.join(format!("lr_{i:05}.pgm")), &corpus.y_real(i)?)?;
    }
    write_run_json(&a.out.join("run.json"), "gen-data", &cfg, &a.config.input())?;
    println!(
        "{}",
        json!({
            "manifest": manifest.display().to_string(),
            "n": corpus.len(),
            "train": corpus.train_indices().len(),
            "test": corpus.test_indices().len(),
        })
    );
    Ok(())
}

fn pretrain_ocr(a: PretrainOcr) -> anyhow::Result<()> {
    let mut extra = Vec::new();
    if let Some(s) = a.seed {
        extra.push(format!("seed={s}"));
    }
    let cfg = a.config.resolve(&extra)?;
    let corpus = Corpus::load_manifest(&a.manifest)?;
    let mut trainer = Trainer::new(&cfg, corpus)?;
    std::fs::create_dir_all(&a.out)?;
    let mut inputs = a.config.input();
    inputs.push(("manifest", &a.manifest));
    write_run_json(&a.out.join("run.json"), "pretrain-ocr", trainer.config(), &inputs)?;
    let ckpt = trainer.run_pretrain_ocr(&a.out, progress(25))?;
    println!("{}", json!({ "checkpoint": ckpt.display().to_string() }));
    Ok(())
}

/// pretrain-tau and train share their argument shape and flow; only the
/// trainer entry point differs.
fn resumed_phase(a: PhaseArgs, command: &str) -> anyhow::Result<()> {
    let (store, mut meta) = load_checkpoint(&a.from)?;
    if !a.set.is_empty() {
        let mut doc = meta.config.to_value();
        for s in &a.set {
            let (path, raw) = config::parse_assignment(s)?;
            config::apply_override(&mut doc, path, raw)?;
        }
        meta.config = RunConfig::from_value(&doc)?;
    }
    let corpus = Corpus::load_manifest(&a.manifest)?;
    let mut trainer = Trainer::resume_with(store, meta, corpus)?;
    std::fs::create_dir_all(&a.out)?;
    write_run_json(
        &a.out.join("run.json"),
        command,
        trainer.config(),
        &[("from", a.from.as_path()), ("manifest", a.manifest.as_path())],
    )?;
    let ckpt = match command {
        "pretrain-tau" => trainer.run_pretrain_tau(&a.out, progress(25))?,
        _ => trainer.run_train(&a.out, progress(25))?,
    };
    println!("{}", json!({ "checkpoint": ckpt.display().to_string() }));
    Ok(())
}

fn infer(a: Infer) -> anyhow::Result<()> {
    if let Some(manifest) = &a.manifest {
        let metrics = infer_batch(
            manifest,
            &a.checkpoint,
            &a.out,
            a.seed,
            None,
            Some(a.argmax_text),
        )?;
        let (_, meta) = load_checkpoint(&a.checkpoint)?;
        write_run_json(
            &a.out.join("run.json"),
            "infer",
            &meta.config,
            &[("manifest", manifest.as_path()), ("checkpoint", a.checkpoint.as_path())],
        )?;
        println!("{metrics}");
        return Ok(());
    }

    let input = a.input.as_ref().expect("clap requires --input without --manifest");
    let y = read_pgm(input)?;
    let mut sampler = Sampler::from_checkpoint(&a.checkpoint)?;
    sampler.set_argmax_text(a.argmax_text);
    let mode = if a.trace.is_some() { TraceMode::Stats } else { TraceMode::Off };
    let result = sampler.infer(&y, a.seed, mode)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_pgm(&a.out, &result.image)?;
    if let Some(trace_path) = &a.trace {
        let mut body = String::new();
        for record in result.trace.as_deref().unwrap_or_default() {
            body.push_str(&serde_json::to_string(record)?);
            body.push('\n');
        }
        std::fs::write(trace_path, body)?;
    }
    let run_json = a.out.with_file_name(format!(
        "{}.run.json",
        a.out.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    write_run_json(
        &run_json,
        "infer",
        sampler.config(),
        &[("input", input.as_path()), ("checkpoint", a.checkpoint.as_path())],
    )?;
    let alphabet = &sampler.models().alphabet;
    let text = trim_trailing_blanks(&result.text, alphabet.blank());
    println!(
        "{}",
        json!({
            "image": a.out.display().to_string(),
            "text": alphabet.display(&text),
            "mean_conf": result.conf.iter().sum::<f64>() / result.conf.len() as f64,
        })
    );
    Ok(())
}

fn eval(a: Eval) -> anyhow::Result<()> {
    let split = match a.split.as_str() {
        "train" => Some(Split::Train),
        "test" => Some(Split::Test),
        _ => None,
    };
    let metrics =
        infer_batch(&a.manifest, &a.checkpoint, &a.out, a.seed, split, Some(a.argmax_text))?;
    let (_, meta) = load_checkpoint(&a.checkpoint)?;
    write_run_json(
        &a.out.join("run.json"),
        "eval",
        &meta.config,
        &[("manifest", a.manifest.as_path()), ("checkpoint", a.checkpoint.as_path())],
    )?;
    println!(
        "{}",
        json!({
            "psnr": metrics["psnr_mean"],
            "acc": metrics["acc"],
            "ned": metrics["ned"],
            "n": metrics["n"],
        })
    );
    Ok(())
}

fn schedule_dump(a: ScheduleDump) -> anyhow::Result<()> {
    let mut extra = Vec::new();
    if let Some(t) = a.t {
        extra.push(format!("schedule.T={t}"));
    }
    let cfg = a.config.resolve(&extra)?;
    let sched = make_shift_schedule(
        cfg.schedule.t,
        cfg.schedule.eta_1,
        cfg.schedule.eta_t,
        cfg.schedule.kappa,
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "T": sched.t_total(),
            "kappa": sched.kappa(),
            "eta": sched.etas(),
            "alpha": sched.alphas(),
        }))?
    );
    Ok(())
}

fn first_trainable(store: &ParamStore, prefix: &str) -> anyhow::Result<String> {
    store
        .iter()
        .find(|(name, p)| name.starts_with(prefix) && p.trainable)
        .map(|(name, _)| name.clone())
        .with_context(|| format!("no trainable parameter under '{prefix}'"))
}

/// Builds the full training objective — fusion, denoiser, pixel decode,
/// recognition head, weighted loss — on synthetic data and compares its
/// analytic gradient against central differences along random directions.
/// The checked leaves are the data inputs plus one trainable tensor from
/// each component.
fn gradcheck(a: Gradcheck) -> anyhow::Result<()> {
    let mut extra = Vec::new();
    if let Some(s) = a.seed {
        extra.push(format!("seed={s}"));
    }
    let cfg = a.config.resolve(&extra)?;
    let (models, store) = Models::init(&cfg)?;
    let mut rng = stream(cfg.seed, 0, 0, "gradcheck");
    let latent = [cfg.latent_channels(), cfg.latent_h(), cfg.latent_w()];
    let z_t = Tensor::randn(&latent, &mut rng);
    let z_y = Tensor::randn(&latent, &mut rng);
    let feat = Tensor::randn(&[cfg.data.max_len, cfg.data.k], &mut rng);
    let x0 = Tensor::randn(&[1, cfg.data.height, cfg.data.width], &mut rng)
        .map(|v| 0.5 + 0.25 * v.tanh());
    let text: Vec<usize> =
        (0..cfg.data.max_len).map(|_| rng.gen_range(0..cfg.data.k - 1)).collect();
    let c0 = CharState::one_hot(&text, cfg.data.k, cfg.data.max_len)?;
    let t = (cfg.schedule.t / 2).max(1);
    let weights = LossWeights {
        l1: cfg.trainer.loss_l1,
        perceptual: cfg.trainer.loss_perceptual,
        ce: cfg.trainer.loss_ce,
    };

    let picks: Vec<String> = ["mom.", "unet.", "ocr."]
        .iter()
        .map(|p| first_trainable(&store, p))
        .collect::<anyhow::Result<_>>()?;
    let mut inputs = vec![z_t, z_y, feat];
    for name in &picks {
        inputs.push(store.get(name)?.value.clone());
    }

    let checker = GradCheck {
        tolerance: a.tol,
        directions: a.directions,
        seed: cfg.seed ^ 0x67726164,
        ..GradCheck::default()
    };
    let report = checker.check("training-objective", &inputs, |tape, leaves| {
        let glue = |e: glyphshift::Error| autograd::Error::InvalidArgument(e.to_string());
        let mut map = BTreeMap::new();
        for (name, p) in store.iter() {
            match picks.iter().position(|n| n == name) {
                Some(j) => map.insert(name.clone(), leaves[3 + j]),
                None => map.insert(name.clone(), tape.constant(p.value.clone())),
            };
        }
        let mut fp = FixedParams { map };
        let bundle = models
            .mom
            .forward(tape, &mut fp, leaves[1], leaves[0], leaves[2], t)
            .map_err(glue)?;
        let z0_hat = models
            .unet
            .forward(tape, &mut fp, leaves[0], leaves[1], t, bundle.c_cond)
            .map_err(glue)?;
        let m_node = fp.node(tape, CODEC_KEY)?;
        let x0_hat = models.codec.decode_node(tape, m_node, z0_hat).map_err(glue)?;
        let logits = models.ocr_head.logits(tape, &mut fp, x0_hat).map_err(glue)?;
        let x0_node = tape.constant(x0.clone());
        loss_total(tape, &mut fp, x0_node, x0_hat, &c0, logits, &weights).map_err(glue)
    })?;
    println!(
        "{}",
        json!({
            "case": report.name,
            "max_rel_err": report.max_rel_err,
            "tolerance": report.tolerance,
            "directions": a.directions,
            "ok": report.passed(),
        })
    );
    if !report.passed() {
        bail!(
            "gradient check failed: max relative error {:.3e} exceeds {:.3e}",
            report.max_rel_err,
            report.tolerance
        );
    }
    Ok(())
}
