//! Command-line surface: `train`, `sample`, `inspect`, `verify`.
//!
//! Human-readable progress goes to stderr. With `--json`, one JSON object
//! per event is also written to stdout.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::backbone::{derived_counts, XutConfig};
use crate::checkpoint::TensorFile;
use crate::datapipe::write_png;
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::geometry::CameraTransform;
use crate::routing::GuidanceSpec;
use crate::train::{checkpoint_header, load_model, RunConfig, Trainer};
use crate::verify::{run_suite, Faults};

#[derive(Debug, Parser)]
#[command(name = "xut", version, about = "Cross-U transformer text-to-image training and sampling")]
pub struct Cli {
    /// Also emit machine-readable JSON lines on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a TOML or JSON run config.
    Train(TrainArgs),
    /// Sample one image from a checkpoint.
    Sample(SampleArgs),
    /// Report derived counts and parameter totals.
    Inspect(InspectArgs),
    /// Run the fast invariant suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to resume from; its embedded config is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.jsonl.
    #[arg(long, default_value = "runs/default")]
    pub out: PathBuf,
    /// Override the total step budget.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "")]
    pub prompt: String,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Guidance scale; 1 disables the unconditional pass.
    #[arg(long, default_value_t = 1.0)]
    pub guidance: f64,
    /// Routing rate of the conditional pass.
    #[arg(long, default_value_t = 0.0)]
    pub cr: f64,
    /// Routing rate of the unconditional pass.
    #[arg(long, default_value_t = 0.0)]
    pub ur: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub shift_x: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub shift_y: f64,
    #[arg(long, default_value_t = 1.0)]
    pub zoom: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output PNG path.
    #[arg(long, default_value = "sample.png")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Preset name (xut-small, xut-base, xut-large, toy, micro), run config, or checkpoint.
    pub target: String,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Break the range constraint on purpose to exercise the suite.
    #[arg(long, hide = true)]
    pub inject_range_fault: bool,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidGuidance(_)
        | Error::InvalidRate(_)
        | Error::InvalidDimension(_)
        | Error::InvalidTransform(_)
        | Error::Shape(_) => 2,
        Error::TrainingDivergence { .. } | Error::SamplerDivergence { .. } => 3,
        Error::Integrity(_) => 4,
        _ => 1,
    }
}

struct Out {
    json: bool,
}

impl Out {
    fn event(&self, human: impl AsRef<str>, value: serde_json::Value) {
        eprintln!("{}", human.as_ref());
        if self.json {
            println!("{value}");
        }
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let out = Out { json: cli.json };
    match cli.command {
        Command::Train(a) => train(&out, a),
        Command::Sample(a) => sample(&out, a),
        Command::Inspect(a) => inspect(&out, &a.target),
        Command::Verify(a) => verify(&out, a),
    }
}

fn train(out: &Out, a: TrainArgs) -> Result<i32> {
    let mut trainer = match (&a.resume, &a.config) {
        (Some(ckpt), _) => Trainer::resume(ckpt, a.steps)?,
        (None, Some(cfg)) => {
            let mut cfg = RunConfig::from_path(cfg)?;
            if let Some(s) = a.steps {
                cfg.schedule.steps = s;
            }
            Trainer::new(cfg)?
        }
        (None, None) => return Err(Error::InvalidConfig("train needs --config or --resume".into())),
    };
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), trainer.config().to_toml()?)?;
    out.event(
        format!(
            "training {} parameters from step {} to {}",
            trainer.model().store.num_params(),
            trainer.step(),
            trainer.config().schedule.steps
        ),
        json!({"event": "start", "params": trainer.model().store.num_params(), "step": trainer.step()}),
    );
    let metrics = trainer.run(&a.out, |m| {
        out.event(
            format!(
                "step {:>6}  loss {:.5}  grad {:.3}  {:.0} tok/s  routed {:.0} tok/s",
                m.step, m.loss, m.grad_norm, m.tokens_per_sec, m.routed_tokens_per_sec
            ),
            json!({"event": "step", "metrics": m}),
        )
    })?;
    out.event(
        format!("done after {} steps, checkpoints in {}", metrics.len(), a.out.display()),
        json!({"event": "done", "step": trainer.step(), "out": a.out}),
    );
    Ok(0)
}

fn sample(out: &Out, a: SampleArgs) -> Result<i32> {
    let guidance = GuidanceSpec {
        scale: a.guidance,
        cond_rate: a.cr,
        uncond_rate: a.ur,
    };
    guidance.validate()?;
    let cam = CameraTransform::new(a.shift_x, a.shift_y, a.zoom)?;
    let file = TensorFile::read(&a.checkpoint)?;
    let (model, _, step) = load_model(&file)?;
    let p = model.config().patch_size;
    if a.height == 0 || a.width == 0 || !a.height.is_multiple_of(p) || !a.width.is_multiple_of(p) {
        return Err(Error::Shape(format!("{}x{} is not a multiple of patch {p}", a.height, a.width)));
    }
    let cfg = SamplerConfig {
        steps: a.steps,
        guidance,
        seed: a.seed,
        schedule: None,
    };
    let (img, noise_hash) = model.sample(&a.prompt, a.height, a.width, &cam, &cfg)?;
    write_png(&img, &a.out)?;
    out.event(
        format!(
            "wrote {} ({}x{}, checkpoint step {step}, noise {noise_hash})",
            a.out.display(),
            a.height,
            a.width
        ),
        json!({
            "event": "sample", "out": a.out, "noise_hash": noise_hash, "seed": a.seed,
            "camera": cam, "guidance": guidance, "steps": a.steps,
        }),
    );
    Ok(0)
}

/// Human report plus its JSON form.
pub fn inspect_report(target: &str) -> Result<(String, serde_json::Value)> {
    let (cfg, source, actual) = if let Some(cfg) = XutConfig::preset(target) {
        (cfg, "preset".to_string(), None)
    } else {
        let path = Path::new(target);
        if !path.exists() {
            return Err(Error::InvalidConfig(format!("`{target}` is neither a preset nor a file")));
        }
        let is_ckpt = std::fs::read(path)?.get(8..9).is_some_and(|b| b[0] == b'{')
            && !path.extension().is_some_and(|e| e == "json" || e == "toml");
        if is_ckpt {
            let file = TensorFile::read(path)?;
            let (run, step) = checkpoint_header(&file)?;
            let backbone: usize = file
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with("param.") && !k.starts_with("param.text."))
                .map(|(_, t)| t.elem_count())
                .sum();
            (run.model, format!("checkpoint at step {step}"), Some(backbone))
        } else {
            (RunConfig::from_path(path)?.model, "run config".to_string(), None)
        }
    };
    cfg.validate()?;
    let d = derived_counts(&cfg);
    let params = cfg.param_counts();
    let total: usize = params.values().sum();
    if let Some(actual) = actual {
        if actual != total {
            return Err(Error::Integrity(format!("checkpoint holds {actual} backbone parameters, config implies {total}")));
        }
    }
    let mut s = format!("source: {source}\n");
    s += &format!("blocks={} attn={}\n", d.total_blocks, d.total_attention_layers);
    s += &format!(
        "seq_len@256: latent={} pixel={}\n",
        d.seq_len_at_256_latent, d.seq_len_at_256_pixel
    );
    s += &format!("parameters: {total}\n");
    for (k, v) in &params {
        s += &format!("  {k:<12} {v}\n");
    }
    s += "self-check (published scales):\n";
    let mut table = Vec::new();
    for (name, c, blocks, attn) in [
        ("xut-small", XutConfig::xut_small(), 16, 20),
        ("xut-base", XutConfig::xut_base(), 20, 24),
        ("xut-large", XutConfig::xut_large(), 20, 24),
    ] {
        let got = derived_counts(&c);
        let ok = got.total_blocks == blocks && got.total_attention_layers == attn;
        s += &format!(
            "  {name:<10} blocks={} attn={} {}\n",
            got.total_blocks,
            got.total_attention_layers,
            if ok { "ok" } else { "MISMATCH" }
        );
        table.push(json!({"name": name, "blocks": got.total_blocks, "attn": got.total_attention_layers, "ok": ok}));
    }
    let value = json!({
        "source": source,
        "derived": d,
        "parameters": params,
        "total_parameters": total,
        "self_check": table,
    });
    Ok((s, value))
}

fn inspect(out: &Out, target: &str) -> Result<i32> {
    let (text, value) = inspect_report(target)?;
    out.event(text.trim_end(), value.clone());
    let ok = value["self_check"].as_array().is_some_and(|t| t.iter().all(|r| r["ok"] == true));
    Ok(if ok { 0 } else { 1 })
}

fn verify(out: &Out, a: VerifyArgs) -> Result<i32> {
    let results = run_suite(Faults {
        broken_ranges: a.inject_range_fault,
    });
    let mut failed = 0;
    for r in &results {
        failed += usize::from(!r.passed);
        out.event(
            format!(
                "[{}] {:<24} {:>7.2}s  {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.seconds,
                r.detail
            ),
            json!({"event": "check", "result": r}),
        );
    }
    out.event(
        format!("{} of {} checks passed", results.len() - failed, results.len()),
        json!({"event": "summary", "passed": results.len() - failed, "failed": failed}),
    );
    Ok(if failed == 0 { 0 } else { 1 })
}
