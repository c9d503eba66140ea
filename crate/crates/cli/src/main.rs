use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kfgen::backbone::{Backbone, Sampling};
use kfgen::config::KvConfig;
use kfgen::evalkit::{
    eval_diversity, eval_interpolation, eval_perplexity, family_templates, DiversityMode, EvalReport, StepCounts,
};
use kfgen::interpnet::InterpNet;
use kfgen::keyframe::schedule;
use kfgen::moe::load_balance_loss;
use kfgen::streamer::{expected_decoder_steps, prefill_from_dense, start_session, StreamConfig};
use kfgen::tokenstream::{read_dataset, synth_dataset, write_dataset, PairedSample, SynthConfig};
use kfgen::trainer::{run_interp_training, stage_loss, InterpTrainConfig, Stage, TaskFamily, TrainConfig, Trainer};
use kfgen::{Checkpoint32, Error, Result};
use kfgen_tensor::Tape;
use serde_json::json;

#[derive(Parser)]
#[command(name = "kfgen", version, about = "Keyframe-sparse motion generation toolkit")]
struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Training settings in `key = value` form.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that receives every output file.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset to `<out>/data.jsonl`.
    SynthData {
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Motion frames per sample.
        #[arg(long, default_value_t = 120)]
        len: usize,
        /// Fraction of samples that carry a transcript.
        #[arg(long, default_value_t = 1.0)]
        task_mix: f64,
    },
    /// Run one training stage; writes `<out>/metrics.jsonl` and a checkpoint.
    Train {
        #[arg(long)]
        stage: Option<Stage>,
        /// Checkpoint base path (without extension) to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Dataset file; a synthetic set is generated from --seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stream motion for an audio clip; writes `<out>/tokens.jsonl`.
    Generate(StreamArgs),
    /// Stream as in `generate` and report per-stage timings.
    Profile(StreamArgs),
    /// Evaluation report as JSON at `<out>/eval.json`.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        interp_checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 6)]
        stride: usize,
        #[arg(long, default_value_t = 5)]
        chunk_n: usize,
        /// Intervals per masked-accuracy window.
        #[arg(long, default_value_t = 5)]
        intervals: usize,
        /// Number of sampled generations for the diversity score (0 skips it).
        #[arg(long, default_value_t = 3)]
        diversity_seeds: u64,
    },
    /// Per-layer expert usage of a sparse checkpoint on a dataset.
    InspectRouting {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of every training objective.
    Gradcheck,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    interp_checkpoint: Option<PathBuf>,
    /// Dataset file whose sample audio is streamed.
    #[arg(long)]
    audio: PathBuf,
    /// Which sample of the audio file to stream.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 6)]
    stride: usize,
    #[arg(long, default_value_t = 5)]
    chunk_n: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    /// Dataset file whose first sample's keyframes seed the history.
    #[arg(long)]
    prefill: Option<PathBuf>,
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    temperature: Option<f64>,
}

fn out_file(out: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    Ok(out.join(name))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::from_kv(&KvConfig::load(path)?)?,
        None => TrainConfig::default(),
    };
    cfg.seed = cli.seed;
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<Vec<PairedSample>> {
    let data = read_dataset(path)?;
    if data.is_empty() {
        return Err(Error::Invalid(format!("{}: no samples", path.display())));
    }
    Ok(data)
}

fn load_backbone(path: &Path) -> Result<Backbone<f32>> {
    Backbone::from_checkpoint(&Checkpoint32::load(path)?)
}

fn load_interp(path: Option<&PathBuf>) -> Result<Option<InterpNet<f32>>> {
    path.map(|p| InterpNet::from_checkpoint(&Checkpoint32::load(p)?)).transpose()
}

fn synth_data(cli: &Cli, n: usize, len: usize, task_mix: f64) -> Result<()> {
    let cfg = SynthConfig {
        n_samples: n,
        motion_len: len,
        task_mix,
        ..SynthConfig::default()
    };
    let data = synth_dataset(cli.seed, &cfg)?;
    let path = out_file(&cli.out, "data.jsonl")?;
    write_dataset(&path, &data)?;
    println!("{}", json!({"path": path, "samples": data.len(), "frames": len}));
    Ok(())
}

fn train(cli: &Cli, stage: Option<Stage>, init: Option<&Path>, data: Option<&Path>, steps: Option<usize>) -> Result<()> {
    let mut cfg = train_config(cli)?;
    if let Some(stage) = stage {
        cfg.stage = stage;
    }
    if let Some(steps) = steps {
        cfg.steps = steps;
    }
    cfg.validate()?;
    let data = match data {
        Some(p) => load_data(p)?,
        None => synth_dataset(cli.seed, &SynthConfig::default())?,
    };
    let init = init.map(Checkpoint32::load).transpose()?;
    if cfg.stage == Stage::Interp {
        if init.is_some() {
            return Err(Error::Config("the interp stage trains from scratch; drop --init".into()));
        }
        return train_interp(cli, &cfg, &data);
    }
    let mut trainer = Trainer::<f32>::new(cfg.clone(), data, init.as_ref())?;
    let mut log = BufWriter::new(File::create(out_file(&cli.out, "metrics.jsonl")?)?);
    trainer.run(cfg.steps, |m| {
        writeln!(log, "{}", serde_json::to_string(m)?)?;
        Ok(true)
    })?;
    log.flush()?;
    let ck = out_file(&cli.out, "checkpoint")?;
    trainer.checkpoint().save(&ck)?;
    fs::write(out_file(&cli.out, "config.kv")?, cfg.to_kv().to_text())?;
    println!("{}", json!({"stage": cfg.stage.name(), "steps": trainer.step, "checkpoint": ck}));
    Ok(())
}

fn train_interp(cli: &Cli, cfg: &TrainConfig, data: &[PairedSample]) -> Result<()> {
    let tc = InterpTrainConfig {
        steps: cfg.steps,
        seed: cfg.seed,
        stride: cfg.templates.stride,
        batch: cfg.batch,
        lr: cfg.lr,
        wd: cfg.wd,
        clip: cfg.clip,
        ..InterpTrainConfig::default()
    };
    let mut log = BufWriter::new(File::create(out_file(&cli.out, "metrics.jsonl")?)?);
    let mut io_err = None;
    let run = run_interp_training::<f32>(data, &tc, &cfg.interp, |m| {
        let line = json!({"step": m.step, "stage": "interp", "ce": m.ce, "l_vel": m.l_vel, "l_acc": m.l_acc,
            "grad_norm": m.grad_norm, "masked": m.masked});
        match writeln!(log, "{line}") {
            Ok(()) => true,
            Err(e) => {
                io_err = Some(e);
                false
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    let ck = out_file(&cli.out, "interp")?;
    run.net.to_checkpoint().save(&ck)?;
    println!(
        "{}",
        json!({"stage": "interp", "steps": run.metrics.len(), "degenerate": run.degenerate, "checkpoint": ck})
    );
    Ok(())
}

struct Streamed {
    buffer: kfgen::streamer::StreamBuffer,
    report: kfgen::streamer::SessionReport,
}

fn stream(cli: &Cli, a: &StreamArgs) -> Result<Streamed> {
    let model = load_backbone(&a.checkpoint)?;
    let interp = load_interp(a.interp_checkpoint.as_ref())?;
    let clips = load_data(&a.audio)?;
    let clip = clips
        .get(a.sample)
        .ok_or_else(|| Error::OutOfRange(format!("--sample {} but the file has {} samples", a.sample, clips.len())))?;
    let prefill = match &a.prefill {
        Some(p) => {
            let src = load_data(p)?;
            let dense = std::array::from_fn(|q| src[0].motion[q].tokens.clone());
            Some(prefill_from_dense(&dense, a.p, a.stride)?)
        }
        None => None,
    };
    let sampling = match a.temperature {
        Some(tau) => Sampling::Temperature { tau, seed: cli.seed },
        None => Sampling::Greedy,
    };
    let cfg = StreamConfig {
        p: a.p,
        n: a.chunk_n,
        stride: a.stride,
        sampling,
        ..StreamConfig::default()
    };
    let session = start_session(&model, interp.as_ref(), &clip.audio.tokens, prefill, cfg)?;
    let (buffer, report) = session.run_to_end()?;
    Ok(Streamed { buffer, report })
}

fn generate(cli: &Cli, a: &StreamArgs) -> Result<()> {
    let s = stream(cli, a)?;
    let path = out_file(&cli.out, "tokens.jsonl")?;
    let mut w = BufWriter::new(File::create(&path)?);
    let parts = ["face", "hand", "upper", "lower"];
    writeln!(
        w,
        "{}",
        json!({"kind": "generated", "stride": a.stride, "n": a.chunk_n, "frames": s.buffer.dense_len(),
            "head": hex::encode(s.buffer.head())})
    )?;
    for c in s.buffer.commits() {
        let mut rec = serde_json::Map::new();
        rec.insert("chunk".into(), json!(c.chunk_index));
        rec.insert("first_frame".into(), json!(c.first_frame));
        for (q, name) in parts.iter().enumerate() {
            rec.insert((*name).into(), json!(c.dense[q]));
        }
        rec.insert("keyframes".into(), json!(c.keyframes));
        rec.insert("hash".into(), json!(hex::encode(c.hash)));
        writeln!(w, "{}", serde_json::Value::Object(rec))?;
    }
    w.flush()?;
    println!(
        "{}",
        json!({"path": path, "frames": s.report.frames, "chunks": s.report.chunks, "decoder_steps": s.report.decoder_steps})
    );
    Ok(())
}

fn profile(cli: &Cli, a: &StreamArgs) -> Result<()> {
    let s = stream(cli, a)?;
    write_json(&out_file(&cli.out, "profile.json")?, &s.report)?;
    fs::write(out_file(&cli.out, "profile.txt")?, s.report.table())?;
    print!("{}", s.report.table());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    cli: &Cli,
    checkpoint: Option<&Path>,
    interp: Option<&PathBuf>,
    data: &Path,
    stride: usize,
    chunk_n: usize,
    intervals: usize,
    diversity_seeds: u64,
) -> Result<()> {
    let data = load_data(data)?;
    let mut report = EvalReport::new();
    if let Some(net) = load_interp(interp)? {
        report.masked_token_accuracy = Some(eval_interpolation(&net, &data, stride, intervals)?);
    }
    if let Some(path) = checkpoint {
        let model = load_backbone(path)?;
        let params = train_config(cli)?.templates;
        let families = [TaskFamily::KfMotion, TaskFamily::A2t, TaskFamily::T2a, TaskFamily::A2m, TaskFamily::T2m];
        report.perplexity = eval_perplexity(&model, &data, &families, &params)?;
        if diversity_seeds >= 2 {
            let seeds: Vec<u64> = (0..diversity_seeds).map(|i| cli.seed + i).collect();
            let cfg = StreamConfig {
                n: chunk_n,
                stride,
                ..StreamConfig::default()
            };
            let net = load_interp(interp)?;
            report.l1_diversity = Some(eval_diversity(
                &model,
                net.as_ref(),
                &data[0].audio.tokens,
                None,
                cfg,
                DiversityMode::Temperature(1.0),
                &seeds,
            )?);
        }
    }
    let frames = data[0].motion_len();
    report.step_counts = Some(StepCounts {
        stride,
        n: chunk_n,
        frames,
        decoder_steps: expected_decoder_steps(schedule(frames, stride)?.k(), chunk_n),
        dense_steps: expected_decoder_steps(frames, chunk_n),
    });
    let path = out_file(&cli.out, "eval.json")?;
    write_json(&path, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn inspect_routing(cli: &Cli, checkpoint: &Path, data: &Path) -> Result<()> {
    let model = load_backbone(checkpoint)?;
    let moe = model
        .cfg
        .moe
        .clone()
        .ok_or_else(|| Error::Config(format!("{} is a dense checkpoint", checkpoint.display())))?;
    let data = load_data(data)?;
    let params = train_config(cli)?.templates;
    let mut templates = Vec::new();
    for family in Stage::S2.families() {
        templates.extend(family_templates(&data, *family, &params)?);
    }
    let mut tape = Tape::new(&model.store);
    let loss = stage_loss(&model, &mut tape, &templates, Stage::S1, 0.0)?;
    let stats = loss.routing_stats(&tape, model.n_layers(), moe.experts);
    let balance = load_balance_loss(&stats);

    let mut layers = Vec::new();
    let mut table = format!("{:<6} {:<7} {:>8} {:>8} {:>8}\n", "layer", "expert", "f_e", "pi_bar", "top1");
    for (i, l) in stats.layers.iter().enumerate() {
        let (f, pi, top1) = (l.f(), l.pi_bar(), l.top1_share());
        for e in 0..moe.experts {
            table += &format!("{i:<6} {e:<7} {:>8.4} {:>8.4} {:>8.4}\n", f[e], pi[e], top1[e]);
        }
        table += &format!("{i:<6} {:<7} l_moe = {:.4} over {} tokens\n", "all", balance.per_layer[i], l.tokens);
        layers.push(json!({"layer": i, "f_e": f, "pi_bar": pi, "top1_share": top1, "l_moe": balance.per_layer[i],
            "tokens": l.tokens}));
    }
    write_json(
        &out_file(&cli.out, "routing.json")?,
        &json!({"layers": layers, "l_moe": balance.value, "empty": balance.empty}),
    )?;
    fs::write(out_file(&cli.out, "routing.txt")?, &table)?;
    print!("{table}");
    Ok(())
}

/// Returns `true` when every case passes.
fn gradcheck(cli: &Cli) -> Result<bool> {
    let results = kfgen::gradsuite::run_all()?;
    println!("{:<16} {:>8} {:>12}  result", "loss", "params", "max_rel_err");
    for r in &results {
        let verdict = if r.pass { "pass" } else { "FAIL" };
        println!("{:<16} {:>8} {:>12.3e}  {verdict}", r.name, r.params, r.max_rel_err);
    }
    write_json(&out_file(&cli.out, "gradcheck.json")?, &results)?;
    Ok(results.iter().all(|r| r.pass))
}

fn set_threads() {
    if let Some(n) = std::env::var("UMO_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn fail(code: &str, message: &str, status: u8) -> ExitCode {
    eprintln!("{}", json!({"code": code, "message": message}));
    ExitCode::from(status)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let message = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            let code = fail("usage", message, 1);
            eprint!("{}", e.render());
            return code;
        }
    };
    set_threads();
    let result = match &cli.command {
        Command::SynthData { n, len, task_mix } => synth_data(&cli, *n, *len, *task_mix),
        Command::Train { stage, init, data, steps } => train(&cli, *stage, init.as_deref(), data.as_deref(), *steps),
        Command::Generate(a) => generate(&cli, a),
        Command::Profile(a) => profile(&cli, a),
        Command::Eval {
            checkpoint,
            interp_checkpoint,
            data,
            stride,
            chunk_n,
            intervals,
            diversity_seeds,
        } => eval(
            &cli,
            checkpoint.as_deref(),
            interp_checkpoint.as_ref(),
            data,
            *stride,
            *chunk_n,
            *intervals,
            *diversity_seeds,
        ),
        Command::InspectRouting { checkpoint, data } => inspect_routing(&cli, checkpoint, data),
        Command::Gradcheck => match gradcheck(&cli) {
            Ok(true) => Ok(()),
            Ok(false) => return fail("gradcheck", "one or more losses exceed the tolerance", 2),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_validation() => fail("validation", &e.to_string(), 1),
        Err(e) => fail("runtime", &e.to_string(), 2),
    }
}
