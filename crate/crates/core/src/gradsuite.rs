//! Registered finite-difference checks for every training objective, on
//! toy shapes at 64-bit precision.

use kfgen_tensor::{check_loss, CeReduction, CheckOptions, GradCheckReport, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::Result;
use crate::interpnet::{InterpBatch, InterpConfig, InterpNet};
use crate::keyframe::{mask_sequence, schedule};
use crate::moe::MoeConfig;
use crate::tokenstream::{synth_dataset, SynthConfig};
use crate::trainer::{build_template, stage_loss, Placement, Stage, TaskFamily, Template, TemplateParams};

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub params: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl CaseResult {
    fn of(name: &'static str, r: GradCheckReport) -> Self {
        Self {
            name,
            params: r.params.len(),
            max_rel_err: r.max_rel_err,
            pass: r.pass,
        }
    }
}

pub const CASES: [&str; 8] = [
    "ce_smoothed",
    "interp_vel",
    "interp_acc",
    "interp_total",
    "stage_pretrain",
    "stage_s1",
    "stage_s2",
    "balance",
];

fn toy_interp() -> InterpConfig {
    InterpConfig {
        d_model: 8,
        n_temporal_layers: 1,
        n_part_layers: 1,
        heads: 2,
        d_ffn: 16,
        max_len: 16,
        ..InterpConfig::default()
    }
}

fn toy_batch(rng: &mut ChaCha8Rng) -> Result<InterpBatch> {
    let items = [(7, 6), (5, 4)]
        .into_iter()
        .map(|(len, s)| {
            let dense: [Vec<usize>; 4] = std::array::from_fn(|_| (0..len).map(|_| rng.gen_range(0..256)).collect());
            Ok((mask_sequence(&dense, &schedule(len, s)?)?, dense))
        })
        .collect::<Result<Vec<_>>>()?;
    InterpBatch::new(&items)
}

fn toy_backbone(sparse: bool) -> Result<Backbone<f64>> {
    let cfg = BackboneConfig {
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        ..BackboneConfig::default()
    };
    let dense = Backbone::new(cfg, 3)?;
    if sparse {
        let moe = MoeConfig {
            experts: 2,
            top_k: 1,
            router_std: 0.5,
        };
        dense.upcycle(&moe, 4)
    } else {
        Ok(dense)
    }
}

fn toy_templates(stage: Stage) -> Result<Vec<Template>> {
    let data = synth_dataset(
        5,
        &SynthConfig {
            n_samples: 2,
            motion_len: 30,
            ..SynthConfig::default()
        },
    )?;
    let params = TemplateParams {
        window: 3,
        p: 2,
        n: 2,
        ..TemplateParams::default()
    };
    let at = Placement { start: 2, keep_history: 2 };
    let families: &[TaskFamily] = match stage {
        Stage::Pretrain => &[TaskFamily::KfMotion, TaskFamily::A2t, TaskFamily::T2a],
        _ => &[TaskFamily::A2m, TaskFamily::T2m],
    };
    families
        .iter()
        .zip(data.iter().cycle())
        .map(|(&f, d)| build_template(d, f, stage, &params, at))
        .collect()
}

fn check_stage(stage: Stage, opts: &CheckOptions) -> Result<GradCheckReport> {
    let model = toy_backbone(stage != Stage::Pretrain)?;
    let templates = toy_templates(stage)?;
    let mut store = model.store.clone();
    Ok(check_loss(
        &mut store,
        |tape| Ok(stage_loss(&model, tape, &templates, stage, 0.01)?.total),
        opts,
    )?)
}

/// Runs one registered case.
pub fn run_case(name: &str, opts: &CheckOptions) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let report = match name {
        "ce_smoothed" => {
            let mut store = ParamStore::<f64>::new();
            let w = store.add(
                "w",
                Tensor::new(&[4, 7], (0..28).map(|_| rng.gen_range(-1.0..1.0)).collect())?,
            );
            let x = Tensor::new(&[5, 4], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
            let targets = [0, 3, 6, 2, 2];
            let weights = [true, true, false, true, true];
            check_loss(
                &mut store,
                |tape| {
                    let x = tape.constant(x.clone());
                    let w = tape.param(w);
                    let logits = tape.matmul(x, w)?;
                    Ok(tape.cross_entropy(logits, &targets, &weights, 0.1, CeReduction::Mean)?.0)
                },
                opts,
            )?
        }
        "interp_vel" | "interp_acc" | "interp_total" => {
            let net = InterpNet::<f64>::new(toy_interp(), 8)?;
            let batch = toy_batch(&mut rng)?;
            let mut store = net.store.clone();
            check_loss(
                &mut store,
                |tape| {
                    if name == "interp_total" {
                        return Ok(net.loss_interp(tape, &batch)?.total);
                    }
                    let logits = net.forward(tape, &batch, [0, 1, 2, 3])?;
                    let (vel, acc) = net.loss_smooth(tape, &logits, &batch)?;
                    Ok(if name == "interp_vel" { vel } else { acc })
                },
                opts,
            )?
        }
        "stage_pretrain" => check_stage(Stage::Pretrain, opts)?,
        "stage_s1" => check_stage(Stage::S1, opts)?,
        "stage_s2" => check_stage(Stage::S2, opts)?,
        "balance" => {
            let model = toy_backbone(true)?;
            let templates = toy_templates(Stage::S1)?;
            let mut store = model.store.clone();
            check_loss(
                &mut store,
                |tape| {
                    let loss = stage_loss(&model, tape, &templates, Stage::S1, 0.01)?;
                    Ok(loss.balance.expect("sparse model"))
                },
                opts,
            )?
        }
        other => return Err(crate::error::invalid(format!("unknown gradient case {other:?}"))),
    };
    let name = CASES.iter().find(|&&c| c == name).copied().unwrap_or("?");
    Ok(CaseResult::of(name, report))
}

/// Every registered case with the default options (tolerance 1e-4).
pub fn run_all() -> Result<Vec<CaseResult>> {
    let opts = CheckOptions::default();
    CASES.iter().map(|c| run_case(c, &opts)).collect()
}
