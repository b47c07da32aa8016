//! Gradient verification for the assembled model.
//!
//! Two layers of checking: a registry of single-op probes (each op gets a
//! small random input and a spread-weighted scalar loss) and a parameter-
//! space sweep over a full micro model, comparing analytic gradients against
//! central differences at sampled weight entries.

use numcore::gradcheck::grad_check;
use numcore::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detect::GroundTruth;
use crate::error::{Error, Result};
use crate::init;
use crate::model::{Model, ModelConfig, Sample};

/// Relative error above which a gradient is considered broken.
pub const REL_ERR_THRESHOLD: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentCheck {
    pub component: String,
    pub params_checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub ops: Vec<OpCheck>,
    pub components: Vec<ComponentCheck>,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    init::uniform(shape, 1.0, rng)
}

/// Collapses a var of any shape to a scalar with fixed uneven weights so
/// that every output element contributes a distinct gradient path.
fn spread(tape: &mut Tape, x: numcore::Var) -> numcore::Result<numcore::Var> {
    let n: usize = tape.shape(x).iter().product();
    let mask: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * ((i * 7 % 11) as f64)).collect();
    let weighted = tape.mask_mul(x, mask)?;
    tape.sum(weighted)
}

/// Checks every differentiable tape operation in isolation. Returns one
/// entry per op name with its worst relative error.
pub fn op_checks() -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(init::derive_seed(11, "op-checks", 0));
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[numcore::Var]) -> numcore::Result<numcore::Var>| -> Result<()> {
        let err = grad_check(inputs, f, EPS)
            .map_err(|e| Error::Numeric(format!("op check {} failed: {}", name, e)))?;
        out.push(OpCheck { op: name.to_string(), max_rel_err: err });
        Ok(())
    };

    let a = rand_tensor(vec![3, 4], &mut rng);
    let b = rand_tensor(vec![3, 4], &mut rng);
    let suffix = rand_tensor(vec![4], &mut rng);
    run("add", &[a.clone(), b.clone()], &|t, v| {
        let y = t.add(v[0], v[1])?;
        spread(t, y)
    })?;
    run("add_broadcast", &[a.clone(), suffix.clone()], &|t, v| {
        let y = t.add(v[0], v[1])?;
        spread(t, y)
    })?;
    run("sub", &[a.clone(), b.clone()], &|t, v| {
        let y = t.sub(v[0], v[1])?;
        spread(t, y)
    })?;
    run("mul", &[a.clone(), b.clone()], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        spread(t, y)
    })?;
    run("scale", &[a.clone()], &|t, v| {
        let y = t.scale(v[0], -1.7)?;
        spread(t, y)
    })?;
    // Offset away from zero so the probe never straddles the relu kink.
    let shifted = Tensor::new(vec![3, 4], a.data().iter().map(|x| x + 2.0).collect()).unwrap();
    run("relu", &[shifted], &|t, v| {
        let y = t.relu(v[0])?;
        spread(t, y)
    })?;
    run("sigmoid", &[a.clone()], &|t, v| {
        let y = t.sigmoid(v[0])?;
        spread(t, y)
    })?;
    let m1 = rand_tensor(vec![3, 5], &mut rng);
    let m2 = rand_tensor(vec![5, 2], &mut rng);
    run("matmul", &[m1, m2], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        spread(t, y)
    })?;
    run("softmax", &[a.clone()], &|t, v| {
        let y = t.softmax(v[0], 1)?;
        spread(t, y)
    })?;
    let img = rand_tensor(vec![2, 6, 6], &mut rng);
    let kern = rand_tensor(vec![3, 2, 3, 3], &mut rng);
    let kbias = rand_tensor(vec![3], &mut rng);
    run("conv2d", &[img.clone(), kern, kbias.clone()], &|t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        spread(t, y)
    })?;
    let tkern = rand_tensor(vec![2, 3, 3, 3], &mut rng);
    run("conv_transpose2d", &[rand_tensor(vec![2, 3, 3], &mut rng), tkern, kbias], &|t, v| {
        let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1)?;
        spread(t, y)
    })?;
    run("maxpool2d", &[img.clone()], &|t, v| {
        let y = t.maxpool2d(v[0], 2, 2)?;
        spread(t, y)
    })?;
    run("maxpool2d_padded", &[img.clone()], &|t, v| {
        let y = t.maxpool2d_padded(v[0], 3, 1, 1)?;
        spread(t, y)
    })?;
    run("adaptive_maxpool2d", &[img.clone()], &|t, v| {
        let y = t.adaptive_maxpool2d(v[0], 4, 4)?;
        spread(t, y)
    })?;
    run("upsample_nearest", &[rand_tensor(vec![2, 3, 3], &mut rng)], &|t, v| {
        let y = t.upsample_nearest(v[0], 2)?;
        spread(t, y)
    })?;
    let gamma = rand_tensor(vec![4], &mut rng);
    let beta = rand_tensor(vec![4], &mut rng);
    run("layernorm", &[a.clone(), gamma, beta], &|t, v| {
        let y = t.layernorm(v[0], 1, v[1], v[2], 1e-5)?;
        spread(t, y)
    })?;
    run("concat", &[a.clone(), b.clone()], &|t, v| {
        let y = t.concat(&[v[0], v[1]], 0)?;
        spread(t, y)
    })?;
    run("reshape", &[a.clone()], &|t, v| {
        let y = t.reshape(v[0], vec![4, 3])?;
        spread(t, y)
    })?;
    run("permute", &[a.clone()], &|t, v| {
        let y = t.permute(v[0], &[1, 0])?;
        spread(t, y)
    })?;
    run("gather", &[a.clone()], &|t, v| {
        let y = t.gather(v[0], vec![0, 5, 5, 11, 3])?;
        spread(t, y)
    })?;
    run("sum", &[a.clone()], &|t, v| t.sum(v[0]))?;
    run("mask_mul", &[a.clone()], &|t, v| {
        let y = t.mask_mul(v[0], (0..12).map(|i| i as f64 * 0.25).collect())?;
        t.sum(y)
    })?;
    run("mse_vs", &[a.clone()], &|t, v| {
        t.mse_vs(v[0], (0..12).map(|i| 0.1 * i as f64).collect(), None)
    })?;
    // Probabilities strictly inside (0, 1) so the clamp stays inactive.
    let probs = Tensor::new(vec![6], vec![0.2, 0.4, 0.6, 0.8, 0.35, 0.55]).unwrap();
    run("bce_probs_vs", &[probs], &|t, v| {
        t.bce_probs_vs(v[0], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0], None)
    })?;
    run("bce_logits_vs", &[a.clone()], &|t, v| {
        let target: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        let weight: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 1.0 } else { 0.5 }).collect();
        t.bce_logits_vs(v[0], target, Some(weight))
    })?;
    Ok(out)
}

fn micro_samples() -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(init::derive_seed(11, "grad-sample", 0));
    let centered = init::uniform(vec![3, 32, 32], 0.5, &mut rng);
    let image =
        Tensor::new(vec![3, 32, 32], centered.data().iter().map(|x| x + 0.5).collect()).unwrap();
    vec![Sample {
        image,
        text: Some("rust colored beetle near the stem".to_string()),
        gts: vec![
            GroundTruth { class_id: 0, x1: 3.0, y1: 4.0, x2: 17.0, y2: 20.0 },
            GroundTruth { class_id: 1, x1: 18.0, y1: 14.0, x2: 30.0, y2: 27.0 },
        ],
    }]
}

/// Sweeps the full micro model: one analytic backward pass, then central
/// differences at `per_param` evenly spaced entries of every parameter.
/// Results are grouped by the name prefix before the first dot.
///
/// `corrupt` deliberately falsifies one analytic gradient before comparing;
/// it exists so the failure path of the reporting pipeline can be exercised.
pub fn check_model(per_param: usize, corrupt: bool) -> Result<Vec<ComponentCheck>> {
    let mut cfg = ModelConfig::micro(2);
    cfg.learned_positions = true;
    let mut model = Model::new(cfg, 11)?;
    let samples = micro_samples();

    let mut tape = Tape::new();
    let batch = model.forward_loss(&mut tape, &samples, None)?;
    tape.backward(batch.loss.l_pti)?;
    let mut grads = tape.param_grads();
    if corrupt {
        let first = grads
            .values_mut()
            .next()
            .ok_or_else(|| Error::Numeric("model exposed no parameters".to_string()))?;
        first[0] += 0.5;
    }

    let mut names: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |n, t| names.push((n.to_string(), t.len())));

    let mut components: Vec<ComponentCheck> = Vec::new();
    let mut record = |name: &str, err: f64| {
        let comp = name.split('.').next().unwrap_or(name).to_string();
        match components.iter_mut().find(|c| c.component == comp) {
            Some(c) => {
                c.params_checked += 1;
                c.max_rel_err = c.max_rel_err.max(err);
            }
            None => components.push(ComponentCheck {
                component: comp,
                params_checked: 1,
                max_rel_err: err,
            }),
        }
    };

    for (name, len) in &names {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::Numeric(format!("no gradient recorded for {}", name)))?;
        let k = per_param.min(*len).max(1);
        let mut indices: Vec<usize> = (0..k).map(|i| i * len / k).collect();
        indices.dedup();
        for idx in indices {
            let f_plus = loss_at(&mut model, &samples, name, idx, EPS)?;
            let f_minus = loss_at(&mut model, &samples, name, idx, -EPS)?;
            let numeric = (f_plus - f_minus) / (2.0 * EPS);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            record(name, rel);
        }
    }
    Ok(components)
}

/// Evaluates the micro loss with one weight entry temporarily shifted.
fn loss_at(
    model: &mut Model,
    samples: &[Sample],
    name: &str,
    idx: usize,
    delta: f64,
) -> Result<f64> {
    shift(model, name, idx, delta);
    let mut tape = Tape::new();
    let result = model
        .forward_loss(&mut tape, samples, None)
        .map(|b| tape.data(b.loss.l_pti)[0]);
    shift(model, name, idx, -delta);
    result
}

fn shift(model: &mut Model, name: &str, idx: usize, delta: f64) {
    model.visit_params_mut(&mut |n, t| {
        if n == name {
            t.data_mut()[idx] += delta;
        }
    });
}

/// Runs the op registry and the model sweep and folds them into one report.
pub fn full_report(per_param: usize, corrupt: bool) -> Result<GradReport> {
    let ops = op_checks()?;
    let components = check_model(per_param, corrupt)?;
    let max_rel_err = ops
        .iter()
        .map(|o| o.max_rel_err)
        .chain(components.iter().map(|c| c.max_rel_err))
        .fold(0.0_f64, f64::max);
    Ok(GradReport {
        ops,
        components,
        max_rel_err,
        threshold: REL_ERR_THRESHOLD,
        pass: max_rel_err < REL_ERR_THRESHOLD,
    })
}
