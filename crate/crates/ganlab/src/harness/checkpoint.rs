//! Versioned checkpoint container: model parameters, optimizer moments, the
//! training-stream position, and the step counter.
//!
//! Values are stored as hex-encoded f64 bit patterns, so a save → load →
//! forward cycle is bit-identical to never having saved at all.

use std::fmt::Write as _;
use std::path::Path;

use super::{HarnessError, Result, TrainRun};
use crate::tensor::Tensor;

const FORMAT_HEADER: &str = "ganlab-checkpoint v1";

/// Parsed checkpoint contents, independent of any live run.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub variant: String,
    pub step: usize,
    pub seed: u64,
    pub rng_word_pos: u128,
    pub opt_g_steps: u64,
    pub opt_d_steps: u64,
    /// Named buffers: model parameters plus optimizer moments
    /// (`optim.{g,d}.<index>.{first,second}`).
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

fn encode_values(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{:016x}", v.to_bits());
    }
    out.push('\n');
}

fn decode_values(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            u64::from_str_radix(tok, 16)
                .map(f64::from_bits)
                .map_err(|e| HarnessError::Checkpoint(format!("bad value `{tok}`: {e}")))
        })
        .collect()
}

/// Serialize the run's trainable state.
pub fn save(path: &Path, run: &TrainRun) -> Result<()> {
    let mut out = String::from(FORMAT_HEADER);
    out.push('\n');
    let _ = writeln!(
        out,
        "variant={} step={} seed={} rng_word_pos={}",
        run.manifest.variant.variant.name(),
        run.step,
        run.manifest.seed,
        run.rng_word_pos()
    );
    let _ = writeln!(
        out,
        "opt_steps g={} d={}",
        run.opt_g.step_count(),
        run.opt_d.step_count()
    );

    let mut dump = |name: &str, shape: &[usize], values: &[f64]| {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
        encode_values(&mut out, values);
    };
    for (name, tensor) in run
        .models
        .generator_params()
        .iter()
        .chain(run.models.discriminator_params().iter())
    {
        tensor.with_data(|d| dump(name, &tensor.shape(), d));
    }
    for (prefix, opt) in [("optim.g", &run.opt_g), ("optim.d", &run.opt_d)] {
        for (i, (first, second)) in opt.export_moments().iter().enumerate() {
            dump(&format!("{prefix}.{i}.first"), &[first.len()], first);
            dump(&format!("{prefix}.{i}.second"), &[second.len()], second);
        }
    }
    out.push_str("end\n");
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a checkpoint file.
pub fn load(path: &Path) -> Result<CheckpointData> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |msg: String| HarnessError::Checkpoint(msg);
    if lines.next() != Some(FORMAT_HEADER) {
        return Err(bad(format!("missing `{FORMAT_HEADER}` header")));
    }
    let meta = lines.next().ok_or_else(|| bad("missing meta line".into()))?;
    let mut variant = String::new();
    let mut step = 0usize;
    let mut seed = 0u64;
    let mut rng_word_pos = 0u128;
    for field in meta.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| bad(format!("bad meta field `{field}`")))?;
        match key {
            "variant" => variant = value.to_string(),
            "step" => step = value.parse().map_err(|e| bad(format!("step: {e}")))?,
            "seed" => seed = value.parse().map_err(|e| bad(format!("seed: {e}")))?,
            "rng_word_pos" => {
                rng_word_pos = value
                    .parse()
                    .map_err(|e| bad(format!("rng_word_pos: {e}")))?
            }
            other => return Err(bad(format!("unknown meta field `{other}`"))),
        }
    }
    let opt_line = lines
        .next()
        .ok_or_else(|| bad("missing opt_steps line".into()))?;
    let rest = opt_line
        .strip_prefix("opt_steps ")
        .ok_or_else(|| bad("expected `opt_steps`".into()))?;
    let mut opt_g_steps = 0u64;
    let mut opt_d_steps = 0u64;
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| bad(format!("bad opt field `{field}`")))?;
        let parsed = value.parse().map_err(|e| bad(format!("opt steps: {e}")))?;
        match key {
            "g" => opt_g_steps = parsed,
            "d" => opt_d_steps = parsed,
            other => return Err(bad(format!("unknown optimizer `{other}`"))),
        }
    }

    let mut tensors = Vec::new();
    while let Some(line) = lines.next() {
        if line == "end" {
            return Ok(CheckpointData {
                variant,
                step,
                seed,
                rng_word_pos,
                opt_g_steps,
                opt_d_steps,
                tensors,
            });
        }
        let rest = line
            .strip_prefix("tensor ")
            .ok_or_else(|| bad(format!("expected `tensor`, got `{line}`")))?;
        let mut parts = rest.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| bad("tensor line missing name".into()))?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("tensor shape: {e}")))?;
        let values_line = lines
            .next()
            .ok_or_else(|| bad(format!("tensor `{name}` missing values")))?;
        let values = decode_values(values_line)?;
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(bad(format!(
                "tensor `{name}`: {} values for shape {shape:?}",
                values.len()
            )));
        }
        tensors.push((name, shape, values));
    }
    Err(bad("missing `end` terminator".into()))
}

/// Overwrite a freshly initialized run's state with checkpoint contents.
pub fn restore_into(run: &mut TrainRun, data: &CheckpointData) -> Result<()> {
    let expected = run.manifest.variant.variant.name();
    if data.variant != expected {
        return Err(HarnessError::Checkpoint(format!(
            "checkpoint is for variant `{}`, run expects `{expected}`",
            data.variant
        )));
    }
    if data.seed != run.manifest.seed {
        return Err(HarnessError::Checkpoint(format!(
            "checkpoint seed {} does not match run seed {}",
            data.seed, run.manifest.seed
        )));
    }
    let by_name: std::collections::HashMap<&str, &(String, Vec<usize>, Vec<f64>)> =
        data.tensors.iter().map(|t| (t.0.as_str(), t)).collect();

    let assign = |params: Vec<(String, Tensor)>| -> Result<()> {
        for (name, tensor) in params {
            let (_, shape, values) = by_name.get(name.as_str()).ok_or_else(|| {
                HarnessError::Checkpoint(format!("checkpoint missing tensor `{name}`"))
            })?;
            if *shape != tensor.shape() {
                return Err(HarnessError::Checkpoint(format!(
                    "tensor `{name}` shape {shape:?} does not match model {:?}",
                    tensor.shape()
                )));
            }
            tensor.set_data(values)?;
            tensor.zero_grad();
        }
        Ok(())
    };
    assign(run.models.generator_params())?;
    assign(run.models.discriminator_params())?;

    for (prefix, opt, param_count, steps) in [
        (
            "optim.g",
            &mut run.opt_g,
            run.models.generator_params().len(),
            data.opt_g_steps,
        ),
        (
            "optim.d",
            &mut run.opt_d,
            run.models.discriminator_params().len(),
            data.opt_d_steps,
        ),
    ] {
        let mut moments = Vec::new();
        for i in 0..param_count {
            let first = by_name.get(format!("{prefix}.{i}.first").as_str());
            let second = by_name.get(format!("{prefix}.{i}.second").as_str());
            match (first, second) {
                (Some((_, _, f)), Some((_, _, s))) => moments.push((f.clone(), s.clone())),
                (None, None) => break, // plain descent: no moments stored
                _ => {
                    return Err(HarnessError::Checkpoint(format!(
                        "optimizer moments for {prefix}.{i} are incomplete"
                    )))
                }
            }
        }
        opt.import_moments(moments, steps);
    }

    run.step = data.step;
    run.records.clear();
    run.set_rng_word_pos(data.rng_word_pos);
    Ok(())
}
