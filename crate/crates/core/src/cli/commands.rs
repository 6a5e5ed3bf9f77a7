use std::collections::BTreeSet;
use std::fs;
use std::io::Write;

use clap::ValueEnum;

use super::{
    default_cases, faulty_case, run_bench, run_gradcheck, BenchArgs, EvalArgs, GenDataArgs, GradcheckArgs,
    OrthocheckArgs, RunConfig, TrainArgs,
};
use crate::data::{dir_has_entries, load_dataset, orthogonality_grid, save_dataset, DirectionDataset, Pattern, MANIFEST};
use crate::error::{OffError, Result};
use crate::train::{
    load_checkpoint, save_checkpoint, score_dataset, stage1_train, stage2_train, write_metrics, METRICS_FILE,
};

/// Largest normalised residual accepted by `orthocheck`.
pub const ORTHO_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum EvalStream {
    Rgb,
    Off,
    Fused,
    Hypercolumn,
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(OffError::io("writing report"))
}

pub fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<bool> {
    if dir_has_entries(&a.out)? {
        if !a.force {
            return Err(OffError::arg(format!(
                "{} is not empty; pass --force to replace its dataset",
                a.out.display()
            )));
        }
        for entry in fs::read_dir(&a.out).map_err(OffError::io(format!("reading {}", a.out.display())))? {
            let path = entry.map_err(OffError::io(format!("reading {}", a.out.display())))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let ours = name == MANIFEST || (name.starts_with("clip_") && name.ends_with(".f32"));
            if ours && path.is_file() {
                fs::remove_file(&path).map_err(OffError::io(format!("removing {}", path.display())))?;
            }
        }
    }
    let spec = DirectionDataset {
        clips_per_class: a.clips_per_class,
        frames: a.frames,
        size: a.size,
        speed: a.speed,
        pattern: Pattern::Gaussian { sigma: a.sigma },
        seed: a.seed,
    };
    let clips = spec.generate()?;
    save_dataset(&a.out, &clips)?;
    emit(
        out,
        &format!(
            "wrote {} clips ({} frames of {}x{}) to {}\n",
            clips.len(),
            a.frames,
            a.size,
            a.size,
            a.out.display()
        ),
    )?;
    Ok(true)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<bool> {
    if a.stage == 2 && a.init.is_none() {
        return Err(OffError::arg("stage 2 needs --init with a stage-1 checkpoint"));
    }
    if a.stage == 1 && a.init.is_some() {
        return Err(OffError::arg("--init only applies to stage 2"));
    }
    let run = RunConfig::load(&a.config)?;
    let train = run.train_config(a.stage)?;
    let data = run
        .train_data
        .as_deref()
        .ok_or_else(|| OffError::config("`train_data` is not set"))?;
    let clips = load_dataset(data)?;
    let outcome = match &a.init {
        Some(init) if a.stage == 2 => stage2_train(&load_checkpoint(init)?, &run.net, &train, &clips)?,
        _ => stage1_train(&run.net, &train, &clips)?,
    };
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    write_metrics(&a.out.join(METRICS_FILE), &outcome.metrics, run.net.levels)?;
    let last = outcome.metrics.last();
    emit(
        out,
        &format!(
            "stage {} finished after {} iterations: loss {:.4}, train accuracy {:.3}; checkpoint in {}\n",
            a.stage,
            train.total_iters,
            last.map_or(f64::NAN, |r| r.loss_total),
            last.map_or(f64::NAN, |r| r.train_acc),
            a.out.display()
        ),
    )?;
    Ok(true)
}

struct EvalRow {
    ckpt: String,
    stream: &'static str,
    level: String,
    accuracy: f64,
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<bool> {
    let clips = load_dataset(&a.data)?;
    let wanted: Vec<EvalStream> = a.streams.clone();
    let mut rows = Vec::new();
    let mut found = BTreeSet::new();
    for path in &a.ckpt {
        let ckpt = load_checkpoint(path)?;
        let report = score_dataset(&ckpt, &clips, a.beta, 32)?.report();
        let name = path.display().to_string();
        let mut push = |stream: EvalStream, label: &'static str, level: String, accuracy: f64| {
            if wanted.contains(&stream) {
                found.insert(stream);
                rows.push(EvalRow {
                    ckpt: name.clone(),
                    stream: label,
                    level,
                    accuracy,
                });
            }
        };
        push(EvalStream::Rgb, "rgb", String::new(), report.rgb);
        let (off_stream, off_label) = if report.hypercolumn {
            (EvalStream::Hypercolumn, "hypercolumn")
        } else {
            (EvalStream::Off, "off")
        };
        for (l, &acc) in report.off_levels.iter().enumerate() {
            push(off_stream, off_label, l.to_string(), acc);
        }
        if let (Some(fused), false) = (report.fused, report.hypercolumn) {
            push(EvalStream::Fused, "fused", String::new(), fused);
        }
    }
    for s in &wanted {
        if !found.contains(s) {
            let name = s.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
            return Err(OffError::arg(format!("no checkpoint provides the `{name}` stream")));
        }
    }

    let mut text = format!("{} test clips, {} segments each\n", clips.len(), a.beta);
    let mut csv = String::from("checkpoint,stream,level,accuracy\n");
    for r in &rows {
        let level = if r.level.is_empty() { String::new() } else { format!(" level {}", r.level) };
        text.push_str(&format!("{:<12}{:<9} {:>6.2}%  ({})\n", r.stream, level, 100.0 * r.accuracy, r.ckpt));
        csv.push_str(&format!("{},{},{},{}\n", r.ckpt, r.stream, r.level, r.accuracy));
    }
    emit(out, &text)?;
    emit(out, &csv)?;
    if let Some(p) = &a.csv {
        fs::write(p, &csv).map_err(OffError::io(format!("writing {}", p.display())))?;
    }
    Ok(true)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let mut cases = default_cases();
    if a.inject_fault {
        cases.push(faulty_case());
    }
    let report = run_gradcheck(a.seed, &cases)?;
    emit(out, &report.render())?;
    Ok(report.passed())
}

pub fn cmd_orthocheck(a: &OrthocheckArgs, out: &mut dyn Write) -> Result<bool> {
    if a.sigma.is_empty() || a.speed.is_empty() {
        return Err(OffError::arg("orthocheck needs at least one sigma and one speed"));
    }
    let mut speeds = a.speed.clone();
    speeds.sort_by(f64::total_cmp);
    speeds.dedup();
    let cells = orthogonality_grid(&a.sigma, &speeds, a.at)?;

    let mut text = String::from("sigma,speed,max_residual,mean_residual,result\n");
    let mut passed = true;
    for &sigma in &a.sigma {
        let mut prev = f64::NEG_INFINITY;
        let mut monotone = true;
        for &speed in &speeds {
            let group: Vec<f64> = cells
                .iter()
                .filter(|c| c.sigma == sigma && c.speed == speed)
                .map(|c| c.residual)
                .collect();
            let worst = group.iter().copied().fold(0.0, f64::max);
            let mean = group.iter().sum::<f64>() / group.len() as f64;
            let ok = if speed == 0.0 { worst == 0.0 } else { worst < ORTHO_THRESHOLD };
            monotone &= worst >= prev;
            prev = worst;
            passed &= ok;
            text.push_str(&format!(
                "{sigma},{speed},{worst:.6},{mean:.6},{}\n",
                if ok { "ok" } else { "FAIL" }
            ));
        }
        passed &= monotone;
        text.push_str(&format!(
            "# sigma {sigma}: residual {} in speed\n",
            if monotone { "non-decreasing" } else { "NOT monotone" }
        ));
    }
    text.push_str(&format!(
        "orthocheck (threshold {ORTHO_THRESHOLD}): {}\n",
        if passed { "PASS" } else { "FAIL" }
    ));
    emit(out, &text)?;
    Ok(passed)
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<bool> {
    let ckpt = a.ckpt.as_deref().map(load_checkpoint).transpose()?;
    let report = run_bench(ckpt.as_ref(), a.frames, a.repeat, a.size, a.seed)?;
    emit(out, &report.csv())?;
    Ok(true)
}

