use std::path::Path;

use ctlformer::data::{
    container::{export_pgm, load_slice, save_slice},
    corpus::{read_corpus, write_corpus, CorpusSpec},
    split_patients, NoiseSpec, PhantomSpec, SliceImage, SliceKind, SlicePair,
};
use ctlformer::metrics::{report_csv, report_table, TableRow};
use ctlformer::model::{
    load_checkpoint, load_checkpoint_with, save_checkpoint, Model, ModelConfig,
};
use ctlformer::tiler::{denoise_image, Blend};
use ctlformer::train::{
    evaluate, log_path, noisy_baseline, read_log_csv, write_log_csv, LogRow, TrainConfig, Trainer,
};
use ctlformer::verify::grad_check_suite;
use ctlformer::Error;

use crate::exit::CliError;
use crate::Command;

type Result<T> = std::result::Result<T, CliError>;

pub const PARAM_TARGET: usize = 1_850_000;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::PhantomGen {
            out,
            patients,
            slices,
            size,
            seed,
            sigma,
            streaks,
            streak_amplitude,
        } => {
            if patients == 0 {
                return Err(CliError::usage("--patients must be at least 1"));
            }
            if slices == 0 {
                return Err(CliError::usage("--slices must be at least 1"));
            }
            if size < 16 {
                return Err(CliError::usage(format!(
                    "--size {size} is below the minimum of 16"
                )));
            }
            if !(sigma >= 0.0) {
                return Err(CliError::usage(format!("--sigma {sigma} must be ≥ 0")));
            }
            if !(streak_amplitude >= 0.0) {
                return Err(CliError::usage(format!(
                    "--streak-amplitude {streak_amplitude} must be ≥ 0"
                )));
            }
            let spec = CorpusSpec {
                patients,
                slices,
                phantom: PhantomSpec {
                    size,
                    ..PhantomSpec::default()
                },
                noise: NoiseSpec {
                    gaussian_sigma: sigma,
                    streak_count: streaks,
                    streak_amplitude,
                    ..NoiseSpec::default()
                },
                seed,
            };
            let pairs = write_corpus(&out, &spec)?;
            println!("wrote {} slice pairs to {}", pairs.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            holdout,
            out,
            steps,
            batch,
            lr,
            seed,
            config,
            checkpoint_every,
            resume,
            no_gate,
        } => {
            if batch == 0 {
                return Err(CliError::usage("--batch must be at least 1"));
            }
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(CliError::usage(format!(
                    "--lr {lr} must be a positive number"
                )));
            }
            if steps == 0 {
                return Err(CliError::usage("--steps must be at least 1"));
            }
            let tc = TrainConfig {
                batch_size: batch,
                learning_rate: lr,
                steps,
                seed,
                checkpoint_every,
                ..TrainConfig::default()
            };
            let train = holdout_split(&data, &holdout)?.0;
            if train.is_empty() {
                return Err(CliError::usage(format!(
                    "--holdout {holdout} leaves no training patients"
                )));
            }
            let (mut trainer, mut rows) = match &resume {
                Some(path) => {
                    let ckpt = load_checkpoint(path)?;
                    if steps <= ckpt.step {
                        return Err(CliError::usage(format!(
                            "--steps {steps} does not exceed the checkpoint step {}",
                            ckpt.step
                        )));
                    }
                    let step = ckpt.step;
                    let log = log_path(path);
                    let rows: Vec<LogRow> = if log.exists() {
                        read_log_csv(&log)?
                            .into_iter()
                            .filter(|r| r.step <= step)
                            .collect()
                    } else {
                        Vec::new()
                    };
                    (Trainer::resume(ckpt, tc)?, rows)
                }
                None => {
                    let mut mc = preset(&config)?;
                    mc.gate.enabled = !no_gate;
                    (Trainer::new(mc, tc)?, Vec::new())
                }
            };
            let tile = trainer.model.tile_size;
            if let Some(p) = train
                .iter()
                .find(|p| p.clean.height() < tile || p.clean.width() < tile)
            {
                return Err(CliError::usage(format!(
                    "--config tile size {tile} exceeds slice {} ({}×{})",
                    p.clean.label(),
                    p.clean.height(),
                    p.clean.width()
                )));
            }
            let log = log_path(&out);
            let report_every = (steps / 20).max(1);
            let mut pending: Vec<LogRow> = Vec::new();
            trainer.run(&train, |t, row| {
                pending.push(*row);
                if t.step % report_every == 0 {
                    println!("step {} loss {:.6e}", row.step, row.loss);
                }
                if checkpoint_every > 0 && t.step % checkpoint_every == 0 {
                    rows.append(&mut pending);
                    save_checkpoint(&t.checkpoint(), &out)?;
                    write_log_csv(&log, &rows)?;
                }
                Ok(())
            })?;
            rows.append(&mut pending);
            save_checkpoint(&trainer.checkpoint(), &out)?;
            write_log_csv(&log, &rows)?;
            println!(
                "saved {} at step {} (log {})",
                out.display(),
                trainer.step,
                log.display()
            );
            Ok(())
        }
        Command::Denoise {
            ckpt,
            input,
            out,
            tile,
            stride,
            blend,
        } => {
            let blend = parse_blend(&blend)?;
            let ck = load_checkpoint_with(&ckpt, tile).map_err(|e| match e {
                Error::Contract(m) => CliError::usage(format!("--tile: {m}")),
                other => other.into(),
            })?;
            let slice = load_slice(&input)?;
            let t = ck.config.tile_size;
            if t > slice.height() || t > slice.width() {
                return Err(CliError::usage(format!(
                    "--tile {t} exceeds the {}×{} image {}",
                    slice.height(),
                    slice.width(),
                    input.display()
                )));
            }
            let stride = check_stride(stride, t)?;
            let model = Model::from_parts(ck.config, ck.params)?;
            let y = denoise_image(&model, slice.pixels(), t, stride, blend)?;
            let result = SliceImage::clamped(
                &y,
                slice.patient_id.clone(),
                slice.slice_index,
                SliceKind::Denoised,
            )?;
            if out.extension().is_some_and(|e| e == "pgm") {
                export_pgm(&result, &out)?;
            } else {
                save_slice(&result, &out)?;
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            holdout,
            stride,
            blend,
            csv,
        } => {
            let blend = parse_blend(&blend)?;
            let ck = load_checkpoint(&ckpt)?;
            let model = Model::from_parts(ck.config, ck.params)?;
            let stride = check_stride(stride, model.config.tile_size)?;
            let test = holdout_split(&data, &holdout)?.1;
            let denoised = evaluate(&model, &test, stride, blend)?;
            let noisy = noisy_baseline(&test)?;
            let params = format_params(model.param_count());
            let mut rows: Vec<TableRow> = denoised.rows(&params);
            if let Some(last) = rows.last_mut() {
                last.name = "mean (denoised)".into();
            }
            rows.push(TableRow::new("mean (noisy input)", &noisy.mean, "-"));
            if csv {
                print!("{}", report_csv(&rows));
            } else {
                println!(
                    "holdout {holdout}: {} slices, display window [{}, {}], step {}",
                    denoised.count(),
                    denoised.window.lo,
                    denoised.window.hi,
                    ck.step
                );
                print!("{}", report_table(&rows));
                println!(
                    "mean PSNR: denoised {:.4} dB, noisy {:.4} dB",
                    denoised.mean.psnr, noisy.mean.psnr
                );
            }
            Ok(())
        }
        Command::GradCheck { config, seed } => {
            let cfg = preset(&config)?;
            let outcomes = grad_check_suite(&cfg, seed)?;
            let mut failed = 0;
            for o in &outcomes {
                println!("{:<40} {}", o.name, o.report);
                failed += usize::from(!o.passed());
            }
            if failed > 0 {
                return Err(CliError::numeric(format!(
                    "{failed} of {} gradient checks failed",
                    outcomes.len()
                )));
            }
            println!("all {} gradient checks passed", outcomes.len());
            Ok(())
        }
        Command::ParamCount { config } => {
            let cfg = preset(&config)?;
            let n = ctlformer::model::param_count(&cfg);
            let delta = 100.0 * (n as f64 - PARAM_TARGET as f64) / PARAM_TARGET as f64;
            println!("config {config}: {} parameters", thousands(n));
            println!("target {} ({delta:+.2}%)", thousands(PARAM_TARGET));
            Ok(())
        }
    }
}

fn preset(name: &str) -> Result<ModelConfig> {
    ModelConfig::preset(name).ok_or_else(|| {
        CliError::usage(format!(
            "--config {name:?} is not one of default, desk, small, tiny"
        ))
    })
}

fn parse_blend(s: &str) -> Result<Blend> {
    s.parse()
        .map_err(|_| CliError::usage(format!("--blend {s:?} must be uniform or cosine")))
}

fn check_stride(stride: Option<usize>, tile: usize) -> Result<usize> {
    let s = stride.unwrap_or((tile / 2).max(1));
    if s == 0 || s > tile {
        return Err(CliError::usage(format!(
            "--stride {s} must be in 1..={tile}"
        )));
    }
    Ok(s)
}

fn holdout_split(data: &Path, holdout: &str) -> Result<(Vec<SlicePair>, Vec<SlicePair>)> {
    let pairs = read_corpus(data)?;
    let split = split_patients(pairs, holdout).map_err(|e| match e {
        Error::Contract(m) => CliError::usage(format!("--holdout: {m}")),
        other => other.into(),
    })?;
    Ok((split.train, split.test))
}

/// `1805126` → `1,805,126`.
pub fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Compact count for the table's params column (`1.85M`, `87.2K`).
pub fn format_params(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.2}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_groups_digits() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(1_850_000), "1,850,000");
        assert_eq!(thousands(1_805_126), "1,805,126");
    }

    #[test]
    fn params_column_is_compact() {
        assert_eq!(format_params(1_850_000), "1.85M");
        assert_eq!(format_params(87_204), "87.2K");
        assert_eq!(format_params(12), "12");
    }
}
