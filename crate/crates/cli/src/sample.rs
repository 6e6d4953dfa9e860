use std::sync::Mutex;

use maskfix::data::grid_to_text;
use maskfix::nn::{Checkpoint, NeuralPredictor};
use maskfix::pixel::{decode_grid, encode_ppm, QuantizerConfig};
use maskfix::sampling::{sample, CorrectionRule, RollPolicy, SampleConfig};
use maskfix::token::Vocabulary;

use crate::exit::{CliError, OrExit, BAD_CONFIG, FAILURE};
use crate::manifest::{write_output, RunManifest};
use crate::SampleArgs;

fn flag<T: std::str::FromStr>(name: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::config(format!("--{name} `{value}`: {e}")))
}

pub fn parse_roll(value: &str) -> Result<RollPolicy, CliError> {
    match value {
        "off" => Ok(RollPolicy::Off),
        "random" => Ok(RollPolicy::Random),
        k => Ok(RollPolicy::Fixed(flag("roll", k)?)),
    }
}

fn parse_switch(name: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::config(format!("--{name} expects on or off, got `{value}`"))),
    }
}

/// Sampler settings from flags; `n` is the grid size of the model.
pub fn sample_config(args: &SampleArgs, n: usize) -> Result<SampleConfig, CliError> {
    let steps = args.steps.unwrap_or(n.min(32));
    let temperature_schedule = match &args.temperatures {
        Some(list) => list
            .split(',')
            .map(|t| flag("temperatures", t.trim()))
            .collect::<Result<_, _>>()?,
        None => Vec::new(),
    };
    let config = SampleConfig {
        steps,
        order: flag("order", &args.order)?,
        roll: parse_roll(&args.roll)?,
        scheduler: flag("scheduler", &args.scheduler)?,
        temperature: args.temperature,
        temperature_schedule,
        cfg_weight: args.cfg_weight,
        correction: CorrectionRule {
            enabled: parse_switch("correction", &args.correction)?,
            start_step: args.start_step.unwrap_or(6.min(steps.saturating_sub(1))),
            margin: args.margin,
            budget: args.budget,
            passes: args.passes,
        },
        seed: args.seed,
    };
    config.validate(n).or_exit(BAD_CONFIG)?;
    Ok(config)
}

struct Drawn {
    index: usize,
    corrected: usize,
}

pub fn run(args: &SampleArgs) -> Result<(), CliError> {
    let ck_path = args.checkpoint.as_path();
    let ck = Checkpoint::load(ck_path).map_err(|e| CliError::checkpoint(ck_path, e))?;
    let model = ck.params.config.clone();
    let (h, w) = (model.height, model.width);
    for (name, want, have) in [("height", args.height, h), ("width", args.width, w)] {
        if want.is_some_and(|x| x != have) {
            return Err(CliError::checkpoint(
                ck_path,
                format!("--{name} {} but the model has {name} {have}", want.unwrap()),
            ));
        }
    }
    let vocab = Vocabulary::new(model.vocab).map_err(|e| CliError::checkpoint(ck_path, e))?;
    let q = match args.q.or_else(|| ck.meta("data.q")) {
        Some(q) => {
            let qc = QuantizerConfig::new(q).map_err(|e| CliError::config(format!("--q: {e}")))?;
            if qc.vocab() != vocab {
                return Err(CliError::checkpoint(
                    ck_path,
                    format!("q = {q} gives {} tokens but the model has {}", qc.vocab().size(), model.vocab),
                ));
            }
            Some(qc)
        }
        None => None,
    };
    if args.class > model.num_classes {
        return Err(CliError::config(format!(
            "--class {} out of range; the model has {} classes plus the null class {}",
            args.class, model.num_classes, model.num_classes
        )));
    }
    if args.count == 0 {
        return Err(CliError::config("--count must be at least 1"));
    }
    let config = sample_config(args, h * w)?;

    let mut manifest = RunManifest::new("sample", args.seed, &args.out);
    manifest.checkpoint = Some(args.checkpoint.clone());
    manifest.set("height", h);
    manifest.set("width", w);
    manifest.set("vocab", model.vocab);
    manifest.set("class", args.class);
    manifest.set("steps", config.steps);
    manifest.set("order", config.order);
    manifest.set("scheduler", config.scheduler);
    manifest.set("roll", &args.roll);
    manifest.set("cfg", config.cfg_weight);
    manifest.set("temperature", config.temperature);
    if let Some(t) = &args.temperatures {
        manifest.set("temperatures", t);
    }
    manifest.set("correction", &args.correction);
    manifest.set("margin", config.correction.margin);
    manifest.set("budget", config.correction.budget);
    manifest.set("start_step", config.correction.start_step);
    manifest.set("passes", config.correction.passes);
    manifest.set("count", args.count);
    if let Some(q) = q {
        manifest.set("q", q.q());
    }
    manifest.write()?;

    let predictor = NeuralPredictor::new(ck.params.clone());
    let draw = |i: usize| -> Result<Drawn, CliError> {
        let cfg = SampleConfig {
            seed: args.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        let (grid, trace) = sample(&predictor, h, w, vocab, args.class, &cfg).or_exit(FAILURE)?;
        write_output(&args.out, &format!("sample_{i:03}.txt"), grid_to_text(&grid))?;
        write_output(&args.out, &format!("trace_{i:03}.csv"), trace.to_csv())?;
        if let Some(q) = q {
            let image = decode_grid(&grid, q).or_exit(FAILURE)?;
            write_output(&args.out, &format!("sample_{i:03}.ppm"), encode_ppm(&image))?;
        }
        Ok(Drawn {
            index: i,
            corrected: trace.corrected_count(),
        })
    };
    let results = parallel_map(args.count, draw);
    let mut total = 0;
    for r in results {
        let d = r?;
        eprintln!("sample {}: {} corrections", d.index, d.corrected);
        total += d.corrected;
    }
    eprintln!(
        "corrected {total} tokens over {} samples ({:.2} per sample)",
        args.count,
        total as f64 / args.count as f64
    );
    Ok(())
}

/// Runs `f(0..count)` on up to [`crate::thread_count`] scoped threads and
/// returns the results in index order.
pub fn parallel_map<T: Send, F: Fn(usize) -> T + Sync>(count: usize, f: F) -> Vec<T> {
    let threads = crate::thread_count().min(count).max(1);
    if threads == 1 {
        return (0..count).map(f).collect();
    }
    let slots: Vec<Mutex<Option<T>>> = (0..count).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for t in 0..threads {
            let (f, slots) = (&f, &slots);
            scope.spawn(move || {
                for i in (t..count).step_by(threads) {
                    *slots[i].lock().expect("unpoisoned") = Some(f(i));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("unpoisoned").expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let v = parallel_map(37, |i| i * i);
        assert_eq!(v, (0..37).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn roll_and_switch_flags() {
        assert_eq!(parse_roll("off").unwrap(), RollPolicy::Off);
        assert_eq!(parse_roll("5").unwrap(), RollPolicy::Fixed(5));
        assert_eq!(parse_roll("x").unwrap_err().code, BAD_CONFIG);
        assert!(parse_switch("correction", "on").unwrap());
        assert!(parse_switch("correction", "maybe").is_err());
    }
}
