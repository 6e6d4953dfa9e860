use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use maskfix::eval::{empirical_vs_exact, one_step_reconstruction, xor_violation, AccuracyReport, ViolationArm, CSV_HEADER};
use maskfix::nn::{Checkpoint, NeuralPredictor};
use maskfix::predictor::MicroDistribution;
use maskfix::sampling::{CorrectionRule, SampleConfig};
use maskfix::token::Vocabulary;

use crate::exit::{CliError, OrExit, CHECKPOINT, FAILURE};
use crate::manifest::{write_output, RunManifest};
use crate::train::RunConfig;
use crate::EvalArgs;

fn violation_row(category: &str, arm: &ViolationArm, seed: u64) -> String {
    let violations = (arm.rate * arm.draws as f64).round() as usize;
    format!("violation_rate,{category},{},{violations},{},{seed}\n", arm.rate, arm.draws)
}

/// One-step XOR pair: independent parallel draws against the same draws with
/// a single correction pass.
fn xor(args: &EvalArgs) -> Result<String, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut config = SampleConfig {
        steps: 1,
        correction: CorrectionRule::off(),
        ..SampleConfig::default()
    };
    let off = xor_violation(&config, args.draws, &mut rng).or_exit(FAILURE)?;
    config.correction = CorrectionRule {
        start_step: 0,
        ..CorrectionRule::default()
    };
    let on = xor_violation(&config, args.draws, &mut rng).or_exit(FAILURE)?;
    eprintln!("xor violation rate {:.4} without correction, {:.4} with", off.rate, on.rate);
    Ok(violation_row("no_correction", &off, args.seed) + &violation_row("correction", &on, args.seed))
}

/// Exact-oracle sampling on a random 2x2 binary distribution, one token per
/// step against all tokens in one step.
fn sequential(args: &EvalArgs) -> Result<String, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let vocab = Vocabulary::new(2).or_exit(FAILURE)?;
    let micro = MicroDistribution::random(2, 2, vocab, &mut rng).or_exit(FAILURE)?;
    let mut out = String::new();
    for (category, steps) in [("sequential", 4), ("parallel", 1)] {
        let config = SampleConfig {
            steps,
            correction: CorrectionRule::off(),
            ..SampleConfig::default()
        };
        let report = empirical_vs_exact(&micro, &micro, &config, args.draws, &mut rng).or_exit(FAILURE)?;
        eprintln!("{category}: total variation {:.4}", report.tv);
        out += &report.csv_rows(category, args.seed);
    }
    Ok(out)
}

fn reconstruction(args: &EvalArgs) -> Result<String, CliError> {
    let path = args
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::config("reconstruction needs --checkpoint"))?;
    let ck = Checkpoint::load(path).map_err(|e| CliError::checkpoint(path, e))?;
    let model = &ck.params.config;
    let source = RunConfig {
        dataset: args.dataset.clone(),
        q: args.q,
        height: model.height,
        width: model.width,
        vocab: model.vocab,
        synthetic_count: args.count,
        synthetic_seed: args.data_seed,
        ..RunConfig::default()
    };
    let (data, _) = source.load_dataset()?;
    for (grid, label) in &data {
        let shape = (grid.height(), grid.width(), grid.vocab().size());
        if shape != (model.height, model.width, model.vocab) || *label >= model.num_classes {
            return Err(CliError::new(
                CHECKPOINT,
                format!(
                    "data grid {}x{} (V={}, label {label}) does not fit model {}x{} (V={}, {} classes)",
                    shape.0, shape.1, shape.2, model.height, model.width, model.vocab, model.num_classes
                ),
            ));
        }
    }
    let predictor = NeuralPredictor::new(ck.params.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut total = AccuracyReport::default();
    for (grid, label) in &data {
        let r = one_step_reconstruction(
            &predictor,
            grid,
            *label,
            args.context_fraction,
            args.alpha,
            args.top_fraction,
            &mut rng,
        )
        .or_exit(crate::exit::BAD_CONFIG)?;
        total.merge(&r);
    }
    let show = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "acc_next {} acc_full_context {} acc_corrupted_tokens {}",
        show(total.acc_next()),
        show(total.acc_full_context()),
        show(total.acc_corrupted_tokens())
    );
    Ok(total.csv_rows(args.seed))
}

pub fn run(args: &EvalArgs) -> Result<(), CliError> {
    let experiment: fn(&EvalArgs) -> Result<String, CliError> = match args.experiment.as_str() {
        "xor" => xor,
        "sequential" => sequential,
        "reconstruction" => reconstruction,
        other => {
            return Err(CliError::config(format!(
                "unknown experiment `{other}`; expected xor, sequential or reconstruction"
            )))
        }
    };
    if args.draws == 0 {
        return Err(CliError::config("--draws must be at least 1"));
    }

    let mut manifest = RunManifest::new("eval", args.seed, &args.out);
    manifest.checkpoint = args.checkpoint.clone();
    manifest.set("experiment", &args.experiment);
    match args.experiment.as_str() {
        "reconstruction" => {
            manifest.set("dataset", &args.dataset);
            manifest.set("count", args.count);
            manifest.set("data_seed", args.data_seed);
            manifest.set("q", args.q);
            manifest.set("context_fraction", args.context_fraction);
            manifest.set("alpha", args.alpha);
            manifest.set("top_fraction", args.top_fraction);
        }
        _ => manifest.set("draws", args.draws),
    }
    manifest.write()?;

    let rows = experiment(args)?;
    let mut csv = String::new();
    writeln!(csv, "{CSV_HEADER}").unwrap();
    csv.push_str(&rows);
    write_output(&args.out, &format!("{}.csv", args.experiment), csv)
}
