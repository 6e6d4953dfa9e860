use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use maskfix::data::{encode_dataset, gradient_images, load_image_dir, stripes};
use maskfix::nn::{Checkpoint, ModelConfig};
use maskfix::pixel::{encode_image, QuantizerConfig};
use maskfix::token::Vocabulary;
use maskfix::training::{LabeledGrid, TrainConfig, TrainMetrics, Trainer};

use crate::exit::{CliError, OrExit, FAILURE, NO_DATASET, OUTPUT_DIR};
use crate::manifest::RunManifest;
use crate::TrainArgs;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.mfx";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Everything a training run reads from its config: optimizer and corruption
/// settings, model shape and the data source.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    /// 0 means one more than the largest label in the data.
    pub num_classes: usize,
    /// `stripes`, `gradients` or a directory of PPM files.
    pub dataset: String,
    pub q: u32,
    /// Grid size of synthetic data; image folders use the image size.
    pub height: usize,
    pub width: usize,
    /// Codebook of `stripes`; image data uses `q^3`.
    pub vocab: u32,
    pub synthetic_count: usize,
    pub synthetic_seed: u64,
    /// Write `checkpoints/step_NNNNNN.mfx` every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            layers: 2,
            hidden_dim: 64,
            heads: 4,
            num_classes: 0,
            dataset: "stripes".into(),
            q: 16,
            height: 8,
            width: 8,
            vocab: 16,
            synthetic_count: 64,
            synthetic_seed: 0,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` has invalid value `{value}`"))
}

impl RunConfig {
    /// Applies one setting. `origin` names where it came from for messages.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), CliError> {
        let fail = |msg: String| CliError::config(format!("{origin}: {msg}"));
        match key {
            "layers" => self.layers = parse(key, value).map_err(fail)?,
            "hidden_dim" => self.hidden_dim = parse(key, value).map_err(fail)?,
            "heads" => self.heads = parse(key, value).map_err(fail)?,
            "num_classes" => self.num_classes = parse(key, value).map_err(fail)?,
            "dataset" => self.dataset = value.to_string(),
            "q" => self.q = parse(key, value).map_err(fail)?,
            "height" => self.height = parse(key, value).map_err(fail)?,
            "width" => self.width = parse(key, value).map_err(fail)?,
            "vocab" => self.vocab = parse(key, value).map_err(fail)?,
            "synthetic_count" => self.synthetic_count = parse(key, value).map_err(fail)?,
            "synthetic_seed" => self.synthetic_seed = parse(key, value).map_err(fail)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value).map_err(fail)?,
            _ => match self.train.set(key, value) {
                Ok(true) => {}
                Ok(false) => return Err(fail(format!("unknown key `{key}`"))),
                Err(e) => return Err(fail(e.to_string())),
            },
        }
        Ok(())
    }

    pub fn to_entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .train
            .to_entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let own = [
            ("layers", self.layers.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("dataset", self.dataset.clone()),
            ("q", self.q.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("vocab", self.vocab.to_string()),
            ("synthetic_count", self.synthetic_count.to_string()),
            ("synthetic_seed", self.synthetic_seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        out.extend(own.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    /// File first, then `--set` overrides in order; the last writer wins.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut config = Self::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
            let entries = maskfix::kv::parse(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            for e in entries {
                config.set(&e.key, &e.value, &format!("{} line {}", path.display(), e.line))?;
            }
        }
        for (i, raw) in overrides.iter().enumerate() {
            let origin = format!("--set #{} `{raw}`", i + 1);
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("{origin}: expected KEY=VALUE")))?;
            config.set(key.trim(), value.trim(), &origin)?;
        }
        config.train.validate().or_exit(crate::exit::BAD_CONFIG)?;
        Ok(config)
    }

    fn quantizer(&self) -> Result<QuantizerConfig, CliError> {
        QuantizerConfig::new(self.q).map_err(|e| CliError::config(format!("q: {e}")))
    }

    /// Loads or generates the training grids. Returns them with the quantizer
    /// when they came from images.
    pub fn load_dataset(&self) -> Result<(Vec<LabeledGrid>, Option<QuantizerConfig>), CliError> {
        let missing = |e: maskfix::Error| CliError::new(NO_DATASET, format!("dataset `{}`: {e}", self.dataset));
        match self.dataset.as_str() {
            "stripes" => {
                let vocab = Vocabulary::new(self.vocab).map_err(|e| CliError::config(format!("vocab: {e}")))?;
                if self.height == 0 || self.width == 0 {
                    return Err(CliError::config("height and width must be positive"));
                }
                Ok((
                    stripes(self.synthetic_count, self.height, self.width, vocab, self.synthetic_seed),
                    None,
                ))
            }
            "gradients" => {
                let q = self.quantizer()?;
                if self.height == 0 || self.width == 0 {
                    return Err(CliError::config("height and width must be positive"));
                }
                let grids = gradient_images(self.synthetic_count, self.height, self.width, self.synthetic_seed)
                    .iter()
                    .map(|img| (encode_image(img, q), 0))
                    .collect();
                Ok((grids, Some(q)))
            }
            dir => {
                let q = self.quantizer()?;
                let dir = Path::new(dir);
                if !dir.is_dir() {
                    return Err(CliError::new(
                        NO_DATASET,
                        format!("dataset directory {} does not exist", dir.display()),
                    ));
                }
                let entries = load_image_dir(dir).map_err(missing)?;
                Ok((encode_dataset(&entries, q).map_err(missing)?, Some(q)))
            }
        }
    }

    pub fn model(&self, data: &[LabeledGrid]) -> Result<ModelConfig, CliError> {
        let (grid, _) = data
            .first()
            .ok_or_else(|| CliError::new(NO_DATASET, "dataset is empty"))?;
        let max_label = data.iter().map(|(_, l)| *l).max().unwrap_or(0);
        let classes = if self.num_classes == 0 { max_label + 1 } else { self.num_classes };
        if max_label >= classes {
            return Err(CliError::config(format!(
                "num_classes = {classes} but the data has label {max_label}"
            )));
        }
        ModelConfig::new(
            self.layers,
            self.hidden_dim,
            self.heads,
            grid.vocab().size(),
            grid.height(),
            grid.width(),
            classes,
        )
        .map_err(|e| CliError::config(format!("model shape: {e}")))
    }
}

/// Model shapes agree on everything but dropout, which training sets.
fn same_shape(a: &ModelConfig, b: &ModelConfig) -> bool {
    let strip = |c: &ModelConfig| ModelConfig { dropout: 0.0, ..c.clone() };
    strip(a) == strip(b)
}

/// Keeps the header and the rows of steps before `step`.
fn truncate_metrics(path: &Path, step: usize) -> Result<(), CliError> {
    let kept: String = match fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .filter(|line| {
                line.split(',')
                    .next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .is_none_or(|s| s < step)
            })
            .map(|l| format!("{l}\n"))
            .collect(),
        Err(_) => format!("{}\n", TrainMetrics::CSV_HEADER),
    };
    fs::write(path, kept).or_exit(OUTPUT_DIR)
}

fn save(ck: &Checkpoint, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).or_exit(OUTPUT_DIR)?;
    }
    ck.save(path).or_exit(OUTPUT_DIR)
}

pub fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{step:06}.mfx"))
}

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    let config = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let final_path = args.out.join(FINAL_CHECKPOINT);

    let mut manifest = RunManifest::new("train", config.train.seed, &args.out);
    manifest.settings = config.to_entries();
    manifest.checkpoint = Some(args.resume.clone().unwrap_or_else(|| final_path.clone()));
    manifest.write()?;

    let (data, quantizer) = config.load_dataset()?;
    let model = config.model(&data)?;

    let mut trainer: Trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).map_err(|e| CliError::checkpoint(path, e))?;
            if !same_shape(&ck.params.config, &model) {
                return Err(CliError::checkpoint(
                    path,
                    format!("model {:?} does not match config {:?}", ck.params.config, model),
                ));
            }
            let t = Trainer::from_checkpoint(&ck, Some(config.train.clone()))
                .map_err(|e| CliError::checkpoint(path, e))?;
            if t.step > config.train.total_steps {
                return Err(CliError::checkpoint(
                    path,
                    format!("step {} is past total_steps {}", t.step, config.train.total_steps),
                ));
            }
            t
        }
        None => Trainer::new(&model, config.train.clone()).or_exit(crate::exit::BAD_CONFIG)?,
    };

    let metrics_path = args.out.join(METRICS_FILE);
    truncate_metrics(&metrics_path, trainer.step)?;
    let mut metrics = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .or_exit(OUTPUT_DIR)?;

    let snapshot = |trainer: &Trainer| {
        let mut ck = trainer.to_checkpoint();
        if let Some(q) = quantizer {
            ck.metadata.insert("data.q".into(), q.q().to_string());
        }
        ck
    };

    let total = config.train.total_steps;
    let report_every = (total / 10).max(1);
    while trainer.step < total {
        let m = trainer.train_step(&data).or_exit(FAILURE)?;
        writeln!(metrics, "{m}").or_exit(OUTPUT_DIR)?;
        let done = trainer.step;
        if done % report_every == 0 || done == total {
            eprintln!("step {done}/{total} loss {:.4} (next {:.4}, context {:.4})", m.loss, m.loss_next, m.loss_context);
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < total {
            save(&snapshot(&trainer), &checkpoint_path(&args.out, done))?;
        }
    }
    save(&snapshot(&trainer), &final_path)?;
    eprintln!("wrote {}", final_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_unknown_keys_name_their_origin() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "alpha = 0.3\n# comment\nseed = 4\n").unwrap();
        let c = RunConfig::load(Some(&file), &["alpha=0.1".into(), "alpha = 0.05".into()]).unwrap();
        assert_eq!((c.train.alpha, c.train.seed), (0.05, 4));

        fs::write(&file, "seed = 4\nalpha_ = 0.2\n").unwrap();
        let e = RunConfig::load(Some(&file), &[]).unwrap_err();
        assert_eq!(e.code, crate::exit::BAD_CONFIG);
        assert!(e.message.contains("alpha_") && e.message.contains("line 2"), "{}", e.message);

        let e = RunConfig::load(None, &["layers=two".into()]).unwrap_err();
        assert!(e.message.contains("--set #1"), "{}", e.message);
    }

    #[test]
    fn entries_round_trip() {
        let mut c = RunConfig::default();
        c.set("dataset", "gradients", "t").unwrap();
        c.set("checkpoint_every", "7", "t").unwrap();
        let overrides: Vec<String> = c.to_entries().iter().map(|(k, v)| format!("{k}={v}")).collect();
        let back = RunConfig::load(None, &overrides).unwrap();
        assert_eq!(back.to_entries(), c.to_entries());
    }

    #[test]
    fn metrics_truncation_keeps_earlier_steps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS_FILE);
        fs::write(&p, "step,loss\n0,1\n1,1\n2,1\n3,1\n").unwrap();
        truncate_metrics(&p, 2).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "step,loss\n0,1\n1,1\n");
        let fresh = dir.path().join("new.csv");
        truncate_metrics(&fresh, 0).unwrap();
        assert_eq!(fs::read_to_string(&fresh).unwrap(), format!("{}\n", TrainMetrics::CSV_HEADER));
    }
}
