use super::CliError;
use crate::corpus::CorpusConfig;
use crate::emg::{EmgConfig, EmgTrainConfig};
use crate::kv::{KvError, KvMap};
use crate::se::{SeConfig, SeTrainConfig};
use std::path::Path;

/// Step budget of full-scale runs, kept for reference; desk-scale runs use
/// the much smaller budgets in the training sections.
pub const FULL_SCALE_STEPS: usize = 80_000;

/// Every setting of a run, read from a flat `key=value` file plus
/// command-line overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub se: SeConfig,
    pub se_train: SeTrainConfig,
    pub emg: EmgConfig,
    pub emg_train: EmgTrainConfig,
    pub full_scale_steps: usize,
    /// Worker threads for evaluation; 0 picks the available parallelism.
    pub eval_threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            se: SeConfig::default(),
            se_train: SeTrainConfig::default(),
            emg: EmgConfig::default(),
            emg_train: EmgTrainConfig::default(),
            full_scale_steps: FULL_SCALE_STEPS,
            eval_threads: 0,
        }
    }
}

fn kv_err(e: KvError) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.corpus.to_kv();
        kv.merge(&self.se.to_kv());
        kv.merge(&self.emg.to_kv());
        let t = &self.se_train;
        kv.set("se_train.steps", t.steps);
        kv.set("se_train.batch_size", t.batch_size);
        kv.set("se_train.crop", t.crop);
        kv.set("se_train.lr", t.lr);
        kv.set("se_train.weight_decay", t.weight_decay);
        kv.set("se_train.clip_norm", t.clip_norm);
        kv.set("se_train.seed", t.seed);
        kv.set("se_train.val_every", t.val_every);
        let e = &self.emg_train;
        kv.set("emg_train.encoder_lr", e.encoder_lr);
        kv.set("emg_train.decoder_lr", e.decoder_lr);
        kv.set("emg_train.encoder_steps", e.encoder_steps);
        kv.set("emg_train.decoder_steps", e.decoder_steps);
        kv.set("emg_train.batch_size", e.batch_size);
        kv.set("emg_train.clip_norm", e.clip_norm);
        kv.set("emg_train.seed", e.seed);
        kv.set("emg_train.val_every", e.val_every);
        kv.set("run.full_scale_steps", self.full_scale_steps);
        kv.set("eval.threads", self.eval_threads);
        kv
    }

    /// Parses a full or partial key set; absent keys keep their defaults and
    /// unknown keys are rejected.
    pub fn from_kv(kv: &KvMap) -> Result<Self, CliError> {
        let known = Self::default().to_kv();
        if let Some((k, _)) = kv.iter().find(|(k, _)| known.get_str(k).is_none()) {
            return Err(CliError::Config(format!("unknown configuration key `{k}`")));
        }
        let d = Self::default();
        let se_train = SeTrainConfig {
            steps: kv
                .get_or("se_train.steps", d.se_train.steps)
                .map_err(kv_err)?,
            batch_size: kv
                .get_or("se_train.batch_size", d.se_train.batch_size)
                .map_err(kv_err)?,
            crop: kv
                .get_or("se_train.crop", d.se_train.crop)
                .map_err(kv_err)?,
            lr: kv.get_or("se_train.lr", d.se_train.lr).map_err(kv_err)?,
            weight_decay: kv
                .get_or("se_train.weight_decay", d.se_train.weight_decay)
                .map_err(kv_err)?,
            clip_norm: kv
                .get_or("se_train.clip_norm", d.se_train.clip_norm)
                .map_err(kv_err)?,
            seed: kv
                .get_or("se_train.seed", d.se_train.seed)
                .map_err(kv_err)?,
            val_every: kv
                .get_or("se_train.val_every", d.se_train.val_every)
                .map_err(kv_err)?,
        };
        let emg_train = EmgTrainConfig {
            encoder_lr: kv
                .get_or("emg_train.encoder_lr", d.emg_train.encoder_lr)
                .map_err(kv_err)?,
            decoder_lr: kv
                .get_or("emg_train.decoder_lr", d.emg_train.decoder_lr)
                .map_err(kv_err)?,
            encoder_steps: kv
                .get_or("emg_train.encoder_steps", d.emg_train.encoder_steps)
                .map_err(kv_err)?,
            decoder_steps: kv
                .get_or("emg_train.decoder_steps", d.emg_train.decoder_steps)
                .map_err(kv_err)?,
            batch_size: kv
                .get_or("emg_train.batch_size", d.emg_train.batch_size)
                .map_err(kv_err)?,
            clip_norm: kv
                .get_or("emg_train.clip_norm", d.emg_train.clip_norm)
                .map_err(kv_err)?,
            seed: kv
                .get_or("emg_train.seed", d.emg_train.seed)
                .map_err(kv_err)?,
            val_every: kv
                .get_or("emg_train.val_every", d.emg_train.val_every)
                .map_err(kv_err)?,
        };
        emg_train.validate()?;
        let cfg = Self {
            corpus: CorpusConfig::from_kv(kv)?,
            se: SeConfig::from_kv(kv)?,
            se_train,
            emg: EmgConfig::from_kv(kv)?,
            emg_train,
            full_scale_steps: kv
                .get_or("run.full_scale_steps", d.full_scale_steps)
                .map_err(kv_err)?,
            eval_threads: kv.get_or("eval.threads", d.eval_threads).map_err(kv_err)?,
        };
        if !(cfg.se_train.lr > 0.0) || cfg.se_train.batch_size == 0 || cfg.se_train.crop == 0 {
            return Err(CliError::Config(
                "se_train.lr, se_train.batch_size and se_train.crop must be positive".into(),
            ));
        }
        Ok(cfg)
    }

    /// Defaults, then the file at `path` (if any), then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &KvMap) -> Result<Self, CliError> {
        let mut kv = KvMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            kv = KvMap::parse(&text).map_err(kv_err)?;
        }
        kv.merge(overrides);
        Self::from_kv(&kv)
    }

    pub fn eval_threads(&self) -> usize {
        match self.eval_threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

/// Splits dotted `--section.key value` (or `--section.key=value`) pairs out
/// of `args`, leaving everything else for the regular argument parser.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, KvMap), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut kv = KvMap::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| CliError::Config(format!("override `--{key}` needs a value")))?,
        };
        kv.set(&key, value);
    }
    Ok((rest, kv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn text_round_trip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.se.num_tf_blocks = 8;
        cfg.emg_train.encoder_steps = 17;
        cfg.se_train.lr = 2.5e-4;
        let text = cfg.to_kv().to_text();
        let back = RunConfig::from_kv(&KvMap::parse(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn stage1_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.emg.weights.su, 0.5);
        assert_eq!(cfg.emg.weights.phoneme, 0.5);
        assert_eq!(cfg.emg_train.encoder_lr, 3e-4);
        assert_eq!(cfg.emg_train.decoder_lr, 1e-4);
        assert_eq!(cfg.full_scale_steps, 80_000);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let kv = KvMap::parse("se.chanels=8\n").unwrap();
        assert!(matches!(RunConfig::from_kv(&kv), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_leave_plain_flags_alone() {
        let (rest, kv) = extract_overrides(args(&[
            "emgse",
            "train-se",
            "--oracle",
            "--se.num_tf_blocks",
            "1",
            "--se_train.steps=5",
            "--out",
            "x.ckpt",
        ]))
        .unwrap();
        assert_eq!(
            rest,
            args(&["emgse", "train-se", "--oracle", "--out", "x.ckpt"])
        );
        assert_eq!(kv.get_str("se.num_tf_blocks"), Some("1"));
        assert_eq!(kv.get_str("se_train.steps"), Some("5"));
        let cfg = RunConfig::load(None, &kv).unwrap();
        assert_eq!(cfg.se.num_tf_blocks, 1);
        assert_eq!(cfg.se_train.steps, 5);
    }

    #[test]
    fn dangling_override_is_config_error() {
        assert!(matches!(
            extract_overrides(args(&["emgse", "--se.channels"])),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn file_then_override_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "se.channels=4\nse.d_state=2\n").unwrap();
        let kv = KvMap::parse("se.channels=6\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &kv).unwrap();
        assert_eq!((cfg.se.channels, cfg.se.d_state), (6, 2));
    }
}
