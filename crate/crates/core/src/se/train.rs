use super::enhance::{batch_input, spectral_features, SpectralFeatures};
use super::loss::{stage2_loss, LossValues, SpeechTensors};
use super::model::{to_complex, SeNetwork};
use super::{SeConfig, SeError};
use crate::dsp::{istft_tape, StftEngine};
use crate::tensor::{clip_grad_norm, AdamW, AdamWConfig, ParamStore, Scalar, Tape, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// One aligned training utterance at 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct SeExample {
    pub noisy: Vec<f64>,
    pub clean: Vec<f64>,
    /// EMG-derived (or oracle) speech; required by multimodal networks.
    pub aux: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Random crop length in samples; shorter utterances are used whole.
    pub crop: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Validation period in steps (0 disables validation).
    pub val_every: usize,
}

impl Default for SeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            crop: 16000,
            lr: 5e-4,
            weight_decay: 0.0,
            clip_norm: 5.0,
            seed: 0,
            val_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeStepLog {
    pub step: usize,
    pub loss: LossValues,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeTrainReport {
    pub steps: Vec<SeStepLog>,
    /// `(step, mean validation composite loss)`.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val: Option<f64>,
}

impl SeTrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss.total)
    }

    /// Mean composite loss over the last `n` logged steps.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let n = n.min(self.steps.len());
        (n > 0).then(|| {
            self.steps[self.steps.len() - n..]
                .iter()
                .map(|s| s.loss.total)
                .sum::<f64>()
                / n as f64
        })
    }
}

struct Crop {
    noisy: SpectralFeatures,
    clean: SpectralFeatures,
    aux: Option<SpectralFeatures>,
    clean_wave: Vec<f64>,
}

fn check_examples(cfg: &SeConfig, items: &[SeExample], what: &str) -> Result<(), SeError> {
    for (i, e) in items.iter().enumerate() {
        if e.noisy.len() != e.clean.len() {
            return Err(SeError::Input(format!(
                "{what} item {i}: noisy and clean lengths differ"
            )));
        }
        if e.noisy.len() < cfg.stft.n_fft {
            return Err(SeError::Input(format!(
                "{what} item {i}: shorter than one STFT frame"
            )));
        }
        if cfg.multimodal {
            match &e.aux {
                Some(a) if a.len() == e.noisy.len() => {}
                Some(_) => {
                    return Err(SeError::Input(format!(
                        "{what} item {i}: auxiliary length differs"
                    )))
                }
                None => {
                    return Err(SeError::Input(format!(
                        "{what} item {i}: multimodal training needs aux"
                    )))
                }
            }
        }
    }
    Ok(())
}

/// Non-finite values surface as domain errors inside the tape; during
/// training they mean the run diverged.
fn numeric_at(step: usize, e: SeError) -> SeError {
    match e {
        SeError::Tensor(TensorError::Domain { .. }) => {
            SeError::Numeric(format!("step {step}: {e}"))
        }
        other => other,
    }
}

/// Stage-2 trainer: AdamW with global-norm clipping over random crops,
/// keeping the parameters with the best validation loss.
pub struct SeTrainer<T: Scalar> {
    pub net: SeNetwork,
    pub store: ParamStore<T>,
    pub train_cfg: SeTrainConfig,
    analysis: StftEngine<f64>,
    synthesis: Arc<StftEngine<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> SeTrainer<T> {
    pub fn new(cfg: &SeConfig, train_cfg: SeTrainConfig) -> Result<Self, SeError> {
        cfg.validate()?;
        if train_cfg.batch_size == 0 || train_cfg.crop == 0 {
            return Err(SeError::Config(
                "batch_size and crop must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        let mut store = ParamStore::new();
        let net = SeNetwork::new(cfg, &mut store, &mut rng);
        Ok(Self {
            analysis: StftEngine::new(&cfg.stft)?,
            synthesis: Arc::new(StftEngine::new(&cfg.stft)?),
            net,
            store,
            train_cfg,
            rng,
        })
    }

    fn crop(&self, e: &SeExample, start: usize, len: usize) -> Crop {
        let r = start..start + len;
        Crop {
            noisy: spectral_features(&self.analysis, &e.noisy[r.clone()]),
            clean: spectral_features(&self.analysis, &e.clean[r.clone()]),
            aux: e
                .aux
                .as_ref()
                .map(|a| spectral_features(&self.analysis, &a[r.clone()])),
            clean_wave: e.clean[r].to_vec(),
        }
    }

    fn random_batch(&mut self, items: &[SeExample]) -> Vec<Crop> {
        let picks: Vec<usize> = (0..self.train_cfg.batch_size)
            .map(|_| self.rng.random_range(0..items.len()))
            .collect();
        let len = picks
            .iter()
            .map(|&i| items[i].noisy.len())
            .min()
            .unwrap_or(0)
            .min(self.train_cfg.crop);
        picks
            .into_iter()
            .map(|i| {
                let start = self.rng.random_range(0..=items[i].noisy.len() - len);
                self.crop(&items[i], start, len)
            })
            .collect()
    }

    /// Builds the composite loss of one batch on `tape`.
    fn batch_loss(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &[Crop],
    ) -> Result<super::loss::LossParts, SeError> {
        let cfg = &self.net.config;
        let bins = cfg.stft.bins();
        let len = batch[0].clean_wave.len();
        let noisy = batch_input(
            tape,
            &batch.iter().map(|c| &c.noisy).collect::<Vec<_>>(),
            bins,
        )?;
        let aux = if cfg.multimodal {
            let feats: Vec<&SpectralFeatures> =
                batch.iter().filter_map(|c| c.aux.as_ref()).collect();
            Some(batch_input(tape, &feats, bins)?)
        } else {
            None
        };
        let clean = batch_input(
            tape,
            &batch.iter().map(|c| &c.clean).collect::<Vec<_>>(),
            bins,
        )?;
        let out = self.net.forward(tape, store, noisy, aux)?;
        let (re, im) = to_complex(tape, out.mag, out.phase, cfg.stft.compression)?;
        let wave = istft_tape(tape, re, im, &self.synthesis, len)?;
        let clean_wave: Vec<f64> = batch
            .iter()
            .flat_map(|c| c.clean_wave.iter().copied())
            .collect();
        let clean_wave = tape.constant_f64(&[batch.len(), len], &clean_wave)?;
        let est = SpeechTensors {
            wave,
            mag: out.mag,
            phase: out.phase,
        };
        let target = SpeechTensors {
            wave: clean_wave,
            mag: clean.mag,
            phase: clean.phase,
        };
        Ok(stage2_loss(tape, est, target, &cfg.weights)?)
    }

    /// Composite loss of each validation item on its centred crop, averaged.
    pub fn validation_loss(&self, items: &[SeExample]) -> Result<f64, SeError> {
        let mut frozen = self.store.clone();
        for id in frozen.ids().collect::<Vec<_>>() {
            frozen.set_frozen(id, true);
        }
        let mut total = 0.0;
        for e in items {
            let len = e.noisy.len().min(self.train_cfg.crop);
            let crop = self.crop(e, (e.noisy.len() - len) / 2, len);
            let mut tape = Tape::new();
            let parts = self.batch_loss(&mut tape, &frozen, std::slice::from_ref(&crop))?;
            let v = parts.values(&tape);
            v.check_finite()?;
            total += v.total;
        }
        Ok(total / items.len().max(1) as f64)
    }

    /// One optimisation step on a random batch.
    pub fn step(
        &mut self,
        opt: &mut AdamW<T>,
        items: &[SeExample],
        step: usize,
    ) -> Result<SeStepLog, SeError> {
        let batch = self.random_batch(items);
        let mut tape = Tape::new();
        let parts = self
            .batch_loss(&mut tape, &self.store, &batch)
            .map_err(|e| numeric_at(step, e))?;
        let loss = parts.values(&tape);
        loss.check_finite()
            .map_err(|e| SeError::Numeric(format!("step {step}: {e}")))?;
        self.store.zero_grads();
        tape.backward_into(parts.total, &mut self.store)
            .map_err(|e| numeric_at(step, e.into()))?;
        drop(tape);
        let grad_norm = clip_grad_norm(&mut self.store, self.train_cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(SeError::Numeric(format!(
                "step {step}: gradient norm is {grad_norm}"
            )));
        }
        opt.step(&mut self.store)?;
        Ok(SeStepLog {
            step,
            loss,
            grad_norm,
        })
    }

    /// Runs the configured number of steps. `on_step` sees every step log.
    /// On return `self.store` holds the best-validation parameters (the
    /// final ones when validation is disabled or `val` is empty).
    pub fn run(
        &mut self,
        train: &[SeExample],
        val: &[SeExample],
        mut on_step: impl FnMut(&SeStepLog),
    ) -> Result<SeTrainReport, SeError> {
        let cfg = self.net.config.clone();
        if train.is_empty() {
            return Err(SeError::Input("no training items".into()));
        }
        check_examples(&cfg, train, "train")?;
        check_examples(&cfg, val, "validation")?;
        let tc = self.train_cfg.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: tc.lr,
                weight_decay: tc.weight_decay,
                ..AdamWConfig::default()
            },
            &self.store,
        );
        let mut report = SeTrainReport::default();
        let mut best: Option<ParamStore<T>> = None;
        let validate = tc.val_every > 0 && !val.is_empty();
        for step in 1..=tc.steps {
            let log = self.step(&mut opt, train, step)?;
            on_step(&log);
            report.steps.push(log);
            if validate && (step % tc.val_every == 0 || step == tc.steps) {
                let v = self.validation_loss(val)?;
                log::info!("step {step}: validation loss {v:.5}");
                report.validation.push((step, v));
                if report.best_val.is_none_or(|b| v < b) {
                    report.best_val = Some(v);
                    report.best_step = step;
                    best = Some(self.store.clone());
                }
            }
        }
        match best {
            Some(s) => self.store = s,
            None => report.best_step = tc.steps,
        }
        Ok(report)
    }
}
