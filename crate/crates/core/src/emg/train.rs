use super::config::{EmgConfig, EmgTrainConfig};
use super::loss::{frame_accuracy, loss_phoneme, loss_su, loss_total};
use super::model::DecodeMode;
use super::pipeline::{emg_batch, Stage1Model};
use super::recording::EmgRecording;
use super::{EmgError, Result};
use crate::corpus::Utterance;
use crate::dsp::MelSpectrogram;
use crate::tensor::{
    clip_grad_norm, AdamW, AdamWConfig, ParamStore, Scalar, Tape, TensorError, Var,
};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One utterance prepared for Stage-1 training.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Item {
    pub emg: EmgRecording,
    pub phonemes: Vec<usize>,
    pub units: Vec<f64>,
    pub mel: MelSpectrogram,
}

impl Stage1Item {
    pub fn frames(&self) -> usize {
        self.phonemes.len()
    }
}

/// Scalar losses of one encoder evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage1Losses {
    pub su: f64,
    pub phoneme: f64,
    pub total: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1StepLog {
    pub step: usize,
    /// Encoder losses, absent once the encoder budget is spent.
    pub encoder: Option<Stage1Losses>,
    /// Teacher-forced mean absolute log-mel error of the decoder.
    pub decoder: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage1Report {
    pub steps: Vec<Stage1StepLog>,
    /// `(step, encoder total loss, decoder loss)` on the validation items.
    pub validation: Vec<(usize, f64, f64)>,
    pub best_encoder_step: usize,
    pub best_decoder_step: usize,
}

fn numeric(step: usize, e: EmgError) -> EmgError {
    match e {
        EmgError::Tensor(TensorError::Domain { .. }) => {
            EmgError::Numeric(format!("step {step}: {e}"))
        }
        other => other,
    }
}

/// Trains the encoder on L_total and the decoder (teacher-forced, on target
/// units) on the L1 log-mel error, each with its own AdamW.
pub struct Stage1Trainer<T: Scalar> {
    pub model: Stage1Model<T>,
    pub train_cfg: EmgTrainConfig,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Stage1Trainer<T> {
    pub fn new(cfg: &EmgConfig, train_cfg: EmgTrainConfig) -> Result<Self> {
        train_cfg.validate()?;
        Ok(Self {
            model: Stage1Model::new(cfg, train_cfg.seed)?,
            rng: ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x5747_0001),
            train_cfg,
        })
    }

    /// Aligns EMG and computes unit and mel targets for an utterance.
    pub fn prepare(&self, u: &Utterance) -> Result<Stage1Item> {
        let emg = u.emg.clone().aligned(self.model.strict)?;
        let (mel, units) = self.model.targets(&u.clean)?;
        let c = u.phonemes.len();
        if emg.unit_frames() != c || mel.frames != c {
            return Err(EmgError::Contract(format!(
                "{}: {} EMG frames, {} mel frames, {c} phoneme frames",
                u.id,
                emg.unit_frames(),
                mel.frames
            )));
        }
        if u.phonemes.vocab != self.model.config.phonemes {
            return Err(EmgError::Contract(format!(
                "phoneme vocabulary {} vs model {}",
                u.phonemes.vocab, self.model.config.phonemes
            )));
        }
        Ok(Stage1Item {
            emg,
            phonemes: u.phonemes.labels.clone(),
            units: units.data,
            mel,
        })
    }

    fn encoder_loss(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        item: &Stage1Item,
    ) -> Result<(Var, Var, Var, Var)> {
        let m = &self.model;
        let x = emg_batch(tape, &[&item.emg])?;
        let out = m.encoder.forward(tape, store, x)?;
        let target = tape.constant_f64(&[1, item.frames(), m.config.d_unit], &item.units)?;
        let su = loss_su(tape, out.units, target)?;
        let p = loss_phoneme(tape, out.logits, &item.phonemes)?;
        let total = loss_total(tape, su, p, &m.config.weights)?;
        Ok((su, p, total, out.logits))
    }

    fn decoder_loss(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        item: &Stage1Item,
    ) -> Result<Var> {
        let m = &self.model;
        let c = item.frames();
        let units = tape.constant_f64(&[1, c, m.config.d_unit], &item.units)?;
        let target = tape.constant_f64(&[1, c, m.config.n_mels], &item.mel.data)?;
        let pred = m
            .decoder
            .forward(tape, store, units, DecodeMode::TeacherForced(target))?;
        let d = tape.sub(pred, target)?;
        let a = tape.abs(d);
        Ok(tape.mean(a))
    }

    /// Encoder losses and frame accuracy averaged over `items`.
    pub fn evaluate(&self, items: &[Stage1Item]) -> Result<Stage1Losses> {
        let store = frozen(&self.model.enc_store);
        let mut acc = Stage1Losses::default();
        for item in items {
            let mut tape = Tape::new();
            let (su, p, total, logits) = self.encoder_loss(&mut tape, &store, item)?;
            let lv: Vec<f64> = tape.value(logits).iter().map(|v| v.as_f64()).collect();
            acc.su += tape.item(su).as_f64();
            acc.phoneme += tape.item(p).as_f64();
            acc.total += tape.item(total).as_f64();
            acc.accuracy += frame_accuracy(&lv, self.model.config.phonemes, &item.phonemes);
        }
        let n = items.len().max(1) as f64;
        Ok(Stage1Losses {
            su: acc.su / n,
            phoneme: acc.phoneme / n,
            total: acc.total / n,
            accuracy: acc.accuracy / n,
        })
    }

    /// Teacher-forced decoder loss averaged over `items`.
    pub fn evaluate_decoder(&self, items: &[Stage1Item]) -> Result<f64> {
        let store = frozen(&self.model.dec_store);
        let mut total = 0.0;
        for item in items {
            let mut tape = Tape::new();
            let l = self.decoder_loss(&mut tape, &store, item)?;
            total += tape.item(l).as_f64();
        }
        Ok(total / items.len().max(1) as f64)
    }

    fn pick(&mut self, n: usize) -> Vec<usize> {
        let b = self.train_cfg.batch_size;
        if b == 0 || b >= n {
            (0..n).collect()
        } else {
            let mut v = sample(&mut self.rng, n, b).into_vec();
            v.sort_unstable();
            v
        }
    }

    fn encoder_step(
        &mut self,
        opt: &mut AdamW<T>,
        items: &[Stage1Item],
        step: usize,
    ) -> Result<Stage1Losses> {
        let picks = self.pick(items.len());
        let mut tape = Tape::new();
        let res = (|| {
            let mut parts = Vec::new();
            let mut acc = Stage1Losses::default();
            for &i in &picks {
                let (su, p, total, logits) =
                    self.encoder_loss(&mut tape, &self.model.enc_store, &items[i])?;
                let lv: Vec<f64> = tape.value(logits).iter().map(|v| v.as_f64()).collect();
                acc.su += tape.item(su).as_f64();
                acc.phoneme += tape.item(p).as_f64();
                acc.total += tape.item(total).as_f64();
                acc.accuracy += frame_accuracy(&lv, self.model.config.phonemes, &items[i].phonemes);
                parts.push(tape.reshape(total, &[1])?);
            }
            let all = tape.concat(&parts, 0)?;
            Ok::<_, EmgError>((tape.mean(all), acc))
        })();
        let (loss, acc) = res.map_err(|e| numeric(step, e))?;
        let n = picks.len() as f64;
        let out = Stage1Losses {
            su: acc.su / n,
            phoneme: acc.phoneme / n,
            total: acc.total / n,
            accuracy: acc.accuracy / n,
        };
        if !out.total.is_finite() {
            return Err(EmgError::Numeric(format!(
                "step {step}: encoder loss is {}",
                out.total
            )));
        }
        let store = &mut self.model.enc_store;
        store.zero_grads();
        tape.backward_into(loss, store)
            .map_err(|e| numeric(step, e.into()))?;
        let g = clip_grad_norm(store, self.train_cfg.clip_norm);
        if !g.is_finite() {
            return Err(EmgError::Numeric(format!(
                "step {step}: encoder gradient norm is {g}"
            )));
        }
        opt.step(store)?;
        Ok(out)
    }

    fn decoder_step(
        &mut self,
        opt: &mut AdamW<T>,
        items: &[Stage1Item],
        step: usize,
    ) -> Result<f64> {
        let picks = self.pick(items.len());
        let mut tape = Tape::new();
        let res = (|| {
            let mut parts = Vec::new();
            for &i in &picks {
                let l = self.decoder_loss(&mut tape, &self.model.dec_store, &items[i])?;
                parts.push(tape.reshape(l, &[1])?);
            }
            let all = tape.concat(&parts, 0)?;
            Ok::<_, EmgError>(tape.mean(all))
        })();
        let loss = res.map_err(|e| numeric(step, e))?;
        let v = tape.item(loss).as_f64();
        if !v.is_finite() {
            return Err(EmgError::Numeric(format!(
                "step {step}: decoder loss is {v}"
            )));
        }
        let store = &mut self.model.dec_store;
        store.zero_grads();
        tape.backward_into(loss, store)
            .map_err(|e| numeric(step, e.into()))?;
        let g = clip_grad_norm(store, self.train_cfg.clip_norm);
        if !g.is_finite() {
            return Err(EmgError::Numeric(format!(
                "step {step}: decoder gradient norm is {g}"
            )));
        }
        opt.step(store)?;
        Ok(v)
    }

    /// Runs both budgets side by side. On return the model holds the
    /// best-validation encoder and decoder (the final ones without
    /// validation).
    pub fn run(
        &mut self,
        train: &[Stage1Item],
        val: &[Stage1Item],
        mut on_step: impl FnMut(&Stage1StepLog),
    ) -> Result<Stage1Report> {
        if train.is_empty() {
            return Err(EmgError::Input("no training items".into()));
        }
        let tc = self.train_cfg.clone();
        let adam = |lr: f64| AdamWConfig {
            lr,
            ..AdamWConfig::default()
        };
        let mut enc_opt = AdamW::new(adam(tc.encoder_lr), &self.model.enc_store);
        let mut dec_opt = AdamW::new(adam(tc.decoder_lr), &self.model.dec_store);
        let mut report = Stage1Report::default();
        let (mut best_enc, mut best_dec) = (None, None);
        let (mut best_enc_val, mut best_dec_val) = (f64::INFINITY, f64::INFINITY);
        let validate = tc.val_every > 0 && !val.is_empty();
        let steps = tc.encoder_steps.max(tc.decoder_steps);
        for step in 1..=steps {
            let encoder = (step <= tc.encoder_steps)
                .then(|| self.encoder_step(&mut enc_opt, train, step))
                .transpose()?;
            let decoder = (step <= tc.decoder_steps)
                .then(|| self.decoder_step(&mut dec_opt, train, step))
                .transpose()?;
            let log = Stage1StepLog {
                step,
                encoder,
                decoder,
            };
            on_step(&log);
            report.steps.push(log);
            if validate && (step % tc.val_every == 0 || step == steps) {
                let e = self.evaluate(val)?.total;
                let d = self.evaluate_decoder(val)?;
                log::info!("step {step}: validation encoder {e:.4}, decoder {d:.4}");
                report.validation.push((step, e, d));
                if step <= tc.encoder_steps && e < best_enc_val {
                    best_enc_val = e;
                    report.best_encoder_step = step;
                    best_enc = Some(self.model.enc_store.clone());
                }
                if step <= tc.decoder_steps && d < best_dec_val {
                    best_dec_val = d;
                    report.best_decoder_step = step;
                    best_dec = Some(self.model.dec_store.clone());
                }
            }
        }
        match best_enc {
            Some(s) => self.model.enc_store = s,
            None => report.best_encoder_step = tc.encoder_steps,
        }
        match best_dec {
            Some(s) => self.model.dec_store = s,
            None => report.best_decoder_step = tc.decoder_steps,
        }
        Ok(report)
    }
}

fn frozen<T: Scalar>(store: &ParamStore<T>) -> ParamStore<T> {
    let mut s = store.clone();
    for id in s.ids().collect::<Vec<_>>() {
        s.set_frozen(id, true);
    }
    s
}
