use super::{CliError, RunConfig};
use crate::checkpoint::Checkpoint;
use crate::corpus::{CorpusDir, CorpusSummary, ManifestEntry, Split, Utterance};
use crate::dsp::{read_wav, write_wav, Waveform};
use crate::emg::{EmgRecording, Stage1Model, Stage1Trainer};
use crate::metrics::{aggregate_report, si_sdr, stoi, ItemResult, Metric, MetricReport};
use crate::se::{Enhancer, ForwardOptions, SeConfig, SeExample, SeTrainReport, SeTrainer};
use crate::selfcheck::{run_all, CheckResult, SelfCheckOptions};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Where the auxiliary speech of a multimodal network comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum AuxSource {
    /// EMG converted by a trained Stage-1 checkpoint.
    Stage1(PathBuf),
    /// The clean reference itself (upper bound).
    Oracle,
}

pub struct TrainEmgArgs {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
    pub overfit: Option<usize>,
}

pub struct TrainSeArgs {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub aux: Option<AuxSource>,
    pub log: Option<PathBuf>,
    pub overfit: Option<usize>,
}

pub struct EnhanceArgs {
    pub checkpoint: PathBuf,
    pub noisy: PathBuf,
    pub emg: Option<PathBuf>,
    pub stage1: Option<PathBuf>,
    pub aux: Option<PathBuf>,
    pub clean: Option<PathBuf>,
    pub out: PathBuf,
    pub pass_through: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSystem {
    pub name: String,
    pub checkpoint: PathBuf,
}

impl EvalSystem {
    /// Parses `NAME=CHECKPOINT`.
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s.split_once('=') {
            Some((n, p)) if !n.is_empty() && !p.is_empty() && n != "noisy" => Ok(Self {
                name: n.to_string(),
                checkpoint: PathBuf::from(p),
            }),
            _ => Err(CliError::Config(format!(
                "--system expects NAME=CHECKPOINT with a name other than `noisy`, got `{s}`"
            ))),
        }
    }
}

pub struct EvalArgs {
    pub corpus: PathBuf,
    pub systems: Vec<EvalSystem>,
    pub aux: Option<AuxSource>,
    pub out: PathBuf,
}

/// Scores printed by `enhance` when a clean reference is given.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnhanceScores {
    pub stoi_noisy: f64,
    pub stoi_enhanced: f64,
    pub sisdr_noisy: f64,
    pub sisdr_enhanced: f64,
}

pub fn cmd_synth_corpus(
    cfg: &RunConfig,
    out: &Path,
    write_noisy: bool,
) -> Result<CorpusSummary, CliError> {
    let t0 = Instant::now();
    let (_, s) = CorpusDir::create(out, &cfg.corpus, write_noisy)?;
    println!(
        "wrote {} utterances to {}: train {} mixtures, val {}, test matched {}, test mismatched {}, {} noisy WAVs ({:.1}s)",
        s.utterances,
        out.display(),
        s.train,
        s.val,
        s.matched,
        s.mismatched,
        s.noisy_files,
        t0.elapsed().as_secs_f64()
    );
    Ok(s)
}

/// Distinct utterances referenced by a manifest, in manifest order.
fn utterances_of(dir: &CorpusDir, split: Split) -> Result<Vec<Utterance>, CliError> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for e in &dir.manifest(split).entries {
        if seen.insert(e.id.clone()) {
            out.push(dir.utterance(&e.id)?);
        }
    }
    Ok(out)
}

fn create_log(path: &Option<PathBuf>, header: &str) -> Result<Option<BufWriter<File>>, CliError> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "{header}")?;
            Ok(Some(w))
        }
        None => Ok(None),
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

pub fn cmd_train_emg(cfg: &RunConfig, args: &TrainEmgArgs) -> Result<Checkpoint, CliError> {
    let dir = CorpusDir::open(&args.corpus)?;
    let mut trainer = Stage1Trainer::<f32>::new(&cfg.emg, cfg.emg_train.clone())?;
    let (train_u, val_u) = match args.overfit {
        Some(0) => return Err(CliError::Config("--overfit needs at least one item".into())),
        Some(n) => {
            let mut u = utterances_of(&dir, Split::Train)?;
            u.truncate(n);
            (u.clone(), u)
        }
        None => (
            utterances_of(&dir, Split::Train)?,
            utterances_of(&dir, Split::Val)?,
        ),
    };
    let prep = |us: &[Utterance]| {
        us.iter()
            .map(|u| trainer.prepare(u))
            .collect::<Result<Vec<_>, _>>()
    };
    let train = prep(&train_u)?;
    let val = prep(&val_u)?;
    println!(
        "stage 1: {} parameters, {} training and {} validation utterances",
        trainer.model.num_params(),
        train.len(),
        val.len()
    );
    let mut log = create_log(&args.log, "step,l_su,l_p,l_total,accuracy,dec_loss")?;
    let mut io_err = None;
    let t0 = Instant::now();
    let report = trainer.run(&train, &val, |s| {
        if let Some(w) = log.as_mut() {
            let e = s.encoder;
            let r = writeln!(
                w,
                "{},{},{},{},{},{}",
                s.step,
                opt_cell(e.map(|e| e.su)),
                opt_cell(e.map(|e| e.phoneme)),
                opt_cell(e.map(|e| e.total)),
                opt_cell(e.map(|e| e.accuracy)),
                opt_cell(s.decoder)
            );
            if let Err(err) = r {
                io_err.get_or_insert(err);
            }
        }
        if s.step % 100 == 0 {
            if let Some(e) = s.encoder {
                log::info!(
                    "step {}: L_total {:.4}, accuracy {:.3}",
                    s.step,
                    e.total,
                    e.accuracy
                );
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    let ck = trainer.model.checkpoint();
    ck.save(&args.out)?;
    println!(
        "saved {} (best encoder step {}, best decoder step {}, {:.1}s)",
        args.out.display(),
        report.best_encoder_step,
        report.best_decoder_step,
        t0.elapsed().as_secs_f64()
    );
    Ok(ck)
}

/// Pads with zeros or trims `wave` to `len` samples.
pub fn fit_length(wave: &Waveform, len: usize) -> Result<Waveform, CliError> {
    let mut s = wave.samples().to_vec();
    s.resize(len, 0.0);
    Ok(Waveform::new(s, wave.sample_rate())?)
}

fn load_stage1(path: &Path) -> Result<Stage1Model<f64>, CliError> {
    Ok(Stage1Model::<f64>::from_checkpoint(&Checkpoint::load(
        path,
    )?)?)
}

/// Computes auxiliary speech per utterance id, reusing earlier results.
struct AuxCache {
    stage1: Option<Stage1Model<f64>>,
    oracle: bool,
    cache: HashMap<String, Waveform>,
}

impl AuxCache {
    fn new(src: &Option<AuxSource>) -> Result<Self, CliError> {
        Ok(Self {
            stage1: match src {
                Some(AuxSource::Stage1(p)) => Some(load_stage1(p)?),
                _ => None,
            },
            oracle: matches!(src, Some(AuxSource::Oracle)),
            cache: HashMap::new(),
        })
    }

    fn enabled(&self) -> bool {
        self.oracle || self.stage1.is_some()
    }

    fn get(&mut self, u: &Utterance, len: usize) -> Result<Option<Waveform>, CliError> {
        if self.oracle {
            return Ok(Some(fit_length(&u.clean, len)?));
        }
        let Some(model) = &self.stage1 else {
            return Ok(None);
        };
        if !self.cache.contains_key(&u.id) {
            let w = model.emg_to_speech(&u.emg)?;
            self.cache.insert(u.id.clone(), w);
        }
        Ok(Some(fit_length(&self.cache[&u.id], len)?))
    }
}

fn se_examples(
    dir: &CorpusDir,
    entries: &[ManifestEntry],
    aux: &mut AuxCache,
) -> Result<Vec<SeExample>, CliError> {
    entries
        .iter()
        .map(|e| {
            let (u, noisy) = dir.mixture(e)?;
            let aux = aux.get(&u, noisy.len())?.map(Waveform::into_samples);
            Ok(SeExample {
                noisy: noisy.into_samples(),
                clean: u.clean.into_samples(),
                aux,
            })
        })
        .collect()
}

fn check_aux(cfg: &SeConfig, aux: &Option<AuxSource>) -> Result<(), CliError> {
    if cfg.multimodal && aux.is_none() {
        return Err(CliError::Config(
            "a multimodal network needs --stage1 CHECKPOINT or --oracle".into(),
        ));
    }
    Ok(())
}

pub fn cmd_train_se(cfg: &RunConfig, args: &TrainSeArgs) -> Result<SeTrainReport, CliError> {
    check_aux(&cfg.se, &args.aux)?;
    let aux_src = if cfg.se.multimodal {
        args.aux.clone()
    } else {
        None
    };
    let dir = CorpusDir::open(&args.corpus)?;
    let mut trainer = SeTrainer::<f32>::new(&cfg.se, cfg.se_train.clone())?;
    let counted = trainer.store.num_scalars();
    let closed = cfg.se.param_count();
    println!("stage 2: {counted} parameters (closed form {closed})");
    if counted != closed {
        return Err(CliError::Numeric(format!(
            "parameter count {counted} disagrees with the closed form {closed}"
        )));
    }
    let mut aux = AuxCache::new(&aux_src)?;
    let t0 = Instant::now();
    let (train_e, val_e): (Vec<_>, Vec<_>) = match args.overfit {
        Some(0) => return Err(CliError::Config("--overfit needs at least one item".into())),
        Some(n) => {
            let e: Vec<_> = dir
                .manifest(Split::Train)
                .entries
                .iter()
                .take(n)
                .cloned()
                .collect();
            (e.clone(), e)
        }
        None => (
            dir.manifest(Split::Train).entries.clone(),
            dir.manifest(Split::Val).entries.clone(),
        ),
    };
    let train = se_examples(&dir, &train_e, &mut aux)?;
    let val = se_examples(&dir, &val_e, &mut aux)?;
    log::info!(
        "prepared {} training and {} validation mixtures in {:.1}s",
        train.len(),
        val.len(),
        t0.elapsed().as_secs_f64()
    );
    let mut log = create_log(&args.log, "step,total,time,mag,complex,phase,grad_norm")?;
    let mut io_err = None;
    let report = trainer.run(&train, &val, |s| {
        let l = &s.loss;
        if let Some(w) = log.as_mut() {
            let r = writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.step, l.total, l.time, l.mag, l.complex, l.phase, s.grad_norm
            );
            if let Err(err) = r {
                io_err.get_or_insert(err);
            }
        }
        if s.step % 50 == 0 {
            log::info!("step {}: loss {:.4}", s.step, l.total);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    let enhancer = Enhancer::new(trainer.net.clone(), trainer.store.clone())?;
    enhancer.checkpoint().save(&args.out)?;
    println!(
        "saved {} (best step {}, validation loss {}, {:.1}s)",
        args.out.display(),
        report.best_step,
        report.best_val.map_or("n/a".into(), |v| format!("{v:.5}")),
        t0.elapsed().as_secs_f64()
    );
    Ok(report)
}

pub fn cmd_enhance(args: &EnhanceArgs) -> Result<Option<EnhanceScores>, CliError> {
    let enhancer = Enhancer::<f64>::from_checkpoint(&Checkpoint::load(&args.checkpoint)?)?;
    let noisy = read_wav(&args.noisy)?;
    let aux = if enhancer.config().multimodal && !args.pass_through {
        match (&args.emg, &args.stage1, &args.aux) {
            (Some(e), Some(s), _) => {
                let w = load_stage1(s)?.emg_to_speech(&EmgRecording::load(e)?)?;
                Some(fit_length(&w, noisy.len())?)
            }
            (None, _, Some(a)) => Some(fit_length(&read_wav(a)?, noisy.len())?),
            _ => {
                return Err(CliError::Config(
                    "a multimodal checkpoint needs --emg with --stage1, or --aux".into(),
                ))
            }
        }
    } else {
        None
    };
    let opts = ForwardOptions {
        pass_through: args.pass_through,
    };
    let out = enhancer.enhance(&noisy, aux.as_ref(), opts)?;
    write_wav(&args.out, &out)?;
    println!("wrote {}", args.out.display());
    let Some(c) = &args.clean else {
        return Ok(None);
    };
    let clean = read_wav(c)?;
    let scores = EnhanceScores {
        stoi_noisy: stoi(&clean, &noisy)?,
        stoi_enhanced: stoi(&clean, &out)?,
        sisdr_noisy: si_sdr(&clean, &noisy)?,
        sisdr_enhanced: si_sdr(&clean, &out)?,
    };
    println!(
        "STOI {:.4} -> {:.4}, SI-SDR {:.2} dB -> {:.2} dB",
        scores.stoi_noisy, scores.stoi_enhanced, scores.sisdr_noisy, scores.sisdr_enhanced
    );
    Ok(Some(scores))
}

struct LoadedSystem {
    name: String,
    enhancer: Enhancer<f32>,
}

/// Scores one test mixture for the noisy baseline and every system.
fn score_entry(
    dir: &CorpusDir,
    entry: &ManifestEntry,
    aux: Option<&Waveform>,
    systems: &[LoadedSystem],
) -> Result<Vec<ItemResult>, CliError> {
    let (u, noisy) = dir.mixture(entry)?;
    let condition = entry
        .split
        .condition()
        .unwrap_or(entry.split.name())
        .to_string();
    let mut out = Vec::with_capacity(2 * (systems.len() + 1));
    let mut push = |system: &str, est: &Waveform| -> Result<(), CliError> {
        for (metric, value) in [
            (Metric::Stoi, stoi(&u.clean, est)?),
            (Metric::SiSdr, si_sdr(&u.clean, est)?),
        ] {
            out.push(ItemResult {
                condition: condition.clone(),
                noise_kind: entry.kind.name().to_string(),
                snr_db: entry.snr_db,
                system: system.to_string(),
                metric,
                value,
            });
        }
        Ok(())
    };
    push("noisy", &noisy)?;
    for s in systems {
        let a = if s.enhancer.config().multimodal {
            aux
        } else {
            None
        };
        let y = s.enhancer.enhance(&noisy, a, ForwardOptions::default())?;
        push(&s.name, &y)?;
    }
    Ok(out)
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<MetricReport, CliError> {
    let dir = CorpusDir::open(&args.corpus)?;
    let mut systems = Vec::with_capacity(args.systems.len());
    for s in &args.systems {
        if systems.iter().any(|l: &LoadedSystem| l.name == s.name) {
            return Err(CliError::Config(format!("system `{}` given twice", s.name)));
        }
        let enhancer = Enhancer::<f32>::from_checkpoint(&Checkpoint::load(&s.checkpoint)?)?;
        check_aux(enhancer.config(), &args.aux)?;
        systems.push(LoadedSystem {
            name: s.name.clone(),
            enhancer,
        });
    }
    let needs_aux = systems.iter().any(|s| s.enhancer.config().multimodal);
    let mut aux = AuxCache::new(if needs_aux { &args.aux } else { &None })?;
    let entries: Vec<ManifestEntry> = [Split::TestMatched, Split::TestMismatched]
        .iter()
        .flat_map(|&s| dir.manifest(s).entries.iter().cloned())
        .collect();
    let t0 = Instant::now();
    // Stage-1 output is computed once per utterance, up front and in order.
    let mut aux_waves = HashMap::new();
    if aux.enabled() {
        for e in &entries {
            if !aux_waves.contains_key(&e.id) {
                let u = dir.utterance(&e.id)?;
                let w = aux.get(&u, u.clean.len())?;
                aux_waves.insert(e.id.clone(), w);
            }
        }
    }
    let threads = cfg.eval_threads().min(entries.len()).max(1);
    let chunk = entries.len().div_ceil(threads);
    let results: Vec<Result<Vec<ItemResult>, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = entries
            .chunks(chunk.max(1))
            .map(|part| {
                let (dir, systems, aux_waves) = (&dir, &systems, &aux_waves);
                scope.spawn(move || -> Result<Vec<ItemResult>, CliError> {
                    let mut out = Vec::new();
                    for e in part {
                        let a = aux_waves
                            .get(&e.id)
                            .and_then(|w: &Option<Waveform>| w.as_ref());
                        out.extend(score_entry(dir, e, a, systems)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(CliError::Numeric("evaluation worker panicked".into())))
            })
            .collect()
    });
    let mut items = Vec::new();
    for r in results {
        items.extend(r?);
    }
    let report = aggregate_report(&items)?;
    report.write_csv(&args.out)?;
    for row in report
        .rows
        .iter()
        .filter(|r| r.noise_kind == crate::metrics::ALL_KINDS)
    {
        println!(
            "{:<10} {:>5} {:<12} {:<6} {:>8.4} (n={})",
            row.condition,
            row.snr.to_string(),
            row.system,
            row.metric.name(),
            row.mean,
            row.count
        );
    }
    println!(
        "scored {} mixtures with {} system(s) in {:.1}s; report at {}",
        entries.len(),
        systems.len(),
        t0.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(report)
}

pub fn cmd_selfcheck(inject_fault: bool) -> Result<Vec<CheckResult>, CliError> {
    let results = run_all(SelfCheckOptions { inject_fault });
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        return Err(CliError::CheckFailed(failed));
    }
    Ok(results)
}
