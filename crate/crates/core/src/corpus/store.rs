use super::noise::synth_noise;
use super::splits::{
    make_splits, CorpusConfig, ManifestEntry, Split, SplitManifest, SplitSet, UtteranceSpec,
};
use super::synth::{synth_utterance, Utterance, FRAME_RATE, PHONEMES};
use super::{mix_at_snr, CorpusError, Result};
use crate::dsp::{read_wav, write_wav, Waveform};
use crate::emg::{EmgRecording, PhonemeSeq};
use crate::kv::KvMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Renders the clean utterance described by `spec`.
pub fn generate_utterance(spec: &UtteranceSpec) -> Result<Utterance> {
    let mut u = synth_utterance(spec.seed, spec.frames as f64 / FRAME_RATE)?;
    u.id = spec.id.clone();
    Ok(u)
}

/// Mixes `clean` with the noise realisation named by `entry`.
pub fn make_mixture(clean: &Waveform, entry: &ManifestEntry) -> Result<Waveform> {
    let noise = synth_noise(entry.kind, entry.seed, clean.len())?;
    Ok(mix_at_snr(clean, &noise, entry.snr_db)?.0)
}

/// What [`CorpusDir::create`] wrote.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSummary {
    pub utterances: usize,
    pub train: usize,
    pub val: usize,
    pub matched: usize,
    pub mismatched: usize,
    pub noisy_files: usize,
}

/// On-disk corpus: `clean/`, `emg/`, `phonemes/`, `manifests/` and
/// `config.txt`, plus `noisy/` when requested.
#[derive(Clone, Debug)]
pub struct CorpusDir {
    root: PathBuf,
    config: CorpusConfig,
    splits: SplitSet,
}

fn manifest_file(split: Split) -> String {
    format!("{}.tsv", split.name())
}

impl CorpusDir {
    /// Synthesises the corpus described by `cfg` under `root`.
    pub fn create(
        root: impl AsRef<Path>,
        cfg: &CorpusConfig,
        write_noisy: bool,
    ) -> Result<(Self, CorpusSummary)> {
        let root = root.as_ref().to_path_buf();
        let splits = make_splits(cfg)?;
        for d in ["clean", "emg", "phonemes", "manifests"] {
            fs::create_dir_all(root.join(d))?;
        }
        fs::write(root.join("config.txt"), cfg.to_kv().to_text())?;
        for split in Split::ALL {
            fs::write(
                root.join("manifests").join(manifest_file(split)),
                splits.manifest(split).to_tsv(),
            )?;
        }
        let dir = Self {
            root,
            config: cfg.clone(),
            splits,
        };
        for spec in &dir.splits.utterances {
            let u = generate_utterance(spec)?;
            write_wav(dir.clean_path(&u.id), &u.clean)?;
            u.emg
                .save(dir.root.join("emg").join(format!("{}.emg8", u.id)))?;
            fs::write(
                dir.root.join("phonemes").join(format!("{}.txt", u.id)),
                u.phonemes.to_text(),
            )?;
        }
        let mut noisy_files = 0;
        if write_noisy {
            fs::create_dir_all(dir.root.join("noisy"))?;
            for split in Split::ALL {
                for e in &dir.splits.manifest(split).entries {
                    let clean = read_wav(dir.clean_path(&e.id))?;
                    let noisy = make_mixture(&clean, e)?;
                    write_wav(
                        dir.root
                            .join("noisy")
                            .join(format!("{}.wav", e.mixture_name())),
                        &noisy,
                    )?;
                    noisy_files += 1;
                }
            }
        }
        let s = &dir.splits;
        let summary = CorpusSummary {
            utterances: s.utterances.len(),
            train: s.train.len(),
            val: s.val.len(),
            matched: s.matched.len(),
            mismatched: s.mismatched.len(),
            noisy_files,
        };
        Ok((dir, summary))
    }

    /// Opens a corpus written by [`CorpusDir::create`].
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let text = fs::read_to_string(root.join("config.txt"))?;
        let kv = KvMap::parse(&text).map_err(|e| CorpusError::Config(e.to_string()))?;
        let config = CorpusConfig::from_kv(&kv)?;
        let mut splits = make_splits(&config)?;
        // Manifests on disk win, so edited manifests are honoured.
        for split in Split::ALL {
            let path = root.join("manifests").join(manifest_file(split));
            let m = SplitManifest::from_tsv(&fs::read_to_string(&path)?)?;
            if let Some(e) = m.entries.iter().find(|e| e.split != split) {
                return Err(CorpusError::Manifest(format!(
                    "{} lists `{}` under split {}",
                    path.display(),
                    e.id,
                    e.split.name()
                )));
            }
            match split {
                Split::Train => splits.train = m,
                Split::Val => splits.val = m,
                Split::TestMatched => splits.matched = m,
                Split::TestMismatched => splits.mismatched = m,
            }
        }
        Ok(Self {
            root,
            config,
            splits,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.config
    }

    pub fn splits(&self) -> &SplitSet {
        &self.splits
    }

    pub fn manifest(&self, split: Split) -> &SplitManifest {
        self.splits.manifest(split)
    }

    fn clean_path(&self, id: &str) -> PathBuf {
        self.root.join("clean").join(format!("{id}.wav"))
    }

    /// Loads the stored clean speech, EMG and phoneme labels of `id`.
    pub fn utterance(&self, id: &str) -> Result<Utterance> {
        let clean = read_wav(self.clean_path(id))?;
        let emg = EmgRecording::load(self.root.join("emg").join(format!("{id}.emg8")))?;
        let text = fs::read_to_string(self.root.join("phonemes").join(format!("{id}.txt")))?;
        let phonemes = PhonemeSeq::from_text(&text, PHONEMES)?;
        Ok(Utterance {
            id: id.to_string(),
            clean,
            emg,
            phonemes,
        })
    }

    /// Stored utterance plus its noisy mixture for `entry`.
    pub fn mixture(&self, entry: &ManifestEntry) -> Result<(Utterance, Waveform)> {
        let u = self.utterance(&entry.id)?;
        let noisy = make_mixture(&u.clean, entry)?;
        Ok((u, noisy))
    }
}
