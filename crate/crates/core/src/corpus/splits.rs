use super::noise::NoiseKind;
use super::{derive_seed, CorpusError, Result};
use crate::kv::KvMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    TestMatched,
    TestMismatched,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::Val,
        Split::TestMatched,
        Split::TestMismatched,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestMatched => "test-matched",
            Split::TestMismatched => "test-mismatched",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CorpusError::Manifest(format!("unknown split `{s}`")))
    }

    /// Evaluation condition of a test split.
    pub fn condition(self) -> Option<&'static str> {
        match self {
            Split::TestMatched => Some("matched"),
            Split::TestMismatched => Some("mismatched"),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub master_seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Utterance durations are drawn on the 20 ms grid in this range.
    pub min_secs: f64,
    pub max_secs: f64,
    pub train_kinds: Vec<NoiseKind>,
    pub mismatched_kinds: Vec<NoiseKind>,
    pub train_snrs: Vec<f64>,
    pub matched_snrs: Vec<f64>,
    pub mismatched_snrs: Vec<f64>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        use NoiseKind::*;
        Self {
            master_seed: 20240,
            train: 64,
            val: 8,
            test: 8,
            min_secs: 1.5,
            max_secs: 2.5,
            train_kinds: vec![White, Pink, Engine, Street, BabbleA],
            mismatched_kinds: vec![Brown, BabbleB, Hum, Siren, Car, Rain, Fan],
            train_snrs: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            matched_snrs: vec![-10.0, -5.0, 0.0, 5.0],
            mismatched_snrs: vec![-11.0, -6.0, -1.0, 4.0],
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_kinds(s: &str) -> Result<Vec<NoiseKind>> {
    s.split_whitespace().map(NoiseKind::parse).collect()
}

fn parse_snrs(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|v| {
            v.parse()
                .map_err(|_| CorpusError::Config(format!("bad SNR `{v}`")))
        })
        .collect()
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.test == 0 {
            return Err(CorpusError::Config(
                "train and test counts must be positive".into(),
            ));
        }
        if !(self.min_secs >= 0.1 && self.max_secs >= self.min_secs) {
            return Err(CorpusError::Config(format!(
                "duration range {}..{} s is invalid",
                self.min_secs, self.max_secs
            )));
        }
        if self.train_kinds.is_empty() || self.mismatched_kinds.is_empty() {
            return Err(CorpusError::Config(
                "noise kind lists must be non-empty".into(),
            ));
        }
        let train: BTreeSet<_> = self.train_kinds.iter().collect();
        if let Some(k) = self.mismatched_kinds.iter().find(|k| train.contains(k)) {
            return Err(CorpusError::Config(format!(
                "noise kind `{}` is in both the train and the mismatched set",
                k.name()
            )));
        }
        let snrs = [&self.train_snrs, &self.matched_snrs, &self.mismatched_snrs];
        if snrs
            .iter()
            .any(|s| s.is_empty() || s.iter().any(|v| !v.is_finite()))
        {
            return Err(CorpusError::Config(
                "SNR grids must be non-empty and finite".into(),
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("corpus.master_seed", self.master_seed);
        kv.set("corpus.train", self.train);
        kv.set("corpus.val", self.val);
        kv.set("corpus.test", self.test);
        kv.set("corpus.min_secs", self.min_secs);
        kv.set("corpus.max_secs", self.max_secs);
        kv.set(
            "corpus.train_kinds",
            list(
                &self
                    .train_kinds
                    .iter()
                    .map(|k| k.name())
                    .collect::<Vec<_>>(),
            ),
        );
        kv.set(
            "corpus.mismatched_kinds",
            list(
                &self
                    .mismatched_kinds
                    .iter()
                    .map(|k| k.name())
                    .collect::<Vec<_>>(),
            ),
        );
        kv.set("corpus.train_snrs", list(&self.train_snrs));
        kv.set("corpus.matched_snrs", list(&self.matched_snrs));
        kv.set("corpus.mismatched_snrs", list(&self.mismatched_snrs));
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let e = |err: crate::kv::KvError| CorpusError::Config(err.to_string());
        let kinds = |key: &str, dflt: &[NoiseKind]| match kv.get_str(key) {
            Some(s) => parse_kinds(s),
            None => Ok(dflt.to_vec()),
        };
        let snrs = |key: &str, dflt: &[f64]| match kv.get_str(key) {
            Some(s) => parse_snrs(s),
            None => Ok(dflt.to_vec()),
        };
        let cfg = Self {
            master_seed: kv.get_or("corpus.master_seed", d.master_seed).map_err(e)?,
            train: kv.get_or("corpus.train", d.train).map_err(e)?,
            val: kv.get_or("corpus.val", d.val).map_err(e)?,
            test: kv.get_or("corpus.test", d.test).map_err(e)?,
            min_secs: kv.get_or("corpus.min_secs", d.min_secs).map_err(e)?,
            max_secs: kv.get_or("corpus.max_secs", d.max_secs).map_err(e)?,
            train_kinds: kinds("corpus.train_kinds", &d.train_kinds)?,
            mismatched_kinds: kinds("corpus.mismatched_kinds", &d.mismatched_kinds)?,
            train_snrs: snrs("corpus.train_snrs", &d.train_snrs)?,
            matched_snrs: snrs("corpus.matched_snrs", &d.matched_snrs)?,
            mismatched_snrs: snrs("corpus.mismatched_snrs", &d.mismatched_snrs)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One clean utterance to synthesise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceSpec {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    /// Length in 50 Hz frames.
    pub frames: usize,
}

/// One (utterance, noise, SNR) mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub kind: NoiseKind,
    pub snr_db: f64,
    pub seed: u64,
}

impl ManifestEntry {
    /// Stable file stem of the mixture.
    pub fn mixture_name(&self) -> String {
        format!("{}_{}_{}", self.id, self.kind.name(), self.snr_db)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitManifest {
    pub entries: Vec<ManifestEntry>,
}

const TSV_HEADER: &str = "# id\tsplit\tnoise_kind\tsnr_db\tseed";

impl SplitManifest {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{TSV_HEADER}\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.split.name(),
                e.kind.name(),
                e.snr_db,
                e.seed
            ));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                let bad = || CorpusError::Manifest(format!("bad line `{l}`"));
                if f.len() != 5 {
                    return Err(bad());
                }
                Ok(ManifestEntry {
                    id: f[0].to_string(),
                    split: Split::parse(f[1])?,
                    kind: NoiseKind::parse(f[2]).map_err(|_| bad())?,
                    snr_db: f[3].parse().map_err(|_| bad())?,
                    seed: f[4].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Utterance list plus one manifest per split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSet {
    pub utterances: Vec<UtteranceSpec>,
    pub train: SplitManifest,
    pub val: SplitManifest,
    pub matched: SplitManifest,
    pub mismatched: SplitManifest,
}

impl SplitSet {
    pub fn manifest(&self, split: Split) -> &SplitManifest {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TestMatched => &self.matched,
            Split::TestMismatched => &self.mismatched,
        }
    }
}

fn entry(master: u64, id: &str, split: Split, kind: NoiseKind, snr: f64) -> ManifestEntry {
    ManifestEntry {
        id: id.to_string(),
        split,
        kind,
        snr_db: snr,
        seed: derive_seed(master, &["mix", id, kind.name(), &snr.to_string()]),
    }
}

/// Builds utterance specs and the four manifests.
///
/// Each training utterance is mixed once per training SNR, with the noise
/// kinds assigned to the SNRs by a random permutation. Validation items get
/// one random (kind, SNR). Test utterances fill the full kind × SNR grid of
/// both conditions.
pub fn make_splits(cfg: &CorpusConfig) -> Result<SplitSet> {
    cfg.validate()?;
    let m = cfg.master_seed;
    let (lo, hi) = (
        (cfg.min_secs * 50.0).round() as usize,
        (cfg.max_secs * 50.0).round() as usize,
    );
    let mut utterances = Vec::new();
    for (split, prefix, count) in [
        (Split::Train, "tr", cfg.train),
        (Split::Val, "va", cfg.val),
        (Split::TestMatched, "te", cfg.test),
    ] {
        for i in 0..count {
            let id = format!("{prefix}{i:04}");
            let seed = derive_seed(m, &["utt", &id]);
            let frames = ChaCha8Rng::seed_from_u64(seed ^ 0xd0_0000).random_range(lo..=hi);
            utterances.push(UtteranceSpec {
                id,
                split,
                seed,
                frames,
            });
        }
    }
    let mut set = SplitSet {
        utterances: utterances.clone(),
        train: SplitManifest::default(),
        val: SplitManifest::default(),
        matched: SplitManifest::default(),
        mismatched: SplitManifest::default(),
    };
    for u in &utterances {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(m, &["assign", &u.id]));
        match u.split {
            Split::Train => {
                let mut kinds: Vec<NoiseKind> = (0..cfg.train_snrs.len())
                    .map(|i| cfg.train_kinds[i % cfg.train_kinds.len()])
                    .collect();
                kinds.shuffle(&mut r);
                for (&snr, kind) in cfg.train_snrs.iter().zip(kinds) {
                    set.train
                        .entries
                        .push(entry(m, &u.id, Split::Train, kind, snr));
                }
            }
            Split::Val => {
                let kind = cfg.train_kinds[r.random_range(0..cfg.train_kinds.len())];
                let snr = cfg.train_snrs[r.random_range(0..cfg.train_snrs.len())];
                set.val.entries.push(entry(m, &u.id, Split::Val, kind, snr));
            }
            _ => {
                for &kind in &cfg.train_kinds {
                    for &snr in &cfg.matched_snrs {
                        set.matched
                            .entries
                            .push(entry(m, &u.id, Split::TestMatched, kind, snr));
                    }
                }
                for &kind in &cfg.mismatched_kinds {
                    for &snr in &cfg.mismatched_snrs {
                        set.mismatched.entries.push(entry(
                            m,
                            &u.id,
                            Split::TestMismatched,
                            kind,
                            snr,
                        ));
                    }
                }
            }
        }
    }
    Ok(set)
}
