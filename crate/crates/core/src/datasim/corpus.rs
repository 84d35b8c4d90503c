use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mix::{scale_to_snr, sum_sources, truncate_align, MissingPolicy, MixtureSample};
use super::synth::{synth_source, Speaker, SynthConfig};
use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::separator::CuePresence;
use crate::visual::{LipSequence, PoseSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Per-split counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Speakers per mixture, target included.
    pub num_speakers: usize,
    pub snr_range: [f64; 2],
    pub counts: SplitCounts,
    /// Size of each split's speaker pool. Pools never overlap.
    pub speakers: SplitCounts,
    /// Source duration range in seconds.
    pub duration: [f64; 2],
    pub seed: u64,
    #[serde(default)]
    pub missing: MissingPolicy,
    #[serde(default)]
    pub synth: SynthConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_speakers: 2,
            snr_range: [-10.0, 10.0],
            counts: SplitCounts { train: 2000, val: 200, test: 200 },
            speakers: SplitCounts { train: 100, val: 20, test: 20 },
            duration: [2.0, 6.0],
            seed: 0,
            missing: MissingPolicy::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.num_speakers) {
            return Err(Error::Config(format!("num_speakers must be 2 or 3, got {}", self.num_speakers)));
        }
        if !(self.snr_range[0] <= self.snr_range[1]) {
            return Err(Error::Config(format!("snr_range {:?} is not ordered", self.snr_range)));
        }
        if !(self.duration[0] > 0.0 && self.duration[0] <= self.duration[1]) {
            return Err(Error::Config(format!("duration {:?} must be positive and ordered", self.duration)));
        }
        for split in Split::ALL {
            if self.counts.get(split) > 0 && self.speakers.get(split) < self.num_speakers {
                return Err(Error::Config(format!(
                    "{split} pool of {} speakers cannot fill {}-speaker mixtures",
                    self.speakers.get(split),
                    self.num_speakers
                )));
            }
        }
        self.missing.validate()?;
        self.synth.validate()
    }
}

/// Deterministic seed for stream `index` of `split` under `corpus_seed`.
pub fn derive_seed(corpus_seed: u64, split: Split, index: u64) -> u64 {
    let mut z = corpus_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split.code() << 56)
        .wrapping_add(index);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SPEAKER_STREAM: u64 = 1 << 40;

/// The speaker pool of one split.
pub fn speaker_pool(cfg: &SimConfig, split: Split) -> Vec<Speaker> {
    (0..cfg.speakers.get(split))
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, split, SPEAKER_STREAM + i as u64));
            Speaker::sample(format!("{split}-spk{i:03}"), &mut rng, &cfg.synth)
        })
        .collect()
}

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{split}-{index:06}")
}

/// Simulates sample `index` of `split`; the result depends only on the config and the index.
pub fn simulate_sample(cfg: &SimConfig, pool: &[Speaker], split: Split, index: usize) -> Result<MixtureSample> {
    let seed = derive_seed(cfg.seed, split, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample_indices(&mut rng, pool.len(), cfg.num_speakers).into_vec();
    let sr = SAMPLE_RATE as f64;
    // Truncating to the shortest source can leave a speaker with only a pause; such
    // draws are redone with the same stream so unaffected samples stay unchanged.
    let mut attempts = 0;
    let (waves, lip, gesture) = loop {
        let mut clips = Vec::with_capacity(chosen.len());
        for &s in &chosen {
            let secs = rng.random_range(cfg.duration[0]..=cfg.duration[1]);
            let samples = ((secs * sr).round() as usize).max(1);
            clips.push(synth_source(&mut rng, &pool[s], samples, &cfg.synth)?);
        }
        let target_clip = clips[0].clone();
        let waves = clips.into_iter().map(|c| c.speech).collect();
        let aligned = truncate_align(waves, target_clip.lips, target_clip.poses)?;
        attempts += 1;
        if aligned.0.iter().all(|w| w.energy() > 0.0) || attempts == MAX_SOURCE_DRAWS {
            break aligned;
        }
    };
    let mut waves = waves.into_iter();
    let target = waves.next().expect("target wave");
    let mut interferers = Vec::new();
    let mut snr_db = Vec::new();
    for b in waves {
        let snr = rng.random_range(cfg.snr_range[0]..=cfg.snr_range[1]);
        let (scaled, _) = scale_to_snr(&target, &b, snr)?;
        interferers.push(scaled);
        snr_db.push(snr);
    }
    let mixture = sum_sources(&target, &interferers)?;
    let presence = cfg.missing.draw(&mut rng);
    Ok(MixtureSample {
        id: sample_id(split, index),
        split: split.to_string(),
        mixture,
        target,
        interferers,
        lip: presence.has_lip.then_some(lip),
        gesture: presence.has_gesture.then_some(gesture),
        presence,
        snr_db,
        seed,
        target_speaker: pool[chosen[0]].id.clone(),
        interferer_speakers: chosen[1..].iter().map(|&s| pool[s].id.clone()).collect(),
    })
}

const MAX_SOURCE_DRAWS: usize = 16;

/// All samples of one split, held in memory.
pub fn generate_split(cfg: &SimConfig, split: Split) -> Result<Vec<MixtureSample>> {
    cfg.validate()?;
    let pool = speaker_pool(cfg, split);
    (0..cfg.counts.get(split))
        .into_par_iter()
        .map(|i| simulate_sample(cfg, &pool, split, i))
        .collect()
}

/// One line of the corpus manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub mixture_path: String,
    pub target_path: String,
    pub interferer_paths: Vec<String>,
    pub lip_path: Option<String>,
    pub gesture_path: Option<String>,
    pub snr_db: Vec<f64>,
    pub seed: u64,
    pub target_speaker: String,
    pub interferer_speakers: Vec<String>,
}

impl ManifestEntry {
    pub fn presence(&self) -> CuePresence {
        CuePresence { has_lip: self.lip_path.is_some(), has_gesture: self.gesture_path.is_some() }
    }
}

/// A corpus on disk.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))?;
            entries.push(entry);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn find(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Reads every file of `entry` back into a sample.
    pub fn load(&self, entry: &ManifestEntry) -> Result<MixtureSample> {
        let wav = |rel: &str| Waveform::read_wav(self.resolve(rel));
        let lip = entry.lip_path.as_deref().map(|p| LipSequence::read(self.resolve(p))).transpose()?;
        let gesture = entry.gesture_path.as_deref().map(|p| PoseSequence::read_json(self.resolve(p))).transpose()?;
        Ok(MixtureSample {
            id: entry.id.clone(),
            split: entry.split.to_string(),
            mixture: wav(&entry.mixture_path)?,
            target: wav(&entry.target_path)?,
            interferers: entry.interferer_paths.iter().map(|p| wav(p)).collect::<Result<_>>()?,
            lip,
            gesture,
            presence: entry.presence(),
            snr_db: entry.snr_db.clone(),
            seed: entry.seed,
            target_speaker: entry.target_speaker.clone(),
            interferer_speakers: entry.interferer_speakers.clone(),
        })
    }
}

/// Writes one sample's files under `root` and returns its manifest line.
pub fn write_sample(root: &Path, sample: &MixtureSample) -> Result<ManifestEntry> {
    let rel_dir = format!("{}/{}", sample.split, sample.id);
    let dir = root.join(&rel_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rel = |name: &str| format!("{rel_dir}/{name}");
    sample.mixture.write_wav(root.join(rel("mixture.wav")))?;
    sample.target.write_wav(root.join(rel("target.wav")))?;
    let mut interferer_paths = Vec::new();
    for (k, b) in sample.interferers.iter().enumerate() {
        let p = rel(&format!("interferer{k}.wav"));
        b.write_wav(root.join(&p))?;
        interferer_paths.push(p);
    }
    let lip_path = match &sample.lip {
        Some(l) => {
            let p = rel("lip.bin");
            l.write(root.join(&p))?;
            Some(p)
        }
        None => None,
    };
    let gesture_path = match &sample.gesture {
        Some(g) => {
            let p = rel("pose.json");
            g.write_json(root.join(&p))?;
            Some(p)
        }
        None => None,
    };
    Ok(ManifestEntry {
        id: sample.id.clone(),
        split: sample.split.parse()?,
        mixture_path: rel("mixture.wav"),
        target_path: rel("target.wav"),
        interferer_paths,
        lip_path,
        gesture_path,
        snr_db: sample.snr_db.clone(),
        seed: sample.seed,
        target_speaker: sample.target_speaker.clone(),
        interferer_speakers: sample.interferer_speakers.clone(),
    })
}

/// Counts and missing-cue fractions of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub lip_missing: f64,
    pub gesture_missing: f64,
    /// Fraction of gesture drops among samples that kept the lip cue.
    pub gesture_missing_given_lip: f64,
}

impl CorpusSummary {
    pub fn of(entries: &[ManifestEntry]) -> Self {
        let n = entries.len().max(1) as f64;
        let lip_missing = entries.iter().filter(|e| e.lip_path.is_none()).count();
        let gesture_missing = entries.iter().filter(|e| e.gesture_path.is_none()).count();
        let with_lip = entries.len() - lip_missing;
        Self {
            train: entries.iter().filter(|e| e.split == Split::Train).count(),
            val: entries.iter().filter(|e| e.split == Split::Val).count(),
            test: entries.iter().filter(|e| e.split == Split::Test).count(),
            lip_missing: lip_missing as f64 / n,
            gesture_missing: gesture_missing as f64 / n,
            gesture_missing_given_lip: gesture_missing as f64 / with_lip.max(1) as f64,
        }
    }
}

/// Simulates every split, writes all files under `root` and a manifest sorted by id.
pub fn build_corpus(cfg: &SimConfig, root: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::new();
    for split in Split::ALL {
        let pool = speaker_pool(cfg, split);
        let part: Vec<ManifestEntry> = (0..cfg.counts.get(split))
            .into_par_iter()
            .map(|i| write_sample(root, &simulate_sample(cfg, &pool, split, i)?))
            .collect::<Result<_>>()?;
        entries.extend(part);
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let path = root.join(MANIFEST_FILE);
    let mut out = Vec::new();
    for e in &entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(&out).map_err(|e| Error::io(&path, e))?;
    let cfg_path = root.join("corpus.json");
    fs::write(&cfg_path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(Manifest { root: root.to_path_buf(), entries })
}
