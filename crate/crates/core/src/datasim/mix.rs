use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::visual_frames;
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::separator::CuePresence;
use crate::visual::{LipSequence, PoseSequence};

/// How often cues are dropped from a mixture sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingPolicy {
    pub p_lip_missing: f64,
    /// Applied only to samples that kept their lip cue.
    pub p_gesture_missing_given_lip: f64,
}

impl Default for MissingPolicy {
    fn default() -> Self {
        Self { p_lip_missing: 0.25, p_gesture_missing_given_lip: 0.20 }
    }
}

impl MissingPolicy {
    /// Both cues always kept.
    pub const NONE: MissingPolicy = MissingPolicy { p_lip_missing: 0.0, p_gesture_missing_given_lip: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for p in [self.p_lip_missing, self.p_gesture_missing_given_lip] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("missing-cue probability {p} not in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Draws which cues survive. At most one cue is ever dropped.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> CuePresence {
        // Always consume two draws so later randomness does not depend on the outcome.
        let u_lip: f64 = rng.random();
        let u_gesture: f64 = rng.random();
        if u_lip < self.p_lip_missing {
            CuePresence { has_lip: false, has_gesture: true }
        } else if u_gesture < self.p_gesture_missing_given_lip {
            CuePresence { has_lip: true, has_gesture: false }
        } else {
            CuePresence::BOTH
        }
    }
}

/// One simulated mixture and everything needed to evaluate extraction on it.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub id: String,
    pub split: String,
    pub mixture: Waveform,
    pub target: Waveform,
    /// Interferers as they appear in the mixture, i.e. already scaled.
    pub interferers: Vec<Waveform>,
    pub lip: Option<LipSequence>,
    pub gesture: Option<PoseSequence>,
    pub presence: CuePresence,
    /// Target-to-interferer SNR per interferer.
    pub snr_db: Vec<f64>,
    pub seed: u64,
    pub target_speaker: String,
    pub interferer_speakers: Vec<String>,
}

impl MixtureSample {
    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    /// Audio crop `[start, start + len)` with the cues cut to the matching frames.
    /// `start` and `len` must fall on visual frame boundaries that are whole samples,
    /// i.e. multiples of 3200.
    pub fn crop(&self, start: usize, len: usize) -> Result<MixtureSample> {
        if !start.is_multiple_of(3200) || !len.is_multiple_of(3200) || start + len > self.len() {
            return Err(Error::invalid(format!(
                "crop [{start}, {}) of a {}-sample clip is not frame aligned",
                start + len,
                self.len()
            )));
        }
        let f0 = visual_frames(start);
        let nf = visual_frames(len);
        Ok(MixtureSample {
            mixture: self.mixture.slice(start, len),
            target: self.target.slice(start, len),
            interferers: self.interferers.iter().map(|w| w.slice(start, len)).collect(),
            lip: self.lip.as_ref().map(|l| l.slice(f0, nf)),
            gesture: self.gesture.as_ref().map(|g| g.slice(f0, nf)),
            ..self.clone()
        })
    }

    /// Shortens the clip to at most `samples` samples and the cues to match.
    pub fn truncated(&self, samples: usize) -> MixtureSample {
        if samples >= self.len() {
            return self.clone();
        }
        let nf = visual_frames(samples);
        MixtureSample {
            mixture: self.mixture.truncated(samples),
            target: self.target.truncated(samples),
            interferers: self.interferers.iter().map(|w| w.truncated(samples)).collect(),
            lip: self.lip.as_ref().map(|l| l.truncated(nf)),
            gesture: self.gesture.as_ref().map(|g| g.truncated(nf)),
            ..self.clone()
        }
    }
}

/// Scales `interferer` so the target-to-interferer power ratio is `snr_db`.
/// Returns the scaled interferer and the gain applied.
pub fn scale_to_snr(target: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<(Waveform, f64)> {
    if target.len() != interferer.len() {
        return Err(Error::invalid(format!(
            "mixing needs equal lengths, got {} and {}",
            target.len(),
            interferer.len()
        )));
    }
    let ps = target.energy();
    let pb = interferer.energy();
    if pb == 0.0 {
        return Err(Error::invalid("interferer is silent"));
    }
    if ps == 0.0 {
        return Err(Error::invalid("target is silent"));
    }
    let mut gain = (ps / (pb * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut scaled = scale(interferer, gain);
    // One correction pass absorbs the rounding of the f32 samples.
    let energy: f64 = scaled.iter().map(|&x| (x as f64) * (x as f64)).sum();
    let measured = 10.0 * (ps / energy).log10();
    gain *= 10f64.powf((measured - snr_db) / 20.0);
    scaled = scale(interferer, gain);
    Ok((Waveform::new(scaled)?, gain))
}

fn scale(w: &Waveform, gain: f64) -> Vec<f32> {
    w.samples().iter().map(|&x| (x as f64 * gain) as f32).collect()
}

/// Mixes one interferer at `snr_db`. Returns the mixture and the interferer gain.
pub fn mix_at_snr(target: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<(Waveform, f64)> {
    let (scaled, gain) = scale_to_snr(target, interferer, snr_db)?;
    Ok((sum_sources(target, std::slice::from_ref(&scaled))?, gain))
}

/// Sample-wise `target + sum(interferers)`, accumulated in that order in f32.
pub fn sum_sources(target: &Waveform, interferers: &[Waveform]) -> Result<Waveform> {
    let mut out = target.samples().to_vec();
    for b in interferers {
        if b.len() != out.len() {
            return Err(Error::invalid("sources differ in length"));
        }
        for (o, &x) in out.iter_mut().zip(b.samples()) {
            *o += x;
        }
    }
    Waveform::new(out)
}

/// SNR in dB of `target` against one scaled interferer.
pub fn measured_snr(target: &Waveform, scaled_interferer: &Waveform) -> f64 {
    10.0 * (target.energy() / scaled_interferer.energy()).log10()
}

/// Cuts every wave to the shortest length, and the target cues to the matching
/// number of 15 FPS frames.
pub fn truncate_align(
    waves: Vec<Waveform>,
    lip: LipSequence,
    gesture: PoseSequence,
) -> Result<(Vec<Waveform>, LipSequence, PoseSequence)> {
    if waves.len() < 2 {
        return Err(Error::invalid("alignment needs at least two waves"));
    }
    let len = waves.iter().map(Waveform::len).min().unwrap_or(0);
    let frames = visual_frames(len);
    let waves = waves.into_iter().map(|w| w.truncated(len)).collect();
    Ok((waves, lip.truncated(frames), gesture.truncated(frames)))
}

/// Drops cues according to `policy`. The sample must carry both cues.
pub fn apply_missing(mut sample: MixtureSample, policy: &MissingPolicy, rng: &mut ChaCha8Rng) -> Result<MixtureSample> {
    if sample.lip.is_none() || sample.gesture.is_none() {
        return Err(Error::invalid(format!("sample {} already misses a cue", sample.id)));
    }
    let presence = policy.draw(rng);
    if !presence.has_lip {
        sample.lip = None;
    }
    if !presence.has_gesture {
        sample.gesture = None;
    }
    sample.presence = presence;
    Ok(sample)
}
