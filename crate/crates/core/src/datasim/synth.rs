use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::visual::{joint, LipSequence, PoseFrame, PoseSequence, NUM_JOINTS, VISUAL_FPS};

/// Knobs of the synthetic audio-visual source generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Lip crops are `lip_size x lip_size`.
    pub lip_size: usize,
    /// Standard deviation of the coordinate noise added to every joint.
    pub gesture_noise: f64,
    /// Range of the per-speaker fundamental in Hz.
    pub f0_range: [f64; 2],
    /// Range of syllable durations in seconds.
    pub syllable_range: [f64; 2],
    /// Probability that a syllable slot is silent.
    pub pause_prob: f64,
    /// Range of the gesture lag behind the speech envelope in seconds.
    pub gesture_lag_range: [f64; 2],
    /// RMS level of a generated source.
    pub rms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            lip_size: 24,
            gesture_noise: 0.05,
            f0_range: [90.0, 320.0],
            syllable_range: [0.12, 0.28],
            pause_prob: 0.25,
            gesture_lag_range: [0.10, 0.20],
            rms: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lip_size < 8 {
            return Err(Error::Config(format!("lip_size {} is below 8", self.lip_size)));
        }
        let ordered = |r: [f64; 2], what: &str| -> Result<()> {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(Error::Config(format!("{what} range {r:?} must be positive and ordered")));
            }
            Ok(())
        };
        ordered(self.f0_range, "f0")?;
        ordered(self.syllable_range, "syllable")?;
        ordered(self.gesture_lag_range, "gesture lag")?;
        if !(0.0..1.0).contains(&self.pause_prob) {
            return Err(Error::Config(format!("pause_prob {} not in [0, 1)", self.pause_prob)));
        }
        if !(self.gesture_noise >= 0.0) || !(self.rms > 0.0) {
            return Err(Error::Config("gesture_noise must be >= 0 and rms > 0".into()));
        }
        Ok(())
    }
}

/// Voice and appearance of one synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub id: String,
    pub f0: f64,
    /// Relative amplitude of harmonics 1..=n.
    pub harmonics: Vec<f64>,
    /// Vibrato depth (fraction of f0) and rate in Hz.
    pub vibrato: (f64, f64),
    pub skin: f64,
    pub mouth_width: f64,
    /// Which wrist carries the gesture.
    pub right_handed: bool,
}

impl Speaker {
    pub fn sample(id: String, rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Self {
        // Log-uniform fundamental.
        let (lo, hi) = (cfg.f0_range[0].ln(), cfg.f0_range[1].ln());
        let f0 = rng.random_range(lo..=hi).exp();
        let n = rng.random_range(2..=4);
        let harmonics = (0..n).map(|k| rng.random_range(0.3..1.0) / (k as f64 + 1.0).sqrt()).collect();
        Self {
            id,
            f0,
            harmonics,
            vibrato: (rng.random_range(0.005..0.03), rng.random_range(3.0..7.0)),
            skin: rng.random_range(0.5..0.8),
            mouth_width: rng.random_range(0.22..0.32),
            right_handed: rng.random_bool(0.5),
        }
    }
}

/// One generated utterance with its cues and the envelope that drives all three.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceClip {
    pub speech: Waveform,
    pub poses: PoseSequence,
    pub lips: LipSequence,
    /// Envelope at the audio rate, in `[0, 1]`.
    pub envelope: Vec<f32>,
    /// Seconds by which the gesture trails the envelope.
    pub gesture_lag: f64,
}

/// Number of 15 FPS frames covering `samples` audio samples.
pub fn visual_frames(samples: usize) -> usize {
    samples * VISUAL_FPS as usize / SAMPLE_RATE as usize
}

/// Audio samples spanned by visual frame `f`.
pub fn frame_span(f: usize) -> (usize, usize) {
    let sr = SAMPLE_RATE as usize;
    let fps = VISUAL_FPS as usize;
    (f * sr / fps, (f + 1) * sr / fps)
}

/// Piecewise-smooth syllable envelope: random levels held on random-length slots,
/// joined by raised-cosine ramps.
pub fn envelope(rng: &mut ChaCha8Rng, samples: usize, cfg: &SynthConfig) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let mut knots: Vec<(f64, f64)> = Vec::new();
    let mut t = 0.0;
    let total = samples as f64 / sr;
    while t <= total + cfg.syllable_range[1] {
        let level = if rng.random_bool(cfg.pause_prob) { 0.0 } else { rng.random_range(0.3..1.0) };
        knots.push((t, level));
        t += rng.random_range(cfg.syllable_range[0]..=cfg.syllable_range[1]);
    }
    knots.push((t, 0.0));
    if knots.iter().all(|k| k.1 == 0.0) {
        knots[0].1 = 0.6;
    }
    let mut out = Vec::with_capacity(samples);
    let mut k = 0;
    for n in 0..samples {
        let time = n as f64 / sr;
        while k + 2 < knots.len() && knots[k + 1].0 <= time {
            k += 1;
        }
        let (t0, a) = knots[k];
        let (t1, b) = knots[k + 1];
        let u = ((time - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let w = 0.5 - 0.5 * (PI * u).cos();
        out.push((a + (b - a) * w) as f32);
    }
    out
}

/// Mean envelope over each visual frame.
pub fn envelope_per_frame(envelope: &[f32], frames: usize) -> Vec<f64> {
    (0..frames)
        .map(|f| {
            let (a, b) = frame_span(f);
            let b = b.min(envelope.len());
            if a >= b {
                return 0.0;
            }
            envelope[a..b].iter().map(|&e| e as f64).sum::<f64>() / (b - a) as f64
        })
        .collect()
}

/// Envelope at visual frame rate, delayed by `lag` seconds and smoothed with a
/// centered 3-frame moving average.
pub fn lagged_envelope(envelope: &[f32], frames: usize, lag: f64) -> Vec<f64> {
    let shift = (lag * SAMPLE_RATE as f64).round() as usize;
    let delayed: Vec<f32> = (0..envelope.len())
        .map(|n| if n >= shift { envelope[n - shift] } else { 0.0 })
        .collect();
    let per_frame = envelope_per_frame(&delayed, frames);
    (0..frames)
        .map(|f| {
            let lo = f.saturating_sub(1);
            let hi = (f + 1).min(frames.saturating_sub(1));
            per_frame[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

fn speech(rng: &mut ChaCha8Rng, speaker: &Speaker, envelope: &[f32], cfg: &SynthConfig) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let phases: Vec<f64> = speaker.harmonics.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let (depth, rate) = speaker.vibrato;
    let mut phase = 0.0f64;
    let mut raw: Vec<f64> = Vec::with_capacity(envelope.len());
    for (n, &e) in envelope.iter().enumerate() {
        let t = n as f64 / sr;
        let f = speaker.f0 * (1.0 + depth * (2.0 * PI * rate * t + vib_phase).sin());
        phase += 2.0 * PI * f / sr;
        let tone: f64 = speaker
            .harmonics
            .iter()
            .zip(&phases)
            .enumerate()
            .map(|(k, (a, p))| a * ((k as f64 + 1.0) * phase + p).sin())
            .sum();
        raw.push(e as f64 * tone);
    }
    let rms = (raw.iter().map(|x| x * x).sum::<f64>() / raw.len().max(1) as f64).sqrt();
    let gain = if rms > 0.0 { cfg.rms / rms } else { 0.0 };
    raw.into_iter().map(|x| (x * gain) as f32).collect()
}

/// Renders one mouth crop with opening `aperture` in `[0, 1]`.
pub fn render_mouth(size: usize, aperture: f64, speaker: &Speaker) -> Vec<f32> {
    let s = size as f64;
    let (cx, cy) = (0.5 * s, 0.6 * s);
    let rx = speaker.mouth_width * s;
    let ry = 0.03 * s + 0.22 * s * aperture;
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            let d = dx * dx + dy * dy;
            let inside = 1.0 / (1.0 + (-(1.0 - d) * 6.0).exp());
            let shade = speaker.skin * (1.0 - 0.15 * y as f64 / s);
            img.push((shade - (shade - 0.08) * inside).clamp(0.0, 1.0) as f32);
        }
    }
    img
}

fn rest_pose() -> PoseFrame {
    let mut p = [[0.0f32; 3]; NUM_JOINTS];
    p[joint::HEAD] = [0.0, 0.55, 0.0];
    p[joint::NECK] = [0.0, 0.35, 0.0];
    p[joint::NOSE] = [0.0, 0.5, 0.08];
    p[joint::SPINE] = [0.0, 0.0, 0.0];
    p[joint::L_SHOULDER] = [-0.2, 0.3, 0.0];
    p[joint::R_SHOULDER] = [0.2, 0.3, 0.0];
    p[joint::L_ELBOW] = [-0.25, 0.05, 0.05];
    p[joint::R_ELBOW] = [0.25, 0.05, 0.05];
    p[joint::L_WRIST] = [-0.2, -0.15, 0.2];
    p[joint::R_WRIST] = [0.2, -0.15, 0.2];
    p
}

/// Generates speech, a 10-joint gesture track and mouth crops for `samples` samples.
///
/// Mouth aperture per frame is the mean envelope over that frame. The active wrist
/// rises with a smoothed copy of the envelope delayed by a random lag; the elbow on
/// the same side follows at half amplitude. Every coordinate gets Gaussian noise.
pub fn synth_source(rng: &mut ChaCha8Rng, speaker: &Speaker, samples: usize, cfg: &SynthConfig) -> Result<SourceClip> {
    let env = envelope(rng, samples, cfg);
    let speech = Waveform::new(speech(rng, speaker, &env, cfg))?;
    let frames = visual_frames(samples);

    let aperture = envelope_per_frame(&env, frames);
    let mut lip_data = Vec::with_capacity(frames * cfg.lip_size * cfg.lip_size);
    for &a in &aperture {
        lip_data.extend(render_mouth(cfg.lip_size, a, speaker));
    }
    let lips = LipSequence::new(frames, cfg.lip_size, cfg.lip_size, lip_data)?;

    let lag = rng.random_range(cfg.gesture_lag_range[0]..=cfg.gesture_lag_range[1]);
    let motion = lagged_envelope(&env, frames, lag);
    let rest = rest_pose();
    let (wrist, elbow) = if speaker.right_handed {
        (joint::R_WRIST, joint::R_ELBOW)
    } else {
        (joint::L_WRIST, joint::L_ELBOW)
    };
    let normal = rand_distr::Normal::new(0.0, cfg.gesture_noise.max(1e-12)).expect("valid sigma");
    let mut pose_frames = Vec::with_capacity(frames);
    for &m in &motion {
        let mut p = rest;
        p[wrist][1] += (0.3 * m) as f32;
        p[elbow][1] += (0.15 * m) as f32;
        if cfg.gesture_noise > 0.0 {
            for j in p.iter_mut() {
                for c in j.iter_mut() {
                    *c += rng.sample(normal) as f32;
                }
            }
        }
        pose_frames.push(p);
    }
    let poses = PoseSequence::new(pose_frames)?;
    Ok(SourceClip { speech, poses, lips, envelope: env, gesture_lag: lag })
}

/// Pearson correlation; 0 when either series is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
