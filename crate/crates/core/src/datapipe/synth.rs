//! Labeled two-person scenarios with known geometry.
//!
//! Heads live in camera coordinates (x right, y down, z depth, model units).
//! A head "looks at" a target when its yaw is `atan2(Δx, −Δz)` toward it.
//!
//! * stalking: the stalker stays well behind and to the side of the victim,
//!   follows the victim's motion and keeps its yaw on the victim; the victim
//!   faces away from the stalker with some jitter.
//! * non_stalking: the two stand close at similar depth and turn toward each
//!   other by independent amounts.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{write_annotations, write_manifest, write_ppm, Annotations, Label, VideoRecord, VideoSample};
use crate::error::{Error, Result};
use crate::geomfeat::{project, Camera, FaceModel, FramePersons, HeadPose, SixPoints};
use crate::model::FRAMES_PER_VIDEO;
use crate::rng::substream;
use crate::tensor::Tensor;

/// Width and height of the image plane landmarks are projected onto.
pub const LANDMARK_CANVAS: (f64, f64) = (640.0, 480.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSignal {
    /// Agents drawn as coloured blobs at their projected positions.
    Rendered,
    /// Uniform noise carrying no label information.
    Noise,
}

impl std::str::FromStr for FrameSignal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rendered" => Ok(FrameSignal::Rendered),
            "noise" => Ok(FrameSignal::Noise),
            _ => Err(Error::Config(format!("frame signal must be rendered or noise, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub videos: usize,
    pub image_size: usize,
    /// Standard deviation of landmark noise in canvas pixels.
    pub landmark_noise: f64,
    pub signal: FrameSignal,
    pub seed: u64,
    pub victim_depth: (f64, f64),
    pub stalker_lateral: (f64, f64),
    pub stalker_behind: (f64, f64),
    pub victim_yaw_jitter: f64,
    pub pair_lateral: (f64, f64),
    pub pair_depth_offset: f64,
    pub pair_turn: (f64, f64),
    pub pitch_range: f64,
    pub roll_range: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            videos: 240,
            image_size: 32,
            landmark_noise: 1.0,
            signal: FrameSignal::Rendered,
            seed: 7,
            victim_depth: (3000.0, 4500.0),
            stalker_lateral: (1000.0, 1800.0),
            stalker_behind: (1500.0, 2800.0),
            victim_yaw_jitter: 15.0,
            pair_lateral: (450.0, 800.0),
            pair_depth_offset: 400.0,
            pair_turn: (35.0, 65.0),
            pitch_range: 8.0,
            roll_range: 5.0,
        }
    }
}

/// Ground-truth head state; angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl AgentState {
    fn pose(&self) -> HeadPose {
        HeadPose::from_euler_degrees(self.yaw, self.pitch, self.roll, Vector3::from(self.position))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub victim: AgentState,
    pub stalker: AgentState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub sample: VideoSample,
    pub truth: Vec<FrameTruth>,
}

/// Yaw in degrees that points a head at `from` toward `to`.
pub fn yaw_toward(from: [f64; 3], to: [f64; 3]) -> f64 {
    (to[0] - from[0]).atan2(-(to[2] - from[2])).to_degrees()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn sym(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    uniform(rng, (-half, half))
}

fn side(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn scenario(label: Label, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<FrameTruth> {
    let mut out = Vec::with_capacity(FRAMES_PER_VIDEO);
    let head_height = |rng: &mut ChaCha8Rng| sym(rng, 250.0);
    let (pitch_v, pitch_s) = (sym(rng, cfg.pitch_range), sym(rng, cfg.pitch_range));
    let (roll_v, roll_s) = (sym(rng, cfg.roll_range), sym(rng, cfg.roll_range));
    let z = uniform(rng, cfg.victim_depth);
    let mut victim = [sym(rng, 0.15 * z), head_height(rng), z];
    match label {
        Label::Stalking => {
            let s = side(rng);
            let mut stalker = [
                victim[0] + s * uniform(rng, cfg.stalker_lateral),
                head_height(rng),
                victim[2] + uniform(rng, cfg.stalker_behind),
            ];
            let vel = [sym(rng, 120.0), 0.0, sym(rng, 150.0)];
            for _ in 0..FRAMES_PER_VIDEO {
                let toward = yaw_toward(stalker, victim);
                let jitter = sym(rng, cfg.victim_yaw_jitter);
                out.push(FrameTruth {
                    // Facing away from the stalker is the stalker's own line of sight.
                    victim: AgentState { position: victim, yaw: toward + jitter, pitch: pitch_v, roll: roll_v },
                    stalker: AgentState { position: stalker, yaw: toward, pitch: pitch_s, roll: roll_s },
                });
                for k in 0..3 {
                    victim[k] += vel[k];
                    stalker[k] += vel[k] + sym(rng, 20.0) * (k != 1) as u8 as f64;
                }
            }
        }
        Label::NonStalking => {
            let s = side(rng);
            let mut other = [
                victim[0] + s * uniform(rng, cfg.pair_lateral),
                head_height(rng),
                victim[2] + sym(rng, cfg.pair_depth_offset),
            ];
            let (turn_v, turn_o) = (uniform(rng, cfg.pair_turn), uniform(rng, cfg.pair_turn));
            for _ in 0..FRAMES_PER_VIDEO {
                // Turned toward each other: signs follow the lateral order.
                let dir = (other[0] - victim[0]).signum();
                out.push(FrameTruth {
                    victim: AgentState { position: victim, yaw: dir * turn_v + sym(rng, 5.0), pitch: pitch_v, roll: roll_v },
                    stalker: AgentState { position: other, yaw: -dir * turn_o + sym(rng, 5.0), pitch: pitch_s, roll: roll_s },
                });
                for k in [0, 2] {
                    victim[k] += sym(rng, 40.0);
                    other[k] += sym(rng, 40.0);
                }
            }
        }
    }
    out
}

fn landmarks(agent: &AgentState, noise: f64, rng: &mut ChaCha8Rng) -> SixPoints {
    let (w, h) = LANDMARK_CANVAS;
    let mut pts = project(&FaceModel::default(), &agent.pose(), &Camera::for_image(w, h));
    if noise > 0.0 {
        let n = Normal::new(0.0, noise).expect("finite noise");
        for p in pts.0.iter_mut() {
            p.x += n.sample(rng);
            p.y += n.sample(rng);
        }
    }
    pts
}

fn inside_canvas(pts: &SixPoints) -> bool {
    let (w, h) = LANDMARK_CANVAS;
    pts.0.iter().all(|p| p.x >= 1.0 && p.y >= 1.0 && p.x < w - 1.0 && p.y < h - 1.0)
}

fn render(truth: &FrameTruth, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (w, h) = LANDMARK_CANVAS;
    let cam = Camera::for_image(w, h);
    let blobs = [(truth.victim, [0.9, 0.25, 0.2]), (truth.stalker, [0.2, 0.35, 0.9])];
    let scale = size as f64 / w;
    let centres: Vec<(f64, f64, f64, [f64; 3])> = blobs
        .iter()
        .map(|(a, colour)| {
            let [x, y, z] = a.position;
            let u = (cam.focal * x / z + cam.cx) * scale;
            let v = (cam.focal * y / z + cam.cy) * size as f64 / h;
            let radius = (cam.focal * 250.0 / z * scale).max(0.75);
            (u, v, radius, *colour)
        })
        .collect();
    Tensor::from_fn(&[size, size, 3], |i| {
        let c = i % 3;
        let px = ((i / 3) % size) as f64 + 0.5;
        let py = (i / (3 * size)) as f64 + 0.5;
        let mut v = 0.1 + rng.gen_range(0.0..0.05);
        for (u, cv, r, colour) in &centres {
            let d2 = (px - u).powi(2) + (py - cv).powi(2);
            v += colour[c] * (-d2 / (2.0 * r * r)).exp();
        }
        v.min(1.0)
    })
}

fn generate_one(index: usize, cfg: &SynthConfig) -> SynthVideo {
    let label = if index.is_multiple_of(2) { Label::Stalking } else { Label::NonStalking };
    let mut rng = substream(cfg.seed, &format!("synth/video{index}"));
    let (truth, persons) = loop {
        let truth = scenario(label, cfg, &mut rng);
        let persons: Vec<FramePersons> = truth
            .iter()
            .map(|t| FramePersons {
                victim: landmarks(&t.victim, cfg.landmark_noise, &mut rng),
                stalker: landmarks(&t.stalker, cfg.landmark_noise, &mut rng),
            })
            .collect();
        if persons.iter().all(|p| inside_canvas(&p.victim) && inside_canvas(&p.stalker)) {
            break (truth, persons);
        }
    };
    let s = cfg.image_size;
    let frames = truth
        .iter()
        .map(|t| match cfg.signal {
            FrameSignal::Rendered => render(t, s, &mut rng),
            FrameSignal::Noise => Tensor::from_fn(&[s, s, 3], |_| rng.gen_range(0.0..1.0)),
        })
        .collect();
    SynthVideo {
        sample: VideoSample {
            id: format!("video{index:04}"),
            label,
            frames,
            persons,
            annotation_size: LANDMARK_CANVAS,
        },
        truth,
    }
}

/// `cfg.videos` scenarios alternating stalking / non_stalking, ordered by id.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SynthVideo>> {
    if cfg.videos < 2 {
        return Err(Error::Contract(format!("generate at least 2 videos, got {}", cfg.videos)));
    }
    if cfg.image_size < 18 {
        return Err(Error::Contract(format!("image size must be at least 18, got {}", cfg.image_size)));
    }
    if !(cfg.landmark_noise >= 0.0 && cfg.landmark_noise.is_finite()) {
        return Err(Error::Config(format!("landmark noise must be ≥ 0, got {}", cfg.landmark_noise)));
    }
    Ok((0..cfg.videos).into_par_iter().map(|i| generate_one(i, cfg)).collect())
}

/// Writes frames, landmark CSVs and `manifest.jsonl` under `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, videos: &[SynthVideo]) -> Result<PathBuf> {
    let mut records = Vec::with_capacity(videos.len());
    for v in videos {
        let rel = PathBuf::from("videos").join(&v.sample.id);
        let abs = dir.join(&rel);
        fs::create_dir_all(&abs).map_err(|e| Error::io(&abs, e))?;
        let mut frames = Vec::with_capacity(v.sample.frames.len());
        let mut ann = Annotations::default();
        for (j, (img, persons)) in v.sample.frames.iter().zip(&v.sample.persons).enumerate() {
            let name = format!("frame_{j:03}.ppm");
            write_ppm(&abs.join(&name), img)?;
            frames.push(rel.join(&name));
            ann.frames.insert(j, *persons);
        }
        write_annotations(&abs.join("landmarks.csv"), &ann)?;
        let truth = abs.join("truth.json");
        fs::write(&truth, serde_json::to_string_pretty(&v.truth)?).map_err(|e| Error::io(&truth, e))?;
        records.push(VideoRecord {
            id: v.sample.id.clone(),
            label: v.sample.label,
            frames,
            landmarks: rel.join("landmarks.csv"),
            width: Some(v.sample.annotation_size.0),
            height: Some(v.sample.annotation_size.1),
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
