//! From loaded videos to standardized, split training examples.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{load_manifest, load_sample, split, BackgroundSubtractor, Label, Labeled, SplitSpec, VideoSample};
use crate::error::{Error, Result};
use crate::geomfeat::{dimension_transform, extract_video_features, fit_scaler, FlaggedFrame, FrameRow, PoseSolver, ScalerParams};
use crate::model::FEATURES_PER_FRAME;
use crate::tensor::Tensor;

/// One video ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub label: Label,
    /// `5×S×S×3`
    pub video: Tensor,
    /// `5×29`, raw until a scaler is applied.
    pub features: Tensor,
}

impl Labeled for Example {
    fn label(&self) -> Label {
        self.label
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFlag {
    pub video: String,
    #[serde(flatten)]
    pub detail: FlaggedFrame,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalerFit {
    /// Statistics from the training split only.
    #[default]
    TrainOnly,
    /// Statistics from every video before splitting.
    AllData,
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub scaler: ScalerParams,
    pub flags: Vec<FrameFlag>,
}

/// Loads every manifest record in parallel, ordered as in the manifest.
pub fn load_dataset(manifest: &Path, image_size: usize, background: &dyn BackgroundSubtractor) -> Result<Vec<VideoSample>> {
    let m = load_manifest(manifest)?;
    m.records
        .par_iter()
        .map(|r| load_sample(&m, r, image_size, background))
        .collect()
}

/// Builds per-video examples with raw (unscaled) features, ordered by video id.
pub fn extract_examples(samples: Vec<VideoSample>, solver: &PoseSolver) -> Result<(Vec<Example>, Vec<FrameFlag>)> {
    let per_video: Vec<_> = samples
        .par_iter()
        .map(|s| {
            let (w, h) = s.annotation_size;
            (s.id.clone(), extract_video_features(&s.persons, w, h, solver))
        })
        .collect();
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for (id, vf) in per_video {
        for (j, f) in vf.rows.into_iter().enumerate() {
            rows.push(FrameRow {
                video_id: id.clone(),
                frame_name: format!("frame_{j:03}"),
                features: f,
            });
        }
        flags.extend(vf.flagged.into_iter().map(|detail| FrameFlag { video: id.clone(), detail }));
    }
    let major = dimension_transform(rows)?;
    let mut samples = samples;
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    if samples.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::Validation("duplicate video ids".into()));
    }
    let examples = samples
        .into_iter()
        .zip(&major.video_ids)
        .enumerate()
        .map(|(i, (s, id))| {
            debug_assert_eq!(&s.id, id);
            Ok(Example {
                video: s.video_tensor()?,
                features: major.video(i),
                id: s.id,
                label: s.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((examples, flags))
}

fn feature_rows(examples: &[Example]) -> Vec<&[f64]> {
    examples
        .iter()
        .flat_map(|e| e.features.data().chunks_exact(FEATURES_PER_FRAME))
        .collect()
}

pub fn apply_scaler(scaler: &ScalerParams, examples: &mut [Example]) -> Result<()> {
    for e in examples {
        scaler.transform_in_place(e.features.data_mut())?;
    }
    Ok(())
}

/// Extracts features, splits, fits the scaler and standardizes every split.
pub fn prepare(samples: Vec<VideoSample>, spec: &SplitSpec, fit: ScalerFit, solver: &PoseSolver) -> Result<PreparedData> {
    let (examples, flags) = extract_examples(samples, solver)?;
    let all_scaler = match fit {
        ScalerFit::AllData => Some(fit_scaler(&feature_rows(&examples))?),
        ScalerFit::TrainOnly => None,
    };
    let parts = split(examples, spec)?;
    let scaler = match all_scaler {
        Some(s) => s,
        None => fit_scaler(&feature_rows(&parts.train))?,
    };
    let (mut train, mut val, mut test) = (parts.train, parts.val, parts.test);
    for part in [&mut train, &mut val, &mut test] {
        apply_scaler(&scaler, part)?;
    }
    Ok(PreparedData {
        train,
        val,
        test,
        scaler,
        flags,
    })
}
