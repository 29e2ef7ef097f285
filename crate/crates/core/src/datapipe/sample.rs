use super::{read_annotations, read_ppm, resize_bilinear, sample_record_frames, Label, Manifest, VideoRecord};
use crate::error::{Error, Result};
use crate::geomfeat::FramePersons;
use crate::model::FRAMES_PER_VIDEO;
use crate::tensor::Tensor;

/// Five sampled frames of one video with both people's landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub label: Label,
    /// `S×S×3` each.
    pub frames: Vec<Tensor>,
    pub persons: Vec<FramePersons>,
    /// Width and height of the image the landmarks are expressed in.
    pub annotation_size: (f64, f64),
}

impl VideoSample {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != FRAMES_PER_VIDEO || self.persons.len() != FRAMES_PER_VIDEO {
            return Err(Error::Cardinality(format!(
                "video {} has {} frames and {} annotated frames, expected {FRAMES_PER_VIDEO}",
                self.id,
                self.frames.len(),
                self.persons.len()
            )));
        }
        Ok(())
    }

    /// Frames stacked as `T×S×S×3`.
    pub fn video_tensor(&self) -> Result<Tensor> {
        crate::tensor::ops::stack(&self.frames.iter().collect::<Vec<_>>())
    }
}

/// A slot for foreground extraction ahead of the network; the default keeps frames as they are.
pub trait BackgroundSubtractor: Send + Sync {
    fn apply(&self, frames: Vec<Tensor>) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Passthrough;

impl BackgroundSubtractor for Passthrough {
    fn apply(&self, frames: Vec<Tensor>) -> Result<Vec<Tensor>> {
        Ok(frames)
    }
}

/// Reads the five sampled frames (resized to `image_size`) and their annotations.
pub fn load_sample(
    manifest: &Manifest,
    record: &VideoRecord,
    image_size: usize,
    background: &dyn BackgroundSubtractor,
) -> Result<VideoSample> {
    let picks = sample_record_frames(record)?;
    let ann = read_annotations(&manifest.resolve(&record.landmarks))?;
    let mut frames = Vec::with_capacity(picks.len());
    let mut persons = Vec::with_capacity(picks.len());
    let mut native = None;
    for &i in &picks {
        let img = read_ppm(&manifest.resolve(&record.frames[i]))?;
        native.get_or_insert((img.shape()[1] as f64, img.shape()[0] as f64));
        frames.push(resize_bilinear(&img, image_size, image_size)?);
        persons.push(*ann.frame(i).ok_or_else(|| {
            Error::Validation(format!("video {} has no landmarks for frame {i}", record.id))
        })?);
    }
    let (nw, nh) = native.expect("at least one frame");
    let sample = VideoSample {
        id: record.id.clone(),
        label: record.label,
        frames: background.apply(frames)?,
        persons,
        annotation_size: (record.width.unwrap_or(nw), record.height.unwrap_or(nh)),
    };
    sample.validate()?;
    Ok(sample)
}
