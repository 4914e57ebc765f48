//! In-memory dataset plus the train/eval preprocessing views.
//!
//! Loading resizes every image to the configured square size and rescales
//! its landmarks into the same frame. Views then cut the training or
//! evaluation crop; landmark coordinates ride along through every geometric
//! step so action-unit maps rasterized in the crop frame stay registered
//! with the pixels.

use aufer_core::landmarks::LandmarkSet;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::ToolkitError;
use crate::formats::{load_landmarks, DatasetManifest};
use crate::img::ImageBuf;
use crate::model::Tensor4;

/// One loaded sample in the resize frame.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub image: ImageBuf,
    pub landmarks: LandmarkSet,
}

/// A dataset split held in memory.
#[derive(Debug)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    /// Samples whose landmark files did not parse or rescale: `(id, reason)`.
    /// They are excluded from `samples`; consumers report the count.
    pub skipped: Vec<(String, String)>,
    pub resize: usize,
    pub crop: usize,
}

/// A model-ready crop of one sample, with landmarks in the crop frame.
#[derive(Debug, Clone)]
pub struct View {
    pub image: ImageBuf,
    pub landmarks: LandmarkSet,
    pub label: usize,
    pub flipped: bool,
}

impl Dataset {
    /// Loads every manifest entry, resizing images to `resize` square and
    /// rescaling landmarks into that frame. Image decode failures are hard
    /// errors; landmark failures put the sample on the skip list.
    pub fn load(manifest: &DatasetManifest, resize: usize, crop: usize) -> Result<Dataset, ToolkitError> {
        assert!(crop >= 1 && crop <= resize, "crop must satisfy 1 <= crop <= resize");
        let mut samples = Vec::with_capacity(manifest.entries.len());
        let mut skipped = Vec::new();
        for e in &manifest.entries {
            let image = ImageBuf::load_png(&manifest.image_path(e))?.resized((resize, resize));
            let landmarks = match load_landmarks(&manifest.landmark_path(e))
                .and_then(|lm| {
                    lm.scaled_to((resize, resize))
                        .map_err(|err| ToolkitError::Landmark { id: e.id.clone(), source: err })
                }) {
                Ok(lm) => lm,
                Err(err) => {
                    skipped.push((e.id.clone(), err.to_string()));
                    continue;
                }
            };
            samples.push(Sample { id: e.id.clone(), label: e.label, image, landmarks });
        }
        Ok(Dataset {
            class_names: manifest.class_names.clone(),
            samples,
            skipped,
            resize,
            crop,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Deterministic center crop.
    pub fn eval_view(&self, i: usize) -> View {
        let s = &self.samples[i];
        let off = (self.resize - self.crop) / 2;
        let image = s.image.cropped(off, off, (self.crop, self.crop));
        let landmarks = s
            .landmarks
            .cropped(off as f64, off as f64, (self.crop, self.crop))
            .expect("crop size validated at load");
        View { image, landmarks, label: s.label, flipped: false }
    }

    /// Random crop plus, when `hflip` is set, a fair-coin horizontal flip
    /// that mirrors the landmarks through the same transform. All
    /// randomness comes from `rng`, so a seeded caller reproduces crops.
    pub fn train_view(&self, i: usize, hflip: bool, rng: &mut ChaCha8Rng) -> View {
        let s = &self.samples[i];
        let max = self.resize - self.crop;
        let oy = rng.random_range(0..=max);
        let ox = rng.random_range(0..=max);
        let mut image = s.image.cropped(oy, ox, (self.crop, self.crop));
        let mut landmarks = s
            .landmarks
            .cropped(ox as f64, oy as f64, (self.crop, self.crop))
            .expect("crop size validated at load");
        let mut flipped = false;
        if hflip && rng.random::<f64>() < 0.5 {
            image = image.hflipped();
            landmarks = landmarks.mirrored_horizontal();
            flipped = true;
        }
        View { image, landmarks, label: s.label, flipped }
    }
}

/// Stacks views into a network input batch, mapping pixel values from
/// `[0, 1]` to `[-1, 1]`.
pub fn to_input(views: &[&View]) -> Tensor4 {
    assert!(!views.is_empty(), "empty batch");
    let (h, w) = views[0].image.shape();
    let mut data = Vec::with_capacity(views.len() * 3 * h * w);
    for v in views {
        assert_eq!(v.image.shape(), (h, w), "mixed view sizes in one batch");
        data.extend(v.image.data().iter().map(|&p| (p - 0.5) * 2.0));
    }
    Tensor4::from_vec(views.len(), 3, h, w, data)
}
