//! Stand-in branches for tests and benchmarks.

use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SegBranch, StyleBranch};
use crate::error::{Error, Result};
use crate::image_core::{ClassId, Frame};
use crate::scalar::Scalar;
use crate::segmenter::{LabelMap, ProbMap};

/// Returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityStyle;

impl<T: Scalar> StyleBranch<T> for IdentityStyle {
    fn stylize(&self, frame: &Frame<T>) -> Result<Frame<T>> {
        Ok(frame.clone())
    }
}

/// Paints the whole frame one color.
#[derive(Clone, Copy, Debug)]
pub struct ConstantStyle {
    pub rgb: [f64; 3],
}

impl ConstantStyle {
    pub fn gray(v: f64) -> Self {
        ConstantStyle { rgb: [v; 3] }
    }
}

impl<T: Scalar> StyleBranch<T> for ConstantStyle {
    fn stylize(&self, frame: &Frame<T>) -> Result<Frame<T>> {
        Frame::filled_rgb(frame.height(), frame.width(), self.rgb.map(T::of))
    }
}

/// Labels every pixel with one class.
#[derive(Clone, Debug)]
pub struct UniformSeg {
    pub class: ClassId,
    pub class_names: Vec<String>,
}

impl<T: Scalar> SegBranch<T> for UniformSeg {
    fn class_names(&self) -> Vec<String> {
        self.class_names.clone()
    }

    fn predict(&self, frame: &Frame<T>) -> Result<ProbMap<T>> {
        let (h, w) = (frame.height(), frame.width());
        let labels = LabelMap::new(h, w, self.class_names.len(), vec![self.class as u8; h * w])?;
        Ok(ProbMap::from_labels(&labels))
    }
}

/// Replays a fixed label map (e.g. the ground truth of a synthetic sample).
#[derive(Clone, Debug)]
pub struct FixedLabelsSeg {
    pub labels: LabelMap,
    pub class_names: Vec<String>,
}

impl<T: Scalar> SegBranch<T> for FixedLabelsSeg {
    fn class_names(&self) -> Vec<String> {
        self.class_names.clone()
    }

    fn predict(&self, frame: &Frame<T>) -> Result<ProbMap<T>> {
        if frame.height() != self.labels.height() || frame.width() != self.labels.width() {
            return Err(Error::Shape(format!(
                "fixed labels are {}x{}, frame is {}x{}",
                self.labels.height(),
                self.labels.width(),
                frame.height(),
                frame.width()
            )));
        }
        Ok(ProbMap::from_labels(&self.labels))
    }
}

/// Always fails; exercises per-frame error records.
#[derive(Clone, Debug)]
pub struct FailingStyle(pub String);

impl<T: Scalar> StyleBranch<T> for FailingStyle {
    fn stylize(&self, _frame: &Frame<T>) -> Result<Frame<T>> {
        Err(Error::Model(self.0.clone()))
    }
}

/// How long a [`Delayed`] branch sleeps before delegating.
#[derive(Debug)]
pub enum Delay {
    Fixed(Duration),
    /// Uniform in `[min, max]`, drawn from a seeded generator per call.
    Jitter { min: Duration, max: Duration, rng: Mutex<ChaCha8Rng> },
}

impl Delay {
    pub fn fixed_ms(ms: f64) -> Self {
        Delay::Fixed(Duration::from_secs_f64(ms / 1000.0))
    }

    pub fn jitter_ms(min: f64, max: f64, seed: u64) -> Self {
        Delay::Jitter {
            min: Duration::from_secs_f64(min / 1000.0),
            max: Duration::from_secs_f64(max / 1000.0),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn wait(&self) {
        let d = match self {
            Delay::Fixed(d) => *d,
            Delay::Jitter { min, max, rng } => {
                let mut rng = rng.lock().expect("delay rng");
                let span = max.saturating_sub(*min).as_secs_f64();
                *min + Duration::from_secs_f64(rng.random_range(0.0..=span))
            }
        };
        if !d.is_zero() {
            thread::sleep(d);
        }
    }
}

/// Sleeps, then runs the wrapped branch.
#[derive(Debug)]
pub struct Delayed<B> {
    pub inner: B,
    pub delay: Delay,
}

impl<B> Delayed<B> {
    pub fn new(inner: B, delay: Delay) -> Self {
        Delayed { inner, delay }
    }
}

impl<T: Scalar, B: StyleBranch<T>> StyleBranch<T> for Delayed<B> {
    fn stylize(&self, frame: &Frame<T>) -> Result<Frame<T>> {
        self.delay.wait();
        self.inner.stylize(frame)
    }
}

impl<T: Scalar, B: SegBranch<T>> SegBranch<T> for Delayed<B> {
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names()
    }

    fn predict(&self, frame: &Frame<T>) -> Result<ProbMap<T>> {
        self.delay.wait();
        self.inner.predict(frame)
    }
}
