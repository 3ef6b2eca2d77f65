//! Typed containers for recordings, semantic stacks and embeddings,
//! plus the on-disk dataset directory layout.

use std::path::Path;

use crate::data::bten::{load_array, save_array, RoleTag};
use crate::data::cfgfile::CfgFile;
use crate::error::{Error, Result};
use crate::numerics::DenseArray;
use crate::scalar::{real, Real};

/// Neural recording modality. Static (fMRI-style) inputs carry a single
/// timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Eeg,
    Meg,
    Fmri,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Eeg => "eeg",
            Modality::Meg => "meg",
            Modality::Fmri => "fmri",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "eeg" => Ok(Modality::Eeg),
            "meg" => Ok(Modality::Meg),
            "fmri" => Ok(Modality::Fmri),
            other => Err(Error::Config(format!("unknown modality \"{other}\""))),
        }
    }
}

/// Raw multichannel time series, `[N x C x T]`.
#[derive(Debug, Clone)]
pub struct BrainRecording<T> {
    values: DenseArray<T>,
    modality: Modality,
}

impl<T: Real> BrainRecording<T> {
    pub fn new(values: DenseArray<T>, modality: Modality) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::ShapeMismatch {
                context: "BrainRecording",
                detail: format!("expected [N x C x T], got {:?}", values.dims()),
            });
        }
        if modality == Modality::Fmri && values.dims()[2] != 1 {
            return Err(Error::ShapeMismatch {
                context: "BrainRecording",
                detail: format!("fmri requires T == 1, got T = {}", values.dims()[2]),
            });
        }
        values.validate_finite("BrainRecording")?;
        Ok(BrainRecording { values, modality })
    }

    pub fn n_samples(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn timesteps(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn values(&self) -> &DenseArray<T> {
        &self.values
    }

    /// Batch `[B x C x T]` gathered by sample index.
    pub fn gather(&self, idx: &[usize]) -> DenseArray<T> {
        self.values.gather_axis0(idx)
    }

    /// Keep only the first `window` timesteps.
    pub fn truncate_window(&self, window: usize) -> Result<Self> {
        if window == 0 || window > self.timesteps() {
            return Err(Error::Invalid(format!(
                "window {} outside 1..={}",
                window,
                self.timesteps()
            )));
        }
        let (n, c, t) = (self.n_samples(), self.channels(), self.timesteps());
        let mut data = Vec::with_capacity(n * c * window);
        let src = self.values.data();
        for row in 0..n * c {
            data.extend_from_slice(&src[row * t..row * t + window]);
        }
        Ok(BrainRecording {
            values: DenseArray::from_vec(&[n, c, window], data)?,
            modality: self.modality,
        })
    }
}

/// Which semantic decomposition a stack carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackKind {
    /// Five visual facets.
    Visual,
    /// Four textual facets.
    Textual,
}

impl StackKind {
    pub fn channel_labels(self) -> &'static [&'static str] {
        match self {
            StackKind::Visual => &["foreground", "background", "depth", "color", "texture"],
            StackKind::Textual => &["coarse", "detail", "location", "psychic"],
        }
    }

    pub fn channel_count(self) -> usize {
        self.channel_labels().len()
    }
}

/// Per-sample stack of semantic channel vectors, `[N x C_sem x K]`,
/// each channel vector L2-normalized at ingestion.
#[derive(Debug, Clone)]
pub struct SemanticStack<T> {
    values: DenseArray<T>,
    kind: StackKind,
}

impl<T: Real> SemanticStack<T> {
    pub fn new(values: DenseArray<T>, kind: StackKind) -> Result<Self> {
        if values.rank() != 3 || values.dims()[1] != kind.channel_count() {
            return Err(Error::ShapeMismatch {
                context: "SemanticStack",
                detail: format!(
                    "expected [N x {} x K] for {:?}, got {:?}",
                    kind.channel_count(),
                    kind,
                    values.dims()
                ),
            });
        }
        values.validate_finite("SemanticStack")?;
        let (n, c, k) = (values.dims()[0], values.dims()[1], values.dims()[2]);
        let tol = real::<T>(1e-4);
        for s in 0..n {
            for ci in 0..c {
                let row = &values.data()[(s * c + ci) * k..(s * c + ci + 1) * k];
                let norm = row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
                if (norm - T::one()).abs() > tol {
                    return Err(Error::Invalid(format!(
                        "channel \"{}\" of sample {s} has norm {} (must be 1 within 1e-4)",
                        kind.channel_labels()[ci],
                        norm.to_f64().unwrap_or(f64::NAN),
                    )));
                }
            }
        }
        Ok(SemanticStack { values, kind })
    }

    pub fn kind(&self) -> StackKind {
        self.kind
    }

    pub fn n_samples(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn values(&self) -> &DenseArray<T> {
        &self.values
    }

    pub fn gather(&self, idx: &[usize]) -> DenseArray<T> {
        self.values.gather_axis0(idx)
    }
}

/// Flat per-sample feature matrix `[N x F]`.
#[derive(Debug, Clone)]
pub struct Embedding<T> {
    values: DenseArray<T>,
}

impl<T: Real> Embedding<T> {
    pub fn new(values: DenseArray<T>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "Embedding",
                detail: format!("expected [N x F], got {:?}", values.dims()),
            });
        }
        values.validate_finite("Embedding")?;
        Ok(Embedding { values })
    }

    pub fn n_samples(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &DenseArray<T> {
        &self.values
    }

    pub fn into_values(self) -> DenseArray<T> {
        self.values
    }
}

/// Within-batch pairing: sample `i` of one tower matches sample
/// `labels[i]` of the other. Paired batches use the identity labeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLabels(Vec<usize>);

impl BatchLabels {
    pub fn identity(batch: usize) -> Self {
        BatchLabels((0..batch).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &l)| i == l)
    }
}

/// Check that all three views describe the same paired samples: equal N
/// everywhere and a shared semantic dimension K. Reports every mismatch
/// at once.
pub fn validate_pairing<T: Real>(
    brain: &BrainRecording<T>,
    vision: &SemanticStack<T>,
    text: &SemanticStack<T>,
) -> Result<()> {
    let mut problems = Vec::new();
    let n = brain.n_samples();
    if vision.n_samples() != n {
        problems.push(format!(
            "vision has {} samples, brain has {n}",
            vision.n_samples()
        ));
    }
    if text.n_samples() != n {
        problems.push(format!("text has {} samples, brain has {n}", text.n_samples()));
    }
    if vision.dim() != text.dim() {
        problems.push(format!(
            "vision K = {} but text K = {}",
            vision.dim(),
            text.dim()
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::PairingMismatch(problems.join("; ")))
    }
}

/// One dataset split on disk: `brain.bten`, `vision.bten`, `text.bten`,
/// optional `latent.bten` ground truth, and `meta.cfg`.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub brain: BrainRecording<T>,
    pub vision: SemanticStack<T>,
    pub text: SemanticStack<T>,
    /// Generator ground truth, when the dataset is synthetic.
    pub latent: Option<Embedding<T>>,
    /// Category id per sample (used by similarity-matrix ordering).
    pub labels: Option<Vec<usize>>,
}

impl<T: Real> Dataset<T> {
    pub fn n_samples(&self) -> usize {
        self.brain.n_samples()
    }

    pub fn validate(&self) -> Result<()> {
        validate_pairing(&self.brain, &self.vision, &self.text)?;
        if let Some(l) = &self.latent {
            if l.n_samples() != self.n_samples() {
                return Err(Error::PairingMismatch(format!(
                    "latent has {} samples, brain has {}",
                    l.n_samples(),
                    self.n_samples()
                )));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.n_samples() {
                return Err(Error::PairingMismatch(format!(
                    "labels cover {} samples, brain has {}",
                    l.len(),
                    self.n_samples()
                )));
            }
        }
        Ok(())
    }

    /// Rows `lo..hi` of every component.
    pub fn slice(&self, lo: usize, hi: usize) -> Result<Self> {
        let ds = Dataset {
            brain: BrainRecording::new(self.brain.values().slice_axis0(lo, hi), self.brain.modality())?,
            vision: SemanticStack::new(self.vision.values().slice_axis0(lo, hi), StackKind::Visual)?,
            text: SemanticStack::new(self.text.values().slice_axis0(lo, hi), StackKind::Textual)?,
            latent: match &self.latent {
                Some(l) => Some(Embedding::new(l.values().slice_axis0(lo, hi))?),
                None => None,
            },
            labels: self.labels.as_ref().map(|l| l[lo..hi].to_vec()),
        };
        Ok(ds)
    }
}

pub fn save_dataset<T: Real>(dir: impl AsRef<Path>, ds: &Dataset<T>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.validate()?;
    save_array(dir.join("brain.bten"), ds.brain.values(), RoleTag::Brain)?;
    save_array(dir.join("vision.bten"), ds.vision.values(), RoleTag::VisionStack)?;
    save_array(dir.join("text.bten"), ds.text.values(), RoleTag::TextStack)?;
    if let Some(l) = &ds.latent {
        save_array(dir.join("latent.bten"), l.values(), RoleTag::Latent)?;
    }
    let mut meta = CfgFile::new();
    meta.set("data", "modality", ds.brain.modality().as_str());
    meta.set("data", "samples", ds.n_samples());
    meta.set("data", "channels", ds.brain.channels());
    meta.set("data", "timesteps", ds.brain.timesteps());
    meta.set("data", "k", ds.vision.dim());
    if let Some(labels) = &ds.labels {
        for (i, c) in labels.iter().enumerate() {
            meta.set("labels", &i.to_string(), c);
        }
    }
    meta.write(dir.join("meta.cfg"))
}

pub fn load_dataset<T: Real>(dir: impl AsRef<Path>) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let meta = CfgFile::read(dir.join("meta.cfg"))?;
    let modality = Modality::parse(meta.require("data", "modality")?)?;

    let (brain_arr, role) = load_array::<T>(dir.join("brain.bten"))?;
    expect_role(role, RoleTag::Brain, "brain.bten")?;
    let (vis_arr, role) = load_array::<T>(dir.join("vision.bten"))?;
    expect_role(role, RoleTag::VisionStack, "vision.bten")?;
    let (txt_arr, role) = load_array::<T>(dir.join("text.bten"))?;
    expect_role(role, RoleTag::TextStack, "text.bten")?;

    let latent = if dir.join("latent.bten").exists() {
        let (arr, role) = load_array::<T>(dir.join("latent.bten"))?;
        expect_role(role, RoleTag::Latent, "latent.bten")?;
        Some(Embedding::new(arr)?)
    } else {
        None
    };

    let labels = match meta.section("labels") {
        Some(s) => {
            let mut labels = vec![0usize; brain_arr.dims()[0]];
            if s.entries.len() != labels.len() {
                return Err(Error::Config(format!(
                    "labels section has {} entries for {} samples",
                    s.entries.len(),
                    labels.len()
                )));
            }
            for (k, v) in &s.entries {
                let i: usize = k.parse().map_err(|_| Error::Config(format!("bad label index {k}")))?;
                labels[i] = v.parse().map_err(|_| Error::Config(format!("bad label value {v}")))?;
            }
            Some(labels)
        }
        None => None,
    };

    let ds = Dataset {
        brain: BrainRecording::new(brain_arr, modality)?,
        vision: SemanticStack::new(vis_arr, StackKind::Visual)?,
        text: SemanticStack::new(txt_arr, StackKind::Textual)?,
        latent,
        labels,
    };
    ds.validate()?;
    Ok(ds)
}

fn expect_role(got: RoleTag, want: RoleTag, file: &str) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "{file} carries role {got:?}, expected {want:?}"
        )))
    }
}
