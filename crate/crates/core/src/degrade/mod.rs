//! Synthetic training data: clean patches, degradation operators and the
//! task sets that pair them up.
//!
//! Every kind-specific constant lives in [`DegradationSpec::params`]; the
//! documented defaults are in [`DegradationKind::defaults`]. Counts of
//! streaks, drops and flakes are densities per 16×16 area and scale with the
//! image size.

mod kinds;
pub mod ppm;
mod synth;

pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use synth::gen_clean_patch;

use crate::error::{dim_err, Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    GaussianNoise,
    RainStreaks,
    Raindrops,
    Moire,
    Snow,
    Shadow,
}

/// `(name, default, lowest allowed, highest allowed)`.
pub type ParamDoc = (&'static str, f64, f64, f64);

impl DegradationKind {
    pub const ALL: [DegradationKind; 6] = [
        Self::GaussianNoise,
        Self::RainStreaks,
        Self::Raindrops,
        Self::Moire,
        Self::Snow,
        Self::Shadow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::RainStreaks => "rain_streaks",
            Self::Raindrops => "raindrops",
            Self::Moire => "moire",
            Self::Snow => "snow",
            Self::Shadow => "shadow",
        }
    }

    /// Accepted parameters with their defaults and ranges. `*_min`/`*_max`
    /// pairs bound a uniform draw made once per image (or per element for
    /// counts, radii and intensities).
    pub fn defaults(self) -> &'static [ParamDoc] {
        match self {
            // σ on the 0..255 scale
            Self::GaussianNoise => &[("sigma_min", 1.0, 0.0, 255.0), ("sigma_max", 50.0, 0.0, 255.0)],
            Self::RainStreaks => &[
                ("count_min", 4.0, 0.0, 200.0),
                ("count_max", 10.0, 0.0, 200.0),
                ("length_min", 4.0, 0.5, 64.0),
                ("length_max", 10.0, 0.5, 64.0),
                // degrees from vertical, shared by all streaks of an image
                ("tilt_max", 25.0, 0.0, 89.0),
                ("width", 0.7, 0.1, 4.0),
                ("intensity_min", 0.4, 0.0, 1.0),
                ("intensity_max", 0.8, 0.0, 1.0),
            ],
            Self::Raindrops => &[
                ("count_min", 1.0, 0.0, 50.0),
                ("count_max", 3.0, 0.0, 50.0),
                ("radius_min", 1.5, 0.5, 32.0),
                ("radius_max", 3.5, 0.5, 32.0),
                // box blur radius in pixels, rounded
                ("blur", 1.0, 0.0, 8.0),
                ("brighten", 0.1, 0.0, 0.5),
            ],
            Self::Moire => &[
                ("amplitude_min", 0.15, 0.0, 1.0),
                ("amplitude_max", 0.35, 0.0, 1.0),
                // radians per pixel
                ("freq_min", 0.8, 0.05, std::f64::consts::PI),
                ("freq_max", 2.0, 0.05, std::f64::consts::PI),
            ],
            Self::Snow => &[
                ("count_min", 6.0, 0.0, 200.0),
                ("count_max", 14.0, 0.0, 200.0),
                ("radius_min", 0.5, 0.1, 16.0),
                ("radius_max", 1.2, 0.1, 16.0),
                ("intensity_min", 0.6, 0.0, 1.0),
                ("intensity_max", 1.0, 0.0, 1.0),
            ],
            Self::Shadow => &[
                ("factor_min", 0.3, 0.0, 0.99),
                ("factor_max", 0.6, 0.0, 0.99),
                // polygon radius as a fraction of the shorter image side
                ("size_min", 0.35, 0.05, 2.0),
                ("size_max", 0.7, 0.05, 2.0),
                ("vertices_min", 3.0, 3.0, 16.0),
                ("vertices_max", 7.0, 3.0, 16.0),
            ],
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown degradation kind {s:?}")))
    }
}

/// One synthetic degradation: a kind, parameter overrides and a seed. The
/// seed fixes the task's evaluation set (see [`TaskSet::eval_pairs`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind) -> Self {
        Self {
            kind,
            params: BTreeMap::new(),
            seed: 0,
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Override or documented default.
    pub fn param(&self, name: &str) -> f64 {
        self.params.get(name).copied().unwrap_or_else(|| {
            self.kind
                .defaults()
                .iter()
                .find(|p| p.0 == name)
                .map(|p| p.1)
                .expect("parameter table covers every name the operators read")
        })
    }

    /// Uniform draw from `[{stem}_min, {stem}_max]`.
    pub(crate) fn draw<R: Rng + ?Sized>(&self, stem: &str, rng: &mut R) -> f64 {
        let lo = self.param(&format!("{stem}_min"));
        let hi = self.param(&format!("{stem}_max"));
        rng.random_range(lo..=hi)
    }

    pub fn validate(&self) -> Result<()> {
        let table = self.kind.defaults();
        for (name, &value) in &self.params {
            let Some(&(_, _, lo, hi)) = table.iter().find(|p| p.0 == name) else {
                return Err(Error::Config(format!(
                    "{}: unknown parameter {name:?}",
                    self.kind
                )));
            };
            if !(lo..=hi).contains(&value) {
                return Err(Error::Config(format!(
                    "{}: parameter {name} = {value} outside [{lo}, {hi}]",
                    self.kind
                )));
            }
        }
        for (name, ..) in table {
            if let Some(stem) = name.strip_suffix("_min") {
                let hi_name = format!("{stem}_max");
                if self.param(name) > self.param(&hi_name) {
                    return Err(Error::Config(format!(
                        "{}: {name} exceeds {hi_name}",
                        self.kind
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Corrupts a clean `[3, H, W]` image; the result is clipped to `[0, 1]`.
pub fn apply_degradation<R: Rng + ?Sized>(
    clean: &Tensor<f64>,
    spec: &DegradationSpec,
    rng: &mut R,
) -> Result<Tensor<f64>> {
    if clean.rank() != 3 || clean.shape()[0] != 3 {
        return dim_err(format!("degradations need a [3, H, W] image, got {:?}", clean.shape()));
    }
    spec.validate()?;
    Ok(kinds::apply(clean, spec, rng).clamp(0.0, 1.0))
}

/// Reads a P6 file and returns a random `height × width` crop.
pub fn load_clean_patch<R: Rng + ?Sized>(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<Tensor<f64>> {
    random_crop(&read_ppm(path)?, height, width, rng)
}

fn random_crop<R: Rng + ?Sized>(img: &Tensor<f64>, height: usize, width: usize, rng: &mut R) -> Result<Tensor<f64>> {
    let (h, w) = (img.dim_back(1), img.dim_back(0));
    if h < height || w < width {
        return dim_err(format!("image is {h}×{w}, smaller than the {height}×{width} crop"));
    }
    let top = rng.random_range(0..=h - height);
    let left = rng.random_range(0..=w - width);
    let d = img.data();
    Ok(Tensor::from_fn(&[3, height, width], |i| {
        let (c, r, q) = (i / (height * width), (i / width) % height, i % width);
        d[c * h * w + (top + r) * w + left + q]
    }))
}

/// Where clean images come from.
#[derive(Clone, Debug, Default)]
pub enum CleanSource {
    #[default]
    Synthetic,
    /// Pre-loaded images, cropped at random.
    Images(Vec<Tensor<f64>>),
}

impl CleanSource {
    /// Loads every `*.ppm` in `dir`, in file-name order.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!("no .ppm files in {}", dir.display())));
        }
        Ok(Self::Images(paths.iter().map(read_ppm).collect::<Result<_>>()?))
    }

    pub fn draw<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> Result<Tensor<f64>> {
        match self {
            Self::Synthetic => gen_clean_patch(height, width, rng),
            Self::Images(images) => {
                let img = &images[rng.random_range(0..images.len())];
                random_crop(img, height, width, rng)
            }
        }
    }
}

/// A named degradation, either seen during pre-training or held out for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "TaskRepr", into = "TaskRepr")]
pub struct Task {
    pub name: String,
    pub spec: DegradationSpec,
    pub held_out: bool,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    kind: DegradationKind,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    held_out: bool,
}

impl From<TaskRepr> for Task {
    fn from(r: TaskRepr) -> Self {
        Task {
            name: r.name.unwrap_or_else(|| r.kind.name().to_string()),
            spec: DegradationSpec {
                kind: r.kind,
                params: r.params,
                seed: r.seed,
            },
            held_out: r.held_out,
        }
    }
}

impl From<Task> for TaskRepr {
    fn from(t: Task) -> Self {
        TaskRepr {
            name: Some(t.name),
            kind: t.spec.kind,
            params: t.spec.params,
            seed: t.spec.seed,
            held_out: t.held_out,
        }
    }
}

impl Task {
    pub fn new(name: &str, spec: DegradationSpec, held_out: bool) -> Self {
        Self {
            name: name.to_string(),
            spec,
            held_out,
        }
    }
}

/// Ordered task list; serialized as a plain JSON array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskSet(pub Vec<Task>);

/// Which tasks [`sample_pair`] may draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase<'a> {
    Pretrain,
    Finetune(&'a str),
}

/// A corrupted image, its clean source and the task that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub corrupted: Tensor<f64>,
    pub clean: Tensor<f64>,
    pub task: String,
}

impl Default for TaskSet {
    /// Five pre-training tasks (noise, light and heavy rain, raindrops,
    /// moiré) and two held-out ones (snow, shadow).
    fn default() -> Self {
        use DegradationKind::*;
        TaskSet(vec![
            Task::new("noise", DegradationSpec::new(GaussianNoise).with_seed(101), false),
            Task::new("rain_light", DegradationSpec::new(RainStreaks).with_seed(102), false),
            Task::new(
                "rain_heavy",
                DegradationSpec::new(RainStreaks)
                    .with("count_min", 10.0)
                    .with("count_max", 18.0)
                    .with("intensity_min", 0.6)
                    .with("intensity_max", 1.0)
                    .with_seed(103),
                false,
            ),
            Task::new("raindrops", DegradationSpec::new(Raindrops).with_seed(104), false),
            Task::new("moire", DegradationSpec::new(Moire).with_seed(105), false),
            Task::new("snow", DegradationSpec::new(Snow).with_seed(106), true),
            Task::new("shadow", DegradationSpec::new(Shadow).with_seed(107), true),
        ])
    }
}

impl TaskSet {
    pub fn validate(&self) -> Result<()> {
        if !self.0.iter().any(|t| !t.held_out) {
            return Err(Error::Config("tasks: at least one task must be pretrain-known".into()));
        }
        for (i, t) in self.0.iter().enumerate() {
            if self.0[..i].iter().any(|u| u.name == t.name) {
                return Err(Error::Config(format!("tasks: duplicate task name {:?}", t.name)));
            }
            t.spec
                .validate()
                .map_err(|e| Error::Config(format!("tasks.{}: {e}", t.name)))?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Task> {
        self.0.iter().find(|t| t.name == name).ok_or_else(|| {
            let known: Vec<_> = self.0.iter().map(|t| t.name.as_str()).collect();
            Error::Config(format!("task {name:?} is not in the task set (known: {})", known.join(", ")))
        })
    }

    pub fn pretrain_tasks(&self) -> impl Iterator<Item = &Task> {
        self.0.iter().filter(|t| !t.held_out)
    }

    /// The fixed evaluation pairs for a task, derived only from its seed.
    pub fn eval_pairs(
        &self,
        name: &str,
        count: usize,
        height: usize,
        width: usize,
        source: &CleanSource,
    ) -> Result<Vec<Pair>> {
        let task = self.get(name)?;
        let mut rng = substream(task.spec.seed, &format!("eval/{name}"));
        (0..count)
            .map(|_| make_pair(task, source, height, width, &mut rng))
            .collect()
    }
}

fn make_pair<R: Rng + ?Sized>(
    task: &Task,
    source: &CleanSource,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<Pair> {
    let clean = source.draw(height, width, rng)?;
    let corrupted = apply_degradation(&clean, &task.spec, rng)?;
    Ok(Pair {
        corrupted,
        clean,
        task: task.name.clone(),
    })
}

/// Draws one training pair. Pre-training picks a pretrain-known task
/// uniformly; fine-tuning always uses the named task.
pub fn sample_pair<R: Rng + ?Sized>(
    tasks: &TaskSet,
    phase: Phase<'_>,
    source: &CleanSource,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<Pair> {
    let task = match phase {
        Phase::Pretrain => {
            let known: Vec<&Task> = tasks.pretrain_tasks().collect();
            if known.is_empty() {
                return Err(Error::Config("tasks: no pretrain-known task".into()));
            }
            known[rng.random_range(0..known.len())]
        }
        Phase::Finetune(name) => tasks.get(name)?,
    };
    make_pair(task, source, height, width, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in DegradationKind::ALL {
            assert_eq!(k.name().parse::<DegradationKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!(matches!("fog".parse::<DegradationKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_kind_in_manifest_is_rejected() {
        let r: std::result::Result<TaskSet, _> = serde_json::from_str(r#"[{"kind": "fog"}]"#);
        assert!(r.is_err());
    }

    #[test]
    fn manifest_defaults_name_to_kind() {
        let t: TaskSet = serde_json::from_str(r#"[{"kind": "snow", "held_out": true}]"#).unwrap();
        assert_eq!(t.0[0].name, "snow");
        assert!(t.0[0].held_out);
        let back: TaskSet = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn validation_names_the_parameter() {
        let s = DegradationSpec::new(DegradationKind::GaussianNoise).with("sigma", 3.0);
        assert!(s.validate().unwrap_err().to_string().contains("sigma"));
        let s = DegradationSpec::new(DegradationKind::GaussianNoise).with("sigma_min", 60.0);
        assert!(s.validate().unwrap_err().to_string().contains("sigma_min"));
    }

    #[test]
    fn all_held_out_is_invalid() {
        let t = TaskSet(vec![Task::new("snow", DegradationSpec::new(DegradationKind::Snow), true)]);
        assert!(t.validate().is_err());
        assert!(TaskSet::default().validate().is_ok());
    }

    #[test]
    fn crop_of_full_size_is_identity() {
        let img = Tensor::from_fn(&[3, 4, 5], |i| i as f64);
        let mut rng = substream(0, "c");
        assert_eq!(random_crop(&img, 4, 5, &mut rng).unwrap(), img);
        assert!(random_crop(&img, 5, 5, &mut rng).is_err());
    }
}
