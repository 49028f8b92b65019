//! Episode sampling for the few-shot, semi-supervised and active protocols,
//! plus dataset storage, augmentation, ingestion and the synthetic generator.

mod dataset;
pub mod ingest;
mod synth;

use std::fmt;
use std::str::FromStr;

use graphshot_tensor::Tensor;
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;

pub use dataset::{augment_rotations, rotate90, ClassImages, DatasetSplit, SplitName};
pub use synth::{class_distributions, synth_dataset, synth_splits, ClassDistribution, SynthSpec};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EpisodeMode {
    FewShot,
    Semi,
    Active,
}

impl fmt::Display for EpisodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpisodeMode::FewShot => "fewshot",
            EpisodeMode::Semi => "semi",
            EpisodeMode::Active => "active",
        })
    }
}

impl FromStr for EpisodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fewshot" => Ok(EpisodeMode::FewShot),
            "semi" => Ok(EpisodeMode::Semi),
            "active" => Ok(EpisodeMode::Active),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Location of an image inside a [`DatasetSplit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageRef {
    pub class: usize,
    pub index: usize,
}

/// One sampled task. Labels are 0-based episode labels in `0..way`.
///
/// Graph node order is fixed: labeled images, then unlabeled images, then
/// the query.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub mode: EpisodeMode,
    pub way: usize,
    pub shots: usize,
    /// Dataset class index for each episode label.
    pub classes: Vec<usize>,
    pub labeled: Vec<(ImageRef, usize)>,
    pub unlabeled: Vec<ImageRef>,
    /// True labels of the unlabeled images, hidden from the model except
    /// through an active query.
    pub unlabeled_labels: Vec<usize>,
    pub query: ImageRef,
    pub answer: usize,
    /// Position within `unlabeled` of the only image that disambiguates the
    /// query, for constructed informative-query tasks.
    pub informative: Option<usize>,
}

impl Episode {
    pub fn node_count(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + 1
    }

    pub fn query_node(&self) -> usize {
        self.node_count() - 1
    }

    pub fn unlabeled_nodes(&self) -> std::ops::Range<usize> {
        self.labeled.len()..self.labeled.len() + self.unlabeled.len()
    }

    /// All image references in node order.
    pub fn images(&self) -> impl Iterator<Item = ImageRef> + '_ {
        self.labeled
            .iter()
            .map(|(r, _)| *r)
            .chain(self.unlabeled.iter().copied())
            .chain(std::iter::once(self.query))
    }

    /// Gathers the node images into model input.
    pub fn to_input(&self, split: &DatasetSplit) -> Result<EpisodeInput> {
        let [c, h, w] = split.image_shape();
        let n = self.node_count();
        let mut data = Vec::with_capacity(n * c * h * w);
        for r in self.images() {
            data.extend(split.image(r.class, r.index).iter().map(|&v| v as f64));
        }
        let mut node_labels: Vec<Option<usize>> = self.labeled.iter().map(|(_, l)| Some(*l)).collect();
        node_labels.extend(std::iter::repeat_n(None, self.unlabeled.len() + 1));
        EpisodeInput::new(
            Tensor::new(&[n, c, h, w], data)?,
            self.way,
            node_labels,
            self.unlabeled_labels.clone(),
            self.answer,
        )
    }
}

/// Model-facing view of an episode: node images and label information.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeInput {
    /// `[nodes, c, h, w]` in node order.
    pub images: Tensor,
    pub way: usize,
    /// Observed label per node; `None` for unlabeled nodes and the query.
    pub node_labels: Vec<Option<usize>>,
    /// Node indices of the unlabeled images.
    pub unlabeled: Vec<usize>,
    /// Hidden labels aligned with `unlabeled`.
    pub unlabeled_labels: Vec<usize>,
    pub query: usize,
    pub answer: usize,
}

impl EpisodeInput {
    /// Node order must be labeled, unlabeled, query; the unlabeled nodes are
    /// the `None` entries before the last node.
    pub fn new(
        images: Tensor,
        way: usize,
        node_labels: Vec<Option<usize>>,
        unlabeled_labels: Vec<usize>,
        answer: usize,
    ) -> Result<Self> {
        let n = node_labels.len();
        if images.shape().first() != Some(&n) || n < 2 {
            return Err(Error::Shape(format!(
                "{} node labels for image batch {:?}",
                n,
                images.shape()
            )));
        }
        if node_labels[n - 1].is_some() {
            return Err(Error::Protocol("the query node must be unlabeled".into()));
        }
        if answer >= way || node_labels.iter().flatten().any(|&l| l >= way) {
            return Err(Error::Protocol(format!("labels must lie in 0..{way}")));
        }
        let unlabeled: Vec<usize> = (0..n - 1).filter(|&i| node_labels[i].is_none()).collect();
        if unlabeled_labels.len() != unlabeled.len() {
            return Err(Error::Protocol(format!(
                "{} hidden labels for {} unlabeled nodes",
                unlabeled_labels.len(),
                unlabeled.len()
            )));
        }
        Ok(Self { images, way, node_labels, unlabeled, unlabeled_labels, query: n - 1, answer })
    }

    pub fn node_count(&self) -> usize {
        self.node_labels.len()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.node_labels.iter().flatten().copied().collect()
    }

    /// The episode with every unlabeled node removed.
    pub fn labeled_only(&self) -> Result<EpisodeInput> {
        let keep: Vec<usize> = (0..self.node_count()).filter(|i| !self.unlabeled.contains(i)).collect();
        let per = self.images.numel() / self.node_count();
        let mut shape = self.images.shape().to_vec();
        shape[0] = keep.len();
        let data = keep
            .iter()
            .flat_map(|&i| self.images.data()[i * per..(i + 1) * per].iter().copied())
            .collect();
        EpisodeInput::new(
            Tensor::new(&shape, data)?,
            self.way,
            keep.iter().map(|&i| self.node_labels[i]).collect(),
            Vec::new(),
            self.answer,
        )
    }
}

/// Protocol parameters for [`sample_episode`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub way: usize,
    /// Labeled images per class.
    pub shots: usize,
    pub unlabeled_per_class: usize,
    pub mode: EpisodeMode,
}

impl EpisodeSpec {
    pub fn few_shot(way: usize, shots: usize) -> Self {
        Self { way, shots, unlabeled_per_class: 0, mode: EpisodeMode::FewShot }
    }

    /// `shots` images per class of which `labeled_fraction` keep their label.
    pub fn partially_labeled(way: usize, shots: usize, labeled_fraction: f64, mode: EpisodeMode) -> Result<Self> {
        if !(0.0..=1.0).contains(&labeled_fraction) {
            return Err(Error::Config(format!("labeled fraction {labeled_fraction} outside [0,1]")));
        }
        let labeled = (shots as f64 * labeled_fraction).round() as usize;
        if labeled == 0 {
            return Err(Error::Config(format!(
                "labeled fraction {labeled_fraction} of {shots} shots leaves no labeled image"
            )));
        }
        Ok(match mode {
            EpisodeMode::FewShot => Self::few_shot(way, labeled),
            _ => Self { way, shots: labeled, unlabeled_per_class: shots - labeled, mode },
        })
    }
}

/// Samples `way` distinct classes, `shots` labeled and
/// `unlabeled_per_class` unlabeled images from each, and one extra query
/// image from a uniformly chosen one of those classes. No image appears
/// twice within an episode.
pub fn sample_episode(split: &DatasetSplit, spec: &EpisodeSpec, rng: &mut impl Rng) -> Result<Episode> {
    let EpisodeSpec { way, shots, unlabeled_per_class: r, mode } = *spec;
    match mode {
        EpisodeMode::FewShot if r > 0 => {
            return Err(Error::Protocol("few-shot episodes carry no unlabeled images".into()));
        }
        EpisodeMode::Semi | EpisodeMode::Active if r == 0 => {
            return Err(Error::Protocol(format!("{mode} episodes need unlabeled images")));
        }
        _ => {}
    }
    if way < 2 || shots == 0 {
        return Err(Error::Sampling(format!("need way ≥ 2 and shots ≥ 1, got {way}-way {shots}-shot")));
    }
    if split.class_count() < way {
        return Err(Error::Sampling(format!(
            "{}-way episode from a split of {} classes",
            way,
            split.class_count()
        )));
    }
    let classes = index::sample(rng, split.class_count(), way).into_vec();
    let need = shots + r + 1;
    if let Some(&c) = classes.iter().find(|&&c| split.image_count(c) < need) {
        return Err(Error::Sampling(format!(
            "class {} has {} images, episode needs {need}",
            split.classes()[c].id,
            split.image_count(c)
        )));
    }
    let answer = rng.random_range(0..way);
    let mut labeled = Vec::with_capacity(way * shots);
    let mut unlabeled = Vec::with_capacity(way * r);
    let mut unlabeled_labels = Vec::with_capacity(way * r);
    let mut query = None;
    for (label, &class) in classes.iter().enumerate() {
        let take = shots + r + usize::from(label == answer);
        let picks = index::sample(rng, split.image_count(class), take).into_vec();
        let at = |i: usize| ImageRef { class, index: picks[i] };
        labeled.extend((0..shots).map(|i| (at(i), label)));
        unlabeled.extend((shots..shots + r).map(at));
        unlabeled_labels.extend(std::iter::repeat_n(label, r));
        if label == answer {
            query = Some(at(shots + r));
        }
    }
    Ok(Episode {
        mode,
        way,
        shots,
        classes,
        labeled,
        unlabeled,
        unlabeled_labels,
        query: query.expect("query class is among the sampled classes"),
        answer,
        informative: None,
    })
}

/// Constructed active-learning task in which exactly one unlabeled image is
/// informative.
///
/// Two of the `way` classes are hidden: they get no labeled image. The query
/// comes from one hidden class. The unlabeled set holds one image of the
/// query's class and `unlabeled - 1` images of visible classes, in random
/// order. Without revealing the informative image the query can at best be
/// narrowed to the two hidden classes.
pub fn sample_informative_episode(
    split: &DatasetSplit,
    way: usize,
    unlabeled: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if way < 3 || unlabeled == 0 {
        return Err(Error::Sampling(format!(
            "informative-query task needs way ≥ 3 and at least one unlabeled image, got {way}/{unlabeled}"
        )));
    }
    if split.class_count() < way {
        return Err(Error::Sampling(format!("{way}-way episode from {} classes", split.class_count())));
    }
    let classes = index::sample(rng, split.class_count(), way).into_vec();
    let hidden = index::sample(rng, way, 2).into_vec();
    let answer = hidden[rng.random_range(0..2)];
    let visible: Vec<usize> = (0..way).filter(|l| !hidden.contains(l)).collect();

    // Images needed per label: one labeled image per visible class plus its
    // share of the distractors; two for the query class.
    let mut need = vec![0usize; way];
    for &l in &visible {
        need[l] = 1;
    }
    need[answer] = 2;
    let distractors: Vec<usize> = (1..unlabeled).map(|_| visible[rng.random_range(0..visible.len())]).collect();
    for &l in &distractors {
        need[l] += 1;
    }
    let mut picks: Vec<Vec<usize>> = Vec::with_capacity(way);
    for (label, &class) in classes.iter().enumerate() {
        if split.image_count(class) < need[label] {
            return Err(Error::Sampling(format!(
                "class {} has {} images, task needs {}",
                split.classes()[class].id,
                split.image_count(class),
                need[label]
            )));
        }
        picks.push(index::sample(rng, split.image_count(class), need[label]).into_vec());
    }
    let mut next = vec![0usize; way];
    let mut take = |label: usize| {
        let r = ImageRef { class: classes[label], index: picks[label][next[label]] };
        next[label] += 1;
        r
    };
    let labeled: Vec<(ImageRef, usize)> = visible.iter().map(|&l| (take(l), l)).collect();
    let query = take(answer);
    let mut pool: Vec<(ImageRef, usize)> = vec![(take(answer), answer)];
    pool.extend(distractors.iter().map(|&l| (take(l), l)));
    pool.shuffle(rng);
    let informative = pool.iter().position(|&(_, l)| l == answer);
    Ok(Episode {
        mode: EpisodeMode::Active,
        way,
        shots: 1,
        classes,
        labeled,
        unlabeled: pool.iter().map(|p| p.0).collect(),
        unlabeled_labels: pool.iter().map(|p| p.1).collect(),
        query,
        answer,
        informative,
    })
}
