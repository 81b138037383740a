use std::collections::BTreeMap;

use rand::seq::{index, IndexedRandom};
use rand::Rng;

use super::{LabeledImage, VideoClip};
use crate::error::{Error, Result};

/// A support set and a query set drawn from one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<LabeledImage>,
    pub query: Vec<LabeledImage>,
    pub class_id: usize,
    /// Set when the query masks are evaluation ground truth that the model
    /// must not see (video episodes).
    pub query_masks_hidden: bool,
}

impl Episode {
    pub fn new(support: Vec<LabeledImage>, query: Vec<LabeledImage>) -> Result<Self> {
        let first = support
            .first()
            .ok_or_else(|| Error::Validation("episode needs at least one support image".into()))?;
        if query.is_empty() {
            return Err(Error::Validation(
                "episode needs at least one query image".into(),
            ));
        }
        let class_id = first.class_id();
        if support
            .iter()
            .chain(&query)
            .any(|s| s.class_id() != class_id)
        {
            return Err(Error::Validation(
                "episode members must share one class".into(),
            ));
        }
        let size = first.size();
        if support.iter().chain(&query).any(|s| s.size() != size) {
            return Err(Error::shape("episode images must share one size"));
        }
        Ok(Self {
            support,
            query,
            class_id,
            query_masks_hidden: false,
        })
    }
}

/// Labelled images indexed by class.
#[derive(Clone, Debug, Default)]
pub struct ImageDataset {
    items: Vec<LabeledImage>,
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl ImageDataset {
    pub fn new(items: Vec<LabeledImage>) -> Self {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            by_class.entry(it.class_id()).or_default().push(i);
        }
        Self { items, by_class }
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.by_class.keys().copied().collect()
    }

    pub fn class_count(&self, class_id: usize) -> usize {
        self.by_class.get(&class_id).map_or(0, Vec::len)
    }
}

impl From<Vec<LabeledImage>> for ImageDataset {
    fn from(items: Vec<LabeledImage>) -> Self {
        Self::new(items)
    }
}

/// Draw one episode: a class uniformly among those with enough samples,
/// then `n_shot + k_query` distinct images of it.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &ImageDataset,
    n_shot: usize,
    k_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_shot == 0 || k_query == 0 {
        return Err(Error::Sampling(
            "n_shot and k_query must be at least 1".into(),
        ));
    }
    let need = n_shot + k_query;
    let eligible: Vec<usize> = dataset
        .by_class
        .iter()
        .filter(|(_, v)| v.len() >= need)
        .map(|(&c, _)| c)
        .collect();
    let &class = eligible.choose(rng).ok_or_else(|| {
        Error::Sampling(format!(
            "no class has {need} samples for a {n_shot}-shot/{k_query}-query episode"
        ))
    })?;
    let pool = &dataset.by_class[&class];
    let picks = index::sample(rng, pool.len(), need);
    let mut chosen = picks.iter().map(|i| dataset.items[pool[i]].clone());
    let support = chosen.by_ref().take(n_shot).collect();
    let query = chosen.collect();
    Episode::new(support, query)
}

/// Annotated prefix as support, the remaining frames (in order) as query.
/// Query masks are the clip's evaluation ground truth and are flagged hidden;
/// clips without it get all-zero placeholders.
pub fn clip_to_episode(clip: &VideoClip) -> Episode {
    let support = clip.support();
    let class_id = clip.class_id();
    let query = clip
        .query_frames()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mask = clip
                .evaluation_masks()
                .map(|m| m[i].clone())
                .unwrap_or_else(|| crate::tensor::Tensor::zeros(&f.shape()[1..]));
            LabeledImage::new(f.clone(), mask, class_id).expect("clip frames are valid")
        })
        .collect();
    Episode {
        support,
        query,
        class_id,
        query_masks_hidden: true,
    }
}
