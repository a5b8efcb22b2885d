use rand::seq::SliceRandom;
use rand::Rng;

use super::{EvalError, Result};
use crate::image::Image;
use crate::seed;
use crate::world::World;

/// Labeled images per class in the few-shot (1%) condition.
pub const FEW_SHOT_PER_CLASS: usize = 13;

/// `(image, label)` pairs over a fixed vocabulary.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub items: Vec<(Image, usize)>,
    pub classes: Vec<String>,
    /// Set when every class holds exactly this many items.
    pub per_class_count: Option<usize>,
}

impl LabeledSet {
    pub fn new(items: Vec<(Image, usize)>, classes: Vec<String>) -> Result<Self> {
        if let Some(&(_, bad)) = items.iter().find(|(_, y)| *y >= classes.len()) {
            return Err(EvalError::LabelOutOfRange {
                label: bad,
                classes: classes.len(),
            });
        }
        let counts = counts(&items, classes.len());
        let per_class_count = match counts.first() {
            Some(&k) if counts.iter().all(|&c| c == k) => Some(k),
            _ => None,
        };
        Ok(LabeledSet {
            items,
            classes,
            per_class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn images(&self) -> Vec<Image> {
        self.items.iter().map(|(im, _)| im.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|(_, y)| *y).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        counts(&self.items, self.classes.len())
    }

    /// Classes with no items.
    pub fn missing_classes(&self) -> Vec<usize> {
        self.class_counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// `k` items per class drawn without replacement.
    pub fn stratified(&self, k: usize, seed: u64) -> Result<LabeledSet> {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes.len()];
        for (i, (_, y)) in self.items.iter().enumerate() {
            by_class[*y].push(i);
        }
        let mut rng = seed::rng(&[seed, seed::tag("stratified")]);
        let mut items = Vec::with_capacity(k * self.classes.len());
        for (c, idx) in by_class.iter_mut().enumerate() {
            if idx.len() < k {
                return Err(EvalError::MissingClass(c));
            }
            idx.shuffle(&mut rng);
            items.extend(idx[..k].iter().map(|&i| self.items[i].clone()));
        }
        LabeledSet::new(items, self.classes.clone())
    }

    /// Same items with the labels permuted.
    pub fn shuffled_labels(&self, seed: u64) -> LabeledSet {
        let mut labels = self.labels();
        labels.shuffle(&mut seed::rng(&[seed, seed::tag("label-shuffle")]));
        let items = self
            .items
            .iter()
            .zip(labels)
            .map(|((im, _), y)| (im.clone(), y))
            .collect();
        LabeledSet::new(items, self.classes.clone()).expect("labels stay in vocabulary")
    }
}

fn counts(items: &[(Image, usize)], classes: usize) -> Vec<usize> {
    let mut c = vec![0; classes];
    for (_, y) in items {
        c[*y] += 1;
    }
    c
}

/// Samples frames at random times in `[0, horizon_s)` and keeps the first
/// `k` per dominant class. Fails if a class is still short after the try
/// budget is spent.
pub fn labeled_from_world(
    world: &World,
    k: usize,
    horizon_s: f64,
    seed: u64,
) -> Result<LabeledSet> {
    let c = world.spec().num_classes;
    let classes: Vec<String> = (0..c).map(|i| format!("class_{i:02}")).collect();
    let mut per: Vec<Vec<Image>> = vec![Vec::new(); c];
    let mut rng = seed::rng(&[seed, seed::tag("labeled")]);
    let budget = 200 * c * k.max(1);
    let mut filled = 0;
    for _ in 0..budget {
        if filled == c {
            break;
        }
        let t = rng.random::<f64>() * horizon_s;
        let (frame, ann) = world.render_frame(t);
        let bucket = &mut per[ann.dominant_class];
        if bucket.len() < k {
            bucket.push(frame.image);
            if bucket.len() == k {
                filled += 1;
            }
        }
    }
    if let Some(short) = per.iter().position(|b| b.len() < k) {
        return Err(EvalError::MissingClass(short));
    }
    let items = per
        .into_iter()
        .enumerate()
        .flat_map(|(y, ims)| ims.into_iter().map(move |im| (im, y)))
        .collect();
    LabeledSet::new(items, classes)
}
