//! Mini-batch plumbing shared by every training stage: seeded epoch
//! schedules with flip augmentation, batch assembly and accuracy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::netspec::Network;
use crate::region::RegionBox;
use crate::synthgen::{Dataset, SyntheticSample};
use crate::tensor::{Graph, Real, SgdState, Tensor};

/// Optimizer and loop settings for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hflip: bool,
}

impl SgdConfig {
    pub fn optimizer<T: Real>(&self) -> Result<SgdState<T>> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        SgdState::new(
            T::from_f64_lossy(self.learning_rate),
            T::from_f64_lossy(self.momentum),
            T::from_f64_lossy(self.weight_decay),
        )
    }
}

/// One training example reference: sample index and whether it is mirrored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Item {
    pub index: usize,
    pub flip: bool,
}

/// Shuffled batches for `epoch`. Each item is mirrored with probability 1/2
/// when `hflip` is set. A pure function of its arguments.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize, hflip: bool) -> Vec<Vec<Item>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let items: Vec<Item> = order
        .into_iter()
        .map(|index| Item {
            index,
            flip: hflip && rng.random_bool(0.5),
        })
        .collect();
    items.chunks(batch_size.max(1)).map(<[Item]>::to_vec).collect()
}

/// Items in dataset order, unflipped, chunked for inference.
pub fn eval_batches(n: usize, batch_size: usize) -> Vec<Vec<Item>> {
    (0..n)
        .map(|index| Item { index, flip: false })
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[Item]>::to_vec)
        .collect()
}

/// Network input value for an 8-bit pixel: centered on zero.
#[inline]
pub fn pixel_input(p: u8) -> f32 {
    p as f32 / 255.0 - 0.5
}

/// `[B, 3, S, S]` network input for whole images.
pub fn image_batch(ds: &Dataset, items: &[Item]) -> Tensor<f32> {
    let s = ds.image_size;
    let plane = s * s;
    let mut data = Vec::with_capacity(items.len() * 3 * plane);
    for it in items {
        let px = &ds.samples[it.index].pixels;
        if it.flip {
            for row in px.chunks_exact(s) {
                data.extend(row.iter().rev().map(|&p| pixel_input(p)));
            }
        } else {
            data.extend(px.iter().map(|&p| pixel_input(p)));
        }
    }
    Tensor::new(vec![items.len(), 3, s, s], data).expect("batch dims")
}

/// `[B, 3, h, w]` crops. `boxes[k]` is given in the (possibly mirrored)
/// coordinates of item `k`; all boxes must share one size.
pub fn crop_batch(ds: &Dataset, items: &[Item], boxes: &[RegionBox]) -> Result<Tensor<f32>> {
    let (w, h) = (boxes[0].width(), boxes[0].height());
    if boxes.iter().any(|b| b.width() != w || b.height() != h) {
        return Err(Error::shape("crops in one batch must share a size"));
    }
    let mut data = Vec::with_capacity(items.len() * 3 * w * h);
    for (it, b) in items.iter().zip(boxes) {
        crop_into(&ds.samples[it.index], it.flip, b, &mut data);
    }
    Tensor::new(vec![items.len(), 3, h, w], data)
}

fn crop_into(sample: &SyntheticSample, flip: bool, b: &RegionBox, out: &mut Vec<f32>) {
    let s = sample.size;
    for c in 0..3 {
        for y in b.y0..b.y1 {
            let row = &sample.pixels[(c * s + y) * s..(c * s + y + 1) * s];
            for x in b.x0..b.x1 {
                let sx = if flip { s - 1 - x } else { x };
                out.push(pixel_input(row[sx]));
            }
        }
    }
}

/// `[3, h, w]` crop of one unflipped sample.
pub fn crop(sample: &SyntheticSample, b: &RegionBox) -> Tensor<f32> {
    let mut data = Vec::with_capacity(3 * b.width() * b.height());
    crop_into(sample, false, b, &mut data);
    Tensor::new(vec![3, b.height(), b.width()], data).expect("crop dims")
}

/// Row-major `[B, M]` labels as 0/1 reals.
pub fn label_batch<T: Real>(ds: &Dataset, items: &[Item]) -> Vec<T> {
    items
        .iter()
        .flat_map(|it| ds.samples[it.index].labels.iter().map(|&l| T::from_u8(l).unwrap()))
        .collect()
}

/// One pass of sigmoid cross-entropy training over `batches`, with inputs
/// built by `input`. Returns the mean batch loss.
pub fn fit_epoch(
    net: &mut Network<f32>,
    opt: &mut SgdState<f32>,
    data: &Dataset,
    batches: &[Vec<Item>],
    input: impl Fn(&[Item]) -> Result<Tensor<f32>>,
) -> Result<f64> {
    let mut total = 0.0;
    for items in batches {
        let mut g = Graph::new();
        let vars = net.params.bind(&mut g, true);
        let x = g.constant(input(items)?);
        let out = net.forward(&mut g, x, &vars)?;
        let loss = g.sigmoid_bce(out.logits, &label_batch::<f32>(data, items))?;
        total += g.value(loss).data()[0] as f64;
        g.backward(loss)?;
        net.params.collect_grads(&mut g, &vars)?;
        opt.step(&mut net.params)?;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// `[N, M]` logits of `net` on whole images of `ds`.
pub fn predict_images(net: &Network<f32>, ds: &Dataset) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(ds.len() * ds.attribute_count());
    for items in eval_batches(ds.len(), 64) {
        out.extend_from_slice(net.predict(&image_batch(ds, &items))?.data());
    }
    Ok(out)
}

/// Per-attribute binary accuracy at the 0.5 probability threshold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Accuracy {
    pub per_attribute: Vec<f64>,
    pub mean: f64,
}

impl Accuracy {
    /// `logits` is row-major `[N, M]`; a sample is predicted positive when
    /// its sigmoid exceeds 0.5, i.e. its logit is positive.
    pub fn from_logits(logits: &[f32], ds: &Dataset) -> Result<Self> {
        let m = ds.attribute_count();
        if ds.is_empty() {
            return Err(Error::Data("cannot evaluate on an empty dataset".into()));
        }
        if logits.len() != ds.len() * m {
            return Err(Error::shape(format!(
                "{} logits for {} samples of {m} attributes",
                logits.len(),
                ds.len()
            )));
        }
        let mut correct = vec![0usize; m];
        for (row, s) in logits.chunks_exact(m).zip(&ds.samples) {
            for j in 0..m {
                correct[j] += ((row[j] > 0.0) == (s.labels[j] == 1)) as usize;
            }
        }
        let per_attribute: Vec<f64> = correct.iter().map(|&c| c as f64 / ds.len() as f64).collect();
        let mean = per_attribute.iter().sum::<f64>() / m as f64;
        Ok(Self { per_attribute, mean })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, SplitCounts, SyntheticSpec};

    fn tiny() -> Dataset {
        let spec = SyntheticSpec {
            counts: SplitCounts {
                train: 5,
                val: 1,
                test: 1,
            },
            ..Default::default()
        };
        generate(&spec, 0).unwrap().train
    }

    #[test]
    fn schedule_is_a_permutation_and_reproducible() {
        let a = epoch_batches(103, 10, 4, 2, true);
        assert_eq!(a, epoch_batches(103, 10, 4, 2, true));
        assert_ne!(a, epoch_batches(103, 10, 4, 3, true));
        let mut seen: Vec<usize> = a.iter().flatten().map(|i| i.index).collect();
        seen.sort();
        assert_eq!(seen, (0..103).collect::<Vec<_>>());
        assert_eq!(a.len(), 11);
        assert!(epoch_batches(50, 8, 1, 0, false).iter().flatten().all(|i| !i.flip));
    }

    #[test]
    fn flipped_batch_matches_flipped_sample() {
        let ds = tiny();
        let flipped = Dataset {
            samples: ds.samples.iter().map(crate::synthgen::hflip_augment).collect(),
            ..ds.clone()
        };
        let item = [Item { index: 2, flip: true }];
        let plain = [Item { index: 2, flip: false }];
        assert_eq!(image_batch(&ds, &item), image_batch(&flipped, &plain));
        let b = RegionBox::new(3, 5, 21, 23).unwrap();
        assert_eq!(
            crop_batch(&ds, &item, &[b]).unwrap(),
            crop_batch(&flipped, &plain, &[b]).unwrap()
        );
    }

    #[test]
    fn accuracy_of_perfect_and_constant_predictors() {
        let ds = tiny();
        let m = ds.attribute_count();
        let perfect: Vec<f32> = ds
            .samples
            .iter()
            .flat_map(|s| s.labels.iter().map(|&l| if l == 1 { 3.0 } else { -3.0 }))
            .collect();
        let acc = Accuracy::from_logits(&perfect, &ds).unwrap();
        assert!(acc.per_attribute.iter().all(|&a| a == 1.0));
        let constant = vec![1.0f32; ds.len() * m];
        let acc = Accuracy::from_logits(&constant, &ds).unwrap();
        let rates = ds.positive_rates();
        for (a, r) in acc.per_attribute.iter().zip(rates) {
            assert!((a - r).abs() < 1e-12);
        }
        let mean = acc.per_attribute.iter().sum::<f64>() / m as f64;
        assert_eq!(acc.mean, mean);
        assert!(Accuracy::from_logits(&[], &ds.take(0)).is_err());
    }
}
