//! Region localization network: a conv trunk, one wide conv holding `N`
//! maps per attribute, GAP and a bias-free grouped classifier. Class
//! activation maps of the grouped classifier locate the image region each
//! attribute depends on.
//!
//! Training can attach an auxiliary classifier (two dense layers on the
//! flattened trunk output) whose loss is added to the localization loss;
//! the auxiliary head is dropped afterwards.

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imageio::{normalized_gray, Image8};
use crate::netspec::{self, Network, NetworkSpec};
use crate::region::RegionBox;
use crate::synthgen::{Dataset, SyntheticSample};
use crate::tensor::{kernels, Graph, ParamSet, Real, Tensor, Var};
use crate::train::{self, Accuracy, Item, SgdConfig};

/// Default crop side as a fraction of the image side (64 of 224).
pub const PATCH_FRAC: f64 = 2.0 / 7.0;
pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Clone, Debug)]
pub struct FrlNetwork<T: Real = f32> {
    /// Localization branch.
    pub net: Network<T>,
    /// Auxiliary classification branch: `cls.fc1.{weight,bias}` and
    /// `cls.fc2.{weight,bias}`.
    pub classifier: Option<ParamSet<T>>,
}

impl<T: Real> FrlNetwork<T> {
    /// He-initialized network; `hidden` adds an auxiliary branch of that
    /// width.
    pub fn new(spec: &NetworkSpec, hidden: Option<usize>, seed: u64) -> Result<Self> {
        let shapes = spec.validate(true)?;
        let net = netspec::build(spec, seed)?;
        let classifier = match hidden {
            None => None,
            Some(h) => {
                let trunk = trunk_layer(spec)?;
                let d = shapes[trunk].len();
                Some(dense_branch(d, h, spec.attribute_count, seed ^ 0x5eed_c1a5)?)
            }
        };
        Ok(Self { net, classifier })
    }

    pub fn from_network(net: Network<T>) -> Result<Self> {
        net.spec.validate(true)?;
        Ok(Self { net, classifier: None })
    }

    pub fn attribute_count(&self) -> usize {
        self.net.spec.attribute_count
    }

    /// Drops the auxiliary branch.
    pub fn detach(self) -> Network<T> {
        self.net
    }

    /// Localization logits and, when attached, auxiliary logits, on the
    /// tape. `loc` and `cls` come from binding `net.params` and `classifier`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        input: Var,
        loc: &[Var],
        cls: Option<&[Var]>,
    ) -> Result<(Var, Option<Var>)> {
        let fwd = self.net.forward(g, input, loc)?;
        let aux = match cls {
            None => None,
            Some(v) => {
                let trunk = fwd.layers[trunk_layer(&self.net.spec)?];
                let flat = g.flatten(trunk)?;
                let h = g.linear(flat, v[0], Some(v[1]))?;
                let h = g.relu(h);
                Some(g.linear(h, v[2], Some(v[3]))?)
            }
        };
        Ok((fwd.logits, aux))
    }

    /// Post-ReLU branch maps `[B, M*N, h, w]` for a batch of centered inputs.
    pub fn branch_maps(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.net.params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let last = self.net.spec.last_conv().expect("validated");
        let fwd = self.net.forward_until(&mut g, x, &vars, last + 1)?;
        Ok(g.value(fwd.logits).clone())
    }

    /// `[M, N]` grouped classifier weights.
    pub fn cam_weights(&self) -> &Tensor<T> {
        self.net.params.get("group_fc.weight").expect("validated localization net")
    }

    /// Localization and auxiliary logits for a batch, without gradients.
    pub fn predict(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut g = Graph::new();
        let loc = self.net.params.bind(&mut g, false);
        let cls = self.classifier.as_ref().map(|c| c.bind(&mut g, false));
        let x = g.constant(input.clone());
        let (a, b) = self.forward(&mut g, x, &loc, cls.as_deref())?;
        Ok((g.value(a).clone(), b.map(|b| g.value(b).clone())))
    }
}

fn trunk_layer(spec: &NetworkSpec) -> Result<usize> {
    match spec.last_conv() {
        Some(i) if i > 0 => Ok(i - 1),
        _ => Err(Error::Spec(format!("{}: no trunk before the branch conv", spec.name))),
    }
}

fn dense_branch<T: Real>(d: usize, h: usize, m: usize, seed: u64) -> Result<ParamSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |rows: usize, cols: usize| -> Result<Tensor<T>> {
        let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).map_err(|e| Error::Spec(e.to_string()))?;
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect(),
        )
    };
    let mut p = ParamSet::new();
    p.push("cls.fc1.weight", he(h, d)?)?;
    p.push("cls.fc1.bias", Tensor::zeros(&[h]))?;
    p.push("cls.fc2.weight", he(m, h)?)?;
    p.push("cls.fc2.bias", Tensor::zeros(&[m]))?;
    Ok(p)
}

/// Per-attribute activation maps at branch-conv resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSet {
    /// `[M, h, w]`.
    pub maps: Tensor<f32>,
    /// `(height, width)` of the source image.
    pub image_dims: (usize, usize),
}

impl HeatmapSet {
    pub fn map(&self, j: usize) -> &[f32] {
        let plane = self.maps.dims()[1] * self.maps.dims()[2];
        &self.maps.data()[j * plane..(j + 1) * plane]
    }

    pub fn map_dims(&self) -> (usize, usize) {
        (self.maps.dims()[1], self.maps.dims()[2])
    }
}

/// `H_j = sum_i w[j][i] * F_{j,i}` for every attribute of one sample's
/// branch maps (`[M*N, h, w]`).
pub fn cams_from_maps<T: Real>(maps: &[T], weights: &Tensor<T>, h: usize, w: usize) -> Vec<T> {
    let (m, n) = (weights.dims()[0], weights.dims()[1]);
    let plane = h * w;
    let wd = weights.data();
    let mut out = vec![T::zero(); m * plane];
    for j in 0..m {
        let dst = &mut out[j * plane..(j + 1) * plane];
        for i in 0..n {
            let wji = wd[j * n + i];
            let src = &maps[(j * n + i) * plane..(j * n + i + 1) * plane];
            for (d, &f) in dst.iter_mut().zip(src) {
                *d = *d + wji * f;
            }
        }
    }
    out
}

/// Activation maps for every attribute of a `[B, 3, S, S]` centered batch.
pub fn heatmaps_batch(frl: &FrlNetwork<f32>, input: &Tensor<f32>) -> Result<Vec<HeatmapSet>> {
    let maps = frl.branch_maps(input)?;
    let d = maps.dims().to_vec();
    let (b, c, h, w) = (d[0], d[1], d[2], d[3]);
    let image_dims = (input.dims()[2], input.dims()[3]);
    let m = frl.attribute_count();
    (0..b)
        .map(|k| {
            let sample = &maps.data()[k * c * h * w..(k + 1) * c * h * w];
            let cams = cams_from_maps(sample, frl.cam_weights(), h, w);
            Ok(HeatmapSet {
                maps: Tensor::new(vec![m, h, w], cams)?,
                image_dims,
            })
        })
        .collect()
}

/// Centers a `[3, S, S]` image with values in `[0, 1]` into a batch of one.
fn single_input(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let d = image.dims();
    if d.len() != 3 || d[0] != 3 {
        return Err(Error::shape(format!("expected a [3, H, W] image, got {d:?}")));
    }
    image.map(|v| v - 0.5).reshape(&[1, d[0], d[1], d[2]])
}

/// Heatmap of attribute `j` for one `[3, S, S]` image in `[0, 1]`.
pub fn cam_heatmap(frl: &FrlNetwork<f32>, image: &Tensor<f32>, j: usize) -> Result<Tensor<f32>> {
    let m = frl.attribute_count();
    if j >= m {
        return Err(Error::Index(format!("attribute {j} out of range for {m} attributes")));
    }
    let set = heatmaps_batch(frl, &single_input(image)?)?.remove(0);
    let (h, w) = set.map_dims();
    Tensor::new(vec![h, w], set.map(j).to_vec())
}

/// All heatmaps of one image.
pub fn heatmaps(frl: &FrlNetwork<f32>, image: &Tensor<f32>) -> Result<HeatmapSet> {
    Ok(heatmaps_batch(frl, &single_input(image)?)?.remove(0))
}

pub fn patch_side(image_dims: (usize, usize), patch_frac: f64) -> usize {
    let side = image_dims.0.min(image_dims.1);
    ((patch_frac * side as f64).round() as usize).clamp(1, side)
}

/// Bilinearly upsamples an `h x w` map to the image, takes the first maximum
/// in row-major order and places a patch-sized square around it.
pub fn locate_region(map: &[f32], map_dims: (usize, usize), image_dims: (usize, usize), patch_frac: f64) -> RegionBox {
    let (h, w) = map_dims;
    let (ih, iw) = image_dims;
    let up = kernels::bilinear_resize(map, 1, h, w, ih, iw);
    let mut best = 0;
    for (i, &v) in up.iter().enumerate() {
        if v > up[best] {
            best = i;
        }
    }
    let side = patch_side(image_dims, patch_frac);
    RegionBox::square_around(best % iw, best / iw, side, iw, ih)
}

/// Boxes for every attribute from a set of heatmaps.
pub fn regions_from(set: &HeatmapSet, patch_frac: f64) -> Vec<RegionBox> {
    let m = set.maps.dims()[0];
    (0..m)
        .map(|j| locate_region(set.map(j), set.map_dims(), set.image_dims, patch_frac))
        .collect()
}

/// One box and `[3, p, p]` crop per attribute.
pub fn extract_all_regions(
    frl: &FrlNetwork<f32>,
    sample: &SyntheticSample,
    patch_frac: f64,
) -> Result<Vec<(RegionBox, Tensor<f32>)>> {
    let set = heatmaps(frl, &sample.image())?;
    Ok(regions_from(&set, patch_frac)
        .into_iter()
        .map(|b| (b, train::crop(sample, &b)))
        .collect())
}

/// Regions for every sample of `ds`, for the plain and mirrored image.
/// Index as `[sample][flip as usize][attribute]`.
pub fn dataset_regions(frl: &FrlNetwork<f32>, ds: &Dataset, patch_frac: f64) -> Result<Vec<[Vec<RegionBox>; 2]>> {
    let mut out: Vec<[Vec<RegionBox>; 2]> = vec![Default::default(); ds.len()];
    for flip in [false, true] {
        for batch in train::eval_batches(ds.len(), 64) {
            let items: Vec<Item> = batch.iter().map(|it| Item { flip, ..*it }).collect();
            let sets = heatmaps_batch(frl, &train::image_batch(ds, &items))?;
            for (it, set) in items.iter().zip(sets) {
                out[it.index][flip as usize] = regions_from(&set, patch_frac);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrlEpoch {
    pub epoch: usize,
    pub localization_loss: f64,
    pub classifier_loss: Option<f64>,
    /// Running training accuracy over the epoch.
    pub localization_accuracy: f64,
    pub classifier_accuracy: Option<f64>,
}

fn running_correct(logits: &[f32], labels: &[f32]) -> usize {
    logits
        .iter()
        .zip(labels)
        .filter(|(&z, &y)| (z > 0.0) == (y == 1.0))
        .count()
}

/// Trains both branches jointly (or the localization branch alone when no
/// auxiliary head is attached). Each branch contributes one attribute loss;
/// their sum is minimized.
pub fn train_mnl(frl: &mut FrlNetwork<f32>, data: &Dataset, cfg: &SgdConfig) -> Result<Vec<FrlEpoch>> {
    let m = frl.attribute_count();
    if data.attribute_count() != m {
        return Err(Error::Data(format!(
            "dataset has {} labels per sample, network predicts {m}",
            data.attribute_count()
        )));
    }
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut opt_loc = cfg.optimizer::<f32>()?;
    let mut opt_cls = cfg.optimizer::<f32>()?;
    let mut report = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut loss_l, mut loss_c, mut ok_l, mut ok_c, mut steps) = (0.0, 0.0, 0, 0, 0);
        for items in train::epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch, cfg.hflip) {
            let labels = train::label_batch::<f32>(data, &items);
            let mut g = Graph::new();
            let loc = frl.net.params.bind(&mut g, true);
            let cls = frl.classifier.as_ref().map(|c| c.bind(&mut g, true));
            let x = g.constant(train::image_batch(data, &items));
            let (zl, zc) = frl.forward(&mut g, x, &loc, cls.as_deref())?;
            let ll = g.sigmoid_bce(zl, &labels)?;
            ok_l += running_correct(g.value(zl).data(), &labels);
            loss_l += g.value(ll).data()[0] as f64;
            let total = match zc {
                Some(zc) => {
                    let lc = g.sigmoid_bce(zc, &labels)?;
                    ok_c += running_correct(g.value(zc).data(), &labels);
                    loss_c += g.value(lc).data()[0] as f64;
                    g.weighted_sum(&[(1.0, ll), (1.0, lc)])?
                }
                None => ll,
            };
            g.backward(total)?;
            frl.net.params.collect_grads(&mut g, &loc)?;
            opt_loc.step(&mut frl.net.params)?;
            if let (Some(c), Some(vars)) = (frl.classifier.as_mut(), cls.as_ref()) {
                c.collect_grads(&mut g, vars)?;
                opt_cls.step(c)?;
            }
            steps += 1;
        }
        let denom = (data.len() * m) as f64;
        let has_cls = frl.classifier.is_some();
        let rec = FrlEpoch {
            epoch,
            localization_loss: loss_l / steps as f64,
            classifier_loss: has_cls.then(|| loss_c / steps as f64),
            localization_accuracy: ok_l as f64 / denom,
            classifier_accuracy: has_cls.then(|| ok_c as f64 / denom),
        };
        info!(
            "frl epoch {epoch}: loc loss {:.4} acc {:.4}, cls loss {:?} acc {:?}",
            rec.localization_loss, rec.localization_accuracy, rec.classifier_loss, rec.classifier_accuracy
        );
        report.push(rec);
    }
    Ok(report)
}

pub fn localization_logits(frl: &FrlNetwork<f32>, ds: &Dataset) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(ds.len() * frl.attribute_count());
    for items in train::eval_batches(ds.len(), 64) {
        out.extend_from_slice(frl.net.predict(&train::image_batch(ds, &items))?.data());
    }
    Ok(out)
}

/// Test accuracy of the localization branch.
pub fn evaluate_localization(frl: &FrlNetwork<f32>, ds: &Dataset) -> Result<Accuracy> {
    Accuracy::from_logits(&localization_logits(frl, ds)?, ds)
}

/// Fraction of positives of each local attribute whose heatmap peak falls in
/// the ground-truth box.
pub fn hit_rates(frl: &FrlNetwork<f32>, ds: &Dataset) -> Result<Vec<f64>> {
    let mut hits = vec![0usize; ds.n_local];
    let mut total = vec![0usize; ds.n_local];
    for items in train::eval_batches(ds.len(), 64) {
        let sets = heatmaps_batch(frl, &train::image_batch(ds, &items))?;
        for (it, set) in items.iter().zip(&sets) {
            let sample = &ds.samples[it.index];
            for l in 0..ds.n_local {
                let Some(gt) = sample.gt_boxes[l] else { continue };
                let (px, py) = peak(set, l);
                total[l] += 1;
                hits[l] += gt.contains(px, py) as usize;
            }
        }
    }
    Ok(hits
        .iter()
        .zip(&total)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect())
}

/// Peak pixel of the upsampled heatmap of attribute `j`.
pub fn peak(set: &HeatmapSet, j: usize) -> (usize, usize) {
    let b = locate_region(set.map(j), set.map_dims(), set.image_dims, 1.0 / set.image_dims.0 as f64);
    (b.x0, b.y0)
}

/// Heatmap of attribute `j` upsampled to image size, min-max scaled to gray.
pub fn heatmap_image(set: &HeatmapSet, j: usize) -> Image8 {
    let (h, w) = set.map_dims();
    let (ih, iw) = set.image_dims;
    normalized_gray(&kernels::bilinear_resize(set.map(j), 1, h, w, ih, iw), iw, ih)
}

/// Copy of the sample with a 1-pixel red outline around each box.
pub fn overlay_boxes(sample: &SyntheticSample, boxes: &[RegionBox]) -> Image8 {
    let mut img = sample.to_image8();
    for b in boxes {
        for x in b.x0..b.x1 {
            for y in [b.y0, b.y1 - 1] {
                paint(&mut img, x, y);
            }
        }
        for y in b.y0..b.y1 {
            for x in [b.x0, b.x1 - 1] {
                paint(&mut img, x, y);
            }
        }
    }
    img
}

fn paint(img: &mut Image8, x: usize, y: usize) {
    img.set(0, x, y, 255);
    img.set(1, x, y, 0);
    img.set(2, x, y, 0);
}
