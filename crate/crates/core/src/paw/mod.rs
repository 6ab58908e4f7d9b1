//! Parts-and-whole fusion: one whole-image subnet and one subnet per
//! attribute region, mixed per attribute by the region switch layer (RSL)
//! and related across attributes by the attribute relation layer (ARL).

pub mod pipeline;

use std::collections::HashMap;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frl::{self, FrlNetwork};
use crate::netspec::Network;
use crate::region::RegionBox;
use crate::synthgen::Dataset;
use crate::tensor::{Graph, ParamSet, Real, SgdState, Tensor, Var};
use crate::train::{self, Accuracy, Item, SgdConfig};

pub const RSL_WEIGHT: &str = "rsl.weight";
pub const ARL_WEIGHT: &str = "arl.weight";
pub const ARL_BIAS: &str = "arl.bias";
/// Standard deviation of the noise added to the identity ARL init.
pub const ARL_INIT_NOISE: f64 = 0.01;

fn batched<T: Real>(t: &Tensor<T>, rank: usize) -> Result<Tensor<T>> {
    let d = t.dims();
    if d.len() == rank {
        t.clone().reshape(&[&[1], d].concat())
    } else {
        Ok(t.clone())
    }
}

/// `r_j = sum_i W[i, j] * s[i, j]` for a `[M+1, M]` score matrix or a
/// `[B, M+1, M]` batch of them.
pub fn rsl_forward<T: Real>(scores: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let single = scores.dims().len() == 2;
    let mut g = Graph::new();
    let s = g.constant(batched(scores, 2)?);
    let w = g.constant(weight.clone());
    let r = g.rsl(s, w)?;
    let out = g.value(r).clone();
    if single {
        out.reshape(&[weight.dims()[1]])
    } else {
        Ok(out)
    }
}

/// Dense affine map `o = A r + b` over `[M]` or `[B, M]` inputs.
pub fn arl_forward<T: Real>(r: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let single = r.dims().len() == 1;
    let mut g = Graph::new();
    let x = g.constant(batched(r, 1)?);
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let o = g.linear(x, w, Some(b))?;
    let out = g.value(o).clone();
    if single {
        out.reshape(&[weight.dims()[0]])
    } else {
        Ok(out)
    }
}

/// Sigmoid cross-entropy of `[B, M]` (or `[M]`) logits, averaged over batch
/// and attributes.
pub fn attr_loss<T: Real>(logits: &Tensor<T>, labels: &[T]) -> Result<T> {
    let mut g = Graph::new();
    let z = g.constant(batched(logits, 1)?);
    let l = g.sigmoid_bce(z, labels)?;
    Ok(g.value(l).data()[0])
}

/// RSL and ARL parameters.
#[derive(Clone, Debug)]
pub struct Fusion<T: Real = f32> {
    pub params: ParamSet<T>,
}

impl<T: Real> Fusion<T> {
    /// Uniform RSL mixing `1/(M+1)`; ARL identity plus small Gaussian noise,
    /// zero bias.
    pub fn new(m: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa71_f05e);
        let noise = Normal::new(0.0, ARL_INIT_NOISE).map_err(|e| Error::Config(e.to_string()))?;
        let uniform = T::from_f64_lossy(1.0 / (m + 1) as f64);
        let arl = Tensor::from_fn(&[m, m], |k| {
            let eye = if k / m == k % m { 1.0 } else { 0.0 };
            T::from_f64_lossy(eye + noise.sample(&mut rng))
        });
        let mut params = ParamSet::new();
        params.push(RSL_WEIGHT, Tensor::full(&[m + 1, m], uniform))?;
        params.push(ARL_WEIGHT, arl)?;
        params.push(ARL_BIAS, Tensor::zeros(&[m]))?;
        Ok(Self { params })
    }

    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let m = params
            .get(ARL_BIAS)
            .map(|b| b.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("fusion parameters lack `{ARL_BIAS}`")))?;
        let want = [(RSL_WEIGHT, vec![m + 1, m]), (ARL_WEIGHT, vec![m, m]), (ARL_BIAS, vec![m])];
        let ok = params.len() == 3
            && want
                .iter()
                .all(|(n, d)| params.get(n).is_some_and(|t| t.dims() == d.as_slice()));
        if !ok {
            return Err(Error::CorruptCheckpoint("fusion parameters have the wrong layout".into()));
        }
        Ok(Self { params })
    }

    pub fn attribute_count(&self) -> usize {
        self.arl_bias().len()
    }

    pub fn rsl(&self) -> &Tensor<T> {
        self.params.get(RSL_WEIGHT).expect("fusion has rsl weight")
    }

    pub fn arl_weight(&self) -> &Tensor<T> {
        self.params.get(ARL_WEIGHT).expect("fusion has arl weight")
    }

    pub fn arl_bias(&self) -> &Tensor<T> {
        self.params.get(ARL_BIAS).expect("fusion has arl bias")
    }

    /// `[B, M]` logits from `[B, M+1, M]` scores on the tape. `vars` come
    /// from `self.params.bind`.
    pub fn apply(&self, g: &mut Graph<T>, scores: Var, vars: &[Var]) -> Result<Var> {
        let r = g.rsl(scores, vars[0])?;
        g.linear(r, vars[1], Some(vars[2]))
    }

    pub fn logits(&self, scores: &Tensor<T>) -> Result<Tensor<T>> {
        rsl_forward(scores, self.rsl()).and_then(|r| arl_forward(&r, self.arl_weight(), self.arl_bias()))
    }
}

/// Where each part subnet looks.
#[derive(Clone, Debug, PartialEq)]
pub enum PartRegions {
    /// FRL boxes per sample, `[sample][flip as usize][attribute]`.
    PerImage(Vec<[Vec<RegionBox>; 2]>),
    /// One box per attribute, shared by every image.
    Fixed(Vec<RegionBox>),
}

impl PartRegions {
    pub fn from_frl(frl: &FrlNetwork<f32>, ds: &Dataset, patch_frac: f64) -> Result<Self> {
        frl::dataset_regions(frl, ds, patch_frac).map(Self::PerImage)
    }

    /// Box for attribute `j` of `item`, in the item's (possibly mirrored)
    /// coordinates.
    pub fn get(&self, item: Item, j: usize) -> RegionBox {
        match self {
            Self::PerImage(r) => r[item.index][item.flip as usize][j],
            Self::Fixed(b) => b[j],
        }
    }

    pub fn part_count(&self) -> usize {
        match self {
            Self::PerImage(r) => r.first().map_or(0, |s| s[0].len()),
            Self::Fixed(b) => b.len(),
        }
    }

    /// `(width, height)` of the crops of attribute `j` (uniform per attribute).
    pub fn crop_dims(&self, j: usize) -> (usize, usize) {
        let b = self.get(Item { index: 0, flip: false }, j);
        (b.width(), b.height())
    }
}

/// For each attribute, the tile of a `cells x cells` grid that most often
/// holds the center of its FRL box on unmirrored training images. Ties go to
/// the lower tile index.
pub fn grid_regions(frl_regions: &PartRegions, n: usize, side: usize, cells: usize) -> Vec<RegionBox> {
    let tiles = RegionBox::grid(side, cells);
    (0..frl_regions.part_count())
        .map(|j| {
            let mut votes: HashMap<usize, usize> = HashMap::new();
            for index in 0..n {
                let b = frl_regions.get(Item { index, flip: false }, j);
                let (cx, cy) = ((b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2);
                if let Some(t) = tiles.iter().position(|t| t.contains(cx, cy)) {
                    *votes.entry(t).or_default() += 1;
                }
            }
            let best = (0..tiles.len())
                .max_by_key(|t| (votes.get(t).copied().unwrap_or(0), std::cmp::Reverse(*t)))
                .unwrap_or(0);
            tiles[best]
        })
        .collect()
}

/// `N` score matrices, row-major `[N, M+1, M]`; row 0 of each is the whole
/// subnet.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrices {
    pub m: usize,
    pub data: Vec<f32>,
}

impl ScoreMatrices {
    pub fn len(&self) -> usize {
        self.data.len() / ((self.m + 1) * self.m)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn matrix(&self, i: usize) -> &[f32] {
        let s = (self.m + 1) * self.m;
        &self.data[i * s..(i + 1) * s]
    }

    pub fn gather(&self, indices: impl IntoIterator<Item = usize>) -> Tensor<f32> {
        let data: Vec<f32> = indices.into_iter().flat_map(|i| self.matrix(i).to_vec()).collect();
        let b = data.len() / ((self.m + 1) * self.m);
        Tensor::new(vec![b, self.m + 1, self.m], data).expect("score batch dims")
    }

    /// `[N, M]` logits read from subnet row `row(j)` for attribute `j`.
    pub fn select(&self, row: impl Fn(usize) -> usize) -> Vec<f32> {
        let m = self.m;
        (0..self.len())
            .flat_map(|i| {
                let s = self.matrix(i);
                (0..m).map(|j| s[row(j) * m + j]).collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn whole_only(&self) -> Vec<f32> {
        self.select(|_| 0)
    }

    /// Each attribute scored by its own part subnet.
    pub fn part_only(&self) -> Vec<f32> {
        self.select(|j| j + 1)
    }
}

/// Subnets `g_0` (whole image) and `g_1..g_M` (attribute regions) with the
/// fusion layers on top.
#[derive(Clone, Debug)]
pub struct PawModel {
    pub whole: Network<f32>,
    pub parts: Vec<Network<f32>>,
    pub fusion: Fusion<f32>,
}

fn part_input(ds: &Dataset, items: &[Item], regions: &PartRegions, j: usize) -> Result<Tensor<f32>> {
    let boxes: Vec<RegionBox> = items.iter().map(|&it| regions.get(it, j)).collect();
    train::crop_batch(ds, items, &boxes)
}

/// A part subnet initialized from the whole subnet, shaped for the crops of
/// attribute `j`.
pub fn part_from_whole(whole: &Network<f32>, regions: &PartRegions, j: usize) -> Network<f32> {
    let (w, h) = regions.crop_dims(j);
    let mut spec = whole.spec.clone().with_input((3, h, w));
    spec.name = format!("part{j}");
    Network {
        spec,
        params: whole.params.clone(),
    }
}

/// Scores of the whole subnet and every part subnet on `ds`, unmirrored or
/// mirrored.
pub fn score_matrices(
    whole: &Network<f32>,
    parts: &[Network<f32>],
    ds: &Dataset,
    regions: &PartRegions,
    flip: bool,
) -> Result<ScoreMatrices> {
    let m = ds.attribute_count();
    if parts.len() != m {
        return Err(Error::shape(format!("{} part subnets for {m} attributes", parts.len())));
    }
    let mut data = vec![0.0f32; ds.len() * (m + 1) * m];
    for batch in train::eval_batches(ds.len(), 64) {
        let items: Vec<Item> = batch.iter().map(|it| Item { flip, ..*it }).collect();
        let mut rows = vec![whole.predict(&train::image_batch(ds, &items))?];
        for (j, p) in parts.iter().enumerate() {
            rows.push(p.predict(&part_input(ds, &items, regions, j)?)?);
        }
        for (k, it) in items.iter().enumerate() {
            for (i, r) in rows.iter().enumerate() {
                let dst = (it.index * (m + 1) + i) * m;
                data[dst..dst + m].copy_from_slice(&r.data()[k * m..(k + 1) * m]);
            }
        }
    }
    Ok(ScoreMatrices { m, data })
}

impl PawModel {
    pub fn attribute_count(&self) -> usize {
        self.fusion.attribute_count()
    }

    pub fn scores(&self, ds: &Dataset, regions: &PartRegions) -> Result<ScoreMatrices> {
        score_matrices(&self.whole, &self.parts, ds, regions, false)
    }

    /// `[N, M]` fused logits on `ds`.
    pub fn logits(&self, ds: &Dataset, regions: &PartRegions) -> Result<Vec<f32>> {
        let s = self.scores(ds, regions)?;
        if s.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.fusion.logits(&s.gather(0..s.len()))?.into_data())
    }

    /// Flat parameter set with `whole.`, `part<j>.` and fusion names.
    pub fn to_params(&self) -> Result<ParamSet<f32>> {
        let mut out = prefixed(&self.whole.params, "whole.")?;
        for (j, p) in self.parts.iter().enumerate() {
            out.append(prefixed(&p.params, &format!("part{j}."))?);
        }
        out.append(self.fusion.params.clone());
        Ok(out)
    }
}

/// Copy of `params` with every name prefixed.
pub fn prefixed(params: &ParamSet<f32>, prefix: &str) -> Result<ParamSet<f32>> {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        out.push(format!("{prefix}{name}"), t.clone())?;
    }
    Ok(out)
}

/// The entries named `prefix*`, with the prefix removed.
pub fn unprefixed(params: &ParamSet<f32>, prefix: &str) -> Result<ParamSet<f32>> {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        if let Some(rest) = name.strip_prefix(prefix) {
            out.push(rest, t.clone())?;
        }
    }
    Ok(out)
}

pub fn evaluate(model: &PawModel, ds: &Dataset, regions: &PartRegions) -> Result<Accuracy> {
    Accuracy::from_logits(&model.logits(ds, regions)?, ds)
}

/// Trains part subnet `j` on its crops against all attribute labels.
pub fn train_part(
    whole: &Network<f32>,
    data: &Dataset,
    regions: &PartRegions,
    j: usize,
    cfg: &SgdConfig,
) -> Result<Network<f32>> {
    let mut net = part_from_whole(whole, regions, j);
    let mut opt = cfg.optimizer::<f32>()?;
    let seed = cfg.seed.wrapping_add(1 + j as u64);
    for epoch in 0..cfg.epochs {
        let batches = train::epoch_batches(data.len(), cfg.batch_size, seed, epoch, cfg.hflip);
        let loss = train::fit_epoch(&mut net, &mut opt, data, &batches, |items| {
            part_input(data, items, regions, j)
        })?;
        info!("part {j} epoch {epoch}: loss {loss:.4}");
    }
    Ok(net)
}

/// Every part subnet, trained independently on up to `threads` threads.
/// The result does not depend on the thread count.
pub fn train_parts(
    whole: &Network<f32>,
    data: &Dataset,
    regions: &PartRegions,
    cfg: &SgdConfig,
    threads: usize,
) -> Result<Vec<Network<f32>>> {
    let m = regions.part_count();
    if m != data.attribute_count() {
        return Err(Error::Data(format!(
            "{m} part regions for {} attributes",
            data.attribute_count()
        )));
    }
    let threads = threads.clamp(1, m.max(1));
    if threads == 1 {
        return (0..m).map(|j| train_part(whole, data, regions, j, cfg)).collect();
    }
    let mut slots: Vec<Option<Result<Network<f32>>>> = (0..m).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || {
                    (t..m)
                        .step_by(threads)
                        .map(|j| (j, train_part(whole, data, regions, j, cfg)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (j, r) in h.join().expect("part training thread panicked") {
                slots[j] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every part trained")).collect()
}

/// Per-epoch record of a fusion or fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Early stopping on validation loss: keeps the best parameters seen and
/// stops after `patience` epochs without improvement.
struct Plateau<S> {
    best: f64,
    best_state: Option<S>,
    stale: usize,
    patience: usize,
}

impl<S> Plateau<S> {
    fn new(patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            best_state: None,
            stale: 0,
            patience,
        }
    }

    /// Records an epoch; returns true when training should stop.
    fn observe(&mut self, loss: f64, state: impl FnOnce() -> S) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_state = Some(state());
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

fn val_metrics(logits: &Tensor<f32>, ds: &Dataset) -> Result<(f64, f64)> {
    let labels = train::label_batch::<f32>(ds, &train::eval_batches(ds.len(), ds.len().max(1))[0]);
    let loss = attr_loss(logits, &labels)? as f64;
    let acc = Accuracy::from_logits(logits.data(), ds)?.mean;
    Ok((loss, acc))
}

/// Learns RSL and ARL on fixed subnet scores. `train_scores` holds the
/// unmirrored and mirrored score matrices of the training set. Runs at most
/// `cfg.epochs` epochs, stopping on a validation-loss plateau.
pub fn train_fusion(
    fusion: &mut Fusion<f32>,
    train_scores: &[ScoreMatrices; 2],
    data: &Dataset,
    val_scores: &ScoreMatrices,
    val: &Dataset,
    cfg: &SgdConfig,
    patience: usize,
) -> Result<Vec<FusionEpoch>> {
    let mut opt = cfg.optimizer::<f32>()?;
    let mut stop = Plateau::new(patience);
    let val_batch = val_scores.gather(0..val_scores.len());
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = train::epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch, cfg.hflip);
        for items in &batches {
            let data_rows: Vec<f32> = items
                .iter()
                .flat_map(|it| train_scores[it.flip as usize].matrix(it.index).to_vec())
                .collect();
            let m = fusion.attribute_count();
            let s = Tensor::new(vec![items.len(), m + 1, m], data_rows)?;
            let mut g = Graph::new();
            let vars = fusion.params.bind(&mut g, true);
            let sv = g.constant(s);
            let z = fusion.apply(&mut g, sv, &vars)?;
            let loss = g.sigmoid_bce(z, &train::label_batch::<f32>(data, items))?;
            total += g.value(loss).data()[0] as f64;
            g.backward(loss)?;
            fusion.params.collect_grads(&mut g, &vars)?;
            opt.step(&mut fusion.params)?;
        }
        let (val_loss, val_accuracy) = val_metrics(&fusion.logits(&val_batch)?, val)?;
        let rec = FusionEpoch {
            epoch,
            train_loss: total / batches.len().max(1) as f64,
            val_loss,
            val_accuracy,
        };
        info!("fusion epoch {epoch}: train {:.4} val {:.4} acc {:.4}", rec.train_loss, val_loss, val_accuracy);
        log.push(rec);
        if stop.observe(val_loss, || fusion.params.clone()) {
            break;
        }
    }
    if let Some(best) = stop.best_state {
        fusion.params = best;
    }
    Ok(log)
}

/// End-to-end training of every subnet and the fusion layers through the
/// attribute loss on the fused logits.
pub fn finetune(
    model: &mut PawModel,
    data: &Dataset,
    regions: &PartRegions,
    val: &Dataset,
    val_regions: &PartRegions,
    cfg: &SgdConfig,
    patience: usize,
) -> Result<Vec<FusionEpoch>> {
    let m = model.attribute_count();
    let mut opt_whole = cfg.optimizer::<f32>()?;
    let mut opt_parts: Vec<SgdState<f32>> = (0..m).map(|_| cfg.optimizer()).collect::<Result<_>>()?;
    let mut opt_fusion = cfg.optimizer::<f32>()?;
    let mut stop = Plateau::new(patience);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = train::epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch, cfg.hflip);
        for items in &batches {
            let mut g = Graph::new();
            let wv = model.whole.params.bind(&mut g, true);
            let x = g.constant(train::image_batch(data, items));
            let mut rows = vec![model.whole.forward(&mut g, x, &wv)?.logits];
            let mut pvs = Vec::with_capacity(m);
            for (j, p) in model.parts.iter().enumerate() {
                let pv = p.params.bind(&mut g, true);
                let x = g.constant(part_input(data, items, regions, j)?);
                rows.push(p.forward(&mut g, x, &pv)?.logits);
                pvs.push(pv);
            }
            let s = g.stack(&rows)?;
            let fv = model.fusion.params.bind(&mut g, true);
            let z = model.fusion.apply(&mut g, s, &fv)?;
            let loss = g.sigmoid_bce(z, &train::label_batch::<f32>(data, items))?;
            total += g.value(loss).data()[0] as f64;
            g.backward(loss)?;
            model.whole.params.collect_grads(&mut g, &wv)?;
            opt_whole.step(&mut model.whole.params)?;
            for ((p, pv), opt) in model.parts.iter_mut().zip(&pvs).zip(&mut opt_parts) {
                p.params.collect_grads(&mut g, pv)?;
                opt.step(&mut p.params)?;
            }
            model.fusion.params.collect_grads(&mut g, &fv)?;
            opt_fusion.step(&mut model.fusion.params)?;
        }
        let logits = Tensor::new(vec![val.len(), m], model.logits(val, val_regions)?)?;
        let (val_loss, val_accuracy) = val_metrics(&logits, val)?;
        let rec = FusionEpoch {
            epoch,
            train_loss: total / batches.len().max(1) as f64,
            val_loss,
            val_accuracy,
        };
        info!("finetune epoch {epoch}: train {:.4} val {:.4} acc {:.4}", rec.train_loss, val_loss, val_accuracy);
        log.push(rec);
        if stop.observe(val_loss, || model.clone()) {
            break;
        }
    }
    if let Some(best) = stop.best_state {
        *model = best;
    }
    Ok(log)
}

/// `|W[i, j]|` of the RSL, row-major `[M+1, M]`.
pub fn rsl_magnitudes(fusion: &Fusion<f32>) -> Vec<f32> {
    fusion.rsl().data().iter().map(|w| w.abs()).collect()
}

/// Mean of `(A[a, b] + A[b, a]) / 2` over the given attribute pairs.
pub fn mean_pair_weight(fusion: &Fusion<f32>, pairs: &[(usize, usize)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let m = fusion.attribute_count();
    let a = fusion.arl_weight().data();
    let sum: f64 = pairs
        .iter()
        .map(|&(x, y)| (a[x * m + y] as f64 + a[y * m + x] as f64) / 2.0)
        .sum();
    Some(sum / pairs.len() as f64)
}

/// Writes a real matrix as CSV with the given row and column labels.
pub fn write_matrix_csv<W: std::io::Write>(
    out: W,
    values: &[f32],
    rows: &[String],
    cols: &[String],
) -> Result<()> {
    if values.len() != rows.len() * cols.len() {
        return Err(Error::shape(format!(
            "{} values for a {}x{} matrix",
            values.len(),
            rows.len(),
            cols.len()
        )));
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let io = |e: csv::Error| Error::Data(format!("writing matrix csv: {e}"));
    let header: Vec<&str> = std::iter::once("").chain(cols.iter().map(String::as_str)).collect();
    w.write_record(&header).map_err(io)?;
    for (r, name) in rows.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(values[r * cols.len()..(r + 1) * cols.len()].iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("flushing matrix csv", e))
}
