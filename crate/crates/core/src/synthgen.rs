//! Synthetic attribute images with known regions and controlled label
//! correlations.
//!
//! Local attributes are small glyphs (square, cross, ring, x-mark) placed in
//! loose vertical zones of a jittered "face" layout. Global attributes are
//! image-wide styles: a warm or cool tint, or extra grain. Every image also
//! carries a smooth random chroma field along the same red/blue axis as the
//! tints, shifted so that its whole-image mean is zero. A small crop therefore
//! sees a tint-like offset that only whole-image evidence cancels.
//!
//! Sample `i` of split `s` is rendered from its own ChaCha stream, so datasets
//! are a pure function of `(spec, seed)` regardless of generation order.
//!
//! Manifest layout (one CSV per split, LF line endings):
//!
//! ```text
//! path,<attr 0>,...,<attr M-1>,<local 0>_x0,<local 0>_y0,<local 0>_x1,<local 0>_y1,...
//! ```
//!
//! Paths are relative to the manifest directory, labels are `0`/`1`, and box
//! cells are empty when the attribute is absent.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageio::Image8;
use crate::region::RegionBox;
use crate::tensor::{kernels, Tensor};

pub const LOCAL_KINDS: [&str; 4] = ["square", "cross", "ring", "xmark"];
pub const GLOBAL_KINDS: [&str; 3] = ["warm", "cool", "grain"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rule {
    /// The two attributes are never positive together.
    Exclusive(usize, usize),
    /// `P(then = 1 | given = 1) = p`; the other conditional is solved so that
    /// `then` keeps its target rate.
    CoOccur { given: usize, then: usize, p: f64 },
}

impl Rule {
    fn pair(&self) -> (usize, usize) {
        match *self {
            Rule::Exclusive(a, b) => (a, b),
            Rule::CoOccur { given, then, .. } => (given, then),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Rendering constants. Intensities are on a `[0, 1]` scale; lengths in
/// pixels assume a 64-pixel image and scale with `image_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct Style {
    pub glyph_size: usize,
    pub ink: (f64, f64),
    pub zone_spacing: f64,
    pub jitter: (f64, f64),
    pub face_shift: f64,
    pub distractors: (usize, usize),
    pub luma_sd: f64,
    /// Spread of the chroma field's 3x3 control lattice.
    pub chroma_sd: f64,
    pub tint: f64,
    pub noise_sd: f64,
    pub grain_sd: f64,
    /// Ground-truth box side as a fraction of the image side.
    pub box_frac: f64,
}

impl Default for Style {
    fn default() -> Self {
        Self {
            glyph_size: 11,
            ink: (0.30, 0.45),
            zone_spacing: 13.0,
            jitter: (10.0, 2.0),
            face_shift: 6.0,
            distractors: (3, 7),
            luma_sd: 0.10,
            chroma_sd: 0.12,
            tint: 0.06,
            noise_sd: 0.03,
            grain_sd: 0.09,
            box_frac: 2.0 / 7.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub n_local: usize,
    pub n_global: usize,
    /// Target positive rate per attribute (locals first).
    pub rates: Vec<f64>,
    pub rules: Vec<Rule>,
    pub counts: SplitCounts,
    pub style: Style,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_local: 4,
            n_global: 2,
            rates: vec![0.4, 0.4, 0.5, 0.5, 0.4, 0.4],
            rules: vec![
                Rule::Exclusive(0, 1),
                Rule::CoOccur {
                    given: 2,
                    then: 3,
                    p: 0.85,
                },
                Rule::Exclusive(4, 5),
            ],
            counts: SplitCounts {
                train: 6000,
                val: 1000,
                test: 1000,
            },
            style: Style::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn attribute_count(&self) -> usize {
        self.n_local + self.n_global
    }

    pub fn attribute_names(&self) -> Vec<String> {
        LOCAL_KINDS[..self.n_local.min(4)]
            .iter()
            .chain(&GLOBAL_KINDS[..self.n_global.min(3)])
            .map(|s| s.to_string())
            .collect()
    }

    pub fn box_size(&self) -> usize {
        (self.style.box_frac * self.image_size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.attribute_count();
        if self.n_local > LOCAL_KINDS.len() || self.n_global > GLOBAL_KINDS.len() || m == 0 {
            return Err(Error::Spec(format!(
                "at most {} local and {} global attributes are supported",
                LOCAL_KINDS.len(),
                GLOBAL_KINDS.len()
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Spec("image_size must be at least 32".into()));
        }
        if self.rates.len() != m || self.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Spec(format!("need {m} positive rates in [0, 1]")));
        }
        let mut seen = vec![None::<usize>; m];
        for (ri, rule) in self.rules.iter().enumerate() {
            let (a, b) = rule.pair();
            if a >= m || b >= m || a == b {
                return Err(Error::Spec(format!("rule {ri} names invalid attributes ({a}, {b})")));
            }
            for other in self.rules[..ri].iter() {
                let (c, d) = other.pair();
                if (a, b) == (c, d) || (a, b) == (d, c) {
                    return Err(Error::Spec(format!(
                        "contradictory rules on attributes ({a}, {b}): {other:?} and {rule:?}"
                    )));
                }
            }
            for x in [a, b] {
                if let Some(prev) = seen[x] {
                    return Err(Error::Spec(format!(
                        "attribute {x} appears in rules {prev} and {ri}; each attribute may take part in one rule"
                    )));
                }
                seen[x] = Some(ri);
            }
            match *rule {
                Rule::Exclusive(a, b) if self.rates[a] + self.rates[b] > 1.0 => {
                    return Err(Error::Spec(format!(
                        "exclusive attributes {a} and {b} have rates summing above 1"
                    )))
                }
                Rule::CoOccur { given, then, p } => {
                    if !(0.0..=1.0).contains(&p) || !(0.0..1.0).contains(&self.rates[given]) {
                        return Err(Error::Spec(format!("co-occurrence {given}->{then} is degenerate")));
                    }
                    let r = self.complement_rate(given, then, p);
                    if !(0.0..=1.0).contains(&r) {
                        return Err(Error::Spec(format!(
                            "co-occurrence {given}->{then} with p={p} cannot keep rate {}",
                            self.rates[then]
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// `P(then = 1 | given = 0)` that preserves the marginal of `then`.
    fn complement_rate(&self, given: usize, then: usize, p: f64) -> f64 {
        let (qa, qb) = (self.rates[given], self.rates[then]);
        (qb - qa * p) / (1.0 - qa)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSample {
    pub size: usize,
    /// Planar RGB, `3 * size * size` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    /// One entry per local attribute, present iff that attribute is positive.
    pub gt_boxes: Vec<Option<RegionBox>>,
}

impl SyntheticSample {
    /// `[3, S, S]` with values in `[0, 1]`.
    pub fn image(&self) -> Tensor<f32> {
        Tensor::new(
            vec![3, self.size, self.size],
            self.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        )
        .expect("sample dims")
    }

    pub fn to_image8(&self) -> Image8 {
        Image8 {
            channels: 3,
            width: self.size,
            height: self.size,
            planes: self.pixels.clone(),
        }
    }
}

/// Mirrors the image and the ground-truth boxes about the vertical axis.
pub fn hflip_augment(sample: &SyntheticSample) -> SyntheticSample {
    let s = sample.size;
    let mut pixels = sample.pixels.clone();
    for row in pixels.chunks_exact_mut(s) {
        row.reverse();
    }
    SyntheticSample {
        size: s,
        pixels,
        labels: sample.labels.clone(),
        gt_boxes: sample.gt_boxes.iter().map(|b| b.map(|b| b.hflip(s))).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub attributes: Vec<String>,
    pub n_local: usize,
    pub image_size: usize,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.len()
    }

    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples[..n.min(self.len())].to_vec(),
            ..self.clone()
        }
    }

    /// Fraction of positives per attribute.
    pub fn positive_rates(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        (0..self.attribute_count())
            .map(|j| self.samples.iter().filter(|s| s.labels[j] == 1).count() as f64 / n)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn stream_id(split: usize, index: usize) -> u64 {
    ((split as u64) << 40) | index as u64
}

fn sample_rng(seed: u64, split: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(split, index));
    rng
}

pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let counts = [spec.counts.train, spec.counts.val, spec.counts.test];
    let mut splits = counts.iter().enumerate().map(|(si, &n)| Dataset {
        attributes: spec.attribute_names(),
        n_local: spec.n_local,
        image_size: spec.image_size,
        samples: (0..n).map(|i| render(spec, &mut sample_rng(seed, si, i))).collect(),
    });
    Ok(SyntheticData {
        train: splits.next().unwrap(),
        val: splits.next().unwrap(),
        test: splits.next().unwrap(),
    })
}

/// Re-renders one sample from its stream without generating the others.
pub fn render_sample(spec: &SyntheticSpec, seed: u64, split: usize, index: usize) -> Result<SyntheticSample> {
    spec.validate()?;
    if split >= SPLITS.len() {
        return Err(Error::Index(format!("split {split} out of range")));
    }
    Ok(render(spec, &mut sample_rng(seed, split, index)))
}

fn draw_labels(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let m = spec.attribute_count();
    let mut labels = vec![0u8; m];
    let mut done = vec![false; m];
    // Rules are resolved in attribute order of their first member so the
    // stream consumption does not depend on rule listing order.
    let mut rules = spec.rules.clone();
    rules.sort_by_key(|r| r.pair().0.min(r.pair().1));
    for j in 0..m {
        if done[j] {
            continue;
        }
        match rules.iter().find(|r| r.pair().0 == j || r.pair().1 == j) {
            Some(&Rule::Exclusive(a, b)) => {
                let u: f64 = rng.random();
                labels[a] = (u < spec.rates[a]) as u8;
                labels[b] = (u >= spec.rates[a] && u < spec.rates[a] + spec.rates[b]) as u8;
                done[a] = true;
                done[b] = true;
            }
            Some(&Rule::CoOccur { given, then, p }) => {
                labels[given] = rng.random_bool(spec.rates[given]) as u8;
                let q = if labels[given] == 1 {
                    p
                } else {
                    spec.complement_rate(given, then, p).clamp(0.0, 1.0)
                };
                labels[then] = rng.random_bool(q) as u8;
                done[given] = true;
                done[then] = true;
            }
            None => {
                labels[j] = rng.random_bool(spec.rates[j]) as u8;
                done[j] = true;
            }
        }
    }
    labels
}

/// Pixel offsets of a shape centered at the origin with half-width `r`.
fn shape_offsets(kind: &str, r: i32) -> Vec<(i32, i32)> {
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let on = match kind {
                "square" => dx.abs() == r || dy.abs() == r,
                "cross" => dx == 0 || dy == 0,
                "ring" => {
                    let d = ((dx * dx + dy * dy) as f64).sqrt();
                    (d - (r as f64 - 0.2)).abs() < 0.6
                }
                "xmark" => dx.abs() == dy.abs(),
                "dot" => dx.abs() <= 1 && dy.abs() <= 1,
                "bar" => dy == 0,
                "corner" => (dx == -r || dy == -r) && dx <= 0 && dy <= 0,
                "stroke" => dx == dy,
                "arc" => {
                    let d = ((dx * dx + dy * dy) as f64).sqrt();
                    dx <= 0 && (d - (r as f64 - 0.2)).abs() < 0.6
                }
                _ => false,
            };
            if on {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Clutter: a blob and glyph fragments, each drawn in a random quarter turn.
const DISTRACTORS: [&str; 5] = ["dot", "bar", "corner", "stroke", "arc"];

fn quarter_turns(offsets: Vec<(i32, i32)>, k: usize) -> Vec<(i32, i32)> {
    offsets
        .into_iter()
        .map(|(mut dx, mut dy)| {
            for _ in 0..k {
                (dx, dy) = (-dy, dx);
            }
            (dx, dy)
        })
        .collect()
}

/// Darkens the shape's pixels on all three channels.
fn stamp(rgb: &mut [Vec<f64>; 3], s: usize, cx: i32, cy: i32, offsets: &[(i32, i32)], ink: f64) {
    for &(dx, dy) in offsets {
        let (x, y) = (cx + dx, cy + dy);
        if x >= 0 && y >= 0 && (x as usize) < s && (y as usize) < s {
            for plane in rgb.iter_mut() {
                plane[y as usize * s + x as usize] -= ink;
            }
        }
    }
}

fn render(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> SyntheticSample {
    let s = spec.image_size;
    let st = &spec.style;
    let scale = s as f64 / 64.0;
    let labels = draw_labels(spec, rng);
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    // low-frequency luminance on a 3x3 lattice
    let lattice: Vec<f64> = (0..9).map(|_| 0.5 + st.luma_sd * std_normal.sample(rng)).collect();
    let luma = kernels::bilinear_resize(&lattice, 1, 3, 3, s, s);

    // zero-mean smooth chroma field along the red/blue axis
    let lattice: Vec<f64> = (0..9).map(|_| st.chroma_sd * std_normal.sample(rng)).collect();
    let mut chroma = kernels::bilinear_resize(&lattice, 1, 3, 3, s, s);
    let mean = chroma.iter().sum::<f64>() / chroma.len() as f64;
    chroma.iter_mut().for_each(|v| *v -= mean);

    let mut shift = [0.0f64; 3];
    let mut noise_sd = st.noise_sd;
    for g in 0..spec.n_global {
        if labels[spec.n_local + g] == 0 {
            continue;
        }
        match GLOBAL_KINDS[g] {
            "warm" => {
                shift[0] += st.tint;
                shift[2] -= st.tint;
            }
            "cool" => {
                shift[0] -= st.tint;
                shift[2] += st.tint;
            }
            _ => noise_sd = st.grain_sd,
        }
    }

    let mut rgb: [Vec<f64>; 3] = Default::default();
    for (c, plane) in rgb.iter_mut().enumerate() {
        plane.reserve(s * s);
        for y in 0..s {
            for x in 0..s {
                let sign = [1.0, 0.0, -1.0][c];
                plane.push(luma[y * s + x] + sign * chroma[y * s + x] + shift[c]);
            }
        }
    }

    let r = (st.glyph_size / 2) as i32;
    let inside = |v: f64| (v.round() as i32).clamp(r + 1, s as i32 - r - 2);
    let n_distract = rng.random_range(st.distractors.0..=st.distractors.1);
    let mut centers: Vec<(i32, i32)> = Vec::with_capacity(n_distract);
    for _ in 0..n_distract {
        let kind = DISTRACTORS[rng.random_range(0..DISTRACTORS.len())];
        let turns = rng.random_range(0..4);
        let ink = rng.random_range(st.ink.0..st.ink.1);
        // Fragments sharing a center could assemble a whole glyph.
        let (cx, cy) = loop {
            let c = (rng.random_range(r..s as i32 - r), rng.random_range(r..s as i32 - r));
            if centers.iter().all(|p| (p.0 - c.0).abs().max((p.1 - c.1).abs()) > 2) {
                break c;
            }
        };
        centers.push((cx, cy));
        stamp(&mut rgb, s, cx, cy, &quarter_turns(shape_offsets(kind, r), turns), ink);
    }

    let face = (
        rng.random_range(-st.face_shift..=st.face_shift) * scale,
        rng.random_range(-st.face_shift..=st.face_shift) * scale,
    );
    let box_side = spec.box_size();
    let mut gt_boxes = Vec::with_capacity(spec.n_local);
    for (l, kind) in LOCAL_KINDS.iter().take(spec.n_local).enumerate() {
        let jx = rng.random_range(-st.jitter.0..=st.jitter.0) * scale;
        let jy = rng.random_range(-st.jitter.1..=st.jitter.1) * scale;
        let ink = rng.random_range(st.ink.0..st.ink.1);
        if labels[l] == 0 {
            gt_boxes.push(None);
            continue;
        }
        let zone = l as f64 - (spec.n_local as f64 - 1.0) / 2.0;
        let cx = inside(s as f64 / 2.0 + face.0 + jx);
        let cy = inside(s as f64 / 2.0 + zone * st.zone_spacing * scale + face.1 + jy);
        stamp(&mut rgb, s, cx, cy, &shape_offsets(kind, r), ink);
        gt_boxes.push(Some(RegionBox::square_around(cx as usize, cy as usize, box_side, s, s)));
    }

    let noise = Normal::new(0.0, noise_sd).unwrap();
    let mut pixels = Vec::with_capacity(3 * s * s);
    for plane in &rgb {
        for &v in plane {
            let v = v + noise.sample(rng);
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    SyntheticSample {
        size: s,
        pixels,
        labels,
        gt_boxes,
    }
}

fn manifest_header(ds: &Dataset) -> Vec<String> {
    let mut header = vec!["path".to_string()];
    header.extend(ds.attributes.iter().cloned());
    for name in &ds.attributes[..ds.n_local] {
        for coord in ["x0", "y0", "x1", "y1"] {
            header.push(format!("{name}_{coord}"));
        }
    }
    header
}

/// Writes `<dir>/<split>/<index>.ppm` images and `<dir>/<split>.csv`.
pub fn write_dataset(data: &SyntheticData, dir: &Path) -> Result<()> {
    for (name, ds) in SPLITS.iter().zip([&data.train, &data.val, &data.test]) {
        write_split(ds, dir, name)?;
    }
    Ok(())
}

pub fn write_split(ds: &Dataset, dir: &Path, split: &str) -> Result<()> {
    let img_dir = dir.join(split);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(format!("creating {}", img_dir.display()), e))?;
    let manifest = dir.join(format!("{split}.csv"));
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", manifest.display()));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&manifest)
        .map_err(csv_err)?;
    w.write_record(manifest_header(ds)).map_err(csv_err)?;
    for (i, sample) in ds.samples.iter().enumerate() {
        let rel = format!("{split}/{i:05}.ppm");
        sample.to_image8().save(&dir.join(&rel))?;
        let mut row = vec![rel];
        row.extend(sample.labels.iter().map(|l| l.to_string()));
        for b in &sample.gt_boxes {
            match b {
                Some(b) => row.extend([b.x0, b.y0, b.x1, b.y1].iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", manifest.display()), e))
}

/// Reads `<dir>/<split>.csv` and the images it references.
pub fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    let manifest = dir.join(format!("{split}.csv"));
    if !manifest.exists() {
        return Err(Error::Data(format!("manifest {} not found", manifest.display())));
    }
    let bad = |m: String| Error::Data(format!("{}: {m}", manifest.display()));
    let mut r = csv::Reader::from_path(&manifest).map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = r.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    let n_local = header.iter().filter(|h| h.ends_with("_x0")).count();
    let m = header.len().saturating_sub(1 + 4 * n_local);
    if header.first().map(String::as_str) != Some("path") || m == 0 {
        return Err(bad("unexpected header".into()));
    }
    let attributes = header[1..=m].to_vec();
    let mut samples = Vec::new();
    let mut size = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != header.len() {
            return Err(bad(format!("row {line} has {} fields", rec.len())));
        }
        let img = Image8::load(&dir.join(&rec[0]))?;
        if img.channels != 3 || img.width != img.height {
            return Err(bad(format!("{} is not a square RGB image", &rec[0])));
        }
        size = img.width;
        let labels = (1..=m)
            .map(|c| match &rec[c] {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(bad(format!("row {line}: label `{other}` is not 0/1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let mut gt_boxes = Vec::with_capacity(n_local);
        for l in 0..n_local {
            let cells = &rec.iter().skip(1 + m + 4 * l).take(4).collect::<Vec<_>>();
            if cells.iter().all(|c| c.is_empty()) {
                gt_boxes.push(None);
                continue;
            }
            let v: Vec<usize> = cells
                .iter()
                .map(|c| c.parse().map_err(|_| bad(format!("row {line}: bad box value `{c}`"))))
                .collect::<Result<_>>()?;
            gt_boxes.push(Some(RegionBox::new(v[0], v[1], v[2], v[3])?));
        }
        samples.push(SyntheticSample {
            size,
            pixels: img.planes,
            labels,
            gt_boxes,
        });
    }
    Ok(Dataset {
        attributes,
        n_local,
        image_size: size,
        samples,
    })
}

pub fn load_dataset(dir: &Path) -> Result<SyntheticData> {
    Ok(SyntheticData {
        train: load_split(dir, "train")?,
        val: load_split(dir, "val")?,
        test: load_split(dir, "test")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(train: usize) -> SyntheticSpec {
        SyntheticSpec {
            counts: SplitCounts {
                train,
                val: 4,
                test: 4,
            },
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_order_free() {
        let spec = small(20);
        let a = generate(&spec, 5).unwrap();
        assert_eq!(a, generate(&spec, 5).unwrap());
        assert_eq!(render_sample(&spec, 5, 0, 13).unwrap(), a.train.samples[13]);
        assert_eq!(render_sample(&spec, 5, 2, 3).unwrap(), a.test.samples[3]);
        assert_ne!(a.train.samples[0], generate(&spec, 6).unwrap().train.samples[0]);
    }

    #[test]
    fn contradictory_rules_rejected() {
        let mut spec = small(1);
        spec.rules = vec![
            Rule::Exclusive(0, 1),
            Rule::CoOccur {
                given: 0,
                then: 1,
                p: 0.9,
            },
        ];
        let err = generate(&spec, 0).unwrap_err();
        assert!(err.to_string().contains("contradictory"), "{err}");
        spec.rules = vec![Rule::Exclusive(0, 1), Rule::Exclusive(1, 2)];
        assert!(matches!(generate(&spec, 0), Err(Error::Spec(_))));
        spec.rules = vec![Rule::CoOccur {
            given: 2,
            then: 3,
            p: 0.9,
        }];
        spec.rates[2] = 0.6;
        spec.rates[3] = 0.2;
        assert!(spec.validate().is_err(), "rate 0.2 unreachable when 0.6 * 0.9 already exceeds it");
    }

    #[test]
    fn boxes_match_labels_and_hold_glyph() {
        let spec = small(200);
        let data = generate(&spec, 1).unwrap();
        let s = spec.image_size;
        for sample in &data.train.samples {
            for (l, b) in sample.gt_boxes.iter().enumerate() {
                assert_eq!(b.is_some(), sample.labels[l] == 1);
                if let Some(b) = b {
                    assert!(b.fits(s, s));
                    assert_eq!((b.width(), b.height()), (18, 18));
                }
            }
        }
    }

    #[test]
    fn glyph_pixels_inside_box() {
        // Render with noise and distractors disabled, then compare with the
        // same draw on a blank label set: every darkened pixel of a lone
        // glyph must fall in its box.
        let mut spec = small(60);
        spec.style.noise_sd = 0.0;
        spec.style.distractors = (0, 0);
        spec.style.luma_sd = 0.0;
        spec.style.chroma_sd = 0.0;
        spec.rules.clear();
        spec.rates = vec![0.5, 0.5, 0.5, 0.5, 0.0, 0.0];
        let data = generate(&spec, 3).unwrap();
        for sample in &data.train.samples {
            if sample.labels.iter().filter(|&&l| l == 1).count() != 1 {
                continue;
            }
            let l = sample.labels.iter().position(|&l| l == 1).unwrap();
            let b = sample.gt_boxes[l].unwrap();
            let mut inked = 0;
            let mut inside = 0;
            for y in 0..64 {
                for x in 0..64 {
                    if sample.pixels[y * 64 + x] < 110 {
                        inked += 1;
                        inside += b.contains(x, y) as usize;
                    }
                }
            }
            assert!(inked > 10);
            assert!(inside as f64 >= 0.9 * inked as f64, "{inside}/{inked}");
        }
    }

    #[test]
    fn flip_is_involution_and_mirrors_boxes() {
        let data = generate(&small(10), 2).unwrap();
        for sample in &data.train.samples {
            let f = hflip_augment(sample);
            assert_eq!(f.labels, sample.labels);
            assert_eq!(hflip_augment(&f), *sample);
            for (a, b) in f.gt_boxes.iter().zip(&sample.gt_boxes) {
                assert_eq!(*a, b.map(|b| b.hflip(64)));
            }
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let data = generate(&small(6), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("train.csv")).unwrap();
        assert!(text.starts_with("path,square,cross,ring,xmark,warm,cool,square_x0,square_y0,"));
        assert!(!text.contains('\r'));
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn label_statistics_over_ten_thousand_samples() {
        let spec = small(10_000);
        let data = generate(&spec, 11).unwrap();
        let samples = &data.train.samples;
        let n = samples.len() as f64;
        let pos = |j: usize| samples.iter().filter(|s| s.labels[j] == 1).count() as f64;
        for (j, &rate) in spec.rates.iter().enumerate() {
            assert!((pos(j) / n - rate).abs() <= 0.03, "attribute {j}: {} vs {rate}", pos(j) / n);
        }
        for rule in &spec.rules {
            match *rule {
                Rule::Exclusive(a, b) => {
                    assert_eq!(samples.iter().filter(|s| s.labels[a] == 1 && s.labels[b] == 1).count(), 0);
                }
                Rule::CoOccur { given, then, p } => {
                    let both = samples.iter().filter(|s| s.labels[given] == 1 && s.labels[then] == 1).count();
                    let cond = both as f64 / pos(given);
                    assert!((cond - p).abs() <= 0.05, "P({then}|{given}) = {cond} vs {p}");
                }
            }
        }
        let s = spec.image_size;
        for sample in samples {
            for (l, b) in sample.gt_boxes.iter().enumerate() {
                assert_eq!(b.is_some(), sample.labels[l] == 1);
                assert!(b.is_none_or(|b| b.fits(s, s)));
            }
        }
    }

    #[test]
    fn written_datasets_are_byte_identical() {
        let spec = small(12);
        let root = tempfile::tempdir().unwrap();
        let (a, b) = (root.path().join("a"), root.path().join("b"));
        write_dataset(&generate(&spec, 9).unwrap(), &a).unwrap();
        write_dataset(&generate(&spec, 9).unwrap(), &b).unwrap();
        for split in SPLITS {
            let manifest = format!("{split}.csv");
            assert_eq!(fs::read(a.join(&manifest)).unwrap(), fs::read(b.join(&manifest)).unwrap());
            for entry in fs::read_dir(a.join(split)).unwrap() {
                let name = entry.unwrap().file_name();
                assert_eq!(
                    fs::read(a.join(split).join(&name)).unwrap(),
                    fs::read(b.join(split).join(&name)).unwrap()
                );
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn any_sample_renders_alone(seed in 0u64..1_000_000, index in 0usize..30, split in 0usize..3) {
            let spec = small(30);
            let sample = render_sample(&spec, seed, split, index).unwrap();
            let again = render_sample(&spec, seed, split, index).unwrap();
            proptest::prop_assert_eq!(&sample, &again);
            if index < 4 || split == 0 {
                let data = generate(&spec, seed).unwrap();
                let ds = [&data.train, &data.val, &data.test][split];
                proptest::prop_assert_eq!(&ds.samples[index], &sample);
            }
            for (l, b) in sample.gt_boxes.iter().enumerate() {
                proptest::prop_assert_eq!(b.is_some(), sample.labels[l] == 1);
                proptest::prop_assert!(b.is_none_or(|b| b.fits(64, 64)));
            }
        }
    }
}
