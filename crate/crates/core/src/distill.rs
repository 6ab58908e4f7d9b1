//! Hint-based compression: a frozen teacher's feature maps supervise a
//! compact student, followed by attribute-only training.

use std::io::Write;
use std::path::Path;

use log::info;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::netspec::{build, Network, NetworkSpec, Shape};
use crate::synthgen::Dataset;
use crate::tensor::{Graph, Tensor, Var};
use crate::train::{self, Item, SgdConfig};

/// One phase of the student objective `hint_weight * L_hint + attr_weight * L_attr`.
#[derive(Clone, Debug, PartialEq)]
pub struct HintStage {
    pub hint_weight: f64,
    pub attr_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// Teacher layer index supplying hint targets; `None` picks its last conv.
    pub teacher_layer: Option<usize>,
    /// Student layer index being supervised; `None` picks its last conv.
    pub student_layer: Option<usize>,
    pub stages: Vec<HintStage>,
    /// Use the squared norm instead of the plain Euclidean norm.
    pub squared: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hflip: bool,
}

impl DistillConfig {
    /// Hint-only phase followed by an attribute-only phase.
    pub fn two_stage(hint: (f64, usize), attr: (f64, usize), sgd: &SgdConfig) -> Self {
        Self {
            teacher_layer: None,
            student_layer: None,
            stages: vec![
                HintStage {
                    hint_weight: 1.0,
                    attr_weight: 0.0,
                    learning_rate: hint.0,
                    epochs: hint.1,
                },
                HintStage {
                    hint_weight: 0.0,
                    attr_weight: 1.0,
                    learning_rate: attr.0,
                    epochs: attr.1,
                },
            ],
            squared: false,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            batch_size: sgd.batch_size,
            seed: sgd.seed,
            hflip: sgd.hflip,
        }
    }

    fn sgd(&self, stage: usize) -> SgdConfig {
        let s = &self.stages[stage];
        SgdConfig {
            learning_rate: s.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: s.epochs,
            batch_size: self.batch_size,
            seed: self.seed.wrapping_add(stage as u64 * 7919),
            hflip: self.hflip,
        }
    }
}

/// Mean training losses of one epoch. A term whose weight is zero in its
/// stage is not evaluated and left as `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub stage: usize,
    pub hint_loss: Option<f64>,
    pub attr_loss: Option<f64>,
}

/// Batch mean of the per-sample Euclidean distance between two feature
/// tensors with a leading batch axis.
pub fn hint_loss(teacher: &Tensor<f64>, student: &Tensor<f64>, squared: bool) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(teacher.clone());
    let s = g.constant(student.clone());
    let l = g.hint_loss(t, s, squared)?;
    Ok(g.value(l).data()[0])
}

/// Combines whichever terms are present with their stage weights.
pub fn objective(g: &mut Graph<f32>, hint: Option<Var>, attr: Option<Var>, stage: &HintStage) -> Result<Var> {
    let terms: Vec<(f32, Var)> = [(stage.hint_weight, hint), (stage.attr_weight, attr)]
        .into_iter()
        .filter_map(|(w, v)| v.map(|v| (w as f32, v)))
        .collect();
    if terms.is_empty() {
        return Err(Error::Config("stage optimizes nothing: both weights are zero".into()));
    }
    g.weighted_sum(&terms)
}

fn resolve(spec: &NetworkSpec, layer: Option<usize>, role: &str) -> Result<(usize, Shape)> {
    let (shapes, _) = spec.plan()?;
    let k = match layer {
        Some(k) => k,
        None => spec
            .last_conv()
            .ok_or_else(|| Error::Config(format!("{role} `{}` has no conv layer", spec.name)))?,
    };
    let shape = *shapes.get(k).ok_or_else(|| {
        Error::Config(format!("{role} layer {k} is out of range for `{}` ({} layers)", spec.name, shapes.len()))
    })?;
    Ok((k, shape))
}

/// Resolved `(teacher_layer, student_layer)`; fails when the chosen layers
/// can never produce equally shaped features.
pub fn hint_layers(teacher: &NetworkSpec, student: &NetworkSpec, cfg: &DistillConfig) -> Result<(usize, usize)> {
    let (k, tk) = resolve(teacher, cfg.teacher_layer, "teacher")?;
    let (l, sl) = resolve(student, cfg.student_layer, "student")?;
    if tk != sl {
        return Err(Error::Config(format!(
            "hint layers cannot match: teacher layer {k} gives {tk:?}, student layer {l} gives {sl:?}"
        )));
    }
    if teacher.input != student.input {
        return Err(Error::Config(format!(
            "teacher input {:?} differs from student input {:?}",
            teacher.input, student.input
        )));
    }
    Ok((k, l))
}

/// Teacher features at layer `k` for a batch, without gradient tracking.
pub fn features(net: &Network<f32>, input: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let vars = net.params.bind(&mut g, false);
    let x = g.constant(input.clone());
    let out = net.forward_until(&mut g, x, &vars, k + 1)?;
    Ok(g.value(out.layers[k]).clone())
}

/// Mean hint loss of `student` against `teacher` over `items`.
pub fn mean_hint_loss(
    teacher: &Network<f32>,
    student: &Network<f32>,
    data: &Dataset,
    items: &[Item],
    layers: (usize, usize),
    squared: bool,
) -> Result<f64> {
    let x = train::image_batch(data, items);
    let t = features(teacher, &x, layers.0)?.cast::<f64>();
    let s = features(student, &x, layers.1)?.cast::<f64>();
    hint_loss(&t, &s, squared)
}

/// Builds a He-initialized student and runs every stage of `cfg`. The
/// teacher is only read.
pub fn compress(
    teacher: &Network<f32>,
    student_spec: &NetworkSpec,
    data: &Dataset,
    cfg: &DistillConfig,
) -> Result<(Network<f32>, Vec<LossRecord>)> {
    let layers = hint_layers(&teacher.spec, student_spec, cfg)?;
    student_spec.validate(false)?;
    if data.attribute_count() != student_spec.attribute_count {
        return Err(Error::Data(format!(
            "dataset has {} labels per sample, student predicts {}",
            data.attribute_count(),
            student_spec.attribute_count
        )));
    }
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    for (i, s) in cfg.stages.iter().enumerate() {
        if s.hint_weight == 0.0 && s.attr_weight == 0.0 {
            return Err(Error::Config(format!("stage {i}: both loss weights are zero")));
        }
    }
    let mut student = build::<f32>(student_spec, cfg.seed)?;
    let mut log = Vec::new();
    for stage in 0..cfg.stages.len() {
        log.extend(run_stage(teacher, &mut student, data, cfg, stage, layers)?);
    }
    Ok((student, log))
}

fn run_stage(
    teacher: &Network<f32>,
    student: &mut Network<f32>,
    data: &Dataset,
    cfg: &DistillConfig,
    stage: usize,
    (k, l): (usize, usize),
) -> Result<Vec<LossRecord>> {
    let phase = &cfg.stages[stage];
    let sgd = cfg.sgd(stage);
    let mut opt = sgd.optimizer::<f32>()?;
    // a hint-only phase trains just the layers feeding the hint layer
    let (upto, trained) = if phase.attr_weight == 0.0 {
        (l + 1, student.spec.param_tensors_before(l + 1))
    } else {
        (student.spec.layers.len(), student.params.len())
    };
    let mut log = Vec::with_capacity(sgd.epochs);
    for epoch in 0..sgd.epochs {
        let (mut hint_sum, mut attr_sum, mut steps) = (0.0, 0.0, 0usize);
        for items in train::epoch_batches(data.len(), sgd.batch_size, sgd.seed, epoch, sgd.hflip) {
            let input = train::image_batch(data, &items);
            let mut g = Graph::new();
            let vars = student.params.bind(&mut g, true);
            let x = g.constant(input.clone());
            let out = student.forward_until(&mut g, x, &vars, upto)?;
            let hint = if phase.hint_weight != 0.0 {
                let target = g.constant(features(teacher, &input, k)?);
                let h = g.hint_loss(target, out.layers[l], cfg.squared)?;
                hint_sum += g.value(h).data()[0] as f64;
                Some(h)
            } else {
                None
            };
            let attr = if phase.attr_weight != 0.0 {
                let a = g.sigmoid_bce(out.logits, &train::label_batch::<f32>(data, &items))?;
                attr_sum += g.value(a).data()[0] as f64;
                Some(a)
            } else {
                None
            };
            let loss = objective(&mut g, hint, attr, phase)?;
            g.backward(loss)?;
            student.params.collect_grads(&mut g, &vars)?;
            let frozen = student.params.split_off(trained);
            let stepped = opt.step(&mut student.params);
            student.params.append(frozen);
            stepped?;
            steps += 1;
        }
        let mean = |s: f64, on: bool| on.then(|| s / steps as f64);
        let rec = LossRecord {
            epoch,
            stage,
            hint_loss: mean(hint_sum, phase.hint_weight != 0.0),
            attr_loss: mean(attr_sum, phase.attr_weight != 0.0),
        };
        info!("distill stage {stage} epoch {epoch}: hint {:?} attr {:?}", rec.hint_loss, rec.attr_loss);
        log.push(rec);
    }
    Ok(log)
}

/// Loss curves as CSV with header `epoch,stage,hint_loss,attr_loss`.
pub fn write_loss_csv<W: Write>(out: W, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let io = |e: csv::Error| Error::Data(format!("writing loss csv: {e}"));
    w.write_record(["epoch", "stage", "hint_loss", "attr_loss"]).map_err(io)?;
    for r in log {
        w.write_record([r.epoch.to_string(), r.stage.to_string(), cell(r.hint_loss), cell(r.attr_loss)])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("flushing loss csv", e))
}

pub fn save_loss_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_loss_csv(file, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::presets::{desk_frl, desk_frl_four_pool, desk_student};
    use crate::synthgen::{generate, SplitCounts, SyntheticSpec};

    fn tiny(n: usize) -> Dataset {
        let spec = SyntheticSpec {
            counts: SplitCounts {
                train: n,
                val: 1,
                test: 1,
            },
            ..Default::default()
        };
        generate(&spec, 3).unwrap().train
    }

    fn cfg(hint_lr: f64, epochs: usize) -> DistillConfig {
        let sgd = SgdConfig {
            learning_rate: 0.0,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 0,
            batch_size: 16,
            seed: 1,
            hflip: false,
        };
        DistillConfig::two_stage((hint_lr, epochs), (0.01, epochs), &sgd)
    }

    #[test]
    fn hint_loss_values() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![4.0, 5.0]).unwrap();
        assert_eq!(hint_loss(&a, &a, false).unwrap(), 0.0);
        assert_eq!(hint_loss(&a, &b, false).unwrap(), 5.0);
        assert_eq!(hint_loss(&a, &b, true).unwrap(), 25.0);
        let t = Tensor::<f64>::zeros(&[2, 48, 4, 4]);
        let s = Tensor::<f64>::zeros(&[2, 32, 4, 4]);
        let err = hint_loss(&t, &s, false).unwrap_err().to_string();
        assert!(err.contains("48") && err.contains("32"), "{err}");
    }

    #[test]
    fn objective_reduces_to_single_terms() {
        let mut g = Graph::<f32>::new();
        let h = g.constant(Tensor::scalar(0.37));
        let a = g.constant(Tensor::scalar(1.91));
        let only_attr = HintStage {
            hint_weight: 0.0,
            attr_weight: 1.0,
            learning_rate: 0.1,
            epochs: 1,
        };
        let only_hint = HintStage {
            hint_weight: 1.0,
            attr_weight: 0.0,
            ..only_attr.clone()
        };
        let o = objective(&mut g, Some(h), Some(a), &only_attr).unwrap();
        assert_eq!(g.value(o).data()[0], 1.91);
        let o = objective(&mut g, Some(h), Some(a), &only_hint).unwrap();
        assert_eq!(g.value(o).data()[0], 0.37);
    }

    #[test]
    fn mismatched_hint_layers_rejected_before_training() {
        let teacher = build::<f32>(&desk_frl_four_pool(6, 8), 0).unwrap();
        let err = compress(&teacher, &desk_student(6, 4), &tiny(4), &cfg(0.01, 1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let mut c = cfg(0.01, 1);
        c.teacher_layer = Some(99);
        assert!(matches!(
            compress(&teacher, &desk_student(6, 8), &tiny(4), &c),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hint_stage_lowers_held_out_hint_loss_and_leaves_teacher_alone() {
        let train_set = tiny(64);
        let probe = tiny(96);
        let items: Vec<Item> = (64..96).map(|index| Item { index, flip: false }).collect();
        let teacher = build::<f32>(&desk_frl(6, 8), 9).unwrap();
        let before_teacher = teacher.params.clone();
        let spec = desk_student(6, 8);
        let mut c = cfg(0.01, 3);
        c.stages.truncate(1);
        let layers = hint_layers(&teacher.spec, &spec, &c).unwrap();
        let init = build::<f32>(&spec, c.seed).unwrap();
        let before = mean_hint_loss(&teacher, &init, &probe, &items, layers, false).unwrap();
        let (student, log) = compress(&teacher, &spec, &train_set, &c).unwrap();
        let after = mean_hint_loss(&teacher, &student, &probe, &items, layers, false).unwrap();
        assert!(after < before, "{before} -> {after}");
        assert!(teacher.params.bit_eq(&before_teacher));
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|r| r.hint_loss.is_some() && r.attr_loss.is_none()));
    }

    #[test]
    fn loss_csv_layout() {
        let log = vec![
            LossRecord {
                epoch: 0,
                stage: 0,
                hint_loss: Some(2.5),
                attr_loss: None,
            },
            LossRecord {
                epoch: 0,
                stage: 1,
                hint_loss: None,
                attr_loss: Some(0.25),
            },
        ];
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &log).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,stage,hint_loss,attr_loss\n0,0,2.5,\n0,1,,0.25\n"
        );
    }

    fn feats(dims: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_fn(dims, |i| vals[i % vals.len()])
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn hint_is_a_batch_mean_of_distances(
            b in 1usize..4,
            d in 1usize..10,
            t in proptest::collection::vec(-4.0f64..4.0, 40),
            s in proptest::collection::vec(-4.0f64..4.0, 37),
            squared: bool,
        ) {
            let (t, s) = (feats(&[b, d], &t), feats(&[b, d], &s));
            let got = hint_loss(&t, &s, squared).unwrap();
            let mut want = 0.0;
            for k in 0..b {
                let sq: f64 = (0..d).map(|i| (t.data()[k * d + i] - s.data()[k * d + i]).powi(2)).sum();
                want += if squared { sq } else { sq.sqrt() };
            }
            want /= b as f64;
            proptest::prop_assert!(got >= 0.0);
            proptest::prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want));
            proptest::prop_assert_eq!(got == 0.0, t == s);
            proptest::prop_assert_eq!(hint_loss(&t, &t, squared).unwrap(), 0.0);
            proptest::prop_assert!((hint_loss(&s, &t, squared).unwrap() - got).abs() <= 1e-12 * (1.0 + got));
        }

        #[test]
        fn hint_gradient_matches_differences(
            vals in proptest::collection::vec(-2.0f64..2.0, 24),
            squared: bool,
            seed in 0u64..1000,
        ) {
            use crate::tensor::{grad_check, GradCheckOptions};
            let teacher = feats(&[2, 3, 2, 2], &vals);
            let student = feats(&[2, 3, 2, 2], &vals[5..]).map(|v| v + 0.3);
            let opts = GradCheckOptions { seed, ..Default::default() };
            let r = grad_check(&[student], &opts, |g, v| {
                let t = g.constant(teacher.clone());
                g.hint_loss(t, v[0], squared)
            }).unwrap();
            proptest::prop_assert!(r.max_rel_err < 1e-5, "{:?}", r);
        }
    }
}
