//! The five training stages, each reading the previous stage's checkpoint
//! from the run directory and writing its own.
//!
//! | stage | command        | writes                                 |
//! |-------|----------------|----------------------------------------|
//! | 1     | `train-frl`    | `frl.pawc`                             |
//! | 2     | `compress`     | `whole.pawc`, `compress_loss.csv`      |
//! | 3     | `train-parts`  | `parts.pawc`                           |
//! | 4     | `train-fusion` | `fusion.pawc`, `rsl.csv`, `arl.csv`    |
//! | 5     | `finetune`     | `paw.pawc`, `rsl.csv`, `arl.csv`       |

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use super::*;
use crate::config::RunConfig;
use crate::distill::{self, LossRecord};
use crate::frl::{self, FrlEpoch, FrlNetwork};
use crate::netspec::{self, attach, NetworkSpec};
use crate::synthgen::SyntheticData;

pub const FRL_CKPT: &str = "frl.pawc";
pub const WHOLE_CKPT: &str = "whole.pawc";
pub const PARTS_CKPT: &str = "parts.pawc";
pub const FUSION_CKPT: &str = "fusion.pawc";
pub const PAW_CKPT: &str = "paw.pawc";
pub const GRID_DIR: &str = "grid";
/// Tiles per side of the grid baseline.
pub const GRID_CELLS: usize = 4;

#[derive(Clone, Debug, Serialize)]
pub struct FrlSummary {
    pub params: usize,
    pub epochs: Vec<FrlEpoch>,
    pub test_accuracy: Accuracy,
    pub hit_rates: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompressSummary {
    pub teacher_params: usize,
    pub student_params: usize,
    pub teacher_accuracy: Accuracy,
    pub student_accuracy: Accuracy,
    pub log: Vec<LossRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PartsSummary {
    pub part_only: Accuracy,
    pub whole_only: Accuracy,
}

#[derive(Clone, Debug, Serialize)]
pub struct FusionSummary {
    pub epochs: Vec<FusionEpoch>,
    pub test_accuracy: Accuracy,
    /// `[M+1, M]` row-major; row 0 is the whole subnet.
    pub rsl: Vec<f32>,
    /// `[M, M]` row-major.
    pub arl: Vec<f32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub paw: Accuracy,
    pub part_only: Accuracy,
    pub whole_only: Accuracy,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridSummary {
    pub tiles: Vec<RegionBox>,
    pub part_only: Accuracy,
    pub fusion: FusionSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineSummary {
    pub frl: FrlSummary,
    pub compress: CompressSummary,
    pub parts: PartsSummary,
    pub fusion: FusionSummary,
    pub finetune: FusionSummary,
    pub evaluation: Evaluation,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub data: SyntheticData,
    pub dir: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, data: SyntheticData, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        if data.train.attribute_count() != cfg.attribute_count() {
            return Err(Error::Data(format!(
                "dataset has {} attributes, config expects {}",
                data.train.attribute_count(),
                cfg.attribute_count()
            )));
        }
        Ok(Self {
            cfg,
            data,
            dir: dir.to_path_buf(),
        })
    }

    fn require(&self, stage: &str, file: &str) -> Result<PathBuf> {
        let path = self.dir.join(file);
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingStage {
                stage: stage.into(),
                missing: path,
            })
        }
    }

    fn m(&self) -> usize {
        self.cfg.attribute_count()
    }

    pub fn load_frl(&self, stage: &str) -> Result<FrlNetwork<f32>> {
        let path = self.require(stage, FRL_CKPT)?;
        FrlNetwork::from_network(netspec::load(&self.cfg.teacher_spec()?, &path)?)
    }

    pub fn load_whole(&self, stage: &str) -> Result<Network<f32>> {
        netspec::load(&self.cfg.student_spec()?, &self.require(stage, WHOLE_CKPT)?)
    }

    fn part_spec(&self, whole: &NetworkSpec, side: usize, j: usize) -> NetworkSpec {
        let mut spec = whole.clone().with_input((3, side, side));
        spec.name = format!("part{j}");
        spec
    }

    fn patch(&self) -> usize {
        frl::patch_side((self.cfg.image_size, self.cfg.image_size), self.cfg.patch_frac)
    }

    fn load_parts_from(&self, stage: &str, dir: &Path, side: usize) -> Result<Vec<Network<f32>>> {
        let path = dir.join(PARTS_CKPT);
        if !path.exists() {
            return Err(Error::MissingStage {
                stage: stage.into(),
                missing: path,
            });
        }
        let all = netspec::load_params(&path)?;
        let whole = self.cfg.student_spec()?;
        (0..self.m())
            .map(|j| attach(&self.part_spec(&whole, side, j), unprefixed(&all, &format!("part{j}."))?))
            .collect()
    }

    pub fn load_model(&self, stage: &str) -> Result<PawModel> {
        let all = netspec::load_params(&self.require(stage, PAW_CKPT)?)?;
        let whole_spec = self.cfg.student_spec()?;
        let whole = attach(&whole_spec, unprefixed(&all, "whole.")?)?;
        let parts = (0..self.m())
            .map(|j| attach(&self.part_spec(&whole_spec, self.patch(), j), unprefixed(&all, &format!("part{j}."))?))
            .collect::<Result<_>>()?;
        let mut fusion = ParamSet::new();
        for name in [RSL_WEIGHT, ARL_WEIGHT, ARL_BIAS] {
            let t = all
                .get(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("{PAW_CKPT} lacks `{name}`")))?;
            fusion.push(name, t.clone())?;
        }
        Ok(PawModel {
            whole,
            parts,
            fusion: Fusion::from_params(fusion)?,
        })
    }

    /// FRL regions for the train, val and test splits.
    pub fn frl_regions(&self, frl: &FrlNetwork<f32>) -> Result<[PartRegions; 3]> {
        let f = self.cfg.patch_frac;
        Ok([
            PartRegions::from_frl(frl, &self.data.train, f)?,
            PartRegions::from_frl(frl, &self.data.val, f)?,
            PartRegions::from_frl(frl, &self.data.test, f)?,
        ])
    }

    /// Stage 1: localization network, with or without the auxiliary branch.
    pub fn train_frl(&self) -> Result<FrlSummary> {
        let spec = self.cfg.teacher_spec()?;
        let sgd = self.cfg.frl_sgd();
        let hidden = self.cfg.mnl.then_some(self.cfg.mnl_hidden);
        let mut net = FrlNetwork::new(&spec, hidden, sgd.seed)?;
        let epochs = frl::train_mnl(&mut net, &self.data.train, &sgd)?;
        let net = FrlNetwork::from_network(net.detach())?;
        netspec::save(&net.net, &self.dir.join(FRL_CKPT))?;
        Ok(FrlSummary {
            params: net.net.param_count(),
            epochs,
            test_accuracy: frl::evaluate_localization(&net, &self.data.test)?,
            hit_rates: frl::hit_rates(&net, &self.data.test)?,
        })
    }

    /// Stage 2: hint-based compression of the localization net into `g_0`.
    pub fn compress(&self) -> Result<CompressSummary> {
        let teacher = self.load_frl("compress")?.net;
        let (student, log) = distill::compress(&teacher, &self.cfg.student_spec()?, &self.data.train, &self.cfg.distill())?;
        netspec::save(&student, &self.dir.join(WHOLE_CKPT))?;
        distill::save_loss_csv(&self.dir.join("compress_loss.csv"), &log)?;
        let acc = |n: &Network<f32>| Accuracy::from_logits(&train::predict_images(n, &self.data.test)?, &self.data.test);
        Ok(CompressSummary {
            teacher_params: teacher.param_count(),
            student_params: student.param_count(),
            teacher_accuracy: acc(&teacher)?,
            student_accuracy: acc(&student)?,
            log,
        })
    }

    fn parts_stage(&self, regions: &[PartRegions; 3], dir: &Path, stage: &str) -> Result<PartsSummary> {
        let whole = self.load_whole(stage)?;
        let parts = train_parts(&whole, &self.data.train, &regions[0], &self.cfg.part_sgd(), self.cfg.threads)?;
        let mut all = ParamSet::new();
        for (j, p) in parts.iter().enumerate() {
            all.append(prefixed(&p.params, &format!("part{j}."))?);
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        netspec::save_params(&all, &dir.join(PARTS_CKPT))?;
        let s = score_matrices(&whole, &parts, &self.data.test, &regions[2], false)?;
        Ok(PartsSummary {
            part_only: Accuracy::from_logits(&s.part_only(), &self.data.test)?,
            whole_only: Accuracy::from_logits(&s.whole_only(), &self.data.test)?,
        })
    }

    /// Stage 3: part subnets initialized from `g_0`, trained on FRL crops.
    pub fn train_parts(&self) -> Result<PartsSummary> {
        let frl = self.load_frl("train-parts")?;
        self.require("train-parts", WHOLE_CKPT)?;
        self.parts_stage(&self.frl_regions(&frl)?, &self.dir, "train-parts")
    }

    fn fusion_stage(&self, regions: &[PartRegions; 3], dir: &Path, side: usize, stage: &str) -> Result<FusionSummary> {
        let whole = self.load_whole(stage)?;
        let parts = self.load_parts_from(stage, dir, side)?;
        let train_scores = [
            score_matrices(&whole, &parts, &self.data.train, &regions[0], false)?,
            score_matrices(&whole, &parts, &self.data.train, &regions[0], true)?,
        ];
        let val_scores = score_matrices(&whole, &parts, &self.data.val, &regions[1], false)?;
        let sgd = self.cfg.fusion_sgd();
        let mut fusion = Fusion::new(self.m(), sgd.seed)?;
        let epochs = train_fusion(
            &mut fusion,
            &train_scores,
            &self.data.train,
            &val_scores,
            &self.data.val,
            &sgd,
            self.cfg.fusion_patience,
        )?;
        netspec::save_params(&fusion.params, &dir.join(FUSION_CKPT))?;
        self.write_fusion_csv(&fusion, dir)?;
        let model = PawModel { whole, parts, fusion };
        Ok(FusionSummary {
            epochs,
            test_accuracy: evaluate(&model, &self.data.test, &regions[2])?,
            rsl: model.fusion.rsl().data().to_vec(),
            arl: model.fusion.arl_weight().data().to_vec(),
        })
    }

    /// Stage 4: RSL and ARL on top of the fixed subnets.
    pub fn train_fusion(&self) -> Result<FusionSummary> {
        let frl = self.load_frl("train-fusion")?;
        self.fusion_stage(&self.frl_regions(&frl)?, &self.dir, self.patch(), "train-fusion")
    }

    /// Stage 5: end-to-end fine-tuning of every subnet and the fusion layers.
    /// The localization network stays frozen.
    pub fn finetune(&self) -> Result<FusionSummary> {
        let stage = "finetune";
        let frl = self.load_frl(stage)?;
        let mut model = PawModel {
            whole: self.load_whole(stage)?,
            parts: self.load_parts_from(stage, &self.dir, self.patch())?,
            fusion: Fusion::from_params(netspec::load_params(&self.require(stage, FUSION_CKPT)?)?)?,
        };
        let regions = self.frl_regions(&frl)?;
        let epochs = finetune(
            &mut model,
            &self.data.train,
            &regions[0],
            &self.data.val,
            &regions[1],
            &self.cfg.finetune_sgd(),
            self.cfg.finetune_patience,
        )?;
        netspec::save_params(&model.to_params()?, &self.dir.join(PAW_CKPT))?;
        self.write_fusion_csv(&model.fusion, &self.dir)?;
        Ok(FusionSummary {
            epochs,
            test_accuracy: evaluate(&model, &self.data.test, &regions[2])?,
            rsl: model.fusion.rsl().data().to_vec(),
            arl: model.fusion.arl_weight().data().to_vec(),
        })
    }

    /// Test accuracy of the fused model against the part-only and
    /// whole-only readouts of the stage-3 subnets; per-attribute tables go
    /// to `accuracy.csv`.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let stage = "eval";
        let frl = self.load_frl(stage)?;
        let model = self.load_model(stage)?;
        let whole = self.load_whole(stage)?;
        let parts = self.load_parts_from(stage, &self.dir, self.patch())?;
        let regions = PartRegions::from_frl(&frl, &self.data.test, self.cfg.patch_frac)?;
        let base = score_matrices(&whole, &parts, &self.data.test, &regions, false)?;
        let fused = self.logits_of(&model, &model.scores(&self.data.test, &regions)?)?;
        let eval = Evaluation {
            paw: Accuracy::from_logits(&fused, &self.data.test)?,
            part_only: Accuracy::from_logits(&base.part_only(), &self.data.test)?,
            whole_only: Accuracy::from_logits(&base.whole_only(), &self.data.test)?,
        };
        self.write_accuracy_csv(&eval)?;
        Ok(eval)
    }

    fn logits_of(&self, model: &PawModel, s: &ScoreMatrices) -> Result<Vec<f32>> {
        Ok(model.fusion.logits(&s.gather(0..s.len()))?.into_data())
    }

    /// Part subnets and fusion retrained with fixed grid tiles in place of
    /// FRL regions; each attribute gets the tile that most often holds its
    /// FRL box center. Outputs go to `grid/` in the run directory.
    pub fn grid_baseline(&self) -> Result<GridSummary> {
        let stage = "baseline";
        let frl = self.load_frl(stage)?;
        self.require(stage, WHOLE_CKPT)?;
        let frl_train = PartRegions::from_frl(&frl, &self.data.train, self.cfg.patch_frac)?;
        let tiles = grid_regions(&frl_train, self.data.train.len(), self.cfg.image_size, GRID_CELLS);
        let fixed = || PartRegions::Fixed(tiles.clone());
        let regions = [fixed(), fixed(), fixed()];
        let dir = self.dir.join(GRID_DIR);
        let parts = self.parts_stage(&regions, &dir, stage)?;
        let side = tiles[0].width();
        let fusion = self.fusion_stage(&regions, &dir, side, stage)?;
        Ok(GridSummary {
            tiles,
            part_only: parts.part_only,
            fusion,
        })
    }

    fn names(&self) -> Vec<String> {
        self.data.train.attributes.clone()
    }

    fn write_fusion_csv(&self, fusion: &Fusion<f32>, dir: &Path) -> Result<()> {
        let names = self.names();
        let rows: Vec<String> = std::iter::once("whole".to_string())
            .chain(names.iter().map(|n| format!("part_{n}")))
            .collect();
        let create = |name: &str| {
            let path = dir.join(name);
            fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
        };
        write_matrix_csv(create("rsl.csv")?, fusion.rsl().data(), &rows, &names)?;
        write_matrix_csv(create("arl.csv")?, fusion.arl_weight().data(), &names, &names)
    }

    fn write_accuracy_csv(&self, eval: &Evaluation) -> Result<()> {
        let path = self.dir.join("accuracy.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut values = Vec::new();
        for acc in [&eval.paw, &eval.part_only, &eval.whole_only] {
            values.extend(acc.per_attribute.iter().map(|&a| a as f32));
            values.push(acc.mean as f32);
        }
        let mut cols = self.names();
        cols.push("mean".into());
        let rows = ["paw", "part_only", "whole_only"].map(String::from);
        write_matrix_csv(file, &values, &rows, &cols)
    }

    /// Stages 1 to 5 followed by evaluation.
    pub fn run_all(&self) -> Result<PipelineSummary> {
        let frl = self.train_frl()?;
        info!("stage 1 done: test acc {:.4}, hits {:?}", frl.test_accuracy.mean, frl.hit_rates);
        let compress = self.compress()?;
        info!(
            "stage 2 done: teacher {:.4}, student {:.4}",
            compress.teacher_accuracy.mean, compress.student_accuracy.mean
        );
        let parts = self.train_parts()?;
        info!("stage 3 done: part-only {:.4}, whole-only {:.4}", parts.part_only.mean, parts.whole_only.mean);
        let fusion = self.train_fusion()?;
        info!("stage 4 done: fused {:.4}", fusion.test_accuracy.mean);
        let finetune = self.finetune()?;
        info!("stage 5 done: fused {:.4}", finetune.test_accuracy.mean);
        let evaluation = self.evaluate()?;
        Ok(PipelineSummary {
            frl,
            compress,
            parts,
            fusion,
            finetune,
            evaluation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        for kv in [
            "train_count=32",
            "val_count=16",
            "test_count=16",
            "frl_epochs=1",
            "hint_epochs=1",
            "attr_epochs=1",
            "part_epochs=1",
            "fusion_epochs=2",
            "finetune_epochs=1",
            "batch_size=16",
        ] {
            cfg.override_with(kv).unwrap();
        }
        cfg
    }

    /// Every stage run from a fresh process-like handle continues exactly
    /// where the previous one stopped.
    #[test]
    fn stages_resume_from_checkpoints() {
        let cfg = tiny();
        let data = generate(&cfg.synthetic_spec(), cfg.seed).unwrap();
        let root = tempfile::tempdir().unwrap();
        let (a, b) = (root.path().join("a"), root.path().join("b"));
        Pipeline::new(cfg.clone(), data.clone(), &a).unwrap().run_all().unwrap();

        let fresh = || Pipeline::new(cfg.clone(), data.clone(), &b).unwrap();
        assert!(matches!(fresh().train_fusion(), Err(Error::MissingStage { .. })));
        fresh().train_frl().unwrap();
        assert!(matches!(fresh().train_parts(), Err(Error::MissingStage { .. })));
        fresh().compress().unwrap();
        fresh().train_parts().unwrap();
        fresh().train_fusion().unwrap();
        fresh().finetune().unwrap();
        fresh().evaluate().unwrap();
        for f in [FRL_CKPT, WHOLE_CKPT, PARTS_CKPT, FUSION_CKPT, PAW_CKPT, "accuracy.csv", "rsl.csv"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
        let model = fresh().load_model("check").unwrap();
        assert_eq!(model.parts.len(), cfg.attribute_count());
    }
}
