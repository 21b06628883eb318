//! Per-item localize / edit / evaluate steps and their on-disk artifacts.

use std::path::{Path, PathBuf};

use dcedit_core::bench::{blend_positions, load_latent, load_manifest, load_mask, BenchmarkItem, ImageRef, Manifest, SyntheticScene};
use dcedit_core::dlc::{invert, make_schedule, reconstruct_cached, sample_edit_with_mask, binarize_map, BinaryMask, EditTrace, GuidedModel};
use dcedit_core::evalmetrics::{map_iou, map_mse, masked_mse, per_channel, psnr, resample_mask, ssim, GroundTruthMask};
use dcedit_core::mmdit::{Grid, LatentState, Model};
use dcedit_core::psl::{capture_attention, refine_with, FusedMaps, RefinedMap, Selection};
use dcedit_core::tensorfile::{write_atomic, Tensor};
use dcedit_core::Error;
use serde::Serialize;

use crate::config::RunConfig;
use crate::HarnessError;

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Output file names for one item.
#[derive(Clone, Debug)]
pub struct ItemPaths {
    pub map: PathBuf,
    pub map_png: PathBuf,
    pub edit: PathBuf,
    pub recon: PathBuf,
    pub trace: PathBuf,
}

impl ItemPaths {
    pub fn new(dir: &Path, id: &str) -> Self {
        Self {
            map: dir.join(format!("{id}.map.tnsr")),
            map_png: dir.join(format!("{id}.map.png")),
            edit: dir.join(format!("{id}.edit.tnsr")),
            recon: dir.join(format!("{id}.recon.tnsr")),
            trace: dir.join(format!("{id}.trace.tnsa")),
        }
    }
}

/// A source latent and, when known, its edit mask at latent resolution.
#[derive(Clone, Debug)]
pub struct Source {
    pub latent: LatentState,
    pub mask: Option<GroundTruthMask>,
}

pub struct Session {
    pub config: RunConfig,
    pub model: Model,
    pub manifest: Manifest,
}

impl Session {
    pub fn open(config: RunConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let manifest = load_manifest(&config.manifest)?;
        let model = Model::init(config.model.clone())?;
        Ok(Self { config, model, manifest })
    }

    /// The requested item, or every item when `id` is `None`.
    pub fn items(&self, id: Option<&str>) -> Result<Vec<&BenchmarkItem>, HarnessError> {
        match id {
            Some(id) => self
                .manifest
                .item(id)
                .map(|i| vec![i])
                .ok_or_else(|| HarnessError::MissingItem(id.to_string())),
            None => Ok(self.manifest.items.iter().collect()),
        }
    }

    pub fn source(&self, item: &BenchmarkItem) -> Result<Source, HarnessError> {
        let (grid, scene_mask) = match &item.image {
            ImageRef::Synthetic(seed) => {
                let s = SyntheticScene::generate(*seed, self.config.grid_h, self.config.grid_w, self.config.model.channels)?;
                (s.latent, Some(s.object_mask))
            }
            ImageRef::Latent(path) => (load_latent(path)?, None),
        };
        let (h, w, c) = grid.dims();
        if c != self.config.model.channels {
            return Err(Error::ShapeMismatch {
                context: "source latent channels",
                expected: self.config.model.channels.to_string(),
                actual: c.to_string(),
            }
            .into());
        }
        let mask = match &item.mask {
            Some(p) => Some(resample_mask(&load_mask(p)?, w, h)),
            None => scene_mask,
        };
        Ok(Source {
            latent: LatentState::new(grid, 0.0),
            mask,
        })
    }

    /// Source-prompt word positions to localize; every word when the edit
    /// only inserts.
    fn positions(&self, item: &BenchmarkItem, select: Option<&[usize]>) -> Vec<usize> {
        let p = match select {
            Some(s) => s.to_vec(),
            None => blend_positions(item),
        };
        if p.is_empty() {
            (0..item.source_prompt.len()).collect()
        } else {
            p
        }
    }

    pub fn localize(&self, item: &BenchmarkItem, src: &Source, select: Option<&[usize]>) -> Result<RefinedMap, HarnessError> {
        let prompt = self.model.encode_prompt(&item.source_prompt)?;
        let sel = Selection::from_word_positions(&prompt.spans, self.positions(item, select))?;
        let records = capture_attention(&self.model, &src.latent, &prompt)?;
        let fused = FusedMaps::from_records(&records)?;
        Ok(refine_with(&fused, &sel, self.config.epsilon, self.config.aggregation)?)
    }

    /// Loads a stored trace when present and consistent with this run, else
    /// inverts and stores one.
    pub fn trace(&self, item: &BenchmarkItem, src: &Source, path: &Path) -> Result<EditTrace, HarnessError> {
        let ctl = &self.config.control;
        let field = GuidedModel::new(&self.model, ctl.cfg_scale);
        if path.exists() {
            let trace = EditTrace::load(path).map_err(|e| match e {
                Error::TraceMismatch(m) => Error::TraceMismatch(m),
                other => Error::TraceMismatch(format!("{}: {other}", path.display())),
            })?;
            self.check_trace(&trace, src)?;
            return Ok(trace);
        }
        let prompt = self.model.encode_prompt(&item.source_prompt)?;
        let schedule = make_schedule(ctl.steps)?;
        let (_, trace) = invert(&field, &src.latent, &prompt, &schedule, ctl.r(self.config.model.layers))?;
        trace.save(path)?;
        Ok(trace)
    }

    fn check_trace(&self, trace: &EditTrace, src: &Source) -> Result<(), HarnessError> {
        let ctl = &self.config.control;
        let fail = |m: &str| Err(HarnessError::Core(Error::TraceMismatch(m.to_string())));
        if trace.steps() != ctl.steps {
            return fail("stored trace was recorded with a different step count");
        }
        if trace.latents[0] != src.latent {
            return fail("stored trace was recorded from a different source latent");
        }
        let has_uncond = trace.stored_values.iter().all(|s| !s.uncond.is_empty());
        if trace.r > 0 && has_uncond != (ctl.cfg_scale != 1.0) {
            return fail("stored trace guidance branches do not match cfg scale");
        }
        Ok(())
    }

    /// Runs inversion (or reuses the trace) and controlled sampling.
    pub fn edit(
        &self,
        item: &BenchmarkItem,
        src: &Source,
        map: &RefinedMap,
        mask_override: Option<&BinaryMask>,
        trace_path: &Path,
    ) -> Result<(LatentState, LatentState), HarnessError> {
        let ctl = &self.config.control;
        let trace = self.trace(item, src, trace_path)?;
        let field = GuidedModel::new(&self.model, ctl.cfg_scale);
        let target = self.model.encode_prompt(&item.target_prompt)?;
        let mask = match mask_override {
            Some(m) => m.clone(),
            None => binarize_map(map, ctl.lambda)?,
        };
        let z_k = &trace.latents[trace.steps()];
        let edited = sample_edit_with_mask(&field, z_k, &target, &trace, map, &mask, ctl)?;
        let recon = reconstruct_cached(&trace)?;
        Ok((edited, recon))
    }
}

pub fn grid_tensor(g: &Grid) -> Tensor {
    let (h, w, c) = g.dims();
    Tensor::f32(vec![h as u64, w as u64, c as u64], &g.data)
}

pub fn read_grid(path: &Path) -> Result<Grid, HarnessError> {
    Ok(load_latent(path)?)
}

/// Latent-resolution binary mask from an 8-bit PNG.
pub fn load_binary_mask(path: &Path, grid_h: usize, grid_w: usize) -> Result<BinaryMask, HarnessError> {
    let m = resample_mask(&load_mask(path)?, grid_w, grid_h);
    Ok(BinaryMask {
        bits: m.bits,
        grid_h,
        grid_w,
    })
}

/// One line of `metrics.jsonl`. Missing artifacts or masks give `null`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub id: String,
    pub map_mse: Option<f64>,
    pub map_iou: Option<f64>,
    /// Background MSE in the `[0,1]` latent view.
    pub bg_mse: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lambda: f64,
    /// Map / latent resolution `[h, w]`.
    pub grid: [usize; 2],
}

impl Session {
    /// Metrics for one item from whatever artifacts exist in `dir`;
    /// `None` when the item has none.
    pub fn evaluate(&self, item: &BenchmarkItem, dir: &Path) -> Result<Option<MetricsRecord>, HarnessError> {
        let paths = ItemPaths::new(dir, &item.id);
        let (has_map, has_edit) = (paths.map.exists(), paths.edit.exists());
        if !has_map && !has_edit {
            return Ok(None);
        }
        let src = self.source(item)?;
        let (h, w, _) = src.latent.grid.dims();
        let lambda = self.config.control.lambda;
        let mut rec = MetricsRecord {
            id: item.id.clone(),
            map_mse: None,
            map_iou: None,
            bg_mse: None,
            psnr: None,
            ssim: None,
            lambda,
            grid: [h, w],
        };
        let Some(gt) = &src.mask else {
            return Ok(Some(rec));
        };
        if has_map {
            let map = RefinedMap::from_tensor(&Tensor::read(&paths.map)?)?;
            rec.map_mse = Some(map_mse(&map, gt)?);
            rec.map_iou = Some(map_iou(&map, gt, lambda)?);
        }
        let bg = gt.complement();
        if has_edit && bg.count_ones() > 0 {
            let edited = read_grid(&paths.edit)?;
            let source = &src.latent.grid;
            rec.bg_mse = Some(per_channel(source, &edited, &bg, masked_mse)?);
            rec.psnr = Some(per_channel(source, &edited, &bg, psnr)?);
            rec.ssim = match per_channel(source, &edited, &bg, ssim) {
                Ok(v) => Some(v),
                Err(Error::ImageTooSmall { .. }) => None,
                Err(e) => return Err(e.into()),
            };
        }
        Ok(Some(rec))
    }
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<(), HarnessError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| HarnessError::Config(e.to_string()))?);
        out.push('\n');
    }
    Ok(write_atomic(path, out.as_bytes())?)
}
