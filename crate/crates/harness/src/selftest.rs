//! Fast in-process versions of the module invariant suites.

use dcedit_core::bench::{diff_prompts, SyntheticScene};
use dcedit_core::dlc::{
    feature_fuse, invert, latent_blend, make_schedule, reconstruct_cached, sample_edit_with_mask, BinaryMask, EditTrace, GuidedModel,
};
use dcedit_core::evalmetrics::{iou, masked_mse, psnr, ssim, GrayImage, GroundTruthMask, PSNR_CAP_DB};
use dcedit_core::mmdit::{ForwardOptions, LatentState, Model, ModelConfig, ValueTensor};
use dcedit_core::numerics::{max_abs_diff, minmax_normalize, percentile_threshold, ridge_inverse, softmax_rows, Matrix, Vector};
use dcedit_core::psl::{refine, select_and_aggregate, Aggregation, FusedMaps, RefinedMap, Selection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub passed: usize,
    pub total: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(suite: &'static str) -> Self {
        Self {
            suite,
            ..Default::default()
        }
    }

    fn check(&mut self, name: &str, ok: bool) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else {
            self.failures.push(name.to_string());
        }
    }

    /// Records an `Err` as a failed check.
    fn check_result(&mut self, name: &str, r: dcedit_core::Result<bool>) {
        match r {
            Ok(ok) => self.check(name, ok),
            Err(e) => self.check(&format!("{name}: {e}"), false),
        }
    }
}

pub fn run_all(cfg: &RunConfig, fault: bool) -> Vec<SuiteReport> {
    vec![
        numerics(),
        mmdit(&cfg.model),
        psl(),
        dlc(cfg, fault),
        evalmetrics(),
        bench(),
    ]
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

fn numerics() -> SuiteReport {
    let mut rep = SuiteReport::new("numerics");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..20 {
        let m = random_matrix(&mut rng, 8, 12, 50.0);
        let ok = softmax_rows(&m).map(|s| (0..8).all(|r| (s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12));
        rep.check_result(&format!("softmax rows sum to one #{i}"), ok);
    }
    for i in 0..20 {
        let v: Vec<f64> = (0..rng.gen_range(1..40)).map(|_| rng.gen()).collect();
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let ok = (0..=10).all(|k| {
            let lambda = 10.0 * k as f64;
            let rank = ((lambda / 100.0 * v.len() as f64).ceil() as usize).clamp(1, v.len());
            percentile_threshold(&v, lambda).ok() == Some(sorted[rank - 1])
        });
        rep.check(&format!("percentile matches sort #{i}"), ok);
    }
    let a = random_matrix(&mut rng, 12, 12, 1.0);
    let ok = ridge_inverse(&a, 0.0)
        .and_then(|inv| a.matmul(&inv))
        .map(|p| p.max_abs_diff(&Matrix::identity(12)) <= 1e-8);
    rep.check_result("ridge inverse residual", ok);
    let v = Vector((0..30).map(|_| rng.gen_range(-3.0..3.0)).collect());
    let once = minmax_normalize(&v);
    rep.check("minmax idempotent", minmax_normalize(&once) == once);
    rep
}

fn mmdit(model_cfg: &ModelConfig) -> SuiteReport {
    let mut rep = SuiteReport::new("mmdit");
    let opts = ForwardOptions {
        capture_attention: true,
        ..Default::default()
    };
    for seed in 0..5 {
        let cfg = ModelConfig {
            seed,
            ..model_cfg.clone()
        };
        let r = (|| {
            let model = Model::init(cfg.clone())?;
            let scene = SyntheticScene::generate(seed, 6, 5, cfg.channels)?;
            let prompt = model.encode_prompt(&["a", "striped", "cat"])?;
            let z = LatentState::new(scene.latent, 0.3);
            let out = model.velocity(&z, &prompt, 0.3, &opts)?;
            let again = model.velocity(&z, &prompt, 0.3, &opts)?;
            let rows_ok = out.attention.iter().all(|rec| {
                (0..rec.matrix.rows()).all(|r| (rec.matrix.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-5)
            });
            let count_ok = out.attention.len() == cfg.layers * cfg.heads;
            Ok(rows_ok && count_ok && out.velocity == again.velocity && out.velocity.is_finite())
        })();
        rep.check_result(&format!("attention rows / determinism seed {seed}"), r);
    }
    let same = Model::init(model_cfg.clone()).and_then(|a| Model::init(model_cfg.clone()).map(|b| a.checksum() == b.checksum()));
    rep.check_result("init deterministic", same);
    rep
}

fn row_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    softmax_rows(&random_matrix(rng, n, n, 2.0)).expect("finite")
}

fn psl() -> SuiteReport {
    let mut rep = SuiteReport::new("psl");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..10 {
        let (h, w, n) = (3, 4, 5);
        let cross = Matrix::from_fn(h * w, n, |_, _| rng.gen());
        let sel = Selection::new(vec![rng.gen_range(0..n)]).expect("non-empty");
        let identity = FusedMaps {
            cross: cross.clone(),
            visual_affinity: Matrix::identity(h * w),
            textual: Matrix::identity(n),
            grid_h: h,
            grid_w: w,
        };
        let r = (|| {
            let got = refine(&identity, &sel, 0.0)?;
            let want = minmax_normalize(&select_and_aggregate(&cross, &sel, Aggregation::Mean)?);
            Ok(max_abs_diff(got.as_slice(), want.as_slice()) <= 1e-9)
        })();
        rep.check_result(&format!("identity collapse #{i}"), r);
        let general = FusedMaps {
            cross: cross.clone(),
            visual_affinity: row_stochastic(&mut rng, h * w),
            textual: row_stochastic(&mut rng, n),
            grid_h: h,
            grid_w: w,
        };
        let r = refine(&general, &sel, 1e-6).map(|m| m.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        rep.check_result(&format!("refined map in [0,1] #{i}"), r);
    }
    rep
}

fn dlc(cfg: &RunConfig, fault: bool) -> SuiteReport {
    let mut rep = SuiteReport::new("dlc");
    let r = (|| -> dcedit_core::Result<Vec<(String, bool)>> {
        let model = Model::init(cfg.model.clone())?;
        let field = GuidedModel::new(&model, cfg.control.cfg_scale);
        let prompt = model.encode_prompt(&["a", "red", "bird"])?;
        let target = model.encode_prompt(&["a", "pink", "bird"])?;
        let scene = SyntheticScene::generate(cfg.model.seed, 6, 6, cfg.model.channels)?;
        let z0 = LatentState::new(scene.latent, 0.0);
        let mut checks = Vec::new();
        for k in [1, 4] {
            let schedule = make_schedule(k)?;
            let (_, trace) = invert(&field, &z0, &prompt, &schedule, cfg.control.r(cfg.model.layers))?;
            let mut recon = reconstruct_cached(&trace)?;
            if fault {
                recon.grid.data[0] += 1e-3;
            }
            checks.push((format!("cached reconstruction K={k}"), max_abs_diff(&recon.grid.data, &z0.grid.data) <= 1e-5));
            let back = EditTrace::from_archive(&trace.to_archive())?;
            checks.push((format!("trace archive round trip K={k}"), back == trace));

            let map = RefinedMap::filled(6, 6, 0.5);
            let mut mask = BinaryMask::filled(6, 6, false);
            mask.bits.iter_mut().step_by(3).for_each(|b| *b = true);
            let mut control = cfg.control.clone();
            control.steps = k;
            control.latent_steps = k;
            control.feature_steps = control.feature_steps.min(k);
            let edited = sample_edit_with_mask(&field, &trace.latents[k], &target, &trace, &map, &mask, &control)?;
            let bg_exact = mask
                .bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| !b)
                .all(|(c, _)| max_abs_diff(edited.grid.cell(c), z0.grid.cell(c)) <= 1e-6);
            checks.push((format!("background exact with b=K={k}"), bg_exact));
        }
        Ok(checks)
    })();
    match r {
        Ok(checks) => checks.into_iter().for_each(|(n, ok)| rep.check(&n, ok)),
        Err(e) => rep.check(&format!("pipeline: {e}"), false),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sample = ValueTensor {
        layer: 0,
        text: random_matrix(&mut rng, 3, 4, 1.0),
        visual: random_matrix(&mut rng, 6, 4, 1.0),
    };
    let stored = ValueTensor {
        layer: 0,
        text: random_matrix(&mut rng, 3, 4, 1.0),
        visual: random_matrix(&mut rng, 6, 4, 1.0),
    };
    let r = feature_fuse(&sample, &stored, &RefinedMap::filled(2, 3, 0.0)).map(|f| f.visual == stored.visual && f.text == sample.text);
    rep.check_result("zero map is pure injection", r);
    let a = LatentState::new(SyntheticScene::generate(1, 2, 3, 2).expect("dims").latent, 0.5);
    let b = LatentState::new(SyntheticScene::generate(2, 2, 3, 2).expect("dims").latent, 0.5);
    let r = latent_blend(&a, &b, &BinaryMask::filled(2, 3, true)).map(|z| z == a);
    rep.check_result("all-ones mask keeps the sample", r);
    rep
}

fn evalmetrics() -> SuiteReport {
    let mut rep = SuiteReport::new("evalmetrics");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..5 {
        let px = |rng: &mut ChaCha8Rng| (0..16 * 14).map(|_| rng.gen()).collect::<Vec<f64>>();
        let a = GrayImage::new(16, 14, px(&mut rng)).expect("dims");
        let b = GrayImage::new(16, 14, px(&mut rng)).expect("dims");
        let region = GroundTruthMask::new(16, 14, (0..16 * 14).map(|_| rng.gen_bool(0.6)).collect()).expect("dims");
        rep.check_result(&format!("ssim(a,a) = 1 #{i}"), ssim(&a, &a, &region).map(|s| s == 1.0));
        let sym = ssim(&a, &b, &region).and_then(|x| ssim(&b, &a, &region).map(|y| (x - y).abs() <= 1e-9));
        rep.check_result(&format!("ssim symmetric #{i}"), sym);
        rep.check_result(&format!("psnr cap #{i}"), psnr(&a, &a, &region).map(|p| p == PSNR_CAP_DB));
        rep.check_result(&format!("masked_mse(a,a) = 0 #{i}"), masked_mse(&a, &a, &region).map(|m| m == 0.0));
        let (x, y): (Vec<bool>, Vec<bool>) = (0..50).map(|_| (rng.gen::<bool>(), rng.gen::<bool>())).unzip();
        rep.check(&format!("iou symmetric #{i}"), iou(&x, &y) == iou(&y, &x));
    }
    rep
}

fn bench() -> SuiteReport {
    let mut rep = SuiteReport::new("bench");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vocab = ["a", "red", "bird", "on", "the", "branch", "cat", "jar"];
    for i in 0..50 {
        let mut s: Vec<String> = (0..rng.gen_range(1..8)).map(|_| vocab[rng.gen_range(0..vocab.len())].to_string()).collect();
        let t: Vec<String> = (0..rng.gen_range(1..8)).map(|_| vocab[rng.gen_range(0..vocab.len())].to_string()).collect();
        rep.check(&format!("diff round trip #{i}"), diff_prompts(&s, &t).apply(&s) == t);
        s.dedup();
        rep.check(&format!("self diff empty #{i}"), diff_prompts(&s, &s).is_empty());
    }
    rep
}
