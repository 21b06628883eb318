//! Rectified-flow inversion and controlled edit sampling.
//!
//! Time runs from `t_0 = 0` (clean latent) to `t_K = 1` (noise). Inversion
//! ascends the schedule with explicit Euler steps and records everything the
//! sampler later needs; sampling descends it with the target prompt.
//!
//! Two controls steer the sampler with a localization map:
//!
//! * feature level: for the first `f` sampling steps, the visual value rows of
//!   the last `r` layers become `m·v_sample + (1 − m)·v_stored`;
//! * latent level: for the first `b` sampling steps, after the Euler update,
//!   cells outside the binarized map are reset to the stored inversion latent.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mmdit::{cfg_combine, ForwardOptions, Grid, JointAttentionRecord, LatentState, Model, PromptTokens, ValueTensor};
use crate::numerics::{percentile_threshold, Matrix};
use crate::psl::RefinedMap;
use crate::tensorfile::{Archive, Tensor};

/// Uniform timesteps `t_i = i / K`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    timesteps: Vec<f64>,
}

pub fn make_schedule(steps: usize) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::InvalidConfig("schedule needs at least one step".into()));
    }
    let k = steps as f64;
    Ok(Schedule {
        timesteps: (0..=steps).map(|i| i as f64 / k).collect(),
    })
}

impl Schedule {
    pub fn from_timesteps(timesteps: Vec<f64>) -> Result<Self> {
        let ok = timesteps.len() >= 2
            && timesteps[0] == 0.0
            && *timesteps.last().unwrap() == 1.0
            && timesteps.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidConfig(
                "timesteps must increase strictly from 0 to 1".into(),
            ));
        }
        Ok(Self { timesteps })
    }

    /// Number of Euler steps `K`.
    pub fn steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    pub fn t(&self, i: usize) -> f64 {
        self.timesteps[i]
    }
}

/// Value tensors captured in one velocity evaluation, per guidance branch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepValues {
    pub cond: Vec<ValueTensor>,
    pub uncond: Vec<ValueTensor>,
}

/// Soft value fusion request for one velocity evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Fusion<'a> {
    pub stored: &'a StepValues,
    pub map: &'a RefinedMap,
    /// First layer whose values are fused.
    pub from_layer: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepControl<'a> {
    pub capture_attention: bool,
    pub capture_values_from: Option<usize>,
    pub fusion: Option<Fusion<'a>>,
}

#[derive(Debug)]
pub struct StepOutput {
    pub velocity: Grid,
    pub values: StepValues,
    pub attention: Vec<JointAttentionRecord>,
}

/// Anything that can be integrated by the inversion / sampling loops.
pub trait VelocityField {
    type Cond: ?Sized;

    fn num_layers(&self) -> usize;

    fn evaluate(&self, z: &LatentState, cond: &Self::Cond, t: f64, ctl: &StepControl<'_>) -> Result<StepOutput>;
}

/// The toy DiT with classifier-free guidance. A scale of exactly 1 skips the
/// unconditional branch.
#[derive(Clone, Copy, Debug)]
pub struct GuidedModel<'m> {
    pub model: &'m Model,
    pub cfg_scale: f64,
}

impl<'m> GuidedModel<'m> {
    pub fn new(model: &'m Model, cfg_scale: f64) -> Self {
        Self { model, cfg_scale }
    }

    fn branch(
        &self,
        z: &LatentState,
        prompt: &PromptTokens,
        t: f64,
        capture_attention: bool,
        capture_values_from: Option<usize>,
        fusion: Option<(&[ValueTensor], &RefinedMap, usize)>,
    ) -> Result<crate::mmdit::ForwardOutput> {
        let hook = |v: &ValueTensor| -> Result<Option<ValueTensor>> {
            let Some((stored, map, from)) = fusion else {
                return Ok(None);
            };
            if v.layer < from {
                return Ok(None);
            }
            let s = stored
                .iter()
                .find(|s| s.layer == v.layer)
                .ok_or_else(|| Error::TraceMismatch(format!("no stored values for layer {}", v.layer)))?;
            feature_fuse(v, s, map).map(Some)
        };
        let opts = ForwardOptions {
            capture_attention,
            capture_values_from,
            value_hook: fusion.is_some().then_some(&hook as &_),
        };
        self.model.velocity(z, prompt, t, &opts)
    }
}

impl VelocityField for GuidedModel<'_> {
    type Cond = PromptTokens;

    fn num_layers(&self) -> usize {
        self.model.config().layers
    }

    fn evaluate(&self, z: &LatentState, cond: &PromptTokens, t: f64, ctl: &StepControl<'_>) -> Result<StepOutput> {
        let fusion = |pick: fn(&StepValues) -> &[ValueTensor]| {
            ctl.fusion.map(|f| (pick(f.stored), f.map, f.from_layer))
        };
        let c = self.branch(
            z,
            cond,
            t,
            ctl.capture_attention,
            ctl.capture_values_from,
            fusion(|s| &s.cond),
        )?;
        if self.cfg_scale == 1.0 {
            return Ok(StepOutput {
                velocity: c.velocity,
                values: StepValues { cond: c.values, uncond: Vec::new() },
                attention: c.attention,
            });
        }
        let u = self.branch(
            z,
            &self.model.null_prompt(),
            t,
            false,
            ctl.capture_values_from,
            fusion(|s| &s.uncond),
        )?;
        Ok(StepOutput {
            velocity: cfg_combine(&c.velocity, &u.velocity, self.cfg_scale)?,
            values: StepValues { cond: c.values, uncond: u.values },
            attention: c.attention,
        })
    }
}

/// Everything recorded during inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct EditTrace {
    pub schedule: Schedule,
    /// `Z_{t_i}` for `i = 0..=K`.
    pub latents: Vec<LatentState>,
    /// Values of the last `r` layers evaluated at `(Z_{t_i}, t_i)`, `i = 0..=K`.
    /// The entry at `t_K` comes from one extra capture-only evaluation.
    pub stored_values: Vec<StepValues>,
    /// `v(Z_{t_i}, t_i)` for `i = 0..K`.
    pub cached_velocities: Vec<Grid>,
    pub r: usize,
    pub num_layers: usize,
}

/// Clean → noise Euler integration with trace capture.
pub fn invert<F: VelocityField>(
    field: &F,
    z0: &LatentState,
    cond: &F::Cond,
    schedule: &Schedule,
    r: usize,
) -> Result<(LatentState, EditTrace)> {
    let (z, trace, _) = invert_capturing(field, z0, cond, schedule, r, &[])?;
    Ok((z, trace))
}

/// As [`invert`], additionally returning the conditional-branch attention of
/// the evaluations at the given step indices (normally just step 0).
pub fn invert_capturing<F: VelocityField>(
    field: &F,
    z0: &LatentState,
    cond: &F::Cond,
    schedule: &Schedule,
    r: usize,
    attention_steps: &[usize],
) -> Result<(LatentState, EditTrace, Vec<JointAttentionRecord>)> {
    let layers = field.num_layers();
    if r > layers {
        return Err(Error::InvalidConfig(format!("r = {r} exceeds {layers} layers")));
    }
    if z0.t != schedule.t(0) {
        return Err(Error::InvalidConfig(format!("inversion must start at t = 0, got {}", z0.t)));
    }
    let capture_values_from = (r > 0).then(|| layers - r);
    let k = schedule.steps();
    let mut latents = Vec::with_capacity(k + 1);
    let mut stored = Vec::with_capacity(k + 1);
    let mut velocities = Vec::with_capacity(k);
    let mut attention = Vec::new();
    latents.push(z0.clone());
    for i in 0..k {
        let (t, t_next) = (schedule.t(i), schedule.t(i + 1));
        let ctl = StepControl {
            capture_attention: attention_steps.contains(&i),
            capture_values_from,
            fusion: None,
        };
        let out = field.evaluate(&latents[i], cond, t, &ctl)?;
        let next = latents[i].grid.axpy(t_next - t, &out.velocity)?;
        if !next.is_finite() {
            return Err(Error::NonFiniteLatent(i + 1));
        }
        latents.push(LatentState::new(next, t_next));
        stored.push(out.values);
        velocities.push(out.velocity);
        attention.extend(out.attention);
    }
    let last = if r > 0 {
        let ctl = StepControl {
            capture_values_from,
            ..Default::default()
        };
        field.evaluate(&latents[k], cond, schedule.t(k), &ctl)?.values
    } else {
        StepValues::default()
    };
    stored.push(last);
    let z_k = latents[k].clone();
    Ok((
        z_k,
        EditTrace {
            schedule: schedule.clone(),
            latents,
            stored_values: stored,
            cached_velocities: velocities,
            r,
            num_layers: layers,
        },
        attention,
    ))
}

/// Per-visual-token binary edit region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub bits: Vec<bool>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl BinaryMask {
    pub fn filled(grid_h: usize, grid_w: usize, bit: bool) -> Self {
        Self {
            bits: vec![bit; grid_h * grid_w],
            grid_h,
            grid_w,
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Ones where `|value| >= ` the nearest-rank λ-th percentile of the map.
pub fn binarize_map(map: &RefinedMap, lambda: f64) -> Result<BinaryMask> {
    let eta = percentile_threshold(map.as_slice(), lambda)?;
    Ok(BinaryMask {
        bits: map.as_slice().iter().map(|v| v.abs() >= eta).collect(),
        grid_h: map.grid_h,
        grid_w: map.grid_w,
    })
}

/// Soft value fusion on visual rows; text rows come from the sampling branch.
pub fn feature_fuse(sample: &ValueTensor, stored: &ValueTensor, map: &RefinedMap) -> Result<ValueTensor> {
    if sample.visual.shape() != stored.visual.shape() {
        return Err(Error::shape(
            "feature_fuse",
            format!("{:?}", sample.visual.shape()),
            format!("{:?}", stored.visual.shape()),
        ));
    }
    if map.len() != sample.visual.rows() {
        return Err(Error::shape("feature_fuse", sample.visual.rows(), map.len()));
    }
    let cols = sample.visual.cols();
    let mut visual = Matrix::zeros(sample.visual.rows(), cols);
    for (r, &m) in map.as_slice().iter().enumerate() {
        let (s, st) = (sample.visual.row(r), stored.visual.row(r));
        for (o, (a, b)) in visual.row_mut(r).iter_mut().zip(s.iter().zip(st)) {
            *o = m * a + (1.0 - m) * b;
        }
    }
    Ok(ValueTensor {
        layer: sample.layer,
        text: sample.text.clone(),
        visual,
    })
}

/// `mask ⊙ sample + (1 − mask) ⊙ stored`, mask broadcast over channels.
pub fn latent_blend(sample: &LatentState, stored: &LatentState, mask: &BinaryMask) -> Result<LatentState> {
    if sample.t != stored.t {
        return Err(Error::TraceMismatch(format!(
            "blending latents at t = {} and t = {}",
            sample.t, stored.t
        )));
    }
    if !sample.grid.same_dims(&stored.grid) || mask.bits.len() != sample.grid.cells() {
        return Err(Error::shape(
            "latent_blend",
            format!("{:?} with {} mask cells", sample.grid.dims(), sample.grid.cells()),
            format!("{:?} with {} mask cells", stored.grid.dims(), mask.bits.len()),
        ));
    }
    let mut out = sample.clone();
    for (cell, &keep_sample) in mask.bits.iter().enumerate() {
        if !keep_sample {
            out.grid.cell_mut(cell).copy_from_slice(stored.grid.cell(cell));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    /// Euler steps `K` for both inversion and sampling.
    pub steps: usize,
    pub cfg_scale: f64,
    /// Sampling steps with feature-level control (`f`).
    pub feature_steps: usize,
    /// Sampling steps with latent-level control (`b`).
    pub latent_steps: usize,
    /// Percentile for map binarization.
    pub lambda: f64,
    /// Layers with stored / fused values; `None` means `ceil(L / 2)`.
    pub r_layers: Option<usize>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            steps: 8,
            cfg_scale: 3.0,
            feature_steps: 1,
            latent_steps: 3,
            lambda: 80.0,
            r_layers: None,
        }
    }
}

impl ControlConfig {
    pub fn r(&self, layers: usize) -> usize {
        self.r_layers.unwrap_or(layers.div_ceil(2))
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.feature_steps > self.steps || self.latent_steps > self.steps {
            return bad(format!(
                "control steps f = {}, b = {} exceed K = {}",
                self.feature_steps, self.latent_steps, self.steps
            ));
        }
        if self.r(layers) > layers {
            return bad(format!("r = {} exceeds {layers} layers", self.r(layers)));
        }
        if !(0.0..=100.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 100]", self.lambda));
        }
        if !self.cfg_scale.is_finite() {
            return bad("cfg scale must be finite".into());
        }
        Ok(())
    }
}

impl EditTrace {
    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    /// Stored values at timestep `t`, matched by value.
    pub fn values_at(&self, t: f64) -> Result<&StepValues> {
        self.schedule
            .timesteps()
            .iter()
            .position(|&s| s == t)
            .and_then(|i| self.stored_values.get(i))
            .ok_or_else(|| Error::TraceMismatch(format!("no stored values at t = {t}")))
    }

    fn check_consistent(&self) -> Result<()> {
        let k = self.steps();
        let fail = |m: String| Err(Error::TraceMismatch(m));
        if self.latents.len() != k + 1 || self.stored_values.len() != k + 1 {
            return fail(format!(
                "{} latents / {} stored value sets for K = {k}",
                self.latents.len(),
                self.stored_values.len()
            ));
        }
        if self.r > self.num_layers {
            return fail(format!("r = {} exceeds {} layers", self.r, self.num_layers));
        }
        let dims = self.latents[0].grid.dims();
        for (i, z) in self.latents.iter().enumerate() {
            if z.grid.dims() != dims || z.t != self.schedule.t(i) {
                return fail(format!("latent {i} has dims {:?} at t = {}", z.grid.dims(), z.t));
            }
        }
        if self.cached_velocities.iter().any(|v| v.dims() != dims) {
            return fail("cached velocity dims differ from latents".into());
        }
        let expected: Vec<usize> = (self.num_layers - self.r..self.num_layers).collect();
        for (i, s) in self.stored_values.iter().enumerate() {
            // the unconditional branch is absent when guidance is off
            for (branch, optional) in [(&s.cond, false), (&s.uncond, true)] {
                if optional && branch.is_empty() {
                    continue;
                }
                let layers: Vec<usize> = branch.iter().map(|v| v.layer).collect();
                if layers != expected {
                    return fail(format!("step {i} stores layers {layers:?}, expected {expected:?}"));
                }
            }
        }
        Ok(())
    }

    /// Serializes every tensor as lossless `f64`.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        let (h, w, c) = self.latents[0].grid.dims();
        let k = self.steps();
        a.insert(
            "meta",
            Tensor::f64(
                vec![6],
                [k, self.r, self.num_layers, h, w, c].iter().map(|&x| x as f64).collect(),
            ),
        );
        a.insert("timesteps", Tensor::f64(vec![k as u64 + 1], self.schedule.timesteps().to_vec()));
        let flat = |grids: &mut dyn Iterator<Item = &Grid>| grids.flat_map(|g| g.data.iter().copied()).collect();
        let dims = |n: usize| vec![n as u64, h as u64, w as u64, c as u64];
        a.insert("latents", Tensor::f64(dims(k + 1), flat(&mut self.latents.iter().map(|z| &z.grid))));
        a.insert("velocities", Tensor::f64(dims(self.cached_velocities.len()), flat(&mut self.cached_velocities.iter())));
        for (i, s) in self.stored_values.iter().enumerate() {
            for (branch, values) in [("cond", &s.cond), ("uncond", &s.uncond)] {
                for v in values {
                    let key = format!("values/{i:04}/{branch}/{:04}", v.layer);
                    a.insert(&format!("{key}/text"), Tensor::f64_from_matrix(&v.text));
                    a.insert(&format!("{key}/visual"), Tensor::f64_from_matrix(&v.visual));
                }
            }
        }
        a
    }

    /// Parses an archive written by [`EditTrace::to_archive`]. Any structural
    /// problem is reported as [`Error::TraceMismatch`].
    pub fn from_archive(a: &Archive) -> Result<Self> {
        Self::parse(a).map_err(|e| match e {
            Error::TraceMismatch(m) => Error::TraceMismatch(m),
            other => Error::TraceMismatch(other.to_string()),
        })
    }

    fn parse(a: &Archive) -> Result<Self> {
        let meta = a.get("meta")?.to_f64();
        let [k, r, layers, h, w, c] = meta[..] else {
            return Err(Error::TraceMismatch("meta must hold 6 values".into()));
        };
        let [k, r, num_layers, h, w, c] = [k, r, layers, h, w, c].map(|x| x as usize);
        if k == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::TraceMismatch("zero-sized trace".into()));
        }
        let schedule = Schedule::from_timesteps(a.get("timesteps")?.to_f64())?;
        if schedule.steps() != k {
            return Err(Error::TraceMismatch("timestep count disagrees with meta".into()));
        }
        let cell = h * w * c;
        let grids = |name: &str, n: usize| -> Result<Vec<Grid>> {
            let t = a.get(name)?;
            if t.dims() != [n as u64, h as u64, w as u64, c as u64] {
                return Err(Error::TraceMismatch(format!("`{name}` has dims {:?}", t.dims())));
            }
            t.to_f64().chunks_exact(cell).map(|d| Grid::new(h, w, c, d.to_vec())).collect()
        };
        let latents = grids("latents", k + 1)?
            .into_iter()
            .enumerate()
            .map(|(i, g)| LatentState::new(g, schedule.t(i)))
            .collect();
        let cached_velocities = grids("velocities", k)?;
        let mut stored_values = vec![StepValues::default(); k + 1];
        for name in a.names() {
            let Some(rest) = name.strip_prefix("values/") else { continue };
            let parts: Vec<&str> = rest.split('/').collect();
            let [step, branch, layer, "text"] = parts[..] else { continue };
            let step: usize = step.parse().map_err(|_| Error::TraceMismatch(format!("bad entry `{name}`")))?;
            let layer: usize = layer.parse().map_err(|_| Error::TraceMismatch(format!("bad entry `{name}`")))?;
            let slot = stored_values
                .get_mut(step)
                .ok_or_else(|| Error::TraceMismatch(format!("entry `{name}` beyond K")))?;
            let v = ValueTensor {
                layer,
                text: a.get(name)?.to_matrix()?,
                visual: a.get(&format!("values/{}/{branch}/{}/visual", parts[0], parts[2]))?.to_matrix()?,
            };
            match branch {
                "cond" => slot.cond.push(v),
                "uncond" => slot.uncond.push(v),
                other => return Err(Error::TraceMismatch(format!("unknown branch `{other}`"))),
            }
        }
        let trace = EditTrace {
            schedule,
            latents,
            stored_values,
            cached_velocities,
            r,
            num_layers,
        };
        trace.check_consistent()?;
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write_atomic(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::read(path).map_err(|e| match e {
            Error::Io(io) => Error::Io(io),
            other => Error::TraceMismatch(other.to_string()),
        })?;
        Self::from_archive(&archive)
    }
}

fn check_sampling_inputs(z_k: &LatentState, trace: &EditTrace, config: &ControlConfig, layers: usize) -> Result<()> {
    config.validate(layers)?;
    trace.check_consistent()?;
    let k = trace.steps();
    if config.steps != k {
        return Err(Error::TraceMismatch(format!("trace has K = {k}, config asks for {}", config.steps)));
    }
    if z_k.t != trace.schedule.t(k) || !z_k.grid.same_dims(&trace.latents[k].grid) {
        return Err(Error::TraceMismatch("start latent does not match the end of the trace".into()));
    }
    if trace.num_layers != layers {
        return Err(Error::TraceMismatch(format!(
            "trace recorded {} layers, model has {layers}",
            trace.num_layers
        )));
    }
    if config.feature_steps > 0 && config.r(layers) > trace.r {
        return Err(Error::TraceMismatch(format!(
            "feature control over {} layers but trace stores {}",
            config.r(layers),
            trace.r
        )));
    }
    Ok(())
}

/// Controlled noise → clean sampling with the target prompt, using the mask
/// `binarize_map(map, λ)` for latent control.
pub fn sample_edit<F: VelocityField>(
    field: &F,
    z_k: &LatentState,
    target: &F::Cond,
    trace: &EditTrace,
    map: &RefinedMap,
    config: &ControlConfig,
) -> Result<LatentState> {
    let mask = binarize_map(map, config.lambda)?;
    sample_edit_with_mask(field, z_k, target, trace, map, &mask, config)
}

/// As [`sample_edit`] with an explicit latent-control mask.
pub fn sample_edit_with_mask<F: VelocityField>(
    field: &F,
    z_k: &LatentState,
    target: &F::Cond,
    trace: &EditTrace,
    map: &RefinedMap,
    mask: &BinaryMask,
    config: &ControlConfig,
) -> Result<LatentState> {
    let layers = field.num_layers();
    check_sampling_inputs(z_k, trace, config, layers)?;
    if map.len() != z_k.grid.cells() || mask.bits.len() != z_k.grid.cells() {
        return Err(Error::shape(
            "sample_edit",
            format!("{} map cells", z_k.grid.cells()),
            format!("map {} / mask {}", map.len(), mask.bits.len()),
        ));
    }
    let k = trace.steps();
    let r = config.r(layers);
    let schedule = &trace.schedule;
    let mut z = z_k.clone();
    for s in 0..k {
        let i = k - s;
        let (t, t_prev) = (schedule.t(i), schedule.t(i - 1));
        let fusion = if s < config.feature_steps && r > 0 {
            Some(Fusion {
                stored: trace.values_at(t)?,
                map,
                from_layer: layers - r,
            })
        } else {
            None
        };
        let ctl = StepControl {
            fusion,
            ..Default::default()
        };
        let v = field.evaluate(&z, target, t, &ctl)?.velocity;
        let mut next = LatentState::new(z.grid.axpy(t_prev - t, &v)?, t_prev);
        if s < config.latent_steps {
            next = latent_blend(&next, &trace.latents[i - 1], mask)?;
        }
        if !next.grid.is_finite() {
            return Err(Error::NonFiniteLatent(s + 1));
        }
        z = next;
    }
    Ok(z)
}

/// Uncontrolled noise → clean Euler sampling.
pub fn sample_plain<F: VelocityField>(field: &F, z_k: &LatentState, cond: &F::Cond, schedule: &Schedule) -> Result<LatentState> {
    let k = schedule.steps();
    if z_k.t != schedule.t(k) {
        return Err(Error::InvalidConfig(format!("sampling must start at t = 1, got {}", z_k.t)));
    }
    let mut z = z_k.clone();
    for s in 0..k {
        let i = k - s;
        let v = field.evaluate(&z, cond, schedule.t(i), &StepControl::default())?.velocity;
        let next = z.grid.axpy(schedule.t(i - 1) - schedule.t(i), &v)?;
        if !next.is_finite() {
            return Err(Error::NonFiniteLatent(s + 1));
        }
        z = LatentState::new(next, schedule.t(i - 1));
    }
    Ok(z)
}

/// Replays sampling with the velocities cached during inversion, undoing each
/// inversion step exactly up to rounding.
pub fn reconstruct_cached(trace: &EditTrace) -> Result<LatentState> {
    let k = trace.steps();
    if trace.cached_velocities.len() != k || trace.latents.len() != k + 1 {
        return Err(Error::TraceMismatch("trace is missing cached velocities".into()));
    }
    let s = &trace.schedule;
    let mut z = trace.latents[k].clone();
    for i in (0..k).rev() {
        z = LatentState::new(z.grid.axpy(s.t(i) - s.t(i + 1), &trace.cached_velocities[i])?, s.t(i));
    }
    Ok(z)
}
