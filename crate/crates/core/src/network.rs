//! Point-wise segmentation network with redundancy classifier heads.
//!
//! The feature extractor encodes each point from `(x, y, z, intensity,
//! local density)` with two tanh layers, concatenates the encoding with its
//! mean over the point's voxel and over the point's vertical pillar, and maps
//! the result through one hidden tanh layer followed by a dropout site.
//! Normal classifiers `g_nm` and redundancy classifiers `g_re` are affine maps
//! on top of that feature.
//!
//! Gradients are computed by hand in [`Model::backward`]; the loss module
//! supplies the gradient with respect to the head outputs.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassRegistry, LogitsBundle, Scan, Stage};

pub const INPUT_FEATURES: usize = 7;
const XY_SCALE: f64 = 0.1;
const Z_SCALE: f64 = 0.5;
const DENSITY_SCALE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub encoder_width: usize,
    /// Width H of the feature map fed to the heads.
    pub hidden_width: usize,
    pub dropout_rate: f64,
    /// Edge length of the pooling voxel in meters.
    pub voxel_size: f64,
    /// Also pool over vertical pillars with the same footprint as a voxel.
    pub pillar_context: bool,
    /// Feed the log point count of each point's voxel to the encoder.
    pub density_feature: bool,
    /// Feed the lowest and highest z of each point's pillar to the encoder.
    pub pillar_extent_feature: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            encoder_width: 16,
            hidden_width: 64,
            dropout_rate: 0.1,
            voxel_size: 1.0,
            pillar_context: true,
            density_feature: true,
            pillar_extent_feature: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_width == 0 || self.hidden_width == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must lie in [0, 1)"));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::config("voxel_size must be positive"));
        }
        Ok(())
    }

    fn context_width(&self) -> usize {
        self.encoder_width * if self.pillar_context { 3 } else { 2 }
    }
}

/// Affine map `x W^T + b` with `W` of shape out×in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn xavier<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-limit..limit));
        Linear {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    fn zeros_like(&self) -> Self {
        Linear {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn push_row<R: Rng>(&mut self, rng: &mut R) {
        let inputs = self.weight.ncols();
        let limit = (6.0 / (inputs + self.outputs() + 1) as f64).sqrt();
        let row = Array1::from_shape_fn(inputs, |_| rng.random_range(-limit..limit));
        self.weight.push_row(row.view()).expect("row width matches");
        let mut bias = self.bias.to_vec();
        bias.push(0.0);
        self.bias = Array1::from(bias);
    }
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub enc1: Linear,
    pub enc2: Linear,
    pub hidden: Linear,
    pub g_nm: Linear,
    pub g_re: Option<Linear>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            enc1: self.enc1.zeros_like(),
            enc2: self.enc2.zeros_like(),
            hidden: self.hidden.zeros_like(),
            g_nm: self.g_nm.zeros_like(),
            g_re: self.g_re.as_ref().map(Linear::zeros_like),
        }
    }

    fn layers(&self) -> Vec<(&'static str, &Linear)> {
        let mut v = vec![
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("hidden", &self.hidden),
            ("g_nm", &self.g_nm),
        ];
        if let Some(re) = &self.g_re {
            v.push(("g_re", re));
        }
        v
    }

    fn layers_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        let mut v = vec![
            ("enc1", &mut self.enc1),
            ("enc2", &mut self.enc2),
            ("hidden", &mut self.hidden),
            ("g_nm", &mut self.g_nm),
        ];
        if let Some(re) = &mut self.g_re {
            v.push(("g_re", re));
        }
        v
    }

    /// Named flat views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, l) in self.layers() {
            out.push((
                format!("{name}.weight"),
                l.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                l.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (name, l) in self.layers_mut() {
            out.push((
                format!("{name}.weight"),
                l.weight.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                l.bias.as_slice_mut().expect("standard layout"),
            ));
        }
        out
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, l) in self.layers() {
            out.push((format!("{name}.weight"), l.weight.shape().to_vec()));
            out.push((format!("{name}.bias"), l.bias.shape().to_vec()));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Point grouping used for context pooling.
#[derive(Clone, Debug, PartialEq)]
struct Groups {
    of_point: Vec<usize>,
    sizes: Vec<usize>,
}

impl Groups {
    fn build(keys: impl Iterator<Item = (i64, i64, i64)>) -> Groups {
        let mut ids: HashMap<(i64, i64, i64), usize> = HashMap::new();
        let mut of_point = Vec::new();
        let mut sizes = Vec::new();
        for k in keys {
            let next = ids.len();
            let g = *ids.entry(k).or_insert(next);
            if g == sizes.len() {
                sizes.push(0);
            }
            sizes[g] += 1;
            of_point.push(g);
        }
        Groups { of_point, sizes }
    }

    fn mean(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut sums = Array2::<f64>::zeros((self.sizes.len(), x.ncols()));
        for (i, &g) in self.of_point.iter().enumerate() {
            let mut row = sums.row_mut(g);
            row += &x.row(i);
        }
        for (g, &n) in self.sizes.iter().enumerate() {
            sums.row_mut(g).mapv_inplace(|v| v / n as f64);
        }
        let mut out = Array2::zeros((x.nrows(), x.ncols()));
        for (i, &g) in self.of_point.iter().enumerate() {
            out.row_mut(i).assign(&sums.row(g));
        }
        out
    }

    /// Adjoint of [`mean`](Self::mean): every member receives the group's
    /// summed upstream gradient divided by the group size, i.e. the group mean
    /// of the upstream gradient.
    fn mean_backward(&self, grad: ArrayView2<f64>, into: &mut Array2<f64>) {
        *into += &self.mean(grad);
    }
}

/// Per-scan inputs and pooling groups. Depends only on the scan geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFeatures {
    inputs: Array2<f64>,
    voxels: Groups,
    pillars: Groups,
}

impl PointFeatures {
    pub fn new(scan: &Scan, arch: &ArchConfig) -> PointFeatures {
        let s = arch.voxel_size;
        let cell = |v: f64| (v / s).floor() as i64;
        let voxels = Groups::build(
            scan.points()
                .iter()
                .map(|p| (cell(p[0]), cell(p[1]), cell(p[2]))),
        );
        let pillars = Groups::build(scan.points().iter().map(|p| (cell(p[0]), cell(p[1]), 0)));
        let m = scan.len();
        let mut z_range = vec![(f64::INFINITY, f64::NEG_INFINITY); pillars.sizes.len()];
        for (p, &g) in scan.points().iter().zip(&pillars.of_point) {
            z_range[g].0 = z_range[g].0.min(p[2]);
            z_range[g].1 = z_range[g].1.max(p[2]);
        }
        let mut inputs = Array2::zeros((m, INPUT_FEATURES));
        for (i, p) in scan.points().iter().enumerate() {
            let density = (1.0 + voxels.sizes[voxels.of_point[i]] as f64).ln();
            inputs[[i, 0]] = p[0] * XY_SCALE;
            inputs[[i, 1]] = p[1] * XY_SCALE;
            inputs[[i, 2]] = p[2] * Z_SCALE;
            inputs[[i, 3]] = scan.intensity().map_or(0.0, |v| v[i]);
            if arch.pillar_extent_feature {
                let (lo, hi) = z_range[pillars.of_point[i]];
                inputs[[i, 5]] = lo * Z_SCALE;
                inputs[[i, 6]] = hi * Z_SCALE;
            }
            if arch.density_feature {
                inputs[[i, 4]] = density * DENSITY_SCALE;
            }
        }
        PointFeatures {
            inputs,
            voxels,
            pillars,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Voxel group index of every point.
    pub fn voxel_of_point(&self) -> &[usize] {
        &self.voxels.of_point
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    features: PointFeatures,
    a1: Array2<f64>,
    enc: Array2<f64>,
    context: Array2<f64>,
    hidden: Array2<f64>,
    /// Dropout scale per unit (0 or 1/(1-p)); `None` when dropout was off.
    mask: Option<Array2<f64>>,
    dropped: Array2<f64>,
}

/// Upstream gradient with respect to head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    /// M×C.
    pub d_old: Array2<f64>,
    /// M×S in slot order; zero columns when the model has no redundancy head.
    pub d_re: Array2<f64>,
}

/// Parameters plus the metadata that fixes their meaning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub registry: ClassRegistry,
    pub stage: Stage,
    pub arch: ArchConfig,
    pub params: Params,
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn check_finite(a: &Array2<f64>, layer: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "non-finite activation in layer {layer}"
        )))
    }
}

/// Build a model with deterministic initialization. The closed stage has no
/// redundancy head; later stages get one row per registry slot.
pub fn init_model(
    registry: &ClassRegistry,
    arch: &ArchConfig,
    stage: Stage,
    seed: u64,
) -> Result<Model> {
    arch.validate()?;
    let c = registry.num_old();
    if c == 0 {
        return Err(Error::config("registry has no old classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = arch.encoder_width;
    let h = arch.hidden_width;
    let params = Params {
        enc1: Linear::xavier(INPUT_FEATURES, e, &mut rng),
        enc2: Linear::xavier(e, e, &mut rng),
        hidden: Linear::xavier(arch.context_width(), h, &mut rng),
        g_nm: Linear::xavier(h, c, &mut rng),
        g_re: match stage {
            Stage::Closed => None,
            _ => Some(Linear::xavier(h, registry.rc_total(), &mut rng)),
        },
    };
    Ok(Model {
        registry: registry.clone(),
        stage,
        arch: arch.clone(),
        params,
    })
}

impl Model {
    /// Open-set model from a closed one: the extractor and normal classifiers
    /// are kept and `r` freshly initialized redundancy classifiers are added.
    pub fn with_redundancy_heads(&self, seed: u64) -> Result<Model> {
        if self.stage != Stage::Closed {
            return Err(Error::domain(
                "redundancy heads are added to a closed-stage model",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        out.params.g_re = Some(Linear::xavier(
            self.arch.hidden_width,
            self.registry.rc_total(),
            &mut rng,
        ));
        out.stage = Stage::Open;
        Ok(out)
    }

    pub fn num_slots(&self) -> usize {
        self.params.g_re.as_ref().map_or(0, Linear::outputs)
    }

    pub fn features(&self, scan: &Scan) -> PointFeatures {
        PointFeatures::new(scan, &self.arch)
    }

    /// Forward pass. With `dropout` set, a fresh inverted-dropout mask is drawn
    /// from the given generator.
    pub fn forward(&self, scan: &Scan, dropout: Option<&mut dyn RngCore>) -> Result<LogitsBundle> {
        let (bundle, _) = self.forward_features(self.features(scan), dropout)?;
        Ok(bundle)
    }

    pub fn forward_features(
        &self,
        features: PointFeatures,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<(LogitsBundle, ForwardCache)> {
        let p = &self.params;
        let a1 = p.enc1.apply(features.inputs.view()).mapv(f64::tanh);
        check_finite(&a1, "enc1")?;
        let enc = p.enc2.apply(a1.view()).mapv(f64::tanh);
        check_finite(&enc, "enc2")?;
        let voxel_ctx = features.voxels.mean(enc.view());
        let mut blocks = vec![enc.view(), voxel_ctx.view()];
        let pillar_ctx;
        if self.arch.pillar_context {
            pillar_ctx = features.pillars.mean(enc.view());
            blocks.push(pillar_ctx.view());
        }
        let context = ndarray::concatenate(Axis(1), &blocks).expect("row counts agree");
        let hidden = p.hidden.apply(context.view()).mapv(f64::tanh);
        check_finite(&hidden, "hidden")?;
        let (dropped, mask) = match dropout {
            Some(rng) if self.arch.dropout_rate > 0.0 => {
                let rate = self.arch.dropout_rate;
                let keep = 1.0 / (1.0 - rate);
                let mask = Array2::from_shape_fn(hidden.raw_dim(), |_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                });
                (&hidden * &mask, Some(mask))
            }
            _ => (hidden.clone(), None),
        };
        let y_old = p.g_nm.apply(dropped.view());
        check_finite(&y_old, "g_nm")?;
        let m = y_old.nrows();
        let (y_uk, y_nv) = match &p.g_re {
            Some(re) if self.stage != Stage::Closed => {
                let y_re = re.apply(dropped.view());
                check_finite(&y_re, "g_re")?;
                let pick = |slots: &[usize]| {
                    let mut out = Array2::zeros((m, slots.len()));
                    for (j, &s) in slots.iter().enumerate() {
                        out.column_mut(j).assign(&y_re.column(s));
                    }
                    out
                };
                (
                    pick(&self.registry.unknown_slots()),
                    pick(&self.registry.novel_slots()),
                )
            }
            _ => (Array2::zeros((m, 0)), Array2::zeros((m, 0))),
        };
        let bundle = LogitsBundle { y_old, y_uk, y_nv };
        let cache = ForwardCache {
            features,
            a1,
            enc,
            context,
            hidden,
            mask,
            dropped,
        };
        Ok((bundle, cache))
    }

    /// Back-propagate head gradients to every parameter.
    pub fn backward(&self, cache: &ForwardCache, grad: &HeadGrad) -> Result<Params> {
        let p = &self.params;
        let mut g = p.zeros_like();
        let d = &cache.dropped;

        g.g_nm.weight = standard(grad.d_old.t().dot(d));
        g.g_nm.bias = grad.d_old.sum_axis(Axis(0));
        let mut d_dropped = grad.d_old.dot(&p.g_nm.weight);
        if let (Some(re), Some(gre)) = (&p.g_re, g.g_re.as_mut()) {
            if grad.d_re.ncols() != re.outputs() {
                return Err(Error::Internal("redundancy gradient width mismatch".into()));
            }
            gre.weight = standard(grad.d_re.t().dot(d));
            gre.bias = grad.d_re.sum_axis(Axis(0));
            d_dropped += &grad.d_re.dot(&re.weight);
        }

        let d_hidden = match &cache.mask {
            Some(mask) => d_dropped * mask,
            None => d_dropped,
        };
        let dz3 = d_hidden * &cache.hidden.mapv(|h| 1.0 - h * h);
        g.hidden.weight = standard(dz3.t().dot(&cache.context));
        g.hidden.bias = dz3.sum_axis(Axis(0));
        let d_context = dz3.dot(&p.hidden.weight);

        let e = self.arch.encoder_width;
        let mut d_enc = d_context.slice(s![.., 0..e]).to_owned();
        cache
            .features
            .voxels
            .mean_backward(d_context.slice(s![.., e..2 * e]), &mut d_enc);
        if self.arch.pillar_context {
            cache
                .features
                .pillars
                .mean_backward(d_context.slice(s![.., 2 * e..3 * e]), &mut d_enc);
        }
        let dz2 = d_enc * &cache.enc.mapv(|v| 1.0 - v * v);
        g.enc2.weight = standard(dz2.t().dot(&cache.a1));
        g.enc2.bias = dz2.sum_axis(Axis(0));
        let d_a1 = dz2.dot(&p.enc2.weight);
        let dz1 = d_a1 * &cache.a1.mapv(|v| 1.0 - v * v);
        g.enc1.weight = standard(dz1.t().dot(&cache.features.inputs));
        g.enc1.bias = dz1.sum_axis(Axis(0));

        for (name, t) in g.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite gradient for {name}")));
            }
        }
        Ok(g)
    }

    /// Bind one unknown slot to each newly promoted class and append fresh
    /// unknown slots so the head width matches `after`.
    pub fn reassign_rc(&self, after: &ClassRegistry, seed: u64) -> Result<Model> {
        let before = &self.registry;
        if after == before {
            return Ok(self.clone());
        }
        if self.stage == Stage::Closed {
            return Err(Error::domain(
                "a closed-stage model has no redundancy classifiers",
            ));
        }
        if after.old_classes() != before.old_classes()
            || !after.learned_novel().starts_with(before.learned_novel())
            || before
                .rc_assigned()
                .iter()
                .any(|(s, c)| after.rc_assigned().get(s) != Some(c))
        {
            return Err(Error::domain(
                "registry is not an advance of the model's registry",
            ));
        }
        let width = self.num_slots();
        if width != before.rc_total() {
            return Err(Error::Internal(
                "redundancy head width disagrees with registry".into(),
            ));
        }
        if after.rc_total() < width {
            return Err(Error::Internal("no free redundancy slot".into()));
        }
        let mut out = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re = out
            .params
            .g_re
            .as_mut()
            .expect("open model has redundancy head");
        for _ in width..after.rc_total() {
            re.push_row(&mut rng);
        }
        out.registry = after.clone();
        out.stage = Stage::PostIl;
        Ok(out)
    }
}

/// Assembled score matrix and, per point, the winning unknown column.
#[derive(Clone, Debug, PartialEq)]
pub struct Assembled {
    pub scores: Array2<f64>,
    /// Column of `y_uk` that won the max for each point (empty at the closed stage).
    pub unknown_arg: Vec<usize>,
}

/// Lowest index of the maximum of a row.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in row.into_iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best
}

/// Stage-dependent score vectors. Closed: `y_old`. Open: `[max y_uk, y_old]`.
/// Post-IL: `[max y_uk, y_old, y_nv]`, where only unknown-dedicated slots
/// enter the max.
pub fn assemble(bundle: &LogitsBundle, stage: Stage) -> Result<Assembled> {
    let m = bundle.len();
    let c = bundle.y_old.ncols();
    match stage {
        Stage::Closed => Ok(Assembled {
            scores: bundle.y_old.clone(),
            unknown_arg: Vec::new(),
        }),
        Stage::Open | Stage::PostIl => {
            if bundle.y_uk.ncols() == 0 {
                return Err(Error::domain(format!(
                    "stage {stage} needs unknown-slot logits"
                )));
            }
            if stage == Stage::Open && bundle.y_nv.ncols() != 0 {
                return Err(Error::domain("open stage bundle carries novel logits"));
            }
            let n = bundle.y_nv.ncols();
            let mut scores = Array2::zeros((m, 1 + c + n));
            let mut unknown_arg = Vec::with_capacity(m);
            for i in 0..m {
                let (j, v) = argmax(bundle.y_uk.row(i).iter().copied()).expect("nonempty row");
                unknown_arg.push(j);
                scores[[i, 0]] = v;
            }
            scores.slice_mut(s![.., 1..1 + c]).assign(&bundle.y_old);
            scores.slice_mut(s![.., 1 + c..]).assign(&bundle.y_nv);
            Ok(Assembled {
                scores,
                unknown_arg,
            })
        }
    }
}

pub fn assemble_scores(bundle: &LogitsBundle, stage: Stage) -> Result<Array2<f64>> {
    assemble(bundle, stage).map(|a| a.scores)
}

/// Route a gradient on assembled scores back to the head outputs.
pub fn scatter_assembled_grad(
    model: &Model,
    assembled: &Assembled,
    d_scores: &Array2<f64>,
) -> HeadGrad {
    let m = d_scores.nrows();
    let c = model.registry.num_old();
    let slots = model.num_slots();
    match model.stage {
        Stage::Closed => HeadGrad {
            d_old: d_scores.clone(),
            d_re: Array2::zeros((m, slots)),
        },
        _ => {
            let uk = model.registry.unknown_slots();
            let nv = model.registry.novel_slots();
            let mut d_re = Array2::zeros((m, slots));
            for i in 0..m {
                d_re[[i, uk[assembled.unknown_arg[i]]]] += d_scores[[i, 0]];
                for (j, &s) in nv.iter().enumerate() {
                    d_re[[i, s]] += d_scores[[i, 1 + c + j]];
                }
            }
            HeadGrad {
                d_old: d_scores.slice(s![.., 1..1 + c]).to_owned(),
                d_re,
            }
        }
    }
}
