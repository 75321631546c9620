//! Point-voxel encoder with density-gated attention, plus the small heads
//! used to train it end to end.
//!
//! Data flow for one cloud of N points in M voxels:
//!
//! ```text
//! voxel centers (cos t, sin t, phi, r) --voxel_mlp--> Fv   M x 16
//! point offsets                        --point_head--> Fp  N x 16
//! standardized density Z              --attn_point--> Gp  N x 16
//! Fp' = Gp * Fp
//! mean_voxel(Z)                        --attn_voxel--> Gv  M x 16
//! Fv' = fuse([Gv * Fv | max_voxel(Fp')])                   M x 32
//! ```
//!
//! `Z = (Dc - m) / l` with the fitted clip center `m` and half span `l`,
//! which keeps gate inputs in (-1, 1) instead of the raw density scale
//! (around 1e-2). The gate's first layer can absorb this affine map.
//!
//! `toy_head` classifies voxels from Fv' and `point_cls` classifies points
//! from Fp'.

use rand::{Rng, SeedableRng};

use crate::density::{density_for_cloud, BeamProfile, DensityEmbedding, DENSITY_CHANNELS};
use crate::error::{Error, Result};
use crate::io::NamedTensor;
use crate::nn::{
    lovasz_softmax, segment_reduce, segment_reduce_backward, softmax, softmax_backward, weighted_cross_entropy, Linear,
    Matrix, Mlp, MlpCache, Output, ParamTensor, ReduceMode, Reduced, SegmentMap,
};
use crate::sensor::to_spherical;
use crate::stats::{soft_clip, ClipParams};
use crate::voxel::{voxel_offsets, voxelize, VoxelGrid};
use crate::Point;

pub const POINT_CHANNELS: usize = 16;
pub const VOXEL_CHANNELS: usize = 32;
const HIDDEN: usize = 16;

/// Component switches for ablation runs. All enabled is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub clip: bool,
    pub attention: bool,
    pub density: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            clip: true,
            attention: true,
            density: true,
        }
    }
}

impl Ablation {
    pub fn label(&self) -> String {
        let mut off = Vec::new();
        if !self.clip {
            off.push("no-clip");
        }
        if !self.attention {
            off.push("no-attn");
        }
        if !self.density {
            off.push("no-density");
        }
        if off.is_empty() {
            "full".into()
        } else {
            off.join("+")
        }
    }
}

const PARAM_NAMES: [&str; 24] = [
    "voxel_mlp.0.weight",
    "voxel_mlp.0.bias",
    "voxel_mlp.1.weight",
    "voxel_mlp.1.bias",
    "point_head.0.weight",
    "point_head.0.bias",
    "point_head.1.weight",
    "point_head.1.bias",
    "attn_point.0.weight",
    "attn_point.0.bias",
    "attn_point.1.weight",
    "attn_point.1.bias",
    "attn_voxel.0.weight",
    "attn_voxel.0.bias",
    "attn_voxel.1.weight",
    "attn_voxel.1.bias",
    "fuse.weight",
    "fuse.bias",
    "toy_head.0.weight",
    "toy_head.0.bias",
    "toy_head.1.weight",
    "toy_head.1.bias",
    "point_cls.weight",
    "point_cls.bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DdfeParams {
    pub voxel_mlp: Mlp,
    pub point_head: Mlp,
    pub attn_point: Mlp,
    pub attn_voxel: Mlp,
    pub fuse: Linear,
    pub toy_head: Mlp,
    pub point_cls: Linear,
}

impl DdfeParams {
    pub fn new(num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        Ok(Self {
            voxel_mlp: Mlp::new(4, HIDDEN, POINT_CHANNELS, Output::Identity, rng),
            point_head: Mlp::new(3, HIDDEN, POINT_CHANNELS, Output::Identity, rng),
            attn_point: Mlp::new(DENSITY_CHANNELS, HIDDEN, POINT_CHANNELS, Output::Sigmoid, rng),
            attn_voxel: Mlp::new(DENSITY_CHANNELS, HIDDEN, POINT_CHANNELS, Output::Sigmoid, rng),
            fuse: Linear::new(VOXEL_CHANNELS, VOXEL_CHANNELS, rng),
            toy_head: Mlp::new(VOXEL_CHANNELS, VOXEL_CHANNELS, num_classes, Output::Identity, rng),
            point_cls: Linear::new(POINT_CHANNELS, num_classes, rng),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.point_cls.d_out()
    }

    pub fn tensors(&self) -> [&ParamTensor; 24] {
        let [a0, a1, a2, a3] = self.voxel_mlp.params();
        let [b0, b1, b2, b3] = self.point_head.params();
        let [c0, c1, c2, c3] = self.attn_point.params();
        let [d0, d1, d2, d3] = self.attn_voxel.params();
        let [e0, e1] = self.fuse.params();
        let [f0, f1, f2, f3] = self.toy_head.params();
        let [g0, g1] = self.point_cls.params();
        [
            a0, a1, a2, a3, b0, b1, b2, b3, c0, c1, c2, c3, d0, d1, d2, d3, e0, e1, f0, f1, f2, f3, g0, g1,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut ParamTensor; 24] {
        let [a0, a1, a2, a3] = self.voxel_mlp.params_mut();
        let [b0, b1, b2, b3] = self.point_head.params_mut();
        let [c0, c1, c2, c3] = self.attn_point.params_mut();
        let [d0, d1, d2, d3] = self.attn_voxel.params_mut();
        let [e0, e1] = self.fuse.params_mut();
        let [f0, f1, f2, f3] = self.toy_head.params_mut();
        let [g0, g1] = self.point_cls.params_mut();
        [
            a0, a1, a2, a3, b0, b1, b2, b3, c0, c1, c2, c3, d0, d1, d2, d3, e0, e1, f0, f1, f2, f3, g0, g1,
        ]
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(ParamTensor::zero_grad);
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.values.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.grad.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::shape(&[values.len()], &[self.num_values()]));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.values.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

/// Per-voxel `(cos theta, sin theta, phi, r)` of the voxel reference points.
pub fn voxel_geometry(grid: &VoxelGrid) -> Result<Matrix> {
    let mut m = Matrix::zeros(grid.len(), 4);
    for (j, c) in grid.centers.iter().enumerate() {
        let s = to_spherical(*c).map_err(|e| Error::InvalidArgument(format!("voxel {j}: {e}")))?;
        m.row_mut(j)
            .copy_from_slice(&[s.azimuth.cos(), s.azimuth.sin(), s.elevation, s.range]);
    }
    Ok(m)
}

fn segments_of(grid: &VoxelGrid) -> Result<SegmentMap> {
    SegmentMap::new(grid.point_to_voxel.clone(), grid.len())
}

fn ones(rows: usize) -> Matrix {
    Matrix::filled(rows, POINT_CHANNELS, 1.0)
}

pub fn encode_voxel_features(grid: &VoxelGrid, params: &DdfeParams) -> Result<Matrix> {
    Ok(params.voxel_mlp.forward(&voxel_geometry(grid)?)?.output)
}

pub fn encode_point_features(grid: &VoxelGrid, cloud: &[Point], params: &DdfeParams) -> Result<Matrix> {
    let offsets = Matrix::from_rows(&voxel_offsets(grid, cloud)?);
    Ok(params.point_head.forward(&offsets)?.output)
}

/// `f_p(Dc) * Fp`.
pub fn point_attention(density: &Matrix, point_features: &Matrix, params: &DdfeParams) -> Result<Matrix> {
    params.attn_point.forward(density)?.output.hadamard(point_features)
}

/// `fuse([f_v(mean Dc) * Fv | max Fp'])`.
pub fn voxel_fuse(
    density: &Matrix,
    grid: &VoxelGrid,
    voxel_features: &Matrix,
    gated_points: &Matrix,
    params: &DdfeParams,
) -> Result<Matrix> {
    let seg = segments_of(grid)?;
    let dv = segment_reduce(density, &seg, ReduceMode::Mean)?.values;
    let gated = params.attn_voxel.forward(&dv)?.output.hadamard(voxel_features)?;
    let pooled = segment_reduce(gated_points, &seg, ReduceMode::Max)?.values;
    params.fuse.forward(&gated.hconcat(&pooled)?)
}

/// Everything about one cloud that does not depend on the parameters.
#[derive(Debug, Clone)]
pub struct SampleInputs {
    pub grid: VoxelGrid,
    pub segments: SegmentMap,
    /// N x 3 point offsets from voxel centers.
    pub offsets: Matrix,
    /// N x 4 standardized density fed to the point gate.
    pub density: Matrix,
    /// M x 4 per-voxel mean of `density`.
    pub voxel_density: Matrix,
    /// M x 4 voxel geometry fed to `voxel_mlp`.
    pub voxel_geometry: Matrix,
}

impl SampleInputs {
    pub fn num_points(&self) -> usize {
        self.offsets.rows
    }

    pub fn num_voxels(&self) -> usize {
        self.grid.len()
    }
}

/// Raw beam density of the cloud, with the clip applied if `clip` is given.
pub fn gate_density(profile: &BeamProfile, cloud: &[Point], clip: Option<&ClipParams>) -> Result<DensityEmbedding> {
    let raw = density_for_cloud(profile, cloud)?;
    Ok(match clip {
        Some(c) => soft_clip(&raw, c),
        None => raw,
    })
}

/// `(D' - m) / l` per channel, where `D'` is the clipped density (or the raw
/// one with clipping ablated). All zeros with density ablated.
pub fn gate_input(raw: &DensityEmbedding, stats: &ClipParams, ablation: Ablation) -> Matrix {
    let mut out = Matrix::zeros(raw.len(), DENSITY_CHANNELS);
    if !ablation.density {
        return out;
    }
    for (i, row) in raw.values.iter().enumerate() {
        for (k, (o, &d)) in out.row_mut(i).iter_mut().zip(row).enumerate() {
            let d = if ablation.clip { stats.clip_value(k, d) } else { d };
            *o = (d - stats.mid[k]) / stats.half_span[k];
        }
    }
    out
}

pub fn prepare_inputs(
    cloud: &[Point],
    profile: &BeamProfile,
    stats: &ClipParams,
    ablation: Ablation,
    voxel_size: f64,
) -> Result<SampleInputs> {
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("empty point cloud".into()));
    }
    let density = gate_input(&density_for_cloud(profile, cloud)?, stats, ablation);
    let grid = voxelize(cloud, voxel_size)?;
    let segments = segments_of(&grid)?;
    let offsets = Matrix::from_rows(&voxel_offsets(&grid, cloud)?);
    let voxel_density = segment_reduce(&density, &segments, ReduceMode::Mean)?.values;
    let voxel_geometry = voxel_geometry(&grid)?;
    Ok(SampleInputs {
        grid,
        segments,
        offsets,
        density,
        voxel_density,
        voxel_geometry,
    })
}

/// Forward intermediates, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    voxel_mlp: MlpCache,
    point_head: MlpCache,
    attn_point: Option<MlpCache>,
    attn_voxel: Option<MlpCache>,
    point_gate: Matrix,
    voxel_gate: Matrix,
    gated_points: Matrix,
    pooled: Reduced,
    fuse_input: Matrix,
    voxel_features: Matrix,
    toy_head: MlpCache,
    point_logits: Matrix,
}

impl ForwardCache {
    /// Gated point features, N x 16.
    pub fn point_features(&self) -> &Matrix {
        &self.gated_points
    }

    /// Fused voxel features, M x 32.
    pub fn voxel_features(&self) -> &Matrix {
        &self.voxel_features
    }

    pub fn point_gate(&self) -> &Matrix {
        &self.point_gate
    }

    pub fn voxel_gate(&self) -> &Matrix {
        &self.voxel_gate
    }

    /// Ungated point features, N x 16.
    pub fn raw_point_features(&self) -> &Matrix {
        &self.point_head.output
    }

    /// Ungated voxel features, M x 16.
    pub fn raw_voxel_features(&self) -> &Matrix {
        &self.voxel_mlp.output
    }

    pub fn voxel_logits(&self) -> &Matrix {
        &self.toy_head.output
    }

    pub fn point_logits(&self) -> &Matrix {
        &self.point_logits
    }
}

/// The four loss terms, summed with equal weight.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub lovasz_point: f64,
    pub wce_point: f64,
    pub lovasz_voxel: f64,
    pub wce_voxel: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.lovasz_point + self.wce_point + self.lovasz_voxel + self.wce_voxel
    }
}

/// Lovasz-softmax plus weighted CE on one set of logits; returns both terms
/// and the logit gradient of their sum.
fn segmentation_loss(logits: &Matrix, labels: &[u32], weights: &[f64]) -> Result<(f64, f64, Matrix)> {
    let probs = softmax(logits);
    let (lovasz, dprobs) = lovasz_softmax(&probs, labels)?;
    let (wce, mut dlogits) = weighted_cross_entropy(logits, labels, weights)?;
    dlogits.add_assign(&softmax_backward(&probs, &dprobs))?;
    Ok((lovasz, wce, dlogits))
}

impl DdfeParams {
    pub fn forward(&self, inputs: &SampleInputs, ablation: Ablation) -> Result<ForwardCache> {
        let (n, m) = (inputs.num_points(), inputs.num_voxels());
        let voxel_mlp = self.voxel_mlp.forward(&inputs.voxel_geometry)?;
        let point_head = self.point_head.forward(&inputs.offsets)?;
        let (attn_point, attn_voxel, point_gate, voxel_gate) = if ablation.attention {
            let ap = self.attn_point.forward(&inputs.density)?;
            let av = self.attn_voxel.forward(&inputs.voxel_density)?;
            let (gp, gv) = (ap.output.clone(), av.output.clone());
            (Some(ap), Some(av), gp, gv)
        } else {
            (None, None, ones(n), ones(m))
        };
        let gated_points = point_gate.hadamard(&point_head.output)?;
        let gated_voxels = voxel_gate.hadamard(&voxel_mlp.output)?;
        let pooled = segment_reduce(&gated_points, &inputs.segments, ReduceMode::Max)?;
        let fuse_input = gated_voxels.hconcat(&pooled.values)?;
        let voxel_features = self.fuse.forward(&fuse_input)?;
        let toy_head = self.toy_head.forward(&voxel_features)?;
        let point_logits = self.point_cls.forward(&gated_points)?;
        Ok(ForwardCache {
            voxel_mlp,
            point_head,
            attn_point,
            attn_voxel,
            point_gate,
            voxel_gate,
            gated_points,
            pooled,
            fuse_input,
            voxel_features,
            toy_head,
            point_logits,
        })
    }

    pub fn loss(
        &self,
        cache: &ForwardCache,
        point_labels: &[u32],
        voxel_labels: &[u32],
        class_weights: &[f64],
    ) -> Result<(LossTerms, Matrix, Matrix)> {
        let (lp, wp, dpoint) = segmentation_loss(&cache.point_logits, point_labels, class_weights)?;
        let (lv, wv, dvoxel) = segmentation_loss(cache.voxel_logits(), voxel_labels, class_weights)?;
        Ok((
            LossTerms {
                lovasz_point: lp,
                wce_point: wp,
                lovasz_voxel: lv,
                wce_voxel: wv,
            },
            dpoint,
            dvoxel,
        ))
    }

    /// Accumulates parameter gradients of the loss whose logit gradients are
    /// `d_point_logits` and `d_voxel_logits`.
    pub fn backward(
        &mut self,
        inputs: &SampleInputs,
        cache: &ForwardCache,
        d_point_logits: &Matrix,
        d_voxel_logits: &Matrix,
    ) {
        let d_features = self
            .toy_head
            .backward(&cache.toy_head, d_voxel_logits, true)
            .expect("input gradient requested");
        let d_fuse_in = self
            .fuse
            .backward(&cache.fuse_input, &d_features, true)
            .expect("input gradient requested");
        let (d_gated_voxels, d_pooled) = d_fuse_in.hsplit(POINT_CHANNELS);

        let d_voxel_raw = d_gated_voxels.hadamard(&cache.voxel_gate).expect("same shape");
        if let Some(av) = &cache.attn_voxel {
            let d_gate = d_gated_voxels.hadamard(&cache.voxel_mlp.output).expect("same shape");
            self.attn_voxel.backward(av, &d_gate, false);
        }
        self.voxel_mlp.backward(&cache.voxel_mlp, &d_voxel_raw, false);

        let mut d_gated_points = segment_reduce_backward(&cache.pooled, &inputs.segments, &d_pooled);
        let d_from_cls = self
            .point_cls
            .backward(&cache.gated_points, d_point_logits, true)
            .expect("input gradient requested");
        d_gated_points.add_assign(&d_from_cls).expect("same shape");

        let d_point_raw = d_gated_points.hadamard(&cache.point_gate).expect("same shape");
        if let Some(ap) = &cache.attn_point {
            let d_gate = d_gated_points.hadamard(&cache.point_head.output).expect("same shape");
            self.attn_point.backward(ap, &d_gate, false);
        }
        self.point_head.backward(&cache.point_head, &d_point_raw, false);
    }

    /// Forward, loss and backward for one labeled sample.
    pub fn train_step(
        &mut self,
        inputs: &SampleInputs,
        ablation: Ablation,
        point_labels: &[u32],
        voxel_labels: &[u32],
        class_weights: &[f64],
    ) -> Result<LossTerms> {
        let cache = self.forward(inputs, ablation)?;
        let (terms, dp, dv) = self.loss(&cache, point_labels, voxel_labels, class_weights)?;
        self.backward(inputs, &cache, &dp, &dv);
        Ok(terms)
    }

    /// Per-point class from the voxel head's prediction for its voxel.
    pub fn predict(&self, inputs: &SampleInputs, ablation: Ablation) -> Result<Vec<u32>> {
        let cache = self.forward(inputs, ablation)?;
        let voxel_pred = cache.voxel_logits().argmax_rows();
        Ok(inputs
            .grid
            .point_to_voxel
            .iter()
            .map(|&v| voxel_pred[v] as u32)
            .collect())
    }
}

/// Output of [`ddfe_forward`].
#[derive(Debug, Clone)]
pub struct DdfeOutput {
    pub point_features: Matrix,
    pub voxel_features: Matrix,
    pub grid: VoxelGrid,
}

/// Full feature pipeline for one cloud: density, clip, voxelize, encode,
/// gate and fuse.
pub fn ddfe_forward(
    cloud: &[Point],
    profile: &BeamProfile,
    clip: &ClipParams,
    params: &DdfeParams,
    ablation: Ablation,
    voxel_size: f64,
) -> Result<DdfeOutput> {
    let inputs = prepare_inputs(cloud, profile, clip, ablation, voxel_size)?;
    let cache = params.forward(&inputs, ablation)?;
    Ok(DdfeOutput {
        point_features: cache.gated_points,
        voxel_features: cache.voxel_features,
        grid: inputs.grid,
    })
}

/// Trained parameters with what is needed to rebuild their inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: DdfeParams,
    /// Density statistics; used for standardization even with clipping off.
    pub clip: ClipParams,
    pub ablation: Ablation,
    pub voxel_size: f64,
}

impl Model {
    pub fn prepare(&self, cloud: &[Point], profile: &BeamProfile) -> Result<SampleInputs> {
        prepare_inputs(cloud, profile, &self.clip, self.ablation, self.voxel_size)
    }

    pub fn to_tensors(&self) -> Result<Vec<NamedTensor>> {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let mut out = vec![NamedTensor::new(
            "meta",
            &[5],
            vec![
                self.params.num_classes() as f64,
                self.voxel_size,
                flag(self.ablation.clip),
                flag(self.ablation.attention),
                flag(self.ablation.density),
            ],
        )?];
        for (name, t) in PARAM_NAMES.iter().zip(self.params.tensors()) {
            out.push(NamedTensor::new(*name, &t.shape, t.values.clone())?);
        }
        out.push(NamedTensor::new("clip.m", &[DENSITY_CHANNELS], self.clip.mid.to_vec())?);
        out.push(NamedTensor::new(
            "clip.l",
            &[DENSITY_CHANNELS],
            self.clip.half_span.to_vec(),
        )?);
        Ok(out)
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks tensor {name}")))
        };
        let meta = &find("meta")?.values;
        if meta.len() != 5 {
            return Err(Error::InvalidArgument("checkpoint meta must hold 5 values".into()));
        }
        let num_classes = meta[0] as usize;
        if num_classes as f64 != meta[0] {
            return Err(Error::InvalidArgument(format!("class count {}", meta[0])));
        }
        let ablation = Ablation {
            clip: meta[2] != 0.0,
            attention: meta[3] != 0.0,
            density: meta[4] != 0.0,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = DdfeParams::new(num_classes, &mut rng)?;
        for (name, t) in PARAM_NAMES.iter().zip(params.tensors_mut()) {
            let src = find(name)?;
            if src.shape != t.shape {
                return Err(Error::shape(&src.shape, &t.shape));
            }
            t.values.copy_from_slice(&src.values);
        }
        let m = find("clip.m")?;
        let l = find("clip.l")?;
        if m.values.len() != DENSITY_CHANNELS || l.values.len() != DENSITY_CHANNELS {
            return Err(Error::InvalidArgument("clip tensors must have 4 values".into()));
        }
        if l.values.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument("clip half span must be positive".into()));
        }
        let arr = |v: &[f64]| -> [f64; DENSITY_CHANNELS] { std::array::from_fn(|k| v[k]) };
        let clip = ClipParams::from_mid_half_span(arr(&m.values), arr(&l.values));
        Ok(Self {
            params,
            clip,
            ablation,
            voxel_size: meta[1],
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::io::write_checkpoint(&self.to_tensors()?, path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_tensors(&crate::io::read_checkpoint(path)?)
    }
}
