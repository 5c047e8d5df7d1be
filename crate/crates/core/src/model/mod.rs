//! The double self-attention segmentation network.
//!
//! Data flow for one sample:
//!
//! 1. Abstraction levels: farthest point sampling picks centroids, a ball query
//!    per radius builds `G × S` groups, member features (centroid-relative
//!    offsets plus the previous level's features) go through three shared
//!    affine + batch-norm + ReLU stages, and scales are concatenated.
//! 2. The last level's `G × S × T` features go through the point attention and
//!    group attention branches in parallel; both residual branches are added to
//!    the same input, then max-pooled over `S`.
//! 3. Propagation levels interpolate coarse features onto the finer point set
//!    by inverse-distance weights, concatenate skip features and run shared
//!    affine stages.
//! 4. A final affine map produces per-point class scores.

mod config;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{ModelConfig, Strategy};

use crate::engine::{
    relative_error, BatchNormState, BatchStats, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var, TOLERANCE,
};
use crate::error::{Error, Result};
use crate::geom::{self, PointSet};
use crate::pipeline::{Sample, FEATURE_CHANNELS, SAMPLE_WIDTH};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One affine map (no bias; the batch-norm shift takes its role) followed by
/// batch norm and ReLU.
#[derive(Clone, Debug)]
struct ConvBn {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: usize,
}

#[derive(Clone, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct PamParams {
    query: Affine,
    key: Affine,
    value: Affine,
    out: Affine,
    alpha: ParamId,
}

/// Output of one abstraction level.
#[derive(Clone, Debug)]
pub struct LayerState {
    pub centroids: PointSet,
    /// `G × S × T`.
    pub features: Var,
    /// `G × T`.
    pub pooled: Var,
}

/// Result of an attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// Residual output `p + scale · branch`.
    pub output: Var,
    /// `scale · branch` alone.
    pub branch: Var,
    /// The normalized attention matrix (`J × J` for points, `G × G` for groups).
    pub attention: Var,
}

/// Everything a forward pass produces.
pub struct ForwardOutput {
    /// `n × num_classes`.
    pub logits: Var,
    pub levels: Vec<LayerState>,
    pub point_attention: Option<AttentionOutput>,
    pub group_attention: Option<AttentionOutput>,
    /// Batch statistics from training-mode batch norms, keyed by layer index.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

/// Outcome of [`Dapnet::check_loss_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because `θ ± h` straddle a non-differentiable point.
    pub kinks: usize,
    /// Checked coordinates over tolerance whose derivatives agree within round-off.
    pub round_off: usize,
    /// Largest relative error over all checked coordinates.
    pub max_raw_error: f64,
    /// Largest relative error over checked coordinates outside round-off.
    pub max_rel_error: f64,
    /// Parameter coordinate with the largest error and both derivatives.
    pub worst: String,
}

/// Network parameters, batch-norm state and configuration.
#[derive(Clone, Debug)]
pub struct Dapnet {
    config: ModelConfig,
    params: ParamStore,
    bn_names: Vec<String>,
    bn: Vec<BatchNormState>,
    sa: Vec<Vec<Vec<ConvBn>>>,
    pam: Option<PamParams>,
    gam_beta: Option<ParamId>,
    fp: Vec<Vec<ConvBn>>,
    head: Affine,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Builds parameters with a generator derived from `(seed, name)`, so a given
/// name always gets the same initial values regardless of which other layers exist.
struct Builder {
    seed: u64,
    params: ParamStore,
    bn_names: Vec<String>,
    bn: Vec<BatchNormState>,
}

impl Builder {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()))
    }

    fn weight(&mut self, name: &str, cin: usize, cout: usize) -> Result<ParamId> {
        let std = (2.0 / cin as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = self.rng(name);
        let data = (0..cin * cout).map(|_| normal.sample(&mut rng)).collect();
        self.params.insert(name, Tensor::new(vec![cin, cout], data)?)
    }

    fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.params.insert(name, Tensor::filled(shape, value))
    }

    fn affine(&mut self, prefix: &str, cin: usize, cout: usize) -> Result<Affine> {
        Ok(Affine {
            w: self.weight(&format!("{prefix}.w"), cin, cout)?,
            b: self.filled(&format!("{prefix}.b"), &[cout], 0.0)?,
        })
    }

    fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize) -> Result<ConvBn> {
        let w = self.weight(&format!("{prefix}.w"), cin, cout)?;
        let gamma = self.filled(&format!("{prefix}.bn.gamma"), &[cout], 1.0)?;
        let beta = self.filled(&format!("{prefix}.bn.beta"), &[cout], 0.0)?;
        self.bn_names.push(format!("{prefix}.bn"));
        self.bn.push(BatchNormState::new(cout));
        Ok(ConvBn {
            w,
            gamma,
            beta,
            bn: self.bn.len() - 1,
        })
    }

    fn stack(&mut self, prefix: &str, cin: usize, widths: &[usize]) -> Result<Vec<ConvBn>> {
        let mut cin = cin;
        let mut out = Vec::with_capacity(widths.len());
        for (j, &w) in widths.iter().enumerate() {
            out.push(self.conv_bn(&format!("{prefix}.conv{j}"), cin, w)?);
            cin = w;
        }
        Ok(out)
    }
}

impl Dapnet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            seed,
            params: ParamStore::new(),
            bn_names: Vec::new(),
            bn: Vec::new(),
        };
        let mut sa = Vec::new();
        let mut cin = FEATURE_CHANNELS;
        for level in 0..config.levels() {
            let mut scales = Vec::new();
            for (s, _) in config.level_radii(level).iter().enumerate() {
                scales.push(b.stack(&format!("sa{level}.s{s}"), 3 + cin, &config.sa_kernels[level])?);
            }
            sa.push(scales);
            cin = config.level_width(level);
        }
        let top = cin;
        let pam = if config.enable_pam {
            let r = config.attention_reduction;
            Some(PamParams {
                query: b.affine("pam.query", top, r)?,
                key: b.affine("pam.key", top, r)?,
                value: b.affine("pam.value", top, r)?,
                out: b.affine("pam.out", r, top)?,
                alpha: b.filled("pam.alpha", &[1], 0.0)?,
            })
        } else {
            None
        };
        let gam_beta = if config.enable_gam {
            Some(b.filled("gam.beta", &[1], 0.0)?)
        } else {
            None
        };
        let levels = config.levels();
        let mut fp = Vec::new();
        let mut coarse = top;
        for (i, widths) in config.fp_kernels.iter().enumerate() {
            let fine_level = levels - 1 - i;
            let skip = if fine_level > 0 {
                config.level_width(fine_level - 1)
            } else if config.input_skip {
                FEATURE_CHANNELS
            } else {
                0
            };
            fp.push(b.stack(&format!("fp{i}"), coarse + skip, widths)?);
            coarse = *widths.last().expect("validated");
        }
        let head = b.affine("head", coarse, config.num_classes)?;
        Ok(Self {
            config,
            params: b.params,
            bn_names: b.bn_names,
            bn: b.bn,
            sa,
            pam,
            gam_beta,
            fp,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_states(&self) -> impl Iterator<Item = (&str, &BatchNormState)> {
        self.bn_names.iter().map(String::as_str).zip(&self.bn)
    }

    /// Sets a one-element parameter such as `pam.alpha` or `gam.beta`.
    pub fn set_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        let p = self
            .params
            .by_name_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))?;
        if p.tensor.numel() != 1 {
            return Err(Error::InvalidArgument(format!("`{name}` is not a scalar")));
        }
        p.tensor.data_mut()[0] = value;
        Ok(())
    }

    pub fn apply_bn_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (i, s) in stats {
            self.bn[*i].update(s);
        }
    }

    fn conv_stack(
        &self,
        tape: &mut Tape,
        mut x: Var,
        stack: &[ConvBn],
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        for layer in stack {
            let w = tape.param(&self.params, layer.w);
            let gamma = tape.param(&self.params, layer.gamma);
            let beta = tape.param(&self.params, layer.beta);
            let h = tape.affine(x, w, None)?;
            let (h, s) = tape.batch_norm(h, gamma, beta, &self.bn[layer.bn], mode == Mode::Train)?;
            if let Some(s) = s {
                stats.push((layer.bn, s));
            }
            x = tape.relu(h);
        }
        Ok(x)
    }

    fn affine(&self, tape: &mut Tape, x: Var, layer: &Affine) -> Result<Var> {
        let w = tape.param(&self.params, layer.w);
        let b = tape.param(&self.params, layer.b);
        tape.affine(x, w, Some(b))
    }

    /// One abstraction level over `points` carrying `features` (`N × C`).
    pub fn set_abstraction(
        &self,
        tape: &mut Tape,
        level: usize,
        points: &PointSet,
        features: Var,
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<LayerState> {
        let g = self.config.group_counts[level];
        if points.len() < g {
            return Err(Error::TooFewPoints {
                level,
                available: points.len(),
                requested: g,
            });
        }
        let s = self.config.group_size;
        let centroid_ids = geom::fps(points, g, geom::canonical_seed(points))?;
        let centroids = points.select(&centroid_ids)?;
        let mut scale_outputs = Vec::new();
        for (scale, radius) in self.config.level_radii(level).into_iter().enumerate() {
            let groups = geom::ball_query(points, &centroid_ids, radius, s)?;
            let mut rel = Vec::with_capacity(g * s * 3);
            for (gi, &c) in centroid_ids.iter().enumerate() {
                let cp = points.point(c);
                for &m in groups.members(gi) {
                    let mp = points.point(m);
                    rel.extend_from_slice(&[mp[0] - cp[0], mp[1] - cp[1], mp[2] - cp[2]]);
                }
            }
            let rel = tape.constant(Tensor::new(vec![g, s, 3], rel)?);
            let gathered = tape.gather(features, &groups.member_ids, &[g, s])?;
            let x = tape.concat(&[rel, gathered])?;
            scale_outputs.push(self.conv_stack(tape, x, &self.sa[level][scale], mode, stats)?);
        }
        let features = if scale_outputs.len() == 1 {
            scale_outputs[0]
        } else {
            tape.concat(&scale_outputs)?
        };
        let pooled = tape.max_reduce(features, 1)?;
        Ok(LayerState {
            centroids,
            features,
            pooled,
        })
    }

    /// Point attention over `p` (`G × S × T`): queries/keys/values are projected
    /// to the reduction width, flattened to `G × J`, and every flattened
    /// position attends over all positions across groups.
    pub fn pam_forward(&self, tape: &mut Tape, p: Var) -> Result<AttentionOutput> {
        let params = self
            .pam
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("point attention is disabled".into()))?;
        let shape = tape.shape(p).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim("pam", &shape, &[0, 0, 0]));
        }
        let (g, s) = (shape[0], shape[1]);
        let r = self.config.attention_reduction;
        let j = s * r;
        if j > self.config.attention_cap {
            return Err(Error::AttentionTooLarge {
                size: j,
                cap: self.config.attention_cap,
            });
        }
        let a = self.affine(tape, p, &params.query)?;
        let b = self.affine(tape, p, &params.key)?;
        let c = self.affine(tape, p, &params.value)?;
        let a = tape.reshape(a, &[g, j])?;
        let b = tape.reshape(b, &[g, j])?;
        let c = tape.reshape(c, &[g, j])?;
        // scores[i][j] = (Aᵀ B)_ij; attention[j][i] normalizes exp(scores[i][j])
        let at = tape.transpose(a)?;
        let scores = tape.matmul(at, b)?;
        let scores_t = tape.transpose(scores)?;
        let attention = tape.softmax(scores_t, self.config.softmax_mode);
        let attention_t = tape.transpose(attention)?;
        let attended = tape.matmul(c, attention_t)?;
        let attended = tape.reshape(attended, &[g, s, r])?;
        let lifted = self.affine(tape, attended, &params.out)?;
        let alpha = tape.param(&self.params, params.alpha);
        let branch = tape.scale(lifted, alpha)?;
        let output = tape.add(p, branch)?;
        Ok(AttentionOutput {
            output,
            branch,
            attention,
        })
    }

    /// Group attention over `p` (`G × S × T`) flattened to `G × J`; no projection.
    pub fn gam_forward(&self, tape: &mut Tape, p: Var) -> Result<AttentionOutput> {
        let beta_id = self
            .gam_beta
            .ok_or_else(|| Error::InvalidArgument("group attention is disabled".into()))?;
        let shape = tape.shape(p).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim("gam", &shape, &[0, 0, 0]));
        }
        let g = shape[0];
        let j = shape[1] * shape[2];
        let d = tape.reshape(p, &[g, j])?;
        let dt = tape.transpose(d)?;
        let gram = tape.matmul(d, dt)?;
        let attention = tape.softmax(gram, self.config.softmax_mode);
        let mixed = tape.matmul(attention, d)?;
        let mixed = tape.reshape(mixed, &shape)?;
        let beta = tape.param(&self.params, beta_id);
        let branch = tape.scale(mixed, beta)?;
        let output = tape.add(p, branch)?;
        Ok(AttentionOutput {
            output,
            branch,
            attention,
        })
    }

    /// One propagation level: interpolate `coarse_features` from `coarse` onto
    /// `fine`, concatenate `skip` and run the level's affine stack.
    #[allow(clippy::too_many_arguments)]
    pub fn feature_propagation(
        &self,
        tape: &mut Tape,
        index: usize,
        coarse: &PointSet,
        coarse_features: Var,
        fine: &PointSet,
        skip: Option<Var>,
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        let stack = &self.fp[index];
        let fine_level = self.config.levels() - 1 - index;
        let wants_skip = fine_level > 0 || self.config.input_skip;
        if wants_skip && skip.is_none() {
            return Err(Error::InvalidArgument(format!(
                "propagation level {index} is configured with skip features but none were given"
            )));
        }
        let weights = geom::idw_weights(coarse, fine, self.config.idw_neighbors)?;
        let interpolated = tape.weighted_rows(coarse_features, weights)?;
        let x = match skip.filter(|_| wants_skip) {
            Some(skip) => tape.concat(&[interpolated, skip])?,
            None => interpolated,
        };
        self.conv_stack(tape, x, stack, mode, stats)
    }

    /// Full network on one sample; returns `n × num_classes` scores.
    pub fn forward(&self, tape: &mut Tape, sample: &Sample, mode: Mode) -> Result<ForwardOutput> {
        if sample.is_empty() || sample.features.len() != sample.len() * SAMPLE_WIDTH {
            return Err(Error::dim(
                "forward input",
                &[sample.len(), SAMPLE_WIDTH],
                &[sample.features.len()],
            ));
        }
        let n = sample.len();
        let points = PointSet::new(sample.coords())?;
        let raw = tape.constant(Tensor::new(vec![n, FEATURE_CHANNELS], sample.feature_channels())?);
        let mut stats = Vec::new();

        let mut levels: Vec<LayerState> = Vec::new();
        for level in 0..self.config.levels() {
            let (pts, feats) = match levels.last() {
                Some(prev) => (&prev.centroids, prev.pooled),
                None => (&points, raw),
            };
            let state = self.set_abstraction(tape, level, pts, feats, mode, &mut stats)?;
            levels.push(state);
        }

        let top = levels.last().expect("at least one level").features;
        let point_attention = match self.pam {
            Some(_) => Some(self.pam_forward(tape, top)?),
            None => None,
        };
        let group_attention = match self.gam_beta {
            Some(_) => Some(self.gam_forward(tape, top)?),
            None => None,
        };
        let mut fused = top;
        for branch in point_attention.iter().chain(&group_attention) {
            fused = tape.add(fused, branch.branch)?;
        }

        let mut coarse_points = levels.last().expect("at least one level").centroids.clone();
        let mut coarse_features = tape.max_reduce(fused, 1)?;
        let l = self.config.levels();
        for i in 0..l {
            let fine_level = l - 1 - i;
            let (fine, skip) = if fine_level > 0 {
                let prev = &levels[fine_level - 1];
                (prev.centroids.clone(), Some(prev.pooled))
            } else {
                (points.clone(), self.config.input_skip.then_some(raw))
            };
            coarse_features =
                self.feature_propagation(tape, i, &coarse_points, coarse_features, &fine, skip, mode, &mut stats)?;
            coarse_points = fine;
        }
        let logits = self.affine(tape, coarse_features, &self.head)?;
        Ok(ForwardOutput {
            logits,
            levels,
            point_attention,
            group_attention,
            bn_stats: stats,
        })
    }

    /// Mean cross-entropy of a labelled sample.
    pub fn loss(&self, tape: &mut Tape, sample: &Sample, mode: Mode) -> Result<(Var, ForwardOutput)> {
        let labels = sample
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("sample has no labels".into()))?;
        let out = self.forward(tape, sample, mode)?;
        let loss = tape.cross_entropy(out.logits, labels)?;
        Ok((loss, out))
    }

    /// Inference-mode class scores (`n × num_classes`).
    pub fn scores(&self, sample: &Sample) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, sample, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Inference-mode argmax labels.
    pub fn predict(&self, sample: &Sample) -> Result<Vec<usize>> {
        Ok(self.scores(sample)?.argmax_rows())
    }

    /// Compares backpropagated loss gradients with central differences on up
    /// to `per_param` randomly chosen coordinates of every parameter. Batch
    /// norm runs in `mode`; training-mode statistics are not applied.
    ///
    /// A coordinate whose two probes `θ ± h` land on different smooth pieces
    /// (a ReLU flips or a max-pool winner changes) has no meaningful central
    /// difference; it is counted in `kinks` and left out of both errors.
    /// `max_raw_error` covers every other coordinate. `max_rel_error` also
    /// leaves out coordinates that exceed [`TOLERANCE`] while their derivatives
    /// differ by less than the round-off of the difference quotient itself,
    /// `16 ε |L| / 2h`: gradients that small (training-mode batch norm makes
    /// some of them exactly zero) are below what central differences resolve.
    pub fn check_loss_gradients(
        &self,
        sample: &Sample,
        mode: Mode,
        per_param: usize,
        h: f64,
        seed: u64,
    ) -> Result<GradCheckReport> {
        let eval = |m: &Dapnet| -> Result<(f64, u64)> {
            let mut tape = Tape::new();
            let (loss, _) = m.loss(&mut tape, sample, mode)?;
            Ok((tape.value(loss).data()[0], tape.branch_signature()))
        };
        let mut tape = Tape::new();
        let (loss, _) = self.loss(&mut tape, sample, mode)?;
        let grads = tape.backward(loss)?;
        let mut probe = self.clone();
        probe.params.zero_grad();
        grads.accumulate_into(&mut probe.params);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = GradCheckReport {
            checked: 0,
            kinks: 0,
            round_off: 0,
            max_raw_error: 0.0,
            max_rel_error: 0.0,
            worst: String::new(),
        };
        let ids: Vec<ParamId> = probe.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = probe.params.get(id);
            let n = p.tensor.numel();
            let analytic = p.tensor.grad.clone().unwrap_or_else(|| vec![0.0; n]);
            let name = p.name.clone();
            let coords = if n <= per_param {
                (0..n).collect()
            } else {
                rand::seq::index::sample(&mut rng, n, per_param).into_vec()
            };
            for c in coords {
                let orig = probe.params.get(id).tensor.data()[c];
                probe.params.get_mut(id).tensor.data_mut()[c] = orig + h;
                let (plus, sig_plus) = eval(&probe)?;
                probe.params.get_mut(id).tensor.data_mut()[c] = orig - h;
                let (minus, sig_minus) = eval(&probe)?;
                probe.params.get_mut(id).tensor.data_mut()[c] = orig;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite(format!("loss while perturbing {name}[{c}]")));
                }
                if sig_plus != sig_minus {
                    report.kinks += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * h);
                let err = relative_error(analytic[c], numeric);
                report.checked += 1;
                report.max_raw_error = report.max_raw_error.max(err);
                let resolution = 16.0 * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * h);
                if err >= TOLERANCE && (numeric - analytic[c]).abs() <= resolution {
                    report.round_off += 1;
                    continue;
                }
                if err > report.max_rel_error || report.worst.is_empty() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = format!("{name}[{c}] analytic {:e} numeric {numeric:e}", analytic[c]);
                }
            }
        }
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let header = toml::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(_, p)| {
                let mut t = p.tensor.clone();
                t.grad = None;
                t.requires_grad = false;
                (p.name.clone(), t)
            })
            .collect();
        for (name, state) in self.bn_states() {
            let c = state.channels();
            tensors.push((
                format!("{name}.running_mean"),
                Tensor::new(vec![c], state.running_mean.clone())?,
            ));
            tensors.push((
                format!("{name}.running_var"),
                Tensor::new(vec![c], state.running_var.clone())?,
            ));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig =
            toml::from_str(&ckpt.header).map_err(|e| Error::Checkpoint(format!("config header: {e}")))?;
        let mut model = Self::new(config, 0)?;
        let stored: HashMap<&str, &Tensor> = ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = stored
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.data().to_vec())
        };
        for p in model.params.iter_mut() {
            let data = fetch(&p.name, p.tensor.shape())?;
            p.tensor.data_mut().copy_from_slice(&data);
        }
        for (name, state) in model.bn_names.iter().zip(model.bn.iter_mut()) {
            let c = state.channels();
            state.running_mean = fetch(&format!("{name}.running_mean"), &[c])?;
            state.running_var = fetch(&format!("{name}.running_var"), &[c])?;
        }
        Ok(model)
    }
}
