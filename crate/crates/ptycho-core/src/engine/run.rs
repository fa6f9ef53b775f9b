//! The reconstruction loop shared by pixelated and DGP modes.
//!
//! Each iteration regenerates object and probe (from pixel grids or from
//! the DGPs under fresh input noise), applies the hard constraints as
//! straight-through projections, forward-models a batch of scan
//! positions on independent per-position tapes, merges gradients in
//! position order, and takes one Adam step per parameter group. Batches
//! may be evaluated on worker threads; the ordered merge makes the result
//! independent of the thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dgp::{DgpState, FinalActivation, Realness, UNet, UNetSpec};
use crate::engine::adam::{AdamParams, AdamState};
use crate::error::{PtychoError, Result};
use crate::loss::{fidelity_loss, orthogonalize_modes, surface_zero_loss, tie_slices, tv_loss, FidelityKind};
use crate::physics::{split_position, transmission_node, ForwardModel, ObjectKind, ProbeState};
use crate::simdata::{probe_diameter_a, Dataset4D};
use crate::tensor::{NodeId, Precision, Tape, Tensor};

use super::{
    stream_seed, TAG_OBJECT_NOISE, TAG_PRETRAIN_OBJECT, TAG_PRETRAIN_PROBE, TAG_PROBE_NOISE,
    TAG_SHUFFLE, TAG_SPLIT, TAG_UNET_INIT,
};

/// One stage of the reconstruction schedule: constraint switches, loss
/// weights, and per-group learning rates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage {
    pub iterations: usize,
    pub tie_slices: bool,
    pub orthogonalize_probe: bool,
    pub lambda_xy: f64,
    pub lambda_z: f64,
    pub lambda_surf: f64,
    pub fidelity: FidelityKind,
    pub lr_object: f64,
    pub lr_probe: f64,
    pub lr_positions: f64,
    pub learn_object: bool,
    pub learn_probe: bool,
    pub learn_positions: bool,
}

impl Default for Stage {
    fn default() -> Self {
        Stage {
            iterations: 100,
            tie_slices: false,
            orthogonalize_probe: true,
            lambda_xy: 0.0,
            lambda_z: 0.0,
            lambda_surf: 0.0,
            fidelity: FidelityKind::AmplitudeMse,
            lr_object: 1e-3,
            lr_probe: 1e-4,
            lr_positions: 1e-1,
            learn_object: true,
            learn_probe: true,
            learn_positions: false,
        }
    }
}

/// Network and pre-training settings for DGP mode.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineDgpConfig {
    pub object_depth: usize,
    pub probe_depth: usize,
    pub filters: usize,
    pub noise_sigma: f64,
    pub final_activation: FinalActivation,
    pub pretrain_iters: usize,
    pub pretrain_lr: f64,
    pub warmup_iters: usize,
    pub warmup_lr_object: f64,
    pub warmup_lr_probe: f64,
}

impl Default for EngineDgpConfig {
    fn default() -> Self {
        EngineDgpConfig {
            object_depth: 3,
            probe_depth: 3,
            filters: 16,
            noise_sigma: 0.025,
            final_activation: FinalActivation::Identity,
            pretrain_iters: 200,
            pretrain_lr: 1e-3,
            warmup_iters: 50,
            warmup_lr_object: 5e-2,
            warmup_lr_probe: 1e-2,
        }
    }
}

/// Full reconstruction recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub object_kind: ObjectKind,
    pub num_slices: usize,
    pub slice_thickness_a: f64,
    pub probe_modes: usize,
    pub stages: Vec<Stage>,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub threads: usize,
    pub band_limit: bool,
    pub dgp: EngineDgpConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            object_kind: ObjectKind::PurePhase,
            num_slices: 1,
            slice_thickness_a: 1.0,
            probe_modes: 1,
            stages: vec![Stage::default()],
            batch_size: 32,
            validation_fraction: 0.0,
            seed: 0,
            threads: 1,
            band_limit: false,
            dgp: EngineDgpConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(PtychoError::config("at least one stage required"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.iterations == 0 {
                return Err(PtychoError::config(format!("stage {i}: iterations must be > 0")));
            }
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(PtychoError::config("validation fraction must lie in [0, 0.5]"));
        }
        if self.batch_size == 0 || self.threads == 0 || self.probe_modes == 0 || self.num_slices == 0
        {
            return Err(PtychoError::config("batch_size, threads, probe_modes, slices must be > 0"));
        }
        Ok(())
    }
}

/// Object parameters: a directly optimized pixel grid or a DGP whose
/// scaled output is the object.
#[derive(Debug, Clone)]
pub enum ObjectParams<P: Precision> {
    Pixel(Tensor<P>),
    Dgp { state: DgpState<P>, scale: P },
}

#[derive(Debug, Clone)]
pub enum ProbeParams<P: Precision> {
    Pixel(Tensor<P>),
    Dgp { state: DgpState<P>, scale: P },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: u64,
    pub seconds: f64,
    pub train: f64,
    pub val: Option<f64>,
}

/// Parameters captured at the minimum-validation-loss iteration.
#[derive(Debug, Clone)]
pub struct BestCheckpoint<P: Precision> {
    pub iteration: u64,
    pub val_loss: f64,
    pub object: ObjectParams<P>,
    pub probe: ProbeParams<P>,
    pub positions_px: Tensor<P>,
}

#[derive(Debug, Clone)]
pub struct ReconState<P: Precision> {
    pub object: ObjectParams<P>,
    pub probe: ProbeParams<P>,
    pub positions_px: Tensor<P>,
    pub initial_positions_px: Vec<[f64; 2]>,
    pub opt_object: AdamState<P>,
    pub opt_probe: AdamState<P>,
    pub opt_positions: AdamState<P>,
    pub iteration: u64,
    pub history: Vec<IterRecord>,
    pub best_val: Option<BestCheckpoint<P>>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub lr_scale: f64,
    pub seed: u64,
}

impl<P: Precision> ReconState<P> {
    /// Noiseless object values with the given stage's hard constraints.
    pub fn object_values(&self, tie: bool) -> Result<Tensor<P>> {
        let raw = match &self.object {
            ObjectParams::Pixel(t) => t.clone(),
            ObjectParams::Dgp { state, scale } => scale_tensor(&state.infer()?, *scale),
        };
        if tie {
            tie_slices(&raw)
        } else {
            Ok(raw)
        }
    }

    /// Noiseless probe modes with optional orthogonalization.
    pub fn probe_values(&self, orthogonalize: bool) -> Result<Tensor<P>> {
        let raw = match &self.probe {
            ProbeParams::Pixel(t) => t.clone(),
            ProbeParams::Dgp { state, scale } => scale_tensor(&state.infer()?, *scale),
        };
        if orthogonalize {
            orthogonalize_modes(&raw)
        } else {
            Ok(raw)
        }
    }

    pub fn positions_a(&self, sampling: (f64, f64)) -> Vec<[f64; 2]> {
        let v = self.positions_px.real().unwrap();
        (0..v.len() / 2)
            .map(|i| [v[2 * i].as_f64() * sampling.0, v[2 * i + 1].as_f64() * sampling.1])
            .collect()
    }
}

fn scale_tensor<P: Precision>(t: &Tensor<P>, s: P) -> Tensor<P> {
    match t.data() {
        crate::tensor::Data::Real(v) => {
            Tensor::from_real(t.shape().to_vec(), v.iter().map(|&x| x * s).collect()).unwrap()
        }
        crate::tensor::Data::Complex(v) => {
            Tensor::from_complex(t.shape().to_vec(), v.iter().map(|&x| x * s).collect()).unwrap()
        }
    }
}

fn max_abs<P: Precision>(t: &Tensor<P>) -> f64 {
    match t.data() {
        crate::tensor::Data::Real(v) => {
            v.iter().map(|x| x.abs().as_f64()).fold(0.0, f64::max)
        }
        crate::tensor::Data::Complex(v) => v.iter().map(|z| z.norm().as_f64()).fold(0.0, f64::max),
    }
}

/// DGP output scale: anchors are normalized to unit peak magnitude so the
/// fixed input-noise level is meaningful relative to the signal.
fn anchor_scale<P: Precision>(t: &Tensor<P>) -> f64 {
    let m = max_abs(t);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Disjoint, exhaustive, seeded-uniform split of scan positions.
/// Validation patterns never contribute gradients.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(PtychoError::contract("validation fraction must lie in [0, 0.5]"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, TAG_SPLIT, 0));
    idx.shuffle(&mut rng);
    let val_count = (fraction * n as f64).round() as usize;
    let mut val: Vec<usize> = idx[..val_count].to_vec();
    let mut train: Vec<usize> = idx[val_count..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Gradients one scan position contributes.
struct PositionGrads<P: Precision> {
    transmission: Option<Tensor<P>>,
    probe: Option<Tensor<P>>,
    dy: f64,
    dx: f64,
    loss: f64,
}

pub struct Engine<'d, P: Precision> {
    pub config: EngineConfig,
    pub dataset: &'d Dataset4D,
    pub model: ForwardModel<P>,
    measured: Vec<Tensor<P>>,
    mean_counts: f64,
    probe_radius_px: f64,
    config_hash: u64,
}

impl<'d, P: Precision> Engine<'d, P> {
    pub fn new(config: EngineConfig, dataset: &'d Dataset4D, config_hash: u64) -> Result<Self> {
        config.validate()?;
        let detector = dataset.geometry.detector;
        let model = ForwardModel::new(
            detector,
            dataset.object_plane,
            config.num_slices,
            config.slice_thickness_a,
            dataset.probe.energy_kev,
            dataset.sampling,
            config.band_limit,
        )?;
        let n = dataset.num_patterns();
        if n == 0 {
            return Err(PtychoError::data("dataset has no patterns"));
        }
        if dataset.probe.shape != detector.0 || detector.0 != detector.1 {
            return Err(PtychoError::config(
                "probe recipe shape must match the (square) detector grid",
            ));
        }
        let mut measured = Vec::with_capacity(n);
        let mut total = 0.0f64;
        for i in 0..n {
            let p = dataset.pattern(i)?;
            total += p.real()?.iter().map(|&x| x as f64).sum::<f64>();
            measured.push(p.cast::<P>());
        }
        let probe: ProbeState<f64> = dataset.probe.build(dataset.sampling)?;
        let probe_radius_px = probe_diameter_a(&probe) / 2.0 / dataset.sampling.0;
        Ok(Engine {
            config,
            dataset,
            model,
            measured,
            mean_counts: total / n as f64,
            probe_radius_px,
            config_hash,
        })
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn mean_counts(&self) -> f64 {
        self.mean_counts
    }

    /// Initial probe modes: the ideal probe from the dataset's optical
    /// metadata, scaled so predictions match the recorded count level,
    /// with weak secondary modes when more than one is requested.
    pub fn initial_probe(&self) -> Result<Tensor<P>> {
        let ideal: ProbeState<P> = self.dataset.probe.build(self.dataset.sampling)?;
        let m = self.config.probe_modes;
        let (h, w) = ideal.grid();
        let amp = P::of_f64(self.mean_counts.sqrt());
        let base = ideal.modes.complex()?;
        let mut modes = Vec::with_capacity(m * h * w);
        if m == 1 {
            modes.extend(base.iter().map(|z| z * amp));
        } else {
            let main = P::of_f64((0.9f64).sqrt()) * amp;
            let side = P::of_f64((0.1 / (m as f64 - 1.0)).sqrt()) * amp;
            modes.extend(base.iter().map(|z| z * main));
            for k in 1..m {
                let rolled = ideal.modes.roll_hw(k as i64, -(k as i64));
                modes.extend(rolled.complex()?.iter().map(|z| z * side));
            }
        }
        let stacked = Tensor::from_complex(vec![m, h, w], modes)?;
        if m > 1 {
            orthogonalize_modes(&stacked)
        } else {
            Ok(stacked)
        }
    }

    fn initial_object(&self) -> Tensor<P> {
        let (y, x) = self.dataset.object_plane;
        let z = self.config.num_slices;
        match self.config.object_kind {
            ObjectKind::ComplexTransmission => {
                let mut t = Tensor::zeros_complex(vec![z, y, x]);
                for v in t.complex_mut().unwrap() {
                    *v = num_complex::Complex::new(P::one(), P::zero());
                }
                t
            }
            ObjectKind::PurePhase | ObjectKind::Potential => Tensor::zeros_real(vec![z, y, x]),
        }
    }

    fn initial_positions(&self) -> Tensor<P> {
        let s = self.dataset.sampling;
        let v: Vec<P> = self
            .dataset
            .geometry
            .positions_a
            .iter()
            .flat_map(|p| [P::of_f64(p[0] / s.0), P::of_f64(p[1] / s.1)])
            .collect();
        Tensor::from_real(vec![self.dataset.geometry.len(), 2], v).unwrap()
    }

    /// Fresh pixelated state.
    pub fn init_pixelated(&self) -> Result<ReconState<P>> {
        let object = ObjectParams::Pixel(self.initial_object());
        let probe = ProbeParams::Pixel(self.initial_probe()?);
        self.init_state(object, probe, None)
    }

    fn init_state(
        &self,
        object: ObjectParams<P>,
        probe: ProbeParams<P>,
        positions: Option<Tensor<P>>,
    ) -> Result<ReconState<P>> {
        let positions_px = positions.unwrap_or_else(|| self.initial_positions());
        let initial_positions_px = {
            let v = positions_px.real()?;
            (0..v.len() / 2).map(|i| [v[2 * i].as_f64(), v[2 * i + 1].as_f64()]).collect()
        };
        let (train_idx, val_idx) = split_validation(
            self.dataset.num_patterns(),
            self.config.validation_fraction,
            self.config.seed,
        )?;
        let opt_object = match &object {
            ObjectParams::Pixel(t) => AdamState::new_like(&[t]),
            ObjectParams::Dgp { state, .. } => {
                let params: Vec<&Tensor<P>> =
                    state.unet.layers().iter().flat_map(|l| [&l.weight, &l.bias]).collect();
                AdamState::new_like(&params)
            }
        };
        let opt_probe = match &probe {
            ProbeParams::Pixel(t) => AdamState::new_like(&[t]),
            ProbeParams::Dgp { state, .. } => {
                let params: Vec<&Tensor<P>> =
                    state.unet.layers().iter().flat_map(|l| [&l.weight, &l.bias]).collect();
                AdamState::new_like(&params)
            }
        };
        let opt_positions = AdamState::new_like(&[&positions_px]);
        Ok(ReconState {
            object,
            probe,
            positions_px,
            initial_positions_px,
            opt_object,
            opt_probe,
            opt_positions,
            iteration: 0,
            history: Vec::new(),
            best_val: None,
            train_idx,
            val_idx,
            lr_scale: 1.0,
            seed: self.config.seed,
        })
    }

    /// Pixelated reconstruction over the configured stage plan.
    pub fn run_pixelated(&self, on_iter: &mut dyn FnMut(&ReconState<P>)) -> Result<ReconState<P>> {
        let mut state = self.init_pixelated()?;
        self.run(&mut state, on_iter)?;
        Ok(state)
    }

    /// DGP reconstruction. Missing pre-trained networks are produced
    /// internally: a short pixelated warm-up provides the anchors both
    /// autoencoders are pre-trained on.
    pub fn run_dgp(
        &self,
        pretrained_object: Option<DgpState<P>>,
        pretrained_probe: Option<DgpState<P>>,
        on_iter: &mut dyn FnMut(&ReconState<P>),
    ) -> Result<ReconState<P>> {
        let mut state = self.init_dgp(pretrained_object, pretrained_probe)?;
        self.run(&mut state, on_iter)?;
        Ok(state)
    }

    /// Build the DGP state (running warm-up and pre-training as needed)
    /// without iterating the main loop.
    pub fn init_dgp(
        &self,
        pretrained_object: Option<DgpState<P>>,
        pretrained_probe: Option<DgpState<P>>,
    ) -> Result<ReconState<P>> {
        let need_warmup = pretrained_object.is_none() || pretrained_probe.is_none();
        let (object_est, probe_est, positions) = if need_warmup {
            let mut warm_cfg = self.config.clone();
            warm_cfg.stages = vec![Stage {
                iterations: self.config.dgp.warmup_iters.max(1),
                lr_object: self.config.dgp.warmup_lr_object,
                lr_probe: self.config.dgp.warmup_lr_probe,
                ..Stage::default()
            }];
            warm_cfg.validation_fraction = 0.0;
            let warm = Engine::new(warm_cfg, self.dataset, self.config_hash)?;
            let state = warm.run_pixelated(&mut |_| {})?;
            let obj = match &state.object {
                ObjectParams::Pixel(t) => t.clone(),
                _ => unreachable!(),
            };
            let probe = match &state.probe {
                ProbeParams::Pixel(t) => t.clone(),
                _ => unreachable!(),
            };
            (obj, probe, Some(state.positions_px.clone()))
        } else {
            (self.initial_object(), self.initial_probe()?, None)
        };

        let object = match pretrained_object {
            Some(state) => {
                let scale = P::of_f64(anchor_scale(&object_est));
                ObjectParams::Dgp { state, scale }
            }
            None => {
                let scale = anchor_scale(&object_est);
                let anchor = scale_tensor(&object_est, P::of_f64(1.0 / scale));
                let realness = if self.config.object_kind.is_complex() {
                    Realness::Complex
                } else {
                    Realness::Real
                };
                let mut spec = UNetSpec::new(
                    self.config.dgp.object_depth,
                    self.config.dgp.filters,
                    self.config.num_slices,
                    realness,
                );
                if self.config.object_kind == ObjectKind::Potential {
                    spec.final_activation = self.config.dgp.final_activation;
                }
                let unet =
                    UNet::build(spec, stream_seed(self.config.seed, TAG_UNET_INIT, 0))?;
                let mut dgp = DgpState::new(unet);
                dgp.noise_sigma = self.config.dgp.noise_sigma;
                crate::dgp::pretrain_autoencoder(
                    &mut dgp,
                    &anchor,
                    self.config.dgp.pretrain_iters,
                    self.config.dgp.pretrain_lr,
                    stream_seed(self.config.seed, TAG_PRETRAIN_OBJECT, 0),
                )?;
                ObjectParams::Dgp { state: dgp, scale: P::of_f64(scale) }
            }
        };

        let probe = match pretrained_probe {
            Some(state) => {
                let scale = P::of_f64(anchor_scale(&probe_est));
                ProbeParams::Dgp { state, scale }
            }
            None => {
                let scale = anchor_scale(&probe_est);
                let anchor = scale_tensor(&probe_est, P::of_f64(1.0 / scale));
                let spec = UNetSpec::new(
                    self.config.dgp.probe_depth,
                    self.config.dgp.filters,
                    self.config.probe_modes,
                    Realness::Complex,
                );
                let unet =
                    UNet::build(spec, stream_seed(self.config.seed, TAG_UNET_INIT, 1))?;
                let mut dgp = DgpState::new(unet);
                dgp.noise_sigma = self.config.dgp.noise_sigma;
                crate::dgp::pretrain_autoencoder(
                    &mut dgp,
                    &anchor,
                    self.config.dgp.pretrain_iters,
                    self.config.dgp.pretrain_lr,
                    stream_seed(self.config.seed, TAG_PRETRAIN_PROBE, 0),
                )?;
                ProbeParams::Dgp { state: dgp, scale: P::of_f64(scale) }
            }
        };

        self.init_state(object, probe, positions)
    }

    /// Iterate the configured stage plan from wherever the state left
    /// off. Divergence rolls back to the last good in-memory checkpoint
    /// with halved learning rates, at most three times.
    pub fn run(
        &self,
        state: &mut ReconState<P>,
        on_iter: &mut dyn FnMut(&ReconState<P>),
    ) -> Result<()> {
        let total: usize = self.config.stages.iter().map(|s| s.iterations).sum();
        let start = Instant::now();
        let mut last_good: Option<ReconState<P>> = None;
        let mut rollbacks = 0usize;
        while (state.iteration as usize) < total {
            let stage = self.stage_at(state.iteration as usize);
            if state.iteration % 10 == 0 {
                last_good = Some(state.clone());
            }
            match self.iterate_once(state, &stage) {
                Ok(train) => {
                    let val = if state.val_idx.is_empty() {
                        None
                    } else {
                        let v = self.eval_loss(state, &stage, true)?;
                        if state.best_val.as_ref().map(|b| v < b.val_loss).unwrap_or(true) {
                            state.best_val = Some(BestCheckpoint {
                                iteration: state.iteration + 1,
                                val_loss: v,
                                object: state.object.clone(),
                                probe: state.probe.clone(),
                                positions_px: state.positions_px.clone(),
                            });
                        }
                        Some(v)
                    };
                    state.iteration += 1;
                    state.history.push(IterRecord {
                        iteration: state.iteration,
                        seconds: start.elapsed().as_secs_f64(),
                        train,
                        val,
                    });
                    on_iter(state);
                }
                Err(PtychoError::Divergence(msg)) => {
                    rollbacks += 1;
                    if rollbacks > 3 {
                        return Err(PtychoError::divergence(format!(
                            "aborting after {rollbacks} rollbacks: {msg}"
                        )));
                    }
                    let lr_scale = state.lr_scale * 0.5;
                    match last_good.take() {
                        Some(good) => *state = good,
                        None => {
                            return Err(PtychoError::divergence(format!(
                                "diverged with no checkpoint to roll back to: {msg}"
                            )))
                        }
                    }
                    state.lr_scale = lr_scale;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    pub fn stage_at(&self, iteration: usize) -> Stage {
        let mut acc = 0usize;
        for s in &self.config.stages {
            acc += s.iterations;
            if iteration < acc {
                return *s;
            }
        }
        *self.config.stages.last().unwrap()
    }

    /// Seeded random permutation of the train positions each epoch,
    /// consumed in batch-sized slices. Validation indices never appear.
    pub fn batch_for(&self, state: &ReconState<P>, iteration: u64) -> Vec<usize> {
        let train = &state.train_idx;
        let batch = self.config.batch_size.min(train.len());
        let per_epoch = train.len().div_ceil(batch);
        let epoch = iteration as usize / per_epoch;
        let slot = iteration as usize % per_epoch;
        let mut order: Vec<usize> = train.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(stream_seed(state.seed, TAG_SHUFFLE, epoch as u64));
        order.shuffle(&mut rng);
        let lo = slot * batch;
        let hi = (lo + batch).min(order.len());
        order[lo..hi].to_vec()
    }

    /// One optimization step over one batch. Returns the train loss
    /// (batch fidelity plus soft losses).
    fn iterate_once(&self, state: &mut ReconState<P>, stage: &Stage) -> Result<f64> {
        let batch = self.batch_for(state, state.iteration);
        let mut tape = Tape::new();

        // Object and probe nodes with straight-through constraint
        // projections.
        let mut obj_rng = ChaCha8Rng::seed_from_u64(stream_seed(
            state.seed,
            TAG_OBJECT_NOISE,
            state.iteration,
        ));
        let (object_node, object_pnodes) = match &state.object {
            ObjectParams::Pixel(t) => (tape.leaf(t.clone(), stage.learn_object), None),
            ObjectParams::Dgp { state: dgp, scale } => {
                let (out, nodes) = dgp.generate(&mut tape, true, stage.learn_object, &mut obj_rng)?;
                (tape.scale(out, *scale)?, Some(nodes))
            }
        };
        let object_node = if stage.tie_slices {
            let tied = tie_slices(tape.value(object_node))?;
            tape.straight_through(object_node, tied)?
        } else {
            object_node
        };

        let mut probe_rng = ChaCha8Rng::seed_from_u64(stream_seed(
            state.seed,
            TAG_PROBE_NOISE,
            state.iteration,
        ));
        let (probe_node, probe_pnodes) = match &state.probe {
            ProbeParams::Pixel(t) => (tape.leaf(t.clone(), stage.learn_probe), None),
            ProbeParams::Dgp { state: dgp, scale } => {
                let (out, nodes) =
                    dgp.generate(&mut tape, true, stage.learn_probe, &mut probe_rng)?;
                (tape.scale(out, *scale)?, Some(nodes))
            }
        };
        let probe_node = if stage.orthogonalize_probe {
            let ortho = orthogonalize_modes(tape.value(probe_node))?;
            tape.straight_through(probe_node, ortho)?
        } else {
            probe_node
        };

        // Soft losses on the constrained object.
        let mut soft_node: Option<NodeId> = None;
        if stage.lambda_xy > 0.0 || stage.lambda_z > 0.0 {
            let tv = tv_loss(&mut tape, object_node, stage.lambda_xy, stage.lambda_z)?;
            soft_node = Some(tv);
        }
        if stage.lambda_surf > 0.0 {
            let sz = surface_zero_loss(&mut tape, object_node, stage.lambda_surf)?;
            soft_node = Some(match soft_node {
                Some(prev) => tape.add(prev, sz)?,
                None => sz,
            });
        }

        let transmission = transmission_node(
            &mut tape,
            object_node,
            self.config.object_kind,
            self.dataset.probe.energy_kev,
        )?;

        // Per-position forward/backward on independent tapes.
        let trans_value = tape.value(transmission).clone();
        let probe_value = tape.value(probe_node).clone();
        let positions = state.positions_px.real()?;
        let sampling = self.dataset.sampling;
        let jobs: Vec<(usize, [f64; 2])> = batch
            .iter()
            .map(|&b| (b, [positions[2 * b].as_f64(), positions[2 * b + 1].as_f64()]))
            .collect();
        let inv_batch = 1.0 / jobs.len() as f64;
        let worker = |&(b, pos_px): &(usize, [f64; 2])| -> Result<PositionGrads<P>> {
            let pos_a = [pos_px[0] * sampling.0, pos_px[1] * sampling.1];
            let (crop, residual) = split_position(
                pos_a,
                sampling,
                self.dataset.object_plane,
                self.model.probe_grid,
            )?;
            let mut t = Tape::new();
            let trans_leaf = t.leaf(trans_value.clone(), true);
            let probe_leaf = t.leaf(probe_value.clone(), stage.learn_probe);
            let dy = t.leaf(Tensor::scalar(P::of_f64(residual.0)), stage.learn_positions);
            let dx = t.leaf(Tensor::scalar(P::of_f64(residual.1)), stage.learn_positions);
            let pred = self.model.intensity_node(&mut t, probe_leaf, trans_leaf, crop, dy, dx)?;
            let fid = fidelity_loss(&mut t, pred, &self.measured[b], stage.fidelity)?;
            let scaled = t.scale(fid, P::of_f64(inv_batch))?;
            let loss = t.value(fid).scalar_value()?.as_f64();
            t.backward(scaled)?;
            Ok(PositionGrads {
                transmission: t.grad(trans_leaf).cloned(),
                probe: t.grad(probe_leaf).cloned(),
                dy: t.grad(dy).map(|g| g.scalar_value().unwrap().as_f64()).unwrap_or(0.0),
                dx: t.grad(dx).map(|g| g.scalar_value().unwrap().as_f64()).unwrap_or(0.0),
                loss,
            })
        };

        let results: Vec<Result<PositionGrads<P>>> = if self.config.threads <= 1 {
            jobs.iter().map(worker).collect()
        } else {
            let threads = self.config.threads;
            let mut slots: Vec<Option<Result<PositionGrads<P>>>> =
                (0..jobs.len()).map(|_| None).collect();
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for (t_id, chunk) in slots.chunks_mut(jobs.len().div_ceil(threads)).enumerate() {
                    let jobs = &jobs;
                    let worker = &worker;
                    let base = t_id * jobs.len().div_ceil(threads);
                    handles.push(scope.spawn(move || {
                        for (off, slot) in chunk.iter_mut().enumerate() {
                            *slot = Some(worker(&jobs[base + off]));
                        }
                    }));
                }
                for h in handles {
                    h.join().expect("worker thread panicked");
                }
            });
            slots.into_iter().map(|s| s.unwrap()).collect()
        };

        // Ordered merge (batch index order) keeps results independent of
        // the thread count.
        let mut g_trans: Option<Tensor<P>> = None;
        let mut g_probe: Option<Tensor<P>> = None;
        let mut g_positions = Tensor::zeros_real(vec![positions.len() / 2, 2]);
        let mut fid_total = 0.0f64;
        for ((b, _), res) in jobs.iter().zip(results) {
            let pg = res?;
            fid_total += pg.loss * inv_batch;
            if let Some(gt) = pg.transmission {
                accumulate(&mut g_trans, gt);
            }
            if let Some(gp) = pg.probe {
                accumulate(&mut g_probe, gp);
            }
            if stage.learn_positions {
                let gp = g_positions.real_mut()?;
                gp[2 * b] = P::of_f64(pg.dy * sampling.0);
                gp[2 * b + 1] = P::of_f64(pg.dx * sampling.1);
            }
        }

        let soft_total = match soft_node {
            Some(n) => tape.value(n).scalar_value()?.as_f64(),
            None => 0.0,
        };
        let train_loss = fid_total + soft_total;
        if !train_loss.is_finite() {
            return Err(PtychoError::divergence(format!(
                "train loss non-finite at iteration {}",
                state.iteration
            )));
        }

        // Backward through the shared graph with the merged seeds.
        let mut seeds = Vec::new();
        if let Some(gt) = g_trans {
            seeds.push((transmission, gt));
        }
        if let Some(gp) = g_probe {
            if stage.learn_probe {
                seeds.push((probe_node, gp));
            }
        }
        if let Some(n) = soft_node {
            seeds.push((n, Tensor::scalar(P::one())));
        }
        tape.backward_seeded(seeds)?;

        // Optimizer steps per parameter group.
        // The gradient at a straight-through node equals the gradient at
        // the leaf feeding it (the leaf has no other consumers), so pixel
        // groups can read it from `object_node`/`probe_node` directly.
        if stage.learn_object {
            let hp = AdamParams::with_lr(stage.lr_object * state.lr_scale);
            match &mut state.object {
                ObjectParams::Pixel(t) => {
                    if let Some(g) = tape.grad(object_node) {
                        let g = g.clone();
                        state.opt_object.step(&mut [t], &[&g], &hp)?;
                    }
                }
                ObjectParams::Dgp { state: dgp, .. } => {
                    if let Some(nodes) = &object_pnodes {
                        dgp.unet.apply_grads(&tape, nodes, &mut state.opt_object, &hp)?;
                    }
                }
            }
        }
        if stage.learn_probe {
            let hp = AdamParams::with_lr(stage.lr_probe * state.lr_scale);
            match &mut state.probe {
                ProbeParams::Pixel(t) => {
                    if let Some(g) = tape.grad(probe_node) {
                        let g = g.clone();
                        state.opt_probe.step(&mut [t], &[&g], &hp)?;
                    }
                }
                ProbeParams::Dgp { state: dgp, .. } => {
                    if let Some(nodes) = &probe_pnodes {
                        dgp.unet.apply_grads(&tape, nodes, &mut state.opt_probe, &hp)?;
                    }
                }
            }
        }
        if stage.learn_positions {
            let hp = AdamParams::with_lr(stage.lr_positions * state.lr_scale);
            state.opt_positions.step(&mut [&mut state.positions_px], &[&g_positions], &hp)?;
            self.clamp_positions(state)?;
        }

        Ok(train_loss)
    }

    /// Keep learned positions within the probe radius of their start and
    /// inside the valid crop region.
    fn clamp_positions(&self, state: &mut ReconState<P>) -> Result<()> {
        let (oy, ox) = self.dataset.object_plane;
        let (ry, rx) = self.model.probe_grid;
        let lo_y = (ry / 2) as f64;
        let hi_y = oy as f64 - (ry - ry / 2) as f64;
        let lo_x = (rx / 2) as f64;
        let hi_x = ox as f64 - (rx - rx / 2) as f64;
        let radius = self.probe_radius_px;
        let init = state.initial_positions_px.clone();
        let v = state.positions_px.real_mut()?;
        for i in 0..init.len() {
            for (c, (lo, hi)) in [(0usize, (lo_y, hi_y)), (1, (lo_x, hi_x))] {
                let p0 = init[i][c];
                let mut p = v[2 * i + c].as_f64();
                p = p.clamp(p0 - radius, p0 + radius).clamp(lo, hi);
                v[2 * i + c] = P::of_f64(p);
            }
        }
        Ok(())
    }

    /// Forward-only loss over the validation (or train) set using the
    /// noiseless constrained parameters.
    pub fn eval_loss(&self, state: &ReconState<P>, stage: &Stage, validation: bool) -> Result<f64> {
        let idx = if validation { &state.val_idx } else { &state.train_idx };
        if idx.is_empty() {
            return Err(PtychoError::contract("no positions to evaluate"));
        }
        let object = state.object_values(stage.tie_slices)?;
        let probe = state.probe_values(stage.orthogonalize_probe)?;
        let positions = state.positions_px.real()?;
        let sampling = self.dataset.sampling;
        let mut total = 0.0f64;
        for &b in idx {
            let pos_a =
                [positions[2 * b].as_f64() * sampling.0, positions[2 * b + 1].as_f64() * sampling.1];
            let (crop, residual) =
                split_position(pos_a, sampling, self.dataset.object_plane, self.model.probe_grid)?;
            let mut t = Tape::new();
            let obj = t.constant(object.clone());
            let trans =
                transmission_node(&mut t, obj, self.config.object_kind, self.dataset.probe.energy_kev)?;
            let probe_leaf = t.constant(probe.clone());
            let dy = t.constant(Tensor::scalar(P::of_f64(residual.0)));
            let dx = t.constant(Tensor::scalar(P::of_f64(residual.1)));
            let pred = self.model.intensity_node(&mut t, probe_leaf, trans, crop, dy, dx)?;
            let fid = fidelity_loss(&mut t, pred, &self.measured[b], stage.fidelity)?;
            total += t.value(fid).scalar_value()?.as_f64();
        }
        Ok(total / idx.len() as f64)
    }
}

fn accumulate<P: Precision>(slot: &mut Option<Tensor<P>>, delta: Tensor<P>) {
    match slot {
        None => *slot = Some(delta),
        Some(acc) => match (acc.is_complex(), delta.is_complex()) {
            (false, false) => {
                for (a, b) in acc.real_mut().unwrap().iter_mut().zip(delta.real().unwrap()) {
                    *a += *b;
                }
            }
            (true, true) => {
                for (a, b) in acc.complex_mut().unwrap().iter_mut().zip(delta.complex().unwrap()) {
                    *a += *b;
                }
            }
            _ => unreachable!(),
        },
    }
}
