//! Lossless reconstruction-state snapshots in the shared container
//! format. Wall-clock seconds are deliberately excluded (they live in the
//! loss CSV); everything else — parameters, optimizer moments, counters,
//! loss history, split indices — round-trips bitwise, so restore-then-run
//! matches an uninterrupted run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dgp::{DgpState, UNet, UNetSpec};
use crate::engine::adam::AdamState;
use crate::engine::run::{IterRecord, ObjectParams, ProbeParams, ReconState};
use crate::error::{FormatError, PtychoError, Result};
use crate::io::container::Container;
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SnapshotMeta {
    kind: String,
    precision: String,
    object_mode: String,
    probe_mode: String,
    object_spec: Option<UNetSpec>,
    probe_spec: Option<UNetSpec>,
    object_scale: Option<f64>,
    probe_scale: Option<f64>,
    object_noise_sigma: Option<f64>,
    probe_noise_sigma: Option<f64>,
    iteration: u64,
    seed: u64,
    lr_scale: f64,
    adam_t: [u64; 3],
    config_hash: String,
}

fn add_index_section(c: &mut Container, name: &str, idx: &[usize]) {
    let v: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
    c.add_tensor(name, &Tensor::<f64>::from_real(vec![v.len()], v).unwrap());
}

fn read_index_section(c: &Container, name: &str) -> Result<Vec<usize>> {
    let t: Tensor<f64> = c.tensor(name)?;
    Ok(t.real()?.iter().map(|&x| x as usize).collect())
}

fn add_dgp_sections<P: Precision>(c: &mut Container, prefix: &str, dgp: &DgpState<P>) {
    for (i, layer) in dgp.unet.layers().iter().enumerate() {
        c.add_tensor(&format!("{prefix}/layer{i}/w"), &layer.weight);
        c.add_tensor(&format!("{prefix}/layer{i}/b"), &layer.bias);
    }
    if let Some(anchor) = dgp.anchor() {
        c.add_tensor(&format!("{prefix}/anchor"), anchor);
    }
}

fn load_dgp<P: Precision>(
    c: &Container,
    prefix: &str,
    spec: UNetSpec,
    noise_sigma: f64,
) -> Result<DgpState<P>> {
    let mut unet = UNet::<P>::build(spec, 0)?;
    for (i, layer) in unet.layers_mut().iter_mut().enumerate() {
        layer.weight = c.tensor(&format!("{prefix}/layer{i}/w"))?;
        layer.bias = c.tensor(&format!("{prefix}/layer{i}/b"))?;
    }
    let mut dgp = DgpState::new(unet);
    dgp.noise_sigma = noise_sigma;
    if c.section(&format!("{prefix}/anchor")).is_some() {
        dgp.set_anchor(c.tensor(&format!("{prefix}/anchor"))?)?;
    }
    Ok(dgp)
}

fn add_adam_sections<P: Precision>(c: &mut Container, prefix: &str, opt: &AdamState<P>) {
    for (name, tensor) in opt.export(prefix) {
        c.add_tensor(&name, &tensor);
    }
}

fn load_adam<P: Precision>(c: &Container, prefix: &str, t: u64, count: usize) -> Result<AdamState<P>> {
    let mut moments = Vec::with_capacity(count);
    for i in 0..count {
        let m = c.tensor(&format!("{prefix}/{i}/m"))?;
        let v = c.tensor(&format!("{prefix}/{i}/v"))?;
        moments.push((m, v));
    }
    Ok(AdamState::import(t, moments))
}

/// Serialize a reconstruction state. `config_hash` ties the snapshot to
/// the run configuration for provenance.
pub fn snapshot_to_container<P: Precision>(
    state: &ReconState<P>,
    config_hash: u64,
) -> Result<Container> {
    let meta = SnapshotMeta {
        kind: "snapshot".into(),
        precision: if P::REAL_DTYPE == crate::tensor::Dtype::Real32 { "f32" } else { "f64" }.into(),
        object_mode: match &state.object {
            ObjectParams::Pixel(_) => "pixel".into(),
            ObjectParams::Dgp { .. } => "dgp".into(),
        },
        probe_mode: match &state.probe {
            ProbeParams::Pixel(_) => "pixel".into(),
            ProbeParams::Dgp { .. } => "dgp".into(),
        },
        object_spec: match &state.object {
            ObjectParams::Dgp { state, .. } => Some(state.unet.spec),
            _ => None,
        },
        probe_spec: match &state.probe {
            ProbeParams::Dgp { state, .. } => Some(state.unet.spec),
            _ => None,
        },
        object_scale: match &state.object {
            ObjectParams::Dgp { scale, .. } => Some(scale.as_f64()),
            _ => None,
        },
        probe_scale: match &state.probe {
            ProbeParams::Dgp { scale, .. } => Some(scale.as_f64()),
            _ => None,
        },
        object_noise_sigma: match &state.object {
            ObjectParams::Dgp { state, .. } => Some(state.noise_sigma),
            _ => None,
        },
        probe_noise_sigma: match &state.probe {
            ProbeParams::Dgp { state, .. } => Some(state.noise_sigma),
            _ => None,
        },
        iteration: state.iteration,
        seed: state.seed,
        lr_scale: state.lr_scale,
        adam_t: [
            state.opt_object.timestep(),
            state.opt_probe.timestep(),
            state.opt_positions.timestep(),
        ],
        config_hash: format!("{config_hash:016x}"),
    };
    let mut c = Container::new(&meta)?;
    match &state.object {
        ObjectParams::Pixel(t) => c.add_tensor("object/pixel", t),
        ObjectParams::Dgp { state: dgp, .. } => add_dgp_sections(&mut c, "object/dgp", dgp),
    }
    match &state.probe {
        ProbeParams::Pixel(t) => c.add_tensor("probe/pixel", t),
        ProbeParams::Dgp { state: dgp, .. } => add_dgp_sections(&mut c, "probe/dgp", dgp),
    }
    c.add_tensor("positions", &state.positions_px);
    let init: Vec<f64> = state.initial_positions_px.iter().flat_map(|p| [p[0], p[1]]).collect();
    c.add_tensor(
        "positions/initial",
        &Tensor::<f64>::from_real(vec![init.len() / 2, 2], init).unwrap(),
    );
    add_adam_sections(&mut c, "adam/object", &state.opt_object);
    add_adam_sections(&mut c, "adam/probe", &state.opt_probe);
    add_adam_sections(&mut c, "adam/positions", &state.opt_positions);
    add_index_section(&mut c, "idx/train", &state.train_idx);
    add_index_section(&mut c, "idx/val", &state.val_idx);
    let train: Vec<f64> = state.history.iter().map(|r| r.train).collect();
    let val: Vec<f64> = state.history.iter().map(|r| r.val.unwrap_or(f64::NAN)).collect();
    c.add_tensor("history/train", &Tensor::<f64>::from_real(vec![train.len()], train).unwrap());
    c.add_tensor("history/val", &Tensor::<f64>::from_real(vec![val.len()], val).unwrap());
    Ok(c)
}

pub fn save_snapshot<P: Precision>(state: &ReconState<P>, config_hash: u64, path: &Path) -> Result<()> {
    snapshot_to_container(state, config_hash)?.save(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    spec: UNetSpec,
    noise_sigma: f64,
    scale: f64,
}

/// Standalone DGP weight checkpoint (same container format).
pub fn save_dgp_checkpoint<P: Precision>(
    dgp: &DgpState<P>,
    scale: f64,
    path: &Path,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "dgp-checkpoint".into(),
        spec: dgp.unet.spec,
        noise_sigma: dgp.noise_sigma,
        scale,
    };
    let mut c = Container::new(&meta)?;
    add_dgp_sections(&mut c, "dgp", dgp);
    c.save(path)
}

pub fn load_dgp_checkpoint<P: Precision>(path: &Path) -> Result<(DgpState<P>, f64)> {
    let c = Container::load(path)?;
    let meta: CheckpointMeta = c.meta()?;
    if meta.kind != "dgp-checkpoint" {
        return Err(FormatError::Malformed(format!(
            "not a dgp checkpoint (kind '{}')",
            meta.kind
        ))
        .into());
    }
    let dgp = load_dgp(&c, "dgp", meta.spec, meta.noise_sigma)?;
    Ok((dgp, meta.scale))
}

/// Rebuild a reconstruction state. The stored precision must match P so
/// the round trip stays bitwise.
pub fn restore_snapshot<P: Precision>(path: &Path) -> Result<(ReconState<P>, u64)> {
    let c = Container::load(path)?;
    let meta: SnapshotMeta = c.meta()?;
    if meta.kind != "snapshot" {
        return Err(FormatError::Malformed(format!("not a snapshot (kind '{}')", meta.kind)).into());
    }
    let want = if P::REAL_DTYPE == crate::tensor::Dtype::Real32 { "f32" } else { "f64" };
    if meta.precision != want {
        return Err(PtychoError::config(format!(
            "snapshot precision {} does not match engine precision {want}",
            meta.precision
        )));
    }
    let object = match meta.object_mode.as_str() {
        "pixel" => ObjectParams::Pixel(c.tensor("object/pixel")?),
        "dgp" => {
            let spec = meta
                .object_spec
                .ok_or_else(|| FormatError::Malformed("dgp snapshot without spec".into()))?;
            ObjectParams::Dgp {
                state: load_dgp(&c, "object/dgp", spec, meta.object_noise_sigma.unwrap_or(0.0))?,
                scale: P::of_f64(meta.object_scale.unwrap_or(1.0)),
            }
        }
        other => return Err(FormatError::Malformed(format!("object mode '{other}'")).into()),
    };
    let probe = match meta.probe_mode.as_str() {
        "pixel" => ProbeParams::Pixel(c.tensor("probe/pixel")?),
        "dgp" => {
            let spec = meta
                .probe_spec
                .ok_or_else(|| FormatError::Malformed("dgp snapshot without spec".into()))?;
            ProbeParams::Dgp {
                state: load_dgp(&c, "probe/dgp", spec, meta.probe_noise_sigma.unwrap_or(0.0))?,
                scale: P::of_f64(meta.probe_scale.unwrap_or(1.0)),
            }
        }
        other => return Err(FormatError::Malformed(format!("probe mode '{other}'")).into()),
    };
    let positions_px: Tensor<P> = c.tensor("positions")?;
    let init_t: Tensor<f64> = c.tensor("positions/initial")?;
    let iv = init_t.real()?;
    let initial_positions_px: Vec<[f64; 2]> =
        (0..iv.len() / 2).map(|i| [iv[2 * i], iv[2 * i + 1]]).collect();

    let object_count = match &object {
        ObjectParams::Pixel(_) => 1,
        ObjectParams::Dgp { state, .. } => 2 * state.unet.layers().len(),
    };
    let probe_count = match &probe {
        ProbeParams::Pixel(_) => 1,
        ProbeParams::Dgp { state, .. } => 2 * state.unet.layers().len(),
    };
    let opt_object = load_adam(&c, "adam/object", meta.adam_t[0], object_count)?;
    let opt_probe = load_adam(&c, "adam/probe", meta.adam_t[1], probe_count)?;
    let opt_positions = load_adam(&c, "adam/positions", meta.adam_t[2], 1)?;

    let train_idx = read_index_section(&c, "idx/train")?;
    let val_idx = read_index_section(&c, "idx/val")?;
    let train_hist: Tensor<f64> = c.tensor("history/train")?;
    let val_hist: Tensor<f64> = c.tensor("history/val")?;
    let history: Vec<IterRecord> = train_hist
        .real()?
        .iter()
        .zip(val_hist.real()?)
        .enumerate()
        .map(|(i, (&t, &v))| IterRecord {
            iteration: i as u64 + 1,
            seconds: 0.0,
            train: t,
            val: if v.is_nan() { None } else { Some(v) },
        })
        .collect();

    let config_hash = u64::from_str_radix(&meta.config_hash, 16)
        .map_err(|_| FormatError::Malformed("bad config hash".into()))?;

    Ok((
        ReconState {
            object,
            probe,
            positions_px,
            initial_positions_px,
            opt_object,
            opt_probe,
            opt_positions,
            iteration: meta.iteration,
            history,
            best_val: None,
            train_idx,
            val_idx,
            lr_scale: meta.lr_scale,
            seed: meta.seed,
        },
        config_hash,
    ))
}
