//! Dataset container layout: intensities as float32, positions as
//! float64, ground truth embedded for synthetic data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FormatError, Result};
use crate::physics::{ObjectKind, ObjectVolume, ScanGeometry};
use crate::simdata::{Dataset4D, ProbeRecipe};
use crate::tensor::{Dtype, Tensor};

use super::container::Container;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub label: String,
    pub object_plane: (usize, usize),
    pub sampling: (f64, f64),
    pub probe: ProbeRecipe,
    pub num_slices: usize,
    pub slice_thickness_a: f64,
    pub dose: Option<f64>,
    pub seed: u64,
    pub scan_shape: (usize, usize),
    pub step_a: (f64, f64),
    pub detector: (usize, usize),
    pub truth_kind: Option<String>,
    pub units: UnitBlock,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitBlock {
    pub positions: String,
    pub sampling: String,
    pub dose: String,
}

impl Default for UnitBlock {
    fn default() -> Self {
        UnitBlock {
            positions: "angstrom".into(),
            sampling: "angstrom/pixel".into(),
            dose: "electrons/angstrom^2".into(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

fn kind_tag(kind: ObjectKind) -> &'static str {
    match kind {
        ObjectKind::ComplexTransmission => "complex",
        ObjectKind::PurePhase => "pure-phase",
        ObjectKind::Potential => "potential",
    }
}

fn kind_from_tag(tag: &str) -> Result<ObjectKind> {
    match tag {
        "complex" => Ok(ObjectKind::ComplexTransmission),
        "pure-phase" => Ok(ObjectKind::PurePhase),
        "potential" => Ok(ObjectKind::Potential),
        other => Err(FormatError::Malformed(format!("unknown truth kind '{other}'")).into()),
    }
}

/// Serialize a dataset into a container. Intensities are stored float32
/// and positions float64; the config hash travels in provenance.
pub fn dataset_to_container(ds: &Dataset4D, config_hash: u64) -> Result<Container> {
    let meta = DatasetMeta {
        kind: "dataset".into(),
        label: ds.label.clone(),
        object_plane: ds.object_plane,
        sampling: ds.sampling,
        probe: ds.probe,
        num_slices: ds.num_slices,
        slice_thickness_a: ds.slice_thickness_a,
        dose: ds.dose,
        seed: ds.seed,
        scan_shape: ds.scan_shape,
        step_a: ds.step_a,
        detector: ds.geometry.detector,
        truth_kind: ds.truth.as_ref().map(|t| kind_tag(t.kind).to_string()),
        units: UnitBlock::default(),
        provenance: Provenance { seed: ds.seed, config_hash: format!("{config_hash:016x}") },
    };
    let mut c = Container::new(&meta)?;
    c.add_tensor_as("patterns", &ds.patterns, Dtype::Real32);
    let positions = Tensor::from_real(
        vec![ds.geometry.len(), 2],
        ds.geometry.positions_a.iter().flat_map(|p| [p[0], p[1]]).collect::<Vec<f64>>(),
    )?;
    c.add_tensor_as("positions", &positions, Dtype::Real64);
    if let Some(truth) = &ds.truth {
        c.add_tensor("truth/data", &truth.data);
    }
    Ok(c)
}

pub fn dataset_from_container(c: &Container) -> Result<Dataset4D> {
    let meta: DatasetMeta = c.meta()?;
    let patterns: Tensor<f32> = c.tensor("patterns")?;
    let positions: Tensor<f64> = c.tensor("positions")?;
    let pos = positions.real()?;
    let n = positions.shape()[0];
    let positions_a: Vec<[f64; 2]> = (0..n).map(|i| [pos[2 * i], pos[2 * i + 1]]).collect();
    let truth = match &meta.truth_kind {
        Some(tag) => {
            let kind = kind_from_tag(tag)?;
            let data: Tensor<f64> = c.tensor("truth/data")?;
            Some(ObjectVolume::new(kind, data, meta.slice_thickness_a, meta.sampling)?)
        }
        None => None,
    };
    Ok(Dataset4D {
        patterns,
        geometry: ScanGeometry { positions_a, detector: meta.detector },
        object_plane: meta.object_plane,
        sampling: meta.sampling,
        probe: meta.probe,
        num_slices: meta.num_slices,
        slice_thickness_a: meta.slice_thickness_a,
        dose: meta.dose,
        seed: meta.seed,
        scan_shape: meta.scan_shape,
        step_a: meta.step_a,
        truth,
        label: meta.label,
    })
}

pub fn write_dataset(ds: &Dataset4D, config_hash: u64, path: &Path) -> Result<()> {
    dataset_to_container(ds, config_hash)?.save(path)
}

pub fn read_dataset(path: &Path) -> Result<Dataset4D> {
    dataset_from_container(&Container::load(path)?)
}
