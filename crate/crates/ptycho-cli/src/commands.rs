use std::path::{Path, PathBuf};

use ptycho_core::engine::{
    load_dgp_checkpoint, restore_snapshot, save_dgp_checkpoint, save_snapshot, Engine,
    ObjectParams, ProbeParams, ReconState,
};
use ptycho_core::io::config::ReconMode;
use ptycho_core::io::pngout::{export_png, Contrast};
use ptycho_core::io::{read_dataset, write_dataset, write_loss_csv, Container, RunConfig};
use ptycho_core::metrics::{
    depth_profile, info_limit, power_spectrum, radial_profile, remove_plane_gauge, ssim, Image,
};
use ptycho_core::simdata::{
    make_bilayer_phantom, make_lattice_phantom, make_nanoparticle_phantom, simulate_dataset,
    Phantom,
};
use ptycho_core::tensor::Tensor;
use ptycho_core::{PtychoError, Result};

use super::Common;

type P = f32;

fn load_config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| PtychoError::config(format!("cannot read {}: {e}", path.display())))?,
        None => RunConfig::default().to_toml(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("simulate.seed={seed}"));
        overrides.push(format!("recon.seed={seed}"));
    }
    RunConfig::with_overrides(&base, &overrides)
}

fn ensure_out(common: &Common) -> Result<()> {
    std::fs::create_dir_all(&common.out)?;
    Ok(())
}

fn build_phantom(cfg: &RunConfig) -> Result<Phantom> {
    let s = &cfg.simulate;
    let sampling = (s.sampling_a, s.sampling_a);
    match s.phantom.as_str() {
        "nanoparticle" => make_nanoparticle_phantom(
            s.size,
            sampling,
            s.nanoparticle.radius_a,
            s.nanoparticle.substrate_rms,
            s.seed,
        ),
        "bilayer" => make_bilayer_phantom(
            s.size,
            sampling,
            s.bilayer.spacing_a,
            s.bilayer.twist_deg,
            s.bilayer.slices,
            s.bilayer.slice_thickness_a,
        ),
        "lattice" => make_lattice_phantom(s.size, sampling, s.lattice.spacing_a),
        other => Err(PtychoError::config(format!("unknown phantom '{other}'"))),
    }
}

pub fn simulate(common: Common) -> Result<()> {
    let cfg = load_config(&common)?;
    ensure_out(&common)?;
    let phantom = build_phantom(&cfg)?;
    let s = &cfg.simulate;
    let dataset = simulate_dataset(
        &phantom,
        s.probe,
        (s.scan.ny, s.scan.nx),
        (s.scan.step_a, s.scan.step_a),
        s.dose_option(),
        s.seed,
    )?;
    let path = common.out.join("dataset.p4ds");
    write_dataset(&dataset, cfg.hash(), &path)?;

    let truth = Image::project_volume(&phantom.object.data)?;
    export_truth_png(&truth, &cfg, &common.out.join("truth_phase.png"))?;
    println!(
        "wrote {} ({} patterns of {}x{}, dose {})",
        path.display(),
        dataset.num_patterns(),
        dataset.geometry.detector.0,
        dataset.geometry.detector.1,
        match dataset.dose {
            Some(d) => format!("{d} e/A^2"),
            None => "noiseless".into(),
        }
    );
    Ok(())
}

fn export_truth_png(img: &Image, cfg: &RunConfig, path: &Path) -> Result<()> {
    export_png(
        &img.data,
        img.h,
        img.w,
        Contrast::Percentile { lo: cfg.export.percentile_lo, hi: cfg.export.percentile_hi },
        path,
    )?;
    Ok(())
}

pub fn pretrain(common: Common, data: PathBuf) -> Result<()> {
    let cfg = load_config(&common)?;
    ensure_out(&common)?;
    let dataset = read_dataset(&data)?;
    ptycho_core::tensor::set_compute_threads(cfg.recon.threads);
    let engine: Engine<P> = Engine::new(cfg.engine_config(), &dataset, cfg.hash())?;
    let state = engine.init_dgp(None, None)?;
    let (obj_path, probe_path) =
        (common.out.join("object_dgp.p4ds"), common.out.join("probe_dgp.p4ds"));
    match &state.object {
        ObjectParams::Dgp { state: dgp, scale } => {
            save_dgp_checkpoint(dgp, scale.to_owned() as f64, &obj_path)?
        }
        _ => unreachable!(),
    }
    match &state.probe {
        ProbeParams::Dgp { state: dgp, scale } => {
            save_dgp_checkpoint(dgp, scale.to_owned() as f64, &probe_path)?
        }
        _ => unreachable!(),
    }
    println!("wrote {} and {}", obj_path.display(), probe_path.display());
    Ok(())
}

pub fn recon(
    common: Common,
    data: PathBuf,
    mode: Option<String>,
    object_dgp: Option<PathBuf>,
    probe_dgp: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut common = common;
    if let Some(m) = mode {
        common.overrides.push(format!("recon.mode={m}"));
    }
    let cfg = load_config(&common)?;
    ensure_out(&common)?;
    let dataset = read_dataset(&data)?;
    ptycho_core::tensor::set_compute_threads(cfg.recon.threads);
    let engine: Engine<P> = Engine::new(cfg.engine_config(), &dataset, cfg.hash())?;

    let snapshot_every = cfg.recon.snapshot_every;
    let out = common.out.clone();
    let hash = cfg.hash();
    let export_cfg = cfg.export;
    let mut on_iter = move |state: &ReconState<P>| {
        if snapshot_every > 0 && state.iteration % snapshot_every as u64 == 0 {
            let snap = out.join(format!("snap_{:06}.p4ds", state.iteration));
            if let Err(e) = save_snapshot(state, hash, &snap) {
                eprintln!("warning: snapshot failed: {e}");
            }
            if let Ok(obj) = state.object_values(false) {
                if let Ok(img) = Image::project_volume(&obj) {
                    let png = out.join(format!("phase_{:06}.png", state.iteration));
                    let _ = export_png(
                        &img.data,
                        img.h,
                        img.w,
                        Contrast::Percentile {
                            lo: export_cfg.percentile_lo,
                            hi: export_cfg.percentile_hi,
                        },
                        &png,
                    );
                }
            }
        }
    };

    let state = match resume {
        Some(path) => {
            let (mut state, _hash) = restore_snapshot::<P>(&path)?;
            engine.run(&mut state, &mut on_iter)?;
            state
        }
        None => match cfg.recon.mode {
            ReconMode::Pixelated => engine.run_pixelated(&mut on_iter)?,
            ReconMode::Dgp => {
                let object = match &object_dgp {
                    Some(p) => Some(load_dgp_checkpoint::<P>(p)?.0),
                    None => None,
                };
                let probe = match &probe_dgp {
                    Some(p) => Some(load_dgp_checkpoint::<P>(p)?.0),
                    None => None,
                };
                engine.run_dgp(object, probe, &mut on_iter)?
            }
        },
    };

    save_snapshot(&state, hash, &common.out.join("final.p4ds"))?;
    let rows: Vec<(usize, f64, f64, Option<f64>)> = state
        .history
        .iter()
        .map(|r| (r.iteration as usize, r.seconds, r.train, r.val))
        .collect();
    write_loss_csv(&common.out.join("loss.csv"), &rows)?;

    let obj = state.object_values(false)?;
    let img = Image::project_volume(&obj)?;
    export_png(
        &img.data,
        img.h,
        img.w,
        Contrast::Percentile { lo: cfg.export.percentile_lo, hi: cfg.export.percentile_hi },
        &common.out.join("phase_final.png"),
    )?;

    let last = state.history.last();
    println!(
        "finished at iteration {} (train loss {:.4e}{})",
        state.iteration,
        last.map(|r| r.train).unwrap_or(f64::NAN),
        match state.best_val.as_ref() {
            Some(b) => format!(", best validation {:.4e} at iteration {}", b.val_loss, b.iteration),
            None => String::new(),
        }
    );
    Ok(())
}

pub fn metrics(common: Common, data: PathBuf, recon: PathBuf) -> Result<()> {
    let cfg = load_config(&common)?;
    ensure_out(&common)?;
    let dataset = read_dataset(&data)?;
    let (state, _) = restore_snapshot::<P>(&recon)?;

    let obj = state.object_values(false)?;
    let recon_img = Image::project_volume(&obj)?;
    let mut rows: Vec<(String, String)> = Vec::new();

    if let Some(truth) = &dataset.truth {
        let truth_img = Image::project_volume(&truth.data)?;
        if truth_img.h == recon_img.h && truth_img.w == recon_img.w {
            let corrected = remove_plane_gauge(&recon_img, &truth_img)?;
            let range = truth_img.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - truth_img.data.iter().cloned().fold(f64::INFINITY, f64::min);
            let score = ssim(&corrected, &truth_img, cfg.metrics.ssim_window, Some(range))?;
            rows.push(("ssim_vs_truth".into(), format!("{score:.6}")));
        }
    }

    let spectrum = power_spectrum(&recon_img);
    let log_spec: Vec<f64> = spectrum.data.iter().map(|&v| (v + 1e-30).log10()).collect();
    export_png(
        &log_spec,
        spectrum.h,
        spectrum.w,
        Contrast::Percentile { lo: 1.0, hi: 99.9 },
        &common.out.join("power_spectrum.png"),
    )?;
    let profile = radial_profile(&spectrum, dataset.sampling);
    let mut csv = String::from("k_inv_a,power,background,net\n");
    for i in 0..profile.k.len() {
        csv.push_str(&format!(
            "{:.6},{:.8e},{:.8e},{:.8e}\n",
            profile.k[i], profile.power[i], profile.background[i], profile.net[i]
        ));
    }
    std::fs::write(common.out.join("radial_profile.csv"), csv)?;
    match info_limit(&profile) {
        Some(limit) => rows.push(("info_limit_a".into(), format!("{limit:.4}"))),
        None => rows.push(("info_limit_a".into(), "unresolved".into())),
    }

    if obj.shape()[0] > 1 {
        let (h, w) = (obj.shape()[1], obj.shape()[2]);
        let profile = depth_profile(&obj, (h / 4, w / 4, h / 2, w / 2))?;
        let mut csv = String::from("slice,density\n");
        for (i, d) in profile.per_slice.iter().enumerate() {
            csv.push_str(&format!("{i},{d:.8e}\n"));
        }
        std::fs::write(common.out.join("depth_profile.csv"), csv)?;
        rows.push((
            "depth_centroids".into(),
            profile
                .centroids
                .iter()
                .map(|c| format!("{c:.2}"))
                .collect::<Vec<_>>()
                .join(";"),
        ));
    }

    if let Some(r) = state.history.last() {
        rows.push(("final_train_loss".into(), format!("{:.6e}", r.train)));
    }
    let mut csv = String::from("metric,value\n");
    for (k, v) in &rows {
        csv.push_str(&format!("{k},{v}\n"));
        println!("{k} = {v}");
    }
    std::fs::write(common.out.join("metrics.csv"), csv)?;
    Ok(())
}

pub fn export(common: Common, input: PathBuf, section: Option<String>) -> Result<()> {
    let cfg = load_config(&common)?;
    ensure_out(&common)?;
    let contrast =
        Contrast::Percentile { lo: cfg.export.percentile_lo, hi: cfg.export.percentile_hi };

    let images: Vec<(String, Image)> = match &section {
        Some(name) => {
            let c = Container::load(&input)?;
            let t: Tensor<f64> = c.tensor(name)?;
            section_images(name, &t)?
        }
        None => {
            // Default view: the reconstructed object phase of a snapshot,
            // or a dataset's ground-truth phase / first pattern.
            match restore_snapshot::<P>(&input) {
                Ok((state, _)) => {
                    let obj = state.object_values(false)?;
                    vec![("object_phase".into(), Image::project_volume(&obj)?)]
                }
                Err(_) => {
                    let ds = read_dataset(&input)?;
                    match &ds.truth {
                        Some(t) => vec![("truth_phase".into(), Image::project_volume(&t.data)?)],
                        None => {
                            let p = ds.pattern(0)?;
                            let (h, w) = (p.shape()[0], p.shape()[1]);
                            let data = p.real()?.iter().map(|&x| x as f64).collect();
                            vec![("pattern_000000".into(), Image::new(h, w, data)?)]
                        }
                    }
                }
            }
        }
    };

    for (name, img) in images {
        let safe = name.replace('/', "_");
        let (_, applied) = ptycho_core::io::pngout::render_png(&img.data, img.h, img.w, contrast)?;
        // Contrast limits recorded in the file name and the sidecar.
        let file = common
            .out
            .join(format!("{safe}_min{:.3e}_max{:.3e}.png", applied.min, applied.max));
        export_png(&img.data, img.h, img.w, contrast, &file)?;
        println!("wrote {}", file.display());
    }
    Ok(())
}

fn section_images(name: &str, t: &Tensor<f64>) -> Result<Vec<(String, Image)>> {
    let shape = t.shape();
    let (h, w) = match shape.len() {
        2 => (shape[0], shape[1]),
        3 => (shape[1], shape[2]),
        _ => return Err(PtychoError::shape(format!("cannot render shape {shape:?}"))),
    };
    if t.is_complex() {
        let v = t.complex()?;
        let lead = v.len() / (h * w);
        let mut amp = vec![0.0; h * w];
        let mut phase = vec![0.0; h * w];
        for (i, z) in v.iter().enumerate() {
            amp[i % (h * w)] += z.norm() / lead as f64;
            phase[i % (h * w)] += z.arg() / lead as f64;
        }
        Ok(vec![
            (format!("{name}_amplitude"), Image::new(h, w, amp)?),
            (format!("{name}_phase"), Image::new(h, w, phase)?),
        ])
    } else {
        let v = t.real()?;
        let lead = v.len() / (h * w);
        let mut mean = vec![0.0; h * w];
        for (i, &x) in v.iter().enumerate() {
            mean[i % (h * w)] += x / lead as f64;
        }
        Ok(vec![(name.to_string(), Image::new(h, w, mean)?)])
    }
}

