//! Batch sampling over a phantom cohort: output counts and tagging, the
//! timing CSV, failure isolation, rerun byte-identity, and the network
//! evaluation budget under guidance.

use mriqt_core::io::load_volume;
use mriqt_core::Modality;
use mriqt_denoiser::{Denoiser, DenoiserConfig};
use mriqt_diffusion::{make_schedule, ScheduleKind};
use mriqt_phantom::{make_dataset, DatasetSpec};
use mriqt_pipeline::{batch_sample, sample, SamplerConfig};
use std::path::Path;

/// Two paired subjects plus one uLF-only: three inputs for the sampler.
fn tiny_dataset(dir: &Path) {
    let spec = DatasetSpec {
        n_paired: 2,
        n_hf_only: 0,
        n_ulf_only: 1,
        shape: [16, 16, 16],
        val_frac: 0.0,
        test_frac: 0.0,
        seed: 23,
        ..Default::default()
    };
    make_dataset(&spec, dir).unwrap();
}

fn tiny_model(seed: u64) -> Denoiser {
    let mut m = Denoiser::new(
        DenoiserConfig {
            base_channels: 4,
            channel_mults: vec![1, 2],
            attn_at_bottleneck: false,
            time_embed_dim: 8,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    m.jitter_params(0.02, seed ^ 1);
    m
}

fn sampler_cfg(k: usize) -> SamplerConfig {
    let mut cfg = SamplerConfig::new(k);
    cfg.seed = 40;
    cfg
}

#[test]
fn manifest_inputs_map_to_outputs_and_timing_rows() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let sch = make_schedule(ScheduleKind::Cosine, 12).unwrap();
    let model = tiny_model(1);
    let out_dir = dir.path().join("gen");

    let outcome = batch_sample(
        &model,
        &dir.path().join("manifest_train.json"),
        &sch,
        &sampler_cfg(4),
        &out_dir,
    )
    .unwrap();

    assert_eq!(outcome.outputs.len(), 3);
    assert!(outcome.failures.is_empty());
    assert!(!out_dir.join("failures.json").exists());

    for (path, sub) in outcome.outputs.iter().zip(["sub-0001", "sub-0002", "sub-0003"]) {
        assert_eq!(path.file_name().unwrap().to_str().unwrap(), format!("{sub}_gen.rvol"));
        let v = load_volume(path).unwrap();
        assert_eq!(v.modality(), Modality::Generated);
        assert_eq!(v.subject_id(), sub);
        assert_eq!(v.shape(), [16, 16, 16]);
    }

    let timing = std::fs::read_to_string(&outcome.timing_csv).unwrap();
    let lines: Vec<&str> = timing.lines().collect();
    assert_eq!(lines[0], "subject_id,k,seconds,voxels");
    assert_eq!(lines.len(), 4);
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[1], "4");
        assert!(cols[2].parse::<f64>().unwrap() >= 0.0);
        assert_eq!(cols[3], "4096");
    }

    let entries: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("generated.json")).unwrap())
            .unwrap();
    assert_eq!(entries.as_array().unwrap().len(), 3);
}

#[test]
fn a_corrupt_volume_fails_alone() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    // Truncate the second subject's uLF file to garbage.
    std::fs::write(
        dir.path().join("sub-0002/anat/sub-0002_ulf.rvol"),
        b"not a volume",
    )
    .unwrap();
    let sch = make_schedule(ScheduleKind::Cosine, 12).unwrap();
    let model = tiny_model(1);
    let out_dir = dir.path().join("gen");

    let outcome = batch_sample(
        &model,
        &dir.path().join("manifest_train.json"),
        &sch,
        &sampler_cfg(4),
        &out_dir,
    )
    .unwrap();

    assert_eq!(outcome.outputs.len(), 2);
    assert_eq!(outcome.failures.len(), 1);
    assert_eq!(outcome.failures[0].subject_id, "sub-0002");
    let persisted: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("failures.json")).unwrap())
            .unwrap();
    assert_eq!(persisted.as_array().unwrap().len(), 1);
    // The healthy volumes still produced files.
    assert!(out_dir.join("sub-0001_gen.rvol").exists());
    assert!(out_dir.join("sub-0003_gen.rvol").exists());
}

#[test]
fn reruns_are_byte_identical_outside_timing() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let sch = make_schedule(ScheduleKind::Cosine, 12).unwrap();
    let model = tiny_model(1);
    let manifest = dir.path().join("manifest_train.json");
    let cfg = sampler_cfg(4);

    let a = batch_sample(&model, &manifest, &sch, &cfg, &dir.path().join("a")).unwrap();
    let b = batch_sample(&model, &manifest, &sch, &cfg, &dir.path().join("b")).unwrap();
    for (pa, pb) in a.outputs.iter().zip(&b.outputs) {
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }
    assert_eq!(
        std::fs::read(dir.path().join("a/generated.json")).unwrap(),
        std::fs::read(dir.path().join("b/generated.json")).unwrap()
    );

    // A different base seed changes the generated bytes.
    let mut other = cfg.clone();
    other.seed ^= 1;
    let c = batch_sample(&model, &manifest, &sch, &other, &dir.path().join("c")).unwrap();
    assert_ne!(
        std::fs::read(&a.outputs[0]).unwrap(),
        std::fs::read(&c.outputs[0]).unwrap()
    );
}

#[test]
fn guided_sampling_spends_two_evals_per_step_and_one_unguided() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let cond = load_volume(dir.path().join("sub-0001/anat/sub-0001_ulf.rvol")).unwrap();
    let sch = make_schedule(ScheduleKind::Cosine, 12).unwrap();
    let model = tiny_model(1);
    let k = 5;

    let mut cfg = sampler_cfg(k);
    cfg.guidance.weight = 2.0;
    model.reset_eval_count();
    sample(&model, &cond, &sch, &cfg).unwrap();
    assert_eq!(model.eval_count(), 2 * k as u64);

    cfg.guidance.weight = 1.0;
    model.reset_eval_count();
    sample(&model, &cond, &sch, &cfg).unwrap();
    assert_eq!(model.eval_count(), k as u64);
}
