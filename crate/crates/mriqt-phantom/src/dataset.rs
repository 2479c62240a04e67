//! Dataset assembly: generates a cohort of phantom subjects, degrades the
//! paired and uLF-only ones, writes volumes in the repo raw format under
//! BIDS-inspired `sub-XXXX/anat/` directories, and emits one manifest per
//! split.
//!
//! Subjects are independent: every subject derives its own seed streams
//! from the dataset seed, so generation parallelizes over subjects and the
//! result is byte-identical regardless of worker count.

use crate::degrade::{degrade_reference, DegradeConfig};
use crate::error::{PhantomError, Result};
use crate::generate::generate_hf;
use crate::spec::{lesion_delta_for_class, LesionSpec, PhantomSpec, N_LESION_CLASSES};
use mriqt_core::io::save_volume;
use mriqt_core::manifest::{
    validate_disjoint_splits, DatasetManifest, PairedEntry, SingleEntry, Split,
};
use mriqt_core::rng::{mix_seed, seeded_rng};
use mriqt_core::{Modality, VolumeGrid};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Base lesion placement, jittered per subject. The norm of the jittered
/// center plus the jittered radius stays at most ~0.62, well inside the
/// head. The radius floor matters: at 16-voxel resolution the smallest
/// jittered radius is still ~1.89 voxels, which covers at least 32 voxel
/// centers wherever the sphere lands, so a 1st/99th-percentile statistic
/// over the ~1100 head voxels always reaches into the lesion.
const LESION_CENTER: [f64; 3] = [0.12, -0.08, 0.05];
const LESION_CENTER_JITTER: f64 = 0.06;
const LESION_RADIUS_FRAC: f64 = 0.34;
const LESION_RADIUS_JITTER: f64 = 0.02;
/// Below a quarter of the smallest inter-class level gap (0.06), so
/// jittered intensities never cross class bands.
const LESION_DELTA_JITTER: f64 = 0.015;

/// Cohort description: subject counts per pairing category, phantom and
/// degradation parameters, and split fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_paired: usize,
    pub n_hf_only: usize,
    pub n_ulf_only: usize,
    pub shape: [usize; 3],
    pub n_tissue_shells: usize,
    pub hf_noise_sigma: f64,
    pub degrade: DegradeConfig,
    /// Fraction of each category assigned to the validation split.
    pub val_frac: f64,
    /// Fraction of each category assigned to the test split.
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_paired: 40,
            n_hf_only: 80,
            n_ulf_only: 20,
            shape: [16, 16, 16],
            n_tissue_shells: 4,
            hf_noise_sigma: 0.01,
            degrade: DegradeConfig::default(),
            val_frac: 0.1,
            test_frac: 0.2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("val_frac", self.val_frac), ("test_frac", self.test_frac)] {
            if !f.is_finite() || !(0.0..=1.0).contains(&f) {
                return Err(PhantomError::InvalidSpec(format!(
                    "{name} {f} outside [0, 1]"
                )));
            }
        }
        if self.val_frac + self.test_frac > 1.0 {
            return Err(PhantomError::InvalidSpec(format!(
                "val_frac + test_frac = {} exceeds 1",
                self.val_frac + self.test_frac
            )));
        }
        self.degrade.validate()
    }
}

/// The three split manifests written by [`make_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetSet {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

fn subject_id(index: usize) -> String {
    format!("sub-{:04}", index + 1)
}

/// One generated subject, before writing.
struct SubjectOut {
    index: usize,
    class: u8,
    hf: Option<VolumeGrid>,
    ulf: Option<VolumeGrid>,
}

/// Which files a subject gets: (high-field, low-field).
fn category(spec: &DatasetSpec, index: usize) -> (bool, bool) {
    if index < spec.n_paired {
        (true, true)
    } else if index < spec.n_paired + spec.n_hf_only {
        (true, false)
    } else {
        (false, true)
    }
}

/// Generates one subject. Seed streams per subject: `4i` drives the
/// phantom itself, `4i+1` the lesion placement jitter, `4i+2` the scanner
/// noise, leaving `4i+3` spare; distinct streams keep the stages
/// independent of each other and of the subject count.
fn build_subject(spec: &DatasetSpec, index: usize) -> Result<SubjectOut> {
    let class = (index % N_LESION_CLASSES as usize) as u8;
    let mut jit = seeded_rng(mix_seed(spec.seed, (4 * index + 1) as u64));
    let lesion = LesionSpec {
        center: [
            LESION_CENTER[0] + jit.gen_range(-LESION_CENTER_JITTER..=LESION_CENTER_JITTER),
            LESION_CENTER[1] + jit.gen_range(-LESION_CENTER_JITTER..=LESION_CENTER_JITTER),
            LESION_CENTER[2] + jit.gen_range(-LESION_CENTER_JITTER..=LESION_CENTER_JITTER),
        ],
        radius_frac: LESION_RADIUS_FRAC
            + jit.gen_range(-LESION_RADIUS_JITTER..=LESION_RADIUS_JITTER),
        delta: lesion_delta_for_class(class)?
            + jit.gen_range(-LESION_DELTA_JITTER..=LESION_DELTA_JITTER),
        class,
    };
    let phantom = PhantomSpec {
        shape: spec.shape,
        n_tissue_shells: spec.n_tissue_shells,
        lesion: Some(lesion),
        noise_sigma: spec.hf_noise_sigma,
        seed: mix_seed(spec.seed, (4 * index) as u64),
    };
    let sid = subject_id(index);
    let generated = generate_hf(&phantom)?;
    let hf = VolumeGrid::new(
        generated.data().to_vec(),
        spec.shape,
        [1.0; 3],
        Modality::HF,
        &sid,
    )?;

    let (want_hf, want_ulf) = category(spec, index);
    let ulf = if want_ulf {
        let mut noise = seeded_rng(mix_seed(spec.seed, (4 * index + 2) as u64));
        Some(degrade_reference(&hf, &spec.degrade, &mut noise)?)
    } else {
        None
    };
    Ok(SubjectOut {
        index,
        class,
        hf: want_hf.then_some(hf),
        ulf,
    })
}

/// Shuffles each pairing category independently and deals out val/test by
/// rounded fraction, remainder to train. Returns the split per subject.
fn assign_splits(spec: &DatasetSpec, total: usize) -> Vec<Split> {
    let mut splits = vec![Split::Train; total];
    let bounds = [
        (0, spec.n_paired),
        (spec.n_paired, spec.n_paired + spec.n_hf_only),
        (spec.n_paired + spec.n_hf_only, total),
    ];
    for (cat, &(lo, hi)) in bounds.iter().enumerate() {
        let mut idx: Vec<usize> = (lo..hi).collect();
        let n = idx.len();
        let mut rng = seeded_rng(mix_seed(spec.seed, (4 * total + 7 + cat) as u64));
        idx.shuffle(&mut rng);
        let n_val = ((spec.val_frac * n as f64).round() as usize).min(n);
        let n_test = ((spec.test_frac * n as f64).round() as usize).min(n - n_val);
        for (pos, &i) in idx.iter().enumerate() {
            splits[i] = if pos < n_val {
                Split::Val
            } else if pos < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    splits
}

/// Generates the full cohort under `out_dir` and writes
/// `manifest_train.json`, `manifest_val.json`, and `manifest_test.json`
/// beside the subject directories. Volume paths inside the manifests are
/// relative to `out_dir`. Byte-identical for a given spec.
pub fn make_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetSet> {
    spec.validate()?;
    let total = spec.n_paired + spec.n_hf_only + spec.n_ulf_only;

    let mut outs: Vec<Option<SubjectOut>> = Vec::new();
    outs.resize_with(total, || None);
    if total > 0 {
        // Workers stride over subject indices; per-subject seed streams
        // make the result independent of the worker count.
        let workers = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(total);
        let chunks: Vec<Result<Vec<SubjectOut>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        (w..total)
                            .step_by(workers)
                            .map(|i| build_subject(spec, i))
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("phantom worker panicked"))
                .collect()
        });
        for chunk in chunks {
            for subject in chunk? {
                let slot = subject.index;
                outs[slot] = Some(subject);
            }
        }
    }

    let splits = assign_splits(spec, total);
    let mut train = DatasetManifest::empty(Split::Train);
    let mut val = DatasetManifest::empty(Split::Val);
    let mut test = DatasetManifest::empty(Split::Test);
    for out in outs.into_iter().map(|s| s.expect("all subjects built")) {
        let sid = subject_id(out.index);
        let rel = |tag: &str| PathBuf::from(format!("{sid}/anat/{sid}_{tag}.rvol"));
        if let Some(hf) = &out.hf {
            save_volume(hf, out_dir.join(rel("hf")))?;
        }
        if let Some(ulf) = &out.ulf {
            save_volume(ulf, out_dir.join(rel("ulf")))?;
        }
        let manifest = match splits[out.index] {
            Split::Train => &mut train,
            Split::Val => &mut val,
            Split::Test => &mut test,
        };
        match (&out.hf, &out.ulf) {
            (Some(_), Some(_)) => manifest.paired.push(PairedEntry {
                subject_id: sid.clone(),
                ulf: rel("ulf"),
                hf: rel("hf"),
                lesion_class: Some(out.class),
            }),
            (Some(_), None) => manifest.hf_only.push(SingleEntry {
                subject_id: sid.clone(),
                path: rel("hf"),
                lesion_class: Some(out.class),
            }),
            (None, Some(_)) => manifest.ulf_only.push(SingleEntry {
                subject_id: sid.clone(),
                path: rel("ulf"),
                lesion_class: Some(out.class),
            }),
            (None, None) => unreachable!("every category writes at least one file"),
        }
    }

    validate_disjoint_splits(&[&train, &val, &test])?;
    train.save(out_dir.join("manifest_train.json"))?;
    val.save(out_dir.join("manifest_val.json"))?;
    test.save(out_dir.join("manifest_test.json"))?;
    Ok(DatasetSet { train, val, test })
}
