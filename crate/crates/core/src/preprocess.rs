//! Dataset fingerprinting, spacing and intensity normalization, mirror
//! augmentation, and the synthetic phantom generator.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{join_list, read_key_values, read_labels, read_volume, write_bytes, write_labels, write_volume, KeyValues};
use crate::metrics::percentile;
use crate::volume::{crop_to_nonzero, resample, Interp, LabelVolume, Shape3, Spacing, Volume4};

/// An axis whose median spacing is at least this multiple of the finest
/// other axis is resampled to its 10th-percentile spacing instead.
pub const ANISOTROPY_RATIO: f64 = 3.0;
/// Standard deviation floor for per-image normalization.
pub const STD_FLOOR: f64 = 1e-8;
pub const CLIP_PERCENTILES: (f64, f64) = (0.5, 99.5);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Ct,
    Mri,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Ct => "CT",
            Modality::Mri => "MRI",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CT" => Ok(Modality::Ct),
            "MRI" | "MR" => Ok(Modality::Mri),
            other => Err(Error::arg(format!("unknown modality `{other}`"))),
        }
    }
}

/// One image with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub case_id: String,
    pub image: Volume4<f32>,
    pub label: LabelVolume,
}

impl SegSample {
    pub fn new(case_id: impl Into<String>, image: Volume4<f32>, label: LabelVolume) -> Result<Self> {
        if image.spatial() != label.shape() {
            return Err(Error::dim(format!(
                "image {:?} and label {:?} differ in shape",
                image.spatial(),
                label.shape()
            )));
        }
        Ok(SegSample {
            case_id: case_id.into(),
            image,
            label,
        })
    }

    pub fn spacing(&self) -> Spacing {
        self.image.spacing()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub modality: Modality,
    pub num_classes: u32,
    pub cases: Vec<SegSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFingerprint {
    pub median_spacing: Spacing,
    pub spacing_p10: Spacing,
    pub modality: Modality,
    pub foreground_clip: (f64, f64),
    pub foreground_mean: f64,
    pub foreground_std: f64,
}

/// Median with the even-count convention of averaging the two middle values.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "median of an empty set");
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n.max(1) as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1) as f64;
    (mean, var.sqrt())
}

/// Spacing statistics over cases and intensity statistics over foreground
/// (label > 0) voxels of every case.
pub fn fingerprint(dataset: &Dataset) -> Result<DatasetFingerprint> {
    if dataset.cases.is_empty() {
        return Err(Error::Empty("dataset has no cases".into()));
    }
    let mut median_spacing = [0.0; 3];
    let mut spacing_p10 = [0.0; 3];
    for a in 0..3 {
        let mut s: Vec<f64> = dataset.cases.iter().map(|c| c.spacing()[a]).collect();
        median_spacing[a] = median(&s);
        s.sort_by(f64::total_cmp);
        spacing_p10[a] = percentile(&s, 10.0);
    }
    let mut fg: Vec<f64> = dataset
        .cases
        .iter()
        .flat_map(|c| {
            c.label
                .data()
                .iter()
                .zip(c.image.data().chunks(c.image.channels()))
                .filter(|(&l, _)| l > 0)
                .map(|(_, px)| f64::from(px[0]))
        })
        .collect();
    if fg.is_empty() {
        return Err(Error::Empty("no foreground voxels in the dataset".into()));
    }
    fg.sort_by(f64::total_cmp);
    let clip = (percentile(&fg, CLIP_PERCENTILES.0), percentile(&fg, CLIP_PERCENTILES.1));
    let (mean, std) = mean_std(fg.iter().copied());
    Ok(DatasetFingerprint {
        median_spacing,
        spacing_p10,
        modality: dataset.modality,
        foreground_clip: clip,
        foreground_mean: mean,
        foreground_std: std.max(STD_FLOOR),
    })
}

/// Median spacing, except that a strongly anisotropic axis takes its 10th
/// percentile.
pub fn target_spacing(fp: &DatasetFingerprint) -> Spacing {
    let m = fp.median_spacing;
    std::array::from_fn(|a| {
        let finest_other = (0..3).filter(|&b| b != a).map(|b| m[b]).fold(f64::INFINITY, f64::min);
        if m[a] >= ANISOTROPY_RATIO * finest_other {
            fp.spacing_p10[a]
        } else {
            m[a]
        }
    })
}

/// CT: clip to the dataset foreground percentiles, then z-score with the
/// dataset foreground statistics. MRI: z-score with the image's own mean
/// and standard deviation.
pub fn normalize(sample: &SegSample, fp: &DatasetFingerprint) -> SegSample {
    let image = match fp.modality {
        Modality::Ct => {
            let (lo, hi) = fp.foreground_clip;
            let (mean, std) = (fp.foreground_mean, fp.foreground_std.max(STD_FLOOR));
            sample
                .image
                .map(|v| ((f64::from(v).clamp(lo, hi) - mean) / std) as f32)
        }
        Modality::Mri => {
            let (mean, std) = mean_std(sample.image.data().iter().map(|&v| f64::from(v)));
            let std = std.max(STD_FLOOR);
            sample.image.map(|v| ((f64::from(v) - mean) / std) as f32)
        }
    };
    SegSample {
        image,
        ..sample.clone()
    }
}

/// Crop to the nonzero image region, resample to `spacing`, normalize.
pub fn preprocess_case(sample: &SegSample, fp: &DatasetFingerprint, spacing: Spacing) -> Result<SegSample> {
    let (image, bbox) = crop_to_nonzero(&sample.image)?;
    let label = sample.label.crop(bbox.offset, bbox.size)?;
    let from = image.spacing();
    let image = resample(&image, spacing, Interp::Trilinear)?;
    let label = label.resample(from, spacing)?;
    Ok(normalize(&SegSample::new(sample.case_id.clone(), image, label)?, fp))
}

/// Flips image and label together along each selected axis with
/// probability 1/2.
pub fn mirror_augment(sample: &SegSample, axes: [bool; 3], rng: &mut impl Rng) -> SegSample {
    let mut out = sample.clone();
    for (axis, &on) in axes.iter().enumerate() {
        if on && rng.random_bool(0.5) {
            out.image = out.image.flip(axis);
            out.label = out.label.flip(axis);
        }
    }
    out
}

/// Mean intensity of phantom class `c` (0 is background).
pub fn phantom_intensity(class: u32) -> f64 {
    100.0 * f64::from(class)
}

pub const PHANTOM_NOISE: f64 = 10.0;

#[derive(Clone, Copy, Debug)]
enum Solid {
    Ellipsoid,
    Cuboid,
}

fn solid_mask(shape: Shape3, solid: Solid, center: [f64; 3], radii: [f64; 3]) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let d: [f64; 3] = std::array::from_fn(|a| ([i, j, k][a] as f64 - center[a]) / radii[a]);
                let inside = match solid {
                    Solid::Ellipsoid => d.iter().map(|x| x * x).sum::<f64>() <= 1.0,
                    Solid::Cuboid => d.iter().all(|x| x.abs() <= 1.0),
                };
                if inside {
                    out.push((i * shape[1] + j) * shape[2] + k);
                }
            }
        }
    }
    out
}

/// Whether any voxel of `mask` is labeled or touches a labeled voxel.
fn collides(label: &LabelVolume, mask: &[usize]) -> bool {
    let s = label.shape();
    mask.iter().any(|&o| {
        let (i, j, k) = (o / (s[1] * s[2]), (o / s[2]) % s[1], o % s[2]);
        (i.saturating_sub(1)..=(i + 1).min(s[0] - 1)).any(|a| {
            (j.saturating_sub(1)..=(j + 1).min(s[1] - 1))
                .any(|b| (k.saturating_sub(1)..=(k + 1).min(s[2] - 1)).any(|c| label.get(a, b, c) != 0))
        })
    })
}

/// Places one solid per foreground class; `None` when some class found no
/// free spot.
fn place_solids(shape: Shape3, num_classes: u32, base_scale: f64, rng: &mut ChaCha8Rng) -> Option<LabelVolume> {
    let mut label = LabelVolume::zeros(shape, num_classes);
    for class in 1..num_classes {
        let mut scale = base_scale;
        let mut placed = false;
        for attempt in 0..200 {
            if attempt > 0 && attempt % 50 == 0 {
                scale *= 0.75;
            }
            let radii: [f64; 3] = std::array::from_fn(|a| {
                (rng.random_range(0.2..0.3) * shape[a] as f64 * scale).max(1.0)
            });
            let center: [f64; 3] = std::array::from_fn(|a| {
                let lo = radii[a].min(shape[a] as f64 / 2.0);
                let hi = (shape[a] as f64 - 1.0 - radii[a]).max(lo);
                rng.random_range(lo..=hi)
            });
            let solid = if rng.random_bool(0.5) { Solid::Ellipsoid } else { Solid::Cuboid };
            let mask = solid_mask(shape, solid, center, radii);
            if mask.is_empty() || collides(&label, &mask) {
                continue;
            }
            let s = label.shape();
            for o in mask {
                label.set(o / (s[1] * s[2]), (o / s[2]) % s[1], o % s[2], class);
            }
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(label)
}

fn phantom_case(index: usize, shape: Shape3, num_classes: u32, rng: &mut ChaCha8Rng) -> Result<SegSample> {
    // an early large solid can crowd out later ones on small grids, so a
    // failed layout starts over with every solid smaller
    let label = [1.0, 0.6, 0.35, 0.2]
        .iter()
        .find_map(|&scale| place_solids(shape, num_classes, scale, rng))
        .ok_or_else(|| Error::Numeric(format!("could not place {} solids in phantom {index}", num_classes - 1)))?;
    let noise = Normal::new(0.0, PHANTOM_NOISE).expect("positive noise level");
    // per-case offset of each class band
    let offsets: Vec<f64> = (0..num_classes).map(|_| rng.random_range(-10.0..10.0)).collect();
    let data = label
        .data()
        .iter()
        .map(|&c| (phantom_intensity(c) + offsets[c as usize] + noise.sample(rng)) as f32)
        .collect();
    let image = Volume4::new(data, [shape[0], shape[1], shape[2], 1], [1.0; 3])?;
    SegSample::new(format!("case{index:03}"), image, label)
}

/// Seeded synthetic CT-like dataset: each foreground class is one
/// non-touching ellipsoid or cuboid whose intensity band sits 100 units
/// above the previous class, plus Gaussian noise.
pub fn make_phantoms(n: usize, shape: Shape3, num_classes: u32, seed: u64) -> Result<Dataset> {
    if num_classes < 2 || shape.iter().any(|&s| s < 4) {
        return Err(Error::arg("phantoms need at least 2 classes and every axis >= 4".to_string()));
    }
    let cases = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            phantom_case(i, shape, num_classes, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        modality: Modality::Ct,
        num_classes,
        cases,
    })
}

fn triple_text(v: [f64; 3]) -> String {
    join_list(&v)
}

impl DatasetFingerprint {
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.insert("median_spacing", triple_text(self.median_spacing));
        kv.insert("spacing_p10", triple_text(self.spacing_p10));
        kv.insert("modality", self.modality);
        kv.insert("foreground_clip", join_list(&[self.foreground_clip.0, self.foreground_clip.1]));
        kv.insert("foreground_mean", self.foreground_mean);
        kv.insert("foreground_std", self.foreground_std);
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> std::result::Result<Self, String> {
        let triple = |key: &str| -> std::result::Result<[f64; 3], String> {
            <[f64; 3]>::try_from(kv.parse_list::<f64>(key)?).map_err(|_| format!("key `{key}` needs 3 values"))
        };
        let clip = kv.parse_list::<f64>("foreground_clip")?;
        if clip.len() != 2 || clip[0] > clip[1] {
            return Err("foreground_clip needs two ordered values".into());
        }
        let modality: Modality = kv.require("modality")?.parse().map_err(|e: Error| e.to_string())?;
        Ok(DatasetFingerprint {
            median_spacing: triple("median_spacing")?,
            spacing_p10: triple("spacing_p10")?,
            modality,
            foreground_clip: (clip[0], clip[1]),
            foreground_mean: kv.parse_value("foreground_mean")?,
            foreground_std: kv.parse_value("foreground_std")?,
        })
    }
}

pub const FINGERPRINT_FILE: &str = "fingerprint.json";
pub const CASES_DIR: &str = "cases";

fn case_paths(root: &Path, id: &str) -> (PathBuf, PathBuf) {
    let dir = root.join(CASES_DIR);
    (dir.join(format!("{id}.img.vol")), dir.join(format!("{id}.lbl.vol")))
}

/// Writes `cases/<id>.img.vol`, `cases/<id>.lbl.vol` and the fingerprint
/// (plus `num_classes`) as `key=value` text.
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    let dir = root.join(CASES_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for case in &dataset.cases {
        let (img, lbl) = case_paths(root, &case.case_id);
        write_volume(&img, &case.image)?;
        write_labels(&lbl, &case.label, case.spacing())?;
    }
    let mut kv = fingerprint(dataset)?.to_key_values();
    kv.insert("num_classes", dataset.num_classes);
    write_bytes(&root.join(FINGERPRINT_FILE), kv.to_text().as_bytes())
}

/// Reads a dataset directory; cases are ordered by id.
pub fn read_dataset(root: &Path) -> Result<(Dataset, DatasetFingerprint)> {
    let fp_path = root.join(FINGERPRINT_FILE);
    let kv = read_key_values(&fp_path)?;
    let bad = |reason: String| Error::Format {
        path: fp_path.clone(),
        reason,
    };
    let fp = DatasetFingerprint::from_key_values(&kv).map_err(bad)?;
    let num_classes: u32 = kv.parse_value("num_classes").map_err(bad)?;
    let dir = root.join(CASES_DIR);
    let mut ids: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            name.strip_suffix(".img.vol").map(str::to_string)
        })
        .collect();
    ids.sort();
    let mut cases = Vec::with_capacity(ids.len());
    for id in ids {
        let (img, lbl) = case_paths(root, &id);
        let image = read_volume(&img)?;
        let (label, _) = read_labels(&lbl, num_classes)?;
        cases.push(SegSample::new(id, image, label)?);
    }
    Ok((
        Dataset {
            modality: fp.modality,
            num_classes,
            cases,
        },
        fp,
    ))
}
