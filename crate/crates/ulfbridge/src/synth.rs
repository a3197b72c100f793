//! Synthetic two-cohort data: clean target-domain phantoms, degraded
//! source-domain phantoms, a paired held-out split, slice-file and manifest
//! I/O, and the Gaussian-mixture testbed with closed-form scores.
//!
//! Phantoms are nested random ellipses (rim, two tissue classes, ventricle
//! inclusions) with distinct contrast pairs for the two channels. The
//! background outside the outer ellipse is exactly -1.

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const COHORT_SOURCE: &str = "source_pool";
pub const COHORT_TARGET: &str = "target_pool";
pub const COHORT_PAIRED: &str = "paired_test";

pub const MANIFEST_VERSION: u32 = 1;

// ── phantom generation ─────────────────────────────────────────────────

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn new(rng: &mut ChaCha8Rng, cx: f64, cy: f64, a: f64, b: f64) -> Self {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        Ellipse {
            cx,
            cy,
            a,
            b,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
        }
    }

    fn scaled(&self, s: f64) -> Ellipse {
        Ellipse {
            cx: self.cx,
            cy: self.cy,
            a: self.a * s,
            b: self.b * s,
            cos_t: self.cos_t,
            sin_t: self.sin_t,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Per-tissue (t1, t2) intensity pairs; background is exactly -1.
const RIM: (f64, f64) = (0.70, 0.25);
const TISSUE_A: (f64, f64) = (0.45, 0.55);
const TISSUE_B: (f64, f64) = (0.20, 0.75);
const VENTRICLE: (f64, f64) = (-0.25, 0.85);

/// One clean slice pair. Deterministic per seed; values in [-1, 1];
/// background intensity is exactly -1 in both contrasts.
pub fn make_phantom<S: Scalar>(seed: u64, size: usize) -> Result<(Array2<S>, Array2<S>)> {
    if size < 32 {
        return Err(Error::TooSmall(format!(
            "phantom size {size} below minimum 32"
        )));
    }
    let mut rng = rng::rng_for(seed, Stream::PhantomGeometry, 0);
    let s = size as f64;
    let cx = s * (0.5 + rng.random_range(-0.05..0.05));
    let cy = s * (0.5 + rng.random_range(-0.05..0.05));
    let outer = Ellipse::new(
        &mut rng,
        cx,
        cy,
        s * rng.random_range(0.32..0.42),
        s * rng.random_range(0.30..0.40),
    );
    let inner = outer.scaled(0.88);
    let n_blobs = rng.random_range(2..=3usize);
    let blobs: Vec<Ellipse> = (0..n_blobs)
        .map(|_| {
            let bx = cx + s * rng.random_range(-0.14..0.14);
            let by = cy + s * rng.random_range(-0.14..0.14);
            Ellipse::new(
                &mut rng,
                bx,
                by,
                s * rng.random_range(0.06..0.13),
                s * rng.random_range(0.06..0.13),
            )
        })
        .collect();
    let n_vent = rng.random_range(1..=2usize);
    let vents: Vec<Ellipse> = (0..n_vent)
        .map(|_| {
            let vx = cx + s * rng.random_range(-0.07..0.07);
            let vy = cy + s * rng.random_range(-0.07..0.07);
            Ellipse::new(
                &mut rng,
                vx,
                vy,
                s * rng.random_range(0.035..0.07),
                s * rng.random_range(0.035..0.07),
            )
        })
        .collect();
    // per-slice intensity jitter and a low-frequency texture field
    let jitter: f64 = rng.random_range(-0.04..0.04);
    let (fx, fy): (f64, f64) = (rng.random_range(1.0..3.0), rng.random_range(1.0..3.0));
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let tex_amp = 0.03;

    let mut t1 = Array2::<S>::from_elem((size, size), S::from_f64c(-1.0));
    let mut t2 = Array2::<S>::from_elem((size, size), S::from_f64c(-1.0));
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            if !outer.contains(xf, yf) {
                continue;
            }
            let base = if !inner.contains(xf, yf) {
                RIM
            } else if vents.iter().any(|e| e.contains(xf, yf)) {
                VENTRICLE
            } else if blobs.iter().any(|e| e.contains(xf, yf)) {
                TISSUE_B
            } else {
                TISSUE_A
            };
            let tex = tex_amp
                * (std::f64::consts::TAU * (fx * xf + fy * yf) / s + phase).sin();
            let v1 = (base.0 + jitter + tex).clamp(-1.0, 1.0);
            let v2 = (base.1 + jitter + tex).clamp(-1.0, 1.0);
            t1[[y, x]] = S::from_f64c(v1);
            t2[[y, x]] = S::from_f64c(v2);
        }
    }
    Ok((t1, t2))
}

// ── degradation ────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DegradationConfig {
    /// Gaussian blur standard deviation in pixels.
    pub blur_sigma: f64,
    /// Additive Gaussian noise standard deviation in intensity units.
    pub noise_sigma: f64,
    /// Box down/upsampling factor; 1 disables.
    pub down_up_factor: usize,
    /// Amplitude of the multiplicative smooth bias field.
    pub bias_field_amp: f64,
    /// Fraction by which deviations from the image mean are compressed;
    /// 0 disables, 0.7 keeps 30% of the original contrast.
    pub contrast_scale: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            blur_sigma: 1.2,
            noise_sigma: 0.08,
            down_up_factor: 2,
            bias_field_amp: 0.15,
            contrast_scale: 0.7,
        }
    }
}

impl DegradationConfig {
    /// Identity pipeline.
    pub fn none() -> Self {
        DegradationConfig {
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            down_up_factor: 1,
            bias_field_amp: 0.0,
            contrast_scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_sigma < 0.0
            || self.noise_sigma < 0.0
            || self.bias_field_amp < 0.0
            || self.contrast_scale < 0.0
        {
            return Err(Error::InvalidConfig(
                "degradation parameters must be nonnegative".into(),
            ));
        }
        if self.down_up_factor < 1 {
            return Err(Error::InvalidConfig("down_up_factor must be >= 1".into()));
        }
        Ok(())
    }
}

fn gaussian_blur<S: Scalar>(img: &Array2<S>, sigma: f64) -> Array2<S> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<S> = kernel.iter().map(|k| S::from_f64c(k / ksum)).collect();
    let (h, w) = img.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i - 1;
            }
            if i >= n {
                i = 2 * n - 1 - i;
            }
        }
        i as usize
    };
    let mut tmp = Array2::<S>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = S::zero();
            for (ki, k) in kernel.iter().enumerate() {
                let xi = reflect(x as isize + ki as isize - radius, w);
                acc += *k * img[[y, xi]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<S>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = S::zero();
            for (ki, k) in kernel.iter().enumerate() {
                let yi = reflect(y as isize + ki as isize - radius, h);
                acc += *k * tmp[[yi, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn down_up<S: Scalar>(img: &Array2<S>, factor: usize) -> Array2<S> {
    if factor <= 1 {
        return img.clone();
    }
    let (h, w) = img.dim();
    let (hd, wd) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut small = Array2::<S>::zeros((hd, wd));
    for by in 0..hd {
        for bx in 0..wd {
            let mut acc = S::zero();
            let mut count = 0usize;
            for y in by * factor..((by + 1) * factor).min(h) {
                for x in bx * factor..((bx + 1) * factor).min(w) {
                    acc += img[[y, x]];
                    count += 1;
                }
            }
            small[[by, bx]] = acc / S::from_usize(count).unwrap();
        }
    }
    let mut out = Array2::<S>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = small[[y / factor, x / factor]];
        }
    }
    out
}

/// Degrade a clean slice pair: blur, box down/up, multiplicative bias
/// field, contrast compression toward the image mean, additive noise, clip.
pub fn degrade<S: Scalar>(
    clean: (&Array2<S>, &Array2<S>),
    config: &DegradationConfig,
    seed: u64,
) -> Result<(Array2<S>, Array2<S>)> {
    config.validate()?;
    let mut rng = rng::rng_for(seed, Stream::Degradation, 0);
    let (h, w) = clean.0.dim();
    if clean.1.dim() != (h, w) {
        return Err(Error::Shape("contrast pair shapes differ".into()));
    }
    // one bias field and one noise draw per contrast, same geometry
    let (fx, fy): (f64, f64) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
    let (px, py): (f64, f64) = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let bias = |x: usize, y: usize| -> f64 {
        0.5 * ((std::f64::consts::TAU * fx * x as f64 / w as f64 + px).sin()
            + (std::f64::consts::TAU * fy * y as f64 / h as f64 + py).sin())
    };
    let mut process = |img: &Array2<S>, rng: &mut ChaCha8Rng| -> Array2<S> {
        let mut out = gaussian_blur(img, config.blur_sigma);
        out = down_up(&out, config.down_up_factor);
        if config.bias_field_amp > 0.0 {
            for y in 0..h {
                for x in 0..w {
                    let gain = 1.0 + config.bias_field_amp * bias(x, y);
                    let v = (out[[y, x]].to_f64c() + 1.0) * gain - 1.0;
                    out[[y, x]] = S::from_f64c(v);
                }
            }
        }
        if config.contrast_scale > 0.0 {
            let mean = out.sum().to_f64c() / (h * w) as f64;
            let keep = 1.0 - config.contrast_scale;
            out.mapv_inplace(|v| S::from_f64c(mean + keep * (v.to_f64c() - mean)));
        }
        if config.noise_sigma > 0.0 {
            let noise = rng::normal_array::<S>(rng, &[h, w]);
            let noise = noise.into_shape_with_order((h, w)).unwrap();
            let ns = S::from_f64c(config.noise_sigma);
            out.zip_mut_with(&noise, |o, &n| *o = *o + ns * n);
        }
        let one = S::one();
        out.mapv_inplace(|v| v.max(-one).min(one));
        out
    };
    let d1 = process(clean.0, &mut rng);
    let d2 = process(clean.1, &mut rng);
    Ok((d1, d2))
}

// ── channel composition ────────────────────────────────────────────────

/// Stack two contrasts into a 3-channel slice `[t1, t2, t1]`.
pub fn compose_channels<S: Scalar>(t1: &Array2<S>, t2: &Array2<S>) -> Result<Array3<S>> {
    if t1.dim() != t2.dim() {
        return Err(Error::Shape("contrast shapes differ".into()));
    }
    let (h, w) = t1.dim();
    let mut out = Array3::<S>::zeros((3, h, w));
    out.index_axis_mut(Axis(0), 0).assign(t1);
    out.index_axis_mut(Axis(0), 1).assign(t2);
    out.index_axis_mut(Axis(0), 2).assign(t1);
    Ok(out)
}

/// Recover (t1, t2) from a composed slice.
pub fn decompose_channels<S: Scalar>(slice: &Array3<S>) -> (Array2<S>, Array2<S>) {
    (
        slice.index_axis(Axis(0), 0).to_owned(),
        slice.index_axis(Axis(0), 1).to_owned(),
    )
}

// ── manifest and slice i/o ─────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SubjectFiles {
    pub t1: String,
    pub t2: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t1_clean: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t2_clean: Option<String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub files: SubjectFiles,
}

/// JSON description of the generated cohorts. Slice files are raw
/// little-endian f32, row-major, shape (slices_per_subject, H, W), one file
/// per subject and contrast.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub resolution: usize,
    pub slices_per_subject: usize,
    pub dtype: String,
    pub cohorts: BTreeMap<String, Vec<SubjectEntry>>,
    pub seeds: BTreeMap<String, u64>,
}

impl DatasetManifest {
    pub fn cohort(&self, name: &str) -> Option<&Vec<SubjectEntry>> {
        self.cohorts.get(name)
    }

    /// Cohorts must not share subject ids.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (cohort, entries) in &self.cohorts {
            for e in entries {
                if let Some(prev) = seen.insert(e.subject_id.as_str(), cohort.as_str()) {
                    return Err(Error::SplitLeakage(format!(
                        "{} in both {} and {}",
                        e.subject_id, prev, cohort
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.check_disjoint()?;
        Ok(m)
    }

    /// Load one subject's composed slices, (M, 3, H, W). `clean` selects the
    /// clean reference files on paired subjects.
    pub fn load_subject<S: Scalar>(
        &self,
        root: &Path,
        entry: &SubjectEntry,
        clean: bool,
    ) -> Result<ArrayD<S>> {
        let (f1, f2) = if clean {
            let t1 = entry.files.t1_clean.as_ref().ok_or_else(|| {
                Error::IncompleteCohort(format!("{} lacks clean references", entry.subject_id))
            })?;
            let t2 = entry.files.t2_clean.as_ref().ok_or_else(|| {
                Error::IncompleteCohort(format!("{} lacks clean references", entry.subject_id))
            })?;
            (t1.as_str(), t2.as_str())
        } else {
            (entry.files.t1.as_str(), entry.files.t2.as_str())
        };
        let a1 = read_slices_f32::<S>(&root.join(f1), self.slices_per_subject, self.resolution)?;
        let a2 = read_slices_f32::<S>(&root.join(f2), self.slices_per_subject, self.resolution)?;
        let m = self.slices_per_subject;
        let r = self.resolution;
        let mut out = ArrayD::<S>::zeros(IxDyn(&[m, 3, r, r]));
        for i in 0..m {
            let t1 = a1.index_axis(Axis(0), i);
            let t2 = a2.index_axis(Axis(0), i);
            let mut slab = out.index_axis_mut(Axis(0), i);
            let mut s3 = slab.view_mut().into_shape_with_order((3, r, r)).unwrap();
            s3.index_axis_mut(Axis(0), 0).assign(&t1);
            s3.index_axis_mut(Axis(0), 1).assign(&t2);
            s3.index_axis_mut(Axis(0), 2).assign(&t1);
        }
        Ok(out)
    }

    /// All composed slices of a cohort stacked along axis 0.
    pub fn load_cohort_slices<S: Scalar>(&self, root: &Path, name: &str) -> Result<ArrayD<S>> {
        let entries = self
            .cohort(name)
            .ok_or_else(|| Error::IncompleteCohort(format!("cohort {name} missing")))?;
        let mut parts = Vec::new();
        for e in entries {
            parts.push(self.load_subject::<S>(root, e, false)?);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("uniform shapes"))
    }
}

/// Write (M, H, W) slices as raw little-endian f32.
pub fn write_slices_f32<S: Scalar>(path: &Path, slices: &Array3<S>) -> Result<()> {
    let mut buf = Vec::with_capacity(slices.len() * 4);
    for &v in slices.iter() {
        buf.extend_from_slice(&(v.to_f64c() as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read raw little-endian f32 slices with the expected shape.
pub fn read_slices_f32<S: Scalar>(path: &Path, m: usize, r: usize) -> Result<Array3<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let expect = m * r * r * 4;
    if bytes.len() != expect {
        return Err(Error::Shape(format!(
            "{} has {} bytes, expected {expect}",
            path.display(),
            bytes.len()
        )));
    }
    let mut out = Array3::<S>::zeros((m, r, r));
    for (i, v) in out.iter_mut().enumerate() {
        let b = [
            bytes[4 * i],
            bytes[4 * i + 1],
            bytes[4 * i + 2],
            bytes[4 * i + 3],
        ];
        *v = S::from_f64c(f32::from_le_bytes(b) as f64);
    }
    Ok(out)
}

// ── cohort generation ──────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CohortSplit {
    pub source: usize,
    pub target: usize,
    pub paired_test: usize,
}

impl Default for CohortSplit {
    fn default() -> Self {
        CohortSplit {
            source: 40,
            target: 40,
            paired_test: 5,
        }
    }
}

/// Generate all cohorts under `out_dir` and write the manifest. Subjects
/// are disjoint by construction; every write is deterministic in the seed.
pub fn build_cohorts(
    out_dir: &Path,
    n_subjects: usize,
    slices_per_subject: usize,
    size: usize,
    split: &CohortSplit,
    degradation: &DegradationConfig,
    master_seed: u64,
) -> Result<DatasetManifest> {
    if split.source + split.target + split.paired_test != n_subjects {
        return Err(Error::InvalidConfig(format!(
            "split {}+{}+{} != n_subjects {}",
            split.source, split.target, split.paired_test, n_subjects
        )));
    }
    if n_subjects == 0 || slices_per_subject == 0 {
        return Err(Error::InvalidConfig(
            "need at least one subject and one slice".into(),
        ));
    }
    degradation.validate()?;
    std::fs::create_dir_all(out_dir)?;
    for cohort in [COHORT_SOURCE, COHORT_TARGET, COHORT_PAIRED] {
        std::fs::create_dir_all(out_dir.join(cohort))?;
    }
    let mut cohorts: BTreeMap<String, Vec<SubjectEntry>> = BTreeMap::new();
    for (index, cohort) in (0..n_subjects).map(|i| {
        let c = if i < split.source {
            COHORT_SOURCE
        } else if i < split.source + split.target {
            COHORT_TARGET
        } else {
            COHORT_PAIRED
        };
        (i, c)
    }) {
        let subject_id = format!("subj_{index:03}");
        let subject_seed = rng::derive(master_seed, Stream::PhantomGeometry, index as u64);
        let mut clean1 = Array3::<f32>::zeros((slices_per_subject, size, size));
        let mut clean2 = Array3::<f32>::zeros((slices_per_subject, size, size));
        let mut deg1 = Array3::<f32>::zeros((slices_per_subject, size, size));
        let mut deg2 = Array3::<f32>::zeros((slices_per_subject, size, size));
        for s in 0..slices_per_subject {
            let slice_seed = rng::derive(subject_seed, Stream::PhantomGeometry, s as u64);
            let (t1, t2) = make_phantom::<f32>(slice_seed, size)?;
            if cohort != COHORT_TARGET {
                let deg_seed = rng::derive(subject_seed, Stream::Degradation, s as u64);
                let (d1, d2) = degrade((&t1, &t2), degradation, deg_seed)?;
                deg1.index_axis_mut(Axis(0), s).assign(&d1);
                deg2.index_axis_mut(Axis(0), s).assign(&d2);
            }
            clean1.index_axis_mut(Axis(0), s).assign(&t1);
            clean2.index_axis_mut(Axis(0), s).assign(&t2);
        }
        let entry = match cohort {
            COHORT_TARGET => {
                let f1 = format!("{COHORT_TARGET}/{subject_id}_t1.raw");
                let f2 = format!("{COHORT_TARGET}/{subject_id}_t2.raw");
                write_slices_f32(&out_dir.join(&f1), &clean1)?;
                write_slices_f32(&out_dir.join(&f2), &clean2)?;
                SubjectEntry {
                    subject_id,
                    files: SubjectFiles {
                        t1: f1,
                        t2: f2,
                        t1_clean: None,
                        t2_clean: None,
                    },
                }
            }
            COHORT_SOURCE => {
                let f1 = format!("{COHORT_SOURCE}/{subject_id}_t1.raw");
                let f2 = format!("{COHORT_SOURCE}/{subject_id}_t2.raw");
                write_slices_f32(&out_dir.join(&f1), &deg1)?;
                write_slices_f32(&out_dir.join(&f2), &deg2)?;
                SubjectEntry {
                    subject_id,
                    files: SubjectFiles {
                        t1: f1,
                        t2: f2,
                        t1_clean: None,
                        t2_clean: None,
                    },
                }
            }
            _ => {
                let f1 = format!("{COHORT_PAIRED}/{subject_id}_t1.raw");
                let f2 = format!("{COHORT_PAIRED}/{subject_id}_t2.raw");
                let c1 = format!("{COHORT_PAIRED}/{subject_id}_t1_clean.raw");
                let c2 = format!("{COHORT_PAIRED}/{subject_id}_t2_clean.raw");
                write_slices_f32(&out_dir.join(&f1), &deg1)?;
                write_slices_f32(&out_dir.join(&f2), &deg2)?;
                write_slices_f32(&out_dir.join(&c1), &clean1)?;
                write_slices_f32(&out_dir.join(&c2), &clean2)?;
                SubjectEntry {
                    subject_id,
                    files: SubjectFiles {
                        t1: f1,
                        t2: f2,
                        t1_clean: Some(c1),
                        t2_clean: Some(c2),
                    },
                }
            }
        };
        cohorts.entry(cohort.to_string()).or_default().push(entry);
    }
    let mut seeds = BTreeMap::new();
    seeds.insert("master".to_string(), master_seed);
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        resolution: size,
        slices_per_subject,
        dtype: "f32".to_string(),
        cohorts,
        seeds,
    };
    manifest.check_disjoint()?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

// ── Gaussian-mixture testbed ───────────────────────────────────────────

/// Mixture of Gaussians with full covariances, the analytic score oracle.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Array1<f64>>,
    pub covs: Vec<Array2<f64>>,
}

fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Array1<f64>>,
        covs: Vec<Array2<f64>>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::InvalidModel("component count mismatch".into()));
        }
        let wsum: f64 = weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidModel("weights must be a distribution".into()));
        }
        let d = means[0].len();
        for (m, c) in means.iter().zip(covs.iter()) {
            if m.len() != d || c.dim() != (d, d) {
                return Err(Error::InvalidModel("dimension mismatch".into()));
            }
            for i in 0..d {
                for j in 0..d {
                    if (c[[i, j]] - c[[j, i]]).abs() > 1e-12 {
                        return Err(Error::InvalidModel("covariance not symmetric".into()));
                    }
                }
            }
            if cholesky(c).is_none() {
                return Err(Error::InvalidModel(
                    "covariance not positive definite".into(),
                ));
            }
        }
        Ok(GaussianMixture {
            weights,
            means,
            covs,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Standard 1-component helper.
    pub fn single(mean: Array1<f64>, cov: Array2<f64>) -> Result<Self> {
        GaussianMixture::new(vec![1.0], vec![mean], vec![cov])
    }

    fn diffused_components(
        &self,
        tau: usize,
        schedule: &NoiseSchedule,
    ) -> (Vec<Array1<f64>>, Vec<Array2<f64>>) {
        let g = schedule.gamma[tau];
        let vs = schedule.varsigma[tau];
        let d = self.dim();
        let eye = Array2::<f64>::eye(d);
        let means = self.means.iter().map(|m| m.mapv(|v| g * v)).collect();
        let covs = self
            .covs
            .iter()
            .map(|c| c.mapv(|v| g * g * v) + &eye.mapv(|v| v * vs * vs))
            .collect();
        (means, covs)
    }

    /// Log density of the diffused mixture at `u`.
    pub fn log_density(&self, u: &Array1<f64>, tau: usize, schedule: &NoiseSchedule) -> f64 {
        let (means, covs) = self.diffused_components(tau, schedule);
        let d = self.dim() as f64;
        let mut logs = Vec::with_capacity(self.weights.len());
        for j in 0..self.weights.len() {
            let l = cholesky(&covs[j]).expect("validated SPD");
            let logdet: f64 = (0..l.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>() * 2.0;
            let diff = u - &means[j];
            let z = chol_solve(&l, &diff);
            let quad: f64 = diff.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
            logs.push(
                self.weights[j].ln()
                    - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + quad),
            );
        }
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
    }

    /// Closed-form score of the diffused mixture at `u`.
    pub fn score(&self, u: &Array1<f64>, tau: usize, schedule: &NoiseSchedule) -> Array1<f64> {
        let (means, covs) = self.diffused_components(tau, schedule);
        let k = self.weights.len();
        let d = self.dim() as f64;
        let mut logs = Vec::with_capacity(k);
        let mut zs = Vec::with_capacity(k);
        for j in 0..k {
            let l = cholesky(&covs[j]).expect("validated SPD");
            let logdet: f64 = (0..l.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>() * 2.0;
            let diff = u - &means[j];
            let z = chol_solve(&l, &diff);
            let quad: f64 = diff.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
            logs.push(
                self.weights[j].ln()
                    - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + quad),
            );
            zs.push(z);
        }
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let probs: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = probs.iter().sum();
        let mut score = Array1::<f64>::zeros(self.dim());
        for j in 0..k {
            let r = probs[j] / total;
            score.zip_mut_with(&zs[j], |s, &z| *s -= r * z);
        }
        score
    }

    /// Draw points, (n, dim).
    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        let d = self.dim();
        let ls: Vec<Array2<f64>> = self.covs.iter().map(|c| cholesky(c).unwrap()).collect();
        let mut out = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let pick: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut j = 0;
            for (jj, w) in self.weights.iter().enumerate() {
                acc += w;
                if pick <= acc {
                    j = jj;
                    break;
                }
                j = jj;
            }
            let z = rng::normal_array::<f64>(rng, &[d]);
            for a in 0..d {
                let mut v = self.means[j][a];
                for b in 0..=a {
                    v += ls[j][[a, b]] * z[b];
                }
                out[[i, a]] = v;
            }
        }
        out
    }
}

/// Analytic gradient of KL(N(m,1) || N(0,1)) with respect to the shift m:
/// the divergence is m^2/2, so the gradient is m.
pub fn analytic_kl_grad_shift(m: f64) -> f64 {
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn phantom_deterministic_and_background_exact() {
        let (a1, a2) = make_phantom::<f32>(42, 32).unwrap();
        let (b1, b2) = make_phantom::<f32>(42, 32).unwrap();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
        // corners are outside the outer ellipse
        assert_eq!(a1[[0, 0]], -1.0);
        assert_eq!(a2[[0, 0]], -1.0);
        assert_eq!(a1[[31, 31]], -1.0);
        // contrast differs between channels
        assert_ne!(a1, a2);
        // range
        assert!(a1.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(
            make_phantom::<f32>(0, 16),
            Err(Error::TooSmall(_))
        ));
    }

    #[test]
    fn degrade_identity_and_range() {
        let (t1, t2) = make_phantom::<f64>(7, 32).unwrap();
        let (d1, d2) = degrade((&t1, &t2), &DegradationConfig::none(), 3).unwrap();
        assert_eq!(d1, t1);
        assert_eq!(d2, t2);
        let (d1, d2) = degrade((&t1, &t2), &DegradationConfig::default(), 3).unwrap();
        assert!(d1.iter().chain(d2.iter()).all(|v| v.abs() <= 1.0));
        // deterministic per seed
        let (e1, _) = degrade((&t1, &t2), &DegradationConfig::default(), 3).unwrap();
        assert_eq!(d1, e1);
    }

    #[test]
    fn degrade_noise_only_psnr() {
        // mid-range image keeps clipping inactive so MSE tracks sigma^2
        let (t1r, _) = make_phantom::<f64>(11, 48).unwrap();
        let t1 = t1r.mapv(|v| v * 0.5);
        let t2 = t1.clone();
        let cfg = DegradationConfig {
            noise_sigma: 0.1,
            ..DegradationConfig::none()
        };
        let mut mse = 0.0;
        let trials = 40;
        for s in 0..trials {
            let (d1, _) = degrade((&t1, &t2), &cfg, s).unwrap();
            mse += (&d1 - &t1).mapv(|v| v * v).sum() / (48.0 * 48.0);
        }
        mse /= trials as f64;
        let psnr = 20.0 * 2.0f64.log10() - 10.0 * mse.log10();
        assert!(
            (psnr - 26.0206).abs() < 0.3,
            "psnr {psnr} should be ~26.02 dB"
        );
    }

    #[test]
    fn compose_decompose_roundtrip() {
        let t1 = array![[0.0f32, 1.0], [-1.0, 0.5]];
        let t2 = array![[0.25f32, -0.5], [0.75, 0.0]];
        let c = compose_channels(&t1, &t2).unwrap();
        assert_eq!(c.index_axis(Axis(0), 0), c.index_axis(Axis(0), 2));
        let (r1, r2) = decompose_channels(&c);
        assert_eq!(r1, t1);
        assert_eq!(r2, t2);
        // channel means for zeros/ones
        let z = Array2::<f32>::zeros((4, 4));
        let o = Array2::<f32>::ones((4, 4));
        let c = compose_channels(&z, &o).unwrap();
        let means: Vec<f32> = (0..3)
            .map(|i| c.index_axis(Axis(0), i).mean().unwrap())
            .collect();
        assert_eq!(means, vec![0.0, 1.0, 0.0]);
        // shape mismatch
        let bad = Array2::<f32>::zeros((3, 4));
        assert!(matches!(
            compose_channels(&z, &bad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn cohorts_default_split_counts_and_disjoint() {
        let dir = tempdir().unwrap();
        let m = build_cohorts(
            dir.path(),
            85,
            2,
            32,
            &CohortSplit::default(),
            &DegradationConfig::default(),
            5,
        )
        .unwrap();
        let total: usize = m.cohorts.values().map(|v| v.len()).sum();
        assert_eq!(total, 85);
        let mut ids: Vec<&str> = m
            .cohorts
            .values()
            .flatten()
            .map(|e| e.subject_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 85, "subject ids must be unique");
        m.check_disjoint().unwrap();
        assert_eq!(m.cohort(COHORT_SOURCE).unwrap().len(), 40);
        assert_eq!(m.cohort(COHORT_TARGET).unwrap().len(), 40);
        assert_eq!(m.cohort(COHORT_PAIRED).unwrap().len(), 5);
        // paired subjects carry clean references; others do not
        assert!(m.cohort(COHORT_PAIRED).unwrap()[0].files.t1_clean.is_some());
        assert!(m.cohort(COHORT_SOURCE).unwrap()[0].files.t1_clean.is_none());
    }

    #[test]
    fn cohorts_reproducible_bytes() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let split = CohortSplit {
            source: 2,
            target: 2,
            paired_test: 1,
        };
        build_cohorts(d1.path(), 5, 2, 32, &split, &DegradationConfig::default(), 9).unwrap();
        build_cohorts(d2.path(), 5, 2, 32, &split, &DegradationConfig::default(), 9).unwrap();
        for sub in [
            "manifest.json",
            "source_pool/subj_000_t1.raw",
            "paired_test/subj_004_t1_clean.raw",
        ] {
            let a = std::fs::read(d1.path().join(sub)).unwrap();
            let b = std::fs::read(d2.path().join(sub)).unwrap();
            assert_eq!(a, b, "{sub} differs between identical seeds");
        }
    }

    #[test]
    fn manifest_detects_leakage() {
        let dir = tempdir().unwrap();
        let split = CohortSplit {
            source: 1,
            target: 1,
            paired_test: 0,
        };
        let mut m = build_cohorts(
            dir.path(),
            2,
            1,
            32,
            &split,
            &DegradationConfig::none(),
            1,
        )
        .unwrap();
        let stolen = m.cohorts.get(COHORT_SOURCE).unwrap()[0].clone();
        m.cohorts.get_mut(COHORT_TARGET).unwrap().push(stolen);
        assert!(matches!(m.check_disjoint(), Err(Error::SplitLeakage(_))));
    }

    #[test]
    fn gmm_single_component_scores() {
        let sched = NoiseSchedule::cosine(16);
        let gmm = GaussianMixture::single(array![0.0], array![[1.0]]).unwrap();
        // tau = 0, u = 1: standard normal score is -1
        let s = gmm.score(&array![1.0], 0, &sched);
        assert!((s[0] + 1.0).abs() < 1e-12);
        // closed form at any tau: -(u - g mu) / (g^2 s^2 + vs^2)
        let gmm = GaussianMixture::single(array![0.7], array![[0.25]]).unwrap();
        for tau in [0usize, 5, 12] {
            let g = sched.gamma[tau];
            let vs = sched.varsigma[tau];
            let u = 0.3;
            let expect = -(u - g * 0.7) / (g * g * 0.25 + vs * vs);
            let s = gmm.score(&array![u], tau, &sched);
            assert!((s[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gmm_symmetric_mixture_zero_score_at_origin() {
        let sched = NoiseSchedule::cosine(16);
        let gmm = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![array![1.5, 0.0], array![-1.5, 0.0]],
            vec![Array2::eye(2), Array2::eye(2)],
        )
        .unwrap();
        let s = gmm.score(&array![0.0, 0.0], 4, &sched);
        assert!(s.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gmm_score_matches_numeric_log_density_gradient() {
        let sched = NoiseSchedule::cosine(16);
        let gmm = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![array![0.5, -0.2], array![-0.8, 0.9]],
            vec![array![[0.8, 0.2], [0.2, 0.6]], array![[1.2, -0.3], [-0.3, 0.9]]],
        )
        .unwrap();
        let u = array![0.25, -0.4];
        for tau in [1usize, 8, 15] {
            let s = gmm.score(&u, tau, &sched);
            let h = 1e-6;
            for d in 0..2 {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[d] += h;
                dn[d] -= h;
                let num =
                    (gmm.log_density(&up, tau, &sched) - gmm.log_density(&dn, tau, &sched))
                        / (2.0 * h);
                let rel = (s[d] - num).abs() / num.abs().max(1e-9);
                assert!(rel <= 1e-6, "tau {tau} dim {d}: {} vs {num}", s[d]);
            }
        }
    }

    #[test]
    fn gmm_rejects_bad_models() {
        assert!(matches!(
            GaussianMixture::new(vec![0.5, 0.6], vec![array![0.0]; 2], vec![Array2::eye(1); 2]),
            Err(Error::InvalidModel(_))
        ));
        assert!(matches!(
            GaussianMixture::single(array![0.0], array![[-1.0]]),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn kl_shift_oracle() {
        assert_eq!(analytic_kl_grad_shift(0.0), 0.0);
        assert_eq!(analytic_kl_grad_shift(1.0), 1.0);
        assert_eq!(analytic_kl_grad_shift(0.5), 0.5);
    }
}
