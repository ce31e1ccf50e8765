//! Synthetic two-domain phantoms.
//!
//! Source cases are tissue-labeled brains built from nested deformed
//! ellipsoids. Target cases get a concentric three-class tumor whose center
//! prefers the WM/GM interface, then an appearance shift (gamma, contrast,
//! bias field, noise). Target tissue truth is written to `hidden/` for
//! auditing only.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    hidden_tissue_stem, save_case, save_label_map, tissue, tumor, voxel_count, CaseRecord,
    DatasetManifest, Dims, Domain, LabelMap, Taxonomy, Volume, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::rng::{rng_from, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TumorParams {
    /// Edema radius range as a fraction of the smallest grid extent.
    pub radius_frac: (f32, f32),
    /// Non-enhancing radius relative to the edema radius.
    pub non_enhancing_frac: f32,
    /// Enhancing radius relative to the edema radius.
    pub enhancing_frac: f32,
    /// Mixing weight between uniform and WM/GM-interface center sampling.
    pub interface_affinity: f32,
    /// Additive per-channel intensity offsets for edema, non-enhancing, enhancing.
    pub offsets: [[f32; 4]; 3],
}

impl Default for TumorParams {
    fn default() -> Self {
        TumorParams {
            radius_frac: (0.11, 0.19),
            non_enhancing_frac: 0.65,
            enhancing_frac: 0.35,
            interface_affinity: 0.8,
            offsets: [
                [-0.06, 0.12, -0.04, 0.18],
                [-0.14, 0.06, -0.10, 0.10],
                [-0.06, 0.00, 0.22, 0.06],
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub shape: Dims,
    /// Brain semi-axis range as a fraction of the half extent of each axis.
    pub brain_radius_frac: (f32, f32),
    /// Relative amplitude of the radial surface deformation.
    pub deformation: f32,
    /// Normalized radius of the WM/GM surface.
    pub wm_radius: (f32, f32),
    /// Normalized radius of the GM/CSF surface.
    pub gm_radius: (f32, f32),
    /// Central ventricle semi-axis relative to the brain semi-axes.
    pub ventricle_radius: (f32, f32),
    /// Base intensity per tissue class (row) and channel (column).
    pub intensities: [[f32; 4]; 4],
    pub noise_sigma: f32,
    pub tumor: TumorParams,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            shape: [24, 24, 24],
            brain_radius_frac: (0.78, 0.86),
            deformation: 0.08,
            wm_radius: (0.64, 0.70),
            gm_radius: (0.84, 0.88),
            ventricle_radius: (0.14, 0.20),
            intensities: [
                [0.0, 0.0, 0.0, 0.0],
                [0.75, 0.30, 0.70, 0.40],
                [0.55, 0.50, 0.50, 0.55],
                [0.20, 0.85, 0.25, 0.15],
            ],
            noise_sigma: 0.04,
            tumor: TumorParams::default(),
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: (f32, f32), lo: f32, hi: f32) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite() && lo <= r.0 && r.0 <= r.1 && r.1 <= hi) {
        return Err(Error::InvalidArgument(format!(
            "{name} range {r:?} must satisfy {lo} <= min <= max <= {hi}"
        )));
    }
    Ok(())
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s < 4) {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} too small",
                self.shape
            )));
        }
        if !(0.0..0.5).contains(&self.deformation) {
            return Err(Error::InvalidArgument("deformation must be in [0, 0.5)".into()));
        }
        check_range("brain_radius_frac", self.brain_radius_frac, 0.05, 1.0)?;
        if self.brain_radius_frac.1 * (1.0 + self.deformation) > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "brain radius {} with deformation {} does not fit the grid",
                self.brain_radius_frac.1, self.deformation
            )));
        }
        check_range("wm_radius", self.wm_radius, 0.05, 1.0)?;
        check_range("gm_radius", self.gm_radius, 0.05, 1.0)?;
        if self.wm_radius.1 >= self.gm_radius.0 {
            return Err(Error::InvalidArgument("wm_radius must lie inside gm_radius".into()));
        }
        check_range("ventricle_radius", self.ventricle_radius, 0.0, 1.0)?;
        if self.ventricle_radius.1 >= self.wm_radius.0 {
            return Err(Error::InvalidArgument(
                "ventricle_radius must lie inside wm_radius".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        let all = self.intensities.iter().flatten();
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("intensities must be finite".into()));
        }
        let t = &self.tumor;
        if !(0.0..=1.0).contains(&t.interface_affinity) {
            return Err(Error::InvalidArgument(
                "interface_affinity must be in [0, 1]".into(),
            ));
        }
        check_range("tumor.radius_frac", t.radius_frac, 0.0, 0.5)?;
        if !(0.0 < t.enhancing_frac
            && t.enhancing_frac <= t.non_enhancing_frac
            && t.non_enhancing_frac <= 1.0)
        {
            return Err(Error::InvalidArgument(
                "tumor fractions must satisfy 0 < enhancing <= non_enhancing <= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Low-frequency angular perturbation in [-1, 1].
struct SurfaceField {
    waves: [([f32; 3], f32); 3],
}

impl SurfaceField {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut wave = || {
            let k = [
                rng.gen_range(-2.0f32..2.0),
                rng.gen_range(-2.0f32..2.0),
                rng.gen_range(-2.0f32..2.0),
            ];
            (k, rng.gen_range(0.0..2.0 * PI))
        };
        SurfaceField {
            waves: [wave(), wave(), wave()],
        }
    }

    fn eval(&self, u: [f32; 3]) -> f32 {
        self.waves
            .iter()
            .map(|(k, phase)| (PI * (k[0] * u[0] + k[1] * u[1] + k[2] * u[2]) + phase).sin())
            .sum::<f32>()
            / 3.0
    }
}

fn index(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

fn center(dims: Dims) -> [f32; 3] {
    [
        (dims[0] as f32 - 1.0) / 2.0,
        (dims[1] as f32 - 1.0) / 2.0,
        (dims[2] as f32 - 1.0) / 2.0,
    ]
}

/// Nested deformed ellipsoids: CSF shell ⊃ GM ribbon ⊃ WM core, plus a
/// central CSF ventricle. Noise is added inside the brain only.
pub fn generate_tissue_phantom(params: &PhantomParams) -> Result<(Volume, LabelMap)> {
    params.validate()?;
    let dims = params.shape;
    let mut rng = rng_from(params.seed, &[tag("tissue")]);
    let c = center(dims);
    let mut radius = [0f32; 3];
    for a in 0..3 {
        radius[a] = rng.gen_range(params.brain_radius_frac.0..=params.brain_radius_frac.1)
            * dims[a] as f32
            / 2.0;
    }
    let outer = SurfaceField::sample(&mut rng);
    let inner = SurfaceField::sample(&mut rng);
    let wm_r = rng.gen_range(params.wm_radius.0..=params.wm_radius.1);
    let gm_r = rng.gen_range(params.gm_radius.0..=params.gm_radius.1);
    let vent_r = rng.gen_range(params.ventricle_radius.0..=params.ventricle_radius.1);
    let amp = params.deformation;

    let mut labels = LabelMap::zeros(dims, Taxonomy::Tissue);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let q = [
                    (z as f32 - c[0]) / radius[0],
                    (y as f32 - c[1]) / radius[1],
                    (x as f32 - c[2]) / radius[2],
                ];
                let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
                let u = if r > 0.0 {
                    [q[0] / r, q[1] / r, q[2] / r]
                } else {
                    [0.0, 0.0, 1.0]
                };
                let rho = r / (1.0 + amp * outer.eval(u));
                let rho_inner = r / (1.0 + amp * inner.eval(u));
                let label = if rho > 1.0 {
                    tissue::BACKGROUND
                } else if r <= vent_r {
                    tissue::CSF
                } else if rho_inner <= wm_r {
                    tissue::WM
                } else if rho <= gm_r {
                    tissue::GM
                } else {
                    tissue::CSF
                };
                labels.set(index(dims, z, y, x), label);
            }
        }
    }

    let n = voxel_count(dims);
    let mut volume = Volume::zeros(4, dims);
    let noise = Normal::new(0.0f32, params.noise_sigma.max(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for ch in 0..4 {
        let out = volume.channel_mut(ch);
        for i in 0..n {
            let cls = labels.data()[i];
            if cls == tissue::BACKGROUND {
                continue;
            }
            let mut v = params.intensities[cls as usize][ch];
            if params.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            out[i] = v.clamp(0.0, 1.0);
        }
    }
    Ok((volume, labels))
}

/// Brain voxels adjacent (6-neighborhood) to the other of WM/GM.
pub fn interface_voxels(tissue_map: &LabelMap) -> Vec<usize> {
    let dims = tissue_map.dims();
    let l = tissue_map.data();
    let mut out = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = index(dims, z, y, x);
                let other = match l[i] {
                    tissue::WM => tissue::GM,
                    tissue::GM => tissue::WM,
                    _ => continue,
                };
                let p = [z, y, x];
                let touches = (0..3).any(|a| {
                    [-1i64, 1].iter().any(|&d| {
                        let mut q = p;
                        let v = p[a] as i64 + d;
                        if v < 0 || v >= dims[a] as i64 {
                            return false;
                        }
                        q[a] = v as usize;
                        l[index(dims, q[0], q[1], q[2])] == other
                    })
                });
                if touches {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// Draws a tumor center: with probability `w` from the WM/GM interface,
/// otherwise uniformly over the brain mask.
pub fn sample_tumor_center(
    tissue_map: &LabelMap,
    interface_affinity: f32,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let brain: Vec<usize> = tissue_map
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != tissue::BACKGROUND)
        .map(|(i, _)| i)
        .collect();
    if brain.is_empty() {
        return Err(Error::InvalidArgument("tissue map has no brain voxels".into()));
    }
    let iface = interface_voxels(tissue_map);
    let use_iface = !iface.is_empty() && rng.gen::<f32>() < interface_affinity;
    let pool = if use_iface { &iface } else { &brain };
    Ok(pool[rng.gen_range(0..pool.len())])
}

fn unravel(dims: Dims, i: usize) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

/// Smallest distance from the brain centroid to the brain boundary along
/// the three axes; an upper bound for a tumor radius that stays inside.
fn brain_extent(tissue_map: &LabelMap) -> f32 {
    let dims = tissue_map.dims();
    let mut extent = [0usize; 3];
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for (i, &v) in tissue_map.data().iter().enumerate() {
        if v != tissue::BACKGROUND {
            let p = unravel(dims, i);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    for a in 0..3 {
        extent[a] = if hi[a] >= lo[a] { hi[a] - lo[a] + 1 } else { 0 };
    }
    extent.iter().copied().min().unwrap_or(0) as f32 / 2.0
}

/// Implants concentric spheres (enhancing ⊂ non-enhancing ⊂ edema) restricted
/// to the brain mask and offsets the intensities of the covered voxels.
pub fn implant_tumor(
    volume: &Volume,
    tissue_map: &LabelMap,
    params: &PhantomParams,
) -> Result<(Volume, LabelMap)> {
    params.validate()?;
    let dims = tissue_map.dims();
    if volume.dims() != dims || volume.channels() != 4 {
        return Err(Error::Shape(format!(
            "volume {}x{:?} vs tissue {:?}",
            volume.channels(),
            volume.dims(),
            dims
        )));
    }
    let tp = &params.tumor;
    let min_extent = *dims.iter().min().unwrap() as f32;
    let max_radius = tp.radius_frac.1 * min_extent;
    if max_radius >= brain_extent(tissue_map) {
        return Err(Error::InvalidArgument(format!(
            "tumor radius {max_radius} exceeds brain extent {}",
            brain_extent(tissue_map)
        )));
    }
    let mut rng = rng_from(params.seed, &[tag("tumor")]);
    let centre = unravel(dims, sample_tumor_center(tissue_map, tp.interface_affinity, &mut rng)?);
    let r_edema = rng.gen_range(tp.radius_frac.0..=tp.radius_frac.1) * min_extent;
    let r_ne = r_edema * tp.non_enhancing_frac;
    let r_en = r_edema * tp.enhancing_frac;

    let mut labels = LabelMap::zeros(dims, Taxonomy::Tumor);
    let mut out = volume.clone();
    let n = voxel_count(dims);
    for i in 0..n {
        if tissue_map.data()[i] == tissue::BACKGROUND {
            continue;
        }
        let p = unravel(dims, i);
        let d2: f32 = (0..3)
            .map(|a| (p[a] as f32 - centre[a] as f32).powi(2))
            .sum();
        let d = d2.sqrt();
        let cls = if d <= r_en {
            tumor::ENHANCING
        } else if d <= r_ne {
            tumor::NON_ENHANCING
        } else if d <= r_edema {
            tumor::EDEMA
        } else {
            continue;
        };
        labels.set(i, cls);
        for ch in 0..4 {
            let v = &mut out.channel_mut(ch)[i];
            *v = (*v + tp.offsets[cls as usize - 1][ch]).clamp(0.0, 1.0);
        }
    }
    Ok((out, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShiftParams {
    pub gamma: f32,
    pub bias_field_amplitude: f32,
    pub contrast_scale: [f32; 4],
    pub extra_noise_sigma: f32,
    pub seed: u64,
}

impl Default for DomainShiftParams {
    fn default() -> Self {
        DomainShiftParams {
            gamma: 1.8,
            bias_field_amplitude: 0.15,
            contrast_scale: [0.8, 1.15, 0.85, 1.2],
            extra_noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl DomainShiftParams {
    pub fn identity() -> Self {
        DomainShiftParams {
            gamma: 1.0,
            bias_field_amplitude: 0.0,
            contrast_scale: [1.0; 4],
            extra_noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument("gamma must be > 0".into()));
        }
        if !(self.extra_noise_sigma >= 0.0) || !self.bias_field_amplitude.is_finite() {
            return Err(Error::InvalidArgument("invalid bias/noise parameters".into()));
        }
        if self.contrast_scale.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("contrast_scale must be finite".into()));
        }
        Ok(())
    }
}

/// `v' = clamp(scale_c · v^gamma · bias(x) + noise)` on voxels that are
/// nonzero in some channel; background stays zero. `bias(x) = 1 + a·b(x)`
/// with `b` a linear field in [-1, 1] along a seeded direction.
pub fn apply_domain_shift(volume: &Volume, shift: &DomainShiftParams) -> Result<Volume> {
    shift.validate()?;
    let dims = volume.dims();
    let n = voxel_count(dims);
    let mut rng = rng_from(shift.seed, &[tag("shift")]);
    let mut dir = [
        rng.gen_range(-1.0f32..1.0),
        rng.gen_range(-1.0f32..1.0),
        rng.gen_range(-1.0f32..1.0),
    ];
    let norm = (dir.iter().map(|d| d * d).sum::<f32>()).sqrt().max(1e-6);
    dir.iter_mut().for_each(|d| *d /= norm);
    let c = center(dims);
    let half = [
        (c[0]).max(0.5),
        (c[1]).max(0.5),
        (c[2]).max(0.5),
    ];
    let foreground: Vec<bool> = (0..n)
        .map(|i| (0..volume.channels()).any(|ch| volume.channel(ch)[i] != 0.0))
        .collect();
    let noise = if shift.extra_noise_sigma > 0.0 {
        Some(Normal::new(0.0f32, shift.extra_noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    } else {
        None
    };
    let mut out = volume.clone();
    for ch in 0..volume.channels() {
        let scale = shift.contrast_scale.get(ch).copied().unwrap_or(1.0);
        let dst = out.channel_mut(ch);
        for i in 0..n {
            if !foreground[i] {
                continue;
            }
            let p = unravel(dims, i);
            let b = (0..3)
                .map(|a| dir[a] * (p[a] as f32 - c[a]) / half[a])
                .sum::<f32>()
                / 3f32.sqrt();
            let bias = 1.0 + shift.bias_field_amplitude * b;
            let mut v = scale * dst[i].powf(shift.gamma) * bias;
            if let Some(dist) = &noise {
                v += dist.sample(&mut rng);
            }
            dst[i] = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

pub fn source_case_id(i: usize) -> String {
    format!("src_{i:03}")
}

pub fn target_case_id(i: usize) -> String {
    format!("tgt_{i:03}")
}

/// Per-case parameters: seeds derived from the dataset seed, domain and index.
fn case_params(params: &PhantomParams, domain: Domain, index: usize) -> PhantomParams {
    let dom = match domain {
        Domain::Source => tag("source"),
        Domain::Target => tag("target"),
    };
    PhantomParams {
        seed: crate::rng::derive_seed(params.seed, &[dom, index as u64]),
        ..params.clone()
    }
}

/// Writes a complete two-domain dataset under `root` and returns its manifest.
pub fn generate_dataset(
    root: &Path,
    n_source: usize,
    n_target: usize,
    params: &PhantomParams,
    shift: &DomainShiftParams,
) -> Result<DatasetManifest> {
    if n_source == 0 || n_target == 0 {
        return Err(Error::InvalidArgument(
            "n_source and n_target must be >= 1".into(),
        ));
    }
    params.validate()?;
    shift.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut cases = Vec::with_capacity(n_source + n_target);
    for i in 0..n_source {
        let id = source_case_id(i);
        let (vol, tissue_map) = generate_tissue_phantom(&case_params(params, Domain::Source, i))?;
        save_case(&vol, Some(&tissue_map), &root.join(&id))?;
        cases.push(CaseRecord::new(&id, Domain::Source, true));
    }
    for i in 0..n_target {
        let id = target_case_id(i);
        let p = case_params(params, Domain::Target, i);
        let (vol, tissue_map) = generate_tissue_phantom(&p)?;
        let (vol, tumor_map) = implant_tumor(&vol, &tissue_map, &p)?;
        let case_shift = DomainShiftParams {
            seed: crate::rng::derive_seed(shift.seed, &[p.seed]),
            ..shift.clone()
        };
        let vol = apply_domain_shift(&vol, &case_shift)?;
        save_case(&vol, Some(&tumor_map), &root.join(&id))?;
        save_label_map(&tissue_map, &hidden_tissue_stem(root, &id))?;
        cases.push(CaseRecord::new(&id, Domain::Target, true));
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        shape: params.shape,
        seed: params.seed,
        cases,
    };
    manifest.save(root)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomParams {
        PhantomParams {
            shape: [16, 16, 16],
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_tissue_phantom(&small()).unwrap();
        let b = generate_tissue_phantom(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_tissue_phantom(&PhantomParams { seed: 1, ..small() }).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn noiseless_is_piecewise_constant() {
        let p = PhantomParams {
            noise_sigma: 0.0,
            ..small()
        };
        let (v, l) = generate_tissue_phantom(&p).unwrap();
        for ch in 0..4 {
            for (i, &val) in v.channel(ch).iter().enumerate() {
                assert_eq!(val, p.intensities[l.data()[i] as usize][ch]);
            }
        }
    }

    #[test]
    fn tissue_fractions_at_32() {
        for seed in 0..5 {
            let p = PhantomParams {
                shape: [32, 32, 32],
                seed,
                ..Default::default()
            };
            let (_, l) = generate_tissue_phantom(&p).unwrap();
            let brain = l.data().iter().filter(|&&v| v != 0).count() as f64;
            for cls in 1..4 {
                let frac = l.count(cls) as f64 / brain;
                assert!((0.02..=0.40).contains(&frac), "seed {seed} class {cls}: {frac}");
            }
        }
    }

    #[test]
    fn geometry_must_fit() {
        let p = PhantomParams {
            brain_radius_frac: (0.9, 0.99),
            deformation: 0.2,
            ..small()
        };
        assert!(generate_tissue_phantom(&p).is_err());
    }

    #[test]
    fn tumor_radius_must_fit_brain() {
        let p = PhantomParams {
            tumor: TumorParams {
                radius_frac: (0.45, 0.5),
                ..Default::default()
            },
            ..small()
        };
        let (v, l) = generate_tissue_phantom(&p).unwrap();
        assert!(implant_tumor(&v, &l, &p).is_err());
    }

    #[test]
    fn tumor_nesting_and_mask() {
        for seed in 0..10 {
            let p = PhantomParams { seed, ..small() };
            let (v, l) = generate_tissue_phantom(&p).unwrap();
            let (_, t) = implant_tumor(&v, &l, &p).unwrap();
            let et = t.count(3);
            let tc = et + t.count(2);
            let wt = tc + t.count(1);
            assert!(et <= tc && tc <= wt && wt > 0);
            for (i, &lab) in t.data().iter().enumerate() {
                if lab != 0 {
                    assert_ne!(l.data()[i], 0);
                }
            }
        }
    }

    #[test]
    fn full_affinity_centers_on_interface() {
        let p = PhantomParams {
            tumor: TumorParams {
                interface_affinity: 1.0,
                ..Default::default()
            },
            ..small()
        };
        let (_, l) = generate_tissue_phantom(&p).unwrap();
        let iface: Vec<[usize; 3]> = interface_voxels(&l)
            .into_iter()
            .map(|i| unravel(l.dims(), i))
            .collect();
        let mut rng = rng_from(3, &[]);
        for _ in 0..200 {
            let c = unravel(l.dims(), sample_tumor_center(&l, 1.0, &mut rng).unwrap());
            let near = iface.iter().any(|q| {
                (0..3)
                    .map(|a| (q[a] as f32 - c[a] as f32).powi(2))
                    .sum::<f32>()
                    .sqrt()
                    <= 2.0
            });
            assert!(near);
        }
    }

    #[test]
    fn identity_shift_is_identity() {
        let (v, _) = generate_tissue_phantom(&small()).unwrap();
        let out = apply_domain_shift(&v, &DomainShiftParams::identity()).unwrap();
        assert_eq!(v, out);
    }

    #[test]
    fn gamma_two_squares_and_preserves_order() {
        let v = Volume::new(vec![0.5, 0.2, 0.9, 0.7], 1, [1, 2, 2]).unwrap();
        let shift = DomainShiftParams {
            gamma: 2.0,
            ..DomainShiftParams::identity()
        };
        let out = apply_domain_shift(&v, &shift).unwrap();
        assert_eq!(out.data()[0], 0.25);
        let order = |d: &[f32]| {
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
            idx
        };
        assert_eq!(order(v.data()), order(out.data()));
    }

    #[test]
    fn shift_rejects_nonpositive_gamma() {
        let v = Volume::zeros(4, [2, 2, 2]);
        let shift = DomainShiftParams {
            gamma: 0.0,
            ..DomainShiftParams::identity()
        };
        assert!(apply_domain_shift(&v, &shift).is_err());
    }

    #[test]
    fn zero_counts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = generate_dataset(dir.path(), 0, 1, &small(), &DomainShiftParams::default());
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }
}
