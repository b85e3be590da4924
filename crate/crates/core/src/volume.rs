//! Synthetic masked organ volumes: one seeded ellipsoid template per organ,
//! jittered per case, rendered on a taller grid and resampled to `D` slices
//! spread uniformly across the mask's z-extent.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gaussian, stage_rng, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OrganVolume {
    pub organ_id: usize,
    pub case: usize,
    pub voxels: Tensor,
    pub mask: Tensor,
}

impl OrganVolume {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if self.voxels.shape() != dims || self.mask.shape() != dims {
            return Err(Error::Config(format!(
                "volume {}/{} has shape {:?}, expected {:?}",
                self.case,
                self.organ_id,
                self.voxels.shape(),
                dims
            )));
        }
        for (v, m) in self.voxels.data().iter().zip(self.mask.data()) {
            if (*m != 0.0 && *m != 1.0) || (*m == 0.0 && *v != 0.0) || !(0.0..=1.0).contains(v) {
                return Err(Error::Contract(format!(
                    "volume {}/{} violates the masked-intensity invariant",
                    self.case, self.organ_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VolumeConfig {
    pub n_organs: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Cases per organ used for training.
    pub train_cases: usize,
    /// Held-out cases per organ; they form the inference gallery.
    pub test_cases: usize,
    pub intensity_noise: f64,
    pub seed: u64,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        VolumeConfig {
            n_organs: 7,
            depth: 8,
            height: 32,
            width: 32,
            train_cases: 8,
            test_cases: 2,
            intensity_noise: 0.05,
            seed: 0,
        }
    }
}

impl VolumeConfig {
    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn n_cases(&self) -> usize {
        self.train_cases + self.test_cases
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_organs < 2 || self.depth == 0 || self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "volume config needs n_organs >= 2, depth >= 1 and height, width >= 8; got {} organs, {:?}",
                self.n_organs,
                self.dims()
            )));
        }
        if self.train_cases == 0 || self.test_cases == 0 {
            return Err(Error::Config("need at least one train and one test case".into()));
        }
        Ok(())
    }
}

/// Shape and texture parameters shared by every case of one organ.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganTemplate {
    /// Centre as fractions of (height, width).
    pub center: [f64; 2],
    /// Radii as fractions of (z-extent, height, width).
    pub radii: [f64; 3],
    /// Spatial texture frequencies along (z, y, x), radians per voxel.
    pub freq: [f64; 3],
    pub base: f64,
}

pub fn organ_templates(cfg: &VolumeConfig) -> Vec<OrganTemplate> {
    let mut rng = stage_rng(cfg.seed, "volume-templates");
    (0..cfg.n_organs)
        .map(|i| {
            // spread base intensities and frequencies so organs differ per slice
            let t = i as f64 / cfg.n_organs as f64;
            OrganTemplate {
                center: [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)],
                radii: [
                    rng.random_range(0.5..0.95),
                    rng.random_range(0.12..0.4),
                    rng.random_range(0.12..0.4),
                ],
                freq: [
                    rng.random_range(0.2..1.2),
                    0.3 + 1.5 * t + rng.random_range(0.0..0.15),
                    rng.random_range(0.2..1.8),
                ],
                base: 0.35 + 0.4 * ((i * 3) % cfg.n_organs) as f64 / cfg.n_organs as f64,
            }
        })
        .collect()
}

/// Renders one case. The source grid is three times deeper than `D`; the `D`
/// output slices are spaced uniformly between the first and last slice that
/// intersect the mask.
pub fn render_volume(cfg: &VolumeConfig, template: &OrganTemplate, organ_id: usize, case: usize) -> OrganVolume {
    let mut rng = stage_rng(cfg.seed, &format!("volume-{organ_id}-{case}"));
    let (h, w) = (cfg.height, cfg.width);
    let src_d = 3 * cfg.depth.max(4);
    let jitter = |rng: &mut Rng, v: f64, rel: f64| v * (1.0 + rel * (2.0 * rng.random::<f64>() - 1.0));
    let cy = (template.center[0] + 0.04 * gaussian(&mut rng)) * h as f64;
    let cx = (template.center[1] + 0.04 * gaussian(&mut rng)) * w as f64;
    let rz = jitter(&mut rng, template.radii[0], 0.1) * src_d as f64 / 2.0;
    let ry = jitter(&mut rng, template.radii[1], 0.1) * h as f64;
    let rx = jitter(&mut rng, template.radii[2], 0.1) * w as f64;
    let cz = src_d as f64 / 2.0;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let base = jitter(&mut rng, template.base, 0.05);

    let inside = |z: f64, y: f64, x: f64| {
        let (dz, dy, dx) = ((z - cz) / rz, (y - cy) / ry, (x - cx) / rx);
        dz * dz + dy * dy + dx * dx <= 1.0
    };
    let slice_hit = |z: usize| (0..h).any(|y| (0..w).any(|x| inside(z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5)));
    let first = (0..src_d).find(|&z| slice_hit(z)).unwrap_or(0);
    let last = (0..src_d).rev().find(|&z| slice_hit(z)).unwrap_or(src_d - 1);

    let d = cfg.depth;
    let mut vox = vec![0.0; d * h * w];
    let mut mask = vec![0.0; d * h * w];
    for l in 0..d {
        let z = if d == 1 {
            (first + last) as f64 / 2.0
        } else {
            first as f64 + (last - first) as f64 * l as f64 / (d - 1) as f64
        } + 0.5;
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                if !inside(z, yf, xf) {
                    continue;
                }
                let tex = (template.freq[0] * z + template.freq[1] * yf + template.freq[2] * xf + phase).sin();
                let v = base + 0.2 * tex + cfg.intensity_noise * gaussian(&mut rng);
                let i = (l * h + y) * w + x;
                mask[i] = 1.0;
                // keep masked voxels strictly positive so the mask is recoverable
                vox[i] = v.clamp(1e-3, 1.0);
            }
        }
    }
    let shape = vec![d, h, w];
    OrganVolume {
        organ_id,
        case,
        voxels: Tensor::new(shape.clone(), vox).expect("volume extents match"),
        mask: Tensor::new(shape, mask).expect("volume extents match"),
    }
}

/// All cases for all organs, ordered by case then organ.
pub fn generate_volumes(cfg: &VolumeConfig) -> Result<Vec<OrganVolume>> {
    cfg.validate()?;
    let templates = organ_templates(cfg);
    let mut out = Vec::with_capacity(cfg.n_cases() * cfg.n_organs);
    for case in 0..cfg.n_cases() {
        for (organ, t) in templates.iter().enumerate() {
            out.push(render_volume(cfg, t, organ, case));
        }
    }
    Ok(out)
}

/// Splits generated volumes into training cases and held-out gallery cases.
pub fn split_volumes(cfg: &VolumeConfig, volumes: Vec<OrganVolume>) -> (Vec<OrganVolume>, Vec<OrganVolume>) {
    volumes.into_iter().partition(|v| v.case < cfg.train_cases)
}

pub fn volume_paths(dir: &Path, case: usize, organ_id: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{case}_{organ_id}_vox.ten")),
        dir.join(format!("{case}_{organ_id}_mask.ten")),
    )
}

pub fn save_volumes(dir: &Path, volumes: &[OrganVolume]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in volumes {
        let (vp, mp) = volume_paths(dir, v.case, v.organ_id);
        v.voxels.save(&vp)?;
        v.mask.save(&mp)?;
    }
    Ok(())
}

pub fn load_volumes(dir: &Path, cfg: &VolumeConfig) -> Result<Vec<OrganVolume>> {
    let mut out = Vec::new();
    for case in 0..cfg.n_cases() {
        for organ in 0..cfg.n_organs {
            let (vp, mp) = volume_paths(dir, case, organ);
            let v = OrganVolume {
                organ_id: organ,
                case,
                voxels: Tensor::load(&vp)?,
                mask: Tensor::load(&mp)?,
            };
            v.validate(cfg.dims())?;
            out.push(v);
        }
    }
    Ok(out)
}
