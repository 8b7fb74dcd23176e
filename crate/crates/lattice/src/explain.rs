//! Explanation artifacts for one sample: a colormapped heatmap PNG, an
//! overlay PNG (the map alpha-blended onto the input), the raw attention
//! values in a small binary container, and a provenance record tying the
//! files to the checkpoint and config that produced them.
//!
//! Raw α container layout (integers little-endian):
//!
//! ```text
//! magic   4 bytes  "ALFA"
//! version u32      1
//! h, w    u64 × 2
//! data    f32 × h·w, row-major
//! digest  32 bytes SHA-256 of everything above
//! ```
//!
//! Rendering is lossy by design (8-bit color, blending); the raw
//! container is what round-trips, so no rendering choice loses data.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Fraction of the heatmap color blended in where α = 1.
pub const OVERLAY_STRENGTH: f64 = 0.6;

/// Evenly spaced anchor colors of the viridis palette (dark purple to
/// yellow), linearly interpolated between anchors.
const VIRIDIS_ANCHORS: [[f64; 3]; 8] = [
    [0.267, 0.005, 0.329], // #440154
    [0.275, 0.196, 0.494], // #46327e
    [0.212, 0.361, 0.553], // #365c8d
    [0.153, 0.498, 0.557], // #277f8e
    [0.122, 0.631, 0.529], // #1fa187
    [0.290, 0.757, 0.427], // #4ac16d
    [0.627, 0.855, 0.224], // #a0da39
    [0.993, 0.906, 0.145], // #fde725
];

/// Map t ∈ [0,1] (clamped) to an RGB triple in [0,1].
pub fn viridis(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let segments = (VIRIDIS_ANCHORS.len() - 1) as f64;
    let pos = t * segments;
    let lo = (pos.floor() as usize).min(VIRIDIS_ANCHORS.len() - 2);
    let frac = pos - lo as f64;
    let a = VIRIDIS_ANCHORS[lo];
    let b = VIRIDIS_ANCHORS[lo + 1];
    [
        a[0] + (b[0] - a[0]) * frac,
        a[1] + (b[1] - a[1]) * frac,
        a[2] + (b[2] - a[2]) * frac,
    ]
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Colormapped rendering of a saliency map.
pub fn render_heatmap(map: &Array2<f64>) -> RgbImage {
    let (h, w) = map.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let c = viridis(map[[y as usize, x as usize]]);
        p.0 = [to_u8(c[0]), to_u8(c[1]), to_u8(c[2])];
    }
    img
}

/// Blend the heatmap onto the input: out = (1 − s·α)·image + s·α·color,
/// s = `OVERLAY_STRENGTH`. Where α = 0 the input shows through untouched.
pub fn render_overlay(image: &Array3<f64>, map: &Array2<f64>) -> Result<RgbImage> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Input(format!("overlay needs a 3-channel image, got {c}")));
    }
    if map.dim() != (h, w) {
        return Err(Error::Input(format!(
            "map shape {:?} does not match image ({h}, {w})",
            map.dim()
        )));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (yy, xx) = (y as usize, x as usize);
        let alpha = map[[yy, xx]].clamp(0.0, 1.0);
        let weight = OVERLAY_STRENGTH * alpha;
        let color = viridis(alpha);
        for ch in 0..3 {
            let v = (1.0 - weight) * image[[ch, yy, xx]] + weight * color[ch];
            p.0[ch] = to_u8(v);
        }
    }
    Ok(img)
}

const ALPHA_MAGIC: &[u8; 4] = b"ALFA";
const ALPHA_VERSION: u32 = 1;

/// Write the raw attention values (f32). Identical maps produce
/// byte-identical files.
pub fn save_alpha(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut buf = Vec::with_capacity(4 + 4 + 16 + h * w * 4 + 32);
    buf.extend_from_slice(ALPHA_MAGIC);
    buf.extend_from_slice(&ALPHA_VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u64).to_le_bytes());
    buf.extend_from_slice(&(w as u64).to_le_bytes());
    for &v in map.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Read a raw attention container back (widened to f64).
pub fn load_alpha(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 + 4 + 16 + 32 {
        return Err(Error::Input(format!("{} is too short", path.display())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Input(format!("{} is corrupt: digest mismatch", path.display())));
    }
    if &body[..4] != ALPHA_MAGIC {
        return Err(Error::Input(format!("{} is not an attention container", path.display())));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != ALPHA_VERSION {
        return Err(Error::Input(format!("unsupported attention container version {version}")));
    }
    let h = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let w = u64::from_le_bytes(body[16..24].try_into().expect("8 bytes")) as usize;
    let data = &body[24..];
    if data.len() != h * w * 4 {
        return Err(Error::Input(format!(
            "{}: expected {} data bytes, found {}",
            path.display(),
            h * w * 4,
            data.len()
        )));
    }
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((h, w), values)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub sample_id: String,
    pub checkpoint_sha256: String,
    pub config_sha256: String,
    pub predicted_class: usize,
}

#[derive(Debug, Clone)]
pub struct ExplanationArtifact {
    pub heatmap: PathBuf,
    pub overlay: PathBuf,
    pub alpha: PathBuf,
    pub provenance: PathBuf,
}

/// Write all four artifact files under `dir`, named by `stem`.
pub fn write_explanation(
    dir: &Path,
    stem: &str,
    image: &Array3<f64>,
    map: &Array2<f64>,
    provenance: &Provenance,
) -> Result<ExplanationArtifact> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let artifact = ExplanationArtifact {
        heatmap: dir.join(format!("{stem}.heatmap.png")),
        overlay: dir.join(format!("{stem}.overlay.png")),
        alpha: dir.join(format!("{stem}.alpha")),
        provenance: dir.join(format!("{stem}.provenance.json")),
    };
    render_heatmap(map)
        .save(&artifact.heatmap)
        .map_err(|e| Error::Input(format!("cannot write {}: {e}", artifact.heatmap.display())))?;
    render_overlay(image, map)?
        .save(&artifact.overlay)
        .map_err(|e| Error::Input(format!("cannot write {}: {e}", artifact.overlay.display())))?;
    save_alpha(&artifact.alpha, map)?;
    let json = serde_json::to_vec_pretty(provenance)
        .map_err(|e| Error::Internal(format!("cannot encode provenance: {e}")))?;
    fs::write(&artifact.provenance, json).map_err(|e| Error::io(&artifact.provenance, e))?;
    Ok(artifact)
}
