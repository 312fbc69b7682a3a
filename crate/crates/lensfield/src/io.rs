//! On-disk formats.
//!
//! - Cameras: plain-text key-value files, floats printed with 17 significant
//!   digits so they reload bit-exactly.
//! - Field checkpoints: magic `LFVF0001`, a fixed-order header, then raw
//!   little-endian f32 parameter arrays.
//! - Images: 8-bit sRGB PNG and 32-bit linear PFM, written side by side.
//! - Dataset manifests: one text index naming camera files, image files,
//!   split labels, and each image file's encoding.

use crate::error::{Error, Result};
use crate::field::{Aabb, VoxelField};
use crate::optics::Camera;
use crate::render::{linear_to_srgb_u8, srgb_u8_to_linear, LinearImage};
use crate::{Mat3, Rgb, Vec3};
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Formats a float with enough digits to reparse to the identical f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::parse(path, format!("bad float '{s}'")))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Cameras
// ---------------------------------------------------------------------------

pub fn camera_to_text(cam: &Camera) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# lensfield camera");
    let _ = writeln!(s, "width {}", cam.width);
    let _ = writeln!(s, "height {}", cam.height);
    let _ = writeln!(s, "fx {}", fmt_f64(cam.fx));
    let _ = writeln!(s, "fy {}", fmt_f64(cam.fy));
    let _ = writeln!(s, "cx {}", fmt_f64(cam.cx));
    let _ = writeln!(s, "cy {}", fmt_f64(cam.cy));
    let r = &cam.rotation;
    let _ = writeln!(
        s,
        "rotation {} {} {} {} {} {} {} {} {}",
        fmt_f64(r[(0, 0)]),
        fmt_f64(r[(0, 1)]),
        fmt_f64(r[(0, 2)]),
        fmt_f64(r[(1, 0)]),
        fmt_f64(r[(1, 1)]),
        fmt_f64(r[(1, 2)]),
        fmt_f64(r[(2, 0)]),
        fmt_f64(r[(2, 1)]),
        fmt_f64(r[(2, 2)])
    );
    let _ = writeln!(
        s,
        "translation {} {} {}",
        fmt_f64(cam.translation.x),
        fmt_f64(cam.translation.y),
        fmt_f64(cam.translation.z)
    );
    let _ = writeln!(s, "aperture_radius {}", fmt_f64(cam.aperture_radius));
    let _ = writeln!(s, "focal_length {}", fmt_f64(cam.focal_length));
    let _ = writeln!(s, "focus_distance {}", fmt_f64(cam.focus_distance));
    s
}

pub fn save_camera(path: &Path, cam: &Camera) -> Result<()> {
    write_text(path, &camera_to_text(cam))
}

pub fn camera_from_text(path: &Path, text: &str) -> Result<Camera> {
    let mut width = None;
    let mut height = None;
    let mut fx = None;
    let mut fy = None;
    let mut cx = None;
    let mut cy = None;
    let mut rotation = None;
    let mut translation = None;
    let mut aperture = None;
    let mut focal = None;
    let mut focus = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().unwrap();
        let vals: Vec<&str> = it.collect();
        let one = || -> Result<&str> {
            vals.first()
                .copied()
                .ok_or_else(|| Error::parse(path, format!("missing value for '{key}'")))
        };
        match key {
            "width" => {
                width = Some(one()?.parse::<u32>().map_err(|_| {
                    Error::parse(path, "bad width")
                })?)
            }
            "height" => {
                height = Some(one()?.parse::<u32>().map_err(|_| {
                    Error::parse(path, "bad height")
                })?)
            }
            "fx" => fx = Some(parse_f64(path, one()?)?),
            "fy" => fy = Some(parse_f64(path, one()?)?),
            "cx" => cx = Some(parse_f64(path, one()?)?),
            "cy" => cy = Some(parse_f64(path, one()?)?),
            "rotation" => {
                if vals.len() != 9 {
                    return Err(Error::parse(path, "rotation needs 9 values"));
                }
                let mut m = [0.0; 9];
                for (i, v) in vals.iter().enumerate() {
                    m[i] = parse_f64(path, v)?;
                }
                rotation = Some(Mat3::new(
                    m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8],
                ));
            }
            "translation" => {
                if vals.len() != 3 {
                    return Err(Error::parse(path, "translation needs 3 values"));
                }
                translation = Some(Vec3::new(
                    parse_f64(path, vals[0])?,
                    parse_f64(path, vals[1])?,
                    parse_f64(path, vals[2])?,
                ));
            }
            "aperture_radius" => aperture = Some(parse_f64(path, one()?)?),
            "focal_length" => focal = Some(parse_f64(path, one()?)?),
            "focus_distance" => focus = Some(parse_f64(path, one()?)?),
            other => {
                return Err(Error::parse(path, format!("unknown camera key '{other}'")));
            }
        }
    }
    let missing = |name: &str| Error::parse(path, format!("missing camera key '{name}'"));
    let cam = Camera {
        width: width.ok_or_else(|| missing("width"))?,
        height: height.ok_or_else(|| missing("height"))?,
        fx: fx.ok_or_else(|| missing("fx"))?,
        fy: fy.ok_or_else(|| missing("fy"))?,
        cx: cx.ok_or_else(|| missing("cx"))?,
        cy: cy.ok_or_else(|| missing("cy"))?,
        rotation: rotation.ok_or_else(|| missing("rotation"))?,
        translation: translation.ok_or_else(|| missing("translation"))?,
        aperture_radius: aperture.ok_or_else(|| missing("aperture_radius"))?,
        focal_length: focal.ok_or_else(|| missing("focal_length"))?,
        focus_distance: focus.ok_or_else(|| missing("focus_distance"))?,
    };
    cam.validate()?;
    Ok(cam)
}

pub fn load_camera(path: &Path) -> Result<Camera> {
    camera_from_text(path, &read_text(path)?)
}

// ---------------------------------------------------------------------------
// Field checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LFVF0001";
const ACTIVATION_SOFTPLUS: u32 = 0;
const ACTIVATION_SIGMOID: u32 = 1;

pub fn save_checkpoint(path: &Path, field: &VoxelField) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for n in field.resolution {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in [
        field.bbox.min.x,
        field.bbox.min.y,
        field.bbox.min.z,
        field.bbox.max.x,
        field.bbox.max.y,
        field.bbox.max.z,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&ACTIVATION_SOFTPLUS.to_le_bytes());
    buf.extend_from_slice(&ACTIVATION_SIGMOID.to_le_bytes());
    for &d in field.density_raw() {
        buf.extend_from_slice(&(d as f32).to_le_bytes());
    }
    for &c in field.color_raw() {
        buf.extend_from_slice(&(c as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<VoxelField> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::parse(path, "truncated checkpoint"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let magic = take(&mut off, 8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(path, "bad checkpoint magic"));
    }
    let mut res = [0usize; 3];
    for r in &mut res {
        *r = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    }
    let mut b = [0f64; 6];
    for v in &mut b {
        *v = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    }
    let act_d = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    let act_c = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if act_d != ACTIVATION_SOFTPLUS || act_c != ACTIVATION_SIGMOID {
        return Err(Error::parse(
            path,
            format!("unsupported activation ids ({act_d}, {act_c})"),
        ));
    }
    let bbox = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))?;
    let corners = (res[0] + 1) * (res[1] + 1) * (res[2] + 1);
    let mut density = Vec::with_capacity(corners);
    for _ in 0..corners {
        density.push(f32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as f64);
    }
    let mut color = Vec::with_capacity(corners * 3);
    for _ in 0..corners * 3 {
        color.push(f32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as f64);
    }
    if off != bytes.len() {
        return Err(Error::parse(path, "trailing bytes in checkpoint"));
    }
    VoxelField::from_raw(res, bbox, density, color)
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// Writes an 8-bit sRGB-encoded PNG.
pub fn write_png_srgb(path: &Path, img: &LinearImage) -> Result<()> {
    let mut out = image::RgbImage::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let c = img.get(x, y);
            out.put_pixel(
                x,
                y,
                image::Rgb([
                    linear_to_srgb_u8(c.x),
                    linear_to_srgb_u8(c.y),
                    linear_to_srgb_u8(c.z),
                ]),
            );
        }
    }
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Reads an 8-bit PNG as raw sRGB bytes.
pub fn read_png_srgb_u8(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w, h, img.into_raw()))
}

/// Reads an 8-bit sRGB PNG and decodes it to linear space.
pub fn read_png_linear(path: &Path) -> Result<LinearImage> {
    let (w, h, data) = read_png_srgb_u8(path)?;
    let pixels = data
        .chunks_exact(3)
        .map(|p| {
            Rgb::new(
                srgb_u8_to_linear(p[0]),
                srgb_u8_to_linear(p[1]),
                srgb_u8_to_linear(p[2]),
            )
        })
        .collect();
    LinearImage::from_pixels(w, h, pixels)
}

/// Writes a 3-channel 32-bit float PFM (linear, little-endian, bottom-up).
pub fn write_pfm(path: &Path, img: &LinearImage) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!("PF\n{} {}\n-1.0\n", img.width, img.height);
    file.write_all(header.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity((img.width * img.height * 12) as usize);
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            let c = img.get(x, y);
            buf.extend_from_slice(&(c.x as f32).to_le_bytes());
            buf.extend_from_slice(&(c.y as f32).to_le_bytes());
            buf.extend_from_slice(&(c.z as f32).to_le_bytes());
        }
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a 3-channel PFM written by [`write_pfm`].
pub fn read_pfm(path: &Path) -> Result<LinearImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    // Header: three newline-terminated tokens.
    let mut pos = 0usize;
    let mut next_line = || -> Result<String> {
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b'\n' {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(Error::parse(path, "truncated PFM header"));
        }
        let line = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        pos += 1;
        Ok(line)
    };
    let kind = next_line()?;
    if kind.trim() != "PF" {
        return Err(Error::parse(path, "not a color PFM"));
    }
    let dims = next_line()?;
    let mut it = dims.split_whitespace();
    let w: u32 = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(path, "bad PFM width"))?;
    let h: u32 = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(path, "bad PFM height"))?;
    let scale: f64 = next_line()?
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, "bad PFM scale"))?;
    if scale >= 0.0 {
        return Err(Error::parse(path, "big-endian PFM unsupported"));
    }
    let need = (w as usize) * (h as usize) * 12;
    if bytes.len() - pos != need {
        return Err(Error::parse(
            path,
            format!("PFM payload is {} bytes, expected {need}", bytes.len() - pos),
        ));
    }
    let mut img = LinearImage::new(w, h);
    let mut off = pos;
    for y in (0..h).rev() {
        for x in 0..w {
            let mut c = [0.0f64; 3];
            for v in &mut c {
                *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
                off += 4;
            }
            img.set(x, y, Rgb::new(c[0], c[1], c[2]));
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub index: usize,
    pub split: Split,
    pub camera_path: PathBuf,
    pub image_srgb: PathBuf,
    pub image_linear: PathBuf,
}

/// Index of a fabricated dataset, including the ground-truth lens settings
/// the training images were rendered with.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub scene: String,
    pub bbox: Aabb,
    pub aperture_radius: f64,
    pub focus_distance: f64,
    pub focal_length: f64,
    pub entries: Vec<ManifestEntry>,
}

pub fn manifest_to_text(m: &Manifest) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# lensfield dataset");
    let _ = writeln!(s, "scene {}", m.scene);
    let _ = writeln!(
        s,
        "bbox {} {} {} {} {} {}",
        fmt_f64(m.bbox.min.x),
        fmt_f64(m.bbox.min.y),
        fmt_f64(m.bbox.min.z),
        fmt_f64(m.bbox.max.x),
        fmt_f64(m.bbox.max.y),
        fmt_f64(m.bbox.max.z)
    );
    let _ = writeln!(s, "aperture_radius {}", fmt_f64(m.aperture_radius));
    let _ = writeln!(s, "focus_distance {}", fmt_f64(m.focus_distance));
    let _ = writeln!(s, "focal_length {}", fmt_f64(m.focal_length));
    for e in &m.entries {
        let _ = writeln!(
            s,
            "view {:03} {} {} {} srgb {} linear",
            e.index,
            e.split.as_str(),
            e.camera_path.display(),
            e.image_srgb.display(),
            e.image_linear.display()
        );
    }
    s
}

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<()> {
    write_text(path, &manifest_to_text(m))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = read_text(path)?;
    let mut scene = None;
    let mut bbox = None;
    let mut aperture = None;
    let mut focus = None;
    let mut focal = None;
    let mut entries = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "scene" => scene = Some(fields.get(1).unwrap_or(&"").to_string()),
            "bbox" => {
                if fields.len() != 7 {
                    return Err(Error::parse(path, "bbox needs 6 values"));
                }
                let mut v = [0f64; 6];
                for (i, f) in fields[1..].iter().enumerate() {
                    v[i] = parse_f64(path, f)?;
                }
                bbox = Some(Aabb::new(
                    Vec3::new(v[0], v[1], v[2]),
                    Vec3::new(v[3], v[4], v[5]),
                )?);
            }
            "aperture_radius" => aperture = Some(parse_f64(path, fields[1])?),
            "focus_distance" => focus = Some(parse_f64(path, fields[1])?),
            "focal_length" => focal = Some(parse_f64(path, fields[1])?),
            "view" => {
                if fields.len() != 8 || fields[5] != "srgb" || fields[7] != "linear" {
                    return Err(Error::parse(path, format!("bad view line '{line}'")));
                }
                let split = match fields[2] {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    other => {
                        return Err(Error::parse(path, format!("unknown split '{other}'")))
                    }
                };
                entries.push(ManifestEntry {
                    index: fields[1]
                        .parse()
                        .map_err(|_| Error::parse(path, "bad view index"))?,
                    split,
                    camera_path: fields[3].into(),
                    image_srgb: fields[4].into(),
                    image_linear: fields[6].into(),
                });
            }
            other => {
                return Err(Error::parse(path, format!("unknown manifest key '{other}'")));
            }
        }
    }
    let missing = |name: &str| Error::parse(path, format!("missing manifest key '{name}'"));
    Ok(Manifest {
        scene: scene.ok_or_else(|| missing("scene"))?,
        bbox: bbox.ok_or_else(|| missing("bbox"))?,
        aperture_radius: aperture.ok_or_else(|| missing("aperture_radius"))?,
        focus_distance: focus.ok_or_else(|| missing("focus_distance"))?,
        focal_length: focal.ok_or_else(|| missing("focal_length"))?,
        entries,
    })
}

/// One loaded view: camera plus its linear-space target image.
#[derive(Debug, Clone)]
pub struct DatasetView {
    pub name: String,
    pub split: Split,
    pub camera: Camera,
    /// Target in linear space (decoded from the sRGB training image).
    pub target: LinearImage,
}

/// A dataset pulled fully into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scene: String,
    pub bbox: Aabb,
    pub aperture_radius: f64,
    pub focus_distance: f64,
    pub focal_length: f64,
    pub views: Vec<DatasetView>,
}

impl Dataset {
    pub fn train_views(&self) -> impl Iterator<Item = &DatasetView> {
        self.views.iter().filter(|v| v.split == Split::Train)
    }

    pub fn val_views(&self) -> impl Iterator<Item = &DatasetView> {
        self.views.iter().filter(|v| v.split == Split::Val)
    }
}

/// Loads a dataset directory through its manifest. Training targets are the
/// sRGB PNGs decoded to linear space.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = load_manifest(&manifest_path)?;
    let mut views = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let camera = load_camera(&dir.join(&e.camera_path))?;
        let target = read_png_linear(&dir.join(&e.image_srgb))?;
        if (target.width, target.height) != (camera.width, camera.height) {
            return Err(Error::parse(
                dir.join(&e.image_srgb),
                format!(
                    "image is {}x{} but camera expects {}x{}",
                    target.width, target.height, camera.width, camera.height
                ),
            ));
        }
        views.push(DatasetView {
            name: format!("{}_{:03}", e.split.as_str(), e.index),
            split: e.split,
            camera,
            target,
        });
    }
    Ok(Dataset {
        scene: manifest.scene,
        bbox: manifest.bbox,
        aperture_radius: manifest.aperture_radius,
        focus_distance: manifest.focus_distance,
        focal_length: manifest.focal_length,
        views,
    })
}
