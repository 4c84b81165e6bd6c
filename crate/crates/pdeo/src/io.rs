//! File formats: binary PPM images, CSV numeric formatting, and the
//! bit-exact text checkpoint.

use crate::config::Mode;
use crate::core::{Aabb, RawGaussian, Rotation, Scene};
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::optimizer::OptimizerState;
use crate::splat::Image;
use crate::{Mat3, Vec3, F};
use std::io::{BufWriter, Write};
use std::path::Path;

/// Fixed 9-significant-digit float formatting used by every CSV and text
/// export (`.` decimal separator, `\n` line endings handled by callers).
pub fn fmt_sig9(x: F) -> String {
    format!("{x:.8e}")
}

/// Write a binary PPM (P6, maxval 255) with round-to-nearest quantization.
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height)?;
    let mut buf = Vec::with_capacity(image.pixels.len() * 3);
    for p in &image.pixels {
        for &c in p {
            buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Read a binary PPM written by [`write_ppm`] (P6, maxval 255).
pub fn read_ppm(path: &Path) -> Result<Image> {
    let data = std::fs::read(path)?;
    let bad = |m: &str| Error::Usage(format!("{}: {m}", path.display()));
    // Header: three whitespace-separated tokens after the magic.
    if !data.starts_with(b"P6") {
        return Err(bad("not a P6 PPM"));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let tok = std::str::from_utf8(&data[start..pos]).map_err(|_| bad("bad header"))?;
        fields.push(tok.parse::<usize>().map_err(|_| bad("bad header value"))?);
    }
    pos += 1; // single whitespace after maxval
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    let need = width * height * 3;
    if data.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let mut image = Image::new(width, height);
    for i in 0..width * height {
        for c in 0..3 {
            image.pixels[i][c] = data[pos + 3 * i + c] as F / 255.0;
        }
    }
    Ok(image)
}

// ---------------------------------------------------------------------------
// Checkpoint: versioned text dump, f64 stored as hex bit patterns so the
// round trip is exact.

const CHECKPOINT_VERSION: u32 = 1;

fn hx(x: F) -> String {
    format!("{:016x}", x.to_bits())
}

fn unhx(tok: &str) -> Result<F> {
    u64::from_str_radix(tok, 16)
        .map(F::from_bits)
        .map_err(|_| Error::Usage(format!("bad checkpoint float `{tok}`")))
}

pub fn save_checkpoint(path: &Path, scene: &Scene, state: &OptimizerState) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    writeln!(w, "pdeo-checkpoint {CHECKPOINT_VERSION}")?;
    writeln!(
        w,
        "mode {}",
        match scene.mode {
            Mode::Image2d => "image2d",
            Mode::Ortho3d => "ortho3d",
        }
    )?;
    writeln!(
        w,
        "bbox {} {} {} {} {} {}",
        hx(scene.bbox.min.x),
        hx(scene.bbox.min.y),
        hx(scene.bbox.min.z),
        hx(scene.bbox.max.x),
        hx(scene.bbox.max.y),
        hx(scene.bbox.max.z)
    )?;
    writeln!(w, "gaussians {}", scene.len())?;
    for g in &scene.gaussians {
        let mut cols: Vec<String> = Vec::with_capacity(24);
        for v in [&g.mu, &g.color, &g.log_scale] {
            for i in 0..3 {
                cols.push(hx(v[i]));
            }
        }
        cols.push(hx(g.opacity));
        cols.push(hx(g.depth_key));
        match g.rot {
            Rotation::Angle(a) => {
                cols.push("a".into());
                cols.push(hx(a));
            }
            Rotation::Matrix(m) => {
                cols.push("m".into());
                for x in m.iter() {
                    cols.push(hx(*x));
                }
            }
        }
        writeln!(w, "{}", cols.join(" "))?;
    }
    state.write_text(&mut w)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Scene, OptimizerState)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |m: &str| Error::Usage(format!("checkpoint: {m}"));
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    if header != format!("pdeo-checkpoint {CHECKPOINT_VERSION}") {
        return Err(bad("unsupported version"));
    }
    let mode_line = lines.next().ok_or_else(|| bad("missing mode"))?;
    let mode = match mode_line.strip_prefix("mode ") {
        Some("image2d") => Mode::Image2d,
        Some("ortho3d") => Mode::Ortho3d,
        _ => return Err(bad("bad mode line")),
    };
    let bbox_line = lines.next().ok_or_else(|| bad("missing bbox"))?;
    let toks: Vec<&str> = bbox_line
        .strip_prefix("bbox ")
        .ok_or_else(|| bad("bad bbox line"))?
        .split_whitespace()
        .collect();
    if toks.len() != 6 {
        return Err(bad("bad bbox arity"));
    }
    let v: Vec<F> = toks.iter().map(|t| unhx(t)).collect::<Result<_>>()?;
    let bbox = Aabb {
        min: Vec3::new(v[0], v[1], v[2]),
        max: Vec3::new(v[3], v[4], v[5]),
    };
    let count_line = lines.next().ok_or_else(|| bad("missing gaussian count"))?;
    let count: usize = count_line
        .strip_prefix("gaussians ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad gaussian count"))?;
    let mut gaussians = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad("truncated gaussians"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 12 {
            return Err(bad("short gaussian line"));
        }
        let f = |i: usize| unhx(toks[i]);
        let mu = Vec3::new(f(0)?, f(1)?, f(2)?);
        let color = Vec3::new(f(3)?, f(4)?, f(5)?);
        let log_scale = Vec3::new(f(6)?, f(7)?, f(8)?);
        let opacity = f(9)?;
        let depth_key = f(10)?;
        let rot = match toks[11] {
            "a" => Rotation::Angle(unhx(toks.get(12).ok_or_else(|| bad("missing angle"))?)?),
            "m" => {
                if toks.len() != 21 {
                    return Err(bad("bad matrix arity"));
                }
                let mut m = Mat3::zeros();
                for (k, slot) in m.iter_mut().enumerate() {
                    *slot = unhx(toks[12 + k])?;
                }
                Rotation::Matrix(m)
            }
            _ => return Err(bad("bad rotation tag")),
        };
        gaussians.push(RawGaussian {
            mu,
            color,
            opacity,
            log_scale,
            rot,
            depth_key,
        });
    }
    let scene = Scene {
        gaussians,
        mode,
        bbox,
    };
    let state = OptimizerState::read_text(&mut lines)?;
    Ok((scene, state))
}

// Text (de)serialization helpers shared with the optimizer state.
pub(crate) fn write_vec3_line<W: Write>(w: &mut W, tag: &str, v: &[Vec3]) -> std::io::Result<()> {
    write!(w, "{tag}")?;
    for x in v {
        write!(w, " {} {} {}", hx(x.x), hx(x.y), hx(x.z))?;
    }
    writeln!(w)
}

pub(crate) fn write_f_line<W: Write>(w: &mut W, tag: &str, v: &[F]) -> std::io::Result<()> {
    write!(w, "{tag}")?;
    for x in v {
        write!(w, " {}", hx(*x))?;
    }
    writeln!(w)
}

pub(crate) fn read_tagged_floats(line: &str, tag: &str) -> Result<Vec<F>> {
    let rest = line
        .strip_prefix(tag)
        .ok_or_else(|| Error::Usage(format!("checkpoint: expected `{tag}` line")))?;
    rest.split_whitespace().map(unhx).collect()
}

pub(crate) fn floats_to_vec3(v: Vec<F>) -> Result<Vec<Vec3>> {
    if !v.len().is_multiple_of(3) {
        return Err(Error::Usage("checkpoint: vec3 arity".into()));
    }
    Ok(v.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

/// Re-export used by the velocity field snapshot command.
pub fn write_field_snapshot(path: &Path, field: &VelocityField) -> Result<()> {
    std::fs::write(path, field.snapshot())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.5), "5.00000000e-1");
        assert_eq!(fmt_sig9(123.456), "1.23456000e2");
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = std::env::temp_dir().join("pdeo_ppm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ppm");
        let mut img = Image::new(5, 3);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = [
                (i as F / 20.0).min(1.0),
                1.0 - (i as F / 20.0).min(1.0),
                0.25,
            ];
        }
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.width, 5);
        assert_eq!(back.height, 3);
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
