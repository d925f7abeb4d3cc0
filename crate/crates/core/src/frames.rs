//! Frame input: binary PPM files or a tensor archive holding `frames`.
//!
//! Pixels are held as `[3 × H × W]` tensors with values in `[0, 1]`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{bail, Result};
use crate::numerics::{Archive, Tensor};
use crate::scalar::Scalar;

pub const FRAMES_KEY: &str = "frames";

fn next_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
    }
    if tok.is_empty() {
        bail!(Format, "PPM header ended early");
    }
    Ok(String::from_utf8_lossy(&tok).into_owned())
}

pub fn read_ppm<T: Scalar, R: Read>(r: R) -> Result<Tensor<T>> {
    let mut r = BufReader::new(r);
    if next_token(&mut r)? != "P6" {
        bail!(Format, "not a binary PPM (P6)");
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = next_token(&mut r)?;
        t.parse()
            .map_err(|_| crate::Error::Format(format!("bad PPM {what}: {t:?}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        bail!(Format, "only 8-bit PPM is supported, maxval {maxval}");
    }
    if w == 0 || h == 0 {
        bail!(Format, "empty PPM image");
    }
    let mut raw = vec![0u8; w * h * 3];
    r.read_exact(&mut raw)
        .map_err(|e| crate::Error::Format(format!("PPM pixel data truncated: {e}")))?;
    let mut data = vec![T::zero(); 3 * h * w];
    for (k, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + k] = T::lit(px[c] as f64 / 255.0);
        }
    }
    Tensor::new([3, h, w], data)
}

pub fn write_ppm<T: Scalar, W: Write>(image: &Tensor<T>, mut w: W) -> Result<()> {
    let &[3, h, wd] = image.shape() else {
        bail!(Dimension, "PPM needs a 3×H×W image, got {:?}", image.shape());
    };
    write!(w, "P6\n{wd} {h}\n255\n")?;
    let px = image.data();
    let mut raw = Vec::with_capacity(h * wd * 3);
    for k in 0..h * wd {
        for c in 0..3 {
            let v = px[c * h * wd + k].as_f64();
            raw.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    w.write_all(&raw)?;
    Ok(())
}

pub fn load_ppm<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_ppm(fs::File::open(path)?)
}

pub fn save_ppm<T: Scalar>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    write_ppm(image, std::io::BufWriter::new(fs::File::create(path)?))
}

/// Stacks frames into one `[T × 3 × H × W]` archive entry.
pub fn frames_to_archive<T: Scalar>(frames: &[Tensor<T>]) -> Result<Archive> {
    let Some(first) = frames.first() else {
        bail!(Contract, "no frames to store");
    };
    let mut data = Vec::with_capacity(first.len() * frames.len());
    for f in frames {
        if f.shape() != first.shape() {
            bail!(Dimension, "frame shapes {:?} and {:?} differ", first.shape(), f.shape());
        }
        data.extend_from_slice(f.data());
    }
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(first.shape());
    let mut a = Archive::new();
    a.insert(FRAMES_KEY, &Tensor::new(shape, data)?);
    Ok(a)
}

pub fn frames_from_archive<T: Scalar>(archive: &Archive) -> Result<Vec<Tensor<T>>> {
    let Some(t) = archive.get(FRAMES_KEY) else {
        bail!(Format, "archive has no {FRAMES_KEY:?} tensor");
    };
    let &[n, c, h, w] = t.shape() else {
        bail!(Format, "{FRAMES_KEY:?} must be T×3×H×W, got {:?}", t.shape());
    };
    if c != 3 {
        bail!(Format, "frames must have 3 channels, got {c}");
    }
    let per = c * h * w;
    (0..n)
        .map(|i| Tensor::new([c, h, w], t.data()[i * per..(i + 1) * per].iter().map(|&v| T::lit(v as f64)).collect()))
        .collect()
}

/// Loads a video from a directory of `.ppm` files (sorted by name) or from
/// a frames archive file.
pub fn load_frames<T: Scalar>(source: impl AsRef<Path>) -> Result<Vec<Tensor<T>>> {
    let source = source.as_ref();
    if source.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(source)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            bail!(Format, "no .ppm frames in {}", source.display());
        }
        paths.iter().map(load_ppm).collect()
    } else {
        frames_from_archive(&Archive::load(source)?)
    }
}
