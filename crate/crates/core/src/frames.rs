//! Frame dumps: one binary PPM (or PGM for single-channel video) per frame,
//! named `frame_{index:04}.ppm`, plus a plain-text manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// `round((v + 0.5)·255)` clamped to a byte.
pub fn to_byte(v: f64) -> u8 {
    ((v + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0 - 0.5
}

pub fn frame_file_name(index: i64) -> String {
    format!("frame_{index:04}.ppm")
}

/// Encodes one `[H, W, C]` frame (`C` is 1 or 3).
pub fn encode_ppm(frame: &[f64], h: usize, w: usize, c: usize) -> Result<Vec<u8>> {
    if frame.len() != h * w * c || !(c == 1 || c == 3) {
        return Err(Error::contract(format!("frame of {} values is not {h}x{w}x{c} with 1 or 3 channels", frame.len())));
    }
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Decodes a binary PPM/PGM into `([H, W, C] values, h, w, c)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(Vec<f64>, usize, usize, usize)> {
    let bad = |m: &str| Error::contract(format!("malformed pixmap: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?.to_string());
    }
    pos += 1;
    let c = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(bad(&format!("unsupported magic {other}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit pixmaps are supported"));
    }
    let payload = bytes.get(pos..).ok_or_else(|| bad("missing pixel data"))?;
    if payload.len() != h * w * c {
        return Err(bad(&format!("expected {} pixel bytes, found {}", h * w * c, payload.len())));
    }
    Ok((payload.iter().map(|&b| from_byte(b)).collect(), h, w, c))
}

/// A dumped clip: optional condition frame (index −1) and `T` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDump {
    pub shape: [usize; 3],
    pub frames: Vec<Vec<f64>>,
    pub condition: Option<Vec<f64>>,
    /// Extra `key value` manifest records.
    pub meta: Vec<(String, String)>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the frames and `manifest.txt` into `dir`.
pub fn write_dump(dir: &Path, dump: &FrameDump) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [h, w, c] = dump.shape;
    let mut manifest = format!("frames {}\nheight {h}\nwidth {w}\nchannels {c}\n", dump.frames.len());
    for (k, v) in &dump.meta {
        let _ = writeln!(manifest, "{k} {v}");
    }
    let indexed = dump
        .condition
        .iter()
        .map(|f| (-1i64, f))
        .chain(dump.frames.iter().enumerate().map(|(i, f)| (i as i64, f)));
    for (index, frame) in indexed {
        let name = frame_file_name(index);
        write_file(&dir.join(&name), &encode_ppm(frame, h, w, c)?)?;
        let _ = writeln!(manifest, "frame {index} {name}");
    }
    write_file(&dir.join("manifest.txt"), manifest.as_bytes())
}

/// Reads a dump written by [`write_dump`].
pub fn read_dump(dir: &Path) -> Result<FrameDump> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut shape = [0; 3];
    let mut frames = Vec::new();
    let mut condition = None;
    let mut meta = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::contract(format!("manifest line `{line}`")));
        match key {
            "frames" => {}
            "height" => shape[0] = parse(rest)?,
            "width" => shape[1] = parse(rest)?,
            "channels" => shape[2] = parse(rest)?,
            "frame" => {
                let (idx, name) = rest.split_once(' ').ok_or_else(|| Error::contract(format!("manifest line `{line}`")))?;
                let fp = dir.join(name);
                let bytes = fs::read(&fp).map_err(|e| Error::io(&fp, e))?;
                let (values, h, w, c) = decode_ppm(&bytes)?;
                if [h, w, c] != shape {
                    return Err(Error::contract(format!("{name} is {h}x{w}x{c}, manifest says {shape:?}")));
                }
                if idx == "-1" {
                    condition = Some(values);
                } else {
                    frames.push(values);
                }
            }
            _ => meta.push((key.to_string(), rest.to_string())),
        }
    }
    Ok(FrameDump {
        shape,
        frames,
        condition,
        meta,
    })
}

/// Splits a row-major `[T, H, W, C]` clip into frames.
pub fn split_frames(video: &[f64], shape: [usize; 4]) -> Vec<Vec<f64>> {
    let [_, h, w, c] = shape;
    video.chunks(h * w * c).map(<[f64]>::to_vec).collect()
}

/// Persists a dataset as one dump per sample plus `manifest.txt` with one
/// `id class path` record per sample.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [t, h, w] = data.spec.resolution;
    let c = data.spec.channels;
    let mut manifest = String::new();
    let mut paths = Vec::with_capacity(data.len());
    for s in &data.samples {
        let name = format!("sample_{:05}", s.id);
        let video: Vec<f64> = s.video.iter().map(|&v| v as f64).collect();
        write_dump(
            &dir.join(&name),
            &FrameDump {
                shape: [h, w, c],
                frames: split_frames(&video, [t, h, w, c]),
                condition: None,
                meta: vec![("label".into(), s.label.to_string())],
            },
        )?;
        let _ = writeln!(manifest, "{} {} {name}", s.id, s.label);
        paths.push(dir.join(name));
    }
    write_file(&dir.join("manifest.txt"), manifest.as_bytes())?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_endpoints() {
        assert_eq!(to_byte(-0.5), 0);
        assert_eq!(to_byte(0.5), 255);
        assert_eq!(to_byte(0.0), 128);
        assert_eq!(to_byte(3.0), 255);
        for b in 0..=255u8 {
            assert_eq!(to_byte(from_byte(b)), b);
        }
    }

    #[test]
    fn ppm_header_and_round_trip() {
        let frame: Vec<f64> = (0..2 * 3 * 3).map(|i| from_byte((i * 13) as u8)).collect();
        let bytes = encode_ppm(&frame, 2, 3, 3).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let (back, h, w, c) = decode_ppm(&bytes).unwrap();
        assert_eq!((h, w, c), (2, 3, 3));
        assert_eq!(back, frame);
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn dump_round_trips_with_condition_frame() {
        let dir = tempfile::tempdir().unwrap();
        let px = |k: usize| (0..4 * 4 * 3).map(|i| from_byte(((i * 7 + k * 31) % 256) as u8)).collect::<Vec<_>>();
        let dump = FrameDump {
            shape: [4, 4, 3],
            frames: (0..3).map(px).collect(),
            condition: Some(px(9)),
            meta: vec![("label".into(), "2".into())],
        };
        write_dump(dir.path(), &dump).unwrap();
        assert!(dir.path().join("frame_-001.ppm").exists());
        assert!(dir.path().join("frame_0002.ppm").exists());
        assert_eq!(read_dump(dir.path()).unwrap(), dump);
    }
}
